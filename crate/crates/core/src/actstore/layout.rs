// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::error::{Result, XlgError};

/// Per-layer neuron counts and the global index space they induce.
///
/// Global index `g` belongs to the layer `l` with `offset[l] <= g < offset[l + 1]`
/// and has within-layer index `g - offset[l]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct LayerLayout {
    sizes: Vec<usize>,
    offsets: Vec<usize>,
}

impl LayerLayout {
    pub fn new(sizes: Vec<usize>) -> Result<Self> {
        if sizes.is_empty() {
            return Err(XlgError::Validation("layout has no layers".into()));
        }
        if let Some(l) = sizes.iter().position(|&s| s == 0) {
            return Err(XlgError::Validation(format!("layer {l} has zero neurons")));
        }
        let mut offsets = Vec::with_capacity(sizes.len() + 1);
        let mut acc = 0usize;
        offsets.push(0);
        for &s in &sizes {
            acc = acc
                .checked_add(s)
                .ok_or_else(|| XlgError::Validation("layout size overflows".into()))?;
            offsets.push(acc);
        }
        Ok(LayerLayout { sizes, offsets })
    }

    /// `n_layers` layers of `width` neurons each.
    pub fn uniform(n_layers: usize, width: usize) -> Result<Self> {
        Self::new(vec![width; n_layers])
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn n_layers(&self) -> usize {
        self.sizes.len()
    }

    /// Total neuron count M.
    pub fn total(&self) -> usize {
        self.offsets[self.sizes.len()]
    }

    pub fn layer_offset(&self, layer: usize) -> usize {
        self.offsets[layer]
    }

    /// Global index → (layer, within-layer index).
    pub fn locate(&self, global: usize) -> Option<(usize, usize)> {
        if global >= self.total() {
            return None;
        }
        // first offset strictly greater than `global`, minus one
        let layer = self.offsets.partition_point(|&o| o <= global) - 1;
        Some((layer, global - self.offsets[layer]))
    }

    /// (layer, within-layer index) → global index.
    pub fn global(&self, layer: usize, index: usize) -> Option<usize> {
        let size = *self.sizes.get(layer)?;
        (index < size).then(|| self.offsets[layer] + index)
    }
}

impl TryFrom<Vec<usize>> for LayerLayout {
    type Error = XlgError;

    fn try_from(sizes: Vec<usize>) -> Result<Self> {
        LayerLayout::new(sizes)
    }
}

impl From<LayerLayout> for Vec<usize> {
    fn from(layout: LayerLayout) -> Self {
        layout.sizes
    }
}
