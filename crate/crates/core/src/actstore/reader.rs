// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fs::File;
use std::io::{BufReader, Read};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};

use super::{
    check_finite, column_width, scatter_tile, ActivationMatrix, ColumnSource, MatrixHeader, MAGIC, TILE_ROWS,
};
use crate::container;
use crate::error::{Result, XlgError};

/// Open XLGA file with a validated header; the payload is read on demand.
///
/// Column reads use positioned I/O (`pread`), so a single handle can serve
/// any number of worker threads.
#[derive(Debug)]
pub struct XlgaFile {
    file: File,
    path: PathBuf,
    header: MatrixHeader,
    payload_offset: u64,
}

impl XlgaFile {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::open(&path).map_err(|e| XlgError::io(&path, e))?;
        let mut reader = BufReader::new(&file);
        let raw = container::read_prefix(&mut reader, MAGIC)?;
        let header: MatrixHeader = serde_json::from_slice(&raw)
            .map_err(|e| XlgError::Format(format!("{}: bad header: {e}", path.display())))?;
        header.validate()?;
        if header.n_rows == 0 {
            return Err(XlgError::Format(format!("{}: zero-row matrix", path.display())));
        }
        let payload_offset = (container::PREFIX_LEN + raw.len()) as u64;
        let len = file.metadata().map_err(|e| XlgError::io(&path, e))?.len();
        let found = len.saturating_sub(payload_offset);
        let expected = header.payload_bytes();
        if found != expected {
            return Err(XlgError::Length { expected, found });
        }
        Ok(XlgaFile {
            file,
            path,
            header,
            payload_offset,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Reads the whole payload into memory, checking finiteness.
    pub fn read_all(&self) -> Result<ActivationMatrix> {
        let m = self.header.n_cols();
        let n = self.header.n_rows;
        let mut values = Vec::with_capacity(n * m);
        let mut reader = BufReader::with_capacity(1 << 20, &self.file);
        std::io::Seek::seek(&mut reader, std::io::SeekFrom::Start(self.payload_offset))
            .map_err(|e| XlgError::io(&self.path, e))?;
        let mut row = vec![0u8; m * 4];
        for r in 0..n {
            reader
                .read_exact(&mut row)
                .map_err(|e| XlgError::io(&self.path, e))?;
            let start = values.len();
            values.extend(
                row.chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap())),
            );
            check_finite(&values[start..], m, r)?;
        }
        ActivationMatrix::new(self.header.clone(), values)
    }
}

impl ColumnSource for XlgaFile {
    fn header(&self) -> &MatrixHeader {
        &self.header
    }

    fn read_columns(&self, start: usize, buf: &mut [f32]) -> Result<()> {
        let n = self.header.n_rows;
        let m = self.header.n_cols();
        let width = column_width(buf.len(), n, start, m)?;
        let mut bytes = vec![0u8; width * 4];
        let mut tile = vec![0f32; TILE_ROWS.min(n) * width];
        for r0 in (0..n).step_by(TILE_ROWS) {
            let rows = TILE_ROWS.min(n - r0);
            for t in 0..rows {
                let r = r0 + t;
                let offset = self.payload_offset + ((r * m + start) as u64) * 4;
                self.file
                    .read_exact_at(&mut bytes, offset)
                    .map_err(|e| XlgError::io(&self.path, e))?;
                let dst = &mut tile[t * width..(t + 1) * width];
                for (c, (d, b)) in dst.iter_mut().zip(bytes.chunks_exact(4)).enumerate() {
                    let v = f32::from_le_bytes(b.try_into().unwrap());
                    if !v.is_finite() {
                        return Err(XlgError::NonFinite {
                            row: r,
                            neuron: start + c,
                            value: v,
                        });
                    }
                    *d = v;
                }
            }
            scatter_tile(&tile[..rows * width], width, 0, width, r0, n, buf);
        }
        Ok(())
    }
}

/// Streams a [`ColumnSource`] in blocks of `width` columns through one
/// reusable buffer of `n_rows * width` floats.
pub struct ColumnBlocks<'a, S: ColumnSource + ?Sized> {
    source: &'a S,
    width: usize,
    next: usize,
    buf: Vec<f32>,
}

impl<'a, S: ColumnSource + ?Sized> ColumnBlocks<'a, S> {
    pub fn new(source: &'a S, width: usize) -> Self {
        ColumnBlocks {
            source,
            width: width.max(1),
            next: 0,
            buf: Vec::new(),
        }
    }

    /// Next block as `(first global index, column-major values)`.
    #[allow(clippy::should_implement_trait)]
    pub fn next(&mut self) -> Option<Result<(usize, &[f32])>> {
        let m = self.source.n_cols();
        if self.next >= m {
            return None;
        }
        let start = self.next;
        let width = self.width.min(m - start);
        self.buf.resize(width * self.source.n_rows(), 0.0);
        self.next += width;
        Some(
            self.source
                .read_columns(start, &mut self.buf)
                .map(|()| (start, &self.buf[..])),
        )
    }

    /// Capacity of the internal buffer in floats.
    pub fn buffer_len(&self) -> usize {
        self.buf.capacity()
    }
}

#[cfg(test)]
mod tests {
    use super::super::tests::header;
    use super::super::{write_activation_matrix, ActivationMatrix};
    use super::*;

    #[test]
    fn file_columns_match_memory_columns() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.xlga");
        let values: Vec<f32> = (0..5 * 7).map(|i| i as f32 * 0.5 - 3.0).collect();
        let m = ActivationMatrix::new(header(5, vec![3, 4]), values).unwrap();
        write_activation_matrix(&m, &p).unwrap();
        let f = XlgaFile::open(&p).unwrap();
        for width in [1, 2, 3, 7] {
            let mut blocks = ColumnBlocks::new(&f, width);
            let mut mem = ColumnBlocks::new(&m, width);
            let mut seen = 0;
            while let Some(block) = blocks.next() {
                let (start, cols) = block.unwrap();
                let cols = cols.to_vec();
                let (mstart, mcols) = mem.next().unwrap().unwrap();
                assert_eq!(start, mstart);
                assert_eq!(cols, mcols);
                for (c, col) in cols.chunks(5).enumerate() {
                    assert_eq!(col, m.column(start + c).as_slice());
                }
                seen += cols.len() / 5;
            }
            assert_eq!(seen, 7);
            assert!(blocks.buffer_len() <= 5 * width.max(1));
        }
    }

    #[test]
    fn out_of_range_read_is_rejected() {
        let m = ActivationMatrix::new(header(2, vec![2]), vec![0.0; 4]).unwrap();
        let mut buf = vec![0.0; 4];
        assert!(m.read_columns(1, &mut buf).is_err());
        let mut odd = vec![0.0; 3];
        assert!(m.read_columns(0, &mut odd).is_err());
    }
}
