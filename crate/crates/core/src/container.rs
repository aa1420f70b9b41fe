// SPDX-License-Identifier: MIT OR Apache-2.0

//! Shared framing for the binary files: 4-byte magic, u32 version, u32
//! header length, JSON header, raw little-endian payload.

use std::io::{Read, Write};

use crate::error::{Result, XlgError};

pub const VERSION: u32 = 1;
pub const PREFIX_LEN: usize = 12;

pub fn write_prefix<W: Write>(out: &mut W, magic: &[u8; 4], header: &[u8]) -> std::io::Result<()> {
    let len = u32::try_from(header.len())
        .map_err(|_| std::io::Error::new(std::io::ErrorKind::InvalidInput, "header larger than 4 GiB"))?;
    out.write_all(magic)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&len.to_le_bytes())?;
    out.write_all(header)
}

/// Reads the prefix and returns the raw header bytes.
pub fn read_prefix<R: Read>(input: &mut R, magic: &[u8; 4]) -> Result<Vec<u8>> {
    let mut prefix = [0u8; PREFIX_LEN];
    read_fully(input, &mut prefix)?;
    if &prefix[0..4] != magic {
        return Err(XlgError::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&prefix[0..4]),
            String::from_utf8_lossy(magic)
        )));
    }
    let version = u32::from_le_bytes(prefix[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(XlgError::Format(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let len = u32::from_le_bytes(prefix[8..12].try_into().unwrap()) as usize;
    let mut header = vec![0u8; len];
    read_fully(input, &mut header)?;
    Ok(header)
}

fn read_fully<R: Read>(input: &mut R, buf: &mut [u8]) -> Result<()> {
    input.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            XlgError::Format("file ends inside the header".into())
        } else {
            XlgError::Format(format!("cannot read header: {e}"))
        }
    })
}
