//! SGRID on-disk grid format.
//!
//! Layout (little-endian):
//!
//! | bytes | field                         |
//! |-------|-------------------------------|
//! | 0..4  | magic `SGRD`                  |
//! | 4     | version, always 1             |
//! | 5     | dtype: 0 = u8, 1 = f32        |
//! | 6..10 | height (u32)                  |
//! | 10..14| width (u32)                   |
//! | 14..18| channels (u32)                |
//! | 18..  | payload, row-major, channel-fastest |

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{Element, Grid};

pub const MAGIC: &[u8; 4] = b"SGRD";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 18;

pub trait SgridElement: Element {
    const DTYPE: u8;
    const WIDTH: usize;
    fn put(self, out: &mut Vec<u8>);
    fn take(bytes: &[u8]) -> Self;
}

impl SgridElement for u8 {
    const DTYPE: u8 = 0;
    const WIDTH: usize = 1;
    fn put(self, out: &mut Vec<u8>) {
        out.push(self);
    }
    fn take(bytes: &[u8]) -> Self {
        bytes[0]
    }
}

impl SgridElement for f32 {
    const DTYPE: u8 = 1;
    const WIDTH: usize = 4;
    fn put(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn take(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
}

/// A decoded grid of either on-disk dtype.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyGrid {
    Byte(Grid<u8>),
    Float32(Grid<f32>),
}

impl AnyGrid {
    pub fn into_byte(self) -> Result<Grid<u8>> {
        match self {
            AnyGrid::Byte(g) => Ok(g),
            AnyGrid::Float32(_) => Err(Error::InvalidGrid("expected byte grid, found float32".into())),
        }
    }

    pub fn into_float32(self) -> Result<Grid<f32>> {
        match self {
            AnyGrid::Float32(g) => Ok(g),
            AnyGrid::Byte(_) => Err(Error::InvalidGrid("expected float32 grid, found byte".into())),
        }
    }
}

impl From<Grid<u8>> for AnyGrid {
    fn from(g: Grid<u8>) -> Self {
        AnyGrid::Byte(g)
    }
}

impl From<Grid<f32>> for AnyGrid {
    fn from(g: Grid<f32>) -> Self {
        AnyGrid::Float32(g)
    }
}

pub fn encode<T: SgridElement>(grid: &Grid<T>) -> Vec<u8> {
    let (h, w, c) = grid.dims();
    let mut out = Vec::with_capacity(HEADER_LEN + grid.data().len() * T::WIDTH);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(T::DTYPE);
    for dim in [h, w, c] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for &v in grid.data() {
        v.put(&mut out);
    }
    out
}

fn decode_payload<T: SgridElement>(bytes: &[u8], h: usize, w: usize, c: usize) -> Result<Grid<T>> {
    let data = bytes.chunks_exact(T::WIDTH).map(T::take).collect();
    Grid::new(h, w, c, data)
}

pub fn decode(bytes: &[u8]) -> Result<AnyGrid> {
    if bytes.len() < 4 || &bytes[0..4] != MAGIC {
        return Err(Error::BadMagic { offset: 0 });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::TruncatedPayload {
            offset: bytes.len(),
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    if bytes[4] != VERSION {
        return Err(Error::UnsupportedVersion {
            offset: 4,
            version: bytes[4],
        });
    }
    let dtype = bytes[5];
    let width_of = match dtype {
        0 => 1,
        1 => 4,
        code => return Err(Error::UnknownDtype { offset: 5, code }),
    };
    let dim = |at: usize| u32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]]) as usize;
    let (h, w, c) = (dim(6), dim(10), dim(14));
    let expected = h
        .checked_mul(w)
        .and_then(|n| n.checked_mul(c))
        .and_then(|n| n.checked_mul(width_of))
        .ok_or_else(|| Error::InvalidGrid(format!("dimensions {h}x{w}x{c} overflow")))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != expected {
        // Trailing garbage is reported the same way: the header is the contract.
        return Err(Error::TruncatedPayload {
            offset: HEADER_LEN + payload.len().min(expected),
            expected,
            found: payload.len(),
        });
    }
    match dtype {
        0 => decode_payload::<u8>(payload, h, w, c).map(AnyGrid::Byte),
        _ => decode_payload::<f32>(payload, h, w, c).map(AnyGrid::Float32),
    }
}

pub fn write_sgrid<T: SgridElement>(grid: &Grid<T>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode(grid))?;
    Ok(())
}

pub fn read_sgrid(path: impl AsRef<Path>) -> Result<AnyGrid> {
    decode(&fs::read(path)?)
}
