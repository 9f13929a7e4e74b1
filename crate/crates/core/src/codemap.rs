//! `h×w` grids of code indices and the `ULCM` file format.
//!
//! `ULCM` layout (little-endian): magic `ULCM`, version `u16 = 1`, `h` and `w` as `u32`,
//! then `h·w` code indices as `u16`, row-major.

use std::io::{Read, Write};

use crate::io::{expect_header, read_u32, FormatError};

/// Code indices in `[0, K)`, or the sentinel `K` for a masked cell.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct CodeMap {
    pub h: usize,
    pub w: usize,
    pub entries: Vec<u16>,
}

/// Axis-aligned cell rectangle: rows `row..row + height`, columns `col..col + width`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn new(row: usize, col: usize, height: usize, width: usize) -> Self {
        Self { row, col, height, width }
    }

    pub fn fits(&self, h: usize, w: usize) -> bool {
        self.height > 0 && self.width > 0 && self.row + self.height <= h && self.col + self.width <= w
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        r >= self.row && r < self.row + self.height && c >= self.col && c < self.col + self.width
    }

    pub fn cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (self.row..self.row + self.height).flat_map(move |r| (self.col..self.col + self.width).map(move |c| (r, c)))
    }
}

impl CodeMap {
    pub fn new(h: usize, w: usize, entries: Vec<u16>) -> Result<Self, FormatError> {
        if entries.len() != h * w {
            return Err(FormatError::Invalid(format!("{} entries for a {h}×{w} code map", entries.len())));
        }
        Ok(Self { h, w, entries })
    }

    pub fn filled(h: usize, w: usize, value: u16) -> Self {
        Self { h, w, entries: vec![value; h * w] }
    }

    pub fn from_indices(h: usize, w: usize, indices: &[usize]) -> Result<Self, FormatError> {
        let entries = indices
            .iter()
            .map(|&i| u16::try_from(i).map_err(|_| FormatError::Invalid(format!("code {i} exceeds u16"))))
            .collect::<Result<_, _>>()?;
        Self::new(h, w, entries)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, r: usize, c: usize) -> u16 {
        self.entries[r * self.w + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: u16) {
        self.entries[r * self.w + c] = v;
    }

    /// True when no entry equals the sentinel `mask` and all are below it.
    pub fn is_complete(&self, mask: u16) -> bool {
        self.entries.iter().all(|&e| e < mask)
    }

    pub fn masked_count(&self, mask: u16) -> usize {
        self.entries.iter().filter(|&&e| e == mask).count()
    }

    pub fn write_ulcm(&self, mut w: impl Write) -> Result<(), FormatError> {
        let mut buf = Vec::with_capacity(14 + 2 * self.entries.len());
        buf.extend_from_slice(b"ULCM");
        buf.extend_from_slice(&1u16.to_le_bytes());
        buf.extend_from_slice(&(self.h as u32).to_le_bytes());
        buf.extend_from_slice(&(self.w as u32).to_le_bytes());
        for e in &self.entries {
            buf.extend_from_slice(&e.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_ulcm(mut r: impl Read) -> Result<Self, FormatError> {
        expect_header(&mut r, b"ULCM", "ULCM")?;
        let h = read_u32(&mut r)? as usize;
        let w = read_u32(&mut r)? as usize;
        let mut raw = vec![0u8; h * w * 2];
        r.read_exact(&mut raw)?;
        let entries = raw.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
        Self::new(h, w, entries)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), FormatError> {
        let mut buf = Vec::new();
        self.write_ulcm(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, FormatError> {
        Self::read_ulcm(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ulcm_layout() {
        let m = CodeMap::new(1, 2, vec![3, 258]).unwrap();
        let mut buf = Vec::new();
        m.write_ulcm(&mut buf).unwrap();
        let mut want = b"ULCM\x01\x00".to_vec();
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(&[3, 0, 2, 1]);
        assert_eq!(buf, want);
    }

    #[test]
    fn rect_bounds() {
        assert!(Rect::new(0, 0, 4, 4).fits(4, 4));
        assert!(!Rect::new(1, 0, 4, 4).fits(4, 4));
        assert!(!Rect::new(0, 0, 0, 1).fits(4, 4));
        assert_eq!(Rect::new(1, 2, 2, 1).cells().collect::<Vec<_>>(), vec![(1, 2), (2, 2)]);
    }

    proptest! {
        #[test]
        fn ulcm_roundtrip(h in 1usize..6, w in 1usize..6, seed in any::<u16>()) {
            let entries = (0..h * w).map(|i| seed.wrapping_mul(i as u16 + 7)).collect();
            let m = CodeMap::new(h, w, entries).unwrap();
            let mut buf = Vec::new();
            m.write_ulcm(&mut buf).unwrap();
            prop_assert_eq!(CodeMap::read_ulcm(&buf[..]).unwrap(), m);
        }
    }
}
