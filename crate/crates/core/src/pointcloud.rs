//! Unordered 3D point sets and the `ULPC` / CSV file forms.
//!
//! `ULPC` layout (little-endian): magic `ULPC`, version `u16 = 1`, point count `u32`,
//! then `count × (x, y, z)` as `f32`.

use std::io::{BufRead, Read, Write};

use crate::io::{expect_header, read_u32, FormatError};

/// Points in meters with the sensor at the origin.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f32; 3]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f32; 3]>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f32; 3]> {
        self.points.iter()
    }

    pub fn write_ulpc(&self, mut w: impl Write) -> Result<(), FormatError> {
        let count = u32::try_from(self.points.len()).map_err(|_| FormatError::Invalid("too many points".into()))?;
        let mut buf = Vec::with_capacity(10 + self.points.len() * 12);
        buf.extend_from_slice(b"ULPC");
        buf.extend_from_slice(&1u16.to_le_bytes());
        buf.extend_from_slice(&count.to_le_bytes());
        for p in &self.points {
            for v in p {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_ulpc(mut r: impl Read) -> Result<Self, FormatError> {
        expect_header(&mut r, b"ULPC", "ULPC")?;
        let n = read_u32(&mut r)? as usize;
        let mut raw = vec![0u8; n * 12];
        r.read_exact(&mut raw)?;
        let points = raw
            .chunks_exact(12)
            .map(|c| {
                let f = |o: usize| f32::from_le_bytes([c[o], c[o + 1], c[o + 2], c[o + 3]]);
                [f(0), f(4), f(8)]
            })
            .collect();
        Ok(Self { points })
    }

    /// One `x,y,z` line per point.
    pub fn write_csv(&self, mut w: impl Write) -> Result<(), FormatError> {
        for [x, y, z] in &self.points {
            writeln!(w, "{x},{y},{z}")?;
        }
        Ok(())
    }

    pub fn read_csv(r: impl BufRead) -> Result<Self, FormatError> {
        let mut points = Vec::new();
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let vals: Vec<f32> = line
                .split(',')
                .map(|s| s.trim().parse::<f32>())
                .collect::<Result<_, _>>()
                .map_err(|e| FormatError::Invalid(format!("line {}: {e}", lineno + 1)))?;
            let [x, y, z] = vals[..] else {
                return Err(FormatError::Invalid(format!("line {}: expected x,y,z", lineno + 1)));
            };
            points.push([x, y, z]);
        }
        Ok(Self { points })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), FormatError> {
        let mut buf = Vec::new();
        self.write_ulpc(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, FormatError> {
        Self::read_ulpc(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ulpc_layout() {
        let pc = PointCloud::new(vec![[1.0, 2.0, -3.5]]);
        let mut buf = Vec::new();
        pc.write_ulpc(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"ULPC");
        assert_eq!(&buf[4..6], &[1, 0]);
        assert_eq!(&buf[6..10], &[1, 0, 0, 0]);
        assert_eq!(&buf[10..14], &1f32.to_le_bytes());
        assert_eq!(buf.len(), 22);
    }

    #[test]
    fn truncated_file_is_an_error() {
        let pc = PointCloud::new(vec![[1.0, 2.0, 3.0]; 4]);
        let mut buf = Vec::new();
        pc.write_ulpc(&mut buf).unwrap();
        assert!(PointCloud::read_ulpc(&buf[..buf.len() - 1]).is_err());
    }

    #[test]
    fn csv_rejects_short_rows() {
        assert!(PointCloud::read_csv("1,2\n".as_bytes()).is_err());
    }

    proptest! {
        #[test]
        fn binary_and_csv_roundtrip(pts in prop::collection::vec(prop::array::uniform3(-1e4f32..1e4), 0..50)) {
            let pc = PointCloud::new(pts);
            let mut buf = Vec::new();
            pc.write_ulpc(&mut buf).unwrap();
            prop_assert_eq!(&PointCloud::read_ulpc(&buf[..]).unwrap(), &pc);
            let mut csv = Vec::new();
            pc.write_csv(&mut csv).unwrap();
            prop_assert_eq!(&PointCloud::read_csv(&csv[..]).unwrap(), &pc);
        }
    }
}
