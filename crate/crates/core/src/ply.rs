//! Coloured point clouds and their binary little-endian PLY encoding.

use std::path::Path;

use crate::error::{MvsError, Result};
use crate::io::{read_bytes, write_bytes};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f32; 3]>,
    pub colors: Vec<[u8; 3]>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn push(&mut self, p: [f32; 3], c: [u8; 3]) {
        self.points.push(p);
        self.colors.push(c);
    }

    pub fn extend(&mut self, other: PointCloud) {
        self.points.extend(other.points);
        self.colors.extend(other.colors);
    }

    pub fn bitwise_eq(&self, other: &PointCloud) -> bool {
        self.colors == other.colors
            && self.points.len() == other.points.len()
            && self
                .points
                .iter()
                .zip(&other.points)
                .all(|(a, b)| a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()))
    }
}

const PROPERTIES: [&str; 6] = [
    "property float x",
    "property float y",
    "property float z",
    "property uchar red",
    "property uchar green",
    "property uchar blue",
];

pub fn encode_ply(pc: &PointCloud) -> Vec<u8> {
    let mut head = String::from("ply\nformat binary_little_endian 1.0\n");
    head.push_str(&format!("element vertex {}\n", pc.len()));
    for p in PROPERTIES {
        head.push_str(p);
        head.push('\n');
    }
    head.push_str("end_header\n");
    let mut out = head.into_bytes();
    out.reserve(pc.len() * 15);
    for (p, c) in pc.points.iter().zip(&pc.colors) {
        for v in p {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(c);
    }
    out
}

pub fn decode_ply(bytes: &[u8], path: &Path) -> Result<PointCloud> {
    let mut pos = 0;
    let mut next_line = |what: &str| -> Result<(String, usize)> {
        let start = pos;
        let end = bytes[start..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| MvsError::parse(path, start, format!("unterminated header, expected {what}")))?;
        pos = start + end + 1;
        let line = std::str::from_utf8(&bytes[start..start + end])
            .map_err(|_| MvsError::parse(path, start, "non-ASCII header"))?;
        Ok((line.trim_end_matches('\r').trim().to_string(), start))
    };
    let expect = |line: (String, usize), want: &str| -> Result<()> {
        if line.0 == want {
            Ok(())
        } else {
            Err(MvsError::parse(path, line.1, format!("expected '{want}', found '{}'", line.0)))
        }
    };
    expect(next_line("magic")?, "ply")?;
    expect(next_line("format")?, "format binary_little_endian 1.0")?;
    let (elem, off) = next_line("element")?;
    let mut line = elem.clone();
    let mut line_off = off;
    while line.starts_with("comment") {
        (line, line_off) = next_line("element")?;
    }
    let count: usize = line
        .strip_prefix("element vertex ")
        .and_then(|n| n.trim().parse().ok())
        .ok_or_else(|| MvsError::parse(path, line_off, format!("expected 'element vertex <n>', found '{line}'")))?;
    for p in PROPERTIES {
        expect(next_line("property")?, p)?;
    }
    expect(next_line("end_header")?, "end_header")?;
    let need = count * 15;
    if bytes.len() - pos < need {
        return Err(MvsError::parse(path, bytes.len(), format!("{count} vertices need {need} bytes")));
    }
    let mut pc = PointCloud::default();
    for rec in bytes[pos..pos + need].chunks_exact(15) {
        let f = |i: usize| f32::from_le_bytes(rec[4 * i..4 * i + 4].try_into().expect("four bytes"));
        pc.push([f(0), f(1), f(2)], [rec[12], rec[13], rec[14]]);
    }
    Ok(pc)
}

pub fn write_ply(pc: &PointCloud, path: &Path) -> Result<()> {
    write_bytes(path, &encode_ply(pc))
}

pub fn read_ply(path: &Path) -> Result<PointCloud> {
    decode_ply(&read_bytes(path)?, path)
}
