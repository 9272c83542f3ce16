//! File formats: CSV matrices, the `EMSS` binary grid container, binary PGM
//! frames, and a serde adapter that writes matrices as row-major arrays.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const EMSS_MAGIC: &[u8; 4] = b"EMSS";

/// A dense grid as stored on disk: row-major values plus an optional
/// missing-entry mask (`true` = unobserved).
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    pub mask: Option<Vec<bool>>,
}

impl Grid {
    pub fn from_matrix(values: &DMatrix<f64>, mask: Option<&DMatrix<bool>>) -> Self {
        let (rows, cols) = values.shape();
        let values = (0..rows)
            .flat_map(|i| (0..cols).map(move |j| (i, j)))
            .map(|(i, j)| values[(i, j)])
            .collect();
        let mask = mask.map(|m| {
            (0..rows)
                .flat_map(|i| (0..cols).map(move |j| (i, j)))
                .map(|(i, j)| m[(i, j)])
                .collect()
        });
        Grid {
            rows,
            cols,
            values,
            mask,
        }
    }

    pub fn to_matrix(&self) -> (DMatrix<f64>, Option<DMatrix<bool>>) {
        let values = DMatrix::from_row_slice(self.rows, self.cols, &self.values);
        let mask = self
            .mask
            .as_ref()
            .map(|m| DMatrix::from_row_slice(self.rows, self.cols, m));
        (values, mask)
    }
}

/// Encodes a grid as `EMSS`, u32 rows, u32 cols, little-endian f64 values in
/// row-major order, then (if present) one byte per entry, 1 = missing.
pub fn encode_emss(grid: &Grid) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + grid.values.len() * 9);
    out.extend_from_slice(EMSS_MAGIC);
    out.extend_from_slice(&(grid.rows as u32).to_le_bytes());
    out.extend_from_slice(&(grid.cols as u32).to_le_bytes());
    for v in &grid.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(mask) = &grid.mask {
        out.extend(mask.iter().map(|&m| m as u8));
    }
    out
}

pub fn decode_emss(bytes: &[u8]) -> Result<Grid> {
    if bytes.len() < 12 || &bytes[..4] != EMSS_MAGIC {
        return Err(Error::Parse("missing EMSS magic".into()));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let count = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::Parse("EMSS header overflows".into()))?;
    let body = &bytes[12..];
    let value_bytes = count * 8;
    if body.len() != value_bytes && body.len() != value_bytes + count {
        return Err(Error::Parse(format!(
            "EMSS body has {} bytes, expected {} or {}",
            body.len(),
            value_bytes,
            value_bytes + count
        )));
    }
    let values = body[..value_bytes]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mask = if body.len() > value_bytes {
        let raw = &body[value_bytes..];
        if let Some(bad) = raw.iter().find(|&&b| b > 1) {
            return Err(Error::Parse(format!("EMSS mask byte {bad} is not 0 or 1")));
        }
        Some(raw.iter().map(|&b| b == 1).collect())
    } else {
        None
    };
    Ok(Grid {
        rows,
        cols,
        values,
        mask,
    })
}

pub fn read_emss(path: &Path) -> Result<Grid> {
    decode_emss(&fs::read(path)?)
}

pub fn write_emss(path: &Path, grid: &Grid) -> Result<()> {
    fs::write(path, encode_emss(grid))?;
    Ok(())
}

/// Parses a CSV matrix. A first row containing any non-numeric, non-empty
/// cell is treated as a header. Empty cells become missing entries.
pub fn parse_csv_grid<R: Read>(reader: R) -> Result<Grid> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut rows: Vec<Vec<Option<f64>>> = Vec::new();
    for (line, record) in rdr.records().enumerate() {
        let record = record?;
        let parsed: Vec<std::result::Result<Option<f64>, ()>> = record
            .iter()
            .map(|cell| {
                if cell.is_empty() {
                    Ok(None)
                } else {
                    cell.parse::<f64>().map(Some).map_err(|_| ())
                }
            })
            .collect();
        if parsed.iter().any(|c| c.is_err()) {
            if line == 0 {
                continue;
            }
            return Err(Error::Parse(format!(
                "non-numeric cell on CSV line {}",
                line + 1
            )));
        }
        rows.push(parsed.into_iter().map(|c| c.unwrap()).collect());
    }
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, |r| r.len());
    if nrows == 0 || ncols == 0 {
        return Err(Error::Parse("CSV matrix is empty".into()));
    }
    let mut values = Vec::with_capacity(nrows * ncols);
    let mut mask = Vec::with_capacity(nrows * ncols);
    for row in &rows {
        for cell in row {
            values.push(cell.unwrap_or(0.0));
            mask.push(cell.is_none());
        }
    }
    let mask = mask.iter().any(|&m| m).then_some(mask);
    Ok(Grid {
        rows: nrows,
        cols: ncols,
        values,
        mask,
    })
}

pub fn read_csv_grid(path: &Path) -> Result<Grid> {
    parse_csv_grid(fs::File::open(path)?)
}

pub fn format_csv_grid(grid: &Grid) -> String {
    let mut out = String::new();
    for i in 0..grid.rows {
        let line: Vec<String> = (0..grid.cols)
            .map(|j| {
                let idx = i * grid.cols + j;
                if grid.mask.as_ref().is_some_and(|m| m[idx]) {
                    String::new()
                } else {
                    format_f64(grid.values[idx])
                }
            })
            .collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

pub fn write_csv_grid(path: &Path, grid: &Grid) -> Result<()> {
    fs::write(path, format_csv_grid(grid))?;
    Ok(())
}

/// Shortest representation that parses back to the same bits.
pub fn format_f64(v: f64) -> String {
    format!("{v:?}")
}

/// Reads a binary (P5) PGM with maxval <= 255. Returns (width, height, pixels row-major).
pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut pos = 0;
    let next_token = |pos: &mut usize| -> Result<String> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(Error::Parse("truncated PGM header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };
    let magic = next_token(&mut pos)?;
    if magic != "P5" {
        return Err(Error::Parse(format!("unsupported PGM magic {magic:?}")));
    }
    let number = |pos: &mut usize, what: &str| -> Result<usize> {
        next_token(pos)?
            .parse::<usize>()
            .map_err(|_| Error::Parse(format!("bad PGM {what}")))
    };
    let width = number(&mut pos, "width")?;
    let height = number(&mut pos, "height")?;
    let maxval = number(&mut pos, "maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Parse(format!("PGM maxval {maxval} not in 1..=255")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let need = width * height;
    if bytes.len() < pos + need {
        return Err(Error::Parse("truncated PGM raster".into()));
    }
    Ok((width, height, bytes[pos..pos + need].to_vec()))
}

pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn hash_file(path: &Path) -> Result<String> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    Ok(sha256_hex(&buf))
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

/// serde adapter: `DMatrix<f64>` as an array of rows.
pub mod rows {
    use nalgebra::DMatrix;
    use serde::{de::Error as _, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m
            .row_iter()
            .map(|r| r.iter().copied().collect())
            .collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(D::Error::custom("ragged matrix rows"));
        }
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        Ok(DMatrix::from_row_slice(nrows, ncols, &flat))
    }
}

/// serde adapter: `DVector<f64>` as a plain array.
pub mod vector {
    use nalgebra::DVector;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
        v.as_slice().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
        Ok(DVector::from_vec(Vec::<f64>::deserialize(d)?))
    }
}
