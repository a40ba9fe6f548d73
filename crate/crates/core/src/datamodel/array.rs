//! Dense row-major matrices and their on-disk encoding.
//!
//! Every array is stored as a raw little-endian `float32` blob (`<name>.f32`)
//! next to a JSON sidecar (`<name>.shape.json`) giving shape and dtype.

use std::fs;
use std::io::{Read, Seek, SeekFrom};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::validation(
                "matrix",
                format!("{} values cannot fill a {rows}x{cols} matrix", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    /// Stacks equally sized rows.
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::validation(
                    "matrix",
                    format!("row {i} has {} columns, expected {cols}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copies the selected rows, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }
}

/// JSON sidecar describing one blob.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeSidecar {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_order: String,
}

impl ShapeSidecar {
    pub fn f32(shape: Vec<usize>) -> Self {
        Self {
            shape,
            dtype: "float32".into(),
            byte_order: "little".into(),
        }
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn sidecar_path(blob: &Path) -> PathBuf {
    blob.with_extension("shape.json")
}

pub(crate) fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::validation(path.display().to_string(), e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::load(path, e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| Error::load(path, format!("malformed JSON: {e}")))
}

/// Writes `values` as a float32 blob at `blob` plus its shape sidecar.
pub fn write_array(blob: &Path, shape: &[usize], values: &[f32]) -> Result<()> {
    let expected: usize = shape.iter().product();
    if expected != values.len() {
        return Err(Error::validation(
            blob.display().to_string(),
            format!("shape {shape:?} does not match {} values", values.len()),
        ));
    }
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(blob, bytes).map_err(|e| Error::io(blob, e))?;
    write_json(&sidecar_path(blob), &ShapeSidecar::f32(shape.to_vec()))
}

pub fn write_matrix(blob: &Path, m: &Matrix) -> Result<()> {
    write_array(blob, &[m.rows, m.cols], &m.data)
}

pub fn read_sidecar(blob: &Path) -> Result<ShapeSidecar> {
    let side: ShapeSidecar = read_json(&sidecar_path(blob))?;
    if side.dtype != "float32" || side.byte_order != "little" {
        return Err(Error::load(
            sidecar_path(blob),
            format!("unsupported dtype {} / {}", side.dtype, side.byte_order),
        ));
    }
    Ok(side)
}

fn decode(blob: &Path, bytes: &[u8]) -> Result<Vec<f32>> {
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::validation(
            blob.display().to_string(),
            format!("non-finite value at flat index {i}"),
        ));
    }
    Ok(values)
}

/// Reads a blob, checking byte length against the sidecar and rejecting
/// NaN/Inf.
pub fn read_array(blob: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    let side = read_sidecar(blob)?;
    let bytes = fs::read(blob).map_err(|e| Error::load(blob, e.to_string()))?;
    if bytes.len() != side.len() * 4 {
        return Err(Error::load(
            blob,
            format!(
                "blob holds {} bytes, sidecar shape {:?} needs {}",
                bytes.len(),
                side.shape,
                side.len() * 4
            ),
        ));
    }
    Ok((side.shape, decode(blob, &bytes)?))
}

/// Reads a 2-D blob and checks it against an expected shape.
pub fn read_matrix(blob: &Path, expected: Option<(usize, usize)>) -> Result<Matrix> {
    let (shape, data) = read_array(blob)?;
    if shape.len() != 2 {
        return Err(Error::validation(
            blob.display().to_string(),
            format!("expected a 2-D array, sidecar declares {shape:?}"),
        ));
    }
    if let Some((r, c)) = expected {
        if shape[0] != r || shape[1] != c {
            return Err(Error::validation(
                blob.display().to_string(),
                format!("shape {}x{} does not match expected {r}x{c}", shape[0], shape[1]),
            ));
        }
    }
    Matrix::from_vec(shape[0], shape[1], data)
}

/// Reads one row of a 2-D blob without loading the whole file.
pub fn read_matrix_row(blob: &Path, side: &ShapeSidecar, row: usize) -> Result<Vec<f32>> {
    if side.shape.len() != 2 || row >= side.shape[0] {
        return Err(Error::validation(
            blob.display().to_string(),
            format!("row {row} out of range for shape {:?}", side.shape),
        ));
    }
    let cols = side.shape[1];
    let mut file = fs::File::open(blob).map_err(|e| Error::load(blob, e.to_string()))?;
    let len = file
        .metadata()
        .map_err(|e| Error::load(blob, e.to_string()))?
        .len() as usize;
    if len != side.len() * 4 {
        return Err(Error::load(
            blob,
            format!("blob holds {len} bytes, sidecar needs {}", side.len() * 4),
        ));
    }
    let mut bytes = vec![0u8; cols * 4];
    file.seek(SeekFrom::Start((row * cols * 4) as u64))
        .and_then(|_| file.read_exact(&mut bytes))
        .map_err(|e| Error::load(blob, e.to_string()))?;
    decode(blob, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_is_little_endian_row_major() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.f32");
        let m = Matrix::from_rows(&[vec![1.0f32, 2.0], vec![3.0, -0.5]]).unwrap();
        write_matrix(&p, &m).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[0..4], &1.0f32.to_le_bytes());
        assert_eq!(&bytes[12..16], &(-0.5f32).to_le_bytes());
        let side: ShapeSidecar = read_json(&sidecar_path(&p)).unwrap();
        assert_eq!(side, ShapeSidecar::f32(vec![2, 2]));
        assert_eq!(read_matrix(&p, Some((2, 2))).unwrap(), m);
        assert_eq!(read_matrix_row(&p, &side, 1).unwrap(), vec![3.0, -0.5]);
    }

    #[test]
    fn nan_is_rejected_on_read() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("nan.f32");
        write_array(&p, &[2], &[1.0, f32::NAN]).unwrap();
        assert!(matches!(read_array(&p), Err(Error::Validation { .. })));
    }

    #[test]
    fn truncated_blob_names_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.f32");
        write_array(&p, &[4], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..8]).unwrap();
        match read_array(&p) {
            Err(Error::Load { path, .. }) => assert_eq!(path, p),
            other => panic!("expected load error, got {other:?}"),
        }
    }
}
