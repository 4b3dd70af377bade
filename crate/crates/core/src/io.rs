//! On-disk formats: constraint documents, raw float blobs and sample CSVs.
//!
//! Blobs are flat little-endian `f64` arrays with no header; shapes live in
//! the accompanying JSON. CSV values use Rust's shortest round-trip float
//! formatting, so write → read reproduces every bit.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::diffusion::{SampleBatch, Space};
use crate::error::{Error, Result};
use crate::geometry::{
    orthonormalize_tokens, BallConstraint, ConstraintSet, HypercubeConstraint,
    PolytopeConstraint, SimplexConstraint,
};

/// Serialized form of a [`ConstraintSet`].
///
/// A polytope either names a token blob (`tokens_file`, relative to the JSON)
/// or, without one, is regenerated from `seed` as an orthonormal key.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ConstraintDoc {
    Ball {
        dim: usize,
        #[serde(default = "one")]
        radius_sq: f64,
        #[serde(default = "one")]
        gamma: f64,
    },
    Simplex {
        dim: usize,
    },
    Hypercube {
        dim: usize,
    },
    Polytope {
        dim: usize,
        n_tokens: usize,
        lower: Vec<f64>,
        upper: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        tokens_file: Option<String>,
    },
}

fn one() -> f64 {
    1.0
}

impl ConstraintDoc {
    /// Document for `c`; a polytope refers to `tokens_file` for its tokens.
    pub fn describe(c: &ConstraintSet, tokens_file: Option<&str>) -> Self {
        match c {
            ConstraintSet::Ball(b) => ConstraintDoc::Ball {
                dim: b.dim,
                radius_sq: b.radius_sq,
                gamma: b.gamma,
            },
            ConstraintSet::Simplex(s) => ConstraintDoc::Simplex { dim: s.dim },
            ConstraintSet::Hypercube(h) => ConstraintDoc::Hypercube { dim: h.dim() },
            ConstraintSet::Polytope(p) => ConstraintDoc::Polytope {
                dim: p.dim(),
                n_tokens: p.n_tokens(),
                lower: p.lower().to_vec(),
                upper: p.upper().to_vec(),
                seed: p.seed(),
                tokens_file: tokens_file.map(str::to_owned),
            },
        }
    }

    /// Build the constraint, resolving `tokens_file` against `base_dir`.
    pub fn build(&self, base_dir: &Path) -> Result<ConstraintSet> {
        Ok(match self {
            ConstraintDoc::Ball {
                dim,
                radius_sq,
                gamma,
            } => BallConstraint::new(*dim, *radius_sq, *gamma)?.into(),
            ConstraintDoc::Simplex { dim } => SimplexConstraint::new(*dim)?.into(),
            ConstraintDoc::Hypercube { dim } => HypercubeConstraint::new(*dim)?.into(),
            ConstraintDoc::Polytope {
                dim,
                n_tokens,
                lower,
                upper,
                seed,
                tokens_file,
            } => {
                let tokens = match (tokens_file, seed) {
                    (Some(file), _) => {
                        let path = base_dir.join(file);
                        let flat = read_f64_blob(&path)?;
                        if flat.len() != n_tokens * dim {
                            return Err(Error::format(
                                &path,
                                format!(
                                    "expected {} values for a {n_tokens}x{dim} token matrix, found {}",
                                    n_tokens * dim,
                                    flat.len()
                                ),
                            ));
                        }
                        Array2::from_shape_vec((*n_tokens, *dim), flat)
                            .expect("length checked above")
                    }
                    (None, Some(seed)) => orthonormalize_tokens(*seed, *n_tokens, *dim)?,
                    (None, None) => {
                        return Err(Error::InvalidConstraint(
                            "polytope needs either tokens_file or seed".into(),
                        ))
                    }
                };
                let p = PolytopeConstraint::new(tokens, lower.clone(), upper.clone())?;
                match seed {
                    Some(s) => p.with_seed(*s).into(),
                    None => p.into(),
                }
            }
        })
    }
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e))?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_to_string(path)?).map_err(|e| Error::format(path, e))
}

pub fn encode_f64_le(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn decode_f64_le(bytes: &[u8]) -> Option<Vec<f64>> {
    if !bytes.len().is_multiple_of(8) {
        return None;
    }
    Some(
        bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect(),
    )
}

pub fn write_f64_blob(path: &Path, values: &[f64]) -> Result<()> {
    write_bytes(path, &encode_f64_le(values))
}

pub fn read_f64_blob(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_f64_le(&bytes)
        .ok_or_else(|| Error::format(path, format!("length {} is not a multiple of 8", bytes.len())))
}

/// Token blob path stored next to a constraint JSON: `<stem>.tokens.bin`.
fn tokens_path(json_path: &Path) -> PathBuf {
    let stem = json_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "constraint".into());
    json_path.with_file_name(format!("{stem}.tokens.bin"))
}

/// Write `c` as JSON; polytope tokens go to a sibling `.tokens.bin` blob.
pub fn save_constraint(path: &Path, c: &ConstraintSet) -> Result<()> {
    let doc = match c {
        ConstraintSet::Polytope(p) => {
            let blob = tokens_path(path);
            let flat: Vec<f64> = p.tokens().iter().copied().collect();
            write_f64_blob(&blob, &flat)?;
            let name = blob
                .file_name()
                .expect("tokens path has a file name")
                .to_string_lossy()
                .into_owned();
            ConstraintDoc::describe(c, Some(&name))
        }
        _ => ConstraintDoc::describe(c, None),
    };
    write_json(path, &doc)
}

pub fn load_constraint(path: &Path) -> Result<ConstraintSet> {
    let doc: ConstraintDoc = read_json(path)?;
    doc.build(path.parent().unwrap_or(Path::new(".")))
}

/// Header `x0..x{d-1}` then one row per sample.
pub fn write_csv(path: &Path, data: &Array2<f64>) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let header: Vec<String> = (0..data.ncols()).map(|k| format!("x{k}")).collect();
    w.write_record(&header).map_err(|e| Error::format(path, e))?;
    for row in data.outer_iter() {
        w.write_record(row.iter().map(|v| format!("{v:?}")))
            .map_err(|e| Error::format(path, e))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::format(path, e.error()))?;
    write_bytes(path, &bytes)
}

pub fn read_csv(path: &Path) -> Result<Array2<f64>> {
    let text = read_to_string(path)?;
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let d = r.headers().map_err(|e| Error::format(path, e))?.len();
    let mut flat = Vec::new();
    let mut n = 0;
    for (i, record) in r.records().enumerate() {
        let record = record.map_err(|e| Error::format(path, e))?;
        if record.len() != d {
            return Err(Error::format(
                path,
                format!("row {} has {} fields, header has {d}", i + 1, record.len()),
            ));
        }
        for field in record.iter() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::format(path, format!("row {}: bad number {field:?}", i + 1)))?;
            flat.push(v);
        }
        n += 1;
    }
    Ok(Array2::from_shape_vec((n, d), flat).expect("row lengths checked"))
}

/// Sidecar describing a sample CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchSidecar {
    pub space: Space,
    pub n_samples: usize,
    pub dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constraint: Option<ConstraintDoc>,
    /// Free-form provenance: generator spec, seeds, checkpoint.
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub meta: serde_json::Value,
}

/// Sidecar path for a sample CSV: the same path with a `.json` extension.
pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

/// Write the CSV and its sidecar JSON.
pub fn write_batch(path: &Path, batch: &SampleBatch, meta: serde_json::Value) -> Result<()> {
    write_csv(path, batch.data())?;
    let side = sidecar_path(path);
    let constraint = match batch.constraint() {
        Some(c) => {
            let c: &ConstraintSet = c;
            if let ConstraintSet::Polytope(_) = c {
                save_constraint(&side.with_extension("constraint.json"), c)?;
            }
            Some(match c {
                ConstraintSet::Polytope(_) => {
                    let stem = side.file_stem().unwrap_or_default().to_string_lossy();
                    ConstraintDoc::describe(c, Some(&format!("{stem}.constraint.tokens.bin")))
                }
                _ => ConstraintDoc::describe(c, None),
            })
        }
        None => None,
    };
    let sidecar = BatchSidecar {
        space: batch.space(),
        n_samples: batch.len(),
        dim: batch.dim(),
        constraint,
        meta,
    };
    write_json(&side, &sidecar)
}

/// Read a CSV; with a sidecar, restore its space and constraint and
/// revalidate primal rows.
pub fn read_batch(path: &Path) -> Result<SampleBatch> {
    let data = read_csv(path)?;
    let side = sidecar_path(path);
    if !side.exists() {
        return Ok(SampleBatch::dual(data));
    }
    let sidecar: BatchSidecar = read_json(&side)?;
    if sidecar.dim != data.ncols() && data.nrows() > 0 {
        return Err(Error::format(
            path,
            format!("sidecar dim {} but CSV has {} columns", sidecar.dim, data.ncols()),
        ));
    }
    let base = side.parent().unwrap_or(Path::new("."));
    match (sidecar.space, sidecar.constraint) {
        (Space::Primal, Some(doc)) => SampleBatch::primal(data, Arc::new(doc.build(base)?)),
        _ => Ok(SampleBatch::dual(data)),
    }
}
