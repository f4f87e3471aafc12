//! Task-vector geometry: parameter-space differences between checkpoints,
//! cosine diagnostics, and the Gram-Schmidt 2D projection used for
//! weight-space visualization.

use crate::error::{Error, Result};
use crate::models::ParameterVector;
use crate::numcore::{dot, l2_norm};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// A direction in weight space: `target - source`, flattened in canonical
/// parameter order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskVector {
    pub values: Vec<f64>,
    pub source_id: String,
    pub target_id: String,
    pub norm: f64,
}

impl TaskVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// `target - source` elementwise; the configs (parameter structures) must
/// match.
pub fn task_vector(
    target: &ParameterVector,
    source: &ParameterVector,
    target_id: &str,
    source_id: &str,
) -> Result<TaskVector> {
    if !target.same_structure(source) {
        return Err(Error::argument(
            "task vector endpoints have different parameter structures".to_string(),
        ));
    }
    let t = target.flatten();
    let s = source.flatten();
    let values: Vec<f64> = t.iter().zip(s.iter()).map(|(a, b)| a - b).collect();
    let norm = l2_norm(&values);
    Ok(TaskVector {
        values,
        source_id: source_id.to_string(),
        target_id: target_id.to_string(),
        norm,
    })
}

/// Exact normalized dot product in `[-1, 1]`.
pub fn cosine(a: &TaskVector, b: &TaskVector) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::argument(format!(
            "task vectors have different lengths: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.norm == 0.0 || b.norm == 0.0 {
        return Err(Error::argument(
            "cosine of a zero-norm task vector is undefined (degenerate direction)".to_string(),
        ));
    }
    Ok(dot(&a.values, &b.values) / (a.norm * b.norm))
}

/// Orthonormal plane spanned by two task vectors (Gram-Schmidt): `e1` along
/// the first basis vector, `e2` the orthonormalized second.
pub struct Plane {
    pub e1: Vec<f64>,
    pub e2: Vec<f64>,
}

impl Plane {
    pub fn coords(&self, v: &TaskVector) -> [f64; 2] {
        [dot(&v.values, &self.e1), dot(&v.values, &self.e2)]
    }
}

pub fn plane(basis_u: &TaskVector, basis_ft: &TaskVector) -> Result<Plane> {
    let c = cosine(basis_u, basis_ft)?;
    if c.abs() >= 1.0 - 1e-9 {
        return Err(Error::DegenerateBasis(format!(
            "basis task vectors are collinear (|cos| = {:.12})",
            c.abs()
        )));
    }
    let e1: Vec<f64> = basis_u.values.iter().map(|v| v / basis_u.norm).collect();
    let proj = dot(&basis_ft.values, &e1);
    let mut w: Vec<f64> = basis_ft
        .values
        .iter()
        .zip(e1.iter())
        .map(|(f, e)| f - proj * e)
        .collect();
    let wn = l2_norm(&w);
    for v in w.iter_mut() {
        *v /= wn;
    }
    Ok(Plane { e1, e2: w })
}

/// 2D coordinates in the `(basis_u, basis_ft)` plane for the two basis
/// vectors followed by `others`. `basis_u` maps to `(|u|, 0)` and
/// `basis_ft` to the upper half-plane.
pub fn project_2d(
    basis_u: &TaskVector,
    basis_ft: &TaskVector,
    others: &[&TaskVector],
) -> Result<Vec<[f64; 2]>> {
    let p = plane(basis_u, basis_ft)?;
    let mut out = Vec::with_capacity(2 + others.len());
    out.push(p.coords(basis_u));
    out.push(p.coords(basis_ft));
    for v in others {
        out.push(p.coords(v));
    }
    Ok(out)
}

/// Cosine matrix over labeled vectors, written as CSV (rows/cols in input
/// order).
pub fn write_cosine_csv(path: &Path, labeled: &[(String, &TaskVector)]) -> Result<()> {
    let mut out = String::new();
    out.push_str("vector");
    for (name, _) in labeled {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for (name, a) in labeled {
        out.push_str(name);
        for (_, b) in labeled {
            out.push(',');
            out.push_str(&cosine(a, b)?.to_string());
        }
        out.push('\n');
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// 2D projection coordinates as CSV: `vector,x,y`.
pub fn write_coords_csv(path: &Path, labels: &[String], coords: &[[f64; 2]]) -> Result<()> {
    let mut out = String::from("vector,x,y\n");
    for (name, c) in labels.iter().zip(coords.iter()) {
        out.push_str(&format!("{},{},{}\n", name, c[0], c[1]));
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, out)?;
    Ok(())
}
