//! Dense-tensor arithmetic, stable loss kernels, seeded randomness, and the
//! finite-difference oracle used to validate every analytic gradient in the
//! repo.
//!
//! Everything here is pure and 64-bit; 32-bit floats appear only inside
//! checkpoint files.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Row-major dense tensor of `f64` values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::argument(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows when viewed as a 2-D `[rows, cols]` tensor.
    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows() requires a rank-2 tensor");
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() requires a rank-2 tensor");
        self.shape[1]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.shape[self.shape.len() - 1];
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::numeric(format!("non-finite value in {what}")))
        }
    }
}

/// Counter-based pseudo-random stream keyed by `(seed, stream)`.
///
/// The same key yields the same sequence on every platform and every run;
/// distinct streams from one seed are independent, so parallel generators
/// never share state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RngStream {
    pub seed: u64,
    pub stream: u64,
    counter: u64,
    /// Cached second output of the Box-Muller pair.
    #[serde(skip)]
    gauss_spare: Option<f64>,
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        RngStream {
            seed,
            stream,
            counter: 0,
            gauss_spare: None,
        }
    }

    /// Derive a child stream; children with distinct ids are independent.
    pub fn substream(&self, id: u64) -> RngStream {
        RngStream::new(self.seed, mix64(self.stream.wrapping_add(GOLDEN).wrapping_add(id)))
    }

    pub fn next_u64(&mut self) -> u64 {
        let key = mix64(self.seed ^ mix64(self.stream.wrapping_mul(GOLDEN)));
        let v = mix64(key.wrapping_add(self.counter.wrapping_mul(GOLDEN)));
        self.counter += 1;
        v
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `[0, n)`; `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        // Modulo bias is negligible for n << 2^64.
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal via Box-Muller.
    pub fn gauss(&mut self) -> f64 {
        if let Some(v) = self.gauss_spare.take() {
            return v;
        }
        let u1 = loop {
            let u = self.next_f64();
            if u > 0.0 {
                break u;
            }
        };
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (2.0 * std::f64::consts::PI * u2).sin_cos();
        self.gauss_spare = Some(r * s);
        r * c
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// Mean cross-entropy over a batch of logit rows, plus the exact logit
/// gradient (`softmax(z) - onehot(y)` scaled by `1/batch`).
///
/// The loss uses the log-sum-exp shift, so arbitrarily large logits stay
/// finite.
pub fn softmax_cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<(f64, Tensor)> {
    if logits.shape.len() != 2 {
        return Err(Error::argument(format!(
            "logits must be [batch, classes], got shape {:?}",
            logits.shape
        )));
    }
    let (batch, classes) = (logits.rows(), logits.cols());
    if classes < 2 {
        return Err(Error::argument(format!("need at least 2 classes, got {classes}")));
    }
    if targets.len() != batch {
        return Err(Error::argument(format!(
            "{batch} logit rows but {} targets",
            targets.len()
        )));
    }
    logits.check_finite("logits")?;

    let mut grad = Tensor::zeros(&[batch, classes]);
    let mut loss = 0.0;
    let inv_batch = 1.0 / batch as f64;
    for (r, &y) in targets.iter().enumerate() {
        if y >= classes {
            return Err(Error::argument(format!(
                "target {y} out of range for {classes} classes (row {r})"
            )));
        }
        let z = logits.row(r);
        let g = grad.row_mut(r);
        let (lse, _) = log_softmax_into(z, g);
        loss += (lse - z[y]) * inv_batch;
        // g currently holds log-probabilities; convert to softmax - onehot.
        for v in g.iter_mut() {
            *v = v.exp() * inv_batch;
        }
        g[y] -= inv_batch;
    }
    Ok((loss, grad))
}

/// Writes `log_softmax(z)` into `out` and returns `(logsumexp(z), max(z))`.
pub fn log_softmax_into(z: &[f64], out: &mut [f64]) -> (f64, f64) {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (&v, o) in z.iter().zip(out.iter_mut()) {
        let e = v - m;
        *o = e;
        sum += e.exp();
    }
    let lse = m + sum.ln();
    for o in out.iter_mut() {
        *o -= sum.ln();
    }
    (lse, m)
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic sigmoid.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Central-difference gradient of a scalar function: the oracle every
/// analytic gradient in this repo is checked against.
///
/// Error is O(h^2) for smooth `f`.
pub fn finite_difference_gradient<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if h <= 0.0 {
        return Err(Error::argument(format!("step h must be positive, got {h}")));
    }
    let mut probe = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for k in 0..x.len() {
        let orig = probe[k];
        probe[k] = orig + h;
        let fp = f(&probe)?;
        probe[k] = orig - h;
        let fm = f(&probe)?;
        probe[k] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::numeric(format!(
                "non-finite probe value at coordinate {k}: f+={fp}, f-={fm}"
            )));
        }
        grad[k] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}

/// Default finite-difference step; central differences at this step meet the
/// 1e-4 relative-error gate on all smooth losses in this crate.
pub const FD_STEP: f64 = 1e-4;

/// Relative error between two gradient vectors:
/// `||a - b|| / max(||a||, ||b||, eps)`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.iter().zip(b.iter()) {
        diff += (x - y) * (x - y);
        na += x * x;
        nb += y * y;
    }
    diff.sqrt() / na.sqrt().max(nb.sqrt()).max(1e-12)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
