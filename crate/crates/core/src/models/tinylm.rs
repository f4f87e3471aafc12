//! Small pre-LN causal transformer with a hand-derived backward pass.
//!
//! Layout per block: `x + attn(ln1(x))` then `+ mlp(ln2(.))` with a tanh
//! feed-forward of width `2d`; final layer norm and an untied output
//! projection. No dropout, so every pass is bit-deterministic.

use super::{matmul, matmul_at_acc, matmul_bt, ActivationTrace, ParameterVector, TinyLmConfig, TraceGrads};
use crate::error::{Error, Result};
use crate::numcore::Tensor;
use rayon::prelude::*;

/// Fixed parallel split of a batch; constant so results do not depend on the
/// machine's core count.
const PAR_CHUNKS: usize = 4;

const LN_EPS: f64 = 1e-5;

fn check_batch(c: &TinyLmConfig, ids: &[Vec<usize>]) -> Result<usize> {
    if ids.is_empty() {
        return Err(Error::argument("empty batch".to_string()));
    }
    let t = ids[0].len();
    if t == 0 || t > c.context {
        return Err(Error::argument(format!(
            "sequence length {t} outside [1, {}]",
            c.context
        )));
    }
    for (i, seq) in ids.iter().enumerate() {
        if seq.len() != t {
            return Err(Error::argument(format!(
                "ragged batch: sequence {i} has length {}, expected {t}",
                seq.len()
            )));
        }
        if let Some(&tok) = seq.iter().find(|&&tok| tok >= c.vocab) {
            return Err(Error::argument(format!(
                "token id {tok} >= vocab {} in sequence {i}",
                c.vocab
            )));
        }
    }
    Ok(t)
}

/// Splits `n` examples into at most `PAR_CHUNKS` contiguous ranges.
fn chunk_ranges(n: usize) -> Vec<std::ops::Range<usize>> {
    let chunks = PAR_CHUNKS.min(n);
    let base = n / chunks;
    let rem = n % chunks;
    let mut out = Vec::with_capacity(chunks);
    let mut at = 0;
    for i in 0..chunks {
        let len = base + usize::from(i < rem);
        out.push(at..at + len);
        at += len;
    }
    out
}

/// Row-wise layer norm; writes xhat and the normalized-scaled output,
/// returns per-row 1/std.
fn ln_forward(
    x: &[f64],
    gain: &[f64],
    shift: &[f64],
    rows: usize,
    d: usize,
    xhat: &mut [f64],
    y: &mut [f64],
) -> Vec<f64> {
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std[r] = is;
        let xh = &mut xhat[r * d..(r + 1) * d];
        let yr = &mut y[r * d..(r + 1) * d];
        for i in 0..d {
            xh[i] = (row[i] - mean) * is;
            yr[i] = gain[i] * xh[i] + shift[i];
        }
    }
    inv_std
}

/// Backward through layer norm: given dy, accumulates dgain/dshift and
/// writes dx.
#[allow(clippy::too_many_arguments)]
fn ln_backward(
    dy: &[f64],
    xhat: &[f64],
    inv_std: &[f64],
    gain: &[f64],
    rows: usize,
    d: usize,
    dgain: &mut [f64],
    dshift: &mut [f64],
    dx: &mut [f64],
) {
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &xhat[r * d..(r + 1) * d];
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for i in 0..d {
            let dxh = dyr[i] * gain[i];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xh[i];
            dgain[i] += dyr[i] * xh[i];
            dshift[i] += dyr[i];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        let dxr = &mut dx[r * d..(r + 1) * d];
        for i in 0..d {
            let dxh = dyr[i] * gain[i];
            dxr[i] = inv_std[r] * (dxh - mean_dxhat - xh[i] * mean_dxhat_xhat);
        }
    }
}

/// Per-block forward cache for one chunk of examples.
struct BlockCache {
    xhat1: Vec<f64>,
    inv_std1: Vec<f64>,
    y1: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// Attention weights, `[chunk_b, heads, t, t]`, zero above the diagonal.
    attn: Vec<f64>,
    concat: Vec<f64>,
    xhat2: Vec<f64>,
    inv_std2: Vec<f64>,
    y2: Vec<f64>,
    /// Post-tanh feed-forward activations.
    h: Vec<f64>,
}

struct ChunkForward {
    /// Residual stream: `xs[0]` is the embedding sum, `xs[l+1]` the output
    /// of block `l`. Each `[chunk_rows, d]`.
    xs: Vec<Vec<f64>>,
    blocks: Vec<BlockCache>,
    xhatf: Vec<f64>,
    inv_stdf: Vec<f64>,
    yf: Vec<f64>,
    logits: Vec<f64>,
}

fn linear_bias(x: &[f64], w: &Tensor, b: &Tensor, rows: usize) -> Vec<f64> {
    let (kk, n) = (w.shape[0], w.shape[1]);
    let mut out = vec![0.0; rows * n];
    matmul(x, &w.data, rows, kk, n, &mut out);
    for r in 0..rows {
        for (o, &bb) in out[r * n..(r + 1) * n].iter_mut().zip(b.data.iter()) {
            *o += bb;
        }
    }
    out
}

fn forward_chunk(c: &TinyLmConfig, params: &ParameterVector, ids: &[Vec<usize>], t: usize) -> ChunkForward {
    let d = c.hidden_dim;
    let m = c.mlp_dim();
    let heads = c.heads;
    let dh = c.head_dim();
    let cb = ids.len();
    let rows = cb * t;
    let scale = 1.0 / (dh as f64).sqrt();

    let tok_emb = params.get("tok_emb");
    let pos_emb = params.get("pos_emb");

    let mut x0 = vec![0.0; rows * d];
    for (i, seq) in ids.iter().enumerate() {
        for (p, &tok) in seq.iter().enumerate() {
            let row = &mut x0[(i * t + p) * d..(i * t + p + 1) * d];
            let te = &tok_emb.data[tok * d..(tok + 1) * d];
            let pe = &pos_emb.data[p * d..(p + 1) * d];
            for j in 0..d {
                row[j] = te[j] + pe[j];
            }
        }
    }

    let mut xs = vec![x0];
    let mut blocks = Vec::with_capacity(c.layers);
    for l in 0..c.layers {
        let x = xs.last().unwrap();
        let ln1g = params.get(&format!("l{l}.ln1.g"));
        let ln1b = params.get(&format!("l{l}.ln1.b"));
        let mut xhat1 = vec![0.0; rows * d];
        let mut y1 = vec![0.0; rows * d];
        let inv_std1 = ln_forward(x, &ln1g.data, &ln1b.data, rows, d, &mut xhat1, &mut y1);

        let q = linear_bias(&y1, params.get(&format!("l{l}.wq")), params.get(&format!("l{l}.bq")), rows);
        let k = linear_bias(&y1, params.get(&format!("l{l}.wk")), params.get(&format!("l{l}.bk")), rows);
        let v = linear_bias(&y1, params.get(&format!("l{l}.wv")), params.get(&format!("l{l}.bv")), rows);

        let mut attn = vec![0.0; cb * heads * t * t];
        let mut concat = vec![0.0; rows * d];
        for b in 0..cb {
            for h in 0..heads {
                let hoff = h * dh;
                let abase = (b * heads + h) * t * t;
                for i in 0..t {
                    let qrow = &q[(b * t + i) * d + hoff..(b * t + i) * d + hoff + dh];
                    // causal scores over j <= i, softmax in place
                    let mut maxv = f64::NEG_INFINITY;
                    for j in 0..=i {
                        let krow = &k[(b * t + j) * d + hoff..(b * t + j) * d + hoff + dh];
                        let s = crate::numcore::dot(qrow, krow) * scale;
                        attn[abase + i * t + j] = s;
                        if s > maxv {
                            maxv = s;
                        }
                    }
                    let mut sum = 0.0;
                    for j in 0..=i {
                        let e = (attn[abase + i * t + j] - maxv).exp();
                        attn[abase + i * t + j] = e;
                        sum += e;
                    }
                    let inv = 1.0 / sum;
                    let orow = &mut concat[(b * t + i) * d + hoff..(b * t + i) * d + hoff + dh];
                    for j in 0..=i {
                        let a = attn[abase + i * t + j] * inv;
                        attn[abase + i * t + j] = a;
                        let vrow = &v[(b * t + j) * d + hoff..(b * t + j) * d + hoff + dh];
                        for (o, &vv) in orow.iter_mut().zip(vrow.iter()) {
                            *o += a * vv;
                        }
                    }
                }
            }
        }

        let attn_out = linear_bias(&concat, params.get(&format!("l{l}.wo")), params.get(&format!("l{l}.bo")), rows);
        let mut a_res = vec![0.0; rows * d];
        for i in 0..rows * d {
            a_res[i] = x[i] + attn_out[i];
        }

        let ln2g = params.get(&format!("l{l}.ln2.g"));
        let ln2b = params.get(&format!("l{l}.ln2.b"));
        let mut xhat2 = vec![0.0; rows * d];
        let mut y2 = vec![0.0; rows * d];
        let inv_std2 = ln_forward(&a_res, &ln2g.data, &ln2b.data, rows, d, &mut xhat2, &mut y2);

        let mut h_act = linear_bias(&y2, params.get(&format!("l{l}.w1")), params.get(&format!("l{l}.b1")), rows);
        for v in h_act.iter_mut() {
            *v = v.tanh();
        }
        let mlp_out = linear_bias(&h_act, params.get(&format!("l{l}.w2")), params.get(&format!("l{l}.b2")), rows);

        let mut x_next = vec![0.0; rows * d];
        for i in 0..rows * d {
            x_next[i] = a_res[i] + mlp_out[i];
        }

        blocks.push(BlockCache {
            xhat1,
            inv_std1,
            y1,
            q,
            k,
            v,
            attn,
            concat,
            xhat2,
            inv_std2,
            y2,
            h: h_act,
        });
        xs.push(x_next);
        let _ = m;
    }

    let lnfg = params.get("lnf.g");
    let lnfb = params.get("lnf.b");
    let mut xhatf = vec![0.0; rows * d];
    let mut yf = vec![0.0; rows * d];
    let inv_stdf = ln_forward(xs.last().unwrap(), &lnfg.data, &lnfb.data, rows, d, &mut xhatf, &mut yf);
    let logits = linear_bias(&yf, params.get("out.w"), params.get("out.b"), rows);

    ChunkForward {
        xs,
        blocks,
        xhatf,
        inv_stdf,
        yf,
        logits,
    }
}

pub fn forward(
    c: &TinyLmConfig,
    params: &ParameterVector,
    ids: &[Vec<usize>],
    want_trace: bool,
) -> Result<(Tensor, Option<ActivationTrace>)> {
    let t = check_batch(c, ids)?;
    let b = ids.len();
    let d = c.hidden_dim;
    let ranges = chunk_ranges(b);
    let parts: Vec<ChunkForward> = ranges
        .par_iter()
        .map(|r| forward_chunk(c, params, &ids[r.clone()], t))
        .collect();

    let mut logits = Tensor::zeros(&[b, t, c.vocab]);
    let mut at = 0;
    for part in &parts {
        logits.data[at..at + part.logits.len()].copy_from_slice(&part.logits);
        at += part.logits.len();
    }
    logits.check_finite("tinylm logits")?;

    let trace = if want_trace {
        let mut layers = Vec::with_capacity(c.layers);
        for l in 0..c.layers {
            let mut full = Tensor::zeros(&[b, t, d]);
            let mut at = 0;
            for part in &parts {
                let x = &part.xs[l + 1];
                full.data[at..at + x.len()].copy_from_slice(x);
                at += x.len();
            }
            layers.push(full);
        }
        Some(ActivationTrace { layers })
    } else {
        None
    };
    Ok((logits, trace))
}

#[allow(clippy::too_many_arguments)]
fn backward_chunk(
    c: &TinyLmConfig,
    params: &ParameterVector,
    ids: &[Vec<usize>],
    t: usize,
    dlogits: &[f64],
    trace_grads: Option<&TraceGrads>,
    trace_offset: usize,
) -> ParameterVector {
    let d = c.hidden_dim;
    let m = c.mlp_dim();
    let heads = c.heads;
    let dh = c.head_dim();
    let cb = ids.len();
    let rows = cb * t;
    let scale = 1.0 / (dh as f64).sqrt();

    let fwd = forward_chunk(c, params, ids, t);
    let mut grads = params.zeros_like();

    // Output projection.
    let w_out = params.get("out.w");
    matmul_at_acc(&fwd.yf, dlogits, rows, d, c.vocab, &mut grads.get_mut("out.w").data);
    {
        let gb = &mut grads.get_mut("out.b").data;
        for r in 0..rows {
            for (g, &dv) in gb.iter_mut().zip(dlogits[r * c.vocab..(r + 1) * c.vocab].iter()) {
                *g += dv;
            }
        }
    }
    let mut dyf = vec![0.0; rows * d];
    matmul_bt(dlogits, &w_out.data, rows, d, c.vocab, &mut dyf);

    // Final layer norm.
    let mut dx = vec![0.0; rows * d];
    {
        let lnfg = params.get("lnf.g").data.clone();
        let (dgain, dshift) = {
            let mut dgain = vec![0.0; d];
            let mut dshift = vec![0.0; d];
            ln_backward(&dyf, &fwd.xhatf, &fwd.inv_stdf, &lnfg, rows, d, &mut dgain, &mut dshift, &mut dx);
            (dgain, dshift)
        };
        grads.get_mut("lnf.g").data.copy_from_slice(&dgain);
        grads.get_mut("lnf.b").data.copy_from_slice(&dshift);
    }

    for l in (0..c.layers).rev() {
        // Gradient injected directly at this block's output.
        if let Some(tgs) = trace_grads {
            for (layer, g) in tgs {
                if *layer == l {
                    let src = &g.data[trace_offset * d..(trace_offset + rows) * d];
                    for (dst, &v) in dx.iter_mut().zip(src.iter()) {
                        *dst += v;
                    }
                }
            }
        }
        let cache = &fwd.blocks[l];

        // Feed-forward branch: x_out = a + mlp(ln2(a)).
        let mut dh_act = vec![0.0; rows * m];
        let w2 = params.get(&format!("l{l}.w2"));
        matmul_at_acc(&cache.h, &dx, rows, m, d, &mut grads.get_mut(&format!("l{l}.w2")).data);
        {
            let gb = &mut grads.get_mut(&format!("l{l}.b2")).data;
            for r in 0..rows {
                for (g, &dv) in gb.iter_mut().zip(dx[r * d..(r + 1) * d].iter()) {
                    *g += dv;
                }
            }
        }
        matmul_bt(&dx, &w2.data, rows, m, d, &mut dh_act);
        let mut du = dh_act;
        for (dv, &h) in du.iter_mut().zip(cache.h.iter()) {
            *dv *= 1.0 - h * h;
        }
        let w1 = params.get(&format!("l{l}.w1"));
        matmul_at_acc(&cache.y2, &du, rows, d, m, &mut grads.get_mut(&format!("l{l}.w1")).data);
        {
            let gb = &mut grads.get_mut(&format!("l{l}.b1")).data;
            for r in 0..rows {
                for (g, &dv) in gb.iter_mut().zip(du[r * m..(r + 1) * m].iter()) {
                    *g += dv;
                }
            }
        }
        let mut dy2 = vec![0.0; rows * d];
        matmul_bt(&du, &w1.data, rows, d, m, &mut dy2);

        // ln2 backward; its dx adds to the residual gradient flowing into a.
        let mut da = dx.clone();
        {
            let g2 = params.get(&format!("l{l}.ln2.g")).data.clone();
            let mut dgain = vec![0.0; d];
            let mut dshift = vec![0.0; d];
            let mut da_ln = vec![0.0; rows * d];
            ln_backward(&dy2, &cache.xhat2, &cache.inv_std2, &g2, rows, d, &mut dgain, &mut dshift, &mut da_ln);
            for (x, &v) in da.iter_mut().zip(da_ln.iter()) {
                *x += v;
            }
            for (g, &v) in grads.get_mut(&format!("l{l}.ln2.g")).data.iter_mut().zip(dgain.iter()) {
                *g += v;
            }
            for (g, &v) in grads.get_mut(&format!("l{l}.ln2.b")).data.iter_mut().zip(dshift.iter()) {
                *g += v;
            }
        }

        // Attention branch: a = x + attn_out.
        let wo = params.get(&format!("l{l}.wo"));
        matmul_at_acc(&cache.concat, &da, rows, d, d, &mut grads.get_mut(&format!("l{l}.wo")).data);
        {
            let gb = &mut grads.get_mut(&format!("l{l}.bo")).data;
            for r in 0..rows {
                for (g, &dv) in gb.iter_mut().zip(da[r * d..(r + 1) * d].iter()) {
                    *g += dv;
                }
            }
        }
        let mut dconcat = vec![0.0; rows * d];
        matmul_bt(&da, &wo.data, rows, d, d, &mut dconcat);

        let mut dq = vec![0.0; rows * d];
        let mut dk = vec![0.0; rows * d];
        let mut dv = vec![0.0; rows * d];
        for b in 0..cb {
            for h in 0..heads {
                let hoff = h * dh;
                let abase = (b * heads + h) * t * t;
                for i in 0..t {
                    let dout = &dconcat[(b * t + i) * d + hoff..(b * t + i) * d + hoff + dh];
                    // dA and the softmax Jacobian, row i
                    let mut da_row = vec![0.0; i + 1];
                    let mut rowdot = 0.0;
                    for (j, daj) in da_row.iter_mut().enumerate() {
                        let vrow = &cache.v[(b * t + j) * d + hoff..(b * t + j) * d + hoff + dh];
                        *daj = crate::numcore::dot(dout, vrow);
                        rowdot += *daj * cache.attn[abase + i * t + j];
                    }
                    for (j, &daj) in da_row.iter().enumerate() {
                        let aij = cache.attn[abase + i * t + j];
                        // dV
                        let dvrow = &mut dv[(b * t + j) * d + hoff..(b * t + j) * d + hoff + dh];
                        for (dst, &o) in dvrow.iter_mut().zip(dout.iter()) {
                            *dst += aij * o;
                        }
                        // dS through softmax
                        let ds = aij * (daj - rowdot) * scale;
                        if ds != 0.0 {
                            let krow = &cache.k[(b * t + j) * d + hoff..(b * t + j) * d + hoff + dh];
                            let qrow = &cache.q[(b * t + i) * d + hoff..(b * t + i) * d + hoff + dh];
                            let dqrow = &mut dq[(b * t + i) * d + hoff..(b * t + i) * d + hoff + dh];
                            for (dst, &kv) in dqrow.iter_mut().zip(krow.iter()) {
                                *dst += ds * kv;
                            }
                            let dkrow = &mut dk[(b * t + j) * d + hoff..(b * t + j) * d + hoff + dh];
                            for (dst, &qv) in dkrow.iter_mut().zip(qrow.iter()) {
                                *dst += ds * qv;
                            }
                        }
                    }
                }
            }
        }

        let mut dy1 = vec![0.0; rows * d];
        for (name_w, name_b, dmat) in [("wq", "bq", &dq), ("wk", "bk", &dk), ("wv", "bv", &dv)] {
            let w = params.get(&format!("l{l}.{name_w}"));
            matmul_at_acc(&cache.y1, dmat, rows, d, d, &mut grads.get_mut(&format!("l{l}.{name_w}")).data);
            {
                let gb = &mut grads.get_mut(&format!("l{l}.{name_b}")).data;
                for r in 0..rows {
                    for (g, &dvv) in gb.iter_mut().zip(dmat[r * d..(r + 1) * d].iter()) {
                        *g += dvv;
                    }
                }
            }
            let mut tmp = vec![0.0; rows * d];
            matmul_bt(dmat, &w.data, rows, d, d, &mut tmp);
            for (dst, &v) in dy1.iter_mut().zip(tmp.iter()) {
                *dst += v;
            }
        }

        // ln1 backward; residual gradient into the block input.
        let mut dx_in = da.clone();
        {
            let g1 = params.get(&format!("l{l}.ln1.g")).data.clone();
            let mut dgain = vec![0.0; d];
            let mut dshift = vec![0.0; d];
            let mut dx_ln = vec![0.0; rows * d];
            ln_backward(&dy1, &cache.xhat1, &cache.inv_std1, &g1, rows, d, &mut dgain, &mut dshift, &mut dx_ln);
            for (x, &v) in dx_in.iter_mut().zip(dx_ln.iter()) {
                *x += v;
            }
            for (g, &v) in grads.get_mut(&format!("l{l}.ln1.g")).data.iter_mut().zip(dgain.iter()) {
                *g += v;
            }
            for (g, &v) in grads.get_mut(&format!("l{l}.ln1.b")).data.iter_mut().zip(dshift.iter()) {
                *g += v;
            }
        }
        dx = dx_in;
    }

    // Embedding gradients.
    {
        let gtok = &mut grads.get_mut("tok_emb").data;
        for (i, seq) in ids.iter().enumerate() {
            for (p, &tok) in seq.iter().enumerate() {
                let src = &dx[(i * t + p) * d..(i * t + p + 1) * d];
                let dst = &mut gtok[tok * d..(tok + 1) * d];
                for (g, &v) in dst.iter_mut().zip(src.iter()) {
                    *g += v;
                }
            }
        }
    }
    {
        let gpos = &mut grads.get_mut("pos_emb").data;
        for i in 0..cb {
            for p in 0..t {
                let src = &dx[(i * t + p) * d..(i * t + p + 1) * d];
                let dst = &mut gpos[p * d..(p + 1) * d];
                for (g, &v) in dst.iter_mut().zip(src.iter()) {
                    *g += v;
                }
            }
        }
    }
    grads
}

pub fn backward(
    c: &TinyLmConfig,
    params: &ParameterVector,
    ids: &[Vec<usize>],
    logit_grad: &Tensor,
    trace_grads: Option<&TraceGrads>,
) -> Result<ParameterVector> {
    let t = check_batch(c, ids)?;
    let b = ids.len();
    if logit_grad.shape != vec![b, t, c.vocab] {
        return Err(Error::argument(format!(
            "logit_grad shape {:?} does not match logits [{b}, {t}, {}]",
            logit_grad.shape, c.vocab
        )));
    }
    if let Some(tgs) = trace_grads {
        for (layer, g) in tgs {
            if g.shape != vec![b, t, c.hidden_dim] {
                return Err(Error::argument(format!(
                    "trace_grad for layer {layer} has shape {:?}, expected [{b}, {t}, {}]",
                    g.shape, c.hidden_dim
                )));
            }
        }
    }

    let ranges = chunk_ranges(b);
    let parts: Vec<ParameterVector> = ranges
        .par_iter()
        .map(|r| {
            let dlogits = &logit_grad.data[r.start * t * c.vocab..r.end * t * c.vocab];
            backward_chunk(c, params, &ids[r.clone()], t, dlogits, trace_grads, r.start * t)
        })
        .collect();

    let mut total = parts[0].clone();
    for part in &parts[1..] {
        total.axpy(1.0, part);
    }
    Ok(total)
}
