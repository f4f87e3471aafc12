//! Tanh feed-forward classifier with hand-derived backward pass.

use super::{matmul, matmul_at_acc, matmul_bt, ActivationTrace, MlpConfig, ParameterVector, TraceGrads};
use crate::error::{Error, Result};
use crate::numcore::Tensor;

fn check_input(c: &MlpConfig, x: &Tensor) -> Result<()> {
    if x.shape.len() != 2 || x.shape[1] != c.input_dim {
        return Err(Error::argument(format!(
            "mlp expects [batch, {}], got shape {:?}",
            c.input_dim, x.shape
        )));
    }
    if x.shape[0] == 0 {
        return Err(Error::argument("empty batch".to_string()));
    }
    x.check_finite("mlp input")
}

/// Runs the network, returning post-tanh hidden activations per layer plus
/// logits.
fn run(c: &MlpConfig, params: &ParameterVector, x: &Tensor) -> (Vec<Tensor>, Tensor) {
    let b = x.shape[0];
    let mut hiddens: Vec<Tensor> = Vec::with_capacity(c.hidden_layers);
    let mut cur = x.clone();
    for i in 0..c.hidden_layers {
        let w = params.get(&format!("fc{i}.w"));
        let bias = params.get(&format!("fc{i}.b"));
        let (k, n) = (w.shape[0], w.shape[1]);
        let mut h = Tensor::zeros(&[b, n]);
        matmul(&cur.data, &w.data, b, k, n, &mut h.data);
        for r in 0..b {
            for (v, bb) in h.row_mut(r).iter_mut().zip(bias.data.iter()) {
                *v = (*v + bb).tanh();
            }
        }
        hiddens.push(h.clone());
        cur = h;
    }
    let w = params.get("out.w");
    let bias = params.get("out.b");
    let (k, n) = (w.shape[0], w.shape[1]);
    let mut logits = Tensor::zeros(&[b, n]);
    matmul(&cur.data, &w.data, b, k, n, &mut logits.data);
    for r in 0..b {
        for (v, bb) in logits.row_mut(r).iter_mut().zip(bias.data.iter()) {
            *v += bb;
        }
    }
    (hiddens, logits)
}

pub fn forward(
    c: &MlpConfig,
    params: &ParameterVector,
    x: &Tensor,
    want_trace: bool,
) -> Result<(Tensor, Option<ActivationTrace>)> {
    check_input(c, x)?;
    let (hiddens, logits) = run(c, params, x);
    logits.check_finite("mlp logits")?;
    let trace = want_trace.then_some(ActivationTrace { layers: hiddens });
    Ok((logits, trace))
}

pub fn backward(
    c: &MlpConfig,
    params: &ParameterVector,
    x: &Tensor,
    logit_grad: &Tensor,
    trace_grads: Option<&TraceGrads>,
) -> Result<ParameterVector> {
    check_input(c, x)?;
    let b = x.shape[0];
    if logit_grad.shape != vec![b, c.classes] {
        return Err(Error::argument(format!(
            "logit_grad shape {:?} does not match logits [{b}, {}]",
            logit_grad.shape, c.classes
        )));
    }
    let (hiddens, _) = run(c, params, x);
    let mut grads = params.zeros_like();

    // Output layer.
    let last = if c.hidden_layers == 0 {
        x
    } else {
        &hiddens[c.hidden_layers - 1]
    };
    let w_out = params.get("out.w");
    {
        let gw = grads.get_mut("out.w");
        matmul_at_acc(&last.data, &logit_grad.data, b, w_out.shape[0], c.classes, &mut gw.data);
    }
    {
        let gb = grads.get_mut("out.b");
        for r in 0..b {
            for (g, &d) in gb.data.iter_mut().zip(logit_grad.row(r).iter()) {
                *g += d;
            }
        }
    }
    let mut dh = Tensor::zeros(&[b, w_out.shape[0]]);
    matmul_bt(&logit_grad.data, &w_out.data, b, w_out.shape[0], c.classes, &mut dh.data);

    // Hidden layers, top to bottom.
    for i in (0..c.hidden_layers).rev() {
        if let Some(tg) = trace_grads {
            for (layer, g) in tg {
                if *layer == i {
                    if g.shape != hiddens[i].shape {
                        return Err(Error::argument(format!(
                            "trace_grad shape {:?} does not match layer {i} shape {:?}",
                            g.shape, hiddens[i].shape
                        )));
                    }
                    for (d, &v) in dh.data.iter_mut().zip(g.data.iter()) {
                        *d += v;
                    }
                }
            }
        }
        // d(pre-activation) = dh * (1 - tanh^2)
        let mut du = dh.clone();
        for (d, &h) in du.data.iter_mut().zip(hiddens[i].data.iter()) {
            *d *= 1.0 - h * h;
        }
        let below: &Tensor = if i == 0 { x } else { &hiddens[i - 1] };
        let w = params.get(&format!("fc{i}.w"));
        let (k, n) = (w.shape[0], w.shape[1]);
        {
            let gw = grads.get_mut(&format!("fc{i}.w"));
            matmul_at_acc(&below.data, &du.data, b, k, n, &mut gw.data);
        }
        {
            let gb = grads.get_mut(&format!("fc{i}.b"));
            for r in 0..b {
                for (g, &d) in gb.data.iter_mut().zip(du.row(r).iter()) {
                    *g += d;
                }
            }
        }
        let mut dprev = Tensor::zeros(&[b, k]);
        matmul_bt(&du.data, &w.data, b, k, n, &mut dprev.data);
        dh = dprev;
    }
    Ok(grads)
}
