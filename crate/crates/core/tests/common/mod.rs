#![allow(dead_code)]

pub mod eval_oracle;

use ewasr::graph::{Graph, Mode, Var};
use ewasr::params::{init_rng, ParamId, ParamStore};
use ewasr::{Shape, Tensor};
use rand::Rng;

pub fn rand_tensor(shape: Shape, seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = init_rng(seed);
    let data = (0..shape.numel()).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Direct-loop 2-D convolution of one sample; `w` is `[oc, ic, k, k]`.
pub fn conv_oracle(x: &Tensor, w: &[f64], b: Option<&[f64]>, oc: usize, k: usize, pad: usize, dil: usize) -> Tensor {
    let s = x.shape();
    let (ic, h, wd) = (s.c, s.h, s.w);
    let oh = h + 2 * pad - dil * (k - 1);
    let ow = wd + 2 * pad - dil * (k - 1);
    let mut out = Tensor::zeros(Shape::new(1, oc, oh, ow));
    for o in 0..oc {
        for y in 0..oh {
            for xo in 0..ow {
                let mut acc = b.map_or(0.0, |b| b[o]);
                for i in 0..ic {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (y + ky * dil) as i64 - pad as i64;
                            let ix = (xo + kx * dil) as i64 - pad as i64;
                            if iy < 0 || ix < 0 || iy >= h as i64 || ix >= wd as i64 {
                                continue;
                            }
                            acc += w[((o * ic + i) * k + ky) * k + kx] * x.at(0, i, iy as usize, ix as usize);
                        }
                    }
                }
                out.set(0, o, y, xo, acc);
            }
        }
    }
    out
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Gradients that vanish analytically (e.g. biases feeding a training-mode
/// batch norm) come out of central differences as ~1e-10 noise, so the
/// denominator has a small absolute floor.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-5)
}

/// Largest relative error between back-propagated and central-difference
/// gradients of `sum(out ⊙ R)` for a fixed random `R`, over every input
/// value and every value of `params`.
pub fn max_grad_error(
    ps: &mut ParamStore,
    inputs: &[Tensor],
    params: &[ParamId],
    mode: Mode,
    forward: impl Fn(&mut Graph, &ParamStore, &[Var]) -> Var,
) -> f64 {
    let objective = |ps: &ParamStore, inputs: &[Tensor], r: Option<&Tensor>| -> (f64, Tensor, Graph, Vec<Var>, Var) {
        let mut g = Graph::new(mode);
        let vars: Vec<Var> = inputs.iter().map(|t| g.input_grad(t.clone())).collect();
        let out = forward(&mut g, ps, &vars);
        let v = g.value(out).clone();
        let r = r.cloned().unwrap_or_else(|| rand_tensor(v.shape(), 99, -1.0, 1.0));
        let f = v.data().iter().zip(r.data()).map(|(a, b)| a * b).sum();
        (f, r, g, vars, out)
    };
    let (_, r, g, vars, out) = objective(ps, inputs, None);
    let grads = g.backward(&[(out, r.clone())]).unwrap();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for (k, t) in inputs.iter().enumerate() {
        let analytic = grads.input(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
        for i in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            let n = (objective(ps, &plus, Some(&r)).0 - objective(ps, &minus, Some(&r)).0) / (2.0 * h);
            worst = worst.max(rel_err(analytic.data()[i], n));
        }
    }
    for &id in params {
        let analytic = grads.param(id).cloned().unwrap_or_else(|| Tensor::zeros(ps.entry(id).shape));
        for i in 0..analytic.len() {
            ps.update(id, |d| d[i] += h);
            let fp = objective(ps, inputs, Some(&r)).0;
            ps.update(id, |d| d[i] -= 2.0 * h);
            let fm = objective(ps, inputs, Some(&r)).0;
            ps.update(id, |d| d[i] += h);
            worst = worst.max(rel_err(analytic.data()[i], (fp - fm) / (2.0 * h)));
        }
    }
    worst
}
