//! Central finite-difference gradient checks.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamStore, Tensor, Var};
use crate::error::Result;

pub const FD_STEP: f64 = 1e-5;

/// Relative error `‖a − n‖ / max(‖a‖, ‖n‖)` between analytic and numeric
/// gradients over the checked coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub rel_error: f64,
    pub checked: usize,
    pub grad_norm: f64,
}

fn rel_error(a: &[f64], n: &[f64]) -> (f64, f64) {
    let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn: f64 = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nn);
    if denom < 1e-300 {
        (0.0, 0.0)
    } else {
        (diff / denom, na)
    }
}

fn pick(rng: &mut ChaCha8Rng, len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        (0..len).collect()
    } else {
        let mut v = sample(rng, len, max).into_vec();
        v.sort_unstable();
        v
    }
}

/// Check gradients of `build` with respect to every input tensor. The output of
/// `build` may have any shape; it is contracted with fixed random weights into
/// a scalar. At most `max_coords` coordinates per input are perturbed.
pub fn check_inputs<F>(inputs: &[Tensor], build: F, max_coords: usize, seed: u64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eval = |ins: &[Tensor], weights: &[f64]| -> Result<(Graph, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.input(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        let loss = g.dot(out, weights.to_vec())?;
        Ok((g, vars, loss))
    };
    let n_out = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        g.value(out).len()
    };
    let weights: Vec<f64> = (0..n_out).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (mut g, vars, loss) = eval(inputs, &weights)?;
    g.backward(loss)?;

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (k, t) in inputs.iter().enumerate() {
        let grad = g.grad(vars[k]).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; t.len()]);
        for i in pick(&mut rng, t.len(), max_coords) {
            let mut plus = inputs.to_vec();
            plus[k].data[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data[i] -= FD_STEP;
            let fp = eval(&plus, &weights)?;
            let fm = eval(&minus, &weights)?;
            let fd = (fp.0.value(fp.2).item() - fm.0.value(fm.2).item()) / (2.0 * FD_STEP);
            analytic.push(grad[i]);
            numeric.push(fd);
        }
    }
    let (rel, norm) = rel_error(&analytic, &numeric);
    Ok(GradCheck {
        rel_error: rel,
        checked: analytic.len(),
        grad_norm: norm,
    })
}

/// Check gradients of a scalar-valued model with respect to the trainable
/// parameters in `store` and to the input tensor.
pub fn check_model<F>(store: &ParamStore, input: &Tensor, build: F, max_coords: usize, seed: u64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &mut ParamStore, Var) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eval = |s: &ParamStore, x: &Tensor| -> Result<(Graph, ParamStore, Var, Var)> {
        let mut s = s.clone();
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let loss = build(&mut g, &mut s, xv)?;
        Ok((g, s, xv, loss))
    };
    let (mut g, mut s, xv, loss) = eval(store, input)?;
    g.backward(loss)?;
    s.zero_grads();
    s.accumulate_grads(&g);

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let xgrad = g.grad(xv).map(|v| v.to_vec()).unwrap_or_else(|| vec![0.0; input.len()]);
    for i in pick(&mut rng, input.len(), max_coords) {
        let mut p = input.clone();
        p.data[i] += FD_STEP;
        let mut m = input.clone();
        m.data[i] -= FD_STEP;
        let (gp, _, _, lp) = eval(store, &p)?;
        let (gm, _, _, lm) = eval(store, &m)?;
        analytic.push(xgrad[i]);
        numeric.push((gp.value(lp).item() - gm.value(lm).item()) / (2.0 * FD_STEP));
    }
    let ids: Vec<_> = store.trainable_ids().collect();
    for id in ids {
        let n = store.value(id).len();
        let grad = s.grad(id).to_vec();
        for i in pick(&mut rng, n, max_coords) {
            let mut sp = store.clone();
            sp.value_mut(id).data[i] += FD_STEP;
            let mut sm = store.clone();
            sm.value_mut(id).data[i] -= FD_STEP;
            let (gp, _, _, lp) = eval(&sp, input)?;
            let (gm, _, _, lm) = eval(&sm, input)?;
            analytic.push(grad[i]);
            numeric.push((gp.value(lp).item() - gm.value(lm).item()) / (2.0 * FD_STEP));
        }
    }
    let (rel, norm) = rel_error(&analytic, &numeric);
    Ok(GradCheck {
        rel_error: rel,
        checked: analytic.len(),
        grad_norm: norm,
    })
}
