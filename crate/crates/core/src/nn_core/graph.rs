use std::sync::Arc;

use super::conv::{conv2d_backward, conv2d_forward, ConvSpec};
use super::{Mode, ParamId, ParamStore, Tensor};
use crate::error::{shape_err, Error, Result};
use crate::sparse_conv::{sparse_conv_backward, sparse_conv_forward, Rulebook};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: ConvSpec,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample(Var),
    Concat(Vec<Var>),
    Add(Var, Var),
    Mul(Var, Var),
    Fuse {
        f: Var,
        m: Var,
    },
    SliceWidth {
        x: Var,
        lo: usize,
    },
    SparseConv {
        x: Var,
        w: Var,
        b: Option<Var>,
        rulebook: Arc<Rulebook>,
    },
    ToBev {
        x: Var,
        base: Arc<Vec<usize>>,
        channel_stride: usize,
    },
    Focal {
        x: Var,
        labels: Vec<i8>,
        alpha: f64,
        gamma: f64,
        norm: f64,
    },
    SmoothL1 {
        x: Var,
        target: Vec<f64>,
        weight: Vec<f64>,
        norm: f64,
    },
    SoftmaxCe {
        x: Var,
        targets: Vec<i32>,
        classes: usize,
        norm: f64,
    },
    Bce {
        x: Var,
        labels: Vec<f64>,
        eps: f64,
    },
    Dot {
        x: Var,
        weights: Vec<f64>,
    },
    WeightedSum(Vec<(Var, f64)>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Reverse-mode tape.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    grad_enabled: bool,
    bn_momentum: Option<f64>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape != b.shape {
        return Err(shape_err!("{what}: {:?} vs {:?}", a.shape, b.shape));
    }
    Ok(())
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, len: usize, f: impl FnOnce(&mut [f64])) {
    let g = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
    f(g);
}

fn add_into(grads: &mut [Option<Vec<f64>>], v: Var, delta: &[f64]) {
    accumulate(grads, v, delta.len(), |g| {
        g.iter_mut().zip(delta).for_each(|(a, b)| *a += b)
    });
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            grad_enabled: true,
            bn_momentum: None,
        }
    }

    /// A graph that never runs backward; [`discard`](Self::discard) then frees
    /// intermediate values.
    pub fn inference() -> Self {
        Graph {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Override the running-statistics momentum used by train-mode batch norm
    /// layers built on this graph.
    pub fn set_bn_momentum(&mut self, momentum: Option<f64>) {
        self.bn_momentum = momentum;
    }

    pub fn bn_momentum(&self) -> Option<f64> {
        self.bn_momentum
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Release the stored values of intermediates on an inference graph.
    pub fn discard(&mut self, vars: &[Var]) {
        if self.grad_enabled {
            return;
        }
        for v in vars {
            self.nodes[v.0].value = Tensor::default();
        }
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.nodes.iter().zip(&self.grads).filter_map(|(n, g)| match (&n.op, g) {
            (Op::Param(id), Some(g)) => Some((*id, g.as_slice())),
            _ => None,
        })
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        let y = conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), spec)?;
        Ok(self.push(
            y,
            Op::Conv2d {
                x,
                w,
                b,
                spec: *spec,
            },
        ))
    }

    /// Batch normalization over axis 1 of a tensor of rank >= 2. In train mode
    /// the running statistics, if given, are blended with momentum.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&mut [f64], &mut [f64])>,
        mode: Mode,
        momentum: f64,
        eps: f64,
    ) -> Result<Var> {
        let xv = self.value(x);
        let [outer, ch, inner] = xv.channel_view()?;
        if self.value(gamma).len() != ch || self.value(beta).len() != ch {
            return Err(shape_err!("batch norm affine params must have {ch} values"));
        }
        let count = outer * inner;
        let mut mean = vec![0.0; ch];
        let mut var = vec![0.0; ch];
        let train = mode == Mode::Train;
        if train {
            if count > 0 {
                for o in 0..outer {
                    for c in 0..ch {
                        let base = (o * ch + c) * inner;
                        mean[c] += xv.data[base..base + inner].iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count as f64);
                for o in 0..outer {
                    for c in 0..ch {
                        let base = (o * ch + c) * inner;
                        var[c] += xv.data[base..base + inner]
                            .iter()
                            .map(|v| (v - mean[c]).powi(2))
                            .sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= count as f64);
                if let Some((rm, rv)) = running {
                    let unbias = if count > 1 {
                        count as f64 / (count - 1) as f64
                    } else {
                        1.0
                    };
                    for c in 0..ch {
                        rm[c] = momentum * rm[c] + (1.0 - momentum) * mean[c];
                        rv[c] = momentum * rv[c] + (1.0 - momentum) * var[c] * unbias;
                    }
                }
            }
        } else {
            let (rm, rv) = running
                .ok_or_else(|| Error::Invalid("eval-mode batch norm needs running statistics".into()))?;
            mean.copy_from_slice(rm);
            var.copy_from_slice(rv);
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = &self.value(gamma).data;
        let bt = &self.value(beta).data;
        let mut xhat = vec![0.0; xv.len()];
        let mut y = vec![0.0; xv.len()];
        for o in 0..outer {
            for c in 0..ch {
                let base = (o * ch + c) * inner;
                for i in base..base + inner {
                    let h = (xv.data[i] - mean[c]) * inv_std[c];
                    xhat[i] = h;
                    y[i] = g[c] * h + bt[c];
                }
            }
        }
        let shape = xv.shape.clone();
        Ok(self.push(
            Tensor { shape, data: y },
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
        ))
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let xv = self.value(x);
        let t = Tensor {
            shape: xv.shape.clone(),
            data: xv.data.iter().map(|&v| f(v)).collect(),
        };
        self.push(t, op)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid, Op::Sigmoid(x))
    }

    /// Softmax along axis 1.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let [outer, ch, inner] = xv.channel_view()?;
        let mut y = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |c: usize| (o * ch + c) * inner + i;
                let m = (0..ch).map(|c| xv.data[idx(c)]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for c in 0..ch {
                    let e = (xv.data[idx(c)] - m).exp();
                    y[idx(c)] = e;
                    s += e;
                }
                for c in 0..ch {
                    y[idx(c)] /= s;
                }
            }
        }
        let shape = xv.shape.clone();
        Ok(self.push(Tensor { shape, data: y }, Op::Softmax(x)))
    }

    /// 2×2 max pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let [b, c, h, w] = xv.dims4()?;
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return Err(shape_err!("maxpool2 needs at least 2x2 input, got {h}x{w}"));
        }
        let mut y = Tensor::zeros(&[b, c, oh, ow]);
        let mut argmax = vec![0usize; y.len()];
        for bc in 0..b * c {
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = usize::MAX;
                    let mut bv = f64::NEG_INFINITY;
                    for di in 0..2 {
                        for dj in 0..2 {
                            let idx = (bc * h + 2 * i + di) * w + 2 * j + dj;
                            if xv.data[idx] > bv || best == usize::MAX {
                                bv = xv.data[idx];
                                best = idx;
                            }
                        }
                    }
                    let o = (bc * oh + i) * ow + j;
                    y.data[o] = bv;
                    argmax[o] = best;
                }
            }
        }
        Ok(self.push(y, Op::MaxPool2 { x, argmax }))
    }

    /// Nearest-neighbour ×2 upsampling to an explicit output size; rows or
    /// columns past `2·h`/`2·w` replicate the last source row/column.
    pub fn upsample2(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let xv = self.value(x);
        let [b, c, h, w] = xv.dims4()?;
        if out_h == 0 || out_w == 0 || h == 0 || w == 0 || out_h.div_ceil(2) > h + 1 || out_w.div_ceil(2) > w + 1 {
            return Err(shape_err!("cannot upsample {h}x{w} to {out_h}x{out_w}"));
        }
        let mut y = Tensor::zeros(&[b, c, out_h, out_w]);
        for bc in 0..b * c {
            for i in 0..out_h {
                let si = (i / 2).min(h - 1);
                for j in 0..out_w {
                    let sj = (j / 2).min(w - 1);
                    y.data[(bc * out_h + i) * out_w + j] = xv.data[(bc * h + si) * w + sj];
                }
            }
        }
        Ok(self.push(y, Op::Upsample(x)))
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.value(xs[0]).dims4()?;
        let mut total_c = 0;
        for &v in xs {
            let [b, c, h, w] = self.value(v).dims4()?;
            if (b, h, w) != (first[0], first[2], first[3]) {
                return Err(shape_err!("concat of {:?} and {:?}", first, [b, c, h, w]));
            }
            total_c += c;
        }
        let [b, _, h, w] = first;
        let hw = h * w;
        let mut y = Tensor::zeros(&[b, total_c, h, w]);
        for bi in 0..b {
            let mut off = 0;
            for &v in xs {
                let t = self.value(v);
                let c = t.shape[1];
                let src = &t.data[bi * c * hw..(bi + 1) * c * hw];
                let dst = (bi * total_c + off) * hw;
                y.data[dst..dst + c * hw].copy_from_slice(src);
                off += c;
            }
        }
        Ok(self.push(y, Op::Concat(xs.to_vec())))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "add")?;
        let av = self.value(a);
        let bv = self.value(b);
        let t = Tensor {
            shape: av.shape.clone(),
            data: av.data.iter().zip(&bv.data).map(|(x, y)| x + y).collect(),
        };
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "mul")?;
        let av = self.value(a);
        let bv = self.value(b);
        let t = Tensor {
            shape: av.shape.clone(),
            data: av.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect(),
        };
        Ok(self.push(t, Op::Mul(a, b)))
    }

    /// `R_c(x, y) = (1 + M(x, y)) · F_c(x, y)` with `m` a single-channel map.
    pub fn fuse(&mut self, f: Var, m: Var) -> Result<Var> {
        let [b, c, h, w] = self.value(f).dims4()?;
        let md = self.value(m).dims4()?;
        if md != [b, 1, h, w] {
            return Err(shape_err!("fuse: features {:?} vs probability map {:?}", [b, c, h, w], md));
        }
        let fv = self.value(f);
        let mv = self.value(m);
        let hw = h * w;
        let mut y = Tensor::zeros(&fv.shape);
        for bi in 0..b {
            let mrow = &mv.data[bi * hw..(bi + 1) * hw];
            for ci in 0..c {
                let base = (bi * c + ci) * hw;
                for k in 0..hw {
                    y.data[base + k] = (1.0 + mrow[k]) * fv.data[base + k];
                }
            }
        }
        Ok(self.push(y, Op::Fuse { f, m }))
    }

    /// Columns `[lo, hi)` of a feature map.
    pub fn slice_width(&mut self, x: Var, lo: usize, hi: usize) -> Result<Var> {
        let [b, c, h, w] = self.value(x).dims4()?;
        if lo >= hi || hi > w {
            return Err(shape_err!("width slice [{lo}, {hi}) out of bounds for width {w}"));
        }
        let xv = self.value(x);
        let nw = hi - lo;
        let mut y = Tensor::zeros(&[b, c, h, nw]);
        for row in 0..b * c * h {
            y.data[row * nw..(row + 1) * nw].copy_from_slice(&xv.data[row * w + lo..row * w + hi]);
        }
        Ok(self.push(y, Op::SliceWidth { x, lo }))
    }

    /// Sparse convolution of `(n_in, c_in)` site features with weights of shape
    /// `(kernel volume, c_in, c_out)`.
    pub fn sparse_conv(&mut self, x: Var, w: Var, b: Option<Var>, rulebook: Arc<Rulebook>) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        if xv.shape.len() != 2 || wv.shape.len() != 3 {
            return Err(shape_err!("sparse conv expects (n, c) features and (k, cin, cout) weights"));
        }
        let y = sparse_conv_forward(
            xv,
            wv,
            b.map(|b| self.value(b).data.as_slice()),
            &rulebook,
        )?;
        Ok(self.push(y, Op::SparseConv { x, w, b, rulebook }))
    }

    /// Scatter `(n, c)` site features into a dense `shape` tensor. Site `s`,
    /// channel `k` lands at `base[s] + k * channel_stride`.
    pub fn scatter_dense(&mut self, x: Var, base: Arc<Vec<usize>>, channel_stride: usize, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let [n, c] = match xv.shape[..] {
            [n, c] => [n, c],
            _ => return Err(shape_err!("scatter_dense expects (n, c) features")),
        };
        if base.len() != n {
            return Err(shape_err!("scatter_dense: {} targets for {n} sites", base.len()));
        }
        let mut y = Tensor::zeros(shape);
        for s in 0..n {
            for k in 0..c {
                let idx = base[s] + k * channel_stride;
                if idx >= y.len() {
                    return Err(shape_err!("scatter_dense target {idx} out of bounds"));
                }
                y.data[idx] += xv.data[s * c + k];
            }
        }
        Ok(self.push(
            y,
            Op::ToBev {
                x,
                base,
                channel_stride,
            },
        ))
    }

    /// Sigmoid focal loss summed over entries with label 0/1 (label < 0 is
    /// ignored), divided by `norm`.
    pub fn focal_loss(&mut self, x: Var, labels: Vec<i8>, alpha: f64, gamma: f64, norm: f64) -> Result<Var> {
        let xv = self.value(x);
        if labels.len() != xv.len() {
            return Err(shape_err!("focal loss: {} labels for {} logits", labels.len(), xv.len()));
        }
        let mut total = 0.0;
        for (&z, &y) in xv.data.iter().zip(&labels) {
            if y < 0 {
                continue;
            }
            let (zt, at) = if y > 0 { (z, alpha) } else { (-z, 1.0 - alpha) };
            let pt = sigmoid(zt);
            let log_pt = -softplus(-zt);
            total += -at * (1.0 - pt).powf(gamma) * log_pt;
        }
        Ok(self.push(
            Tensor::scalar(total / norm),
            Op::Focal {
                x,
                labels,
                alpha,
                gamma,
                norm,
            },
        ))
    }

    /// `Σ weight · SmoothL1(x − target) / norm`.
    pub fn smooth_l1(&mut self, x: Var, target: Vec<f64>, weight: Vec<f64>, norm: f64) -> Result<Var> {
        let xv = self.value(x);
        if target.len() != xv.len() || weight.len() != xv.len() {
            return Err(shape_err!("smooth l1: target/weight length mismatch"));
        }
        let total: f64 = xv
            .data
            .iter()
            .zip(&target)
            .zip(&weight)
            .filter(|(_, &w)| w != 0.0)
            .map(|((p, t), w)| {
                let u = (p - t).abs();
                w * if u < 1.0 { 0.5 * u * u } else { u - 0.5 }
            })
            .sum::<f64>()
            + 0.0; // empty sums are -0
        Ok(self.push(
            Tensor::scalar(total / norm),
            Op::SmoothL1 {
                x,
                target,
                weight,
                norm,
            },
        ))
    }

    /// Softmax cross-entropy where axis 1 packs groups of `classes` logits.
    /// `targets` holds one class per (outer, group, inner) slot, negative to skip.
    pub fn softmax_ce(&mut self, x: Var, targets: Vec<i32>, classes: usize, norm: f64) -> Result<Var> {
        let xv = self.value(x);
        let [outer, ch, inner] = xv.channel_view()?;
        if classes == 0 || ch % classes != 0 || targets.len() != outer * (ch / classes) * inner {
            return Err(shape_err!("softmax_ce: {ch} channels, {classes} classes, {} targets", targets.len()));
        }
        let groups = ch / classes;
        let mut total = 0.0;
        for o in 0..outer {
            for g in 0..groups {
                for i in 0..inner {
                    let t = targets[(o * groups + g) * inner + i];
                    if t < 0 {
                        continue;
                    }
                    let idx = |k: usize| (o * ch + g * classes + k) * inner + i;
                    let m = (0..classes).map(|k| xv.data[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                    let lse = m + (0..classes).map(|k| (xv.data[idx(k)] - m).exp()).sum::<f64>().ln();
                    total += lse - xv.data[idx(t as usize)];
                }
            }
        }
        Ok(self.push(
            Tensor::scalar(total / norm),
            Op::SoftmaxCe {
                x,
                targets,
                classes,
                norm,
            },
        ))
    }

    /// Mean binary cross-entropy of probabilities clamped to `[eps, 1 − eps]`.
    pub fn bce(&mut self, x: Var, labels: Vec<f64>, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        if labels.len() != xv.len() || xv.is_empty() {
            return Err(shape_err!("bce: {} labels for {} probabilities", labels.len(), xv.len()));
        }
        let total: f64 = xv
            .data
            .iter()
            .zip(&labels)
            .map(|(&p, &y)| {
                let p = p.clamp(eps, 1.0 - eps);
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum();
        let n = xv.len() as f64;
        Ok(self.push(Tensor::scalar(total / n), Op::Bce { x, labels, eps }))
    }

    /// `Σ weights · x` as a scalar.
    pub fn dot(&mut self, x: Var, weights: Vec<f64>) -> Result<Var> {
        let xv = self.value(x);
        if weights.len() != xv.len() {
            return Err(shape_err!("dot: {} weights for {} values", weights.len(), xv.len()));
        }
        let s = xv.data.iter().zip(&weights).map(|(a, b)| a * b).sum();
        Ok(self.push(Tensor::scalar(s), Op::Dot { x, weights }))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        self.dot(x, vec![1.0; n])
    }

    /// `Σ coeff · term` over scalar terms.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut s = 0.0;
        for &(v, c) in terms {
            let t = self.value(v);
            if t.len() != 1 {
                return Err(shape_err!("weighted_sum terms must be scalars, got {:?}", t.shape));
            }
            s += c * t.item();
        }
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum(terms.to_vec())))
    }

    /// Reverse-mode accumulation from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.grad_enabled {
            return Err(Error::Invalid("backward on an inference graph".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(shape_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape
            ));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backward_node(i, &g)?;
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn backward_node(&mut self, i: usize, g: &[f64]) -> Result<()> {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let out = &nodes[i].value;
        let val = |v: Var| &nodes[v.0].value;
        match &nodes[i].op {
            Op::Leaf | Op::Param(_) => {}
            Op::Conv2d { x, w, b, spec } => {
                let (dx, dw, db) = conv2d_backward(val(*x), val(*w), spec, g)?;
                add_into(grads, *x, &dx);
                add_into(grads, *w, &dw);
                if let Some(b) = b {
                    add_into(grads, *b, &db);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let [outer, ch, inner] = val(*x).channel_view()?;
                let gm = &val(*gamma).data;
                let count = (outer * inner) as f64;
                let mut dgamma = vec![0.0; ch];
                let mut dbeta = vec![0.0; ch];
                for o in 0..outer {
                    for c in 0..ch {
                        let base = (o * ch + c) * inner;
                        for k in base..base + inner {
                            dgamma[c] += g[k] * xhat[k];
                            dbeta[c] += g[k];
                        }
                    }
                }
                let mut dx = vec![0.0; g.len()];
                for o in 0..outer {
                    for c in 0..ch {
                        let base = (o * ch + c) * inner;
                        for k in base..base + inner {
                            dx[k] = if *train {
                                gm[c] * inv_std[c] / count
                                    * (count * g[k] - dbeta[c] - xhat[k] * dgamma[c])
                            } else {
                                gm[c] * inv_std[c] * g[k]
                            };
                        }
                    }
                }
                add_into(grads, *x, &dx);
                add_into(grads, *gamma, &dgamma);
                add_into(grads, *beta, &dbeta);
            }
            Op::Relu(x) => {
                let d: Vec<f64> = out
                    .data
                    .iter()
                    .zip(g)
                    .map(|(&y, &gv)| if y > 0.0 { gv } else { 0.0 })
                    .collect();
                add_into(grads, *x, &d);
            }
            Op::Sigmoid(x) => {
                let d: Vec<f64> = out.data.iter().zip(g).map(|(&y, &gv)| gv * y * (1.0 - y)).collect();
                add_into(grads, *x, &d);
            }
            Op::Softmax(x) => {
                let [outer, ch, inner] = out.channel_view()?;
                let mut d = vec![0.0; g.len()];
                for o in 0..outer {
                    for k in 0..inner {
                        let idx = |c: usize| (o * ch + c) * inner + k;
                        let s: f64 = (0..ch).map(|c| out.data[idx(c)] * g[idx(c)]).sum();
                        for c in 0..ch {
                            d[idx(c)] = out.data[idx(c)] * (g[idx(c)] - s);
                        }
                    }
                }
                add_into(grads, *x, &d);
            }
            Op::MaxPool2 { x, argmax } => {
                let n = val(*x).len();
                accumulate(grads, *x, n, |dx| {
                    for (o, &src) in argmax.iter().enumerate() {
                        dx[src] += g[o];
                    }
                });
            }
            Op::Upsample(x) => {
                let [b, c, h, w] = val(*x).dims4()?;
                let [_, _, oh, ow] = out.dims4()?;
                accumulate(grads, *x, b * c * h * w, |dx| {
                    for bc in 0..b * c {
                        for i in 0..oh {
                            let si = (i / 2).min(h - 1);
                            for j in 0..ow {
                                let sj = (j / 2).min(w - 1);
                                dx[(bc * h + si) * w + sj] += g[(bc * oh + i) * ow + j];
                            }
                        }
                    }
                });
            }
            Op::Concat(xs) => {
                let [b, total_c, h, w] = out.dims4()?;
                let hw = h * w;
                let mut off = 0;
                for &v in xs {
                    let c = val(v).shape[1];
                    accumulate(grads, v, b * c * hw, |dx| {
                        for bi in 0..b {
                            let src = (bi * total_c + off) * hw;
                            dx[bi * c * hw..(bi + 1) * c * hw]
                                .iter_mut()
                                .zip(&g[src..src + c * hw])
                                .for_each(|(a, v)| *a += v);
                        }
                    });
                    off += c;
                }
            }
            Op::Add(a, b) => {
                add_into(grads, *a, g);
                add_into(grads, *b, g);
            }
            Op::Mul(a, b) => {
                let da: Vec<f64> = g.iter().zip(&val(*b).data).map(|(x, y)| x * y).collect();
                let db: Vec<f64> = g.iter().zip(&val(*a).data).map(|(x, y)| x * y).collect();
                add_into(grads, *a, &da);
                add_into(grads, *b, &db);
            }
            Op::Fuse { f, m } => {
                let [b, c, h, w] = val(*f).dims4()?;
                let hw = h * w;
                let fv = &val(*f).data;
                let mv = &val(*m).data;
                let mut df = vec![0.0; fv.len()];
                let mut dm = vec![0.0; mv.len()];
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * hw;
                        for k in 0..hw {
                            df[base + k] = (1.0 + mv[bi * hw + k]) * g[base + k];
                            dm[bi * hw + k] += fv[base + k] * g[base + k];
                        }
                    }
                }
                add_into(grads, *f, &df);
                add_into(grads, *m, &dm);
            }
            Op::SliceWidth { x, lo } => {
                let [b, c, h, w] = val(*x).dims4()?;
                let nw = out.shape[3];
                accumulate(grads, *x, b * c * h * w, |dx| {
                    for row in 0..b * c * h {
                        dx[row * w + lo..row * w + lo + nw]
                            .iter_mut()
                            .zip(&g[row * nw..(row + 1) * nw])
                            .for_each(|(a, v)| *a += v);
                    }
                });
            }
            Op::SparseConv { x, w, b, rulebook } => {
                let (dx, dw, db) = sparse_conv_backward(g, rulebook, val(*x), val(*w))?;
                add_into(grads, *x, &dx);
                add_into(grads, *w, &dw);
                if let Some(b) = b {
                    add_into(grads, *b, &db);
                }
            }
            Op::ToBev {
                x,
                base,
                channel_stride,
            } => {
                let c = val(*x).shape[1];
                let mut dx = vec![0.0; val(*x).len()];
                for (s, &bs) in base.iter().enumerate() {
                    for k in 0..c {
                        dx[s * c + k] = g[bs + k * channel_stride];
                    }
                }
                add_into(grads, *x, &dx);
            }
            Op::Focal {
                x,
                labels,
                alpha,
                gamma,
                norm,
            } => {
                let xv = &val(*x).data;
                let scale = g[0] / norm;
                let mut dx = vec![0.0; xv.len()];
                for (k, (&z, &y)) in xv.iter().zip(labels).enumerate() {
                    if y < 0 {
                        continue;
                    }
                    let (zt, at, s) = if y > 0 { (z, *alpha, 1.0) } else { (-z, 1.0 - alpha, -1.0) };
                    let pt = sigmoid(zt);
                    let q = 1.0 - pt;
                    let log_pt = -softplus(-zt);
                    // d/dz_t of −a (1−p)^γ ln p
                    let d = if *gamma == 0.0 {
                        -at * q
                    } else {
                        at * q.powf(*gamma) * (gamma * pt * log_pt - q)
                    };
                    dx[k] = s * d * scale;
                }
                add_into(grads, *x, &dx);
            }
            Op::SmoothL1 {
                x,
                target,
                weight,
                norm,
            } => {
                let scale = g[0] / norm;
                let dx: Vec<f64> = val(*x)
                    .data
                    .iter()
                    .zip(target)
                    .zip(weight)
                    .map(|((p, t), w)| {
                        let u = p - t;
                        let d = if u.abs() < 1.0 { u } else { u.signum() };
                        w * d * scale
                    })
                    .collect();
                add_into(grads, *x, &dx);
            }
            Op::SoftmaxCe {
                x,
                targets,
                classes,
                norm,
            } => {
                let xv = val(*x);
                let [outer, ch, inner] = xv.channel_view()?;
                let groups = ch / classes;
                let scale = g[0] / norm;
                let mut dx = vec![0.0; xv.len()];
                for o in 0..outer {
                    for gr in 0..groups {
                        for i in 0..inner {
                            let t = targets[(o * groups + gr) * inner + i];
                            if t < 0 {
                                continue;
                            }
                            let idx = |k: usize| (o * ch + gr * classes + k) * inner + i;
                            let m = (0..*classes).map(|k| xv.data[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                            let s: f64 = (0..*classes).map(|k| (xv.data[idx(k)] - m).exp()).sum();
                            for k in 0..*classes {
                                let p = (xv.data[idx(k)] - m).exp() / s;
                                let y = if k as i32 == t { 1.0 } else { 0.0 };
                                dx[idx(k)] = (p - y) * scale;
                            }
                        }
                    }
                }
                add_into(grads, *x, &dx);
            }
            Op::Bce { x, labels, eps } => {
                let xv = &val(*x).data;
                let scale = g[0] / xv.len() as f64;
                let dx: Vec<f64> = xv
                    .iter()
                    .zip(labels)
                    .map(|(&p, &y)| {
                        if p <= *eps || p >= 1.0 - eps {
                            0.0
                        } else {
                            scale * (-y / p + (1.0 - y) / (1.0 - p))
                        }
                    })
                    .collect();
                add_into(grads, *x, &dx);
            }
            Op::Dot { x, weights } => {
                let dx: Vec<f64> = weights.iter().map(|w| w * g[0]).collect();
                add_into(grads, *x, &dx);
            }
            Op::WeightedSum(terms) => {
                for &(v, c) in terms {
                    add_into(grads, v, &[c * g[0]]);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::new();
        let x = g.input(t(&[2], &[-1.0, 2.0]));
        let r = g.relu(x);
        assert_eq!(g.value(r).data, vec![0.0, 2.0]);
        let z = g.input(t(&[1], &[0.0]));
        let s = g.sigmoid(z);
        assert_eq!(g.value(s).data, vec![0.5]);
        let l = g.input(t(&[1, 2, 1, 1], &[3.0, 3.0]));
        let sm = g.softmax(l).unwrap();
        assert_eq!(g.value(sm).data, vec![0.5, 0.5]);
    }

    #[test]
    fn pooling_upsampling_concat() {
        let mut g = Graph::new();
        let x = g.input(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = g.maxpool2(x).unwrap();
        assert_eq!(g.value(p).data, vec![4.0]);
        let s = g.input(t(&[1, 1, 1, 1], &[7.0]));
        let u = g.upsample2(s, 2, 2).unwrap();
        assert_eq!(g.value(u).data, vec![7.0; 4]);
        let a = g.input(Tensor::zeros(&[1, 2, 3, 3]));
        let b = g.input(Tensor::zeros(&[1, 3, 3, 3]));
        let c = g.concat_channels(&[a, b]).unwrap();
        assert_eq!(g.value(c).shape, vec![1, 5, 3, 3]);
        let bad = g.input(Tensor::zeros(&[1, 3, 2, 3]));
        assert!(g.concat_channels(&[a, bad]).is_err());
    }

    #[test]
    fn sum_relu_grad_is_one() {
        let mut g = Graph::new();
        let x = g.input(t(&[3], &[0.5, 1.0, 2.0]));
        let r = g.relu(x);
        let s = g.sum(r).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_inference() {
        let mut g = Graph::new();
        let x = g.input(t(&[2], &[1.0, 2.0]));
        assert!(g.backward(x).is_err());
        let mut g = Graph::inference();
        let x = g.input(t(&[1], &[1.0]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn conv_identity_kernel() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..2 * 3 * 4 * 5).map(|v| v as f64 * 0.1 - 2.0).collect();
        let x = g.input(t(&[2, 3, 4, 5], &data));
        // 3x3 identity: center tap of each input channel
        let spec = ConvSpec::new(3, 3, 3).bias(false);
        let mut w = Tensor::zeros(&spec.weight_shape());
        for c in 0..3 {
            w.data[((c * 3 + c) * 3 + 1) * 3 + 1] = 1.0;
        }
        let wv = g.input(w);
        let y = g.conv2d(x, wv, None, &spec).unwrap();
        assert_eq!(g.value(y).data, data);

        let spec = ConvSpec::new(3, 3, 1).bias(false);
        let mut w = Tensor::zeros(&spec.weight_shape());
        for c in 0..3 {
            w.data[c * 3 + c] = 1.0;
        }
        let wv = g.input(w);
        let y = g.conv2d(x, wv, None, &spec).unwrap();
        assert_eq!(g.value(y).data, data);
    }

    #[test]
    fn conv_ones_kernel_on_one_hot() {
        let mut g = Graph::new();
        let mut x = Tensor::zeros(&[1, 1, 5, 5]);
        x.data[2 * 5 + 2] = 1.0;
        let x = g.input(x);
        let spec = ConvSpec::new(1, 1, 3).bias(false);
        let w = g.input(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = g.conv2d(x, w, None, &spec).unwrap();
        let out = g.value(y);
        for i in 0..5 {
            for j in 0..5 {
                let expect = if (1..=3).contains(&i) && (1..=3).contains(&j) { 1.0 } else { 0.0 };
                assert_eq!(out.at4(0, 0, i, j), expect);
            }
        }
    }

    #[test]
    fn batch_norm_modes() {
        let mut g = Graph::new();
        let x = g.input(Tensor::full(&[2, 1, 3, 3], 4.2));
        let gm = g.input(Tensor::full(&[1], 1.0));
        let bt = g.input(Tensor::zeros(&[1]));
        let y = g.batch_norm(x, gm, bt, None, Mode::Train, 0.99, 1e-5).unwrap();
        assert!(g.value(y).data.iter().all(|v| v.abs() < 1e-12));

        let data: Vec<f64> = (0..12).map(|v| v as f64).collect();
        let x = g.input(t(&[1, 2, 2, 3], &data));
        let gm = g.input(Tensor::full(&[2], 1.0));
        let bt = g.input(Tensor::zeros(&[2]));
        let (mut rm, mut rv) = (vec![0.0; 2], vec![1.0; 2]);
        let y = g
            .batch_norm(x, gm, bt, Some((&mut rm, &mut rv)), Mode::Eval, 0.99, 0.0)
            .unwrap();
        assert_eq!(g.value(y).data, data);

        // momentum 0.99 blends 1% of the batch statistics in train mode
        g.batch_norm(x, gm, bt, Some((&mut rm, &mut rv)), Mode::Train, 0.99, 1e-5)
            .unwrap();
        assert!((rm[0] - 0.01 * 2.5).abs() < 1e-12);
        assert!((rm[1] - 0.01 * 8.5).abs() < 1e-12);
        let unbiased = 3.5; // variance of 0..=5 with n−1
        assert!((rv[0] - (0.99 + 0.01 * unbiased)).abs() < 1e-12);
    }

    #[test]
    fn fuse_examples() {
        let mut g = Graph::new();
        let f = g.input(t(&[1, 2, 1, 2], &[1.0, 2.0, 3.0, 4.0]));
        let m0 = g.input(Tensor::zeros(&[1, 1, 1, 2]));
        let r = g.fuse(f, m0).unwrap();
        assert_eq!(g.value(r).data, vec![1.0, 2.0, 3.0, 4.0]);
        let m1 = g.input(Tensor::full(&[1, 1, 1, 2], 1.0));
        let r = g.fuse(f, m1).unwrap();
        assert_eq!(g.value(r).data, vec![2.0, 4.0, 6.0, 8.0]);
        let mh = g.input(t(&[1, 1, 1, 2], &[0.5, 0.0]));
        let r = g.fuse(f, mh).unwrap();
        assert_eq!(g.value(r).data, vec![1.5, 2.0, 4.5, 4.0]);
        let wrong = g.input(Tensor::zeros(&[1, 1, 2, 2]));
        assert!(g.fuse(f, wrong).is_err());
    }

    #[test]
    fn fuse_grad_wrt_m_is_channel_sum_of_f() {
        let mut g = Graph::new();
        let f = g.input(t(&[1, 3, 1, 2], &[1.0, -2.0, 0.5, 4.0, 3.0, 1.5]));
        let m = g.input(t(&[1, 1, 1, 2], &[0.2, 0.7]));
        let r = g.fuse(f, m).unwrap();
        let up = vec![0.3, -1.0, 2.0, 0.5, -0.25, 1.0];
        let s = g.dot(r, up.clone()).unwrap();
        g.backward(s).unwrap();
        let fv = &g.value(f).data;
        let expect0: f64 = (0..3).map(|c| fv[c * 2] * up[c * 2]).sum();
        let expect1: f64 = (0..3).map(|c| fv[c * 2 + 1] * up[c * 2 + 1]).sum();
        let gm = g.grad(m).unwrap();
        assert!((gm[0] - expect0).abs() < 1e-15 && (gm[1] - expect1).abs() < 1e-15);
    }

    #[test]
    fn discard_frees_only_on_inference_graphs() {
        let mut g = Graph::new();
        let x = g.input(Tensor::full(&[4], 1.0));
        g.discard(&[x]);
        assert_eq!(g.value(x).len(), 4);
        let mut g = Graph::inference();
        let x = g.input(Tensor::full(&[4], 1.0));
        g.discard(&[x]);
        assert!(g.value(x).is_empty());
    }
}
