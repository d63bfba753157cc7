//! Tape-based reverse-mode autodiff over dense f64 tensors.
//!
//! A [`Tape`] records one forward computation; [`Tape::backward`] walks the
//! record in reverse and accumulates gradients for every leaf. Geometry ops
//! (exp/log at the origin, geodesic distances) carry hand-derived backwards
//! and dispatch on the tape's [`Geometry`] so the same model code runs in
//! Lorentz or Euclidean mode.
//!
//! A tape is single-threaded by contract; independent tapes may run
//! concurrently.

use crate::error::{Error, Result};
use crate::manifold::{arcosh_clamped, cosh_minus_sinc_over_sq, norm, sinh_over, GeomMode, Geometry};
use crate::tensor::{dot, Tensor};
use rand::Rng;
use rand_chacha::ChaCha20Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Neg(Var),
    MulElem(Var, Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    /// tensor * scalar variable (broadcast)
    MulScalarVar(Var, Var),
    Relu(Var),
    Gelu(Var),
    Softplus(Var),
    Exp(Var),
    MatMul(Var, Var),
    /// matrix + row vector broadcast over rows
    AddRowBroadcast(Var, Var),
    ConcatCols(Var, Var),
    ConcatRows(Var, Var),
    RepeatRow(Var, usize),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    /// column-wise mean producing a single row
    MeanRows(Var),
    MulMask(Var, Tensor),
    RmsNormRows {
        x: Var,
        gain: Var,
        eps: f64,
    },
    MaskedSoftmaxRows {
        scores: Var,
        mask: Vec<bool>,
    },
    LogSumExpRow(Var),
    /// out[t] = sum_c w[t,c] * v[t*C + c]
    AttnMix {
        weights: Var,
        values: Var,
    },
    /// row-wise Minkowski inner product of two point matrices
    MinkowskiRows(Var, Var),
    Exp0(Var),
    Log0(Var),
    PairwiseDist(Var, Var),
    RowsDist(Var, Var),
    BceWithLogitsMean {
        logits: Var,
        targets: Tensor,
    },
    CrossEntropyMean {
        logits: Var,
        targets: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    name: Option<String>,
}

pub struct Tape {
    geom: Geometry,
    nodes: Vec<Node>,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl Tape {
    pub fn new(geom: Geometry) -> Self {
        Tape { geom, nodes: Vec::new() }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op, name: None });
        Var(self.nodes.len() - 1)
    }

    /// Named leaf; gradients are reported for leaves after `backward`.
    pub fn leaf(&mut self, value: Tensor, name: &str) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, name: Some(name.to_string()) });
        Var(self.nodes.len() - 1)
    }

    /// Anonymous constant leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    // ---- elementwise & linear algebra -----------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| -x);
        self.push(v, Op::Neg(a))
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip(self.value(b), |x, y| x * y);
        self.push(v, Op::MulElem(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| c * x);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a, c))
    }

    pub fn mul_scalar_var(&mut self, a: Var, s: Var) -> Var {
        let sv = self.value(s).item();
        let v = self.value(a).map(|x| x * sv);
        self.push(v, Op::MulScalarVar(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        self.push(v, Op::Gelu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(softplus);
        self.push(v, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add_row_broadcast(&mut self, m: Var, row: Var) -> Var {
        let mv = self.value(m);
        let rv = self.value(row);
        assert_eq!(mv.cols(), rv.cols(), "broadcast width mismatch");
        assert_eq!(rv.rows(), 1);
        let mut out = mv.clone();
        for r in 0..out.rows() {
            let slice = out.row_slice_mut(r);
            for (o, &b) in slice.iter_mut().zip(rv.data().iter()) {
                *o += b;
            }
        }
        self.push(out, Op::AddRowBroadcast(m, row))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.rows(), bv.rows(), "concat_cols row mismatch");
        let (m, ca, cb) = (av.rows(), av.cols(), bv.cols());
        let mut data = Vec::with_capacity(m * (ca + cb));
        for r in 0..m {
            data.extend_from_slice(av.row_slice(r));
            data.extend_from_slice(bv.row_slice(r));
        }
        self.push(Tensor::new(vec![m, ca + cb], data), Op::ConcatCols(a, b))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.cols(), bv.cols(), "concat_rows col mismatch");
        let mut data = Vec::with_capacity(av.len() + bv.len());
        data.extend_from_slice(av.data());
        data.extend_from_slice(bv.data());
        let rows = av.rows() + bv.rows();
        let cols = av.cols();
        self.push(Tensor::new(vec![rows, cols], data), Op::ConcatRows(a, b))
    }

    pub fn repeat_row(&mut self, row: Var, n: usize) -> Var {
        let rv = self.value(row);
        assert_eq!(rv.rows(), 1);
        let mut data = Vec::with_capacity(n * rv.cols());
        for _ in 0..n {
            data.extend_from_slice(rv.data());
        }
        self.push(Tensor::new(vec![n, rv.cols()], data), Op::RepeatRow(row, n))
    }

    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value(table);
        let cols = tv.cols();
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            data.extend_from_slice(tv.row_slice(id));
        }
        self.push(Tensor::new(vec![ids.len(), cols], data), Op::GatherRows(table, ids.to_vec()))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let v = self.value(a).clone().reshape(shape);
        self.push(v, Op::Reshape(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s / n), Op::Mean(a))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (m, n) = (av.rows(), av.cols());
        let mut out = vec![0.0; n];
        for r in 0..m {
            for (o, &x) in out.iter_mut().zip(av.row_slice(r).iter()) {
                *o += x;
            }
        }
        for o in out.iter_mut() {
            *o /= m as f64;
        }
        self.push(Tensor::new(vec![1, n], out), Op::MeanRows(a))
    }

    pub fn mul_mask(&mut self, a: Var, mask: Tensor) -> Var {
        let v = self.value(a).zip(&mask, |x, m| x * m);
        self.push(v, Op::MulMask(a, mask))
    }

    /// Inverted-dropout mask; identity when `train` is false or rate is 0.
    pub fn dropout(&mut self, a: Var, rate: f64, train: bool, rng: &mut ChaCha20Rng) -> Var {
        if !train || rate <= 0.0 {
            return a;
        }
        let keep = 1.0 - rate;
        let shape = self.value(a).shape().to_vec();
        let n = self.value(a).len();
        let data: Vec<f64> =
            (0..n).map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
        self.mul_mask(a, Tensor::new(shape, data))
    }

    pub fn rms_norm_rows(&mut self, x: Var, gain: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let gv = self.value(gain);
        assert_eq!(gv.rows(), 1);
        assert_eq!(gv.cols(), xv.cols());
        let (m, n) = (xv.rows(), xv.cols());
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            let row = xv.row_slice(r);
            let ms = row.iter().map(|v| v * v).sum::<f64>() / n as f64;
            let rms = (ms + eps).sqrt();
            for (j, &v) in row.iter().enumerate() {
                out.push(v / rms * gv.data()[j]);
            }
        }
        self.push(Tensor::new(vec![m, n], out), Op::RmsNormRows { x, gain, eps })
    }

    /// Row-wise softmax over unmasked entries; masked entries get exactly 0.
    /// Rows with no unmasked entry come out all-zero.
    pub fn masked_softmax_rows(&mut self, scores: Var, mask: &[bool]) -> Var {
        let sv = self.value(scores);
        assert_eq!(mask.len(), sv.len(), "mask length mismatch");
        let (m, n) = (sv.rows(), sv.cols());
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = sv.row_slice(r);
            let rmask = &mask[r * n..(r + 1) * n];
            let mut mx = f64::NEG_INFINITY;
            for (j, &s) in row.iter().enumerate() {
                if rmask[j] && s > mx {
                    mx = s;
                }
            }
            if mx == f64::NEG_INFINITY {
                continue;
            }
            let mut z = 0.0;
            for (j, &s) in row.iter().enumerate() {
                if rmask[j] {
                    let e = (s - mx).exp();
                    out[r * n + j] = e;
                    z += e;
                }
            }
            for j in 0..n {
                out[r * n + j] /= z;
            }
        }
        self.push(
            Tensor::new(vec![m, n], out),
            Op::MaskedSoftmaxRows { scores, mask: mask.to_vec() },
        )
    }

    pub fn softmax_rows(&mut self, scores: Var) -> Var {
        let n = self.value(scores).len();
        let mask = vec![true; n];
        self.masked_softmax_rows(scores, &mask)
    }

    /// log(sum(exp(row))) of a single-row tensor, as a scalar.
    pub fn log_sum_exp_row(&mut self, a: Var) -> Var {
        let av = self.value(a);
        assert_eq!(av.rows(), 1);
        let mx = av.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = av.data().iter().map(|&v| (v - mx).exp()).sum();
        self.push(Tensor::scalar(mx + s.ln()), Op::LogSumExpRow(a))
    }

    /// out[t, :] = sum_c w[t, c] * values[t*C + c, :]
    pub fn attn_mix(&mut self, weights: Var, values: Var) -> Var {
        let wv = self.value(weights);
        let vv = self.value(values);
        let (t, c) = (wv.rows(), wv.cols());
        assert_eq!(vv.rows(), t * c, "attn_mix: {}x{} weights for {} value rows", t, c, vv.rows());
        let d = vv.cols();
        let mut out = vec![0.0; t * d];
        for ti in 0..t {
            let orow = &mut out[ti * d..(ti + 1) * d];
            for ci in 0..c {
                let w = wv.at(ti, ci);
                if w == 0.0 {
                    continue;
                }
                let vrow = vv.row_slice(ti * c + ci);
                for (o, &v) in orow.iter_mut().zip(vrow.iter()) {
                    *o += w * v;
                }
            }
        }
        self.push(Tensor::new(vec![t, d], out), Op::AttnMix { weights, values })
    }

    // ---- geometry ops ----------------------------------------------------

    /// Row-wise Minkowski inner product of two (n x d+1) matrices -> (n x 1).
    pub fn minkowski_rows(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape(), bv.shape());
        let n = av.rows();
        let mut out = Vec::with_capacity(n);
        for r in 0..n {
            out.push(crate::manifold::minkowski_inner_unchecked(av.row_slice(r), bv.row_slice(r)));
        }
        self.push(Tensor::new(vec![n, 1], out), Op::MinkowskiRows(a, b))
    }

    /// Map rows of spatial tangent vectors (n x d) onto the manifold (n x d+1).
    pub fn exp0(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (n, d) = (av.rows(), av.cols());
        let mut out = Vec::with_capacity(n * (d + 1));
        for r in 0..n {
            out.extend_from_slice(&self.geom.exp0(av.row_slice(r)));
        }
        self.push(Tensor::new(vec![n, d + 1], out), Op::Exp0(a))
    }

    /// Spatial log map at the origin for rows of points (n x d+1) -> (n x d).
    pub fn log0(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (n, da) = (av.rows(), av.cols());
        let mut out = Vec::with_capacity(n * (da - 1));
        for r in 0..n {
            out.extend_from_slice(&self.geom.log0(av.row_slice(r)));
        }
        self.push(Tensor::new(vec![n, da - 1], out), Op::Log0(a))
    }

    /// All-pairs geodesic distances: (m x d+1), (n x d+1) -> (m x n).
    pub fn pairwise_dist(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.cols(), bv.cols());
        let (m, n) = (av.rows(), bv.rows());
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                out.push(self.geom.dist_unchecked(av.row_slice(i), bv.row_slice(j)));
            }
        }
        self.push(Tensor::new(vec![m, n], out), Op::PairwiseDist(a, b))
    }

    /// Row-wise geodesic distances: (n x d+1), (n x d+1) -> (n x 1).
    pub fn rows_dist(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape(), bv.shape());
        let n = av.rows();
        let mut out = Vec::with_capacity(n);
        for r in 0..n {
            out.push(self.geom.dist_unchecked(av.row_slice(r), bv.row_slice(r)));
        }
        self.push(Tensor::new(vec![n, 1], out), Op::RowsDist(a, b))
    }

    /// Weighted aggregation of point rows: exp0(weights @ log0(points)).
    /// `weights` is (m x n), `points` is (n x d+1); result is (m x d+1).
    pub fn hyp_agg_rows(&mut self, weights: Var, points: Var) -> Var {
        let tangents = self.log0(points);
        let mixed = self.matmul(weights, tangents);
        self.exp0(mixed)
    }

    // ---- losses ----------------------------------------------------------

    /// Mean binary cross-entropy from logits against a {0,1} target tensor.
    pub fn bce_with_logits_mean(&mut self, logits: Var, targets: Tensor) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.shape(), targets.shape());
        let mut s = 0.0;
        for (&l, &t) in lv.data().iter().zip(targets.data().iter()) {
            s += l.max(0.0) - l * t + (-l.abs()).exp().ln_1p();
        }
        let v = Tensor::scalar(s / lv.len() as f64);
        self.push(v, Op::BceWithLogitsMean { logits, targets })
    }

    /// Mean cross-entropy of row logits against class indices.
    pub fn cross_entropy_mean(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), targets.len());
        let n = lv.cols();
        let mut s = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            assert!(t < n, "target {t} out of range {n}");
            let row = lv.row_slice(r);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<f64>().ln();
            s += lse - row[t];
        }
        let v = Tensor::scalar(s / targets.len() as f64);
        self.push(v, Op::CrossEntropyMean { logits, targets: targets.to_vec() })
    }

    // ---- composites ------------------------------------------------------

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row_broadcast(y, b)
    }

    /// Two-layer MLP with GELU.
    pub fn mlp2(&mut self, x: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Var {
        let h = self.linear(x, w1, b1);
        let h = self.gelu(h);
        self.linear(h, w2, b2)
    }

    // ---- backward --------------------------------------------------------

    /// Gradients for all vars; entry is `None` for vars the loss does not
    /// reach. Leaf gradients are checked finite; a NaN/Inf gradient aborts
    /// with the leaf's name.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Training(format!(
                "backward requires a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        if !lv.item().is_finite() {
            return Err(Error::Training(format!("loss is {}", lv.item())));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(idx, &g, &mut grads)?;
            // keep leaf gradients for the caller
            if matches!(self.nodes[idx].op, Op::Leaf) {
                if !g.all_finite() {
                    let name = self.nodes[idx].name.as_deref().unwrap_or("<anonymous leaf>");
                    return Err(Error::Training(format!(
                        "non-finite gradient for parameter {name}"
                    )));
                }
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let add_to = |grads: &mut [Option<Tensor>], v: Var, t: Tensor| match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        let value = |v: Var| -> &Tensor { &self.nodes[v.0].value };

        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                add_to(grads, *a, g.clone());
                add_to(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                add_to(grads, *a, g.clone());
                add_to(grads, *b, g.map(|x| -x));
            }
            Op::Neg(a) => add_to(grads, *a, g.map(|x| -x)),
            Op::MulElem(a, b) => {
                add_to(grads, *a, g.zip(value(*b), |gi, bi| gi * bi));
                add_to(grads, *b, g.zip(value(*a), |gi, ai| gi * ai));
            }
            Op::Scale(a, c) => add_to(grads, *a, g.map(|x| c * x)),
            Op::AddScalar(a, _) => add_to(grads, *a, g.clone()),
            Op::MulScalarVar(a, s) => {
                let sv = value(*s).item();
                add_to(grads, *a, g.map(|x| sv * x));
                let gs: f64 =
                    g.data().iter().zip(value(*a).data().iter()).map(|(x, y)| x * y).sum();
                add_to(grads, *s, Tensor::scalar(gs));
            }
            Op::Relu(a) => {
                add_to(grads, *a, g.zip(value(*a), |gi, x| if x > 0.0 { gi } else { 0.0 }));
            }
            Op::Gelu(a) => {
                add_to(grads, *a, g.zip(value(*a), |gi, x| gi * gelu_grad(x)));
            }
            Op::Softplus(a) => {
                add_to(grads, *a, g.zip(value(*a), |gi, x| gi * sigmoid(x)));
            }
            Op::Exp(a) => {
                add_to(grads, *a, g.zip(&self.nodes[idx].value, |gi, y| gi * y));
            }
            Op::MatMul(a, b) => {
                add_to(grads, *a, g.matmul_t(value(*b)));
                add_to(grads, *b, value(*a).t_matmul(g));
            }
            Op::AddRowBroadcast(m, row) => {
                add_to(grads, *m, g.clone());
                let n = g.cols();
                let mut rg = vec![0.0; n];
                for r in 0..g.rows() {
                    for (o, &x) in rg.iter_mut().zip(g.row_slice(r).iter()) {
                        *o += x;
                    }
                }
                add_to(grads, *row, Tensor::new(vec![1, n], rg));
            }
            Op::ConcatCols(a, b) => {
                let (ca, cb) = (value(*a).cols(), value(*b).cols());
                let m = g.rows();
                let mut ga = Vec::with_capacity(m * ca);
                let mut gb = Vec::with_capacity(m * cb);
                for r in 0..m {
                    let row = g.row_slice(r);
                    ga.extend_from_slice(&row[..ca]);
                    gb.extend_from_slice(&row[ca..]);
                }
                add_to(grads, *a, Tensor::new(vec![m, ca], ga));
                add_to(grads, *b, Tensor::new(vec![m, cb], gb));
            }
            Op::ConcatRows(a, b) => {
                let ra = value(*a).rows();
                let cols = g.cols();
                let ga = Tensor::new(vec![ra, cols], g.data()[..ra * cols].to_vec());
                let gb = Tensor::new(vec![g.rows() - ra, cols], g.data()[ra * cols..].to_vec());
                add_to(grads, *a, ga);
                add_to(grads, *b, gb);
            }
            Op::RepeatRow(row, n) => {
                let cols = g.cols();
                let mut rg = vec![0.0; cols];
                for r in 0..*n {
                    for (o, &x) in rg.iter_mut().zip(g.row_slice(r).iter()) {
                        *o += x;
                    }
                }
                add_to(grads, *row, Tensor::new(vec![1, cols], rg));
            }
            Op::GatherRows(table, ids) => {
                let tv = value(*table);
                let mut gt = Tensor::zeros(tv.shape().to_vec());
                let cols = tv.cols();
                for (r, &id) in ids.iter().enumerate() {
                    let src = g.row_slice(r);
                    let dst = &mut gt.data_mut()[id * cols..(id + 1) * cols];
                    for (o, &x) in dst.iter_mut().zip(src.iter()) {
                        *o += x;
                    }
                }
                add_to(grads, *table, gt);
            }
            Op::Reshape(a) => {
                let shape = value(*a).shape().to_vec();
                add_to(grads, *a, g.clone().reshape(shape));
            }
            Op::Sum(a) => {
                let gv = g.item();
                add_to(grads, *a, value(*a).map(|_| gv));
            }
            Op::Mean(a) => {
                let gv = g.item() / value(*a).len() as f64;
                add_to(grads, *a, value(*a).map(|_| gv));
            }
            Op::MeanRows(a) => {
                let av = value(*a);
                let (m, n) = (av.rows(), av.cols());
                let mut out = Vec::with_capacity(m * n);
                for _ in 0..m {
                    out.extend(g.data().iter().map(|&x| x / m as f64));
                }
                add_to(grads, *a, Tensor::new(vec![m, n], out));
            }
            Op::MulMask(a, mask) => {
                add_to(grads, *a, g.zip(mask, |gi, m| gi * m));
            }
            Op::RmsNormRows { x, gain, eps } => {
                let xv = value(*x);
                let gv = value(*gain);
                let (m, n) = (xv.rows(), xv.cols());
                let mut gx = Vec::with_capacity(m * n);
                let mut gg = vec![0.0; n];
                for r in 0..m {
                    let row = xv.row_slice(r);
                    let grow = g.row_slice(r);
                    let ms = row.iter().map(|v| v * v).sum::<f64>() / n as f64;
                    let rms = (ms + eps).sqrt();
                    let mut dotsum = 0.0;
                    for j in 0..n {
                        dotsum += grow[j] * gv.data()[j] * row[j];
                        gg[j] += grow[j] * row[j] / rms;
                    }
                    for j in 0..n {
                        gx.push(
                            grow[j] * gv.data()[j] / rms
                                - dotsum * row[j] / (n as f64 * rms * rms * rms),
                        );
                    }
                }
                add_to(grads, *x, Tensor::new(vec![m, n], gx));
                add_to(grads, *gain, Tensor::new(vec![1, n], gg));
            }
            Op::MaskedSoftmaxRows { scores, mask } => {
                let p = &self.nodes[idx].value;
                let (m, n) = (p.rows(), p.cols());
                let mut gs = vec![0.0; m * n];
                for r in 0..m {
                    let prow = p.row_slice(r);
                    let grow = g.row_slice(r);
                    let inner: f64 =
                        (0..n).filter(|&j| mask[r * n + j]).map(|j| grow[j] * prow[j]).sum();
                    for j in 0..n {
                        if mask[r * n + j] {
                            gs[r * n + j] = prow[j] * (grow[j] - inner);
                        }
                    }
                }
                add_to(grads, *scores, Tensor::new(vec![m, n], gs));
            }
            Op::LogSumExpRow(a) => {
                let av = value(*a);
                let mx = av.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = av.data().iter().map(|&v| (v - mx).exp()).sum();
                let gv = g.item();
                add_to(grads, *a, av.map(|v| gv * (v - mx).exp() / z));
            }
            Op::AttnMix { weights, values } => {
                let wv = value(*weights);
                let vv = value(*values);
                let (t, c) = (wv.rows(), wv.cols());
                let d = vv.cols();
                let mut gw = vec![0.0; t * c];
                let mut gvs = vec![0.0; t * c * d];
                for ti in 0..t {
                    let grow = g.row_slice(ti);
                    for ci in 0..c {
                        let vrow = vv.row_slice(ti * c + ci);
                        gw[ti * c + ci] = dot(grow, vrow);
                        let w = wv.at(ti, ci);
                        if w != 0.0 {
                            let dst = &mut gvs[(ti * c + ci) * d..(ti * c + ci + 1) * d];
                            for (o, &x) in dst.iter_mut().zip(grow.iter()) {
                                *o += w * x;
                            }
                        }
                    }
                }
                add_to(grads, *weights, Tensor::new(vec![t, c], gw));
                add_to(grads, *values, Tensor::new(vec![t * c, d], gvs));
            }
            Op::MinkowskiRows(a, b) => {
                let av = value(*a);
                let bv = value(*b);
                let (n, da) = (av.rows(), av.cols());
                let mut ga = Vec::with_capacity(n * da);
                let mut gb = Vec::with_capacity(n * da);
                for r in 0..n {
                    let gv = g.data()[r];
                    let arow = av.row_slice(r);
                    let brow = bv.row_slice(r);
                    ga.push(-gv * brow[0]);
                    gb.push(-gv * arow[0]);
                    for j in 1..da {
                        ga.push(gv * brow[j]);
                        gb.push(gv * arow[j]);
                    }
                }
                add_to(grads, *a, Tensor::new(vec![n, da], ga));
                add_to(grads, *b, Tensor::new(vec![n, da], gb));
            }
            Op::Exp0(a) => {
                let av = value(*a);
                let (n, d) = (av.rows(), av.cols());
                let mut ga = Vec::with_capacity(n * d);
                match self.geom.mode {
                    GeomMode::Euclidean => {
                        for r in 0..n {
                            ga.extend_from_slice(&g.row_slice(r)[1..]);
                        }
                    }
                    GeomMode::Lorentz => {
                        for r in 0..n {
                            let v = av.row_slice(r);
                            let grow = g.row_slice(r);
                            let (g0, gs) = (grow[0], &grow[1..]);
                            let r_norm = norm(v);
                            let s = sinh_over(r_norm);
                            let q = cosh_minus_sinc_over_sq(r_norm);
                            let gs_dot_v = dot(gs, v);
                            let coeff = g0 * s + q * gs_dot_v;
                            for j in 0..d {
                                ga.push(coeff * v[j] + s * gs[j]);
                            }
                        }
                    }
                }
                add_to(grads, *a, Tensor::new(vec![n, d], ga));
            }
            Op::Log0(a) => {
                let av = value(*a);
                let (n, da) = (av.rows(), av.cols());
                let d = da - 1;
                let mut ga = Vec::with_capacity(n * da);
                match self.geom.mode {
                    GeomMode::Euclidean => {
                        for r in 0..n {
                            ga.push(0.0);
                            ga.extend_from_slice(g.row_slice(r));
                        }
                    }
                    GeomMode::Lorentz => {
                        for r in 0..n {
                            let x = av.row_slice(r);
                            let grow = g.row_slice(r);
                            let xs = &x[1..];
                            let s = norm(xs);
                            if s < 1e-9 {
                                // near-origin clamp: log0 ~ identity on space coords
                                ga.push(0.0);
                                ga.extend_from_slice(grow);
                                continue;
                            }
                            let x0 = x[0].max(1.0);
                            let rr = arcosh_clamped(x0);
                            let g_dot_xs = dot(grow, xs);
                            let denom = (x0 * x0 - 1.0).max(1e-18).sqrt();
                            ga.push(g_dot_xs / (s * denom));
                            let k = rr / s;
                            let c2 = rr * g_dot_xs / (s * s * s);
                            for j in 0..d {
                                ga.push(k * grow[j] - c2 * xs[j]);
                            }
                        }
                    }
                }
                add_to(grads, *a, Tensor::new(vec![n, da], ga));
            }
            Op::PairwiseDist(a, b) => {
                let av = value(*a);
                let bv = value(*b);
                let (m, n, da) = (av.rows(), bv.rows(), av.cols());
                let mut ga = vec![0.0; m * da];
                let mut gb = vec![0.0; n * da];
                for i in 0..m {
                    for j in 0..n {
                        let gv = g.at(i, j);
                        if gv == 0.0 {
                            continue;
                        }
                        dist_backward(
                            &self.geom,
                            av.row_slice(i),
                            bv.row_slice(j),
                            gv,
                            &mut ga[i * da..(i + 1) * da],
                            &mut gb[j * da..(j + 1) * da],
                        );
                    }
                }
                add_to(grads, *a, Tensor::new(vec![m, da], ga));
                add_to(grads, *b, Tensor::new(vec![n, da], gb));
            }
            Op::RowsDist(a, b) => {
                let av = value(*a);
                let bv = value(*b);
                let (n, da) = (av.rows(), av.cols());
                let mut ga = vec![0.0; n * da];
                let mut gb = vec![0.0; n * da];
                for r in 0..n {
                    let gv = g.data()[r];
                    if gv == 0.0 {
                        continue;
                    }
                    dist_backward(
                        &self.geom,
                        av.row_slice(r),
                        bv.row_slice(r),
                        gv,
                        &mut ga[r * da..(r + 1) * da],
                        &mut gb[r * da..(r + 1) * da],
                    );
                }
                add_to(grads, *a, Tensor::new(vec![n, da], ga));
                add_to(grads, *b, Tensor::new(vec![n, da], gb));
            }
            Op::BceWithLogitsMean { logits, targets } => {
                let lv = value(*logits);
                let scale = g.item() / lv.len() as f64;
                let gl = lv.zip(targets, |l, t| scale * (sigmoid(l) - t));
                add_to(grads, *logits, gl);
            }
            Op::CrossEntropyMean { logits, targets } => {
                let lv = value(*logits);
                let (m, n) = (lv.rows(), lv.cols());
                let scale = g.item() / m as f64;
                let mut gl = Vec::with_capacity(m * n);
                for (r, &t) in targets.iter().enumerate() {
                    let row = lv.row_slice(r);
                    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = row.iter().map(|&v| (v - mx).exp()).sum();
                    for (j, &v) in row.iter().enumerate() {
                        let p = (v - mx).exp() / z;
                        gl.push(scale * (p - if j == t { 1.0 } else { 0.0 }));
                    }
                }
                add_to(grads, *logits, Tensor::new(vec![m, n], gl));
            }
        }
        Ok(())
    }
}

/// Shared distance backward for both distance ops. Writes into the gradient
/// row slices of both endpoints. Coincident points sit in the clamped region
/// of arcosh, where the derivative is taken as 0.
fn dist_backward(geom: &Geometry, a: &[f64], b: &[f64], g: f64, ga: &mut [f64], gb: &mut [f64]) {
    match geom.mode {
        GeomMode::Lorentz => {
            let u = -crate::manifold::minkowski_inner_unchecked(a, b);
            if u <= 1.0 + 1e-14 {
                return;
            }
            let coef = g / ((u * u - 1.0).sqrt());
            ga[0] += coef * b[0];
            gb[0] += coef * a[0];
            for j in 1..a.len() {
                ga[j] -= coef * b[j];
                gb[j] -= coef * a[j];
            }
        }
        GeomMode::Euclidean => {
            let mut d2 = 0.0;
            for j in 1..a.len() {
                let t = a[j] - b[j];
                d2 += t * t;
            }
            let d = d2.sqrt();
            if d < 1e-12 {
                return;
            }
            let coef = g / d;
            for j in 1..a.len() {
                let t = coef * (a[j] - b[j]);
                ga[j] += t;
                gb[j] -= t;
            }
        }
    }
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of a leaf, or a zero tensor of the given shape if the loss
    /// never touched it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        match self.grads[v.0].as_ref() {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape.to_vec()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn linear_loss_grad_is_input() {
        // loss = <w, x> => dloss/dw = x
        let g = Geometry::lorentz(3);
        let mut t = Tape::new(g);
        let w = t.leaf(Tensor::row(vec![0.2, -0.4, 0.6]), "w");
        let x = t.constant(Tensor::row(vec![1.0, 2.0, 3.0]));
        let prod = t.mul_elem(w, x);
        let loss = t.sum(prod);
        let grads = t.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn dist_of_exp_is_norm_grad() {
        // loss = dist(o, exp0(v))^2 = |v|^2 => grad = 2v
        let g = Geometry::lorentz(3);
        let mut t = Tape::new(g);
        let v = t.leaf(Tensor::row(vec![0.3, -0.7, 0.2]), "v");
        let p = t.exp0(v);
        let o = t.constant(Tensor::row(g.origin()));
        let d = t.rows_dist(o, p);
        let d2 = t.mul_elem(d, d);
        let loss = t.sum(d2);
        let grads = t.backward(loss).unwrap();
        let gv = grads.get(v).unwrap();
        for (got, want) in gv.data().iter().zip([0.6, -1.4, 0.4]) {
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_with_masks() {
        let g = Geometry::lorentz(2);
        let mut t = Tape::new(g);
        let s = t.constant(Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0]));
        let mask = [true, true, false, true, true, true];
        let p = t.masked_softmax_rows(s, &mask);
        let pv = t.value(p);
        assert!((pv.row_slice(0).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(pv.at(0, 2), 0.0);
        assert!((pv.row_slice(1).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn backward_rejects_nonscalar() {
        let g = Geometry::lorentz(2);
        let mut t = Tape::new(g);
        let x = t.leaf(Tensor::row(vec![1.0, 2.0]), "x");
        assert!(matches!(t.backward(x), Err(Error::Training(_))));
    }

    #[test]
    fn dropout_scales_and_is_deterministic() {
        let g = Geometry::lorentz(2);
        let mut rng1 = ChaCha20Rng::seed_from_u64(5);
        let mut rng2 = ChaCha20Rng::seed_from_u64(5);
        let mut t1 = Tape::new(g);
        let mut t2 = Tape::new(g);
        let a1 = t1.constant(Tensor::row(vec![1.0; 100]));
        let a2 = t2.constant(Tensor::row(vec![1.0; 100]));
        let d1 = t1.dropout(a1, 0.3, true, &mut rng1);
        let d2 = t2.dropout(a2, 0.3, true, &mut rng2);
        assert_eq!(t1.value(d1), t2.value(d2));
        let kept: Vec<f64> = t1.value(d1).data().iter().cloned().filter(|&v| v != 0.0).collect();
        for v in kept {
            assert!((v - 1.0 / 0.7).abs() < 1e-12);
        }
        // eval mode is the identity
        let mut t3 = Tape::new(g);
        let a3 = t3.constant(Tensor::row(vec![1.0; 10]));
        let d3 = t3.dropout(a3, 0.3, false, &mut rng1);
        assert_eq!(d3, a3);
    }

    #[test]
    fn hyp_agg_rows_matches_manifold_agg() {
        let g = Geometry::lorentz(3);
        let pts = vec![g.exp0(&[0.1, 0.2, -0.3]), g.exp0(&[-0.2, 0.4, 0.1])];
        let w = [0.3, 0.7];
        let want = g.hyp_agg(&w, &pts).unwrap();
        let mut t = Tape::new(g);
        let p = t.constant(Tensor::from_rows(&pts));
        let wv = t.constant(Tensor::row(w.to_vec()));
        let out = t.hyp_agg_rows(wv, p);
        for (a, b) in t.value(out).data().iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
