//! Finite-difference audit of every differentiable operation.
//!
//! Each case freezes a set of sampled input tensors and a builder that turns
//! them into a scalar loss on a fresh tape. The audit compares analytic leaf
//! gradients against central finite differences (h = 1e-5) on randomly chosen
//! coordinates, reporting the worst relative error per case.
//!
//! Inputs are sampled away from clamp boundaries (coincident points, the
//! origin, ReLU kinks), where the true derivative is either undefined or
//! deliberately clamped.

use crate::manifold::{norm, Geometry};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

pub const DEFAULT_TOL: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-5;
pub const COORDS_PER_OP: usize = 100;

type Builder = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;

pub struct CheckCase {
    pub name: String,
    pub geom: Geometry,
    pub inputs: Vec<Tensor>,
    pub build: Builder,
}

#[derive(Debug, Clone)]
pub struct OpReport {
    pub name: String,
    pub max_rel_err: f64,
    pub coords: usize,
    pub pass: bool,
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-2)
}

/// Compare analytic gradients of a case against central differences.
pub fn audit_case(case: &CheckCase, tol: f64, seed: u64) -> OpReport {
    let mut tape = Tape::new(case.geom);
    let leaves: Vec<Var> = case
        .inputs
        .iter()
        .enumerate()
        .map(|(i, t)| tape.leaf(t.clone(), &format!("input{i}")))
        .collect();
    let loss = (case.build)(&mut tape, &leaves);
    let grads = tape.backward(loss).expect("gradcheck backward failed");
    let analytic: Vec<Tensor> = leaves
        .iter()
        .zip(case.inputs.iter())
        .map(|(&v, t)| grads.get_or_zeros(v, t.shape()))
        .collect();
    audit_against(case, &analytic, tol, seed)
}

/// Comparator half of the audit, split out so tests can feed it corrupted
/// analytic gradients as a negative control.
pub fn audit_against(case: &CheckCase, analytic: &[Tensor], tol: f64, seed: u64) -> OpReport {
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x5eed);
    let sizes: Vec<usize> = case.inputs.iter().map(|t| t.len()).collect();
    let total: usize = sizes.iter().sum();
    let n_coords = COORDS_PER_OP.min(total);

    let eval = |inputs: &[Tensor]| -> f64 {
        let mut tape = Tape::new(case.geom);
        let leaves: Vec<Var> =
            inputs.iter().enumerate().map(|(i, t)| tape.leaf(t.clone(), &format!("input{i}"))).collect();
        let loss = (case.build)(&mut tape, &leaves);
        tape.value(loss).item()
    };

    let mut max_err: f64 = 0.0;
    for _ in 0..n_coords {
        let mut flat = rng.gen_range(0..total);
        let mut which = 0;
        while flat >= sizes[which] {
            flat -= sizes[which];
            which += 1;
        }
        let mut plus = case.inputs.to_vec();
        plus[which].data_mut()[flat] += FD_STEP;
        let mut minus = case.inputs.to_vec();
        minus[which].data_mut()[flat] -= FD_STEP;
        let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
        let a = analytic[which].data()[flat];
        max_err = max_err.max(rel_err(a, numeric));
    }
    OpReport { name: case.name.clone(), max_rel_err: max_err, coords: n_coords, pass: max_err <= tol }
}

pub fn run_all(seed: u64, tol: f64) -> Vec<OpReport> {
    all_cases(seed).iter().map(|c| audit_case(c, tol, seed)).collect()
}

pub fn run_named(name: &str, seed: u64, tol: f64) -> Option<OpReport> {
    all_cases(seed).into_iter().find(|c| c.name == name).map(|c| audit_case(&c, tol, seed))
}

pub fn all_cases(seed: u64) -> Vec<CheckCase> {
    let mut cases = core_cases(seed);
    cases.extend(crate::encoder::gradcheck_cases(seed));
    cases.extend(crate::qa::gradcheck_cases(seed));
    cases
}

// ---- input samplers -------------------------------------------------------

pub fn sample_matrix(rng: &mut ChaCha20Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::new(vec![rows, cols], data)
}

/// Spatial tangent rows with norms in [lo, hi], bounded away from zero.
pub fn sample_tangents(
    rng: &mut ChaCha20Rng,
    rows: usize,
    dim: usize,
    lo: f64,
    hi: f64,
) -> Tensor {
    let mut data = Vec::with_capacity(rows * dim);
    for _ in 0..rows {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = norm(&v).max(1e-9);
        let r = rng.gen_range(lo..hi);
        for x in v.iter_mut() {
            *x *= r / n;
        }
        data.extend_from_slice(&v);
    }
    Tensor::new(vec![rows, dim], data)
}

/// On-manifold point rows with radii in [lo, hi].
pub fn sample_points(
    geom: &Geometry,
    rng: &mut ChaCha20Rng,
    rows: usize,
    lo: f64,
    hi: f64,
) -> Tensor {
    let tang = sample_tangents(rng, rows, geom.dim, lo, hi);
    let mut data = Vec::with_capacity(rows * geom.ambient());
    for r in 0..rows {
        data.extend_from_slice(&geom.exp0(tang.row_slice(r)));
    }
    Tensor::new(vec![rows, geom.ambient()], data)
}

fn scalarize_weights(rng: &mut ChaCha20Rng, rows: usize, cols: usize) -> Tensor {
    sample_matrix(rng, rows, cols, 1.0)
}

/// loss = sum(out * w) for a fixed random functional w.
pub fn scalarized(t: &mut Tape, out: Var, w: &Tensor) -> Var {
    let wv = t.constant(w.clone());
    let prod = t.mul_elem(out, wv);
    t.sum(prod)
}

// ---- core op cases ----------------------------------------------------------

fn core_cases(seed: u64) -> Vec<CheckCase> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let lorentz = Geometry::lorentz(6);
    let euclid = Geometry::euclidean(6);
    let mut cases: Vec<CheckCase> = Vec::new();

    {
        let a = sample_matrix(&mut rng, 3, 4, 1.0);
        let b = sample_matrix(&mut rng, 3, 4, 1.0);
        let w = scalarize_weights(&mut rng, 3, 4);
        cases.push(CheckCase {
            name: "add".into(),
            geom: lorentz,
            inputs: vec![a, b],
            build: Box::new(move |t, l| {
                let s = t.add(l[0], l[1]);
                scalarized(t, s, &w)
            }),
        });
    }
    {
        let a = sample_matrix(&mut rng, 3, 4, 1.0);
        let b = sample_matrix(&mut rng, 3, 4, 1.0);
        let w = scalarize_weights(&mut rng, 3, 4);
        cases.push(CheckCase {
            name: "mul_elem".into(),
            geom: lorentz,
            inputs: vec![a, b],
            build: Box::new(move |t, l| {
                let s = t.mul_elem(l[0], l[1]);
                scalarized(t, s, &w)
            }),
        });
    }
    {
        let a = sample_matrix(&mut rng, 3, 5, 1.0);
        let b = sample_matrix(&mut rng, 5, 4, 1.0);
        let w = scalarize_weights(&mut rng, 3, 4);
        cases.push(CheckCase {
            name: "matmul".into(),
            geom: lorentz,
            inputs: vec![a, b],
            build: Box::new(move |t, l| {
                let s = t.matmul(l[0], l[1]);
                scalarized(t, s, &w)
            }),
        });
    }
    {
        let m = sample_matrix(&mut rng, 4, 3, 1.0);
        let row = sample_matrix(&mut rng, 1, 3, 1.0);
        let w = scalarize_weights(&mut rng, 4, 3);
        cases.push(CheckCase {
            name: "add_row_broadcast".into(),
            geom: lorentz,
            inputs: vec![m, row],
            build: Box::new(move |t, l| {
                let s = t.add_row_broadcast(l[0], l[1]);
                scalarized(t, s, &w)
            }),
        });
    }
    {
        // keep values away from the GELU tail where fp noise dominates
        let x = sample_matrix(&mut rng, 2, 8, 2.0);
        let w1 = sample_matrix(&mut rng, 8, 6, 0.6);
        let b1 = sample_matrix(&mut rng, 1, 6, 0.3);
        let w2 = sample_matrix(&mut rng, 6, 4, 0.6);
        let b2 = sample_matrix(&mut rng, 1, 4, 0.3);
        let w = scalarize_weights(&mut rng, 2, 4);
        cases.push(CheckCase {
            name: "mlp_gelu".into(),
            geom: lorentz,
            inputs: vec![x, w1, b1, w2, b2],
            build: Box::new(move |t, l| {
                let s = t.mlp2(l[0], l[1], l[2], l[3], l[4]);
                scalarized(t, s, &w)
            }),
        });
    }
    {
        let x = sample_matrix(&mut rng, 2, 6, 2.0);
        let w = scalarize_weights(&mut rng, 2, 6);
        cases.push(CheckCase {
            name: "softplus".into(),
            geom: lorentz,
            inputs: vec![x],
            build: Box::new(move |t, l| {
                let s = t.softplus(l[0]);
                scalarized(t, s, &w)
            }),
        });
    }
    {
        let x = sample_matrix(&mut rng, 2, 6, 1.0);
        let w = scalarize_weights(&mut rng, 2, 6);
        cases.push(CheckCase {
            name: "exp".into(),
            geom: lorentz,
            inputs: vec![x],
            build: Box::new(move |t, l| {
                let s = t.exp(l[0]);
                scalarized(t, s, &w)
            }),
        });
    }
    {
        let x = sample_matrix(&mut rng, 3, 8, 1.5);
        let gain = sample_matrix(&mut rng, 1, 8, 1.0);
        let w = scalarize_weights(&mut rng, 3, 8);
        cases.push(CheckCase {
            name: "rms_norm".into(),
            geom: lorentz,
            inputs: vec![x, gain],
            build: Box::new(move |t, l| {
                let s = t.rms_norm_rows(l[0], l[1], 1e-8);
                scalarized(t, s, &w)
            }),
        });
    }
    {
        let scores = sample_matrix(&mut rng, 3, 5, 2.0);
        let mask: Vec<bool> = (0..15).map(|i| i % 4 != 3).collect();
        let w = scalarize_weights(&mut rng, 3, 5);
        cases.push(CheckCase {
            name: "masked_softmax".into(),
            geom: lorentz,
            inputs: vec![scores],
            build: Box::new(move |t, l| {
                let s = t.masked_softmax_rows(l[0], &mask);
                scalarized(t, s, &w)
            }),
        });
    }
    {
        let weights = sample_matrix(&mut rng, 3, 4, 1.0);
        let values = sample_matrix(&mut rng, 12, 5, 1.0);
        let w = scalarize_weights(&mut rng, 3, 5);
        cases.push(CheckCase {
            name: "attn_mix".into(),
            geom: lorentz,
            inputs: vec![weights, values],
            build: Box::new(move |t, l| {
                let s = t.attn_mix(l[0], l[1]);
                scalarized(t, s, &w)
            }),
        });
    }
    {
        let x = sample_matrix(&mut rng, 1, 7, 2.0);
        cases.push(CheckCase {
            name: "log_sum_exp".into(),
            geom: lorentz,
            inputs: vec![x],
            build: Box::new(move |t, l| t.log_sum_exp_row(l[0])),
        });
    }
    {
        let table = sample_matrix(&mut rng, 6, 4, 1.0);
        let ids = vec![0usize, 2, 2, 5];
        let w = scalarize_weights(&mut rng, 4, 4);
        cases.push(CheckCase {
            name: "gather_rows".into(),
            geom: lorentz,
            inputs: vec![table],
            build: Box::new(move |t, l| {
                let s = t.gather_rows(l[0], &ids);
                scalarized(t, s, &w)
            }),
        });
    }
    {
        let x = sample_matrix(&mut rng, 5, 3, 1.0);
        let w = scalarize_weights(&mut rng, 1, 3);
        cases.push(CheckCase {
            name: "mean_rows".into(),
            geom: lorentz,
            inputs: vec![x],
            build: Box::new(move |t, l| {
                let s = t.mean_rows(l[0]);
                scalarized(t, s, &w)
            }),
        });
    }
    {
        let row = sample_matrix(&mut rng, 1, 4, 1.0);
        let other = sample_matrix(&mut rng, 3, 2, 1.0);
        let w = scalarize_weights(&mut rng, 3, 6);
        cases.push(CheckCase {
            name: "repeat_concat".into(),
            geom: lorentz,
            inputs: vec![row, other],
            build: Box::new(move |t, l| {
                let rep = t.repeat_row(l[0], 3);
                let cat = t.concat_cols(rep, l[1]);
                scalarized(t, cat, &w)
            }),
        });
    }
    {
        let x = sample_matrix(&mut rng, 2, 3, 1.0);
        let s = Tensor::scalar(0.7);
        let w = scalarize_weights(&mut rng, 2, 3);
        cases.push(CheckCase {
            name: "mul_scalar_var".into(),
            geom: lorentz,
            inputs: vec![x, s],
            build: Box::new(move |t, l| {
                let p = t.mul_scalar_var(l[0], l[1]);
                scalarized(t, p, &w)
            }),
        });
    }

    // geometry ops, Lorentz then Euclidean
    for geom in [lorentz, euclid] {
        let tag = match geom.mode {
            crate::manifold::GeomMode::Lorentz => "",
            crate::manifold::GeomMode::Euclidean => "_euclidean",
        };
        {
            let a = sample_points(&geom, &mut rng, 4, 0.3, 2.0);
            let b = sample_points(&geom, &mut rng, 4, 0.3, 2.0);
            let w = scalarize_weights(&mut rng, 4, 1);
            cases.push(CheckCase {
                name: format!("minkowski_rows{tag}"),
                geom,
                inputs: vec![a, b],
                build: Box::new(move |t, l| {
                    let s = t.minkowski_rows(l[0], l[1]);
                    scalarized(t, s, &w)
                }),
            });
        }
        {
            let v = sample_tangents(&mut rng, 4, geom.dim, 0.3, 2.5);
            let w = scalarize_weights(&mut rng, 4, geom.ambient());
            cases.push(CheckCase {
                name: format!("exp0{tag}"),
                geom,
                inputs: vec![v],
                build: Box::new(move |t, l| {
                    let s = t.exp0(l[0]);
                    scalarized(t, s, &w)
                }),
            });
        }
        {
            let p = sample_points(&geom, &mut rng, 4, 0.3, 2.5);
            let w = scalarize_weights(&mut rng, 4, geom.dim);
            cases.push(CheckCase {
                name: format!("log0{tag}"),
                geom,
                inputs: vec![p],
                build: Box::new(move |t, l| {
                    let s = t.log0(l[0]);
                    scalarized(t, s, &w)
                }),
            });
        }
        {
            let a = sample_points(&geom, &mut rng, 3, 0.3, 2.0);
            let b = sample_points(&geom, &mut rng, 4, 2.5, 4.0);
            let w = scalarize_weights(&mut rng, 3, 4);
            cases.push(CheckCase {
                name: format!("pairwise_dist{tag}"),
                geom,
                inputs: vec![a, b],
                build: Box::new(move |t, l| {
                    let s = t.pairwise_dist(l[0], l[1]);
                    scalarized(t, s, &w)
                }),
            });
        }
        {
            let a = sample_points(&geom, &mut rng, 4, 0.3, 1.5);
            let b = sample_points(&geom, &mut rng, 4, 2.0, 3.5);
            let w = scalarize_weights(&mut rng, 4, 1);
            cases.push(CheckCase {
                name: format!("rows_dist{tag}"),
                geom,
                inputs: vec![a, b],
                build: Box::new(move |t, l| {
                    let s = t.rows_dist(l[0], l[1]);
                    scalarized(t, s, &w)
                }),
            });
        }
        {
            let pts = sample_points(&geom, &mut rng, 4, 0.3, 1.5);
            let raw = [0.1, 0.2, 0.3, 0.4];
            let weights = Tensor::new(vec![1, 4], raw.to_vec());
            let w = scalarize_weights(&mut rng, 1, geom.ambient());
            cases.push(CheckCase {
                name: format!("hyp_agg{tag}"),
                geom,
                inputs: vec![weights, pts],
                build: Box::new(move |t, l| {
                    let s = t.hyp_agg_rows(l[0], l[1]);
                    scalarized(t, s, &w)
                }),
            });
        }
    }

    {
        let logits = sample_matrix(&mut rng, 3, 5, 2.0);
        let targets = Tensor::new(
            vec![3, 5],
            (0..15).map(|i| if i % 3 == 0 { 1.0 } else { 0.0 }).collect(),
        );
        cases.push(CheckCase {
            name: "bce_with_logits".into(),
            geom: lorentz,
            inputs: vec![logits],
            build: Box::new(move |t, l| t.bce_with_logits_mean(l[0], targets.clone())),
        });
    }
    {
        let logits = sample_matrix(&mut rng, 4, 6, 2.0);
        let targets = vec![0usize, 3, 5, 2];
        cases.push(CheckCase {
            name: "cross_entropy".into(),
            geom: lorentz,
            inputs: vec![logits],
            build: Box::new(move |t, l| t.cross_entropy_mean(l[0], &targets)),
        });
    }

    cases
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn core_ops_pass_fd_audit() {
        for report in core_cases(42).iter().map(|c| audit_case(c, DEFAULT_TOL, 42)) {
            assert!(
                report.pass,
                "{} failed FD audit: max rel err {:.3e}",
                report.name, report.max_rel_err
            );
        }
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let cases = core_cases(7);
        let case = cases.into_iter().find(|c| c.name == "matmul").unwrap();
        let mut tape = Tape::new(case.geom);
        let leaves: Vec<Var> = case
            .inputs
            .iter()
            .enumerate()
            .map(|(i, t)| tape.leaf(t.clone(), &format!("input{i}")))
            .collect();
        let loss = (case.build)(&mut tape, &leaves);
        let grads = tape.backward(loss).unwrap();
        let mut analytic: Vec<Tensor> = leaves
            .iter()
            .zip(case.inputs.iter())
            .map(|(&v, t)| grads.get_or_zeros(v, t.shape()))
            .collect();
        // corrupt every coordinate by 5%
        for t in analytic.iter_mut() {
            for v in t.data_mut() {
                *v *= 1.05;
            }
        }
        let report = audit_against(&case, &analytic, DEFAULT_TOL, 7);
        assert!(!report.pass, "corrupted backward slipped through the audit");
    }
}
