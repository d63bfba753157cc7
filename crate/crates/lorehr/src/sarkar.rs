//! Constructive low-distortion embedding of a rooted trie into the
//! hyperbolic plane (2-D Lorentz model).
//!
//! Children are placed on a geodesic circle of radius `tau` around their
//! parent, spread evenly over the directions left free by the parent edge.
//! `tau` grows like (1+eps)/eps * log-factor of the maximum degree, which for
//! eps = 0.1 lands around 20-40: far enough out that ambient Minkowski
//! products of same-branch points cancel catastrophically in f64. Distances
//! are therefore computed by chaining hyperbolic triangles anchored at each
//! pair's lowest common ancestor, with cosh/sinh handled in log space. The
//! ambient coordinates are still exposed for geometry checks; for very deep
//! trees at large tau they can overflow to infinity even though all pairwise
//! distances stay exact.

use crate::error::{Error, Result};
use crate::hierarchy::{CodeTrie, NodeId};

/// Plane embedding: polar coordinates about the root plus the full pairwise
/// geodesic distance matrix.
#[derive(Debug, Clone)]
pub struct PlaneEmbedding {
    pub scale: f64,
    n: usize,
    /// (radius, angle) about the root, in root slot-frame coordinates.
    polar: Vec<(f64, f64)>,
    dists: Vec<f64>,
}

impl PlaneEmbedding {
    /// Ambient Lorentz coordinates on the 2-D hyperboloid.
    pub fn coords(&self, node: NodeId) -> [f64; 3] {
        let (r, theta) = self.polar[node];
        let sh = r.sinh();
        let sp1 = sh * theta.cos();
        let sp2 = sh * theta.sin();
        [(1.0 + sp1 * sp1 + sp2 * sp2).sqrt(), sp1, sp2]
    }

    pub fn radius(&self, node: NodeId) -> f64 {
        self.polar[node].0
    }

    pub fn dist(&self, u: NodeId, v: NodeId) -> f64 {
        self.dists[u * self.n + v]
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }
}

// ---- stable hyperbolic trigonometry ----------------------------------------

fn ln_sinh(x: f64) -> f64 {
    debug_assert!(x > 0.0);
    if x > 300.0 {
        x + (0.5 * (1.0 - (-2.0 * x).exp())).ln()
    } else {
        x.sinh().ln()
    }
}

fn ln_cosh(x: f64) -> f64 {
    let ax = x.abs();
    if ax > 300.0 {
        ax + (0.5 * (1.0 + (-2.0 * ax).exp())).ln()
    } else {
        ax.cosh().ln()
    }
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Geodesic side c of a triangle with sides a, b and included angle gamma:
/// cosh c = cosh(a-b) + 2 sinh a sinh b sin^2(gamma/2). Every term is
/// nonnegative, so there is no cancellation in either branch.
fn side_from(a: f64, b: f64, gamma: f64) -> f64 {
    debug_assert!((0.0..=std::f64::consts::PI + 1e-12).contains(&gamma.abs()));
    let s = (gamma / 2.0).sin().abs();
    if a <= 0.0 || b <= 0.0 {
        return (a - b).abs();
    }
    if a + b < 600.0 {
        let x = (a - b).cosh() + 2.0 * a.sinh() * b.sinh() * s * s;
        return crate::manifold::arcosh_clamped(x);
    }
    let t1 = ln_cosh(a - b);
    let lnx = if s == 0.0 {
        t1
    } else {
        let t2 = ln_sinh(a) + ln_sinh(b) + (2.0 * s * s).ln();
        log_add_exp(t1, t2)
    };
    if lnx > 40.0 {
        std::f64::consts::LN_2 + lnx
    } else {
        crate::manifold::arcosh_clamped(lnx.exp())
    }
}

/// Cosine of the interior angle between sides p and q (opposite side o).
fn cos_interior(p: f64, q: f64, o: f64) -> f64 {
    if p <= 0.0 || q <= 0.0 {
        return 1.0;
    }
    if p + q < 600.0 {
        ((p.cosh() * q.cosh() - o.cosh()) / (p.sinh() * q.sinh())).clamp(-1.0, 1.0)
    } else {
        // scale numerator and denominator by 4 e^{-(p+q)}
        let e2p = (-2.0 * p).exp();
        let e2q = (-2.0 * q).exp();
        let num = (1.0 + e2p) * (1.0 + e2q)
            - 2.0 * ((o - p - q).exp() + (-o - p - q).exp());
        let den = (1.0 - e2p) * (1.0 - e2q);
        (num / den).clamp(-1.0, 1.0)
    }
}

/// Sine of an interior angle by the law of sines:
/// sin A = sinh(opp_A) sin(B) / sinh(opp_B), evaluated in log space.
fn sin_interior(opp_a: f64, known_angle_sin: f64, opp_known: f64) -> f64 {
    if known_angle_sin <= 0.0 || opp_a <= 0.0 {
        return 0.0;
    }
    (ln_sinh(opp_a) + known_angle_sin.ln() - ln_sinh(opp_known)).exp().clamp(0.0, 1.0)
}

fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut x = a % two_pi;
    if x > std::f64::consts::PI {
        x -= two_pi;
    } else if x <= -std::f64::consts::PI {
        x += two_pi;
    }
    x
}

// ---- construction -----------------------------------------------------------

/// Directions at a node, in its own frame: for a non-root node the parent
/// sits at angle 0 and the k-th child at 2 pi (k+1) / (children+1); the root
/// spreads children over 2 pi k / children.
fn child_slot(trie: &CodeTrie, node: NodeId, k: usize) -> f64 {
    let m = trie.children(node).len();
    if node == trie.root() {
        2.0 * std::f64::consts::PI * k as f64 / m as f64
    } else {
        2.0 * std::f64::consts::PI * (k + 1) as f64 / (m + 1) as f64
    }
}

/// Scale needed for the target distortion: the straightness deficit of a
/// bend with angle theta is at most -2 ln sin(theta/2), paid once per
/// interior vertex, so tau >= (1+eps)/eps times the worst deficit keeps the
/// lower ratio above 1 - eps.
pub fn sarkar_scale(trie: &CodeTrie, epsilon: f64) -> f64 {
    let mut slots_max = 1usize;
    for n in 0..trie.len() {
        let c = trie.children(n).len();
        if c == 0 {
            continue;
        }
        let slots = c + usize::from(n != trie.root());
        slots_max = slots_max.max(slots);
    }
    let theta_min = 2.0 * std::f64::consts::PI / slots_max as f64;
    let deficit = -2.0 * (theta_min / 2.0).sin().ln();
    let tau = (1.0 + epsilon) / epsilon * deficit * 1.2;
    tau.max(1.0)
}

#[derive(Clone, Copy)]
struct Rel {
    /// geodesic distance from the anchor
    rho: f64,
    /// signed angle at the anchor between anchor->node and the anchor frame
    theta: f64,
    /// signed angle at the node between node->anchor and the node frame
    psi: f64,
}

/// Constructive embedding at the given scale.
pub fn embed_with_scale(trie: &CodeTrie, tau: f64) -> Result<PlaneEmbedding> {
    if tau <= 0.0 {
        return Err(Error::Argument(format!("scale must be positive, got {tau}")));
    }
    let n = trie.len();

    // anchored states: rel[w] holds Rel for every strict descendant of w
    let mut rel: Vec<Vec<Option<Rel>>> = vec![vec![None; n]; n];
    for w in 0..n {
        // seed with w's children, then extend down the subtree
        let mut queue: std::collections::VecDeque<NodeId> = Default::default();
        for (k, &c) in trie.children(w).iter().enumerate() {
            rel[w][c] = Some(Rel { rho: tau, theta: child_slot(trie, w, k), psi: 0.0 });
            queue.push_back(c);
        }
        while let Some(x) = queue.pop_front() {
            let rx = rel[w][x].unwrap();
            for (k, &y) in trie.children(x).iter().enumerate() {
                let chi = child_slot(trie, x, k);
                let delta = wrap_angle(chi - rx.psi);
                let gamma = delta.abs();
                let sin_gamma = gamma.sin().max(0.0);
                let rho_y = side_from(rx.rho, tau, gamma);
                let omega = {
                    let s = sin_interior(tau, sin_gamma, rho_y);
                    let c = cos_interior(rx.rho, rho_y, tau);
                    s.atan2(c)
                };
                let eta = {
                    let s = sin_interior(rx.rho, sin_gamma, rho_y);
                    let c = cos_interior(tau, rho_y, rx.rho);
                    s.atan2(c)
                };
                let sign = if delta >= 0.0 { 1.0 } else { -1.0 };
                rel[w][y] = Some(Rel {
                    rho: rho_y,
                    theta: rx.theta - sign * omega,
                    psi: sign * eta,
                });
                queue.push_back(y);
            }
        }
    }

    let root = trie.root();
    let mut polar = vec![(0.0, 0.0); n];
    for v in 0..n {
        if v != root {
            let r = rel[root][v].unwrap();
            polar[v] = (r.rho, r.theta);
        }
    }

    let mut dists = vec![0.0; n * n];
    for u in 0..n {
        for v in u + 1..n {
            let w = trie.lca(u, v);
            let d = if w == u {
                rel[u][v].unwrap().rho
            } else if w == v {
                rel[v][u].unwrap().rho
            } else {
                let ru = rel[w][u].unwrap();
                let rv = rel[w][v].unwrap();
                let gamma = wrap_angle(ru.theta - rv.theta).abs();
                side_from(ru.rho, rv.rho, gamma)
            };
            dists[u * n + v] = d;
            dists[v * n + u] = d;
        }
    }

    Ok(PlaneEmbedding { scale: tau, n, polar, dists })
}

/// Embedding with the scale chosen from the target distortion.
pub fn sarkar_embed(trie: &CodeTrie, epsilon: f64) -> Result<PlaneEmbedding> {
    if !(epsilon > 0.0 && epsilon <= 1.0) {
        return Err(Error::Argument(format!("epsilon must be in (0, 1], got {epsilon}")));
    }
    embed_with_scale(trie, sarkar_scale(trie, epsilon))
}

/// Worst distance ratios d_emb(u,v) / (tau * d_T(u,v)) over all node pairs.
pub fn distortion(embedding: &PlaneEmbedding, trie: &CodeTrie) -> Result<(f64, f64)> {
    if embedding.len() != trie.len() {
        return Err(Error::Argument(format!(
            "embedding covers {} nodes, trie has {}",
            embedding.len(),
            trie.len()
        )));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for u in 0..trie.len() {
        for v in u + 1..trie.len() {
            let dt = trie.tree_distance(u, v)? as f64;
            let ratio = embedding.dist(u, v) / (embedding.scale * dt);
            lo = lo.min(ratio);
            hi = hi.max(ratio);
        }
    }
    Ok((lo, hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hierarchy::random_trie;
    use crate::manifold::Geometry;

    fn edges(list: &[(&str, &str)]) -> CodeTrie {
        let e: Vec<(String, String)> =
            list.iter().map(|(p, c)| (p.to_string(), c.to_string())).collect();
        CodeTrie::from_edges(&e).unwrap()
    }

    #[test]
    fn three_node_path_ends_at_twice_scale() {
        let t = edges(&[("a", "b"), ("b", "c")]);
        for tau in [0.5, 1.0, 7.0, 40.0] {
            let emb = embed_with_scale(&t, tau).unwrap();
            let (a, c) = (t.id_of("a").unwrap(), t.id_of("c").unwrap());
            let d = emb.dist(a, c);
            assert!((d - 2.0 * tau).abs() < 1e-9 * (1.0 + 2.0 * tau), "tau {tau}: {d}");
        }
    }

    #[test]
    fn chain_embedding_has_unit_ratios() {
        let t = edges(&[("a", "b"), ("b", "c"), ("c", "d"), ("d", "e")]);
        let emb = sarkar_embed(&t, 0.1).unwrap();
        let (lo, hi) = distortion(&emb, &t).unwrap();
        assert!((lo - 1.0).abs() < 1e-9, "lo {lo}");
        assert!((hi - 1.0).abs() < 1e-9, "hi {hi}");
        assert!(lo <= hi);
    }

    /// Cross-validate the triangle-chaining distances against direct ambient
    /// Lorentz distances on shallow trees at small scale, where ambient f64
    /// is exact. This pins the orientation conventions.
    #[test]
    fn recursion_matches_ambient_at_small_scale() {
        let g = Geometry::lorentz(2);
        for seed in 0..5u64 {
            let t = random_trie(18, 4, 3, seed);
            let emb = embed_with_scale(&t, 1.0).unwrap();
            for u in 0..t.len() {
                for v in u + 1..t.len() {
                    let cu = emb.coords(u);
                    let cv = emb.coords(v);
                    let ambient = g.dist_unchecked(&cu, &cv);
                    let chained = emb.dist(u, v);
                    assert!(
                        (ambient - chained).abs() < 1e-8,
                        "seed {seed} pair ({u},{v}): ambient {ambient} vs chained {chained}"
                    );
                }
            }
        }
    }

    #[test]
    fn coords_are_on_manifold() {
        let g = Geometry::lorentz(2);
        let t = edges(&[("r", "x"), ("r", "y"), ("x", "x1"), ("x", "x2"), ("y", "y1")]);
        let emb = embed_with_scale(&t, 1.0).unwrap();
        for id in 0..t.len() {
            let c = emb.coords(id);
            assert!(g.scaled_defect(&c) <= 1e-9);
            assert!(c.iter().all(|v| v.is_finite()));
        }
        // root with two children at tau = 1: placements distinct and finite
        let d = emb.dist(t.id_of("x").unwrap(), t.id_of("y").unwrap());
        assert!(d > 1.0 && d.is_finite());
    }

    #[test]
    fn binary_tree_depth4_within_bounds() {
        let mut e = Vec::new();
        let mut frontier = vec!["b".to_string()];
        for _ in 0..4 {
            let mut next = Vec::new();
            for p in &frontier {
                for s in ["0", "1"] {
                    let c = format!("{p}{s}");
                    e.push((p.clone(), c.clone()));
                    next.push(c);
                }
            }
            frontier = next;
        }
        let t = CodeTrie::from_edges(&e).unwrap();
        let emb = sarkar_embed(&t, 0.1).unwrap();
        let (lo, hi) = distortion(&emb, &t).unwrap();
        assert!(hi <= 1.1, "hi {hi}");
        assert!(lo >= 0.9, "lo {lo}");
    }

    #[test]
    fn random_tries_within_bounds() {
        for seed in 0..20u64 {
            let t = random_trie(64, 8, 6, seed);
            let emb = sarkar_embed(&t, 0.1).unwrap();
            let (lo, hi) = distortion(&emb, &t).unwrap();
            assert!(hi <= 1.1 + 1e-12, "seed {seed}: hi {hi}");
            assert!(lo >= 0.9, "seed {seed}: lo {lo} (tau {})", emb.scale);
        }
    }

    #[test]
    fn epsilon_validation() {
        let t = edges(&[("a", "b")]);
        assert!(sarkar_embed(&t, 0.0).is_err());
        assert!(sarkar_embed(&t, 1.5).is_err());
    }
}
