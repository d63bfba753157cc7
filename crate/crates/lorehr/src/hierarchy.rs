//! Rooted medical-code hierarchies: construction, tree metric, supervision
//! sets for the hierarchy losses, and Gromov four-point hyperbolicity.
//!
//! Tries are immutable after build; all queries are thread-safe. Sampling
//! takes an explicit seed.

use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use std::collections::BTreeMap;

pub type NodeId = usize;

#[derive(Debug, Clone)]
pub struct CodeTrie {
    codes: Vec<String>,
    index: BTreeMap<String, NodeId>,
    parent: Vec<Option<NodeId>>,
    children: Vec<Vec<NodeId>>,
    depth: Vec<usize>,
    root: NodeId,
}

/// Parent-child pairs, each a trie edge.
#[derive(Debug, Clone)]
pub struct PairSet {
    pub pairs: Vec<(NodeId, NodeId)>,
}

/// (anchor, ancestor-related positive, other-branch negative) triplets.
#[derive(Debug, Clone)]
pub struct TripletSet {
    pub triplets: Vec<(NodeId, NodeId, NodeId)>,
}

impl CodeTrie {
    /// Build from explicit (parent, child) edges. Node ids follow first
    /// appearance in the edge list.
    pub fn from_edges(edges: &[(String, String)]) -> Result<Self> {
        if edges.is_empty() {
            return Err(Error::Structure("no edges".into()));
        }
        let mut codes: Vec<String> = Vec::new();
        let mut index: BTreeMap<String, NodeId> = BTreeMap::new();
        let mut intern = |codes: &mut Vec<String>, index: &mut BTreeMap<String, NodeId>, c: &str| {
            if let Some(&id) = index.get(c) {
                return id;
            }
            codes.push(c.to_string());
            index.insert(c.to_string(), codes.len() - 1);
            codes.len() - 1
        };
        let mut parent_of: Vec<Option<NodeId>> = Vec::new();
        for (p, c) in edges {
            let pid = intern(&mut codes, &mut index, p);
            let cid = intern(&mut codes, &mut index, c);
            parent_of.resize(codes.len(), None);
            if pid == cid {
                return Err(Error::Structure(format!("self edge at node {c}")));
            }
            if let Some(existing) = parent_of[cid] {
                if existing != pid {
                    return Err(Error::Structure(format!("node {c} has two parents")));
                }
                continue;
            }
            parent_of[cid] = Some(pid);
        }
        parent_of.resize(codes.len(), None);
        Self::assemble(codes, index, parent_of)
    }

    /// Build from a bare code list: the parent of a code is the longest
    /// proper prefix (dropping trailing characters) present in the set.
    pub fn from_codes(codes_in: &[String]) -> Result<Self> {
        if codes_in.is_empty() {
            return Err(Error::Structure("no codes".into()));
        }
        let mut sorted: Vec<String> = codes_in.to_vec();
        sorted.sort();
        sorted.dedup();
        let mut index = BTreeMap::new();
        for (i, c) in sorted.iter().enumerate() {
            index.insert(c.clone(), i);
        }
        let mut parent_of: Vec<Option<NodeId>> = vec![None; sorted.len()];
        for (i, code) in sorted.iter().enumerate() {
            let mut pfx = code.clone();
            while !pfx.is_empty() {
                pfx.pop();
                if pfx.is_empty() {
                    break;
                }
                if let Some(&pid) = index.get(&pfx) {
                    parent_of[i] = Some(pid);
                    break;
                }
            }
        }
        Self::assemble(sorted, index, parent_of)
    }

    /// Parse a hierarchy file: one `parent<TAB>child` edge per line with `#`
    /// comments, or a codes-only file (no tab anywhere) triggering prefix
    /// parenting.
    pub fn from_text(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .collect();
        if lines.is_empty() {
            return Err(Error::Structure("empty hierarchy file".into()));
        }
        if lines.iter().any(|l| l.contains('\t')) {
            let mut edges = Vec::with_capacity(lines.len());
            for l in &lines {
                let mut it = l.splitn(2, '\t');
                let p = it.next().unwrap_or("").trim();
                let c = it.next().unwrap_or("").trim();
                if p.is_empty() || c.is_empty() {
                    return Err(Error::Structure(format!("malformed edge line: {l}")));
                }
                edges.push((p.to_string(), c.to_string()));
            }
            Self::from_edges(&edges)
        } else {
            let codes: Vec<String> = lines.iter().map(|l| l.to_string()).collect();
            Self::from_codes(&codes)
        }
    }

    fn assemble(
        codes: Vec<String>,
        index: BTreeMap<String, NodeId>,
        parent: Vec<Option<NodeId>>,
    ) -> Result<Self> {
        let n = codes.len();
        let roots: Vec<NodeId> = (0..n).filter(|&i| parent[i].is_none()).collect();
        if roots.len() != 1 {
            let names: Vec<&str> = roots.iter().map(|&i| codes[i].as_str()).collect();
            return Err(Error::Structure(format!(
                "expected exactly one root, found {}: {:?}",
                roots.len(),
                names
            )));
        }
        let root = roots[0];
        let mut children: Vec<Vec<NodeId>> = vec![Vec::new(); n];
        for (c, p) in parent.iter().enumerate() {
            if let Some(p) = p {
                children[*p].push(c);
            }
        }
        // depths via BFS; anything unreached sits on a cycle
        let mut depth = vec![usize::MAX; n];
        depth[root] = 0;
        let mut queue = std::collections::VecDeque::from([root]);
        while let Some(u) = queue.pop_front() {
            for &c in &children[u] {
                depth[c] = depth[u] + 1;
                queue.push_back(c);
            }
        }
        if let Some(bad) = (0..n).find(|&i| depth[i] == usize::MAX) {
            return Err(Error::Structure(format!("cycle involving node {}", codes[bad])));
        }
        Ok(CodeTrie { codes, index, parent, children, depth, root })
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn code(&self, id: NodeId) -> &str {
        &self.codes[id]
    }

    pub fn codes(&self) -> &[String] {
        &self.codes
    }

    pub fn id_of(&self, code: &str) -> Option<NodeId> {
        self.index.get(code).copied()
    }

    pub fn depth(&self, id: NodeId) -> usize {
        self.depth[id]
    }

    pub fn parent(&self, id: NodeId) -> Option<NodeId> {
        self.parent[id]
    }

    pub fn children(&self, id: NodeId) -> &[NodeId] {
        &self.children[id]
    }

    pub fn max_depth(&self) -> usize {
        self.depth.iter().copied().max().unwrap_or(0)
    }

    /// Leaves in id order.
    pub fn leaves(&self) -> Vec<NodeId> {
        (0..self.len()).filter(|&i| self.children[i].is_empty()).collect()
    }

    /// The depth-1 ancestor of a node (the node itself if at depth 1).
    /// The root has no branch.
    pub fn branch_of(&self, id: NodeId) -> Option<NodeId> {
        if id == self.root {
            return None;
        }
        let mut cur = id;
        while self.depth[cur] > 1 {
            cur = self.parent[cur].expect("non-root with no parent");
        }
        Some(cur)
    }

    pub fn lca(&self, u: NodeId, v: NodeId) -> NodeId {
        let (mut a, mut b) = (u, v);
        while self.depth[a] > self.depth[b] {
            a = self.parent[a].unwrap();
        }
        while self.depth[b] > self.depth[a] {
            b = self.parent[b].unwrap();
        }
        while a != b {
            a = self.parent[a].unwrap();
            b = self.parent[b].unwrap();
        }
        a
    }

    /// Path metric: depth(u) + depth(v) - 2 depth(lca).
    pub fn tree_distance(&self, u: NodeId, v: NodeId) -> Result<usize> {
        if u >= self.len() || v >= self.len() {
            return Err(Error::Argument(format!("unknown node id {u} or {v}")));
        }
        let l = self.lca(u, v);
        Ok(self.depth[u] + self.depth[v] - 2 * self.depth[l])
    }

    pub fn tree_distance_codes(&self, u: &str, v: &str) -> Result<usize> {
        let ui = self.id_of(u).ok_or_else(|| Error::Argument(format!("unknown code {u}")))?;
        let vi = self.id_of(v).ok_or_else(|| Error::Argument(format!("unknown code {v}")))?;
        self.tree_distance(ui, vi)
    }

    /// All edges as (parent, child); `exclude_root_edges` drops edges
    /// incident to the root (for hierarchies whose root is synthetic).
    pub fn extract_pairs(&self, exclude_root_edges: bool) -> PairSet {
        let mut pairs = Vec::new();
        for c in 0..self.len() {
            if let Some(p) = self.parent[c] {
                if exclude_root_edges && p == self.root {
                    continue;
                }
                pairs.push((p, c));
            }
        }
        PairSet { pairs }
    }

    /// Sample (a, a+, a-) triplets: a+ is a's parent or a same-branch node,
    /// a- comes from a different branch (branches split at depth
    /// `cut_depth`, normally 1). Deterministic for a fixed seed.
    pub fn sample_triplets(&self, count: usize, seed: u64, cut_depth: usize) -> Result<TripletSet> {
        let cut_of = |id: NodeId| -> Option<NodeId> {
            if self.depth[id] < cut_depth {
                return None;
            }
            let mut cur = id;
            while self.depth[cur] > cut_depth {
                cur = self.parent[cur].unwrap();
            }
            Some(cur)
        };
        let branches: std::collections::BTreeSet<NodeId> =
            (0..self.len()).filter_map(cut_of).collect();
        if branches.len() < 2 {
            return Err(Error::Structure(
                "triplet sampling needs at least two top-level branches".into(),
            ));
        }
        // anchors: nodes below the cut with at least one positive candidate
        let nodes_at_or_below: Vec<NodeId> =
            (0..self.len()).filter(|&i| self.depth[i] >= cut_depth).collect();
        let mut by_branch: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
        for &n in &nodes_at_or_below {
            by_branch.entry(cut_of(n).unwrap()).or_default().push(n);
        }
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut triplets = Vec::with_capacity(count);
        let branch_list: Vec<NodeId> = by_branch.keys().copied().collect();
        while triplets.len() < count {
            let a = nodes_at_or_below[rng.gen_range(0..nodes_at_or_below.len())];
            let ab = cut_of(a).unwrap();
            // positives: parent plus same-branch nodes, excluding a itself
            let mut pos: Vec<NodeId> =
                by_branch[&ab].iter().copied().filter(|&x| x != a).collect();
            if let Some(p) = self.parent[a] {
                if !pos.contains(&p) {
                    pos.push(p);
                }
            }
            if pos.is_empty() {
                continue;
            }
            let apos = pos[rng.gen_range(0..pos.len())];
            let mut nb = branch_list[rng.gen_range(0..branch_list.len())];
            while nb == ab {
                nb = branch_list[rng.gen_range(0..branch_list.len())];
            }
            let negs = &by_branch[&nb];
            let aneg = negs[rng.gen_range(0..negs.len())];
            triplets.push((a, apos, aneg));
        }
        Ok(TripletSet { triplets })
    }

    /// Gromov four-point delta under the tree metric: exhaustive for small
    /// tries, sampled (1e5 quadruples) otherwise. Trees give exactly 0.
    pub fn gromov_delta(&self, seed: u64) -> f64 {
        let n = self.len();
        let dist = |u: usize, v: usize| self.tree_distance(u, v).unwrap() as f64;
        four_point_delta(n, &dist, 12, 100_000, seed)
    }
}

/// Worst four-point-condition defect of a metric: for each quadruple, sort
/// the three pairings d(x,y)+d(z,w); the defect is (largest - middle) / 2.
pub fn four_point_delta(
    n: usize,
    dist: &dyn Fn(usize, usize) -> f64,
    exhaustive_cap: usize,
    samples: usize,
    seed: u64,
) -> f64 {
    if n < 4 {
        return 0.0;
    }
    let quad_delta = |a: usize, b: usize, c: usize, d: usize| -> f64 {
        let s1 = dist(a, b) + dist(c, d);
        let s2 = dist(a, c) + dist(b, d);
        let s3 = dist(a, d) + dist(b, c);
        let mut v = [s1, s2, s3];
        v.sort_by(|x, y| x.partial_cmp(y).unwrap());
        (v[2] - v[1]) / 2.0
    };
    let mut delta: f64 = 0.0;
    if n <= exhaustive_cap {
        for a in 0..n {
            for b in a + 1..n {
                for c in b + 1..n {
                    for d in c + 1..n {
                        delta = delta.max(quad_delta(a, b, c, d));
                    }
                }
            }
        }
    } else {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        for _ in 0..samples {
            let mut pick = [0usize; 4];
            for slot in pick.iter_mut() {
                *slot = rng.gen_range(0..n);
            }
            if pick[0] == pick[1] || pick[0] == pick[2] || pick[0] == pick[3] {
                continue;
            }
            if pick[1] == pick[2] || pick[1] == pick[3] || pick[2] == pick[3] {
                continue;
            }
            delta = delta.max(quad_delta(pick[0], pick[1], pick[2], pick[3]));
        }
    }
    delta
}

/// Random rooted trie with bounded degree and depth, for checker runs.
pub fn random_trie(n_nodes: usize, max_degree: usize, max_depth: usize, seed: u64) -> CodeTrie {
    assert!(n_nodes >= 2);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut edges: Vec<(String, String)> = Vec::new();
    let mut depth = vec![0usize];
    let mut deg = vec![0usize];
    for i in 1..n_nodes {
        // candidate parents: not over degree, not at the depth cap
        let cands: Vec<usize> = (0..i)
            .filter(|&p| deg[p] < max_degree && depth[p] < max_depth)
            .collect();
        let p = cands[rng.gen_range(0..cands.len())];
        deg[p] += 1;
        depth.push(depth[p] + 1);
        deg.push(0);
        edges.push((format!("n{p}"), format!("n{i}")));
    }
    CodeTrie::from_edges(&edges).expect("random trie is valid by construction")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(p: &str, c: &str) -> (String, String) {
        (p.to_string(), c.to_string())
    }

    #[test]
    fn build_basic_depths() {
        let t = CodeTrie::from_edges(&[e("R", "A"), e("R", "B")]).unwrap();
        assert_eq!(t.depth(t.id_of("R").unwrap()), 0);
        assert_eq!(t.depth(t.id_of("A").unwrap()), 1);
        assert_eq!(t.depth(t.id_of("B").unwrap()), 1);
    }

    #[test]
    fn prefix_parenting_chain() {
        let codes: Vec<String> =
            ["I", "I2", "I21", "I21.9"].iter().map(|s| s.to_string()).collect();
        let t = CodeTrie::from_codes(&codes).unwrap();
        for (c, d) in [("I", 0), ("I2", 1), ("I21", 2), ("I21.9", 3)] {
            assert_eq!(t.depth(t.id_of(c).unwrap()), d, "{c}");
        }
        // the dot is skipped by truncation
        assert_eq!(t.parent(t.id_of("I21.9").unwrap()), t.id_of("I21"));
    }

    #[test]
    fn structural_errors() {
        assert!(matches!(
            CodeTrie::from_edges(&[e("R", "A"), e("B", "A"), e("R", "B")]),
            Err(Error::Structure(_))
        ));
        assert!(matches!(
            CodeTrie::from_edges(&[e("R", "A"), e("S", "B")]),
            Err(Error::Structure(_))
        ));
        // two-node cycle has no root
        assert!(matches!(
            CodeTrie::from_edges(&[e("A", "B"), e("B", "A")]),
            Err(Error::Structure(_))
        ));
    }

    #[test]
    fn tree_distance_cases() {
        let t = CodeTrie::from_edges(&[e("R", "A"), e("R", "B"), e("A", "A1"), e("A", "A2")])
            .unwrap();
        let a1 = t.id_of("A1").unwrap();
        let a2 = t.id_of("A2").unwrap();
        assert_eq!(t.tree_distance(a1, a1).unwrap(), 0);
        assert_eq!(t.tree_distance(a1, a2).unwrap(), 2);
        assert!(t.tree_distance(a1, 999).is_err());
    }

    /// Full binary tree of the given depth; returns (trie, leaves).
    fn full_binary(depth: usize) -> CodeTrie {
        let mut edges = Vec::new();
        let mut frontier = vec!["b".to_string()];
        for _ in 0..depth {
            let mut next = Vec::new();
            for p in &frontier {
                for s in ["0", "1"] {
                    let c = format!("{p}{s}");
                    edges.push((p.clone(), c.clone()));
                    next.push(c);
                }
            }
            frontier = next;
        }
        CodeTrie::from_edges(&edges).unwrap()
    }

    #[test]
    fn binary_tree_leaf_distance() {
        let t = full_binary(3);
        let u = t.id_of("b000").unwrap();
        let v = t.id_of("b111").unwrap();
        assert_eq!(t.tree_distance(u, v).unwrap(), 6);
    }

    #[test]
    fn pair_extraction_counts() {
        let chain = CodeTrie::from_edges(&[e("a", "b"), e("b", "c"), e("c", "d")]).unwrap();
        assert_eq!(chain.extract_pairs(false).pairs.len(), 3);
        let t = full_binary(2);
        assert_eq!(t.extract_pairs(false).pairs.len(), 6);
        assert_eq!(t.extract_pairs(true).pairs.len(), 4);
        for (p, _) in t.extract_pairs(true).pairs {
            assert_ne!(p, t.root());
        }
    }

    #[test]
    fn triplets_deterministic_and_valid() {
        let t = full_binary(3);
        let a = t.sample_triplets(200, 42, 1).unwrap();
        let b = t.sample_triplets(200, 42, 1).unwrap();
        assert_eq!(a.triplets, b.triplets);
        for &(x, xp, xn) in &a.triplets {
            let bx = t.branch_of(x).unwrap();
            assert_ne!(t.branch_of(xn).unwrap(), bx, "negative from the same branch");
            let pos_ok = t.parent(x) == Some(xp) || t.branch_of(xp) == Some(bx);
            assert!(pos_ok, "positive not ancestor-related");
            assert_ne!(x, xp);
        }
    }

    #[test]
    fn triplet_positive_relatedness_sweep() {
        let t = full_binary(3);
        let ts = t.sample_triplets(10_000, 7, 1).unwrap();
        let related = ts
            .triplets
            .iter()
            .filter(|&&(a, ap, _)| t.parent(a) == Some(ap) || t.branch_of(ap) == t.branch_of(a))
            .count();
        assert_eq!(related, ts.triplets.len());
    }

    #[test]
    fn triplets_need_two_branches() {
        let chain = CodeTrie::from_edges(&[e("a", "b"), e("b", "c")]).unwrap();
        assert!(matches!(chain.sample_triplets(10, 1, 1), Err(Error::Structure(_))));
    }

    #[test]
    fn gromov_delta_zero_on_trees() {
        let t = full_binary(2); // 7 nodes, exhaustive
        assert_eq!(t.gromov_delta(1), 0.0);
        let star =
            CodeTrie::from_edges(&(0..5).map(|i| e("hub", &format!("s{i}"))).collect::<Vec<_>>())
                .unwrap();
        assert_eq!(star.gromov_delta(1), 0.0);
        let big = random_trie(40, 4, 6, 3);
        assert_eq!(big.gromov_delta(9), 0.0);
    }

    #[test]
    fn gromov_delta_positive_for_plane_points() {
        // control: Euclidean distances of random planar points are not
        // 0-hyperbolic
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let pts: Vec<(f64, f64)> =
            (0..12).map(|_| (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
        let dist = move |u: usize, v: usize| -> f64 {
            let dx = pts[u].0 - pts[v].0;
            let dy = pts[u].1 - pts[v].1;
            (dx * dx + dy * dy).sqrt()
        };
        let delta = four_point_delta(12, &dist, 12, 0, 0);
        assert!(delta > 0.0, "expected positive delta, got {delta}");
    }

    #[test]
    fn random_trie_respects_bounds() {
        let t = random_trie(64, 8, 6, 42);
        assert_eq!(t.len(), 64);
        assert!(t.max_depth() <= 6);
        for i in 0..t.len() {
            assert!(t.children(i).len() <= 8);
        }
    }
}
