//! Label tree construction and routing.
//!
//! The tree is built top-down, one level at a time. Each pending node holds
//! a fractional example set `{(i, q_i)}`. A node either becomes a leaf, whose
//! candidates are the top-k labels of its `q`-weighted label histogram, or is
//! split: the router is solved on the weighted set, and every example is sent
//! right with weight `q_i · Φ((w·x_i − b)/σ)` and left with the rest.
//! A child share below `prune_eps · q_i` is dropped and booked as pruned mass.
//!
//! Node ids are assigned breadth-first in construction order, so they do not
//! depend on how the nodes of one level are scheduled.
//!
//! # File layout (`SPTR`, version 1, little-endian)
//!
//! ```text
//! magic    "SPTR"
//! version  u16
//! mode     u8   (0 multiclass, 1 multilabel)
//! flags    u8   (0)
//! d, c, k  u64 each
//! nodes    u64
//! node table, one 50-byte record per node in id order:
//!   kind u8 (0 leaf, 1 internal), depth u32, left u32, right u32,
//!   b f64, lambda f64, m f64, sigma f64, iterations u32, converged u8
//!   (leaf records carry zeros)
//! router vectors, one per internal node in id order:
//!   storage u8 (0 dense: d × f64 | 1 sparse: u64 nnz, nnz × (u32 index, f64))
//! candidate lists, one per leaf in id order:
//!   count u64, count × (class u32, weight f64)
//! checksum u64  (FNV-1a 64 of every preceding byte)
//! ```

use std::collections::HashMap;
use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{Reader, Writer};
use crate::data::{Dataset, TaskMode};
use crate::exec;
use crate::metrics;
use crate::sparse::SparseRow;
use crate::spectral::{self, NodeProblem, RouterSolution, SolverParams};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"SPTR";
pub const TREE_VERSION: u16 = 1;

/// Branch probabilities below this are not followed when enumerating the
/// leaves an example can reach; at most `2^depth · 1e-15` mass is lost.
const ENUMERATION_FLOOR: f64 = 1e-15;

/// How examples are split between children while the tree is built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoutingScheme {
    /// Expected counts go to both children.
    Fractional,
    /// Hard split by the sign of the margin.
    Deterministic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeConfig {
    pub max_depth: usize,
    /// Leaf candidate budget.
    pub k: usize,
    /// Stop splitting once the node's own top-k recall reaches this.
    pub phi: f64,
    /// Child shares below `prune_eps` times the incoming weight are dropped.
    pub prune_eps: f64,
    pub min_node_mass: f64,
    pub routing: RoutingScheme,
    pub solver: SolverParams,
}

impl Default for TreeConfig {
    fn default() -> Self {
        TreeConfig {
            max_depth: 12,
            k: 25,
            phi: 0.999,
            prune_eps: 1e-3,
            min_node_mass: 1.0,
            routing: RoutingScheme::Fractional,
            solver: SolverParams::default(),
        }
    }
}

impl TreeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::invalid("leaf budget k must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.phi) {
            return Err(Error::invalid("recall target phi must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.prune_eps) {
            return Err(Error::invalid("prune_eps must lie in [0, 1)"));
        }
        if !(self.min_node_mass >= 0.0) {
            return Err(Error::invalid("min_node_mass must be >= 0"));
        }
        if self.max_depth > u16::MAX as usize {
            return Err(Error::invalid("max_depth is unreasonably large"));
        }
        self.solver.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub class: u32,
    /// Routing-weighted frequency of the class at the leaf.
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeBody {
    Internal {
        router: RouterSolution,
        sigma: f64,
        left: u32,
        right: u32,
    },
    Leaf {
        candidates: Vec<Candidate>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeNode {
    pub id: u32,
    pub depth: u32,
    pub body: NodeBody,
}

impl TreeNode {
    pub fn is_leaf(&self) -> bool {
        matches!(self.body, NodeBody::Leaf { .. })
    }
}

/// Binary routing tree with per-leaf candidate label lists. The root is node 0.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelTree {
    nodes: Vec<TreeNode>,
    d: usize,
    c: usize,
    k: usize,
    mode: TaskMode,
}

/// A leaf reached by an example and the weight that got there.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LeafShare {
    pub leaf: u32,
    pub weight: f64,
}

impl LabelTree {
    pub fn root_id(&self) -> u32 {
        0
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn node(&self, id: u32) -> &TreeNode {
        &self.nodes[id as usize]
    }

    pub fn n_features(&self) -> usize {
        self.d
    }

    pub fn n_classes(&self) -> usize {
        self.c
    }

    pub fn leaf_budget(&self) -> usize {
        self.k
    }

    pub fn mode(&self) -> TaskMode {
        self.mode
    }

    pub fn leaves(&self) -> impl Iterator<Item = &TreeNode> {
        self.nodes.iter().filter(|n| n.is_leaf())
    }

    pub fn n_leaves(&self) -> usize {
        self.leaves().count()
    }

    pub fn max_depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth as usize).max().unwrap_or(0)
    }

    /// Candidate list of a leaf; empty for internal nodes.
    pub fn candidates(&self, id: u32) -> &[Candidate] {
        match &self.node(id).body {
            NodeBody::Leaf { candidates } => candidates,
            NodeBody::Internal { .. } => &[],
        }
    }

    /// Follows `w·x > b` to the right from the root.
    pub fn route_deterministic(&self, x: SparseRow<'_>) -> (u32, &[Candidate]) {
        let mut id = 0u32;
        loop {
            match &self.nodes[id as usize].body {
                NodeBody::Leaf { candidates } => return (id, candidates),
                NodeBody::Internal {
                    router,
                    left,
                    right,
                    ..
                } => id = if router.goes_right(x) { *right } else { *left },
            }
        }
    }

    /// Samples a root-to-leaf path, going right at each node with
    /// probability `Φ((w·x − b)/σ)`. Draws one uniform per internal node visited.
    pub fn route_sampled<R: Rng + ?Sized>(
        &self,
        x: SparseRow<'_>,
        rng: &mut R,
    ) -> (u32, &[Candidate]) {
        let mut id = 0u32;
        loop {
            match &self.nodes[id as usize].body {
                NodeBody::Leaf { candidates } => return (id, candidates),
                NodeBody::Internal {
                    router,
                    sigma,
                    left,
                    right,
                } => {
                    let p_right = spectral::routing_probability(router, x, *sigma);
                    let u: f64 = rng.random();
                    id = if u < p_right { *right } else { *left };
                }
            }
        }
    }

    /// Replays fractional routing of one example with starting weight
    /// `weight`: returns the leaves reached with their shares, and the pruned
    /// weight. Uses the same arithmetic as construction.
    pub fn leaf_shares(
        &self,
        x: SparseRow<'_>,
        weight: f64,
        prune_eps: f64,
        scheme: RoutingScheme,
    ) -> (Vec<LeafShare>, f64) {
        let mut out = Vec::new();
        let mut pruned = 0.0;
        let mut stack = vec![(0u32, weight)];
        while let Some((id, w)) = stack.pop() {
            match &self.nodes[id as usize].body {
                NodeBody::Leaf { .. } => out.push(LeafShare { leaf: id, weight: w }),
                NodeBody::Internal {
                    router,
                    sigma,
                    left,
                    right,
                } => {
                    let p = branch_probability(router, *sigma, x, scheme);
                    let s = split_share(w, p, prune_eps);
                    pruned += s.pruned;
                    // right first so the left subtree pops first
                    if let Some(r) = s.right {
                        stack.push((*right, r));
                    }
                    if let Some(l) = s.left {
                        stack.push((*left, l));
                    }
                }
            }
        }
        (out, pruned)
    }

    /// Leaf probabilities for one example under fractional routing, following
    /// every branch above a negligible floor.
    pub fn leaf_distribution(&self, x: SparseRow<'_>) -> Vec<LeafShare> {
        self.leaf_shares(x, 1.0, ENUMERATION_FLOOR, RoutingScheme::Fractional)
            .0
    }

    /// Rebuilds every leaf's candidate list with a new budget from the
    /// fractional leaf shares of `ds`, replaying construction routing.
    pub fn recompute_candidates(&self, ds: &Dataset, k: usize, prune_eps: f64, scheme: RoutingScheme) -> Result<LabelTree> {
        if k == 0 {
            return Err(Error::invalid("leaf budget k must be >= 1"));
        }
        let shares = exec::map_range(ds.n_examples(), |i| {
            self.leaf_shares(ds.x(i), ds.weights()[i], prune_eps, scheme).0
        });
        let mut hist: Vec<HashMap<u32, f64>> = vec![HashMap::new(); self.nodes.len()];
        for (i, s) in shares.iter().enumerate() {
            for share in s {
                for &c in ds.y(i) {
                    *hist[share.leaf as usize].entry(c).or_default() += share.weight;
                }
            }
        }
        let mut tree = self.clone();
        tree.k = k;
        for node in &mut tree.nodes {
            if let NodeBody::Leaf { candidates } = &mut node.body {
                *candidates = top_k(&hist[node.id as usize], k);
            }
        }
        Ok(tree)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(MAGIC, TREE_VERSION);
        w.u8(mode_code(self.mode));
        w.u8(0);
        w.u64(self.d as u64);
        w.u64(self.c as u64);
        w.u64(self.k as u64);
        w.u64(self.nodes.len() as u64);
        for node in &self.nodes {
            match &node.body {
                NodeBody::Internal {
                    router,
                    sigma,
                    left,
                    right,
                } => {
                    w.u8(1);
                    w.u32(node.depth);
                    w.u32(*left);
                    w.u32(*right);
                    w.f64s(&[router.b, router.lambda, router.m, *sigma]);
                    w.u32(router.iterations.min(u32::MAX as usize) as u32);
                    w.u8(router.converged as u8);
                }
                NodeBody::Leaf { .. } => {
                    w.u8(0);
                    w.u32(node.depth);
                    w.u32(0);
                    w.u32(0);
                    w.f64s(&[0.0; 4]);
                    w.u32(0);
                    w.u8(0);
                }
            }
        }
        for node in &self.nodes {
            if let NodeBody::Internal { router, .. } = &node.body {
                let nnz = router.w.iter().filter(|v| **v != 0.0).count();
                if nnz * 12 < router.w.len() * 8 {
                    w.u8(1);
                    w.u64(nnz as u64);
                    for (j, &v) in router.w.iter().enumerate().filter(|(_, v)| **v != 0.0) {
                        w.u32(j as u32);
                        w.f64(v);
                    }
                } else {
                    w.u8(0);
                    w.f64s(&router.w);
                }
            }
        }
        for node in &self.nodes {
            if let NodeBody::Leaf { candidates } = &node.body {
                w.u64(candidates.len() as u64);
                for cand in candidates {
                    w.u32(cand.class);
                    w.f64(cand.weight);
                }
            }
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<LabelTree> {
        let mut r = Reader::open(bytes, MAGIC, TREE_VERSION, "tree")?;
        let mode = match r.u8()? {
            0 => TaskMode::Multiclass,
            1 => TaskMode::Multilabel,
            m => return Err(Error::Format { offset: r.offset() - 1, msg: format!("unknown mode {m}") }),
        };
        if r.u8()? != 0 {
            return r.fail("unknown flags");
        }
        let limit = r.remaining();
        let d = r.len(u32::MAX as usize, "feature count")?;
        let c = r.len(u32::MAX as usize, "class count")?;
        let k = r.len(u32::MAX as usize, "leaf budget")?;
        let n_nodes = r.len(limit / 50, "node count")?;
        if n_nodes == 0 || k == 0 {
            return r.fail("tree needs at least one node and k >= 1");
        }

        struct Row {
            internal: bool,
            depth: u32,
            left: u32,
            right: u32,
            vals: [f64; 4],
            iterations: u32,
            converged: bool,
        }
        let mut rows = Vec::with_capacity(n_nodes);
        for _ in 0..n_nodes {
            let at = r.offset();
            let internal = match r.u8()? {
                0 => false,
                1 => true,
                other => return Err(Error::Format { offset: at, msg: format!("bad node kind {other}") }),
            };
            let depth = r.u32()?;
            let left = r.u32()?;
            let right = r.u32()?;
            let vals = [r.finite()?, r.finite()?, r.finite()?, r.finite()?];
            let iterations = r.u32()?;
            let converged = r.u8()? != 0;
            rows.push(Row { internal, depth, left, right, vals, iterations, converged });
        }

        let mut vectors = HashMap::new();
        for (id, row) in rows.iter().enumerate() {
            if !row.internal {
                continue;
            }
            let w = match r.u8()? {
                0 => r.f64s(d)?,
                1 => {
                    let nnz = r.len(d, "router nnz")?;
                    let mut w = vec![0.0; d];
                    let mut last = None;
                    for _ in 0..nnz {
                        let at = r.offset();
                        let j = r.u32()? as usize;
                        if j >= d || last.is_some_and(|l| j <= l) {
                            return Err(Error::Format { offset: at, msg: format!("bad router index {j}") });
                        }
                        last = Some(j);
                        w[j] = r.finite()?;
                    }
                    w
                }
                s => return r.fail(format!("bad router storage flag {s}")),
            };
            vectors.insert(id, w);
        }

        let mut nodes = Vec::with_capacity(n_nodes);
        for (id, row) in rows.into_iter().enumerate() {
            let body = if row.internal {
                let [b, lambda, m, sigma] = row.vals;
                NodeBody::Internal {
                    router: RouterSolution {
                        w: vectors.remove(&id).unwrap_or_default(),
                        b,
                        lambda,
                        m,
                        iterations: row.iterations as usize,
                        converged: row.converged,
                    },
                    sigma,
                    left: row.left,
                    right: row.right,
                }
            } else {
                let count = r.len(k, "candidate count")?;
                let mut candidates = Vec::with_capacity(count);
                for _ in 0..count {
                    let at = r.offset();
                    let class = r.u32()?;
                    if class as usize >= c {
                        return Err(Error::Format { offset: at, msg: format!("candidate class {class} >= {c}") });
                    }
                    candidates.push(Candidate { class, weight: r.finite()? });
                }
                NodeBody::Leaf { candidates }
            };
            nodes.push(TreeNode { id: id as u32, depth: row.depth, body });
        }
        let at = r.offset();
        r.end()?;
        let tree = LabelTree { nodes, d, c, k, mode };
        tree.check_structure().map_err(|msg| Error::Format { offset: at, msg })?;
        Ok(tree)
    }

    pub fn write_to(&self, mut out: impl Write) -> Result<()> {
        out.write_all(&self.to_bytes())?;
        Ok(())
    }

    /// Single rooted binary tree, breadth-first ids, consistent depths.
    fn check_structure(&self) -> std::result::Result<(), String> {
        let n = self.nodes.len();
        let mut parent = vec![None; n];
        for node in &self.nodes {
            if let NodeBody::Internal { left, right, sigma, router, .. } = &node.body {
                if !(*sigma > 0.0) || router.w.len() != self.d {
                    return Err(format!("node {} has an invalid router", node.id));
                }
                for &child in [left, right] {
                    let c = child as usize;
                    if c >= n || c <= node.id as usize || parent[c].is_some() || left == right {
                        return Err(format!("node {} has invalid child {child}", node.id));
                    }
                    if self.nodes[c].depth != node.depth + 1 {
                        return Err(format!("node {child} has inconsistent depth"));
                    }
                    parent[c] = Some(node.id);
                }
            }
            if let NodeBody::Leaf { candidates } = &node.body {
                let sorted = candidates.windows(2).all(|w| {
                    w[0].weight > w[1].weight || (w[0].weight == w[1].weight && w[0].class < w[1].class)
                });
                if !sorted || candidates.len() > self.k {
                    return Err(format!("leaf {} candidates are not a sorted top-k list", node.id));
                }
            }
        }
        if self.nodes[0].depth != 0 {
            return Err("root depth must be 0".into());
        }
        if let Some(orphan) = (1..n).find(|&i| parent[i].is_none()) {
            return Err(format!("node {orphan} is unreachable"));
        }
        Ok(())
    }
}

fn mode_code(mode: TaskMode) -> u8 {
    match mode {
        TaskMode::Multiclass => 0,
        TaskMode::Multilabel => 1,
    }
}

#[inline]
fn branch_probability(
    router: &RouterSolution,
    sigma: f64,
    x: SparseRow<'_>,
    scheme: RoutingScheme,
) -> f64 {
    match scheme {
        RoutingScheme::Fractional => spectral::routing_probability(router, x, sigma),
        RoutingScheme::Deterministic => {
            if router.goes_right(x) {
                1.0
            } else {
                0.0
            }
        }
    }
}

struct Share {
    left: Option<f64>,
    right: Option<f64>,
    pruned: f64,
}

/// Splits `w` into `w·p` (right) and the remainder (left), dropping either
/// part when it is zero or below `eps · w`.
#[inline]
fn split_share(w: f64, p_right: f64, eps: f64) -> Share {
    let right = w * p_right;
    let left = w - right;
    let mut pruned = 0.0;
    let mut keep = |part: f64| {
        if part > 0.0 && part >= eps * w {
            Some(part)
        } else {
            pruned += part;
            None
        }
    };
    let left = keep(left);
    let right = keep(right);
    Share { left, right, pruned }
}

fn top_k(hist: &HashMap<u32, f64>, k: usize) -> Vec<Candidate> {
    let mut all: Vec<Candidate> = hist
        .iter()
        .filter(|(_, &w)| w > 0.0)
        .map(|(&class, &weight)| Candidate { class, weight })
        .collect();
    all.sort_unstable_by(|a, b| b.weight.total_cmp(&a.weight).then(a.class.cmp(&b.class)));
    all.truncate(k);
    all
}

/// Why a node became a leaf.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxDepth,
    RecallReached,
    LowMass,
    SingleLabel,
    SolverFailed(String),
}

/// One line of the build report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub node_id: u32,
    pub depth: u32,
    pub leaf: bool,
    pub n_members: usize,
    pub mass: f64,
    pub left_mass: f64,
    pub right_mass: f64,
    pub pruned_mass: f64,
    /// Recall of the node's own top-k labels over its weighted examples.
    pub recall: f64,
    pub n_labels: usize,
    pub n_candidates: usize,
    pub lambda: Option<f64>,
    pub sigma: Option<f64>,
    pub iterations: Option<usize>,
    pub converged: Option<bool>,
    pub purity: Option<f64>,
    pub macro_purity: Option<f64>,
    pub balance: Option<f64>,
    pub stop: Option<StopReason>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildReport {
    pub config: TreeConfig,
    pub nodes: Vec<NodeRecord>,
}

impl BuildReport {
    /// One JSON object per line: the config first, then a record per node.
    pub fn write_jsonl(&self, mut out: impl Write) -> Result<()> {
        let cfg = serde_json::json!({ "record": "config", "config": self.config });
        writeln!(out, "{cfg}")?;
        for rec in &self.nodes {
            let mut v = serde_json::to_value(rec).map_err(|e| Error::invalid(e.to_string()))?;
            v["record"] = "node".into();
            writeln!(out, "{v}")?;
        }
        Ok(())
    }

    pub fn summary(&self) -> TreeSummary {
        let leaves: Vec<&NodeRecord> = self.nodes.iter().filter(|r| r.leaf).collect();
        let total: f64 = leaves.iter().map(|r| r.mass).sum();
        let avg = |f: &dyn Fn(&NodeRecord) -> f64| {
            if total > 0.0 {
                leaves.iter().map(|r| r.mass * f(r)).sum::<f64>() / total
            } else {
                0.0
            }
        };
        TreeSummary {
            n_nodes: self.nodes.len(),
            n_leaves: leaves.len(),
            max_depth: self.nodes.iter().map(|r| r.depth).max().unwrap_or(0) as usize,
            avg_depth: avg(&|r| r.depth as f64),
            avg_candidates: avg(&|r| r.n_candidates as f64),
            train_recall: avg(&|r| r.recall),
            root_purity: self.nodes.first().and_then(|r| r.purity),
            root_balance: self.nodes.first().and_then(|r| r.balance),
        }
    }
}

/// Mass-weighted averages over leaves.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TreeSummary {
    pub n_nodes: usize,
    pub n_leaves: usize,
    pub max_depth: usize,
    pub avg_depth: f64,
    pub avg_candidates: f64,
    pub train_recall: f64,
    pub root_purity: Option<f64>,
    pub root_balance: Option<f64>,
}

struct Pending {
    depth: u32,
    rows: Vec<u32>,
    weights: Vec<f64>,
}

enum Outcome {
    Leaf(Vec<Candidate>),
    Split {
        router: RouterSolution,
        sigma: f64,
        left: Pending,
        right: Pending,
    },
}

fn node_seed(seed: u64, id: u32) -> u64 {
    // splitmix64 finalizer
    let mut z = seed.wrapping_add((id as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn process(ds: &Dataset, cfg: &TreeConfig, id: u32, node: &Pending) -> (Outcome, NodeRecord) {
    let mass: f64 = node.weights.iter().sum();
    let mut hist: HashMap<u32, f64> = HashMap::new();
    for (&i, &q) in node.rows.iter().zip(&node.weights) {
        for &c in ds.y(i as usize) {
            *hist.entry(c).or_default() += q;
        }
    }
    let candidates = top_k(&hist, cfg.k);
    let n_labels = hist.values().filter(|&&w| w > 0.0).count();

    let mut hit = 0.0;
    let mut labelled = 0.0;
    for (&i, &q) in node.rows.iter().zip(&node.weights) {
        let y = ds.y(i as usize);
        if y.is_empty() {
            continue;
        }
        let inside = y
            .iter()
            .filter(|c| candidates.iter().any(|cand| cand.class == **c))
            .count();
        hit += q * inside as f64 / y.len() as f64;
        labelled += q;
    }
    let recall = if labelled > 0.0 { hit / labelled } else { 1.0 };

    let mut record = NodeRecord {
        node_id: id,
        depth: node.depth,
        leaf: true,
        n_members: node.rows.len(),
        mass,
        left_mass: 0.0,
        right_mass: 0.0,
        pruned_mass: 0.0,
        recall,
        n_labels,
        n_candidates: candidates.len(),
        lambda: None,
        sigma: None,
        iterations: None,
        converged: None,
        purity: None,
        macro_purity: None,
        balance: None,
        stop: None,
    };

    let stop = if node.depth as usize >= cfg.max_depth {
        Some(StopReason::MaxDepth)
    } else if recall >= cfg.phi {
        Some(StopReason::RecallReached)
    } else if mass < cfg.min_node_mass || !(mass > 0.0) {
        Some(StopReason::LowMass)
    } else if n_labels < 2 {
        Some(StopReason::SingleLabel)
    } else {
        None
    };
    if let Some(reason) = stop {
        record.stop = Some(reason);
        return (Outcome::Leaf(candidates), record);
    }

    let params = SolverParams {
        seed: node_seed(cfg.solver.seed, id),
        ..cfg.solver
    };
    let problem = NodeProblem::new(ds.features(), ds.labels(), ds.mode(), &node.rows, &node.weights);
    let solved = problem
        .solve(&params)
        .and_then(|r| spectral::node_sigma(&r).map(|s| (r, s)));
    let (router, sigma) = match solved {
        Ok(rs) => rs,
        Err(e) => {
            record.stop = Some(StopReason::SolverFailed(e.to_string()));
            return (Outcome::Leaf(candidates), record);
        }
    };

    let probs = exec::map_range(node.rows.len(), |t| {
        branch_probability(&router, sigma, ds.x(node.rows[t] as usize), cfg.routing)
    });
    let mut left = Pending {
        depth: node.depth + 1,
        rows: Vec::new(),
        weights: Vec::new(),
    };
    let mut right = Pending {
        depth: node.depth + 1,
        rows: Vec::new(),
        weights: Vec::new(),
    };
    let mut pruned = 0.0;
    for ((&i, &q), &p) in node.rows.iter().zip(&node.weights).zip(&probs) {
        let s = split_share(q, p, cfg.prune_eps);
        pruned += s.pruned;
        if let Some(l) = s.left {
            left.rows.push(i);
            left.weights.push(l);
        }
        if let Some(r) = s.right {
            right.rows.push(i);
            right.weights.push(r);
        }
    }

    if ds.mode() == TaskMode::Multiclass {
        let stats = metrics::weighted_split_stats(
            &router,
            node.rows.iter().zip(&node.weights).map(|(&i, &q)| {
                let i = i as usize;
                (ds.x(i), ds.y(i)[0], q)
            }),
        );
        record.purity = Some(stats.purity);
        record.macro_purity = Some(stats.macro_purity);
        record.balance = Some(stats.balance);
    }
    record.leaf = false;
    record.left_mass = left.weights.iter().sum();
    record.right_mass = right.weights.iter().sum();
    record.pruned_mass = pruned;
    record.lambda = Some(router.lambda);
    record.sigma = Some(sigma);
    record.iterations = Some(router.iterations);
    record.converged = Some(router.converged);
    (
        Outcome::Split {
            router,
            sigma,
            left,
            right,
        },
        record,
    )
}

/// Builds the label tree level by level; nodes of one level are solved in parallel.
pub fn build_tree(ds: &Dataset, cfg: &TreeConfig) -> Result<(LabelTree, BuildReport)> {
    cfg.validate()?;
    if ds.n_examples() == 0 {
        return Err(Error::invalid("cannot build a tree on an empty dataset"));
    }
    let root_rows: Vec<u32> = (0..ds.n_examples() as u32)
        .filter(|&i| ds.weights()[i as usize] > 0.0)
        .collect();
    let root = Pending {
        depth: 0,
        weights: root_rows.iter().map(|&i| ds.weights()[i as usize]).collect(),
        rows: root_rows,
    };

    let mut nodes: Vec<TreeNode> = Vec::new();
    let mut records = Vec::new();
    let mut frontier = vec![root];
    while !frontier.is_empty() {
        let first_id = nodes.len() as u32;
        let outcomes = exec::map_range(frontier.len(), |t| {
            process(ds, cfg, first_id + t as u32, &frontier[t])
        });
        let mut next_id = first_id + frontier.len() as u32;
        let mut next = Vec::new();
        for (t, (outcome, record)) in outcomes.into_iter().enumerate() {
            let id = first_id + t as u32;
            let depth = frontier[t].depth;
            let body = match outcome {
                Outcome::Leaf(candidates) => NodeBody::Leaf { candidates },
                Outcome::Split {
                    router,
                    sigma,
                    left,
                    right,
                } => {
                    let body = NodeBody::Internal {
                        router,
                        sigma,
                        left: next_id,
                        right: next_id + 1,
                    };
                    next_id += 2;
                    next.push(left);
                    next.push(right);
                    body
                }
            };
            nodes.push(TreeNode { id, depth, body });
            records.push(record);
        }
        frontier = next;
    }

    let tree = LabelTree {
        nodes,
        d: ds.n_features(),
        c: ds.n_classes(),
        k: cfg.k,
        mode: ds.mode(),
    };
    Ok((
        tree,
        BuildReport {
            config: *cfg,
            nodes: records,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecallRouting {
    Fractional,
    Deterministic,
}

/// Fraction of each example's labels found in the candidate lists it
/// reaches, averaged over examples that have labels.
pub fn estimate_recall(tree: &LabelTree, ds: &Dataset, routing: RecallRouting) -> f64 {
    let per_example = exec::map_range(ds.n_examples(), |i| {
        let y = ds.y(i);
        if y.is_empty() {
            return None;
        }
        let frac = |cands: &[Candidate]| {
            y.iter()
                .filter(|c| cands.iter().any(|cand| cand.class == **c))
                .count() as f64
                / y.len() as f64
        };
        Some(match routing {
            RecallRouting::Deterministic => frac(tree.route_deterministic(ds.x(i)).1),
            RecallRouting::Fractional => tree
                .leaf_distribution(ds.x(i))
                .iter()
                .map(|s| s.weight * frac(tree.candidates(s.leaf)))
                .sum(),
        })
    });
    let (sum, count) = per_example
        .into_iter()
        .flatten()
        .fold((0.0, 0usize), |(s, n), r| (s + r, n + 1));
    if count == 0 {
        1.0
    } else {
        sum / count as f64
    }
}
