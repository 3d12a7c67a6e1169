//! Candidate-restricted classifier trained on top of a label tree.
//!
//! Every leaf proposes a candidate list `C`. The score of class `j` at leaf
//! `L` is
//!
//! ```text
//! full rank:  s_j = w_j·x + g_j + n_{L,j}
//! low rank:   s_j = v_j·(Uᵀx) + g_j + n_{L,j}
//! ```
//!
//! with a global bias `g` per class and a bias `n` per (leaf, candidate). In
//! low-rank mode `U` (d×r) is shared and `v_j` is either shared per class or
//! owned by the leaf (`node_output_weights`). Multiclass uses a softmax over
//! `C`; multilabel uses an independent logistic loss per candidate.
//!
//! Only classes that appear in some candidate list get parameters.
//!
//! # File layout (`SPMD`, version 1, little-endian)
//!
//! ```text
//! magic    "SPMD"
//! version  u16
//! mode     u8   (0 multiclass softmax, 1 multilabel logistic)
//! flags    u8   (bit 0: node output weights)
//! d, c, rank, nodes, slots   u64 each
//! tree fingerprint           u64 (FNV-1a 64 of the tree file)
//! slot classes   slots × u32, strictly increasing
//! global bias    slots × f64
//! full rank:  per slot, u8 storage (0 dense: d × f64 | 1 sparse: u64 nnz, nnz × (u32, f64))
//! low rank:   U as d × r f64 (row-major), then shared V as slots × r f64 if flag bit 0 is clear
//! node bias   u64 count, count × (leaf u32, class u32, bias f64, [r × f64 output row if flag bit 0])
//! checksum    u64
//! ```

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::codec::{fnv1a64, Reader, Writer};
use crate::data::{Dataset, TaskMode};
use crate::sparse::SparseRow;
use crate::tree::{LabelTree, NodeBody};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"SPMD";
pub const MODEL_VERSION: u16 = 1;
const NO_SLOT: u32 = u32::MAX;

/// Softmax over a candidate score list.
pub fn restricted_softmax(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::invalid("restricted_softmax needs at least one score"));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= z);
    Ok(p)
}

#[inline]
fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^s)` without overflow.
#[inline]
fn softplus(s: f64) -> f64 {
    if s > 0.0 {
        s + (-s).exp().ln_1p()
    } else {
        s.exp().ln_1p()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub seed: u64,
    /// 0 selects the full linear model.
    pub rank: usize,
    /// Low rank only: output rows owned by each leaf instead of shared.
    pub node_output_weights: bool,
    pub l2: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            learning_rate: 0.1,
            lr_decay: 1e-5,
            seed: 0,
            rank: 0,
            node_output_weights: false,
            l2: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be >= 1"));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid("learning rate must be finite and >= 0"));
        }
        if !(self.lr_decay >= 0.0) || !(self.l2 >= 0.0) {
            return Err(Error::invalid("lr_decay and l2 must be >= 0"));
        }
        if self.node_output_weights && self.rank == 0 {
            return Err(Error::invalid("node output weights need rank >= 1"));
        }
        Ok(())
    }

    /// `η_t = lr / (1 + decay·t)`.
    pub fn step_size(&self, t: u64) -> f64 {
        self.learning_rate / (1.0 + self.lr_decay * t as f64)
    }
}

/// Names one scalar parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamId {
    /// Full-rank weight of class slot `slot` on feature `feature`.
    Weight { slot: u32, feature: u32 },
    GlobalBias { slot: u32 },
    /// Bias of the `pos`-th candidate of `leaf`.
    NodeBias { leaf: u32, pos: u32 },
    /// Shared input projection `U[feature, t]`.
    Projection { feature: u32, t: u32 },
    /// Shared output row entry `V[slot, t]`.
    SharedOutput { slot: u32, t: u32 },
    /// Leaf-owned output row entry for the `pos`-th candidate.
    NodeOutput { leaf: u32, pos: u32, t: u32 },
}

#[derive(Debug, Clone, PartialEq)]
enum Weights {
    Full(Vec<f64>),
    LowRank { u: Vec<f64>, v: OutputLayer },
}

#[derive(Debug, Clone, PartialEq)]
enum OutputLayer {
    Shared(Vec<f64>),
    /// Indexed by node id; `|C| × r` per leaf.
    PerNode(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    mode: TaskMode,
    d: usize,
    c: usize,
    rank: usize,
    tree_fingerprint: u64,
    /// Classes with parameters, increasing.
    classes: Vec<u32>,
    /// class id → slot, `NO_SLOT` if absent.
    slot_of: Vec<u32>,
    /// Per node id: candidate classes (empty for internal nodes).
    leaf_classes: Vec<Vec<u32>>,
    global_bias: Vec<f64>,
    node_bias: Vec<Vec<f64>>,
    weights: Weights,
}

/// Candidates of one leaf ranked by score, best first.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub leaf: u32,
    /// `(class, score)`; probabilities in multiclass, logistic outputs in multilabel.
    pub ranked: Vec<(u32, f64)>,
}

impl Prediction {
    pub fn top(&self) -> Option<u32> {
        self.ranked.first().map(|r| r.0)
    }
}

/// Loss of one example at one leaf and its gradient as `(parameter, ∂loss)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGradient {
    pub loss: f64,
    pub grad: Vec<(ParamId, f64)>,
}

impl ClassifierModel {
    /// Fresh model for `tree`: weights drawn from a seeded Gaussian, biases zero.
    pub fn init(tree: &LabelTree, cfg: &TrainConfig) -> Result<ClassifierModel> {
        cfg.validate()?;
        let d = tree.n_features();
        let c = tree.n_classes();
        let mut leaf_classes = vec![Vec::new(); tree.nodes().len()];
        let mut used = vec![false; c];
        for node in tree.nodes() {
            if let NodeBody::Leaf { candidates } = &node.body {
                leaf_classes[node.id as usize] = candidates.iter().map(|c| c.class).collect();
                for cand in candidates {
                    used[cand.class as usize] = true;
                }
            }
        }
        let classes: Vec<u32> = (0..c as u32).filter(|&j| used[j as usize]).collect();
        let mut slot_of = vec![NO_SLOT; c];
        for (s, &j) in classes.iter().enumerate() {
            slot_of[j as usize] = s as u32;
        }
        let n_slots = classes.len();
        let node_bias = leaf_classes.iter().map(|l| vec![0.0; l.len()]).collect();

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut gauss = |n: usize, scale: f64| -> Vec<f64> {
            (0..n)
                .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                .collect::<Vec<f64>>()
        };
        let in_scale = 1.0 / (d.max(1) as f64).sqrt();
        let weights = if cfg.rank == 0 {
            Weights::Full(gauss(n_slots * d, in_scale))
        } else {
            let r = cfg.rank;
            let u = gauss(d * r, in_scale);
            let out_scale = 1.0 / (r as f64).sqrt();
            let v = if cfg.node_output_weights {
                OutputLayer::PerNode(
                    leaf_classes
                        .iter()
                        .map(|l| gauss(l.len() * r, out_scale))
                        .collect(),
                )
            } else {
                OutputLayer::Shared(gauss(n_slots * r, out_scale))
            };
            Weights::LowRank { u, v }
        };
        Ok(ClassifierModel {
            mode: tree.mode(),
            d,
            c,
            rank: cfg.rank,
            tree_fingerprint: fnv1a64(&tree.to_bytes()),
            classes,
            slot_of,
            leaf_classes,
            global_bias: vec![0.0; n_slots],
            node_bias,
            weights,
        })
    }

    pub fn mode(&self) -> TaskMode {
        self.mode
    }

    pub fn n_features(&self) -> usize {
        self.d
    }

    pub fn n_classes(&self) -> usize {
        self.c
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    /// Classes that carry parameters.
    pub fn active_classes(&self) -> &[u32] {
        &self.classes
    }

    pub fn leaf_classes(&self, leaf: u32) -> &[u32] {
        &self.leaf_classes[leaf as usize]
    }

    /// Fails unless the model was trained on exactly this tree.
    pub fn check_tree(&self, tree: &LabelTree) -> Result<()> {
        if fnv1a64(&tree.to_bytes()) != self.tree_fingerprint {
            return Err(Error::invalid("model was trained on a different tree"));
        }
        Ok(())
    }

    pub fn param(&self, id: ParamId) -> f64 {
        match id {
            ParamId::GlobalBias { slot } => self.global_bias[slot as usize],
            ParamId::NodeBias { leaf, pos } => self.node_bias[leaf as usize][pos as usize],
            _ => {
                let (buf, at) = self.weight_location(id);
                buf[at]
            }
        }
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut f64 {
        match id {
            ParamId::GlobalBias { slot } => &mut self.global_bias[slot as usize],
            ParamId::NodeBias { leaf, pos } => &mut self.node_bias[leaf as usize][pos as usize],
            _ => {
                let (d, r) = (self.d, self.rank);
                match (&mut self.weights, id) {
                    (Weights::Full(w), ParamId::Weight { slot, feature }) => {
                        &mut w[slot as usize * d + feature as usize]
                    }
                    (Weights::LowRank { u, .. }, ParamId::Projection { feature, t }) => {
                        &mut u[feature as usize * r + t as usize]
                    }
                    (
                        Weights::LowRank {
                            v: OutputLayer::Shared(v),
                            ..
                        },
                        ParamId::SharedOutput { slot, t },
                    ) => &mut v[slot as usize * r + t as usize],
                    (
                        Weights::LowRank {
                            v: OutputLayer::PerNode(v),
                            ..
                        },
                        ParamId::NodeOutput { leaf, pos, t },
                    ) => &mut v[leaf as usize][pos as usize * r + t as usize],
                    _ => panic!("parameter {id:?} does not exist in this model"),
                }
            }
        }
    }

    fn weight_location(&self, id: ParamId) -> (&[f64], usize) {
        let (d, r) = (self.d, self.rank);
        match (&self.weights, id) {
            (Weights::Full(w), ParamId::Weight { slot, feature }) => {
                (w, slot as usize * d + feature as usize)
            }
            (Weights::LowRank { u, .. }, ParamId::Projection { feature, t }) => {
                (u, feature as usize * r + t as usize)
            }
            (
                Weights::LowRank {
                    v: OutputLayer::Shared(v),
                    ..
                },
                ParamId::SharedOutput { slot, t },
            ) => (v, slot as usize * r + t as usize),
            (
                Weights::LowRank {
                    v: OutputLayer::PerNode(v),
                    ..
                },
                ParamId::NodeOutput { leaf, pos, t },
            ) => (&v[leaf as usize], pos as usize * r + t as usize),
            _ => panic!("parameter {id:?} does not exist in this model"),
        }
    }

    /// `Uᵀx`, low rank only.
    fn project(&self, x: SparseRow<'_>) -> Vec<f64> {
        let Weights::LowRank { u, .. } = &self.weights else {
            return Vec::new();
        };
        let r = self.rank;
        let mut h = vec![0.0; r];
        for (j, v) in x.iter() {
            if j < self.d {
                for (ht, ut) in h.iter_mut().zip(&u[j * r..(j + 1) * r]) {
                    *ht += v * ut;
                }
            }
        }
        h
    }

    fn output_row(&self, leaf: u32, pos: usize, slot: usize) -> &[f64] {
        let r = self.rank;
        match &self.weights {
            Weights::LowRank {
                v: OutputLayer::Shared(v),
                ..
            } => &v[slot * r..(slot + 1) * r],
            Weights::LowRank {
                v: OutputLayer::PerNode(v),
                ..
            } => &v[leaf as usize][pos * r..(pos + 1) * r],
            Weights::Full(_) => &[],
        }
    }

    /// Scores of every candidate of `leaf`, in candidate order.
    pub fn scores(&self, x: SparseRow<'_>, leaf: u32) -> Vec<f64> {
        let h = self.project(x);
        self.scores_with(x, leaf, &h)
    }

    fn scores_with(&self, x: SparseRow<'_>, leaf: u32, h: &[f64]) -> Vec<f64> {
        let classes = &self.leaf_classes[leaf as usize];
        let nb = &self.node_bias[leaf as usize];
        classes
            .iter()
            .enumerate()
            .map(|(pos, &j)| {
                let slot = self.slot_of[j as usize] as usize;
                let lin = match &self.weights {
                    Weights::Full(w) => x.dot(&w[slot * self.d..(slot + 1) * self.d]),
                    Weights::LowRank { .. } => crate::sparse::dot(self.output_row(leaf, pos, slot), h),
                };
                lin + self.global_bias[slot] + nb[pos]
            })
            .collect()
    }

    /// Loss and gradient for one example at `leaf`. `None` when nothing can be
    /// learned there: an empty candidate list, or a multiclass label outside it.
    pub fn loss_gradient(
        &self,
        x: SparseRow<'_>,
        labels: &[u32],
        leaf: u32,
        weight: f64,
        l2: f64,
    ) -> Option<LossGradient> {
        let classes = &self.leaf_classes[leaf as usize];
        if classes.is_empty() {
            return None;
        }
        let h = self.project(x);
        let s = self.scores_with(x, leaf, &h);
        // dloss/ds per candidate
        let (mut loss, ds): (f64, Vec<f64>) = match self.mode {
            TaskMode::Multiclass => {
                let target = classes.iter().position(|&j| Some(&j) == labels.first())?;
                let p = restricted_softmax(&s).ok()?;
                let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + s.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                let loss = weight * (lse - s[target]);
                let g = p
                    .iter()
                    .enumerate()
                    .map(|(pos, &pj)| weight * (pj - if pos == target { 1.0 } else { 0.0 }))
                    .collect();
                (loss, g)
            }
            TaskMode::Multilabel => {
                let mut loss = 0.0;
                let g = classes
                    .iter()
                    .zip(&s)
                    .map(|(j, &sj)| {
                        let t = if labels.contains(j) { 1.0 } else { 0.0 };
                        loss += softplus(sj) - t * sj;
                        weight * (sigmoid(sj) - t)
                    })
                    .collect();
                (weight * loss, g)
            }
        };

        let mut grad = Vec::new();
        let features = || x.iter().filter(|(f, _)| *f < self.d);
        match &self.weights {
            Weights::Full(w) => {
                for (pos, &j) in classes.iter().enumerate() {
                    let slot = self.slot_of[j as usize];
                    let row = &w[slot as usize * self.d..];
                    for (f, xf) in features() {
                        let wf = row[f];
                        loss += 0.5 * l2 * wf * wf;
                        grad.push((ParamId::Weight { slot, feature: f as u32 }, ds[pos] * xf + l2 * wf));
                    }
                }
            }
            Weights::LowRank { u, .. } => {
                let r = self.rank;
                let mut dh = vec![0.0; r];
                for (pos, &j) in classes.iter().enumerate() {
                    let slot = self.slot_of[j as usize];
                    let v = self.output_row(leaf, pos, slot as usize);
                    for t in 0..r {
                        dh[t] += ds[pos] * v[t];
                        loss += 0.5 * l2 * v[t] * v[t];
                        let id = if matches!(self.weights, Weights::LowRank { v: OutputLayer::Shared(_), .. }) {
                            ParamId::SharedOutput { slot, t: t as u32 }
                        } else {
                            ParamId::NodeOutput { leaf, pos: pos as u32, t: t as u32 }
                        };
                        grad.push((id, ds[pos] * h[t] + l2 * v[t]));
                    }
                }
                for (f, xf) in features() {
                    for t in 0..r {
                        let uf = u[f * r + t];
                        loss += 0.5 * l2 * uf * uf;
                        grad.push((ParamId::Projection { feature: f as u32, t: t as u32 }, xf * dh[t] + l2 * uf));
                    }
                }
            }
        }
        for (pos, &j) in classes.iter().enumerate() {
            let slot = self.slot_of[j as usize];
            grad.push((ParamId::GlobalBias { slot }, ds[pos]));
            grad.push((ParamId::NodeBias { leaf, pos: pos as u32 }, ds[pos]));
        }
        Some(LossGradient { loss, grad })
    }

    /// `θ ← θ − η·g` for every listed parameter.
    pub fn apply(&mut self, grad: &[(ParamId, f64)], eta: f64) {
        for &(id, g) in grad {
            *self.param_mut(id) -= eta * g;
        }
    }

    /// Routes deterministically and ranks the leaf's candidates by score,
    /// best first, ties to the smaller class id.
    pub fn predict(&self, tree: &LabelTree, x: SparseRow<'_>) -> Prediction {
        let (leaf, _) = tree.route_deterministic(x);
        let classes = &self.leaf_classes[leaf as usize];
        if classes.is_empty() {
            return Prediction {
                leaf,
                ranked: Vec::new(),
            };
        }
        let s = self.scores(x, leaf);
        let scores = match self.mode {
            TaskMode::Multiclass => restricted_softmax(&s).expect("nonempty"),
            TaskMode::Multilabel => s.iter().map(|&v| sigmoid(v)).collect(),
        };
        // rank on raw scores so saturated probabilities still order correctly
        let mut order: Vec<usize> = (0..classes.len()).collect();
        order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(classes[a].cmp(&classes[b])));
        Prediction {
            leaf,
            ranked: order.into_iter().map(|i| (classes[i], scores[i])).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(MAGIC, MODEL_VERSION);
        w.u8(match self.mode {
            TaskMode::Multiclass => 0,
            TaskMode::Multilabel => 1,
        });
        let per_node = matches!(
            self.weights,
            Weights::LowRank {
                v: OutputLayer::PerNode(_),
                ..
            }
        );
        w.u8(per_node as u8);
        for v in [self.d, self.c, self.rank, self.leaf_classes.len(), self.classes.len()] {
            w.u64(v as u64);
        }
        w.u64(self.tree_fingerprint);
        for &j in &self.classes {
            w.u32(j);
        }
        w.f64s(&self.global_bias);
        match &self.weights {
            Weights::Full(ws) => {
                for row in ws.chunks(self.d.max(1)).take(self.classes.len()) {
                    let nnz = row.iter().filter(|v| **v != 0.0).count();
                    if nnz * 12 < row.len() * 8 {
                        w.u8(1);
                        w.u64(nnz as u64);
                        for (f, &v) in row.iter().enumerate().filter(|(_, v)| **v != 0.0) {
                            w.u32(f as u32);
                            w.f64(v);
                        }
                    } else {
                        w.u8(0);
                        w.f64s(row);
                    }
                }
            }
            Weights::LowRank { u, v } => {
                w.f64s(u);
                if let OutputLayer::Shared(v) = v {
                    w.f64s(v);
                }
            }
        }
        let count: usize = self.leaf_classes.iter().map(Vec::len).sum();
        w.u64(count as u64);
        for (leaf, classes) in self.leaf_classes.iter().enumerate() {
            for (pos, &j) in classes.iter().enumerate() {
                w.u32(leaf as u32);
                w.u32(j);
                w.f64(self.node_bias[leaf][pos]);
                if let Weights::LowRank {
                    v: OutputLayer::PerNode(v),
                    ..
                } = &self.weights
                {
                    w.f64s(&v[leaf][pos * self.rank..(pos + 1) * self.rank]);
                }
            }
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<ClassifierModel> {
        let mut r = Reader::open(bytes, MAGIC, MODEL_VERSION, "model")?;
        let mode = match r.u8()? {
            0 => TaskMode::Multiclass,
            1 => TaskMode::Multilabel,
            m => return r.fail(format!("unknown mode {m}")),
        };
        let flags = r.u8()?;
        if flags > 1 {
            return r.fail(format!("unknown flags {flags:#x}"));
        }
        let per_node = flags & 1 == 1;
        let limit = r.remaining();
        let d = r.len(u32::MAX as usize, "feature count")?;
        let c = r.len(u32::MAX as usize, "class count")?;
        let rank = r.len(limit, "rank")?;
        let n_nodes = r.len(limit, "node count")?;
        let n_slots = r.len(c.min(limit / 4), "slot count")?;
        if per_node && rank == 0 {
            return r.fail("node output weights without a rank");
        }
        let tree_fingerprint = r.u64()?;
        let mut classes = Vec::with_capacity(n_slots);
        let mut slot_of = vec![NO_SLOT; c];
        for s in 0..n_slots {
            let j = r.u32()?;
            if j as usize >= c || classes.last().is_some_and(|&l| j <= l) {
                return r.fail(format!("bad slot class {j}"));
            }
            slot_of[j as usize] = s as u32;
            classes.push(j);
        }
        let global_bias = r.f64s(n_slots)?;
        let mut weights = if rank == 0 {
            let mut ws = vec![0.0; n_slots * d];
            for row in ws.chunks_mut(d.max(1)).take(n_slots) {
                match r.u8()? {
                    0 => row.copy_from_slice(&r.f64s(d)?),
                    1 => {
                        let nnz = r.len(d, "weight nnz")?;
                        let mut last = None;
                        for _ in 0..nnz {
                            let f = r.u32()? as usize;
                            if f >= d || last.is_some_and(|l| f <= l) {
                                return r.fail(format!("bad weight index {f}"));
                            }
                            last = Some(f);
                            row[f] = r.finite()?;
                        }
                    }
                    s => return r.fail(format!("bad weight storage flag {s}")),
                }
            }
            Weights::Full(ws)
        } else {
            if d.checked_mul(rank).is_none_or(|n| n > limit / 8) {
                return r.fail("projection too large");
            }
            let u = r.f64s(d * rank)?;
            let v = if per_node {
                OutputLayer::PerNode(vec![Vec::new(); n_nodes])
            } else {
                OutputLayer::Shared(r.f64s(n_slots * rank)?)
            };
            Weights::LowRank { u, v }
        };
        let count = r.len(limit / 16, "node bias count")?;
        let mut leaf_classes = vec![Vec::new(); n_nodes];
        let mut node_bias = vec![Vec::new(); n_nodes];
        let mut last_leaf = 0usize;
        for _ in 0..count {
            let leaf = r.u32()? as usize;
            let j = r.u32()?;
            if leaf >= n_nodes || leaf < last_leaf {
                return r.fail(format!("bad node bias leaf {leaf}"));
            }
            if j as usize >= c || slot_of[j as usize] == NO_SLOT || leaf_classes[leaf].contains(&j) {
                return r.fail(format!("bad node bias class {j}"));
            }
            last_leaf = leaf;
            leaf_classes[leaf].push(j);
            node_bias[leaf].push(r.finite()?);
            if let Weights::LowRank {
                v: OutputLayer::PerNode(v),
                ..
            } = &mut weights
            {
                v[leaf].extend(r.f64s(rank)?);
            }
        }
        r.end()?;
        let all_finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        let finite = all_finite(&global_bias)
            && match &weights {
                Weights::Full(w) => all_finite(w),
                Weights::LowRank { u, v } => {
                    all_finite(u)
                        && match v {
                            OutputLayer::Shared(v) => all_finite(v),
                            OutputLayer::PerNode(v) => v.iter().all(|l| all_finite(l)),
                        }
                }
            };
        if !finite {
            return Err(Error::Format {
                offset: 0,
                msg: "non-finite parameter".into(),
            });
        }
        Ok(ClassifierModel {
            mode,
            d,
            c,
            rank,
            tree_fingerprint,
            classes,
            slot_of,
            leaf_classes,
            global_bias,
            node_bias,
            weights,
        })
    }
}

/// Visit order of one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 + epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Seeded stream used to sample training paths.
pub fn routing_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

/// One example visit during training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    pub epoch: usize,
    /// Visit counter used by the step-size schedule.
    pub t: u64,
    pub example: usize,
    pub leaf: u32,
    /// `None` when the visit was skipped.
    pub loss: Option<f64>,
    pub eta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub visits: u64,
    pub updates: u64,
    pub skipped: u64,
    pub skip_rate: f64,
    /// Mean loss of the updates in each epoch.
    pub epoch_loss: Vec<f64>,
}

pub fn train(ds: &Dataset, tree: &LabelTree, cfg: &TrainConfig) -> Result<(ClassifierModel, TrainReport)> {
    train_with_observer(ds, tree, cfg, |_| {})
}

/// SGD with one sampled path per example per epoch. Runs single-threaded, so
/// a fixed seed gives a fixed model.
pub fn train_with_observer(
    ds: &Dataset,
    tree: &LabelTree,
    cfg: &TrainConfig,
    mut observe: impl FnMut(&Step),
) -> Result<(ClassifierModel, TrainReport)> {
    check_compatible(ds, tree)?;
    let mut model = ClassifierModel::init(tree, cfg)?;
    let mut rng = routing_rng(cfg.seed);
    let mut t = 0u64;
    let mut updates = 0u64;
    let mut skipped = 0u64;
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut sum = 0.0;
        let mut n = 0usize;
        for i in epoch_order(ds.n_examples(), cfg.seed, epoch) {
            let x = ds.x(i);
            let (leaf, _) = tree.route_sampled(x, &mut rng);
            let eta = cfg.step_size(t);
            let lg = model.loss_gradient(x, ds.y(i), leaf, ds.weights()[i], cfg.l2);
            observe(&Step {
                epoch,
                t,
                example: i,
                leaf,
                loss: lg.as_ref().map(|l| l.loss),
                eta,
            });
            match lg {
                Some(lg) => {
                    model.apply(&lg.grad, eta);
                    sum += lg.loss;
                    n += 1;
                    updates += 1;
                }
                None => skipped += 1,
            }
            t += 1;
        }
        epoch_loss.push(if n > 0 { sum / n as f64 } else { 0.0 });
    }
    Ok((
        model,
        TrainReport {
            config: *cfg,
            visits: t,
            updates,
            skipped,
            skip_rate: if t > 0 { skipped as f64 / t as f64 } else { 0.0 },
            epoch_loss,
        },
    ))
}

pub(crate) fn check_compatible(ds: &Dataset, tree: &LabelTree) -> Result<()> {
    if ds.mode() != tree.mode() {
        return Err(Error::invalid(format!(
            "dataset is {} but the tree was built for {}",
            ds.mode(),
            tree.mode()
        )));
    }
    if ds.n_features() > tree.n_features() {
        return Err(Error::DimensionMismatch {
            expected: tree.n_features(),
            actual: ds.n_features(),
            context: "dataset features vs tree",
        });
    }
    if ds.n_classes() > tree.n_classes() {
        return Err(Error::DimensionMismatch {
            expected: tree.n_classes(),
            actual: ds.n_classes(),
            context: "dataset classes vs tree",
        });
    }
    Ok(())
}
