//! Accuracy, precision@k, split purity and balance, and inference throughput.

use std::collections::BTreeMap;
use std::fmt;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::classifier::ClassifierModel;
use crate::data::{Dataset, TaskMode};
use crate::exec;
use crate::sparse::{balanced_threshold, SparseRow};
use crate::spectral::RouterSolution;
use crate::tree::{estimate_recall, LabelTree, RecallRouting};
use crate::{Error, Result};

/// Purity and balance of one split under `w·x > b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SplitStats {
    /// Frequency-weighted mean over classes of the larger side fraction.
    pub purity: f64,
    /// Unweighted mean over classes of the same quantity.
    pub macro_purity: f64,
    /// Larger of the left and right mass fractions.
    pub balance: f64,
    pub left_mass: f64,
    pub right_mass: f64,
    /// Everything went one way.
    pub degenerate: bool,
}

/// Split statistics over `(x, class, weight)` triples.
pub fn weighted_split_stats<'a>(
    router: &RouterSolution,
    rows: impl IntoIterator<Item = (SparseRow<'a>, u32, f64)>,
) -> SplitStats {
    // class → (left, right)
    let mut per_class: BTreeMap<u32, (f64, f64)> = BTreeMap::new();
    for (x, class, q) in rows {
        let e = per_class.entry(class).or_default();
        if router.goes_right(x) {
            e.1 += q;
        } else {
            e.0 += q;
        }
    }
    let (mut left, mut right) = (0.0, 0.0);
    let mut weighted = 0.0;
    let mut macro_sum = 0.0;
    let mut n_classes = 0usize;
    for &(l, r) in per_class.values() {
        left += l;
        right += r;
        let n_c = l + r;
        if n_c > 0.0 {
            weighted += l.max(r);
            macro_sum += l.max(r) / n_c;
            n_classes += 1;
        }
    }
    let total = left + right;
    if total <= 0.0 {
        return SplitStats {
            purity: 1.0,
            macro_purity: 1.0,
            balance: 1.0,
            left_mass: 0.0,
            right_mass: 0.0,
            degenerate: true,
        };
    }
    SplitStats {
        purity: weighted / total,
        macro_purity: macro_sum / n_classes as f64,
        balance: left.max(right) / total,
        left_mass: left,
        right_mass: right,
        degenerate: left == 0.0 || right == 0.0,
    }
}

/// Purity and balance of a router on a multiclass dataset, using its example weights.
pub fn purity_balance(r: &RouterSolution, ds: &Dataset) -> Result<SplitStats> {
    if ds.mode() != TaskMode::Multiclass {
        return Err(Error::invalid("purity is defined for multiclass data only"));
    }
    let w = ds.weights();
    Ok(weighted_split_stats(
        r,
        (0..ds.n_examples())
            .filter(|&i| !ds.y(i).is_empty())
            .map(|i| (ds.x(i), ds.y(i)[0], w[i])),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RandomSplitBaseline {
    pub n_splits: usize,
    pub max_purity: f64,
    pub mean_purity: f64,
    pub max_macro_purity: f64,
}

/// A uniformly random unit direction with median bias on `ds`.
pub fn random_router(ds: &Dataset, rng: &mut ChaCha8Rng) -> Result<RouterSolution> {
    let d = ds.n_features();
    let mut w: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut *rng)).collect();
    let norm = crate::sparse::norm(&w);
    if !(norm > 0.0) {
        return Err(Error::Degenerate("zero random direction".into()));
    }
    w.iter_mut().for_each(|v| *v /= norm);
    let z: Vec<f64> = (0..ds.n_examples()).map(|i| ds.x(i).dot(&w)).collect();
    let b = balanced_threshold(&z, ds.weights())?;
    Ok(RouterSolution {
        w,
        b,
        lambda: 0.0,
        m: ds.weights().iter().sum(),
        iterations: 0,
        converged: true,
    })
}

/// Purity of `n_splits` random unit-direction splits, each with median bias.
pub fn random_split_baseline(ds: &Dataset, n_splits: usize, seed: u64) -> Result<RandomSplitBaseline> {
    if n_splits == 0 {
        return Err(Error::invalid("need at least one random split"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let routers = (0..n_splits)
        .map(|_| random_router(ds, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let stats = exec::map_slice(&routers, |r| purity_balance(r, ds))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(RandomSplitBaseline {
        n_splits,
        max_purity: stats.iter().map(|s| s.purity).fold(f64::MIN, f64::max),
        mean_purity: stats.iter().map(|s| s.purity).sum::<f64>() / n_splits as f64,
        max_macro_purity: stats.iter().map(|s| s.macro_purity).fold(f64::MIN, f64::max),
    })
}

/// `|top-k ∩ truth| / k`, counting only the first `k` ranked classes.
pub fn precision_at(ranked: &[u32], truth: &[u32], k: usize) -> f64 {
    let hits = ranked.iter().take(k).filter(|c| truth.contains(c)).count();
    hits as f64 / k as f64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub mode: TaskMode,
    pub n_examples: usize,
    /// Top-1 accuracy, multiclass only.
    pub accuracy: Option<f64>,
    pub precision_at: BTreeMap<usize, f64>,
    pub tree_recall_test: f64,
    pub tree_recall_train: Option<f64>,
    pub skip_rate: Option<f64>,
    pub examples_per_second: f64,
    pub avg_candidates: f64,
    pub tree_depth: usize,
    pub tree_leaves: usize,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "mode={}", self.mode)?;
        writeln!(f, "n_examples={}", self.n_examples)?;
        if let Some(a) = self.accuracy {
            writeln!(f, "accuracy={a:.6}")?;
        }
        for (k, p) in &self.precision_at {
            writeln!(f, "precision_at_{k}={p:.6}")?;
        }
        writeln!(f, "tree_recall_test={:.6}", self.tree_recall_test)?;
        if let Some(r) = self.tree_recall_train {
            writeln!(f, "tree_recall_train={r:.6}")?;
        }
        if let Some(s) = self.skip_rate {
            writeln!(f, "skip_rate={s:.6}")?;
        }
        writeln!(f, "examples_per_second={:.1}", self.examples_per_second)?;
        writeln!(f, "avg_candidates={:.3}", self.avg_candidates)?;
        writeln!(f, "tree_depth={}", self.tree_depth)?;
        write!(f, "tree_leaves={}", self.tree_leaves)
    }
}

/// Scores `test` with deterministic routing. Prediction is timed separately
/// from everything else.
pub fn evaluate(model: &ClassifierModel, tree: &LabelTree, test: &Dataset) -> Result<EvalReport> {
    model.check_tree(tree)?;
    crate::classifier::check_compatible(test, tree)?;
    let n = test.n_examples();
    let start = Instant::now();
    let preds = exec::map_range(n, |i| model.predict(tree, test.x(i)));
    let elapsed = start.elapsed().as_secs_f64();

    let labelled: Vec<usize> = (0..n).filter(|&i| !test.y(i).is_empty()).collect();
    let denom = labelled.len().max(1) as f64;
    let mut precision = BTreeMap::new();
    for k in [1, 3, 5] {
        let ranked = |i: usize| preds[i].ranked.iter().map(|r| r.0).collect::<Vec<u32>>();
        let p: f64 = labelled.iter().map(|&i| precision_at(&ranked(i), test.y(i), k)).sum();
        precision.insert(k, p / denom);
    }
    let accuracy = (test.mode() == TaskMode::Multiclass).then(|| {
        labelled
            .iter()
            .filter(|&&i| preds[i].top() == Some(test.y(i)[0]))
            .count() as f64
            / denom
    });
    let avg_candidates = if n > 0 {
        preds.iter().map(|p| p.ranked.len()).sum::<usize>() as f64 / n as f64
    } else {
        0.0
    };
    Ok(EvalReport {
        mode: test.mode(),
        n_examples: n,
        accuracy,
        precision_at: precision,
        tree_recall_test: estimate_recall(tree, test, RecallRouting::Deterministic),
        tree_recall_train: None,
        skip_rate: None,
        examples_per_second: n as f64 / elapsed.max(1e-9),
        avg_candidates,
        tree_depth: tree.max_depth(),
        tree_leaves: tree.n_leaves(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InferenceBenchmark {
    pub repetitions: usize,
    pub examples_per_second: f64,
    /// Median wall time of one full pass.
    pub seconds_per_pass: f64,
    pub avg_depth: f64,
    pub avg_candidates: f64,
}

/// Median over `repetitions` timed single-threaded passes after one untimed warm-up.
pub fn benchmark_inference(
    model: &ClassifierModel,
    tree: &LabelTree,
    ds: &Dataset,
    repetitions: usize,
) -> Result<InferenceBenchmark> {
    if repetitions == 0 {
        return Err(Error::invalid("repetitions must be >= 1"));
    }
    if ds.n_examples() == 0 {
        return Err(Error::invalid("cannot benchmark on an empty dataset"));
    }
    let pass = || {
        let mut sink = 0usize;
        for i in 0..ds.n_examples() {
            let p = model.predict(tree, ds.x(i));
            sink = sink.wrapping_add(p.top().unwrap_or(0) as usize);
        }
        std::hint::black_box(sink);
    };
    pass();
    let mut times: Vec<f64> = (0..repetitions)
        .map(|_| {
            let t = Instant::now();
            pass();
            t.elapsed().as_secs_f64()
        })
        .collect();
    times.sort_by(f64::total_cmp);
    let median = times[(times.len() - 1) / 2];

    let mut depth = 0usize;
    let mut cands = 0usize;
    for i in 0..ds.n_examples() {
        let (leaf, c) = tree.route_deterministic(ds.x(i));
        depth += tree.node(leaf).depth as usize;
        cands += c.len();
    }
    let n = ds.n_examples() as f64;
    Ok(InferenceBenchmark {
        repetitions,
        examples_per_second: n / median.max(1e-12),
        seconds_per_pass: median,
        avg_depth: depth as f64 / n,
        avg_candidates: cands as f64 / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::{train, TrainConfig};
    use crate::data::{make_synthetic, SynthConfig};
    use crate::sparse::CsrMatrix;
    use crate::tree::{build_tree, TreeConfig};

    fn line(points: &[f64], classes: &[u32]) -> Dataset {
        let x = CsrMatrix::from_rows(1, points.iter().map(|&p| vec![(0u32, p)]).collect::<Vec<_>>()).unwrap();
        let y: Vec<Vec<u32>> = classes.iter().map(|&c| vec![c]).collect();
        let c = *classes.iter().max().unwrap() as usize + 1;
        Dataset::from_label_lists(x, &y, c, TaskMode::Multiclass).unwrap()
    }

    fn router(w: f64, b: f64) -> RouterSolution {
        RouterSolution {
            w: vec![w],
            b,
            lambda: 1.0,
            m: 1.0,
            iterations: 1,
            converged: true,
        }
    }

    #[test]
    fn separated_split_is_pure() {
        let ds = line(&[-2.0, -1.0, -1.5, 1.0, 2.0], &[0, 0, 0, 1, 1]);
        let s = purity_balance(&router(1.0, 0.0), &ds).unwrap();
        assert_eq!(s.purity, 1.0);
        assert_eq!(s.macro_purity, 1.0);
        assert_eq!(s.balance, 0.6);
        assert!(!s.degenerate);
    }

    #[test]
    fn one_sided_split_is_degenerate() {
        let ds = line(&[-2.0, -1.0, 1.0, 2.0], &[0, 1, 0, 1]);
        let s = purity_balance(&router(1.0, 10.0), &ds).unwrap();
        assert_eq!((s.purity, s.balance, s.degenerate), (1.0, 1.0, true));
    }

    #[test]
    fn purity_weights_classes_by_frequency() {
        // class 0: 3 left 1 right; class 1: 1 left 1 right
        let ds = line(&[-1.0, -1.0, -1.0, 1.0, -1.0, 1.0], &[0, 0, 0, 0, 1, 1]);
        let s = purity_balance(&router(1.0, 0.0), &ds).unwrap();
        assert!((s.purity - (3.0 + 1.0) / 6.0).abs() < 1e-15);
        assert!((s.macro_purity - (0.75 + 0.5) / 2.0).abs() < 1e-15);

        let relabeled = line(&[-1.0, -1.0, -1.0, 1.0, -1.0, 1.0], &[5, 5, 5, 5, 2, 2]);
        let t = purity_balance(&router(1.0, 0.0), &relabeled).unwrap();
        assert!((t.purity - s.purity).abs() < 1e-15);
        assert!(purity_balance(&router(1.0, 0.0), &ds.clone().with_mode(TaskMode::Multilabel).unwrap()).is_err());
    }

    #[test]
    fn precision_formula() {
        assert_eq!(precision_at(&[3, 9, 1, 4, 7], &[1, 7], 5), 2.0 / 5.0);
        assert_eq!(precision_at(&[1], &[1], 3), 1.0 / 3.0);
        assert_eq!(precision_at(&[2, 1], &[1], 1), 0.0);
    }

    #[test]
    fn random_baseline_is_seeded() {
        let (ds, _) = make_synthetic(&SynthConfig {
            n_classes: 8,
            dim: 5,
            examples_per_class: 20,
            cluster_separation: 1.0,
            noise_sigma: 0.2,
            seed: 1,
        })
        .unwrap();
        let a = random_split_baseline(&ds, 50, 3).unwrap();
        assert_eq!(a, random_split_baseline(&ds, 50, 3).unwrap());
        assert!(a.max_purity >= a.mean_purity && a.max_purity <= 1.0);
    }

    #[test]
    fn accuracy_is_bounded_by_tree_recall() {
        let (train_ds, test_ds) = make_synthetic(&SynthConfig {
            n_classes: 20,
            dim: 6,
            examples_per_class: 40,
            cluster_separation: 1.0,
            noise_sigma: 0.3,
            seed: 2,
        })
        .unwrap();
        let cfg = TreeConfig { max_depth: 3, k: 3, ..Default::default() };
        let (tree, _) = build_tree(&train_ds, &cfg).unwrap();
        let (model, _) = train(&train_ds, &tree, &TrainConfig::default()).unwrap();
        let report = evaluate(&model, &tree, &test_ds).unwrap();
        let acc = report.accuracy.unwrap();
        assert!(acc <= report.tree_recall_test + 1e-12);
        // multiclass read as multilabel: P@1 is accuracy
        assert_eq!(report.precision_at[&1], acc);
        assert!(report.examples_per_second > 0.0);
        let text = report.to_string();
        assert!(text.lines().all(|l| l.contains('=')));

        let bench = benchmark_inference(&model, &tree, &test_ds, 3).unwrap();
        assert!(bench.examples_per_second > 0.0 && bench.avg_depth <= 3.0);
        assert!(benchmark_inference(&model, &tree, &test_ds, 0).is_err());
    }

    #[test]
    fn perfect_predictions_score_one() {
        let ds = line(&[-2.0, -1.0, 1.0, 2.0], &[0, 0, 1, 1]);
        let cfg = TreeConfig { max_depth: 1, k: 1, ..Default::default() };
        let (tree, _) = build_tree(&ds, &cfg).unwrap();
        let (model, _) = train(&ds, &tree, &TrainConfig::default()).unwrap();
        let r = evaluate(&model, &tree, &ds).unwrap();
        assert_eq!((r.accuracy, r.precision_at[&1], r.tree_recall_test), (Some(1.0), 1.0, 1.0));
    }
}
