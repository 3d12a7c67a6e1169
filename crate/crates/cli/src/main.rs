use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use spectree::classifier::{self, ClassifierModel, TrainConfig};
use spectree::data::{self, Dataset, ParseOptions, SynthConfig, TaskMode};
use spectree::metrics;
use spectree::spectral::{self, SolverParams};
use spectree::tree::{self, LabelTree, RecallRouting, RoutingScheme, TreeConfig};

/// Spectral label trees for extreme multiclass and multilabel classification.
#[derive(Parser, Debug)]
#[command(name = "spectree", version)]
struct Cli {
    /// Worker threads; 1 runs everything sequentially.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate Gaussian-cluster train/test files.
    Synth(SynthArgs),
    /// Build a label tree from training data.
    BuildTree(BuildTreeArgs),
    /// Train the candidate-restricted classifier on a tree.
    Train(TrainArgs),
    /// Print ranked candidate predictions, one line per example.
    Predict(PredictArgs),
    /// Accuracy, precision@k and tree recall on a labelled file.
    Evaluate(EvaluateArgs),
    /// Time deterministic inference.
    Benchmark(BenchmarkArgs),
    /// Root split purity and balance against random splits.
    Diagnose(DiagnoseArgs),
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Force the task mode instead of inferring it.
    #[arg(long)]
    mode: Option<TaskMode>,
    /// Input is `labels token token ...` text, hashed into 2^bits features.
    #[arg(long)]
    hash_bits: Option<u32>,
    /// Apply the Hellinger transform (L1 normalize, square root).
    #[arg(long)]
    hellinger: bool,
}

#[derive(Args, Debug)]
struct SolverArgs {
    #[arg(long, default_value_t = 200)]
    power_iters: usize,
    #[arg(long, default_value_t = 1e-6)]
    power_tol: f64,
    #[arg(long, default_value_t = 10)]
    cg_iters: usize,
    #[arg(long, default_value_t = 1e-4)]
    cg_tol: f64,
}

impl SolverArgs {
    fn params(&self, seed: u64) -> SolverParams {
        SolverParams {
            max_power_iters: self.power_iters,
            power_tol: self.power_tol,
            cg_max_iters: self.cg_iters,
            cg_tol: self.cg_tol,
            seed,
        }
    }
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 64)]
    classes: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 100)]
    per_class: usize,
    #[arg(long, default_value_t = 1.0)]
    separation: f64,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    train_out: PathBuf,
    #[arg(long)]
    test_out: PathBuf,
}

#[derive(Args, Debug)]
struct BuildTreeArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Per-node build report (JSON lines).
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, default_value_t = 12)]
    depth: usize,
    #[arg(long, default_value_t = 25)]
    leaf_budget: usize,
    /// Stop splitting once a node's own recall reaches this.
    #[arg(long, default_value_t = 0.999)]
    recall_target: f64,
    #[arg(long, default_value_t = 1e-3)]
    prune_eps: f64,
    #[arg(long, default_value_t = 1.0)]
    min_node_mass: f64,
    /// Split examples by the sign of the margin instead of fractionally.
    #[arg(long)]
    deterministic_build: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    solver: SolverArgs,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    tree: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Training report (JSON).
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 1e-5)]
    lr_decay: f64,
    /// Low-rank dimension; 0 trains the full linear model.
    #[arg(long, default_value_t = 0)]
    rank: usize,
    /// Give every leaf its own output layer (low rank only).
    #[arg(long)]
    node_output_weights: bool,
    #[arg(long, default_value_t = 0.0)]
    l2: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args, Debug)]
struct ArtifactArgs {
    #[arg(long)]
    tree: PathBuf,
    #[arg(long)]
    model: PathBuf,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    input: PathBuf,
    #[command(flatten)]
    artifacts: ArtifactArgs,
    /// Predictions file; standard output if absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Keep at most this many classes per line.
    #[arg(long)]
    top: Option<usize>,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    test: PathBuf,
    #[command(flatten)]
    artifacts: ArtifactArgs,
    /// Training file, for train tree recall.
    #[arg(long)]
    train: Option<PathBuf>,
    /// Machine-readable copy of the report (JSON).
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args, Debug)]
struct BenchmarkArgs {
    #[arg(long)]
    test: PathBuf,
    #[command(flatten)]
    artifacts: ArtifactArgs,
    #[arg(long, default_value_t = 5)]
    repetitions: usize,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args, Debug)]
struct DiagnoseArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    random_splits: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    solver: SolverArgs,
    #[command(flatten)]
    data: DataArgs,
}

fn load(path: &Path, data: &DataArgs, dims: Option<(usize, usize)>) -> Result<Dataset> {
    let file = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    let opts = ParseOptions {
        mode: data.mode,
        n_features: dims.map(|d| d.0),
        n_classes: dims.map(|d| d.1),
    };
    let reader = BufReader::new(file);
    let ds = match data.hash_bits {
        Some(bits) => data::parse_hashed_text(reader, bits, opts),
        None => data::parse_svmlight(reader, opts),
    }
    .with_context(|| format!("cannot parse {}", path.display()))?;
    if data.hellinger {
        return Ok(data::hellinger_transform(&ds)?);
    }
    Ok(ds)
}

fn load_tree(path: &Path) -> Result<LabelTree> {
    let bytes = std::fs::read(path).with_context(|| format!("cannot read tree {}", path.display()))?;
    LabelTree::from_bytes(&bytes).with_context(|| format!("bad tree file {}", path.display()))
}

fn load_artifacts(a: &ArtifactArgs) -> Result<(LabelTree, ClassifierModel)> {
    let tree = load_tree(&a.tree)?;
    let bytes = std::fs::read(&a.model).with_context(|| format!("cannot read model {}", a.model.display()))?;
    let model = ClassifierModel::from_bytes(&bytes).with_context(|| format!("bad model file {}", a.model.display()))?;
    model.check_tree(&tree)?;
    Ok((tree, model))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("cannot create {}", path.display()))?,
    ))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).with_context(|| format!("cannot write {}", path.display()))
}

fn synth(a: &SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        n_classes: a.classes,
        dim: a.dim,
        examples_per_class: a.per_class,
        cluster_separation: a.separation,
        noise_sigma: a.noise,
        seed: a.seed,
    };
    let (train, test) = data::make_synthetic(&cfg)?;
    let mut out = create(&a.train_out)?;
    data::write_svmlight(&train, &mut out)?;
    out.flush()?;
    let mut out = create(&a.test_out)?;
    data::write_svmlight(&test, &mut out)?;
    out.flush()?;
    println!("config={}", serde_json::to_string(&cfg)?);
    println!("train: {}", train.summary());
    println!("test: {}", test.summary());
    Ok(())
}

fn build(a: &BuildTreeArgs) -> Result<()> {
    let ds = load(&a.train, &a.data, None)?;
    let cfg = TreeConfig {
        max_depth: a.depth,
        k: a.leaf_budget,
        phi: a.recall_target,
        prune_eps: a.prune_eps,
        min_node_mass: a.min_node_mass,
        routing: if a.deterministic_build {
            RoutingScheme::Deterministic
        } else {
            RoutingScheme::Fractional
        },
        solver: a.solver.params(a.seed),
    };
    let (tree, report) = tree::build_tree(&ds, &cfg)?;
    write_bytes(&a.out, &tree.to_bytes())?;
    if let Some(path) = &a.report {
        let mut out = create(path)?;
        report.write_jsonl(&mut out)?;
        out.flush()?;
    }
    let s = report.summary();
    println!("config={}", serde_json::to_string(&cfg)?);
    println!("data: {}", ds.summary());
    println!("nodes={}", s.n_nodes);
    println!("leaves={}", s.n_leaves);
    println!("max_depth={}", s.max_depth);
    println!("avg_leaf_depth={:.3}", s.avg_depth);
    println!("avg_candidates={:.3}", s.avg_candidates);
    println!("train_recall_fractional={:.6}", s.train_recall);
    println!(
        "train_recall_deterministic={:.6}",
        tree::estimate_recall(&tree, &ds, RecallRouting::Deterministic)
    );
    if let (Some(p), Some(b)) = (s.root_purity, s.root_balance) {
        println!("root_purity={p:.6}");
        println!("root_balance={b:.6}");
    }
    Ok(())
}

fn train(a: &TrainArgs) -> Result<()> {
    let tree = load_tree(&a.tree)?;
    let ds = load(&a.train, &a.data, Some((tree.n_features(), tree.n_classes())))?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        learning_rate: a.lr,
        lr_decay: a.lr_decay,
        seed: a.seed,
        rank: a.rank,
        node_output_weights: a.node_output_weights,
        l2: a.l2,
    };
    let (model, report) = classifier::train(&ds, &tree, &cfg)?;
    write_bytes(&a.out, &model.to_bytes())?;
    if let Some(path) = &a.report {
        write_bytes(path, serde_json::to_string_pretty(&report)?.as_bytes())?;
    }
    println!("config={}", serde_json::to_string(&cfg)?);
    println!("visits={}", report.visits);
    println!("updates={}", report.updates);
    println!("skip_rate={:.6}", report.skip_rate);
    for (e, l) in report.epoch_loss.iter().enumerate() {
        println!("epoch_{e}_loss={l:.6}");
    }
    Ok(())
}

fn predict(a: &PredictArgs) -> Result<()> {
    let (tree, model) = load_artifacts(&a.artifacts)?;
    let ds = load(&a.input, &a.data, Some((tree.n_features(), tree.n_classes())))?;
    let mut out: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(create(p)?),
        None => Box::new(BufWriter::new(std::io::stdout().lock())),
    };
    for i in 0..ds.n_examples() {
        let p = model.predict(&tree, ds.x(i));
        let keep = a.top.unwrap_or(usize::MAX);
        let line: Vec<String> = p.ranked.iter().take(keep).map(|(c, s)| format!("{c}:{s:.6}")).collect();
        writeln!(out, "{}", line.join(" "))?;
    }
    out.flush()?;
    Ok(())
}

fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let (tree, model) = load_artifacts(&a.artifacts)?;
    let dims = Some((tree.n_features(), tree.n_classes()));
    let test = load(&a.test, &a.data, dims)?;
    let mut report = metrics::evaluate(&model, &tree, &test)?;
    if let Some(path) = &a.train {
        let train = load(path, &a.data, dims)?;
        report.tree_recall_train = Some(tree::estimate_recall(&tree, &train, RecallRouting::Deterministic));
    }
    println!("{report}");
    if let Some(path) = &a.report {
        write_bytes(path, report.to_json().as_bytes())?;
    }
    Ok(())
}

fn benchmark(a: &BenchmarkArgs) -> Result<()> {
    let (tree, model) = load_artifacts(&a.artifacts)?;
    let ds = load(&a.test, &a.data, Some((tree.n_features(), tree.n_classes())))?;
    let b = metrics::benchmark_inference(&model, &tree, &ds, a.repetitions)?;
    println!("repetitions={}", b.repetitions);
    println!("examples_per_second={:.1}", b.examples_per_second);
    println!("seconds_per_pass={:.6}", b.seconds_per_pass);
    println!("avg_depth={:.3}", b.avg_depth);
    println!("avg_candidates={:.3}", b.avg_candidates);
    println!("classes={}", tree.n_classes());
    Ok(())
}

fn diagnose(a: &DiagnoseArgs) -> Result<()> {
    let train = load(&a.train, &a.data, None)?;
    if train.mode() != TaskMode::Multiclass {
        bail!("diagnose needs multiclass data");
    }
    let r = spectral::solve_node(
        train.features(),
        train.labels(),
        train.weights(),
        train.mode(),
        &a.solver.params(a.seed),
    )?;
    let eigen = metrics::purity_balance(&r, &train)?;
    let baseline = metrics::random_split_baseline(&train, a.random_splits, a.seed)?;
    println!("data: {}", train.summary());
    println!("eigen_train_purity={:.6}", eigen.purity);
    println!("eigen_train_macro_purity={:.6}", eigen.macro_purity);
    println!("eigen_train_balance={:.6}", eigen.balance);
    if let Some(path) = &a.test {
        let test = load(path, &a.data, Some((train.n_features(), train.n_classes())))?;
        let t = metrics::purity_balance(&r, &test)?;
        println!("eigen_test_purity={:.6}", t.purity);
        println!("eigen_test_balance={:.6}", t.balance);
    }
    println!("random_splits={}", baseline.n_splits);
    println!("random_max_purity={:.6}", baseline.max_purity);
    println!("random_mean_purity={:.6}", baseline.mean_purity);
    println!("random_max_macro_purity={:.6}", baseline.max_macro_purity);
    println!("lambda={:.6e}", r.lambda);
    println!("power_iterations={}", r.iterations);
    println!("converged={}", r.converged);
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => synth(a),
        Command::BuildTree(a) => build(a),
        Command::Train(a) => train(a),
        Command::Predict(a) => predict(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Benchmark(a) => benchmark(a),
        Command::Diagnose(a) => diagnose(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be >= 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    }
    let result = if cli.threads == Some(1) {
        spectree::exec::sequential(|| run(&cli))
    } else {
        run(&cli)
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
