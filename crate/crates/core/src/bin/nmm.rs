use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use serde_json::json;

use nmm::graph::{edge_list_extent, load_edge_list, load_features, load_labels, Split};
use nmm::kernel::{assignment_count, exact_marginal_with_budget, EnumBudget};
use nmm::learning::{train, Baseline, TrainConfig};
use nmm::model::{ModelBody, ModelDocument};
use nmm::parameterize::{Activation, AttentionMode, BackboneConfig, BackboneKind, Parameterization};
use nmm::predict::{argmax, greedy_decode, pairwise_ll, predict_exact_smallset, DecodeConfig, DecodeOrder, Weighting};
use nmm::rng::seeded;
use nmm::synth::{synthesize, SynthConfig};
use nmm::target::{
    exact_kl_mean_field, exact_kl_nmm, fit_nmm, mean_field_fit, ApproxConfig, ApproxInit, IsingModel, IsingSpec,
    MAX_ORACLE_NODES,
};
use nmm::variational::elbo_estimate;
use nmm::{Graph, LabeledNodes, NmmError, NodeSet};

// A closed stdout (e.g. piped into `head`) ends the process quietly.
fn emit(args: std::fmt::Arguments) {
    let mut out = std::io::stdout().lock();
    if let Err(e) = out.write_fmt(args) {
        if e.kind() == std::io::ErrorKind::BrokenPipe {
            std::process::exit(0);
        }
        panic!("failed writing to stdout: {e}");
    }
}

macro_rules! out {
    ($($t:tt)*) => { emit(format_args!($($t)*)) };
}

macro_rules! outln {
    ($($t:tt)*) => { emit(format_args!("{}\n", format_args!($($t)*))) };
}

#[derive(Parser)]
#[command(name = "nmm", version, about = "Neighbor mixture models for labels on graphs")]
struct Cli {
    /// File of key=value defaults; flags given on the command line win.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model to observed labels.
    Train(TrainArgs),
    /// Predict labels of target nodes.
    Predict(PredictArgs),
    /// Score a model on labeled nodes.
    Eval(EvalArgs),
    /// Approximate a grid Ising model.
    ApproxIsing(IsingArgs),
    /// Write a synthetic dataset sampled from a known model.
    Synth(SynthArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Edge list, one "u<TAB>v" per line.
    #[arg(long)]
    graph: PathBuf,
    /// "node_id,label_id" per line.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Numeric table, row i = node i.
    #[arg(long)]
    features: Option<PathBuf>,
    /// JSON object with "train", "val" and "test" id arrays.
    #[arg(long)]
    split: Option<PathBuf>,
    /// Node count when the edge list does not mention the last node.
    #[arg(long)]
    num_nodes: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Free,
    Linear,
    Onehop,
}

#[derive(Clone, Copy, ValueEnum)]
enum ActivationArg {
    Softplus,
    Square,
}

#[derive(Clone, Copy, ValueEnum)]
enum AttentionArg {
    Cosine,
    Identity,
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineArg {
    None,
    Loo,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value = "free")]
    backbone: KindArg,
    #[arg(long, value_enum, default_value = "softplus")]
    activation: ActivationArg,
    #[arg(long, value_enum, default_value = "cosine")]
    attention: AttentionArg,
    #[arg(long, default_value_t = 16)]
    embed_dim: usize,
    #[arg(long, default_value_t = 16)]
    hidden: usize,
    #[arg(long, default_value_t = 1.0)]
    init_omega_sq: f64,
    #[arg(long, default_value_t = 0.0)]
    init_gamma: f64,
    /// Defaults to the largest observed label plus one.
    #[arg(long)]
    num_classes: Option<usize>,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    /// Monte Carlo samples per step.
    #[arg(long, default_value_t = 8)]
    samples: usize,
    #[arg(long, value_enum, default_value = "loo")]
    baseline: BaselineArg,
    #[arg(long, default_value_t = 0.005)]
    l2: f64,
    #[arg(long, default_value_t = 100)]
    patience: usize,
    #[arg(long, default_value_t = 32)]
    eval_particles: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Model file to write.
    #[arg(long)]
    out: PathBuf,
    /// Metric trace, one JSON record per epoch. Defaults to <out>.trace.jsonl.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum PredictMethod {
    /// Exact when the enumeration budget allows, greedy otherwise.
    Auto,
    Exact,
    Greedy,
}

#[derive(Clone, Copy, ValueEnum)]
enum WeightingArg {
    Uniform,
    Importance,
}

#[derive(Clone, Copy, ValueEnum)]
enum OrderArg {
    Id,
    Given,
    Confident,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    model: PathBuf,
    /// Comma-separated node ids. Defaults to the split's test nodes, or to
    /// every unlabeled node. An empty string selects no nodes.
    #[arg(long)]
    targets: Option<String>,
    #[arg(long, value_enum, default_value = "auto")]
    method: PredictMethod,
    #[arg(long, default_value_t = 1000)]
    particles: usize,
    #[arg(long, value_enum, default_value = "uniform")]
    weighting: WeightingArg,
    #[arg(long, value_enum, default_value = "id")]
    order: OrderArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Prediction file; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Metric {
    Elbo,
    Pll,
    ExactNll,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Part {
    Labeled,
    Train,
    Val,
    Test,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum)]
    metric: Metric,
    /// Which labeled nodes to score.
    #[arg(long, value_enum, default_value = "labeled")]
    part: Part,
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum IsingMethod {
    Mf,
    NmmFree,
    NmmOnehop,
}

#[derive(Args)]
struct IsingArgs {
    #[arg(long, value_enum)]
    method: IsingMethod,
    /// JSON grid spec; overrides --height, --width, --J and --h.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    height: usize,
    #[arg(long, default_value_t = 4)]
    width: usize,
    #[arg(long = "J", default_value_t = 0.4, allow_negative_numbers = true)]
    j: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    h: f64,
    /// Samples per gradient step.
    #[arg(long, default_value_t = 32)]
    samples: usize,
    #[arg(long, default_value_t = 300)]
    steps: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    /// Samples for the final bound evaluation.
    #[arg(long, default_value_t = 20_000)]
    eval_samples: usize,
    #[arg(long, default_value_t = 4)]
    embed_dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Optimization trace, one JSON record per step or sweep.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Write the fitted NMM here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 30)]
    nodes: usize,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long, default_value_t = 0.15)]
    edge_prob: f64,
    #[arg(long, default_value_t = 4)]
    max_adjacent: usize,
    #[arg(long, default_value_t = 4)]
    feature_dim: usize,
    #[arg(long, default_value_t = 2.0)]
    concentration: f64,
    #[arg(long, default_value_t = 0.25)]
    self_weight: f64,
    #[arg(long, default_value_t = 0.5)]
    feature_noise: f64,
    #[arg(long, default_value_t = 0.5)]
    train_frac: f64,
    #[arg(long, default_value_t = 0.2)]
    val_frac: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

enum CliError {
    Usage(String),
    Run(NmmError),
}

impl From<NmmError> for CliError {
    fn from(e: NmmError) -> Self {
        CliError::Run(e)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Run(NmmError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn f6(x: f64) -> String {
    format!("{x:.6}")
}

fn opt6(x: Option<f64>) -> String {
    x.map_or_else(|| "null".into(), f6)
}

// ---- configuration file ----

/// Finds --config in raw argv and splices its key=value pairs in as flags
/// right after the subcommand, so later command-line flags override them.
fn expand_config(argv: Vec<String>) -> CliResult<Vec<String>> {
    let mut path = None;
    for (k, a) in argv.iter().enumerate() {
        if a == "--config" {
            path = argv.get(k + 1).cloned();
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.to_string());
        }
    }
    let Some(path) = path else {
        return Ok(argv);
    };
    let root = Cli::command();
    let Some((sub_pos, sub)) = argv
        .iter()
        .enumerate()
        .skip(1)
        .find_map(|(k, a)| root.find_subcommand(a).map(|s| (k, s.clone())))
    else {
        return Ok(argv);
    };
    let text = fs::read_to_string(&path).map_err(|e| io_err(Path::new(&path), e))?;
    let mut injected = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(usage(format!("{path}:{}: expected key=value", n + 1)));
        };
        let key = key.trim().replace('_', "-");
        let value = value.trim();
        let Some(arg) = sub.get_arguments().find(|a| a.get_long() == Some(key.as_str())) else {
            return Err(usage(format!("{path}:{}: unknown key '{key}' for '{}'", n + 1, sub.get_name())));
        };
        if arg.get_action().takes_values() {
            injected.push(format!("--{key}={value}"));
        } else {
            match value {
                "true" => injected.push(format!("--{key}")),
                "false" => {}
                _ => return Err(usage(format!("{path}:{}: '{key}' expects true or false", n + 1))),
            }
        }
    }
    let mut out = argv[..=sub_pos].to_vec();
    out.extend(injected);
    out.extend_from_slice(&argv[sub_pos + 1..]);
    Ok(out)
}

fn parse_cli() -> std::result::Result<Cli, clap::Error> {
    let argv = match expand_config(std::env::args().collect()) {
        Ok(a) => a,
        Err(CliError::Usage(m)) => return Err(Cli::command().error(clap::error::ErrorKind::ValueValidation, m)),
        Err(CliError::Run(e)) => return Err(Cli::command().error(clap::error::ErrorKind::Io, e.to_string())),
    };
    let cmd = Cli::command().mut_subcommands(|s| s.args_override_self(true));
    let matches: ArgMatches = cmd.try_get_matches_from(argv)?;
    Cli::from_arg_matches(&matches)
}

// ---- data loading ----

struct Dataset {
    graph: Graph,
    labels: Vec<Option<usize>>,
    split: Option<Split>,
}

fn load_data(d: &DataArgs) -> CliResult<Dataset> {
    let features = d.features.as_ref().map(load_features).transpose()?;
    let mut n = edge_list_extent(&d.graph)?;
    n = n.max(d.num_nodes.unwrap_or(0));
    if let Some(f) = &features {
        n = n.max(f.num_rows);
    }
    let mut graph = load_edge_list(&d.graph, n)?;
    if let Some(f) = features {
        graph = graph.with_features(f)?;
    }
    let labels = match &d.labels {
        Some(p) => load_labels(p, n)?,
        None => vec![None; n],
    };
    let split = d.split.as_ref().map(|p| Split::load(p, n)).transpose()?;
    Ok(Dataset { graph, labels, split })
}

fn labeled_subset(labels: &[Option<usize>], nodes: impl IntoIterator<Item = usize>, c: usize) -> CliResult<LabeledNodes> {
    let (mut ids, mut ys) = (Vec::new(), Vec::new());
    for i in nodes {
        if let Some(y) = labels[i] {
            ids.push(i);
            ys.push(y);
        }
    }
    Ok(LabeledNodes::new(ids, ys, labels.len(), c)?)
}

fn require_features(kind: BackboneKind, g: &Graph) -> CliResult<()> {
    if kind != BackboneKind::Free && g.features().is_none() {
        return Err(usage(format!("--features is required with the {kind} backbone")));
    }
    Ok(())
}

fn load_model(path: &Path, g: &Graph) -> CliResult<(ModelDocument, nmm::NmmParams)> {
    let doc = ModelDocument::load(path)?;
    doc.check_graph(g)?;
    if let ModelBody::Backbone { backbone, .. } = &doc.body {
        require_features(backbone.kind, g)?;
    }
    let p = doc.params(g)?;
    Ok((doc, p))
}

// ---- train ----

fn cmd_train(a: &TrainArgs) -> CliResult<()> {
    let kind = match a.backbone {
        KindArg::Free => BackboneKind::Free,
        KindArg::Linear => BackboneKind::Linear,
        KindArg::Onehop => BackboneKind::OneHop,
    };
    if a.data.labels.is_none() {
        return Err(usage("--labels is required"));
    }
    let data = load_data(&a.data)?;
    require_features(kind, &data.graph)?;
    let g = &data.graph;
    let observed_max = data.labels.iter().flatten().max().copied();
    let c = match (a.num_classes, observed_max) {
        (Some(c), _) => c,
        (None, Some(m)) => (m + 1).max(2),
        (None, None) => return Err(usage("no labels found; pass --num-classes")),
    };
    let (train_nodes, val_nodes): (Vec<usize>, Vec<usize>) = match &data.split {
        Some(s) => (s.train.clone(), s.val.clone()),
        None => ((0..g.num_nodes()).collect(), Vec::new()),
    };
    let y = labeled_subset(&data.labels, train_nodes, c)?;
    let val = labeled_subset(&data.labels, val_nodes, c)?;
    let backbone = BackboneConfig {
        kind,
        activation: match a.activation {
            ActivationArg::Softplus => Activation::SoftplusPlusOne,
            ActivationArg::Square => Activation::SquarePlusOne,
        },
        attention: match a.attention {
            AttentionArg::Cosine => AttentionMode::Cosine,
            AttentionArg::Identity => AttentionMode::Identity,
        },
        embed_dim: a.embed_dim,
        hidden: a.hidden,
        init_omega_sq: a.init_omega_sq,
        init_gamma: a.init_gamma,
    };
    let cfg = TrainConfig {
        epochs: a.epochs,
        lr: a.lr,
        samples: a.samples,
        baseline: match a.baseline {
            BaselineArg::None => Baseline::None,
            BaselineArg::Loo => Baseline::Loo,
        },
        seed: a.seed,
        l2: a.l2,
        patience: a.patience,
        eval_particles: a.eval_particles,
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let par = Parameterization::new(backbone, g, c)?;
    let theta0 = par.init_theta(&mut seeded(a.seed));

    let trace_path = a.trace.clone().unwrap_or_else(|| {
        let mut s = a.out.clone().into_os_string();
        s.push(".trace.jsonl");
        PathBuf::from(s)
    });
    let file = File::create(&trace_path).map_err(|e| io_err(&trace_path, e))?;
    let mut trace = BufWriter::new(file);
    let mut on_epoch = |r: &nmm::learning::EpochRecord| -> nmm::Result<()> {
        writeln!(
            trace,
            "{{\"epoch\":{},\"elbo\":{},\"objective\":{},\"val_accuracy\":{}}}",
            r.epoch,
            f6(r.elbo),
            f6(r.objective),
            opt6(r.val_accuracy)
        )
        .and_then(|_| trace.flush())
        .map_err(|e| NmmError::Io {
            path: trace_path.clone(),
            source: e,
        })
    };
    let val_ref = (!val.is_empty()).then_some(&val);
    let out = train(&par, g, &y, val_ref, &cfg, theta0, &mut on_epoch)?;
    drop(on_epoch);

    let echo = json!({ "train": cfg, "observed": y.len(), "validation": val.len() });
    let doc = ModelDocument::from_theta(g, &par, out.theta, a.seed, echo)?;
    doc.save(&a.out)?;
    let last = out.trace.last();
    let best = &out.trace[out.best_epoch.min(out.trace.len().saturating_sub(1))];
    outln!("epochs {}", out.trace.len());
    outln!("best_epoch {}", out.best_epoch);
    outln!("final_elbo {}", last.map_or("n/a".into(), |r| f6(r.elbo)));
    outln!("best_val_accuracy {}", best.val_accuracy.map_or("n/a".into(), f6));
    outln!("stopped_early {}", out.stopped_early);
    Ok(())
}

// ---- predict ----

fn parse_ids(text: &str) -> CliResult<Vec<usize>> {
    text.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<usize>().map_err(|_| usage(format!("bad node id '{t}' in --targets"))))
        .collect()
}

fn cmd_predict(a: &PredictArgs) -> CliResult<()> {
    let data = load_data(&a.data)?;
    let g = &data.graph;
    let (_, p) = load_model(&a.model, g)?;
    let c = p.num_classes();
    let n = g.num_nodes();
    let targets: Vec<usize> = match (&a.targets, &data.split) {
        (Some(t), _) => parse_ids(t)?,
        (None, Some(s)) => s.test.clone(),
        (None, None) => (0..n).filter(|&i| data.labels[i].is_none()).collect(),
    };
    let kappa = NodeSet::new(targets, n).map_err(|e| usage(e.to_string()))?;
    if let Some(bad) = data.labels.iter().flatten().find(|&&y| y >= c) {
        return Err(CliError::Run(NmmError::InvalidArgument(format!("label {bad} exceeds the model's {c} classes"))));
    }
    let target_set: BTreeSet<usize> = kappa.ids().iter().copied().collect();
    let observed_pool: Vec<usize> = match &data.split {
        Some(s) => s.train.clone(),
        None => (0..n).collect(),
    };
    let y = labeled_subset(&data.labels, observed_pool.into_iter().filter(|i| !target_set.contains(i)), c)?;

    let mut all: Vec<usize> = y.nodes().to_vec();
    all.extend_from_slice(kappa.ids());
    let budget = EnumBudget::default();
    let exact_ok = budget
        .check(assignment_count(g, &all) * (c as f64).powi(kappa.len() as i32), all.len())
        .is_ok();
    let use_exact = match a.method {
        PredictMethod::Exact => true,
        PredictMethod::Greedy => false,
        PredictMethod::Auto => exact_ok,
    };
    let mut rows: Vec<(usize, usize, Vec<f64>)> = if kappa.is_empty() {
        Vec::new()
    } else if use_exact {
        let post = predict_exact_smallset(g, &p, &y, &kappa, budget)?;
        kappa
            .ids()
            .iter()
            .enumerate()
            .map(|(k, &i)| {
                let m = post.marginal(k);
                (i, argmax(&m), m)
            })
            .collect()
    } else {
        let cfg = DecodeConfig {
            num_particles: a.particles,
            seed: a.seed,
            weighting: match a.weighting {
                WeightingArg::Uniform => Weighting::Uniform,
                WeightingArg::Importance => Weighting::Importance,
            },
            order: match a.order {
                OrderArg::Id => DecodeOrder::NodeId,
                OrderArg::Given => DecodeOrder::AsGiven,
                OrderArg::Confident => DecodeOrder::Confident,
            },
        };
        greedy_decode(g, &p, &y, &kappa, cfg)?
            .into_iter()
            .map(|d| (d.node, d.label, d.probs))
            .collect()
    };
    rows.sort_by_key(|r| r.0);

    let mut text = String::new();
    for (i, label, probs) in &rows {
        write!(text, "{i},{label}").unwrap();
        for q in probs {
            write!(text, ",{q:.5}").unwrap();
        }
        text.push('\n');
    }
    let scored: Vec<(usize, usize)> = rows.iter().filter_map(|(i, l, _)| data.labels[*i].map(|t| (*l, t))).collect();
    let hits = scored.iter().filter(|(a, b)| a == b).count();
    match &a.out {
        Some(path) => write_file(path, &text)?,
        None => out!("{text}"),
    }
    outln!("method {}", if use_exact { "exact" } else { "greedy" });
    outln!("observed {}", y.len());
    match nmm::predict::accuracy(scored.iter().copied()) {
        Some(acc) => outln!("accuracy {} ({hits}/{})", f6(acc), scored.len()),
        None => outln!("accuracy n/a"),
    }
    Ok(())
}

// ---- eval ----

fn cmd_eval(a: &EvalArgs) -> CliResult<()> {
    let data = load_data(&a.data)?;
    let g = &data.graph;
    let (_, p) = load_model(&a.model, g)?;
    let c = p.num_classes();
    let n = g.num_nodes();
    let pool: Vec<usize> = match (a.part, &data.split) {
        (Part::Labeled, _) => (0..n).collect(),
        (_, None) => return Err(usage("--part other than 'labeled' needs --split")),
        (Part::Train, Some(s)) => s.train.clone(),
        (Part::Val, Some(s)) => s.val.clone(),
        (Part::Test, Some(s)) => s.test.clone(),
    };
    let y = labeled_subset(&data.labels, pool, c)?;
    match a.metric {
        Metric::Elbo => {
            let est = elbo_estimate(g, &p, &y, a.samples, a.seed)?;
            outln!("elbo {} se {} nodes {} samples {} seed {}", f6(est.elbo), f6(est.std_error()), y.len(), a.samples, a.seed);
        }
        Metric::ExactNll => {
            let lp = exact_marginal_with_budget(g, &p, &y, EnumBudget::default())?;
            outln!("exact-nll {} nodes {}", f6(-lp), y.len());
        }
        Metric::Pll => {
            let inside: BTreeSet<usize> = y.nodes().iter().copied().collect();
            let edges: Vec<(usize, usize)> = g
                .edges()
                .into_iter()
                .filter(|(u, v)| inside.contains(u) && inside.contains(v))
                .collect();
            let mut labels = vec![None; n];
            for (i, yi) in y.iter() {
                labels[i] = Some(yi);
            }
            let v = pairwise_ll(g, &p, &edges, &labels)?;
            outln!("pll {} edges {}", f6(v), edges.len());
        }
    }
    Ok(())
}

// ---- approx-ising ----

fn cmd_approx_ising(a: &IsingArgs) -> CliResult<()> {
    let m = match &a.spec {
        Some(path) => IsingModel::from_spec(&IsingSpec::load(path)?)?,
        None => {
            if a.height == 0 || a.width == 0 {
                return Err(usage("grid dimensions must be positive"));
            }
            IsingModel::grid(a.height, a.width, a.j, a.h)?
        }
    };
    let n = m.num_nodes();
    let mut trace = String::new();
    let method = match a.method {
        IsingMethod::Mf => "mf",
        IsingMethod::NmmFree => "nmm-free",
        IsingMethod::NmmOnehop => "nmm-onehop",
    };
    outln!("method {method}");
    outln!("nodes {n}");
    match a.method {
        IsingMethod::Mf => {
            let fit = mean_field_fit(&m, 10_000, 1e-8)?;
            for (k, f) in fit.trace.iter().enumerate() {
                writeln!(trace, "{{\"sweep\":{},\"free_energy\":{}}}", k + 1, f6(*f)).unwrap();
            }
            outln!("free_energy {}", f6(fit.free_energy));
            outln!("converged {} sweeps {}", fit.converged, fit.sweeps);
            if n <= MAX_ORACLE_NODES {
                let (kl, log_z) = exact_kl_mean_field(&m, &fit.state)?;
                outln!("log_z {}", f6(log_z));
                outln!("kl {}", f6(kl));
            }
        }
        IsingMethod::NmmFree | IsingMethod::NmmOnehop => {
            let onehop = a.method == IsingMethod::NmmOnehop;
            let g = if onehop {
                m.graph().clone().with_features(m.potential_features())?
            } else {
                m.graph().clone()
            };
            let backbone = BackboneConfig {
                kind: if onehop { BackboneKind::OneHop } else { BackboneKind::Free },
                embed_dim: a.embed_dim,
                ..Default::default()
            };
            let par = Parameterization::new(backbone, &g, 2)?;
            let cfg = ApproxConfig {
                steps: a.steps,
                samples: a.samples,
                lr: a.lr,
                seed: a.seed,
                init: if onehop { ApproxInit::Default } else { ApproxInit::MeanField },
                eval_samples: a.eval_samples,
                ..Default::default()
            };
            if cfg.samples < 2 || cfg.eval_samples < 2 {
                return Err(usage("--samples and --eval-samples must be at least 2"));
            }
            let out = fit_nmm(&m, &par, &cfg)?;
            for r in &out.trace {
                writeln!(trace, "{{\"step\":{},\"ub\":{}}}", r.step, f6(r.ub)).unwrap();
            }
            outln!("free_energy {}", f6(out.free_energy));
            outln!("std_error {}", f6(out.std_error));
            outln!("anchored {}", out.anchored);
            let p = par.params(&g, &out.theta)?;
            if n <= MAX_ORACLE_NODES {
                match exact_kl_nmm(&m, &g, &p) {
                    Ok((kl, log_z)) => {
                        outln!("log_z {}", f6(log_z));
                        outln!("kl {}", f6(kl));
                    }
                    Err(NmmError::BudgetExceeded { .. }) => {
                        outln!("log_z {}", f6(nmm::target::ising_log_partition(&m)?));
                        outln!("kl n/a (enumeration budget)");
                    }
                    Err(e) => return Err(e.into()),
                }
            }
            if let Some(path) = &a.out {
                let echo = json!({ "approx": cfg, "method": method });
                ModelDocument::from_theta(&g, &par, out.theta.clone(), a.seed, echo)?.save(path)?;
            }
        }
    }
    if let Some(path) = &a.trace {
        write_file(path, &trace)?;
    }
    Ok(())
}

// ---- synth ----

fn cmd_synth(a: &SynthArgs) -> CliResult<()> {
    let cfg = SynthConfig {
        num_nodes: a.nodes,
        num_classes: a.classes,
        edge_prob: a.edge_prob,
        max_adjacent: a.max_adjacent,
        feature_dim: a.feature_dim,
        concentration: a.concentration,
        self_weight: a.self_weight,
        feature_noise: a.feature_noise,
        train_frac: a.train_frac,
        val_frac: a.val_frac,
        seed: a.seed,
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let data = synthesize(&cfg)?;
    data.write_dir(&a.out_dir)?;
    write_file(&a.out_dir.join("synth.json"), &(serde_json::to_string_pretty(&cfg).map_err(NmmError::from)? + "\n"))?;
    outln!("nodes {}", data.graph.num_nodes());
    outln!("edges {}", data.graph.num_edges());
    outln!("max_degree {}", data.graph.max_degree());
    outln!(
        "split {}/{}/{}",
        data.split.train.len(),
        data.split.val.len(),
        data.split.test.len()
    );
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Eval(a) => cmd_eval(a),
        Command::ApproxIsing(a) => cmd_approx_ising(a),
        Command::Synth(a) => cmd_synth(a),
    }
}

fn main() -> ExitCode {
    let cli = match parse_cli() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(CliError::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
