use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::json;

use ctxmod::checkpoint::Checkpoint;
use ctxmod::container::{load_dataset, load_pgm_dir, save_dataset};
use ctxmod::jobs::{resolve_jobs, run_indexed};
use ctxmod::manifest::{ManifestClock, RunManifest};
use ctxmod::report::{self, ModelMetrics, StageJson};
use ctxmod_core::analysis;
use ctxmod_core::dataset::{Dataset, Split};
use ctxmod_core::metrics::{population_rank_curves, MetricsReport};
use ctxmod_core::model::Model;
use ctxmod_core::param::Freeze;
use ctxmod_core::spec::{preset, ModelSpec};
use ctxmod_core::synth::{generate_neurons, ImageSource, NeuronConfig};
use ctxmod_core::train::{self, validation_pair, TrainConfig};

const EXIT_OTHER: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

/// Marks a failure that already printed its own explanation.
#[derive(Debug)]
struct Gap(String);

impl std::fmt::Display for Gap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Gap {}

#[derive(Parser)]
#[command(name = "ctxmod", version, about = "Encoding models with center/surround structure for single-neuron responses")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset directory.
    Synth(SynthArgs),
    /// Train one model per neuron.
    Train(TrainArgs),
    /// Run the staged freeze-and-train pipeline per neuron.
    TrainIncremental(IncrArgs),
    /// Score checkpoints on the validation split.
    Eval(EvalArgs),
    /// Center/surround split of a fully connected readout.
    Decompose(AnalysisArgs),
    /// Center-query attention row and pixel overlay.
    Attention(AttentionArgs),
    /// Gradient receptive-field mask.
    Rf(RfArgs),
    /// Comparison table over every checkpoint in a run directory.
    Report(ReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    neurons: usize,
    #[arg(long, default_value_t = 8000)]
    train: usize,
    #[arg(long, default_value_t = 1000)]
    val: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 0.6)]
    surround_fraction: f64,
    /// Response noise SD in units of each neuron's peak.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Directory of 50×50 binary PGM images to use instead of procedural ones.
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long, env = "CTXMOD_JOBS")]
    jobs: Option<usize>,
}

/// Training flags shared by `train` and `train-incremental`. Unset flags
/// fall back to the config file, then to the defaults.
#[derive(Args, Clone, Default)]
struct Hyper {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    fraction: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    /// Skip the pixel standardization fitted on the training images.
    #[arg(long)]
    no_standardize: bool,
    /// key=value file (or a previous manifest.json); overrides flags.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Settings {
    seed: u64,
    epochs: usize,
    batch: usize,
    fraction: f64,
    lr: f64,
    patience: usize,
    standardize: bool,
}

impl Settings {
    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            batch_size: self.batch,
            max_epochs: self.epochs,
            patience: self.patience,
            seed: self.seed,
            fraction: self.fraction,
            standardize: self.standardize,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Preset name or path to a model config file.
    #[arg(long)]
    model: Option<String>,
    /// Neuron index or `all`.
    #[arg(long)]
    neuron: Option<String>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    hyper: Hyper,
    #[arg(long, env = "CTXMOD_JOBS")]
    jobs: Option<usize>,
}

#[derive(Args)]
struct IncrArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    neuron: Option<String>,
    #[arg(long)]
    out: PathBuf,
    /// Also train the starred architecture with nothing frozen.
    #[arg(long)]
    simul: bool,
    #[command(flatten)]
    hyper: Hyper,
    #[arg(long, env = "CTXMOD_JOBS")]
    jobs: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint files or directories searched for `*.ckpt`.
    #[arg(long, num_args = 1.., required = true)]
    checkpoints: Vec<PathBuf>,
    /// Peak size; defaults to max(1, round(N/100)).
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AnalysisArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AttentionArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Validation image index; defaults to the neuron's strongest response.
    #[arg(long)]
    image: Option<usize>,
    /// Query token; defaults to the center token.
    #[arg(long)]
    query: Option<usize>,
}

#[derive(Args)]
struct RfArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Number of validation images used as probes.
    #[arg(long, default_value_t = 16)]
    probes: usize,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    run_dir: PathBuf,
    /// Dataset; defaults to the one named in the run manifest.
    #[arg(long)]
    data: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if e.downcast_ref::<Gap>().is_none() {
                eprintln!("error: {e:#}");
            }
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    use ctxmod::DataError;
    use ctxmod_core::Error as E;
    let core = |c: &E| match c {
        E::NonFinite(_) => EXIT_NUMERIC,
        E::UnknownPreset(_) | E::IllegalChain { .. } | E::Invalid(_) | E::KOutOfRange { .. } | E::NoAttention | E::NotFcl => EXIT_CONFIG,
        E::Shape { .. } | E::EmptySplit(_) | E::IncompatibleStage(_) | E::ConstantSeries => EXIT_DATA,
        E::NotScalar(_) | E::TapeConsumed | E::MissingGrad(_) => EXIT_OTHER,
    };
    for cause in e.chain() {
        if let Some(c) = cause.downcast_ref::<E>() {
            return core(c);
        }
        if let Some(d) = cause.downcast_ref::<DataError>() {
            return match d {
                DataError::Core(c) => core(c),
                DataError::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => EXIT_DATA,
                DataError::Io { .. } => EXIT_OTHER,
                _ => EXIT_DATA,
            };
        }
        if cause.downcast_ref::<ConfigError>().is_some() {
            return EXIT_CONFIG;
        }
        if cause.downcast_ref::<Gap>().is_some() {
            return EXIT_DATA;
        }
    }
    EXIT_OTHER
}

#[derive(Debug)]
struct ConfigError(String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.cmd {
        Cmd::Synth(a) => cmd_synth(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::TrainIncremental(a) => cmd_train_incremental(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Decompose(a) => cmd_decompose(a),
        Cmd::Attention(a) => cmd_attention(a),
        Cmd::Rf(a) => cmd_rf(a),
        Cmd::Report(a) => cmd_report(a),
    }
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> anyhow::Result<()> {
    write(path, &(serde_json::to_string_pretty(v)? + "\n"))
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn cmd_synth(a: SynthArgs) -> anyhow::Result<()> {
    let clock = ManifestClock::start();
    if a.neurons == 0 || a.train == 0 || a.val == 0 {
        return Err(config_err("--neurons, --train and --val must be positive"));
    }
    let cfg = NeuronConfig {
        surround_fraction: a.surround_fraction,
        noise_sd: a.noise,
        ..NeuronConfig::default()
    };
    let neurons = generate_neurons(a.neurons, &cfg, a.seed)?;
    let supplied = match &a.images {
        Some(dir) => Some(load_pgm_dir(dir, ctxmod_core::IMAGE_SIDE)?),
        None => None,
    };
    let source = match &supplied {
        Some(imgs) => ImageSource::Supplied(imgs),
        None => ImageSource::Procedural,
    };
    let jobs = resolve_jobs(a.jobs);
    let ds = ctxmod::synth::generate_dataset_par(a.train, a.val, &neurons, source, a.seed, jobs)?;
    let extra = vec![
        ("surround_fraction".to_string(), a.surround_fraction.to_string()),
        ("noise_sd".to_string(), a.noise.to_string()),
        (
            "image_source".to_string(),
            a.images.as_ref().map_or("procedural".to_string(), |p| path_str(p)),
        ),
    ];
    save_dataset(&ds, &a.out, &extra)?;
    let config = json!({
        "neurons": a.neurons, "train": a.train, "val": a.val, "seed": a.seed,
        "surround_fraction": a.surround_fraction, "noise": a.noise,
        "images": a.images.as_ref().map(|p| path_str(p)),
    });
    clock
        .finish("synth", config, vec![a.seed], a.images.iter().map(|p| path_str(p)).collect(), vec![path_str(&a.out)])
        .write(&a.out)?;
    println!(
        "wrote {} ({} train / {} val images, {} neurons, {} with surround)",
        a.out.display(),
        a.train,
        a.val,
        a.neurons,
        neurons.iter().filter(|n| n.gain > 0.0).count()
    );
    Ok(())
}

/// Reads `key=value` lines, or the `config` object of a manifest.json.
fn read_config_file(path: &Path) -> anyhow::Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if text.trim_start().starts_with('{') {
        let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let obj = v.get("config").unwrap_or(&v);
        let obj = obj
            .as_object()
            .ok_or_else(|| config_err(format!("{}: expected a JSON object", path.display())))?;
        return Ok(obj
            .iter()
            .filter(|(_, v)| !v.is_null())
            .map(|(k, v)| (k.clone(), v.as_str().map_or_else(|| v.to_string(), str::to_string)))
            .collect());
    }
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| config_err(format!("{}:{}: expected key=value", path.display(), i + 1)))?;
        out.insert(k.trim().replace('-', "_"), v.trim().to_string());
    }
    Ok(out)
}

fn pick<T: std::str::FromStr>(file: &BTreeMap<String, String>, key: &str, flag: Option<T>, default: T) -> anyhow::Result<T> {
    match file.get(key) {
        Some(v) => v
            .parse()
            .map_err(|_| config_err(format!("config `{key}` has a bad value `{v}`"))),
        None => Ok(flag.unwrap_or(default)),
    }
}

/// Resolves settings plus the optional `model` / `neuron` entries.
fn resolve(h: &Hyper, model: Option<String>, neuron: Option<String>) -> anyhow::Result<(Settings, Option<String>, String)> {
    let file = match &h.config {
        Some(p) => read_config_file(p)?,
        None => BTreeMap::new(),
    };
    let d = TrainConfig::default();
    let s = Settings {
        seed: pick(&file, "seed", h.seed, d.seed)?,
        epochs: pick(&file, "epochs", h.epochs, d.max_epochs)?,
        batch: pick(&file, "batch", h.batch, d.batch_size)?,
        fraction: pick(&file, "fraction", h.fraction, d.fraction)?,
        lr: pick(&file, "lr", h.lr, d.lr)?,
        patience: pick(&file, "patience", h.patience, d.patience)?,
        standardize: pick(&file, "standardize", h.no_standardize.then_some(false), d.standardize)?,
    };
    s.train_config().validate().map_err(|e| config_err(e.to_string()))?;
    let model = file.get("model").cloned().or(model);
    let neuron = file.get("neuron").cloned().or(neuron).unwrap_or_else(|| "all".into());
    Ok((s, model, neuron))
}

fn neuron_list(sel: &str, ds: &Dataset) -> anyhow::Result<Vec<usize>> {
    if sel == "all" {
        return Ok((0..ds.n_neurons).collect());
    }
    let i: usize = sel
        .parse()
        .map_err(|_| config_err(format!("--neuron expects an index or `all`, got `{sel}`")))?;
    if i >= ds.n_neurons {
        return Err(config_err(format!("neuron {i} out of range (dataset has {})", ds.n_neurons)));
    }
    Ok(vec![i])
}

fn load_spec(model: &str) -> anyhow::Result<ModelSpec> {
    let p = Path::new(model);
    if p.is_file() {
        let text = fs::read_to_string(p).with_context(|| format!("reading {model}"))?;
        return Ok(ModelSpec::parse(&text)?);
    }
    Ok(preset(model)?)
}

/// File-system friendly form of a model label.
fn stem(label: &str) -> String {
    label
        .replace('*', "-star")
        .replace('(', "_")
        .chars()
        .filter(|c| c.is_ascii_alphanumeric() || "+-_.".contains(*c))
        .collect::<String>()
        .trim_end_matches('.')
        .to_string()
}

fn neuron_dir(out: &Path, n: usize) -> PathBuf {
    out.join(format!("neuron-{n:03}"))
}

fn cmd_train(a: TrainArgs) -> anyhow::Result<()> {
    let clock = ManifestClock::start();
    let (s, model, neuron) = resolve(&a.hyper, a.model, a.neuron)?;
    let model = model.ok_or_else(|| config_err("--model is required"))?;
    let spec = load_spec(&model)?;
    spec.shape_chain()?;
    let ds = load_dataset(&a.data)?;
    let neurons = neuron_list(&neuron, &ds)?;
    let cfg = s.train_config();
    let label = spec.name.clone();
    let results = run_indexed(resolve_jobs(a.jobs), neurons.len(), |j| {
        let n = neurons[j];
        let job = cfg.for_job(n);
        let mut m = Model::build(&spec, job.seed)?;
        let r = train::train(&mut m, &ds, n, &job, &label)?;
        Ok::<_, ctxmod_core::Error>((m, r))
    });
    let mut pairs = Vec::new();
    let mut outputs = Vec::new();
    for (j, res) in results.into_iter().enumerate() {
        let n = neurons[j];
        let (m, mut r) = res.with_context(|| format!("training neuron {n}"))?;
        let rel = PathBuf::from(format!("neuron-{n:03}")).join(format!("{}.ckpt", stem(&label)));
        r.checkpoint_path = Some(path_str(&rel));
        pairs.push(validation_pair(&m, &ds, n)?);
        Checkpoint::new(m)
            .with("model", &label)
            .with("neuron", n)
            .with("seed", cfg.for_job(n).seed)
            .with("stage", &label)
            .save(&a.out.join(&rel))?;
        write_json(
            &neuron_dir(&a.out, n).join(format!("{}.report.json", stem(&label))),
            &StageJson::new(&r, n),
        )?;
        outputs.push(path_str(&rel));
    }
    let metrics = vec![ModelMetrics::from(&MetricsReport::new(&label, &neurons, &pairs, None)?)];
    write_metrics(&a.out, &metrics)?;
    let config = json!({
        "data": path_str(&a.data), "model": model, "neuron": neuron,
        "seed": s.seed, "epochs": s.epochs, "batch": s.batch, "fraction": s.fraction,
        "lr": s.lr, "patience": s.patience, "standardize": s.standardize,
    });
    clock
        .finish("train", config, vec![s.seed], vec![path_str(&a.data)], outputs)
        .write(&a.out)?;
    print_metrics(&metrics);
    Ok(())
}

fn write_metrics(out: &Path, metrics: &[ModelMetrics]) -> anyhow::Result<()> {
    write_json(&out.join("metrics.json"), &metrics)?;
    write(&out.join("metrics.csv"), &report::comparison_csv(metrics))?;
    write(&out.join("neurons.csv"), &report::per_neuron_csv(metrics))
}

fn print_metrics(metrics: &[ModelMetrics]) {
    for m in metrics {
        if let [n] = m.neurons.as_slice() {
            // One neuron has no SEM; show its own values.
            let c = n.corr.map_or("-".to_string(), |c| format!("{c:.3}"));
            println!("{:28} CORR {c}  PT_J {:.1}  PT_S {:.1}  (neuron {})", m.model, n.pt_j, n.pt_s, n.neuron);
            continue;
        }
        let f = |s: &Option<report::SummaryJson>| s.as_ref().map_or("-".to_string(), |s| format!("{:.3} ± {:.3}", s.mean, s.sem));
        println!("{:28} CORR {}  PT_J {}  PT_S {}", m.model, f(&m.corr), f(&m.pt_j), f(&m.pt_s));
    }
}

/// Names and freeze state of every non-learnable tensor.
fn frozen_audit(stage: &str, m: &Model<f32>) -> Vec<String> {
    m.params()
        .iter()
        .filter_map(|p| match &p.freeze {
            Freeze::Learnable => None,
            Freeze::Frozen => Some(format!("{stage}\t{}\tfrozen", p.name)),
            Freeze::Partial(mask) => Some(format!(
                "{stage}\t{}\tpartial {}/{}",
                p.name,
                mask.iter().filter(|&&f| f).count(),
                mask.len()
            )),
        })
        .collect()
}

fn cmd_train_incremental(a: IncrArgs) -> anyhow::Result<()> {
    let clock = ManifestClock::start();
    let (s, _, neuron) = resolve(&a.hyper, None, a.neuron)?;
    let ds = load_dataset(&a.data)?;
    let neurons = neuron_list(&neuron, &ds)?;
    let cfg = s.train_config();
    let simul = a.simul;
    let results = run_indexed(resolve_jobs(a.jobs), neurons.len(), |j| {
        let n = neurons[j];
        let job = cfg.for_job(n);
        let mut stages = train::incremental_pipeline(&ds, n, &job)?.stages;
        if simul {
            stages.push(train::simultaneous("rf+sa-CNN*", &ds, n, &job)?);
        }
        Ok::<_, ctxmod_core::Error>(stages)
    });
    let mut by_label: Vec<(String, Vec<usize>, Vec<(Vec<f64>, Vec<f64>)>)> = Vec::new();
    let mut outputs = Vec::new();
    for (j, res) in results.into_iter().enumerate() {
        let n = neurons[j];
        let stages = res.with_context(|| format!("pipeline for neuron {n}"))?;
        let mut audit = Vec::new();
        for (m, mut r) in stages {
            let rel = PathBuf::from(format!("neuron-{n:03}")).join(format!("{}.ckpt", stem(&r.stage)));
            r.checkpoint_path = Some(path_str(&rel));
            audit.extend(frozen_audit(&r.stage, &m));
            let pair = validation_pair(&m, &ds, n)?;
            match by_label.iter_mut().find(|g| g.0 == r.stage) {
                Some(g) => {
                    g.1.push(n);
                    g.2.push(pair);
                }
                None => by_label.push((r.stage.clone(), vec![n], vec![pair])),
            }
            write_json(
                &neuron_dir(&a.out, n).join(format!("{}.report.json", stem(&r.stage))),
                &StageJson::new(&r, n),
            )?;
            Checkpoint::new(m)
                .with("model", &r.stage)
                .with("neuron", n)
                .with("seed", cfg.for_job(n).seed)
                .with("stage", &r.stage)
                .save(&a.out.join(&rel))?;
            outputs.push(path_str(&rel));
        }
        write(&neuron_dir(&a.out, n).join("frozen.log"), &(audit.join("\n") + "\n"))?;
    }
    let metrics = by_label
        .iter()
        .map(|(label, ns, pairs)| MetricsReport::new(label, ns, pairs, None).map(|r| ModelMetrics::from(&r)))
        .collect::<Result<Vec<_>, _>>()?;
    write_metrics(&a.out, &metrics)?;
    let config = json!({
        "data": path_str(&a.data), "neuron": neuron, "simul": simul,
        "seed": s.seed, "epochs": s.epochs, "batch": s.batch, "fraction": s.fraction,
        "lr": s.lr, "patience": s.patience, "standardize": s.standardize,
    });
    clock
        .finish("train-incremental", config, vec![s.seed], vec![path_str(&a.data)], outputs)
        .write(&a.out)?;
    print_metrics(&metrics);
    Ok(())
}

/// Expands directories into their `*.ckpt` files (sorted), keeping the
/// order of the arguments.
fn collect_checkpoints(args: &[PathBuf]) -> anyhow::Result<Vec<PathBuf>> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
        let mut entries: Vec<PathBuf> = fs::read_dir(dir)?.filter_map(|e| e.ok().map(|e| e.path())).collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(&p, out)?;
            } else if p.extension().is_some_and(|x| x == "ckpt") {
                out.push(p);
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    for a in args {
        if a.is_dir() {
            walk(a, &mut out).with_context(|| format!("listing {}", a.display()))?;
        } else {
            out.push(a.clone());
        }
    }
    if out.is_empty() {
        bail!(ctxmod::DataError::Format("no checkpoints found".into()));
    }
    Ok(out)
}

type Groups = Vec<(String, Vec<usize>, Vec<(Vec<f64>, Vec<f64>)>)>;

fn score_checkpoints(paths: &[PathBuf], ds: &Dataset) -> anyhow::Result<Groups> {
    let mut groups: Groups = Vec::new();
    for p in paths {
        let ck = Checkpoint::load(p)?;
        let label = ck.get("model").unwrap_or(&ck.model.spec().name).to_string();
        let n: usize = ck
            .get("neuron")
            .ok_or_else(|| anyhow!("{}: checkpoint does not record its neuron", p.display()))?
            .parse()?;
        if n >= ds.n_neurons {
            bail!(ctxmod::DataError::Format(format!(
                "{}: neuron {n} not in a dataset of {}",
                p.display(),
                ds.n_neurons
            )));
        }
        let pair = validation_pair(&ck.model, ds, n)?;
        match groups.iter_mut().find(|g| g.0 == label) {
            Some(g) => {
                g.1.push(n);
                g.2.push(pair);
            }
            None => groups.push((label, vec![n], vec![pair])),
        }
    }
    Ok(groups)
}

fn cmd_eval(a: EvalArgs) -> anyhow::Result<()> {
    let clock = ManifestClock::start();
    let ds = load_dataset(&a.data)?;
    let paths = collect_checkpoints(&a.checkpoints)?;
    let groups = score_checkpoints(&paths, &ds)?;
    let mut metrics = Vec::new();
    for (i, (label, ns, pairs)) in groups.iter().enumerate() {
        metrics.push(ModelMetrics::from(&MetricsReport::new(label, ns, pairs, a.k)?));
        let curves = population_rank_curves(pairs)?;
        write(&a.out.join(format!("tuning-{i:02}-{}.csv", stem(label))), &report::tuning_csv(&curves))?;
    }
    write_metrics(&a.out, &metrics)?;
    clock
        .finish(
            "eval",
            json!({"data": path_str(&a.data), "checkpoints": paths.iter().map(|p| path_str(p)).collect::<Vec<_>>(), "k": a.k}),
            vec![],
            paths.iter().map(|p| path_str(p)).collect(),
            vec![path_str(&a.out)],
        )
        .write(&a.out)?;
    print_metrics(&metrics);
    Ok(())
}

fn load_pair(ck: &Path, data: &Path) -> anyhow::Result<(Checkpoint, Dataset, usize)> {
    let ck = Checkpoint::load(ck)?;
    let ds = load_dataset(data)?;
    let n = ck.get("neuron").and_then(|v| v.parse().ok()).unwrap_or(0);
    Ok((ck, ds, n))
}

fn cmd_decompose(a: AnalysisArgs) -> anyhow::Result<()> {
    let clock = ManifestClock::start();
    let (ck, ds, _) = load_pair(&a.checkpoint, &a.data)?;
    let parts = analysis::fcl_decompose(&ck.model, &ds.val_images)?;
    let curves = analysis::decomposition_curves(&parts);
    let heat = analysis::hypercolumn_heatmap(&parts)?;
    let max_rel = parts
        .iter()
        .map(|d| d.residual() / d.prediction.abs().max(1e-12))
        .fold(0.0, f64::max);
    write(&a.out.join("curves.csv"), &report::decomposition_csv(&curves))?;
    write(&a.out.join("heatmap.csv"), &report::heatmap_csv(&heat))?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    write_json(
        &a.out.join("decomposition.json"),
        &json!({
            "model": ck.get("model"), "images": parts.len(), "grid": [heat.h, heat.w],
            "mean_center": mean(&curves.center), "mean_surround": mean(&curves.surround),
            "bias": parts.first().map(|d| d.bias),
            "dominance_ratio": heat.dominance_ratio(),
            "max_relative_residual": max_rel,
        }),
    )?;
    clock
        .finish("decompose", json!({"checkpoint": path_str(&a.checkpoint), "data": path_str(&a.data)}), vec![], vec![path_str(&a.checkpoint), path_str(&a.data)], vec![path_str(&a.out)])
        .write(&a.out)?;
    println!("{} images, dominance ratio {:?}", parts.len(), heat.dominance_ratio());
    Ok(())
}

fn cmd_attention(a: AttentionArgs) -> anyhow::Result<()> {
    let clock = ManifestClock::start();
    let (ck, ds, n) = load_pair(&a.checkpoint, &a.data)?;
    let n_val = ds.len(Split::Val);
    let idx = match a.image {
        Some(i) if i < n_val => i,
        Some(i) => return Err(config_err(format!("--image {i} out of range ({n_val} validation images)"))),
        None => {
            let r = ds.responses(Split::Val, n.min(ds.n_neurons - 1));
            (0..r.len()).max_by(|&x, &y| r[x].total_cmp(&r[y]).then(y.cmp(&x))).unwrap_or(0)
        }
    };
    let o = analysis::attention_overlay(&ck.model, ds.image(Split::Val, idx), a.query)?.remove(0);
    write(&a.out.join("weights.csv"), &report::attention_weights_csv(&o))?;
    write(&a.out.join("overlay.csv"), &report::overlay_csv(&o, ds.side))?;
    write_json(
        &a.out.join("attention.json"),
        &json!({"model": ck.get("model"), "image": idx, "query": o.query, "tokens": o.row.len(), "entropy_nats": o.entropy()}),
    )?;
    clock
        .finish("attention", json!({"checkpoint": path_str(&a.checkpoint), "data": path_str(&a.data), "image": idx, "query": o.query}), vec![], vec![path_str(&a.checkpoint), path_str(&a.data)], vec![path_str(&a.out)])
        .write(&a.out)?;
    println!("image {idx}, query {}, entropy {:.4} nats", o.query, o.entropy());
    Ok(())
}

fn cmd_rf(a: RfArgs) -> anyhow::Result<()> {
    let clock = ManifestClock::start();
    let (ck, ds, _) = load_pair(&a.checkpoint, &a.data)?;
    let k = a.probes.clamp(1, ds.len(Split::Val));
    let probes = &ds.val_images[..k * ds.pixels()];
    let mask = analysis::empirical_rf(&ck.model, probes)?;
    let bb = mask.bounding_box();
    write(&a.out.join("mask.csv"), &report::mask_csv(&mask))?;
    write_json(
        &a.out.join("rf.json"),
        &json!({
            "model": ck.get("model"), "probes": k, "pixels": mask.count(),
            "bounding_box": bb.map(|(r0, r1, c0, c1)| json!({"row_min": r0, "row_max": r1, "col_min": c0, "col_max": c1})),
            "rectangular": mask.is_rectangle(),
        }),
    )?;
    clock
        .finish("rf", json!({"checkpoint": path_str(&a.checkpoint), "data": path_str(&a.data), "probes": k}), vec![], vec![path_str(&a.checkpoint), path_str(&a.data)], vec![path_str(&a.out)])
        .write(&a.out)?;
    match bb {
        Some((r0, r1, c0, c1)) => println!("{} pixels, rows {r0}..={r1}, cols {c0}..={c1}", mask.count()),
        None => println!("empty receptive field"),
    }
    Ok(())
}

/// Canonical row order: presets, then pipeline stages, then the rest.
fn row_rank(label: &str) -> (usize, String) {
    const ORDER: [&str; 9] = [
        "ff-CNN",
        "ff+sa-CNN",
        "rf-CNN",
        "rf+sa-CNN",
        "rf+sa-CNN*(Simul.)",
        train::STAGE_RF_SA,
        train::STAGE_FC1,
        train::STAGE_FC2,
        "ff+sa-CNN*(Simul.)",
    ];
    (ORDER.iter().position(|&o| o == label).unwrap_or(ORDER.len()), label.to_string())
}

fn cmd_report(a: ReportArgs) -> anyhow::Result<()> {
    let data = match a.data {
        Some(d) => d,
        None => {
            let m = RunManifest::read(&a.run_dir)?;
            PathBuf::from(
                m.config
                    .get("data")
                    .and_then(|v| v.as_str())
                    .ok_or_else(|| config_err("run manifest names no dataset; pass --data"))?,
            )
        }
    };
    let ds = load_dataset(&data)?;
    let paths = collect_checkpoints(&[a.run_dir.clone()])?;
    let mut groups = score_checkpoints(&paths, &ds)?;
    groups.sort_by_key(|g| row_rank(&g.0));
    let all: std::collections::BTreeSet<usize> = groups.iter().flat_map(|g| g.1.iter().copied()).collect();
    let mut gaps = Vec::new();
    let mut md = String::from("| Model (Training Method) | neurons | CORR. | PT_J | PT_S |\n|---|---|---|---|---|\n");
    let mut metrics = Vec::new();
    for (label, ns, pairs) in &groups {
        let m = ModelMetrics::from(&MetricsReport::new(label, ns, pairs, None)?);
        let missing: Vec<usize> = all.iter().copied().filter(|n| !ns.contains(n)).collect();
        let cell = |s: &Option<report::SummaryJson>| s.as_ref().map_or("-".to_string(), |s| format!("{:.3} ± {:.3}", s.mean, s.sem));
        let mark = if missing.is_empty() { String::new() } else { " (gap)".to_string() };
        md.push_str(&format!(
            "| {label}{mark} | {} | {} | {} | {} |\n",
            ns.len(),
            cell(&m.corr),
            cell(&m.pt_j),
            cell(&m.pt_s)
        ));
        for n in missing {
            gaps.push(format!("{label}: neuron {n} missing"));
        }
        metrics.push(m);
    }
    write(&a.run_dir.join("report.md"), &md)?;
    write(&a.run_dir.join("report.csv"), &report::comparison_csv(&metrics))?;
    print!("{md}");
    if !gaps.is_empty() {
        for g in &gaps {
            eprintln!("gap: {g}");
        }
        return Err(Gap(format!("{} missing stage checkpoints", gaps.len())).into());
    }
    Ok(())
}
