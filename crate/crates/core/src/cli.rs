//! The `vic` command line: argument parsing, config resolution and the five
//! subcommands.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dataset::{ground_truth_total, load_sequence, write_sequence, VideoSequence};
use crate::error::{Error, Result};
use crate::experiment::{
    ablation_grid, depth_sweep, evaluate, tuned_o2o, BenchmarkConfig, EvalConfig, O2O_THRESHOLDS,
};
use crate::metrics::{bucket_of, DENSITY_BOUNDARIES};
use crate::model::ModelParams;
use crate::ompm::CountMode;
use crate::simulator::{generate, SimConfig};
use crate::training::{build_examples, pair_loss, train_on_examples, write_loss_curve, TrainConfig, TrainExample};

#[derive(Debug, Parser)]
#[command(name = "vic", version, about = "Video individual counting with one-to-many pedestrian matching")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic labeled sequences.
    Simulate(Args),
    /// Train a model and write a checkpoint plus its loss curve.
    Train(Args),
    /// Count videos with a checkpoint and score the counts.
    Eval(Args),
    /// Run the module ablation grid and the MLP depth sweep.
    Ablate(Args),
    /// Compare the trained matcher against the tuned one-to-one baseline.
    Compare(Args),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Simulate(_) => "simulate",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Ablate(_) => "ablate",
            Command::Compare(_) => "compare",
        }
    }

    pub fn args(&self) -> &Args {
        match self {
            Command::Simulate(a) | Command::Train(a) | Command::Eval(a) | Command::Ablate(a) | Command::Compare(a) => a,
        }
    }
}

/// Flags shared by every subcommand. Unset flags keep the config value.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Args {
    /// TOML run config; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Frame sampling interval in seconds [default: 3]
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Match threshold on pair probabilities [default: 0.5]
    #[arg(long)]
    pub tau: Option<f64>,
    /// Largest group a current pedestrian may match [default: 5]
    #[arg(long)]
    pub k: Option<usize>,
    /// literal | dedup [default: dedup]
    #[arg(long)]
    pub count_mode: Option<CountMode>,
    #[arg(long)]
    pub no_icg: bool,
    #[arg(long)]
    pub no_ompm: bool,
    #[arg(long)]
    pub no_kl: bool,
    /// Number of linear layers in the pair MLP [default: 3]
    #[arg(long)]
    pub mlp_depth: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Output directory [default: runs/<command>]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Input sequences (JSONL files or directories). Training data for
    /// `train`, test data otherwise. Defaults to the benchmark preset.
    #[arg(long)]
    pub data: Vec<PathBuf>,
    /// Training sequences for `ablate` and `compare`.
    #[arg(long)]
    pub train_data: Vec<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// `simulate`: write the benchmark evaluation videos instead of one sequence.
    #[arg(long)]
    pub preset: bool,
    /// `eval`: report ground truth as the prediction.
    #[arg(long)]
    pub oracle: bool,
}

/// Everything a run depends on. Written next to every output as
/// `run_config.toml`; passing it back with `--config` replays the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub preset: bool,
    pub data: Vec<PathBuf>,
    pub train_data: Vec<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// MLP depths visited by `ablate`.
    pub depths: Vec<usize>,
    /// Baseline thresholds swept by `compare`.
    pub thresholds: Vec<f64>,
    pub sim: SimConfig,
    pub benchmark: BenchmarkConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: None,
            preset: false,
            data: Vec::new(),
            train_data: Vec::new(),
            checkpoint: None,
            depths: vec![1, 2, 3, 4, 5],
            thresholds: O2O_THRESHOLDS.to_vec(),
            sim: SimConfig::default(),
            benchmark: BenchmarkConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.span().map(|s| text[..s.start].lines().count().max(1)).unwrap_or(0),
            message: e.message().to_string(),
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    /// Config file (if any) with flags applied on top. The master seed is
    /// copied into every seeded module.
    pub fn resolve(args: &Args) -> Result<Self> {
        let mut cfg = match &args.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = args.seed {
            cfg.seed = s;
        }
        if let Some(s) = args.sigma {
            cfg.eval.sigma = s;
            cfg.train.sigma = s;
        }
        if let Some(t) = args.tau {
            cfg.eval.tau = t;
        }
        if let Some(k) = args.k {
            cfg.eval.k = k;
        }
        if let Some(m) = args.count_mode {
            cfg.eval.count_mode = m;
        }
        if args.no_icg {
            cfg.train.model.icg_on = false;
        }
        if args.no_ompm {
            cfg.train.model.ompm_on = false;
        }
        if args.no_kl {
            cfg.train.kl_on = false;
        }
        if let Some(d) = args.mlp_depth {
            cfg.train.model.mlp.depth = d;
        }
        if let Some(e) = args.epochs {
            cfg.train.epochs = e;
        }
        if let Some(o) = &args.out {
            cfg.out = Some(o.clone());
        }
        if !args.data.is_empty() {
            cfg.data = args.data.clone();
        }
        if !args.train_data.is_empty() {
            cfg.train_data = args.train_data.clone();
        }
        if let Some(c) = &args.checkpoint {
            cfg.checkpoint = Some(c.clone());
        }
        cfg.preset |= args.preset;
        cfg.eval.oracle |= args.oracle;
        cfg.sim.seed = cfg.seed;
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.train.validate()?;
        if !(self.eval.sigma > 0.0 && self.eval.sigma.is_finite()) {
            return Err(Error::Config(format!("sigma must be positive, got {}", self.eval.sigma)));
        }
        if !(0.0..=1.0).contains(&self.eval.tau) {
            return Err(Error::Config(format!("tau must lie in [0,1], got {}", self.eval.tau)));
        }
        if self.eval.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.depths.iter().any(|&d| d == 0) {
            return Err(Error::Config("MLP depths must be at least 1".into()));
        }
        Ok(())
    }

    fn out_dir(&self, command: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(command))
    }
}

#[derive(Debug, Serialize)]
struct SequenceEntry {
    id: String,
    file: String,
    frames: usize,
    ground_truth: usize,
    /// Density bucket index of the ground-truth total.
    bucket: usize,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    seed: u64,
    config: &'a RunConfig,
    outputs: Vec<String>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    sequences: Vec<SequenceEntry>,
}

/// Output directory plus the list of files written into it.
struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    fn create(dir: PathBuf) -> Result<Self> {
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Outputs { dir, files: Vec::new() })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.dir.join(name)
    }

    fn write(&mut self, name: &str, text: &str) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let text = serde_json::to_string_pretty(value).map_err(|e| Error::Serde(e.to_string()))?;
        self.write(name, &text)
    }

    fn finish(mut self, command: &str, cfg: &RunConfig, sequences: Vec<SequenceEntry>) -> Result<()> {
        self.write("run_config.toml", &cfg.to_toml()?)?;
        let manifest = Manifest {
            tool: "vic",
            version: env!("CARGO_PKG_VERSION"),
            command,
            seed: cfg.seed,
            config: cfg,
            outputs: self.files.clone(),
            sequences,
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Serde(e.to_string()))?;
        let p = self.dir.join("manifest.json");
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }
}

/// Expands files and directories (their `*.jsonl` entries, sorted) and loads
/// every sequence.
pub fn load_inputs(paths: &[PathBuf], d_in: Option<usize>) -> Result<Vec<VideoSequence>> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .map_err(|e| Error::io(p, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "jsonl"))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    if files.is_empty() {
        return Err(Error::Validation("no input sequences found".into()));
    }
    files.iter().map(|f| load_sequence(f, d_in)).collect()
}

fn test_set(cfg: &RunConfig) -> Result<Vec<VideoSequence>> {
    if cfg.data.is_empty() {
        cfg.benchmark.eval_set(cfg.seed)
    } else {
        load_inputs(&cfg.data, Some(cfg.train.model.d_in))
    }
}

fn train_set(cfg: &RunConfig, paths: &[PathBuf]) -> Result<Vec<VideoSequence>> {
    if paths.is_empty() {
        cfg.benchmark.train_set(cfg.seed)
    } else {
        load_inputs(paths, Some(cfg.train.model.d_in))
    }
}

fn sequence_entry(seq: &VideoSequence, file: String, sigma: f64) -> Result<SequenceEntry> {
    let gt = ground_truth_total(seq, sigma)?.unique;
    Ok(SequenceEntry {
        id: seq.id.clone(),
        file,
        frames: seq.frames.len(),
        ground_truth: gt,
        bucket: bucket_of(gt as f64, &DENSITY_BOUNDARIES),
    })
}

fn cmd_simulate(cfg: &RunConfig) -> Result<()> {
    let mut out = Outputs::create(cfg.out_dir("simulate"))?;
    let seqs = if cfg.preset {
        cfg.benchmark.eval_set(cfg.seed)?
    } else {
        let mut seq = generate(&cfg.sim)?;
        seq.id = format!("sim-{}", cfg.seed);
        vec![seq]
    };
    let mut entries = Vec::new();
    for seq in &seqs {
        let file = format!("{}.jsonl", seq.id);
        let path = out.path(&file);
        write_sequence(seq, &path)?;
        if seq.groups.is_some() {
            out.files.push(format!("{}.groups.json", seq.id));
        }
        entries.push(sequence_entry(seq, file, cfg.eval.sigma)?);
    }
    println!("wrote {} sequence(s) to {}", seqs.len(), out.dir.display());
    out.finish("simulate", cfg, entries)
}

/// Mean total loss of `params` over `examples`, in order.
pub fn mean_loss(params: &ModelParams, cfg: &TrainConfig, examples: &[TrainExample]) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let mut s = 0.0;
    for ex in examples {
        s += pair_loss(params, cfg, ex)?.l_total;
    }
    Ok(s / examples.len() as f64)
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let mut out = Outputs::create(cfg.out_dir("train"))?;
    let data = train_set(cfg, &cfg.data)?;
    let examples = build_examples(&data, &cfg.train)?;
    let outcome = train_on_examples(&examples, &cfg.train, None)?;
    write_loss_curve(&outcome.curve, &out.path("loss.csv"))?;
    if let Some(e) = outcome.diverged {
        out.finish("train", cfg, Vec::new())?;
        return Err(e);
    }
    let final_loss = mean_loss(&outcome.params, &cfg.train, &examples)?;
    let ckpt = Checkpoint::new(&outcome.params, &cfg.train, outcome.steps, Some(final_loss));
    ckpt.save(&out.path("checkpoint.json"))?;
    println!(
        "trained {} steps on {} pairs; final loss {final_loss:.6}; checkpoint in {}",
        outcome.steps,
        examples.len(),
        out.dir.display()
    );
    out.finish("train", cfg, Vec::new())
}

fn load_checkpoint(cfg: &RunConfig) -> Result<(Checkpoint, ModelParams)> {
    let path = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("this command needs --checkpoint".into()))?;
    let ckpt = Checkpoint::load(path)?;
    let want = &cfg.train.model;
    let have = &ckpt.config.model;
    if want.icg_on != have.icg_on || want.ompm_on != have.ompm_on {
        return Err(Error::Version(format!(
            "checkpoint was trained with icg_on = {}, ompm_on = {} but the run asks for icg_on = {}, ompm_on = {}",
            have.icg_on, have.ompm_on, want.icg_on, want.ompm_on
        )));
    }
    let params = ckpt.params_for(want)?;
    Ok((ckpt, params))
}

#[derive(Debug, Serialize)]
struct VideoPairs<'a> {
    id: &'a str,
    first_frame: usize,
    pairs: &'a [crate::ompm::PairRecord],
}

fn cmd_eval(cfg: &RunConfig) -> Result<()> {
    let (_, params) = load_checkpoint(cfg)?;
    let mut out = Outputs::create(cfg.out_dir("eval"))?;
    let seqs = test_set(cfg)?;
    let (report, preds) = evaluate(&params, &cfg.train.model, &seqs, &cfg.eval)?;
    report.write_json(&out.path("report.json"))?;
    report.write_csv(&out.path("report.csv"))?;
    report.write_svg(&out.path("density.svg"))?;
    let mut lines = String::new();
    for p in &preds {
        let rec = VideoPairs {
            id: &p.result.id,
            first_frame: p.first_frame,
            pairs: &p.pairs,
        };
        lines.push_str(&serde_json::to_string(&rec).map_err(|e| Error::Serde(e.to_string()))?);
        lines.push('\n');
    }
    out.write("pairs.jsonl", &lines)?;
    println!(
        "{} videos: MAE {:.3}, MSE {:.3}, WRAE {:.3}%",
        report.videos.len(),
        report.mae,
        report.mse,
        report.wrae
    );
    out.finish("eval", cfg, Vec::new())
}

fn cmd_ablate(cfg: &RunConfig) -> Result<()> {
    let mut out = Outputs::create(cfg.out_dir("ablate"))?;
    let train = train_set(cfg, &cfg.train_data)?;
    let test = test_set(cfg)?;
    let grid = ablation_grid(&cfg.train, &train, &test, &cfg.eval)?;
    let depths = depth_sweep(&cfg.train, &cfg.depths, &train, &test, &cfg.eval)?;
    let mut csv = String::from("variant,icg,ompm,kl,mae,mse,wrae\n");
    for r in &grid {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.name, r.variant.icg, r.variant.ompm, r.variant.kl, r.mae, r.mse, r.wrae
        ));
        println!("{:<14} WRAE {:>7.3}%  MAE {:>8.3}", r.name, r.wrae, r.mae);
    }
    out.write("ablation.csv", &csv)?;
    let mut csv = String::from("depth,mae,mse,wrae\n");
    for r in &depths {
        csv.push_str(&format!("{},{},{},{}\n", r.depth, r.mae, r.mse, r.wrae));
        println!("mlp depth {}   WRAE {:>7.3}%  MAE {:>8.3}", r.depth, r.wrae, r.mae);
    }
    out.write("depth.csv", &csv)?;
    out.json("ablate.json", &serde_json::json!({ "grid": grid, "depth": depths }))?;
    out.finish("ablate", cfg, Vec::new())
}

fn cmd_compare(cfg: &RunConfig) -> Result<()> {
    let mut out = Outputs::create(cfg.out_dir("compare"))?;
    let test = test_set(cfg)?;
    let params = if cfg.checkpoint.is_some() {
        load_checkpoint(cfg)?.1
    } else {
        let train = train_set(cfg, &cfg.train_data)?;
        let examples = build_examples(&train, &cfg.train)?;
        let outcome = train_on_examples(&examples, &cfg.train, None)?;
        if let Some(e) = outcome.diverged {
            return Err(e);
        }
        outcome.params
    };
    let (o2m, _) = evaluate(&params, &cfg.train.model, &test, &cfg.eval)?;
    let o2o = tuned_o2o(&test, &cfg.thresholds, &cfg.eval)?;
    let improvement = if o2o.report.wrae > 0.0 {
        1.0 - o2m.wrae / o2o.report.wrae
    } else {
        0.0
    };
    let mut csv = String::from("method,threshold,mae,mse,wrae\n");
    csv.push_str(&format!("o2m,,{},{},{}\n", o2m.mae, o2m.mse, o2m.wrae));
    csv.push_str(&format!(
        "o2o,{},{},{},{}\n",
        o2o.threshold, o2o.report.mae, o2o.report.mse, o2o.report.wrae
    ));
    out.write("compare.csv", &csv)?;
    let mut videos = String::from("id,ground_truth,o2m,o2o\n");
    for (a, b) in o2m.videos.iter().zip(&o2o.report.videos) {
        videos.push_str(&format!("{},{},{},{}\n", a.id, a.ground_truth, a.predicted, b.predicted));
    }
    out.write("videos.csv", &videos)?;
    out.json(
        "compare.json",
        &serde_json::json!({
            "o2m": o2m,
            "o2o": o2o,
            "relative_wrae_reduction": improvement,
        }),
    )?;
    println!("method  threshold      MAE      MSE     WRAE");
    println!("o2m             -  {:>7.3}  {:>7.3}  {:>6.3}%", o2m.mae, o2m.mse, o2m.wrae);
    println!(
        "o2o     {:>9}  {:>7.3}  {:>7.3}  {:>6.3}%",
        o2o.threshold, o2o.report.mae, o2o.report.mse, o2o.report.wrae
    );
    println!("relative WRAE reduction {:.1}%", 100.0 * improvement);
    out.finish("compare", cfg, Vec::new())
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = RunConfig::resolve(cli.command.args())?;
    match &cli.command {
        Command::Simulate(_) => cmd_simulate(&cfg),
        Command::Train(_) => cmd_train(&cfg),
        Command::Eval(_) => cmd_eval(&cfg),
        Command::Ablate(_) => cmd_ablate(&cfg),
        Command::Compare(_) => cmd_compare(&cfg),
    }
}

/// Caps the rayon pool at `VIC_THREADS` when set. Only the first call in a
/// process has an effect.
pub fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("VIC_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("VIC_THREADS must be a positive integer, got `{v}`")))?;
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match init_threads().and_then(|_| run(&cli)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
