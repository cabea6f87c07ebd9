//! Command-line front end: argument parsing, the `key = value` config
//! overlay and the subcommand drivers.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use log::info;

use crate::data::{self, Normalization, Part, SplitMask, SplitOverrides};
use crate::error::{Error, Result};
use crate::gradcheck::{self, GradcheckConfig, Level};
use crate::network::{FusionMode, Model, ModelConfig};
use crate::params::read_checkpoint;
use crate::ssm::{self, Discretization, Precision};
use crate::train::{self, SplitSource, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "hsmamba", version, about = "Hyperspectral per-pixel classifier")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, clap::Args)]
pub struct Overlay {
    /// Config file of `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Extra `key=value` settings applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train `runs` models and write checkpoints, histories, maps and results.
    Train {
        #[arg(long)]
        cube: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// Fixed split file shared by all runs (1 train, 2 val, 3 test).
        #[arg(long, conflicts_with = "split_seed")]
        splits: Option<PathBuf>,
        /// Seed of one stratified split shared by all runs; without it each
        /// run splits with its own seed.
        #[arg(long)]
        split_seed: Option<u64>,
        /// Per-class `class train val` override table.
        #[arg(long)]
        overrides: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[command(flatten)]
        overlay: Overlay,
    },
    /// Evaluate a checkpoint on labeled pixels.
    Eval {
        #[arg(long)]
        cube: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Split file; without it every labeled pixel is evaluated.
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        part: String,
    },
    /// Classify every pixel and write a colour map.
    Predict {
        #[arg(long)]
        cube: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        map_out: PathBuf,
        /// Also write the predicted classes as a label file.
        #[arg(long)]
        labels_out: Option<PathBuf>,
    },
    /// Generate a synthetic scene.
    Synth {
        #[arg(long = "H", alias = "height")]
        h: usize,
        #[arg(long = "W", alias = "width")]
        w: usize,
        #[arg(long = "C", alias = "bands")]
        c: usize,
        #[arg(long = "K", alias = "classes")]
        k: usize,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long, default_value = "op")]
        level: String,
    },
    /// Time the selective scan across sequence lengths.
    Bench {
        /// Benchmark the selective scan (the only target).
        #[arg(long, default_value_t = true)]
        scan: bool,
        #[arg(long = "L", value_delimiter = ',', default_values_t = [1024usize, 2048, 4096, 8192, 16384, 32768, 65536])]
        lengths: Vec<usize>,
        #[arg(long, default_value_t = 16)]
        channels: usize,
        #[arg(long, default_value_t = 16)]
        state: usize,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long, default_value = "f64")]
        precision: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Everything a training run needs besides its inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub train_n: usize,
    pub val_n: usize,
    pub normalize: Normalization,
    /// Bands of the input; filled in from the cube.
    pub bands: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            train_n: 30,
            val_n: 10,
            normalize: Normalization::MinMax,
            bands: 0,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

fn discretization_name(d: Discretization) -> &'static str {
    match d {
        Discretization::Zoh => "zoh",
        Discretization::Simplified => "simplified",
    }
}

impl RunConfig {
    /// Apply one setting; unknown keys are an error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "embed_dim" => m.embed_dim = parse(key, value)?,
            "patch_size" => m.patch_size = parse(key, value)?,
            "groups_spe" => m.groups_spe = parse(key, value)?,
            "groups_spa" => m.groups_spa = parse(key, value)?,
            "state_size" => m.state_size = parse(key, value)?,
            "num_classes" => m.num_classes = parse(key, value)?,
            "gn_groups" => m.gn_groups = parse(key, value)?,
            "tau" => m.tau = parse(key, value)?,
            "fusion_mode" => m.fusion_mode = value.parse::<FusionMode>()?,
            "use_pos_encoding" => m.use_pos_encoding = parse_bool(key, value)?,
            "use_lgi" => m.use_lgi = parse_bool(key, value)?,
            "full_res_skip" => m.full_res_skip = parse_bool(key, value)?,
            "num_blocks" => m.num_blocks = parse(key, value)?,
            "discretization" => {
                m.discretization = match value {
                    "zoh" => Discretization::Zoh,
                    "simplified" => Discretization::Simplified,
                    _ => return Err(Error::Config(format!("unknown discretization `{value}`"))),
                }
            }
            "lr" => t.lr = parse(key, value)?,
            "beta1" => t.beta1 = parse(key, value)?,
            "beta2" => t.beta2 = parse(key, value)?,
            "eps" => t.eps = parse(key, value)?,
            "max_epochs" => t.max_epochs = parse(key, value)?,
            "patience" => t.patience = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "runs" => t.runs = parse(key, value)?,
            "train_n" => self.train_n = parse(key, value)?,
            "val_n" => self.val_n = parse(key, value)?,
            "normalize" => self.normalize = value.parse()?,
            "bands" => self.bands = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Apply a `key = value` file; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1)));
            };
            self.set(k.trim(), v.trim()).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn apply_overrides(&mut self, pairs: &[String]) -> Result<()> {
        for p in pairs {
            let Some((k, v)) = p.split_once('=') else {
                return Err(Error::Config(format!("--set expects KEY=VALUE, got `{p}`")));
            };
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(&String::from_utf8_lossy(&crate::error::read_file(path)?))?;
        Ok(c)
    }

    /// Every setting with defaults materialized; reading it back with
    /// [`RunConfig::apply_text`] reproduces `self`.
    pub fn to_text(&self) -> String {
        let (m, t) = (&self.model, &self.train);
        let mut s = String::new();
        let rows: Vec<(&str, String)> = vec![
            ("embed_dim", m.embed_dim.to_string()),
            ("patch_size", m.patch_size.to_string()),
            ("groups_spe", m.groups_spe.to_string()),
            ("groups_spa", m.groups_spa.to_string()),
            ("state_size", m.state_size.to_string()),
            ("num_classes", m.num_classes.to_string()),
            ("gn_groups", m.gn_groups.to_string()),
            ("tau", m.tau.to_string()),
            ("fusion_mode", m.fusion_mode.to_string()),
            ("use_pos_encoding", m.use_pos_encoding.to_string()),
            ("use_lgi", m.use_lgi.to_string()),
            ("full_res_skip", m.full_res_skip.to_string()),
            ("num_blocks", m.num_blocks.to_string()),
            ("discretization", discretization_name(m.discretization).to_string()),
            ("lr", t.lr.to_string()),
            ("beta1", t.beta1.to_string()),
            ("beta2", t.beta2.to_string()),
            ("eps", t.eps.to_string()),
            ("max_epochs", t.max_epochs.to_string()),
            ("patience", t.patience.to_string()),
            ("seed", t.seed.to_string()),
            ("runs", t.runs.to_string()),
            ("train_n", self.train_n.to_string()),
            ("val_n", self.val_n.to_string()),
            ("normalize", self.normalize.to_string()),
            ("bands", self.bands.to_string()),
        ];
        for (k, v) in rows {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

/// Config written next to every checkpoint.
pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    let mut p = checkpoint.as_os_str().to_owned();
    p.push(".config");
    PathBuf::from(p)
}

fn load_cube(path: &Path, mode: Normalization) -> Result<data::Cube> {
    let cube = data::read_cube(path)?;
    Ok(data::normalize_with(&cube, mode))
}

fn load_model(checkpoint: &Path) -> Result<(RunConfig, Model)> {
    let cfg = RunConfig::from_file(&sidecar_path(checkpoint))?;
    let mut model = Model::new(cfg.model.clone(), cfg.bands, 0)?;
    model.store.load_values(read_checkpoint(checkpoint)?)?;
    Ok((cfg, model))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    Ok(fs::write(path, contents)?)
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_train(
    cube: &Path,
    labels: &Path,
    splits: Option<&Path>,
    split_seed: Option<u64>,
    overrides: Option<&Path>,
    out: &Path,
    mut cfg: RunConfig,
) -> Result<train::RunTable> {
    let raw = data::read_cube(cube)?;
    let labels = data::read_labels(labels)?;
    labels.check_matches(&raw)?;
    cfg.bands = raw.bands;
    if cfg.model.num_classes < labels.num_classes() {
        cfg.model.num_classes = labels.num_classes();
    }
    cfg.model.validate()?;
    cfg.train.validate()?;
    let cube = data::normalize_with(&raw, cfg.normalize).to_array();
    let overrides = match overrides {
        Some(p) => data::read_overrides(p)?,
        None => SplitOverrides::new(),
    };
    let source = match (splits, split_seed) {
        (Some(p), _) => SplitSource::Fixed(SplitMask::from_label_map(&data::read_labels(p)?)?),
        (None, Some(seed)) => {
            SplitSource::Fixed(data::stratified_split(&labels, cfg.train_n, cfg.val_n, &overrides, seed)?)
        }
        (None, None) => SplitSource::Stratified { train_n: cfg.train_n, val_n: cfg.val_n, overrides },
    };
    let dump = cfg.to_text();
    println!("{dump}");
    write(&out.join("config.txt"), &dump)?;
    let palette = train::default_palette(cfg.model.num_classes);
    let table = train::multi_run(&cfg.model, &cfg.train, &cube, &labels, &source, |r, model| {
        let dir = out.join(format!("run{}", r.run));
        write(&dir.join("history.csv"), train::history_csv(&r.outcome.history))?;
        let ckpt = dir.join("model.hsmw");
        write(&ckpt, &r.outcome.best_checkpoint)?;
        write(&sidecar_path(&ckpt), &dump)?;
        write(&dir.join("split.hsil"), data::labels_to_bytes(&r.split.to_label_map()))?;
        write(&dir.join("map.ppm"), train::export_map(&r.prediction, labels.height, labels.width, &palette)?)?;
        debug_assert_eq!(model.store.to_checkpoint_bytes(), r.outcome.best_checkpoint);
        println!("run {} seed {}: OA {:.4} AA {:.4} Kappa {:.4}", r.run, r.seed, r.test.oa, r.test.aa, r.test.kappa);
        Ok(())
    })?;
    write(&out.join("results.csv"), table.to_csv())?;
    println!(
        "OA {:.4} ± {:.4}  AA {:.4} ± {:.4}  Kappa {:.4} ± {:.4}",
        table.oa.mean, table.oa.std, table.aa.mean, table.aa.std, table.kappa.mean, table.kappa.std
    );
    Ok(table)
}

pub fn cmd_eval(
    cube: &Path,
    labels: &Path,
    checkpoint: &Path,
    mask: Option<&Path>,
    part: Part,
) -> Result<train::Metrics> {
    let (cfg, model) = load_model(checkpoint)?;
    let cube = load_cube(cube, cfg.normalize)?;
    let labels = data::read_labels(labels)?;
    labels.check_matches(&cube)?;
    let selected = match mask {
        Some(p) => SplitMask::from_label_map(&data::read_labels(p)?)?.part(part).to_vec(),
        None => SplitMask::all_labeled(&labels),
    };
    let pred = model.predict(&cube.to_array())?;
    let m = train::compute_metrics(&pred, &labels, &selected, cfg.model.num_classes)?;
    println!("OA {} AA {} Kappa {}", m.oa, m.aa, m.kappa);
    Ok(m)
}

pub fn cmd_predict(cube: &Path, checkpoint: &Path, map_out: &Path, labels_out: Option<&Path>) -> Result<Vec<u16>> {
    let (cfg, model) = load_model(checkpoint)?;
    let cube = load_cube(cube, cfg.normalize)?;
    let pred = model.predict(&cube.to_array())?;
    let palette = train::default_palette(cfg.model.num_classes);
    write(map_out, train::export_map(&pred, cube.height, cube.width, &palette)?)?;
    if let Some(p) = labels_out {
        let map = data::LabelMap::new(cube.height, cube.width, pred.clone())?;
        write(p, data::labels_to_bytes(&map))?;
    }
    Ok(pred)
}

pub fn cmd_synth(h: usize, w: usize, c: usize, k: usize, noise: f64, seed: u64, out: &Path) -> Result<()> {
    let scene = data::synth_scene(h, w, c, k, noise, seed)?;
    fs::create_dir_all(out)?;
    data::write_cube(&scene.cube, out.join("cube.hsic"))?;
    data::write_labels(&scene.labels, out.join("labels.hsil"))?;
    println!("wrote {h}×{w}×{c} scene with {k} classes to {}", out.display());
    Ok(())
}

/// Run a gradient suite, print every case and fail on any tolerance miss.
pub fn cmd_gradcheck(level: Level) -> Result<()> {
    let cfg = GradcheckConfig::default();
    let results = gradcheck::run_level(level, &cfg)?;
    for r in &results {
        println!("{} {r}", if r.passed(&cfg) { "ok  " } else { "FAIL" });
    }
    let worst = results.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err));
    match worst {
        Some(w) if !w.passed(&cfg) => Err(Error::Runtime(format!("gradient check failed; worst offender: {w}"))),
        _ => Ok(()),
    }
}

pub fn cmd_bench(
    lengths: &[usize],
    channels: usize,
    state: usize,
    repeats: usize,
    precision: Precision,
    out: Option<&Path>,
) -> Result<Vec<ssm::BenchRow>> {
    let rows = ssm::benchmark_scan(lengths, channels, state, repeats, precision)?;
    let csv = ssm::bench_csv(&rows);
    print!("{csv}");
    if rows.len() >= 2 {
        println!("log-log slope {:.3}", ssm::loglog_slope(&rows));
    }
    if let Some(p) = out {
        write(p, &csv)?;
    }
    Ok(rows)
}

/// Dispatch a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { cube, labels, splits, split_seed, overrides, out, runs, seed, epochs, lr, overlay } => {
            let mut cfg = match &overlay.config {
                Some(p) => RunConfig::from_file(p)?,
                None => RunConfig::default(),
            };
            cfg.apply_overrides(&overlay.set)?;
            if let Some(v) = runs {
                cfg.train.runs = v;
            }
            if let Some(v) = seed {
                cfg.train.seed = v;
            }
            if let Some(v) = epochs {
                cfg.train.max_epochs = v;
            }
            if let Some(v) = lr {
                cfg.train.lr = v;
            }
            info!("training with {} runs", cfg.train.runs);
            cmd_train(&cube, &labels, splits.as_deref(), split_seed, overrides.as_deref(), &out, cfg)?;
        }
        Command::Eval { cube, labels, checkpoint, mask, part } => {
            cmd_eval(&cube, &labels, &checkpoint, mask.as_deref(), part.parse()?)?;
        }
        Command::Predict { cube, checkpoint, map_out, labels_out } => {
            cmd_predict(&cube, &checkpoint, &map_out, labels_out.as_deref())?;
        }
        Command::Synth { h, w, c, k, noise, seed, out } => cmd_synth(h, w, c, k, noise, seed, &out)?,
        Command::Gradcheck { level } => cmd_gradcheck(level.parse()?)?,
        Command::Bench { scan: _, lengths, channels, state, repeats, precision, out } => {
            let precision = match precision.as_str() {
                "f32" => Precision::F32,
                "f64" => Precision::F64,
                other => return Err(Error::Config(format!("unknown precision `{other}`"))),
            };
            cmd_bench(&lengths, channels, state, repeats, precision, out.as_deref())?;
        }
    }
    Ok(())
}

/// Map a result onto the process exit code.
pub fn exit_code(result: &Result<()>) -> i32 {
    match result {
        Ok(()) => 0,
        Err(Error::Config(_)) => 2,
        Err(_) => 1,
    }
}
