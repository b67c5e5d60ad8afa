//! `patrack`: synthetic data, training, evaluation and verification.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use patrack_core::checkpoint::{load_checkpoint, save_checkpoint};
use patrack_core::config::RunConfig;
use patrack_core::metrics::{evaluate_with, modality_entropy, EvalResult};
use patrack_core::pipeline::{
    track_all, train, ModelPredictor, OraclePredictor, PatrackModel, StreamMode, TrainConfig, TrainMode,
};
use patrack_core::synth::{gen_suite, read_dataset, write_suite, Attribute, SequenceRecord};
use patrack_core::verify::gradcheck_suite;
use patrack_core::Error;

#[derive(Parser)]
#[command(name = "patrack", version, about = "Progressive-adaptation RGB+X tracker at desk scale")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic benchmark suite.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `synth.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the RGB base model (backbone and head).
    Pretrain(TrainArgs),
    /// Tune adapters on RGB+X with the base model frozen.
    Train(TrainArgs),
    /// Track every sequence and score the result.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        /// Replace the model with a stub that returns the ground truth.
        #[arg(long)]
        oracle: bool,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every component and the assembled model.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Coordinates sampled from the assembled model.
        #[arg(long, default_value_t = 50)]
        samples: usize,
        #[arg(long)]
        json: bool,
        /// Test hook: scale analytic gradients by this factor.
        #[arg(long, hide = true, default_value_t = 1.0)]
        corrupt_gradient: f64,
    },
    /// Parameter counts per component.
    Params {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Mean image entropy per modality.
    Entropy {
        #[arg(long)]
        data: PathBuf,
        /// Also write the JSON report here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out_checkpoint: PathBuf,
    #[arg(long)]
    init_checkpoint: Option<PathBuf>,
}

enum Failure {
    Core(Error),
    /// A verification tolerance was exceeded.
    Verify(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Core(e) => match e {
                Error::Config(_) | Error::Usage(_) | Error::Dimension { .. } => 2,
                Error::Io { .. } | Error::Parse { .. } | Error::Input(_) | Error::Json(_) => 3,
                Error::Numeric(_) | Error::Undefined(_) => 4,
                Error::Integrity(_) => 5,
            },
            Failure::Verify(_) => 6,
        }
    }
}

type CliResult = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Synth { config, out, seed } => cmd_synth(config.as_deref(), &out, seed),
        Cmd::Pretrain(a) => cmd_train(&a, TrainMode::PretrainRgb),
        Cmd::Train(a) => cmd_train(&a, TrainMode::AdapterTune),
        Cmd::Eval {
            config,
            checkpoint,
            oracle,
            data,
            out,
        } => cmd_eval(config.as_deref(), checkpoint.as_deref(), oracle, data.as_deref(), &out),
        Cmd::Gradcheck {
            config,
            samples,
            json,
            corrupt_gradient,
        } => cmd_gradcheck(config.as_deref(), samples, json, corrupt_gradient),
        Cmd::Params { config, json } => cmd_params(config.as_deref(), json),
        Cmd::Entropy { data, out, json } => cmd_entropy(&data, out.as_deref(), json),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Core(e) => eprintln!("error: {e}"),
                Failure::Verify(m) => eprintln!("verification failed: {m}"),
            }
            ExitCode::from(f.code())
        }
    }
}

fn load_config(path: Option<&Path>) -> patrack_core::Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> patrack_core::Result<()> {
    fs::write(path, bytes).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn create_dir(path: &Path) -> patrack_core::Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn to_json<T: Serialize>(v: &T) -> patrack_core::Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

/// `PATRACK_THREADS`, default 1.
fn threads() -> patrack_core::Result<usize> {
    match std::env::var("PATRACK_THREADS") {
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("PATRACK_THREADS must be a positive integer, got {v:?}"))),
        Err(_) => Ok(1),
    }
}

fn load_data(cfg: &RunConfig, data: Option<&Path>) -> patrack_core::Result<Vec<SequenceRecord>> {
    let dir = match (data, &cfg.data.path) {
        (Some(d), _) => d.to_path_buf(),
        (None, Some(p)) => PathBuf::from(p),
        (None, None) => return Err(Error::Config("no dataset: pass --data or set data.path".into())),
    };
    let mut recs = read_dataset(&dir)?;
    if let Some(m) = cfg.data.modality {
        recs.retain(|r| r.modality == m);
        if recs.is_empty() {
            return Err(Error::Input(format!("{} has no {} sequences", dir.display(), m.name())));
        }
    }
    Ok(recs)
}

fn cmd_synth(config: Option<&Path>, out: &Path, seed: Option<u64>) -> CliResult {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.synth.seed = s;
    }
    cfg.validate()?;
    let suite = gen_suite(&cfg.synth)?;
    create_dir(out)?;
    write_suite(&suite, out)?;
    write(&out.join("config.json"), to_json(&cfg)?)?;
    let mut splits: BTreeMap<&str, usize> = BTreeMap::new();
    let mut tags: BTreeMap<Attribute, usize> = BTreeMap::new();
    for s in &suite {
        *splits.entry(&s.split).or_default() += 1;
        for t in s.record.attributes.iter().flatten() {
            *tags.entry(*t).or_default() += 1;
        }
    }
    println!("{} sequences written to {}", suite.len(), out.display());
    for (split, n) in &splits {
        println!("  {split:<28} {n:>4}");
    }
    println!("attribute frames:");
    for (a, n) in &tags {
        println!("  {a:<4} {n:>6}");
    }
    Ok(())
}

fn cmd_train(a: &TrainArgs, mode: TrainMode) -> CliResult {
    let mut cfg = load_config(a.config.as_deref())?;
    cfg.train.mode = mode;
    let model_cfg = cfg.model()?;
    let data = load_data(&cfg, a.data.as_deref())?;
    let mut model = match (mode, &a.init_checkpoint) {
        (TrainMode::PretrainRgb, None) => PatrackModel::<f32>::new(&model_cfg.base(), cfg.train.seed)?,
        (TrainMode::PretrainRgb, Some(p)) => load_checkpoint(p)?,
        (TrainMode::AdapterTune, None) => {
            return Err(Error::Config("train needs --init-checkpoint with the pretrained base".into()).into())
        }
        (TrainMode::AdapterTune, Some(p)) => {
            let base = load_checkpoint(p)?;
            if !model_cfg.adapters.components.any() {
                return Err(Error::Config("train needs at least one adapter component".into()).into());
            }
            let mut m = PatrackModel::<f32>::new(&model_cfg, cfg.train.seed)?;
            m.load_base(&base.store)?;
            m
        }
    };
    let tc = TrainConfig { mode, ..cfg.train.clone() };
    train(&mut model, &data, &tc, &cfg.crop(), |s| {
        println!(
            "epoch {:>3}  lr {:.3e}  loss {:.6}  focal {:.6}  l1 {:.6}  giou {:.6}",
            s.epoch, s.lr, s.loss, s.focal, s.l1, s.giou
        )
    })?;
    save_checkpoint(&model, &a.out_checkpoint)?;
    let echo = config_echo_path(&a.out_checkpoint);
    write(&echo, to_json(&cfg)?)?;
    println!("checkpoint written to {}", a.out_checkpoint.display());
    Ok(())
}

/// `<checkpoint>.config.json` next to the checkpoint.
fn config_echo_path(ckpt: &Path) -> PathBuf {
    let mut name = ckpt.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".config.json");
    ckpt.with_file_name(name)
}

fn cmd_eval(config: Option<&Path>, checkpoint: Option<&Path>, oracle: bool, data: Option<&Path>, out: &Path) -> CliResult {
    let cfg = load_config(config)?;
    let recs = load_data(&cfg, data)?;
    let threads = threads()?;
    let crop = cfg.crop();
    let (results, model_cfg) = if oracle {
        let grid = cfg.backbone.layout().search_grid;
        (track_all(&recs, &crop, threads, |r| OraclePredictor::new(r, grid))?, None)
    } else {
        let path = checkpoint.ok_or_else(|| Error::Config("eval needs --checkpoint or --oracle".into()))?;
        let model = load_checkpoint(path)?;
        let mode = if model.has_adapters() {
            StreamMode::Dual
        } else {
            StreamMode::RgbOnly
        };
        let b = model.config.backbone;
        let crop = patrack_core::pipeline::CropParams::new(b.template_size, b.search_size);
        (
            track_all(&recs, &crop, threads, |_| ModelPredictor::new(&model, mode))?,
            Some(model.config.clone()),
        )
    };
    let ev = evaluate_with(&recs, &results, &cfg.eval)?;
    create_dir(out)?;
    write(&out.join("metrics.json"), to_json(&ev)?)?;
    write(&out.join("predictions.json"), to_json(&results)?)?;
    write(&out.join("success.csv"), ev.success_curve.to_csv())?;
    write(&out.join("precision.csv"), ev.precision_curve.to_csv())?;
    write(&out.join("normalized_precision.csv"), ev.normalized_precision_curve.to_csv())?;
    #[derive(Serialize)]
    struct Echo<'a> {
        run: &'a RunConfig,
        model: Option<patrack_core::pipeline::ModelConfig>,
        oracle: bool,
    }
    write(
        &out.join("config.json"),
        to_json(&Echo {
            run: &cfg,
            model: model_cfg,
            oracle,
        })?,
    )?;
    print_summary(&ev);
    Ok(())
}

fn print_summary(ev: &EvalResult) {
    println!("{:<32} {:>7} {:>7} {:>7} {:>7}", "sequence", "PR", "SR", "NPR", "F");
    for s in &ev.sequences {
        println!("{:<32} {:>7.4} {:>7.4} {:>7.4} {:>7.4}", s.name, s.pr, s.sr, s.npr, s.f_score);
    }
    let a = &ev.aggregate;
    println!("{:<32} {:>7.4} {:>7.4} {:>7.4} {:>7.4}", "mean", a.pr, a.sr, a.npr, a.f_score);
    println!("Pr {:.4}  Re {:.4}  at confidence {:.2}", a.precision, a.recall, a.f_threshold);
    if !ev.attributes.is_empty() {
        println!("{:<6} {:>7} {:>7} {:>7}", "attr", "frames", "PR", "SR");
        for (k, m) in &ev.attributes {
            println!("{:<6} {:>7} {:>7.4} {:>7.4}", k.to_string(), m.frames, m.pr, m.sr);
        }
    }
}

fn cmd_gradcheck(config: Option<&Path>, samples: usize, json: bool, corrupt: f64) -> CliResult {
    let cfg = load_config(config)?;
    let rows = gradcheck_suite(&cfg.model()?, samples, corrupt, cfg.train.seed)?;
    if json {
        print!("{}", to_json(&rows)?);
    } else {
        println!("{:<10} {:>12} {:>10} {:>8}  worst", "component", "max rel err", "tolerance", "checked");
        for r in &rows {
            let worst = r.worst.as_ref().map_or("-".to_string(), |(n, i)| format!("{n}[{i}]"));
            println!(
                "{:<10} {:>12.3e} {:>10.0e} {:>8}  {worst}{}",
                r.component,
                r.max_rel_err,
                r.tolerance,
                r.checked,
                if r.pass { "" } else { "  FAIL" }
            );
        }
    }
    let failed: Vec<String> = rows
        .iter()
        .filter(|r| !r.pass)
        .map(|r| {
            let (n, i) = r.worst.clone().unwrap_or_default();
            format!("{} max rel err {:.3e} at {n}[{i}]", r.component, r.max_rel_err)
        })
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Verify(failed.join("; ")))
    }
}

#[derive(Serialize)]
struct ParamRow {
    component: &'static str,
    params: usize,
    trainable: bool,
}

#[derive(Serialize)]
struct ParamReport {
    components: Vec<ParamRow>,
    total: usize,
    frozen: usize,
    trainable: usize,
    trainable_fraction: f64,
}

fn cmd_params(config: Option<&Path>, json: bool) -> CliResult {
    let cfg = load_config(config)?;
    let c = patrack_core::pipeline::count_params(&cfg.model()?)?;
    // adapter tuning freezes the foundation and trains every adapter
    let components = vec![
        ParamRow {
            component: "backbone",
            params: c.backbone,
            trainable: false,
        },
        ParamRow {
            component: "head",
            params: c.head,
            trainable: false,
        },
        ParamRow {
            component: "mda",
            params: c.mda,
            trainable: true,
        },
        ParamRow {
            component: "cea",
            params: c.cea,
            trainable: true,
        },
        ParamRow {
            component: "ha",
            params: c.ha,
            trainable: true,
        },
    ];
    let total = c.total();
    let trainable = c.adapters();
    let report = ParamReport {
        components,
        total,
        frozen: total - trainable,
        trainable,
        trainable_fraction: trainable as f64 / total as f64,
    };
    if json {
        print!("{}", to_json(&report)?);
    } else {
        println!("{:<10} {:>10}  {}", "component", "params", "status");
        for r in &report.components {
            println!(
                "{:<10} {:>10}  {}",
                r.component,
                r.params,
                if r.trainable { "trainable" } else { "frozen" }
            );
        }
        println!("{:<10} {:>10}", "total", report.total);
        println!("{:<10} {:>10}", "frozen", report.frozen);
        println!("{:<10} {:>10}", "trainable", report.trainable);
        println!("trainable fraction {:.6}", report.trainable_fraction);
    }
    Ok(())
}

fn cmd_entropy(data: &Path, out: Option<&Path>, json: bool) -> CliResult {
    let recs = read_dataset(data)?;
    let report = modality_entropy(&recs);
    let text = to_json(&report)?;
    if let Some(p) = out {
        write(p, &text)?;
    }
    if json {
        print!("{text}");
    } else {
        println!("{:<8} {:>8} {:>10}", "modality", "frames", "entropy");
        for (k, e) in &report {
            println!("{:<8} {:>8} {:>10.4}", k, e.frames, e.mean_bits);
        }
    }
    Ok(())
}
