//! The desk-scale paradigm experiment: pretrain an RGB base on clean
//! sequences, freeze it, adapter-tune on low-light RGB+thermal, and compare
//! against the frozen RGB-only base on a held-out low-light split.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adapters::ComponentToggles;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalResult, TrackResult};
use crate::pipeline::{
    pretrain_rgb, track_sequence, train, CropParams, ModelConfig, ModelPredictor, OraclePredictor, PatrackModel,
    StreamMode, TrainConfig, TrainMode,
};
use crate::synth::{gen_suite, DegradationKind, SequenceRecord, SplitDegradation, SuiteConfig, XModality};
use crate::tensor::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParadigmConfig {
    pub suite: SuiteConfig,
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub tune: TrainConfig,
    pub seeds: Vec<u64>,
}

impl Default for ParadigmConfig {
    fn default() -> Self {
        let li = SplitDegradation {
            kind: DegradationKind::LowIllumination,
            severity: 0.95,
        };
        Self {
            suite: SuiteConfig {
                modalities: vec![XModality::Thermal],
                eval_degradations: vec![li],
                train_degradations: vec![li],
                ..SuiteConfig::default()
            },
            model: ModelConfig::default(),
            pretrain: TrainConfig {
                epochs: 10,
                steps_per_epoch: 30,
                batch: 8,
                lr: 1e-3,
                ..TrainConfig::default()
            },
            tune: TrainConfig {
                epochs: 8,
                steps_per_epoch: 25,
                batch: 8,
                lr: 1e-3,
                mode: TrainMode::AdapterTune,
                ..TrainConfig::default()
            },
            seeds: vec![0, 1, 2],
        }
    }
}

/// Scores of one seed on the held-out low-light split (and the clean split
/// for the base model).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub base_clean_sr: f64,
    pub base_sr: f64,
    pub full_sr: f64,
    pub mda_only_sr: f64,
    pub pretrain_loss: (f64, f64),
    pub full_tune_loss: (f64, f64),
    pub mda_tune_loss: (f64, f64),
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParadigmReport {
    pub seeds: Vec<SeedOutcome>,
    pub mean_base_sr: f64,
    pub mean_full_sr: f64,
    pub mean_mda_only_sr: f64,
    pub seconds: f64,
}

impl ParadigmReport {
    pub fn gain(&self) -> f64 {
        self.mean_full_sr - self.mean_base_sr
    }
}

/// Tracks every record and scores the result.
pub fn evaluate_model<T: Scalar>(
    model: &PatrackModel<T>,
    mode: StreamMode,
    records: &[SequenceRecord],
    crop: &CropParams,
) -> Result<EvalResult> {
    let results = records
        .iter()
        .map(|r| {
            let mut p = ModelPredictor::new(model, mode);
            Ok(TrackResult {
                name: r.name.clone(),
                predictions: track_sequence(&mut p, r, crop)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate(records, &results)
}

/// Scores the ground-truth oracle; SR and PR are 1 by construction.
pub fn evaluate_oracle(records: &[SequenceRecord], crop: &CropParams, grid: (usize, usize)) -> Result<EvalResult> {
    let results = records
        .iter()
        .map(|r| {
            let mut p = OraclePredictor::new(r, grid);
            Ok(TrackResult {
                name: r.name.clone(),
                predictions: track_sequence(&mut p, r, crop)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate(records, &results)
}

fn split(suite: &[crate::synth::SuiteSequence], name: &str) -> Result<Vec<SequenceRecord>> {
    let v: Vec<SequenceRecord> = suite.iter().filter(|s| s.split == name).map(|s| s.record.clone()).collect();
    if v.is_empty() {
        return Err(Error::Config(format!("suite has no split {name}")));
    }
    Ok(v)
}

fn first_last(stats: &[crate::pipeline::EpochStats]) -> (f64, f64) {
    (stats.first().map_or(f64::NAN, |s| s.loss), stats.last().map_or(f64::NAN, |s| s.loss))
}

/// Runs the protocol for one seed. `log` receives progress lines.
pub fn run_seed(cfg: &ParadigmConfig, seed: u64, log: &mut dyn FnMut(&str)) -> Result<SeedOutcome> {
    let start = Instant::now();
    let suite = gen_suite(&SuiteConfig {
        seed,
        ..cfg.suite.clone()
    })?;
    let li = DegradationKind::LowIllumination.name();
    let train_clean = split(&suite, "train")?;
    let train_li = split(&suite, &format!("train_{li}"))?;
    let eval_clean = split(&suite, "eval_clean")?;
    let eval_li = split(&suite, &format!("eval_{li}"))?;
    let bc = &cfg.model.backbone;
    let crop = CropParams::new(bc.template_size, bc.search_size);

    let mut base = PatrackModel::<f32>::new(&cfg.model.base(), seed)?;
    let pre_cfg = TrainConfig {
        seed,
        ..cfg.pretrain.clone()
    };
    let pre = pretrain_rgb(&mut base, &train_clean, &pre_cfg, &crop, |s| {
        log(&format!("seed {seed} pretrain epoch {} loss {:.4}", s.epoch, s.loss))
    })?;
    let base_clean_sr = evaluate_model(&base, StreamMode::RgbOnly, &eval_clean, &crop)?.aggregate.sr;
    let base_sr = evaluate_model(&base, StreamMode::RgbOnly, &eval_li, &crop)?.aggregate.sr;
    log(&format!("seed {seed} base SR clean {base_clean_sr:.4} low-light {base_sr:.4}"));

    let mut tune_variant = |components: ComponentToggles, tag: &str| -> Result<(f64, (f64, f64))> {
        let mut mc = cfg.model.clone();
        mc.adapters.components = components;
        let mut m = PatrackModel::<f32>::new(&mc, seed)?;
        m.load_base(&base.store)?;
        let tc = TrainConfig {
            seed: seed.wrapping_add(1000),
            mode: TrainMode::AdapterTune,
            ..cfg.tune.clone()
        };
        let stats = train(&mut m, &train_li, &tc, &crop, |s| {
            log(&format!("seed {seed} {tag} epoch {} loss {:.4}", s.epoch, s.loss))
        })?;
        let sr = evaluate_model(&m, StreamMode::Dual, &eval_li, &crop)?.aggregate.sr;
        log(&format!("seed {seed} {tag} low-light SR {sr:.4}"));
        Ok((sr, first_last(&stats)))
    };
    let (full_sr, full_loss) = tune_variant(cfg.model.adapters.components, "full")?;
    let (mda_only_sr, mda_loss) = tune_variant(
        ComponentToggles {
            mda: true,
            cea: false,
            ha: false,
        },
        "mda-only",
    )?;
    Ok(SeedOutcome {
        seed,
        base_clean_sr,
        base_sr,
        full_sr,
        mda_only_sr,
        pretrain_loss: first_last(&pre),
        full_tune_loss: full_loss,
        mda_tune_loss: mda_loss,
        seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn run_paradigm(cfg: &ParadigmConfig, log: &mut dyn FnMut(&str)) -> Result<ParadigmReport> {
    if cfg.seeds.is_empty() {
        return Err(Error::Config("paradigm experiment needs at least one seed".into()));
    }
    let start = Instant::now();
    let seeds = cfg
        .seeds
        .iter()
        .map(|&s| run_seed(cfg, s, log))
        .collect::<Result<Vec<_>>>()?;
    let n = seeds.len() as f64;
    let mean = |f: fn(&SeedOutcome) -> f64| seeds.iter().map(f).sum::<f64>() / n;
    Ok(ParadigmReport {
        mean_base_sr: mean(|s| s.base_sr),
        mean_full_sr: mean(|s| s.full_sr),
        mean_mda_only_sr: mean(|s| s.mda_only_sr),
        seconds: start.elapsed().as_secs_f64(),
        seeds,
    })
}
