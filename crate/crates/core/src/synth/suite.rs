//! The benchmark suite: a clean training split, a clean evaluation split, and
//! degraded copies of each per configured degradation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{apply_degradation, gen_sequence, write_dataset, Degradation, DegradationKind, SceneSpec, SequenceRecord, XModality};
use crate::error::{Error, Result};
use crate::tensor::Rng;

/// A degradation applied to a whole split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitDegradation {
    pub kind: DegradationKind,
    pub severity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteConfig {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    /// Clean training sequences.
    pub train: usize,
    /// Clean evaluation sequences.
    pub eval: usize,
    /// X modalities, assigned to sequences round-robin.
    pub modalities: Vec<XModality>,
    pub seed: u64,
    /// Each entry adds an `eval_<kind>` split.
    pub eval_degradations: Vec<SplitDegradation>,
    /// Each entry adds a `train_<kind>` split.
    pub train_degradations: Vec<SplitDegradation>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        let d = |kind, severity| SplitDegradation { kind, severity };
        Self {
            width: 128,
            height: 128,
            frames: 40,
            train: 20,
            eval: 10,
            modalities: XModality::ALL.to_vec(),
            seed: 0,
            eval_degradations: vec![
                d(DegradationKind::LowIllumination, 0.9),
                d(DegradationKind::HighIllumination, 0.8),
                d(DegradationKind::Occlusion, 1.0),
                d(DegradationKind::ThermalCrossover, 0.9),
                d(DegradationKind::FastMotion, 1.0),
            ],
            train_degradations: vec![d(DegradationKind::LowIllumination, 0.9)],
        }
    }
}

impl SuiteConfig {
    pub fn validate(&self) -> Result<()> {
        if self.modalities.is_empty() {
            return Err(Error::Config("modalities: at least one X modality is required".into()));
        }
        if self.frames < 2 {
            return Err(Error::Config("frames: sequences need at least 2 frames".into()));
        }
        for d in self.eval_degradations.iter().chain(&self.train_degradations) {
            if !(0.0..=1.0).contains(&d.severity) {
                return Err(Error::Config(format!("severity {} of {} outside [0, 1]", d.severity, d.kind.name())));
            }
        }
        Ok(())
    }
}

/// One sequence of the suite with the split it belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteSequence {
    pub split: String,
    pub record: SequenceRecord,
}

fn degrade_split(
    base: &[SequenceRecord],
    prefix: &str,
    d: &SplitDegradation,
    seed: u64,
    out: &mut Vec<SuiteSequence>,
) -> Result<()> {
    for (i, rec) in base.iter().enumerate() {
        if d.kind == DegradationKind::ThermalCrossover && rec.modality != XModality::Thermal {
            continue;
        }
        let n = rec.len();
        // occluders pass over the target mid-sequence, the rest span every frame
        let (start, end) = match d.kind {
            DegradationKind::Occlusion => (n / 3, n / 3 + (n / 5).max(1)),
            _ => (0, n),
        };
        let deg = Degradation {
            kind: d.kind,
            severity: d.severity,
            start,
            end: end.min(n),
            seed: Rng::derive(seed, 1000 + i as u64).next_u64(),
        };
        out.push(SuiteSequence {
            split: format!("{prefix}_{}", d.kind.name()),
            record: apply_degradation(rec, &deg)?,
        });
    }
    Ok(())
}

/// Generates the suite. Sequence `i` of a split draws its scene from a PRNG
/// derived from `(seed, split, i)` only.
pub fn gen_suite(cfg: &SuiteConfig) -> Result<Vec<SuiteSequence>> {
    cfg.validate()?;
    let make = |split_tag: u64, count: usize, prefix: &str| -> Result<Vec<SequenceRecord>> {
        (0..count)
            .map(|i| {
                let seq_seed = Rng::derive(cfg.seed, split_tag * 1_000_000 + i as u64).next_u64();
                let modality = cfg.modalities[i % cfg.modalities.len()];
                let spec = SceneSpec::random(&mut Rng::new(seq_seed), cfg.width, cfg.height, cfg.frames, modality);
                let mut rec = gen_sequence(&spec, seq_seed)?;
                rec.name = format!("{prefix}_{i:03}_{}", modality.name());
                Ok(rec)
            })
            .collect()
    };
    let train = make(1, cfg.train, "train")?;
    let eval = make(2, cfg.eval, "eval")?;
    let mut out: Vec<SuiteSequence> = train
        .iter()
        .map(|r| SuiteSequence {
            split: "train".into(),
            record: r.clone(),
        })
        .collect();
    for d in &cfg.train_degradations {
        degrade_split(&train, "train", d, cfg.seed ^ 0x7472, &mut out)?;
    }
    out.extend(eval.iter().map(|r| SuiteSequence {
        split: "eval_clean".into(),
        record: r.clone(),
    }));
    for d in &cfg.eval_degradations {
        degrade_split(&eval, "eval", d, cfg.seed ^ 0x6576, &mut out)?;
    }
    Ok(out)
}

/// Split names in first-appearance order.
pub fn split_names(suite: &[SuiteSequence]) -> Vec<String> {
    let mut names: Vec<String> = Vec::new();
    for s in suite {
        if !names.contains(&s.split) {
            names.push(s.split.clone());
        }
    }
    names
}

/// Writes `dir/<split>/<sequence>/...` for every suite sequence.
pub fn write_suite(suite: &[SuiteSequence], dir: &Path) -> Result<()> {
    for split in split_names(suite) {
        let recs: Vec<SequenceRecord> = suite
            .iter()
            .filter(|s| s.split == split)
            .map(|s| s.record.clone())
            .collect();
        write_dataset(&recs, &dir.join(&split))?;
    }
    Ok(())
}
