//! Ablation variants of the pipeline, evaluated on shared episode seeds.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use crate::data::{generate_dataset, Dataset, DatasetSpec, ModalityKind};
use crate::distill::{run_distill, DistillConfig};
use crate::error::{Error, Result};
use crate::eval::{ci95_halfwidth, run_evaluation, EvalConfig, EvalResult};
use crate::nn::{Encoder, EncoderConfig};
use crate::pretrain::{init_model, train, PretrainConfig};

/// Every setting of one pipeline run.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub dataset: DatasetSpec,
    pub encoder: EncoderConfig,
    /// One entry per modality.
    pub pretrain: BTreeMap<ModalityKind, PretrainConfig>,
    pub distill: DistillConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            dataset: DatasetSpec::default(),
            encoder: EncoderConfig::default(),
            pretrain: ModalityKind::ALL
                .into_iter()
                .map(|k| (k, PretrainConfig::new(k)))
                .collect(),
            distill: DistillConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Same settings with every stage seeded by `seed`.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.dataset.seed = seed;
        for p in c.pretrain.values_mut() {
            p.seed = seed;
        }
        c.distill.seed = seed;
        c.eval.seed = seed;
        c.eval.inference.seed = seed;
        c.eval.head.seed = seed;
        c
    }

    pub fn pretrain_config(&self, kind: ModalityKind) -> Result<&PretrainConfig> {
        self.pretrain.get(&kind).ok_or_else(|| {
            Error::config("modalities", format!("no pretraining settings for {kind}"))
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.encoder.validate()?;
        for p in self.pretrain.values() {
            p.validate()?;
        }
        self.distill.validate()?;
        self.eval.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Variant {
    /// Teachers for every configured modality, distilled into the student.
    Full,
    /// The RGB teacher alone, no distillation.
    OnlyRgb,
    /// RGB teacher pretrained without the classification term, no distillation.
    OnlyRecon,
    /// RGB teacher pretrained without target reconstruction, no distillation.
    OnlySource,
    /// Distillation from RGB and POSE teachers only.
    RgbPose,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::OnlyRgb,
        Variant::OnlyRecon,
        Variant::OnlySource,
        Variant::RgbPose,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::OnlyRgb => "only_rgb",
            Variant::OnlyRecon => "only_recon",
            Variant::OnlySource => "only_source",
            Variant::RgbPose => "rgb_pose",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config("ablation_variants", format!("unknown variant `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
struct TeacherKey {
    modality: ModalityKind,
    lambda_bits: u64,
    target_recon: bool,
}

/// Trains teachers on demand and reuses identical ones across variants.
struct TeacherCache<'a> {
    dataset: &'a Dataset,
    config: &'a PipelineConfig,
    trained: BTreeMap<TeacherKey, Encoder>,
}

impl<'a> TeacherCache<'a> {
    fn get(&mut self, cfg: PretrainConfig) -> Result<Encoder> {
        let key = TeacherKey {
            modality: cfg.modality,
            lambda_bits: cfg.lambda_ce.to_bits(),
            target_recon: cfg.target_recon,
        };
        if let Some(e) = self.trained.get(&key) {
            return Ok(e.clone());
        }
        log::info!(
            "ablation: pretraining {} teacher (lambda_ce={}, target_recon={})",
            cfg.modality,
            cfg.lambda_ce,
            cfg.target_recon
        );
        let model = init_model(self.dataset, &self.config.encoder, &cfg)?;
        let model = train(
            model,
            &self.dataset.source,
            &self.dataset.target_unlabeled,
            &cfg,
            |_, _| {},
        )?;
        self.trained.insert(key, model.encoder.clone());
        Ok(model.encoder)
    }

    fn default_teacher(&mut self, kind: ModalityKind) -> Result<Encoder> {
        let cfg = self.config.pretrain_config(kind)?.clone();
        self.get(cfg)
    }

    fn distilled(&mut self, modalities: &BTreeSet<ModalityKind>) -> Result<Encoder> {
        let mut teachers = BTreeMap::new();
        for &k in modalities {
            teachers.insert(k, self.default_teacher(k)?);
        }
        let cfg = DistillConfig {
            modalities: modalities.clone(),
            ..self.config.distill.clone()
        };
        log::info!("ablation: distilling from {modalities:?}");
        Ok(run_distill(&teachers, &self.dataset.target_unlabeled, &cfg, |_, _| {})?.encoder)
    }
}

/// The few-shot encoder a variant produces on `dataset`.
fn variant_encoder(cache: &mut TeacherCache<'_>, variant: Variant) -> Result<Encoder> {
    let rgb = cache.config.pretrain_config(ModalityKind::Rgb)?.clone();
    match variant {
        Variant::Full => {
            let modalities = cache.config.distill.modalities.clone();
            cache.distilled(&modalities)
        }
        Variant::OnlyRgb => cache.get(rgb),
        Variant::OnlyRecon => cache.get(PretrainConfig {
            lambda_ce: 0.0,
            ..rgb
        }),
        Variant::OnlySource => cache.get(PretrainConfig {
            target_recon: false,
            ..rgb
        }),
        Variant::RgbPose => cache.distilled(
            &[ModalityKind::Rgb, ModalityKind::Pose]
                .into_iter()
                .collect(),
        ),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRun {
    pub variant: Variant,
    pub seed: u64,
    pub result: EvalResult,
}

/// `full - variant` over episodes paired by (seed, episode index).
#[derive(Clone, Debug, PartialEq)]
pub struct PairedDelta {
    pub variant: Variant,
    pub mean_delta: f64,
    pub ci95: f64,
    pub pairs: usize,
}

impl PairedDelta {
    pub fn from_pairs(variant: Variant, full: &[f64], other: &[f64]) -> Result<Self> {
        if full.len() != other.len() {
            return Err(Error::contract("paired deltas need equally many episodes"));
        }
        let diffs: Vec<f64> = full.iter().zip(other).map(|(a, b)| a - b).collect();
        Ok(PairedDelta {
            variant,
            mean_delta: diffs.iter().sum::<f64>() / diffs.len().max(1) as f64,
            ci95: ci95_halfwidth(&diffs),
            pairs: diffs.len(),
        })
    }
}

/// Pooled accuracy of one variant over all seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct VariantSummary {
    pub variant: Variant,
    pub mean_acc: f64,
    pub ci95: f64,
    pub episodes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub runs: Vec<AblationRun>,
    pub summaries: Vec<VariantSummary>,
    pub deltas: Vec<PairedDelta>,
}

impl AblationReport {
    fn pooled(&self, variant: Variant) -> Vec<f64> {
        self.runs
            .iter()
            .filter(|r| r.variant == variant)
            .flat_map(|r| r.result.per_episode_acc.iter().copied())
            .collect()
    }

    pub fn from_runs(runs: Vec<AblationRun>) -> Result<Self> {
        let mut report = AblationReport {
            runs,
            summaries: Vec::new(),
            deltas: Vec::new(),
        };
        let variants: BTreeSet<Variant> = report.runs.iter().map(|r| r.variant).collect();
        for &v in &variants {
            let accs = report.pooled(v);
            report.summaries.push(VariantSummary {
                variant: v,
                mean_acc: accs.iter().sum::<f64>() / accs.len().max(1) as f64,
                ci95: ci95_halfwidth(&accs),
                episodes: accs.len(),
            });
        }
        if variants.contains(&Variant::Full) {
            let full = report.pooled(Variant::Full);
            for &v in variants.iter().filter(|&&v| v != Variant::Full) {
                report
                    .deltas
                    .push(PairedDelta::from_pairs(v, &full, &report.pooled(v))?);
            }
        }
        Ok(report)
    }

    pub fn summary(&self, variant: Variant) -> Option<&VariantSummary> {
        self.summaries.iter().find(|s| s.variant == variant)
    }

    pub fn delta(&self, variant: Variant) -> Option<&PairedDelta> {
        self.deltas.iter().find(|d| d.variant == variant)
    }
}

/// Runs the full method and each requested variant for every seed. Within a
/// seed all variants share the dataset and the episode sequence.
pub fn run_ablations(
    config: &PipelineConfig,
    seeds: &[u64],
    variants: &[Variant],
    mut on_result: impl FnMut(&AblationRun),
) -> Result<AblationReport> {
    config.validate()?;
    if seeds.is_empty() {
        return Err(Error::config(
            "ablation_seeds",
            "at least one seed is required",
        ));
    }
    let mut wanted: BTreeSet<Variant> = variants.iter().copied().collect();
    wanted.insert(Variant::Full);
    let mut runs = Vec::new();
    for &s in seeds {
        let cfg = config.with_seed(s);
        let dataset = generate_dataset(&cfg.dataset)?;
        let mut cache = TeacherCache {
            dataset: &dataset,
            config: &cfg,
            trained: BTreeMap::new(),
        };
        for &v in &wanted {
            let encoder = variant_encoder(&mut cache, v)?;
            let result = run_evaluation(&encoder, &dataset.target_labeled, &cfg.eval)?;
            log::info!(
                "ablation seed {s} {v}: {:.4} +- {:.4}",
                result.mean_acc,
                result.ci95
            );
            let run = AblationRun {
                variant: v,
                seed: s,
                result,
            };
            on_result(&run);
            runs.push(run);
        }
    }
    AblationReport::from_runs(runs)
}
