//! Flat `key = value` run configuration with a typed key registry.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::ablation::{PipelineConfig, Variant};
use crate::data::{Appearance, DatasetSpec, ModalityKind, ModalitySpec, Split};
use crate::distill::DistillConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::fewshot::{HeadTrainConfig, InferenceConfig};
use crate::nn::{EncoderConfig, OptimConfig};
use crate::pretrain::PretrainConfig;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ValueKind {
    /// Unsigned integer in `min..=max`.
    Int {
        min: u64,
        max: u64,
    },
    /// Float in `[min, max]`, or `[min, max)` when `max_open`.
    Float {
        min: f64,
        max: f64,
        max_open: bool,
    },
    Bool,
    Text,
    /// One of a fixed set of names.
    Choice(&'static [&'static str]),
    /// Comma-separated modality names.
    Modalities,
    /// Comma-separated mask ratios in `[0, 1)`.
    Ratios,
    /// Comma-separated positive integers.
    Counts,
    /// Comma-separated integers.
    Seeds,
    /// Comma-separated ablation variant names.
    Variants,
}

#[derive(Clone, Copy, Debug)]
pub struct KeyDef {
    pub key: &'static str,
    pub default: &'static str,
    pub kind: ValueKind,
    pub doc: &'static str,
    /// Whether the value affects produced artifacts and so enters the hash.
    pub hashed: bool,
}

const fn int(
    key: &'static str,
    default: &'static str,
    min: u64,
    max: u64,
    doc: &'static str,
) -> KeyDef {
    KeyDef {
        key,
        default,
        kind: ValueKind::Int { min, max },
        doc,
        hashed: true,
    }
}

const fn float(
    key: &'static str,
    default: &'static str,
    min: f64,
    max: f64,
    doc: &'static str,
) -> KeyDef {
    KeyDef {
        key,
        default,
        kind: ValueKind::Float {
            min,
            max,
            max_open: false,
        },
        doc,
        hashed: true,
    }
}

const fn ratio(key: &'static str, default: &'static str, doc: &'static str) -> KeyDef {
    KeyDef {
        key,
        default,
        kind: ValueKind::Float {
            min: 0.0,
            max: 1.0,
            max_open: true,
        },
        doc,
        hashed: true,
    }
}

const fn other(
    key: &'static str,
    default: &'static str,
    kind: ValueKind,
    doc: &'static str,
) -> KeyDef {
    KeyDef {
        key,
        default,
        kind,
        doc,
        hashed: true,
    }
}

const BIG: u64 = 1 << 40;
const INF: f64 = f64::INFINITY;

/// Every accepted key with its default and documentation.
pub const KEYS: &[KeyDef] = &[
    int(
        "seed",
        "0",
        0,
        u64::MAX,
        "global seed; every stage derives its randomness from it",
    ),
    KeyDef {
        key: "out_dir",
        default: "runs/default",
        kind: ValueKind::Text,
        doc: "directory for datasets, checkpoints, logs and reports",
        hashed: false,
    },
    // synthetic data
    int(
        "n_source_classes",
        "8",
        1,
        10_000,
        "labeled source motion classes",
    ),
    int(
        "n_target_classes",
        "8",
        1,
        10_000,
        "novel target motion classes",
    ),
    int(
        "samples_per_class",
        "20",
        1,
        1_000_000,
        "samples per class in each split",
    ),
    int("frames", "8", 1, 4096, "frames per clip"),
    int("rgb_size", "32", 1, 4096, "RGB height and width in pixels"),
    int("rgb_patch", "4", 1, 4096, "RGB patch size"),
    int(
        "flow_size",
        "32",
        1,
        4096,
        "FLOW height and width in pixels",
    ),
    int("flow_patch", "4", 1, 4096, "FLOW patch size"),
    int("pose_size", "16", 1, 4096, "POSE heatmap height and width"),
    int("pose_patch", "2", 1, 4096, "POSE patch size"),
    int(
        "source_background",
        "0",
        0,
        3,
        "source background texture id",
    ),
    float(
        "source_brightness",
        "0",
        -1.0,
        1.0,
        "source brightness shift",
    ),
    float("source_noise", "0.02", 0.0, 1.0, "source pixel noise std"),
    int(
        "target_background",
        "1",
        0,
        3,
        "target background texture id",
    ),
    float(
        "target_brightness",
        "0.25",
        -1.0,
        1.0,
        "target brightness shift",
    ),
    float("target_noise", "0.08", 0.0, 1.0, "target pixel noise std"),
    float(
        "pose_sigma",
        "2.857142857142857",
        1e-9,
        INF,
        "keypoint heatmap std in POSE pixels",
    ),
    float(
        "sprite_radius",
        "3",
        0.5,
        INF,
        "sprite disc radius in RGB pixels",
    ),
    float(
        "speed_scale",
        "1",
        0.0,
        INF,
        "multiplier on every class speed",
    ),
    // model
    int("embed_dim", "64", 1, 65_536, "encoder width d"),
    int("depth", "4", 1, 256, "encoder blocks"),
    int("heads", "4", 1, 256, "encoder attention heads"),
    int(
        "mlp_ratio",
        "4",
        1,
        64,
        "MLP hidden width as a multiple of d",
    ),
    int("tubelet", "2", 1, 64, "frames per token"),
    int("decoder_dim", "32", 1, 65_536, "decoder width"),
    int("decoder_depth", "1", 1, 256, "decoder blocks"),
    int("decoder_heads", "2", 1, 256, "decoder attention heads"),
    // pretraining
    ratio("rho_pretrain", "0.9", "tube mask ratio during pretraining"),
    int(
        "pretrain_epochs",
        "30",
        0,
        BIG,
        "pretraining epochs over the source set",
    ),
    int(
        "pretrain_batch",
        "16",
        1,
        BIG,
        "source clips per step (paired with as many target clips)",
    ),
    float(
        "lambda_ce_rgb",
        "0.05",
        0.0,
        INF,
        "classification weight for the RGB teacher",
    ),
    float(
        "lambda_ce_flow",
        "0.01",
        0.0,
        INF,
        "classification weight for the FLOW teacher",
    ),
    float(
        "lambda_ce_pose",
        "0.01",
        0.0,
        INF,
        "classification weight for the POSE teacher",
    ),
    other(
        "target_recon",
        "true",
        ValueKind::Bool,
        "include the target reconstruction term",
    ),
    // optimiser, shared by pretraining and distillation
    float(
        "peak_lr",
        "0.002",
        1e-12,
        INF,
        "learning rate after warm-up",
    ),
    float(
        "min_lr",
        "0.000001",
        0.0,
        INF,
        "learning rate at the last step",
    ),
    float(
        "warmup_frac",
        "0.1",
        0.0,
        1.0,
        "fraction of steps in linear warm-up",
    ),
    float(
        "weight_decay",
        "0.05",
        0.0,
        INF,
        "decoupled weight decay on weight matrices",
    ),
    ratio("beta1", "0.9", "first-moment decay"),
    ratio("beta2", "0.95", "second-moment decay"),
    float("adam_eps", "0.00000001", 1e-30, INF, "denominator epsilon"),
    // distillation
    ratio(
        "rho_distill",
        "0.75",
        "tube mask ratio for student and teachers",
    ),
    int(
        "distill_epochs",
        "30",
        0,
        BIG,
        "distillation epochs over the unlabeled target set",
    ),
    int("distill_batch", "16", 1, BIG, "clips per distillation step"),
    other(
        "modalities",
        "rgb,flow,pose",
        ValueKind::Modalities,
        "teachers distilled into the student; must include rgb",
    ),
    float(
        "weight_rgb",
        "1",
        0.0,
        INF,
        "distillation weight of the RGB teacher",
    ),
    float(
        "weight_flow",
        "1",
        0.0,
        INF,
        "distillation weight of the FLOW teacher",
    ),
    float(
        "weight_pose",
        "1",
        0.0,
        INF,
        "distillation weight of the POSE teacher",
    ),
    other(
        "distill_features",
        "tokens",
        ValueKind::Choice(&["tokens", "pooled"]),
        "distil visible token features or pooled clip features",
    ),
    other(
        "distill_shared_mask",
        "true",
        ValueKind::Bool,
        "teachers see the student's tube mask; required for tokens",
    ),
    // few-shot evaluation
    ratio("rho_infer", "0.75", "tube mask ratio at inference"),
    int("ensemble", "2", 1, 1024, "ensemble size P"),
    int("nway", "5", 1, 10_000, "classes per episode"),
    int("kshot", "1", 1, 10_000, "support clips per class"),
    int("queries", "15", 1, 10_000, "query clips per class"),
    int("episodes", "600", 1, BIG, "evaluation episodes"),
    int(
        "head_iters",
        "100",
        0,
        BIG,
        "full-batch gradient steps for the few-shot head",
    ),
    float("head_lr", "0.01", 0.0, INF, "few-shot head learning rate"),
    float(
        "head_weight_decay",
        "0.0001",
        0.0,
        INF,
        "few-shot head L2 penalty",
    ),
    // cost and trade-off
    int("runtime_iters", "50", 1, BIG, "timed inference repetitions"),
    int("runtime_warmup", "5", 0, BIG, "untimed warm-up repetitions"),
    other(
        "tradeoff_rhos",
        "0,0.75,0.9",
        ValueKind::Ratios,
        "inference mask ratios of the sweep",
    ),
    other(
        "tradeoff_ensembles",
        "1,2,3",
        ValueKind::Counts,
        "ensemble sizes of the sweep",
    ),
    // ablations
    other(
        "ablation_seeds",
        "0,1,2",
        ValueKind::Seeds,
        "pipeline seeds of the ablation study",
    ),
    int(
        "ablation_episodes",
        "200",
        1,
        BIG,
        "episodes per variant and seed",
    ),
    other(
        "ablation_variants",
        "only_rgb,only_recon,only_source,rgb_pose",
        ValueKind::Variants,
        "variants compared with the full method",
    ),
    // embedding export
    other(
        "embed_split",
        "target_labeled",
        ValueKind::Text,
        "split to embed: source, target_unlabeled or target_labeled",
    ),
    other(
        "embed_encoder",
        "student",
        ValueKind::Text,
        "encoder to embed with: student, rgb, flow or pose",
    ),
];

pub fn key_def(key: &str) -> Option<&'static KeyDef> {
    KEYS.iter().find(|k| k.key == key)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Default,
    File,
    Flag,
}

impl Provenance {
    pub fn is_user_set(self) -> bool {
        self != Provenance::Default
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Default => "default",
            Provenance::File => "file",
            Provenance::Flag => "flag",
        })
    }
}

fn list(value: &str) -> impl Iterator<Item = &str> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty())
}

/// Checks `value` against `def` and returns its canonical text.
fn canonical(def: &KeyDef, value: &str) -> Result<String> {
    let value = value.trim();
    let err = |msg: String| Error::config(def.key, msg);
    match def.kind {
        ValueKind::Int { min, max } => {
            let v: u64 = value
                .parse()
                .map_err(|_| err(format!("expected an integer, got `{value}`")))?;
            if v < min || v > max {
                return Err(err(format!("{v} is outside [{min}, {max}]")));
            }
            Ok(v.to_string())
        }
        ValueKind::Float { min, max, max_open } => {
            let v: f64 = value
                .parse()
                .map_err(|_| err(format!("expected a number, got `{value}`")))?;
            let above = if max_open { v >= max } else { v > max };
            if !v.is_finite() || v < min || above {
                let close = if max_open { ")" } else { "]" };
                return Err(err(format!("{value} is outside [{min}, {max}{close}")));
            }
            Ok(v.to_string())
        }
        ValueKind::Bool => match value.to_ascii_lowercase().as_str() {
            "true" | "1" | "yes" | "on" => Ok("true".into()),
            "false" | "0" | "no" | "off" => Ok("false".into()),
            _ => Err(err(format!("expected true or false, got `{value}`"))),
        },
        ValueKind::Text => {
            if value.is_empty() {
                return Err(err("must not be empty".into()));
            }
            Ok(value.to_string())
        }
        ValueKind::Choice(names) => {
            let v = value.to_ascii_lowercase();
            if !names.contains(&v.as_str()) {
                return Err(err(format!(
                    "expected one of {}, got `{value}`",
                    names.join(", ")
                )));
            }
            Ok(v)
        }
        ValueKind::Modalities => {
            let set = list(value)
                .map(|s| {
                    s.parse::<ModalityKind>()
                        .map_err(|_| err(format!("unknown modality `{s}`")))
                })
                .collect::<Result<BTreeSet<_>>>()?;
            if set.is_empty() {
                return Err(err("needs at least one modality".into()));
            }
            Ok(set.iter().map(|k| k.name()).collect::<Vec<_>>().join(","))
        }
        ValueKind::Ratios => {
            let v = list(value)
                .map(|s| match s.parse::<f64>() {
                    Ok(r) if (0.0..1.0).contains(&r) => Ok(r.to_string()),
                    _ => Err(err(format!("`{s}` is not a ratio in [0, 1)"))),
                })
                .collect::<Result<Vec<_>>>()?;
            if v.is_empty() {
                return Err(err("needs at least one value".into()));
            }
            Ok(v.join(","))
        }
        ValueKind::Counts | ValueKind::Seeds => {
            let positive = def.kind == ValueKind::Counts;
            let v = list(value)
                .map(|s| match s.parse::<u64>() {
                    Ok(n) if !positive || n > 0 => Ok(n.to_string()),
                    _ => Err(err(format!(
                        "`{s}` is not a valid {}",
                        if positive { "count" } else { "seed" }
                    ))),
                })
                .collect::<Result<Vec<_>>>()?;
            if v.is_empty() {
                return Err(err("needs at least one value".into()));
            }
            Ok(v.join(","))
        }
        ValueKind::Variants => {
            let v = list(value)
                .map(|s| s.parse::<Variant>().map(|v| v.name().to_string()))
                .collect::<Result<Vec<_>>>()?;
            Ok(v.join(","))
        }
    }
}

/// Fully resolved configuration with per-key provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, (String, Provenance)>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: KEYS
                .iter()
                .map(|k| (k.key, (k.default.to_string(), Provenance::Default)))
                .collect(),
        }
    }
}

impl RunConfig {
    /// Sets one key; unknown keys and invalid values are errors naming the key.
    pub fn set(&mut self, key: &str, value: &str, provenance: Provenance) -> Result<()> {
        let def = key_def(key).ok_or_else(|| Error::config(key, "unknown configuration key"))?;
        let v = canonical(def, value)?;
        self.values.insert(def.key, (v, provenance));
        Ok(())
    }

    /// Applies `key = value` lines. `#` starts a comment; blank lines are skipped.
    pub fn apply_text(&mut self, text: &str, provenance: Provenance) -> Result<()> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(line, format!("line {} is not `key = value`", no + 1))
            })?;
            self.set(key.trim(), value, provenance)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        c.apply_text(text, Provenance::File)?;
        Ok(c)
    }

    /// Defaults, then the file (if any), then flag overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut c = RunConfig::default();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => {
                    Error::Missing(format!("config file {} does not exist", p.display()))
                }
                _ => Error::Io(e),
            })?;
            c.apply_text(&text, Provenance::File)?;
        }
        for (k, v) in overrides {
            c.set(k, v, Provenance::Flag)?;
        }
        c.pipeline()?;
        Ok(c)
    }

    pub fn get(&self, key: &str) -> &str {
        &self
            .values
            .get(key)
            .unwrap_or_else(|| panic!("`{key}` is not a registered key"))
            .0
    }

    pub fn provenance(&self, key: &str) -> Provenance {
        self.values.get(key).map_or(Provenance::Default, |v| v.1)
    }

    fn num<T: std::str::FromStr>(&self, key: &str) -> T {
        self.get(key)
            .parse()
            .unwrap_or_else(|_| panic!("`{key}` holds a value that was validated on insertion"))
    }

    pub fn usize(&self, key: &str) -> usize {
        self.num::<u64>(key) as usize
    }

    pub fn u64(&self, key: &str) -> u64 {
        self.num(key)
    }

    pub fn f64(&self, key: &str) -> f64 {
        self.num(key)
    }

    pub fn bool(&self, key: &str) -> bool {
        self.get(key) == "true"
    }

    pub fn list<T: std::str::FromStr>(&self, key: &str) -> Vec<T> {
        list(self.get(key))
            .map(|s| {
                s.parse()
                    .unwrap_or_else(|_| panic!("`{key}` holds validated entries"))
            })
            .collect()
    }

    pub fn seed(&self) -> u64 {
        self.u64("seed")
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.get("out_dir"))
    }

    /// Canonical text of every key in registry order, with provenance comments.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for k in KEYS {
            out.push_str(&format!(
                "# {} ({})\n{} = {}\n",
                k.doc,
                self.provenance(k.key),
                k.key,
                self.get(k.key)
            ));
        }
        out
    }

    /// SHA-256 of the sorted `key=value` lines of every key that shapes results.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, (v, _)) in &self.values {
            if key_def(k).is_some_and(|d| d.hashed) {
                h.update(format!("{k}={v}\n").as_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        let appearance = |p: &str| Appearance {
            background: self.u64(&format!("{p}_background")) as u8,
            brightness_shift: self.f64(&format!("{p}_brightness")) as f32,
            noise: self.f64(&format!("{p}_noise")) as f32,
        };
        DatasetSpec {
            n_source_classes: self.u64("n_source_classes") as u32,
            n_target_classes: self.u64("n_target_classes") as u32,
            target_class_offset: self.u64("n_source_classes") as u32,
            samples_per_class: self.usize("samples_per_class"),
            frames: self.usize("frames"),
            modalities: ModalityKind::ALL
                .into_iter()
                .map(|k| {
                    ModalitySpec::new(
                        k,
                        self.usize(&format!("{k}_size")),
                        self.usize(&format!("{k}_patch")),
                    )
                })
                .collect(),
            source: appearance("source"),
            target: appearance("target"),
            pose_sigma: self.f64("pose_sigma"),
            sprite_radius: self.f64("sprite_radius"),
            speed_scale: self.f64("speed_scale"),
            seed: self.seed(),
        }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            embed_dim: self.usize("embed_dim"),
            depth: self.usize("depth"),
            heads: self.usize("heads"),
            mlp_ratio: self.usize("mlp_ratio"),
            tubelet: self.usize("tubelet"),
            decoder_dim: self.usize("decoder_dim"),
            decoder_depth: self.usize("decoder_depth"),
            decoder_heads: self.usize("decoder_heads"),
        }
    }

    pub fn optim_config(&self) -> OptimConfig {
        OptimConfig {
            peak_lr: self.f64("peak_lr"),
            min_lr: self.f64("min_lr"),
            warmup_frac: self.f64("warmup_frac"),
            weight_decay: self.f64("weight_decay"),
            beta1: self.f64("beta1"),
            beta2: self.f64("beta2"),
            eps: self.f64("adam_eps"),
        }
    }

    pub fn pretrain_config(&self, kind: ModalityKind) -> PretrainConfig {
        PretrainConfig {
            modality: kind,
            lambda_ce: self.f64(&format!("lambda_ce_{kind}")),
            mask_ratio: self.f64("rho_pretrain"),
            epochs: self.usize("pretrain_epochs"),
            batch_size: self.usize("pretrain_batch"),
            optim: self.optim_config(),
            target_recon: self.bool("target_recon"),
            seed: self.seed(),
        }
    }

    pub fn distill_config(&self) -> DistillConfig {
        let modalities: BTreeSet<ModalityKind> = self.list("modalities").into_iter().collect();
        DistillConfig {
            mask_ratio: self.f64("rho_distill"),
            weights: modalities
                .iter()
                .map(|&k| (k, self.f64(&format!("weight_{k}"))))
                .collect(),
            modalities,
            epochs: self.usize("distill_epochs"),
            batch_size: self.usize("distill_batch"),
            optim: self.optim_config(),
            features: self
                .get("distill_features")
                .parse()
                .expect("validated choice"),
            shared_mask: self.bool("distill_shared_mask"),
            seed: self.seed(),
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            n_way: self.usize("nway"),
            k_shot: self.usize("kshot"),
            queries: self.usize("queries"),
            episodes: self.usize("episodes"),
            inference: InferenceConfig {
                mask_ratio: self.f64("rho_infer"),
                ensemble: self.usize("ensemble"),
                seed: self.seed(),
            },
            head: HeadTrainConfig {
                iterations: self.usize("head_iters"),
                lr: self.f64("head_lr"),
                weight_decay: self.f64("head_weight_decay"),
                seed: self.seed(),
            },
            seed: self.seed(),
        }
    }

    /// Typed settings of every stage, cross-checked.
    pub fn pipeline(&self) -> Result<PipelineConfig> {
        let c = PipelineConfig {
            dataset: self.dataset_spec(),
            encoder: self.encoder_config(),
            pretrain: ModalityKind::ALL
                .into_iter()
                .map(|k| (k, self.pretrain_config(k)))
                .collect(),
            distill: self.distill_config(),
            eval: self.eval_config(),
        };
        c.validate()?;
        for spec in &c.dataset.modalities {
            c.encoder.grid(spec, c.dataset.frames)?;
        }
        if Split::parse(self.get("embed_split")).is_none() {
            return Err(Error::config(
                "embed_split",
                format!("unknown split `{}`", self.get("embed_split")),
            ));
        }
        let enc = self.get("embed_encoder");
        if enc != "student" && enc.parse::<ModalityKind>().is_err() {
            return Err(Error::config(
                "embed_encoder",
                format!("expected student, rgb, flow or pose, got `{enc}`"),
            ));
        }
        Ok(c)
    }
}
