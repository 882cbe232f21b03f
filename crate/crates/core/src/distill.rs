//! Multimodal feature distillation into the RGB student.
//!
//! For every distilled modality `m`, the student's RGB features are projected
//! by `M_m` and pulled towards the frozen teacher's features of the same
//! target clip in modality `m`:
//! `fd_m = || sg[f_m] - M_m(E_student(mask(x_rgb))) ||^2`, `total = sum_m fd_m`.
//!
//! Features are either the pooled clip vector or the visible tokens. With
//! tokens, `fd_m` is the squared distance averaged over tokens, and teachers
//! must share the student's mask so token `i` means the same tubelet for all.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;

use crate::data::{Clip, ModalityKind, MultimodalSample};
use crate::error::{Error, Result};
use crate::masking::{check_ratio, tube_mask, TubeMask};
use crate::nn::{
    pooled_grad_to_tokens, AdamW, Encoded, Encoder, LrSchedule, Objective, OptimConfig, Parameters,
    ProjectionHead, Student,
};
use crate::seed;

/// What the student is asked to reproduce.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FeatureLevel {
    Pooled,
    Tokens,
}

impl FeatureLevel {
    pub fn name(self) -> &'static str {
        match self {
            FeatureLevel::Pooled => "pooled",
            FeatureLevel::Tokens => "tokens",
        }
    }

    /// `1 x d` pooled row, or the visible tokens.
    pub fn select(self, encoded: &Encoded) -> Array2<f64> {
        match self {
            FeatureLevel::Pooled => encoded.pooled.clone().insert_axis(Axis(0)),
            FeatureLevel::Tokens => encoded.tokens.clone(),
        }
    }

    /// Gradient with respect to the encoder's output tokens.
    fn token_grad(self, encoded: &Encoded, dfeatures: Array2<f64>) -> Array2<f64> {
        match self {
            FeatureLevel::Pooled => {
                let mut dtokens = Array2::zeros(encoded.tokens.raw_dim());
                pooled_grad_to_tokens(&mut dtokens, &dfeatures.row(0).to_owned());
                dtokens
            }
            FeatureLevel::Tokens => dfeatures,
        }
    }
}

impl fmt::Display for FeatureLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FeatureLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "pooled" => Ok(FeatureLevel::Pooled),
            "tokens" => Ok(FeatureLevel::Tokens),
            other => Err(Error::config(
                "distill_features",
                format!("unknown feature level {other:?}"),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillConfig {
    pub mask_ratio: f64,
    pub modalities: BTreeSet<ModalityKind>,
    /// Per-modality loss weights; missing entries weigh 1.
    pub weights: BTreeMap<ModalityKind, f64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    pub features: FeatureLevel,
    /// Teachers see the student's tube mask instead of their own.
    pub shared_mask: bool,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            mask_ratio: 0.75,
            modalities: ModalityKind::ALL.into_iter().collect(),
            weights: BTreeMap::new(),
            epochs: 30,
            batch_size: 16,
            optim: OptimConfig::default(),
            features: FeatureLevel::Tokens,
            shared_mask: true,
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        check_ratio("rho_distill", self.mask_ratio)?;
        if !self.modalities.contains(&ModalityKind::Rgb) {
            return Err(Error::config(
                "modalities",
                "RGB self-distillation must stay enabled",
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::config("distill_batch", "must be positive"));
        }
        if self.features == FeatureLevel::Tokens && !self.shared_mask {
            return Err(Error::config(
                "distill_shared_mask",
                "token features need teachers and student to share the mask",
            ));
        }
        for (m, w) in &self.weights {
            if !(*w >= 0.0) || !w.is_finite() {
                return Err(Error::config(
                    format!("distill_weight_{m}"),
                    "must be finite and non-negative",
                ));
            }
        }
        self.optim.validate()
    }

    pub fn weight(&self, m: ModalityKind) -> f64 {
        self.weights.get(&m).copied().unwrap_or(1.0)
    }

    fn teacher_mask_seed(&self, mask_seed: u64, sample: u32, m: ModalityKind) -> u64 {
        if self.shared_mask {
            student_mask_seed(mask_seed, sample)
        } else {
            seed::derive(mask_seed, &[seed::tag(m.name()), sample as u64])
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillLossBreakdown {
    pub per_modality: BTreeMap<ModalityKind, f64>,
    pub total: f64,
}

/// Features of the masked clip under a frozen teacher, one row per feature vector.
pub fn teacher_features(
    teacher: &Encoder,
    clip: &Clip,
    mask: &TubeMask,
    level: FeatureLevel,
) -> Result<Array2<f64>> {
    Ok(level.select(&teacher.encode(clip, mask)?))
}

/// `M_m` applied to the student's features of the masked RGB clip.
pub fn student_projection(
    student: &Encoder,
    projection: &ProjectionHead,
    rgb_clip: &Clip,
    mask: &TubeMask,
    level: FeatureLevel,
) -> Result<Array2<f64>> {
    if rgb_clip.spec.kind != ModalityKind::Rgb {
        return Err(Error::contract("the student only reads RGB clips"));
    }
    let features = level.select(&student.encode(rgb_clip, mask)?);
    Ok(projection.forward_rows(&features).0)
}

/// Squared L2 distance averaged over rows.
fn row_sq_dist(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let rows = a.nrows().max(1) as f64;
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / rows
}

/// Per-modality distances and their sum.
pub fn distill_loss(
    targets: &BTreeMap<ModalityKind, Array2<f64>>,
    preds: &BTreeMap<ModalityKind, Array2<f64>>,
) -> Result<DistillLossBreakdown> {
    if !targets.keys().eq(preds.keys()) {
        return Err(Error::contract(format!(
            "teacher modalities {:?} differ from projected {:?}",
            targets.keys().collect::<Vec<_>>(),
            preds.keys().collect::<Vec<_>>()
        )));
    }
    let mut per_modality = BTreeMap::new();
    for (m, f) in targets {
        let p = &preds[m];
        if p.dim() != f.dim() {
            return Err(Error::contract(format!(
                "{m} features {:?} vs {:?}",
                p.dim(),
                f.dim()
            )));
        }
        per_modality.insert(*m, row_sq_dist(f, p));
    }
    let total = per_modality.values().sum();
    Ok(DistillLossBreakdown {
        per_modality,
        total,
    })
}

/// Fresh student: a copy of the RGB teacher encoder plus new projection heads.
pub fn init_student(
    teachers: &BTreeMap<ModalityKind, Encoder>,
    config: &DistillConfig,
) -> Result<Student> {
    let rgb = teachers
        .get(&ModalityKind::Rgb)
        .ok_or_else(|| Error::Missing("RGB teacher checkpoint".into()))?;
    let d = rgb.embed_dim();
    let projections = config
        .modalities
        .iter()
        .map(|&m| {
            let mut rng =
                seed::rng_for(config.seed, &[seed::tag("projection"), seed::tag(m.name())]);
            (m, ProjectionHead::new(&mut rng, d))
        })
        .collect();
    Ok(Student {
        encoder: rgb.clone(),
        projections,
    })
}

pub struct DistillItem<'a> {
    pub rgb: &'a Clip,
    pub student_mask: TubeMask,
    /// Teacher features, already detached from the teachers.
    pub targets: BTreeMap<ModalityKind, Array2<f64>>,
}

pub struct DistillBatch<'a> {
    pub items: Vec<DistillItem<'a>>,
    pub weights: BTreeMap<ModalityKind, f64>,
    pub features: FeatureLevel,
}

fn check_unlabeled(s: &MultimodalSample) -> Result<()> {
    if s.label.is_some() {
        return Err(Error::contract(format!(
            "distillation uses unlabeled target data only; sample {} carries a label",
            s.id
        )));
    }
    Ok(())
}

fn student_mask_seed(mask_seed: u64, sample: u32) -> u64 {
    seed::derive(mask_seed, &[seed::tag("student"), sample as u64])
}

impl<'a> DistillBatch<'a> {
    /// Draws the masks and computes the teacher targets.
    pub fn new(
        teachers: &BTreeMap<ModalityKind, Encoder>,
        samples: &[&'a MultimodalSample],
        config: &DistillConfig,
        mask_seed: u64,
    ) -> Result<Self> {
        let mut items = Vec::with_capacity(samples.len());
        for s in samples {
            check_unlabeled(s)?;
            let rgb = s.clip(ModalityKind::Rgb)?;
            let mut targets = BTreeMap::new();
            for &m in &config.modalities {
                let teacher = teachers
                    .get(&m)
                    .ok_or_else(|| Error::Missing(format!("{m} teacher checkpoint")))?;
                let mask = tube_mask(
                    teacher.grid,
                    config.mask_ratio,
                    config.teacher_mask_seed(mask_seed, s.id, m),
                )?;
                targets.insert(
                    m,
                    teacher_features(teacher, s.clip(m)?, &mask, config.features)?,
                );
            }
            let grid = teachers[&ModalityKind::Rgb].grid;
            items.push(DistillItem {
                rgb,
                student_mask: tube_mask(
                    grid,
                    config.mask_ratio,
                    student_mask_seed(mask_seed, s.id),
                )?,
                targets,
            });
        }
        let weights = config
            .modalities
            .iter()
            .map(|&m| (m, config.weight(m)))
            .collect();
        Ok(DistillBatch {
            items,
            weights,
            features: config.features,
        })
    }

    /// Batch-mean breakdown; gradients of the weighted total go into `grads`.
    pub fn evaluate(
        &self,
        student: &Student,
        mut grads: Option<&mut Student>,
    ) -> Result<DistillLossBreakdown> {
        let n = self.items.len().max(1) as f64;
        let mut per_modality: BTreeMap<ModalityKind, f64> =
            self.weights.keys().map(|&m| (m, 0.0)).collect();
        for item in &self.items {
            let passes = student_pass(
                student,
                item,
                &self.weights,
                self.features,
                1.0 / n,
                grads.as_deref_mut(),
            )?;
            for (m, l, _) in passes {
                *per_modality.get_mut(&m).expect("modality in weights") += l / n;
            }
        }
        let total = per_modality
            .iter()
            .map(|(m, l)| self.weights[m] * l)
            .sum::<f64>();
        if !total.is_finite() {
            return Err(Error::Numeric(format!("distillation loss is {total}")));
        }
        Ok(DistillLossBreakdown {
            per_modality,
            total,
        })
    }
}

/// Per-modality `(modality, fd, projected features)` for one item.
fn student_pass(
    student: &Student,
    item: &DistillItem<'_>,
    weights: &BTreeMap<ModalityKind, f64>,
    level: FeatureLevel,
    scale: f64,
    grads: Option<&mut Student>,
) -> Result<Vec<(ModalityKind, f64, Array2<f64>)>> {
    let (patches, visible) = student
        .encoder
        .visible_patches(item.rgb, &item.student_mask)?;
    let (enc, cache) = student.encoder.forward(patches, visible);
    let features = level.select(&enc);
    let rows = features.nrows().max(1) as f64;
    let mut dfeatures = Array2::zeros(features.raw_dim());
    let mut losses = Vec::with_capacity(weights.len());
    let mut grads = grads;
    for (&m, &w) in weights {
        let proj = student
            .projections
            .get(&m)
            .ok_or_else(|| Error::contract(format!("student has no {m} projection head")))?;
        let target = item
            .targets
            .get(&m)
            .ok_or_else(|| Error::contract(format!("no {m} teacher feature")))?;
        let (pred, pcache) = proj.forward_rows(&features);
        if pred.dim() != target.dim() {
            return Err(Error::contract(format!(
                "{m} teacher features {:?} do not match the student's {:?}",
                target.dim(),
                pred.dim()
            )));
        }
        let diff = &pred - target;
        let fd = diff.iter().map(|d| d * d).sum::<f64>() / rows;
        if let Some(g) = grads.as_deref_mut() {
            let dpred = diff * (2.0 * w * scale / rows);
            let gp = g.projections.get_mut(&m).expect("gradient mirrors student");
            dfeatures += &proj.backward_rows(&features, &pcache, &dpred, gp);
        }
        losses.push((m, fd, pred));
    }
    if let Some(g) = grads {
        let dtokens = level.token_grad(&enc, dfeatures);
        student.encoder.backward(&cache, dtokens, &mut g.encoder);
    }
    Ok(losses)
}

impl Objective for DistillBatch<'_> {
    type Params = Student;

    fn loss(&self, params: &Student) -> Result<f64> {
        Ok(self.evaluate(params, None)?.total)
    }

    fn loss_and_grad(&self, params: &Student) -> Result<(f64, Student)> {
        let mut g = params.zeros_like();
        let b = self.evaluate(params, Some(&mut g))?;
        Ok((b.total, g))
    }
}

/// Student and teachers as one parameter set, for checking that the
/// stop-gradient leaves the teachers without any gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct DistillParams {
    pub student: Student,
    pub teachers: BTreeMap<ModalityKind, Encoder>,
}

impl Parameters for DistillParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.student
            .visit(&crate::nn::params::join(prefix, "student"), f);
        self.teachers
            .visit(&crate::nn::params::join(prefix, "teachers"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.student
            .visit_mut(&crate::nn::params::join(prefix, "student"), f);
        self.teachers
            .visit_mut(&crate::nn::params::join(prefix, "teachers"), f);
    }
}

/// Distillation loss as a function of student *and* teacher parameters.
///
/// Teacher features go through a stop-gradient: identity forward, zero
/// backward. The teacher encoders are still differentiated through, so their
/// gradient is computed rather than assumed.
pub struct JointDistillObjective<'a> {
    pub samples: Vec<&'a MultimodalSample>,
    pub config: DistillConfig,
    pub mask_seed: u64,
}

/// Backward of the stop-gradient operator.
fn stop_gradient_backward(upstream: &Array2<f64>) -> Array2<f64> {
    Array2::zeros(upstream.raw_dim())
}

impl Objective for JointDistillObjective<'_> {
    type Params = DistillParams;

    fn loss_and_grad(&self, params: &DistillParams) -> Result<(f64, DistillParams)> {
        let mut grads = params.zeros_like();
        let n = self.samples.len().max(1) as f64;
        let level = self.config.features;
        let mut total = 0.0;
        for s in &self.samples {
            check_unlabeled(s)?;
            let mut teacher_passes = BTreeMap::new();
            let mut targets = BTreeMap::new();
            for &m in &self.config.modalities {
                let teacher = params
                    .teachers
                    .get(&m)
                    .ok_or_else(|| Error::Missing(format!("{m} teacher")))?;
                let mask = tube_mask(
                    teacher.grid,
                    self.config.mask_ratio,
                    self.config.teacher_mask_seed(self.mask_seed, s.id, m),
                )?;
                let (patches, visible) = teacher.visible_patches(s.clip(m)?, &mask)?;
                let (enc, cache) = teacher.forward(patches, visible);
                targets.insert(m, level.select(&enc));
                teacher_passes.insert(m, (enc, cache));
            }
            let grid = params.student.encoder.grid;
            let item = DistillItem {
                rgb: s.clip(ModalityKind::Rgb)?,
                student_mask: tube_mask(
                    grid,
                    self.config.mask_ratio,
                    student_mask_seed(self.mask_seed, s.id),
                )?,
                targets,
            };
            let weights: BTreeMap<_, _> = self
                .config
                .modalities
                .iter()
                .map(|&m| (m, self.config.weight(m)))
                .collect();
            let passes = student_pass(
                &params.student,
                &item,
                &weights,
                level,
                1.0 / n,
                Some(&mut grads.student),
            )?;
            for (m, l, pred) in passes {
                let w = weights[&m];
                total += w * l / n;
                // d loss / d f_m before the stop-gradient
                let rows = pred.nrows().max(1) as f64;
                let upstream = (&item.targets[&m] - &pred) * (2.0 * w / (n * rows));
                let dfeatures = stop_gradient_backward(&upstream);
                let (enc, cache) = &teacher_passes[&m];
                let dtokens = level.token_grad(enc, dfeatures);
                let teacher = &params.teachers[&m];
                teacher.backward(
                    cache,
                    dtokens,
                    grads.teachers.get_mut(&m).expect("mirrors params"),
                );
            }
        }
        Ok((total, grads))
    }
}

/// Optimiser state for the student; one call to [`Distiller::step`] is one update.
pub struct Distiller<'t> {
    pub student: Student,
    teachers: &'t BTreeMap<ModalityKind, Encoder>,
    config: DistillConfig,
    schedule: LrSchedule,
    opt: AdamW,
    step: usize,
}

impl<'t> Distiller<'t> {
    pub fn new(
        teachers: &'t BTreeMap<ModalityKind, Encoder>,
        student: Student,
        config: DistillConfig,
        total_steps: usize,
    ) -> Result<Self> {
        config.validate()?;
        Ok(Distiller {
            student,
            teachers,
            schedule: LrSchedule::new(&config.optim, total_steps),
            opt: AdamW::new(config.optim),
            config,
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn step(&mut self, samples: &[&MultimodalSample]) -> Result<DistillLossBreakdown> {
        let mask_seed = seed::derive(
            self.config.seed,
            &[seed::tag("distill-mask"), self.step as u64],
        );
        let batch = DistillBatch::new(self.teachers, samples, &self.config, mask_seed)?;
        let mut grads = self.student.zeros_like();
        let breakdown = batch.evaluate(&self.student, Some(&mut grads))?;
        if !grads.all_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient at distillation step {}",
                self.step
            )));
        }
        let lr = self.schedule.at(self.step);
        self.opt.step(&mut self.student, &grads, lr);
        self.step += 1;
        Ok(breakdown)
    }
}

/// Trains the student on unlabeled target clips. Teachers are only read.
pub fn run_distill(
    teachers: &BTreeMap<ModalityKind, Encoder>,
    target_unlabeled: &[MultimodalSample],
    config: &DistillConfig,
    mut on_step: impl FnMut(usize, &DistillLossBreakdown),
) -> Result<Student> {
    config.validate()?;
    for s in target_unlabeled {
        check_unlabeled(s)?;
    }
    let student = init_student(teachers, config)?;
    if config.epochs == 0 || target_unlabeled.is_empty() {
        return Ok(student);
    }
    let steps_per_epoch = target_unlabeled.len().div_ceil(config.batch_size);
    let mut distiller = Distiller::new(
        teachers,
        student,
        config.clone(),
        steps_per_epoch * config.epochs,
    )?;
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..target_unlabeled.len()).collect();
        order.shuffle(&mut seed::rng_for(
            config.seed,
            &[seed::tag("distill-order"), epoch as u64],
        ));
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&MultimodalSample> =
                chunk.iter().map(|&i| &target_unlabeled[i]).collect();
            let step = distiller.steps_taken();
            let breakdown = distiller.step(&batch)?;
            on_step(step, &breakdown);
        }
    }
    Ok(distiller.student)
}
