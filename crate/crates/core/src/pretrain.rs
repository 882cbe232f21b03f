//! Per-modality masked-autoencoder pretraining with a source classification term.
//!
//! `total = recon_source + recon_target + lambda_ce * ce_source`, where the
//! reconstruction terms are mean squared errors on per-patch normalised pixels
//! of the masked tubelets, and the cross entropy uses pooled visible features
//! of labeled source clips only.

use ndarray::Array2;
use rand::seq::SliceRandom;

use crate::data::{Clip, Dataset, Domain, ModalityKind, MultimodalSample};
use crate::error::{Error, Result};
use crate::masking::{check_ratio, tube_mask, TubeMask};
use crate::nn::vit::normalize_patches;
use crate::nn::{
    cross_entropy, patchify, pooled_grad_to_tokens, AdamW, EncoderConfig, LrSchedule,
    MaskedAutoencoder, Objective, OptimConfig, Parameters,
};
use crate::seed;

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub modality: ModalityKind,
    pub lambda_ce: f64,
    pub mask_ratio: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    /// When false the target reconstruction term is dropped ("only source").
    pub target_recon: bool,
    pub seed: u64,
}

impl PretrainConfig {
    pub fn new(modality: ModalityKind) -> Self {
        PretrainConfig {
            modality,
            lambda_ce: default_lambda_ce(modality),
            mask_ratio: 0.9,
            epochs: 30,
            batch_size: 16,
            optim: OptimConfig::default(),
            target_recon: true,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_ratio("rho_pretrain", self.mask_ratio)?;
        if !(self.lambda_ce >= 0.0) || !self.lambda_ce.is_finite() {
            return Err(Error::config(
                format!("lambda_ce_{}", self.modality),
                "must be finite and non-negative",
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::config("pretrain_batch", "must be positive"));
        }
        self.optim.validate()
    }
}

pub fn default_lambda_ce(modality: ModalityKind) -> f64 {
    match modality {
        ModalityKind::Rgb => 0.05,
        ModalityKind::Flow | ModalityKind::Pose => 0.01,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PretrainLossBreakdown {
    pub recon_source: f64,
    pub recon_target: f64,
    pub ce_source: f64,
    pub lambda_ce: f64,
    pub total: f64,
}

impl PretrainLossBreakdown {
    pub fn new(recon_source: f64, recon_target: f64, ce_source: f64, lambda_ce: f64) -> Self {
        PretrainLossBreakdown {
            recon_source,
            recon_target,
            ce_source,
            lambda_ce,
            total: recon_source + recon_target + lambda_ce * ce_source,
        }
    }

    pub fn is_finite(&self) -> bool {
        [
            self.recon_source,
            self.recon_target,
            self.ce_source,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

fn masked_targets(clip: &Clip, mask: &TubeMask, tubelet: usize) -> Result<Array2<f64>> {
    let masked = mask.masked_indices();
    Ok(normalize_patches(&patchify(
        clip, &mask.grid, tubelet, &masked,
    )?))
}

fn mse_with_grad(pred: &Array2<f64>, target: &Array2<f64>) -> (f64, Array2<f64>) {
    if pred.is_empty() {
        return (0.0, pred.clone());
    }
    let n = pred.len() as f64;
    let diff = pred - target;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
    (loss, diff * (2.0 / n))
}

/// MSE between decoder predictions for the masked tubelets and their
/// normalised pixels. Zero when nothing is masked.
pub fn reconstruction_loss(
    predictions: &Array2<f64>,
    clip: &Clip,
    mask: &TubeMask,
    tubelet: usize,
) -> Result<f64> {
    let target = masked_targets(clip, mask, tubelet)?;
    if predictions.dim() != target.dim() {
        return Err(Error::contract(format!(
            "predictions {:?} do not cover the {} masked tokens",
            predictions.dim(),
            target.nrows()
        )));
    }
    Ok(mse_with_grad(predictions, &target).0)
}

pub struct SourceItem<'a> {
    pub clip: &'a Clip,
    pub label: usize,
    pub mask: TubeMask,
}

pub struct TargetItem<'a> {
    pub clip: &'a Clip,
    pub mask: TubeMask,
}

/// One optimisation step's worth of masked source and target clips.
pub struct PretrainBatch<'a> {
    pub source: Vec<SourceItem<'a>>,
    pub target: Vec<TargetItem<'a>>,
    pub lambda_ce: f64,
    pub target_recon: bool,
}

impl<'a> PretrainBatch<'a> {
    /// Builds a batch with a fresh tube mask per sample derived from `mask_seed`.
    pub fn new(
        model: &MaskedAutoencoder,
        source: &[&'a MultimodalSample],
        target: &[&'a MultimodalSample],
        config: &PretrainConfig,
        mask_seed: u64,
    ) -> Result<Self> {
        let grid = model.encoder.grid;
        let n_classes = model.classifier.n_classes();
        let kind = config.modality;
        let mut src = Vec::with_capacity(source.len());
        for s in source {
            let label = s
                .label
                .ok_or_else(|| Error::contract(format!("source sample {} is unlabeled", s.id)))?
                as usize;
            if s.domain != Domain::Source || label >= n_classes {
                return Err(Error::contract(format!(
                    "sample {} is not a source sample with a label below {n_classes}",
                    s.id
                )));
            }
            src.push(SourceItem {
                clip: s.clip(kind)?,
                label,
                mask: tube_mask(
                    grid,
                    config.mask_ratio,
                    seed::derive(mask_seed, &[0, s.id as u64]),
                )?,
            });
        }
        let mut tgt = Vec::with_capacity(target.len());
        for s in target {
            if s.label.is_some() || s.domain != Domain::Target {
                return Err(Error::contract(format!(
                    "target batch sample {} must be an unlabeled target sample",
                    s.id
                )));
            }
            tgt.push(TargetItem {
                clip: s.clip(kind)?,
                mask: tube_mask(
                    grid,
                    config.mask_ratio,
                    seed::derive(mask_seed, &[1, s.id as u64]),
                )?,
            });
        }
        Ok(PretrainBatch {
            source: src,
            target: tgt,
            lambda_ce: config.lambda_ce,
            target_recon: config.target_recon,
        })
    }

    /// Loss breakdown and, when `grads` is given, accumulated gradients of `total`.
    pub fn evaluate(
        &self,
        model: &MaskedAutoencoder,
        mut grads: Option<&mut MaskedAutoencoder>,
    ) -> Result<PretrainLossBreakdown> {
        let tubelet = model.encoder.tubelet;
        let (mut rs, mut rt, mut ce) = (0.0, 0.0, 0.0);
        let ns = self.source.len().max(1) as f64;
        let nt = self.target.len().max(1) as f64;
        for item in &self.source {
            let (r, c) = sample_pass(
                model,
                item.clip,
                &item.mask,
                tubelet,
                1.0 / ns,
                Some((item.label, self.lambda_ce / ns)),
                grads.as_deref_mut(),
            )?;
            rs += r / ns;
            ce += c / ns;
        }
        if self.target_recon {
            for item in &self.target {
                let (r, _) = sample_pass(
                    model,
                    item.clip,
                    &item.mask,
                    tubelet,
                    1.0 / nt,
                    None,
                    grads.as_deref_mut(),
                )?;
                rt += r / nt;
            }
        }
        let out = PretrainLossBreakdown::new(rs, rt, ce, self.lambda_ce);
        if !out.is_finite() {
            return Err(Error::Numeric(format!(
                "pretraining loss is not finite: {out:?}"
            )));
        }
        Ok(out)
    }
}

/// Forward (and optionally backward) for one clip. Returns `(recon, ce)`.
fn sample_pass(
    model: &MaskedAutoencoder,
    clip: &Clip,
    mask: &TubeMask,
    tubelet: usize,
    recon_weight: f64,
    label: Option<(usize, f64)>,
    grads: Option<&mut MaskedAutoencoder>,
) -> Result<(f64, f64)> {
    let (patches, visible) = model.encoder.visible_patches(clip, mask)?;
    let (enc, ecache) = model.encoder.forward(patches, visible);
    let (pred, dcache) = model.decoder.forward(enc.tokens.clone(), mask)?;
    let target = masked_targets(clip, mask, tubelet)?;
    let (recon, dpred) = mse_with_grad(&pred, &target);
    let ce = match label {
        Some((y, _)) => Some(cross_entropy(&model.classifier.logits(&enc.pooled)?, y)),
        None => None,
    };
    if let Some(g) = grads {
        let mut dtokens = if pred.is_empty() || recon_weight == 0.0 {
            Array2::zeros(enc.tokens.raw_dim())
        } else {
            model
                .decoder
                .backward(&dcache, dpred * recon_weight, &mut g.decoder)
        };
        if let (Some((_, w)), Some((_, dlogits))) = (label, ce.as_ref()) {
            if w != 0.0 {
                let dpooled =
                    model
                        .classifier
                        .backward(&enc.pooled, &(dlogits * w), &mut g.classifier);
                pooled_grad_to_tokens(&mut dtokens, &dpooled);
            }
        }
        model.encoder.backward(&ecache, dtokens, &mut g.encoder);
    }
    Ok((recon, ce.map_or(0.0, |c| c.0)))
}

impl Objective for PretrainBatch<'_> {
    type Params = MaskedAutoencoder;

    fn loss(&self, params: &MaskedAutoencoder) -> Result<f64> {
        Ok(self.evaluate(params, None)?.total)
    }

    fn loss_and_grad(&self, params: &MaskedAutoencoder) -> Result<(f64, MaskedAutoencoder)> {
        let mut g = params.zeros_like();
        let b = self.evaluate(params, Some(&mut g))?;
        Ok((b.total, g))
    }
}

/// Fresh model for `config.modality`, seeded from `config.seed`.
pub fn init_model(
    dataset: &Dataset,
    encoder_config: &EncoderConfig,
    config: &PretrainConfig,
) -> Result<MaskedAutoencoder> {
    let spec = dataset.spec.modality(config.modality)?;
    let mut rng = seed::rng_for(
        config.seed,
        &[seed::tag("init"), seed::tag(config.modality.name())],
    );
    MaskedAutoencoder::new(
        encoder_config,
        spec,
        dataset.spec.frames,
        dataset.spec.n_source_classes as usize,
        &mut rng,
    )
}

/// Optimiser state for one model: a single call to [`Pretrainer::step`] is one update.
pub struct Pretrainer {
    pub model: MaskedAutoencoder,
    config: PretrainConfig,
    schedule: LrSchedule,
    opt_enc: AdamW,
    opt_dec: AdamW,
    opt_cls: AdamW,
    step: usize,
}

impl Pretrainer {
    pub fn new(
        model: MaskedAutoencoder,
        config: PretrainConfig,
        total_steps: usize,
    ) -> Result<Self> {
        config.validate()?;
        Ok(Pretrainer {
            model,
            schedule: LrSchedule::new(&config.optim, total_steps),
            opt_enc: AdamW::new(config.optim),
            opt_dec: AdamW::new(config.optim),
            opt_cls: AdamW::new(config.optim),
            config,
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// One AdamW update from the gradient of the total loss on fresh masks.
    ///
    /// The classifier is left untouched when `lambda_ce` is zero, since it has
    /// no gradient path then.
    pub fn step(
        &mut self,
        source: &[&MultimodalSample],
        target: &[&MultimodalSample],
    ) -> Result<PretrainLossBreakdown> {
        let kind_tag = seed::tag(self.config.modality.name());
        let mask_seed = seed::derive(
            self.config.seed,
            &[kind_tag, seed::tag("mask"), self.step as u64],
        );
        let batch = PretrainBatch::new(&self.model, source, target, &self.config, mask_seed)?;
        let mut grads = self.model.zeros_like();
        let breakdown = batch.evaluate(&self.model, Some(&mut grads))?;
        if !grads.all_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient at pretraining step {}",
                self.step
            )));
        }
        let lr = self.schedule.at(self.step);
        self.opt_enc
            .step(&mut self.model.encoder, &grads.encoder, lr);
        self.opt_dec
            .step(&mut self.model.decoder, &grads.decoder, lr);
        if self.config.lambda_ce > 0.0 {
            self.opt_cls
                .step(&mut self.model.classifier, &grads.classifier, lr);
        }
        self.step += 1;
        Ok(breakdown)
    }
}

/// Trains `model` for `config.epochs` epochs over the source set, pairing every
/// source batch with an equally sized batch of unlabeled target clips.
pub fn train(
    model: MaskedAutoencoder,
    source: &[MultimodalSample],
    target: &[MultimodalSample],
    config: &PretrainConfig,
    mut on_step: impl FnMut(usize, &PretrainLossBreakdown),
) -> Result<MaskedAutoencoder> {
    config.validate()?;
    if source.is_empty() {
        return Err(Error::contract("pretraining needs source samples"));
    }
    if config.epochs == 0 {
        return Ok(model);
    }
    let steps_per_epoch = source.len().div_ceil(config.batch_size);
    let mut trainer = Pretrainer::new(model, config.clone(), steps_per_epoch * config.epochs)?;
    let use_target = config.target_recon && !target.is_empty();

    let kind_tag = seed::tag(config.modality.name());
    let mut target_order: Vec<usize> = Vec::new();
    let mut target_cursor = 0usize;
    let mut target_round = 0u64;
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..source.len()).collect();
        order.shuffle(&mut seed::rng_for(
            config.seed,
            &[kind_tag, seed::tag("source-order"), epoch as u64],
        ));
        for chunk in order.chunks(config.batch_size) {
            let src: Vec<&MultimodalSample> = chunk.iter().map(|&i| &source[i]).collect();
            let mut tgt: Vec<&MultimodalSample> = Vec::with_capacity(chunk.len());
            while use_target && tgt.len() < chunk.len() {
                if target_cursor == target_order.len() {
                    target_order = (0..target.len()).collect();
                    target_order.shuffle(&mut seed::rng_for(
                        config.seed,
                        &[kind_tag, seed::tag("target-order"), target_round],
                    ));
                    target_round += 1;
                    target_cursor = 0;
                }
                tgt.push(&target[target_order[target_cursor]]);
                target_cursor += 1;
            }
            let step = trainer.steps_taken();
            let breakdown = trainer.step(&src, &tgt)?;
            on_step(step, &breakdown);
        }
    }
    Ok(trainer.model)
}

/// Trains one teacher per config on `dataset`.
pub fn run_pretrain(
    dataset: &Dataset,
    encoder_config: &EncoderConfig,
    configs: &[PretrainConfig],
    mut on_step: impl FnMut(ModalityKind, usize, &PretrainLossBreakdown),
) -> Result<Vec<MaskedAutoencoder>> {
    configs
        .iter()
        .map(|cfg| {
            let model = init_model(dataset, encoder_config, cfg)?;
            log::info!(
                "pretraining {} teacher for {} epochs",
                cfg.modality,
                cfg.epochs
            );
            train(
                model,
                &dataset.source,
                &dataset.target_unlabeled,
                cfg,
                |s, b| on_step(cfg.modality, s, b),
            )
        })
        .collect()
}

/// Top-1 accuracy of the source classifier on labeled source samples.
pub fn source_accuracy(
    model: &MaskedAutoencoder,
    samples: &[MultimodalSample],
    mask_ratio: f64,
    seed: u64,
) -> Result<f64> {
    let kind = model.kind();
    let mut correct = 0usize;
    for s in samples {
        let label = s
            .label
            .ok_or_else(|| Error::contract("source accuracy needs labels"))?
            as usize;
        let mask = tube_mask(
            model.encoder.grid,
            mask_ratio,
            seed::derive(seed, &[s.id as u64]),
        )?;
        let enc = model.encoder.encode(s.clip(kind)?, &mask)?;
        let logits = model.classifier.logits(&enc.pooled)?;
        let pred = logits
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                if v > best.1 {
                    (i, v)
                } else {
                    best
                }
            })
            .0;
        correct += (pred == label) as usize;
    }
    Ok(correct as f64 / samples.len().max(1) as f64)
}
