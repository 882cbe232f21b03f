//! Few-shot head training on masked support clips, ensemble masked inference,
//! and the inference cost model.

use std::time::{Duration, Instant};

use ndarray::{Array1, Array2, Axis};

use crate::data::Clip;
use crate::error::{Error, Result};
use crate::masking::{check_ratio, kept_count, tube_mask, TokenGrid, TubeMask};
use crate::nn::layers::{cross_entropy, softmax};
use crate::nn::params::{join, Parameters};
use crate::nn::{Encoder, Linear};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InferenceConfig {
    pub mask_ratio: f64,
    /// Ensemble size P.
    pub ensemble: usize,
    pub seed: u64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            mask_ratio: 0.75,
            ensemble: 2,
            seed: 0,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        check_ratio("rho_infer", self.mask_ratio)?;
        if self.ensemble < 1 {
            return Err(Error::config(
                "ensemble",
                "ensemble size must be at least 1",
            ));
        }
        Ok(())
    }
}

/// Seed of ensemble member `p` under base seed `base`.
pub fn member_seed(base: u64, member: usize) -> u64 {
    seed::derive(base, &[seed::tag("member"), member as u64])
}

/// Seed of the support mask used for `key` at head-training iteration `iteration`.
pub fn support_mask_seed(base: u64, key: u64, iteration: usize) -> u64 {
    seed::derive(base, &[seed::tag("support"), key, iteration as u64])
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeadTrainConfig {
    pub iterations: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for HeadTrainConfig {
    fn default() -> Self {
        HeadTrainConfig {
            iterations: 100,
            lr: 0.01,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

/// Novel-class linear head `d -> N`.
#[derive(Clone, Debug, PartialEq)]
pub struct FewShotHead {
    pub linear: Linear,
}

impl FewShotHead {
    pub fn n_way(&self) -> usize {
        self.linear.out_dim()
    }

    pub fn probs(&self, pooled: &Array1<f64>) -> Array1<f64> {
        softmax(&self.logits(pooled))
    }

    pub fn logits(&self, pooled: &Array1<f64>) -> Array1<f64> {
        let mut l = pooled.dot(&self.linear.w);
        l += &self.linear.b;
        l
    }
}

impl Parameters for FewShotHead {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.linear.visit(&join(prefix, "linear"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.linear.visit_mut(&join(prefix, "linear"), f);
    }
}

/// Full-batch gradient descent on cross entropy. `feature(i, it)` is the pooled
/// feature of support item `i` at iteration `it`.
pub fn train_head_on_features(
    mut feature: impl FnMut(usize, usize) -> Result<Array1<f64>>,
    labels: &[usize],
    n_way: usize,
    dim: usize,
    config: &HeadTrainConfig,
) -> Result<FewShotHead> {
    if labels.is_empty() {
        return Err(Error::contract(
            "few-shot training needs a non-empty support set",
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= n_way) {
        return Err(Error::contract(format!(
            "support label {bad} outside {n_way} ways"
        )));
    }
    let mut rng = seed::rng_for(config.seed, &[seed::tag("fewshot-head")]);
    let mut head = FewShotHead {
        linear: Linear::new(&mut rng, dim, n_way),
    };
    let n = labels.len() as f64;
    for it in 0..config.iterations {
        let mut feats = Array2::zeros((labels.len(), dim));
        for (i, mut row) in feats.rows_mut().into_iter().enumerate() {
            row.assign(&feature(i, it)?);
        }
        let logits = feats.dot(&head.linear.w) + &head.linear.b;
        let mut dlogits = Array2::zeros(logits.raw_dim());
        for ((l, mut d), &y) in logits
            .rows()
            .into_iter()
            .zip(dlogits.rows_mut())
            .zip(labels)
        {
            let (_, g) = cross_entropy(&l.to_owned(), y);
            d.assign(&(g / n));
        }
        let mut gw = feats.t().dot(&dlogits);
        gw.scaled_add(config.weight_decay, &head.linear.w);
        let gb = dlogits.sum_axis(Axis(0));
        if !gw.iter().chain(gb.iter()).all(|v| v.is_finite()) {
            return Err(Error::Numeric(format!(
                "few-shot head gradient diverged at iteration {it}"
            )));
        }
        head.linear.w.scaled_add(-config.lr, &gw);
        head.linear.b.scaled_add(-config.lr, &gb);
    }
    Ok(head)
}

/// One labeled support clip. `key` identifies the clip in mask-seed derivation.
#[derive(Clone, Copy, Debug)]
pub struct SupportItem<'a> {
    pub clip: &'a Clip,
    pub label: usize,
    pub key: u64,
}

/// Trains a head on tube-masked support clips with a fresh mask per clip per
/// iteration. The encoder is only read.
pub fn train_fewshot_head(
    encoder: &Encoder,
    support: &[SupportItem<'_>],
    n_way: usize,
    mask_ratio: f64,
    config: &HeadTrainConfig,
) -> Result<FewShotHead> {
    check_ratio("rho_infer", mask_ratio)?;
    if support.is_empty() {
        return Err(Error::contract(
            "few-shot training needs a non-empty support set",
        ));
    }
    let full = TubeMask::full(encoder.grid);
    let mut unmasked: Vec<Option<Array1<f64>>> = vec![None; support.len()];
    let labels: Vec<usize> = support.iter().map(|s| s.label).collect();
    train_head_on_features(
        |i, it| {
            let item = &support[i];
            if mask_ratio == 0.0 {
                if unmasked[i].is_none() {
                    unmasked[i] = Some(encoder.encode(item.clip, &full)?.pooled);
                }
                return Ok(unmasked[i].clone().expect("filled above"));
            }
            let mask = tube_mask(
                encoder.grid,
                mask_ratio,
                support_mask_seed(config.seed, item.key, it),
            )?;
            Ok(encoder.encode(item.clip, &mask)?.pooled)
        },
        &labels,
        n_way,
        encoder.embed_dim(),
        config,
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub probs: Array1<f64>,
    pub argmax: usize,
}

impl Prediction {
    pub fn from_probs(probs: Array1<f64>) -> Self {
        let argmax = probs
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &p)| {
                if p > best.1 {
                    (i, p)
                } else {
                    best
                }
            })
            .0;
        Prediction { probs, argmax }
    }
}

/// Mean of the members' softmax outputs.
pub fn predict_from_pooled(head: &FewShotHead, pooled: &[Array1<f64>]) -> Result<Prediction> {
    let first = pooled
        .first()
        .ok_or_else(|| Error::config("ensemble", "ensemble size must be at least 1"))?;
    if pooled.iter().all(|p| p == first) {
        return Ok(Prediction::from_probs(head.probs(first)));
    }
    let mut acc = Array1::zeros(head.n_way());
    for p in pooled {
        acc += &head.probs(p);
    }
    acc /= pooled.len() as f64;
    Ok(Prediction::from_probs(acc))
}

/// The `P` tube masks used by [`ensemble_masked_predict`].
pub fn ensemble_masks(grid: TokenGrid, config: &InferenceConfig) -> Result<Vec<TubeMask>> {
    config.validate()?;
    (0..config.ensemble)
        .map(|p| tube_mask(grid, config.mask_ratio, member_seed(config.seed, p)))
        .collect()
}

/// Averages softmax predictions over `P` independently tube-masked passes.
pub fn ensemble_masked_predict(
    encoder: &Encoder,
    head: &FewShotHead,
    clip: &Clip,
    config: &InferenceConfig,
) -> Result<Prediction> {
    let masks = ensemble_masks(encoder.grid, config)?;
    let mut pooled: Vec<Array1<f64>> = Vec::with_capacity(masks.len());
    for (i, mask) in masks.iter().enumerate() {
        // identical masks give identical features
        match masks[..i].iter().position(|m| m == mask) {
            Some(j) => pooled.push(pooled[j].clone()),
            None => pooled.push(encoder.encode(clip, mask)?.pooled),
        }
    }
    predict_from_pooled(head, &pooled)
}

/// Architecture numbers the FLOP counter needs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlopsShape {
    pub embed_dim: u64,
    pub depth: u64,
    pub mlp_ratio: u64,
    pub patch_volume: u64,
    pub n_classes: u64,
}

impl FlopsShape {
    /// ViT-S with 16x16x2 RGB tubelets and a 5-way head.
    pub fn vit_s() -> Self {
        FlopsShape {
            embed_dim: 384,
            depth: 12,
            mlp_ratio: 4,
            patch_volume: 2 * 16 * 16 * 3,
            n_classes: 5,
        }
    }

    pub fn of_encoder(encoder: &Encoder, n_classes: usize) -> Self {
        let mlp_ratio = encoder
            .blocks
            .first()
            .map_or(4, |b| b.fc1.out_dim() / encoder.embed_dim());
        FlopsShape {
            embed_dim: encoder.embed_dim() as u64,
            depth: encoder.blocks.len() as u64,
            mlp_ratio: mlp_ratio as u64,
            patch_volume: encoder.patch_volume() as u64,
            n_classes: n_classes as u64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RuntimeStats {
    pub mean_ms: f64,
    pub std_ms: f64,
    pub iters: usize,
    pub warmup: usize,
}

/// Analytic cost of ensemble masked inference, optionally with measured wall-clock.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostReport {
    pub mask_ratio: f64,
    pub ensemble: u64,
    pub tokens_full: u64,
    pub tokens_visible: u64,
    /// Patch embedding plus QKV, output and MLP projections of one member.
    pub member_flops_linear: u64,
    /// Attention scores and weighted sum of one member.
    pub member_flops_quadratic: u64,
    pub flops_head: u64,
    pub flops_total: u64,
    pub wallclock: Option<RuntimeStats>,
}

impl CostReport {
    pub fn flops_linear(&self) -> u64 {
        self.ensemble * self.member_flops_linear
    }

    pub fn flops_quadratic(&self) -> u64 {
        self.ensemble * self.member_flops_quadratic
    }

    pub const CSV_HEADER: &'static str =
        "rho,P,tokens,flops_linear,flops_quad,flops_total,ms_mean,ms_std";

    pub fn csv_row(&self) -> String {
        let (mean, std) = self.wallclock.map_or((String::new(), String::new()), |w| {
            (format!("{:.6}", w.mean_ms), format!("{:.6}", w.std_ms))
        });
        format!(
            "{},{},{},{},{},{},{},{}",
            self.mask_ratio,
            self.ensemble,
            self.tokens_visible,
            self.flops_linear(),
            self.flops_quadratic(),
            self.flops_total,
            mean,
            std
        )
    }
}

/// Counts FLOPs with one multiply-accumulate = 2 FLOPs. Softmax, norms,
/// activations and residual adds are not counted.
pub fn count_flops(
    shape: &FlopsShape,
    grid: TokenGrid,
    mask_ratio: f64,
    ensemble: usize,
) -> Result<CostReport> {
    check_ratio("rho_infer", mask_ratio)?;
    if ensemble < 1 {
        return Err(Error::config(
            "ensemble",
            "ensemble size must be at least 1",
        ));
    }
    let n = (grid.temporal_slices * kept_count(grid.spatial(), mask_ratio)) as u64;
    let d = shape.embed_dim;
    let patch = 2 * n * shape.patch_volume * d;
    // qkv (3d^2) + output (d^2) + mlp (2 r d^2) per token
    let per_block_linear = 2 * n * d * d * (4 + 2 * shape.mlp_ratio);
    // QK^T and AV: n^2 d each
    let per_block_quad = 2 * 2 * n * n * d;
    let member_flops_linear = patch + shape.depth * per_block_linear;
    let member_flops_quadratic = shape.depth * per_block_quad;
    let flops_head = 2 * d * shape.n_classes;
    let p = ensemble as u64;
    Ok(CostReport {
        mask_ratio,
        ensemble: p,
        tokens_full: grid.total() as u64,
        tokens_visible: n,
        member_flops_linear,
        member_flops_quadratic,
        flops_head,
        flops_total: p * (member_flops_linear + member_flops_quadratic) + flops_head,
        wallclock: None,
    })
}

/// Runs `timed` `warmup + iters` times and summarises the last `iters` durations.
pub fn measure_runtime_with(
    iters: usize,
    warmup: usize,
    mut timed: impl FnMut() -> Result<Duration>,
) -> Result<RuntimeStats> {
    for _ in 0..warmup {
        timed()?;
    }
    let mut samples = Vec::with_capacity(iters);
    for _ in 0..iters {
        samples.push(timed()?.as_secs_f64() * 1e3);
    }
    let n = samples.len().max(1) as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = if samples.len() > 1 {
        samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Ok(RuntimeStats {
        mean_ms: mean,
        std_ms: var.sqrt(),
        iters,
        warmup,
    })
}

/// Wall-clock of one ensemble masked prediction.
pub fn measure_runtime(
    encoder: &Encoder,
    head: &FewShotHead,
    clip: &Clip,
    config: &InferenceConfig,
    iters: usize,
    warmup: usize,
) -> Result<RuntimeStats> {
    config.validate()?;
    measure_runtime_with(iters, warmup, || {
        let start = Instant::now();
        let p = ensemble_masked_predict(encoder, head, clip, config)?;
        std::hint::black_box(p);
        Ok(start.elapsed())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(frames: usize, side: usize) -> TokenGrid {
        TokenGrid::new(frames, 2, side, side).unwrap()
    }

    #[test]
    fn flops_scale_with_ensemble_and_ratio() {
        let shape = FlopsShape::vit_s();
        let g = grid(16, 14);
        let one = count_flops(&shape, g, 0.75, 1).unwrap();
        let two = count_flops(&shape, g, 0.75, 2).unwrap();
        assert_eq!(
            two.flops_total - two.flops_head,
            2 * (one.flops_total - one.flops_head)
        );
        let full = count_flops(&shape, g, 0.0, 1).unwrap();
        assert_eq!(full.tokens_full, 1568);
        assert_eq!(one.tokens_visible * 4, full.tokens_visible);
        assert_eq!(16 * one.member_flops_quadratic, full.member_flops_quadratic);
    }

    #[test]
    fn constant_stub_runtime() {
        let stats = measure_runtime_with(600, 5, || Ok(Duration::from_micros(1500))).unwrap();
        assert_eq!(stats.iters, 600);
        assert!((stats.mean_ms - 1.5).abs() < 1e-12);
        assert!(stats.std_ms < 1e-12);
    }

    #[test]
    fn rejects_empty_ensemble() {
        let cfg = InferenceConfig {
            ensemble: 0,
            ..InferenceConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config { .. })));
        assert!(count_flops(&FlopsShape::vit_s(), grid(16, 14), 0.5, 0).is_err());
    }

    #[test]
    fn separable_features_fit_perfectly() {
        let dim = 8;
        let n_way = 4;
        let labels: Vec<usize> = (0..12).map(|i| i % n_way).collect();
        let feats: Vec<Array1<f64>> = labels
            .iter()
            .enumerate()
            .map(|(i, &y)| {
                let mut v = Array1::from_elem(dim, 0.05 * (i as f64).sin());
                v[y] += 3.0;
                v
            })
            .collect();
        let head = train_head_on_features(
            |i, _| Ok(feats[i].clone()),
            &labels,
            n_way,
            dim,
            &HeadTrainConfig::default(),
        )
        .unwrap();
        for (f, &y) in feats.iter().zip(&labels) {
            assert_eq!(Prediction::from_probs(head.probs(f)).argmax, y);
        }
    }
}
