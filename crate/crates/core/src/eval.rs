//! Episodic few-shot evaluation, trade-off sweeps and embedding export.

use std::collections::HashMap;

use ndarray::Array1;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{sample_episode, Clip, Episode, MultimodalSample};
use crate::error::{Error, Result};
use crate::fewshot::{
    count_flops, measure_runtime, member_seed, predict_from_pooled, support_mask_seed,
    train_head_on_features, FewShotHead, FlopsShape, HeadTrainConfig, InferenceConfig,
};
use crate::masking::{tube_mask, TubeMask};
use crate::nn::{Encoder, Linear};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalConfig {
    pub n_way: usize,
    pub k_shot: usize,
    /// Queries per class.
    pub queries: usize,
    pub episodes: usize,
    pub inference: InferenceConfig,
    pub head: HeadTrainConfig,
    /// Seed of the episode sequence.
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_way: 5,
            k_shot: 1,
            queries: 15,
            episodes: 600,
            inference: InferenceConfig::default(),
            head: HeadTrainConfig::default(),
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        self.inference.validate()?;
        for (key, v) in [
            ("nway", self.n_way),
            ("kshot", self.k_shot),
            ("queries", self.queries),
            ("episodes", self.episodes),
        ] {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        Ok(())
    }
}

pub fn episode_seed(base: u64, episode: usize) -> u64 {
    seed::derive(base, &[seed::tag("episode"), episode as u64])
}

/// Base inference seed of query `sample_id`; members derive from it.
pub fn query_seed(base: u64, sample_id: u32) -> u64 {
    seed::derive(base, &[seed::tag("query"), sample_id as u64])
}

/// Half-width of the normal-approximation 95% interval, `1.96 s / sqrt(n)`.
pub fn ci95_halfwidth(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    1.96 * sample_std(values) / (n as f64).sqrt()
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

fn sample_std(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(values);
    (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64).sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub per_episode_acc: Vec<f64>,
    pub mean_acc: f64,
    pub std_acc: f64,
    pub ci95: f64,
    pub config: EvalConfig,
}

impl EvalResult {
    pub fn from_accuracies(per_episode_acc: Vec<f64>, config: EvalConfig) -> Self {
        EvalResult {
            mean_acc: mean(&per_episode_acc),
            std_acc: sample_std(&per_episode_acc),
            ci95: ci95_halfwidth(&per_episode_acc),
            per_episode_acc,
            config,
        }
    }
}

/// Runs `config.episodes` episodes over `pool`; `classify` returns the
/// predicted way of every query, in `episode.query` order.
pub fn run_episodes(
    pool: &[MultimodalSample],
    config: &EvalConfig,
    mut classify: impl FnMut(usize, &Episode) -> Result<Vec<usize>>,
) -> Result<EvalResult> {
    config.validate()?;
    let mut accs = Vec::with_capacity(config.episodes);
    for e in 0..config.episodes {
        let episode = sample_episode(
            pool,
            config.n_way,
            config.k_shot,
            config.queries,
            episode_seed(config.seed, e),
        )?;
        let predicted = classify(e, &episode)?;
        if predicted.len() != episode.query.len() {
            return Err(Error::contract("one prediction per query is required"));
        }
        let correct = episode
            .query
            .iter()
            .zip(&predicted)
            .filter(|(q, &p)| q.way == p)
            .count();
        accs.push(correct as f64 / episode.query.len() as f64);
    }
    Ok(EvalResult::from_accuracies(accs, *config))
}

/// Pooled features of pool items under a tube mask given by `(ratio, seed)`.
pub trait FeatureSource {
    fn dim(&self) -> usize;
    fn pooled(&mut self, pool_index: usize, mask_ratio: f64, mask_seed: u64)
        -> Result<Array1<f64>>;
}

/// Features from an encoder, memoised per (item, ratio, seed) so episodes and
/// sweep rows that share masks share forward passes.
pub struct EncoderFeatures<'a> {
    encoder: &'a Encoder,
    clips: Vec<&'a Clip>,
    cache: HashMap<(usize, u64, u64), Array1<f64>>,
}

impl<'a> EncoderFeatures<'a> {
    pub fn new(encoder: &'a Encoder, pool: &'a [MultimodalSample]) -> Result<Self> {
        let kind = encoder.modality.kind;
        let clips = pool.iter().map(|s| s.clip(kind)).collect::<Result<_>>()?;
        Ok(EncoderFeatures {
            encoder,
            clips,
            cache: HashMap::new(),
        })
    }

    pub fn cached(&self) -> usize {
        self.cache.len()
    }
}

impl FeatureSource for EncoderFeatures<'_> {
    fn dim(&self) -> usize {
        self.encoder.embed_dim()
    }

    fn pooled(
        &mut self,
        pool_index: usize,
        mask_ratio: f64,
        mask_seed: u64,
    ) -> Result<Array1<f64>> {
        // every seed gives the full mask at ratio 0
        let key = (
            pool_index,
            mask_ratio.to_bits(),
            if mask_ratio == 0.0 { 0 } else { mask_seed },
        );
        if let Some(f) = self.cache.get(&key) {
            return Ok(f.clone());
        }
        let grid = self.encoder.grid;
        let mask = if mask_ratio == 0.0 {
            TubeMask::full(grid)
        } else {
            tube_mask(grid, mask_ratio, mask_seed)?
        };
        let clip = self
            .clips
            .get(pool_index)
            .ok_or_else(|| Error::contract(format!("pool index {pool_index} out of range")))?;
        let f = self.encoder.encode(clip, &mask)?.pooled;
        self.cache.insert(key, f.clone());
        Ok(f)
    }
}

/// Gaussian features that ignore the clip entirely; a chance-level baseline.
pub struct RandomFeatures {
    pub dim: usize,
    pub seed: u64,
}

impl FeatureSource for RandomFeatures {
    fn dim(&self) -> usize {
        self.dim
    }

    fn pooled(
        &mut self,
        pool_index: usize,
        mask_ratio: f64,
        mask_seed: u64,
    ) -> Result<Array1<f64>> {
        let mask_seed = if mask_ratio == 0.0 { 0 } else { mask_seed };
        let mut rng = seed::rng_for(self.seed, &[pool_index as u64, mask_seed]);
        Ok(Array1::from_shape_simple_fn(self.dim, || {
            StandardNormal.sample(&mut rng)
        }))
    }
}

/// Trains a head on the support set of `episode` and predicts every query.
pub fn classify_episode(
    features: &mut dyn FeatureSource,
    episode: &Episode,
    pool: &[MultimodalSample],
    config: &EvalConfig,
) -> Result<Vec<usize>> {
    let ratio = config.inference.mask_ratio;
    let labels: Vec<usize> = episode.support.iter().map(|s| s.way).collect();
    let dim = features.dim();
    let head = train_head_on_features(
        |i, it| {
            let item = episode.support[i];
            let key = pool[item.pool_index].id as u64;
            features.pooled(
                item.pool_index,
                ratio,
                support_mask_seed(config.head.seed, key, it),
            )
        },
        &labels,
        config.n_way,
        dim,
        &config.head,
    )?;
    episode
        .query
        .iter()
        .map(|q| {
            let base = query_seed(config.inference.seed, q.sample_id);
            let pooled = (0..config.inference.ensemble)
                .map(|p| features.pooled(q.pool_index, ratio, member_seed(base, p)))
                .collect::<Result<Vec<_>>>()?;
            Ok(predict_from_pooled(&head, &pooled)?.argmax)
        })
        .collect()
}

pub fn run_with_features(
    features: &mut dyn FeatureSource,
    pool: &[MultimodalSample],
    config: &EvalConfig,
) -> Result<EvalResult> {
    run_episodes(pool, config, |_, episode| {
        classify_episode(features, episode, pool, config)
    })
}

/// Few-shot evaluation of `encoder` on the labeled target pool.
pub fn run_evaluation(
    encoder: &Encoder,
    pool: &[MultimodalSample],
    config: &EvalConfig,
) -> Result<EvalResult> {
    let mut features = EncoderFeatures::new(encoder, pool)?;
    run_with_features(&mut features, pool, config)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RuntimeOptions {
    pub iters: usize,
    pub warmup: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TradeoffRow {
    pub mask_ratio: f64,
    pub ensemble: usize,
    pub mean_acc: f64,
    pub ci95: f64,
    pub wallclock_ms: f64,
    pub wallclock_std_ms: f64,
    pub flops: u64,
}

/// Accuracy, wall-clock and FLOPs over the Cartesian product of ratios and
/// ensemble sizes. Every row uses the same episode and mask seeds.
pub fn tradeoff_sweep(
    encoder: &Encoder,
    pool: &[MultimodalSample],
    ratios: &[f64],
    ensembles: &[usize],
    config: &EvalConfig,
    runtime: RuntimeOptions,
) -> Result<Vec<TradeoffRow>> {
    let probe = pool
        .first()
        .ok_or_else(|| Error::Episode("trade-off sweep needs a non-empty pool".into()))?
        .clip(encoder.modality.kind)?;
    let shape = FlopsShape::of_encoder(encoder, config.n_way);
    let mut rng = seed::rng_for(config.head.seed, &[seed::tag("timing-head")]);
    let timing_head = FewShotHead {
        linear: Linear::new(&mut rng, encoder.embed_dim(), config.n_way),
    };
    let mut features = EncoderFeatures::new(encoder, pool)?;
    let mut rows = Vec::with_capacity(ratios.len() * ensembles.len());
    for &ratio in ratios {
        for &ensemble in ensembles {
            let cfg = EvalConfig {
                inference: InferenceConfig {
                    mask_ratio: ratio,
                    ensemble,
                    ..config.inference
                },
                ..*config
            };
            let result = run_with_features(&mut features, pool, &cfg)?;
            let timing = measure_runtime(
                encoder,
                &timing_head,
                probe,
                &cfg.inference,
                runtime.iters,
                runtime.warmup,
            )?;
            let cost = count_flops(&shape, encoder.grid, ratio, ensemble)?;
            log::info!(
                "rho={ratio} P={ensemble}: acc {:.4} +- {:.4}, {:.3} ms",
                result.mean_acc,
                result.ci95,
                timing.mean_ms
            );
            rows.push(TradeoffRow {
                mask_ratio: ratio,
                ensemble,
                mean_acc: result.mean_acc,
                ci95: result.ci95,
                wallclock_ms: timing.mean_ms,
                wallclock_std_ms: timing.std_ms,
                flops: cost.flops_total,
            });
        }
    }
    Ok(rows)
}

/// Unmasked pooled features of `samples` under `encoder`, one row per sample.
pub fn embeddings(
    encoder: &Encoder,
    samples: &[MultimodalSample],
) -> Result<Vec<(u32, Option<u32>, Array1<f64>)>> {
    let full = TubeMask::full(encoder.grid);
    samples
        .iter()
        .map(|s| {
            Ok((
                s.id,
                s.label,
                encoder
                    .encode(s.clip(encoder.modality.kind)?, &full)?
                    .pooled,
            ))
        })
        .collect()
}
