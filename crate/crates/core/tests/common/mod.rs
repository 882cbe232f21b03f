#![allow(dead_code)]

use tubefsl::data::{DatasetSpec, ModalityKind, ModalitySpec};
use tubefsl::nn::{EncoderConfig, Objective, Parameters};

/// 16x16 RGB/FLOW (patch 4) and 8x8 POSE (patch 2), 4 frames: a 2 x 4 x 4 token grid.
pub fn tiny_dataset_spec(seed: u64) -> DatasetSpec {
    DatasetSpec {
        n_source_classes: 3,
        n_target_classes: 3,
        target_class_offset: 3,
        samples_per_class: 2,
        frames: 4,
        modalities: vec![
            ModalitySpec::new(ModalityKind::Rgb, 16, 4),
            ModalitySpec::new(ModalityKind::Flow, 16, 4),
            ModalitySpec::new(ModalityKind::Pose, 8, 2),
        ],
        pose_sigma: 1.5,
        sprite_radius: 2.0,
        seed,
        ..DatasetSpec::default()
    }
}

pub fn tiny_encoder_config() -> EncoderConfig {
    EncoderConfig {
        embed_dim: 16,
        depth: 2,
        heads: 2,
        mlp_ratio: 4,
        tubelet: 2,
        decoder_dim: 16,
        decoder_depth: 1,
        decoder_heads: 2,
    }
}

pub struct FdReport {
    /// Relative error over every sampled coordinate at once.
    pub global_rel: f64,
    /// Worst per-tensor relative error among tensors with a non-negligible gradient.
    pub worst_tensor_rel: f64,
    pub worst_tensor: String,
    /// Worst relative error of the random directional derivatives.
    pub worst_direction_rel: f64,
    pub analytic_norm: f64,
}

fn central<O: Objective>(
    objective: &O,
    params: &O::Params,
    base: &[f64],
    dir: &[(usize, f64)],
    step: f64,
) -> f64 {
    let mut probe = params.clone();
    let mut flat = base.to_vec();
    for &(i, v) in dir {
        flat[i] = base[i] + step * v;
    }
    probe.assign_flat(&flat);
    let up = objective.loss(&probe).expect("loss");
    for &(i, v) in dir {
        flat[i] = base[i] - step * v;
    }
    probe.assign_flat(&flat);
    let down = objective.loss(&probe).expect("loss");
    (up - down) / (2.0 * step)
}

/// Central finite differences against the analytic gradient. At most
/// `per_tensor` coordinates of each tensor are probed (all of them when the
/// tensor is smaller), plus `directions` random directions over every
/// parameter at once.
pub fn finite_difference_check<O: Objective>(
    objective: &O,
    params: &O::Params,
    step: f64,
    per_tensor: usize,
    directions: usize,
) -> FdReport {
    use rand::seq::index::sample;
    use rand::Rng;

    let (_, analytic) = objective.loss_and_grad(params).expect("analytic gradient");
    let base = params.to_flat();
    let an = analytic.to_flat();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut rng = tubefsl::seed::rng(0xfd);

    let mut ranges = Vec::new();
    let mut off = 0;
    params.visit("", &mut |name, _, d| {
        ranges.push((name.to_string(), off..off + d.len()));
        off += d.len();
    });

    let (mut all_a, mut all_n) = (Vec::new(), Vec::new());
    let mut per = Vec::new();
    for (name, r) in &ranges {
        let picks: Vec<usize> = if r.len() <= per_tensor {
            r.clone().collect()
        } else {
            sample(&mut rng, r.len(), per_tensor)
                .into_iter()
                .map(|i| r.start + i)
                .collect()
        };
        let a: Vec<f64> = picks.iter().map(|&i| an[i]).collect();
        let n: Vec<f64> = picks
            .iter()
            .map(|&i| central(objective, params, &base, &[(i, 1.0)], step))
            .collect();
        all_a.extend_from_slice(&a);
        all_n.extend_from_slice(&n);
        per.push((name.clone(), a, n));
    }
    let diff = |a: &[f64], n: &[f64]| a.iter().zip(n).map(|(x, y)| x - y).collect::<Vec<_>>();
    let scale = norm(&all_a).max(norm(&all_n)).max(1e-300);
    let global_rel = norm(&diff(&all_a, &all_n)) / scale;

    // sampled subsets of different tensors are compared against the same floor
    let floor = 1e-6 * scale;
    let mut worst = (0.0f64, String::new());
    for (name, a, n) in &per {
        let s = norm(a).max(norm(n));
        if s > floor {
            let rel = norm(&diff(a, n)) / s;
            if rel > worst.0 {
                worst = (rel, name.clone());
            }
        }
    }

    let mut worst_dir = 0.0f64;
    for _ in 0..directions {
        let v: Vec<f64> = (0..base.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let vn = norm(&v);
        let dir: Vec<(usize, f64)> = v.iter().enumerate().map(|(i, x)| (i, x / vn)).collect();
        let a: f64 = dir.iter().map(|&(i, x)| an[i] * x).sum();
        let n = central(objective, params, &base, &dir, step);
        worst_dir = worst_dir.max((a - n).abs() / a.abs().max(n.abs()).max(1e-300));
    }

    FdReport {
        global_rel,
        worst_tensor_rel: worst.0,
        worst_tensor: worst.1,
        worst_direction_rel: worst_dir,
        analytic_norm: norm(&an),
    }
}

/// Uniform noise clip in [-1, 1) for `spec`.
pub fn random_clip(
    spec: tubefsl::data::ModalitySpec,
    frames: usize,
    seed: u64,
) -> tubefsl::data::Clip {
    use rand::Rng;
    let mut rng = tubefsl::seed::rng(seed);
    tubefsl::data::Clip {
        spec,
        frames: ndarray::Array4::from_shape_simple_fn(
            (frames, spec.height, spec.width, spec.channels),
            || rng.gen_range(-1.0f32..1.0),
        ),
    }
}

pub fn tiny_rgb_spec() -> ModalitySpec {
    ModalitySpec::new(ModalityKind::Rgb, 16, 4)
}

pub fn tiny_encoder(seed: u64) -> tubefsl::nn::Encoder {
    let mut rng = tubefsl::seed::rng(seed);
    tubefsl::nn::Encoder::new(&tiny_encoder_config(), tiny_rgb_spec(), 4, &mut rng).unwrap()
}

/// Config text for a complete run that finishes in seconds.
pub fn tiny_run_text(out_dir: &std::path::Path) -> String {
    format!(
        "out_dir = {}
n_source_classes = 3
n_target_classes = 3
samples_per_class = 4
frames = 4
rgb_size = 16
flow_size = 16
pose_size = 8
sprite_radius = 2
pose_sigma = 1.5
embed_dim = 16
depth = 2
heads = 2
decoder_dim = 16
pretrain_epochs = 1
pretrain_batch = 4
distill_epochs = 1
distill_batch = 4
nway = 3
kshot = 1
queries = 2
episodes = 5
head_iters = 5
runtime_iters = 2
runtime_warmup = 0
tradeoff_rhos = 0,0.5
tradeoff_ensembles = 1,2
ablation_seeds = 0
ablation_episodes = 3
",
        out_dir.display()
    )
}
