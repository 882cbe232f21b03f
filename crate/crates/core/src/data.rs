//! Synthetic multimodal video benchmark.
//!
//! Each class is a sprite-motion pattern. A sample carries three aligned
//! modalities rendered from the same trajectory:
//!
//! * RGB: a coloured disc over a domain-dependent background texture, with a
//!   brightness shift and additive noise.
//! * FLOW: the exact forward displacement of the disc, written on the pixels
//!   the disc covers in that frame (background is static, so zero elsewhere).
//! * POSE: 21 Gaussian keypoint heatmaps rigidly attached to the disc.
//!
//! Source and target domains differ only in appearance (texture, brightness,
//! noise) and use disjoint motion classes.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array3, Array4};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::seed;

pub const NUM_KEYPOINTS: usize = 21;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModalityKind {
    Rgb,
    Flow,
    Pose,
}

impl ModalityKind {
    pub const ALL: [ModalityKind; 3] = [ModalityKind::Rgb, ModalityKind::Flow, ModalityKind::Pose];

    pub fn name(self) -> &'static str {
        match self {
            ModalityKind::Rgb => "rgb",
            ModalityKind::Flow => "flow",
            ModalityKind::Pose => "pose",
        }
    }

    pub fn channels(self) -> usize {
        match self {
            ModalityKind::Rgb => 3,
            ModalityKind::Flow => 2,
            ModalityKind::Pose => NUM_KEYPOINTS,
        }
    }
}

impl fmt::Display for ModalityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModalityKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "rgb" => Ok(ModalityKind::Rgb),
            "flow" => Ok(ModalityKind::Flow),
            "pose" => Ok(ModalityKind::Pose),
            other => Err(Error::config(
                "modality",
                format!("unknown modality `{other}`"),
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ModalitySpec {
    pub kind: ModalityKind,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch_size: usize,
}

impl ModalitySpec {
    pub fn new(kind: ModalityKind, size: usize, patch_size: usize) -> Self {
        ModalitySpec {
            kind,
            height: size,
            width: size,
            channels: kind.channels(),
            patch_size,
        }
    }

    /// 32x32 RGB and FLOW with patch 4, 16x16 POSE with patch 2: an 8x8 token grid each.
    pub fn toy_defaults() -> [ModalitySpec; 3] {
        [
            ModalitySpec::new(ModalityKind::Rgb, 32, 4),
            ModalitySpec::new(ModalityKind::Flow, 32, 4),
            ModalitySpec::new(ModalityKind::Pose, 16, 2),
        ]
    }

    pub fn grid_hw(&self) -> (usize, usize) {
        (self.height / self.patch_size, self.width / self.patch_size)
    }

    pub fn validate(&self) -> Result<()> {
        let key = format!("{}_size", self.kind);
        if self.patch_size == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::config(key, "sizes must be positive"));
        }
        if self.height % self.patch_size != 0 || self.width % self.patch_size != 0 {
            return Err(Error::config(
                key,
                format!(
                    "{}x{} is not divisible by patch size {}",
                    self.height, self.width, self.patch_size
                ),
            ));
        }
        if self.channels != self.kind.channels() {
            return Err(Error::config(
                key,
                format!(
                    "{} expects {} channels, got {}",
                    self.kind,
                    self.kind.channels(),
                    self.channels
                ),
            ));
        }
        Ok(())
    }
}

/// One modality of one sample: `T x H x W x C` values.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    pub spec: ModalitySpec,
    pub frames: Array4<f32>,
}

impl Clip {
    pub fn num_frames(&self) -> usize {
        self.frames.dim().0
    }

    pub fn check_shape(&self) -> Result<()> {
        let (_, h, w, c) = self.frames.dim();
        if (h, w, c) != (self.spec.height, self.spec.width, self.spec.channels) {
            return Err(Error::contract(format!(
                "{} clip is {h}x{w}x{c}, spec says {}x{}x{}",
                self.spec.kind, self.spec.height, self.spec.width, self.spec.channels
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn name(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultimodalSample {
    pub id: u32,
    pub clips: BTreeMap<ModalityKind, Clip>,
    pub label: Option<u32>,
    pub domain: Domain,
}

impl MultimodalSample {
    pub fn clip(&self, kind: ModalityKind) -> Result<&Clip> {
        self.clips
            .get(&kind)
            .ok_or_else(|| Error::contract(format!("sample {} has no {kind} clip", self.id)))
    }
}

/// Appearance of one domain.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Appearance {
    /// Background texture id, see [`background_value`].
    pub background: u8,
    pub brightness_shift: f32,
    pub noise: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub n_source_classes: u32,
    pub n_target_classes: u32,
    /// First target class id. Must be at least `n_source_classes`.
    pub target_class_offset: u32,
    pub samples_per_class: usize,
    pub frames: usize,
    pub modalities: Vec<ModalitySpec>,
    pub source: Appearance,
    pub target: Appearance,
    /// Heatmap standard deviation in POSE pixels.
    pub pose_sigma: f64,
    /// Disc radius in RGB pixels.
    pub sprite_radius: f64,
    /// Multiplies every class speed. Zero yields static clips.
    pub speed_scale: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            n_source_classes: 8,
            n_target_classes: 8,
            target_class_offset: 8,
            samples_per_class: 20,
            frames: 8,
            modalities: ModalitySpec::toy_defaults().to_vec(),
            source: Appearance {
                background: 0,
                brightness_shift: 0.0,
                noise: 0.02,
            },
            target: Appearance {
                background: 1,
                brightness_shift: 0.25,
                noise: 0.08,
            },
            pose_sigma: 10.0 * 16.0 / 56.0,
            sprite_radius: 3.0,
            speed_scale: 1.0,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn modality(&self, kind: ModalityKind) -> Result<ModalitySpec> {
        self.modalities
            .iter()
            .copied()
            .find(|m| m.kind == kind)
            .ok_or_else(|| Error::config("modalities", format!("no {kind} modality configured")))
    }

    pub fn source_classes(&self) -> std::ops::Range<u32> {
        0..self.n_source_classes
    }

    pub fn target_classes(&self) -> std::ops::Range<u32> {
        self.target_class_offset..self.target_class_offset + self.n_target_classes
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_source_classes == 0 {
            return Err(Error::config("n_source_classes", "must be positive"));
        }
        if self.n_target_classes == 0 {
            return Err(Error::config("n_target_classes", "must be positive"));
        }
        if self.target_class_offset < self.n_source_classes {
            return Err(Error::config(
                "target_class_offset",
                "target class ids overlap the source range",
            ));
        }
        if self.samples_per_class == 0 {
            return Err(Error::config("samples_per_class", "must be positive"));
        }
        if self.frames < 2 {
            return Err(Error::config("frames", "need at least two frames"));
        }
        if !(self.pose_sigma > 0.0) {
            return Err(Error::config("pose_sigma", "must be positive"));
        }
        if !(self.sprite_radius >= 0.0) || !self.speed_scale.is_finite() || self.speed_scale < 0.0 {
            return Err(Error::config(
                "speed_scale",
                "must be finite and non-negative",
            ));
        }
        let mut grid = None;
        for kind in ModalityKind::ALL {
            let m = self.modality(kind)?;
            m.validate()?;
            match grid {
                None => grid = Some(m.grid_hw()),
                Some(g) if g != m.grid_hw() => {
                    return Err(Error::config(
                        format!("{kind}_size"),
                        format!("token grid {:?} differs from {:?}", m.grid_hw(), g),
                    ))
                }
                _ => {}
            }
        }
        let rgb = self.modality(ModalityKind::Rgb)?;
        let flow = self.modality(ModalityKind::Flow)?;
        if (rgb.height, rgb.width) != (flow.height, flow.width) {
            return Err(Error::config(
                "flow_size",
                "FLOW must share the RGB resolution",
            ));
        }
        let min_side = rgb.height.min(rgb.width) as f64;
        if 2.0 * self.sprite_radius + 2.0 >= min_side {
            return Err(Error::config(
                "sprite_radius",
                "sprite does not fit the frame",
            ));
        }
        Ok(())
    }
}

/// The three splits produced by [`generate_dataset`].
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub source: Vec<MultimodalSample>,
    pub target_unlabeled: Vec<MultimodalSample>,
    pub target_labeled: Vec<MultimodalSample>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MotionKind {
    Linear,
    Circular,
    Zigzag,
}

/// Motion pattern of a class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Motion {
    pub kind: MotionKind,
    /// Heading in radians (start phase for circular motion).
    pub angle: f64,
    /// Pixels per frame along the path.
    pub speed: f64,
    /// +1 counter-clockwise, -1 clockwise. Circular only.
    pub turn: f64,
}

const GOLDEN_ANGLE: f64 = 2.399_963_229_728_653;

/// Deterministic motion pattern for a class id.
pub fn class_motion(class_id: u32) -> Motion {
    let kind = match class_id % 3 {
        0 => MotionKind::Linear,
        1 => MotionKind::Circular,
        _ => MotionKind::Zigzag,
    };
    Motion {
        kind,
        angle: (class_id as f64 * GOLDEN_ANGLE).rem_euclid(2.0 * PI),
        speed: 1.0 + 0.5 * ((class_id / 3) % 3) as f64,
        turn: if (class_id / 2) % 2 == 0 { 1.0 } else { -1.0 },
    }
}

/// Sprite centre positions for frames `0..=frames`, relative to an arbitrary origin.
fn relative_path(
    motion: &Motion,
    frames: usize,
    speed: f64,
    speed_scale: f64,
    angle: f64,
) -> Vec<(f64, f64)> {
    let (dx, dy) = (angle.cos(), angle.sin());
    (0..=frames)
        .map(|t| {
            let t = t as f64;
            match motion.kind {
                MotionKind::Linear => (t * speed * dx, t * speed * dy),
                MotionKind::Circular => {
                    let radius = 5.0;
                    let phase = angle + motion.turn * t * speed / radius;
                    (radius * phase.cos(), radius * phase.sin())
                }
                MotionKind::Zigzag => {
                    // triangle wave across the heading, period 4 frames at unit speed scale
                    let amp = 3.0;
                    let u = (t * speed_scale / 4.0).fract();
                    let tri = if u < 0.5 {
                        4.0 * u - 1.0
                    } else {
                        3.0 - 4.0 * u
                    };
                    let along = t * speed * 0.6;
                    (along * dx - amp * tri * dy, along * dy + amp * tri * dx)
                }
            }
        })
        .collect()
}

/// Per-sample motion instance: jittered class motion placed inside the frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    /// Continuous sprite centres for frames `0..=T` in RGB pixel coordinates (x, y).
    pub centers: Vec<(f64, f64)>,
}

impl Trajectory {
    fn sample(
        motion: &Motion,
        frames: usize,
        speed_scale: f64,
        width: usize,
        height: usize,
        margin: f64,
        rng: &mut ChaCha8Rng,
    ) -> Trajectory {
        let speed = motion.speed * speed_scale * rng.gen_range(0.9..1.1);
        let angle = motion.angle + rng.gen_range(-0.14..0.14);
        let rel = relative_path(motion, frames, speed, speed_scale, angle);
        let (min_x, max_x) = extent(rel.iter().map(|p| p.0));
        let (min_y, max_y) = extent(rel.iter().map(|p| p.1));
        let lo_x = margin - min_x;
        let hi_x = (width as f64 - 1.0 - margin) - max_x;
        let lo_y = margin - min_y;
        let hi_y = (height as f64 - 1.0 - margin) - max_y;
        let ox = pick(lo_x, hi_x, rng);
        let oy = pick(lo_y, hi_y, rng);
        Trajectory {
            centers: rel.into_iter().map(|(x, y)| (x + ox, y + oy)).collect(),
        }
    }

    /// Integer pixel centre the sprite is drawn at in frame `t`.
    pub fn rendered(&self, t: usize) -> (i64, i64) {
        let (x, y) = self.centers[t];
        (x.round() as i64, y.round() as i64)
    }

    pub fn displacement(&self, t: usize) -> (f64, f64) {
        let (x0, y0) = self.centers[t];
        let (x1, y1) = self.centers[t + 1];
        (x1 - x0, y1 - y0)
    }
}

fn extent(values: impl Iterator<Item = f64>) -> (f64, f64) {
    values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    })
}

fn pick(lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        // path longer than the frame: centre it
        0.5 * (lo + hi)
    }
}

/// Background intensity for texture `id` at pixel (x, y), before brightness shift.
pub fn background_value(id: u8, x: usize, y: usize, phase: usize, size: usize) -> f32 {
    let (xf, yf, s) = (x as f64, y as f64, size.max(1) as f64);
    let v = match id {
        0 => 0.25 + 0.3 * (yf / s),
        1 => {
            if ((x + phase) / 4 + (y + phase / 2) / 4) % 2 == 0 {
                0.15
            } else {
                0.65
            }
        }
        2 => {
            if ((x + y + phase) / 3) % 2 == 0 {
                0.2
            } else {
                0.6
            }
        }
        _ => 0.4 + 0.25 * ((xf + phase as f64) * 0.7).sin() * (yf * 0.5).cos(),
    };
    v as f32
}

/// Keypoint layout relative to the sprite centre, in RGB pixels: wrist plus
/// five fingers of four joints each.
fn keypoint_offsets(radius: f64) -> [(f64, f64); NUM_KEYPOINTS] {
    let mut out = [(0.0, 0.0); NUM_KEYPOINTS];
    out[0] = (0.0, radius);
    for finger in 0..5 {
        let a = -PI * (0.15 + 0.175 * finger as f64);
        for joint in 0..4 {
            let r = radius * (0.4 + 0.2 * joint as f64);
            out[1 + finger * 4 + joint] = (r * a.cos(), r * a.sin());
        }
    }
    out
}

/// Gaussian keypoint heatmaps, `height x width x 21`, peak 1 at each present keypoint.
pub fn make_heatmap(
    keypoints: &[Option<(f64, f64)>],
    height: usize,
    width: usize,
    sigma: f64,
) -> Result<Array3<f32>> {
    if !(sigma > 0.0) {
        return Err(Error::config(
            "pose_sigma",
            format!("sigma must be positive, got {sigma}"),
        ));
    }
    if keypoints.len() != NUM_KEYPOINTS {
        return Err(Error::contract(format!(
            "expected {NUM_KEYPOINTS} keypoints, got {}",
            keypoints.len()
        )));
    }
    let mut out = Array3::<f32>::zeros((height, width, NUM_KEYPOINTS));
    let denom = 2.0 * sigma * sigma;
    for (j, kp) in keypoints.iter().enumerate() {
        let Some((kx, ky)) = *kp else { continue };
        for y in 0..height {
            let dy = y as f64 - ky;
            for x in 0..width {
                let dx = x as f64 - kx;
                out[[y, x, j]] = (-(dx * dx + dy * dy) / denom).exp() as f32;
            }
        }
    }
    Ok(out)
}

fn sprite_color(rng: &mut ChaCha8Rng) -> [f32; 3] {
    // saturated hue so the disc stands out from grey textures
    let h = rng.gen_range(0.0..6.0f64);
    let x = (1.0 - ((h % 2.0) - 1.0).abs()) as f32;
    let (r, g, b) = match h as u32 {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [0.1 + 0.85 * r, 0.1 + 0.85 * g, 0.1 + 0.85 * b]
}

fn covered(cx: i64, cy: i64, radius: f64, x: usize, y: usize) -> bool {
    let dx = x as f64 - cx as f64;
    let dy = y as f64 - cy as f64;
    dx * dx + dy * dy <= radius * radius
}

fn render_sample(
    spec: &DatasetSpec,
    class_id: u32,
    appearance: &Appearance,
    rng: &mut ChaCha8Rng,
) -> Result<BTreeMap<ModalityKind, Clip>> {
    let rgb = spec.modality(ModalityKind::Rgb)?;
    let flow = spec.modality(ModalityKind::Flow)?;
    let pose = spec.modality(ModalityKind::Pose)?;
    let t_len = spec.frames;
    let motion = class_motion(class_id);
    let margin = spec.sprite_radius + 1.0;
    let traj = Trajectory::sample(
        &motion,
        t_len,
        spec.speed_scale,
        rgb.width,
        rgb.height,
        margin,
        rng,
    );
    let color = sprite_color(rng);
    let phase = rng.gen_range(0..8usize);
    let noise = Normal::new(0.0f64, 1.0).expect("unit normal");

    let mut rgb_frames = Array4::<f32>::zeros((t_len, rgb.height, rgb.width, 3));
    let mut flow_frames = Array4::<f32>::zeros((t_len, flow.height, flow.width, 2));
    let mut pose_frames = Array4::<f32>::zeros((t_len, pose.height, pose.width, NUM_KEYPOINTS));
    let offsets = keypoint_offsets(spec.sprite_radius);
    let sx = pose.width as f64 / rgb.width as f64;
    let sy = pose.height as f64 / rgb.height as f64;

    for t in 0..t_len {
        let (cx, cy) = traj.rendered(t);
        let (fx, fy) = traj.displacement(t);
        for y in 0..rgb.height {
            for x in 0..rgb.width {
                let on = covered(cx, cy, spec.sprite_radius, x, y);
                let bg = background_value(appearance.background, x, y, phase, rgb.width);
                for c in 0..3 {
                    let base = if on { color[c] } else { bg };
                    let mut v = base + appearance.brightness_shift;
                    if appearance.noise > 0.0 {
                        v += appearance.noise * noise.sample(rng) as f32;
                    }
                    rgb_frames[[t, y, x, c]] = v;
                }
                if on {
                    flow_frames[[t, y, x, 0]] = fx as f32;
                    flow_frames[[t, y, x, 1]] = fy as f32;
                }
            }
        }
        let (px, py) = traj.centers[t];
        let keypoints: Vec<Option<(f64, f64)>> = offsets
            .iter()
            .map(|&(ox, oy)| {
                let kx = (px + ox) * sx;
                let ky = (py + oy) * sy;
                let inside = kx >= 0.0
                    && ky >= 0.0
                    && kx <= (pose.width - 1) as f64
                    && ky <= (pose.height - 1) as f64;
                inside.then_some((kx, ky))
            })
            .collect();
        let heat = make_heatmap(&keypoints, pose.height, pose.width, spec.pose_sigma)?;
        pose_frames
            .index_axis_mut(ndarray::Axis(0), t)
            .assign(&heat);
    }

    let mut clips = BTreeMap::new();
    clips.insert(
        ModalityKind::Rgb,
        Clip {
            spec: rgb,
            frames: rgb_frames,
        },
    );
    clips.insert(
        ModalityKind::Flow,
        Clip {
            spec: flow,
            frames: flow_frames,
        },
    );
    clips.insert(
        ModalityKind::Pose,
        Clip {
            spec: pose,
            frames: pose_frames,
        },
    );
    Ok(clips)
}

/// Regenerates the trajectory used for a sample, for inspection and tests.
pub fn sample_trajectory(
    spec: &DatasetSpec,
    split: Split,
    class_id: u32,
    index: usize,
) -> Result<Trajectory> {
    let rgb = spec.modality(ModalityKind::Rgb)?;
    let mut rng = sample_rng(spec, split, class_id, index);
    Ok(Trajectory::sample(
        &class_motion(class_id),
        spec.frames,
        spec.speed_scale,
        rgb.width,
        rgb.height,
        spec.sprite_radius + 1.0,
        &mut rng,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Source,
    TargetUnlabeled,
    TargetLabeled,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Source, Split::TargetUnlabeled, Split::TargetLabeled];

    pub fn name(self) -> &'static str {
        match self {
            Split::Source => "source",
            Split::TargetUnlabeled => "target_unlabeled",
            Split::TargetLabeled => "target_labeled",
        }
    }

    pub fn domain(self) -> Domain {
        match self {
            Split::Source => Domain::Source,
            _ => Domain::Target,
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        Split::ALL.into_iter().find(|sp| sp.name() == s)
    }
}

fn sample_rng(spec: &DatasetSpec, split: Split, class_id: u32, index: usize) -> ChaCha8Rng {
    seed::rng_for(
        spec.seed,
        &[seed::tag(split.name()), class_id as u64, index as u64],
    )
}

/// Generates `(source, target_unlabeled, target_labeled)`. Deterministic in `spec`.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut next_id = 0u32;
    let mut split_samples =
        |split: Split, classes: std::ops::Range<u32>| -> Result<Vec<MultimodalSample>> {
            let appearance = match split.domain() {
                Domain::Source => spec.source,
                Domain::Target => spec.target,
            };
            let mut out = Vec::with_capacity(classes.len() * spec.samples_per_class);
            for class_id in classes {
                for index in 0..spec.samples_per_class {
                    let mut rng = sample_rng(spec, split, class_id, index);
                    // trajectory is drawn first inside render_sample, matching sample_trajectory
                    let clips = render_sample(spec, class_id, &appearance, &mut rng)?;
                    out.push(MultimodalSample {
                        id: next_id,
                        clips,
                        label: (split != Split::TargetUnlabeled).then_some(class_id),
                        domain: split.domain(),
                    });
                    next_id += 1;
                }
            }
            Ok(out)
        };
    let source = split_samples(Split::Source, spec.source_classes())?;
    let target_unlabeled = split_samples(Split::TargetUnlabeled, spec.target_classes())?;
    let target_labeled = split_samples(Split::TargetLabeled, spec.target_classes())?;
    Ok(Dataset {
        spec: spec.clone(),
        source,
        target_unlabeled,
        target_labeled,
    })
}

/// A pool entry used by an episode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpisodeItem {
    /// Position in the pool the episode was drawn from.
    pub pool_index: usize,
    pub sample_id: u32,
    /// Episode-local label in `0..N`, the position of the class in `class_ids`.
    pub way: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub class_ids: Vec<u32>,
    pub support: Vec<EpisodeItem>,
    pub query: Vec<EpisodeItem>,
}

/// Draws an N-way K-shot episode with `q` queries per class, without replacement.
pub fn sample_episode(
    pool: &[MultimodalSample],
    n_way: usize,
    k_shot: usize,
    queries: usize,
    seed: u64,
) -> Result<Episode> {
    if n_way == 0 || k_shot == 0 {
        return Err(Error::Episode("N and K must be positive".into()));
    }
    let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, s) in pool.iter().enumerate() {
        if let Some(label) = s.label {
            by_class.entry(label).or_default().push(i);
        }
    }
    let mut eligible: Vec<u32> = by_class
        .iter()
        .filter(|(_, idx)| idx.len() >= k_shot + queries)
        .map(|(&c, _)| c)
        .collect();
    if eligible.len() < n_way {
        return Err(Error::Episode(format!(
            "{n_way}-way {k_shot}-shot with {queries} queries needs {n_way} classes of at least {} labeled samples; pool has {}",
            k_shot + queries,
            eligible.len()
        )));
    }
    let mut rng = seed::rng(seed);
    eligible.shuffle(&mut rng);
    eligible.truncate(n_way);
    let mut support = Vec::with_capacity(n_way * k_shot);
    let mut query = Vec::with_capacity(n_way * queries);
    for (way, class) in eligible.iter().enumerate() {
        let mut members = by_class[class].clone();
        members.shuffle(&mut rng);
        let item = |i: usize| EpisodeItem {
            pool_index: i,
            sample_id: pool[i].id,
            way,
        };
        support.extend(members[..k_shot].iter().map(|&i| item(i)));
        query.extend(members[k_shot..k_shot + queries].iter().map(|&i| item(i)));
    }
    Ok(Episode {
        class_ids: eligible,
        support,
        query,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> DatasetSpec {
        DatasetSpec {
            n_source_classes: 3,
            n_target_classes: 3,
            target_class_offset: 3,
            samples_per_class: 2,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn heatmap_peak_and_sigma_distance() {
        let mut kps = vec![None; NUM_KEYPOINTS];
        kps[0] = Some((8.0, 8.0));
        let h = make_heatmap(&kps, 32, 32, 10.0).unwrap();
        assert_eq!(h[[8, 8, 0]], 1.0);
        assert!((h[[8, 18, 0]] as f64 - (-0.5f64).exp()).abs() < 1e-6);
        assert!(h.index_axis(ndarray::Axis(2), 1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn heatmap_absent_keypoints_are_zero() {
        let h = make_heatmap(&[None; NUM_KEYPOINTS], 16, 16, 2.0).unwrap();
        assert!(h.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn heatmap_rejects_bad_sigma() {
        assert!(matches!(
            make_heatmap(&[None; NUM_KEYPOINTS], 4, 4, 0.0),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn static_scene_has_zero_flow() {
        let spec = DatasetSpec {
            speed_scale: 0.0,
            source: Appearance {
                background: 0,
                brightness_shift: 0.0,
                noise: 0.0,
            },
            target: Appearance {
                background: 1,
                brightness_shift: 0.0,
                noise: 0.0,
            },
            ..small_spec()
        };
        let ds = generate_dataset(&spec).unwrap();
        for s in ds.source.iter().chain(&ds.target_labeled) {
            assert!(s.clips[&ModalityKind::Flow]
                .frames
                .iter()
                .all(|&v| v == 0.0));
        }
    }

    #[test]
    fn counts_and_labels() {
        let spec = DatasetSpec {
            n_source_classes: 8,
            samples_per_class: 10,
            n_target_classes: 2,
            target_class_offset: 8,
            ..DatasetSpec::default()
        };
        let ds = generate_dataset(&spec).unwrap();
        assert_eq!(ds.source.len(), 80);
        assert!(ds
            .source
            .iter()
            .all(|s| s.label.is_some() && s.domain == Domain::Source));
        assert!(ds.target_unlabeled.iter().all(|s| s.label.is_none()));
        assert!(ds.target_labeled.iter().all(|s| s.label.is_some()));
    }

    #[test]
    fn rejects_invalid_specs() {
        let mut spec = small_spec();
        spec.target_class_offset = 1;
        assert!(matches!(generate_dataset(&spec), Err(Error::Config { .. })));

        let mut spec = small_spec();
        spec.modalities[0].patch_size = 5;
        assert!(matches!(generate_dataset(&spec), Err(Error::Config { .. })));

        let mut spec = small_spec();
        spec.modalities[2] = ModalitySpec::new(ModalityKind::Pose, 16, 4);
        assert!(matches!(generate_dataset(&spec), Err(Error::Config { .. })));
    }

    #[test]
    fn episode_sizes_and_errors() {
        let spec = DatasetSpec {
            n_target_classes: 6,
            samples_per_class: 16,
            ..small_spec()
        };
        let ds = generate_dataset(&spec).unwrap();
        let ep = sample_episode(&ds.target_labeled, 5, 1, 15, 3).unwrap();
        assert_eq!(ep.support.len(), 5);
        assert_eq!(ep.query.len(), 75);
        assert!(ep
            .support
            .iter()
            .all(|s| ep.query.iter().all(|q| q.sample_id != s.sample_id)));
        assert_eq!(ep, sample_episode(&ds.target_labeled, 5, 1, 15, 3).unwrap());
        assert!(matches!(
            sample_episode(&ds.target_labeled, 7, 1, 15, 3),
            Err(Error::Episode(_))
        ));
        assert!(matches!(
            sample_episode(&ds.target_labeled, 5, 2, 15, 3),
            Err(Error::Episode(_))
        ));
    }
}
