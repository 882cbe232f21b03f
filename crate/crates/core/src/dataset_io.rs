//! On-disk dataset layout.
//!
//! `manifest.txt` holds the generating spec and one record per sample:
//!
//! ```text
//! record=<id> <split> <domain> <label|none> <kind>:<relative path> ...
//! ```
//!
//! Each clip lives in its own tensor file: the bytes `TFT1`, a little-endian
//! `u32` rank, `u32` dimensions, then `f32` values in row-major order.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array4;

use crate::data::{
    Appearance, Clip, Dataset, DatasetSpec, Domain, ModalityKind, ModalitySpec, MultimodalSample,
    Split,
};
use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.txt";
pub const DATASET_MAGIC: &str = "tubefsl-dataset v1";
const TENSOR_MAGIC: &[u8; 4] = b"TFT1";

pub fn write_tensor(path: &Path, t: &Array4<f32>) -> Result<()> {
    let mut out = Vec::with_capacity(4 + 4 * 5 + t.len() * 4);
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Array4<f32>> {
    let name = path.display().to_string();
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => {
            Error::Missing(format!("tensor file {name} does not exist"))
        }
        _ => Error::Io(e),
    })?;
    let word = |i: usize| -> Result<u32> {
        bytes
            .get(i..i + 4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
            .ok_or_else(|| Error::format(&name, "truncated header"))
    };
    if bytes.get(..4) != Some(TENSOR_MAGIC.as_slice()) {
        return Err(Error::format(&name, "not a TFT1 tensor"));
    }
    if word(4)? != 4 {
        return Err(Error::format(&name, "clip tensors have rank 4"));
    }
    let dims: Vec<usize> = (0..4)
        .map(|i| word(8 + 4 * i).map(|d| d as usize))
        .collect::<Result<_>>()?;
    let body = &bytes[24..];
    let n: usize = dims.iter().product();
    if body.len() != n * 4 {
        return Err(Error::format(
            &name,
            format!("expected {} data bytes, found {}", n * 4, body.len()),
        ));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Array4::from_shape_vec((dims[0], dims[1], dims[2], dims[3]), values)
        .map_err(|e| Error::format(&name, e.to_string()))
}

fn spec_lines(spec: &DatasetSpec) -> Vec<String> {
    let mut lines = vec![
        format!("n_source_classes={}", spec.n_source_classes),
        format!("n_target_classes={}", spec.n_target_classes),
        format!("target_class_offset={}", spec.target_class_offset),
        format!("samples_per_class={}", spec.samples_per_class),
        format!("frames={}", spec.frames),
    ];
    for (name, a) in [("source", spec.source), ("target", spec.target)] {
        lines.push(format!(
            "{name}_appearance={},{},{}",
            a.background, a.brightness_shift, a.noise
        ));
    }
    lines.push(format!("pose_sigma={}", spec.pose_sigma));
    lines.push(format!("sprite_radius={}", spec.sprite_radius));
    lines.push(format!("speed_scale={}", spec.speed_scale));
    lines.push(format!("seed={}", spec.seed));
    for m in &spec.modalities {
        lines.push(format!(
            "modality={},{},{},{}",
            m.kind, m.height, m.width, m.patch_size
        ));
    }
    lines
}

fn clip_file(id: u32, kind: ModalityKind) -> String {
    format!("clips/{id:06}_{kind}.tft")
}

/// Writes `dataset` under `dir`, replacing any previous manifest.
pub fn save_dataset(dataset: &Dataset, dir: &Path, config_hash: &str) -> Result<()> {
    std::fs::create_dir_all(dir.join("clips"))?;
    let mut manifest = format!("# config_hash={config_hash}\n{DATASET_MAGIC}\n");
    for l in spec_lines(&dataset.spec) {
        manifest.push_str(&l);
        manifest.push('\n');
    }
    for (split, samples) in splits(dataset) {
        for s in samples {
            let label = s.label.map_or("none".to_string(), |l| l.to_string());
            let mut record = format!(
                "record={} {} {} {label}",
                s.id,
                split.name(),
                s.domain.name()
            );
            for (&kind, clip) in &s.clips {
                let rel = clip_file(s.id, kind);
                write_tensor(&dir.join(&rel), &clip.frames)?;
                record.push_str(&format!(" {kind}:{rel}"));
            }
            manifest.push_str(&record);
            manifest.push('\n');
        }
    }
    std::fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

fn splits(d: &Dataset) -> [(Split, &Vec<MultimodalSample>); 3] {
    [
        (Split::Source, &d.source),
        (Split::TargetUnlabeled, &d.target_unlabeled),
        (Split::TargetLabeled, &d.target_labeled),
    ]
}

/// A loaded dataset and the config hash recorded in its manifest.
pub struct LoadedDataset {
    pub dataset: Dataset,
    pub config_hash: Option<String>,
}

pub fn load_dataset(dir: &Path) -> Result<LoadedDataset> {
    let manifest_path = dir.join(MANIFEST);
    let name = manifest_path.display().to_string();
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Missing(format!(
            "dataset manifest {name} does not exist; run `tubefsl gen-data` first"
        )),
        _ => Error::Io(e),
    })?;
    let bad = |line: &str| Error::format(&name, format!("bad line `{line}`"));
    let mut config_hash = None;
    let mut spec = DatasetSpec {
        modalities: Vec::new(),
        ..DatasetSpec::default()
    };
    let mut seen_magic = false;
    let mut dataset_parts: BTreeMap<Split, Vec<MultimodalSample>> = BTreeMap::new();
    for line in text.lines() {
        if let Some(h) = line.strip_prefix("# config_hash=") {
            config_hash = Some(h.to_string());
            continue;
        }
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        if line == DATASET_MAGIC {
            seen_magic = true;
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| bad(line))?;
        let parse_u = |v: &str| v.parse::<u64>().map_err(|_| bad(line));
        let parse_f = |v: &str| v.parse::<f64>().map_err(|_| bad(line));
        match key {
            "n_source_classes" => spec.n_source_classes = parse_u(value)? as u32,
            "n_target_classes" => spec.n_target_classes = parse_u(value)? as u32,
            "target_class_offset" => spec.target_class_offset = parse_u(value)? as u32,
            "samples_per_class" => spec.samples_per_class = parse_u(value)? as usize,
            "frames" => spec.frames = parse_u(value)? as usize,
            "source_appearance" | "target_appearance" => {
                let p: Vec<&str> = value.split(',').collect();
                if p.len() != 3 {
                    return Err(bad(line));
                }
                let a = Appearance {
                    background: p[0].parse().map_err(|_| bad(line))?,
                    brightness_shift: p[1].parse().map_err(|_| bad(line))?,
                    noise: p[2].parse().map_err(|_| bad(line))?,
                };
                if key == "source_appearance" {
                    spec.source = a;
                } else {
                    spec.target = a;
                }
            }
            "pose_sigma" => spec.pose_sigma = parse_f(value)?,
            "sprite_radius" => spec.sprite_radius = parse_f(value)?,
            "speed_scale" => spec.speed_scale = parse_f(value)?,
            "seed" => spec.seed = parse_u(value)?,
            "modality" => {
                let p: Vec<&str> = value.split(',').collect();
                if p.len() != 4 {
                    return Err(bad(line));
                }
                let kind: ModalityKind = p[0].parse().map_err(|_| bad(line))?;
                let n = |i: usize| p[i].parse::<usize>().map_err(|_| bad(line));
                spec.modalities.push(ModalitySpec {
                    kind,
                    height: n(1)?,
                    width: n(2)?,
                    channels: kind.channels(),
                    patch_size: n(3)?,
                });
            }
            "record" => {
                let fields: Vec<&str> = value.split_whitespace().collect();
                if fields.len() < 4 {
                    return Err(bad(line));
                }
                let id: u32 = fields[0].parse().map_err(|_| bad(line))?;
                let split = Split::parse(fields[1]).ok_or_else(|| bad(line))?;
                let domain = match fields[2] {
                    "source" => Domain::Source,
                    "target" => Domain::Target,
                    _ => return Err(bad(line)),
                };
                let label = match fields[3] {
                    "none" => None,
                    l => Some(l.parse::<u32>().map_err(|_| bad(line))?),
                };
                let mut clips = BTreeMap::new();
                for f in &fields[4..] {
                    let (kind, rel) = f.split_once(':').ok_or_else(|| bad(line))?;
                    let kind: ModalityKind = kind.parse().map_err(|_| bad(line))?;
                    let mspec = spec.modality(kind).map_err(|_| bad(line))?;
                    let clip = Clip {
                        spec: mspec,
                        frames: read_tensor(&dir.join(rel))?,
                    };
                    clip.check_shape().map_err(|e| {
                        Error::format(dir.join(rel).display().to_string(), e.to_string())
                    })?;
                    clips.insert(kind, clip);
                }
                dataset_parts
                    .entry(split)
                    .or_default()
                    .push(MultimodalSample {
                        id,
                        clips,
                        label,
                        domain,
                    });
            }
            _ => return Err(bad(line)),
        }
    }
    if !seen_magic {
        return Err(Error::format(
            &name,
            format!("missing `{DATASET_MAGIC}` line"),
        ));
    }
    spec.validate()
        .map_err(|e| Error::format(&name, e.to_string()))?;
    let mut take = |s: Split| dataset_parts.remove(&s).unwrap_or_default();
    Ok(LoadedDataset {
        dataset: Dataset {
            source: take(Split::Source),
            target_unlabeled: take(Split::TargetUnlabeled),
            target_labeled: take(Split::TargetLabeled),
            spec,
        },
        config_hash,
    })
}
