//! Model bundle persistence.
//!
//! A bundle file is a text header followed by raw little-endian `f64` data:
//!
//! ```text
//! tubefsl-bundle v1
//! config_hash=<hex>
//! encoder=<embed_dim>,<depth>,<heads>,<mlp_ratio>,<tubelet>,<decoder_dim>,<decoder_depth>,<decoder_heads>
//! frames=<T>
//! n_source_classes=<n>
//! teacher=<kind>,<height>,<width>,<patch>     (one line per teacher)
//! student=<kind>,<height>,<width>,<patch>;<projection kinds>   (optional)
//! tensor=<name> <d0>x<d1>...                   (one line per tensor, data order)
//! end
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::data::{ModalityKind, ModalitySpec};
use crate::error::{Error, Result};
use crate::nn::params::join;
use crate::nn::{Encoder, EncoderConfig, MaskedAutoencoder, Parameters, ProjectionHead, Student};
use crate::seed;

pub const BUNDLE_MAGIC: &str = "tubefsl-bundle v1";

/// Everything training produces: teachers and, after distillation, the student.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub encoder_config: EncoderConfig,
    pub frames: usize,
    pub n_source_classes: usize,
    pub teachers: BTreeMap<ModalityKind, MaskedAutoencoder>,
    pub student: Option<Student>,
}

impl ModelBundle {
    pub fn teacher_encoders(&self) -> BTreeMap<ModalityKind, Encoder> {
        self.teachers
            .iter()
            .map(|(&k, m)| (k, m.encoder.clone()))
            .collect()
    }

    /// Adds the teachers of `other`, which must share the architecture.
    /// Teachers present in both are taken from `other`.
    pub fn merge_teachers(mut self, other: ModelBundle) -> Result<Self> {
        if (self.encoder_config, self.frames, self.n_source_classes)
            != (other.encoder_config, other.frames, other.n_source_classes)
        {
            return Err(Error::contract(
                "teacher bundles disagree on architecture, frames or class count",
            ));
        }
        self.teachers.extend(other.teachers);
        Ok(self)
    }

    pub fn student(&self) -> Result<&Student> {
        self.student.as_ref().ok_or_else(|| {
            Error::Missing("the bundle has no distilled student; run `distill` first".into())
        })
    }
}

impl Parameters for ModelBundle {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.teachers.visit(&join(prefix, "teacher"), f);
        if let Some(s) = &self.student {
            s.visit(&join(prefix, "student"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.teachers.visit_mut(&join(prefix, "teacher"), f);
        if let Some(s) = &mut self.student {
            s.visit_mut(&join(prefix, "student"), f);
        }
    }
}

fn spec_field(m: &ModalitySpec) -> String {
    format!("{},{},{},{}", m.kind, m.height, m.width, m.patch_size)
}

fn parse_spec(path: &str, s: &str) -> Result<ModalitySpec> {
    let parts: Vec<&str> = s.split(',').collect();
    let bad = || Error::format(path, format!("bad modality record `{s}`"));
    if parts.len() != 4 {
        return Err(bad());
    }
    let kind: ModalityKind = parts[0].parse().map_err(|_| bad())?;
    let num = |i: usize| parts[i].parse::<usize>().map_err(|_| bad());
    Ok(ModalitySpec {
        kind,
        height: num(1)?,
        width: num(2)?,
        channels: kind.channels(),
        patch_size: num(3)?,
    })
}

fn encoder_field(c: &EncoderConfig) -> String {
    format!(
        "{},{},{},{},{},{},{},{}",
        c.embed_dim,
        c.depth,
        c.heads,
        c.mlp_ratio,
        c.tubelet,
        c.decoder_dim,
        c.decoder_depth,
        c.decoder_heads
    )
}

fn parse_encoder(path: &str, s: &str) -> Result<EncoderConfig> {
    let v: Vec<usize> = s
        .split(',')
        .map(|x| x.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::format(path, format!("bad encoder record `{s}`")))?;
    if v.len() != 8 {
        return Err(Error::format(path, format!("bad encoder record `{s}`")));
    }
    Ok(EncoderConfig {
        embed_dim: v[0],
        depth: v[1],
        heads: v[2],
        mlp_ratio: v[3],
        tubelet: v[4],
        decoder_dim: v[5],
        decoder_depth: v[6],
        decoder_heads: v[7],
    })
}

/// Serialises `bundle`; the output is a pure function of its inputs.
pub fn encode_bundle(bundle: &ModelBundle, config_hash: &str) -> Vec<u8> {
    let mut header = format!(
        "{BUNDLE_MAGIC}\nconfig_hash={config_hash}\nencoder={}\nframes={}\nn_source_classes={}\n",
        encoder_field(&bundle.encoder_config),
        bundle.frames,
        bundle.n_source_classes
    );
    for m in bundle.teachers.values() {
        header.push_str(&format!("teacher={}\n", spec_field(&m.encoder.modality)));
    }
    if let Some(s) = &bundle.student {
        let projections: Vec<&str> = s.projections.keys().map(|k| k.name()).collect();
        header.push_str(&format!(
            "student={};{}\n",
            spec_field(&s.encoder.modality),
            projections.join(",")
        ));
    }
    let mut data = Vec::with_capacity(bundle.num_params() * 8);
    bundle.visit("", &mut |name, shape, values| {
        let dims: Vec<String> = shape.iter().map(usize::to_string).collect();
        header.push_str(&format!("tensor={name} {}\n", dims.join("x")));
        for v in values {
            data.extend_from_slice(&v.to_le_bytes());
        }
    });
    header.push_str("end\n");
    let mut out = header.into_bytes();
    out.extend_from_slice(&data);
    out
}

pub fn save_bundle(bundle: &ModelBundle, path: &Path, config_hash: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    // write then rename so a crash never leaves a truncated checkpoint behind
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, encode_bundle(bundle, config_hash))?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// A loaded bundle and the config hash recorded with it.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedBundle {
    pub bundle: ModelBundle,
    pub config_hash: String,
}

pub fn decode_bundle(bytes: &[u8], path: &str) -> Result<LoadedBundle> {
    const END: &[u8] = b"\nend\n";
    let split = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or_else(|| Error::format(path, "no header terminator"))?;
    let header = std::str::from_utf8(&bytes[..split])
        .map_err(|_| Error::format(path, "header is not UTF-8"))?;
    let data = &bytes[split + END.len()..];

    let mut lines = header.lines();
    if lines.next() != Some(BUNDLE_MAGIC) {
        return Err(Error::format(path, format!("not a `{BUNDLE_MAGIC}` file")));
    }
    let mut config_hash = None;
    let mut encoder_config = None;
    let mut frames = None;
    let mut n_source_classes = None;
    let mut teacher_specs = Vec::new();
    let mut student_spec = None;
    let mut tensors: Vec<(String, Vec<usize>)> = Vec::new();
    for line in lines {
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::format(path, format!("bad header line `{line}`")))?;
        let num = |v: &str| {
            v.parse::<usize>()
                .map_err(|_| Error::format(path, format!("bad number in `{line}`")))
        };
        match key {
            "config_hash" => config_hash = Some(value.to_string()),
            "encoder" => encoder_config = Some(parse_encoder(path, value)?),
            "frames" => frames = Some(num(value)?),
            "n_source_classes" => n_source_classes = Some(num(value)?),
            "teacher" => teacher_specs.push(parse_spec(path, value)?),
            "student" => {
                let (spec, projections) = value
                    .split_once(';')
                    .ok_or_else(|| Error::format(path, format!("bad student record `{value}`")))?;
                let kinds = projections
                    .split(',')
                    .filter(|s| !s.is_empty())
                    .map(|s| {
                        s.parse::<ModalityKind>()
                            .map_err(|_| Error::format(path, format!("bad modality `{s}`")))
                    })
                    .collect::<Result<Vec<_>>>()?;
                student_spec = Some((parse_spec(path, spec)?, kinds));
            }
            "tensor" => {
                let (name, dims) = value
                    .rsplit_once(' ')
                    .ok_or_else(|| Error::format(path, format!("bad tensor record `{value}`")))?;
                let dims = dims.split('x').map(num).collect::<Result<Vec<_>>>()?;
                tensors.push((name.to_string(), dims));
            }
            other => return Err(Error::format(path, format!("unknown header key `{other}`"))),
        }
    }
    let missing = |what: &str| Error::format(path, format!("header lacks `{what}`"));
    let encoder_config = encoder_config.ok_or_else(|| missing("encoder"))?;
    let frames = frames.ok_or_else(|| missing("frames"))?;
    let n_source_classes = n_source_classes.ok_or_else(|| missing("n_source_classes"))?;

    // build a skeleton with the recorded shapes, then overwrite every value
    let mut rng = seed::rng(0);
    let mut teachers = BTreeMap::new();
    for spec in teacher_specs {
        let m = MaskedAutoencoder::new(&encoder_config, spec, frames, n_source_classes, &mut rng)
            .map_err(|e| Error::format(path, format!("inconsistent teacher record: {e}")))?;
        teachers.insert(spec.kind, m);
    }
    let student = match student_spec {
        Some((spec, kinds)) => Some(Student {
            encoder: Encoder::new(&encoder_config, spec, frames, &mut rng)
                .map_err(|e| Error::format(path, format!("inconsistent student record: {e}")))?,
            projections: kinds
                .into_iter()
                .map(|k| (k, ProjectionHead::new(&mut rng, encoder_config.embed_dim)))
                .collect(),
        }),
        None => None,
    };
    let mut bundle = ModelBundle {
        encoder_config,
        frames,
        n_source_classes,
        teachers,
        student,
    };

    let mut expected = Vec::new();
    bundle.visit("", &mut |name, shape, _| {
        expected.push((name.to_string(), shape.to_vec()))
    });
    if expected != tensors {
        let first = expected
            .iter()
            .zip(&tensors)
            .find(|(a, b)| a != b)
            .map(|(a, b)| format!("expected {} {:?}, found {} {:?}", a.0, a.1, b.0, b.1))
            .unwrap_or_else(|| {
                format!(
                    "expected {} tensors, found {}",
                    expected.len(),
                    tensors.len()
                )
            });
        return Err(Error::format(
            path,
            format!("tensor table mismatch: {first}"),
        ));
    }
    let n = bundle.num_params();
    if data.len() != n * 8 {
        return Err(Error::format(
            path,
            format!("expected {} data bytes, found {}", n * 8, data.len()),
        ));
    }
    let flat: Vec<f64> = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    bundle.assign_flat(&flat);
    Ok(LoadedBundle {
        bundle,
        config_hash: config_hash.ok_or_else(|| missing("config_hash"))?,
    })
}

pub fn load_bundle(path: &Path) -> Result<LoadedBundle> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => {
            Error::Missing(format!("checkpoint {} does not exist", path.display()))
        }
        _ => Error::Io(e),
    })?;
    decode_bundle(&bytes, &path.display().to_string())
}
