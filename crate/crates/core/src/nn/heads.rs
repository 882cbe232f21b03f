use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1, Axis, Zip};
use rand::Rng;

use super::layers::{gelu, gelu_grad, Linear};
use super::params::{join, Parameters};
use super::vit::{Decoder, Encoder, EncoderConfig};
use crate::data::{ModalityKind, ModalitySpec};
use crate::error::{Error, Result};

fn row(v: ArrayView1<f64>) -> ndarray::ArrayView2<f64> {
    v.insert_axis(Axis(0))
}

/// Linear classifier on pooled features.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub fc: Linear,
}

impl Classifier {
    pub fn new<R: Rng>(rng: &mut R, dim: usize, n_classes: usize) -> Self {
        Classifier {
            fc: Linear::new(rng, dim, n_classes),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.fc.out_dim()
    }

    pub fn logits(&self, pooled: &Array1<f64>) -> Result<Array1<f64>> {
        if pooled.len() != self.fc.in_dim() {
            return Err(Error::contract(format!(
                "classifier expects {} features, got {}",
                self.fc.in_dim(),
                pooled.len()
            )));
        }
        Ok(self
            .fc
            .forward(row(pooled.view()))
            .index_axis_move(Axis(0), 0))
    }

    /// Returns `d pooled`.
    pub fn backward(
        &self,
        pooled: &Array1<f64>,
        dlogits: &Array1<f64>,
        grad: &mut Classifier,
    ) -> Array1<f64> {
        self.fc
            .backward(row(pooled.view()), row(dlogits.view()), &mut grad.fc, true)
            .expect("dx requested")
            .index_axis_move(Axis(0), 0)
    }
}

impl Parameters for Classifier {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.fc.visit(&join(prefix, "fc"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.fc.visit_mut(&join(prefix, "fc"), f);
    }
}

/// Two-layer perceptron `d -> 2d -> d` mapping student features into a teacher's space.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionHead {
    pub fc1: Linear,
    pub fc2: Linear,
}

pub struct ProjectionCache {
    z: Array2<f64>,
    g: Array2<f64>,
}

impl ProjectionHead {
    pub fn new<R: Rng>(rng: &mut R, dim: usize) -> Self {
        ProjectionHead {
            fc1: Linear::new(rng, dim, 2 * dim),
            fc2: Linear::new(rng, 2 * dim, dim),
        }
    }

    pub fn forward(&self, pooled: &Array1<f64>) -> (Array1<f64>, ProjectionCache) {
        let (out, cache) = self.forward_rows(&pooled.clone().insert_axis(Axis(0)));
        (out.index_axis_move(Axis(0), 0), cache)
    }

    /// Row-wise projection of `n x d` features.
    pub fn forward_rows(&self, x: &Array2<f64>) -> (Array2<f64>, ProjectionCache) {
        let z = self.fc1.forward(x.view());
        let g = z.mapv(gelu);
        let out = self.fc2.forward(g.view());
        (out, ProjectionCache { z, g })
    }

    pub fn backward(
        &self,
        pooled: &Array1<f64>,
        cache: &ProjectionCache,
        dout: &Array1<f64>,
        grad: &mut ProjectionHead,
    ) -> Array1<f64> {
        self.backward_rows(
            &row(pooled.view()).to_owned(),
            cache,
            &row(dout.view()).to_owned(),
            grad,
        )
        .index_axis_move(Axis(0), 0)
    }

    pub fn backward_rows(
        &self,
        x: &Array2<f64>,
        cache: &ProjectionCache,
        dout: &Array2<f64>,
        grad: &mut ProjectionHead,
    ) -> Array2<f64> {
        let mut dz = self
            .fc2
            .backward(cache.g.view(), dout.view(), &mut grad.fc2, true)
            .expect("dx requested");
        Zip::from(&mut dz)
            .and(&cache.z)
            .for_each(|d, &z| *d *= gelu_grad(z));
        self.fc1
            .backward(x.view(), dz.view(), &mut grad.fc1, true)
            .expect("dx requested")
    }
}

impl Parameters for ProjectionHead {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

/// Per-modality pretraining model: encoder, reconstruction decoder, source classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedAutoencoder {
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub classifier: Classifier,
}

impl MaskedAutoencoder {
    pub fn new<R: Rng>(
        config: &EncoderConfig,
        modality: ModalitySpec,
        frames: usize,
        n_classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let encoder = Encoder::new(config, modality, frames, rng)?;
        let decoder = Decoder::new(config, &modality, frames, rng)?;
        let classifier = Classifier::new(rng, config.embed_dim, n_classes);
        Ok(MaskedAutoencoder {
            encoder,
            decoder,
            classifier,
        })
    }

    pub fn kind(&self) -> ModalityKind {
        self.encoder.modality.kind
    }
}

impl Parameters for MaskedAutoencoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.decoder.visit(&join(prefix, "decoder"), f);
        self.classifier.visit(&join(prefix, "classifier"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.decoder.visit_mut(&join(prefix, "decoder"), f);
        self.classifier.visit_mut(&join(prefix, "classifier"), f);
    }
}

/// RGB student encoder plus one projection head per distilled modality.
#[derive(Clone, Debug, PartialEq)]
pub struct Student {
    pub encoder: Encoder,
    pub projections: BTreeMap<ModalityKind, ProjectionHead>,
}

impl Parameters for Student {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.projections.visit(&join(prefix, "projections"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.projections.visit_mut(&join(prefix, "projections"), f);
    }
}
