use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use sha2::{Digest, Sha256};

use crate::data::ModalityKind;

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Named traversal over every trainable tensor of a module.
///
/// Gradients use the same type as the parameters they belong to, so the two
/// visit in lock-step.
pub trait Parameters: Clone {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64]));

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64]));

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut("", &mut |_, d| d.fill(0.0));
        z
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, _, d| n += d.len());
        n
    }

    fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit("", &mut |_, _, d| out.extend_from_slice(d));
        out
    }

    fn assign_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        self.visit_mut("", &mut |_, d| {
            d.copy_from_slice(&flat[off..off + d.len()]);
            off += d.len();
        });
        assert_eq!(off, flat.len(), "flat parameter length mismatch");
    }

    /// `self += alpha * other`.
    fn add_scaled(&mut self, alpha: f64, other: &Self) {
        let flat = other.to_flat();
        let mut off = 0;
        self.visit_mut("", &mut |_, d| {
            let n = d.len();
            for (x, g) in d.iter_mut().zip(&flat[off..off + n]) {
                *x += alpha * g;
            }
            off += n;
        });
    }

    fn scale(&mut self, alpha: f64) {
        self.visit_mut("", &mut |_, d| d.iter_mut().for_each(|x| *x *= alpha));
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit("", &mut |_, _, d| ok &= d.iter().all(|x| x.is_finite()));
        ok
    }

    fn max_abs(&self) -> f64 {
        let mut m = 0.0f64;
        self.visit("", &mut |_, _, d| {
            m = d.iter().fold(m, |acc, x| acc.max(x.abs()));
        });
        m
    }

    /// SHA-256 over names, shapes and the exact bit patterns of every value.
    fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        self.visit("", &mut |name, shape, d| {
            h.update(name.as_bytes());
            for &s in shape {
                h.update((s as u64).to_le_bytes());
            }
            for x in d {
                h.update(x.to_bits().to_le_bytes());
            }
        });
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub(crate) fn visit1(
    prefix: &str,
    name: &str,
    a: &Array1<f64>,
    f: &mut dyn FnMut(&str, &[usize], &[f64]),
) {
    f(
        &join(prefix, name),
        a.shape(),
        a.as_slice().expect("contiguous parameter"),
    );
}

pub(crate) fn visit2(
    prefix: &str,
    name: &str,
    a: &Array2<f64>,
    f: &mut dyn FnMut(&str, &[usize], &[f64]),
) {
    f(
        &join(prefix, name),
        a.shape(),
        a.as_slice().expect("contiguous parameter"),
    );
}

pub(crate) fn visit1_mut(
    prefix: &str,
    name: &str,
    a: &mut Array1<f64>,
    f: &mut dyn FnMut(&str, &mut [f64]),
) {
    f(
        &join(prefix, name),
        a.as_slice_mut().expect("contiguous parameter"),
    );
}

pub(crate) fn visit2_mut(
    prefix: &str,
    name: &str,
    a: &mut Array2<f64>,
    f: &mut dyn FnMut(&str, &mut [f64]),
) {
    f(
        &join(prefix, name),
        a.as_slice_mut().expect("contiguous parameter"),
    );
}

impl<P: Parameters> Parameters for Vec<P> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        for (i, p) in self.iter().enumerate() {
            p.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        for (i, p) in self.iter_mut().enumerate() {
            p.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}

impl<P: Parameters> Parameters for BTreeMap<ModalityKind, P> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        for (k, p) in self {
            p.visit(&join(prefix, k.name()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        for (k, p) in self.iter_mut() {
            p.visit_mut(&join(prefix, k.name()), f);
        }
    }
}

impl Parameters for Array1<f64> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        f(
            prefix,
            self.shape(),
            self.as_slice().expect("contiguous parameter"),
        );
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(prefix, self.as_slice_mut().expect("contiguous parameter"));
    }
}
