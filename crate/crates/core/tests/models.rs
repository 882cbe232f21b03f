mod common;

use std::collections::BTreeMap;

use common::{random_clip, tiny_encoder, tiny_encoder_config, tiny_rgb_spec};
use ndarray::{array, Array1, Array2, Axis};
use proptest::prelude::*;
use tubefsl::checkpoint::{decode_bundle, encode_bundle, load_bundle, save_bundle, ModelBundle};
use tubefsl::data::{ModalityKind, ModalitySpec};
use tubefsl::masking::{tube_mask, TubeMask};
use tubefsl::nn::layers::softmax;
use tubefsl::nn::{
    Classifier, Encoder, EncoderConfig, Linear, MaskedAutoencoder, Parameters, ProjectionHead,
    Student,
};
use tubefsl::Error;

fn close(a: &Array2<f64>, b: &Array2<f64>, tol: f64) -> bool {
    a.dim() == b.dim() && a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() <= tol)
}

/// Pixel `(t, y, x)` region covered by token `i`.
fn token_region(
    enc: &Encoder,
    i: usize,
) -> (
    std::ops::Range<usize>,
    std::ops::Range<usize>,
    std::ops::Range<usize>,
) {
    let s = enc.grid.spatial();
    let (_, gw) = enc.modality.grid_hw();
    let p = enc.modality.patch_size;
    let (slice, cell) = (i / s, i % s);
    let (gy, gx) = (cell / gw, cell % gw);
    (
        slice * enc.tubelet..(slice + 1) * enc.tubelet,
        gy * p..(gy + 1) * p,
        gx * p..(gx + 1) * p,
    )
}

#[test]
fn default_geometry_has_256_tokens() {
    let spec = ModalitySpec::new(ModalityKind::Rgb, 32, 4);
    let enc = Encoder::new(
        &EncoderConfig::default(),
        spec,
        8,
        &mut tubefsl::seed::rng(0),
    )
    .unwrap();
    let tokens = enc.tokenize(&random_clip(spec, 8, 1)).unwrap();
    assert_eq!(tokens.dim(), (256, 64));
    assert_eq!(enc.patch_volume(), 2 * 4 * 4 * 3);

    let pose = ModalitySpec::new(ModalityKind::Pose, 16, 2);
    let enc = Encoder::new(
        &EncoderConfig::default(),
        pose,
        8,
        &mut tubefsl::seed::rng(0),
    )
    .unwrap();
    assert_eq!(enc.grid.total(), 256);
}

#[test]
fn zero_clip_with_zero_bias_embeds_to_zero() {
    let enc = tiny_encoder(3);
    assert!(enc.patch_embed.b.iter().all(|&b| b == 0.0));
    let mut clip = random_clip(tiny_rgb_spec(), 4, 0);
    clip.frames.fill(0.0);
    assert!(enc.tokenize(&clip).unwrap().iter().all(|&v| v == 0.0));
}

#[test]
fn tubelet_embedding_is_local() {
    let enc = tiny_encoder(3);
    let clip = random_clip(tiny_rgb_spec(), 4, 5);
    let before = enc.tokenize(&clip).unwrap();
    let mut changed = clip.clone();
    changed
        .frames
        .index_axis_mut(Axis(0), 0)
        .mapv_inplace(|v| v + 0.5);
    let after = enc.tokenize(&changed).unwrap();
    let s = enc.grid.spatial();
    for i in 0..enc.grid.total() {
        let same = before.row(i) == after.row(i);
        assert_eq!(same, i >= s, "token {i}");
    }
}

#[test]
fn tokenize_matches_a_direct_patch_oracle() {
    let enc = tiny_encoder(8);
    let clip = random_clip(tiny_rgb_spec(), 4, 9);
    let tokens = enc.tokenize(&clip).unwrap();
    for i in [0usize, 5, 17, 31] {
        let (ts, ys, xs) = token_region(&enc, i);
        let mut v = Vec::new();
        for t in ts {
            for y in ys.clone() {
                for x in xs.clone() {
                    for c in 0..3 {
                        v.push(clip.frames[[t, y, x, c]] as f64);
                    }
                }
            }
        }
        let expect = Array1::from(v).dot(&enc.patch_embed.w) + &enc.patch_embed.b;
        assert!(tokens
            .row(i)
            .iter()
            .zip(&expect)
            .all(|(a, b)| (a - b).abs() < 1e-12));
    }
}

#[test]
fn encoder_is_permutation_equivariant_over_visible_tokens() {
    let enc = tiny_encoder(4);
    let clip = random_clip(tiny_rgb_spec(), 4, 6);
    let mask = tube_mask(enc.grid, 0.5, 2).unwrap();
    let (patches, visible) = enc.visible_patches(&clip, &mask).unwrap();
    let (base, _) = enc.forward(patches.clone(), visible.clone());

    let n = visible.len();
    let perm: Vec<usize> = (0..n).rev().collect();
    let (shuffled, _) = enc.forward(
        patches.select(Axis(0), &perm),
        perm.iter().map(|&j| visible[j]).collect(),
    );
    assert!(close(
        &shuffled.tokens,
        &base.tokens.select(Axis(0), &perm),
        1e-10
    ));
    assert!(base
        .pooled
        .iter()
        .zip(&shuffled.pooled)
        .all(|(a, b)| (a - b).abs() < 1e-10));
}

#[test]
fn masked_content_never_reaches_the_encoder() {
    let enc = tiny_encoder(4);
    let clip = random_clip(tiny_rgb_spec(), 4, 7);
    let mask = tube_mask(enc.grid, 0.75, 11).unwrap();
    let base = enc.encode(&clip, &mask).unwrap();
    let mut changed = clip.clone();
    for i in mask.masked_indices() {
        let (ts, ys, xs) = token_region(&enc, i);
        for t in ts {
            for y in ys.clone() {
                for x in xs.clone() {
                    for c in 0..3 {
                        changed.frames[[t, y, x, c]] = 123.0;
                    }
                }
            }
        }
    }
    assert_eq!(enc.encode(&changed, &mask).unwrap(), base);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn pooled_is_mean_of_tokens(seed: u64, ratio in 0.0f64..0.95) {
        let enc = tiny_encoder(seed % 5);
        let clip = random_clip(tiny_rgb_spec(), 4, seed);
        let mask = tube_mask(enc.grid, ratio, seed).unwrap();
        let out = enc.encode(&clip, &mask).unwrap();
        prop_assert_eq!(out.tokens.nrows(), mask.visible_count());
        let mean = out.tokens.mean_axis(Axis(0)).unwrap();
        prop_assert!(mean.iter().zip(&out.pooled).all(|(a, b)| (a - b).abs() < 1e-12));
    }
}

#[test]
fn construction_and_encoding_are_deterministic() {
    assert_eq!(tiny_encoder(9), tiny_encoder(9));
    assert_ne!(tiny_encoder(9), tiny_encoder(10));
    let enc = tiny_encoder(9);
    let clip = random_clip(tiny_rgb_spec(), 4, 1);
    let mask = tube_mask(enc.grid, 0.5, 3).unwrap();
    assert_eq!(
        enc.encode(&clip, &mask).unwrap(),
        enc.encode(&clip, &mask).unwrap()
    );
}

#[test]
fn encoder_rejects_foreign_inputs() {
    let enc = tiny_encoder(1);
    let flow = random_clip(ModalitySpec::new(ModalityKind::Flow, 16, 4), 4, 1);
    let mask = tube_mask(enc.grid, 0.5, 3).unwrap();
    assert!(matches!(enc.encode(&flow, &mask), Err(Error::Contract(_))));
    let other_grid = tubefsl::masking::TokenGrid::new(4, 2, 2, 2).unwrap();
    let bad_mask = tube_mask(other_grid, 0.5, 3).unwrap();
    let clip = random_clip(tiny_rgb_spec(), 4, 1);
    assert!(matches!(
        enc.encode(&clip, &bad_mask),
        Err(Error::Contract(_))
    ));
}

#[test]
fn classifier_logits_and_softmax() {
    let clf = Classifier {
        fc: Linear {
            w: array![[1.0, 0.0], [0.0, 2.0]],
            b: array![0.5, -0.5],
        },
    };
    assert_eq!(clf.logits(&array![2.0, 3.0]).unwrap(), array![2.5, 5.5]);
    assert!(clf.logits(&array![1.0]).is_err());

    let p = softmax(&array![2.5, 5.5]);
    assert!((p.sum() - 1.0).abs() < 1e-15);
    assert!((p[1] / p[0] - 3f64.exp()).abs() < 1e-9);
    // large logits stay finite
    let p = softmax(&array![1000.0, 0.0, -1000.0]);
    assert!(p.iter().all(|v| v.is_finite()) && (p[0] - 1.0).abs() < 1e-12);
}

#[test]
fn projection_head_rows_match_single() {
    let head = ProjectionHead::new(&mut tubefsl::seed::rng(2), 16);
    let x = Array2::from_shape_fn((3, 16), |(i, j)| ((i * 16 + j) as f64 * 0.13).cos());
    let (rows, _) = head.forward_rows(&x);
    for i in 0..3 {
        let (one, _) = head.forward(&x.row(i).to_owned());
        assert!(one
            .iter()
            .zip(rows.row(i))
            .all(|(a, b)| (a - b).abs() < 1e-12));
    }
    assert_eq!(head.fc1.out_dim(), 32);
}

#[test]
fn decoder_predicts_masked_positions_only() {
    let cfg = tiny_encoder_config();
    let mae =
        MaskedAutoencoder::new(&cfg, tiny_rgb_spec(), 4, 3, &mut tubefsl::seed::rng(1)).unwrap();
    let clip = random_clip(tiny_rgb_spec(), 4, 1);
    let grid = mae.encoder.grid;

    let full = tube_mask(grid, 0.0, 0).unwrap();
    let enc = mae.encoder.encode(&clip, &full).unwrap();
    assert_eq!(
        mae.decoder.reconstruct(&enc.tokens, &full).unwrap().nrows(),
        0
    );

    // keep odd spatial cells: every even token is masked
    let kept: Vec<usize> = (0..grid.spatial()).filter(|c| c % 2 == 1).collect();
    let mask = TubeMask::from_kept(grid, kept, 0.5).unwrap();
    assert_eq!(&mask.masked_indices()[..4], &[0, 2, 4, 6]);
    let enc = mae.encoder.encode(&clip, &mask).unwrap();
    let pred = mae.decoder.reconstruct(&enc.tokens, &mask).unwrap();
    assert_eq!(pred.dim(), (grid.total() / 2, 2 * 4 * 4 * 3));
    assert_eq!(mae.decoder.patch_volume(), mae.encoder.patch_volume());

    assert!(mae
        .decoder
        .reconstruct(&enc.tokens.slice(ndarray::s![1.., ..]).to_owned(), &mask)
        .is_err());
}

fn bundle(seed: u64, with_student: bool) -> ModelBundle {
    let cfg = tiny_encoder_config();
    let mut rng = tubefsl::seed::rng(seed);
    let mut teachers = BTreeMap::new();
    for spec in [
        tiny_rgb_spec(),
        ModalitySpec::new(ModalityKind::Flow, 16, 4),
        ModalitySpec::new(ModalityKind::Pose, 8, 2),
    ] {
        teachers.insert(
            spec.kind,
            MaskedAutoencoder::new(&cfg, spec, 4, 3, &mut rng).unwrap(),
        );
    }
    let student = with_student.then(|| Student {
        encoder: Encoder::new(&cfg, tiny_rgb_spec(), 4, &mut rng).unwrap(),
        projections: [ModalityKind::Rgb, ModalityKind::Pose]
            .into_iter()
            .map(|k| (k, ProjectionHead::new(&mut rng, 16)))
            .collect(),
    });
    ModelBundle {
        encoder_config: cfg,
        frames: 4,
        n_source_classes: 3,
        teachers,
        student,
    }
}

#[test]
fn bundle_round_trip_is_bit_exact() {
    for with_student in [false, true] {
        let b = bundle(5, with_student);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/m.bundle");
        save_bundle(&b, &path, "cafe").unwrap();
        let loaded = load_bundle(&path).unwrap();
        assert_eq!(loaded.config_hash, "cafe");
        assert_eq!(loaded.bundle.fingerprint(), b.fingerprint());
        assert_eq!(loaded.bundle, b);
        assert_eq!(
            encode_bundle(&loaded.bundle, "cafe"),
            std::fs::read(&path).unwrap()
        );
        assert_eq!(loaded.bundle.student().is_ok(), with_student);
    }
}

#[test]
fn corrupt_bundles_are_rejected() {
    let bytes = encode_bundle(&bundle(5, true), "h");
    let format = |b: &[u8]| matches!(decode_bundle(b, "x"), Err(Error::Format { .. }));

    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(format(&bad_magic));
    assert!(format(&bytes[..bytes.len() - 1]));
    let mut extra = bytes.clone();
    extra.extend_from_slice(&[0; 8]);
    assert!(format(&extra));

    let text = String::from_utf8_lossy(&bytes);
    let head_len = text.find("\nend\n").unwrap() + 5;
    let header = std::str::from_utf8(&bytes[..head_len]).unwrap();
    let swapped = header.replace("n_source_classes=3", "n_source_classes=4");
    let mut b = swapped.into_bytes();
    b.extend_from_slice(&bytes[head_len..]);
    let err = decode_bundle(&b, "x").err().unwrap();
    assert!(err.to_string().contains("tensor table"), "{err}");
    assert!(format(b"no terminator"));

    let dir = tempfile::tempdir().unwrap();
    let err = load_bundle(&dir.path().join("absent.bundle"))
        .err()
        .unwrap();
    assert!(matches!(err, Error::Missing(_)));
    assert_eq!(err.exit_code(), 4);
}

#[test]
fn merging_teacher_bundles() {
    let mut a = bundle(1, false);
    let mut b = bundle(2, false);
    a.teachers.retain(|&k, _| k == ModalityKind::Rgb);
    b.teachers.retain(|&k, _| k != ModalityKind::Rgb);
    let merged = a.clone().merge_teachers(b.clone()).unwrap();
    assert_eq!(merged.teachers.len(), 3);
    assert_eq!(
        merged.teachers[&ModalityKind::Rgb],
        a.teachers[&ModalityKind::Rgb]
    );
    assert_eq!(
        merged.teachers[&ModalityKind::Pose],
        b.teachers[&ModalityKind::Pose]
    );

    b.frames = 8;
    let err = a.merge_teachers(b).err().unwrap();
    assert!(matches!(err, Error::Contract(_)));
    assert_eq!(err.exit_code(), 2);
    assert!(matches!(bundle(1, false).student(), Err(Error::Missing(_))));
}

#[test]
fn parameter_helpers_round_trip() {
    let enc = tiny_encoder(2);
    let flat = enc.to_flat();
    assert_eq!(flat.len(), enc.num_params());
    let mut z = enc.zeros_like();
    assert_eq!(z.max_abs(), 0.0);
    z.assign_flat(&flat);
    assert_eq!(z, enc);
    assert_eq!(z.fingerprint(), enc.fingerprint());
}
