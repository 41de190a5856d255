use rand::Rng;

use super::*;
use crate::data::generate_synthetic;
use crate::training::tests::small_config;

fn probe_corpus(cfg: &RunConfig, n: usize) -> Vec<LabeledImage> {
    generate_synthetic(11, cfg.image_height, cfg.image_width, cfg.patch_size, n).unwrap()
}

#[test]
fn feature_rows_match_patch_count() {
    let cfg = small_config();
    let model = ModelParams::init(&cfg).unwrap();
    let images = probe_corpus(&cfg, 3);
    let f = extract_features(&images, &model).unwrap();
    assert_eq!(f.x.shape(), &[3 * cfg.n_patches(), cfg.embed_dim]);
    assert_eq!(f.labels.len(), 3 * cfg.n_patches());
}

#[test]
fn identical_images_give_identical_rows() {
    let cfg = small_config();
    let model = ModelParams::init(&cfg).unwrap();
    let one = probe_corpus(&cfg, 1).remove(0);
    let f = extract_features(&[one.clone(), one], &model).unwrap();
    let n = cfg.n_patches();
    for i in 0..n {
        assert_eq!(f.x.row(i), f.x.row(n + i));
    }
}

#[test]
fn depth_zero_encoder_returns_embeddings() {
    let mut cfg = small_config();
    cfg.set("encoder_depth", "0").unwrap();
    let model = ModelParams::init(&cfg).unwrap();
    let images = probe_corpus(&cfg, 2);
    let f = extract_features(&images, &model).unwrap();

    let mut g: Graph<f32> = Graph::new();
    let p = model.bind(&mut g, false);
    let t = g.constant(stacked_tokens(&images, &model).unwrap());
    let emb = model.embed(&mut g, &p, t, &[], images.len()).unwrap();
    assert_eq!(g.value(emb).data(), f.x.data());
}

#[test]
fn wrong_image_size_is_a_shape_error() {
    let cfg = small_config();
    let model = ModelParams::init(&cfg).unwrap();
    let images = generate_synthetic(1, 48, 48, 8, 1).unwrap();
    assert!(matches!(
        extract_features(&images, &model),
        Err(Error::Shape { .. })
    ));
}

#[test]
fn separable_toy_is_probed_perfectly() {
    let mut rng = rng_for(&[3]);
    let n = 400;
    let mut x = Vec::new();
    let mut y = Vec::new();
    for i in 0..n {
        let c = (i % 2) as u8;
        let centre = if c == 0 { -2.0 } else { 2.0 };
        x.push(centre + rng.gen_range(-0.5..0.5f32));
        x.push(rng.gen_range(-1.0..1.0f32));
        y.push(c);
    }
    let r = linear_probe(&Tensor::new(vec![n, 2], x).unwrap(), &y, 5).unwrap();
    assert_eq!(r.overall, 1.0);
    assert_eq!(r.per_class[0], Some(1.0));
    assert_eq!(r.per_class[2], None);
    assert_eq!((r.n_train, r.n_test), (320, 80));
}

#[test]
fn uninformative_features_score_near_majority() {
    let mut rng = rng_for(&[4]);
    let n = 2000;
    let x: Vec<f32> = (0..n * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut y: Vec<u8> = (0..n)
        .map(|i| match i % 10 {
            0..=6 => 0,
            7 | 8 => 1,
            _ => 2,
        })
        .collect();
    y.shuffle(&mut rng);
    let r = linear_probe(&Tensor::new(vec![n, 4], x).unwrap(), &y, 9).unwrap();
    assert!((r.overall - 0.7).abs() <= 0.05, "accuracy {}", r.overall);
}

#[test]
fn single_class_is_rejected() {
    let x = Tensor::new(vec![10, 1], vec![0.5; 10]).unwrap();
    let err = linear_probe(&x, &[1; 10], 0).unwrap_err();
    assert!(err.to_string().contains("two classes"), "{err}");
}

#[test]
fn probe_is_deterministic_and_leaves_params_untouched() {
    let cfg = small_config();
    let model = ModelParams::init(&cfg).unwrap();
    let images = probe_corpus(&cfg, 6);
    let before = model.store.checksum();
    let a = probe_model("random", &images, &model, 7).unwrap();
    let b = probe_model("random", &images, &model, 7).unwrap();
    assert_eq!(model.store.checksum(), before);
    assert_eq!(a, b);
    assert!((0.0..=1.0).contains(&a.overall));
    for acc in a.per_class.iter().flatten() {
        assert!((0.0..=1.0).contains(acc));
    }
}

#[test]
fn split_is_a_seeded_partition() {
    let (tr, te) = split_indices(101, 3);
    assert_eq!((tr.len(), te.len()), (81, 20));
    let mut all: Vec<usize> = tr.iter().chain(&te).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..101).collect::<Vec<_>>());
    assert_eq!(split_indices(101, 3), (tr, te));
    assert_ne!(split_indices(101, 4).0, split_indices(101, 3).0);
}

#[test]
fn csv_row_marks_absent_classes() {
    let r = ProbeResult {
        variant: "mim".into(),
        seed: 7,
        overall: 0.5,
        per_class: [Some(0.75), Some(0.25), None, None],
        n_train: 8,
        n_test: 2,
    };
    assert_eq!(
        r.csv_row(),
        "mim,7,0.500000,0.750000,0.250000,absent,absent"
    );
    assert_eq!(
        CSV_HEADER.split(',').count(),
        r.csv_row().split(',').count()
    );
}

#[test]
fn fine_tune_changes_nothing_outside_its_copy() {
    let cfg = small_config();
    let model = ModelParams::init(&cfg).unwrap();
    let images = probe_corpus(&cfg, 4);
    let before = model.store.checksum();
    let a = fine_tune_probe("ft", &images, &model, &cfg, 7, 3).unwrap();
    let b = fine_tune_probe("ft", &images, &model, &cfg, 7, 3).unwrap();
    assert_eq!(model.store.checksum(), before);
    assert_eq!(a, b);
    assert_eq!(a.n_test, split_indices(4 * cfg.n_patches(), 7).1.len());
}
