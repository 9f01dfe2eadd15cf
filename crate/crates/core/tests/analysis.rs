use ndarray::{Array2, Array3};
use paraconf::analysis::*;
use paraconf::conformer::EncoderConfig;
use paraconf::extract::{Extractor, WindowPolicy};
use paraconf::featenc::FeatEncConfig;
use paraconf::frontend::{AudioClip, Split};
use paraconf::model::{EncoderModel, ModelConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| StandardNormal.sample(rng))
}

// HSIC ratio from centered Gram matrices: tr(K H L H) / sqrt(tr(KHKH) tr(LHLH))
fn hsic_oracle(x: &Array2<f64>, y: &Array2<f64>) -> f64 {
    let n = x.nrows();
    let h = Array2::from_shape_fn((n, n), |(i, j)| if i == j { 1.0 } else { 0.0 } - 1.0 / n as f64);
    let k = h.dot(&x.dot(&x.t())).dot(&h);
    let l = h.dot(&y.dot(&y.t())).dot(&h);
    let tr = |a: &Array2<f64>, b: &Array2<f64>| (a * &b.t()).sum();
    tr(&k, &l) / (tr(&k, &k) * tr(&l, &l)).sqrt()
}

fn random_orthogonal(rng: &mut ChaCha8Rng, d: usize) -> Array2<f64> {
    // Gram–Schmidt on a Gaussian matrix
    let mut q = randn(rng, d, d);
    for i in 0..d {
        for j in 0..i {
            let p = q.column(i).dot(&q.column(j));
            let cj = q.column(j).to_owned();
            q.column_mut(i).scaled_add(-p, &cj);
        }
        let n = q.column(i).dot(&q.column(i)).sqrt();
        q.column_mut(i).mapv_inplace(|v| v / n);
    }
    q
}

#[test]
fn cka_matches_gram_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let x = randn(&mut rng, 20, 5);
        let y = &x.dot(&randn(&mut rng, 5, 7)) * 0.3 + randn(&mut rng, 20, 7);
        let got = linear_cka(x.view(), y.view()).unwrap();
        assert!((got - hsic_oracle(&x, &y)).abs() <= 1e-10);
    }
}

#[test]
fn cka_invariances() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let x = randn(&mut rng, 30, 6);
        let y = randn(&mut rng, 30, 4);
        assert!((linear_cka(x.view(), x.view()).unwrap() - 1.0).abs() <= 1e-9);
        let q = random_orthogonal(&mut rng, 6);
        let xq = x.dot(&q);
        assert!((linear_cka(x.view(), xq.view()).unwrap() - 1.0).abs() <= 1e-9);
        let c = rng.gen_range(0.01..100.0) * if rng.gen_bool(0.5) { -1.0 } else { 1.0 };
        let xc = &x * c;
        assert!((linear_cka(x.view(), xc.view()).unwrap() - 1.0).abs() <= 1e-9);
        let base = linear_cka(x.view(), y.view()).unwrap();
        assert!((linear_cka(xq.view(), y.view()).unwrap() - base).abs() <= 1e-9);
        assert!((linear_cka(xc.view(), y.view()).unwrap() - base).abs() <= 1e-9);
        assert!((linear_cka(y.view(), x.view()).unwrap() - base).abs() <= 1e-12);
    }
}

fn brute_force_distance(a: &Array3<f64>, period: f64) -> Vec<f64> {
    let (h, t, _) = a.dim();
    let dist = Array2::from_shape_fn((t, t), |(i, j)| (i as f64 - j as f64).abs());
    (0..h)
        .map(|k| (&a.index_axis(ndarray::Axis(0), k) * &dist).sum() / t as f64 * period)
        .collect()
}

#[test]
fn attention_distance_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let (h, t) = (rng.gen_range(1..5), rng.gen_range(1..40));
        let mut a = Array3::from_shape_fn((h, t, t), |_| rng.gen_range(0.0..1.0f64).powi(4));
        for mut row in a.lanes_mut(ndarray::Axis(2)) {
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        let got = mean_attention_distance(a.view(), 0.04).unwrap();
        for (g, w) in got.iter().zip(brute_force_distance(&a, 0.04)) {
            assert!((g - w).abs() <= 1e-12);
            assert!(*g >= 0.0 && *g <= t as f64 * 0.04);
        }
    }
    assert!((mean_attention_distance(uniform_attention(1, 4).view(), 0.04).unwrap()[0] - 0.05).abs() < 1e-15);
}

fn tiny_model(seed: u64) -> EncoderModel<f32> {
    let cfg = ModelConfig {
        mel_bins: 16,
        featenc: FeatEncConfig::new(16),
        encoder: EncoderConfig {
            num_layers: 2,
            num_heads: 2,
            model_dim: 16,
            ffn_expansion: 2,
            conv_kernel: 4,
            ..Default::default()
        },
    };
    EncoderModel::new(&cfg, seed).unwrap()
}

fn clips(n: usize) -> Vec<AudioClip> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    (0..n)
        .map(|i| AudioClip {
            clip_id: format!("c{i}"),
            task_id: "t".into(),
            label: "a".into(),
            split: Split::Train,
            sample_rate: 16_000,
            samples: {
                let f = rng.gen_range(100.0..600.0);
                (0..12_000)
                    .map(|k| 0.4 * (k as f32 * f / 16_000.0 * std::f32::consts::TAU).sin() + rng.gen_range(-0.05..0.05))
                    .collect()
            },
        })
        .collect()
}

fn layer_acts(model: &EncoderModel<f32>, clips: &[AudioClip]) -> Vec<Array2<f64>> {
    let ex = Extractor::new(model);
    let per_clip: Vec<Vec<Vec<f32>>> = clips
        .iter()
        .map(|c| {
            ex.embed_clip(c, WindowPolicy::Full)
                .unwrap()
                .into_iter()
                .map(|v| v.to_vec())
                .collect()
        })
        .collect();
    stack_layers(&per_clip).unwrap()
}

#[test]
fn cka_grids_within_and_across_models() {
    let data = clips(24);
    let a = tiny_model(1);
    let acts_a = layer_acts(&a, &data);
    let within = cka_grid(("a", "a"), &acts_a, None).unwrap();
    for i in 0..3 {
        assert!((within.grid[i][i] - 1.0).abs() <= 1e-9);
        for j in 0..3 {
            assert_eq!(within.grid[i][j], within.grid[j][i]);
        }
    }
    let copy = cka_grid(("a", "a-copy"), &acts_a, Some(&layer_acts(&a.clone(), &data))).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            assert!((copy.grid[i][j] - within.grid[i][j]).abs() <= 1e-12);
        }
    }

    // same feature encoder and first block, different second block
    let mut b = a.clone();
    b.conformer.blocks[1] = tiny_model(2).conformer.blocks[1].clone();
    let cross = cka_grid(("a", "b"), &acts_a, Some(&layer_acts(&b, &data))).unwrap();
    assert!((cross.grid[1][1] - 1.0).abs() <= 1e-9);
    assert!(cross.grid[1][1] > cross.grid[2][2]);
    assert!(cka_grid(("a", "b"), &[], None).is_err());
}

#[test]
fn attention_profile_is_bounded() {
    let data = clips(3);
    let model = tiny_model(4);
    let mels: Vec<_> = data
        .iter()
        .map(|c| paraconf::frontend::log_mel(c, 16).unwrap())
        .collect();
    let p = attention_profile("m", &model, &mels).unwrap();
    assert_eq!(p.per_head.len(), 2);
    for layer in &p.per_head {
        for &d in layer {
            assert!(d >= 0.0 && d <= 0.75);
        }
    }
    let csv = attention_csv(&p, "fp");
    assert!(csv.starts_with("# fingerprint: fp\n"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn cka_symmetric_and_bounded(seed in any::<u64>(), n in 3usize..25, da in 1usize..6, db in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = randn(&mut rng, n, da);
        let y = randn(&mut rng, n, db);
        let a = linear_cka(x.view(), y.view()).unwrap();
        let b = linear_cka(y.view(), x.view()).unwrap();
        prop_assert!((a - b).abs() <= 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn cka_orthogonal_and_scale_invariant(seed in any::<u64>(), c in 0.001f64..1000.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = randn(&mut rng, 15, 4);
        let y = randn(&mut rng, 15, 3);
        let q = random_orthogonal(&mut rng, 3);
        let base = linear_cka(x.view(), y.view()).unwrap();
        let yq = y.dot(&q) * c;
        prop_assert!((linear_cka(x.view(), yq.view()).unwrap() - base).abs() <= 1e-9);
    }
}
