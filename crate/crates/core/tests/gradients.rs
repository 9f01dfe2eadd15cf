use ndarray::Array2;
use paraconf::conformer::EncoderConfig;
use paraconf::featenc::FeatEncConfig;
use paraconf::model::{EncoderModel, ModelConfig};
use paraconf::pretrain::{check_gradients, sample_distractors, ClipPlan, MaskPlan};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(relative: bool) -> ModelConfig {
    ModelConfig {
        mel_bins: 8,
        featenc: FeatEncConfig::new(8),
        encoder: EncoderConfig {
            num_layers: 2,
            num_heads: 2,
            model_dim: 8,
            ffn_expansion: 2,
            conv_kernel: 4,
            relative_attention: relative,
            max_relative_offset: 5,
            dropout: 0.0,
            final_norm: true,
        },
    }
}

fn run(relative: bool, seed: u64) {
    let cfg = tiny(relative);
    let mut model = EncoderModel::<f64>::new(&cfg, seed).unwrap();
    // move away from the init's symmetric points (unit gains, zero biases)
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    for (_, p) in paraconf::params::Parameterized::params_mut(&mut model) {
        for v in p.iter_mut() {
            *v += rng.gen_range(-0.1..0.1);
        }
    }
    let mel = Array2::from_shape_fn((46, 8), |_| rng.gen_range(-2.0..2.0));
    let t_enc = cfg.featenc.output_len(46);
    assert_eq!(t_enc, 12);
    let masked = vec![1, 2, 3, 6, 7, 8, 10];
    let (distractors, reduced) = sample_distractors(masked.len(), 4, &mut rng);
    assert_eq!(reduced, 0);
    let plan = ClipPlan {
        mask: MaskPlan {
            len: t_enc,
            masked,
            span_starts: vec![1, 6, 9],
            span: 3,
        },
        distractors,
        reduced,
        dropout_seed: 0,
    };
    let report = check_gradients(&model, mel.view(), &plan, 0.1, 1e-5, 1e-6).unwrap();
    let mut worst = 0.0f64;
    for g in &report {
        worst = worst.max(g.max_rel_error);
        assert!(
            g.max_rel_error <= 1e-4,
            "{}: rel {:.3e} abs {:.3e}",
            g.name,
            g.max_rel_error,
            g.max_abs_error
        );
    }
    assert!(report.iter().any(|g| g.name.contains("relative_bias")) == relative);
    eprintln!("worst relative error {worst:.3e} over {} groups", report.len());
}

#[test]
fn full_loss_gradient_matches_finite_differences() {
    run(true, 3);
}

#[test]
fn gradient_without_relative_attention() {
    run(false, 4);
}
