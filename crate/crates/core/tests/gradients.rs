mod common;

use common::{finite_difference, random_batch, relative_error};
use conr::loss::{conr_loss, ConrConfig, Variant};
use conr::mlp::{Activation, Architecture, Mlp};
use conr::pairing::{select_pairs_with, AugmentedBatch};
use conr::tensor::Matrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// `⟨G_Z, Z⟩ + ⟨G_Y, Ŷ⟩`, whose gradient is exactly what `backward` returns
/// for upstream gradients `(G_Z, G_Y)`.
fn probe_loss(model: &Mlp, x: &Matrix, gz: &Matrix, gy: &Matrix) -> f64 {
    let out = model.forward(x).unwrap();
    out.features.frobenius_dot(gz).unwrap() + out.predictions.frobenius_dot(gy).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn mlp_backward_matches_finite_differences(seed in 0u64..10_000, relu_features in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let arch = Architecture {
            hidden: vec![5, 4],
            feature_dim: 3,
            feature_activation: if relu_features { Activation::Relu } else { Activation::Identity },
        };
        let mut model = Mlp::new(3, &arch, 2, &mut rng).unwrap();
        // Zero init biases put all-dead rows exactly on the next ReLU kink.
        for (t, p) in model.parameters_mut().into_iter().enumerate() {
            if t % 2 == 1 {
                for b in p.iter_mut() {
                    let v: f64 = StandardNormal.sample(&mut rng);
                    *b = 0.3 * v;
                }
            }
        }
        let x = gaussian(&mut rng, 4, 3);
        let gz = gaussian(&mut rng, 4, 3);
        let gy = gaussian(&mut rng, 4, 2);
        let out = model.forward(&x).unwrap();
        let grads = model.backward(&out.cache, &gz, &gy).unwrap();
        let analytic: Vec<f64> = grads.as_slices().concat();

        let h = 1e-5;
        let mut numeric = Vec::with_capacity(analytic.len());
        let tensors = model.parameters().len();
        for t in 0..tensors {
            let len = model.parameters()[t].len();
            for i in 0..len {
                let orig = model.parameters()[t][i];
                model.parameters_mut()[t][i] = orig + h;
                let up = probe_loss(&model, &x, &gz, &gy);
                model.parameters_mut()[t][i] = orig - h;
                let down = probe_loss(&model, &x, &gz, &gy);
                model.parameters_mut()[t][i] = orig;
                numeric.push((up - down) / (2.0 * h));
            }
        }
        let err = relative_error(&analytic, &numeric);
        prop_assert!(err < 1e-6, "relative error {err}");

        let dx = finite_difference(&x, h, |xp| probe_loss(&model, xp, &gz, &gy));
        let err = relative_error(grads.input.data(), dx.data());
        prop_assert!(err < 1e-6, "input relative error {err}");
    }
}

fn check_conr_gradient(seed: u64, cfg: &ConrConfig) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rb = random_batch(&mut rng, 8, 8, 6.0);
    let rule = cfg.rule();
    let pairs = select_pairs_with(
        &rb.batch.labels,
        &rb.batch.predictions,
        &rule,
        cfg.variant.pairing_mode(),
    )
    .unwrap();
    let out = conr_loss(&rb.batch, &pairs, &rb.weights, cfg).unwrap();
    let fd = finite_difference(&rb.batch.features, 1e-5, |z| {
        let b = AugmentedBatch {
            features: z.clone(),
            ..rb.batch.clone()
        };
        conr_loss(&b, &pairs, &rb.weights, cfg).unwrap().value
    });
    relative_error(out.d_features.data(), fd.data())
}

#[test]
fn conr_gradient_matches_finite_differences_for_every_variant() {
    for (k, &variant) in Variant::ALL.iter().enumerate() {
        for normalize in [true, false] {
            let cfg = ConrConfig {
                variant,
                normalize_features: normalize,
                tau: 0.7,
                ..ConrConfig::default()
            };
            let err = check_conr_gradient(100 + k as u64, &cfg);
            assert!(err < 1e-5, "{variant:?} normalize={normalize}: {err}");
        }
    }
}

#[test]
fn stopped_peer_gradient_only_reaches_anchor_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let rb = random_batch(&mut rng, 6, 4, 5.0);
    let cfg = ConrConfig {
        stop_peer_gradient: true,
        ..ConrConfig::default()
    };
    let pairs = select_pairs_with(
        &rb.batch.labels,
        &rb.batch.predictions,
        &cfg.rule(),
        cfg.variant.pairing_mode(),
    )
    .unwrap();
    let out = conr_loss(&rb.batch, &pairs, &rb.weights, &cfg).unwrap();
    let full = conr_loss(&rb.batch, &pairs, &rb.weights, &ConrConfig::default()).unwrap();
    assert_eq!(out.value, full.value);
    for j in 0..pairs.len() {
        let contributes = pairs.anchor_mask[j] && !pairs.positives[j].is_empty();
        if !contributes {
            assert!(out.d_features.row(j).iter().all(|&v| v == 0.0), "row {j}");
        }
    }
}
