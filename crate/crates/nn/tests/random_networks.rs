use ndarray::{Array2, ArrayD};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rvekit_nn::gradcheck::{check_input, check_params};
use rvekit_nn::{AdamConfig, AdamW, Checkpoint, LayerSpec, LossKind, Mode, Parameterized, Sequential};

fn dense_stack(widths: &[usize], norm: bool) -> Vec<LayerSpec> {
    let mut specs = Vec::new();
    for w in widths.windows(2) {
        specs.push(LayerSpec::dense(w[0], w[1]));
        if specs.len() < 2 * widths.len() - 3 {
            if norm {
                specs.push(LayerSpec::batch_norm(w[1]));
            }
            specs.push(LayerSpec::selu());
        }
    }
    specs
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
    ArrayD::from_shape_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn dense_gradients_match_differences(
        hidden in prop::collection::vec(2usize..7, 1..3),
        inputs in 1usize..5,
        batch in 2usize..6,
        norm in any::<bool>(),
        bayes in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let loss = if bayes { LossKind::bayesian() } else { LossKind::Mse };
        let mut widths = vec![inputs];
        widths.extend(&hidden);
        widths.push(loss.output_width(2));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Sequential::from_specs(&dense_stack(&widths, norm), &mut rng).unwrap();
        let x = random(&[batch, inputs], &mut rng);
        let y = Array2::from_shape_fn((batch, 2), |_| rng.gen_range(-1.0..1.0));
        // eval mode keeps batch norm a fixed affine map under perturbation
        let p = check_params(&mut net, &x, &y, loss, Mode::Eval, 1e-6);
        prop_assert!(p.passes(1e-6), "params {:?}", p);
        let i = check_input(&mut net, &x, &y, loss, Mode::Eval, 1e-6);
        prop_assert!(i.passes(1e-6), "input {:?}", i);
    }

    #[test]
    fn checkpoint_round_trip_preserves_outputs(
        hidden in prop::collection::vec(1usize..6, 1..4),
        seed in any::<u64>(),
    ) {
        let mut widths = vec![3];
        widths.extend(&hidden);
        widths.push(3);
        let specs = dense_stack(&widths, true);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Sequential::from_specs(&specs, &mut rng).unwrap();
        let x = random(&[4, 3], &mut rng);
        net.forward(&x, Mode::Train).unwrap();
        let before = net.forward(&x, Mode::Eval).unwrap();

        let mut ck = Checkpoint::new("stack", serde_json::json!({}));
        ck.push("net", &net);
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        let mut restored = back.restore("net", &specs).unwrap();
        prop_assert_eq!(restored.forward(&x, Mode::Eval).unwrap(), before);
    }
}

#[test]
fn adam_fits_a_linear_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut net = Sequential::from_specs(&[LayerSpec::dense(2, 1)], &mut rng).unwrap();
    let x = random(&[64, 2], &mut rng);
    let y = Array2::from_shape_fn((64, 1), |(i, _)| 0.5 * x[[i, 0]] - 2.0 * x[[i, 1]] + 0.25);
    let mut opt = AdamW::new(AdamConfig {
        learning_rate: 0.05,
        weight_decay: 0.0,
        ..Default::default()
    });
    let mut last = f64::INFINITY;
    for _ in 0..600 {
        net.zero_grad();
        let out = net.forward(&x, Mode::Train).unwrap().into_dimensionality().unwrap();
        let (l, g) = LossKind::Mse.evaluate(&out, &y);
        net.backward(&g.into_dyn(), false);
        opt.step(&mut net);
        last = l;
    }
    assert!(last < 1e-10, "final loss {last}");
}
