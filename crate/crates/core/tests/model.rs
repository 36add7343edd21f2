use nalgebra::DMatrix;
use pennet_core::losses::{hinge_g, pyramid_l1, total_objective, Lambdas};
use pennet_core::model::compose_output;
use pennet_core::{BinaryMask, Discriminator, Generator, ModelConfig, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn images(n: usize, res: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::uniform(&[n, 3, res, res], -1.0, 1.0, &mut rng)
}

#[test]
fn full_configuration_shapes() {
    let cfg = ModelConfig::full();
    let g = Generator::new(cfg.clone(), 1).unwrap();
    let d = Discriminator::new(cfg, 2).unwrap();
    let x = images(1, 256, 3);
    let mask = BinaryMask::rect(256, 256, 64, 64, 128, 128);
    let tape = Tape::inference();
    let params = g.params.bind(&tape);
    let pass = g.forward(&params, &x, &[&mask], None).unwrap();

    let widths = [16, 32, 64, 128, 256, 256, 256];
    assert_eq!(pass.phi.len(), 7);
    for (l, p) in pass.phi.iter().enumerate() {
        assert_eq!(p.shape(), vec![1, widths[l], 256 >> l, 256 >> l], "phi {}", l + 1);
    }
    assert_eq!(pass.psi.len(), 6);
    for (l, p) in pass.psi.iter().enumerate() {
        assert_eq!(p.shape(), vec![1, widths[l], 256 >> l, 256 >> l], "psi {}", l + 1);
    }
    let sizes: Vec<usize> = pass.outputs.iter().map(|o| o.shape()[2]).collect();
    assert_eq!(sizes, vec![256, 128, 64, 32, 16, 8]);
    assert!(pass.outputs.iter().all(|o| o.shape()[1] == 3));
    assert!(pass
        .outputs
        .iter()
        .all(|o| o.value().data().iter().all(|v| (-1.0..=1.0).contains(v))));
    let logits = d.discriminate(&pass.composed.value()).unwrap();
    assert_eq!(logits.shape(), &[1, 1, 16, 16]);
}

#[test]
fn wrong_sizes_are_rejected() {
    let g = Generator::new(ModelConfig::mini().with_resolution(32), 1).unwrap();
    let m32 = BinaryMask::zeros(32, 32);
    assert!(g.generate(&images(1, 16, 0), &[&BinaryMask::zeros(16, 16)]).is_err());
    assert!(g.generate(&images(2, 32, 0), &[&m32]).is_err());
    assert!(g.generate(&images(1, 32, 0), &[&BinaryMask::zeros(32, 16)]).is_err());
}

fn objective(g: &Generator, d: &Discriminator, x: &Tensor, masks: &[&BinaryMask]) -> f64 {
    let tape = Tape::inference();
    let gp = g.params.bind(&tape);
    let dp = d.params.bind_frozen(&tape);
    let pass = g.forward(&gp, x, masks, None).unwrap();
    let adv = hinge_g(d.forward(&dp, pass.composed).unwrap());
    let pd = pyramid_l1(&pass.outputs, x).unwrap();
    total_objective(adv, pd, Lambdas::default()).unwrap().value().item()
}

#[test]
fn generator_gradients_match_finite_differences() {
    let cfg = ModelConfig::mini().with_resolution(32);
    let mut g = Generator::new(cfg.clone(), 7).unwrap();
    let d = Discriminator::new(cfg, 8).unwrap();
    // Zero-initialized biases put some rectifiers exactly at their kink.
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for (name, t) in g.params.iter_mut() {
        if name.ends_with(".bias") {
            let shape = t.shape().to_vec();
            *t = Tensor::randn(&shape, 0.05, &mut rng);
        }
    }
    let x = images(1, 32, 9);
    let mask = BinaryMask::rect(32, 32, 8, 8, 16, 16);

    let tape = Tape::new();
    let gp = g.params.bind(&tape);
    let dp = d.params.bind_frozen(&tape);
    let pass = g.forward(&gp, &x, &[&mask], None).unwrap();
    let adv = hinge_g(d.forward(&dp, pass.composed).unwrap());
    let pd = pyramid_l1(&pass.outputs, &x).unwrap();
    let loss = total_objective(adv, pd, Lambdas::default()).unwrap();
    let grads = tape.backward(loss);
    let analytic: Vec<(String, Tensor)> = gp
        .iter()
        .map(|(n, v)| (n.clone(), grads.get_or_zeros(*v)))
        .collect();
    for (name, grad) in &analytic {
        assert!(grad.is_finite(), "{name} has a non-finite gradient");
    }

    let h = 1e-6;
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    while checked < 60 {
        let (name, grad) = &analytic[rng.random_range(0..analytic.len())];
        let i = rng.random_range(0..grad.numel());
        let orig = g.params.get(name).unwrap().data()[i];
        g.params.get_mut(name).unwrap().data_mut()[i] = orig + h;
        let plus = objective(&g, &d, &x, &[&mask]);
        g.params.get_mut(name).unwrap().data_mut()[i] = orig - h;
        let minus = objective(&g, &d, &x, &[&mask]);
        g.params.get_mut(name).unwrap().data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let a = grad.data()[i];
        let err = (a - numeric).abs();
        if err > 1e-8 {
            worst = worst.max(err / a.abs().max(numeric.abs()));
        }
        checked += 1;
    }
    assert!(worst <= 1e-3, "worst relative error {worst}");
}

#[test]
fn every_generator_parameter_receives_gradient() {
    let cfg = ModelConfig::mini().with_resolution(32);
    let g = Generator::new(cfg.clone(), 3).unwrap();
    let d = Discriminator::new(cfg, 4).unwrap();
    let x = images(2, 32, 5);
    let m1 = BinaryMask::rect(32, 32, 4, 4, 12, 12);
    let m2 = BinaryMask::rect(32, 32, 10, 2, 20, 26);
    let tape = Tape::new();
    let gp = g.params.bind(&tape);
    let dp = d.params.bind_frozen(&tape);
    let pass = g.forward(&gp, &x, &[&m1, &m2], None).unwrap();
    let adv = hinge_g(d.forward(&dp, pass.composed).unwrap());
    let pd = pyramid_l1(&pass.outputs, &x).unwrap();
    let grads = tape.backward(total_objective(adv, pd, Lambdas::default()).unwrap());
    for (name, v) in gp.iter() {
        let gr = grads.get(*v).unwrap_or_else(|| panic!("{name} got no gradient"));
        assert!(gr.is_finite(), "{name}");
    }
    for (_, v) in dp.iter() {
        assert!(grads.get(*v).is_none());
    }
}

#[test]
fn composition_is_an_exact_select() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for trial in 0..100 {
        let x = Tensor::uniform(&[1, 3, 16, 16], -1.0, 1.0, &mut rng);
        let pred = Tensor::uniform(&[1, 3, 16, 16], -1.0, 1.0, &mut rng);
        let values: Vec<f64> = (0..256).map(|_| if rng.random_bool(0.4) { 1.0 } else { 0.0 }).collect();
        let mask = BinaryMask::new(16, 16, values).unwrap();
        let tape = Tape::inference();
        let z = compose_output(tape.constant(pred.clone()), tape.constant(x.clone()), &[&mask])
            .unwrap()
            .value();
        for c in 0..3 {
            for y in 0..16 {
                for xx in 0..16 {
                    let want = if mask.get(y, xx) { pred.at4(0, c, y, xx) } else { x.at4(0, c, y, xx) };
                    assert_eq!(z.at4(0, c, y, xx).to_bits(), want.to_bits(), "trial {trial}");
                }
            }
        }
    }
}

fn top_singular_value(w: &Tensor) -> f64 {
    let rows = w.shape()[0];
    let cols = w.numel() / rows;
    DMatrix::from_row_slice(rows, cols, w.data())
        .singular_values()
        .max()
}

#[test]
fn spectral_normalization_reaches_unit_norm() {
    let d0 = Discriminator::new(ModelConfig::mini(), 13).unwrap();
    let mut d = d0.clone();
    for _ in 0..30 {
        d.power_iterate();
    }
    for i in 0..d.layers().len() {
        let sigma = top_singular_value(&d.normalized_weight(i).unwrap());
        assert!((0.99..=1.01).contains(&sigma), "layer {i}: {sigma}");
    }
}

#[test]
fn forward_is_bitwise_deterministic() {
    let cfg = ModelConfig::mini().with_resolution(64);
    let x = images(2, 64, 14);
    let m = BinaryMask::rect(64, 64, 16, 16, 32, 32);
    let run = || {
        let g = Generator::new(cfg.clone(), 15).unwrap();
        g.generate(&x, &[&m, &m]).unwrap()
    };
    let (a_out, a_z) = run();
    let (b_out, b_z) = run();
    assert_eq!(a_out, b_out);
    assert_eq!(a_z, b_z);
}
