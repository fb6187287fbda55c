use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use timbre::model::{ArchConfig, Domain, LatentCodes, Translator};
use timbre::verify::tiny_arch;
use timbre_nn::Tensor;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn mad(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs() as f64).sum::<f64>() / a.len() as f64
}

fn tiny(seed: u64) -> Translator<f32> {
    Translator::new(tiny_arch(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

#[test]
fn default_architecture_shape_contract() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let arch = ArchConfig::default();
    let m = Translator::<f32>::new(arch, &mut rng).unwrap();
    let x = rand_tensor(&mut rng, &[4, 256, 256]);
    let codes = m.encode(&x, Domain::X).unwrap();
    assert_eq!(codes.content.shape(), &[64, 64, 64]);
    assert_eq!(codes.style.shape(), &[8]);
    let y = m.decode(&codes, Domain::Y).unwrap();
    assert_eq!(y.shape(), &[4, 256, 256]);
    assert!(y.is_finite());
}

#[test]
fn parameter_sets_are_disjoint_per_domain() {
    let m = tiny(1);
    for store in [&m.gen, &m.disc] {
        let names: Vec<&str> = store.iter().map(|(_, p)| p.name.as_str()).collect();
        let xs = names.iter().filter(|n| n.starts_with("x.")).count();
        let ys = names.iter().filter(|n| n.starts_with("y.")).count();
        assert_eq!(xs + ys, names.len());
        assert_eq!(xs, ys);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&mut rng, &[4, 8, 8]);
    let before = m.encode(&x, Domain::X).unwrap();
    let mut changed = m.clone();
    for (_, p) in changed.gen.iter_mut().filter(|(_, p)| p.name.starts_with("y.")) {
        p.value = p.value.map(|v| v + 1.0);
    }
    assert_eq!(changed.encode(&x, Domain::X).unwrap(), before);
    assert_ne!(changed.encode(&x, Domain::Y).unwrap(), m.encode(&x, Domain::Y).unwrap());
}

#[test]
fn encoding_is_deterministic_and_finite_across_seeds() {
    for seed in 0..100 {
        let m = tiny(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let x = rand_tensor(&mut rng, &[4, 8, 8]);
        let a = m.encode(&x, Domain::X).unwrap();
        assert_eq!(a, m.encode(&x, Domain::X).unwrap());
        assert!(a.content.is_finite() && a.style.is_finite());
        assert!(a.style.data().iter().any(|&v| v != 0.0), "seed {seed}");
    }
}

#[test]
fn bad_shapes_are_rejected() {
    let m = tiny(3);
    assert!(m.encode(&Tensor::zeros(&[3, 8, 8]), Domain::X).is_err());
    assert!(m.encode(&Tensor::zeros(&[4, 8, 6]), Domain::X).is_err());
    assert!(m.encode(&Tensor::zeros(&[4, 8]), Domain::X).is_err());
    let x = Tensor::zeros(&[4, 8, 8]);
    assert!(m.translate(&x, Domain::X, &[0.0; 7]).is_err());
    assert!(m.translate(&x, Domain::X, &[f32::NAN; 8]).is_err());
    let bad = LatentCodes { content: Tensor::zeros(&[5, 4, 4]), style: Tensor::zeros(&[8]) };
    assert!(m.decode(&bad, Domain::X).is_err());
}

#[test]
fn decoding_depends_on_style() {
    let m = tiny(4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let c = rand_tensor(&mut rng, &tiny_arch().content_shape(8, 8));
    let a = m.decode(&LatentCodes { content: c.clone(), style: rand_tensor(&mut rng, &[8]) }, Domain::X).unwrap();
    let b = m.decode(&LatentCodes { content: c, style: rand_tensor(&mut rng, &[8]) }, Domain::X).unwrap();
    assert_eq!(a.shape(), &[4, 8, 8]);
    assert!(mad(&a, &b) > 0.0);

    let zero = LatentCodes { content: Tensor::zeros(&tiny_arch().content_shape(8, 8)), style: Tensor::zeros(&[8]) };
    let z1 = m.decode(&zero, Domain::Y).unwrap();
    assert!(z1.is_finite());
    assert_eq!(z1, m.decode(&zero, Domain::Y).unwrap());
}

#[test]
fn translation_is_reproducible_and_multimodal() {
    let m = tiny(6);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = rand_tensor(&mut rng, &[4, 16, 8]);
    let z: Vec<f32> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
    let z2: Vec<f32> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
    let a = m.translate(&x, Domain::X, &z).unwrap();
    assert_eq!(a.shape(), x.shape());
    assert_eq!(a, m.translate(&x, Domain::X, &z).unwrap());
    assert!(mad(&a, &m.translate(&x, Domain::X, &z2).unwrap()) > 0.0);
    let codes = m.encode(&x, Domain::X).unwrap();
    let direct = m.decode(&LatentCodes { content: codes.content, style: Tensor::new(&[8], z.clone()).unwrap() }, Domain::Y);
    assert_eq!(a, direct.unwrap());
}

#[test]
fn style_interpolation_rules() {
    let m = tiny(8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_tensor(&mut rng, &[4, 8, 8]);
    let z: Vec<f32> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();

    let same = m.interpolate_style(&x, Domain::Y, &z, 5, &[z[5]]).unwrap();
    assert_eq!(same, vec![m.translate(&x, Domain::Y, &z).unwrap()]);

    let values: Vec<f32> = (0..7).map(|i| -3.0 + i as f32).collect();
    let sweep = m.interpolate_style(&x, Domain::Y, &z, 5, &values).unwrap();
    assert_eq!(sweep.len(), 7);
    for w in sweep.windows(2) {
        let d = mad(&w[0], &w[1]);
        assert!(d > 0.0 && d.is_finite());
    }

    let flat = m.interpolate_style(&x, Domain::Y, &z, 2, &[0.5, 0.5, 0.5]).unwrap();
    assert!(flat.windows(2).all(|w| w[0] == w[1]));

    assert!(m.interpolate_style(&x, Domain::Y, &z, 8, &[0.0]).is_err());
    assert!(m.interpolate_style(&x, Domain::Y, &z, 0, &[f32::INFINITY]).is_err());
}

#[test]
fn f64_cast_agrees_with_f32() {
    let m = tiny(10);
    let m64: Translator<f64> = m.cast();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = rand_tensor(&mut rng, &[4, 8, 8]);
    let a = m.encode(&x, Domain::X).unwrap().style;
    let b = m64.encode(&x.cast(), Domain::X).unwrap().style;
    for (p, q) in a.data().iter().zip(b.data()) {
        assert!((*p as f64 - q).abs() < 1e-4 * (1.0 + q.abs()));
    }
}
