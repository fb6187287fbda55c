use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use timbre::features::{extract_stack, ChannelStats, ETA};
use timbre::losses::{self, total_objective, IntrinsicConsistency, LossReport, LossWeights};
use timbre::{AudioClip, FeatureStack};
use timbre_nn::gradcheck::{check_gradients, GradCheckConfig};
use timbre_nn::{Graph, Tensor};

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn adv(real: Tensor<f64>, fake: Tensor<f64>) -> (f64, f64) {
    let mut g = Graph::new();
    let (r, f) = (g.constant(real), g.constant(fake));
    let (gen, disc) = losses::adversarial_losses(&mut g, r, f).unwrap();
    (g.scalar(gen), g.scalar(disc))
}

fn naive_mad(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

#[test]
fn ragan_probabilities() {
    let mut g = Graph::new();
    let q = g.constant(Tensor::new(&[1, 1, 3], vec![0.5, 1.5, 60.5]).unwrap());
    let m = g.constant(Tensor::scalar(0.5));
    let p = losses::ragan_d(&mut g, q, m).unwrap();
    let v: Vec<f64> = g.value(p).data().to_vec();
    assert_eq!(v[0], 0.5);
    assert!((v[1] - 0.731_058_578_630_004_9).abs() < 1e-12);
    assert!(v[2] > 1.0 - 1e-12 && v[2] <= 1.0);
}

#[test]
fn adversarial_constant_scores() {
    let c = Tensor::full(&[1, 4, 4], 0.3);
    assert_eq!(adv(c.clone(), c), (1.0, 1.0));
}

#[test]
fn adversarial_separated_scores() {
    // Real one above fake: the real term meets its target, the fake term sits one below its mean-real reference.
    let (gen, disc) = adv(Tensor::full(&[1, 2, 2], 1.0), Tensor::full(&[1, 2, 2], 0.0));
    assert_eq!(disc, 1.0);
    assert_eq!(gen, 4.0 + 1.0);
    // The discriminator optimum over a uniform gap d is (d - 1)^2 + d^2, minimal at d = 1/2.
    let (_, best) = adv(Tensor::full(&[1, 2, 2], 0.5), Tensor::full(&[1, 2, 2], 0.0));
    assert_eq!(best, 0.5);
}

#[test]
fn adversarial_rejects_empty_scores() {
    let mut g = Graph::new();
    let e = g.constant(Tensor::<f64>::new(&[0], vec![]).unwrap());
    let r = g.constant(Tensor::full(&[2], 1.0));
    assert!(losses::adversarial_losses(&mut g, e, r).is_err());
}

#[test]
fn mean_abs_losses_match_examples_and_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = rand_tensor(&mut rng, &[8, 4, 4]);
    let b = rand_tensor(&mut rng, &[8, 4, 4]);
    let mut g = Graph::new();
    let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
    let shifted = g.constant(a.map(|v| v + 1.0));
    let same = losses::content_loss(&mut g, av, av).unwrap();
    let unit = losses::content_loss(&mut g, av, shifted).unwrap();
    let rnd = losses::content_loss(&mut g, av, bv).unwrap();
    let rec = losses::reconstruction_loss(&mut g, av, bv).unwrap();
    assert_eq!(g.scalar(same), 0.0);
    assert!((g.scalar(unit) - 1.0).abs() < 1e-12);
    assert!((g.scalar(rnd) - naive_mad(&a, &b)).abs() < 1e-12);
    assert!((g.scalar(rec) - naive_mad(&a, &b)).abs() < 1e-12);

    let eps = g.constant(a.map(|v| v + 0.125));
    let r_eps = losses::reconstruction_loss(&mut g, av, eps).unwrap();
    assert!((g.scalar(r_eps) - 0.125).abs() < 1e-12);

    let z = g.constant(Tensor::new(&[8], vec![2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap());
    let s = g.constant(Tensor::zeros(&[8]));
    let st = losses::style_loss(&mut g, z, s).unwrap();
    assert_eq!(g.scalar(st), 0.25);

    let short = g.constant(Tensor::zeros(&[7]));
    assert!(losses::style_loss(&mut g, z, short).is_err());
    let other = g.constant(Tensor::zeros(&[8, 4, 2]));
    assert!(losses::content_loss(&mut g, av, other).is_err());
}

#[test]
fn loss_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cfg = GradCheckConfig { step: 1e-5, max_coords: 200, floor: 1e-6, kink_tol: None };
    let q = [rand_tensor(&mut rng, &[1, 3, 5]), rand_tensor(&mut rng, &[1, 3, 5])];
    for pick in 0..2 {
        let r = check_gradients(&q, cfg, |g, v| {
            let (gen, disc) = losses::adversarial_losses(g, v[0], v[1]).map_err(nn)?;
            Ok([gen, disc][pick])
        })
        .unwrap();
        assert!(r.max_relative_error() < 1e-3, "adversarial {pick}: {:e}", r.max_relative_error());
    }
    let pair = [rand_tensor(&mut rng, &[3, 4, 5]), rand_tensor(&mut rng, &[3, 4, 5])];
    let r = check_gradients(&pair, cfg, |g, v| losses::reconstruction_loss(g, v[0], v[1]).map_err(nn)).unwrap();
    assert!(r.max_relative_error() < 1e-3);
    let styles = [rand_tensor(&mut rng, &[8]), rand_tensor(&mut rng, &[8])];
    let r = check_gradients(&styles, cfg, |g, v| losses::style_loss(g, v[0], v[1]).map_err(nn)).unwrap();
    assert!(r.max_relative_error() < 1e-3);

    let stats = ChannelStats { mean: [0.2, -1.0, 0.1, 0.4], std: [0.7, 3.0, 0.2, 0.9] };
    let ic = IntrinsicConsistency::<f64>::new(&stats, 32, ETA).unwrap();
    let u = rand_tensor(&mut rng, &[4, 32, 7]);
    let w = LossWeights { lambda_mfcc: 0.5, lambda_delta: 2.0, lambda_env: 1.5, ..Default::default() };
    let r = check_gradients(std::slice::from_ref(&u), cfg, |g, v| {
        let t = ic.terms(g, v[0]).map_err(nn)?;
        ic.total(g, &t, &w).map_err(nn)
    })
    .unwrap();
    assert!(r.max_relative_error() < 1e-3, "ic_total: {:e}", r.max_relative_error());
}

fn nn(e: timbre::TimbreError) -> timbre_nn::NnError {
    timbre_nn::NnError::Shape(e.to_string())
}

fn tone_stack(freq: f64) -> FeatureStack {
    let clip = AudioClip::new(
        (0..22050).map(|i| 0.4 * (2.0 * std::f64::consts::PI * freq * i as f64 / 22050.0).sin()).collect(),
        22050,
    );
    extract_stack(&clip).unwrap()
}

fn ic_values(ic: &IntrinsicConsistency<f64>, u: Tensor<f64>) -> [f64; 3] {
    let mut g = Graph::new();
    let uv = g.constant(u);
    let t = ic.terms(&mut g, uv).unwrap();
    [g.scalar(t.mfcc), g.scalar(t.delta), g.scalar(t.env)]
}

#[test]
fn intrinsic_loss_vanishes_on_extracted_stacks() {
    let stacks: Vec<_> = [220.0, 523.25, 1760.0].iter().map(|&f| tone_stack(f)).collect();
    let stats = ChannelStats::fit(&stacks).unwrap();
    let ic = IntrinsicConsistency::<f64>::new(&stats, 256, ETA).unwrap();
    for s in &stacks {
        let [a, b, c] = ic_values(&ic, stats.normalize(s));
        assert!(a + b + c < 1e-6, "{a:e} {b:e} {c:e}");
    }
}

#[test]
fn single_mfcc_perturbation_costs_eps_over_area() {
    let s = tone_stack(440.0);
    let stats = ChannelStats::fit([&s]).unwrap();
    let ic = IntrinsicConsistency::<f64>::new(&stats, 256, ETA).unwrap();
    let base = ic_values(&ic, stats.normalize(&s));
    let mut p = s.clone();
    let eps = 0.05;
    p.mfcc[[3, 10]] += eps;
    let after = ic_values(&ic, stats.normalize(&p));
    let t = s.n_frames() as f64;
    assert!((after[0] - base[0] - eps / (256.0 * t)).abs() < 1e-9, "{} vs {}", after[0], eps / (256.0 * t));
    assert!((after[1] - base[1]).abs() < 1e-12);
    assert!((after[2] - base[2]).abs() < 1e-12);
}

#[test]
fn intrinsic_loss_rejects_wrong_bands() {
    let ic = IntrinsicConsistency::<f64>::new(&ChannelStats::default(), 16, 5).unwrap();
    let mut g = Graph::new();
    let u = g.constant(Tensor::zeros(&[4, 8, 3]));
    assert!(ic.terms(&mut g, u).is_err());
    let u3 = g.constant(Tensor::zeros(&[3, 16, 3]));
    assert!(ic.terms(&mut g, u3).is_err());
}

#[test]
fn doubling_recon_weight_doubles_only_recon() {
    let parts = LossReport { adv_g: 0.7, content: 0.3, style: 0.2, recon: 0.9, ic_mfcc: 0.1, ic_delta: 0.05, ic_env: 0.02, ..Default::default() };
    let w = LossWeights::default();
    let w2 = LossWeights { lambda_r: 2.0 * w.lambda_r, ..w };
    let diff = total_objective(&parts, &w2) - total_objective(&parts, &w);
    assert!((diff - w.lambda_r * parts.recon).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn losses_are_nonnegative(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (qr, qf) = (rand_tensor(&mut rng, &[1, 2, 3]), rand_tensor(&mut rng, &[1, 2, 3]));
        let (gen, disc) = adv(qr, qf);
        prop_assert!(gen >= 0.0 && disc >= 0.5 - 1e-12);
        let a = rand_tensor(&mut rng, &[2, 3, 3]);
        let b = rand_tensor(&mut rng, &[2, 3, 3]);
        let mut g = Graph::new();
        let (av, bv) = (g.constant(a), g.constant(b));
        let l = losses::reconstruction_loss(&mut g, av, bv).unwrap();
        prop_assert!(g.scalar(l) > 0.0);
    }

    #[test]
    fn total_is_linear_in_each_weight(k in 0usize..6, scale in 0.0f64..5.0) {
        let parts = LossReport { adv_g: 0.4, content: 1.1, style: 0.6, recon: 0.8, ic_mfcc: 0.3, ic_delta: 0.2, ic_env: 0.1, ..Default::default() };
        let base = LossWeights::default();
        let mut ws = [base.lambda_c, base.lambda_s, base.lambda_r, base.lambda_mfcc, base.lambda_delta, base.lambda_env];
        let terms = [parts.content, parts.style, parts.recon, parts.ic_mfcc, parts.ic_delta, parts.ic_env];
        let before = total_objective(&parts, &base);
        ws[k] *= scale;
        let w = LossWeights { lambda_c: ws[0], lambda_s: ws[1], lambda_r: ws[2], lambda_mfcc: ws[3], lambda_delta: ws[4], lambda_env: ws[5] };
        let expect = before + (scale - 1.0) * [base.lambda_c, base.lambda_s, base.lambda_r, base.lambda_mfcc, base.lambda_delta, base.lambda_env][k] * terms[k];
        prop_assert!((total_objective(&parts, &w) - expect).abs() < 1e-12);
    }
}
