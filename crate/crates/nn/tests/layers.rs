use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use timbre_nn::{adaptive_instance_norm, Graph, Tensor};

/// Direct six-loop cross-correlation with zero padding disabled.
fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize) -> Tensor<f64> {
    let (c, h, wd) = x.chw().unwrap();
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let (ho, wo) = ((h - k) / stride + 1, (wd - k) / stride + 1);
    let mut out = vec![0.0; co * ho * wo];
    for o in 0..co {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = b[o];
                for i in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            acc += x.data()[(i * h + oy * stride + ky) * wd + ox * stride + kx]
                                * w.data()[((o * c + i) * k + ky) * k + kx];
                        }
                    }
                }
                out[(o * ho + oy) * wo + ox] = acc;
            }
        }
    }
    Tensor::new(&[co, ho, wo], out).unwrap()
}

#[test]
fn conv3x3_matches_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = Tensor::from_fn(&[1, 4, 4], |_| rng.random_range(-1.0..1.0));
    let w = Tensor::from_fn(&[1, 1, 3, 3], |_| rng.random_range(-1.0..1.0));
    let b = Tensor::new(&[1], vec![0.25]).unwrap();
    let mut g = Graph::new();
    let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
    let y = g.conv2d_valid(xv, wv, bv, 1).unwrap();
    let want = naive_conv(&x, &w, b.data(), 1);
    assert!(g.value(y).max_abs_diff(&want).unwrap() < 1e-10);
}

#[test]
fn strided_multichannel_conv_matches_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = Tensor::from_fn(&[3, 9, 10], |_| rng.random_range(-1.0..1.0));
    let w = Tensor::from_fn(&[4, 3, 4, 4], |_| rng.random_range(-1.0..1.0));
    let b = Tensor::from_fn(&[4], |i| i as f64);
    let mut g = Graph::new();
    let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
    let y = g.conv2d_valid(xv, wv, bv, 2).unwrap();
    let want = naive_conv(&x, &w, b.data(), 2);
    assert!(g.value(y).max_abs_diff(&want).unwrap() < 1e-10);
}

#[test]
fn conv_rejects_channel_mismatch() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(&[2, 4, 4]));
    let w = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
    let b = g.constant(Tensor::zeros(&[1]));
    assert!(g.conv2d(x, w, b, 1, 1).is_err());
}

fn channel_moments(t: &Tensor<f64>, c: usize) -> (f64, f64) {
    let ch = t.channel(c).unwrap();
    let n = ch.len() as f64;
    let mean = ch.iter().sum::<f64>() / n;
    let var = ch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

fn adain(x: Tensor<f64>, scale: f64, bias: f64) -> Tensor<f64> {
    let c = x.shape()[0];
    let mut g = Graph::new();
    let xv = g.constant(x);
    let s = g.constant(Tensor::full(&[c], scale));
    let b = g.constant(Tensor::full(&[c], bias));
    let y = adaptive_instance_norm(&mut g, xv, s, b).unwrap();
    g.value(y).clone()
}

#[test]
fn adain_unit_affine_standardizes() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = Tensor::from_fn(&[3, 16, 16], |_| rng.random_range(-4.0..9.0));
    let y = adain(x, 1.0, 0.0);
    for c in 0..3 {
        let (m, v) = channel_moments(&y, c);
        assert!(m.abs() < 1e-12);
        assert!((v - 1.0).abs() < 1e-3);
    }
}

#[test]
fn adain_constant_channel_gives_bias() {
    let y = adain(Tensor::full(&[2, 4, 4], 7.5), 3.0, -0.25);
    assert!(y.data().iter().all(|&v| (v + 0.25).abs() < 1e-12));
}

#[test]
fn adain_moments_follow_style_affine() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = Tensor::from_fn(&[4, 32, 32], |_| rng.random_range(-1.0..1.0));
    let y = adain(x, 2.0, 3.0);
    for c in 0..4 {
        let (m, v) = channel_moments(&y, c);
        assert!((m - 3.0).abs() < 1e-3);
        assert!((v.sqrt() - 2.0).abs() < 1e-3);
    }
}

proptest! {
    #[test]
    fn conv_output_extent(h in 4usize..20, w in 4usize..20, k in 1usize..5, stride in 1usize..3, pad in 0usize..3) {
        prop_assume!(pad < h && pad < w && h + 2 * pad >= k && w + 2 * pad >= k);
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[2, h, w]));
        let wt = g.constant(Tensor::zeros(&[3, 2, k, k]));
        let b = g.constant(Tensor::zeros(&[3]));
        let y = g.conv2d(x, wt, b, stride, pad).unwrap();
        prop_assert_eq!(g.shape(y), &[3, (h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1][..]);
    }
}

#[test]
fn layer_norm_standardizes_whole_tensor() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = Tensor::from_fn(&[3, 8, 8], |i| (i / 64) as f64 * 10.0 + rng.random_range(-1.0..1.0));
    let mut g = Graph::new();
    let xv = g.constant(x);
    let y = g.layer_norm(xv, 1e-12).unwrap();
    let d = g.value(y).data();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-9);
    let (m0, _) = channel_moments(g.value(y), 0);
    let (m2, _) = channel_moments(g.value(y), 2);
    assert!(m0 < -1.0 && m2 > 1.0, "channel offsets survive: {m0} {m2}");
}
