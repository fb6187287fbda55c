use std::path::Path;
use std::process::{Command, Output};

const TINY: [&str; 8] = [
    "base_channels=3",
    "n_down=1",
    "n_res=1",
    "style_down=2",
    "mlp_hidden=16",
    "disc_layers=2",
    "patch_frames=8",
    "nnls_max_iters=50",
];

fn timbre(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_timbre"))
        .args(args)
        .env_remove("TIMBRE_CACHE_DIR")
        .output()
        .expect("spawn timbre")
}

fn ok(args: &[&str]) -> String {
    let o = timbre(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Samples of a canonical 44-byte-header 16-bit mono WAV.
fn wav_samples(path: &Path) -> Vec<i16> {
    let bytes = std::fs::read(path).unwrap();
    assert_eq!(&bytes[..4], b"RIFF");
    assert_eq!(u32::from_le_bytes(bytes[24..28].try_into().unwrap()), 22050);
    bytes[44..].chunks_exact(2).map(|b| i16::from_le_bytes([b[0], b[1]])).collect()
}

fn train_args<'a>(mx: &'a str, my: &'a str, out: &'a str, iters: &'a str) -> Vec<&'a str> {
    let mut a = vec!["train", "--domain-x", mx, "--domain-y", my, "--iters", iters, "--seed", "7", "--out", out];
    for kv in TINY {
        a.extend(["--set", kv]);
    }
    a
}

#[test]
fn bad_flags_exit_two_with_usage() {
    let o = timbre(&["transfer", "--bogus"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(timbre(&[]).status.code(), Some(2));
}

#[test]
fn runtime_errors_are_one_machine_readable_line() {
    let dir = tempfile::tempdir().unwrap();
    let o = timbre(&["extract", "--in", p(&dir.path().join("missing.wav")), "--out", p(&dir.path().join("m.feat"))]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8(o.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error kind="), "{err}");

    let o = timbre(&["reconstruct", "--in", "x.wav", "--out", "y.wav", "--set", "warmth=3"]);
    let err = String::from_utf8(o.stderr).unwrap();
    assert!(err.starts_with("error kind=config"), "{err}");
}

#[test]
fn extract_is_idempotent_and_honors_cache() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["synth", "--out", p(d), "--secs", "2", "--clip-secs", "1", "--seed", "1"]);
    let wav = d.join("x_000.wav");
    let a = d.join("a.feat");
    let b = d.join("b.feat");
    ok(&["extract", "--in", p(&wav), "--out", p(&a)]);
    ok(&["extract", "--in", p(&wav), "--out", p(&b), "--cache-dir", p(&d.join("cache"))]);
    let first = std::fs::read(&a).unwrap();
    ok(&["extract", "--in", p(&wav), "--out", p(&a)]);
    assert_eq!(first, std::fs::read(&a).unwrap());
    assert_eq!(first, std::fs::read(&b).unwrap());
    assert_eq!(std::fs::read_dir(d.join("cache")).unwrap().count(), 1);
}

#[test]
fn train_transfer_interpolate_reconstruct() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["synth", "--out", p(d), "--secs", "4", "--clip-secs", "2", "--seed", "3"]);
    let (mx, my) = (d.join("x.txt"), d.join("y.txt"));
    let (r1, r2) = (d.join("run1"), d.join("run2"));
    ok(&train_args(p(&mx), p(&my), p(&r1), "6"));
    let mut second = train_args(p(&mx), p(&my), p(&r2), "6");
    second.extend(["--jobs", "2", "--checkpoint-every", "3"]);
    ok(&second);
    let metrics = std::fs::read_to_string(r1.join("metrics.log")).unwrap();
    assert_eq!(metrics.lines().count(), 6);
    assert_eq!(metrics, std::fs::read_to_string(r2.join("metrics.log")).unwrap());
    let ckpt = std::fs::read(r1.join("final.ckpt")).unwrap();
    assert_eq!(ckpt, std::fs::read(r2.join("final.ckpt")).unwrap());
    assert!(r2.join("ckpt_000003.ckpt").exists());
    let echoed = timbre::container::Container::load(&r1.join("final.ckpt")).unwrap().string("meta.config").unwrap();
    assert!(echoed.contains("mlp_hidden = 16") && echoed.contains("max_iters = 6"), "{echoed}");

    let ck = r1.join("final.ckpt");
    let src = d.join("x_000.wav");
    let out = |name: &str| d.join(name);
    let transfer = |seed: &str, o: &Path| {
        ok(&["transfer", "--ckpt", p(&ck), "--in", p(&src), "--direction", "x2y", "--seed", seed, "--out", p(o)]);
    };
    transfer("3", &out("a.wav"));
    transfer("3", &out("b.wav"));
    transfer("4", &out("c.wav"));
    let (a, b, c) = (wav_samples(&out("a.wav")), wav_samples(&out("b.wav")), wav_samples(&out("c.wav")));
    assert!(!a.is_empty() && a.len() == c.len());
    assert_eq!(a, b);
    let diff: f64 = a.iter().zip(&c).map(|(x, y)| (*x as f64 - *y as f64).abs()).sum::<f64>() / a.len() as f64;
    assert!(diff > 0.0);

    let sweep = d.join("sweep");
    ok(&[
        "interpolate", "--ckpt", p(&ck), "--in", p(&src), "--direction", "y2x", "--seed", "1", "--dim", "5", "--from", "-3",
        "--to", "3", "--steps", "7", "--out", p(&sweep),
    ]);
    let outs: Vec<Vec<i16>> = (0..7).map(|i| wav_samples(&sweep.join(format!("step_{i:02}.wav")))).collect();
    assert!(outs.windows(2).all(|w| w[0] != w[1]));

    ok(&["reconstruct", "--in", p(&src), "--out", p(&out("r.wav")), "--set", "nnls_max_iters=50"]);
    assert!(!wav_samples(&out("r.wav")).is_empty());
}

#[test]
fn verify_prints_one_line_per_property() {
    let stdout = ok(&["verify", "--seed", "3"]);
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.len(), 6);
    assert!(lines.iter().all(|l| l.starts_with("PASS ")), "{stdout}");
}
