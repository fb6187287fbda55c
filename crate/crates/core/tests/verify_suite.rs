use timbre::verify;

#[test]
fn invariant_suite_passes() {
    for c in verify::run_all(3) {
        println!("{}", c.line());
        assert!(c.passed, "{}", c.line());
    }
}

#[test]
fn gradient_suite_covers_every_block_and_term() {
    let names: Vec<String> = verify::gradient_errors(1).unwrap().into_iter().map(|(n, _)| n).collect();
    for want in ["x.content_encoder", "y.style_encoder", "x.decoder", "y.discriminator", "adversarial_gen", "adversarial_disc", "content", "style", "reconstruction", "ic_mfcc", "ic_delta", "ic_env"] {
        assert!(names.iter().any(|n| n == want), "missing {want}");
    }
}

#[test]
fn gradient_errors_have_margin_across_seeds() {
    for seed in 0..16 {
        for (name, err) in verify::gradient_errors(seed).unwrap() {
            assert!(err < verify::GRAD_TOL, "seed {seed} {name}: {err:e}");
        }
    }
}
