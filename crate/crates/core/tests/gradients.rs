mod common;

use adnas::config::SearchConfig;

#[test]
fn detector_gradients_match_finite_differences() {
    let (arch, weights) = common::gradient_check(&SearchConfig::default(), 11, 0.01, 1e-5);
    let mut worst = 0.0f64;
    for e in arch.iter().chain(&weights) {
        eprintln!("{:40} {:4} fd {:+.6e} an {:+.6e} rel {:.2e}", e.name, e.offset, e.numeric, e.analytic, e.rel_error());
        worst = worst.max(e.rel_error());
    }
    eprintln!("worst {worst:e} over {} arch, {} weights", arch.len(), weights.len());
    assert!(worst < 1e-4);
}
