//! Assertion helpers shared by unit tests.

/// Checks an analytic gradient against a central finite difference:
/// passes when the relative error is below `1e-3` or the absolute
/// difference is below `1e-8`.
pub fn assert_grad_close(name: &str, analytic: f64, fd: f64) {
    let diff = (analytic - fd).abs();
    let scale = analytic.abs().max(fd.abs());
    assert!(
        diff <= (1e-3 * scale).max(1e-8),
        "{name}: analytic {analytic} vs finite difference {fd} (diff {diff})"
    );
}
