//! Central finite differences, the independent oracle used to validate
//! analytic gradients.

use ndarray::ArrayD;

/// Central-difference gradient of `f` at `params`, one array per parameter
/// tensor. `f` must be a pure function of its arguments.
pub fn central_diff<F>(f: F, params: &[ArrayD<f64>], h: f64) -> Vec<ArrayD<f64>>
where
    F: Fn(&[ArrayD<f64>]) -> f64,
{
    let mut work: Vec<ArrayD<f64>> = params.to_vec();
    let mut grads = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let mut g = ArrayD::zeros(params[pi].raw_dim());
        for idx in 0..params[pi].len() {
            let orig = work[pi].as_slice_mut().unwrap()[idx];
            work[pi].as_slice_mut().unwrap()[idx] = orig + h;
            let fp = f(&work);
            work[pi].as_slice_mut().unwrap()[idx] = orig - h;
            let fm = f(&work);
            work[pi].as_slice_mut().unwrap()[idx] = orig;
            g.as_slice_mut().unwrap()[idx] = (fp - fm) / (2.0 * h);
        }
        grads.push(g);
    }
    grads
}

/// Worst relative error between two gradient sets. The denominator is
/// floored so that near-zero entries are compared absolutely.
pub fn max_relative_error(analytic: &[ArrayD<f64>], numeric: &[ArrayD<f64>]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut worst = 0.0_f64;
    for (a, n) in analytic.iter().zip(numeric) {
        assert_eq!(a.shape(), n.shape());
        for (av, nv) in a.iter().zip(n.iter()) {
            let denom = av.abs().max(nv.abs()).max(1e-6);
            worst = worst.max((av - nv).abs() / denom);
        }
    }
    worst
}
