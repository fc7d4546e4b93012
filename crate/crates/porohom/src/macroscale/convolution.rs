//! Trapezoid quadrature of ∫₀^{t_n} K(t_n − τ) g(τ) dτ on a uniform grid.

use crate::cell::KernelSample;
use crate::error::{Error, Result};

/// Checks that a kernel is sampled on the step `dt` and covers `steps` lags.
pub fn check_kernel_grid(kernel: &KernelSample, dt: f64, steps: usize) -> Result<()> {
    if (kernel.dt - dt).abs() > 1e-12 * dt.abs().max(1e-300) {
        return Err(Error::KernelGridMismatch(format!(
            "kernel '{}' sampled with dt = {} but the run uses dt = {}",
            kernel.meta.problem, kernel.dt, dt
        )));
    }
    if kernel.len() < steps {
        return Err(Error::KernelGridMismatch(format!(
            "kernel '{}' has {} samples, the run needs {}",
            kernel.meta.problem,
            kernel.len(),
            steps
        )));
    }
    Ok(())
}

/// Trapezoid weight of node j in a rule over nodes 0..=n.
pub fn trapezoid_weight(n: usize, j: usize, dt: f64) -> f64 {
    if n == 0 {
        0.0
    } else if j == 0 || j == n {
        0.5 * dt
    } else {
        dt
    }
}

/// Weighted kernel matrices w_j K(t_n − τ_j) for j = 0..=n.
pub fn quadrature_matrices(kernel: &KernelSample, n: usize, dt: f64) -> Result<Vec<Vec<Vec<f64>>>> {
    check_kernel_grid(kernel, dt, n)?;
    Ok((0..=n)
        .map(|j| {
            let w = trapezoid_weight(n, j, dt);
            kernel
                .at_lag(n - j)
                .iter()
                .map(|r| r.iter().map(|v| w * v).collect())
                .collect()
        })
        .collect())
}

/// ∫₀^{t_n} K(t_n − τ) g(τ) dτ with n = `history.len() − 1`.
///
/// `history[j][b]` is component b of g(τ_j) on a common point set; the
/// result holds one array per kernel row. The last entry plays the role of
/// the current iterate.
pub fn convolve(kernel: &KernelSample, history: &[Vec<Vec<f64>>], dt: f64) -> Result<Vec<Vec<f64>>> {
    let n = history.len().saturating_sub(1);
    let first = kernel.values.first().ok_or_else(|| {
        Error::KernelGridMismatch(format!("kernel '{}' has no samples", kernel.meta.problem))
    })?;
    let (rows, cols) = (first.len(), first.first().map_or(0, |r| r.len()));
    let npts = history.first().and_then(|h| h.first()).map_or(0, |c| c.len());
    for g in history {
        if g.len() != cols || g.iter().any(|c| c.len() != npts) {
            return Err(Error::KernelGridMismatch(format!(
                "history has {} components, kernel '{}' expects {}",
                g.len(),
                kernel.meta.problem,
                cols
            )));
        }
    }
    let mut out = vec![vec![0.0; npts]; rows];
    if n == 0 {
        return Ok(out);
    }
    let mats = quadrature_matrices(kernel, n, dt)?;
    for (m, g) in mats.iter().zip(history) {
        for (a, row) in m.iter().enumerate() {
            for (b, &k) in row.iter().enumerate() {
                if k != 0.0 {
                    for (o, x) in out[a].iter_mut().zip(&g[b]) {
                        *o += k * x;
                    }
                }
            }
        }
    }
    Ok(out)
}
