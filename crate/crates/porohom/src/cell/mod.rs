//! Periodic unit-cell problems on a staggered voxel grid.

mod kernels;
mod neumann;
mod stokes;
pub mod strain;

pub use kernels::{
    solve_fluid_kernel, solve_solid_kernel, solve_two_phase_kernel, KernelHistory, TimeGrid,
    TwoPhaseForcing,
};
pub use neumann::{solve_neumann_laplace, NeumannSolution};
pub use stokes::{
    solve_stokes_cell, solve_stokes_cell_with, solve_stokes_memory_cell, MemoryCellSolution,
    StokesCellSolution, StokesRhs,
};

use serde::{Deserialize, Serialize};

/// Which part of the cell a field lives on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Fluid,
    Solid,
}

impl Phase {
    pub fn indicator(self) -> u8 {
        match self {
            Phase::Fluid => 1,
            Phase::Solid => 0,
        }
    }
}

/// Time-sampled matrix kernel on t_k = k·dt, k = 1..=N.
///
/// The convolution quadrature uses the first sample for the lag-0 value.
/// Serialized as `{dt, samples: [{t, matrix}], meta}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "KernelRepr", try_from = "KernelRepr")]
pub struct KernelSample {
    pub dt: f64,
    pub times: Vec<f64>,
    /// Row-major matrices (1×1 for scalar kernels).
    pub values: Vec<Vec<Vec<f64>>>,
    pub meta: KernelMeta,
}

#[derive(Serialize, Deserialize)]
struct KernelPoint {
    t: f64,
    matrix: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct KernelRepr {
    dt: f64,
    samples: Vec<KernelPoint>,
    meta: KernelMeta,
}

impl From<KernelSample> for KernelRepr {
    fn from(k: KernelSample) -> Self {
        KernelRepr {
            dt: k.dt,
            samples: k
                .times
                .into_iter()
                .zip(k.values)
                .map(|(t, matrix)| KernelPoint { t, matrix })
                .collect(),
            meta: k.meta,
        }
    }
}

impl TryFrom<KernelRepr> for KernelSample {
    type Error = String;

    fn try_from(r: KernelRepr) -> std::result::Result<Self, String> {
        if !(r.dt > 0.0) {
            return Err("kernel dt must be positive".into());
        }
        for (k, p) in r.samples.iter().enumerate() {
            let expect = (k + 1) as f64 * r.dt;
            if (p.t - expect).abs() > 1e-9 * expect.max(1.0) {
                return Err(format!("kernel sample {k} at t = {} is off the grid k·dt", p.t));
            }
        }
        let values = r.samples.into_iter().map(|p| p.matrix).collect();
        Ok(KernelSample::new(r.dt, values, r.meta))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct KernelMeta {
    pub problem: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho_f: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda1: Option<f64>,
}

impl KernelSample {
    /// Builds a kernel from values at t_1..t_N.
    pub fn new(dt: f64, values: Vec<Vec<Vec<f64>>>, meta: KernelMeta) -> Self {
        let times = (1..=values.len()).map(|k| k as f64 * dt).collect();
        KernelSample {
            dt,
            times,
            values,
            meta,
        }
    }

    /// Kernel with every sample equal to zero.
    pub fn zeros(dt: f64, steps: usize, rows: usize, cols: usize, problem: &str) -> Self {
        Self::new(
            dt,
            vec![vec![vec![0.0; cols]; rows]; steps],
            KernelMeta {
                problem: problem.into(),
                ..Default::default()
            },
        )
    }

    /// Kernel sampled from a closure of time.
    pub fn from_fn(dt: f64, steps: usize, f: impl Fn(f64) -> Vec<Vec<f64>>, problem: &str) -> Self {
        Self::new(
            dt,
            (1..=steps).map(|k| f(k as f64 * dt)).collect(),
            KernelMeta {
                problem: problem.into(),
                ..Default::default()
            },
        )
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Value at lag index `k` (time k·dt); lag 0 uses the first sample.
    pub fn at_lag(&self, k: usize) -> &Vec<Vec<f64>> {
        &self.values[k.max(1) - 1]
    }

    /// Scalar value at lag `k` for 1×1 kernels.
    pub fn scalar_at_lag(&self, k: usize) -> f64 {
        self.at_lag(k)[0][0]
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().flatten().flatten().all(|&v| v == 0.0)
    }

    /// Largest |K_ab − K_ba| over all samples.
    pub fn asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for m in &self.values {
            for (a, row) in m.iter().enumerate() {
                for (b, v) in row.iter().enumerate() {
                    if b < m.len() && a < m[b].len() {
                        worst = worst.max((v - m[b][a]).abs());
                    }
                }
            }
        }
        worst
    }
}

/// Per-face fluid-volume weights: mean indicator of the two adjacent cells.
pub(crate) fn face_phase_weights(grid: &crate::grid::StaggeredGrid, chi: &[u8], phase: Phase) -> Vec<f64> {
    let p = phase.indicator();
    (0..grid.nfaces())
        .map(|f| {
            let (lo, hi) = grid.face_cells(f);
            let mut s = 0.0;
            let mut cnt = 0.0;
            for c in [lo, hi].into_iter().flatten() {
                cnt += 1.0;
                if chi[c] == p {
                    s += 1.0;
                }
            }
            if cnt > 0.0 {
                s / cnt
            } else {
                0.0
            }
        })
        .collect()
}

/// Faces whose two adjacent cells both belong to the phase.
pub(crate) fn interior_faces(grid: &crate::grid::StaggeredGrid, chi: &[u8], phase: Phase) -> Vec<bool> {
    let p = phase.indicator();
    (0..grid.nfaces())
        .map(|f| {
            let (lo, hi) = grid.face_cells(f);
            matches!((lo, hi), (Some(a), Some(b)) if chi[a] == p && chi[b] == p)
        })
        .collect()
}

/// Volume average ∫ over faces of axis `a`, weighted per face.
pub(crate) fn face_integral(
    grid: &crate::grid::StaggeredGrid,
    field: &[f64],
    weights: &[f64],
    a: usize,
) -> f64 {
    grid.faces_of_axis(a)
        .map(|f| weights[f] * field[f])
        .sum::<f64>()
        * grid.vol()
}
