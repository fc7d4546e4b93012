//! Time-dependent cell problems producing memory kernels.
//!
//! All three problems are incompressible and share one constrained
//! stepper: the velocity U is the primary unknown and R enforces div U = 0
//! with a mean-zero gauge. Initial data is projected onto the discrete
//! divergence-free space with the mass inner product.

use serde::{Deserialize, Serialize};

use super::strain::WeightedStrain;
use super::{interior_faces, KernelMeta, KernelSample};
use crate::error::{Error, Result};
use crate::geometry::CellGeometry;
use crate::grid::{to_i64, DofMap, FaceRef, StaggeredGrid};
use crate::sparse::{Csr, LinearSolver, SolverOptions, Triplets};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub dt: f64,
    pub steps: usize,
    /// Keep full W, U, R fields for every step.
    #[serde(default)]
    pub store_fields: bool,
}

impl TimeGrid {
    pub fn new(dt: f64, steps: usize) -> Self {
        TimeGrid {
            dt,
            steps,
            store_fields: false,
        }
    }

    fn check(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) || self.steps == 0 {
            return Err(Error::Config(format!(
                "time grid needs dt > 0 and steps > 0 (dt = {}, steps = {})",
                self.dt, self.steps
            )));
        }
        Ok(())
    }
}

/// History of one unit load direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelRun {
    pub i: usize,
    /// ⟨U⟩ at t_k, k = 0..=N, as a d-vector; entry 0 is the projected initial rate.
    pub mean_rate: Vec<Vec<f64>>,
    /// ⟨U⟩ of the unprojected initial data.
    pub initial_mean_rate: Vec<f64>,
    /// ½ UᵀMU + ½ WᵀK_λW at t_k.
    pub energy: Vec<f64>,
    /// Cumulative viscous dissipation up to t_k.
    pub dissipated: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub w: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub u: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub r: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelHistory {
    pub problem: String,
    pub dim: usize,
    pub dt: f64,
    pub runs: Vec<KernelRun>,
}

impl KernelHistory {
    /// Matrix kernel with column i equal to ⟨U^i⟩(t_k), k ≥ 1.
    pub fn kernel(&self, meta: KernelMeta) -> KernelSample {
        let steps = self.runs[0].mean_rate.len() - 1;
        let values = (1..=steps).map(|k| self.matrix_at(k)).collect();
        KernelSample::new(self.dt, values, meta)
    }

    /// Column i is ⟨U^i⟩ at step k.
    pub fn matrix_at(&self, k: usize) -> Vec<Vec<f64>> {
        let d = self.dim;
        let mut m = vec![vec![0.0; d]; d];
        for run in &self.runs {
            for (a, row) in m.iter_mut().enumerate() {
                row[run.i] = run.mean_rate[k][a];
            }
        }
        m
    }

    /// Column i is the average of the unprojected initial data.
    pub fn initial_matrix(&self) -> Vec<Vec<f64>> {
        let d = self.dim;
        let mut m = vec![vec![0.0; d]; d];
        for run in &self.runs {
            for (a, row) in m.iter_mut().enumerate() {
                row[run.i] = run.initial_mean_rate[a];
            }
        }
        m
    }
}

/// Load of the two-phase kernel problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TwoPhaseForcing {
    /// ρ̃ ∂W/∂t(0) = −e_i/(1−m)
    Pressure,
    /// ∂W/∂t(0) = e_i
    Force,
}

/// Gram matrix of Σ_a ∫|∇W_a|² with W = 0 off the unknowns.
fn component_gradient_gram(grid: &StaggeredGrid, dofs: &DofMap) -> Csr {
    let mut t = Triplets::new(dofs.len(), dofs.len());
    let s = grid.vol() / (grid.h * grid.h);
    for f in 0..grid.nfaces() {
        let (a, c) = grid.face_coords(f);
        for k in 0..grid.dim {
            let mut up = to_i64(c);
            up[k] += 1;
            let g = match grid.face(a, up) {
                FaceRef::Face(g, _) => g,
                FaceRef::Zero => continue,
            };
            let row: Vec<(usize, f64)> = [(g, 1.0), (f, -1.0)]
                .into_iter()
                .filter_map(|(i, v)| dofs.to_dof[i].map(|d| (d, v)))
                .collect();
            for &(i, vi) in &row {
                for &(j, vj) in &row {
                    t.push(i, j, s * vi * vj);
                }
            }
        }
    }
    t.to_csr()
}

/// Mass-weighted incompressible dynamics on a set of face unknowns.
struct Dynamics {
    grid: StaggeredGrid,
    dofs: DofMap,
    /// Pressure cells.
    cells: Vec<usize>,
    /// Diagonal mass including h^d.
    mass: Vec<f64>,
    visc: Option<Csr>,
    elast: Option<Csr>,
    /// Divergence rows restricted to unknowns.
    div: Csr,
}

impl Dynamics {
    fn new(
        grid: StaggeredGrid,
        dofs: DofMap,
        cells: Vec<usize>,
        mass: Vec<f64>,
        visc: Option<Csr>,
        elast: Option<Csr>,
    ) -> Result<Self> {
        if dofs.is_empty() || cells.is_empty() {
            return Err(Error::SingularSystem("kernel problem has no unknowns".into()));
        }
        let rows: Vec<_> = cells
            .iter()
            .map(|&c| dofs.restrict_row(&grid.div_row(c)))
            .collect();
        let div = Csr::from_rows(dofs.len(), &rows);
        Ok(Dynamics {
            grid,
            dofs,
            cells,
            mass,
            visc,
            elast,
            div,
        })
    }

    fn nv(&self) -> usize {
        self.dofs.len()
    }

    /// Saddle system with block diag(mass)/dt_scale + cv·visc + ce·elast.
    fn saddle(&self, mass_scale: f64, cv: f64, ce: f64, opts: &SolverOptions) -> Result<LinearSolver> {
        let nv = self.nv();
        let np = self.cells.len();
        let vol = self.grid.vol();
        let n = nv + np + 1;
        let mut t = Triplets::new(n, n);
        for (i, &m) in self.mass.iter().enumerate() {
            t.push(i, i, m * mass_scale);
        }
        if let Some(k) = &self.visc {
            t.add_block(k, 0, 0, cv);
        }
        if let Some(k) = &self.elast {
            t.add_block(k, 0, 0, ce);
        }
        t.add_block_transpose(&self.div, 0, nv, -vol);
        t.add_block(&self.div, nv, 0, -vol);
        for p in 0..np {
            t.push(nv + p, nv + np, vol);
            t.push(nv + np, nv + p, vol);
        }
        LinearSolver::new(t.to_csr(), *opts)
    }

    fn split(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let nv = self.nv();
        (x[..nv].to_vec(), x[nv..nv + self.cells.len()].to_vec())
    }

    fn padded(&self, v: Vec<f64>) -> Vec<f64> {
        let mut b = v;
        b.resize(self.nv() + self.cells.len() + 1, 0.0);
        b
    }

    fn mean(&self, u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.grid.dim];
        for (d, &f) in self.dofs.from_dof.iter().enumerate() {
            out[self.grid.face_axis(f)] += u[d];
        }
        out.iter().map(|v| v * self.grid.vol()).collect()
    }

    fn quad(k: &Option<Csr>, u: &[f64]) -> f64 {
        k.as_ref()
            .map(|k| k.matvec(u).iter().zip(u).map(|(a, b)| a * b).sum())
            .unwrap_or(0.0)
    }

    fn energy(&self, w: &[f64], u: &[f64]) -> f64 {
        let kin: f64 = self.mass.iter().zip(u).map(|(m, v)| m * v * v).sum();
        0.5 * kin + 0.5 * Self::quad(&self.elast, w)
    }

    fn scatter_cells(&self, r: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.grid.ncells()];
        for (k, &c) in self.cells.iter().enumerate() {
            out[c] = r[k];
        }
        out
    }

    fn project(&self, u0: &[f64], opts: &SolverOptions) -> Result<Vec<f64>> {
        let s = self.saddle(1.0, 0.0, 0.0, opts)?;
        let b: Vec<f64> = self.mass.iter().zip(u0).map(|(m, u)| m * u).collect();
        let (x, _) = s.solve(&self.padded(b))?;
        Ok(self.split(&x).0)
    }

    /// Runs from projected initial rate `u0`. `midpoint` selects the
    /// energy-conserving scheme; otherwise backward Euler on U alone.
    fn run(&self, i: usize, u0: &[f64], tg: &TimeGrid, midpoint: bool, opts: &SolverOptions) -> Result<KernelRun> {
        let dt = tg.dt;
        let nf = self.grid.nfaces();
        let initial_mean_rate = self.mean(u0);
        let mut u = self.project(u0, opts)?;
        let mut w = vec![0.0; self.nv()];
        let (cv, ce) = if midpoint { (0.5, 0.25 * dt) } else { (1.0, 0.0) };
        let solver = self.saddle(1.0 / dt, cv, ce, opts)?;
        let mut run = KernelRun {
            i,
            mean_rate: vec![self.mean(&u)],
            initial_mean_rate,
            energy: vec![self.energy(&w, &u)],
            dissipated: vec![0.0],
            w: Vec::new(),
            u: Vec::new(),
            r: Vec::new(),
        };
        if tg.store_fields {
            run.w.push(self.dofs.scatter(&w, nf));
            run.u.push(self.dofs.scatter(&u, nf));
            run.r.push(vec![0.0; self.grid.ncells()]);
        }
        let mut dissipated = 0.0;
        for _ in 0..tg.steps {
            let mut b: Vec<f64> = self.mass.iter().zip(&u).map(|(m, v)| m * v / dt).collect();
            if midpoint {
                if let Some(k) = &self.visc {
                    for (bi, ki) in b.iter_mut().zip(k.matvec(&u)) {
                        *bi -= 0.5 * ki;
                    }
                }
                if let Some(k) = &self.elast {
                    let ku = k.matvec(&u);
                    let kw = k.matvec(&w);
                    for ((bi, a), c) in b.iter_mut().zip(ku).zip(kw) {
                        *bi -= 0.25 * dt * a + c;
                    }
                }
            }
            let (x, _) = solver.solve(&self.padded(b))?;
            let (un, r) = self.split(&x);
            if midpoint {
                let avg: Vec<f64> = u.iter().zip(&un).map(|(a, b)| 0.5 * (a + b)).collect();
                for (wi, a) in w.iter_mut().zip(&avg) {
                    *wi += dt * a;
                }
                dissipated += dt * Self::quad(&self.visc, &avg);
            } else {
                for (wi, a) in w.iter_mut().zip(&un) {
                    *wi += dt * a;
                }
                dissipated += dt * Self::quad(&self.visc, &un);
            }
            u = un;
            run.mean_rate.push(self.mean(&u));
            run.energy.push(self.energy(&w, &u));
            run.dissipated.push(dissipated);
            if tg.store_fields {
                run.w.push(self.dofs.scatter(&w, nf));
                run.u.push(self.dofs.scatter(&u, nf));
                run.r.push(self.scatter_cells(&r));
            }
        }
        Ok(run)
    }
}

fn unit_on_axis(grid: &StaggeredGrid, dofs: &DofMap, i: usize, value: impl Fn(usize) -> f64) -> Vec<f64> {
    dofs.from_dof
        .iter()
        .map(|&f| if grid.face_axis(f) == i { value(f) } else { 0.0 })
        .collect()
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v.is_finite()) {
        return Err(Error::ConstraintViolation(format!("{name} must be positive and finite, got {v}")));
    }
    Ok(())
}

fn check_nonnegative(name: &str, v: f64) -> Result<()> {
    if !(v >= 0.0 && v.is_finite()) {
        return Err(Error::ConstraintViolation(format!("{name} must be finite and ≥ 0, got {v}")));
    }
    Ok(())
}

fn phase_problem(cell: &CellGeometry, phase: super::Phase, rho: f64, coef: f64) -> Result<Dynamics> {
    let grid = cell.grid();
    let dofs = DofMap::from_mask(&interior_faces(&grid, &cell.chi, phase));
    let cells: Vec<usize> = (0..grid.ncells())
        .filter(|&c| cell.chi[c] == phase.indicator())
        .collect();
    let lap = component_gradient_gram(&grid, &dofs);
    let scaled = Csr {
        data: lap.data.iter().map(|v| v * coef).collect(),
        ..lap
    };
    let mass = vec![rho * grid.vol(); dofs.len()];
    Dynamics::new(grid, dofs, cells, mass, None, Some(scaled))
}

/// ρ_s ∂²W − λ₁ΔW + ∇R = 0, div W = 0 in the solid, W = 0 on the
/// interface, ρ_s ∂W/∂t(0) = e_i. Implicit midpoint rule.
pub fn solve_solid_kernel(
    cell: &CellGeometry,
    rho_s: f64,
    lambda1: f64,
    tg: &TimeGrid,
    opts: &SolverOptions,
) -> Result<KernelHistory> {
    tg.check()?;
    check_positive("ρ_s", rho_s)?;
    check_nonnegative("λ₁", lambda1)?;
    let dynamics = phase_problem(cell, super::Phase::Solid, rho_s, lambda1)?;
    let mut runs = Vec::new();
    for i in 0..cell.dim {
        let u0 = unit_on_axis(&dynamics.grid, &dynamics.dofs, i, |_| 1.0 / rho_s);
        runs.push(dynamics.run(i, &u0, tg, true, opts)?);
    }
    Ok(KernelHistory {
        problem: "solid_kernel".into(),
        dim: cell.dim,
        dt: tg.dt,
        runs,
    })
}

/// ρ_f ∂V/∂t − μ₁ΔV + ∇R = 0, div V = 0 in the fluid, V = 0 on the
/// interface, ρ_f V(0) = e_i. Backward Euler.
pub fn solve_fluid_kernel(
    cell: &CellGeometry,
    rho_f: f64,
    mu1: f64,
    tg: &TimeGrid,
    opts: &SolverOptions,
) -> Result<KernelHistory> {
    tg.check()?;
    check_positive("ρ_f", rho_f)?;
    check_nonnegative("μ₁", mu1)?;
    let d = phase_problem(cell, super::Phase::Fluid, rho_f, mu1)?;
    // the Laplacian is viscous here
    let dynamics = Dynamics {
        visc: d.elast,
        elast: None,
        ..d
    };
    let mut runs = Vec::new();
    for i in 0..cell.dim {
        let u0 = unit_on_axis(&dynamics.grid, &dynamics.dofs, i, |_| 1.0 / rho_f);
        runs.push(dynamics.run(i, &u0, tg, false, opts)?);
    }
    Ok(KernelHistory {
        problem: "fluid_kernel".into(),
        dim: cell.dim,
        dt: tg.dt,
        runs,
    })
}

/// ρ̃ ∂²W = div{μ₁χD(∂W) + λ₁(1−χ)D(W) − R I}, div W = 0 on the whole
/// cell, with initial rate set by `forcing`. Implicit midpoint rule.
#[allow(clippy::too_many_arguments)]
pub fn solve_two_phase_kernel(
    cell: &CellGeometry,
    rho_f: f64,
    rho_s: f64,
    mu1: f64,
    lambda1: f64,
    forcing: TwoPhaseForcing,
    tg: &TimeGrid,
    opts: &SolverOptions,
) -> Result<KernelHistory> {
    tg.check()?;
    check_positive("ρ_f", rho_f)?;
    check_positive("ρ_s", rho_s)?;
    check_nonnegative("μ₁", mu1)?;
    check_nonnegative("λ₁", lambda1)?;
    if forcing == TwoPhaseForcing::Pressure && cell.m >= 1.0 {
        return Err(Error::ConstraintViolation(
            "pressure forcing needs a solid phase (m < 1)".into(),
        ));
    }
    let grid = cell.grid();
    let dofs = DofMap::all(grid.nfaces());
    let chi: Vec<f64> = cell.chi.iter().map(|&c| c as f64).collect();
    let rho_cell: Vec<f64> = chi.iter().map(|&c| rho_f * c + rho_s * (1.0 - c)).collect();
    let rho_face: Vec<f64> = (0..grid.nfaces())
        .map(|f| {
            let (lo, hi) = grid.face_cells(f);
            0.5 * (rho_cell[lo.unwrap()] + rho_cell[hi.unwrap()])
        })
        .collect();
    let scaled = |w: Vec<f64>, s: f64| -> Option<Csr> {
        if s == 0.0 {
            return None;
        }
        let g = WeightedStrain::new(&grid, &w, None).gram(&dofs);
        Some(Csr {
            data: g.data.iter().map(|v| v * s).collect(),
            ..g
        })
    };
    let visc = scaled(chi.clone(), mu1);
    let elast = scaled(chi.iter().map(|c| 1.0 - c).collect(), lambda1);
    let mass: Vec<f64> = rho_face.iter().map(|r| r * grid.vol()).collect();
    let cells: Vec<usize> = (0..grid.ncells()).collect();
    let dynamics = Dynamics::new(grid.clone(), dofs, cells, mass, visc, elast)?;
    let m = cell.m;
    let mut runs = Vec::new();
    for i in 0..cell.dim {
        let u0 = match forcing {
            TwoPhaseForcing::Pressure => {
                unit_on_axis(&grid, &dynamics.dofs, i, |f| -1.0 / ((1.0 - m) * rho_face[f]))
            }
            TwoPhaseForcing::Force => unit_on_axis(&grid, &dynamics.dofs, i, |_| 1.0),
        };
        runs.push(dynamics.run(i, &u0, tg, true, opts)?);
    }
    let problem = match forcing {
        TwoPhaseForcing::Pressure => "two_phase_pressure",
        TwoPhaseForcing::Force => "two_phase_force",
    };
    Ok(KernelHistory {
        problem: problem.into(),
        dim: cell.dim,
        dt: tg.dt,
        runs,
    })
}
