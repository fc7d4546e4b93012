//! Steady Stokes-type cell problems and the pressure-memory problem.
//!
//! Velocities live on faces touching at least one fluid cell; the interface
//! is traction-free (natural condition of the weak form over Y with χ).
//! Incompressible closures use a pressure multiplier on fluid cells,
//! compressible ones substitute the pressure closure into a penalty term.
//! The mean velocity over Y_f is pinned by d multipliers.

use serde::{Deserialize, Serialize};

use super::strain::WeightedStrain;
use super::{face_integral, face_phase_weights, Phase};
use crate::error::{Error, Result};
use crate::geometry::CellGeometry;
use crate::grid::{apply_row, DofMap, Row, StaggeredGrid};
use crate::params::ExtendedParam;
use crate::sparse::{Csr, LinearSolver, SolverOptions, Triplets};

/// Right-hand side of a steady cell problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StokesRhs {
    /// unit macroscopic strain J^{ij}
    Strain(usize, usize),
    /// unit solid pressure π
    Pressure,
    /// unit macroscopic dilatation
    Divergence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StokesCellSolution {
    pub rhs: StokesRhs,
    /// Face velocities (periodic face indexing), zero off the fluid support.
    pub v: Vec<f64>,
    /// Cell pressures, zero on solid cells.
    pub q: Vec<f64>,
    pub residual_momentum: f64,
    pub residual_mass: f64,
    /// Largest |⟨V_a⟩_{Y_f}|.
    pub normalization_check: f64,
    /// ⟨D(V)⟩_{Y_f} with the solver's own quadrature.
    pub mean_strain: Vec<Vec<f64>>,
    /// ⟨div V⟩_{Y_f}.
    pub mean_div: f64,
}

/// Discrete operators of the fluid part of a cell.
pub(crate) struct FluidOperators {
    pub grid: StaggeredGrid,
    pub dofs: DofMap,
    pub strain: WeightedStrain,
    /// Gram matrix of ∫χ D:D on the dofs (includes h^d).
    pub k: Csr,
    pub fluid_cells: Vec<usize>,
    /// Divergence rows of fluid cells, restricted to dofs.
    pub div: Csr,
    pub face_weight: Vec<f64>,
    pub has_interface: bool,
    /// Zero-mean rigid-rotation rows for a pore that does not wind around the torus.
    pub rotation_rows: Vec<Row>,
}

impl FluidOperators {
    pub fn new(cell: &CellGeometry) -> Result<Self> {
        if cell.fluid_count() == 0 {
            return Err(Error::SingularSystem("fluid phase is empty".into()));
        }
        let pc = cell.phase_connectivity(1);
        if !pc.connected {
            return Err(Error::SingularSystem("fluid phase is disconnected".into()));
        }
        let grid = cell.grid();
        let active: Vec<bool> = (0..grid.nfaces())
            .map(|f| {
                let (lo, hi) = grid.face_cells(f);
                cell.is_fluid(lo.unwrap()) || cell.is_fluid(hi.unwrap())
            })
            .collect();
        let dofs = DofMap::from_mask(&active);
        let w: Vec<f64> = cell.chi.iter().map(|&c| c as f64).collect();
        let strain = WeightedStrain::new(&grid, &w, Some(&dofs));
        let k = strain.gram(&dofs);
        let fluid_cells: Vec<usize> = (0..grid.ncells()).filter(|&c| cell.is_fluid(c)).collect();
        let rows: Vec<Row> = fluid_cells
            .iter()
            .map(|&c| dofs.restrict_row(&grid.div_row(c)))
            .collect();
        let div = Csr::from_rows(dofs.len(), &rows);
        let face_weight = face_phase_weights(&grid, &cell.chi, Phase::Fluid);
        let rotation_rows = rotation_rows(cell, &grid, &dofs, &face_weight);
        Ok(FluidOperators {
            grid,
            dofs,
            strain,
            k,
            fluid_cells,
            div,
            face_weight,
            has_interface: !cell.interface_faces.is_empty(),
            rotation_rows,
        })
    }

    fn nv(&self) -> usize {
        self.dofs.len()
    }

    /// Σ_fluid (div φ) h^d as a dof vector.
    fn div_sum_load(&self) -> Vec<f64> {
        let ones = vec![self.grid.vol(); self.fluid_cells.len()];
        self.div.matvec_transpose(&ones)
    }

    /// Mean-velocity constraint rows (one per axis), including h^d.
    fn mean_rows(&self) -> Vec<Row> {
        (0..self.grid.dim)
            .map(|a| {
                self.grid
                    .faces_of_axis(a)
                    .filter_map(|f| {
                        self.dofs.to_dof[f].map(|d| (d, self.face_weight[f] * self.grid.vol()))
                    })
                    .filter(|e| e.1 != 0.0)
                    .collect()
            })
            .collect()
    }

    /// Solves κK V + pen·h^d DᵀD V − h^d Dᵀ Q + Cᵀλ = f,
    /// with D V = g (if `incompressible`) and C V = 0.
    fn solve(
        &self,
        kappa: f64,
        penalty: f64,
        incompressible: bool,
        f: &[f64],
        g: &[f64],
        opts: &SolverOptions,
    ) -> Result<(Vec<f64>, Vec<f64>, f64, f64)> {
        let nv = self.nv();
        let nq = if incompressible { self.fluid_cells.len() } else { 0 };
        let gauge = incompressible && !self.has_interface;
        let d = self.grid.dim;
        let nr = self.rotation_rows.len();
        let n = nv + nq + d + usize::from(gauge) + nr;
        let vol = self.grid.vol();
        let mut t = Triplets::new(n, n);
        t.add_block(&self.k, 0, 0, kappa);
        if penalty != 0.0 {
            let dt = self.div.transpose();
            let mut p = Triplets::new(nv, nv);
            for i in 0..nv {
                for (c, vc) in dt.row(i) {
                    for (j, vj) in self.div.row(c) {
                        p.push(i, j, vc * vj);
                    }
                }
            }
            t.add_block(&p.to_csr(), 0, 0, penalty * vol);
        }
        if incompressible {
            t.add_block_transpose(&self.div, 0, nv, -vol);
            t.add_block(&self.div, nv, 0, -vol);
            if gauge {
                for c in 0..nq {
                    t.push(nv + c, nv + nq + d, vol);
                    t.push(nv + nq + d, nv + c, vol);
                }
            }
        }
        for (a, row) in self.mean_rows().into_iter().enumerate() {
            for (j, v) in row {
                t.push(nv + nq + a, j, v);
                t.push(j, nv + nq + a, v);
            }
        }
        let r0 = n - nr;
        for (k, row) in self.rotation_rows.iter().enumerate() {
            for &(j, v) in row {
                t.push(r0 + k, j, v);
                t.push(j, r0 + k, v);
            }
        }
        let mut b = vec![0.0; n];
        b[..nv].copy_from_slice(f);
        if incompressible {
            for (c, gc) in g.iter().enumerate() {
                b[nv + c] = -vol * gc;
            }
        }
        let solver = LinearSolver::new(t.to_csr(), *opts)?;
        let (x, _) = solver.solve(&b)?;
        let ax = solver.matrix().matvec(&x);
        let bnorm = b.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
        let res = |r: std::ops::Range<usize>| {
            r.map(|i| (ax[i] - b[i]).powi(2)).sum::<f64>().sqrt() / bnorm
        };
        let rm = res(0..nv);
        let rc = res(nv..n);
        Ok((x[..nv].to_vec(), x[nv..nv + nq].to_vec(), rm, rc))
    }

    fn finish(&self, rhs: StokesRhs, v_dofs: &[f64], q_fluid: Vec<f64>, rm: f64, rc: f64) -> StokesCellSolution {
        let v = self.dofs.scatter(v_dofs, self.grid.nfaces());
        let mut q = vec![0.0; self.grid.ncells()];
        for (i, &c) in self.fluid_cells.iter().enumerate() {
            q[c] = q_fluid[i];
        }
        let normalization_check = (0..self.grid.dim)
            .map(|a| face_integral(&self.grid, &v, &self.face_weight, a).abs())
            .fold(0.0, f64::max);
        StokesCellSolution {
            rhs,
            mean_strain: self.strain.mean_strain(self.grid.dim, &v),
            mean_div: self.mean_div(&v),
            v,
            q,
            residual_momentum: rm,
            residual_mass: rc,
            normalization_check,
        }
    }

    pub fn div_fluid(&self, v: &[f64]) -> Vec<f64> {
        self.fluid_cells
            .iter()
            .map(|&c| apply_row(&self.grid.div_row(c), v))
            .collect()
    }

    pub fn mean_div(&self, v: &[f64]) -> f64 {
        self.div_fluid(v).iter().sum::<f64>() * self.grid.vol()
    }
}

/// Rows of ⟨y_a V_b − y_b V_a⟩ about the pore centroid, one per plane (a, b).
fn rotation_rows(cell: &CellGeometry, grid: &StaggeredGrid, dofs: &DofMap, weight: &[f64]) -> Vec<Row> {
    let Some(lift) = cell.bounded_lift(1) else {
        return Vec::new();
    };
    let d = cell.dim;
    let pts: Vec<[f64; 3]> = lift.iter().flatten().copied().collect();
    let mut centre = [0.0; 3];
    for p in &pts {
        for k in 0..d {
            centre[k] += p[k] / pts.len() as f64;
        }
    }
    let pos = |f: usize| -> [f64; 3] {
        let (a, _) = grid.face_coords(f);
        let (lo, hi) = grid.face_cells(f);
        let (lo, hi) = (lo.unwrap(), hi.unwrap());
        let (c, sign) = if cell.is_fluid(hi) { (hi, -1.0) } else { (lo, 1.0) };
        let mut x = lift[c].expect("face touches the fluid");
        x[a] += sign * 0.5 * grid.h;
        for k in 0..d {
            x[k] -= centre[k];
        }
        x
    };
    crate::grid::shear_pairs(d)
        .into_iter()
        .map(|(a, b)| {
            dofs.from_dof
                .iter()
                .enumerate()
                .filter_map(|(j, &f)| {
                    let axis = grid.face_axis(f);
                    let x = pos(f);
                    let v = if axis == b {
                        x[a]
                    } else if axis == a {
                        -x[b]
                    } else {
                        return None;
                    };
                    Some((j, v * weight[f] * grid.vol()))
                })
                .collect()
        })
        .collect()
}

fn check_mu0(mu0: f64) -> Result<()> {
    if !(mu0 > 0.0 && mu0.is_finite()) {
        return Err(Error::ConstraintViolation(format!(
            "cell Stokes problems need 0 < μ₀ < ∞, got {mu0}"
        )));
    }
    Ok(())
}

/// Steady Stokes cell problem with default solver options.
pub fn solve_stokes_cell(
    cell: &CellGeometry,
    rhs: StokesRhs,
    mu0: f64,
    nu0: ExtendedParam,
    p_star: ExtendedParam,
) -> Result<StokesCellSolution> {
    solve_stokes_cell_with(cell, rhs, mu0, nu0, p_star, &SolverOptions::default())
}

pub fn solve_stokes_cell_with(
    cell: &CellGeometry,
    rhs: StokesRhs,
    mu0: f64,
    nu0: ExtendedParam,
    p_star: ExtendedParam,
    opts: &SolverOptions,
) -> Result<StokesCellSolution> {
    check_mu0(mu0)?;
    let nu0 = nu0
        .value()
        .ok_or_else(|| Error::ConstraintViolation("ν₀ must be finite".into()))?;
    let ops = FluidOperators::new(cell)?;
    let incompressible = p_star.is_infinite();
    let nf = ops.fluid_cells.len();
    let (kappa, penalty, f, g) = match rhs {
        StokesRhs::Strain(i, j) => {
            if i >= cell.dim || j >= cell.dim {
                return Err(Error::Config(format!("strain index ({i},{j}) out of range")));
            }
            let load: Vec<f64> = ops.strain.strain_load(&ops.dofs, i, j).iter().map(|v| -v).collect();
            let pen = if incompressible { 0.0 } else { nu0 / mu0 };
            (1.0, pen, load, vec![0.0; nf])
        }
        StokesRhs::Pressure => {
            let s = if cell.m < 1.0 { 1.0 / (1.0 - cell.m) } else { 0.0 };
            let load: Vec<f64> = ops.div_sum_load().iter().map(|v| -s * v).collect();
            let pen = if incompressible { 0.0 } else { nu0 };
            (mu0, pen, load, vec![0.0; nf])
        }
        StokesRhs::Divergence => {
            if incompressible {
                if !ops.has_interface {
                    return Err(Error::SingularSystem(
                        "div V = −1 has no periodic solution without an interface".into(),
                    ));
                }
                (mu0, 0.0, vec![0.0; ops.nv()], vec![-1.0; nf])
            } else {
                let load: Vec<f64> = ops.div_sum_load().iter().map(|v| -nu0 * v).collect();
                (mu0, nu0, load, vec![0.0; nf])
            }
        }
    };
    let (v, q_mult, rm, rc) = ops.solve(kappa, penalty, incompressible, &f, &g, opts)?;
    let q = if incompressible {
        q_mult
    } else {
        let full = ops.dofs.scatter(&v, ops.grid.nfaces());
        let div = ops.div_fluid(&full);
        match rhs {
            StokesRhs::Strain(..) => div.iter().map(|d| -nu0 / mu0 * d).collect(),
            StokesRhs::Pressure => div.iter().map(|d| -nu0 * d).collect(),
            StokesRhs::Divergence => div.iter().map(|d| -nu0 * (d + 1.0)).collect(),
        }
    };
    Ok(ops.finish(rhs, &v, q, rm, rc))
}

/// Time history of the pressure-memory cell problem on t_k = k·dt, k = 0..=N.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryCellSolution {
    pub dt: f64,
    pub v: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
    pub p: Vec<Vec<f64>>,
    /// ⟨D(V(t_k))⟩_{Y_f}
    pub mean_strain: Vec<Vec<Vec<f64>>>,
    /// ⟨div V(t_k)⟩_{Y_f}
    pub mean_div: Vec<f64>,
    /// Exact zero object for p★ = ∞.
    pub identically_zero: bool,
}

/// Backward-Euler solution of the pressure-memory problem.
pub fn solve_stokes_memory_cell(
    cell: &CellGeometry,
    mu0: f64,
    nu0: ExtendedParam,
    p_star: ExtendedParam,
    dt: f64,
    steps: usize,
    opts: &SolverOptions,
) -> Result<MemoryCellSolution> {
    check_mu0(mu0)?;
    let grid = cell.grid();
    let (nf, nc, d) = (grid.nfaces(), grid.ncells(), cell.dim);
    let ps = match p_star {
        ExtendedParam::Infinity => {
            return Ok(MemoryCellSolution {
                dt,
                v: vec![vec![0.0; nf]; steps + 1],
                q: vec![vec![0.0; nc]; steps + 1],
                p: vec![vec![0.0; nc]; steps + 1],
                mean_strain: vec![vec![vec![0.0; d]; d]; steps + 1],
                mean_div: vec![0.0; steps + 1],
                identically_zero: true,
            })
        }
        ExtendedParam::Finite(x) => x,
    };
    let nu0 = nu0
        .value()
        .ok_or_else(|| Error::ConstraintViolation("ν₀ must be finite".into()))?;
    if !(dt > 0.0) {
        return Err(Error::Config("time step must be positive".into()));
    }
    let ops = FluidOperators::new(cell)?;
    let vol = grid.vol();
    let nfl = ops.fluid_cells.len();
    let mut p_fl = vec![ps; nfl];
    let mut out = MemoryCellSolution {
        dt,
        v: Vec::with_capacity(steps + 1),
        q: Vec::with_capacity(steps + 1),
        p: Vec::with_capacity(steps + 1),
        mean_strain: Vec::with_capacity(steps + 1),
        mean_div: Vec::with_capacity(steps + 1),
        identically_zero: false,
    };
    let record = |out: &mut MemoryCellSolution, v_dofs: &[f64], p_fl: &[f64]| {
        let v = ops.dofs.scatter(v_dofs, nf);
        let div = ops.div_fluid(&v);
        let mut p = vec![0.0; nc];
        let mut q = vec![0.0; nc];
        for (i, &c) in ops.fluid_cells.iter().enumerate() {
            p[c] = p_fl[i];
            q[c] = p_fl[i] - nu0 * div[i];
        }
        out.mean_strain.push(ops.strain.mean_strain(d, &v));
        out.mean_div.push(div.iter().sum::<f64>() * vol);
        out.v.push(v);
        out.q.push(q);
        out.p.push(p);
        div
    };
    // t = 0: quasi-static response to P = p★
    let load = |p: &[f64]| -> Vec<f64> {
        let pv: Vec<f64> = p.iter().map(|x| x * vol).collect();
        ops.div.matvec_transpose(&pv)
    };
    let (v0, _, _, _) = ops.solve(mu0, nu0, false, &load(&p_fl), &[], opts)?;
    record(&mut out, &v0, &p_fl);
    // steps share one factorization
    let sys = build_penalty_system(&ops, mu0, nu0 + ps * dt)?;
    let solver = LinearSolver::new(sys, *opts)?;
    for _ in 0..steps {
        let mut b = load(&p_fl);
        b.extend(std::iter::repeat(0.0).take(d + ops.rotation_rows.len()));
        let (x, _) = solver.solve(&b)?;
        let v_new = &x[..ops.nv()];
        let full = ops.dofs.scatter(v_new, nf);
        let div = ops.div_fluid(&full);
        for (pi, di) in p_fl.iter_mut().zip(&div) {
            *pi -= ps * dt * di;
        }
        record(&mut out, v_new, &p_fl);
    }
    Ok(out)
}

fn build_penalty_system(ops: &FluidOperators, kappa: f64, penalty: f64) -> Result<Csr> {
    let nv = ops.nv();
    let d = ops.grid.dim;
    let vol = ops.grid.vol();
    let nr = ops.rotation_rows.len();
    let mut t = Triplets::new(nv + d + nr, nv + d + nr);
    t.add_block(&ops.k, 0, 0, kappa);
    let dt = ops.div.transpose();
    for i in 0..nv {
        for (c, vc) in dt.row(i) {
            for (j, vj) in ops.div.row(c) {
                t.push(i, j, penalty * vol * vc * vj);
            }
        }
    }
    for (a, row) in ops.mean_rows().into_iter().enumerate() {
        for (j, v) in row {
            t.push(nv + a, j, v);
            t.push(j, nv + a, v);
        }
    }
    for (k, row) in ops.rotation_rows.iter().enumerate() {
        for &(j, v) in row {
            t.push(nv + d + k, j, v);
            t.push(j, nv + d + k, v);
        }
    }
    Ok(t.to_csr())
}
