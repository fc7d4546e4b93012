//! Neumann problems for the Laplacian in one phase of the cell:
//! ΔR_i = 0 in the phase, ∂R_i/∂n = n·e_i on the interface, periodic.

use serde::{Deserialize, Serialize};

use super::Phase;
use crate::error::{Error, Result};
use crate::geometry::CellGeometry;
use crate::sparse::{LinearSolver, SolverOptions, Triplets};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeumannSolution {
    pub phase: Phase,
    /// R_i on cells (zero outside the phase), one field per direction i.
    pub r: Vec<Vec<f64>>,
    /// B[a][i] = ⟨∂_a R_i⟩ over the phase.
    pub mean_grad: Vec<Vec<f64>>,
    /// Largest |Σ_γ n_i dS|.
    pub compatibility: f64,
    pub residual: f64,
}

/// Discrete Neumann problem; interface faces carry ∂R/∂n = n·e_i with half weight.
pub fn solve_neumann_laplace(cell: &CellGeometry, phase: Phase, opts: &SolverOptions) -> Result<NeumannSolution> {
    let grid = cell.grid();
    let p = phase.indicator();
    let d = cell.dim;
    let h = grid.h;
    let vol = grid.vol();
    let cells: Vec<usize> = (0..grid.ncells()).filter(|&c| cell.chi[c] == p).collect();
    if cells.is_empty() {
        return Err(Error::SingularSystem(format!("{phase:?} phase is empty")));
    }
    let mut idx = vec![usize::MAX; grid.ncells()];
    for (k, &c) in cells.iter().enumerate() {
        idx[c] = k;
    }
    // same-phase faces: (face, lower unknown, upper unknown, axis)
    let mut inner = Vec::new();
    let mut iface_count = vec![0usize; d];
    let mut normal_sum = vec![0i64; d];
    for f in 0..grid.nfaces() {
        let (a, _) = grid.face_coords(f);
        let (lo, hi) = grid.face_cells(f);
        let (lo, hi) = (lo.unwrap(), hi.unwrap());
        match (cell.chi[lo] == p, cell.chi[hi] == p) {
            (true, true) => inner.push((idx[lo], idx[hi], a)),
            (true, false) => {
                iface_count[a] += 1;
                normal_sum[a] += 1;
            }
            (false, true) => {
                iface_count[a] += 1;
                normal_sum[a] -= 1;
            }
            (false, false) => {}
        }
    }
    let nu = cells.len();
    let n = nu + 1;
    let mut t = Triplets::new(n, n);
    let s = vol / (h * h);
    for &(lo, hi, _) in &inner {
        t.push(lo, lo, s);
        t.push(hi, hi, s);
        t.push(lo, hi, -s);
        t.push(hi, lo, -s);
    }
    for k in 0..nu {
        t.push(k, nu, vol);
        t.push(nu, k, vol);
    }
    let solver = LinearSolver::new(t.to_csr(), *opts)?;
    let mut r = Vec::with_capacity(d);
    let mut mean_grad = vec![vec![0.0; d]; d];
    let mut residual = 0.0f64;
    for i in 0..d {
        let mut b = vec![0.0; n];
        for &(lo, hi, a) in &inner {
            if a == i {
                // ∫ ∂_i φ over the face control volume
                b[hi] += vol / h;
                b[lo] -= vol / h;
            }
        }
        let (x, res) = solver.solve(&b)?;
        residual = residual.max(res);
        let mut full = vec![0.0; grid.ncells()];
        for (k, &c) in cells.iter().enumerate() {
            full[c] = x[k];
        }
        for &(lo, hi, a) in &inner {
            mean_grad[a][i] += (x[hi] - x[lo]) / h * vol;
        }
        mean_grad[i][i] += 0.5 * iface_count[i] as f64 * vol;
        r.push(full);
    }
    let compatibility = normal_sum
        .iter()
        .map(|&s| (s as f64).abs() * vol / h)
        .fold(0.0, f64::max);
    Ok(NeumannSolution {
        phase,
        r,
        mean_grad,
        compatibility,
        residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_cell, GeometrySpec};

    #[test]
    fn full_phase_gives_constant() {
        let c = build_cell(&GeometrySpec::FullSolid { dim: 2, n: 8 }).unwrap();
        let s = solve_neumann_laplace(&c, Phase::Solid, &Default::default()).unwrap();
        assert!(s.r.iter().flatten().all(|v| v.abs() < 1e-12));
        assert!(s.mean_grad.iter().flatten().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn compatibility_and_symmetry_on_cross() {
        let c = build_cell(&GeometrySpec::Cross { dim: 2, n: 16, width: 0.25 }).unwrap();
        for phase in [Phase::Solid, Phase::Fluid] {
            let s = solve_neumann_laplace(&c, phase, &Default::default()).unwrap();
            assert!(s.compatibility < 1e-12);
            assert!((s.mean_grad[0][1] - s.mean_grad[1][0]).abs() < 1e-12);
            assert!(s.mean_grad[0][1].abs() < 1e-12);
            assert!((s.mean_grad[0][0] - s.mean_grad[1][1]).abs() < 1e-12);
        }
    }

    #[test]
    fn isolated_pores_block_all_flux() {
        // the fluid squares of the cross are closed, so R_i = y_i inside each pore
        let c = build_cell(&GeometrySpec::Cross { dim: 2, n: 16, width: 0.25 }).unwrap();
        let s = solve_neumann_laplace(&c, Phase::Fluid, &Default::default()).unwrap();
        assert!((s.mean_grad[0][0] - c.m).abs() < 1e-12);
    }
}
