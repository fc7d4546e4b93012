//! Discrete operators on the walled macroscopic grid over Ω = (0,1)^d.
//!
//! Face equations are written per unit volume. Faces normal to the
//! boundary carry no unknowns: their values are zero.

use crate::grid::{voigt_pairs, DofMap, Row, StaggeredGrid};
use crate::sparse::{Csr, Triplets};
use crate::tensors::{Matrix, SymRank4Tensor};

pub(crate) struct MacroOps {
    pub grid: StaggeredGrid,
    /// Faces that are not normal to the boundary.
    pub faces: DofMap,
    pub nc: usize,
    pub nf: usize,
    /// Divergence, cells × all faces.
    pub div: Csr,
    /// Gradient of cell fields, all faces × cells (rows on boundary faces unused).
    pub grad: Csr,
    /// interp[b]: b-component of a face field moved onto every face.
    pub interp: Vec<Csr>,
    pub axis: Vec<usize>,
}

impl MacroOps {
    pub fn new(dim: usize, n: usize) -> Self {
        let grid = StaggeredGrid::walled(dim, n);
        let nf = grid.nfaces();
        let nc = grid.ncells();
        let mask: Vec<bool> = (0..nf).map(|f| !grid.is_boundary_normal(f)).collect();
        let faces = DofMap::from_mask(&mask);
        let div = grid.div_matrix();
        let grad = {
            let mut t = Triplets::new(nf, nc);
            t.add_block_transpose(&div, 0, 0, -1.0);
            t.to_csr()
        };
        let axis: Vec<usize> = (0..nf).map(|f| grid.face_axis(f)).collect();
        let interp = (0..dim).map(|b| interpolation(&grid, &axis, b)).collect();
        MacroOps {
            grid,
            faces,
            nc,
            nf,
            div,
            grad,
            interp,
            axis,
        }
    }

    pub fn dim(&self) -> usize {
        self.grid.dim
    }

    pub fn nint(&self) -> usize {
        self.faces.len()
    }

    /// Components of a face field, each moved onto every face.
    pub fn split(&self, u: &[f64]) -> Vec<Vec<f64>> {
        self.interp.iter().map(|m| m.matvec(u)).collect()
    }

    /// (M u) on faces from split components.
    pub fn apply_split(&self, m: &Matrix, split: &[Vec<f64>]) -> Vec<f64> {
        (0..self.nf)
            .map(|f| {
                let a = self.axis[f];
                (0..self.dim()).map(|b| m[a][b] * split[b][f]).sum()
            })
            .collect()
    }

    /// Face field carrying component axis(f) of split components.
    pub fn merge(&self, split: &[Vec<f64>]) -> Vec<f64> {
        (0..self.nf).map(|f| split[self.axis[f]][f]).collect()
    }

    /// Sparse M·u on face fields: Σ_b M_{axis(f) b} interp_b.
    pub fn matrix_operator(&self, m: &Matrix) -> Csr {
        let mut t = Triplets::new(self.nf, self.nf);
        for f in 0..self.nf {
            let a = self.axis[f];
            for (b, ib) in self.interp.iter().enumerate() {
                let c = m[a][b];
                if c != 0.0 {
                    for (g, v) in ib.row(f) {
                        t.push(f, g, c * v);
                    }
                }
            }
        }
        t.to_csr()
    }

    /// Viscous form ∫ A:D(u):D(φ) per unit volume on all faces.
    ///
    /// Diagonal pairs use cell samples, equal shear pairs use edge samples,
    /// the remaining couplings use cell-centred shear.
    pub fn tensor_form(&self, a: &SymRank4Tensor) -> Csr {
        let g = &self.grid;
        let dim = g.dim;
        let pairs = voigt_pairs(dim);
        let mult = |(i, j): (usize, usize)| if i == j { 1.0 } else { 2.0 };
        let mut t = Triplets::new(self.nf, self.nf);
        let outer = |t: &mut Triplets, r1: &Row, r2: &Row, c: f64| {
            if c == 0.0 {
                return;
            }
            for &(i, vi) in r1 {
                for &(j, vj) in r2 {
                    t.push(i, j, c * vi * vj);
                }
            }
        };
        for cell in 0..g.ncells() {
            for (ii, &pi) in pairs.iter().enumerate() {
                for (jj, &pj) in pairs.iter().enumerate() {
                    let native = (pi.0 == pi.1 && pj.0 == pj.1) || ii == jj;
                    if native && !(pi.0 == pi.1 && pj.0 == pj.1) {
                        continue;
                    }
                    let c = mult(pi) * mult(pj) * a.packed[ii][jj];
                    let r1 = g.cell_strain_row(cell, pi.0, pi.1);
                    let r2 = g.cell_strain_row(cell, pj.0, pj.1);
                    outer(&mut t, &r1, &r2, c);
                }
            }
        }
        for (ii, &(p, q)) in pairs.iter().enumerate() {
            if p == q {
                continue;
            }
            let c = 4.0 * a.packed[ii][ii];
            for e in g.edges(p, q) {
                let r = g.shear_strain_row(e, p, q);
                outer(&mut t, &r, &r, c * g.edge_boundary_factor(e, p, q));
            }
        }
        t.to_csr()
    }

    /// Cell-by-face operator of M:D(u) for a constant matrix M.
    pub fn matrix_strain(&self, m: &Matrix) -> Csr {
        let g = &self.grid;
        let rows: Vec<Row> = (0..self.nc)
            .map(|c| {
                let mut row = Row::new();
                for a in 0..g.dim {
                    for b in 0..g.dim {
                        if m[a][b] != 0.0 {
                            for (f, v) in g.cell_strain_row(c, a, b) {
                                row.push((f, m[a][b] * v));
                            }
                        }
                    }
                }
                crate::grid::merge_row(row)
            })
            .collect();
        Csr::from_rows(self.nf, &rows)
    }

    /// Per-unit-volume face load of ∫ S:D(φ) for a cell field of matrices.
    pub fn stress_load(&self, s: &[Matrix]) -> Vec<f64> {
        let g = &self.grid;
        let mut out = vec![0.0; self.nf];
        for (c, m) in s.iter().enumerate() {
            for a in 0..g.dim {
                for b in 0..g.dim {
                    if m[a][b] != 0.0 {
                        for (f, v) in g.cell_strain_row(c, a, b) {
                            out[f] += m[a][b] * v;
                        }
                    }
                }
            }
        }
        out
    }

    /// Samples a vector function at face centres as split components.
    pub fn sample_split(&self, f: &dyn Fn([f64; 3]) -> [f64; 3]) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; self.nf]; self.dim()];
        for face in 0..self.nf {
            let v = f(self.grid.face_center(face));
            for (b, o) in out.iter_mut().enumerate() {
                o[face] = v[b];
            }
        }
        out
    }

    pub fn sample_cells(&self, f: &dyn Fn([f64; 3]) -> f64) -> Vec<f64> {
        (0..self.nc).map(|c| f(self.grid.cell_center(c))).collect()
    }

    /// Zeroes values on boundary-normal faces.
    pub fn mask_boundary(&self, u: &mut [f64]) {
        for (f, v) in u.iter_mut().enumerate() {
            if self.faces.to_dof[f].is_none() {
                *v = 0.0;
            }
        }
    }

    /// Largest |u| on boundary-normal faces.
    pub fn boundary_normal_max(&self, u: &[f64]) -> f64 {
        (0..self.nf)
            .filter(|&f| self.faces.to_dof[f].is_none())
            .fold(0.0, |m, f| m.max(u[f].abs()))
    }
}

/// Moves the b-component onto every face: identity on b-faces, the mean of
/// the four surrounding b-faces elsewhere.
fn interpolation(grid: &StaggeredGrid, axis: &[usize], b: usize) -> Csr {
    let rows: Vec<Row> = (0..grid.nfaces())
        .map(|f| {
            if axis[f] == b {
                return vec![(f, 1.0)];
            }
            let (lo, hi) = grid.face_cells(f);
            let mut row = Row::new();
            for c in [lo, hi].into_iter().flatten() {
                let cc = crate::grid::to_i64(grid.cell_coords(c));
                let mut up = cc;
                up[b] += 1;
                for pos in [cc, up] {
                    if let crate::grid::FaceRef::Face(g, s) = grid.face(b, pos) {
                        row.push((g, 0.25 * s));
                    }
                }
            }
            row
        })
        .collect();
    Csr::from_rows(grid.nfaces(), &rows)
}

/// Restricts a square all-face operator to the interior face unknowns.
pub(crate) fn restrict(op: &Csr, faces: &DofMap) -> Vec<Row> {
    faces
        .from_dof
        .iter()
        .map(|&f| op.row(f).filter_map(|(g, v)| faces.to_dof[g].map(|d| (d, v))).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_tensor_form_matches_strain_energy() {
        let ops = MacroOps::new(2, 5);
        let k = ops.tensor_form(&SymRank4Tensor::symmetric_identity(2));
        let u: Vec<f64> = (0..ops.nf)
            .map(|f| if ops.faces.to_dof[f].is_some() { (f as f64 * 0.7).sin() } else { 0.0 })
            .collect();
        let ku = k.matvec(&u);
        let e: f64 = ku.iter().zip(&u).map(|(a, b)| a * b).sum();
        let ws = crate::cell::strain::WeightedStrain::new(&ops.grid, &vec![1.0; ops.nc], None);
        assert!((e - ws.energy(&u) / ops.grid.vol()).abs() < 1e-10 * e.abs());
        assert!(k.asymmetry() < 1e-12);
    }

    #[test]
    fn interpolation_preserves_constants_inside() {
        let ops = MacroOps::new(2, 6);
        let u: Vec<f64> = (0..ops.nf).map(|f| if ops.axis[f] == 1 { 2.0 } else { 0.0 }).collect();
        let s = ops.split(&u);
        // x-faces away from the walls see the full y-component
        for f in ops.grid.faces_of_axis(0) {
            let x = ops.grid.face_center(f);
            if x[0] > 0.1 && x[0] < 0.9 {
                assert!((s[1][f] - 2.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradient_of_linear_field_is_exact() {
        let ops = MacroOps::new(3, 4);
        let p = ops.sample_cells(&|x| 2.0 * x[0] - x[2]);
        let g = ops.grad.matvec(&p);
        for &f in &ops.faces.from_dof {
            let want = [2.0, 0.0, -1.0][ops.axis[f]];
            assert!((g[f] - want).abs() < 1e-12);
        }
    }
}
