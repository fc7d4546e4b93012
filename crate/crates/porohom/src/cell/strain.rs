//! Weighted strain quadrature shared by every viscous/elastic operator.
//!
//! Energy ∫ w D(u):D(u) is approximated by diagonal strains at cell centres
//! and shear strains on edges, each weighted by the mean of a cell weight
//! over the cells touching the sample.

use crate::grid::{DofMap, Row, StaggeredGrid};
use crate::sparse::{Csr, Triplets};

/// One strain quadrature point.
#[derive(Debug, Clone, PartialEq)]
pub struct StrainSample {
    pub a: usize,
    pub b: usize,
    pub row: Row,
    pub cells: Vec<usize>,
    /// Control-volume fraction (½ per wall for edges on a walled grid).
    pub volume: f64,
}

impl StrainSample {
    /// Multiplicity of the component in D:D.
    pub fn mult(&self) -> f64 {
        if self.a == self.b {
            1.0
        } else {
            2.0
        }
    }

    /// Mean of a per-cell weight over the touching cells times the volume fraction.
    pub fn weight(&self, cell_weight: &[f64]) -> f64 {
        if self.cells.is_empty() {
            return 0.0;
        }
        let s: f64 = self.cells.iter().map(|&c| cell_weight[c]).sum();
        self.volume * s / self.cells.len() as f64
    }
}

/// All diagonal samples (cells) followed by shear samples (edges).
pub fn strain_samples(grid: &StaggeredGrid) -> Vec<StrainSample> {
    let mut out = Vec::new();
    for c in 0..grid.ncells() {
        for a in 0..grid.dim {
            out.push(StrainSample {
                a,
                b: a,
                row: grid.diag_strain_row(c, a),
                cells: vec![c],
                volume: 1.0,
            });
        }
    }
    for (a, b) in crate::grid::shear_pairs(grid.dim) {
        for e in grid.edges(a, b) {
            out.push(StrainSample {
                a,
                b,
                row: grid.shear_strain_row(e, a, b),
                cells: grid.edge_cells(e, a, b),
                volume: grid.edge_boundary_factor(e, a, b),
            });
        }
    }
    out
}

/// A strain quadrature restricted to unknowns with fixed weights.
#[derive(Debug, Clone)]
pub struct WeightedStrain {
    /// (sample, weight) pairs with positive weight.
    pub samples: Vec<(StrainSample, f64)>,
    pub vol: f64,
}

impl WeightedStrain {
    /// Keeps samples with positive weight. With `dofs`, shear
    /// samples touching a face outside `dofs` are dropped.
    pub fn new(
        grid: &StaggeredGrid,
        cell_weight: &[f64],
        dofs: Option<&DofMap>,
    ) -> WeightedStrain {
        let samples = strain_samples(grid)
            .into_iter()
            .filter_map(|s| {
                let w = s.weight(cell_weight);
                if w <= 0.0 {
                    return None;
                }
                if let Some(map) = dofs {
                    if s.a != s.b && s.row.iter().any(|&(f, _)| map.to_dof[f].is_none()) {
                        return None;
                    }
                }
                Some((s, w))
            })
            .collect();
        WeightedStrain {
            samples,
            vol: grid.vol(),
        }
    }

    /// Gram matrix Σ w·mult·rowᵀrow·h^d on the unknowns of `dofs`.
    pub fn gram(&self, dofs: &DofMap) -> Csr {
        let mut t = Triplets::new(dofs.len(), dofs.len());
        self.add_gram(dofs, &mut t, 0, 1.0);
        t.to_csr()
    }

    pub fn add_gram(&self, dofs: &DofMap, t: &mut Triplets, offset: usize, scale: f64) {
        for (s, w) in &self.samples {
            let r = dofs.restrict_row(&s.row);
            let c = scale * w * s.mult() * self.vol;
            for &(i, vi) in &r {
                for &(j, vj) in &r {
                    t.push(offset + i, offset + j, c * vi * vj);
                }
            }
        }
    }

    /// Energy Σ w·mult·(row·u)²·h^d of a full-face field.
    pub fn energy(&self, u: &[f64]) -> f64 {
        self.samples
            .iter()
            .map(|(s, w)| {
                let d = crate::grid::apply_row(&s.row, u);
                w * s.mult() * d * d
            })
            .sum::<f64>()
            * self.vol
    }

    /// Weighted average ⟨D(u)⟩ as a d×d matrix.
    pub fn mean_strain(&self, dim: usize, u: &[f64]) -> Vec<Vec<f64>> {
        let mut m = vec![vec![0.0; dim]; dim];
        for (s, w) in &self.samples {
            let d = crate::grid::apply_row(&s.row, u);
            m[s.a][s.b] += w * d * self.vol;
        }
        for a in 0..dim {
            for b in 0..a {
                m[a][b] = m[b][a];
            }
        }
        m
    }

    /// Load vector of φ ↦ ∫ w J^{ij}:D(φ) on the unknowns.
    pub fn strain_load(&self, dofs: &DofMap, i: usize, j: usize) -> Vec<f64> {
        let (i, j) = (i.min(j), i.max(j));
        let mut out = vec![0.0; dofs.len()];
        for (s, w) in &self.samples {
            if s.a == i && s.b == j {
                for (d, v) in dofs.restrict_row(&s.row) {
                    out[d] += w * v * self.vol;
                }
            }
        }
        out
    }
}
