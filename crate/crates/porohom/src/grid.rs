//! Uniform staggered (MAC) grids on the unit cube, periodic or walled.
//!
//! Cell `c` has its lower face along axis `a` stored at face index
//! `(a, c)`. On a walled grid the face coordinate along its own axis runs
//! over `0..=n`. Shear strains live on edges at the lower corner of a cell
//! in the `(a, b)` plane; on walled grids edge coordinates along `a` and
//! `b` run over `0..=n`.

/// A sparse row as (face index, coefficient) pairs.
pub type Row = Vec<(usize, f64)>;

/// Index pairs in Voigt order for the given dimension.
pub fn voigt_pairs(dim: usize) -> Vec<(usize, usize)> {
    match dim {
        2 => vec![(0, 0), (1, 1), (0, 1)],
        3 => vec![(0, 0), (1, 1), (2, 2), (1, 2), (0, 2), (0, 1)],
        _ => panic!("dimension must be 2 or 3"),
    }
}

/// Off-diagonal pairs (a < b) in Voigt order.
pub fn shear_pairs(dim: usize) -> Vec<(usize, usize)> {
    voigt_pairs(dim).into_iter().filter(|(a, b)| a != b).collect()
}

/// Position of a face value used in a stencil.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FaceRef {
    /// face index with a multiplicative factor (−1 for a mirrored ghost)
    Face(usize, f64),
    Zero,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StaggeredGrid {
    pub dim: usize,
    pub n: usize,
    pub periodic: bool,
    pub h: f64,
    face_offset: Vec<usize>,
    nfaces: usize,
}

impl StaggeredGrid {
    pub fn new(dim: usize, n: usize, periodic: bool) -> Self {
        assert!(dim == 2 || dim == 3, "dimension must be 2 or 3");
        assert!(n >= 1);
        let ncells = n.pow(dim as u32);
        let per_axis = if periodic {
            ncells
        } else {
            n.pow(dim as u32 - 1) * (n + 1)
        };
        let face_offset = (0..dim).map(|a| a * per_axis).collect();
        StaggeredGrid {
            dim,
            n,
            periodic,
            h: 1.0 / n as f64,
            face_offset,
            nfaces: dim * per_axis,
        }
    }

    pub fn periodic(dim: usize, n: usize) -> Self {
        Self::new(dim, n, true)
    }

    pub fn walled(dim: usize, n: usize) -> Self {
        Self::new(dim, n, false)
    }

    pub fn ncells(&self) -> usize {
        self.n.pow(self.dim as u32)
    }

    pub fn nfaces(&self) -> usize {
        self.nfaces
    }

    /// Cell volume h^d.
    pub fn vol(&self) -> f64 {
        self.h.powi(self.dim as i32)
    }

    pub fn cell_coords(&self, idx: usize) -> [usize; 3] {
        let mut c = [0usize; 3];
        let mut r = idx;
        for k in 0..self.dim {
            c[k] = r % self.n;
            r /= self.n;
        }
        c
    }

    /// Cell index; wraps on periodic grids, `None` outside a walled grid.
    pub fn cell(&self, c: [i64; 3]) -> Option<usize> {
        let n = self.n as i64;
        let mut idx = 0usize;
        let mut stride = 1usize;
        for &ck in c.iter().take(self.dim) {
            let ck = if self.periodic {
                ck.rem_euclid(n)
            } else if ck < 0 || ck >= n {
                return None;
            } else {
                ck
            };
            idx += ck as usize * stride;
            stride *= self.n;
        }
        Some(idx)
    }

    fn face_extent(&self, a: usize, k: usize) -> usize {
        if k == a && !self.periodic {
            self.n + 1
        } else {
            self.n
        }
    }

    /// Raw face index for in-range coordinates.
    fn face_raw(&self, a: usize, c: [usize; 3]) -> usize {
        let mut idx = 0usize;
        let mut stride = 1usize;
        for (k, &ck) in c.iter().enumerate().take(self.dim) {
            idx += ck * stride;
            stride *= self.face_extent(a, k);
        }
        self.face_offset[a] + idx
    }

    /// Axis and coordinates of a face index.
    pub fn face_coords(&self, f: usize) -> (usize, [usize; 3]) {
        let a = (0..self.dim).rev().find(|&a| f >= self.face_offset[a]).unwrap();
        let mut r = f - self.face_offset[a];
        let mut c = [0usize; 3];
        for (k, ck) in c.iter_mut().enumerate().take(self.dim) {
            let e = self.face_extent(a, k);
            *ck = r % e;
            r /= e;
        }
        (a, c)
    }

    pub fn face_axis(&self, f: usize) -> usize {
        self.face_coords(f).0
    }

    /// Face range of one axis.
    pub fn faces_of_axis(&self, a: usize) -> std::ops::Range<usize> {
        let end = if a + 1 < self.dim {
            self.face_offset[a + 1]
        } else {
            self.nfaces
        };
        self.face_offset[a]..end
    }

    /// Face reference at lower side of (possibly out-of-range) cell `c`
    /// along `a`. Walled grids mirror tangential out-of-range positions
    /// with factor −1 (zero tangential wall value).
    pub fn face(&self, a: usize, c: [i64; 3]) -> FaceRef {
        let n = self.n as i64;
        let mut cc = [0usize; 3];
        let mut factor = 1.0;
        for k in 0..self.dim {
            let ck = c[k];
            cc[k] = if self.periodic {
                ck.rem_euclid(n) as usize
            } else if k == a {
                if ck < 0 || ck > n {
                    return FaceRef::Zero;
                }
                ck as usize
            } else if ck < 0 {
                if ck < -1 {
                    return FaceRef::Zero;
                }
                factor = -factor;
                0
            } else if ck >= n {
                if ck > n {
                    return FaceRef::Zero;
                }
                factor = -factor;
                (n - 1) as usize
            } else {
                ck as usize
            };
        }
        FaceRef::Face(self.face_raw(a, cc), factor)
    }

    /// True for a walled-grid face whose normal crosses the boundary.
    pub fn is_boundary_normal(&self, f: usize) -> bool {
        if self.periodic {
            return false;
        }
        let (a, c) = self.face_coords(f);
        c[a] == 0 || c[a] == self.n
    }

    /// Physical position of a face centre.
    pub fn face_center(&self, f: usize) -> [f64; 3] {
        let (a, c) = self.face_coords(f);
        let mut x = [0.0; 3];
        for k in 0..self.dim {
            x[k] = if k == a {
                c[k] as f64 * self.h
            } else {
                (c[k] as f64 + 0.5) * self.h
            };
        }
        x
    }

    pub fn cell_center(&self, idx: usize) -> [f64; 3] {
        let c = self.cell_coords(idx);
        let mut x = [0.0; 3];
        for k in 0..self.dim {
            x[k] = (c[k] as f64 + 0.5) * self.h;
        }
        x
    }

    /// The two cells adjacent to a face (lower, upper); `None` outside a walled grid.
    pub fn face_cells(&self, f: usize) -> (Option<usize>, Option<usize>) {
        let (a, c) = self.face_coords(f);
        let mut lo = to_i64(c);
        let hi = lo;
        lo[a] -= 1;
        (self.cell(lo), self.cell(hi))
    }

    fn push_ref(row: &mut Row, r: FaceRef, coef: f64) {
        if let FaceRef::Face(i, s) = r {
            row.push((i, coef * s));
        }
    }

    /// Divergence row at a cell.
    pub fn div_row(&self, cell: usize) -> Row {
        let c = to_i64(self.cell_coords(cell));
        let mut row = Row::new();
        for a in 0..self.dim {
            let mut up = c;
            up[a] += 1;
            Self::push_ref(&mut row, self.face(a, up), 1.0 / self.h);
            Self::push_ref(&mut row, self.face(a, c), -1.0 / self.h);
        }
        row
    }

    /// Divergence operator, cells × faces.
    pub fn div_matrix(&self) -> crate::sparse::Csr {
        let rows: Vec<Row> = (0..self.ncells()).map(|c| self.div_row(c)).collect();
        crate::sparse::Csr::from_rows(self.nfaces, &rows)
    }

    /// D_aa at a cell.
    pub fn diag_strain_row(&self, cell: usize, a: usize) -> Row {
        let c = to_i64(self.cell_coords(cell));
        let mut up = c;
        up[a] += 1;
        let mut row = Row::new();
        Self::push_ref(&mut row, self.face(a, up), 1.0 / self.h);
        Self::push_ref(&mut row, self.face(a, c), -1.0 / self.h);
        row
    }

    /// Edge coordinate extents for the pair (a, b).
    pub fn edge_extent(&self, a: usize, b: usize, k: usize) -> usize {
        if !self.periodic && (k == a || k == b) {
            self.n + 1
        } else {
            self.n
        }
    }

    /// All edge coordinates for the pair (a, b), in a fixed order.
    pub fn edges(&self, a: usize, b: usize) -> Vec<[usize; 3]> {
        let ext: Vec<usize> = (0..self.dim).map(|k| self.edge_extent(a, b, k)).collect();
        let total: usize = ext.iter().product();
        (0..total)
            .map(|mut r| {
                let mut c = [0usize; 3];
                for k in 0..self.dim {
                    c[k] = r % ext[k];
                    r /= ext[k];
                }
                c
            })
            .collect()
    }

    /// D_ab at an edge (lower corner of cell `c` in the (a, b) plane).
    pub fn shear_strain_row(&self, c: [usize; 3], a: usize, b: usize) -> Row {
        let c = to_i64(c);
        let mut cb = c;
        cb[b] -= 1;
        let mut ca = c;
        ca[a] -= 1;
        let s = 0.5 / self.h;
        let mut row = Row::new();
        Self::push_ref(&mut row, self.face(a, c), s);
        Self::push_ref(&mut row, self.face(a, cb), -s);
        Self::push_ref(&mut row, self.face(b, c), s);
        Self::push_ref(&mut row, self.face(b, ca), -s);
        merge_row(row)
    }

    /// Cells around an edge (existing ones only).
    pub fn edge_cells(&self, c: [usize; 3], a: usize, b: usize) -> Vec<usize> {
        let c = to_i64(c);
        let mut out = Vec::with_capacity(4);
        for (da, db) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
            let mut q = c;
            q[a] -= da;
            q[b] -= db;
            if let Some(i) = self.cell(q) {
                if !out.contains(&i) {
                    out.push(i);
                }
            }
        }
        out
    }

    /// Quadrature factor of an edge on a walled grid: ½ per wall it lies on.
    pub fn edge_boundary_factor(&self, c: [usize; 3], a: usize, b: usize) -> f64 {
        if self.periodic {
            return 1.0;
        }
        let mut f = 1.0;
        for k in [a, b] {
            if c[k] == 0 || c[k] == self.n {
                f *= 0.5;
            }
        }
        f
    }

    /// Cell-centred shear D_ab: mean of the four surrounding edges.
    pub fn cell_shear_row(&self, cell: usize, a: usize, b: usize) -> Row {
        let c = self.cell_coords(cell);
        let mut row = Row::new();
        for (da, db) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
            let mut q = c;
            q[a] += da;
            q[b] += db;
            if self.periodic {
                q[a] %= self.n;
                q[b] %= self.n;
            }
            for (i, v) in self.shear_strain_row(q, a, b) {
                row.push((i, 0.25 * v));
            }
        }
        merge_row(row)
    }

    /// Strain component (a, b) at a cell centre.
    pub fn cell_strain_row(&self, cell: usize, a: usize, b: usize) -> Row {
        if a == b {
            self.diag_strain_row(cell, a)
        } else {
            self.cell_shear_row(cell, a.min(b), a.max(b))
        }
    }
}

pub fn to_i64(c: [usize; 3]) -> [i64; 3] {
    [c[0] as i64, c[1] as i64, c[2] as i64]
}

/// Sums duplicate columns and drops zeros.
pub fn merge_row(mut row: Row) -> Row {
    row.sort_by_key(|e| e.0);
    let mut out: Row = Vec::with_capacity(row.len());
    for (i, v) in row {
        match out.last_mut() {
            Some(last) if last.0 == i => last.1 += v,
            _ => out.push((i, v)),
        }
    }
    out.retain(|e| e.1 != 0.0);
    out
}

pub fn apply_row(row: &[(usize, f64)], x: &[f64]) -> f64 {
    row.iter().map(|&(i, v)| v * x[i]).sum()
}

/// Map between a subset of indices and compact unknown numbers.
#[derive(Debug, Clone, PartialEq)]
pub struct DofMap {
    pub to_dof: Vec<Option<usize>>,
    pub from_dof: Vec<usize>,
}

impl DofMap {
    pub fn from_mask(mask: &[bool]) -> Self {
        let mut to_dof = vec![None; mask.len()];
        let mut from_dof = Vec::new();
        for (i, &m) in mask.iter().enumerate() {
            if m {
                to_dof[i] = Some(from_dof.len());
                from_dof.push(i);
            }
        }
        DofMap { to_dof, from_dof }
    }

    pub fn all(n: usize) -> Self {
        Self::from_mask(&vec![true; n])
    }

    pub fn len(&self) -> usize {
        self.from_dof.len()
    }

    pub fn is_empty(&self) -> bool {
        self.from_dof.is_empty()
    }

    /// Restricts a row to unknowns, dropping entries outside the map.
    pub fn restrict_row(&self, row: &[(usize, f64)]) -> Row {
        row.iter()
            .filter_map(|&(i, v)| self.to_dof[i].map(|d| (d, v)))
            .collect()
    }

    pub fn gather(&self, full: &[f64]) -> Vec<f64> {
        self.from_dof.iter().map(|&i| full[i]).collect()
    }

    pub fn scatter(&self, x: &[f64], nfull: usize) -> Vec<f64> {
        let mut out = vec![0.0; nfull];
        for (d, &i) in self.from_dof.iter().enumerate() {
            out[i] = x[d];
        }
        out
    }
}
