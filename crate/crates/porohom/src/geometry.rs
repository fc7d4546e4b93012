//! Voxel unit cells, connectivity validation and ε-tiling.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::StaggeredGrid;

/// Geometry descriptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GeometrySpec {
    FullFluid { dim: usize, n: usize },
    FullSolid { dim: usize, n: usize },
    /// Centred solid block with side `side`.
    Block { dim: usize, n: usize, side: f64 },
    /// Centred solid cross made of axis-aligned bars of width `width`.
    Cross { dim: usize, n: usize, width: f64 },
    /// Explicit indicator, 1 = fluid.
    Mask { dim: usize, n: usize, chi: Vec<u8> },
}

/// A voxel face separating fluid from solid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterfaceFace {
    /// Periodic face index (lower face of `cell` along `axis`).
    pub face: usize,
    pub axis: usize,
    pub cell: usize,
    /// Sign of the fluid-outward normal along `axis`.
    pub normal_sign: i8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellGeometry {
    pub dim: usize,
    pub n: usize,
    /// 1 = fluid, 0 = solid; cell index with axis 0 fastest.
    pub chi: Vec<u8>,
    pub m: f64,
    pub interface_faces: Vec<InterfaceFace>,
}

/// Connectivity of one phase on the torus.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PhaseConnectivity {
    pub empty: bool,
    pub connected: bool,
    /// The periodic extension is connected (the phase percolates in every direction).
    pub spanning: bool,
}

fn check_dim_n(dim: usize, n: usize) -> Result<()> {
    if dim != 2 && dim != 3 {
        return Err(Error::Config(format!("dimension must be 2 or 3, got {dim}")));
    }
    if n == 0 {
        return Err(Error::Config("voxels per side must be positive".into()));
    }
    Ok(())
}

fn centre_inside(i: usize, n: usize, width: f64) -> bool {
    let x = (i as f64 + 0.5) / n as f64;
    (x - 0.5).abs() < 0.5 * width
}

impl GeometrySpec {
    pub fn dim(&self) -> usize {
        match self {
            GeometrySpec::FullFluid { dim, .. }
            | GeometrySpec::FullSolid { dim, .. }
            | GeometrySpec::Block { dim, .. }
            | GeometrySpec::Cross { dim, .. }
            | GeometrySpec::Mask { dim, .. } => *dim,
        }
    }

    /// The same shape at another resolution (explicit masks cannot be resampled).
    pub fn with_resolution(&self, n_new: usize) -> Result<GeometrySpec> {
        Ok(match self.clone() {
            GeometrySpec::FullFluid { dim, .. } => GeometrySpec::FullFluid { dim, n: n_new },
            GeometrySpec::FullSolid { dim, .. } => GeometrySpec::FullSolid { dim, n: n_new },
            GeometrySpec::Block { dim, side, .. } => GeometrySpec::Block { dim, n: n_new, side },
            GeometrySpec::Cross { dim, width, .. } => GeometrySpec::Cross { dim, n: n_new, width },
            GeometrySpec::Mask { n, .. } if n == n_new => self.clone(),
            GeometrySpec::Mask { .. } => {
                return Err(Error::ResolutionMismatch(
                    "explicit masks cannot be resampled".into(),
                ))
            }
        })
    }

    fn indicator(&self) -> Result<(usize, usize, Vec<u8>)> {
        let (dim, n) = match self {
            GeometrySpec::FullFluid { dim, n }
            | GeometrySpec::FullSolid { dim, n }
            | GeometrySpec::Block { dim, n, .. }
            | GeometrySpec::Cross { dim, n, .. }
            | GeometrySpec::Mask { dim, n, .. } => (*dim, *n),
        };
        check_dim_n(dim, n)?;
        let grid = StaggeredGrid::periodic(dim, n);
        let nc = grid.ncells();
        let chi = match self {
            GeometrySpec::FullFluid { .. } => vec![1u8; nc],
            GeometrySpec::FullSolid { .. } => vec![0u8; nc],
            GeometrySpec::Block { side, .. } => {
                if !(*side > 0.0 && *side < 1.0) {
                    return Err(Error::Config(format!("block side {side} not in (0,1)")));
                }
                (0..nc)
                    .map(|i| {
                        let c = grid.cell_coords(i);
                        let inside = (0..dim).all(|k| centre_inside(c[k], n, *side));
                        u8::from(!inside)
                    })
                    .collect()
            }
            GeometrySpec::Cross { width, .. } => {
                if !(*width > 0.0 && *width < 1.0) {
                    return Err(Error::Config(format!("cross width {width} not in (0,1)")));
                }
                (0..nc)
                    .map(|i| {
                        let c = grid.cell_coords(i);
                        // bar along axis a: all other coordinates near the centre
                        let solid = (0..dim).any(|a| {
                            (0..dim).filter(|&k| k != a).all(|k| centre_inside(c[k], n, *width))
                        });
                        u8::from(!solid)
                    })
                    .collect()
            }
            GeometrySpec::Mask { chi, .. } => {
                if chi.len() != nc {
                    return Err(Error::Config(format!(
                        "mask has {} entries, expected {nc}",
                        chi.len()
                    )));
                }
                if chi.iter().any(|&v| v > 1) {
                    return Err(Error::Config("mask entries must be 0 or 1".into()));
                }
                chi.clone()
            }
        };
        Ok((dim, n, chi))
    }
}

/// Builds and validates a unit cell.
pub fn build_cell(spec: &GeometrySpec) -> Result<CellGeometry> {
    let (dim, n, chi) = spec.indicator()?;
    let cell = CellGeometry::from_chi(dim, n, chi);
    cell.validate_connectivity()?;
    Ok(cell)
}

impl CellGeometry {
    /// Builds the cell without connectivity validation.
    pub fn from_chi(dim: usize, n: usize, chi: Vec<u8>) -> CellGeometry {
        let grid = StaggeredGrid::periodic(dim, n);
        let fluid = chi.iter().filter(|&&v| v == 1).count();
        let m = fluid as f64 / chi.len() as f64;
        let mut interface_faces = Vec::new();
        for f in 0..grid.nfaces() {
            let (a, _) = grid.face_coords(f);
            let (lo, hi) = grid.face_cells(f);
            let (lo, hi) = (lo.unwrap(), hi.unwrap());
            if chi[lo] != chi[hi] {
                interface_faces.push(InterfaceFace {
                    face: f,
                    axis: a,
                    cell: hi,
                    normal_sign: if chi[lo] == 1 { 1 } else { -1 },
                });
            }
        }
        CellGeometry {
            dim,
            n,
            chi,
            m,
            interface_faces,
        }
    }

    pub fn grid(&self) -> StaggeredGrid {
        StaggeredGrid::periodic(self.dim, self.n)
    }

    pub fn is_fluid(&self, cell: usize) -> bool {
        self.chi[cell] == 1
    }

    pub fn fluid_count(&self) -> usize {
        self.chi.iter().filter(|&&v| v == 1).count()
    }

    pub fn solid_count(&self) -> usize {
        self.chi.len() - self.fluid_count()
    }

    /// Connectivity report of the phase with indicator value `phase`.
    pub fn phase_connectivity(&self, phase: u8) -> PhaseConnectivity {
        phase_connectivity(self.dim, self.n, &self.chi, phase)
    }

    /// Unwrapped cell-centre coordinates of a connected phase that does
    /// not wind around the torus in any direction; `None` otherwise.
    pub fn bounded_lift(&self, phase: u8) -> Option<Vec<Option<[f64; 3]>>> {
        let members = self.chi.iter().filter(|&&c| c == phase).count();
        let (lift, windings, visited) = lift_phase(self.dim, self.n, &self.chi, phase);
        if members == 0 || visited != members || !windings.is_empty() {
            return None;
        }
        let grid = self.grid();
        Some(
            lift.iter()
                .enumerate()
                .map(|(c, l)| {
                    l.map(|l| {
                        let mut x = grid.cell_center(c);
                        for k in 0..self.dim {
                            x[k] += l[k] as f64;
                        }
                        x
                    })
                })
                .collect(),
        )
    }

    /// Fluid and solid must be connected on the torus; the solid must span
    /// (its periodic extension connected), and in 3D the fluid as well.
    pub fn validate_connectivity(&self) -> Result<()> {
        for (phase, name) in [(1u8, "fluid"), (0u8, "solid")] {
            let pc = self.phase_connectivity(phase);
            if pc.empty {
                continue;
            }
            if !pc.connected {
                return Err(Error::DisconnectedPhase(format!(
                    "{name} phase is not connected in the periodic cell"
                )));
            }
            let must_span = phase == 0 || self.dim == 3;
            if must_span && !pc.spanning {
                return Err(Error::DisconnectedPhase(format!(
                    "{name} phase does not connect across cell boundaries"
                )));
            }
        }
        Ok(())
    }

    /// SHA-256 of (dim, n, χ) as lowercase hex.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("{} {}\n", self.dim, self.n).as_bytes());
        h.update(&self.chi);
        hex(&h.finalize())
    }

    /// Plain-text mask: header `dim n`, then rows of 0/1 with axis 0 along a row.
    pub fn to_mask_text(&self) -> String {
        let mut s = format!("{} {}\n", self.dim, self.n);
        for row in self.chi.chunks(self.n) {
            let line: Vec<&str> = row.iter().map(|&v| if v == 1 { "1" } else { "0" }).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn from_mask_text(text: &str) -> Result<GeometrySpec> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::Config("empty mask file".into()))?;
        let hv: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Config(format!("bad mask header '{header}'")))?;
        if hv.len() != 2 {
            return Err(Error::Config(format!("bad mask header '{header}'")));
        }
        let (dim, n) = (hv[0], hv[1]);
        check_dim_n(dim, n)?;
        let mut chi = Vec::with_capacity(n.pow(dim as u32));
        for l in lines {
            for t in l.split_whitespace() {
                chi.push(match t {
                    "0" => 0u8,
                    "1" => 1u8,
                    _ => return Err(Error::Config(format!("bad mask entry '{t}'"))),
                });
            }
        }
        Ok(GeometrySpec::Mask { dim, n, chi })
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// BFS over one phase from its first voxel; returns per-voxel lifts, the
/// winding vectors found, and the number of visited voxels.
fn lift_phase(dim: usize, n: usize, chi: &[u8], phase: u8) -> (Vec<Option<[i64; 3]>>, Vec<[i64; 3]>, usize) {
    let grid = StaggeredGrid::periodic(dim, n);
    let members: Vec<usize> = (0..chi.len()).filter(|&i| chi[i] == phase).collect();
    // BFS with lifts: each visited voxel records which periodic copy it was reached in.
    let mut lift: Vec<Option<[i64; 3]>> = vec![None; chi.len()];
    let mut windings: Vec<[i64; 3]> = Vec::new();
    let Some(&start) = members.first() else {
        return (lift, windings, 0);
    };
    lift[start] = Some([0; 3]);
    let mut queue = VecDeque::from([start]);
    let mut visited = 1usize;
    while let Some(cur) = queue.pop_front() {
        let c = grid.cell_coords(cur);
        let lc = lift[cur].unwrap();
        for a in 0..dim {
            for step in [-1i64, 1] {
                let raw = c[a] as i64 + step;
                let mut q = crate::grid::to_i64(c);
                q[a] = raw;
                let nb = grid.cell(q).unwrap();
                if chi[nb] != phase {
                    continue;
                }
                let mut ln = lc;
                if raw < 0 {
                    ln[a] -= 1;
                } else if raw >= n as i64 {
                    ln[a] += 1;
                }
                match lift[nb] {
                    None => {
                        lift[nb] = Some(ln);
                        visited += 1;
                        queue.push_back(nb);
                    }
                    Some(existing) => {
                        let w = [ln[0] - existing[0], ln[1] - existing[1], ln[2] - existing[2]];
                        if w != [0; 3] {
                            windings.push(w);
                        }
                    }
                }
            }
        }
    }
    (lift, windings, visited)
}

fn phase_connectivity(dim: usize, n: usize, chi: &[u8], phase: u8) -> PhaseConnectivity {
    let members = chi.iter().filter(|&&c| c == phase).count();
    if members == 0 {
        return PhaseConnectivity {
            empty: true,
            connected: true,
            spanning: true,
        };
    }
    let (_, windings, visited) = lift_phase(dim, n, chi, phase);
    let connected = visited == members;
    PhaseConnectivity {
        empty: false,
        connected,
        spanning: connected && lattice_is_full(&windings, dim),
    }
}

/// True if the integer vectors generate all of Z^dim.
fn lattice_is_full(vectors: &[[i64; 3]], dim: usize) -> bool {
    // Hermite-style elimination keeping a triangular basis.
    let mut basis: Vec<Option<[i64; 3]>> = vec![None; dim];
    for v in vectors {
        let mut v = *v;
        for col in 0..dim {
            if v[col] == 0 {
                continue;
            }
            match basis[col] {
                None => {
                    if v[col] < 0 {
                        for x in v.iter_mut() {
                            *x = -*x;
                        }
                    }
                    basis[col] = Some(v);
                    break;
                }
                Some(mut b) => {
                    // Euclid on the pivot column between b and v.
                    while v[col] != 0 {
                        let q = b[col].div_euclid(v[col]);
                        for k in 0..3 {
                            b[k] -= q * v[k];
                        }
                        std::mem::swap(&mut b, &mut v);
                    }
                    if b[col] < 0 {
                        for x in b.iter_mut() {
                            *x = -*x;
                        }
                    }
                    basis[col] = Some(b);
                }
            }
        }
    }
    basis
        .iter()
        .enumerate()
        .all(|(col, b)| b.map(|v| v[col] == 1).unwrap_or(false))
}

/// The ε-periodic indicator on the macro grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PorousDomain {
    pub dim: usize,
    /// Macro voxels per side.
    pub n: usize,
    /// Number of cells per side, ε = 1/k.
    pub k: usize,
    pub eps: f64,
    pub chi: Vec<u8>,
    pub porosity: f64,
}

/// Tiles Ω = (0,1)^d with k = 1/ε copies of the cell on an `n_macro` grid.
pub fn tile(cell: &CellGeometry, k: usize, n_macro: usize) -> Result<PorousDomain> {
    if k == 0 {
        return Err(Error::Config("1/ε must be a positive integer".into()));
    }
    if n_macro % (k * cell.n) != 0 {
        return Err(Error::ResolutionMismatch(format!(
            "macro grid {n_macro} is not divisible by k·n = {}",
            k * cell.n
        )));
    }
    let r = n_macro / (k * cell.n);
    let g = StaggeredGrid::walled(cell.dim, n_macro);
    let cg = cell.grid();
    let chi: Vec<u8> = (0..g.ncells())
        .map(|i| {
            let c = g.cell_coords(i);
            let mut q = [0i64; 3];
            for a in 0..cell.dim {
                q[a] = ((c[a] / r) % cell.n) as i64;
            }
            cell.chi[cg.cell(q).unwrap()]
        })
        .collect();
    let porosity = chi.iter().filter(|&&v| v == 1).count() as f64 / chi.len() as f64;
    Ok(PorousDomain {
        dim: cell.dim,
        n: n_macro,
        k,
        eps: 1.0 / k as f64,
        chi,
        porosity,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cross(n: usize) -> CellGeometry {
        build_cell(&GeometrySpec::Cross { dim: 2, n, width: 0.25 }).unwrap()
    }

    #[test]
    fn full_fluid_has_unit_porosity() {
        let c = build_cell(&GeometrySpec::FullFluid { dim: 2, n: 16 }).unwrap();
        assert_eq!(c.m, 1.0);
        assert!(c.interface_faces.is_empty());
        let s = build_cell(&GeometrySpec::FullSolid { dim: 3, n: 4 }).unwrap();
        assert_eq!(s.m, 0.0);
    }

    #[test]
    fn block_porosity_and_rejection() {
        let (dim, n, chi) = GeometrySpec::Block { dim: 2, n: 16, side: 0.5 }
            .indicator()
            .unwrap();
        let c = CellGeometry::from_chi(dim, n, chi);
        assert_eq!(c.m, 0.75);
        let pc = c.phase_connectivity(0);
        assert!(pc.connected && !pc.spanning);
        assert!(matches!(
            build_cell(&GeometrySpec::Block { dim: 2, n: 16, side: 0.5 }),
            Err(Error::DisconnectedPhase(_))
        ));
    }

    #[test]
    fn cross_is_valid() {
        let c = cross(32);
        assert!((c.m - 0.5625).abs() < 1e-15);
        assert!(c.phase_connectivity(0).spanning);
        assert!(c.phase_connectivity(1).connected);
        assert!(!c.phase_connectivity(1).spanning);
        let c3 = build_cell(&GeometrySpec::Cross { dim: 3, n: 8, width: 0.25 }).unwrap();
        assert!(c3.phase_connectivity(1).spanning);
    }

    #[test]
    fn interface_normals_telescope() {
        let c = cross(16);
        for a in 0..2 {
            let s: i64 = c
                .interface_faces
                .iter()
                .filter(|f| f.axis == a)
                .map(|f| f.normal_sign as i64)
                .sum();
            assert_eq!(s, 0);
        }
    }

    #[test]
    fn tiling_rules() {
        let c = build_cell(&GeometrySpec::Cross { dim: 2, n: 16, width: 0.25 }).unwrap();
        assert!(tile(&c, 3, 96).is_ok());
        assert!(matches!(tile(&c, 3, 64), Err(Error::ResolutionMismatch(_))));
        let d = tile(&c, 2, 64).unwrap();
        assert_eq!(d.porosity, c.m);
        let f = build_cell(&GeometrySpec::FullFluid { dim: 2, n: 8 }).unwrap();
        assert!(tile(&f, 4, 32).unwrap().chi.iter().all(|&v| v == 1));
    }

    #[test]
    fn mask_round_trip() {
        let c = cross(8);
        let spec = CellGeometry::from_mask_text(&c.to_mask_text()).unwrap();
        assert_eq!(build_cell(&spec).unwrap(), c);
        assert!(CellGeometry::from_mask_text("2 2\n0 1\n1 x\n").is_err());
    }

    #[test]
    fn disconnected_fluid_rejected() {
        // two fluid pores separated by a solid frame
        let n = 8;
        let mut chi = vec![0u8; n * n];
        chi[2 * n + 2] = 1;
        chi[5 * n + 5] = 1;
        assert!(matches!(
            build_cell(&GeometrySpec::Mask { dim: 2, n, chi }),
            Err(Error::DisconnectedPhase(_))
        ));
    }

    #[test]
    fn lattice_rank() {
        assert!(lattice_is_full(&[[1, 0, 0], [0, 1, 0]], 2));
        assert!(!lattice_is_full(&[[2, 0, 0], [0, 1, 0]], 2));
        assert!(lattice_is_full(&[[2, 1, 0], [1, 1, 0]], 2));
        assert!(!lattice_is_full(&[[1, 1, 0]], 2));
    }

    fn translate(chi: &[u8], n: usize, sx: usize, sy: usize) -> Vec<u8> {
        let mut out = vec![0u8; n * n];
        for j in 0..n {
            for i in 0..n {
                out[((j + sy) % n) * n + (i + sx) % n] = chi[j * n + i];
            }
        }
        out
    }

    fn transpose(chi: &[u8], n: usize) -> Vec<u8> {
        let mut out = vec![0u8; n * n];
        for j in 0..n {
            for i in 0..n {
                out[i * n + j] = chi[j * n + i];
            }
        }
        out
    }

    proptest! {
        #[test]
        fn connectivity_invariant_under_translation_and_relabeling(
            bits in proptest::collection::vec(0u8..2, 36),
            sx in 0usize..6,
            sy in 0usize..6,
        ) {
            let n = 6;
            let base = CellGeometry::from_chi(2, n, bits.clone());
            let moved = CellGeometry::from_chi(2, n, translate(&bits, n, sx, sy));
            let swapped = CellGeometry::from_chi(2, n, transpose(&bits, n));
            for phase in [0u8, 1] {
                prop_assert_eq!(base.phase_connectivity(phase), moved.phase_connectivity(phase));
                prop_assert_eq!(base.phase_connectivity(phase), swapped.phase_connectivity(phase));
            }
            prop_assert_eq!(base.m, moved.m);
        }

        #[test]
        fn tiling_preserves_porosity(k in 1usize..5, r in 1usize..3) {
            let c = build_cell(&GeometrySpec::Cross { dim: 2, n: 8, width: 0.25 }).unwrap();
            let d = tile(&c, k, 8 * k * r).unwrap();
            prop_assert_eq!(d.porosity, c.m);
        }
    }
}
