//! Time integration of the homogenized systems on Ω = (0,1)^d with
//! homogeneous initial and boundary data.
//!
//! Every regime is advanced by backward Euler in one coupled linear solve
//! per step. Memory integrals use the trapezoid rule of [`convolve`]; the
//! endpoint term is lagged and resolved by Picard iteration.

mod convolution;
mod ops;

pub use convolution::{check_kernel_grid, convolve, quadrature_matrices, trapezoid_weight};

use serde::{Deserialize, Serialize};

use crate::cell::KernelSample;
use crate::error::{Error, Result};
use crate::params::RegimeTag;
use crate::sparse::{Csr, LinearSolver, SolverOptions, Triplets};
use crate::tensors::{EffectiveCoefficients, Matrix, SymRank4Tensor};
use ops::{restrict, MacroOps};

/// Body force F(x, t).
pub type ForceFn<'a> = &'a dyn Fn([f64; 3], f64) -> [f64; 3];

/// The zero force.
pub fn no_force(_: [f64; 3], _: f64) -> [f64; 3] {
    [0.0; 3]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MacroConfig {
    pub dim: usize,
    /// Cells per side.
    pub n: usize,
    pub dt: f64,
    pub steps: usize,
    pub picard_tol: f64,
    pub picard_max_iter: usize,
    #[serde(default)]
    pub solver: SolverOptions,
}

impl MacroConfig {
    /// Fails unless `t_final` is a positive multiple of `dt`.
    pub fn new(dim: usize, n: usize, dt: f64, t_final: f64) -> Result<Self> {
        if dim != 2 && dim != 3 {
            return Err(Error::Config(format!("macro dimension must be 2 or 3, got {dim}")));
        }
        if n < 2 {
            return Err(Error::Config("macro grid needs at least 2 cells per side".into()));
        }
        if !(dt > 0.0) || !(t_final > 0.0) {
            return Err(Error::Config("dt and T must be positive".into()));
        }
        let steps = (t_final / dt).round();
        if (steps * dt - t_final).abs() > 1e-9 * t_final {
            return Err(Error::Config(format!("T = {t_final} is not a multiple of dt = {dt}")));
        }
        Ok(MacroConfig {
            dim,
            n,
            dt,
            steps: steps as usize,
            picard_tol: 1e-10,
            picard_max_iter: 50,
            solver: SolverOptions::default(),
        })
    }

    pub fn t_final(&self) -> f64 {
        self.steps as f64 * self.dt
    }
}

/// Fields of a macroscopic run. Vector fields live on faces of the walled
/// grid (component normal to the face), pressures at cell centres.
///
/// `w_s` holds w^s in T2_II and T3_II and w_s in T3_III; `w_f` holds w_f
/// in T3_II and w^f in T3_III. `dw*` are the time derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct MacroState {
    pub t: f64,
    pub step: usize,
    pub v: Vec<f64>,
    pub w: Vec<f64>,
    pub w_s: Vec<f64>,
    pub w_f: Vec<f64>,
    pub dw: Vec<f64>,
    pub dw_s: Vec<f64>,
    pub dw_f: Vec<f64>,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub pi: Vec<f64>,
    /// div v at t_0..t_n.
    pub div_history: Vec<Vec<f64>>,
    /// z, z^s, z^f or ∇π at t_0..t_n, split into components on all faces.
    pub z_history: Vec<Vec<Vec<f64>>>,
    /// F at t_0..t_n, split into components on all faces.
    pub force_history: Vec<Vec<Vec<f64>>>,
}

impl MacroState {
    fn zero(nf: usize, nc: usize) -> Self {
        MacroState {
            t: 0.0,
            step: 0,
            v: vec![0.0; nf],
            w: vec![0.0; nf],
            w_s: vec![0.0; nf],
            w_f: vec![0.0; nf],
            dw: vec![0.0; nf],
            dw_s: vec![0.0; nf],
            dw_f: vec![0.0; nf],
            p: vec![0.0; nc],
            q: vec![0.0; nc],
            pi: vec![0.0; nc],
            div_history: Vec::new(),
            z_history: Vec::new(),
            force_history: Vec::new(),
        }
    }

    /// True if every field is exactly zero.
    pub fn is_zero(&self) -> bool {
        [&self.v, &self.w, &self.w_s, &self.w_f, &self.dw, &self.dw_s, &self.dw_f, &self.p, &self.q, &self.pi]
            .iter()
            .all(|f| f.iter().all(|&x| x == 0.0))
    }
}

/// Manufactured sources added to the right-hand sides (per unit volume).
#[derive(Debug, Clone, Default)]
pub struct Sources {
    /// Added to the momentum balance, face field.
    pub momentum: Option<Vec<f64>>,
    /// Added to the second face relation of two-velocity regimes.
    pub relation: Option<Vec<f64>>,
    /// Added to the continuity equation (the one with ∂π/∂t or π/η₀).
    pub continuity: Option<Vec<f64>>,
    /// Added to the state equation with a^f₀ (T2 regimes).
    pub state: Option<Vec<f64>>,
}

/// T2_I fields at one instant with their time derivatives and the memory
/// integrals ∫B^f₂(t−τ) div v dτ (per cell) and ∫a^f₂(t−τ) div v dτ.
pub struct T2Snapshot<'a> {
    pub v: &'a [f64],
    pub dv: &'a [f64],
    pub p: &'a [f64],
    pub dp: &'a [f64],
    pub pi: &'a [f64],
    pub dpi: &'a [f64],
    pub conv_b: &'a [Matrix],
    pub conv_a: &'a [f64],
    /// Face field of F.
    pub force: &'a [f64],
}

/// Diagnostics of one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: usize,
    pub picard_iterations: usize,
    /// max |q − p − ν₀/p★ ∂p/∂t| and, in T3, max |q/m − π/(1−m)|.
    pub relation_residual: f64,
    /// Largest boundary-normal value of the constrained vector fields.
    pub boundary_violation: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Memory {
    None,
    Kernel,
}

/// Face blocks and cell blocks of the coupled unknown vector.
struct Layout {
    nint: usize,
    nc: usize,
    nfb: usize,
    gauge: bool,
}

impl Layout {
    fn len(&self) -> usize {
        self.nfb * self.nint + 3 * self.nc + usize::from(self.gauge)
    }
    fn face(&self, b: usize) -> usize {
        b * self.nint
    }
    /// Cell block k: 0 = p, 1 = q, 2 = π (unknowns) or equation k (rows).
    fn cell(&self, k: usize) -> usize {
        self.nfb * self.nint + k * self.nc
    }
    fn gauge_index(&self) -> usize {
        self.len() - 1
    }
}

const P: usize = 0;
const Q: usize = 1;
const PI: usize = 2;

/// Advances one regime on a fixed grid and step.
pub struct MacroStepper {
    pub tag: RegimeTag,
    pub cfg: MacroConfig,
    ops: MacroOps,
    coeffs: EffectiveCoefficients,
    m: f64,
    rho_f: f64,
    rho_s: f64,
    rho_hat: f64,
    ap: f64,
    ae: f64,
    /// ν₀/(p★ Δt)
    c: f64,
    layout: Layout,
    solver: LinearSolver,
    memory: Memory,
    /// div-strain coupling ops for T2 memory: B^f₂ and a^f₂
    b2: Option<KernelSample>,
    a2: Option<KernelSample>,
    /// face kernel: B^s₁, K_f or B^π
    face_kernel: Option<KernelSample>,
    forcing_kernel: Option<KernelSample>,
    /// ((1−m)I − B^s₂) or (mI − B^f₂) and B^s₂ / B^f₂ as face operators
    rel_ops: Option<(Csr, Csr, Matrix)>,
    t2: Option<T2Ops>,
}

/// Spatial operators of the T2 momentum and state equations.
struct T2Ops {
    /// μ₀ A^f₀ form
    ka: Csr,
    /// B^f₀ π load
    gb0: Csr,
    /// B^f₁ div v load
    gb1: Csr,
    /// C^f₀:D(v)
    cd: Csr,
}

fn mat_add_identity(b: &Matrix, s: f64, diag: f64) -> Matrix {
    b.iter()
        .enumerate()
        .map(|(i, r)| r.iter().enumerate().map(|(j, v)| s * v + if i == j { diag } else { 0.0 }).collect())
        .collect()
}

fn zeros_matrix(d: usize) -> Matrix {
    vec![vec![0.0; d]; d]
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// C = A·B for sparse matrices.
fn matmul(a: &Csr, b: &Csr) -> Csr {
    let mut t = Triplets::new(a.nrows, b.ncols);
    for i in 0..a.nrows {
        let mut acc: std::collections::BTreeMap<usize, f64> = Default::default();
        for (k, av) in a.row(i) {
            for (j, bv) in b.row(k) {
                *acc.entry(j).or_insert(0.0) += av * bv;
            }
        }
        for (j, v) in acc {
            t.push(i, j, v);
        }
    }
    t.to_csr()
}

impl MacroStepper {
    pub fn new(tag: RegimeTag, coeffs: &EffectiveCoefficients, cfg: &MacroConfig) -> Result<Self> {
        if coeffs.dim != cfg.dim {
            return Err(Error::Config(format!(
                "coefficients are {}D but the macro grid is {}D",
                coeffs.dim, cfg.dim
            )));
        }
        let p = &coeffs.params;
        let m = coeffs.m;
        if !tag.is_t2() || matches!(tag, RegimeTag::T2_II_LAM_POS | RegimeTag::T2_II_LAM_ZERO) {
            if !(m > 0.0 && m < 1.0) {
                return Err(Error::ConstraintViolation(format!(
                    "{tag} needs a porosity strictly between 0 and 1, got {m}"
                )));
            }
        }
        if !tag.is_t2() && (p.p_star.is_infinite() || p.eta0.is_infinite()) {
            return Err(Error::ConstraintViolation("p★ and η₀ must be finite when μ₀ = 0".into()));
        }
        let ops = MacroOps::new(cfg.dim, cfg.n);
        let ap = p.p_star.recip_value();
        let ae = p.eta0.recip_value();
        let nu0 = p.nu0.value().unwrap_or(0.0);
        let (nfb, gauge) = match tag {
            RegimeTag::T2_I | RegimeTag::T3_I => (1, tag.is_t2() && ap == 0.0),
            RegimeTag::T2_II_LAM_POS | RegimeTag::T2_II_LAM_ZERO => (2, ap == 0.0),
            RegimeTag::T3_IV => (0, false),
            _ => (2, false),
        };
        let layout = Layout {
            nint: ops.nint(),
            nc: ops.nc,
            nfb,
            gauge,
        };
        let mut st = MacroStepper {
            tag,
            cfg: *cfg,
            m,
            rho_f: p.rho_f,
            rho_s: p.rho_s,
            rho_hat: p.rho_hat(m),
            ap,
            ae,
            c: nu0 * ap / cfg.dt,
            layout,
            // placeholder replaced below
            solver: LinearSolver::new(Csr::identity(1), SolverOptions::default())?,
            memory: Memory::None,
            b2: None,
            a2: None,
            face_kernel: None,
            forcing_kernel: None,
            rel_ops: None,
            t2: None,
            coeffs: coeffs.clone(),
            ops,
        };
        st.load_coefficients()?;
        if tag.is_t2() {
            let (b0, b1, c0) = st.t2_matrices();
            let o = &st.ops;
            let mu0 = st.coeffs.params.mu0.value().unwrap_or(0.0);
            let mut ka = o.tensor_form(&st.a_tensor());
            ka.data.iter_mut().for_each(|v| *v *= mu0);
            st.t2 = Some(T2Ops {
                ka,
                gb0: o.matrix_strain(&b0).transpose(),
                gb1: matmul(&o.matrix_strain(&b1).transpose(), &o.div),
                cd: o.matrix_strain(&c0),
            });
        }
        let a = st.assemble()?;
        st.solver = LinearSolver::new(a, cfg.solver)?;
        Ok(st)
    }

    fn load_coefficients(&mut self) -> Result<()> {
        let c = &self.coeffs;
        let d = self.cfg.dim;
        let kernel = |k: &Option<KernelSample>, name: &str| -> Result<KernelSample> {
            let k = c.require(name, k)?.clone();
            check_kernel_grid(&k, self.cfg.dt, self.cfg.steps)?;
            Ok(k)
        };
        match self.tag {
            RegimeTag::T2_I | RegimeTag::T2_II_LAM_POS | RegimeTag::T2_II_LAM_ZERO => {
                c.require("A_f0", &c.A_f0)?;
                c.require("B_f0", &c.B_f0)?;
                c.require("B_f1_const", &c.B_f1_const)?;
                c.require("C_f0", &c.C_f0)?;
                c.require("a_f0", &c.a_f0)?;
                c.require("a_f1", &c.a_f1)?;
                let b2 = kernel(&c.B_f2_kernel, "B_f2_kernel")?;
                let a2 = kernel(&c.a_f2_kernel, "a_f2_kernel")?;
                if self.ap == 0.0 && self.ae == 0.0 && c.a_f0.unwrap().abs() < 1e-14 {
                    return Err(Error::SingularSystem(
                        "with p★ = η₀ = ∞ and a_f0 = 0 the solid pressure π is undetermined".into(),
                    ));
                }
                if !(b2.is_zero() && a2.is_zero()) {
                    self.memory = Memory::Kernel;
                }
                self.b2 = Some(b2);
                self.a2 = Some(a2);
                if self.tag == RegimeTag::T2_II_LAM_POS {
                    self.face_kernel = Some(kernel(&c.B_s1_kernel, "B_s1_kernel")?);
                    self.memory = Memory::Kernel;
                }
                if self.tag == RegimeTag::T2_II_LAM_ZERO {
                    let b = c.require("B_s2", &c.B_s2)?.clone();
                    self.set_rel_ops(&b, 1.0 - self.m);
                }
            }
            RegimeTag::T3_I => {}
            RegimeTag::T3_II_LAM_POS => {
                self.face_kernel = Some(kernel(&c.B_s1_kernel, "B_s1_kernel")?);
                self.memory = Memory::Kernel;
            }
            RegimeTag::T3_II_LAM_ZERO => {
                let b = c.require("B_s2", &c.B_s2)?.clone();
                self.set_rel_ops(&b, 1.0 - self.m);
            }
            RegimeTag::T3_III_KERNEL => {
                self.face_kernel = Some(kernel(&c.K_f_kernel, "K_f_kernel")?);
                self.memory = Memory::Kernel;
            }
            RegimeTag::T3_III_ZERO => {
                let b = c.require("B_f2_matrix", &c.B_f2_matrix)?.clone();
                self.set_rel_ops(&b, self.m);
            }
            RegimeTag::T3_IV => {
                self.face_kernel = Some(kernel(&c.B_pi_kernel, "B_pi_kernel")?);
                self.forcing_kernel = Some(kernel(&c.forcing_kernel, "forcing")?);
                self.memory = Memory::Kernel;
            }
        }
        if let Some(k) = &self.face_kernel {
            if k.values[0].len() != d {
                return Err(Error::KernelGridMismatch(format!("kernel '{}' is not {d}×{d}", k.meta.problem)));
            }
        }
        Ok(())
    }

    fn set_rel_ops(&mut self, b: &Matrix, diag: f64) {
        let shifted = mat_add_identity(b, -1.0, diag);
        self.rel_ops = Some((self.ops.matrix_operator(&shifted), self.ops.matrix_operator(b), shifted));
    }

    pub fn initial_state(&self) -> MacroState {
        MacroState::zero(self.ops.nf, self.ops.nc)
    }

    pub fn grid(&self) -> &crate::grid::StaggeredGrid {
        &self.ops.grid
    }

    fn a_tensor(&self) -> SymRank4Tensor {
        self.coeffs.A_f0.clone().unwrap()
    }

    fn t2_matrices(&self) -> (Matrix, Matrix, Matrix) {
        let c = &self.coeffs;
        (
            c.B_f0.clone().unwrap_or_else(|| zeros_matrix(self.cfg.dim)),
            c.B_f1_const.clone().unwrap_or_else(|| zeros_matrix(self.cfg.dim)),
            c.C_f0.clone().unwrap_or_else(|| zeros_matrix(self.cfg.dim)),
        )
    }

    fn assemble(&self) -> Result<Csr> {
        let l = &self.layout;
        let o = &self.ops;
        let n = l.len();
        let dt = self.cfg.dt;
        let mut t = Triplets::new(n, n);
        let faces = &o.faces;
        // helpers on restricted blocks
        let face_diag = |t: &mut Triplets, rb: usize, cb: usize, s: f64| {
            for i in 0..l.nint {
                t.push(l.face(rb) + i, l.face(cb) + i, s);
            }
        };
        let face_op = |t: &mut Triplets, rb: usize, cb: usize, op: &Csr, s: f64| {
            for (i, row) in restrict(op, faces).iter().enumerate() {
                for &(j, v) in row {
                    t.push(l.face(rb) + i, l.face(cb) + j, s * v);
                }
            }
        };
        let face_cell = |t: &mut Triplets, rb: usize, ck: usize, op: &Csr, s: f64| {
            for (i, &f) in faces.from_dof.iter().enumerate() {
                for (c, v) in op.row(f) {
                    t.push(l.face(rb) + i, l.cell(ck) + c, s * v);
                }
            }
        };
        let cell_face = |t: &mut Triplets, rk: usize, cb: usize, op: &Csr, s: f64| {
            for c in 0..l.nc {
                for (f, v) in op.row(c) {
                    if let Some(j) = faces.to_dof[f] {
                        t.push(l.cell(rk) + c, l.face(cb) + j, s * v);
                    }
                }
            }
        };
        let cell_diag = |t: &mut Triplets, rk: usize, ck: usize, s: f64| {
            for c in 0..l.nc {
                t.push(l.cell(rk) + c, l.cell(ck) + c, s);
            }
        };
        let (m, ap, ae) = (self.m, self.ap, self.ae);
        // closure q' − (1 + c) p' = −c p, row block 2 for T2 and T3 alike
        let closure = |t: &mut Triplets| {
            cell_diag(t, 2, Q, 1.0);
            cell_diag(t, 2, P, -(1.0 + self.c));
        };
        match self.tag {
            RegimeTag::T2_I | RegimeTag::T2_II_LAM_POS | RegimeTag::T2_II_LAM_ZERO => {
                let T2Ops { ka, gb0, gb1, cd } = self.t2.as_ref().unwrap();
                let two = self.tag != RegimeTag::T2_I;
                let inertia_v = if two { self.rho_f * m } else { self.rho_hat };
                face_diag(&mut t, 0, 0, inertia_v / dt);
                face_op(&mut t, 0, 0, ka, 1.0);
                face_op(&mut t, 0, 0, gb1, 1.0);
                face_cell(&mut t, 0, PI, gb0, 1.0);
                face_cell(&mut t, 0, Q, &o.grad, 1.0);
                face_cell(&mut t, 0, PI, &o.grad, 1.0);
                // continuity (row block 0)
                cell_diag(&mut t, 0, P, ap / dt);
                cell_diag(&mut t, 0, PI, ae / dt);
                // state equation (row block 1)
                cell_diag(&mut t, 1, P, ap / dt);
                cell_face(&mut t, 1, 0, cd, 1.0);
                cell_diag(&mut t, 1, PI, self.coeffs.a_f0.unwrap());
                cell_face(&mut t, 1, 0, &o.div, self.coeffs.a_f1.unwrap() + m);
                closure(&mut t);
                if two {
                    face_diag(&mut t, 0, 1, self.rho_s / dt);
                    cell_face(&mut t, 0, 1, &o.div, 1.0);
                    cell_face(&mut t, 0, 0, &o.div, m);
                    match self.tag {
                        RegimeTag::T2_II_LAM_POS => {
                            face_diag(&mut t, 1, 1, 1.0);
                            face_diag(&mut t, 1, 0, -(1.0 - m));
                        }
                        _ => {
                            let (shifted, b, _) = self.rel_ops.as_ref().unwrap();
                            face_diag(&mut t, 1, 1, self.rho_s / dt);
                            face_op(&mut t, 1, 0, b, -self.rho_s / dt);
                            let g = matmul(shifted, &o.grad);
                            face_cell(&mut t, 1, PI, &g, 1.0 / (1.0 - m));
                        }
                    }
                } else {
                    cell_face(&mut t, 0, 0, &o.div, 1.0);
                }
                if l.gauge {
                    let g = l.gauge_index();
                    let rk = if ae > 0.0 { 1 } else { 0 };
                    for c in 0..l.nc {
                        t.push(g, l.cell(P) + c, 1.0);
                        t.push(l.cell(rk) + c, g, 1.0);
                    }
                }
            }
            _ => {
                // T3: row block 0 is continuity, 1 is q/m = π/(1−m), 2 the q closure
                cell_diag(&mut t, 0, P, ap);
                cell_diag(&mut t, 0, PI, ae);
                cell_diag(&mut t, 1, Q, 1.0 / m);
                cell_diag(&mut t, 1, PI, -1.0 / (1.0 - m));
                closure(&mut t);
                let gpi = 1.0 / (1.0 - m);
                match self.tag {
                    RegimeTag::T3_I => {
                        face_diag(&mut t, 0, 0, self.rho_hat / dt);
                        face_cell(&mut t, 0, PI, &o.grad, gpi);
                        cell_face(&mut t, 0, 0, &o.div, dt);
                    }
                    RegimeTag::T3_II_LAM_POS | RegimeTag::T3_II_LAM_ZERO => {
                        face_diag(&mut t, 0, 0, self.rho_f * m / dt);
                        face_diag(&mut t, 0, 1, self.rho_s / dt);
                        face_cell(&mut t, 0, PI, &o.grad, gpi);
                        cell_face(&mut t, 0, 0, &o.div, m * dt);
                        cell_face(&mut t, 0, 1, &o.div, dt);
                        if self.tag == RegimeTag::T3_II_LAM_POS {
                            face_diag(&mut t, 1, 1, 1.0);
                            face_diag(&mut t, 1, 0, -(1.0 - m));
                        } else {
                            let (shifted, b, _) = self.rel_ops.as_ref().unwrap();
                            face_diag(&mut t, 1, 1, self.rho_s / dt);
                            face_op(&mut t, 1, 0, b, -self.rho_s / dt);
                            face_cell(&mut t, 1, PI, &matmul(shifted, &o.grad), gpi);
                        }
                    }
                    RegimeTag::T3_III_KERNEL | RegimeTag::T3_III_ZERO => {
                        face_diag(&mut t, 0, 0, self.rho_f / dt);
                        face_diag(&mut t, 0, 1, self.rho_s * (1.0 - m) / dt);
                        face_cell(&mut t, 0, PI, &o.grad, gpi);
                        cell_face(&mut t, 0, 0, &o.div, dt);
                        cell_face(&mut t, 0, 1, &o.div, (1.0 - m) * dt);
                        if self.tag == RegimeTag::T3_III_KERNEL {
                            face_diag(&mut t, 1, 0, 1.0);
                            face_diag(&mut t, 1, 1, -m);
                        } else {
                            let (shifted, b, _) = self.rel_ops.as_ref().unwrap();
                            face_diag(&mut t, 1, 0, self.rho_f / dt);
                            face_op(&mut t, 1, 1, b, -self.rho_f / dt);
                            face_cell(&mut t, 1, Q, &matmul(shifted, &o.grad), 1.0 / m);
                        }
                    }
                    _ => {}
                }
            }
        }
        Ok(t.to_csr())
    }

    /// Advances `state` by one step with force F and optional sources at t_{n+1}.
    pub fn step(&self, st: &mut MacroState, force: ForceFn, sources: Option<&Sources>) -> Result<StepReport> {
        if st.step >= self.cfg.steps {
            return Err(Error::Config(format!("run already reached its {} steps", self.cfg.steps)));
        }
        let o = &self.ops;
        let l = &self.layout;
        let dt = self.cfg.dt;
        let m = self.m;
        let nn = st.step + 1;
        let t_new = nn as f64 * dt;
        let empty = Sources::default();
        let src = sources.unwrap_or(&empty);
        if st.force_history.is_empty() {
            let f0 = o.sample_split(&|x| force(x, 0.0));
            st.div_history.push(if self.tag.is_t2() { vec![0.0; o.nc] } else { Vec::new() });
            st.z_history.push(if self.face_kernel.is_some() { self.initial_z(&f0) } else { Vec::new() });
            st.force_history.push(if self.forcing_kernel.is_some() { f0 } else { Vec::new() });
        }
        let f_split = o.sample_split(&|x| force(x, t_new));
        let f_face = o.merge(&f_split);

        // base right-hand side (no memory endpoint)
        let mut base = vec![0.0; l.len()];
        let add_face = |rhs: &mut [f64], b: usize, x: &[f64], s: f64| {
            for (i, &f) in o.faces.from_dof.iter().enumerate() {
                rhs[l.face(b) + i] += s * x[f];
            }
        };
        let add_cell = |rhs: &mut [f64], k: usize, x: &[f64], s: f64| {
            for (c, v) in x.iter().enumerate() {
                rhs[l.cell(k) + c] += s * v;
            }
        };
        // memory pieces that do not depend on the new step
        let mut past_stress: Option<Vec<f64>> = None;
        let mut past_scalar: Option<Vec<f64>> = None;
        let mut past_face: Option<Vec<f64>> = None;
        let mut end_b2: Option<Matrix> = None;
        let mut end_a2 = 0.0;
        let mut end_face: Option<Matrix> = None;
        if self.memory == Memory::Kernel {
            if let (Some(b2), Some(a2)) = (&self.b2, &self.a2) {
                let wb = quadrature_matrices(b2, nn, dt)?;
                let wa = quadrature_matrices(a2, nn, dt)?;
                let d = self.cfg.dim;
                let mut stress = vec![zeros_matrix(d); o.nc];
                let mut scal = vec![0.0; o.nc];
                for j in 0..nn {
                    let g = &st.div_history[j];
                    for c in 0..o.nc {
                        for a in 0..d {
                            for b in 0..d {
                                stress[c][a][b] += wb[j][a][b] * g[c];
                            }
                        }
                        scal[c] += wa[j][0][0] * g[c];
                    }
                }
                past_stress = Some(o.stress_load(&stress));
                past_scalar = Some(scal);
                end_b2 = Some(wb[nn].clone());
                end_a2 = wa[nn][0][0];
            }
            if let Some(k) = &self.face_kernel {
                let w = quadrature_matrices(k, nn, dt)?;
                let mut acc = vec![0.0; o.nf];
                for j in 0..nn {
                    let part = o.apply_split(&w[j], &st.z_history[j]);
                    for (a, p) in acc.iter_mut().zip(part) {
                        *a += p;
                    }
                }
                past_face = Some(acc);
                end_face = Some(w[nn].clone());
            }
        }

        match self.tag {
            RegimeTag::T2_I | RegimeTag::T2_II_LAM_POS | RegimeTag::T2_II_LAM_ZERO => {
                let two = self.tag != RegimeTag::T2_I;
                let inertia_v = if two { self.rho_f * m } else { self.rho_hat };
                add_face(&mut base, 0, &st.v, inertia_v / dt);
                add_face(&mut base, 0, &f_face, self.rho_hat);
                if let Some(s) = &past_stress {
                    add_face(&mut base, 0, s, -1.0);
                }
                add_cell(&mut base, 0, &st.p, self.ap / dt);
                add_cell(&mut base, 0, &st.pi, self.ae / dt);
                add_cell(&mut base, 1, &st.p, self.ap / dt);
                if let Some(s) = &past_scalar {
                    add_cell(&mut base, 1, s, -1.0);
                }
                add_cell(&mut base, 2, &st.p, -self.c);
                if two {
                    add_face(&mut base, 0, &st.dw_s, self.rho_s / dt);
                    match self.tag {
                        RegimeTag::T2_II_LAM_POS => add_face(&mut base, 1, past_face.as_ref().unwrap(), 1.0),
                        _ => {
                            let (_, b, shifted) = self.rel_ops.as_ref().unwrap();
                            add_face(&mut base, 1, &st.dw_s, self.rho_s / dt);
                            add_face(&mut base, 1, &b.matvec(&st.v), -self.rho_s / dt);
                            add_face(&mut base, 1, &o.apply_split(shifted, &f_split), self.rho_s);
                        }
                    }
                }
            }
            RegimeTag::T3_IV => add_cell(&mut base, 2, &st.p, -self.c),
            _ => {
                let (rate0, rate1, disp0, disp1) = self.t3_fields(st);
                let div_w = match self.tag {
                    RegimeTag::T3_I => o.div.matvec(disp0),
                    RegimeTag::T3_II_LAM_POS | RegimeTag::T3_II_LAM_ZERO => {
                        lin(&o.div.matvec(disp0), m, &o.div.matvec(disp1), 1.0)
                    }
                    _ => lin(&o.div.matvec(disp0), 1.0, &o.div.matvec(disp1), 1.0 - m),
                };
                add_cell(&mut base, 0, &div_w, -1.0);
                add_cell(&mut base, 2, &st.p, -self.c);
                add_face(&mut base, 0, &f_face, self.rho_hat);
                match self.tag {
                    RegimeTag::T3_I => add_face(&mut base, 0, rate0, self.rho_hat / dt),
                    RegimeTag::T3_II_LAM_POS | RegimeTag::T3_II_LAM_ZERO => {
                        add_face(&mut base, 0, rate0, self.rho_f * m / dt);
                        add_face(&mut base, 0, rate1, self.rho_s / dt);
                        if self.tag == RegimeTag::T3_II_LAM_POS {
                            add_face(&mut base, 1, past_face.as_ref().unwrap(), 1.0);
                        } else {
                            let (_, b, shifted) = self.rel_ops.as_ref().unwrap();
                            add_face(&mut base, 1, rate1, self.rho_s / dt);
                            add_face(&mut base, 1, &b.matvec(rate0), -self.rho_s / dt);
                            add_face(&mut base, 1, &o.apply_split(shifted, &f_split), self.rho_s);
                        }
                    }
                    _ => {
                        add_face(&mut base, 0, rate0, self.rho_f / dt);
                        add_face(&mut base, 0, rate1, self.rho_s * (1.0 - m) / dt);
                        if self.tag == RegimeTag::T3_III_KERNEL {
                            add_face(&mut base, 1, past_face.as_ref().unwrap(), 1.0);
                        } else {
                            let (_, b, shifted) = self.rel_ops.as_ref().unwrap();
                            add_face(&mut base, 1, rate0, self.rho_f / dt);
                            add_face(&mut base, 1, &b.matvec(rate1), -self.rho_f / dt);
                            add_face(&mut base, 1, &o.apply_split(shifted, &f_split), self.rho_f);
                        }
                    }
                }
            }
        }
        if let Some(s) = &src.momentum {
            if l.nfb > 0 {
                add_face(&mut base, 0, s, 1.0);
            }
        }
        if let Some(s) = &src.relation {
            if l.nfb > 1 {
                add_face(&mut base, 1, s, 1.0);
            }
        }
        if let Some(s) = &src.continuity {
            add_cell(&mut base, 0, s, 1.0);
        }
        if let Some(s) = &src.state {
            if self.tag.is_t2() {
                add_cell(&mut base, 1, s, 1.0);
            }
        }

        // T3_IV: the face relation is explicit given π
        let f_conv = if self.tag == RegimeTag::T3_IV {
            let mut hist = st.force_history.clone();
            hist.push(f_split.clone());
            let k = self.forcing_kernel.as_ref().unwrap();
            let parts = convolve(k, &hist, dt)?;
            let mut f = o.merge(&parts);
            o.mask_boundary(&mut f);
            Some(f)
        } else {
            None
        };

        // Picard iteration on the memory endpoint
        let mut div_it = st.div_history.last().unwrap().clone();
        let mut z_it = st.z_history.last().unwrap().clone();
        let mut iterations = 0;
        let x = loop {
            iterations += 1;
            let mut rhs = base.clone();
            let mut u_iv = None;
            if self.memory == Memory::Kernel {
                if let Some(b2) = &end_b2 {
                    let stress: Vec<Matrix> = div_it
                        .iter()
                        .map(|&g| b2.iter().map(|r| r.iter().map(|v| v * g).collect()).collect())
                        .collect();
                    add_face(&mut rhs, 0, &o.stress_load(&stress), -1.0);
                    add_cell(&mut rhs, 1, &div_it, -end_a2);
                }
                if let Some(k0) = &end_face {
                    let e = o.apply_split(k0, &z_it);
                    match self.tag {
                        RegimeTag::T3_IV => {
                            let past = past_face.as_ref().unwrap();
                            let f = f_conv.as_ref().unwrap();
                            let mut u: Vec<f64> = (0..o.nf).map(|i| past[i] + e[i] + f[i]).collect();
                            o.mask_boundary(&mut u);
                            let wn = lin(&st.w, 1.0, &u, dt);
                            add_cell(&mut rhs, 0, &o.div.matvec(&wn), -1.0);
                            u_iv = Some(u);
                        }
                        _ => add_face(&mut rhs, 1, &e, 1.0),
                    }
                }
            }
            let (x, _) = self.solver.solve(&rhs)?;
            if self.memory == Memory::None {
                break (x, u_iv);
            }
            let (new_div, new_z) = self.memory_inputs(st, &x, &f_split);
            let scale = max_abs(&new_div).max(new_z.iter().map(|c| max_abs(c)).fold(0.0, f64::max)).max(1.0);
            let diff = max_abs_diff(&new_div, &div_it)
                .max(new_z.iter().zip(&z_it).map(|(a, b)| max_abs_diff(a, b)).fold(0.0, f64::max));
            div_it = new_div;
            z_it = new_z;
            if diff <= self.cfg.picard_tol * scale {
                break (x, u_iv);
            }
            if iterations >= self.cfg.picard_max_iter {
                return Err(Error::NoConvergence(format!(
                    "{} step {nn}: Picard iteration stalled at change {diff:.3e} after {iterations} iterations",
                    self.tag
                )));
            }
        };
        let (x, u_iv) = x;
        let (div_new, z_new) = self.memory_inputs(st, &x, &f_split);
        let p_old = st.p.clone();
        self.commit(st, &x, u_iv, t_new);
        let keep_div = self.tag.is_t2();
        let keep_z = self.face_kernel.is_some();
        st.div_history.push(if keep_div { div_new } else { Vec::new() });
        st.z_history.push(if keep_z { z_new } else { Vec::new() });
        st.force_history.push(if self.forcing_kernel.is_some() { f_split } else { Vec::new() });
        Ok(StepReport {
            step: nn,
            picard_iterations: iterations,
            relation_residual: self.relation_residual(st, &p_old),
            boundary_violation: [&st.v, &st.w, &st.w_s, &st.w_f, &st.dw, &st.dw_s, &st.dw_f]
                .iter()
                .map(|f| o.boundary_normal_max(f))
                .fold(0.0, f64::max),
        })
    }

    fn t3_fields<'a>(&self, st: &'a MacroState) -> (&'a Vec<f64>, &'a Vec<f64>, &'a Vec<f64>, &'a Vec<f64>) {
        match self.tag {
            RegimeTag::T3_I => (&st.dw, &st.dw, &st.w, &st.w),
            RegimeTag::T3_II_LAM_POS | RegimeTag::T3_II_LAM_ZERO => (&st.dw_f, &st.dw_s, &st.w_f, &st.w_s),
            _ => (&st.dw_f, &st.dw_s, &st.w_f, &st.w_s),
        }
    }

    /// z-type history entry at t = 0 (pressures and accelerations are zero).
    fn initial_z(&self, f0: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let s = match self.tag {
            RegimeTag::T2_II_LAM_POS | RegimeTag::T3_II_LAM_POS => self.rho_s,
            RegimeTag::T3_III_KERNEL => self.rho_f,
            _ => 0.0,
        };
        f0.iter().map(|c| c.iter().map(|v| s * v).collect()).collect()
    }

    fn face_block(&self, x: &[f64], b: usize) -> Vec<f64> {
        let l = &self.layout;
        self.ops.faces.scatter(&x[l.face(b)..l.face(b) + l.nint], self.ops.nf)
    }

    fn cell_block(&self, x: &[f64], k: usize) -> Vec<f64> {
        let l = &self.layout;
        x[l.cell(k)..l.cell(k) + l.nc].to_vec()
    }

    /// Memory inputs (div v, z-type field) implied by a trial solution.
    fn memory_inputs(
        &self,
        st: &MacroState,
        x: &[f64],
        f_split: &[Vec<f64>],
    ) -> (Vec<f64>, Vec<Vec<f64>>) {
        let o = &self.ops;
        let dt = self.cfg.dt;
        let nf = o.nf;
        let div = if self.tag.is_t2() {
            o.div.matvec(&self.face_block(x, 0))
        } else {
            vec![0.0; o.nc]
        };
        let z = match self.tag {
            RegimeTag::T2_II_LAM_POS | RegimeTag::T3_II_LAM_POS | RegimeTag::T3_III_KERNEL => {
                let (rate, old, rho, grad_of, gscale) = match self.tag {
                    RegimeTag::T2_II_LAM_POS => (self.face_block(x, 0), &st.v, self.rho_s, PI, 1.0 / (1.0 - self.m)),
                    RegimeTag::T3_II_LAM_POS => (self.face_block(x, 0), &st.dw_f, self.rho_s, PI, 1.0 / (1.0 - self.m)),
                    _ => (self.face_block(x, 1), &st.dw_s, self.rho_f, Q, 1.0 / self.m),
                };
                let mut g = o.grad.matvec(&self.cell_block(x, grad_of));
                o.mask_boundary(&mut g);
                let mut acc: Vec<f64> = (0..nf).map(|f| -gscale * g[f] - rho * (rate[f] - old[f]) / dt).collect();
                o.mask_boundary(&mut acc);
                let mut split = o.split(&acc);
                for (s, fs) in split.iter_mut().zip(f_split) {
                    for (v, fv) in s.iter_mut().zip(fs) {
                        *v += rho * fv;
                    }
                }
                split
            }
            RegimeTag::T3_IV => {
                let mut g = o.grad.matvec(&self.cell_block(x, PI));
                o.mask_boundary(&mut g);
                o.split(&g)
            }
            _ => vec![vec![0.0; nf]; self.cfg.dim],
        };
        (div, z)
    }

    fn commit(&self, st: &mut MacroState, x: &[f64], u_iv: Option<Vec<f64>>, t_new: f64) {
        let dt = self.cfg.dt;
        let m = self.m;
        let p = self.cell_block(x, P);
        let q = self.cell_block(x, Q);
        let pi = self.cell_block(x, PI);
        match self.tag {
            RegimeTag::T2_I => {
                let v = self.face_block(x, 0);
                st.w = lin(&st.w, 1.0, &v, dt);
                st.dw = v.clone();
                st.dw_s = v.iter().map(|x| (1.0 - m) * x).collect();
                st.w_s = st.w.iter().map(|x| (1.0 - m) * x).collect();
                st.v = v;
            }
            RegimeTag::T2_II_LAM_POS | RegimeTag::T2_II_LAM_ZERO => {
                let v = self.face_block(x, 0);
                let s = self.face_block(x, 1);
                st.w_s = lin(&st.w_s, 1.0, &s, dt);
                st.dw_s = s;
                st.v = v;
            }
            RegimeTag::T3_I => {
                let u = self.face_block(x, 0);
                st.w = lin(&st.w, 1.0, &u, dt);
                st.dw = u;
            }
            RegimeTag::T3_II_LAM_POS | RegimeTag::T3_II_LAM_ZERO => {
                let uf = self.face_block(x, 0);
                let s = self.face_block(x, 1);
                st.w_f = lin(&st.w_f, 1.0, &uf, dt);
                st.w_s = lin(&st.w_s, 1.0, &s, dt);
                st.dw_f = uf;
                st.dw_s = s;
                st.w = lin(&st.w_f, m, &st.w_s, 1.0);
                st.dw = lin(&st.dw_f, m, &st.dw_s, 1.0);
            }
            RegimeTag::T3_III_KERNEL | RegimeTag::T3_III_ZERO => {
                let af = self.face_block(x, 0);
                let us = self.face_block(x, 1);
                st.w_f = lin(&st.w_f, 1.0, &af, dt);
                st.w_s = lin(&st.w_s, 1.0, &us, dt);
                st.dw_f = af;
                st.dw_s = us;
                st.w = lin(&st.w_f, 1.0, &st.w_s, 1.0 - m);
                st.dw = lin(&st.dw_f, 1.0, &st.dw_s, 1.0 - m);
            }
            RegimeTag::T3_IV => {
                let u = u_iv.unwrap();
                st.w = lin(&st.w, 1.0, &u, dt);
                st.dw = u;
            }
        }
        st.p = p;
        st.q = q;
        st.pi = pi;
        st.step += 1;
        st.t = t_new;
    }

    fn relation_residual(&self, st: &MacroState, p_old: &[f64]) -> f64 {
        let mut r = 0.0f64;
        for c in 0..st.p.len() {
            let pdot = (st.p[c] - p_old[c]) / self.cfg.dt;
            let nu0 = self.coeffs.params.nu0.value().unwrap_or(0.0);
            let rel = st.q[c] - st.p[c] - nu0 * self.ap * pdot;
            r = r.max(rel.abs());
            if !self.tag.is_t2() {
                r = r.max((st.q[c] / self.m - st.pi[c] / (1.0 - self.m)).abs());
            }
        }
        r
    }

    /// Face field of a vector function: component normal to each face, zero
    /// on boundary-normal faces.
    pub fn sample_faces(&self, f: &dyn Fn([f64; 3]) -> [f64; 3]) -> Vec<f64> {
        let mut u = self.ops.merge(&self.ops.sample_split(f));
        self.ops.mask_boundary(&mut u);
        u
    }

    pub fn sample_cells(&self, f: &dyn Fn([f64; 3]) -> f64) -> Vec<f64> {
        self.ops.sample_cells(f)
    }

    pub fn divergence(&self, u: &[f64]) -> Vec<f64> {
        self.ops.div.matvec(u)
    }

    /// Faces that carry unknowns.
    pub fn interior_faces(&self) -> &[usize] {
        &self.ops.faces.from_dof
    }

    /// Residual of the space-discrete, time-continuous T2_I equations at the
    /// given fields; used as manufactured sources.
    pub fn t2_residual(&self, s: &T2Snapshot) -> Result<Sources> {
        let ops = self
            .t2
            .as_ref()
            .ok_or_else(|| Error::Config(format!("{} has no T2 operators", self.tag)))?;
        if self.tag != RegimeTag::T2_I {
            return Err(Error::Config("t2_residual covers T2_I only".into()));
        }
        let o = &self.ops;
        let nu0 = self.coeffs.params.nu0.value().unwrap_or(0.0);
        let q: Vec<f64> = s.p.iter().zip(s.dp).map(|(p, dp)| p + nu0 * self.ap * dp).collect();
        let qpi = lin(&q, 1.0, s.pi, 1.0);
        let div = o.div.matvec(s.v);
        let ka = ops.ka.matvec(s.v);
        let gb0 = ops.gb0.matvec(s.pi);
        let gb1 = ops.gb1.matvec(s.v);
        let conv = o.stress_load(s.conv_b);
        let g = o.grad.matvec(&qpi);
        let mut momentum: Vec<f64> = (0..o.nf)
            .map(|f| self.rho_hat * (s.dv[f] - s.force[f]) + ka[f] + gb0[f] + gb1[f] + conv[f] + g[f])
            .collect();
        o.mask_boundary(&mut momentum);
        let cd = ops.cd.matvec(s.v);
        let a0 = self.coeffs.a_f0.unwrap();
        let a1 = self.coeffs.a_f1.unwrap();
        let continuity = (0..o.nc).map(|c| self.ap * s.dp[c] + self.ae * s.dpi[c] + div[c]).collect();
        let state = (0..o.nc)
            .map(|c| self.ap * s.dp[c] + cd[c] + a0 * s.pi[c] + (a1 + self.m) * div[c] + s.conv_a[c])
            .collect();
        Ok(Sources {
            momentum: Some(momentum),
            relation: None,
            continuity: Some(continuity),
            state: Some(state),
        })
    }

    /// Runs all configured steps, calling `observe` after each.
    pub fn run(
        &self,
        force: ForceFn,
        mut observe: impl FnMut(&MacroState, &StepReport),
    ) -> Result<(MacroState, Vec<StepReport>)> {
        let mut st = self.initial_state();
        let mut reports = Vec::with_capacity(self.cfg.steps);
        for _ in 0..self.cfg.steps {
            let r = self.step(&mut st, force, None)?;
            observe(&st, &r);
            reports.push(r);
        }
        Ok((st, reports))
    }
}

fn lin(a: &[f64], sa: f64, b: &[f64], sb: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| sa * x + sb * y).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ExtendedParam::{self, Finite, Infinity};
    use crate::params::ScalingParams;

    fn iso(d: usize, s: f64) -> Matrix {
        (0..d).map(|i| (0..d).map(|j| if i == j { s } else { 0.0 }).collect()).collect()
    }

    fn decay(dt: f64, steps: usize, d: usize, s: f64) -> KernelSample {
        KernelSample::from_fn(dt, steps, move |t| iso(d, s * (-t).exp()), "synthetic")
    }

    fn params(tag: RegimeTag) -> ScalingParams {
        let (mu0, mu1, lambda1): (f64, ExtendedParam, ExtendedParam) = match tag {
            RegimeTag::T2_I => (1.0, Infinity, Infinity),
            RegimeTag::T2_II_LAM_POS => (1.0, Infinity, Finite(1.0)),
            RegimeTag::T2_II_LAM_ZERO => (1.0, Infinity, Finite(0.0)),
            RegimeTag::T3_I => (0.0, Infinity, Infinity),
            RegimeTag::T3_II_LAM_POS => (0.0, Infinity, Finite(1.0)),
            RegimeTag::T3_II_LAM_ZERO => (0.0, Infinity, Finite(0.0)),
            RegimeTag::T3_III_KERNEL => (0.0, Finite(1.0), Infinity),
            RegimeTag::T3_III_ZERO => (0.0, Finite(0.0), Infinity),
            RegimeTag::T3_IV => (0.0, Finite(1.0), Finite(1.0)),
        };
        ScalingParams {
            mu0: Finite(mu0),
            nu0: Finite(0.5),
            lambda0: Finite(0.0),
            tau0: Finite(1.0),
            p_star: Finite(2.0),
            eta0: Finite(1.0),
            mu1,
            lambda1,
            rho_f: 1.0,
            rho_s: 2.0,
            laws: None,
        }
    }

    fn synthetic(tag: RegimeTag, dt: f64, steps: usize) -> EffectiveCoefficients {
        let d = 2;
        let m = 0.4;
        let p = params(tag);
        assert_eq!(crate::params::classify_regime(&p).unwrap().tag, tag);
        let mut c = EffectiveCoefficients::new(tag, "synthetic".into(), d, m, p);
        c.A_f0 = Some(SymRank4Tensor::symmetric_identity(d));
        c.B_f0 = Some(iso(d, 0.1));
        c.B_f1_const = Some(iso(d, 0.05));
        c.C_f0 = Some(iso(d, 0.1));
        c.a_f0 = Some(0.2);
        c.a_f1 = Some(-m + 0.1);
        c.B_f2_kernel = Some(decay(dt, steps, d, 0.1));
        c.a_f2_kernel = Some(KernelSample::from_fn(dt, steps, |t| vec![vec![0.05 * (-t).exp()]], "a2"));
        c.B_s1_kernel = Some(decay(dt, steps, d, (1.0 - m) / 2.0));
        c.B_s2 = Some(iso(d, 0.3));
        c.K_f_kernel = Some(decay(dt, steps, d, m));
        c.B_f2_matrix = Some(iso(d, 0.2));
        c.B_pi_kernel = Some(decay(dt, steps, d, -0.1));
        c.forcing_kernel = Some(decay(dt, steps, d, 1.0));
        c
    }

    fn bump(x: [f64; 3], t: f64) -> [f64; 3] {
        let s = (std::f64::consts::PI * x[0]).sin() * (std::f64::consts::PI * x[1]).sin();
        [s * t, -0.5 * s * t * x[0], 0.0]
    }

    #[test]
    fn zero_force_gives_exact_zero_for_every_regime() {
        let cfg = MacroConfig::new(2, 6, 0.05, 0.5).unwrap();
        for tag in RegimeTag::ALL {
            let c = synthetic(tag, cfg.dt, cfg.steps);
            let s = MacroStepper::new(tag, &c, &cfg).unwrap();
            let (st, _) = s.run(&no_force, |st, _| assert!(st.is_zero(), "{tag}")).unwrap();
            assert!(st.is_zero());
            assert_eq!(st.step, cfg.steps);
        }
    }

    #[test]
    fn forced_runs_keep_boundary_and_pressure_relations() {
        let cfg = MacroConfig::new(2, 6, 0.05, 0.5).unwrap();
        for tag in RegimeTag::ALL {
            let c = synthetic(tag, cfg.dt, cfg.steps);
            let s = MacroStepper::new(tag, &c, &cfg).unwrap();
            let (st, reps) = s.run(&bump, |_, _| {}).unwrap();
            assert!(!st.is_zero(), "{tag}");
            for r in &reps {
                assert!(r.boundary_violation == 0.0, "{tag}");
                assert!(r.relation_residual <= 1e-10, "{tag}: {}", r.relation_residual);
                assert!(r.picard_iterations <= 50);
            }
            let fin = [&st.v, &st.w, &st.dw, &st.p, &st.q, &st.pi]
                .iter()
                .all(|f| f.iter().all(|x| x.is_finite()));
            assert!(fin, "{tag}");
        }
    }

    #[test]
    fn kernel_grid_mismatch_is_reported() {
        let cfg = MacroConfig::new(2, 4, 0.05, 0.5).unwrap();
        let c = synthetic(RegimeTag::T2_II_LAM_POS, 0.1, 5);
        assert!(matches!(
            MacroStepper::new(RegimeTag::T2_II_LAM_POS, &c, &cfg),
            Err(Error::KernelGridMismatch(_))
        ));
    }

    #[test]
    fn t3_iv_without_memory_integrates_the_forcing_term() {
        // B^π ≡ 0: w(t) = ∫ f, with f = ∫ b^F(t−τ) F(τ) dτ
        let cfg = MacroConfig::new(2, 4, 0.05, 0.5).unwrap();
        let mut c = synthetic(RegimeTag::T3_IV, cfg.dt, cfg.steps);
        c.B_pi_kernel = Some(KernelSample::zeros(cfg.dt, cfg.steps, 2, 2, "zero"));
        let s = MacroStepper::new(RegimeTag::T3_IV, &c, &cfg).unwrap();
        let force = |_: [f64; 3], t: f64| [1.0 + t, 0.0, 0.0];
        let (st, _) = s.run(&force, |_, _| {}).unwrap();
        let k = c.forcing_kernel.as_ref().unwrap();
        let mut w = 0.0;
        for n in 1..=cfg.steps {
            let hist: Vec<Vec<Vec<f64>>> =
                (0..=n).map(|j| vec![vec![1.0 + j as f64 * cfg.dt], vec![0.0]]).collect();
            w += cfg.dt * convolve(k, &hist, cfg.dt).unwrap()[0][0];
        }
        let g = s.grid();
        let f = g.faces_of_axis(0).find(|&f| !g.is_boundary_normal(f)).unwrap();
        assert!((st.w[f] - w).abs() < 1e-12, "{} vs {w}", st.w[f]);
    }

    #[test]
    fn zero_b_s2_reduces_solid_balance() {
        // ρ_s ∂²w^s/∂t² = (1−m)(−∇π/(1−m) + ρ_s F) when B^s₂ = 0
        let cfg = MacroConfig::new(2, 5, 0.05, 0.2).unwrap();
        let mut c = synthetic(RegimeTag::T2_II_LAM_ZERO, cfg.dt, cfg.steps);
        c.B_s2 = Some(iso(2, 0.0));
        let s = MacroStepper::new(RegimeTag::T2_II_LAM_ZERO, &c, &cfg).unwrap();
        let mut st = s.initial_state();
        let old = st.clone();
        s.step(&mut st, &bump, None).unwrap();
        let o = &s.ops;
        let mut g = o.grad.matvec(&st.pi);
        o.mask_boundary(&mut g);
        let f = o.merge(&o.sample_split(&|x| bump(x, cfg.dt)));
        for &face in &o.faces.from_dof {
            let lhs = 2.0 * (st.dw_s[face] - old.dw_s[face]) / cfg.dt;
            let rhs = -g[face] + 0.6 * 2.0 * f[face];
            assert!((lhs - rhs).abs() < 1e-9 * (1.0 + rhs.abs()));
        }
    }
}
