//! Fine-scale solver of the ε-problem on Ω = (0,1)² and the diagnostics used
//! to compare it with homogenized runs.
//!
//! The displacement w lives on the interior faces of a walled grid (w = 0 on
//! ∂Ω). Pressures are algebraic in div w and div ∂w/∂t and are eliminated,
//! leaving
//!
//! M ẅ + C ẇ + K w = L,
//!
//! with C = α_μ∫χD:D + α_ν∫χ div div and K = α_λ∫(1−χ)D:D + ∫(α_pχ + α_η(1−χ)) div div.
//! The implicit midpoint rule makes ½uᵀMu + ½wᵀKw change by exactly the work
//! of L minus the viscous dissipation.

use serde::{Deserialize, Serialize};

use crate::cell::strain::WeightedStrain;
use crate::error::{Error, Result};
use crate::geometry::PorousDomain;
use crate::grid::{apply_row, DofMap, FaceRef, Row, StaggeredGrid};
use crate::macroscale::ForceFn;
use crate::params::RawScalings;
use crate::sparse::{Csr, LinearSolver, SolverOptions, Triplets};

/// Largest fine grid per side.
pub const MAX_DNS_N: usize = 64;

/// Relative tolerance of the discrete energy balance.
pub const ENERGY_BALANCE_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DnsState {
    pub t: f64,
    pub step: usize,
    /// Displacement on all faces.
    pub w: Vec<f64>,
    /// ∂w/∂t on all faces.
    pub u: Vec<f64>,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub pi: Vec<f64>,
}

/// Energy bookkeeping of one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepEnergy {
    pub energy: f64,
    pub work: f64,
    pub dissipation: f64,
}

/// Velocity and pressures at t_1..t_N on a walled grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldSeries {
    pub dim: usize,
    pub n: usize,
    pub dt: f64,
    pub steps: usize,
    pub force_label: String,
    pub velocity: Vec<Vec<f64>>,
    pub p: Vec<Vec<f64>>,
    pub pi: Vec<Vec<f64>>,
}

impl FieldSeries {
    pub fn new(dim: usize, n: usize, dt: f64, force_label: &str) -> Self {
        FieldSeries {
            dim,
            n,
            dt,
            steps: 0,
            force_label: force_label.into(),
            velocity: Vec::new(),
            p: Vec::new(),
            pi: Vec::new(),
        }
    }

    pub fn push(&mut self, velocity: Vec<f64>, p: Vec<f64>, pi: Vec<f64>) {
        self.velocity.push(velocity);
        self.p.push(p);
        self.pi.push(pi);
        self.steps += 1;
    }

    pub fn t_final(&self) -> f64 {
        self.dt * self.steps as f64
    }
}

/// Left-hand sides of the a-priori estimate and the pressure bound for one run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ScaledNorms {
    /// max_t √α_η ‖div ∂w‖ over Ω_s
    pub div_rate_solid: f64,
    /// max_t √α_λ ‖∇∂w‖ over Ω_s
    pub grad_rate_solid: f64,
    /// max_t √α_τ ‖∂²w‖ over Ω
    pub accel: f64,
    /// max_t √α_p ‖div ∂w‖ over Ω_f
    pub div_rate_fluid: f64,
    /// √α_μ ‖χ∇∂²w‖ over Ω_T
    pub grad_accel_fluid: f64,
    /// √α_ν ‖χ div ∂²w‖ over Ω_T
    pub div_accel_fluid: f64,
    /// ‖q‖ + ‖p‖ + (α_ν/α_p)‖∂p‖ over Ω_T
    pub pressure: f64,
}

impl ScaledNorms {
    pub fn entries(&self) -> [(&'static str, f64); 7] {
        [
            ("div_rate_solid", self.div_rate_solid),
            ("grad_rate_solid", self.grad_rate_solid),
            ("accel", self.accel),
            ("div_rate_fluid", self.div_rate_fluid),
            ("grad_accel_fluid", self.grad_accel_fluid),
            ("div_accel_fluid", self.div_accel_fluid),
            ("pressure", self.pressure),
        ]
    }

    /// Left-hand side of the combined estimate.
    pub fn total(&self) -> f64 {
        self.div_rate_solid
            + self.grad_rate_solid
            + self.accel
            + self.div_rate_fluid
            + self.grad_accel_fluid
            + self.div_accel_fluid
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DnsTrajectory {
    pub eps: f64,
    pub series: FieldSeries,
    /// Energy, cumulative work and cumulative dissipation at t_0..t_N.
    pub energy: Vec<f64>,
    pub work: Vec<f64>,
    pub dissipated: Vec<f64>,
    /// Largest |E_n − E_0 − W_n + D_n| relative to max(E_n, W_n, D_n).
    pub max_balance_error: f64,
    pub norms: ScaledNorms,
    pub final_state: DnsState,
}

/// One gradient component sample of a face field.
struct GradSample {
    row: Row,
    cells: Vec<usize>,
    volume: f64,
}

/// ∂_b u_a samples: cell centres for b = a, edges otherwise.
fn gradient_samples(g: &StaggeredGrid) -> Vec<GradSample> {
    let mut out = Vec::new();
    let h = g.h;
    let push = |row: &mut Row, r: FaceRef, c: f64| {
        if let FaceRef::Face(i, s) = r {
            row.push((i, c * s));
        }
    };
    for a in 0..g.dim {
        for cell in 0..g.ncells() {
            out.push(GradSample {
                row: g.diag_strain_row(cell, a),
                cells: vec![cell],
                volume: 1.0,
            });
        }
        for b in (0..g.dim).filter(|&b| b != a) {
            for e in g.edges(a, b) {
                let c = crate::grid::to_i64(e);
                let mut cb = c;
                cb[b] -= 1;
                let mut row = Row::new();
                push(&mut row, g.face(a, c), 1.0 / h);
                push(&mut row, g.face(a, cb), -1.0 / h);
                out.push(GradSample {
                    row,
                    cells: g.edge_cells(e, a, b),
                    volume: g.edge_boundary_factor(e, a, b),
                });
            }
        }
    }
    out
}

impl GradSample {
    fn weight(&self, cell_weight: &[f64]) -> f64 {
        if self.cells.is_empty() {
            return 0.0;
        }
        self.volume * self.cells.iter().map(|&c| cell_weight[c]).sum::<f64>() / self.cells.len() as f64
    }
}

fn weighted_grad_sq(samples: &[GradSample], weight: &[f64], u: &[f64], vol: f64) -> f64 {
    samples
        .iter()
        .map(|s| {
            let w = s.weight(weight);
            if w == 0.0 {
                return 0.0;
            }
            let d = apply_row(&s.row, u);
            w * d * d
        })
        .sum::<f64>()
        * vol
}

fn weighted_sq(weight: &[f64], x: &[f64], vol: f64) -> f64 {
    weight.iter().zip(x).map(|(w, v)| w * v * v).sum::<f64>() * vol
}

fn check_domain(domain: &PorousDomain) -> Result<StaggeredGrid> {
    if domain.dim != 2 {
        return Err(Error::ResolutionMismatch(format!(
            "the fine-scale solver is 2D only, got a {}D domain",
            domain.dim
        )));
    }
    if domain.n > MAX_DNS_N {
        return Err(Error::ResolutionMismatch(format!(
            "fine grid {}² exceeds the {}² cap",
            domain.n, MAX_DNS_N
        )));
    }
    let g = StaggeredGrid::walled(2, domain.n);
    if domain.chi.len() != g.ncells() {
        return Err(Error::ResolutionMismatch(format!(
            "indicator has {} entries for {} cells",
            domain.chi.len(),
            g.ncells()
        )));
    }
    Ok(g)
}

/// Implicit midpoint solver of the ε-problem at fixed ε.
pub struct DnsSolver {
    grid: StaggeredGrid,
    dofs: DofMap,
    chi: Vec<f64>,
    eps: f64,
    raw: RawScalings,
    rho_face: Vec<f64>,
    dt: f64,
    steps: usize,
    mass: Vec<f64>,
    c: Csr,
    k: Csr,
    div: Csr,
    solver: LinearSolver,
    grad: Vec<GradSample>,
}

impl DnsSolver {
    pub fn new(
        domain: &PorousDomain,
        raw: RawScalings,
        rho_f: f64,
        rho_s: f64,
        dt: f64,
        steps: usize,
    ) -> Result<Self> {
        let grid = check_domain(domain)?;
        let named = [
            ("alpha_mu", raw.alpha_mu),
            ("alpha_nu", raw.alpha_nu),
            ("alpha_lambda", raw.alpha_lambda),
            ("alpha_tau", raw.alpha_tau),
            ("alpha_p", raw.alpha_p),
            ("alpha_eta", raw.alpha_eta),
        ];
        for (name, v) in named {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::ConstraintViolation(format!(
                    "{name} must be finite and positive at fixed ε, got {v}"
                )));
            }
        }
        if !(rho_f > 0.0 && rho_s > 0.0) {
            return Err(Error::ConstraintViolation("densities must be positive".into()));
        }
        if !(dt > 0.0 && dt.is_finite()) || steps == 0 {
            return Err(Error::Config(format!("need dt > 0 and steps > 0 (dt = {dt}, steps = {steps})")));
        }
        let nf = grid.nfaces();
        let mask: Vec<bool> = (0..nf).map(|f| !grid.is_boundary_normal(f)).collect();
        let dofs = DofMap::from_mask(&mask);
        let chi: Vec<f64> = domain.chi.iter().map(|&c| c as f64).collect();
        let solid: Vec<f64> = chi.iter().map(|c| 1.0 - c).collect();
        let rho_cell: Vec<f64> = chi.iter().map(|c| c * rho_f + (1.0 - c) * rho_s).collect();
        let rho_face: Vec<f64> = (0..nf)
            .map(|f| {
                let (lo, hi) = grid.face_cells(f);
                let r: Vec<f64> = [lo, hi].into_iter().flatten().map(|c| rho_cell[c]).collect();
                r.iter().sum::<f64>() / r.len() as f64
            })
            .collect();
        let vol = grid.vol();
        let mass: Vec<f64> = dofs.from_dof.iter().map(|&f| raw.alpha_tau * rho_face[f] * vol).collect();
        let div = grid.div_matrix();
        let div_dofs = Csr::from_rows(
            dofs.len(),
            &(0..grid.ncells()).map(|c| dofs.restrict_row(&grid.div_row(c))).collect::<Vec<_>>(),
        );
        let div_gram = |w: &[f64], t: &mut Triplets| {
            for (c, &wc) in w.iter().enumerate() {
                if wc == 0.0 {
                    continue;
                }
                let r: Vec<(usize, f64)> = div_dofs.row(c).collect();
                for &(i, vi) in &r {
                    for &(j, vj) in &r {
                        t.push(i, j, wc * vol * vi * vj);
                    }
                }
            }
        };
        let nd = dofs.len();
        let c = {
            let mut t = Triplets::new(nd, nd);
            WeightedStrain::new(&grid, &chi, None).add_gram(&dofs, &mut t, 0, raw.alpha_mu);
            let w: Vec<f64> = chi.iter().map(|c| raw.alpha_nu * c).collect();
            div_gram(&w, &mut t);
            t.to_csr()
        };
        let k = {
            let mut t = Triplets::new(nd, nd);
            WeightedStrain::new(&grid, &solid, None).add_gram(&dofs, &mut t, 0, raw.alpha_lambda);
            let w: Vec<f64> = chi
                .iter()
                .map(|c| raw.alpha_p * c + raw.alpha_eta * (1.0 - c))
                .collect();
            div_gram(&w, &mut t);
            t.to_csr()
        };
        let lhs = {
            let mut t = Triplets::new(nd, nd);
            for (i, m) in mass.iter().enumerate() {
                t.push(i, i, m / dt);
            }
            t.add_block(&c, 0, 0, 0.5);
            t.add_block(&k, 0, 0, 0.25 * dt);
            t.to_csr()
        };
        let solver = LinearSolver::new(lhs, SolverOptions::default())?;
        let grad = gradient_samples(&grid);
        Ok(DnsSolver {
            grid,
            dofs,
            chi,
            eps: domain.eps,
            raw,
            rho_face,
            dt,
            steps,
            mass,
            c,
            k,
            div,
            solver,
            grad,
        })
    }

    pub fn grid(&self) -> &StaggeredGrid {
        &self.grid
    }

    pub fn initial_state(&self) -> DnsState {
        let (nf, nc) = (self.grid.nfaces(), self.grid.ncells());
        DnsState {
            t: 0.0,
            step: 0,
            w: vec![0.0; nf],
            u: vec![0.0; nf],
            p: vec![0.0; nc],
            q: vec![0.0; nc],
            pi: vec![0.0; nc],
        }
    }

    /// Load ∫ ρ̄ F·φ on the unknowns at time t.
    pub fn load(&self, force: ForceFn, t: f64) -> Vec<f64> {
        let vol = self.grid.vol();
        self.dofs
            .from_dof
            .iter()
            .map(|&f| {
                let a = self.grid.face_axis(f);
                vol * self.rho_face[f] * force(self.grid.face_center(f), t)[a]
            })
            .collect()
    }

    pub fn energy(&self, st: &DnsState) -> f64 {
        let u = self.dofs.gather(&st.u);
        let w = self.dofs.gather(&st.w);
        let ke: f64 = u.iter().zip(&self.mass).map(|(v, m)| m * v * v).sum();
        let kw = self.k.matvec(&w);
        0.5 * ke + 0.5 * kw.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
    }

    /// p, q, π from the state equations.
    pub fn pressures(&self, w: &[f64], u: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let dw = self.div.matvec(w);
        let du = self.div.matvec(u);
        let r = &self.raw;
        let p: Vec<f64> = self.chi.iter().zip(&dw).map(|(c, d)| -c * r.alpha_p * d).collect();
        let q: Vec<f64> = (0..self.chi.len())
            .map(|i| p[i] - self.chi[i] * r.alpha_nu * du[i])
            .collect();
        let pi: Vec<f64> = self
            .chi
            .iter()
            .zip(&dw)
            .map(|(c, d)| -(1.0 - c) * r.alpha_eta * d)
            .collect();
        (p, q, pi)
    }

    /// One step with a given generalized load at the midpoint.
    pub fn step_with_load(&self, st: &mut DnsState, load: &[f64]) -> Result<StepEnergy> {
        let dt = self.dt;
        let u = self.dofs.gather(&st.u);
        let w = self.dofs.gather(&st.w);
        let cu = self.c.matvec(&u);
        let kw = self.k.matvec(&w);
        let ku = self.k.matvec(&u);
        let rhs: Vec<f64> = (0..u.len())
            .map(|i| self.mass[i] / dt * u[i] - 0.5 * cu[i] - 0.25 * dt * ku[i] - kw[i] + load[i])
            .collect();
        let (u_new, _) = self.solver.solve(&rhs)?;
        let mid: Vec<f64> = u.iter().zip(&u_new).map(|(a, b)| 0.5 * (a + b)).collect();
        let w_new: Vec<f64> = w.iter().zip(&mid).map(|(a, m)| a + dt * m).collect();
        let cm = self.c.matvec(&mid);
        let dissipation = dt * mid.iter().zip(&cm).map(|(a, b)| a * b).sum::<f64>();
        let work = dt * mid.iter().zip(load).map(|(a, b)| a * b).sum::<f64>();
        let nf = self.grid.nfaces();
        st.u = self.dofs.scatter(&u_new, nf);
        st.w = self.dofs.scatter(&w_new, nf);
        let (p, q, pi) = self.pressures(&st.w, &st.u);
        st.p = p;
        st.q = q;
        st.pi = pi;
        st.step += 1;
        st.t = st.step as f64 * dt;
        Ok(StepEnergy {
            energy: self.energy(st),
            work,
            dissipation,
        })
    }

    pub fn step(&self, st: &mut DnsState, force: ForceFn) -> Result<StepEnergy> {
        let t_mid = (st.step as f64 + 0.5) * self.dt;
        let load = self.load(force, t_mid);
        self.step_with_load(st, &load)
    }

    /// Runs all steps, recording energies, the scaled norms and the field series.
    pub fn run(&self, force: ForceFn, force_label: &str) -> Result<DnsTrajectory> {
        let mut st = self.initial_state();
        let mut series = FieldSeries::new(2, self.grid.n, self.dt, force_label);
        let mut energy = vec![self.energy(&st)];
        let mut work = vec![0.0];
        let mut dissipated = vec![0.0];
        let mut max_balance_error: f64 = 0.0;
        let r = self.raw;
        let vol = self.grid.vol();
        let solid: Vec<f64> = self.chi.iter().map(|c| 1.0 - c).collect();
        let mut norms = ScaledNorms::default();
        let (mut ga, mut da, mut pq, mut pp, mut pdp) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for _ in 0..self.steps {
            let u_old = st.u.clone();
            let p_old = st.p.clone();
            let e = self.step(&mut st, force)?;
            energy.push(e.energy);
            work.push(work.last().unwrap() + e.work);
            dissipated.push(dissipated.last().unwrap() + e.dissipation);
            let (en, wn, dn) = (e.energy, *work.last().unwrap(), *dissipated.last().unwrap());
            let scale = en.max(wn.abs()).max(dn).max(f64::MIN_POSITIVE);
            max_balance_error = max_balance_error.max((en - energy[0] - wn + dn).abs() / scale);

            let accel: Vec<f64> = st.u.iter().zip(&u_old).map(|(a, b)| (a - b) / self.dt).collect();
            let du = self.div.matvec(&st.u);
            let dacc = self.div.matvec(&accel);
            let acc_sq: f64 = self.dofs.from_dof.iter().map(|&f| accel[f] * accel[f]).sum::<f64>() * vol;
            norms.div_rate_solid = norms.div_rate_solid.max((r.alpha_eta * weighted_sq(&solid, &du, vol)).sqrt());
            norms.grad_rate_solid = norms
                .grad_rate_solid
                .max((r.alpha_lambda * weighted_grad_sq(&self.grad, &solid, &st.u, vol)).sqrt());
            norms.accel = norms.accel.max((r.alpha_tau * acc_sq).sqrt());
            norms.div_rate_fluid = norms.div_rate_fluid.max((r.alpha_p * weighted_sq(&self.chi, &du, vol)).sqrt());
            ga += self.dt * weighted_grad_sq(&self.grad, &self.chi, &accel, vol);
            da += self.dt * weighted_sq(&self.chi, &dacc, vol);
            let ones = vec![1.0; st.p.len()];
            pq += self.dt * weighted_sq(&ones, &st.q, vol);
            pp += self.dt * weighted_sq(&ones, &st.p, vol);
            let dp: Vec<f64> = st.p.iter().zip(&p_old).map(|(a, b)| (a - b) / self.dt).collect();
            pdp += self.dt * weighted_sq(&ones, &dp, vol);
            series.push(st.u.clone(), st.p.clone(), st.pi.clone());
        }
        norms.grad_accel_fluid = (r.alpha_mu * ga).sqrt();
        norms.div_accel_fluid = (r.alpha_nu * da).sqrt();
        norms.pressure = pq.sqrt() + pp.sqrt() + r.alpha_nu / r.alpha_p * pdp.sqrt();
        if max_balance_error > ENERGY_BALANCE_TOL {
            return Err(Error::NoConvergence(format!(
                "discrete energy balance violated by {max_balance_error:.3e}"
            )));
        }
        Ok(DnsTrajectory {
            eps: self.eps,
            series,
            energy,
            work,
            dissipated,
            max_balance_error,
            norms,
            final_state: st,
        })
    }
}

/// Pressures renormalized with β^ε = ⟨χ div w⟩_Ω so that each has zero mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenormalizedPressures {
    pub beta: f64,
    pub p: Vec<f64>,
    pub pi: Vec<f64>,
    pub mean_p: f64,
    pub mean_pi: f64,
}

/// p = α_p(β χ/m − χ div w), π = −α_η(β(1−χ)/(1−m) + (1−χ) div w).
pub fn renormalized_pressures(domain: &PorousDomain, raw: &RawScalings, w: &[f64]) -> Result<RenormalizedPressures> {
    let g = check_domain(domain)?;
    if w.len() != g.nfaces() {
        return Err(Error::ResolutionMismatch(format!(
            "displacement has {} entries for {} faces",
            w.len(),
            g.nfaces()
        )));
    }
    let m = domain.porosity;
    if !(m > 0.0 && m < 1.0) {
        return Err(Error::ConstraintViolation(format!(
            "renormalization needs both phases, porosity is {m}"
        )));
    }
    let vol = g.vol();
    let div = g.div_matrix().matvec(w);
    let chi: Vec<f64> = domain.chi.iter().map(|&c| c as f64).collect();
    let beta: f64 = chi.iter().zip(&div).map(|(c, d)| c * d).sum::<f64>() * vol;
    let p: Vec<f64> = chi.iter().zip(&div).map(|(c, d)| raw.alpha_p * (beta * c / m - c * d)).collect();
    let pi: Vec<f64> = chi
        .iter()
        .zip(&div)
        .map(|(c, d)| -raw.alpha_eta * (beta * (1.0 - c) / (1.0 - m) + (1.0 - c) * d))
        .collect();
    let mean_p = p.iter().sum::<f64>() * vol;
    let mean_pi = pi.iter().sum::<f64>() * vol;
    Ok(RenormalizedPressures {
        beta,
        p,
        pi,
        mean_p,
        mean_pi,
    })
}

/// A harmonic extension and its norm ratios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Extension {
    pub field: Vec<f64>,
    /// ‖σ‖_Ω / ‖ψ‖ over the source phase.
    pub l2_ratio: f64,
    /// ‖∇σ‖_Ω / ‖∇ψ‖ over the source phase; 0 when both vanish.
    pub grad_ratio: f64,
}

/// num/den with values below `floor` treated as zero, 0/0 = 0.
fn ratio(num: f64, den: f64, floor: f64) -> f64 {
    if den <= floor {
        if num <= floor {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        num / den
    }
}

/// Extends a face field from the faces surrounded by `phase` cells into the
/// other faces by a discrete Laplace problem per component (Neumann at the walls).
fn extend(domain: &PorousDomain, field: &[f64], phase: u8) -> Result<Extension> {
    let g = check_domain(domain)?;
    let nf = g.nfaces();
    if field.len() != nf {
        return Err(Error::ResolutionMismatch(format!(
            "field has {} entries for {} faces",
            field.len(),
            nf
        )));
    }
    let known: Vec<bool> = (0..nf)
        .map(|f| {
            let (lo, hi) = g.face_cells(f);
            [lo, hi].into_iter().flatten().all(|c| domain.chi[c] == phase)
        })
        .collect();
    let unknown = DofMap::from_mask(&known.iter().map(|k| !k).collect::<Vec<_>>());
    let n = g.n as i64;
    let mut t = Triplets::new(unknown.len(), unknown.len());
    let mut rhs = vec![0.0; unknown.len()];
    for (i, &f) in unknown.from_dof.iter().enumerate() {
        let (a, c) = g.face_coords(f);
        let c = crate::grid::to_i64(c);
        let mut diag = 0.0;
        for b in 0..g.dim {
            let hi = if b == a { n } else { n - 1 };
            for s in [-1i64, 1] {
                let mut q = c;
                q[b] += s;
                if q[b] < 0 || q[b] > hi {
                    continue;
                }
                let FaceRef::Face(nb, _) = g.face(a, q) else { continue };
                diag += 1.0;
                match unknown.to_dof[nb] {
                    Some(j) => t.push(i, j, -1.0),
                    None => rhs[i] += field[nb],
                }
            }
        }
        t.push(i, i, diag);
    }
    let mut out: Vec<f64> = (0..nf).map(|f| if known[f] { field[f] } else { 0.0 }).collect();
    if !unknown.is_empty() {
        let solver = LinearSolver::new(t.to_csr(), SolverOptions::default())?;
        let (x, _) = solver.solve(&rhs)?;
        for (i, &f) in unknown.from_dof.iter().enumerate() {
            out[f] = x[i];
        }
    }
    let vol = g.vol();
    let src_sq: f64 = (0..nf).filter(|&f| known[f]).map(|f| field[f] * field[f]).sum::<f64>() * vol;
    let all_sq: f64 = out.iter().map(|v| v * v).sum::<f64>() * vol;
    // wall edges mirror the field, which is not zero here
    let samples: Vec<GradSample> = gradient_samples(&g).into_iter().filter(|s| s.volume == 1.0).collect();
    let grad_all: f64 = samples.iter().map(|s| s.volume * apply_row(&s.row, &out).powi(2)).sum::<f64>() * vol;
    let grad_src: f64 = samples
        .iter()
        .filter(|s| s.row.iter().all(|&(f, _)| known[f]))
        .map(|s| s.volume * apply_row(&s.row, &out).powi(2))
        .sum::<f64>()
        * vol;
    Ok(Extension {
        field: out,
        l2_ratio: ratio(all_sq.sqrt(), src_sq.sqrt(), 0.0),
        grad_ratio: ratio(grad_all.sqrt(), grad_src.sqrt(), 1e-10 * all_sq.sqrt() / g.h),
    })
}

/// Extends a solid-side face field to Ω.
pub fn extend_solid(domain: &PorousDomain, field: &[f64]) -> Result<Extension> {
    extend(domain, field, 0)
}

/// Extends a fluid-side face field (e.g. ∂w/∂t in the pores) to Ω.
pub fn extend_fluid(domain: &PorousDomain, field: &[f64]) -> Result<Extension> {
    extend(domain, field, 1)
}

/// Cell gradient energy Σ|∇φ|² with φ = 0 outside Ω.
fn cell_grad_sq(g: &StaggeredGrid, phi: &[f64]) -> f64 {
    let mut s = 0.0;
    for f in 0..g.nfaces() {
        let (lo, hi) = g.face_cells(f);
        let a = lo.map_or(0.0, |c| phi[c]);
        let b = hi.map_or(0.0, |c| phi[c]);
        let d = (b - a) / g.h;
        s += d * d;
    }
    s * g.vol()
}

/// ∫|φ|² / (ε² ∫|∇φ|²) for a cell field supported on fluid voxels.
pub fn check_fp_inequality(domain: &PorousDomain, phi: &[f64]) -> Result<f64> {
    let g = check_domain(domain)?;
    if phi.len() != g.ncells() {
        return Err(Error::ResolutionMismatch(format!(
            "field has {} entries for {} cells",
            phi.len(),
            g.ncells()
        )));
    }
    if phi.iter().zip(&domain.chi).any(|(&v, &c)| c == 0 && v != 0.0) {
        return Err(Error::ConstraintViolation("field must vanish on solid voxels".into()));
    }
    let l2: f64 = phi.iter().map(|v| v * v).sum::<f64>() * g.vol();
    if l2 == 0.0 {
        return Ok(0.0);
    }
    let grad = cell_grad_sq(&g, phi);
    if grad == 0.0 {
        return Err(Error::ZeroGradient("nonzero field with zero gradient".into()));
    }
    Ok(l2 / (domain.eps * domain.eps * grad))
}

/// Solution of −Δφ = 1 in the fluid voxels with φ = 0 on solid voxels and outside Ω.
pub fn fp_test_field(domain: &PorousDomain) -> Result<Vec<f64>> {
    let g = check_domain(domain)?;
    let fluid = DofMap::from_mask(&domain.chi.iter().map(|&c| c == 1).collect::<Vec<_>>());
    let mut out = vec![0.0; g.ncells()];
    if fluid.is_empty() {
        return Ok(out);
    }
    let mut t = Triplets::new(fluid.len(), fluid.len());
    let h2 = g.h * g.h;
    for (i, &c) in fluid.from_dof.iter().enumerate() {
        let cc = crate::grid::to_i64(g.cell_coords(c));
        for a in 0..g.dim {
            for s in [-1i64, 1] {
                let mut q = cc;
                q[a] += s;
                t.push(i, i, 1.0 / h2);
                if let Some(nb) = g.cell(q) {
                    if let Some(j) = fluid.to_dof[nb] {
                        t.push(i, j, -1.0 / h2);
                    }
                }
            }
        }
    }
    let solver = LinearSolver::new(t.to_csr(), SolverOptions::default())?;
    let (x, _) = solver.solve(&vec![1.0; fluid.len()])?;
    for (i, &c) in fluid.from_dof.iter().enumerate() {
        out[c] = x[i];
    }
    Ok(out)
}

/// Per-ε diagnostics of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateEntry {
    pub eps: f64,
    pub norms: ScaledNorms,
    pub fp_ratio: f64,
    /// Extension of the final solid displacement.
    pub extension_l2_ratio: f64,
    pub extension_grad_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub entries: Vec<EstimateEntry>,
    /// Largest value of each norm over the sweep.
    pub sweep_max: ScaledNorms,
    /// Every norm's sweep maximum is at most twice its value at the first ε.
    pub bounded: bool,
}

/// Builds the estimate report; `runs[k]` must come from `domains[k]`.
pub fn estimate_report(domains: &[PorousDomain], runs: &[DnsTrajectory]) -> Result<EstimateReport> {
    if domains.len() != runs.len() || runs.is_empty() {
        return Err(Error::IncompatibleRuns(format!(
            "{} domains for {} runs",
            domains.len(),
            runs.len()
        )));
    }
    let mut entries = Vec::new();
    for (d, r) in domains.iter().zip(runs) {
        if (d.eps - r.eps).abs() > 1e-15 {
            return Err(Error::IncompatibleRuns(format!("domain ε = {} but run ε = {}", d.eps, r.eps)));
        }
        let phi = fp_test_field(d)?;
        let fp_ratio = check_fp_inequality(d, &phi)?;
        let g = StaggeredGrid::walled(2, d.n);
        let solid_w: Vec<f64> = (0..g.nfaces())
            .map(|f| {
                let (lo, hi) = g.face_cells(f);
                if [lo, hi].into_iter().flatten().all(|c| d.chi[c] == 0) {
                    r.final_state.w[f]
                } else {
                    0.0
                }
            })
            .collect();
        let ext = extend_solid(d, &solid_w)?;
        entries.push(EstimateEntry {
            eps: d.eps,
            norms: r.norms,
            fp_ratio,
            extension_l2_ratio: ext.l2_ratio,
            extension_grad_ratio: ext.grad_ratio,
        });
    }
    let mut sweep_max = ScaledNorms::default();
    let maxes: Vec<f64> = (0..7)
        .map(|k| entries.iter().map(|e| e.norms.entries()[k].1).fold(0.0, f64::max))
        .collect();
    sweep_max.div_rate_solid = maxes[0];
    sweep_max.grad_rate_solid = maxes[1];
    sweep_max.accel = maxes[2];
    sweep_max.div_rate_fluid = maxes[3];
    sweep_max.grad_accel_fluid = maxes[4];
    sweep_max.div_accel_fluid = maxes[5];
    sweep_max.pressure = maxes[6];
    let first = entries[0].norms.entries();
    let bounded = (0..7).all(|k| maxes[k] <= 2.0 * first[k].1);
    Ok(EstimateReport {
        entries,
        sweep_max,
        bounded,
    })
}

/// Smooth test functions for weak pairings.
fn vector_tests() -> Vec<fn([f64; 3]) -> f64> {
    use std::f64::consts::PI;
    vec![
        |x| (PI * x[0]).sin() * (PI * x[1]).sin(),
        |x| (2.0 * PI * x[0]).sin() * (PI * x[1]).sin(),
        |x| (PI * x[0]).sin() * (2.0 * PI * x[1]).sin(),
        |x| (2.0 * PI * x[0]).sin() * (2.0 * PI * x[1]).sin(),
    ]
}

fn scalar_tests() -> Vec<fn([f64; 3]) -> f64> {
    use std::f64::consts::PI;
    vec![
        |_| 1.0,
        |x| (PI * x[0]).cos(),
        |x| (PI * x[1]).cos(),
        |x| (PI * x[0]).cos() * (PI * x[1]).cos(),
    ]
}

/// ∫ u·(σ e_a) dx for a face field.
pub fn weak_pairing_faces(g: &StaggeredGrid, u: &[f64], a: usize, sigma: &dyn Fn([f64; 3]) -> f64) -> f64 {
    g.faces_of_axis(a).map(|f| u[f] * sigma(g.face_center(f))).sum::<f64>() * g.vol()
}

/// ∫ φ σ dx for a cell field.
pub fn weak_pairing_cells(g: &StaggeredGrid, phi: &[f64], sigma: &dyn Fn([f64; 3]) -> f64) -> f64 {
    (0..g.ncells()).map(|c| phi[c] * sigma(g.cell_center(c))).sum::<f64>() * g.vol()
}

/// ∫ φ(x) σ₁(x) σ₂(x/ε) dx for a cell field, σ₂ 1-periodic.
pub fn two_scale_pairing(
    domain: &PorousDomain,
    phi: &[f64],
    sigma1: &dyn Fn([f64; 3]) -> f64,
    sigma2: &dyn Fn([f64; 3]) -> f64,
) -> Result<f64> {
    let g = StaggeredGrid::walled(domain.dim, domain.n);
    if phi.len() != g.ncells() {
        return Err(Error::ResolutionMismatch(format!(
            "field has {} entries for {} cells",
            phi.len(),
            g.ncells()
        )));
    }
    let k = 1.0 / domain.eps;
    Ok((0..g.ncells())
        .map(|c| {
            let x = g.cell_center(c);
            let y = x.map(|v| (v * k).rem_euclid(1.0));
            phi[c] * sigma1(x) * sigma2(y)
        })
        .sum::<f64>()
        * g.vol())
}

/// Space-time pairings of a series: velocity components against vector tests,
/// then p and π against scalar tests.
fn pairings(s: &FieldSeries) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let g = StaggeredGrid::walled(s.dim, s.n);
    let vt = vector_tests();
    let st = scalar_tests();
    let mut v = vec![0.0; vt.len() * s.dim];
    let mut p = vec![0.0; st.len()];
    let mut pi = vec![0.0; st.len()];
    for k in 0..s.steps {
        for (i, sig) in vt.iter().enumerate() {
            for a in 0..s.dim {
                v[i * s.dim + a] += s.dt * weak_pairing_faces(&g, &s.velocity[k], a, sig);
            }
        }
        for (i, sig) in st.iter().enumerate() {
            p[i] += s.dt * weak_pairing_cells(&g, &s.p[k], sig);
            pi[i] += s.dt * weak_pairing_cells(&g, &s.pi[k], sig);
        }
    }
    (v, p, pi)
}

fn sq_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn sq_norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscrepancyEntry {
    pub eps: f64,
    pub velocity: f64,
    pub p: f64,
    pub pi: f64,
    /// Euclidean combination of the three groups.
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscrepancyReport {
    pub entries: Vec<DiscrepancyEntry>,
    /// Totals strictly decrease along the sweep.
    pub monotone_decrease: bool,
}

/// Weak-pairing discrepancies of fine runs (ordered by decreasing ε) against a macro run.
///
/// Every group is measured relative to the norm of the full macro pairing
/// vector, so a group whose macro pairings vanish does not divide noise by noise.
pub fn compare_to_homogenized(dns: &[(f64, &FieldSeries)], macro_run: &FieldSeries) -> Result<DiscrepancyReport> {
    let mut entries = Vec::new();
    let reference = pairings(macro_run);
    let scale = (sq_norm(&reference.0) + sq_norm(&reference.1) + sq_norm(&reference.2)).sqrt();
    let scale = if scale == 0.0 { 1.0 } else { scale };
    for &(eps, s) in dns {
        if s.force_label != macro_run.force_label {
            return Err(Error::IncompatibleRuns(format!(
                "force '{}' differs from the macro force '{}'",
                s.force_label, macro_run.force_label
            )));
        }
        let tf = |x: &FieldSeries| x.t_final();
        if (tf(s) - tf(macro_run)).abs() > 1e-12 * tf(macro_run).max(1.0) || s.steps != macro_run.steps {
            return Err(Error::IncompatibleRuns(format!(
                "final time {} ({} steps) differs from the macro run's {} ({} steps)",
                tf(s),
                s.steps,
                tf(macro_run),
                macro_run.steps
            )));
        }
        if s.dim != macro_run.dim {
            return Err(Error::IncompatibleRuns("runs have different dimensions".into()));
        }
        let (v, p, pi) = pairings(s);
        let dv = sq_diff(&v, &reference.0);
        let dp = sq_diff(&p, &reference.1);
        let dpi = sq_diff(&pi, &reference.2);
        entries.push(DiscrepancyEntry {
            eps,
            velocity: dv.sqrt() / scale,
            p: dp.sqrt() / scale,
            pi: dpi.sqrt() / scale,
            total: (dv + dp + dpi).sqrt() / scale,
        });
    }
    let monotone_decrease = entries.windows(2).all(|w| w[1].total < w[0].total);
    Ok(DiscrepancyReport {
        entries,
        monotone_decrease,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_cell, tile, GeometrySpec};
    use crate::macroscale::no_force;

    fn raw() -> RawScalings {
        RawScalings {
            alpha_mu: 1.0,
            alpha_nu: 0.5,
            alpha_lambda: 0.5,
            alpha_tau: 1.0,
            alpha_p: 2.0,
            alpha_eta: 1.0,
        }
    }

    fn cross_domain(k: usize, n: usize) -> PorousDomain {
        let cell = build_cell(&GeometrySpec::Cross { dim: 2, n: 8, width: 0.25 }).unwrap();
        tile(&cell, k, n).unwrap()
    }

    fn force(x: [f64; 3], t: f64) -> [f64; 3] {
        let s = (std::f64::consts::PI * x[0]).sin() * (std::f64::consts::PI * x[1]).sin();
        [s * t.min(0.3), -s * t, 0.0]
    }

    #[test]
    fn zero_force_gives_zero_trajectory() {
        let d = cross_domain(2, 16);
        let s = DnsSolver::new(&d, raw(), 1.0, 2.0, 0.05, 10).unwrap();
        let tr = s.run(&no_force, "zero").unwrap();
        assert!(tr.final_state.w.iter().all(|&v| v == 0.0));
        assert!(tr.series.velocity.iter().flatten().all(|&v| v == 0.0));
        assert!(tr.energy.iter().all(|&e| e == 0.0));
    }

    #[test]
    fn energy_balance_holds_and_boundary_stays_pinned() {
        let d = cross_domain(2, 32);
        let s = DnsSolver::new(&d, raw(), 1.0, 2.0, 0.02, 30).unwrap();
        let tr = s.run(&force, "f").unwrap();
        assert!(tr.max_balance_error < 1e-10, "{}", tr.max_balance_error);
        let g = s.grid();
        for f in 0..g.nfaces() {
            if g.is_boundary_normal(f) {
                assert_eq!(tr.final_state.w[f], 0.0);
            }
        }
        // complementary supports
        for c in 0..g.ncells() {
            assert!(tr.final_state.p[c] * tr.final_state.pi[c] == 0.0);
        }
        assert!(tr.norms.total().is_finite() && tr.norms.total() > 0.0);
    }

    #[test]
    fn single_fluid_energy_decays_after_forcing_stops() {
        let d = PorousDomain {
            dim: 2,
            n: 12,
            k: 1,
            eps: 1.0,
            chi: vec![1; 144],
            porosity: 1.0,
        };
        let s = DnsSolver::new(&d, raw(), 1.0, 1.0, 0.05, 40).unwrap();
        let f = |x: [f64; 3], t: f64| if t < 0.5 { force(x, 1.0) } else { [0.0; 3] };
        let tr = s.run(&f, "pulse").unwrap();
        let start = (0.5f64 / 0.05).round() as usize + 1;
        for w in tr.energy[start..].windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12));
        }
    }

    #[test]
    fn manufactured_step_reproduces_prescribed_velocity() {
        let d = cross_domain(2, 16);
        let s = DnsSolver::new(&d, raw(), 1.0, 2.0, 0.1, 1).unwrap();
        let g = s.grid().clone();
        let mut st = s.initial_state();
        let field = |f: usize, c: f64| {
            let x = g.face_center(f);
            if g.is_boundary_normal(f) {
                0.0
            } else {
                c * (3.0 * x[0]).sin() * (2.0 * x[1]).cos()
            }
        };
        st.w = (0..g.nfaces()).map(|f| field(f, 0.3)).collect();
        st.u = (0..g.nfaces()).map(|f| field(f, -0.7)).collect();
        let target: Vec<f64> = (0..g.nfaces()).map(|f| field(f, 1.1)).collect();
        // load that makes `target` the exact next velocity
        let dofs = &s.dofs;
        let (u, w, un) = (dofs.gather(&st.u), dofs.gather(&st.w), dofs.gather(&target));
        let lhs = s.solver.matrix().matvec(&un);
        let cu = s.c.matvec(&u);
        let ku = s.k.matvec(&u);
        let kw = s.k.matvec(&w);
        let load: Vec<f64> = (0..u.len())
            .map(|i| lhs[i] - (s.mass[i] / s.dt * u[i] - 0.5 * cu[i] - 0.025 * ku[i] - kw[i]))
            .collect();
        s.step_with_load(&mut st, &load).unwrap();
        let err = st.u.iter().zip(&target).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn renormalized_pressures_are_mean_free() {
        let d = cross_domain(2, 32);
        let s = DnsSolver::new(&d, raw(), 1.0, 2.0, 0.05, 8).unwrap();
        let tr = s.run(&force, "f").unwrap();
        let r = renormalized_pressures(&d, &raw(), &tr.final_state.w).unwrap();
        assert!(r.beta.abs() > 0.0);
        assert!(r.mean_p.abs() < 1e-10 && r.mean_pi.abs() < 1e-10, "{} {}", r.mean_p, r.mean_pi);
    }

    #[test]
    fn extension_of_zero_and_constant() {
        let d = cross_domain(2, 16);
        let nf = StaggeredGrid::walled(2, 16).nfaces();
        let z = extend_solid(&d, &vec![0.0; nf]).unwrap();
        assert!(z.field.iter().all(|&v| v == 0.0));
        assert_eq!(z.grad_ratio, 0.0);
        let c = extend_solid(&d, &vec![1.5; nf]).unwrap();
        assert!(c.field.iter().all(|&v| (v - 1.5).abs() < 1e-10));
        assert_eq!(c.grad_ratio, 0.0);
        let f = extend_fluid(&d, &vec![-2.0; nf]).unwrap();
        assert!(f.field.iter().all(|&v| (v + 2.0).abs() < 1e-10));
    }

    #[test]
    fn extension_constants_are_bounded_over_the_sweep() {
        let mut ratios = Vec::new();
        for k in [2, 4, 8] {
            let d = cross_domain(k, 64);
            let g = StaggeredGrid::walled(2, 64);
            let psi: Vec<f64> = (0..g.nfaces())
                .map(|f| {
                    let x = g.face_center(f);
                    (std::f64::consts::PI * x[0]).sin() * (std::f64::consts::PI * x[1]).sin()
                })
                .collect();
            let e = extend_solid(&d, &psi).unwrap();
            ratios.push((e.l2_ratio, e.grad_ratio));
        }
        for r in &ratios {
            assert!(r.0 <= 2.0 * ratios[0].0 + 1e-12 && r.1 <= 2.0 * ratios[0].1 + 1e-12, "{ratios:?}");
        }
    }

    #[test]
    fn fp_ratio_checks() {
        let d = cross_domain(2, 32);
        assert_eq!(check_fp_inequality(&d, &vec![0.0; 1024]).unwrap(), 0.0);
        let mut bump = vec![0.0; 1024];
        let c = (0..1024).find(|&c| d.chi[c] == 1).unwrap();
        bump[c] = 1.0;
        let r = check_fp_inequality(&d, &bump).unwrap();
        assert!(r > 0.0 && r < 1.0);
        let mut bad = vec![0.0; 1024];
        bad[(0..1024).find(|&c| d.chi[c] == 0).unwrap()] = 1.0;
        assert!(matches!(check_fp_inequality(&d, &bad), Err(Error::ConstraintViolation(_))));
        let mut rs = Vec::new();
        for k in [2, 4, 8] {
            let d = cross_domain(k, 64);
            rs.push(check_fp_inequality(&d, &fp_test_field(&d).unwrap()).unwrap());
        }
        assert!(rs.iter().all(|&r| r > 0.0 && r <= 2.0 * rs[0]), "{rs:?}");
    }

    #[test]
    fn self_comparison_is_zero_and_mismatch_is_rejected() {
        let d = cross_domain(2, 16);
        let s = DnsSolver::new(&d, raw(), 1.0, 2.0, 0.05, 6).unwrap();
        let tr = s.run(&force, "f").unwrap();
        let rep = compare_to_homogenized(&[(0.5, &tr.series)], &tr.series).unwrap();
        assert_eq!(rep.entries[0].total, 0.0);
        let short = DnsSolver::new(&d, raw(), 1.0, 2.0, 0.05, 5).unwrap().run(&force, "f").unwrap();
        assert!(matches!(
            compare_to_homogenized(&[(0.5, &short.series)], &tr.series),
            Err(Error::IncompatibleRuns(_))
        ));
        let other = s.run(&force, "g").unwrap();
        assert!(matches!(
            compare_to_homogenized(&[(0.5, &other.series)], &tr.series),
            Err(Error::IncompatibleRuns(_))
        ));
    }

    #[test]
    fn two_scale_pairing_with_constant_cell_test_is_weak_pairing() {
        let d = cross_domain(4, 32);
        let g = StaggeredGrid::walled(2, 32);
        let phi: Vec<f64> = (0..g.ncells()).map(|c| (c as f64 * 0.37).sin()).collect();
        let s1 = |x: [f64; 3]| x[0] + x[1] * x[1];
        let a = two_scale_pairing(&d, &phi, &s1, &|_| 1.0).unwrap();
        let b = weak_pairing_cells(&g, &phi, &s1);
        assert_eq!(a, b);
    }

    #[test]
    fn oversized_grid_is_rejected() {
        let d = cross_domain(1, 72);
        assert!(matches!(
            DnsSolver::new(&d, raw(), 1.0, 1.0, 0.1, 1),
            Err(Error::ResolutionMismatch(_))
        ));
    }
}
