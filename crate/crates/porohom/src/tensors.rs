//! Effective coefficients assembled from cell solutions, with the
//! symmetry and definiteness checks that the homogenized systems rely on.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::cell::{
    KernelHistory, KernelMeta, KernelSample, MemoryCellSolution, NeumannSolution, StokesCellSolution,
    StokesRhs,
};
use crate::error::{Error, Result};
use crate::grid::voigt_pairs;
use crate::params::{RegimeTag, ScalingParams};

/// Schema tag of the coefficients document.
pub const COEFFICIENTS_SCHEMA: &str = "porohom.coefficients/1";

pub type Matrix = Vec<Vec<f64>>;

/// Fourth-rank tensor with minor symmetries, packed over Voigt pairs.
///
/// `packed[I][J] = A_{ijkl}` with (i,j) the I-th and (k,l) the J-th pair of
/// [`voigt_pairs`]: (11, 22, 12) in 2D, (11, 22, 33, 23, 13, 12) in 3D
/// (zero-based in code).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymRank4Tensor {
    pub dim: usize,
    pub packed: Matrix,
    /// ‖A − Aᵀ‖∞ / ‖A‖∞ of the packed matrix before symmetrization.
    pub asymmetry: f64,
}

impl SymRank4Tensor {
    /// Packs a tensor given componentwise; `f(i,j,k,l)`.
    pub fn from_fn(dim: usize, f: impl Fn(usize, usize, usize, usize) -> f64) -> Self {
        let pairs = voigt_pairs(dim);
        let packed = pairs
            .iter()
            .map(|&(i, j)| pairs.iter().map(|&(k, l)| f(i, j, k, l)).collect())
            .collect();
        SymRank4Tensor {
            dim,
            packed,
            asymmetry: 0.0,
        }
    }

    /// Σ J^{ij} ⊗ J^{ij}, the identity on symmetric matrices.
    pub fn symmetric_identity(dim: usize) -> Self {
        let d = |a: usize, b: usize| if a == b { 1.0 } else { 0.0 };
        Self::from_fn(dim, |i, j, k, l| 0.5 * (d(i, k) * d(j, l) + d(i, l) * d(j, k)))
    }

    pub fn get(&self, i: usize, j: usize, k: usize, l: usize) -> f64 {
        let pairs = voigt_pairs(self.dim);
        let idx = |a: usize, b: usize| {
            let (a, b) = (a.min(b), a.max(b));
            pairs.iter().position(|&p| p == (a, b)).unwrap()
        };
        self.packed[idx(i, j)][idx(k, l)]
    }

    /// A : ζ for a symmetric d×d matrix ζ.
    pub fn contract(&self, zeta: &Matrix) -> Matrix {
        let d = self.dim;
        let mut out = vec![vec![0.0; d]; d];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                for (k, zr) in zeta.iter().enumerate() {
                    for (l, z) in zr.iter().enumerate() {
                        *v += self.get(i, j, k, l) * z;
                    }
                }
            }
        }
        out
    }

    /// Packed matrix in Mandel scaling (√2 on shear rows and columns), whose
    /// eigenvalues are those of the tensor acting on symmetric matrices.
    pub fn mandel(&self) -> Matrix {
        let pairs = voigt_pairs(self.dim);
        let w: Vec<f64> = pairs
            .iter()
            .map(|&(a, b)| if a == b { 1.0 } else { std::f64::consts::SQRT_2 })
            .collect();
        self.packed
            .iter()
            .enumerate()
            .map(|(i, r)| r.iter().enumerate().map(|(j, v)| w[i] * w[j] * v).collect())
            .collect()
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        symmetric_eigenvalues(&self.mandel())
    }
}

/// Sorted eigenvalues of the symmetric part of a square matrix.
pub fn symmetric_eigenvalues(m: &Matrix) -> Vec<f64> {
    let n = m.len();
    let a = DMatrix::from_fn(n, n, |i, j| 0.5 * (m[i][j] + m[j][i]));
    let mut ev: Vec<f64> = SymmetricEigen::new(a).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}

/// Largest |M_ij − M_ji|.
pub fn matrix_asymmetry(m: &Matrix) -> f64 {
    let mut worst = 0.0f64;
    for (i, r) in m.iter().enumerate() {
        for (j, v) in r.iter().enumerate() {
            worst = worst.max((v - m[j][i]).abs());
        }
    }
    worst
}

fn max_abs(m: &Matrix) -> f64 {
    m.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs()))
}

/// Outcome of a symmetry / positive-definiteness check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Validation {
    pub name: String,
    pub eigenvalues: Vec<f64>,
    pub min_eigenvalue: f64,
    pub asymmetry: f64,
    pub symmetry_tol: f64,
    pub passed: bool,
}

impl Validation {
    pub fn check(name: &str, m: &Matrix, asymmetry: f64, symmetry_tol: f64) -> Validation {
        let eigenvalues = symmetric_eigenvalues(m);
        let min_eigenvalue = eigenvalues.first().copied().unwrap_or(f64::NAN);
        // positive relative to the matrix scale and roundoff
        let floor = 1e-12 * max_abs(m).max(1.0);
        Validation {
            name: name.into(),
            passed: asymmetry <= symmetry_tol && min_eigenvalue > floor,
            eigenvalues,
            min_eigenvalue,
            asymmetry,
            symmetry_tol,
        }
    }

    /// Converts a failed check into [`Error::NotPositiveDefinite`].
    pub fn require(&self) -> Result<()> {
        if self.passed {
            Ok(())
        } else {
            Err(Error::NotPositiveDefinite(format!(
                "{}: min eigenvalue {:.3e}, asymmetry {:.3e} (tol {:.1e})",
                self.name, self.min_eigenvalue, self.asymmetry, self.symmetry_tol
            )))
        }
    }
}

/// A^f₀ = Σ J^{ij}⊗J^{ij} + Σ ⟨D(V^{(ij)})⟩_{Y_f} ⊗ J^{ij}, symmetrized.
#[allow(non_snake_case)]
pub fn assemble_A_f0(solutions: &[StokesCellSolution], dim: usize) -> Result<SymRank4Tensor> {
    let find = |i: usize, j: usize| -> Result<&StokesCellSolution> {
        solutions
            .iter()
            .find(|s| matches!(s.rhs, StokesRhs::Strain(a, b) if (a.min(b), a.max(b)) == (i, j)))
            .ok_or_else(|| Error::MissingSolution(format!("strain cell problem ({}, {})", i + 1, j + 1)))
    };
    let pairs = voigt_pairs(dim);
    let mut cols = Vec::with_capacity(pairs.len());
    for &(k, l) in &pairs {
        cols.push(find(k, l)?.mean_strain.clone());
    }
    let id = SymRank4Tensor::symmetric_identity(dim);
    let mut packed = id.packed.clone();
    for (row, &(i, j)) in packed.iter_mut().zip(&pairs) {
        for (col, v) in row.iter_mut().enumerate() {
            *v += cols[col][i][j];
        }
    }
    let scale = max_abs(&packed).max(f64::MIN_POSITIVE);
    let asymmetry = matrix_asymmetry(&packed) / scale;
    let n = packed.len();
    let sym: Matrix = (0..n)
        .map(|i| (0..n).map(|j| 0.5 * (packed[i][j] + packed[j][i])).collect())
        .collect();
    Ok(SymRank4Tensor {
        dim,
        packed: sym,
        asymmetry,
    })
}

/// Pressure-related T2 coefficients.
#[allow(non_snake_case)]
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PressureCoefficients {
    pub B_f0: Matrix,
    pub B_f1_const: Matrix,
    pub B_f2_kernel: KernelSample,
    pub C_f0: Matrix,
    pub a_f0: f64,
    pub a_f1: f64,
    pub a_f2_kernel: KernelSample,
}

fn scaled(m: &Matrix, s: f64) -> Matrix {
    m.iter().map(|r| r.iter().map(|v| v * s).collect()).collect()
}

/// B^f_i = μ₀⟨D(V^{(i)})⟩_{Y_f}, C^f₀ = Σ⟨div V^{(ij)}⟩ J^{ij}, a^f_i = ⟨div V^{(i)}⟩_{Y_f}.
///
/// `div` may be `None` only for a cell without interface with p★ = ∞, where
/// div V^{(1)} = −1 has no periodic solution; then a^f₁ = −m and B^f₁ = 0.
#[allow(clippy::too_many_arguments)]
pub fn assemble_pressure_coeffs(
    strain: &[StokesCellSolution],
    pi: &StokesCellSolution,
    div: Option<&StokesCellSolution>,
    memory: &MemoryCellSolution,
    mu0: f64,
    m: f64,
    dim: usize,
) -> Result<PressureCoefficients> {
    let mut c = vec![vec![0.0; dim]; dim];
    for (i, j) in voigt_pairs(dim) {
        let s = strain
            .iter()
            .find(|s| matches!(s.rhs, StokesRhs::Strain(a, b) if (a.min(b), a.max(b)) == (i, j)))
            .ok_or_else(|| Error::MissingSolution(format!("strain cell problem ({}, {})", i + 1, j + 1)))?;
        c[i][j] = s.mean_div;
        c[j][i] = s.mean_div;
    }
    let (b1, a1) = match div {
        Some(s) => (scaled(&s.mean_strain, mu0), s.mean_div),
        None if m >= 1.0 => (vec![vec![0.0; dim]; dim], -m),
        None => return Err(Error::MissingSolution("divergence cell problem".into())),
    };
    if memory.mean_strain.len() < 2 {
        return Err(Error::MissingSolution("pressure-memory history has no steps".into()));
    }
    let meta = |p: &str| KernelMeta {
        problem: p.into(),
        ..Default::default()
    };
    let b2 = KernelSample::new(
        memory.dt,
        memory.mean_strain[1..].iter().map(|ms| scaled(ms, mu0)).collect(),
        meta("stokes_memory"),
    );
    let a2 = KernelSample::new(
        memory.dt,
        memory.mean_div[1..].iter().map(|&v| vec![vec![v]]).collect(),
        meta("stokes_memory"),
    );
    Ok(PressureCoefficients {
        B_f0: scaled(&pi.mean_strain, mu0),
        B_f1_const: b1,
        B_f2_kernel: b2,
        C_f0: c,
        a_f0: pi.mean_div,
        a_f1: a1,
        a_f2_kernel: a2,
    })
}

/// B^s₁(t_k) = Σ_i ⟨∂W^i/∂t(t_k)⟩_{Y_s} ⊗ e_i for k ≥ 1.
#[allow(non_snake_case)]
pub fn assemble_B_s1(history: &KernelHistory, rho_s: f64, lambda1: f64) -> Result<KernelSample> {
    check_history(history)?;
    Ok(history.kernel(KernelMeta {
        problem: history.problem.clone(),
        rho_s: Some(rho_s),
        lambda1: Some(lambda1),
        ..Default::default()
    }))
}

fn check_history(h: &KernelHistory) -> Result<()> {
    if h.runs.len() != h.dim || h.runs.iter().any(|r| r.mean_rate.len() < 2) {
        return Err(Error::MissingSolution(format!(
            "{} history needs {} directions with at least one step",
            h.problem, h.dim
        )));
    }
    Ok(())
}

fn neumann_matrix(n: &NeumannSolution) -> Result<Matrix> {
    if n.mean_grad.is_empty() {
        return Err(Error::MissingSolution("Neumann solution is empty".into()));
    }
    Ok(n.mean_grad.clone())
}

fn shifted(b: &Matrix, diag: f64) -> Matrix {
    let mut out = scaled(b, -1.0);
    for (i, r) in out.iter_mut().enumerate() {
        r[i] += diag;
    }
    out
}

/// B^s₂ = Σ_i ⟨∇R_i⟩_{Y_s} ⊗ e_i with the check on (1−m)I − B^s₂.
#[allow(non_snake_case)]
pub fn assemble_B_s2(solid: &NeumannSolution, m: f64) -> Result<(Matrix, Validation)> {
    let b = neumann_matrix(solid)?;
    let check = shifted(&b, 1.0 - m);
    let asym = matrix_asymmetry(&check);
    Ok((b, Validation::check("(1-m)I - B_s2", &check, asym, 1e-10)))
}

/// K_f(t_k) = Σ_i ⟨V^i(t_k)⟩_{Y_f} ⊗ e_i and B^f₂ = Σ_i ⟨∇R^f_i⟩_{Y_f} ⊗ e_i.
pub fn assemble_fluid_matrices(
    kernel: Option<(&KernelHistory, f64, f64)>,
    neumann: Option<&NeumannSolution>,
    m: f64,
) -> Result<(Option<KernelSample>, Option<(Matrix, Validation)>)> {
    let k = match kernel {
        Some((h, rho_f, mu1)) => {
            check_history(h)?;
            Some(h.kernel(KernelMeta {
                problem: h.problem.clone(),
                rho_f: Some(rho_f),
                mu1: Some(mu1),
                ..Default::default()
            }))
        }
        None => None,
    };
    let b = match neumann {
        Some(n) => {
            let b = neumann_matrix(n)?;
            let check = shifted(&b, m);
            let asym = matrix_asymmetry(&check);
            Some((b, Validation::check("mI - B_f2", &check, asym, 1e-10)))
        }
        None => None,
    };
    Ok((k, b))
}

/// B^π(t_k) = Σ_i ⟨∂W^π_i/∂t(t_k)⟩_Y ⊗ e_i and the force kernel
/// b^F(t_k) = Σ_i ⟨∂W^F_i/∂t(t_k)⟩_Y ⊗ e_i, so that f = ∫ b^F(t−τ) F(τ) dτ.
#[allow(non_snake_case)]
pub fn assemble_B_pi_and_forcing(
    pressure: &KernelHistory,
    force: &KernelHistory,
    params: &ScalingParams,
) -> Result<(KernelSample, KernelSample)> {
    check_history(pressure)?;
    check_history(force)?;
    if pressure.dt != force.dt || pressure.runs[0].mean_rate.len() != force.runs[0].mean_rate.len() {
        return Err(Error::KernelGridMismatch(
            "two-phase pressure and force histories use different time grids".into(),
        ));
    }
    let meta = |p: &str| KernelMeta {
        problem: p.into(),
        rho_f: Some(params.rho_f),
        rho_s: Some(params.rho_s),
        mu1: params.mu1.value(),
        lambda1: params.lambda1.value(),
    };
    Ok((pressure.kernel(meta(&pressure.problem)), force.kernel(meta(&force.problem))))
}

/// f(x, t_n) = ∫₀^{t_n} b^F(t_n − τ) F(x, τ) dτ for every step n.
///
/// `force[n][a]` holds component a of F at t_n on a common point set.
pub fn forcing_field(kernel: &KernelSample, force: &[Vec<Vec<f64>>], dt: f64) -> Result<Vec<Vec<Vec<f64>>>> {
    (0..force.len())
        .map(|n| crate::macroscale::convolve(kernel, &force[..=n], dt))
        .collect()
}

/// Every coefficient a macro run may need, plus provenance and checks.
#[allow(non_snake_case)]
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectiveCoefficients {
    pub schema: String,
    pub regime: RegimeTag,
    pub geometry_hash: String,
    pub dim: usize,
    pub m: f64,
    pub rho_hat: f64,
    pub params: ScalingParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub A_f0: Option<SymRank4Tensor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub C_f0: Option<Matrix>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub B_f0: Option<Matrix>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub B_f1_const: Option<Matrix>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a_f0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a_f1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub B_f2_kernel: Option<KernelSample>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a_f2_kernel: Option<KernelSample>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub B_s1_kernel: Option<KernelSample>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub B_s2: Option<Matrix>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub K_f_kernel: Option<KernelSample>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub B_f2_matrix: Option<Matrix>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub B_pi_kernel: Option<KernelSample>,
    /// Kernel b^F of the forcing convolution.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forcing_kernel: Option<KernelSample>,
    pub validations: Vec<Validation>,
}

impl EffectiveCoefficients {
    pub fn new(regime: RegimeTag, geometry_hash: String, dim: usize, m: f64, params: ScalingParams) -> Self {
        EffectiveCoefficients {
            schema: COEFFICIENTS_SCHEMA.into(),
            regime,
            geometry_hash,
            dim,
            m,
            rho_hat: params.rho_hat(m),
            params,
            A_f0: None,
            C_f0: None,
            B_f0: None,
            B_f1_const: None,
            a_f0: None,
            a_f1: None,
            B_f2_kernel: None,
            a_f2_kernel: None,
            B_s1_kernel: None,
            B_s2: None,
            K_f_kernel: None,
            B_f2_matrix: None,
            B_pi_kernel: None,
            forcing_kernel: None,
            validations: Vec::new(),
        }
    }

    pub fn set_pressure(&mut self, p: PressureCoefficients) {
        self.B_f0 = Some(p.B_f0);
        self.B_f1_const = Some(p.B_f1_const);
        self.B_f2_kernel = Some(p.B_f2_kernel);
        self.C_f0 = Some(p.C_f0);
        self.a_f0 = Some(p.a_f0);
        self.a_f1 = Some(p.a_f1);
        self.a_f2_kernel = Some(p.a_f2_kernel);
    }

    pub fn all_valid(&self) -> bool {
        self.validations.iter().all(|v| v.passed)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Io(format!("serializing coefficients: {e}")))
    }

    /// Parses a coefficients document, rejecting unknown schema versions.
    pub fn from_json(text: &str) -> Result<Self> {
        let v: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("coefficients file is not JSON: {e}")))?;
        match v.get("schema").and_then(|s| s.as_str()) {
            Some(COEFFICIENTS_SCHEMA) => {}
            other => {
                return Err(Error::Config(format!(
                    "unsupported coefficients schema {other:?}, expected {COEFFICIENTS_SCHEMA}"
                )))
            }
        }
        serde_json::from_value(v).map_err(|e| Error::Config(format!("malformed coefficients file: {e}")))
    }

    /// Fails with [`Error::MissingSolution`] if a coefficient is absent.
    pub fn require<'a, T>(&self, name: &str, v: &'a Option<T>) -> Result<&'a T> {
        v.as_ref()
            .ok_or_else(|| Error::MissingSolution(format!("coefficient {name} is required by {}", self.regime.as_str())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cell::{solve_neumann_laplace, solve_stokes_cell, Phase};
    use crate::geometry::{build_cell, GeometrySpec};
    use crate::params::ExtendedParam::{Finite, Infinity};

    fn strain_solutions(spec: &GeometrySpec) -> (Vec<StokesCellSolution>, usize) {
        let c = build_cell(spec).unwrap();
        let sols = voigt_pairs(c.dim)
            .into_iter()
            .map(|(i, j)| solve_stokes_cell(&c, StokesRhs::Strain(i, j), 1.0, Finite(0.0), Infinity).unwrap())
            .collect();
        (sols, c.dim)
    }

    #[test]
    fn full_fluid_gives_symmetric_identity() {
        let (s, d) = strain_solutions(&GeometrySpec::FullFluid { dim: 2, n: 8 });
        let a = assemble_A_f0(&s, d).unwrap();
        let id = SymRank4Tensor::symmetric_identity(2);
        for (r, e) in a.packed.iter().flatten().zip(id.packed.iter().flatten()) {
            assert!((r - e).abs() < 1e-8);
        }
        // Mandel eigenvalues of the identity are all 1
        assert!(a.eigenvalues().iter().all(|e| (e - 1.0).abs() < 1e-8));
    }

    #[test]
    fn cross_tensor_is_symmetric_and_definite() {
        let (s, d) = strain_solutions(&GeometrySpec::Cross { dim: 2, n: 16, width: 0.25 });
        let a = assemble_A_f0(&s, d).unwrap();
        assert!(a.asymmetry < 1e-8);
        assert!(a.eigenvalues()[0] > 0.0);
    }

    #[test]
    fn missing_strain_solution_is_reported() {
        let (s, d) = strain_solutions(&GeometrySpec::FullFluid { dim: 2, n: 4 });
        assert!(matches!(assemble_A_f0(&s[..2], d), Err(Error::MissingSolution(_))));
    }

    #[test]
    fn contraction_matches_packed_entries() {
        let a = SymRank4Tensor::from_fn(3, |i, j, k, l| (i + j + 1) as f64 * (k + l + 2) as f64);
        let zeta = vec![vec![1.0, 0.5, 0.0], vec![0.5, 2.0, -1.0], vec![0.0, -1.0, 3.0]];
        let out = a.contract(&zeta);
        let mut expect = 0.0;
        for (k, zr) in zeta.iter().enumerate() {
            for (l, z) in zr.iter().enumerate() {
                expect += a.get(0, 1, k, l) * z;
            }
        }
        assert!((out[0][1] - expect).abs() < 1e-12);
    }

    #[test]
    fn full_solid_neumann_matrix_is_zero() {
        let c = build_cell(&GeometrySpec::FullSolid { dim: 2, n: 8 }).unwrap();
        let n = solve_neumann_laplace(&c, Phase::Solid, &Default::default()).unwrap();
        let (b, v) = assemble_B_s2(&n, c.m).unwrap();
        assert!(b.iter().flatten().all(|x| x.abs() < 1e-12));
        assert!(v.passed);
        assert!(v.eigenvalues.iter().all(|e| (e - 1.0).abs() < 1e-12));
    }

    #[test]
    fn schema_is_enforced() {
        let p = crate::params::ScalingParams {
            mu0: Finite(1.0),
            nu0: Finite(0.0),
            lambda0: Finite(0.0),
            tau0: Finite(1.0),
            p_star: Infinity,
            eta0: Finite(1.0),
            mu1: Infinity,
            lambda1: Infinity,
            rho_f: 1.0,
            rho_s: 2.0,
            laws: None,
        };
        let mut c = EffectiveCoefficients::new(RegimeTag::T2_I, "abc".into(), 2, 0.5, p);
        c.B_f2_kernel = Some(KernelSample::zeros(0.1, 3, 2, 2, "x"));
        let text = c.to_json().unwrap();
        assert_eq!(EffectiveCoefficients::from_json(&text).unwrap(), c);
        let bad = text.replace(COEFFICIENTS_SCHEMA, "porohom.coefficients/99");
        assert!(matches!(EffectiveCoefficients::from_json(&bad), Err(Error::Config(_))));
    }
}
