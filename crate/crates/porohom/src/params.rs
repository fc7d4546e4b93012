//! Dimensionless parameters, their limits as ε → 0, and regime classification.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// A nonnegative real number or +∞.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ExtendedParam {
    Finite(f64),
    Infinity,
}

impl ExtendedParam {
    pub const INFINITY: ExtendedParam = ExtendedParam::Infinity;

    /// Builds a finite value; negative or NaN inputs are rejected.
    pub fn finite(x: f64) -> Result<Self> {
        if x.is_nan() || x < 0.0 {
            return Err(Error::ConstraintViolation(format!(
                "parameter value {x} is not a nonnegative real"
            )));
        }
        if x.is_infinite() {
            return Ok(ExtendedParam::Infinity);
        }
        Ok(ExtendedParam::Finite(x))
    }

    pub fn is_infinite(self) -> bool {
        matches!(self, ExtendedParam::Infinity)
    }

    pub fn is_zero(self) -> bool {
        matches!(self, ExtendedParam::Finite(x) if x == 0.0)
    }

    pub fn is_positive(self) -> bool {
        !self.is_zero()
    }

    /// The finite value, if any.
    pub fn value(self) -> Option<f64> {
        match self {
            ExtendedParam::Finite(x) => Some(x),
            ExtendedParam::Infinity => None,
        }
    }

    /// 1/x with 1/∞ = 0 exactly and 1/0 = ∞.
    pub fn reciprocal(self) -> ExtendedParam {
        match self {
            ExtendedParam::Infinity => ExtendedParam::Finite(0.0),
            ExtendedParam::Finite(x) if x == 0.0 => ExtendedParam::Infinity,
            ExtendedParam::Finite(x) => ExtendedParam::Finite(1.0 / x),
        }
    }

    /// Reciprocal of a value known to be positive; 1/∞ = 0.
    pub fn recip_value(self) -> f64 {
        match self {
            ExtendedParam::Infinity => 0.0,
            ExtendedParam::Finite(x) => 1.0 / x,
        }
    }

    /// Parses a decimal number or the token `inf`.
    pub fn parse(s: &str) -> Result<Self> {
        let t = s.trim();
        if t.eq_ignore_ascii_case("inf") || t.eq_ignore_ascii_case("infinity") {
            return Ok(ExtendedParam::Infinity);
        }
        let x: f64 = t
            .parse()
            .map_err(|_| Error::Config(format!("cannot parse parameter value '{s}'")))?;
        ExtendedParam::finite(x)
    }
}

impl fmt::Display for ExtendedParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExtendedParam::Finite(x) => write!(f, "{x}"),
            ExtendedParam::Infinity => write!(f, "inf"),
        }
    }
}

impl Serialize for ExtendedParam {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            ExtendedParam::Finite(x) => s.serialize_f64(*x),
            ExtendedParam::Infinity => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for ExtendedParam {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Int(i64),
            Str(String),
        }
        let parsed = match Raw::deserialize(d)? {
            Raw::Num(x) => ExtendedParam::finite(x),
            Raw::Int(i) => ExtendedParam::finite(i as f64),
            Raw::Str(s) => ExtendedParam::parse(&s),
        };
        parsed.map_err(serde::de::Error::custom)
    }
}

/// Exponent law α(ε) = c·ε^k.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLaw {
    pub c: f64,
    pub k: f64,
}

impl PowerLaw {
    pub fn new(c: f64, k: f64) -> Self {
        PowerLaw { c, k }
    }

    pub fn at(&self, eps: f64) -> f64 {
        self.c * eps.powf(self.k)
    }

    /// Limit of c·ε^(k−shift) as ε → 0.
    pub fn limit(&self, shift: f64) -> ExtendedParam {
        let k = self.k - shift;
        if k > 0.0 {
            ExtendedParam::Finite(0.0)
        } else if k == 0.0 {
            ExtendedParam::Finite(self.c)
        } else {
            ExtendedParam::Infinity
        }
    }
}

/// Exponent laws for the six dimensionless scalings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingLaws {
    pub alpha_mu: PowerLaw,
    pub alpha_nu: PowerLaw,
    pub alpha_lambda: PowerLaw,
    pub alpha_tau: PowerLaw,
    pub alpha_p: PowerLaw,
    pub alpha_eta: PowerLaw,
}

/// Raw coefficient values at a fixed ε.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawScalings {
    pub alpha_mu: f64,
    pub alpha_nu: f64,
    pub alpha_lambda: f64,
    pub alpha_tau: f64,
    pub alpha_p: f64,
    pub alpha_eta: f64,
}

impl ScalingLaws {
    pub fn at(&self, eps: f64) -> RawScalings {
        RawScalings {
            alpha_mu: self.alpha_mu.at(eps),
            alpha_nu: self.alpha_nu.at(eps),
            alpha_lambda: self.alpha_lambda.at(eps),
            alpha_tau: self.alpha_tau.at(eps),
            alpha_p: self.alpha_p.at(eps),
            alpha_eta: self.alpha_eta.at(eps),
        }
    }

    fn laws(&self) -> [(&'static str, PowerLaw); 6] {
        [
            ("alpha_mu", self.alpha_mu),
            ("alpha_nu", self.alpha_nu),
            ("alpha_lambda", self.alpha_lambda),
            ("alpha_tau", self.alpha_tau),
            ("alpha_p", self.alpha_p),
            ("alpha_eta", self.alpha_eta),
        ]
    }
}

/// Limits of the dimensionless parameters plus densities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingParams {
    pub mu0: ExtendedParam,
    pub nu0: ExtendedParam,
    pub lambda0: ExtendedParam,
    pub tau0: ExtendedParam,
    pub p_star: ExtendedParam,
    pub eta0: ExtendedParam,
    pub mu1: ExtendedParam,
    pub lambda1: ExtendedParam,
    pub rho_f: f64,
    pub rho_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub laws: Option<ScalingLaws>,
}

impl ScalingParams {
    /// ρ̂ = m ρ_f + (1 − m) ρ_s.
    pub fn rho_hat(&self, m: f64) -> f64 {
        m * self.rho_f + (1.0 - m) * self.rho_s
    }

    /// Checks the admissible parameter set; the message names the violated constraint.
    pub fn validate(&self) -> Result<()> {
        let cv = |s: &str| Err(Error::ConstraintViolation(s.to_string()));
        if !self.lambda0.is_zero() {
            return cv("λ₀ (lambda0) must be 0");
        }
        if self.tau0 != ExtendedParam::Finite(1.0) {
            return cv("τ₀ (tau0) must be 1");
        }
        if self.mu0.is_infinite() {
            return cv("μ₀ (mu0) must be finite");
        }
        if self.nu0.is_infinite() {
            return cv("ν₀ (nu0) must be finite");
        }
        if self.p_star.is_zero() {
            return cv("p★ (p_star) must be positive");
        }
        if self.eta0.is_zero() {
            return cv("η₀ (eta0) must be positive");
        }
        if self.mu0.is_positive() && !self.mu1.is_infinite() {
            return cv("μ₁ (mu1) must be infinite when μ₀ > 0");
        }
        if !(self.rho_f > 0.0 && self.rho_s > 0.0) {
            return cv("densities rho_f and rho_s must be positive");
        }
        Ok(())
    }
}

/// Builds limits from exponent laws; μ₁ and λ₁ use the exponent shifted by 2.
pub fn limits_from_scaling_laws(laws: &ScalingLaws, rho_f: f64, rho_s: f64) -> Result<ScalingParams> {
    for (name, law) in laws.laws() {
        if !(law.c > 0.0) || !law.k.is_finite() {
            return Err(Error::ConstraintViolation(format!(
                "{name}: coefficient c must be positive and exponent finite"
            )));
        }
    }
    Ok(ScalingParams {
        mu0: laws.alpha_mu.limit(0.0),
        nu0: laws.alpha_nu.limit(0.0),
        lambda0: laws.alpha_lambda.limit(0.0),
        tau0: laws.alpha_tau.limit(0.0),
        p_star: laws.alpha_p.limit(0.0),
        eta0: laws.alpha_eta.limit(0.0),
        mu1: laws.alpha_mu.limit(2.0),
        lambda1: laws.alpha_lambda.limit(2.0),
        rho_f,
        rho_s,
        laws: Some(*laws),
    })
}

/// The nine limiting regimes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[allow(non_camel_case_types)]
pub enum RegimeTag {
    T2_I,
    T2_II_LAM_POS,
    T2_II_LAM_ZERO,
    T3_I,
    T3_II_LAM_POS,
    T3_II_LAM_ZERO,
    T3_III_KERNEL,
    T3_III_ZERO,
    T3_IV,
}

impl RegimeTag {
    pub const ALL: [RegimeTag; 9] = [
        RegimeTag::T2_I,
        RegimeTag::T2_II_LAM_POS,
        RegimeTag::T2_II_LAM_ZERO,
        RegimeTag::T3_I,
        RegimeTag::T3_II_LAM_POS,
        RegimeTag::T3_II_LAM_ZERO,
        RegimeTag::T3_III_KERNEL,
        RegimeTag::T3_III_ZERO,
        RegimeTag::T3_IV,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RegimeTag::T2_I => "T2_I",
            RegimeTag::T2_II_LAM_POS => "T2_II_LAM_POS",
            RegimeTag::T2_II_LAM_ZERO => "T2_II_LAM_ZERO",
            RegimeTag::T3_I => "T3_I",
            RegimeTag::T3_II_LAM_POS => "T3_II_LAM_POS",
            RegimeTag::T3_II_LAM_ZERO => "T3_II_LAM_ZERO",
            RegimeTag::T3_III_KERNEL => "T3_III_KERNEL",
            RegimeTag::T3_III_ZERO => "T3_III_ZERO",
            RegimeTag::T3_IV => "T3_IV",
        }
    }

    pub fn is_t2(self) -> bool {
        matches!(
            self,
            RegimeTag::T2_I | RegimeTag::T2_II_LAM_POS | RegimeTag::T2_II_LAM_ZERO
        )
    }
}

impl fmt::Display for RegimeTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Identifiers of the unit-cell problems.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellProblemId {
    StokesStrain,
    StokesPressure,
    StokesDivergence,
    StokesMemory,
    SolidKernel,
    SolidNeumann,
    FluidKernel,
    FluidNeumann,
    TwoPhasePressure,
    TwoPhaseForce,
}

impl CellProblemId {
    pub fn as_str(self) -> &'static str {
        match self {
            CellProblemId::StokesStrain => "stokes_strain",
            CellProblemId::StokesPressure => "stokes_pressure",
            CellProblemId::StokesDivergence => "stokes_divergence",
            CellProblemId::StokesMemory => "stokes_memory",
            CellProblemId::SolidKernel => "solid_kernel",
            CellProblemId::SolidNeumann => "solid_neumann",
            CellProblemId::FluidKernel => "fluid_kernel",
            CellProblemId::FluidNeumann => "fluid_neumann",
            CellProblemId::TwoPhasePressure => "two_phase_pressure",
            CellProblemId::TwoPhaseForce => "two_phase_force",
        }
    }
}

/// A classified regime with its requirements.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Regime {
    pub tag: RegimeTag,
    pub required_cell_problems: Vec<CellProblemId>,
    pub required_coefficients: Vec<&'static str>,
}

impl Regime {
    pub fn from_tag(tag: RegimeTag) -> Regime {
        use CellProblemId::*;
        let stokes = [StokesStrain, StokesPressure, StokesDivergence, StokesMemory];
        let t2_coeffs = [
            "A_f0",
            "B_f0",
            "B_f1_const",
            "B_f2_kernel",
            "C_f0",
            "a_f0",
            "a_f1",
            "a_f2_kernel",
        ];
        let (problems, coeffs): (Vec<CellProblemId>, Vec<&'static str>) = match tag {
            RegimeTag::T2_I => (stokes.to_vec(), t2_coeffs.to_vec()),
            RegimeTag::T2_II_LAM_POS => {
                let mut p = stokes.to_vec();
                p.push(SolidKernel);
                let mut c = t2_coeffs.to_vec();
                c.push("B_s1_kernel");
                (p, c)
            }
            RegimeTag::T2_II_LAM_ZERO => {
                let mut p = stokes.to_vec();
                p.push(SolidNeumann);
                let mut c = t2_coeffs.to_vec();
                c.push("B_s2");
                (p, c)
            }
            RegimeTag::T3_I => (vec![], vec![]),
            RegimeTag::T3_II_LAM_POS => (vec![SolidKernel], vec!["B_s1_kernel"]),
            RegimeTag::T3_II_LAM_ZERO => (vec![SolidNeumann], vec!["B_s2"]),
            RegimeTag::T3_III_KERNEL => (vec![FluidKernel], vec!["K_f_kernel"]),
            RegimeTag::T3_III_ZERO => (vec![FluidNeumann], vec!["B_f2_matrix"]),
            RegimeTag::T3_IV => (
                vec![TwoPhasePressure, TwoPhaseForce],
                vec!["B_pi_kernel", "forcing"],
            ),
        };
        Regime {
            tag,
            required_cell_problems: problems,
            required_coefficients: coeffs,
        }
    }
}

/// Selects the homogenized system for the given limits.
pub fn classify_regime(params: &ScalingParams) -> Result<Regime> {
    params.validate()?;
    let tag = if params.mu0.is_positive() {
        match params.lambda1 {
            ExtendedParam::Infinity => RegimeTag::T2_I,
            l if l.is_zero() => RegimeTag::T2_II_LAM_ZERO,
            _ => RegimeTag::T2_II_LAM_POS,
        }
    } else {
        if params.p_star.is_infinite() {
            return Err(Error::ConstraintViolation(
                "p★ (p_star) must be finite when μ₀ = 0".into(),
            ));
        }
        if params.eta0.is_infinite() {
            return Err(Error::ConstraintViolation(
                "η₀ (eta0) must be finite when μ₀ = 0".into(),
            ));
        }
        match (params.mu1.is_infinite(), params.lambda1.is_infinite()) {
            (true, true) => RegimeTag::T3_I,
            (true, false) => {
                if params.lambda1.is_zero() {
                    RegimeTag::T3_II_LAM_ZERO
                } else {
                    RegimeTag::T3_II_LAM_POS
                }
            }
            (false, true) => {
                if params.mu1.is_zero() {
                    RegimeTag::T3_III_ZERO
                } else {
                    RegimeTag::T3_III_KERNEL
                }
            }
            (false, false) => RegimeTag::T3_IV,
        }
    };
    Ok(Regime::from_tag(tag))
}
