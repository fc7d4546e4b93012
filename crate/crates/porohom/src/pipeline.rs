//! Config-driven stages: regime classification, cell solves, macro runs and
//! fine-scale comparison, with on-disk artifacts and a manifest.
//!
//! Layout of an output directory:
//!
//! | file | schema |
//! |------|--------|
//! | `coefficients.json` | [`COEFFICIENTS_SCHEMA`] |
//! | `series.csv` | [`SERIES_SCHEMA`] (first line `# schema: ...`) |
//! | `fields/<name>.txt` | [`FIELD_SCHEMA`] |
//! | `macro_series.json` | [`MACRO_SERIES_SCHEMA`] |
//! | `compare.json` | [`COMPARE_SCHEMA`] |
//! | `manifest.json` | [`MANIFEST_SCHEMA`], written last by every stage |

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cell::{
    solve_fluid_kernel, solve_neumann_laplace, solve_solid_kernel, solve_stokes_cell_with, solve_stokes_memory_cell,
    solve_two_phase_kernel, KernelHistory, MemoryCellSolution, NeumannSolution, Phase, StokesCellSolution, StokesRhs,
    TimeGrid, TwoPhaseForcing,
};
use crate::dns::{compare_to_homogenized, estimate_report, DiscrepancyReport, DnsSolver, EstimateReport, FieldSeries};
use crate::error::{Error, Result};
use crate::geometry::{build_cell, tile, CellGeometry, GeometrySpec};
use crate::grid::voigt_pairs;
use crate::macroscale::{MacroConfig, MacroState, MacroStepper};
use crate::params::{classify_regime, limits_from_scaling_laws, ExtendedParam, Regime, RegimeTag, ScalingLaws, ScalingParams};
use crate::sparse::SolverOptions;
use crate::tensors::{
    assemble_A_f0, assemble_B_pi_and_forcing, assemble_B_s1, assemble_B_s2, assemble_fluid_matrices,
    assemble_pressure_coeffs, EffectiveCoefficients, Validation, COEFFICIENTS_SCHEMA,
};

pub const MANIFEST_SCHEMA: &str = "porohom.manifest/1";
pub const SERIES_SCHEMA: &str = "porohom.series/1";
pub const FIELD_SCHEMA: &str = "porohom.field/1";
pub const MACRO_SERIES_SCHEMA: &str = "porohom.macro_series/1";
pub const COMPARE_SCHEMA: &str = "porohom.compare/1";

pub const COEFFICIENTS_FILE: &str = "coefficients.json";
pub const SERIES_FILE: &str = "series.csv";
pub const MACRO_SERIES_FILE: &str = "macro_series.json";
pub const COMPARE_FILE: &str = "compare.json";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Geometry section; `mask_file` paths are relative to the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GeometryConfig {
    FullFluid { dim: usize, n: usize },
    FullSolid { dim: usize, n: usize },
    Block { dim: usize, n: usize, side: f64 },
    Cross { dim: usize, n: usize, width: f64 },
    MaskFile { path: PathBuf },
}

/// Limit values; `tau0` defaults to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LimitsConfig {
    pub mu0: ExtendedParam,
    pub nu0: ExtendedParam,
    pub lambda0: ExtendedParam,
    #[serde(default = "one")]
    pub tau0: ExtendedParam,
    pub p_star: ExtendedParam,
    pub eta0: ExtendedParam,
    pub mu1: ExtendedParam,
    pub lambda1: ExtendedParam,
}

fn one() -> ExtendedParam {
    ExtendedParam::Finite(1.0)
}

/// Either explicit limits or exponent laws (required for fine-scale runs).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsConfig {
    pub rho_f: f64,
    pub rho_s: f64,
    #[serde(default)]
    pub limits: Option<LimitsConfig>,
    #[serde(default)]
    pub laws: Option<ScalingLaws>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NumericsConfig {
    /// Macro cells per side.
    pub macro_n: usize,
    pub dt: f64,
    pub t_final: f64,
    #[serde(default = "default_tol")]
    pub solver_tol: f64,
    #[serde(default = "default_tol")]
    pub picard_tol: f64,
    #[serde(default = "default_picard_iter")]
    pub picard_max_iter: usize,
}

fn default_tol() -> f64 {
    1e-10
}

fn default_picard_iter() -> usize {
    50
}

/// Body force F(x, t).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ForceConfig {
    #[default]
    Zero,
    /// F = a sin(ωt) (sin πx sin 2πy, −sin 2πx sin πy, 0).
    Swirl { amplitude: f64, omega: f64 },
    /// F = a min(t, t_ramp) e_axis.
    Ramp { amplitude: f64, t_ramp: f64, axis: usize },
}

impl ForceConfig {
    pub fn eval(&self, x: [f64; 3], t: f64) -> [f64; 3] {
        use std::f64::consts::PI;
        match *self {
            ForceConfig::Zero => [0.0; 3],
            ForceConfig::Swirl { amplitude, omega } => {
                let s = amplitude * (omega * t).sin();
                [
                    s * (PI * x[0]).sin() * (2.0 * PI * x[1]).sin(),
                    -s * (2.0 * PI * x[0]).sin() * (PI * x[1]).sin(),
                    0.0,
                ]
            }
            ForceConfig::Ramp { amplitude, t_ramp, axis } => {
                let mut f = [0.0; 3];
                f[axis] = amplitude * t.min(t_ramp);
                f
            }
        }
    }

    /// Canonical label; runs are comparable only with equal labels.
    pub fn label(&self) -> String {
        serde_json::to_string(self).unwrap_or_default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Regime,
    Cell,
    Run,
    Compare,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub stages: Vec<Stage>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            stages: vec![Stage::Regime, Stage::Cell, Stage::Run, Stage::Compare],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareConfig {
    /// Values of 1/ε, coarsest first.
    #[serde(default = "default_eps_k")]
    pub eps_k: Vec<usize>,
    /// Fine grid per side.
    #[serde(default = "default_dns_n")]
    pub dns_n: usize,
    /// Also write every fine trajectory.
    #[serde(default)]
    pub dump_trajectories: bool,
}

fn default_eps_k() -> Vec<usize> {
    vec![2, 4, 8]
}

fn default_dns_n() -> usize {
    64
}

impl Default for CompareConfig {
    fn default() -> Self {
        CompareConfig {
            eps_k: default_eps_k(),
            dns_n: default_dns_n(),
            dump_trajectories: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_out")]
    pub output_dir: PathBuf,
    pub geometry: GeometryConfig,
    pub params: ParamsConfig,
    pub numerics: NumericsConfig,
    #[serde(default)]
    pub force: ForceConfig,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    #[serde(default)]
    pub compare: CompareConfig,
    /// Directory of the config file, for relative paths.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

/// Command-line overrides.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub output_dir: Option<PathBuf>,
    pub tol: Option<f64>,
}

impl RunConfig {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("reading config {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml(&text, &base)
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(d) = &o.output_dir {
            // relative to the working directory, not the config file
            self.output_dir = if d.is_absolute() {
                d.clone()
            } else {
                std::env::current_dir()?.join(d)
            };
        }
        if let Some(t) = o.tol {
            self.numerics.solver_tol = t;
            self.numerics.picard_tol = t;
        }
        self.validate()
    }

    /// Output directory resolved against the config location.
    pub fn out_dir(&self) -> PathBuf {
        if self.output_dir.is_absolute() {
            self.output_dir.clone()
        } else {
            self.base_dir.join(&self.output_dir)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = &self.numerics;
        for (name, v) in [("solver_tol", n.solver_tol), ("picard_tol", n.picard_tol)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if n.picard_max_iter == 0 {
            return Err(Error::Config("picard_max_iter must be positive".into()));
        }
        let s = &self.pipeline.stages;
        if s.is_empty() {
            return Err(Error::Config("pipeline.stages is empty".into()));
        }
        if s.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("pipeline stages must be listed once, in order".into()));
        }
        // each stage after the first consumes the artifacts of the one before it
        for w in s.windows(2) {
            let gap_ok = match (w[0], w[1]) {
                (Stage::Regime, Stage::Cell) | (Stage::Cell, Stage::Run) | (Stage::Run, Stage::Compare) => true,
                _ => false,
            };
            if !gap_ok {
                return Err(Error::Config(format!(
                    "stage {:?} cannot follow {:?}: its inputs would be missing",
                    w[1], w[0]
                )));
            }
        }
        if self.params.limits.is_some() == self.params.laws.is_some() {
            return Err(Error::Config("give exactly one of params.limits and params.laws".into()));
        }
        if let ForceConfig::Ramp { axis, .. } = self.force {
            if axis > 2 {
                return Err(Error::Config(format!("force axis {axis} out of range")));
            }
        }
        if self.compare.eps_k.is_empty() || self.compare.eps_k.contains(&0) {
            return Err(Error::Config("compare.eps_k must list positive integers".into()));
        }
        Ok(())
    }

    pub fn require_stage(&self, stage: Stage) -> Result<()> {
        if self.pipeline.stages.contains(&stage) {
            Ok(())
        } else {
            Err(Error::Config(format!("stage {stage:?} is not enabled in pipeline.stages")))
        }
    }

    pub fn geometry_spec(&self) -> Result<GeometrySpec> {
        Ok(match &self.geometry {
            GeometryConfig::FullFluid { dim, n } => GeometrySpec::FullFluid { dim: *dim, n: *n },
            GeometryConfig::FullSolid { dim, n } => GeometrySpec::FullSolid { dim: *dim, n: *n },
            GeometryConfig::Block { dim, n, side } => GeometrySpec::Block {
                dim: *dim,
                n: *n,
                side: *side,
            },
            GeometryConfig::Cross { dim, n, width } => GeometrySpec::Cross {
                dim: *dim,
                n: *n,
                width: *width,
            },
            GeometryConfig::MaskFile { path } => {
                let p = if path.is_absolute() { path.clone() } else { self.base_dir.join(path) };
                let text = std::fs::read_to_string(&p)
                    .map_err(|e| Error::Io(format!("reading geometry file {}: {e}", p.display())))?;
                CellGeometry::from_mask_text(&text)?
            }
        })
    }

    pub fn cell(&self) -> Result<CellGeometry> {
        build_cell(&self.geometry_spec()?)
    }

    pub fn scaling_params(&self) -> Result<ScalingParams> {
        let p = &self.params;
        match (&p.limits, &p.laws) {
            (Some(l), None) => Ok(ScalingParams {
                mu0: l.mu0,
                nu0: l.nu0,
                lambda0: l.lambda0,
                tau0: l.tau0,
                p_star: l.p_star,
                eta0: l.eta0,
                mu1: l.mu1,
                lambda1: l.lambda1,
                rho_f: p.rho_f,
                rho_s: p.rho_s,
                laws: None,
            }),
            (None, Some(laws)) => limits_from_scaling_laws(laws, p.rho_f, p.rho_s),
            _ => Err(Error::Config("give exactly one of params.limits and params.laws".into())),
        }
    }

    pub fn regime(&self) -> Result<Regime> {
        classify_regime(&self.scaling_params()?)
    }

    pub fn solver_options(&self) -> SolverOptions {
        SolverOptions {
            tol: self.numerics.solver_tol,
            ..SolverOptions::default()
        }
    }

    pub fn macro_config(&self, dim: usize) -> Result<MacroConfig> {
        let n = &self.numerics;
        let mut c = MacroConfig::new(dim, n.macro_n, n.dt, n.t_final)?;
        c.picard_tol = n.picard_tol;
        c.picard_max_iter = n.picard_max_iter;
        c.solver = self.solver_options();
        Ok(c)
    }

    /// SHA-256 of the canonical JSON form, output directory excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        sha256_hex(serde_json::to_string(&c).unwrap_or_default().as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let d = Sha256::digest(bytes);
    d.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn write_file(dir: &Path, rel: &str, contents: &str) -> Result<PathBuf> {
    let path = dir.join(rel);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::Io(format!("creating {}: {e}", parent.display())))?;
    }
    std::fs::write(&path, contents).map_err(|e| Error::Io(format!("writing {}: {e}", path.display())))?;
    Ok(path)
}

fn read_file(dir: &Path, rel: &str) -> Result<String> {
    let path = dir.join(rel);
    std::fs::read_to_string(&path).map_err(|e| Error::Io(format!("reading {}: {e}", path.display())))
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::Io(format!("serializing: {e}")))
}

fn check_schema(found: &str, expected: &str, what: &str) -> Result<()> {
    if found != expected {
        return Err(Error::Config(format!(
            "{what} has schema '{found}', expected '{expected}'"
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------- manifest

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub path: String,
    pub schema: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: String,
    pub config_hash: String,
    pub geometry_hash: String,
    pub regime: RegimeTag,
    pub files: Vec<ManifestFile>,
    pub schema_versions: BTreeMap<String, String>,
    /// SHA-256 of this manifest without `timings` and `content_hash`.
    pub content_hash: String,
    /// Wall-clock seconds per stage.
    pub timings: BTreeMap<String, f64>,
}

impl RunManifest {
    fn new(config_hash: String, geometry_hash: String, regime: RegimeTag) -> Self {
        let schema_versions = [
            ("coefficients", COEFFICIENTS_SCHEMA),
            ("series", SERIES_SCHEMA),
            ("field", FIELD_SCHEMA),
            ("macro_series", MACRO_SERIES_SCHEMA),
            ("compare", COMPARE_SCHEMA),
            ("manifest", MANIFEST_SCHEMA),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
        RunManifest {
            schema: MANIFEST_SCHEMA.into(),
            config_hash,
            geometry_hash,
            regime,
            files: Vec::new(),
            schema_versions,
            content_hash: String::new(),
            timings: BTreeMap::new(),
        }
    }

    /// Loads the manifest of `dir` if it belongs to the same config, else starts a new one.
    fn open(dir: &Path, config_hash: &str, geometry_hash: &str, regime: RegimeTag) -> Self {
        if let Ok(text) = read_file(dir, MANIFEST_FILE) {
            if let Ok(m) = serde_json::from_str::<RunManifest>(&text) {
                if m.schema == MANIFEST_SCHEMA && m.config_hash == config_hash && m.regime == regime {
                    return m;
                }
            }
        }
        RunManifest::new(config_hash.into(), geometry_hash.into(), regime)
    }

    fn record(&mut self, rel: &str, schema: &str, contents: &str) {
        self.files.retain(|f| f.path != rel);
        self.files.push(ManifestFile {
            path: rel.into(),
            schema: schema.into(),
            sha256: sha256_hex(contents.as_bytes()),
        });
        self.files.sort_by(|a, b| a.path.cmp(&b.path));
    }

    fn compute_hash(&self) -> String {
        let mut m = self.clone();
        m.timings.clear();
        m.content_hash.clear();
        sha256_hex(serde_json::to_string(&m).unwrap_or_default().as_bytes())
    }

    fn write(mut self, dir: &Path) -> Result<RunManifest> {
        self.content_hash = self.compute_hash();
        write_file(dir, MANIFEST_FILE, &to_json(&self)?)?;
        Ok(self)
    }
}

/// Checks that every listed file exists, matches its hash and declares its schema.
pub fn verify_manifest(dir: &Path) -> Result<RunManifest> {
    let m: RunManifest = serde_json::from_str(&read_file(dir, MANIFEST_FILE)?)
        .map_err(|e| Error::Config(format!("manifest: {e}")))?;
    check_schema(&m.schema, MANIFEST_SCHEMA, "manifest")?;
    if m.content_hash != m.compute_hash() {
        return Err(Error::HashMismatch("manifest content hash does not match".into()));
    }
    for f in &m.files {
        let text = read_file(dir, &f.path)?;
        if sha256_hex(text.as_bytes()) != f.sha256 {
            return Err(Error::HashMismatch(format!("{} changed since it was recorded", f.path)));
        }
        let declared = declared_schema(&f.path, &text)?;
        check_schema(&declared, &f.schema, &f.path)?;
    }
    Ok(m)
}

fn declared_schema(path: &str, text: &str) -> Result<String> {
    if path.ends_with(".json") {
        let v: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("{path}: {e}")))?;
        v.get("schema")
            .and_then(|s| s.as_str())
            .map(str::to_string)
            .ok_or_else(|| Error::Config(format!("{path} declares no schema")))
    } else {
        text.lines()
            .next()
            .and_then(|l| l.strip_prefix("# schema: "))
            .map(|s| s.split_whitespace().next().unwrap_or("").to_string())
            .ok_or_else(|| Error::Config(format!("{path} declares no schema")))
    }
}

// ---------------------------------------------------------------- regime

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegimeReport {
    pub tag: RegimeTag,
    pub params: ScalingParams,
    pub required_cell_problems: Vec<&'static str>,
    pub required_coefficients: Vec<&'static str>,
}

impl RegimeReport {
    pub fn render(&self) -> String {
        format!(
            "{}\ncell problems: [{}]\ncoefficients: [{}]\n",
            self.tag,
            self.required_cell_problems.join(", "),
            self.required_coefficients.join(", ")
        )
    }
}

pub fn cmd_regime(cfg: &RunConfig) -> Result<RegimeReport> {
    cfg.require_stage(Stage::Regime)?;
    let params = cfg.scaling_params()?;
    let r = classify_regime(&params)?;
    Ok(RegimeReport {
        tag: r.tag,
        params,
        required_cell_problems: r.required_cell_problems.iter().map(|p| p.as_str()).collect(),
        required_coefficients: r.required_coefficients,
    })
}

// ---------------------------------------------------------------- cell

enum JobOut {
    Stokes(Box<StokesCellSolution>),
    Memory(Box<MemoryCellSolution>),
    Kernel(KernelHistory),
    Neumann(NeumannSolution),
}

type Job<'a> = Box<dyn Fn() -> Result<JobOut> + Send + Sync + 'a>;

fn run_jobs(jobs: Vec<Job<'_>>, workers: Option<usize>) -> Result<Vec<JobOut>> {
    let run = || jobs.par_iter().map(|j| j()).collect::<Result<Vec<_>>>();
    match workers {
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w.max(1))
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?
            .install(run),
        None => run(),
    }
}

fn finite(name: &str, p: ExtendedParam) -> Result<f64> {
    p.value()
        .ok_or_else(|| Error::ConstraintViolation(format!("{name} must be finite for this cell problem")))
}

/// Solves the cell problems of `tag` and assembles its coefficients.
///
/// Independent cell problems run on a rayon pool of `workers` threads; the
/// assembly order is fixed, so results do not depend on scheduling.
pub fn compute_coefficients(
    cell: &CellGeometry,
    params: &ScalingParams,
    tag: RegimeTag,
    tg: &TimeGrid,
    opts: &SolverOptions,
    workers: Option<usize>,
) -> Result<EffectiveCoefficients> {
    params.validate()?;
    cell.validate_connectivity()?;
    let dim = cell.dim;
    let mut c = EffectiveCoefficients::new(tag, cell.hash(), dim, cell.m, *params);
    let mut jobs: Vec<Job> = Vec::new();
    let stokes = tag.is_t2();
    let pairs = voigt_pairs(dim);
    let with_div = !(cell.interface_faces.is_empty() && params.p_star.is_infinite());
    if stokes {
        let mu0 = finite("μ₀", params.mu0)?;
        let (nu0, ps) = (params.nu0, params.p_star);
        for &(i, j) in &pairs {
            jobs.push(Box::new(move || {
                solve_stokes_cell_with(cell, StokesRhs::Strain(i, j), mu0, nu0, ps, opts)
                    .map(|s| JobOut::Stokes(Box::new(s)))
            }));
        }
        jobs.push(Box::new(move || {
            solve_stokes_cell_with(cell, StokesRhs::Pressure, mu0, nu0, ps, opts).map(|s| JobOut::Stokes(Box::new(s)))
        }));
        if with_div {
            jobs.push(Box::new(move || {
                solve_stokes_cell_with(cell, StokesRhs::Divergence, mu0, nu0, ps, opts)
                    .map(|s| JobOut::Stokes(Box::new(s)))
            }));
        }
        jobs.push(Box::new(move || {
            solve_stokes_memory_cell(cell, mu0, nu0, ps, tg.dt, tg.steps, opts).map(|s| JobOut::Memory(Box::new(s)))
        }));
    }
    let (rho_f, rho_s) = (params.rho_f, params.rho_s);
    match tag {
        RegimeTag::T2_II_LAM_POS | RegimeTag::T3_II_LAM_POS => {
            let l1 = finite("λ₁", params.lambda1)?;
            jobs.push(Box::new(move || solve_solid_kernel(cell, rho_s, l1, tg, opts).map(JobOut::Kernel)));
        }
        RegimeTag::T2_II_LAM_ZERO | RegimeTag::T3_II_LAM_ZERO => {
            jobs.push(Box::new(move || solve_neumann_laplace(cell, Phase::Solid, opts).map(JobOut::Neumann)));
        }
        RegimeTag::T3_III_KERNEL => {
            let m1 = finite("μ₁", params.mu1)?;
            jobs.push(Box::new(move || solve_fluid_kernel(cell, rho_f, m1, tg, opts).map(JobOut::Kernel)));
        }
        RegimeTag::T3_III_ZERO => {
            jobs.push(Box::new(move || solve_neumann_laplace(cell, Phase::Fluid, opts).map(JobOut::Neumann)));
        }
        RegimeTag::T3_IV => {
            let m1 = finite("μ₁", params.mu1)?;
            let l1 = finite("λ₁", params.lambda1)?;
            for f in [TwoPhaseForcing::Pressure, TwoPhaseForcing::Force] {
                jobs.push(Box::new(move || {
                    solve_two_phase_kernel(cell, rho_f, rho_s, m1, l1, f, tg, opts).map(JobOut::Kernel)
                }));
            }
        }
        _ => {}
    }
    let mut out = run_jobs(jobs, workers)?.into_iter();
    if stokes {
        let mut strain = Vec::new();
        for _ in &pairs {
            match out.next() {
                Some(JobOut::Stokes(s)) => strain.push(*s),
                _ => return Err(Error::MissingSolution("strain cell problem".into())),
            }
        }
        let pressure = match out.next() {
            Some(JobOut::Stokes(s)) => *s,
            _ => return Err(Error::MissingSolution("pressure cell problem".into())),
        };
        let div = if with_div {
            match out.next() {
                Some(JobOut::Stokes(s)) => Some(*s),
                _ => return Err(Error::MissingSolution("divergence cell problem".into())),
            }
        } else {
            None
        };
        let memory = match out.next() {
            Some(JobOut::Memory(s)) => *s,
            _ => return Err(Error::MissingSolution("pressure-memory cell problem".into())),
        };
        let a = assemble_A_f0(&strain, dim)?;
        c.validations.push(Validation::check("A_f0", &a.mandel(), a.asymmetry, 1e-8));
        c.A_f0 = Some(a);
        let mu0 = finite("μ₀", params.mu0)?;
        c.set_pressure(assemble_pressure_coeffs(&strain, &pressure, div.as_ref(), &memory, mu0, cell.m, dim)?);
    }
    match tag {
        RegimeTag::T2_II_LAM_POS | RegimeTag::T3_II_LAM_POS => {
            let Some(JobOut::Kernel(h)) = out.next() else {
                return Err(Error::MissingSolution("solid kernel".into()));
            };
            c.B_s1_kernel = Some(assemble_B_s1(&h, rho_s, finite("λ₁", params.lambda1)?)?);
        }
        RegimeTag::T2_II_LAM_ZERO | RegimeTag::T3_II_LAM_ZERO => {
            let Some(JobOut::Neumann(n)) = out.next() else {
                return Err(Error::MissingSolution("solid Neumann problem".into()));
            };
            let (b, v) = assemble_B_s2(&n, cell.m)?;
            c.B_s2 = Some(b);
            c.validations.push(v);
        }
        RegimeTag::T3_III_KERNEL => {
            let Some(JobOut::Kernel(h)) = out.next() else {
                return Err(Error::MissingSolution("fluid kernel".into()));
            };
            let (k, _) = assemble_fluid_matrices(Some((&h, rho_f, finite("μ₁", params.mu1)?)), None, cell.m)?;
            c.K_f_kernel = k;
        }
        RegimeTag::T3_III_ZERO => {
            let Some(JobOut::Neumann(n)) = out.next() else {
                return Err(Error::MissingSolution("fluid Neumann problem".into()));
            };
            let (_, b) = assemble_fluid_matrices(None, Some(&n), cell.m)?;
            if let Some((b, v)) = b {
                c.B_f2_matrix = Some(b);
                c.validations.push(v);
            }
        }
        RegimeTag::T3_IV => {
            let (Some(JobOut::Kernel(p)), Some(JobOut::Kernel(f))) = (out.next(), out.next()) else {
                return Err(Error::MissingSolution("two-phase kernels".into()));
            };
            let (bp, bf) = assemble_B_pi_and_forcing(&p, &f, params)?;
            c.B_pi_kernel = Some(bp);
            c.forcing_kernel = Some(bf);
        }
        _ => {}
    }
    Ok(c)
}

#[derive(Debug, Clone)]
pub struct CellOutcome {
    pub path: PathBuf,
    pub coefficients: EffectiveCoefficients,
    pub all_valid: bool,
    pub manifest: RunManifest,
}

impl CellOutcome {
    pub fn render(&self) -> String {
        let mut s = format!("{} -> {}\n", self.coefficients.regime, self.path.display());
        for v in &self.coefficients.validations {
            let _ = writeln!(
                s,
                "  {} [{}] min eigenvalue {:.6e}, asymmetry {:.3e}",
                v.name,
                if v.passed { "ok" } else { "FAILED" },
                v.min_eigenvalue,
                v.asymmetry
            );
        }
        s
    }
}

fn kernel_grid(cfg: &RunConfig) -> Result<TimeGrid> {
    let mc = MacroConfig::new(2, cfg.numerics.macro_n.max(2), cfg.numerics.dt, cfg.numerics.t_final)?;
    Ok(TimeGrid::new(mc.dt, mc.steps))
}

pub fn cmd_cell(cfg: &RunConfig, workers: Option<usize>) -> Result<CellOutcome> {
    cfg.require_stage(Stage::Cell)?;
    let t0 = Instant::now();
    let cell = cfg.cell()?;
    let params = cfg.scaling_params()?;
    let regime = classify_regime(&params)?;
    let coefficients = compute_coefficients(
        &cell,
        &params,
        regime.tag,
        &kernel_grid(cfg)?,
        &cfg.solver_options(),
        workers,
    )?;
    let dir = cfg.out_dir();
    let json = coefficients.to_json()?;
    let path = write_file(&dir, COEFFICIENTS_FILE, &json)?;
    let mut manifest = RunManifest::open(&dir, &cfg.hash(), &cell.hash(), regime.tag);
    manifest.record(COEFFICIENTS_FILE, COEFFICIENTS_SCHEMA, &json);
    manifest.timings.insert("cell".into(), t0.elapsed().as_secs_f64());
    let manifest = manifest.write(&dir)?;
    Ok(CellOutcome {
        path,
        all_valid: coefficients.all_valid(),
        coefficients,
        manifest,
    })
}

// ---------------------------------------------------------------- run

type FieldPick = fn(&MacroState) -> &Vec<f64>;

/// Fields reported for a regime: name, whether it lives on faces, accessor.
pub fn regime_fields(tag: RegimeTag) -> Vec<(&'static str, bool, FieldPick)> {
    let v: (&str, bool, FieldPick) = ("v", true, |s| &s.v);
    let w: (&str, bool, FieldPick) = ("w", true, |s| &s.w);
    let dw: (&str, bool, FieldPick) = ("dw", true, |s| &s.dw);
    let w_s: (&str, bool, FieldPick) = ("w_s", true, |s| &s.w_s);
    let w_f: (&str, bool, FieldPick) = ("w_f", true, |s| &s.w_f);
    let dw_s: (&str, bool, FieldPick) = ("dw_s", true, |s| &s.dw_s);
    let dw_f: (&str, bool, FieldPick) = ("dw_f", true, |s| &s.dw_f);
    let p: (&str, bool, FieldPick) = ("p", false, |s| &s.p);
    let q: (&str, bool, FieldPick) = ("q", false, |s| &s.q);
    let pi: (&str, bool, FieldPick) = ("pi", false, |s| &s.pi);
    let mut f = match tag {
        RegimeTag::T2_I => vec![v, w],
        RegimeTag::T2_II_LAM_POS | RegimeTag::T2_II_LAM_ZERO => vec![v, w_s, dw_s],
        RegimeTag::T3_I | RegimeTag::T3_IV => vec![dw, w],
        _ => vec![dw, w, dw_f, w_f, dw_s, w_s],
    };
    f.extend([p, q, pi]);
    f
}

/// Velocity compared with fine-scale runs.
fn macro_velocity(tag: RegimeTag, st: &MacroState) -> &Vec<f64> {
    if tag.is_t2() {
        &st.v
    } else {
        &st.dw
    }
}

fn l2(x: &[f64], vol: f64) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() * vol).sqrt()
}

fn max_abs(x: &[f64]) -> f64 {
    x.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

fn field_text(name: &str, st: &MacroState, on_faces: bool, values: &[f64], n: usize, dim: usize) -> String {
    let mut s = format!(
        "# schema: {FIELD_SCHEMA} name={name} location={} dim={dim} n={n} t={:.12e}\n",
        if on_faces { "faces" } else { "cells" },
        st.t
    );
    for v in values {
        let _ = writeln!(s, "{v:.12e}");
    }
    s
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MacroSeriesFile {
    schema: String,
    regime: RegimeTag,
    geometry_hash: String,
    series: FieldSeries,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub csv_path: PathBuf,
    pub steps: usize,
    pub max_picard_iterations: usize,
    pub manifest: RunManifest,
}

/// Loads and checks the coefficients written by the cell stage.
pub fn load_coefficients(cfg: &RunConfig, cell: &CellGeometry) -> Result<EffectiveCoefficients> {
    let text = read_file(&cfg.out_dir(), COEFFICIENTS_FILE)?;
    let c = EffectiveCoefficients::from_json(&text)?;
    if c.geometry_hash != cell.hash() {
        return Err(Error::HashMismatch(format!(
            "coefficients were built for geometry {} but the config describes {}",
            c.geometry_hash,
            cell.hash()
        )));
    }
    Ok(c)
}

pub fn cmd_run(cfg: &RunConfig) -> Result<RunOutcome> {
    cfg.require_stage(Stage::Run)?;
    let t0 = Instant::now();
    let cell = cfg.cell()?;
    let regime = cfg.regime()?;
    let coeffs = load_coefficients(cfg, &cell)?;
    if coeffs.regime != regime.tag {
        return Err(Error::Config(format!(
            "coefficients are for {} but the config selects {}",
            coeffs.regime, regime.tag
        )));
    }
    let mc = cfg.macro_config(cell.dim)?;
    let stepper = MacroStepper::new(regime.tag, &coeffs, &mc)?;
    let g = stepper.grid();
    let vol = g.vol();
    let fields = regime_fields(regime.tag);
    let mut csv = format!("# schema: {SERIES_SCHEMA} regime={}\nstep,t", regime.tag);
    for (name, _, _) in &fields {
        let _ = write!(csv, ",{name}_l2,{name}_max");
    }
    csv.push('\n');
    let label = cfg.force.label();
    let mut series = FieldSeries::new(cell.dim, mc.n, mc.dt, &label);
    let force = |x: [f64; 3], t: f64| cfg.force.eval(x, t);
    let mut max_picard = 0;
    let (final_state, _) = stepper.run(&force, |st, rep| {
        max_picard = max_picard.max(rep.picard_iterations);
        let _ = write!(csv, "{},{:.12e}", st.step, st.t);
        for (_, _, pick) in &fields {
            let x = pick(st);
            let _ = write!(csv, ",{:.12e},{:.12e}", l2(x, vol), max_abs(x));
        }
        csv.push('\n');
        series.push(macro_velocity(regime.tag, st).clone(), st.p.clone(), st.pi.clone());
    })?;
    let dir = cfg.out_dir();
    let mut manifest = RunManifest::open(&dir, &cfg.hash(), &cell.hash(), regime.tag);
    let csv_path = write_file(&dir, SERIES_FILE, &csv)?;
    manifest.record(SERIES_FILE, SERIES_SCHEMA, &csv);
    for (name, faces, pick) in &fields {
        let rel = format!("fields/{name}.txt");
        let text = field_text(name, &final_state, *faces, pick(&final_state), mc.n, cell.dim);
        write_file(&dir, &rel, &text)?;
        manifest.record(&rel, FIELD_SCHEMA, &text);
    }
    let ms = to_json(&MacroSeriesFile {
        schema: MACRO_SERIES_SCHEMA.into(),
        regime: regime.tag,
        geometry_hash: cell.hash(),
        series,
    })?;
    write_file(&dir, MACRO_SERIES_FILE, &ms)?;
    manifest.record(MACRO_SERIES_FILE, MACRO_SERIES_SCHEMA, &ms);
    manifest.timings.insert("run".into(), t0.elapsed().as_secs_f64());
    let manifest = manifest.write(&dir)?;
    Ok(RunOutcome {
        csv_path,
        steps: mc.steps,
        max_picard_iterations: max_picard,
        manifest,
    })
}

// ---------------------------------------------------------------- compare

fn load_macro_series(dir: &Path) -> Result<MacroSeriesFile> {
    let text = read_file(dir, MACRO_SERIES_FILE)?;
    let f: MacroSeriesFile =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{MACRO_SERIES_FILE}: {e}")))?;
    check_schema(&f.schema, MACRO_SERIES_SCHEMA, MACRO_SERIES_FILE)?;
    Ok(f)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub schema: String,
    /// `dns` for an ε-sweep, `macro` for a run-against-run comparison.
    pub mode: String,
    pub estimate: Option<EstimateReport>,
    pub discrepancy: DiscrepancyReport,
    pub pass: bool,
}

impl CompareReport {
    pub fn render(&self) -> String {
        let mut s = String::new();
        if let Some(e) = &self.estimate {
            for en in &e.entries {
                let _ = writeln!(
                    s,
                    "ε = {:<8} estimate total {:.6e}, pressure {:.6e}, FP ratio {:.4}, extension ratios {:.4} / {:.4}",
                    en.eps,
                    en.norms.total(),
                    en.norms.pressure,
                    en.fp_ratio,
                    en.extension_l2_ratio,
                    en.extension_grad_ratio
                );
            }
            let _ = writeln!(s, "estimate bounded over the sweep: {}", e.bounded);
        }
        for d in &self.discrepancy.entries {
            let _ = writeln!(
                s,
                "ε = {:<8} discrepancy velocity {:.6e}, p {:.6e}, π {:.6e}, total {:.6e}",
                d.eps, d.velocity, d.p, d.pi, d.total
            );
        }
        let _ = writeln!(s, "monotone decrease: {}", self.discrepancy.monotone_decrease);
        let _ = writeln!(s, "{}", if self.pass { "PASS" } else { "FAIL" });
        s
    }
}

fn finish_compare(cfg: &RunConfig, report: &CompareReport, extra: &[(String, String)], t0: Instant) -> Result<()> {
    let dir = cfg.out_dir();
    let cell = cfg.cell()?;
    let regime = cfg.regime()?;
    let json = to_json(report)?;
    write_file(&dir, COMPARE_FILE, &json)?;
    let mut manifest = RunManifest::open(&dir, &cfg.hash(), &cell.hash(), regime.tag);
    manifest.record(COMPARE_FILE, COMPARE_SCHEMA, &json);
    for (rel, text) in extra {
        write_file(&dir, rel, text)?;
        manifest.record(rel, COMPARE_SCHEMA, text);
    }
    manifest.timings.insert("compare".into(), t0.elapsed().as_secs_f64());
    manifest.write(&dir)?;
    Ok(())
}

/// Compares this run's macro series with the one stored in `other_dir`.
pub fn cmd_compare_runs(cfg: &RunConfig, other_dir: &Path) -> Result<CompareReport> {
    cfg.require_stage(Stage::Compare)?;
    let t0 = Instant::now();
    let mine = load_macro_series(&cfg.out_dir())?;
    let other = load_macro_series(other_dir)?;
    let discrepancy = compare_to_homogenized(&[(0.0, &other.series)], &mine.series)?;
    let pass = discrepancy.entries.iter().all(|e| e.total == 0.0);
    let report = CompareReport {
        schema: COMPARE_SCHEMA.into(),
        mode: "macro".into(),
        estimate: None,
        discrepancy,
        pass,
    };
    finish_compare(cfg, &report, &[], t0)?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
struct TrajectoryDump<'a> {
    schema: &'static str,
    trajectory: &'a crate::dns::DnsTrajectory,
}

/// ε-sweep of fine-scale runs against the stored macro run.
pub fn cmd_compare(cfg: &RunConfig, workers: Option<usize>) -> Result<CompareReport> {
    cfg.require_stage(Stage::Compare)?;
    let t0 = Instant::now();
    let laws = cfg
        .params
        .laws
        .ok_or_else(|| Error::Config("fine-scale runs need params.laws".into()))?;
    let macro_run = load_macro_series(&cfg.out_dir())?;
    let spec = cfg.geometry_spec()?;
    let cell = build_cell(&spec)?;
    if macro_run.geometry_hash != cell.hash() {
        return Err(Error::HashMismatch("macro run was made for a different geometry".into()));
    }
    let c = &cfg.compare;
    let mc = cfg.macro_config(cell.dim)?;
    let mut domains = Vec::new();
    for &k in &c.eps_k {
        if c.dns_n % k != 0 {
            return Err(Error::ResolutionMismatch(format!("dns_n = {} is not divisible by 1/ε = {k}", c.dns_n)));
        }
        let cell_k = build_cell(&spec.with_resolution(c.dns_n / k)?)?;
        domains.push(tile(&cell_k, k, c.dns_n)?);
    }
    let label = cfg.force.label();
    let force = |x: [f64; 3], t: f64| cfg.force.eval(x, t);
    let (rho_f, rho_s) = (cfg.params.rho_f, cfg.params.rho_s);
    let run = || {
        domains
            .par_iter()
            .map(|d| {
                DnsSolver::new(d, laws.at(d.eps), rho_f, rho_s, mc.dt, mc.steps)?.run(&force, &label)
            })
            .collect::<Result<Vec<_>>>()
    };
    let runs = match workers {
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w.max(1))
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?
            .install(run)?,
        None => run()?,
    };
    let estimate = estimate_report(&domains, &runs)?;
    let pairs: Vec<(f64, &FieldSeries)> = runs.iter().map(|r| (r.eps, &r.series)).collect();
    let discrepancy = compare_to_homogenized(&pairs, &macro_run.series)?;
    let pass = estimate.bounded && discrepancy.monotone_decrease;
    let report = CompareReport {
        schema: COMPARE_SCHEMA.into(),
        mode: "dns".into(),
        estimate: Some(estimate),
        discrepancy,
        pass,
    };
    let mut extra = Vec::new();
    if c.dump_trajectories {
        for (k, r) in c.eps_k.iter().zip(&runs) {
            extra.push((
                format!("dns/eps_{k}.json"),
                to_json(&TrajectoryDump {
                    schema: COMPARE_SCHEMA,
                    trajectory: r,
                })?,
            ));
        }
    }
    finish_compare(cfg, &report, &extra, t0)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
output_dir = "out"

[geometry]
kind = "full_fluid"
dim = 2
n = 4

[params]
rho_f = 1.0
rho_s = 2.0

[params.limits]
mu0 = 1.0
nu0 = 0.5
lambda0 = 0.0
p_star = "inf"
eta0 = 1.0
mu1 = "inf"
lambda1 = "inf"

[numerics]
macro_n = 4
dt = 0.1
t_final = 0.3
"#;

    fn cfg(text: &str) -> RunConfig {
        RunConfig::from_toml(text, Path::new("/nonexistent")).unwrap()
    }

    #[test]
    fn parses_defaults_and_classifies() {
        let c = cfg(BASE);
        assert_eq!(c.force, ForceConfig::Zero);
        assert_eq!(c.pipeline.stages.len(), 4);
        assert_eq!(c.compare.eps_k, vec![2, 4, 8]);
        let r = cmd_regime(&c).unwrap();
        assert_eq!(r.tag, RegimeTag::T2_I);
        assert!(r.render().starts_with("T2_I\n"));
        assert!(r.required_coefficients.contains(&"A_f0"));
    }

    #[test]
    fn lambda0_violation_names_the_parameter() {
        let c = cfg(&BASE.replace("lambda0 = 0.0", "lambda0 = 1.0"));
        let e = cmd_regime(&c).unwrap_err();
        assert!(e.is_config_error());
        assert!(e.to_string().contains("λ₀"), "{e}");
    }

    #[test]
    fn stage_chain_and_tolerances_are_checked() {
        let bad = format!("{BASE}\n[pipeline]\nstages = [\"regime\", \"run\"]\n");
        assert!(matches!(RunConfig::from_toml(&bad, Path::new(".")), Err(Error::Config(_))));
        let bad = BASE.replace("t_final = 0.3", "t_final = 0.3\nsolver_tol = -1.0");
        assert!(matches!(RunConfig::from_toml(&bad, Path::new(".")), Err(Error::Config(_))));
        let unknown = BASE.replace("macro_n = 4", "macro_n = 4\nbogus = 1");
        assert!(matches!(RunConfig::from_toml(&unknown, Path::new(".")), Err(Error::Config(_))));
        let mut c = cfg(BASE);
        assert!(c
            .apply(&Overrides {
                tol: Some(0.0),
                ..Default::default()
            })
            .is_err());
    }

    #[test]
    fn missing_mask_file_is_an_io_error() {
        let text = BASE.replace("kind = \"full_fluid\"\ndim = 2\nn = 4", "kind = \"mask_file\"\npath = \"nope.txt\"");
        let c = cfg(&text);
        let e = c.cell().unwrap_err();
        assert!(matches!(e, Error::Io(_)) && e.is_config_error());
    }

    #[test]
    fn config_hash_ignores_output_dir() {
        let a = cfg(BASE);
        let mut b = a.clone();
        b.output_dir = "elsewhere".into();
        assert_eq!(a.hash(), b.hash());
        let c = cfg(&BASE.replace("dt = 0.1", "dt = 0.05"));
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn force_labels_and_values() {
        let f = ForceConfig::Swirl {
            amplitude: 2.0,
            omega: 3.0,
        };
        assert_eq!(f.eval([0.5, 0.25, 0.0], 0.0), [0.0; 3]);
        assert_ne!(f.label(), ForceConfig::Zero.label());
        let r = ForceConfig::Ramp {
            amplitude: 1.0,
            t_ramp: 0.2,
            axis: 1,
        };
        assert_eq!(r.eval([0.1; 3], 1.0), [0.0, 0.2, 0.0]);
    }

    #[test]
    fn full_fluid_t2_coefficients_are_closed_form() {
        let cell = build_cell(&GeometrySpec::FullFluid { dim: 2, n: 4 }).unwrap();
        let params = cfg(BASE).scaling_params().unwrap();
        let c = compute_coefficients(
            &cell,
            &params,
            RegimeTag::T2_I,
            &TimeGrid::new(0.1, 3),
            &SolverOptions::default(),
            Some(2),
        )
        .unwrap();
        let a = c.A_f0.as_ref().unwrap();
        let id = crate::tensors::SymRank4Tensor::symmetric_identity(2);
        for (r1, r2) in a.packed.iter().zip(&id.packed) {
            for (x, y) in r1.iter().zip(r2) {
                assert!((x - y).abs() < 1e-8);
            }
        }
        assert!((c.a_f1.unwrap() + c.m).abs() < 1e-8);
        assert!(c.all_valid());
    }
}
