//! Run configuration: a TOML file with units in every physical key name.

use std::path::{Path, PathBuf};
use std::time::Duration;

use adrfit::chroma::{ColumnConfig, Discretization, ElutionShape, ProcessProgram, SmaParameters, UvModel};
use adrfit::estimation::{ObjectiveForm, ParameterSpace, SamplingPlan, SolverSettings};
use adrfit::optimizers::RefinerConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// The configuration shipped with the tool.
pub const DEFAULT_CONFIG: &str = include_str!("../config/default.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: PathsSection,
    pub column: ColumnSection,
    pub discretization: DiscretizationSection,
    pub buffers: BuffersSection,
    pub feed: FeedSection,
    pub uv: UvSection,
    pub parameters: ParametersSection,
    pub solver: SolverSection,
    pub sampling: SamplingSection,
    pub optimizer: OptimizerSection,
    pub hybrid: HybridSection,
    pub refiner: RefinerSection,
    pub budget: BudgetSection,
    #[serde(rename = "experiment")]
    pub experiments: Vec<ExperimentSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    pub data_dir: PathBuf,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnSection {
    pub length_mm: f64,
    pub volume_mm3: f64,
    pub total_porosity: f64,
    pub velocity_mm_s: f64,
    pub dispersion_mm2_s: f64,
    pub ionic_capacity_mol_l: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscretizationSection {
    pub elements: usize,
    pub polynomial_order: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BuffersSection {
    pub salt_a_mol_l: f64,
    pub salt_b_mol_l: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeedSection {
    pub concentration_mol_l: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UvSection {
    pub response_au_l_mol: [f64; 3],
}

/// One value per protein for each SMA parameter group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmaSection {
    pub k_kin_s: [f64; 3],
    pub k_eq: [f64; 3],
    pub charge: [f64; 3],
    pub sigma: [f64; 3],
}

impl SmaSection {
    pub fn to_parameters(&self) -> SmaParameters {
        SmaParameters {
            k_kin: self.k_kin_s,
            k_eq: self.k_eq,
            charge: self.charge,
            sigma: self.sigma,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParametersSection {
    pub lower: SmaSection,
    pub upper: SmaSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<SmaSection>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    pub rtol: f64,
    pub atol: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingSection {
    pub raw_uv_points: usize,
    pub uv_points: usize,
    pub fractions_per_peak: usize,
    pub noise_relative: f64,
    /// Grid size of `simulate` outlet profiles.
    pub outlet_points: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "eca")]
    Eca,
    #[serde(rename = "nsga2")]
    Nsga2,
    #[serde(rename = "multistart")]
    Multistart,
    #[serde(rename = "hybrid-eca-passive")]
    HybridEcaPassive,
    #[serde(rename = "hybrid-eca-active")]
    HybridEcaActive,
    #[serde(rename = "hybrid-nsga2-passive")]
    HybridNsga2Passive,
    /// Parsed so that it can be rejected with a precise message.
    #[serde(rename = "hybrid-nsga2-active")]
    HybridNsga2Active,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Eca,
        Method::Nsga2,
        Method::Multistart,
        Method::HybridEcaPassive,
        Method::HybridEcaActive,
        Method::HybridNsga2Passive,
        Method::HybridNsga2Active,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Eca => "eca",
            Method::Nsga2 => "nsga2",
            Method::Multistart => "multistart",
            Method::HybridEcaPassive => "hybrid-eca-passive",
            Method::HybridEcaActive => "hybrid-eca-active",
            Method::HybridNsga2Passive => "hybrid-nsga2-passive",
            Method::HybridNsga2Active => "hybrid-nsga2-active",
        }
    }

    pub fn parse(s: &str) -> Result<Self, CliError> {
        Self::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Self::ALL[..6].iter().map(|m| m.name()).collect();
            CliError::Config(format!("unknown optimizer `{s}`, expected one of {}", names.join(", ")))
        })
    }

    pub fn is_hybrid(self) -> bool {
        matches!(
            self,
            Method::HybridEcaPassive | Method::HybridEcaActive | Method::HybridNsga2Passive | Method::HybridNsga2Active
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decomposition {
    Experiment,
    Measurement,
}

impl Decomposition {
    pub fn form(self) -> ObjectiveForm {
        match self {
            Decomposition::Experiment => ObjectiveForm::Experiment,
            Decomposition::Measurement => ObjectiveForm::Measurement,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    pub method: Method,
    pub population: usize,
    /// Objective split used by NSGA-II.
    pub decomposition: Decomposition,
    /// Worker threads for population evaluation; 0 means all available.
    pub threads: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HybridSection {
    pub outer_iterations: usize,
    pub candidates: usize,
    pub critical_distance: f64,
    pub beta_initial: f64,
    /// Distance βΔ reached after the last outer iteration; sets ρ.
    pub min_critical_distance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefinerSection {
    pub max_iterations: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_limit_s: Option<f64>,
    pub gradient_tol: f64,
    pub step_tol: f64,
    pub objective_tol: f64,
    pub initial_radius: f64,
    pub max_radius: f64,
}

impl RefinerSection {
    pub fn to_config(&self) -> Result<RefinerConfig, CliError> {
        let time_limit = match self.time_limit_s {
            Some(s) if s > 0.0 && s.is_finite() => Some(Duration::from_secs_f64(s)),
            Some(s) => return Err(CliError::Config(format!("refiner.time_limit_s must be positive, got {s}"))),
            None => None,
        };
        let cfg = RefinerConfig {
            gradient_tol: self.gradient_tol,
            step_tol: self.step_tol,
            objective_tol: self.objective_tol,
            max_iterations: self.max_iterations,
            time_limit,
            initial_radius: self.initial_radius,
            max_radius: self.max_radius,
        };
        cfg.validate().map_err(|e| CliError::Config(format!("refiner: {e}")))?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetSection {
    /// Search evaluations (metaheuristic individuals or Sobol samples).
    pub evaluations: u64,
    /// Local refinements granted to hybrid and multi-start methods.
    pub refinements: usize,
    /// Extra search evaluations a pure metaheuristic receives per refinement
    /// the other methods are granted, so all methods share one budget.
    pub evaluations_per_refinement: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seconds: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Calibration,
    Validation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElutionKind {
    Gradient,
    /// Constant buffer-B level throughout elution.
    Step,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub id: String,
    pub role: Role,
    pub load_cv: f64,
    pub wash_cv: f64,
    pub elute_cv: f64,
    pub elution: ElutionKind,
    pub start_b_pct: f64,
    pub end_b_pct: f64,
}

impl RunConfig {
    /// Parses and validates configuration text.
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.paths.data_dir = base.join(&cfg.paths.data_dir);
        cfg.paths.output_dir = base.join(&cfg.paths.output_dir);
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |key: &str, why: &str| Err(CliError::Config(format!("{key}: {why}")));
        self.column().validate().map_err(|e| CliError::Config(format!("column: {e}")))?;
        if self.discretization.elements == 0 || self.discretization.polynomial_order == 0 {
            return bad("discretization", "elements and polynomial_order must be at least 1");
        }
        let tol_ok = |v: f64| v > 0.0 && v.is_finite();
        if !tol_ok(self.solver.rtol) || !tol_ok(self.solver.atol) {
            return bad("solver", "rtol and atol must be positive");
        }
        if self.sampling.uv_points < 2 || self.sampling.raw_uv_points < self.sampling.uv_points {
            return bad("sampling.uv_points", "need 2 ≤ uv_points ≤ raw_uv_points");
        }
        if self.sampling.fractions_per_peak == 0 || self.sampling.outlet_points < 2 {
            return bad("sampling", "fractions_per_peak ≥ 1 and outlet_points ≥ 2 required");
        }
        if !(self.sampling.noise_relative >= 0.0 && self.sampling.noise_relative.is_finite()) {
            return bad("sampling.noise_relative", "must be finite and ≥ 0");
        }
        if self.optimizer.population < 2 {
            return bad("optimizer.population", "must be at least 2");
        }
        self.space()?;
        if let Some(gt) = &self.parameters.ground_truth {
            gt.to_parameters()
                .validate()
                .map_err(|e| CliError::Config(format!("parameters.ground_truth: {e}")))?;
            self.space()?
                .scale(&gt.to_parameters().to_vec())
                .map_err(|e| CliError::Config(format!("parameters.ground_truth: {e}")))?;
        }
        let h = &self.hybrid;
        if h.outer_iterations == 0 {
            return bad("hybrid.outer_iterations", "must be at least 1");
        }
        if !(h.critical_distance > 0.0) || !(h.beta_initial > 0.0) {
            return bad("hybrid", "critical_distance and beta_initial must be positive");
        }
        if !(h.min_critical_distance > 0.0 && h.min_critical_distance <= h.critical_distance * h.beta_initial) {
            return bad("hybrid.min_critical_distance", "must lie in (0, beta_initial·critical_distance]");
        }
        self.refiner.to_config()?;
        if self.budget.seconds.is_some_and(|s| !(s > 0.0 && s.is_finite())) {
            return bad("budget.seconds", "must be positive");
        }
        if self.experiments.is_empty() {
            return bad("experiment", "at least one experiment is required");
        }
        for (i, e) in self.experiments.iter().enumerate() {
            if e.id.is_empty() || !e.id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
                return bad(&format!("experiment[{i}].id"), "must be non-empty [A-Za-z0-9_-]");
            }
            if self.experiments[..i].iter().any(|o| o.id == e.id) {
                return bad(&format!("experiment[{i}].id"), "duplicate id");
            }
            if e.elution == ElutionKind::Step && e.start_b_pct != e.end_b_pct {
                return bad(&format!("experiment[{i}]"), "step elution needs start_b_pct = end_b_pct");
            }
            self.program(e)
                .validate()
                .map_err(|err| CliError::Config(format!("experiment[{i}]: {err}")))?;
        }
        if !self.experiments.iter().any(|e| e.role == Role::Calibration) {
            return bad("experiment", "at least one calibration experiment is required");
        }
        Ok(())
    }

    pub fn column(&self) -> ColumnConfig {
        let c = &self.column;
        ColumnConfig {
            length_mm: c.length_mm,
            volume_mm3: c.volume_mm3,
            porosity: c.total_porosity,
            velocity_mm_s: c.velocity_mm_s,
            diffusion_mm2_s: c.dispersion_mm2_s,
            ionic_capacity_mol_l: c.ionic_capacity_mol_l,
        }
    }

    pub fn uv_model(&self) -> Result<UvModel, CliError> {
        UvModel::new(self.uv.response_au_l_mol).map_err(|e| CliError::Config(format!("uv: {e}")))
    }

    pub fn space(&self) -> Result<ParameterSpace, CliError> {
        ParameterSpace::new(
            SmaParameters::names(),
            self.parameters.lower.to_parameters().to_vec(),
            self.parameters.upper.to_parameters().to_vec(),
        )
        .map_err(|e| CliError::Config(format!("parameters: {e}")))
    }

    pub fn settings(&self) -> SolverSettings {
        SolverSettings {
            discretization: Discretization {
                elements: self.discretization.elements,
                order: self.discretization.polynomial_order,
            },
            rtol: self.solver.rtol,
            atol: self.solver.atol,
        }
    }

    pub fn sampling_plan(&self) -> SamplingPlan {
        SamplingPlan {
            raw_uv_points: self.sampling.raw_uv_points,
            uv_points: self.sampling.uv_points,
            fractions_per_peak: self.sampling.fractions_per_peak,
            noise_relative: self.sampling.noise_relative,
        }
    }

    pub fn program(&self, e: &ExperimentSection) -> ProcessProgram {
        let elution = match e.elution {
            ElutionKind::Gradient => ElutionShape::Gradient {
                start_pct: e.start_b_pct,
                end_pct: e.end_b_pct,
            },
            ElutionKind::Step => ElutionShape::Step { pct: e.end_b_pct },
        };
        ProcessProgram {
            load_cv: e.load_cv,
            wash_cv: e.wash_cv,
            elute_cv: e.elute_cv,
            elution,
            buffer_a_salt_mol_l: self.buffers.salt_a_mol_l,
            buffer_b_salt_mol_l: self.buffers.salt_b_mol_l,
            feed_mol_l: self.feed.concentration_mol_l,
        }
    }

    pub fn ground_truth(&self) -> Option<SmaParameters> {
        self.parameters.ground_truth.map(|g| g.to_parameters())
    }

    pub fn threads(&self) -> usize {
        match self.optimizer.threads {
            0 => adrfit::optimizers::default_threads(),
            n => n,
        }
    }

    pub fn experiments_with(&self, role: Role) -> impl Iterator<Item = &ExperimentSection> {
        self.experiments.iter().filter(move |e| e.role == role)
    }
}
