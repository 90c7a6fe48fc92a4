//! Versioned JSON run configuration.
//!
//! A configuration is resolved in three layers: the defaults of the chosen
//! experiment, then the user's JSON file merged over them, then `--key value`
//! overrides. Unknown keys are rejected and every error carries the dotted
//! path of the offending field.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::flow::{CouplingBlockSpec, CovarianceParam, DensityModel, LatentFamily, LatentInit, LatentSpec};
use crate::integrator::{AdaptiveConfig, IntegratorConfig, Scheme};
use crate::pde::{FokkerPlanckProblem, PhaseSpaceParams};
use crate::reference::{RadialGridConfig, SdeScheme};
use crate::tdvp::RegularizationPolicy;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    #[serde(alias = "heat")]
    Heat8d,
    #[serde(alias = "phasespace")]
    PhaseSpace,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub covariance: CovarianceParam,
    pub blocks: usize,
    pub hidden: usize,
    pub t_nets: bool,
    /// Seeds the coordinate splits and the hidden-layer initialization.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemSection {
    Heat {
        dim: usize,
        diffusion: f64,
    },
    PhaseSpace {
        mass: f64,
        omega: f64,
        coupling: f64,
        gamma: f64,
        temps: Vec<f64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialKind {
    Gaussian,
    StudentT,
}

/// Initial density, encoded exactly in the latent distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSection {
    pub kind: InitialKind,
    /// Zero vector when absent.
    pub mean: Option<Vec<f64>>,
    /// Isotropic covariance (Gaussian) or scale matrix (Student-t).
    pub variance: f64,
    pub nu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorSection {
    pub scheme: Scheme,
    pub dt: f64,
    pub t_end: f64,
    pub n_samples: usize,
    pub seed: u64,
    pub shared_samples: bool,
    pub adaptive: Option<AdaptiveConfig>,
    /// Checkpoint cadence in steps; 0 disables.
    pub checkpoint_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservablesSection {
    /// Record a row every this many steps (and at the end).
    pub every: usize,
    pub entropy_samples: usize,
    pub moments: bool,
    /// Radii of origin-centred balls whose probability is recorded.
    pub ball_radii: Vec<f64>,
    pub ball_samples: usize,
    pub ball_shells: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceKind {
    /// Closed form when one exists, otherwise the radial grid (heat) or the
    /// particle ensemble (phase space).
    Auto,
    None,
    Oracle,
    Sde,
    Radial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SdeSection {
    pub dt: f64,
    pub scheme: SdeScheme,
    /// Matches `integrator.n_samples` when absent.
    pub particles: Option<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceSection {
    pub kind: ReferenceKind,
    pub sde: SdeSection,
    pub radial: RadialGridConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub experiment: ExperimentKind,
    pub model: ModelSection,
    pub problem: ProblemSection,
    pub initial: InitialSection,
    pub integrator: IntegratorSection,
    pub observables: ObservablesSection,
    pub regularization: RegularizationPolicy,
    pub reference: ReferenceSection,
    /// Relative paths are resolved against the output root.
    pub output_dir: String,
}

fn config_error(path: &str, message: impl Into<String>) -> Error {
    Error::Config {
        path: path.to_string(),
        message: message.into(),
    }
}

/// Short flag names accepted in place of full dotted paths.
const ALIASES: &[(&str, &str)] = &[
    ("initial", "initial.kind"),
    ("nu", "initial.nu"),
    ("variance", "initial.variance"),
    ("mean", "initial.mean"),
    ("dim", "problem.dim"),
    ("d", "problem.dim"),
    ("diffusion", "problem.diffusion"),
    ("mass", "problem.mass"),
    ("m", "problem.mass"),
    ("omega", "problem.omega"),
    ("k", "problem.coupling"),
    ("coupling", "problem.coupling"),
    ("gamma", "problem.gamma"),
    ("temps", "problem.temps"),
    ("scheme", "integrator.scheme"),
    ("dt", "integrator.dt"),
    ("t_end", "integrator.t_end"),
    ("n_samples", "integrator.n_samples"),
    ("seed", "integrator.seed"),
    ("blocks", "model.blocks"),
    ("hidden", "model.hidden"),
    ("t_nets", "model.t_nets"),
    ("covariance", "model.covariance"),
    ("every", "observables.every"),
    ("ball_radii", "observables.ball_radii"),
    ("reference", "reference.kind"),
    ("out", "output_dir"),
];

fn canonical_key(key: &str) -> String {
    let key = key.trim_start_matches('-').replace('-', "_");
    ALIASES
        .iter()
        .find(|(a, _)| *a == key)
        .map(|(_, full)| full.to_string())
        .unwrap_or(key)
}

/// Interprets an override value: JSON if it parses, a list if it contains
/// commas, a bare string otherwise.
fn parse_override_value(raw: &str) -> Value {
    let raw = raw.trim();
    if let Ok(v) = serde_json::from_str::<Value>(raw) {
        return v;
    }
    if raw.contains(',') {
        return Value::Array(raw.split(',').map(parse_override_value).collect());
    }
    Value::String(raw.to_string())
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = path.split('.').collect();
    let mut node = root;
    for (i, part) in parts.iter().enumerate() {
        let here = parts[..=i].join(".");
        let obj = node
            .as_object_mut()
            .ok_or_else(|| config_error(&here, "not a section"))?;
        if i + 1 == parts.len() {
            let value = match (obj.get(*part), value) {
                (Some(Value::Array(_)), v @ Value::Number(_)) => Value::Array(vec![v]),
                (_, v) => v,
            };
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj
            .get_mut(*part)
            .ok_or_else(|| config_error(&here, "unknown section"))?;
    }
    Ok(())
}

fn experiment_from_value(v: &Value) -> Result<ExperimentKind> {
    let s = v
        .as_str()
        .ok_or_else(|| config_error("experiment", "expected a string"))?
        .to_ascii_lowercase();
    serde_json::from_value(Value::String(s.clone()))
        .map_err(|_| config_error("experiment", format!("unknown experiment `{s}`")))
}

impl RunConfig {
    /// Defaults for `kind`. `Custom` starts from the heat-equation values.
    pub fn defaults(kind: ExperimentKind) -> Self {
        match kind {
            ExperimentKind::Heat8d | ExperimentKind::Custom => Self {
                version: SCHEMA_VERSION,
                experiment: kind,
                model: ModelSection {
                    covariance: CovarianceParam::IdentityPlusAat,
                    blocks: 4,
                    hidden: 4,
                    t_nets: false,
                    seed: 0,
                },
                problem: ProblemSection::Heat {
                    dim: 8,
                    diffusion: 1.0,
                },
                initial: InitialSection {
                    kind: InitialKind::Gaussian,
                    mean: None,
                    variance: 1.0,
                    nu: 2.0,
                },
                integrator: IntegratorSection {
                    scheme: Scheme::Heun,
                    dt: 0.02,
                    t_end: 2.0,
                    n_samples: 10_000,
                    seed: 0,
                    shared_samples: false,
                    adaptive: None,
                    checkpoint_every: 0,
                },
                observables: ObservablesSection {
                    every: 25,
                    entropy_samples: 10_000,
                    moments: true,
                    ball_radii: vec![],
                    ball_samples: 10_000,
                    ball_shells: 50,
                    seed: 1,
                },
                regularization: RegularizationPolicy::default(),
                reference: ReferenceSection {
                    kind: ReferenceKind::Auto,
                    sde: SdeSection {
                        dt: 1e-3,
                        scheme: SdeScheme::EulerMaruyama,
                        particles: None,
                        seed: 2,
                    },
                    radial: RadialGridConfig {
                        delta: 0.01,
                        r_max: 1000.0,
                        ..RadialGridConfig::default()
                    },
                },
                output_dir: "runs/heat8d".into(),
            },
            ExperimentKind::PhaseSpace => Self {
                version: SCHEMA_VERSION,
                experiment: kind,
                model: ModelSection {
                    covariance: CovarianceParam::CholeskyLower,
                    blocks: 4,
                    hidden: 3,
                    t_nets: true,
                    seed: 0,
                },
                problem: ProblemSection::PhaseSpace {
                    mass: 1.0,
                    omega: 1.0,
                    coupling: 1.0,
                    gamma: 1.0,
                    temps: vec![10.0, 3.0, 1.0],
                },
                initial: InitialSection {
                    kind: InitialKind::Gaussian,
                    mean: Some(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]),
                    variance: 1.0,
                    nu: 2.0,
                },
                integrator: IntegratorSection {
                    scheme: Scheme::Heun,
                    dt: 0.01,
                    t_end: 10.0,
                    n_samples: 10_000,
                    seed: 0,
                    shared_samples: false,
                    adaptive: None,
                    checkpoint_every: 0,
                },
                observables: ObservablesSection {
                    every: 50,
                    entropy_samples: 10_000,
                    moments: true,
                    ball_radii: vec![10.0],
                    ball_samples: 10_000,
                    ball_shells: 50,
                    seed: 1,
                },
                regularization: RegularizationPolicy::default(),
                reference: ReferenceSection {
                    kind: ReferenceKind::Auto,
                    sde: SdeSection {
                        dt: 1e-3,
                        scheme: SdeScheme::EulerMaruyama,
                        particles: None,
                        seed: 2,
                    },
                    radial: RadialGridConfig::default(),
                },
                output_dir: "runs/phase_space".into(),
            },
        }
    }

    /// Resolves defaults, an optional JSON document and `--key value`
    /// overrides into a validated configuration.
    pub fn resolve(json: Option<&str>, overrides: &[(String, String)]) -> Result<Self> {
        let user: Value = match json {
            Some(text) => serde_json::from_str(text).map_err(|e| {
                config_error("", format!("invalid JSON at line {} column {}: {e}", e.line(), e.column()))
            })?,
            None => Value::Object(Map::new()),
        };
        if !user.is_object() {
            return Err(config_error("", "top level must be an object"));
        }
        let overrides: Vec<(String, Value)> = overrides
            .iter()
            .map(|(k, v)| (canonical_key(k), parse_override_value(v)))
            .collect();
        let mut kind = match user.get("experiment") {
            Some(v) => experiment_from_value(v)?,
            None => ExperimentKind::Heat8d,
        };
        for (k, v) in &overrides {
            if k == "experiment" {
                kind = experiment_from_value(v)?;
            }
        }
        let mut merged =
            serde_json::to_value(Self::defaults(kind)).map_err(|e| config_error("", e.to_string()))?;
        merge(&mut merged, user);
        for (k, v) in overrides {
            if k == "experiment" {
                continue;
            }
            set_path(&mut merged, &k, v)?;
        }
        if let Some(Value::String(s)) = merged.get_mut("experiment") {
            *s = s.to_ascii_lowercase();
        }
        let config: Self = serde_path_to_error::deserialize(merged).map_err(|e| {
            let path = e.path().to_string();
            config_error(if path == "." { "" } else { &path }, e.into_inner().to_string())
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn dim(&self) -> usize {
        match &self.problem {
            ProblemSection::Heat { dim, .. } => *dim,
            ProblemSection::PhaseSpace { temps, .. } => 2 * temps.len(),
        }
    }

    pub fn phase_space_params(&self) -> Option<PhaseSpaceParams> {
        match &self.problem {
            ProblemSection::PhaseSpace {
                mass,
                omega,
                coupling,
                gamma,
                temps,
            } => Some(PhaseSpaceParams {
                mass: *mass,
                omega: *omega,
                coupling: *coupling,
                gamma: *gamma,
                temps: temps.clone(),
            }),
            ProblemSection::Heat { .. } => None,
        }
    }

    pub fn initial_mean(&self) -> Vec<f64> {
        self.initial.mean.clone().unwrap_or_else(|| vec![0.0; self.dim()])
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != SCHEMA_VERSION {
            return Err(config_error(
                "version",
                format!("unsupported schema version {} (expected {SCHEMA_VERSION})", self.version),
            ));
        }
        let d = self.dim();
        match &self.problem {
            ProblemSection::Heat { dim, diffusion } => {
                if *dim < 2 {
                    return Err(config_error("problem.dim", "must be at least 2"));
                }
                if !(*diffusion >= 0.0 && diffusion.is_finite()) {
                    return Err(config_error("problem.diffusion", "must be finite and non-negative"));
                }
            }
            ProblemSection::PhaseSpace { .. } => {
                let p = self.phase_space_params().expect("phase-space problem");
                p.validate().map_err(|e| config_error("problem", e.to_string()))?;
            }
        }
        if self.model.hidden == 0 {
            return Err(config_error("model.hidden", "must be positive"));
        }
        if let Some(m) = &self.initial.mean {
            if m.len() != d {
                return Err(config_error("initial.mean", format!("expected {d} entries, found {}", m.len())));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(config_error("initial.mean", "entries must be finite"));
            }
        }
        if !(self.initial.variance > 0.0 && self.initial.variance.is_finite()) {
            return Err(config_error("initial.variance", "must be positive"));
        }
        if self.initial.kind == InitialKind::StudentT && !(self.initial.nu > 0.0 && self.initial.nu.is_finite()) {
            return Err(config_error("initial.nu", "must be positive"));
        }
        if self.model.covariance == CovarianceParam::IdentityPlusAat && self.initial.variance < 1.0 {
            return Err(config_error(
                "initial.variance",
                "identity_plus_aat covariance needs variance >= 1",
            ));
        }
        let i = &self.integrator;
        if !(i.dt > 0.0 && i.dt.is_finite()) {
            return Err(config_error("integrator.dt", "must be positive"));
        }
        if !(i.t_end >= 0.0 && i.t_end.is_finite()) {
            return Err(config_error("integrator.t_end", "must be non-negative"));
        }
        if i.n_samples < 2 {
            return Err(config_error("integrator.n_samples", "must be at least 2"));
        }
        if let Some(a) = &i.adaptive {
            if !(a.tolerance > 0.0 && a.dt_min > 0.0 && a.dt_min <= a.dt_max) {
                return Err(config_error("integrator.adaptive", "needs tolerance > 0 and 0 < dt_min <= dt_max"));
            }
        }
        let o = &self.observables;
        if o.every == 0 {
            return Err(config_error("observables.every", "must be at least 1"));
        }
        if o.entropy_samples < 2 {
            return Err(config_error("observables.entropy_samples", "must be at least 2"));
        }
        if o.ball_radii.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
            return Err(config_error("observables.ball_radii", "radii must be positive"));
        }
        if !o.ball_radii.is_empty() && (o.ball_shells == 0 || o.ball_samples < o.ball_shells.saturating_mul(2)) {
            return Err(config_error(
                "observables.ball_samples",
                "need at least two samples per shell",
            ));
        }
        self.regularization
            .validate()
            .map_err(|e| config_error("regularization", e.to_string()))?;
        let s = &self.reference.sde;
        if !(s.dt > 0.0 && s.dt.is_finite()) {
            return Err(config_error("reference.sde.dt", "must be positive"));
        }
        if s.particles == Some(0) || s.particles == Some(1) {
            return Err(config_error("reference.sde.particles", "must be at least 2"));
        }
        self.reference
            .radial
            .validate()
            .map_err(|e| config_error("reference.radial", e.to_string()))?;
        if self.output_dir.is_empty() {
            return Err(config_error("output_dir", "must not be empty"));
        }
        Ok(())
    }

    /// Sorted keys, shortest round-trip float formatting, trailing newline.
    pub fn canonical_json(&self) -> String {
        let value = serde_json::to_value(self).expect("configuration serializes");
        let mut s = serde_json::to_string_pretty(&value).expect("value serializes");
        s.push('\n');
        s
    }

    pub fn problem(&self) -> Result<FokkerPlanckProblem> {
        match &self.problem {
            ProblemSection::Heat { dim, diffusion } => FokkerPlanckProblem::heat(*dim, *diffusion),
            ProblemSection::PhaseSpace { .. } => {
                FokkerPlanckProblem::phase_space(self.phase_space_params().expect("phase-space problem"))
            }
        }
    }

    pub fn latent_spec(&self) -> LatentSpec {
        LatentSpec {
            family: match self.initial.kind {
                InitialKind::Gaussian => LatentFamily::Gaussian,
                InitialKind::StudentT => LatentFamily::StudentT,
            },
            dim: self.dim(),
            covariance: self.model.covariance,
        }
    }

    pub fn block_specs(&self) -> Vec<CouplingBlockSpec> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.model.seed);
        (0..self.model.blocks)
            .map(|_| {
                let mut b = CouplingBlockSpec::random(self.dim(), self.model.t_nets, &mut rng);
                b.hidden = self.model.hidden;
                b
            })
            .collect()
    }

    /// Identity-initialized model encoding the initial density exactly.
    pub fn initial_model(&self) -> Result<DensityModel> {
        let nu = (self.initial.kind == InitialKind::StudentT).then_some(self.initial.nu);
        let init = LatentInit::isotropic(self.initial_mean(), self.initial.variance, nu);
        DensityModel::init_identity(self.latent_spec(), &init, self.block_specs(), self.model.seed)
    }

    pub fn integrator_config(&self) -> IntegratorConfig {
        let i = &self.integrator;
        IntegratorConfig {
            scheme: i.scheme,
            dt: i.dt,
            t_end: i.t_end,
            n_samples: i.n_samples,
            seed: i.seed,
            adaptive: i.adaptive,
            shared_samples: i.shared_samples,
            regularization: self.regularization,
            output_every: self.observables.every,
            checkpoint_every: i.checkpoint_every,
            checkpoint_dir: None,
        }
    }
}
