//! JSON run configuration and its translation into solver inputs.

use std::path::{Path, PathBuf};

use dshoot::prelude::*;
use dshoot::problems::BuiltinProblem;
use nalgebra::{DMatrix, DVector};
use serde::Deserialize;

/// Problem, parameterization, gains and solver settings of one run.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: String,
    #[serde(default)]
    pub mode: Option<ModeName>,
    #[serde(default)]
    pub parameterization: Option<ParSpec>,
    #[serde(default)]
    pub gains: GainsSpec,
    #[serde(default)]
    pub init: InitSpec,
    #[serde(default)]
    pub stop: StopSpec,
    #[serde(default)]
    pub ode_inner: Option<OdeSpec>,
    #[serde(default)]
    pub ode_outer: Option<OdeSpec>,
    #[serde(default)]
    pub quad_nodes: Option<usize>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum ModeName {
    Form1,
    Form2,
    GradientFlow,
}

impl ModeName {
    pub fn as_str(self) -> &'static str {
        match self {
            ModeName::Form1 => "form1",
            ModeName::Form2 => "form2",
            ModeName::GradientFlow => "gradient_flow",
        }
    }
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum KindName {
    Polynomial,
    Lagrange,
    PiecewiseLinear,
    PiecewiseConstant,
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum FormName {
    Form1,
    Form2,
}

/// Either a named case of the problem (`{"case": "case2"}`) or an explicit
/// basis (`{"kind": "piecewise_linear", "n": 20, "form": "form2"}`).
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParSpec {
    pub case: Option<String>,
    pub kind: Option<KindName>,
    /// Polynomial order.
    pub order: Option<usize>,
    /// Segment count of the node-based kinds.
    pub n: Option<usize>,
    pub form: Option<FormName>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(untagged)]
pub enum ScalarOrMatrix {
    Scalar(f64),
    Matrix(Vec<Vec<f64>>),
}

impl ScalarOrMatrix {
    fn to_matrix(&self, dim: usize, field: &str) -> Result<DMatrix<f64>, ConfigError> {
        match self {
            ScalarOrMatrix::Scalar(v) => Ok(DMatrix::identity(dim, dim) * *v),
            ScalarOrMatrix::Matrix(rows) => {
                if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
                    return Err(ConfigError::field(field, format!("must be a scalar or a {dim}x{dim} matrix")));
                }
                Ok(DMatrix::from_fn(dim, dim, |i, j| rows[i][j]))
            }
        }
    }
}

/// `k` is the control weight `K`, not its inverse.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainsSpec {
    pub k: Option<ScalarOrMatrix>,
    pub k_tf: Option<f64>,
    pub k_g: Option<ScalarOrMatrix>,
    pub k_theta: Option<ScalarOrMatrix>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(untagged)]
pub enum ParamInit {
    Named(String),
    Values(Vec<f64>),
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitSpec {
    pub p: Option<ParamInit>,
    pub tf: Option<f64>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StopSpec {
    pub tau_max: Option<f64>,
    pub tol_opt: Option<f64>,
    pub tol_feas: Option<f64>,
    pub record_every: Option<f64>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OdeSpec {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_steps: Option<usize>,
    pub max_step: Option<f64>,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("cannot parse {path}: {source}")]
    Parse { path: String, source: serde_json::Error },
    #[error("{field}: {message}")]
    Field { field: String, message: String },
}

impl ConfigError {
    fn field(field: &str, message: impl Into<String>) -> Self {
        ConfigError::Field {
            field: field.to_string(),
            message: message.into(),
        }
    }
}

/// Everything a solve or check needs, resolved and validated.
pub struct ResolvedRun {
    pub builtin: BuiltinProblem,
    pub mode: EvolutionMode,
    pub mode_name: ModeName,
    pub par: Parameterization,
    pub par_label: String,
    pub gains: Gains,
    pub init: EvolutionState,
    pub stop: StopCriteria,
    pub settings: SolverSettings,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text).map_err(|e| match e {
            ConfigError::Parse { source, .. } => ConfigError::Parse {
                path: path.display().to_string(),
                source,
            },
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|source| ConfigError::Parse {
            path: "<config>".into(),
            source,
        })
    }

    pub fn resolve(&self) -> Result<ResolvedRun, ConfigError> {
        let builtin = dshoot::problems::by_name(&self.problem).ok_or_else(|| {
            ConfigError::field(
                "problem",
                format!("unknown problem {:?}; known: {}", self.problem, dshoot::problems::NAMES.join(", ")),
            )
        })?;
        let dims = builtin.problem.dims();
        let (par, par_label) = self.resolve_par(&builtin, dims.m)?;
        let mode_name = self.mode.unwrap_or(match par.form() {
            Form::Form1 => ModeName::Form1,
            Form::Form2 => ModeName::Form2,
        });
        let mode = match mode_name {
            ModeName::Form1 => EvolutionMode::Form1,
            ModeName::Form2 => EvolutionMode::Form2,
            ModeName::GradientFlow => EvolutionMode::GradientFlow,
        };

        let free = builtin.problem.free_tf();
        let s = par.param_count();
        let k = self.gains.k.clone().unwrap_or(ScalarOrMatrix::Scalar(0.1)).to_matrix(dims.m, "gains.k")?;
        let k_inv = k
            .clone()
            .try_inverse()
            .ok_or_else(|| ConfigError::field("gains.k", "must be invertible"))?;
        let k_tf = self.gains.k_tf.unwrap_or(0.1);
        let k_g = self.gains.k_g.clone().unwrap_or(ScalarOrMatrix::Scalar(0.1)).to_matrix(dims.q, "gains.k_g")?;
        let mut gains = Gains::new(k_inv, k_tf, k_g);
        if let Some(kt) = &self.gains.k_theta {
            gains = gains.with_k_theta(kt.to_matrix(s + usize::from(free), "gains.k_theta")?);
        }
        if !(k_tf.is_finite() && k_tf > 0.0) {
            return Err(ConfigError::field("gains.k_tf", format!("must be positive (got {k_tf})")));
        }

        let p = match &self.init.p {
            None => DVector::zeros(s),
            Some(ParamInit::Named(name)) if name == "zeros" => DVector::zeros(s),
            Some(ParamInit::Named(name)) => {
                return Err(ConfigError::field("init.p", format!("expected \"zeros\" or a vector, got {name:?}")))
            }
            Some(ParamInit::Values(v)) => {
                if v.len() != s {
                    return Err(ConfigError::field("init.p", format!("expected {s} values, got {}", v.len())));
                }
                DVector::from_vec(v.clone())
            }
        };
        let tf = match builtin.problem.tf_mode {
            TerminalTime::Fixed(tf) => {
                if let Some(given) = self.init.tf {
                    if given != tf {
                        return Err(ConfigError::field("init.tf", format!("the terminal time of this problem is fixed at {tf}")));
                    }
                }
                tf
            }
            TerminalTime::Free => self.init.tf.unwrap_or(builtin.tf_init),
        };
        positive("init.tf", tf - builtin.problem.t0)?;

        let defaults = StopCriteria::default();
        let stop = StopCriteria {
            tau_max: positive("stop.tau_max", self.stop.tau_max.unwrap_or(defaults.tau_max))?,
            tol_opt: positive("stop.tol_opt", self.stop.tol_opt.unwrap_or(defaults.tol_opt))?,
            tol_feas: positive("stop.tol_feas", self.stop.tol_feas.unwrap_or(defaults.tol_feas))?,
            record_every: positive("stop.record_every", self.stop.record_every.unwrap_or(defaults.record_every))?,
            ..defaults
        };
        let base = SolverSettings::default();
        let settings = SolverSettings {
            ode_inner: ode_settings("ode_inner", self.ode_inner.as_ref(), &base.ode_inner)?,
            ode_outer: ode_settings("ode_outer", self.ode_outer.as_ref(), &base.ode_outer)?,
            quad_nodes: self.quad_nodes.unwrap_or(base.quad_nodes),
        };
        if settings.quad_nodes < 3 {
            return Err(ConfigError::field("quad_nodes", "must be at least 3"));
        }
        Ok(ResolvedRun {
            builtin,
            mode,
            mode_name,
            par,
            par_label,
            gains,
            init: EvolutionState::new(p, tf),
            stop,
            settings,
        })
    }

    fn resolve_par(&self, builtin: &BuiltinProblem, m: usize) -> Result<(Parameterization, String), ConfigError> {
        let spec = self.parameterization.clone().unwrap_or_default();
        if let Some(case) = &spec.case {
            if spec.kind.is_some() || spec.order.is_some() || spec.n.is_some() || spec.form.is_some() {
                return Err(ConfigError::field("parameterization", "give either case or kind, not both"));
            }
            let named = builtin.parameterizations.iter().find(|np| np.name == case).ok_or_else(|| {
                let known: Vec<_> = builtin.parameterizations.iter().map(|np| np.name).collect();
                ConfigError::field("parameterization.case", format!("unknown case {case:?}; known: {}", known.join(", ")))
            })?;
            return Ok((named.par.clone(), case.clone()));
        }
        let Some(kind) = spec.kind else {
            let first = &builtin.parameterizations[0];
            return Ok((first.par.clone(), first.name.to_string()));
        };
        let need_n = |what: &str| {
            spec.n
                .filter(|&n| n >= 1)
                .ok_or_else(|| ConfigError::field("parameterization.n", format!("{what} needs a segment count n >= 1")))
        };
        let basis = match kind {
            KindName::Polynomial => BasisKind::GlobalPolynomial {
                order: spec
                    .order
                    .ok_or_else(|| ConfigError::field("parameterization.order", "polynomial needs an order"))?,
            },
            KindName::Lagrange => BasisKind::LagrangeNodes { n: need_n("lagrange")? },
            KindName::PiecewiseLinear => BasisKind::PiecewiseLinear { n: need_n("piecewise_linear")? },
            KindName::PiecewiseConstant => BasisKind::PiecewiseConstant { n: need_n("piecewise_constant")? },
        };
        let form = match spec.form {
            Some(FormName::Form2) => Form::Form2,
            Some(FormName::Form1) => Form::Form1,
            None if self.mode == Some(ModeName::Form2) => Form::Form2,
            None => Form::Form1,
        };
        let par = Parameterization::new(basis, m, builtin.problem.t0, form)
            .map_err(|e| ConfigError::field("parameterization", e.to_string()))?;
        Ok((par, format!("{kind:?}").to_lowercase()))
    }
}

fn positive(field: &str, v: f64) -> Result<f64, ConfigError> {
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(ConfigError::field(field, format!("must be positive (got {v})")))
    }
}

fn ode_settings(field: &str, spec: Option<&OdeSpec>, base: &OdeSettings) -> Result<OdeSettings, ConfigError> {
    let Some(spec) = spec else {
        return Ok(base.clone());
    };
    let mut out = OdeSettings::new(
        positive(&format!("{field}.rel_tol"), spec.rel_tol)?,
        positive(&format!("{field}.abs_tol"), spec.abs_tol)?,
    );
    if let Some(n) = spec.max_steps {
        if n == 0 {
            return Err(ConfigError::field(&format!("{field}.max_steps"), "must be at least 1"));
        }
        out.max_steps = n;
    }
    if let Some(h) = spec.max_step {
        out.max_step = Some(positive(&format!("{field}.max_step"), h)?);
    }
    Ok(out)
}
