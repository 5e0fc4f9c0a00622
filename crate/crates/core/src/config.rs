//! Run configuration: a flat `key = value` file with `[section]` headers.
//!
//! ```text
//! # Merton run
//! [run]
//! output = out/merton
//! seed = 7
//!
//! [model]
//! name = merton
//! rho = 0.1
//! lambda = 0.5
//!
//! [model.merton]
//! c_floor = 0.05
//!
//! [grid]
//! n = 801
//! ```
//!
//! Every key is optional. Unknown sections, unknown keys, duplicate keys and
//! malformed values are rejected with the offending line number.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::evaluate::{BoundaryCondition, DriftScheme, GridGeometry};
use crate::model::{
    make_constant, make_growth, make_merton, make_quadratic_test, ActionSpace, ControlProblem, GrowthParams,
    MertonParams,
};
use crate::pia::{InitialValue, PiaConfig};
use crate::quadrature::{build_quadrature, ActionQuadrature, QuadRule};
use crate::rollout::McConfig;
use crate::validate::SampleConfig;

#[derive(Debug, Clone, PartialEq)]
pub enum ModelParams {
    Merton(MertonParams),
    Growth(GrowthParams),
    Quadratic { y_star: f64, intervals: Vec<(f64, f64)> },
    Constant { sigma: f64, reward_slope: f64, intervals: Vec<(f64, f64)> },
}

impl ModelParams {
    pub fn name(&self) -> &'static str {
        match self {
            ModelParams::Merton(_) => "merton",
            ModelParams::Growth(_) => "growth",
            ModelParams::Quadratic { .. } => "quadratic",
            ModelParams::Constant { .. } => "constant",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub rho: f64,
    pub lambda: f64,
    pub params: ModelParams,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub x_lo: f64,
    pub x_hi: f64,
    pub n: usize,
    pub bc: BoundaryCondition,
    pub scheme: DriftScheme,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub output: PathBuf,
    pub seed: u64,
    /// Evaluation point reported by sweeps.
    pub x0: f64,
    pub model: ModelSpec,
    pub grid: GridSpec,
    pub quad: QuadRule,
    pub pia: PiaConfig,
    pub mc: McConfig,
    /// The file as read, echoed into run manifests.
    pub source: String,
}

struct Entry {
    value: String,
    line: usize,
}

/// Parsed but untyped entries; typed getters remove what they read so that
/// leftovers can be reported as unknown keys.
struct Raw {
    entries: BTreeMap<(String, String), Entry>,
    model_sections: Vec<(String, usize)>,
}

fn cfg_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Config {
        line,
        msg: msg.into(),
    }
}

const SECTIONS: [&str; 6] = ["run", "model", "grid", "quad", "pia", "mc"];
const MODEL_NAMES: [&str; 4] = ["merton", "growth", "quadratic", "constant"];

fn lex(text: &str) -> Result<Raw> {
    let mut raw = Raw {
        entries: BTreeMap::new(),
        model_sections: Vec::new(),
    };
    let mut section: Option<String> = None;
    for (idx, full) in text.lines().enumerate() {
        let line = idx + 1;
        let content = full.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(rest) = content.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| cfg_err(line, "unterminated section header"))?
                .trim();
            let known = SECTIONS.contains(&name)
                || name
                    .strip_prefix("model.")
                    .is_some_and(|m| MODEL_NAMES.contains(&m));
            if !known {
                return Err(cfg_err(line, format!("unknown section [{name}]")));
            }
            if let Some(m) = name.strip_prefix("model.") {
                raw.model_sections.push((m.to_string(), line));
            }
            section = Some(name.to_string());
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| cfg_err(line, format!("expected `key = value`, found `{content}`")))?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() {
            return Err(cfg_err(line, "empty key"));
        }
        if value.is_empty() {
            return Err(cfg_err(line, format!("missing value for `{key}`")));
        }
        let sec = section
            .clone()
            .ok_or_else(|| cfg_err(line, format!("key `{key}` appears before any section")))?;
        let slot = (sec.clone(), key.to_string());
        if let Some(prev) = raw.entries.get(&slot) {
            return Err(cfg_err(
                line,
                format!("duplicate key `{key}` in [{sec}] (first set on line {})", prev.line),
            ));
        }
        raw.entries.insert(
            slot,
            Entry {
                value: value.to_string(),
                line,
            },
        );
    }
    Ok(raw)
}

impl Raw {
    fn take(&mut self, sec: &str, key: &str) -> Option<Entry> {
        self.entries.remove(&(sec.to_string(), key.to_string()))
    }

    fn line_of(&self, sec: &str, key: &str) -> usize {
        self.entries
            .get(&(sec.to_string(), key.to_string()))
            .map_or(0, |e| e.line)
    }

    fn parsed<T: std::str::FromStr>(&mut self, sec: &str, key: &str, what: &str) -> Result<Option<(T, usize)>> {
        match self.take(sec, key) {
            None => Ok(None),
            Some(e) => e
                .value
                .parse::<T>()
                .map(|v| Some((v, e.line)))
                .map_err(|_| cfg_err(e.line, format!("`{key}` expects {what}, found `{}`", e.value))),
        }
    }

    fn real(&mut self, sec: &str, key: &str, default: f64) -> Result<f64> {
        match self.parsed::<f64>(sec, key, "a number")? {
            None => Ok(default),
            Some((v, line)) if !v.is_finite() => Err(cfg_err(line, format!("`{key}` must be finite"))),
            Some((v, _)) => Ok(v),
        }
    }

    fn positive(&mut self, sec: &str, key: &str, default: f64) -> Result<f64> {
        let line = self.line_of(sec, key);
        let v = self.real(sec, key, default)?;
        if v > 0.0 {
            Ok(v)
        } else {
            Err(cfg_err(line, format!("`{key}` must be positive, found {v}")))
        }
    }

    fn count(&mut self, sec: &str, key: &str, default: usize) -> Result<usize> {
        Ok(self
            .parsed::<usize>(sec, key, "a non-negative integer")?
            .map_or(default, |(v, _)| v))
    }

    fn flag(&mut self, sec: &str, key: &str, default: bool) -> Result<bool> {
        Ok(self
            .parsed::<bool>(sec, key, "`true` or `false`")?
            .map_or(default, |(v, _)| v))
    }

    fn word(&mut self, sec: &str, key: &str) -> Option<(String, usize)> {
        self.take(sec, key).map(|e| (e.value, e.line))
    }

    fn intervals(&mut self, sec: &str, default: (f64, f64)) -> Result<Vec<(f64, f64)>> {
        let Some(e) = self.take(sec, "intervals") else {
            return Ok(vec![default]);
        };
        e.value
            .split(',')
            .map(|part| {
                let bad = || cfg_err(e.line, format!("`intervals` expects `lo:hi[, lo:hi ...]`, found `{}`", part.trim()));
                let (lo, hi) = part.split_once(':').ok_or_else(bad)?;
                let lo: f64 = lo.trim().parse().map_err(|_| bad())?;
                let hi: f64 = hi.trim().parse().map_err(|_| bad())?;
                Ok((lo, hi))
            })
            .collect()
    }
}

fn model_params(raw: &mut Raw, name: &str) -> Result<ModelParams> {
    let sec = format!("model.{name}");
    let s = sec.as_str();
    Ok(match name {
        "merton" => {
            let d = MertonParams::default();
            ModelParams::Merton(MertonParams {
                rf: raw.real(s, "rf", d.rf)?,
                prem: raw.real(s, "prem", d.prem)?,
                vol_a: raw.real(s, "vol_a", d.vol_a)?,
                frac_eta: raw.real(s, "frac_eta", d.frac_eta)?,
                risk_alpha: raw.real(s, "risk_alpha", d.risk_alpha)?,
                c_floor: raw.real(s, "c_floor", d.c_floor)?,
            })
        }
        "growth" => {
            let d = GrowthParams::default();
            ModelParams::Growth(GrowthParams {
                mu_dep: raw.real(s, "mu_dep", d.mu_dep)?,
                vol_a: raw.real(s, "vol_a", d.vol_a)?,
                risk_alpha: raw.real(s, "risk_alpha", d.risk_alpha)?,
                c_floor: raw.real(s, "c_floor", d.c_floor)?,
                prod_theta: raw.real(s, "prod_theta", d.prod_theta)?,
            })
        }
        "quadratic" => ModelParams::Quadratic {
            y_star: raw.real(s, "y_star", 0.0)?,
            intervals: raw.intervals(s, (-1.0, 1.0))?,
        },
        "constant" => ModelParams::Constant {
            sigma: raw.real(s, "sigma", 1.0)?,
            reward_slope: raw.real(s, "reward_slope", 0.0)?,
            intervals: raw.intervals(s, (0.0, 1.0))?,
        },
        other => unreachable!("model name {other} checked by caller"),
    })
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Artifact(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut raw = lex(text)?;

        let output = raw.word("run", "output").map_or_else(|| PathBuf::from("out"), |(v, _)| PathBuf::from(v));
        let seed = raw.parsed::<u64>("run", "seed", "a non-negative integer")?.map_or(0, |(v, _)| v);
        let x0 = raw.real("run", "x0", 0.0)?;

        let (name, name_line) = raw.word("model", "name").unwrap_or(("merton".into(), 0));
        if !MODEL_NAMES.contains(&name.as_str()) {
            return Err(cfg_err(
                name_line,
                format!("unknown model `{name}`; expected one of {}", MODEL_NAMES.join(", ")),
            ));
        }
        if let Some((other, line)) = raw.model_sections.iter().find(|(m, _)| *m != name) {
            return Err(cfg_err(*line, format!("section [model.{other}] does not match model `{name}`")));
        }
        let rho = raw.positive("model", "rho", 0.1)?;
        let lambda = raw.positive("model", "lambda", 0.5)?;
        let params = model_params(&mut raw, &name)?;

        let n_line = raw.line_of("grid", "n");
        let x_line = raw.line_of("grid", "x_hi").max(raw.line_of("grid", "x_lo"));
        let x_lo = raw.real("grid", "x_lo", -6.0)?;
        let x_hi = raw.real("grid", "x_hi", 4.0)?;
        let n = raw.count("grid", "n", 801)?;
        if n < 5 {
            return Err(cfg_err(n_line, format!("grid needs at least 5 nodes, found {n}")));
        }
        if !(x_hi > x_lo) {
            return Err(cfg_err(x_line, format!("x_hi ({x_hi}) must exceed x_lo ({x_lo})")));
        }
        let bc = match raw.word("grid", "bc") {
            None => BoundaryCondition::NeumannZero,
            Some((v, line)) => match v.as_str() {
                "neumann0" => {
                    for key in ["left", "right"] {
                        if let Some(e) = raw.take("grid", key) {
                            return Err(cfg_err(e.line, format!("`{key}` only applies to bc = dirichlet")));
                        }
                    }
                    BoundaryCondition::NeumannZero
                }
                "dirichlet" => BoundaryCondition::Dirichlet {
                    left: raw.real("grid", "left", 0.0)?,
                    right: raw.real("grid", "right", 0.0)?,
                },
                _ => return Err(cfg_err(line, format!("`bc` expects neumann0 or dirichlet, found `{v}`"))),
            },
        };
        let scheme = match raw.word("grid", "scheme") {
            None => DriftScheme::Upwind,
            Some((v, line)) => match v.as_str() {
                "upwind" => DriftScheme::Upwind,
                "central" => DriftScheme::Central,
                _ => return Err(cfg_err(line, format!("`scheme` expects upwind or central, found `{v}`"))),
            },
        };

        let (rule, rule_line) = raw.word("quad", "rule").unwrap_or(("gauss-legendre".into(), 0));
        let quad = match rule.as_str() {
            "gauss-legendre" => QuadRule::GaussLegendre {
                order: raw.count("quad", "order", 16)?,
                panels: raw.count("quad", "panels", 4)?,
            },
            "trapezoid" => {
                if let Some(e) = raw.take("quad", "order") {
                    return Err(cfg_err(e.line, "`order` only applies to rule = gauss-legendre"));
                }
                QuadRule::Trapezoid {
                    panels: raw.count("quad", "panels", 256)?,
                }
            }
            _ => {
                return Err(cfg_err(
                    rule_line,
                    format!("`rule` expects gauss-legendre or trapezoid, found `{rule}`"),
                ))
            }
        };

        let d = PiaConfig::default();
        let max_line = raw.line_of("pia", "max_iters");
        let max_iters = raw.count("pia", "max_iters", d.max_iters)?;
        if max_iters < 1 {
            return Err(cfg_err(max_line, "`max_iters` must be at least 1"));
        }
        let stop_tol = raw.positive("pia", "stop_tol", d.stop_tol)?;
        let residual_tol = raw.positive("pia", "residual_tol", d.residual_tol)?;
        let v0 = match raw.word("pia", "v0") {
            None => InitialValue::Zero,
            Some((v, _)) if v == "zero" => InitialValue::Zero,
            Some((v, line)) => match v.parse::<f64>() {
                Ok(c) if c.is_finite() => InitialValue::Constant(c),
                _ => return Err(cfg_err(line, format!("`v0` expects `zero` or a number, found `{v}`"))),
            },
        };
        let pia = PiaConfig {
            max_iters,
            stop_tol,
            residual_tol,
            v0,
            bc,
            scheme,
        };

        let md = McConfig::default();
        let paths_line = raw.line_of("mc", "paths");
        let n_paths = raw.count("mc", "paths", md.n_paths)?;
        let dt = raw.positive("mc", "dt", md.dt)?;
        let horizon = match raw.word("mc", "T") {
            None => None,
            Some((v, _)) if v == "auto" => None,
            Some((v, line)) => match v.parse::<f64>() {
                Ok(t) if t > 0.0 && t.is_finite() => Some(t),
                _ => return Err(cfg_err(line, format!("`T` expects `auto` or a positive number, found `{v}`"))),
            },
        };
        let horizon_eps = raw.positive("mc", "tail_eps", md.horizon_eps)?;
        let mc_seed = raw.parsed::<u64>("mc", "seed", "a non-negative integer")?.map_or(seed, |(v, _)| v);
        let antithetic = raw.flag("mc", "antithetic", md.antithetic)?;
        let sample_actions = raw.flag("mc", "sample_actions", md.sample_actions)?;
        if n_paths < 2 || (antithetic && n_paths % 2 != 0) {
            return Err(cfg_err(
                paths_line,
                format!("`paths` must be at least 2, and even with antithetic pairing; found {n_paths}"),
            ));
        }
        let mc = McConfig {
            n_paths,
            dt,
            horizon,
            horizon_eps,
            seed: mc_seed,
            antithetic,
            sample_actions,
        };

        if let Some(((sec, key), e)) = raw.entries.iter().next() {
            return Err(cfg_err(e.line, format!("unknown key `{key}` in [{sec}]")));
        }

        Ok(Self {
            output,
            seed,
            x0,
            model: ModelSpec { rho, lambda, params },
            grid: GridSpec {
                x_lo,
                x_hi,
                n,
                bc,
                scheme,
            },
            quad,
            pia,
            mc,
            source: text.to_string(),
        })
    }

    /// Action intervals as written, before any validation.
    pub fn action_intervals(&self) -> Vec<(f64, f64)> {
        match &self.model.params {
            ModelParams::Merton(p) => vec![(p.c_floor, 1.0 - p.frac_eta)],
            ModelParams::Growth(p) => vec![(p.c_floor, 1.0)],
            ModelParams::Quadratic { intervals, .. } | ModelParams::Constant { intervals, .. } => intervals.clone(),
        }
    }

    pub fn build_problem(&self) -> Result<ControlProblem> {
        let ModelSpec { rho, lambda, .. } = self.model;
        match &self.model.params {
            ModelParams::Merton(p) => make_merton(*p, rho, lambda),
            ModelParams::Growth(p) => make_growth(*p, rho, lambda),
            ModelParams::Quadratic { y_star, intervals } => {
                make_quadratic_test(*y_star, rho, lambda, ActionSpace::new(intervals.clone())?)
            }
            ModelParams::Constant {
                sigma,
                reward_slope,
                intervals,
            } => make_constant(*sigma, *reward_slope, ActionSpace::new(intervals.clone())?, rho, lambda),
        }
    }

    pub fn geometry(&self) -> Result<GridGeometry> {
        GridGeometry::new(self.grid.x_lo, self.grid.x_hi, self.grid.n)
    }

    pub fn quadrature(&self, problem: &ControlProblem) -> Result<ActionQuadrature> {
        build_quadrature(problem.action_space(), self.quad)
    }

    pub fn sample_config(&self) -> SampleConfig {
        SampleConfig {
            x_lo: self.grid.x_lo,
            x_hi: self.grid.x_hi,
            seed: self.seed,
            ..SampleConfig::default()
        }
    }

    /// Same run with a different entropy weight.
    pub fn with_lambda(&self, lambda: f64) -> Self {
        let mut c = self.clone();
        c.model.lambda = lambda;
        c
    }
}
