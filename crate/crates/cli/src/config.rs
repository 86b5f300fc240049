//! Run configuration: strict TOML, validated in full before any work starts.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use saddlefem::assembly::{ElementPair, ProblemKind};
use saddlefem::evolution::Scheme;
use saddlefem::harness::{standard_targets, Datum, DtPolicy, ErrorNorm, RateTarget};
use saddlefem::oracle::{HydrostaticMode, ModeComponent, ModeTerm, OracleSolution};
use saddlefem::saddle::ResolventShift;

pub const OUTPUT_ROOT_ENV: &str = "SADDLEFEM_OUTPUT_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Problem {
    Stokes2d,
    Hydrostatic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pair {
    Mini,
    TaylorHood,
    P1p1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SchemeName {
    ImplicitEuler,
    #[default]
    Bdf2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case", deny_unknown_fields)]
pub enum DtConfig {
    Fixed { value: f64 },
    TiedToH { factor: f64 },
}

impl Default for DtConfig {
    fn default() -> Self {
        DtConfig::TiedToH { factor: 1.0 / 256.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Parallel,
    Perpendicular,
    FreeX,
    FreeY,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeConfig {
    pub k: [i64; 2],
    pub j: usize,
    pub component: Component,
    /// `[re, im]`
    pub amplitude: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialData {
    OracleModes { modes: Vec<ModeConfig> },
    Checkerboard { k_max: i64, j_max: usize },
    Vortex,
    CustomExpression { u: String, v: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftConfig {
    pub modulus: f64,
    /// argument in units of π
    pub arg_over_pi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolventConfig {
    pub shifts: Vec<ShiftConfig>,
    /// sector half-opening margin
    #[serde(default = "default_delta")]
    pub delta: f64,
    /// `|λ|` values for the dual-norm sweep (empty: no sweep)
    #[serde(default)]
    pub sweep_moduli: Vec<f64>,
    #[serde(default = "default_sweep_arg")]
    pub sweep_arg_over_pi: f64,
    /// level of the sweep; defaults to the finest level
    #[serde(default)]
    pub sweep_level: Option<usize>,
    /// source for the sweep; defaults to `initial_data`
    #[serde(default)]
    pub sweep_source: Option<Vec<ModeConfig>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateConfig {
    pub norm: NormName,
    pub rate: f64,
    pub tol: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormName {
    VelocityL2,
    VelocityH1,
    VelocityTimeDerivativeVdual,
    PressureL2,
}

impl NormName {
    pub fn norm(self) -> ErrorNorm {
        match self {
            NormName::VelocityL2 => ErrorNorm::VelocityL2,
            NormName::VelocityH1 => ErrorNorm::VelocityH1,
            NormName::VelocityTimeDerivativeVdual => ErrorNorm::VdualUt,
            NormName::PressureL2 => ErrorNorm::PressureL2,
        }
    }
}

/// Checks that decide the exit status.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Assertions {
    /// rate targets for `converge` and `resolvent`; defaults to H¹ 1 ± 0.25,
    /// L² 2 ± 0.3, pressure 1 ± 0.3 (pressure dropped for `resolvent`)
    #[serde(default)]
    pub rates: Option<Vec<RateConfig>>,
    /// judge only the finest level pair instead of every pair
    #[serde(default = "yes")]
    pub finest_pair_only: bool,
    #[serde(default = "default_infsup_spread")]
    pub infsup_max_spread: f64,
    #[serde(default = "default_factor3")]
    pub resolvent_constant_ratio: f64,
    #[serde(default = "default_factor3")]
    pub sweep_max_spread: f64,
    #[serde(default = "default_singularity_spread")]
    pub singularity_max_spread: f64,
    /// minimum log-slope of `t^{3/2}‖e_p‖` over the three smallest times
    #[serde(default = "default_pressure_slope")]
    pub pressure_min_slope: f64,
    /// maximum relative error change when halving dt on the finest level
    #[serde(default)]
    pub dt_control_max_change: Option<f64>,
    #[serde(default = "yes")]
    pub energy_decay: bool,
}

impl Default for Assertions {
    fn default() -> Self {
        Self {
            rates: None,
            finest_pair_only: true,
            infsup_max_spread: default_infsup_spread(),
            resolvent_constant_ratio: default_factor3(),
            sweep_max_spread: default_factor3(),
            singularity_max_spread: default_singularity_spread(),
            pressure_min_slope: default_pressure_slope(),
            dt_control_max_change: None,
            energy_decay: true,
        }
    }
}

fn yes() -> bool {
    true
}
fn default_delta() -> f64 {
    0.1
}
fn default_sweep_arg() -> f64 {
    0.75
}
fn default_infsup_spread() -> f64 {
    1.2
}
fn default_factor3() -> f64 {
    3.0
}
fn default_singularity_spread() -> f64 {
    5.0
}
fn default_pressure_slope() -> f64 {
    0.25
}
fn default_depth() -> f64 {
    1.0
}
fn default_t_end() -> f64 {
    0.25
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: Problem,
    pub element_pair: Pair,
    pub levels: Vec<usize>,
    /// vertical layers per level; defaults to `levels`
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layers: Option<Vec<usize>>,
    #[serde(default = "default_depth")]
    pub depth: f64,
    #[serde(default)]
    pub scheme: SchemeName,
    #[serde(default = "default_t_end")]
    pub t_end: f64,
    /// defaults to `[t_end]`
    #[serde(default)]
    pub sample_times: Vec<f64>,
    pub output_dir: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub dt: DtConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_data: Option<InitialData>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolvent: Option<ResolventConfig>,
    #[serde(default)]
    pub assertions: Assertions,
}

/// Parsed config together with its source, for line-anchored messages.
pub struct LoadedConfig {
    pub config: RunConfig,
    pub path: PathBuf,
    source: String,
}

impl LoadedConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let source = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        Self::from_str(&source, path)
    }

    pub fn from_str(source: &str, path: &Path) -> Result<Self> {
        let config: RunConfig = toml::from_str(source).map_err(|e| {
            let line = e.span().map(|s| line_of(source, s.start));
            match line {
                Some(l) => anyhow!("{}:{l}: {}", path.display(), e.message()),
                None => anyhow!("{}: {}", path.display(), e.message()),
            }
        })?;
        let mut loaded = Self { config, path: path.to_path_buf(), source: source.to_string() };
        loaded.fill_defaults();
        Ok(loaded)
    }

    fn fill_defaults(&mut self) {
        let c = &mut self.config;
        if c.sample_times.is_empty() {
            c.sample_times = vec![c.t_end];
        }
        if c.layers.is_none() && c.problem == Problem::Hydrostatic {
            c.layers = Some(c.levels.clone());
        }
        if c.initial_data.is_none() {
            c.initial_data = Some(match c.problem {
                Problem::Stokes2d => InitialData::Vortex,
                Problem::Hydrostatic => InitialData::OracleModes { modes: default_modes() },
            });
        }
    }

    /// `path:line: key: message`, pointing at the first occurrence of `key`.
    fn diag(&self, key: &str, msg: impl std::fmt::Display) -> anyhow::Error {
        match find_key_line(&self.source, key) {
            Some(l) => anyhow!("{}:{l}: `{key}`: {msg}", self.path.display()),
            None => anyhow!("{}: `{key}`: {msg}", self.path.display()),
        }
    }

    /// Every check that does not need a computation.
    pub fn validate(&self, subcommand: &str) -> Result<()> {
        let c = &self.config;
        if c.levels.is_empty() {
            return Err(self.diag("levels", "must list at least one level"));
        }
        if c.levels.iter().any(|&n| n == 0) {
            return Err(self.diag("levels", "levels must be positive"));
        }
        if c.levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(self.diag("levels", "levels must be strictly increasing"));
        }
        if let Some(m) = &c.layers {
            if m.len() != c.levels.len() {
                return Err(self.diag("layers", format!("{} entries for {} levels", m.len(), c.levels.len())));
            }
            if m.iter().any(|&m| m == 0) {
                return Err(self.diag("layers", "layer counts must be positive"));
            }
            if c.problem == Problem::Stokes2d {
                return Err(self.diag("layers", "the 2D problem has no layers"));
            }
        }
        if !(c.depth > 0.0) || !c.depth.is_finite() {
            return Err(self.diag("depth", "must be a positive number"));
        }
        if !(c.t_end > 0.0) || !c.t_end.is_finite() {
            return Err(self.diag("t_end", "must be a positive number"));
        }
        if c.sample_times.iter().any(|&t| !(t > 0.0) || t > c.t_end * (1.0 + 1e-12)) {
            return Err(self.diag("sample_times", format!("every sample time must lie in (0, t_end = {}]", c.t_end)));
        }
        if c.sample_times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(self.diag("sample_times", "sample times must be strictly increasing"));
        }
        match c.dt {
            DtConfig::Fixed { value } => {
                if !(value > 0.0) {
                    return Err(self.diag("value", "fixed dt must be positive"));
                }
                for &t in &c.sample_times {
                    let k = t / value;
                    if (k - k.round()).abs() > 1e-9 * k.max(1.0) {
                        return Err(self.diag("value", format!("sample time {t} is not a multiple of dt = {value}")));
                    }
                }
            }
            DtConfig::TiedToH { factor } => {
                if !(factor > 0.0) {
                    return Err(self.diag("factor", "tied_to_h factor must be positive"));
                }
                if c.sample_times.len() > 1 {
                    return Err(self.diag("policy", "several sample times need a fixed dt"));
                }
            }
        }
        if c.element_pair == Pair::P1p1 && subcommand != "infsup" && subcommand != "mesh" {
            return Err(self.diag("element_pair", "p1p1 is an unstable control, only valid for `infsup` and `mesh`"));
        }
        let data = c.initial_data.as_ref().expect("filled by defaults");
        match (c.problem, data) {
            (Problem::Stokes2d, InitialData::OracleModes { .. } | InitialData::Checkerboard { .. }) => {
                return Err(self.diag("kind", "modal and checkerboard data live on the hydrostatic box"));
            }
            (Problem::Hydrostatic, InitialData::Vortex) => {
                return Err(self.diag("kind", "the vortex datum is defined on the unit square"));
            }
            (Problem::Hydrostatic, InitialData::CustomExpression { .. }) if matches!(subcommand, "converge" | "singularity" | "resolvent") => {
                return Err(self.diag("kind", "hydrostatic studies need a modal or checkerboard datum with a known solution"));
            }
            _ => {}
        }
        match data {
            InitialData::OracleModes { modes } => {
                if modes.is_empty() {
                    return Err(self.diag("modes", "at least one mode is required"));
                }
                for m in modes {
                    mode_of(m, c.depth).map_err(|e| self.diag("modes", e))?;
                }
            }
            InitialData::Checkerboard { k_max, j_max } => {
                if *k_max < 1 || *j_max < 1 {
                    return Err(self.diag("k_max", "k_max and j_max must be at least 1"));
                }
                let layers = c.layers.clone().unwrap_or_else(|| c.levels.clone());
                if c.levels.iter().chain(&layers).any(|n| n % 2 == 1) {
                    return Err(self.diag("levels", "the checkerboard needs even n and m so its jumps lie on cell faces"));
                }
            }
            InitialData::CustomExpression { u, v } => {
                let _ = compile_expression(u).map_err(|e| self.diag("u", e))?;
                let _ = compile_expression(v).map_err(|e| self.diag("v", e))?;
            }
            InitialData::Vortex => {}
        }
        if let Some(rates) = &c.assertions.rates {
            for r in rates {
                if !(r.tol >= 0.0) || !r.rate.is_finite() {
                    return Err(self.diag("rates", "rate targets need a finite rate and a non-negative tolerance"));
                }
            }
        }
        match subcommand {
            "converge" if c.levels.len() < 2 => return Err(self.diag("levels", "a convergence study needs at least two levels")),
            "resolvent" => {
                if c.problem != Problem::Hydrostatic {
                    return Err(self.diag("problem", "resolvent studies use the hydrostatic modal oracle"));
                }
                let r = c.resolvent.as_ref().ok_or_else(|| self.diag("resolvent", "missing [resolvent] section"))?;
                if r.shifts.is_empty() {
                    return Err(self.diag("shifts", "at least one shift is required"));
                }
                for s in &r.shifts {
                    shift_of(s, r.delta).map_err(|e| self.diag("shifts", e))?;
                }
                for &m in &r.sweep_moduli {
                    ResolventShift::polar(m, r.sweep_arg_over_pi * PI, r.delta).map_err(|e| self.diag("sweep_moduli", e))?;
                }
                if let Some(l) = r.sweep_level {
                    if l == 0 {
                        return Err(self.diag("sweep_level", "must be positive"));
                    }
                }
                if let Some(src) = &r.sweep_source {
                    for m in src {
                        mode_of(m, c.depth).map_err(|e| self.diag("sweep_source", e))?;
                    }
                }
            }
            "singularity" => {
                if c.problem != Problem::Hydrostatic {
                    return Err(self.diag("problem", "singularity profiles use the hydrostatic modal oracle"));
                }
                if c.sample_times.len() < 3 {
                    return Err(self.diag("sample_times", "a singularity profile needs at least three sample times"));
                }
            }
            _ => {}
        }
        Ok(())
    }

    pub fn problem(&self) -> ProblemKind {
        match self.config.problem {
            Problem::Stokes2d => ProblemKind::Stokes2d,
            Problem::Hydrostatic => ProblemKind::Hydrostatic,
        }
    }

    pub fn pair(&self) -> ElementPair {
        match self.config.element_pair {
            Pair::Mini => ElementPair::Mini,
            Pair::TaylorHood => ElementPair::TaylorHood,
            Pair::P1p1 => ElementPair::P1P1,
        }
    }

    pub fn scheme(&self) -> Scheme {
        match self.config.scheme {
            SchemeName::ImplicitEuler => Scheme::ImplicitEuler,
            SchemeName::Bdf2 => Scheme::Bdf2,
        }
    }

    pub fn dt_policy(&self) -> DtPolicy {
        match self.config.dt {
            DtConfig::Fixed { value } => DtPolicy::Fixed(value),
            DtConfig::TiedToH { factor } => DtPolicy::TiedToH(factor),
        }
    }

    pub fn layers(&self) -> Vec<usize> {
        self.config.layers.clone().unwrap_or_else(|| self.config.levels.clone())
    }

    pub fn datum(&self) -> Result<Datum> {
        Ok(match self.config.initial_data.as_ref().expect("filled by defaults") {
            InitialData::OracleModes { modes } => Datum::Modes(oracle_of(modes, self.config.depth)?),
            InitialData::Checkerboard { k_max, j_max } => Datum::Checkerboard { k_max: *k_max, j_max: *j_max },
            InitialData::Vortex => Datum::Vortex,
            InitialData::CustomExpression { u, v } => {
                let (fu, fv) = (compile_expression(u)?, compile_expression(v)?);
                Datum::Custom(Arc::new(move |p: &[f64; 3]| [fu(p), fv(p), 0.0]))
            }
        })
    }

    pub fn shifts(&self) -> Result<Vec<ResolventShift>> {
        let r = self.config.resolvent.as_ref().ok_or_else(|| anyhow!("missing [resolvent] section"))?;
        r.shifts.iter().map(|s| shift_of(s, r.delta)).collect()
    }

    pub fn targets(&self, with_pressure: bool) -> Vec<RateTarget> {
        match &self.config.assertions.rates {
            Some(r) => r.iter().map(|r| RateTarget::new(r.norm.norm(), r.rate, r.tol)).collect(),
            None => standard_targets().into_iter().filter(|t| with_pressure || t.norm != ErrorNorm::PressureL2).collect(),
        }
    }

    /// Output directory, under `$SADDLEFEM_OUTPUT_ROOT` when set and the
    /// configured path is relative.
    pub fn output_dir(&self) -> PathBuf {
        let p = PathBuf::from(&self.config.output_dir);
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if p.is_relative() => PathBuf::from(root).join(p),
            _ => p,
        }
    }

    /// The configuration after defaults, as TOML.
    pub fn effective_toml(&self) -> Result<String> {
        Ok(toml::to_string(&self.config)?)
    }
}

/// A vertical-shear mode without pressure plus the gravest pressure-carrying mode.
pub fn default_modes() -> Vec<ModeConfig> {
    vec![
        ModeConfig { k: [0, 0], j: 0, component: Component::FreeX, amplitude: [1.0, 0.0] },
        ModeConfig { k: [1, 0], j: 0, component: Component::Parallel, amplitude: [1.0, 0.0] },
    ]
}

pub fn mode_of(m: &ModeConfig, depth: f64) -> Result<ModeTerm> {
    let component = match m.component {
        Component::Parallel => ModeComponent::Parallel,
        Component::Perpendicular => ModeComponent::Perpendicular,
        Component::FreeX => ModeComponent::Free(0),
        Component::FreeY => ModeComponent::Free(1),
    };
    let mode = HydrostaticMode::new(m.k, m.j, component, depth)?;
    if !m.amplitude.iter().all(|a| a.is_finite()) {
        bail!("amplitudes must be finite");
    }
    Ok(ModeTerm { mode, amplitude: Complex64::new(m.amplitude[0], m.amplitude[1]) })
}

pub fn oracle_of(modes: &[ModeConfig], depth: f64) -> Result<OracleSolution> {
    let terms = modes.iter().map(|m| mode_of(m, depth)).collect::<Result<Vec<_>>>()?;
    Ok(OracleSolution::new(depth, terms)?)
}

fn shift_of(s: &ShiftConfig, delta: f64) -> Result<ResolventShift> {
    Ok(ResolventShift::polar(s.modulus, s.arg_over_pi * PI, delta)?)
}

/// Compile an expression in `x, y, z` (with `pi` and the usual elementary
/// functions) into a function.
pub fn compile_expression(src: &str) -> Result<impl Fn(&[f64; 3]) -> f64 + Send + Sync + Clone> {
    use evalexpr::{build_operator_tree, ContextWithMutableFunctions, ContextWithMutableVariables, DefaultNumericTypes, Function, HashMapContext, Value};
    type Ctx = HashMapContext<DefaultNumericTypes>;
    let tree = build_operator_tree::<DefaultNumericTypes>(src).map_err(|e| anyhow!("invalid expression `{src}`: {e}"))?;
    let mut base = Ctx::new();
    let unary: [(&str, fn(f64) -> f64); 10] = [
        ("sin", f64::sin),
        ("cos", f64::cos),
        ("tan", f64::tan),
        ("exp", f64::exp),
        ("ln", f64::ln),
        ("sqrt", f64::sqrt),
        ("abs", f64::abs),
        ("sinh", f64::sinh),
        ("cosh", f64::cosh),
        ("tanh", f64::tanh),
    ];
    for (name, f) in unary {
        base.set_function(name.into(), Function::new(move |a: &Value<DefaultNumericTypes>| Ok(Value::Float(f(a.as_number()?)))))
            .map_err(|e| anyhow!("{e}"))?;
    }
    base.set_value("pi".into(), Value::Float(PI)).map_err(|e| anyhow!("{e}"))?;
    let eval = move |p: &[f64; 3]| -> std::result::Result<f64, String> {
        let mut ctx = base.clone();
        for (name, v) in [("x", p[0]), ("y", p[1]), ("z", p[2])] {
            ctx.set_value(name.into(), Value::Float(v)).map_err(|e| e.to_string())?;
        }
        tree.eval_number_with_context(&ctx).map_err(|e| e.to_string())
    };
    // probe once so that unknown names are reported at validation time
    eval(&[0.31, 0.47, -0.23]).map_err(|e| anyhow!("cannot evaluate `{src}`: {e}"))?;
    Ok(move |p: &[f64; 3]| eval(p).unwrap_or(f64::NAN))
}

fn line_of(source: &str, offset: usize) -> usize {
    source[..offset.min(source.len())].matches('\n').count() + 1
}

/// Line of the first `key =` assignment or `[key]` header.
fn find_key_line(source: &str, key: &str) -> Option<usize> {
    source.lines().position(|l| {
        let t = l.trim_start();
        let is_assign = t.strip_prefix(key).is_some_and(|r| r.trim_start().starts_with('='));
        let is_header = t.starts_with('[') && t.trim_matches(|c| c == '[' || c == ']').trim() == key;
        is_assign || is_header
    })
    .map(|i| i + 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn load(src: &str) -> Result<LoadedConfig> {
        LoadedConfig::from_str(src, Path::new("test.toml"))
    }

    const BASE: &str = "problem = \"hydrostatic\"\nelement_pair = \"mini\"\nlevels = [2, 4]\noutput_dir = \"out\"\n";

    #[test]
    fn defaults_fill_and_round_trip() {
        let c = load(BASE).unwrap();
        c.validate("converge").unwrap();
        assert_eq!(c.config.sample_times, vec![0.25]);
        assert_eq!(c.config.layers, Some(vec![2, 4]));
        let echo = c.effective_toml().unwrap();
        let again = load(&echo).unwrap();
        assert_eq!(again.config, c.config);
    }

    #[test]
    fn unknown_key_rejected_with_line() {
        let src = format!("{BASE}levles = [1]\n");
        let e = load(&src).err().unwrap().to_string();
        assert!(e.starts_with("test.toml:5:"), "{e}");
        assert!(e.contains("levles"), "{e}");
        let src = format!("{BASE}[dt]\npolicy = \"fixed\"\nvalue = 0.01\nfactor = 2.0\n");
        assert!(load(&src).is_err());
        let src = format!("{BASE}[initial_data]\nkind = \"checkerboard\"\nk_max = 3\nj_max = 4\nextra = 1\n");
        assert!(load(&src).is_err());
    }

    #[test]
    fn validation_points_at_the_key() {
        let src = "problem = \"hydrostatic\"\nelement_pair = \"mini\"\noutput_dir = \"out\"\nlevels = [4, 2]\n";
        let e = load(src).unwrap().validate("converge").err().unwrap().to_string();
        assert!(e.starts_with("test.toml:4: `levels`"), "{e}");
        let src = format!("{BASE}depth = -1.0\n");
        let e = load(&src).unwrap().validate("converge").err().unwrap().to_string();
        assert!(e.starts_with("test.toml:5: `depth`"), "{e}");
        let src = format!("{BASE}t_end = 0.3\n[dt]\npolicy = \"fixed\"\nvalue = 0.07\n");
        let e = load(&src).unwrap().validate("converge").err().unwrap().to_string();
        assert!(e.starts_with("test.toml:8: `value`"), "{e}");
    }

    #[test]
    fn incompatible_choices_rejected() {
        let src = "problem = \"stokes2d\"\nelement_pair = \"mini\"\nlevels = [2, 4]\noutput_dir = \"o\"\n[initial_data]\nkind = \"checkerboard\"\nk_max = 3\nj_max = 3\n";
        assert!(load(src).unwrap().validate("converge").is_err());
        let src = "problem = \"hydrostatic\"\nelement_pair = \"p1p1\"\nlevels = [2, 4]\noutput_dir = \"o\"\n";
        assert!(load(src).unwrap().validate("converge").is_err());
        assert!(load(src).unwrap().validate("infsup").is_ok());
        assert!(load(BASE).unwrap().validate("resolvent").is_err());
    }

    #[test]
    fn expressions() {
        let f = compile_expression("sin(pi * x) * y").unwrap();
        assert!((f(&[0.5, 2.0, 0.0]) - 2.0).abs() < 1e-12);
        assert!(compile_expression("foo(x)").is_err());
        assert!(compile_expression("x +").is_err());
    }

    #[test]
    fn output_root_override() {
        let c = load(BASE).unwrap();
        assert_eq!(c.output_dir(), if let Some(r) = std::env::var_os(OUTPUT_ROOT_ENV) { PathBuf::from(r).join("out") } else { PathBuf::from("out") });
    }
}
