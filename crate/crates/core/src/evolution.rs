//! Time integration of the semi-discrete saddle-point system.

use std::fmt;
use std::sync::Arc;

use crate::assembly::{assemble_load_with_degree, SaddleSystem};
use crate::error::{Error, Result};
use crate::saddle::{project_solenoidal_load, SaddleFactor};
use crate::sparse::norm_inf;

/// `‖B u‖_∞` bound enforced after every step.
pub const DIVERGENCE_TOLERANCE: f64 = 1e-9;
/// Bound on `|m · p|`, relative to `max(1, ‖p‖_∞)`.
pub const MEAN_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    ImplicitEuler,
    Bdf2,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::ImplicitEuler => "implicit_euler",
            Scheme::Bdf2 => "bdf2",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "implicit_euler" => Ok(Scheme::ImplicitEuler),
            "bdf2" => Ok(Scheme::Bdf2),
            other => Err(Error::Config(format!("unknown scheme `{other}` (expected implicit_euler or bdf2)"))),
        }
    }
}

/// Body force `f(x, t)`.
pub type Forcing = Arc<dyn Fn(&[f64; 3], f64) -> [f64; 3] + Send + Sync>;

#[derive(Clone)]
pub struct SchemeSpec {
    pub scheme: Scheme,
    pub dt: f64,
    pub t_end: f64,
    pub forcing: Option<Forcing>,
}

impl fmt::Debug for SchemeSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SchemeSpec")
            .field("scheme", &self.scheme)
            .field("dt", &self.dt)
            .field("t_end", &self.t_end)
            .field("forcing", &self.forcing.is_some())
            .finish()
    }
}

impl SchemeSpec {
    pub fn new(scheme: Scheme, dt: f64, t_end: f64) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::InvalidParameter(format!("time step must be positive, got {dt}")));
        }
        if !(t_end >= 0.0) || !t_end.is_finite() {
            return Err(Error::InvalidParameter(format!("final time must be non-negative, got {t_end}")));
        }
        Ok(Self { scheme, dt, t_end, forcing: None })
    }

    pub fn with_forcing(mut self, forcing: Forcing) -> Self {
        self.forcing = Some(forcing);
        self
    }

    /// Number of steps to reach `t`, rejecting times off the `dt` grid.
    pub fn steps_to(&self, t: f64) -> Result<usize> {
        let k = (t / self.dt).round();
        if k < 0.0 || (k * self.dt - t).abs() > 1e-9 * self.dt.max(t) {
            return Err(Error::MisalignedSample(t));
        }
        Ok(k as usize)
    }
}

/// Velocity/pressure at one time level. Vectors are free coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct EvolutionState {
    pub t: f64,
    pub step_count: usize,
    pub u: Vec<f64>,
    /// `None` at `t = 0`; afterwards the multiplier of the last solve
    pub p: Option<Vec<f64>>,
    /// discrete time derivative formed by the scheme's own stencil
    pub u_dot: Option<Vec<f64>>,
    /// `u` at the previous level (BDF2 history)
    pub previous: Option<Vec<f64>>,
}

impl EvolutionState {
    pub fn initial(u: Vec<f64>) -> Self {
        Self { t: 0.0, step_count: 0, u, p: None, u_dot: None, previous: None }
    }
}

/// Factorized stepping operators for one system and scheme.
pub struct Evolver<'a> {
    system: &'a SaddleSystem,
    spec: SchemeSpec,
    main: SaddleFactor<f64>,
    half: Option<SaddleFactor<f64>>,
}

impl<'a> Evolver<'a> {
    pub fn new(system: &'a SaddleSystem, spec: SchemeSpec) -> Result<Self> {
        let dt = spec.dt;
        let main_coeff = match spec.scheme {
            Scheme::ImplicitEuler => 1.0 / dt,
            Scheme::Bdf2 => 1.5 / dt,
        };
        let block = system.m.combine(main_coeff, &system.a, 1.0)?;
        let main = SaddleFactor::new(&block, &system.b, &system.mean_row)?;
        let half = match spec.scheme {
            Scheme::Bdf2 => {
                let block = system.m.combine(2.0 / dt, &system.a, 1.0)?;
                Some(SaddleFactor::new(&block, &system.b, &system.mean_row)?)
            }
            Scheme::ImplicitEuler => None,
        };
        Ok(Self { system, spec, main, half })
    }

    pub fn spec(&self) -> &SchemeSpec {
        &self.spec
    }

    /// Initial state `u(0) = P_{h,σ} u₀` from the load `(u₀, φ_i)`.
    pub fn initialize_load(&self, load: &[f64]) -> Result<EvolutionState> {
        let u = project_solenoidal_load(self.system, load)?;
        Ok(EvolutionState::initial(u))
    }

    /// Initial state from a continuous field, integrated with a rule of at
    /// least `degree`.
    pub fn initialize(&self, u0: &dyn crate::fespace::VectorField<f64>, degree: usize) -> Result<EvolutionState> {
        let load = assemble_load_with_degree(&self.system.velocity, u0, degree)?;
        self.initialize_load(&load)
    }

    fn forcing_load(&self, t: f64) -> Result<Option<Vec<f64>>> {
        match &self.spec.forcing {
            None => Ok(None),
            Some(f) => {
                let f = f.clone();
                let field = move |p: &[f64; 3]| f(p, t);
                Ok(Some(assemble_load_with_degree(&self.system.velocity, &field, 0)?))
            }
        }
    }

    fn solve_with(&self, factor: &SaddleFactor<f64>, mut rhs: Vec<f64>, t_new: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        if let Some(f) = self.forcing_load(t_new)? {
            for (r, fi) in rhs.iter_mut().zip(&f) {
                *r += fi;
            }
        }
        let sol = factor.solve(&rhs)?;
        let div = norm_inf(&self.system.b.mul_vec(&sol.w));
        if div > DIVERGENCE_TOLERANCE {
            return Err(Error::InvariantViolation(format!("‖B u‖_∞ = {div:.3e} at t = {t_new}")));
        }
        let mean: f64 = sol.pi.iter().zip(&self.system.mean_row).map(|(p, m)| p * m).sum();
        if mean.abs() > MEAN_TOLERANCE * norm_inf(&sol.pi).max(1.0) {
            return Err(Error::InvariantViolation(format!("pressure mean {mean:.3e} at t = {t_new}")));
        }
        Ok((sol.w, sol.pi))
    }

    /// Advance one step of size `dt`.
    pub fn step(&self, state: &EvolutionState) -> Result<EvolutionState> {
        let dt = self.spec.dt;
        let n1 = state.step_count + 1;
        let t1 = n1 as f64 * dt;
        let m = &self.system.m;
        match (self.spec.scheme, &state.previous) {
            (Scheme::ImplicitEuler, _) => {
                let rhs: Vec<f64> = m.mul_vec(&state.u).iter().map(|v| v / dt).collect();
                let (u, p) = self.solve_with(&self.main, rhs, t1)?;
                let u_dot = u.iter().zip(&state.u).map(|(a, b)| (a - b) / dt).collect();
                Ok(EvolutionState { t: t1, step_count: n1, u, p: Some(p), u_dot: Some(u_dot), previous: Some(state.u.clone()) })
            }
            (Scheme::Bdf2, None) => {
                // bootstrap: two implicit Euler half steps
                let half = self.half.as_ref().expect("BDF2 keeps a half-step factor");
                let h = 0.5 * dt;
                let rhs: Vec<f64> = m.mul_vec(&state.u).iter().map(|v| v / h).collect();
                let (u_mid, _) = self.solve_with(half, rhs, state.t + h)?;
                let rhs: Vec<f64> = m.mul_vec(&u_mid).iter().map(|v| v / h).collect();
                let (u, p) = self.solve_with(half, rhs, t1)?;
                let u_dot = u.iter().zip(&u_mid).map(|(a, b)| (a - b) / h).collect();
                Ok(EvolutionState { t: t1, step_count: n1, u, p: Some(p), u_dot: Some(u_dot), previous: Some(state.u.clone()) })
            }
            (Scheme::Bdf2, Some(prev)) => {
                let comb: Vec<f64> = state.u.iter().zip(prev).map(|(a, b)| (2.0 * a - 0.5 * b) / dt).collect();
                let rhs = m.mul_vec(&comb);
                let (u, p) = self.solve_with(&self.main, rhs, t1)?;
                let u_dot = (0..u.len()).map(|i| (1.5 * u[i] - 2.0 * state.u[i] + 0.5 * prev[i]) / dt).collect();
                Ok(EvolutionState { t: t1, step_count: n1, u, p: Some(p), u_dot: Some(u_dot), previous: Some(state.u.clone()) })
            }
        }
    }

    /// Step from `state` up to `t_end`, returning snapshots at `sample_times`.
    pub fn evolve(&self, state: EvolutionState, sample_times: &[f64]) -> Result<Vec<EvolutionState>> {
        let mut targets = Vec::with_capacity(sample_times.len());
        for &t in sample_times {
            if !(t > 0.0) || t > self.spec.t_end * (1.0 + 1e-12) {
                return Err(Error::InvalidParameter(format!("sample time {t} outside (0, {}]", self.spec.t_end)));
            }
            let k = self.spec.steps_to(t)?;
            if k <= state.step_count {
                return Err(Error::InvalidParameter(format!("sample time {t} is not after the current state")));
            }
            targets.push(k);
        }
        let mut order: Vec<usize> = (0..targets.len()).collect();
        order.sort_by_key(|&i| targets[i]);
        let mut snaps: Vec<Option<EvolutionState>> = vec![None; targets.len()];
        let mut current = state;
        let mut next = 0;
        while next < order.len() {
            current = self.step(&current)?;
            while next < order.len() && targets[order[next]] == current.step_count {
                snaps[order[next]] = Some(current.clone());
                next += 1;
            }
        }
        Ok(snaps.into_iter().map(|s| s.expect("every target reached")).collect())
    }

    /// Run to step `k` exactly.
    pub fn advance_to_step(&self, mut state: EvolutionState, k: usize) -> Result<EvolutionState> {
        while state.step_count < k {
            state = self.step(&state)?;
        }
        Ok(state)
    }
}

/// `M`-norm `(uᵀ M u)^½`.
pub fn energy(system: &SaddleSystem, u: &[f64]) -> f64 {
    system.m.bilinear(u, u).max(0.0).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::ElementPair;

    fn noisy(n: usize) -> Vec<f64> {
        (0..n).map(|i| ((i * 31 % 17) as f64 * 0.7).sin()).collect()
    }

    #[test]
    fn zero_state_stays_zero() {
        let sys = SaddleSystem::stokes_2d(3, ElementPair::Mini).unwrap();
        for scheme in [Scheme::ImplicitEuler, Scheme::Bdf2] {
            let ev = Evolver::new(&sys, SchemeSpec::new(scheme, 0.01, 0.05).unwrap()).unwrap();
            let s = ev.initialize_load(&vec![0.0; sys.n_velocity()]).unwrap();
            let out = ev.evolve(s, &[0.05]).unwrap();
            assert!(out[0].u.iter().all(|&v| v == 0.0));
            assert!(out[0].p.as_ref().unwrap().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn samples_and_alignment() {
        let sys = SaddleSystem::stokes_2d(2, ElementPair::TaylorHood).unwrap();
        let ev = Evolver::new(&sys, SchemeSpec::new(Scheme::Bdf2, 0.1, 1.0).unwrap()).unwrap();
        let s = ev.initialize_load(&noisy(sys.n_velocity())).unwrap();
        let out = ev.evolve(s.clone(), &[0.5, 1.0]).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].step_count, 5);
        assert_eq!(out[1].step_count, 10);
        assert!(matches!(ev.evolve(s.clone(), &[0.55]), Err(Error::MisalignedSample(_))));
        assert!(ev.evolve(s, &[1.5]).is_err());
    }

    #[test]
    fn implicit_euler_dissipates_and_is_linear() {
        let sys = SaddleSystem::hydrostatic(2, 2, 1.0, ElementPair::Mini).unwrap();
        let ev = Evolver::new(&sys, SchemeSpec::new(Scheme::ImplicitEuler, 0.02, 0.2).unwrap()).unwrap();
        let load = noisy(sys.n_velocity());
        let mut s = ev.initialize_load(&load).unwrap();
        let mut e = energy(&sys, &s.u);
        for _ in 0..10 {
            s = ev.step(&s).unwrap();
            let e1 = energy(&sys, &s.u);
            assert!(e1 <= e * (1.0 + 1e-14));
            e = e1;
        }
        let scaled: Vec<f64> = load.iter().map(|v| 3.0 * v).collect();
        let a = ev.advance_to_step(ev.initialize_load(&load).unwrap(), 10).unwrap();
        let b = ev.advance_to_step(ev.initialize_load(&scaled).unwrap(), 10).unwrap();
        for (x, y) in a.u.iter().zip(&b.u) {
            assert!((3.0 * x - y).abs() <= 1e-11 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn restart_is_bitwise_identical() {
        let sys = SaddleSystem::stokes_2d(3, ElementPair::Mini).unwrap();
        let ev = Evolver::new(&sys, SchemeSpec::new(Scheme::Bdf2, 0.01, 0.2).unwrap()).unwrap();
        let s0 = ev.initialize_load(&noisy(sys.n_velocity())).unwrap();
        let direct = ev.evolve(s0.clone(), &[0.2]).unwrap().pop().unwrap();
        let mid = ev.evolve(s0, &[0.07]).unwrap().pop().unwrap();
        let restarted = ev.evolve(mid, &[0.2]).unwrap().pop().unwrap();
        assert_eq!(direct, restarted);
    }
}
