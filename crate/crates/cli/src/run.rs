//! Subcommand drivers. Each writes into a staging directory that replaces
//! `output_dir` only once every artifact is complete.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use saddlefem::assembly::{ElementPair, ProblemKind, SaddleSystem};
use saddlefem::evolution::energy;
use saddlefem::harness::{
    convergence_study, dt_control_change, error_norms_oracle, fmt_num, resolvent_rate_study, run_level, singularity_profile,
    structural_invariants, vdual_lambda_sweep, ConvergenceReport, Datum, DualNorm, ErrorNorm, EvolutionStudy, CSV_HEADER,
};
use saddlefem::mesh::{periodic_box, triangulate_unit_square, Mesh};
use saddlefem::oracle::OracleSolution;
use saddlefem::saddle::{estimate_infsup, InfSupOptions, InfSupReport};

use crate::config::{oracle_of, InitialData, LoadedConfig};

pub struct Outcome {
    pub summary: String,
    pub pass: bool,
}

/// Artifacts gathered in memory, written in one go.
#[derive(Default)]
struct Artifacts {
    files: Vec<(String, String)>,
}

impl Artifacts {
    fn add(&mut self, name: impl Into<String>, content: impl Into<String>) {
        self.files.push((name.into(), content.into()));
    }
}

pub fn run(subcommand: &str, config: Option<&Path>, dry_run: bool) -> Result<Outcome> {
    let loaded = match config {
        Some(p) => Some(LoadedConfig::from_file(p)?),
        None if subcommand == "selftest" => None,
        None => bail!("`{subcommand}` needs a config file"),
    };
    if let Some(c) = &loaded {
        c.validate(subcommand)?;
        if dry_run {
            return Ok(Outcome { summary: format!("{}: valid for `{subcommand}`\n", c.path.display()), pass: true });
        }
    }
    let mut art = Artifacts::default();
    let (summary, pass) = match (subcommand, &loaded) {
        ("selftest", c) => selftest(c.as_ref(), &mut art)?,
        (_, Some(c)) => {
            art.add("effective_config.toml", c.effective_toml()?);
            match subcommand {
                "mesh" => mesh(c, &mut art)?,
                "infsup" => infsup(c, &mut art)?,
                "resolvent" => resolvent(c, &mut art)?,
                "evolve" => evolve(c, &mut art)?,
                "converge" => converge(c, &mut art)?,
                "singularity" => singularity(c, &mut art)?,
                other => bail!("unknown subcommand `{other}`"),
            }
        }
        _ => unreachable!("config presence checked above"),
    };
    if let Some(c) = &loaded {
        art.add("summary.txt", format!("{summary}{}\n", if pass { "PASS" } else { "FAIL" }));
        publish(&c.output_dir(), &art)?;
    }
    Ok(Outcome { summary, pass })
}

/// Write everything to a sibling staging directory, then swap it in.
fn publish(out: &Path, art: &Artifacts) -> Result<()> {
    let parent = out.parent().filter(|p| !p.as_os_str().is_empty()).map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&parent).with_context(|| format!("cannot create {}", parent.display()))?;
    let name = out.file_name().context("output_dir has no final component")?.to_string_lossy().into_owned();
    let staging = parent.join(format!(".{name}.partial-{}", std::process::id()));
    let write = || -> Result<()> {
        if staging.exists() {
            fs::remove_dir_all(&staging)?;
        }
        fs::create_dir_all(&staging)?;
        for (file, content) in &art.files {
            fs::write(staging.join(file), content).with_context(|| format!("cannot write {file}"))?;
        }
        if out.exists() {
            fs::remove_dir_all(out).with_context(|| format!("cannot replace {}", out.display()))?;
        }
        fs::rename(&staging, out).with_context(|| format!("cannot move results to {}", out.display()))?;
        Ok(())
    };
    let res = write();
    if res.is_err() {
        let _ = fs::remove_dir_all(&staging);
    }
    res
}

fn verdict(pass: bool) -> &'static str {
    if pass {
        "PASS"
    } else {
        "FAIL"
    }
}

fn build_mesh(c: &LoadedConfig, n: usize, m: usize) -> Result<Mesh> {
    Ok(match c.problem() {
        ProblemKind::Stokes2d => triangulate_unit_square(n)?,
        ProblemKind::Hydrostatic => {
            let (mesh, structure) = periodic_box(n, m, c.config.depth)?;
            structure.check(&mesh)?;
            mesh
        }
    })
}

fn build_system(c: &LoadedConfig, n: usize, m: usize) -> Result<SaddleSystem> {
    Ok(match c.problem() {
        ProblemKind::Stokes2d => SaddleSystem::stokes_2d(n, c.pair())?,
        ProblemKind::Hydrostatic => SaddleSystem::hydrostatic(n, m, c.config.depth, c.pair())?,
    })
}

fn level_pairs(c: &LoadedConfig) -> Vec<(usize, usize)> {
    let m = match c.problem() {
        ProblemKind::Stokes2d => vec![0; c.config.levels.len()],
        ProblemKind::Hydrostatic => c.layers(),
    };
    c.config.levels.iter().copied().zip(m).collect()
}

fn m_cell(problem: ProblemKind, m: usize) -> String {
    match problem {
        ProblemKind::Stokes2d => String::new(),
        ProblemKind::Hydrostatic => m.to_string(),
    }
}

fn mesh(c: &LoadedConfig, art: &mut Artifacts) -> Result<(String, bool)> {
    let mut csv = String::from("n,m,vertices,cells,h,shape_regularity,periodic_euler_characteristic\n");
    let mut summary = format!("mesh: {}\n", c.problem().name());
    for (n, m) in level_pairs(c) {
        let (mesh, chi) = match c.problem() {
            ProblemKind::Stokes2d => (triangulate_unit_square(n)?, String::new()),
            ProblemKind::Hydrostatic => {
                let (mesh, structure) = periodic_box(n, m, c.config.depth)?;
                structure.check(&mesh)?;
                (mesh, structure.surface_mesh.periodic_euler_characteristic().to_string())
            }
        };
        mesh.validate()?;
        let _ = writeln!(
            csv,
            "{n},{},{},{},{},{},{chi}",
            m_cell(c.problem(), m),
            mesh.n_vertices(),
            mesh.n_cells(),
            fmt_num(Some(mesh.h())),
            fmt_num(Some(mesh.shape_regularity()))
        );
        let _ = writeln!(summary, "  n = {n:>3}: {} vertices, {} cells, h = {:.4e}, valid", mesh.n_vertices(), mesh.n_cells(), mesh.h());
        art.add(format!("mesh_n{n}.vtk"), mesh.to_vtk(None));
    }
    art.add("mesh.csv", csv);
    Ok((summary, true))
}

fn infsup(c: &LoadedConfig, art: &mut Artifacts) -> Result<(String, bool)> {
    let levels = level_pairs(c);
    let estimates = levels
        .iter()
        .map(|&(n, m)| estimate_infsup(&build_system(c, n, m)?, &InfSupOptions::default()).map_err(Into::into))
        .collect::<Result<Vec<_>>>()?;
    let report = InfSupReport { levels: estimates };
    let mut csv = String::from("problem,element_pair,n,m,h,beta,mu_min,iterations,singular\n");
    let mut summary = format!("inf-sup: {} / {}\n", c.problem().name(), c.pair().name());
    for (&(n, m), e) in levels.iter().zip(&report.levels) {
        let _ = writeln!(
            csv,
            "{},{},{n},{},{},{},{},{},{}",
            c.problem().name(),
            c.pair().name(),
            m_cell(c.problem(), m),
            fmt_num(Some(e.h)),
            fmt_num(Some(e.beta)),
            fmt_num(Some(e.mu_min)),
            e.iterations,
            e.singular
        );
        let _ = writeln!(summary, "  n = {n:>3}: beta_h = {:.6}{}", e.beta, if e.singular { " (singular)" } else { "" });
    }
    art.add("infsup.csv", csv);
    let spread = report.spread();
    let limit = c.config.assertions.infsup_max_spread;
    let positive = report.levels.iter().all(|e| e.beta > 0.0 && !e.singular);
    let pass = positive && spread <= limit;
    let _ = writeln!(summary, "  beta_h > 0 on every level: {}", verdict(positive));
    let _ = writeln!(summary, "  max/min = {spread:.4} (limit {limit}): {}", verdict(spread <= limit));
    if report.collapses() {
        let _ = writeln!(summary, "  instability: beta_h collapses under refinement");
    }
    Ok((summary, pass))
}

fn modal_datum(c: &LoadedConfig) -> Result<OracleSolution> {
    match c.config.initial_data.as_ref().expect("filled by defaults") {
        InitialData::OracleModes { modes } => oracle_of(modes, c.config.depth),
        _ => bail!("this subcommand needs `initial_data.kind = \"oracle_modes\"`"),
    }
}

fn judge(report: &ConvergenceReport, finest_only: bool) -> bool {
    let checks = if finest_only { report.check_finest() } else { report.check() };
    checks.iter().all(|c| c.pass)
}

fn resolvent(c: &LoadedConfig, art: &mut Artifacts) -> Result<(String, bool)> {
    let source = modal_datum(c)?;
    let shifts = c.shifts()?;
    let r = c.config.resolvent.as_ref().expect("validated");
    let finest = c.config.assertions.finest_pair_only;
    let studies = resolvent_rate_study(c.pair(), &c.config.levels, c.config.depth, &shifts, &source)?;
    let targets = c.targets(false);
    let mut pass = true;
    let mut summary = String::new();
    let mut constants: Vec<Vec<f64>> = Vec::new();
    for (i, (shift, mut report, errs)) in studies.into_iter().enumerate() {
        report.targets = targets.clone();
        pass &= judge(&report, finest);
        let _ = write!(summary, "resolvent shift {i}: lambda = {:.4} {:+.4}i\n{}", shift.lambda.re, shift.lambda.im, report.summary_judged(finest));
        art.add(format!("resolvent_{i}.csv"), report.to_csv());
        // C = e / (h^rate ‖g‖) on the finest level, per target norm
        let last = errs.last().expect("levels validated non-empty");
        constants.push(
            targets
                .iter()
                .map(|t| {
                    let e = report.levels.last().and_then(|l| l.report.get(t.norm)).unwrap_or(0.0);
                    e / (last.h.powf(t.rate) * last.g_norm)
                })
                .collect(),
        );
    }
    let limit = c.config.assertions.resolvent_constant_ratio;
    for (k, t) in targets.iter().enumerate() {
        let vals: Vec<f64> = constants.iter().map(|v| v[k]).collect();
        let max = vals.iter().copied().fold(0.0, f64::max);
        let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let ratio = if min > 0.0 { max / min } else { f64::INFINITY };
        let ok = ratio <= limit;
        pass &= ok;
        let shown: Vec<String> = vals.iter().map(|v| format!("{v:.4e}")).collect();
        let _ = writeln!(summary, "constant {} across shifts: [{}], ratio {ratio:.3} (limit {limit}): {}", t.norm.name(), shown.join(", "), verdict(ok));
    }
    if !r.sweep_moduli.is_empty() {
        let n = r.sweep_level.unwrap_or(*c.config.levels.last().expect("levels"));
        let sweep_source = match &r.sweep_source {
            Some(m) => oracle_of(m, c.config.depth)?,
            None => source.clone(),
        };
        let rows = vdual_lambda_sweep(c.pair(), n, c.config.depth, &r.sweep_moduli, r.sweep_arg_over_pi * std::f64::consts::PI, r.delta, &sweep_source)?;
        let mut csv = String::from("n,lambda_re,lambda_im,modulus,err_Vdual,modulus_times_err_Vdual,err_H1,err_L2\n");
        let scaled: Vec<f64> = rows.iter().map(|e| e.lambda.norm() * e.vdual).collect();
        for (e, s) in rows.iter().zip(&scaled) {
            let _ = writeln!(
                csv,
                "{n},{},{},{},{},{},{},{}",
                fmt_num(Some(e.lambda.re)),
                fmt_num(Some(e.lambda.im)),
                fmt_num(Some(e.lambda.norm())),
                fmt_num(Some(e.vdual)),
                fmt_num(Some(*s)),
                fmt_num(Some(e.h1)),
                fmt_num(Some(e.l2))
            );
        }
        art.add("vdual_sweep.csv", csv);
        let max = scaled.iter().copied().fold(0.0, f64::max);
        let min = scaled.iter().copied().fold(f64::INFINITY, f64::min);
        let spread = if min > 0.0 { max / min } else { f64::INFINITY };
        let limit = c.config.assertions.sweep_max_spread;
        let ok = spread < limit;
        pass &= ok;
        let shown: Vec<String> = scaled.iter().map(|v| format!("{v:.4e}")).collect();
        let _ = writeln!(summary, "|lambda|·V' error at n = {n}: [{}], max/min {spread:.3} (limit {limit}): {}", shown.join(", "), verdict(ok));
    }
    Ok((summary, pass))
}

fn evolve(c: &LoadedConfig, art: &mut Artifacts) -> Result<(String, bool)> {
    let datum = c.datum()?;
    let times = c.config.sample_times.clone();
    let oracle = match c.problem() {
        ProblemKind::Hydrostatic => datum.oracle(c.config.depth, times[0])?,
        ProblemKind::Stokes2d => None,
    };
    let mut csv = String::from(CSV_HEADER);
    csv.push('\n');
    let mut traj = String::from("n,m,t,energy,divergence_inf\n");
    let mut summary = format!("evolve: {} / {}\n", c.problem().name(), c.pair().name());
    let mut monotone = true;
    let levels = level_pairs(c);
    for &(n, m) in &levels {
        let sys = build_system(c, n, m)?;
        let dt = c.dt_policy().dt(sys.h(), c.config.t_end)?;
        let states = run_level(&sys, c.scheme(), dt, &datum, c.config.depth, &times)?;
        let mut last = f64::INFINITY;
        for s in &states {
            let e = energy(&sys, &s.u);
            monotone &= e <= last * (1.0 + 1e-12);
            last = e;
            let div = saddlefem::sparse::norm_inf(&sys.b.mul_vec(&s.u));
            let _ = writeln!(traj, "{n},{},{},{},{}", m_cell(c.problem(), m), fmt_num(Some(s.t)), fmt_num(Some(e)), fmt_num(Some(div)));
        }
        if let Some(o) = &oracle {
            let dual = DualNorm::new(&sys)?;
            for s in &states {
                let r = error_norms_oracle(&sys, s, o, &dual, dt)?;
                let _ = write!(
                    csv,
                    "{},{},{n},{},{},{},{}",
                    c.problem().name(),
                    c.pair().name(),
                    m_cell(c.problem(), m),
                    fmt_num(Some(r.h)),
                    fmt_num(Some(r.dt)),
                    fmt_num(Some(r.t))
                );
                for norm in ErrorNorm::ALL {
                    let _ = write!(csv, ",{}", fmt_num(r.get(norm)));
                }
                csv.push_str(",,,,\n");
            }
        }
        let _ = writeln!(summary, "  n = {n:>3}: dt = {dt:.4e}, final energy {last:.6e}");
        if (n, m) == *levels.last().expect("levels") {
            art.add(format!("velocity_n{n}.vtk"), velocity_vtk(&sys, &states.last().expect("sample times").u));
        }
    }
    art.add("trajectory.csv", traj);
    if oracle.is_some() {
        art.add("errors.csv", csv);
    }
    let pass = !c.config.assertions.energy_decay || monotone;
    let _ = writeln!(summary, "  energy non-increasing: {}", verdict(monotone));
    Ok((summary, pass))
}

fn velocity_vtk(sys: &SaddleSystem, u: &[f64]) -> String {
    let field = sys.velocity.expand(u);
    let mesh = &sys.velocity.mesh;
    let values: Vec<[f64; 3]> = mesh
        .vertices
        .iter()
        .map(|p| {
            let v = sys.velocity.eval_at(&field, p).unwrap_or([0.0; 3]);
            [v[0], v[1], 0.0]
        })
        .collect();
    mesh.to_vtk(Some(("velocity", &values)))
}

fn converge(c: &LoadedConfig, art: &mut Artifacts) -> Result<(String, bool)> {
    let a = &c.config.assertions;
    let study = EvolutionStudy {
        problem: c.problem(),
        pair: c.pair(),
        levels: c.config.levels.clone(),
        layers: (c.problem() == ProblemKind::Hydrostatic).then(|| c.layers()),
        depth: c.config.depth,
        scheme: c.scheme(),
        dt: c.dt_policy(),
        t_eval: c.config.t_end,
        datum: c.datum()?,
        targets: c.targets(true),
        dt_control: a.dt_control_max_change.is_some(),
    };
    let report = convergence_study(&study)?;
    art.add("convergence.csv", report.to_csv());
    let mut summary = report.summary_judged(a.finest_pair_only);
    let mut pass = judge(&report, a.finest_pair_only);
    if let Some(limit) = a.dt_control_max_change {
        let change = dt_control_change(&report).unwrap_or(f64::INFINITY);
        let ok = change < limit;
        pass &= ok;
        let _ = writeln!(summary, "  dt control: change {:.3}% (limit {:.1}%): {}", 100.0 * change, 100.0 * limit, verdict(ok));
    }
    if report.notes.iter().any(|n| n.contains("UNDER-RESOLVED")) {
        pass = false;
    }
    Ok((summary, pass))
}

fn singularity(c: &LoadedConfig, art: &mut Artifacts) -> Result<(String, bool)> {
    let &(n, m) = level_pairs(c).last().expect("levels");
    let h = build_mesh(c, n, m)?.h();
    let dt = c.dt_policy().dt(h, c.config.t_end)?;
    let profile = singularity_profile(c.pair(), n, m, c.config.depth, c.scheme(), dt, &c.config.sample_times, &c.datum()?)?;
    art.add("singularity.csv", profile.to_csv());
    art.add("singularity_weighted.csv", profile.weighted_csv());
    let a = &c.config.assertions;
    let mut summary = format!("singularity: {} n = {n}, m = {m}, dt = {dt:.4e}\n", c.pair().name());
    let _ = writeln!(summary, "{:>8} {:>12} {:>12} {:>12} {:>14}", "t", "t·L2", "t·H1", "t·p", "t^1.5·p");
    let cols = [
        profile.weighted(ErrorNorm::VelocityL2, 1.0),
        profile.weighted(ErrorNorm::VelocityH1, 1.0),
        profile.weighted(ErrorNorm::PressureL2, 1.0),
        profile.weighted(ErrorNorm::PressureL2, 1.5),
    ];
    let f = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4e}"));
    for (i, r) in profile.rows.iter().enumerate() {
        let _ = writeln!(summary, "{:>8.4} {:>12} {:>12} {:>12} {:>14}", r.t, f(cols[0][i]), f(cols[1][i]), f(cols[2][i]), f(cols[3][i]));
    }
    let spread = profile.spread(ErrorNorm::VelocityL2, 1.0);
    let spread_ok = spread <= a.singularity_max_spread;
    let slope = profile.small_time_slope(ErrorNorm::PressureL2, 1.5, 3);
    let slope_ok = slope.is_some_and(|s| s >= a.pressure_min_slope);
    let _ = writeln!(summary, "  max/min t·L2 = {spread:.3} (limit {}): {}", a.singularity_max_spread, verdict(spread_ok));
    let _ = writeln!(
        summary,
        "  t^1.5·p slope over the three smallest times = {} (min {}): {}",
        slope.map_or("-".into(), |s| format!("{s:.3}")),
        a.pressure_min_slope,
        verdict(slope_ok)
    );
    let _ = writeln!(summary, "  max/min t·p = {:.3} (reported)", profile.spread(ErrorNorm::PressureL2, 1.0));
    Ok((summary, spread_ok && slope_ok))
}

fn selftest(c: Option<&LoadedConfig>, art: &mut Artifacts) -> Result<(String, bool)> {
    if let Some(c) = c {
        art.add("effective_config.toml", c.effective_toml()?);
    }
    let mut summary = String::from("selftest\n");
    let mut pass = true;
    let mut csv = String::from("check,value,limit,pass\n");
    let mut record = |name: &str, value: f64, limit: f64, summary: &mut String| {
        let ok = value <= limit;
        let _ = writeln!(csv, "{name},{},{},{ok}", fmt_num(Some(value)), fmt_num(Some(limit)));
        let _ = writeln!(summary, "  {name:<40} {value:.3e} (limit {limit:.0e}): {}", verdict(ok));
        ok
    };
    let oracles = [
        ("oracle smooth modes", oracle_of(&crate::config::default_modes(), 1.0)?),
        ("oracle checkerboard", OracleSolution::checkerboard(1.0, 7, 16)?.pruned(0.02, 1e-16)),
    ];
    for (name, o) in &oracles {
        let r = o.selfcheck(&[0.02, 0.1, 0.25], 16);
        pass &= record(&format!("{name} residual"), r.max(), 1e-7, &mut summary);
    }
    let systems = [
        (SaddleSystem::stokes_2d(4, ElementPair::Mini)?, Datum::Vortex),
        (SaddleSystem::stokes_2d(4, ElementPair::TaylorHood)?, Datum::Vortex),
        (SaddleSystem::hydrostatic(2, 2, 1.0, ElementPair::Mini)?, Datum::Modes(oracles[0].1.clone())),
        (SaddleSystem::hydrostatic(2, 2, 1.0, ElementPair::TaylorHood)?, Datum::Modes(oracles[0].1.clone())),
    ];
    for (sys, datum) in &systems {
        let inv = structural_invariants(sys, datum, 1.0, 5, 0.01)?;
        let tag = format!("{}/{}", sys.kind.name(), sys.pair.name());
        pass &= record(&format!("{tag} spd failures"), if inv.spd_ok() { 0.0 } else { 1.0 }, 0.0, &mut summary);
        pass &= record(&format!("{tag} A·1"), inv.constant_kernel, 1e-12, &mut summary);
        pass &= record(&format!("{tag} divergence"), inv.max_divergence, 1e-9, &mut summary);
        pass &= record(&format!("{tag} pressure mean"), inv.max_pressure_mean, 1e-12, &mut summary);
        pass &= record(&format!("{tag} energy increase"), if inv.energy_monotone() { 0.0 } else { 1.0 }, 0.0, &mut summary);
        if let Some(f) = inv.fubini {
            pass &= record(&format!("{tag} B volume vs surface"), f, 1e-12, &mut summary);
        }
    }
    art.add("selftest.csv", csv);
    Ok((summary, pass))
}
