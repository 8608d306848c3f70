//! One function per command. Each emits its data files and returns a JSON summary with
//! an optional pass/fail verdict.

use std::fmt::Write as _;

use rdslab::admissible::{
    filtered_pipeline, good_convolution, make_admissible, AdmissibleMeasure, CurveMeasureAtom, PipelineConfig, WordSet,
};
use rdslab::cocycle::{angle_tail, certify_uef, certify_uep, moment_decay, CertifyConfig, MomentConfig, WordAverage};
use rdslab::curves::{et, make_curve, nct, Curve};
use rdslab::dynamics::{c2_markov, Constants, System, Word};
use rdslab::lab::{
    cesaro, equidistribution, ly_trace, orbit_classify, replicated, segment_lattice, stationary_residual_grid,
    OrbitClass, TraceSeed,
};
use rdslab::linalg::Vec2;
use rdslab::rng::{derive_seed, stream_rng};
use rdslab::seminorm::{ac_diagnostic, rho_norm, GridDensity, PointCloudMeasure, ZGrid};
use rdslab::tails::binom_tail_bounds;
use rdslab::torus::{wrap, TorusPoint};
use serde_json::{json, Value};

use crate::config::{
    CloudSpec, CurveConfig, InitialSpec, LoadedConfig, MeasureSpec, ReferenceSpec, TraceInitial, WordMode,
};
use crate::manifest::Emitter;

/// Why a command stopped.
#[derive(Debug)]
pub enum CommandError {
    Config(String),
    Numerical(String),
    Io(std::io::Error),
}

impl From<rdslab::Error> for CommandError {
    fn from(e: rdslab::Error) -> Self {
        use rdslab::Error as E;
        match e {
            E::Constants(_) => CommandError::Config(format!("{e}; pass --override to run anyway")),
            E::InvalidInput(_) | E::EnumerationCap { .. } | E::Declined(_) => CommandError::Config(e.to_string()),
            _ => CommandError::Numerical(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CommandError {
    fn from(e: std::io::Error) -> Self {
        CommandError::Io(e)
    }
}

pub type CommandResult = Result<Outcome, CommandError>;

pub struct Outcome {
    pub result: Value,
    /// `None` where the command defines no pass/fail.
    pub verdict: Option<bool>,
}

/// Every command name, in help order.
pub const COMMANDS: [&str; 15] = [
    "certify-uef",
    "certify-uep",
    "moments",
    "angle-stats",
    "push-curve",
    "nct-et",
    "seminorm",
    "ac-diagnostic",
    "good-conv",
    "pipeline",
    "ly-trace",
    "cesaro",
    "equidistribute",
    "orbit",
    "tails",
];

/// Config path that `--N` sets for each command.
pub fn n_path(command: &str) -> Option<&'static str> {
    Some(match command {
        "certify-uef" | "certify-uep" => "certify.n",
        "moments" => "moments.n_max",
        "angle-stats" => "angle_stats.n",
        "push-curve" => "push_curve.word_length",
        "nct-et" => "nct_et.word_length",
        "good-conv" => "good_conv.n",
        "pipeline" => "pipeline.m",
        "ly-trace" => "ly_trace.m",
        "cesaro" => "cesaro.n",
        "orbit" => "orbit.depth",
        "tails" => "tails.n_max",
        _ => return None,
    })
}

pub fn run_command(command: &str, cfg: &LoadedConfig, sys: &System, out: &mut Emitter) -> CommandResult {
    match command {
        "certify-uef" => certify(cfg, sys, out, false),
        "certify-uep" => certify(cfg, sys, out, true),
        "moments" => moments(cfg, sys, out),
        "angle-stats" => angle_stats(cfg, sys, out),
        "push-curve" => push_curve(cfg, sys, out),
        "nct-et" => nct_et(cfg, sys, out),
        "seminorm" => seminorm(cfg, out),
        "ac-diagnostic" => ac(cfg, out),
        "good-conv" => good_conv(cfg, sys, out),
        "pipeline" => pipeline(cfg, sys, out),
        "ly-trace" => trace(cfg, sys, out),
        "cesaro" => cesaro_cmd(cfg, sys, out),
        "equidistribute" => equidistribute(cfg, sys, out),
        "orbit" => orbit(cfg, sys, out),
        "tails" => tails(cfg, out),
        other => Err(CommandError::Config(format!("unknown command {other}"))),
    }
}

fn point(x: [f64; 2]) -> Result<TorusPoint, CommandError> {
    Ok(wrap(x[0], x[1])?)
}

fn to_value<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("report serializes")
}

fn check_constants(
    cfg: &LoadedConfig,
    violations: Vec<rdslab::dynamics::Violation>,
) -> Result<Vec<String>, CommandError> {
    let details: Vec<String> = violations.iter().map(|v| format!("{}: {}", v.group, v.detail)).collect();
    if !details.is_empty() && !cfg.config.override_constants {
        return Err(CommandError::Config(format!(
            "constants violate invariants ({}); pass --override to run anyway",
            details.join("; ")
        )));
    }
    Ok(details)
}

fn build_curve(c: &CurveConfig) -> Result<Curve, CommandError> {
    Ok(make_curve(c.spec, c.length, point(c.start)?, c.h_max)?)
}

fn build_initial(spec: &InitialSpec) -> Result<AdmissibleMeasure, CommandError> {
    Ok(match spec {
        InitialSpec::Curve { curve } => make_admissible(vec![CurveMeasureAtom::uniform(build_curve(curve)?, 1.0)?]),
        InitialSpec::Lattice { side, length, angle, h_max } => segment_lattice(*side, *length, *angle, *h_max)?,
    })
}

fn read_grid(cfg: &LoadedConfig, path: &str) -> Result<GridDensity, CommandError> {
    let p = cfg.resolve(path);
    let bytes = std::fs::read(&p).map_err(|e| CommandError::Config(format!("{}: {e}", p.display())))?;
    Ok(GridDensity::from_bytes(&bytes)?)
}

fn build_measure(cfg: &LoadedConfig, spec: &MeasureSpec, stream: u64) -> Result<PointCloudMeasure, CommandError> {
    let mut rng = stream_rng(cfg.config.seed, stream);
    Ok(match spec {
        MeasureSpec::Uniform { count } => PointCloudMeasure::uniform(*count, &mut rng),
        MeasureSpec::Jittered { side } => PointCloudMeasure::uniform_jittered(*side, &mut rng),
        MeasureSpec::Dirac { x } => PointCloudMeasure::dirac(point(*x)?),
        MeasureSpec::Circle { y0, count } => PointCloudMeasure::horizontal_circle(*y0, *count),
        MeasureSpec::Grid { path } => read_grid(cfg, path)?.to_cloud(),
        MeasureSpec::Curve { curve, samples_per_unit_length } => {
            let atom = CurveMeasureAtom::uniform(build_curve(curve)?, 1.0)?;
            make_admissible(vec![atom]).project(*samples_per_unit_length)?
        }
    })
}

fn seeded(words: WordSet, seed: u64) -> WordSet {
    match words {
        WordSet::Auto { cap, samples, .. } => WordSet::Auto { cap, samples, seed },
        WordSet::Sampled { samples, .. } => WordSet::Sampled { samples, seed },
        WordSet::Exact => WordSet::Exact,
    }
}

fn certify(cfg: &LoadedConfig, sys: &System, out: &mut Emitter, past: bool) -> CommandResult {
    let s = &cfg.config.certify;
    let seed = cfg.config.seed;
    let average = match s.words {
        WordMode::Auto => WordAverage::Auto { cap: s.cap, samples: s.samples, seed },
        WordMode::Exact => WordAverage::Exact,
        WordMode::MonteCarlo => WordAverage::MonteCarlo { samples: s.samples, seed },
    };
    let cc = CertifyConfig { n: s.n, x_grid: s.x_grid, v_grid: s.v_grid, cone: s.cone, average };
    let report = if past { certify_uep(sys, &cc)? } else { certify_uef(sys, &cc)? };
    let mut csv = String::from("x_index,v_index,value\n");
    for (i, j, v) in &report.table {
        writeln!(csv, "{i},{j},{v}").expect("string write");
    }
    out.emit(if past { "certify_uep.csv" } else { "certify_uef.csv" }, csv.as_bytes())?;
    Ok(Outcome { verdict: Some(report.pass), result: to_value(&report) })
}

fn moments(cfg: &LoadedConfig, sys: &System, out: &mut Emitter) -> CommandResult {
    let s = &cfg.config.moments;
    let mc = MomentConfig { delta: s.delta, n_max: s.n_max, samples: s.samples, seed: cfg.config.seed, past: s.past };
    let series = moment_decay(sys, &mc, &point(s.x)?, Vec2::from_angle(s.v_angle))?;
    let chi_bar = cfg.config.constants.chi_bar;
    let mut csv = String::from("n,s,std_err,markov_tail,markov_bound\n");
    let mut markov_holds = true;
    for n in 1..=series.s.len() {
        let mt = series.markov_tail(n, c2_markov(), chi_bar);
        markov_holds &= mt.holds;
        writeln!(csv, "{n},{},{},{},{}", series.s[n - 1], series.std_err[n - 1], mt.tail, mt.markov_bound)
            .expect("string write");
    }
    out.emit("moments.csv", csv.as_bytes())?;
    let pass = series.chi_hat > 0.0 && series.chi_ci.is_some_and(|(lo, _)| lo > 0.0);
    let result = json!({
        "series": to_value(&series),
        "markov_holds": markov_holds,
        "bound_violations": series.bound_violations(c2_markov(), series.chi_hat),
    });
    Ok(Outcome { result, verdict: Some(pass) })
}

fn angle_stats(cfg: &LoadedConfig, sys: &System, out: &mut Emitter) -> CommandResult {
    let s = &cfg.config.angle_stats;
    let tail = angle_tail(sys, s.n, &point(s.x)?, Vec2::from_angle(s.v_angle), s.mode, s.samples, cfg.config.seed)?;
    let mut csv = String::from("eta,prob\n");
    for (e, p) in tail.etas.iter().zip(&tail.probs) {
        writeln!(csv, "{e},{p}").expect("string write");
    }
    out.emit("angle_tail.csv", csv.as_bytes())?;
    let pass = tail.reliable && tail.beta_ci.is_some_and(|(lo, _)| lo > 0.0);
    Ok(Outcome { result: to_value(&tail), verdict: Some(pass) })
}

fn sample_or_given(sys: &System, given: &Option<Vec<usize>>, length: usize, seed: u64) -> Result<Word, CommandError> {
    match given {
        Some(w) => {
            if let Some(bad) = w.iter().find(|&&i| i >= sys.table.len()) {
                return Err(CommandError::Config(format!("word letter {bad} is not in the diffeo table")));
            }
            Ok(Word::new(w.clone()))
        }
        None => Ok(sys.measure.sample_word(length, &mut stream_rng(seed, 0))),
    }
}

fn push_curve(cfg: &LoadedConfig, sys: &System, out: &mut Emitter) -> CommandResult {
    let s = &cfg.config.push_curve;
    let word = sample_or_given(sys, &s.word, s.word_length, cfg.config.seed)?;
    let curve = build_curve(&s.curve)?;
    let pushed = curve.push_word(&sys.table, &word.indices);
    out.emit("curve.csv", pushed.to_csv().as_bytes())?;
    let result = json!({
        "word": word.indices,
        "initial_length": curve.length(),
        "length": pushed.length(),
        "max_abs_curvature": pushed.max_abs_curvature(),
        "nodes": pushed.nodes().len(),
        "warnings": pushed.warnings(),
    });
    Ok(Outcome { result, verdict: None })
}

fn nct_et(cfg: &LoadedConfig, sys: &System, out: &mut Emitter) -> CommandResult {
    let s = &cfg.config.nct_et;
    let k = &cfg.config.constants;
    let overridden = check_constants(cfg, k.check_rates())?;
    if k.p0 == 0 || !s.word_length.is_multiple_of(k.p0) {
        return Err(CommandError::Config(format!(
            "field nct_et.word_length: {} is not a multiple of p0 = {}",
            s.word_length, k.p0
        )));
    }
    let curve = build_curve(&s.curve)?;
    let mut csv = String::from("word_index,nct_pass,et_pass,nct_violations,et_violations\n");
    let (mut nct_ok, mut et_ok) = (0usize, 0usize);
    for i in 0..s.samples {
        let word = sys.measure.sample_word(s.word_length, &mut stream_rng(cfg.config.seed, i as u64));
        let a = nct(&sys.table, &word, &curve, k.p0, k.eta, k.c0, k.eps0)?;
        let b = et(&sys.table, &word, &curve, k.p0, k.c, k.eta)?;
        nct_ok += a.pass as usize;
        et_ok += b.pass as usize;
        let count = |v: &[bool]| v.iter().filter(|&&x| x).count();
        writeln!(csv, "{i},{},{},{},{}", a.pass, b.pass, count(&a.violations), count(&b.violations))
            .expect("string write");
    }
    out.emit("nct_et.csv", csv.as_bytes())?;
    let n = s.samples.max(1) as f64;
    let result = json!({
        "samples": s.samples,
        "nct_fraction": nct_ok as f64 / n,
        "et_fraction": et_ok as f64 / n,
        "constants_overridden": overridden,
    });
    Ok(Outcome { result, verdict: None })
}

fn seminorm(cfg: &LoadedConfig, out: &mut Emitter) -> CommandResult {
    let s = &cfg.config.seminorm;
    let cloud = build_measure(cfg, &s.measure, 0)?;
    let mut csv = String::from("rho,norm\n");
    let mut norms = Vec::new();
    for &rho in &s.rhos {
        let norm = rho_norm(&cloud, rho, ZGrid::for_radius(rho, s.refine))?;
        writeln!(csv, "{rho},{norm}").expect("string write");
        norms.push(json!({"rho": rho, "norm": norm}));
    }
    out.emit("seminorm.csv", csv.as_bytes())?;
    let result = json!({"mass": cloud.mass(), "points": cloud.len(), "norms": norms});
    Ok(Outcome { result, verdict: None })
}

fn ac(cfg: &LoadedConfig, out: &mut Emitter) -> CommandResult {
    let s = &cfg.config.ac_diagnostic;
    let clouds =
        s.measures.iter().enumerate().map(|(i, m)| build_measure(cfg, m, i as u64)).collect::<Result<Vec<_>, _>>()?;
    let report = ac_diagnostic(&clouds, s.rho0, s.levels, s.refine)?;
    out.emit("ac_trace.csv", report.trace_csv().as_bytes())?;
    Ok(Outcome { result: to_value(&report), verdict: None })
}

fn good_conv(cfg: &LoadedConfig, sys: &System, out: &mut Emitter) -> CommandResult {
    let s = &cfg.config.good_conv;
    let k = &cfg.config.constants;
    let overridden = check_constants(cfg, k.check_rates())?;
    let nu = build_initial(&s.initial)?;
    let g = good_convolution(sys, &nu, s.n, k.eta, s.cut, k, seeded(s.words, cfg.config.seed), s.nc_grid)?;
    let (good, bad) = (g.good.summary(), g.bad.summary());
    let mut csv = String::from("class,mass,atoms,K,L\n");
    for (name, sm) in [("good", &good), ("bad", &bad)] {
        writeln!(csv, "{name},{},{},{},{}", sm.mass, sm.atoms, sm.k, sm.l).expect("string write");
    }
    out.emit("good_conv.csv", csv.as_bytes())?;
    let result = json!({
        "input_mass": nu.mass(),
        "good_mass": g.good_mass,
        "bad_mass": g.bad_mass,
        "good": to_value(&good),
        "bad": to_value(&bad),
        "exact": g.exact,
        "words": g.words,
        "constants_overridden": overridden,
    });
    Ok(Outcome { result, verdict: None })
}

fn pipeline_config(
    cfg: &LoadedConfig,
    m: usize,
    d: usize,
    budget: usize,
    words: WordSet,
    nc_grid: usize,
) -> PipelineConfig {
    let k = &cfg.config.constants;
    let mut pc = PipelineConfig::new(k.p0, m, k.eta);
    pc.d = d;
    pc.budget = budget;
    pc.words = seeded(words, cfg.config.seed);
    pc.nc_grid = nc_grid;
    pc.seed = cfg.config.seed;
    pc.override_constants = cfg.config.override_constants;
    pc
}

fn pipeline(cfg: &LoadedConfig, sys: &System, out: &mut Emitter) -> CommandResult {
    let s = &cfg.config.pipeline;
    let k: &Constants = &cfg.config.constants;
    let overridden = check_constants(cfg, k.check_rates())?;
    let nu = build_initial(&s.initial)?;
    let pc = pipeline_config(cfg, s.m, s.d, s.budget, s.words, s.nc_grid);
    let r = filtered_pipeline(sys, &nu, k, &pc)?;
    out.emit("ledger.csv", r.ledger_csv().as_bytes())?;
    let pass = r.retained_mass >= (1.0 - k.c) * r.total_mass;
    let result = json!({
        "total_mass": r.total_mass,
        "retained_mass": r.retained_mass,
        "discarded_mass": r.discarded_mass,
        "ledger_gap": r.ledger_gap(),
        "retention_threshold": (1.0 - k.c) * r.total_mass,
        "measure": to_value(&r.measure.summary()),
        "cut_lengths": r.cut_lengths,
        "exact": r.exact,
        "warnings": r.warnings,
        "constants_overridden": overridden,
    });
    Ok(Outcome { result, verdict: Some(pass) })
}

fn trace(cfg: &LoadedConfig, sys: &System, out: &mut Emitter) -> CommandResult {
    let s = &cfg.config.ly_trace;
    let k = &cfg.config.constants;
    let overridden = check_constants(cfg, k.check_rates())?;
    let seed = match &s.initial {
        TraceInitial::Admissible { initial } => TraceSeed::Admissible(build_initial(initial)?),
        TraceInitial::Dirac { x, replicas } => TraceSeed::Dirac { point: point(*x)?, replicas: *replicas },
    };
    let pc = pipeline_config(cfg, s.m, s.d, s.budget, s.words, s.nc_grid);
    let report = ly_trace(sys, &seed, k, &pc, s.refine)?;
    out.emit("ly_trace.csv", report.to_csv().as_bytes())?;
    let mut result = to_value(&report);
    result["constants_overridden"] = json!(overridden);
    Ok(Outcome { verdict: report.bounded, result })
}

fn cesaro_cmd(cfg: &LoadedConfig, sys: &System, out: &mut Emitter) -> CommandResult {
    let s = &cfg.config.cesaro;
    let seed = cfg.config.seed;
    let cloud = match &s.initial {
        CloudSpec::Uniform { count } => PointCloudMeasure::uniform(*count, &mut stream_rng(seed, 0)),
        CloudSpec::Jittered { side } => PointCloudMeasure::uniform_jittered(*side, &mut stream_rng(seed, 0)),
        CloudSpec::Dirac { x, replicas } => replicated(point(*x)?, *replicas)?,
    };
    let averages = cesaro(sys, &cloud, s.n, s.grid, derive_seed(seed, 1))?;
    let uniform = GridDensity::uniform(s.grid, s.grid).scaled_to(cloud.mass());
    let mut csv = String::from("k,mass,tv_to_uniform\n");
    for (i, g) in averages.iter().enumerate() {
        writeln!(csv, "{},{},{}", i + 1, g.total(), g.tv_distance(&uniform)?).expect("string write");
    }
    out.emit("cesaro.csv", csv.as_bytes())?;
    let last = averages.last().expect("n >= 1");
    out.emit("cesaro.rdsgrid", &last.to_bytes())?;
    let residual = stationary_residual_grid(sys, last, s.residual_sub)?;
    let result = json!({
        "n": s.n,
        "grid": s.grid,
        "mass": last.total(),
        "input_mass": cloud.mass(),
        "stationary_residual": residual,
    });
    Ok(Outcome { result, verdict: None })
}

fn equidistribute(cfg: &LoadedConfig, sys: &System, out: &mut Emitter) -> CommandResult {
    let s = &cfg.config.equidistribute;
    let reference = match &s.reference {
        ReferenceSpec::Lebesgue => GridDensity::uniform(s.grid, s.grid),
        ReferenceSpec::Grid { path } => {
            let g = read_grid(cfg, path)?;
            if g.nx() != s.grid || g.ny() != s.grid {
                return Err(CommandError::Config(format!(
                    "field equidistribute.reference: grid is {}x{}, expected {}x{}",
                    g.nx(),
                    g.ny(),
                    s.grid,
                    s.grid
                )));
            }
            g.scaled_to(1.0)
        }
    };
    let trace = equidistribution(sys, point(s.x)?, &s.checkpoints, &reference, s.replicas, cfg.config.seed)?;
    out.emit("equidistribution.csv", trace.to_csv().as_bytes())?;
    Ok(Outcome { result: to_value(&trace), verdict: None })
}

fn orbit(cfg: &LoadedConfig, sys: &System, out: &mut Emitter) -> CommandResult {
    let s = &cfg.config.orbit;
    let report = orbit_classify(&sys.table, point(s.x)?, s.depth, s.epsilon)?;
    if let OrbitClass::Finite { points, .. } = &report.class {
        let mut csv = String::from("x,y\n");
        for p in points {
            writeln!(csv, "{},{}", p.x(), p.y()).expect("string write");
        }
        out.emit("orbit_points.csv", csv.as_bytes())?;
    }
    Ok(Outcome { result: to_value(&report), verdict: None })
}

fn tails(cfg: &LoadedConfig, out: &mut Emitter) -> CommandResult {
    let s = &cfg.config.tails;
    let mut csv = String::from("n,eta,a,lower_sum,lower_bound,upper_sum,upper_bound,pass\n");
    let (mut checked, mut failures) = (0usize, 0usize);
    for n in s.n_min..=s.n_max {
        for &eta in &s.etas {
            for &a in &s.a_values {
                let r = binom_tail_bounds(n, eta, a, s.b)?;
                checked += 1;
                failures += !r.pass as usize;
                writeln!(
                    csv,
                    "{n},{eta},{a},{},{},{},{},{}",
                    r.lower_sum, r.lower_bound, r.upper_sum, r.upper_bound, r.pass
                )
                .expect("string write");
            }
        }
    }
    out.emit("tails.csv", csv.as_bytes())?;
    Ok(Outcome { result: json!({"checked": checked, "failures": failures}), verdict: Some(failures == 0) })
}
