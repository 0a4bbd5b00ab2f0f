//! Command implementations behind the `clfstab` binary: argument/config
//! handling, spec-string parsing, artifact writers, and the exit-code
//! contract.
//!
//! Exit codes: 0 success, 2 validation/config error, 3 simulation error
//! (escape or non-finite state), 4 check failures under `--strict`. Errors
//! are also emitted on stderr as one JSON object `{"kind", "message"}`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::Args;
use serde::{Deserialize, Serialize};

use crate::clf::{
    pointwise_min_feedback, universal_formula_feedback, verify_clf_on_region, FeedbackLaw, Region,
    SmoothClf,
};
use crate::comparison::KFunction;
use crate::error::{Error, Result};
use crate::iss::{asymptotic_gain_probe, Dissipation, InputSignal, LyapunovCandidate};
use crate::nonsmooth::{
    artstein_clf, artstein_clf_formal, envelope_decrease_check, proximal_feedback, ContinuousClf,
    MoreauEnvelope,
};
use crate::obstructions::{
    brockett_driftless_test, brockett_linear_test, onto_neighborhood_probe, BrockettVerdict,
    VerdictStatus,
};
use crate::sim::{
    constants_for, robust_stabilization_experiment, simulate_classical, simulate_pi_trajectory,
    ConstantsCfg, DiagClf, ExperimentSpec, IntegratorCfg, LipschitzMode, NamedPerturbation,
    PerturbationSpec, PiTrajectory, SamplingSchedule, ScheduleSpec, Signal, SimOptions,
};
use crate::systems::{zoo_build, zoo_describe, ControlSet, ControlSystem, Trajectory, ZOO_NAMES};
use crate::vecn::{self, fmt_f64};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_SIMULATION: i32 = 3;
pub const EXIT_CHECK_FAILED: i32 = 4;

pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::NonFiniteState { .. } | Error::NonConvergence(_) => EXIT_SIMULATION,
        _ => EXIT_VALIDATION,
    }
}

/// Versioned configuration file: `{"schema": 1, "command": "...",
/// "args": {...}}`. Values act as defaults; command-line flags override.
#[derive(Debug, Serialize, Deserialize)]
pub struct ConfigFile {
    pub schema: u32,
    pub command: String,
    pub args: serde_json::Value,
}

pub fn load_config(path: &Path, command: &str) -> Result<serde_json::Value> {
    let text = fs::read_to_string(path)?;
    let cfg: ConfigFile =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("bad config file: {e}")))?;
    if cfg.schema != 1 {
        return Err(Error::Config(format!(
            "unsupported config schema {} (expected 1)",
            cfg.schema
        )));
    }
    if cfg.command != command {
        return Err(Error::Config(format!(
            "config is for command `{}`, invoked `{command}`",
            cfg.command
        )));
    }
    Ok(cfg.args)
}

/// Merge rule: CLI value wins when set, else config value, else the
/// command's own default.
pub fn merge_args<T: Args + Serialize + for<'a> Deserialize<'a>>(
    cli: &T,
    config: Option<serde_json::Value>,
) -> Result<T> {
    match config {
        None => Ok(serde_json::from_value(serde_json::to_value(cli)?)?),
        Some(cfg) => {
            let mut base = cfg;
            let cli_v = serde_json::to_value(cli)?;
            if let (Some(base_map), Some(cli_map)) = (base.as_object_mut(), cli_v.as_object()) {
                for (k, v) in cli_map {
                    if !v.is_null() {
                        base_map.insert(k.clone(), v.clone());
                    }
                }
            }
            Ok(serde_json::from_value(base)?)
        }
    }
}

// ----- spec-string parsing ------------------------------------------------

pub fn parse_f64_list(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad number `{p}`")))
        })
        .collect()
}

pub fn parse_system(name: &str, params: &[String]) -> Result<ControlSystem> {
    let mut map = BTreeMap::new();
    for p in params {
        let (k, v) = p
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("bad --param `{p}` (want key=value)")))?;
        map.insert(
            k.trim().to_string(),
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad value in `{p}`")))?,
        );
    }
    zoo_build(name, &map)
}

/// `uniform:h` or `jitter:h:fraction:seed`.
pub fn parse_schedule(spec: &str, horizon: f64) -> Result<SamplingSchedule> {
    let parts: Vec<&str> = spec.split(':').collect();
    match parts.as_slice() {
        ["uniform", h] => SamplingSchedule::uniform(parse_one(h)?, horizon),
        ["jitter", h, j, seed] => SamplingSchedule::jittered(
            parse_one(h)?,
            parse_one(j)?,
            seed.parse::<u64>()
                .map_err(|_| Error::Config(format!("bad seed `{seed}`")))?,
            horizon,
        ),
        _ => Err(Error::Config(format!(
            "bad schedule `{spec}` (want uniform:h or jitter:h:j:seed)"
        ))),
    }
}

fn parse_one(s: &str) -> Result<f64> {
    s.parse::<f64>()
        .map_err(|_| Error::Config(format!("bad number `{s}`")))
}

/// `zero`, `const:v1,v2`, `sin:amp1,amp2:omega:phase`,
/// `pwc:seed:dwell:amp1,amp2`, `radial:magnitude`.
pub fn parse_signal(spec: &str, dim: usize) -> Result<Signal> {
    let parts: Vec<&str> = spec.split(':').collect();
    let sig = match parts.as_slice() {
        ["zero"] => Signal::Zero,
        ["const", vals] => Signal::Constant {
            value: parse_f64_list(vals)?,
        },
        ["sin", amps, omega, phase] => Signal::Sinusoid {
            amp: parse_f64_list(amps)?,
            omega: parse_one(omega)?,
            phase: parse_one(phase)?,
        },
        ["pwc", seed, dwell, amps] => Signal::PiecewiseConstant {
            seed: seed
                .parse::<u64>()
                .map_err(|_| Error::Config(format!("bad seed `{seed}`")))?,
            dwell: parse_one(dwell)?,
            amp: parse_f64_list(amps)?,
        },
        ["radial", mag] => Signal::RadialOutward {
            magnitude: parse_one(mag)?,
        },
        _ => return Err(Error::Config(format!("bad signal `{spec}`"))),
    };
    let ok = match &sig {
        Signal::Constant { value } => value.len() == dim,
        Signal::Sinusoid { amp, .. } => amp.len() == dim,
        Signal::PiecewiseConstant { amp, .. } => amp.len() == dim,
        _ => true,
    };
    if !ok {
        return Err(Error::Config(format!(
            "signal `{spec}` has the wrong dimension (want {dim})"
        )));
    }
    Ok(sig)
}

/// JSON description of a CLF, loadable from a file.
#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClfFileSpec {
    Artstein,
    Norm,
    Quadratic {
        c: f64,
    },
    QuadraticForm {
        q: Vec<Vec<f64>>,
        sandwich: [(f64, f64); 2],
        #[serde(default)]
        rate_scale: Option<f64>,
    },
}

pub enum ClfChoice {
    Smooth(SmoothClf),
    Continuous(ContinuousClf),
}

/// `artstein`, `norm`, `quadratic`, `quadratic:<c>`, or `file:<path>` with a
/// `ClfFileSpec` JSON body.
pub fn parse_clf(spec: &str, dim: usize) -> Result<ClfChoice> {
    if let Some(path) = spec.strip_prefix("file:") {
        let text = fs::read_to_string(path)?;
        let file: ClfFileSpec = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("bad CLF file `{path}`: {e}")))?;
        return clf_from_file(file, dim);
    }
    match spec.split(':').collect::<Vec<_>>().as_slice() {
        ["artstein"] => {
            if dim != 2 {
                return Err(Error::Config("the artstein CLF is two-dimensional".into()));
            }
            Ok(ClfChoice::Continuous(artstein_clf()))
        }
        ["norm"] => Ok(ClfChoice::Continuous(ContinuousClf::norm_clf(dim))),
        ["quadratic"] => Ok(ClfChoice::Smooth(SmoothClf::quadratic(dim, 0.5))),
        ["quadratic", c] => Ok(ClfChoice::Smooth(SmoothClf::quadratic(dim, parse_one(c)?))),
        _ => Err(Error::Config(format!("unknown CLF `{spec}`"))),
    }
}

fn clf_from_file(file: ClfFileSpec, dim: usize) -> Result<ClfChoice> {
    match file {
        ClfFileSpec::Artstein => {
            if dim != 2 {
                return Err(Error::Config("the artstein CLF is two-dimensional".into()));
            }
            Ok(ClfChoice::Continuous(artstein_clf()))
        }
        ClfFileSpec::Norm => Ok(ClfChoice::Continuous(ContinuousClf::norm_clf(dim))),
        ClfFileSpec::Quadratic { c } => Ok(ClfChoice::Smooth(SmoothClf::quadratic(dim, c))),
        ClfFileSpec::QuadraticForm {
            q,
            sandwich,
            rate_scale,
        } => {
            if q.len() != dim || q.iter().any(|r| r.len() != dim) {
                return Err(Error::Config("quadratic form has the wrong dimension".into()));
            }
            let lo = KFunction::power(sandwich[0].0, sandwich[0].1)?;
            let hi = KFunction::power(sandwich[1].0, sandwich[1].1)?;
            let mut clf = SmoothClf::quadratic_form(q, (lo, hi));
            if let Some(c) = rate_scale {
                clf = clf.with_rate(Arc::new(move |x: &[f64]| c * vecn::dot(x, x)));
            }
            Ok(ClfChoice::Smooth(clf))
        }
    }
}

/// The smooth view used by gradient-based verification: for `artstein` this
/// is the formal-gradient extension (sign(0) = 0 on the kink line).
pub fn parse_clf_smooth(spec: &str, dim: usize) -> Result<SmoothClf> {
    if spec == "artstein" {
        if dim != 2 {
            return Err(Error::Config("the artstein CLF is two-dimensional".into()));
        }
        return Ok(artstein_clf_formal());
    }
    match parse_clf(spec, dim)? {
        ClfChoice::Smooth(c) => Ok(c),
        ClfChoice::Continuous(_) => Err(Error::Config(format!(
            "CLF `{spec}` has no gradient; use the proximal route instead"
        ))),
    }
}

fn parse_clf_continuous(spec: &str, dim: usize) -> Result<ContinuousClf> {
    match parse_clf(spec, dim)? {
        ClfChoice::Continuous(c) => Ok(c),
        ClfChoice::Smooth(_) => Err(Error::Config(format!(
            "CLF `{spec}` is smooth; the proximal route expects a continuous CLF \
             (artstein or norm)"
        ))),
    }
}

/// `zero`, `paper` (catalog laws for cubic-1d and rigid-body-reduced),
/// `universal:<clf>`, `pointwise:<clf>`, `proximal:<clf>:<alpha>`, or
/// `file:<path>` with `{"kind":"linear","gain":[[...]]}` meaning
/// `u = -gain x`.
pub fn parse_feedback(spec: &str, sys: &ControlSystem, u0: &ControlSet) -> Result<FeedbackLaw> {
    if let Some(path) = spec.strip_prefix("file:") {
        #[derive(Deserialize)]
        #[serde(tag = "kind", rename_all = "snake_case")]
        enum FeedbackFile {
            Linear { gain: Vec<Vec<f64>> },
        }
        let text = fs::read_to_string(path)?;
        let file: FeedbackFile = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("bad feedback file `{path}`: {e}")))?;
        let FeedbackFile::Linear { gain } = file;
        if gain.len() != sys.control_dim || gain.iter().any(|r| r.len() != sys.state_dim) {
            return Err(Error::Config("linear gain has the wrong shape".into()));
        }
        return Ok(FeedbackLaw::smooth(
            sys.state_dim,
            sys.control_dim,
            move |x, u| {
                for (j, row) in gain.iter().enumerate() {
                    u[j] = -vecn::dot(row, x);
                }
            },
        ));
    }
    // method first; the CLF spec that follows may itself contain colons
    // (quadratic:<c>, file:<path>), and proximal carries a trailing alpha
    match spec.split_once(':') {
        None if spec == "zero" => Ok(FeedbackLaw::zero(sys.state_dim, sys.control_dim)),
        None if spec == "paper" => paper_feedback(sys),
        Some(("universal", clf)) => {
            let clf = parse_clf_smooth(clf, sys.state_dim)?;
            universal_formula_feedback(&clf, sys)
        }
        Some(("pointwise", clf)) => {
            let clf = parse_clf_smooth(clf, sys.state_dim)?;
            Ok(pointwise_min_feedback(&clf, sys, u0))
        }
        Some(("proximal", rest)) => {
            let (clf, alpha) = rest
                .rsplit_once(':')
                .ok_or_else(|| Error::Config("want proximal:<clf>:<alpha>".into()))?;
            let clf = parse_clf_continuous(clf, sys.state_dim)?;
            let env = Arc::new(MoreauEnvelope::new(clf, parse_one(alpha)?)?);
            Ok(proximal_feedback(env, sys, u0))
        }
        _ => Err(Error::Config(format!("unknown feedback `{spec}`"))),
    }
}

/// Stabilizing laws quoted for specific catalog systems.
fn paper_feedback(sys: &ControlSystem) -> Result<FeedbackLaw> {
    match sys.name.as_str() {
        "cubic-1d" => Ok(FeedbackLaw::smooth(1, 1, |x, u| {
            u[0] = -(2.0 * x[0]).cbrt();
        })),
        "rigid-body-reduced" => Ok(FeedbackLaw::smooth(3, 2, |x, u| {
            u[0] = -x[0] - x[1] - x[1] * x[2];
            u[1] = -x[2] + x[0] * x[0] + 2.0 * x[0] * x[1] * x[2];
        })),
        other => Err(Error::Config(format!(
            "no catalog feedback for system `{other}`"
        ))),
    }
}

// ----- artifact writers ---------------------------------------------------

/// CSV schema: `t,x1..xn,u1..um[,V,Valpha],is_sample`, LF endings, 17
/// significant digits. Controls are the value held on the interval
/// containing the row's time; `V`/`Valpha` repeat the most recent sample's
/// diagnostics.
pub fn write_pi_csv(traj: &PiTrajectory, n: usize, m: usize, out: &mut dyn std::io::Write) -> Result<()> {
    let has_diag = !traj.diag_v.is_empty();
    let has_env = !traj.diag_v_alpha.is_empty();
    let mut header = String::from("t");
    for i in 1..=n {
        header.push_str(&format!(",x{i}"));
    }
    for j in 1..=m {
        header.push_str(&format!(",u{j}"));
    }
    if has_diag {
        header.push_str(",V");
    }
    if has_env {
        header.push_str(",Valpha");
    }
    header.push_str(",is_sample\n");
    out.write_all(header.as_bytes())?;

    let mut interval = 0usize;
    for (row, t) in traj.times.iter().enumerate() {
        // advance to the interval containing t
        while interval + 1 < traj.sample_times.len() && *t >= traj.sample_times[interval + 1] {
            interval += 1;
        }
        let mut line = fmt_f64(*t);
        for v in &traj.states[row] {
            line.push(',');
            line.push_str(&fmt_f64(*v));
        }
        if let Some(u) = traj.held_controls.get(interval) {
            for v in u {
                line.push(',');
                line.push_str(&fmt_f64(*v));
            }
        } else {
            for _ in 0..m {
                line.push_str(",0");
            }
        }
        if has_diag {
            line.push(',');
            line.push_str(&fmt_f64(traj.diag_v[interval.min(traj.diag_v.len() - 1)]));
        }
        if has_env {
            line.push(',');
            line.push_str(&fmt_f64(
                traj.diag_v_alpha[interval.min(traj.diag_v_alpha.len() - 1)],
            ));
        }
        line.push(',');
        line.push_str(if traj.is_sample[row] { "1" } else { "0" });
        line.push('\n');
        out.write_all(line.as_bytes())?;
    }
    Ok(())
}

/// Same schema for classical/open-loop trajectories (`is_sample` is 1 on
/// every row: the control is re-evaluated continuously).
pub fn write_trajectory_csv(
    traj: &Trajectory,
    n: usize,
    m: usize,
    out: &mut dyn std::io::Write,
) -> Result<()> {
    let mut header = String::from("t");
    for i in 1..=n {
        header.push_str(&format!(",x{i}"));
    }
    for j in 1..=m {
        header.push_str(&format!(",u{j}"));
    }
    header.push_str(",is_sample\n");
    out.write_all(header.as_bytes())?;
    for (row, t) in traj.times.iter().enumerate() {
        let mut line = fmt_f64(*t);
        for v in &traj.states[row] {
            line.push(',');
            line.push_str(&fmt_f64(*v));
        }
        let idx = row.min(traj.controls.len().saturating_sub(1));
        if traj.controls.is_empty() {
            for _ in 0..m {
                line.push_str(",0");
            }
        } else {
            for v in &traj.controls[idx] {
                line.push(',');
                line.push_str(&fmt_f64(*v));
            }
        }
        line.push_str(",1\n");
        out.write_all(line.as_bytes())?;
    }
    Ok(())
}

fn write_file(path: &Path, body: impl FnOnce(&mut dyn std::io::Write) -> Result<()>) -> Result<()> {
    let mut file = std::io::BufWriter::new(fs::File::create(path)?);
    body(&mut file)?;
    file.flush()?;
    Ok(())
}

// ----- commands -----------------------------------------------------------

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulateArgs {
    #[arg(long)]
    pub system: Option<String>,
    /// key=value overrides for the zoo entry
    #[arg(long = "param")]
    #[serde(rename = "params")]
    pub params: Vec<String>,
    /// Defaults to `zero` when not given here or in the config
    #[arg(long)]
    pub feedback: Option<String>,
    /// Sample-and-hold schedule; omit for classical integration
    #[arg(long)]
    pub schedule: Option<String>,
    #[arg(long)]
    pub x0: Option<String>,
    #[arg(long)]
    pub horizon: Option<f64>,
    /// Classical integration step (no schedule given)
    #[arg(long)]
    pub step: Option<f64>,
    /// Measurement-error signal at sample instants
    #[arg(long)]
    pub e: Option<String>,
    /// Additive state disturbance signal
    #[arg(long)]
    pub d: Option<String>,
    #[arg(long)]
    pub substeps: Option<usize>,
    #[arg(long)]
    pub control_radius: Option<f64>,
    #[arg(long)]
    pub control_resolution: Option<usize>,
    /// Attach CLF diagnostics columns (smooth CLF name, or
    /// `envelope:<clf>:<alpha>`)
    #[arg(long)]
    pub diag_clf: Option<String>,
    #[arg(long)]
    pub dense_stride: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct SimulateSummary<'a> {
    command: &'a str,
    system: &'a str,
    mode: &'a str,
    final_time: f64,
    final_state: &'a [f64],
    final_norm: f64,
    escaped: bool,
    escape_time: Option<f64>,
    out: Option<&'a Path>,
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<i32> {
    let name = args
        .system
        .as_deref()
        .ok_or_else(|| Error::Config("--system is required".into()))?;
    let sys = parse_system(name, &args.params)?;
    let u0 = control_set_for(&sys, args.control_radius, args.control_resolution)?;
    let feedback = args.feedback.as_deref().unwrap_or("zero");
    let law = parse_feedback(feedback, &sys, &u0)?;
    let x0 = parse_f64_list(
        args.x0
            .as_deref()
            .ok_or_else(|| Error::Config("--x0 is required".into()))?,
    )?;
    let horizon = args
        .horizon
        .ok_or_else(|| Error::Config("--horizon is required".into()))?;

    let diagnostics = match &args.diag_clf {
        None => None,
        Some(spec) => Some(parse_diag(spec, &sys)?),
    };

    if let Some(schedule_spec) = &args.schedule {
        let schedule = parse_schedule(schedule_spec, horizon)?;
        let pert = PerturbationSpec {
            measurement: parse_signal(args.e.as_deref().unwrap_or("zero"), sys.state_dim)?,
            disturbance: parse_signal(args.d.as_deref().unwrap_or("zero"), sys.state_dim)?,
        };
        let opts = SimOptions {
            integrator: IntegratorCfg {
                substeps: args.substeps.unwrap_or(16),
                blowup: sys.blowup_bound,
            },
            diagnostics,
            dense_stride: args.dense_stride.unwrap_or(1),
        };
        let traj = simulate_pi_trajectory(&sys, &law, &schedule, &x0, &pert, &opts)?;
        if let Some(path) = &args.out {
            write_file(path, |w| {
                write_pi_csv(&traj, sys.state_dim, sys.control_dim, w)
            })?;
        }
        let summary = SimulateSummary {
            command: "simulate",
            system: &sys.name,
            mode: "pi",
            final_time: *traj.times.last().unwrap(),
            final_state: traj.final_state(),
            final_norm: vecn::norm(traj.final_state()),
            escaped: traj.escaped,
            escape_time: traj.escape_time,
            out: args.out.as_deref(),
        };
        println!("{}", serde_json::to_string(&summary)?);
        Ok(if traj.escaped { EXIT_SIMULATION } else { EXIT_OK })
    } else {
        let step = args
            .step
            .ok_or_else(|| Error::Config("--step is required for classical runs".into()))?;
        let traj = simulate_classical(&sys, &law, &x0, horizon, step)?;
        if let Some(path) = &args.out {
            write_file(path, |w| {
                write_trajectory_csv(&traj, sys.state_dim, sys.control_dim, w)
            })?;
        }
        let summary = SimulateSummary {
            command: "simulate",
            system: &sys.name,
            mode: "classical",
            final_time: *traj.times.last().unwrap(),
            final_state: traj.final_state(),
            final_norm: vecn::norm(traj.final_state()),
            escaped: traj.escaped,
            escape_time: traj.escape_time,
            out: args.out.as_deref(),
        };
        println!("{}", serde_json::to_string(&summary)?);
        Ok(if traj.escaped { EXIT_SIMULATION } else { EXIT_OK })
    }
}

fn parse_diag(spec: &str, sys: &ControlSystem) -> Result<DiagClf> {
    if let Some(rest) = spec.strip_prefix("envelope:") {
        let (clf, alpha) = rest
            .rsplit_once(':')
            .ok_or_else(|| Error::Config("want envelope:<clf>:<alpha>".into()))?;
        let clf = parse_clf_continuous(clf, sys.state_dim)?;
        let env = MoreauEnvelope::new(clf, parse_one(alpha)?)?;
        Ok(DiagClf::Envelope(Arc::new(env)))
    } else {
        Ok(DiagClf::Smooth(parse_clf_smooth(spec, sys.state_dim)?))
    }
}

fn control_set_for(
    sys: &ControlSystem,
    radius: Option<f64>,
    resolution: Option<usize>,
) -> Result<ControlSet> {
    let mut set = sys.default_control_set.clone();
    if let Some(r) = radius {
        set = ControlSet::ball(sys.control_dim, r, set.sample_resolution)?;
    }
    if let Some(res) = resolution {
        set.sample_resolution = res.max(1);
    }
    Ok(set)
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct ClfVerifyArgs {
    #[arg(long)]
    pub system: Option<String>,
    #[arg(long = "param")]
    #[serde(rename = "params")]
    pub params: Vec<String>,
    #[arg(long)]
    pub clf: Option<String>,
    /// Annulus `r:R`
    #[arg(long)]
    pub region: Option<String>,
    #[arg(long)]
    pub grid: Option<usize>,
    #[arg(long)]
    pub control_radius: Option<f64>,
    #[arg(long)]
    pub control_resolution: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn cmd_clf_verify(args: &ClfVerifyArgs, strict: bool) -> Result<i32> {
    let name = args
        .system
        .as_deref()
        .ok_or_else(|| Error::Config("--system is required".into()))?;
    let sys = parse_system(name, &args.params)?;
    let clf = parse_clf_smooth(
        args.clf
            .as_deref()
            .ok_or_else(|| Error::Config("--clf is required".into()))?,
        sys.state_dim,
    )?;
    let region_spec = args
        .region
        .as_deref()
        .ok_or_else(|| Error::Config("--region r:R is required".into()))?;
    let (r, big_r) = region_spec
        .split_once(':')
        .ok_or_else(|| Error::Config("want --region r:R".into()))?;
    let region = Region {
        r_inner: parse_one(r)?,
        r_outer: parse_one(big_r)?,
    };
    let u0 = control_set_for(&sys, args.control_radius, args.control_resolution)?;
    let report = verify_clf_on_region(&clf, &sys, &u0, region, args.grid.unwrap_or(41))?;
    let text = serde_json::to_string_pretty(&report)?;
    if let Some(path) = &args.out {
        fs::write(path, format!("{text}\n"))?;
    }
    println!("{text}");
    if strict && !report.passed() {
        return Ok(EXIT_CHECK_FAILED);
    }
    Ok(EXIT_OK)
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthesizeArgs {
    #[arg(long)]
    pub system: Option<String>,
    #[arg(long = "param")]
    #[serde(rename = "params")]
    pub params: Vec<String>,
    /// universal | pointwise | proximal
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub clf: Option<String>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub control_radius: Option<f64>,
    #[arg(long)]
    pub control_resolution: Option<usize>,
    /// Evaluate the synthesized law on that many points per axis over
    /// `[-range, range]^n` and write `x..,u..` rows
    #[arg(long)]
    pub feedback_grid_out: Option<PathBuf>,
    #[arg(long)]
    pub grid_range: Option<f64>,
    #[arg(long)]
    pub grid_points: Option<usize>,
    /// For the proximal method on planar systems: CSV grid of
    /// `x1,x2,Valpha`
    #[arg(long)]
    pub envelope_grid_out: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct SynthesizeSummary {
    command: &'static str,
    system: String,
    method: String,
    clf: String,
    alpha: Option<f64>,
    control_set: ControlSet,
    continuity: crate::clf::ContinuityClass,
}

pub fn cmd_synthesize(args: &SynthesizeArgs) -> Result<i32> {
    let name = args
        .system
        .as_deref()
        .ok_or_else(|| Error::Config("--system is required".into()))?;
    let sys = parse_system(name, &args.params)?;
    let u0 = control_set_for(&sys, args.control_radius, args.control_resolution)?;
    let method = args
        .method
        .as_deref()
        .ok_or_else(|| Error::Config("--method is required".into()))?;
    let clf_spec = args
        .clf
        .as_deref()
        .ok_or_else(|| Error::Config("--clf is required".into()))?;

    let spec = match method {
        "universal" => format!("universal:{clf_spec}"),
        "pointwise" => format!("pointwise:{clf_spec}"),
        "proximal" => {
            let alpha = args
                .alpha
                .ok_or_else(|| Error::Config("--alpha is required for proximal".into()))?;
            format!("proximal:{clf_spec}:{alpha}")
        }
        other => return Err(Error::Config(format!("unknown method `{other}`"))),
    };
    let law = parse_feedback(&spec, &sys, &u0)?;

    if let Some(path) = &args.feedback_grid_out {
        let range = args.grid_range.unwrap_or(2.0);
        let points = args.grid_points.unwrap_or(21);
        let axis = vecn::linspace(-range, range, points);
        let grid = crate::clf::cartesian_points(&vec![axis; sys.state_dim]);
        write_file(path, |w| {
            let mut header = String::new();
            for i in 1..=sys.state_dim {
                header.push_str(&format!("x{i},"));
            }
            for j in 1..=sys.control_dim {
                header.push_str(&format!("u{j}{}", if j < sys.control_dim { "," } else { "" }));
            }
            header.push('\n');
            w.write_all(header.as_bytes())?;
            for x in &grid {
                let u = law.eval(x)?;
                let mut line = String::new();
                for v in x {
                    line.push_str(&fmt_f64(*v));
                    line.push(',');
                }
                for (j, v) in u.iter().enumerate() {
                    line.push_str(&fmt_f64(*v));
                    if j + 1 < u.len() {
                        line.push(',');
                    }
                }
                line.push('\n');
                w.write_all(line.as_bytes())?;
            }
            Ok(())
        })?;
    }

    if let Some(path) = &args.envelope_grid_out {
        if method != "proximal" {
            return Err(Error::Config(
                "--envelope-grid-out applies to the proximal method".into(),
            ));
        }
        if sys.state_dim != 2 {
            return Err(Error::Config("envelope grids are for planar systems".into()));
        }
        let clf = parse_clf_continuous(clf_spec, 2)?;
        let env = MoreauEnvelope::new(clf, args.alpha.unwrap())?;
        let range = args.grid_range.unwrap_or(2.0);
        let points = args.grid_points.unwrap_or(41);
        let axis = vecn::linspace(-range, range, points);
        write_file(path, |w| {
            w.write_all(b"x1,x2,Valpha\n")?;
            for x1 in &axis {
                for x2 in &axis {
                    let (va, _) = env.inf_convolve(&[*x1, *x2])?;
                    w.write_all(
                        format!("{},{},{}\n", fmt_f64(*x1), fmt_f64(*x2), fmt_f64(va)).as_bytes(),
                    )?;
                }
            }
            Ok(())
        })?;
    }

    let summary = SynthesizeSummary {
        command: "synthesize",
        system: sys.name.clone(),
        method: method.to_string(),
        clf: clf_spec.to_string(),
        alpha: args.alpha,
        control_set: u0,
        continuity: law.continuity,
    };
    let text = serde_json::to_string_pretty(&summary)?;
    if let Some(path) = &args.out {
        fs::write(path, format!("{text}\n"))?;
    }
    println!("{text}");
    Ok(EXIT_OK)
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct BrockettArgs {
    #[arg(long)]
    pub system: Option<String>,
    #[arg(long = "param")]
    #[serde(rename = "params")]
    pub params: Vec<String>,
    #[arg(long)]
    pub x_radius: Option<f64>,
    #[arg(long)]
    pub u_radius: Option<f64>,
    #[arg(long)]
    pub targets: Option<usize>,
    #[arg(long)]
    pub budget: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct BrockettSummary {
    command: &'static str,
    system: String,
    status: VerdictStatus,
    driftless: Option<BrockettVerdict>,
    probe: BrockettVerdict,
}

pub fn cmd_check_brockett(args: &BrockettArgs, strict: bool) -> Result<i32> {
    let name = args
        .system
        .as_deref()
        .ok_or_else(|| Error::Config("--system is required".into()))?;
    let sys = parse_system(name, &args.params)?;
    let driftless = brockett_driftless_test(&sys).ok();
    let probe = onto_neighborhood_probe(
        &sys,
        args.x_radius.unwrap_or(1.0),
        args.u_radius.unwrap_or(1.0),
        args.targets.unwrap_or(26),
        args.budget.unwrap_or(20_000),
    )?;
    let fails = probe.fails() || driftless.as_ref().is_some_and(|v| v.fails());
    let summary = BrockettSummary {
        command: "check-brockett",
        system: sys.name.clone(),
        status: if fails {
            VerdictStatus::FailsNecessaryCondition
        } else {
            VerdictStatus::Inconclusive
        },
        driftless,
        probe,
    };
    let text = serde_json::to_string_pretty(&summary)?;
    if let Some(path) = &args.out {
        fs::write(path, format!("{text}\n"))?;
    }
    println!("{text}");
    if strict && fails {
        return Ok(EXIT_CHECK_FAILED);
    }
    Ok(EXIT_OK)
}

/// `brockett-linear` is exposed separately since it takes raw matrices.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct BrockettLinearArgs {
    /// Row-major A, rows separated by `;`
    #[arg(long)]
    pub a: Option<String>,
    #[arg(long)]
    pub b: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn cmd_brockett_linear(args: &BrockettLinearArgs) -> Result<i32> {
    let parse_matrix = |s: &str| -> Result<Vec<Vec<f64>>> {
        s.split(';').map(parse_f64_list).collect()
    };
    let a = parse_matrix(
        args.a
            .as_deref()
            .ok_or_else(|| Error::Config("--a is required".into()))?,
    )?;
    let b = parse_matrix(
        args.b
            .as_deref()
            .ok_or_else(|| Error::Config("--b is required".into()))?,
    )?;
    let verdict = brockett_linear_test(&a, &b)?;
    let text = serde_json::to_string_pretty(&verdict)?;
    if let Some(path) = &args.out {
        fs::write(path, format!("{text}\n"))?;
    }
    println!("{text}");
    Ok(EXIT_OK)
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct IssFitArgs {
    #[arg(long)]
    pub system: Option<String>,
    #[arg(long = "param")]
    #[serde(rename = "params")]
    pub params: Vec<String>,
    /// Input amplitudes for constant probes, e.g. `0.1,0.2,...`; or a JSON
    /// file of full input specs via --inputs-file
    #[arg(long)]
    pub amplitudes: Option<String>,
    #[arg(long)]
    pub inputs_file: Option<PathBuf>,
    /// Initial states, `;`-separated lists
    #[arg(long)]
    pub x0_grid: Option<String>,
    #[arg(long)]
    pub horizon: Option<f64>,
    #[arg(long)]
    pub step: Option<f64>,
    #[arg(long)]
    pub tail: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn cmd_iss_fit(args: &IssFitArgs) -> Result<i32> {
    let name = args
        .system
        .as_deref()
        .ok_or_else(|| Error::Config("--system is required".into()))?;
    let sys = parse_system(name, &args.params)?;
    let horizon = args.horizon.unwrap_or(30.0);
    let inputs: Vec<InputSignal> = if let Some(path) = &args.inputs_file {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("bad inputs file: {e}")))?
    } else {
        let amps = parse_f64_list(
            args.amplitudes
                .as_deref()
                .ok_or_else(|| Error::Config("--amplitudes or --inputs-file required".into()))?,
        )?;
        amps.into_iter()
            .map(|a| InputSignal {
                generator: Signal::Constant {
                    value: vec![a; sys.control_dim],
                },
                horizon,
            })
            .collect()
    };
    let x0s: Vec<Vec<f64>> = args
        .x0_grid
        .as_deref()
        .unwrap_or("0")
        .split(';')
        .map(parse_f64_list)
        .collect::<Result<_>>()?;
    let report = asymptotic_gain_probe(
        &sys,
        &inputs,
        &x0s,
        args.step.unwrap_or(1e-2),
        args.tail.unwrap_or(0.25),
    )?;
    let text = serde_json::to_string_pretty(&report)?;
    if let Some(path) = &args.out {
        fs::write(path, format!("{text}\n"))?;
    }
    println!("{text}");
    Ok(EXIT_OK)
}

/// Candidate file: CLF spec plus a dissipation declaration.
#[derive(Debug, Serialize, Deserialize)]
pub struct CandidateFile {
    pub clf: ClfFileSpec,
    pub dissipation: DissipationSpec,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum DissipationSpec {
    Iss {
        alpha3: (f64, f64),
        gamma: (f64, f64),
    },
    Iiss {
        /// `a r atan(r) / (1 + r^2)`-shaped rates are spec'd by name
        alpha_pd: String,
        gamma: (f64, f64),
    },
    Implication {
        alpha3: (f64, f64),
        rho: (f64, f64),
    },
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct LyapVerifyArgs {
    #[arg(long)]
    pub system: Option<String>,
    #[arg(long = "param")]
    #[serde(rename = "params")]
    pub params: Vec<String>,
    #[arg(long)]
    pub candidate: Option<PathBuf>,
    #[arg(long)]
    pub state_radius: Option<f64>,
    #[arg(long)]
    pub state_resolution: Option<usize>,
    #[arg(long)]
    pub input_radius: Option<f64>,
    #[arg(long)]
    pub input_resolution: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn cmd_lyap_verify(args: &LyapVerifyArgs, strict: bool) -> Result<i32> {
    let name = args
        .system
        .as_deref()
        .ok_or_else(|| Error::Config("--system is required".into()))?;
    let sys = parse_system(name, &args.params)?;
    let path = args
        .candidate
        .as_ref()
        .ok_or_else(|| Error::Config("--candidate file is required".into()))?;
    let text = fs::read_to_string(path)?;
    let file: CandidateFile = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("bad candidate file: {e}")))?;
    let clf = match clf_from_file(file.clf, sys.state_dim)? {
        ClfChoice::Smooth(c) => c,
        ClfChoice::Continuous(_) => {
            return Err(Error::Config(
                "Lyapunov verification needs a smooth candidate".into(),
            ))
        }
    };
    let dissipation = match file.dissipation {
        DissipationSpec::Iss { alpha3, gamma } => Dissipation::Iss {
            alpha3: power_rate(alpha3)?,
            gamma: KFunction::power(gamma.0, gamma.1)?,
        },
        DissipationSpec::Iiss { alpha_pd, gamma } => Dissipation::Iiss {
            alpha_pd: named_rate(&alpha_pd)?,
            gamma: KFunction::power(gamma.0, gamma.1)?,
        },
        DissipationSpec::Implication { alpha3, rho } => Dissipation::Implication {
            alpha3: power_rate(alpha3)?,
            rho: KFunction::power(rho.0, rho.1)?,
        },
    };
    let cand = LyapunovCandidate { clf, dissipation };

    let sr = args.state_radius.unwrap_or(3.0);
    let sres = args.state_resolution.unwrap_or(13);
    let ir = args.input_radius.unwrap_or(2.0);
    let ires = args.input_resolution.unwrap_or(9);
    let states = crate::clf::cartesian_points(&vec![vecn::linspace(-sr, sr, sres); sys.state_dim]);
    let inputs =
        crate::clf::cartesian_points(&vec![vecn::linspace(-ir, ir, ires); sys.control_dim]);
    let report = crate::iss::verify_lyapunov_candidate(&cand, &sys, &states, &inputs)?;
    let text = serde_json::to_string_pretty(&report)?;
    if let Some(path) = &args.out {
        fs::write(path, format!("{text}\n"))?;
    }
    println!("{text}");
    if strict && !report.passed() {
        return Ok(EXIT_CHECK_FAILED);
    }
    Ok(EXIT_OK)
}

fn power_rate(spec: (f64, f64)) -> Result<crate::iss::RateFn> {
    let k = KFunction::power(spec.0, spec.1)?;
    Ok(Arc::new(move |r| k.eval(r)))
}

fn named_rate(name: &str) -> Result<crate::iss::RateFn> {
    match name {
        "arctan" => Ok(Arc::new(|r: f64| 2.0 * r * r.atan() / (1.0 + r * r))),
        other => {
            if let Some(rest) = other.strip_prefix("power:") {
                let parts = parse_f64_list(rest)?;
                if parts.len() == 2 {
                    return power_rate((parts[0], parts[1]));
                }
            }
            Err(Error::Config(format!("unknown rate `{other}`")))
        }
    }
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepArgs {
    #[arg(long)]
    pub system: Option<String>,
    #[arg(long = "param")]
    #[serde(rename = "params")]
    pub params: Vec<String>,
    #[arg(long)]
    pub clf: Option<String>,
    #[arg(long)]
    pub r: Option<f64>,
    #[arg(long = "big-r")]
    pub big_r: Option<f64>,
    #[arg(long)]
    pub x0_count: Option<usize>,
    #[arg(long)]
    pub x0_radius: Option<f64>,
    /// Multiples of the compliant gap, e.g. `1,100`
    #[arg(long)]
    pub schedule_scales: Option<String>,
    /// Comma list from {zero, eps, adv10}
    #[arg(long)]
    pub perturbations: Option<String>,
    #[arg(long)]
    pub substeps: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// measured | formula
    #[arg(long)]
    pub lipschitz: Option<String>,
    #[arg(long)]
    pub control_radius: Option<f64>,
    #[arg(long)]
    pub control_resolution: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub csv_out: Option<PathBuf>,
}

pub fn cmd_sweep_robustness(args: &SweepArgs, strict: bool) -> Result<i32> {
    let name = args
        .system
        .as_deref()
        .ok_or_else(|| Error::Config("--system is required".into()))?;
    let sys = parse_system(name, &args.params)?;
    let clf = parse_clf_continuous(args.clf.as_deref().unwrap_or("artstein"), sys.state_dim)?;
    let r = args.r.unwrap_or(0.2);
    let big_r = args.big_r.unwrap_or(2.0);
    let u0 = control_set_for(&sys, args.control_radius, args.control_resolution.or(Some(21)))?;

    let mut cfg = ConstantsCfg {
        alpha_override: args.alpha,
        ..ConstantsCfg::default()
    };
    if let Some(mode) = args.lipschitz.as_deref() {
        cfg.lipschitz = match mode {
            "measured" => LipschitzMode::Measured,
            "formula" => LipschitzMode::Formula,
            other => return Err(Error::Config(format!("unknown lipschitz mode `{other}`"))),
        };
    }
    let constants = constants_for(&clf, &sys, &u0, r, big_r, &cfg)?;
    let env = Arc::new(MoreauEnvelope::new(clf, constants.alpha)?.without_cache());

    let x0_count = args.x0_count.unwrap_or(16);
    let x0_radius = args.x0_radius.unwrap_or(1.0);
    if sys.state_dim != 2 {
        return Err(Error::Config(
            "the robustness sweep generates circle initial states (planar systems)".into(),
        ));
    }
    let x0s = crate::sim::circle_initial_states(x0_count, x0_radius);

    let h_compliant = 0.5 * (constants.band_lo + constants.band_hi);
    let scales = parse_f64_list(args.schedule_scales.as_deref().unwrap_or("1"))?;
    let schedules: Vec<ScheduleSpec> = scales
        .iter()
        .map(|s| ScheduleSpec::Uniform { h: h_compliant * s })
        .collect();

    let pert_names: Vec<&str> = args
        .perturbations
        .as_deref()
        .unwrap_or("zero")
        .split(',')
        .map(|s| s.trim())
        .collect();
    let mut perturbations = Vec::new();
    for p in &pert_names {
        let spec = match *p {
            "zero" => PerturbationSpec::none(),
            // bounded noise at the admissible magnitude
            "eps" => PerturbationSpec {
                measurement: Signal::PiecewiseConstant {
                    seed: 0xe95,
                    dwell: 10.0 * h_compliant,
                    amp: vec![
                        constants.eps_bound / (sys.state_dim as f64).sqrt();
                        sys.state_dim
                    ],
                },
                disturbance: Signal::Zero,
            },
            // worst-case branch-flipping error at the admissible magnitude
            "epsflip" => PerturbationSpec {
                measurement: Signal::AxisFlip {
                    magnitude: constants.eps_bound,
                    axis: 0,
                },
                disturbance: Signal::Zero,
            },
            // the same adversary an order of magnitude over the bound
            "adv10" => PerturbationSpec {
                measurement: Signal::AxisFlip {
                    magnitude: 10.0 * constants.eps_bound,
                    axis: 0,
                },
                disturbance: Signal::Zero,
            },
            "radial10" => PerturbationSpec {
                measurement: Signal::RadialOutward {
                    magnitude: 10.0 * constants.eps_bound,
                },
                disturbance: Signal::Zero,
            },
            other => return Err(Error::Config(format!("unknown perturbation `{other}`"))),
        };
        perturbations.push(NamedPerturbation {
            name: p.to_string(),
            spec,
        });
    }

    let cells = x0s.len() * schedules.len() * perturbations.len();
    if cells == 0 {
        return Err(Error::Config("empty sweep grid".into()));
    }
    if cells > 1_000_000 {
        return Err(Error::Config(format!(
            "sweep grid has {cells} cells (limit 1e6)"
        )));
    }

    let spec = ExperimentSpec {
        r,
        big_r,
        x0s,
        schedules,
        perturbations,
        substeps: args.substeps.unwrap_or(4),
        horizon: 0.0,
    };
    let report = robust_stabilization_experiment(&sys, &env, &u0, &constants, &spec)?;

    if let Some(path) = &args.csv_out {
        write_file(path, |w| {
            w.write_all(
                b"x0_index,schedule_index,perturbation,band_compliant,contained,entered_by_t_bound,in_br_from_t_bound,max_norm,decrease_violations,escaped,passed\n",
            )?;
            for c in &report.cells {
                w.write_all(
                    format!(
                        "{},{},{},{},{},{},{},{},{},{},{}\n",
                        c.x0_index,
                        c.schedule_index,
                        c.perturbation,
                        c.band_compliant as u8,
                        c.contained as u8,
                        c.entered_by_t_bound as u8,
                        c.in_br_from_t_bound as u8,
                        fmt_f64(c.max_norm),
                        c.decrease_violations,
                        c.escaped as u8,
                        c.passed as u8
                    )
                    .as_bytes(),
                )?;
            }
            Ok(())
        })?;
    }
    let text = serde_json::to_string_pretty(&report)?;
    if let Some(path) = &args.out {
        fs::write(path, format!("{text}\n"))?;
    }
    let n_passed = report.cells.iter().filter(|c| c.passed).count();
    println!(
        "{}",
        serde_json::to_string(&serde_json::json!({
            "command": "sweep-robustness",
            "cells": report.cells.len(),
            "passed": n_passed,
            "failed": report.cells.len() - n_passed,
            "compliant_all_passed": report.all_compliant_passed(),
            "any_failure": report.any_failure(),
            "t_bound": report.constants.t_bound,
            "eps_bound": report.constants.eps_bound,
            "band": [report.constants.band_lo, report.constants.band_hi],
            "out": args.out,
        }))?
    );
    if strict && !report.all_compliant_passed() {
        return Ok(EXIT_CHECK_FAILED);
    }
    Ok(EXIT_OK)
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvelopeCheckArgs {
    #[arg(long)]
    pub system: Option<String>,
    #[arg(long = "param")]
    #[serde(rename = "params")]
    pub params: Vec<String>,
    #[arg(long)]
    pub clf: Option<String>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub r: Option<f64>,
    #[arg(long = "big-r")]
    pub big_r: Option<f64>,
    #[arg(long)]
    pub grid: Option<usize>,
    #[arg(long)]
    pub fraction: Option<f64>,
    #[arg(long)]
    pub control_radius: Option<f64>,
    #[arg(long)]
    pub control_resolution: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn cmd_envelope_check(args: &EnvelopeCheckArgs, strict: bool) -> Result<i32> {
    let name = args
        .system
        .as_deref()
        .ok_or_else(|| Error::Config("--system is required".into()))?;
    let sys = parse_system(name, &args.params)?;
    let clf = parse_clf_continuous(args.clf.as_deref().unwrap_or("artstein"), sys.state_dim)?;
    let r = args.r.unwrap_or(0.2);
    let big_r = args.big_r.unwrap_or(2.0);
    let u0 = control_set_for(&sys, args.control_radius, args.control_resolution.or(Some(21)))?;
    let alpha = match args.alpha {
        Some(a) => a,
        None => {
            constants_for(&clf, &sys, &u0, r, big_r, &ConstantsCfg::default())?.alpha
        }
    };
    let env = MoreauEnvelope::new(clf, alpha)?;
    let report = envelope_decrease_check(
        &env,
        &sys,
        &u0,
        r,
        big_r,
        args.grid.unwrap_or(21),
        args.fraction.unwrap_or(0.5),
    )?;
    let text = serde_json::to_string_pretty(&report)?;
    if let Some(path) = &args.out {
        fs::write(path, format!("{text}\n"))?;
    }
    println!("{text}");
    if strict && !report.passed() {
        return Ok(EXIT_CHECK_FAILED);
    }
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct ZooList<'a> {
    command: &'static str,
    systems: Vec<&'a str>,
}

pub fn cmd_zoo(which: Option<&str>) -> Result<i32> {
    match which {
        None => {
            let list = ZooList {
                command: "zoo",
                systems: ZOO_NAMES.to_vec(),
            };
            println!("{}", serde_json::to_string_pretty(&list)?);
        }
        Some(name) => {
            let desc = zoo_describe(name)?;
            println!("{}", serde_json::to_string_pretty(&desc)?);
        }
    }
    Ok(EXIT_OK)
}
