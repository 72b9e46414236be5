use std::path::Path;

use anyhow::{bail, Context};
use gaintuner_core::balancer::{matrix_from_rows, matrix_to_rows, ControlGains};
use gaintuner_core::gainfit::{fit_gains, two_feet_correction, gamma, rank_diagnostics, DesiredDynamics, FitOptions, FitSpace, GainFitProblem};
use gaintuner_core::linalg::{eigenvalues, min_sym_eigenvalue, projector_basis, spectral_abscissa, PinvOptions, RANK_RCOND};
use gaintuner_core::linearizer::{analytic_a, assemble_a, c_matrices, ClosedLoop};
use gaintuner_core::models::Equilibrium;
use gaintuner_core::multibody::RobotModel;
use gaintuner_core::simulator::{self, integrate, linear_csv, ConstraintMode, Control, SimConfig, SimState};
use gaintuner_core::spdtrack::{track, KvGain, TrackOptions, TrackerGains, TrackerState};
use nalgebra::{DMatrix, DVector, Vector6};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::run::{NumericFailure, Run};
use crate::{CheckRankArgs, LinearizeArgs, ModelArgs, SimulateArgs, StepResponseArgs, TrackSpdArgs, TuneArgs};

const NOMINAL_OMEGA: f64 = 4.0;

fn load(run: &mut Run, args: &ModelArgs) -> anyhow::Result<(RobotModel, Equilibrium)> {
    let model = run.model(&args.model)?;
    let eq = run.equilibrium(&args.model, args.equilibrium.as_deref(), &model)?;
    Ok((model, eq))
}

fn load_gains(run: &mut Run, path: Option<&Path>, n: usize) -> anyhow::Result<ControlGains> {
    let gains = match path {
        Some(p) => {
            let text = run.read(p)?;
            ControlGains::from_json(&text).with_context(|| format!("parsing gains {}", p.display()))?
        }
        None => ControlGains::nominal(n, NOMINAL_OMEGA),
    };
    if gains.n() != n {
        bail!("gains are for {} joints, model has {n}", gains.n());
    }
    gains.validate()?;
    Ok(gains)
}

fn rows(m: &DMatrix<f64>) -> Value {
    json!(matrix_to_rows(m))
}

fn eig_json(a: &DMatrix<f64>) -> Value {
    json!(eigenvalues(a).iter().map(|(re, im)| [*re, *im]).collect::<Vec<_>>())
}

pub fn simulate(run: &mut Run, args: &SimulateArgs, seed: u64) -> anyhow::Result<()> {
    if !(args.perturb >= 0.0 && args.perturb.is_finite()) {
        bail!("--perturb must be a nonnegative number");
    }
    let (model, eq) = load(run, &args.model)?;
    let n = model.n_joints();
    let gains = load_gains(run, args.gains.as_deref(), n)?;
    let constraint_mode = match args.soft_stiffness {
        Some(stiffness) => ConstraintMode::Soft {
            stiffness,
            damping: args.soft_damping,
        },
        None => ConstraintMode::Kkt,
    };
    let cfg = SimConfig {
        dt: args.dt,
        duration: args.duration,
        record_stride: args.stride,
        constraint_mode,
        ..SimConfig::default()
    };
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offset = DVector::from_fn(n, |_, _| {
        if args.perturb > 0.0 {
            rng.random_range(-args.perturb..args.perturb)
        } else {
            0.0
        }
    });

    let cl;
    let (init, control, q_ref) = if args.passive {
        let mut s = eq.state();
        s.q += &offset;
        let q_ref = eq.q.clone();
        (SimState::from_robot(&s, Vector6::zeros()), Control::Passive, q_ref)
    } else {
        cl = ClosedLoop::new(&model, &eq.state(), &gains)?;
        let s0 = if args.perturb > 0.0 {
            cl.embed(&(&cl.reference.q + &offset), &DVector::zeros(n))?
        } else {
            cl.reference.clone()
        };
        let integral = cl.integral_state(&s0)?;
        (SimState::from_robot(&s0, integral), Control::Balancer(&cl), cl.reference.q.clone())
    };
    let traj = integrate(&model, &init, control, &cfg)?;

    run.write("trajectory.csv", &traj.to_csv())?;
    run.write("trajectory.gp", &traj.gnuplot_script("trajectory.csv"))?;
    let deviation = traj
        .samples
        .iter()
        .map(|s| (&s.q - &q_ref).amax())
        .fold(0.0, f64::max);
    let drift = traj.samples.iter().map(|s| s.constraint_norm).fold(0.0, f64::max);
    let last = traj.samples.last().expect("at least the initial sample");
    run.write_json(
        "summary.json",
        &json!({
            "samples": traj.samples.len(),
            "t_final": last.t,
            "max_joint_deviation": deviation,
            "max_constraint_norm": drift,
            "final_q": last.q.as_slice(),
            "final_momentum": last.momentum.as_slice(),
        }),
    )?;
    println!(
        "simulated {:.3} s in {} steps: max joint deviation {:.3e} rad, max constraint error {:.3e}",
        last.t,
        cfg.steps(),
        deviation,
        drift
    );
    Ok(())
}

pub fn linearize(run: &mut Run, args: &LinearizeArgs) -> anyhow::Result<()> {
    let (model, eq) = load(run, &args.model)?;
    let gains = load_gains(run, args.gains.as_deref(), model.n_joints())?;
    let cl = ClosedLoop::new(&model, &eq.state(), &gains)?;
    let cm = c_matrices(&model, &cl.reference)?;
    let lin = analytic_a(&cm, &gains);
    // Single-joint offsets of a closed chain cannot be embedded through
    // several contacts, so the finite-difference check needs one contact.
    let numeric = if model.n_contacts() <= 1 {
        Some(cl.numeric_a(cl.default_step())?)
    } else {
        None
    };
    let gap = numeric.as_ref().map(|a| (a - &lin.a).norm() / lin.a.norm());
    let abscissa = spectral_abscissa(&lin.a);
    run.write_json(
        "linearization.json",
        &json!({
            "Q1": rows(&lin.q1),
            "Q2": rows(&lin.q2),
            "A": rows(&lin.a),
            "A_numeric": numeric.as_ref().map(rows),
            "numeric_relative_gap": gap,
            "eigenvalues": eig_json(&lin.a),
            "spectral_abscissa": abscissa,
            "C1": rows(&cm.c1),
            "C2": rows(&cm.c2),
            "C3": rows(&cm.c3),
            "C4": rows(&cm.c4),
        }),
    )?;
    match gap {
        Some(g) => println!("spectral abscissa {abscissa:.6e}; numeric vs analytic A relative gap {g:.3e}"),
        None => println!("spectral abscissa {abscissa:.6e}; numeric check skipped (several contacts)"),
    }
    Ok(())
}

pub fn tune(run: &mut Run, args: &TuneArgs) -> anyhow::Result<()> {
    let (model, eq) = load(run, &args.model)?;
    let text = run.read(&args.desired)?;
    let desired = DesiredDynamics::from_json(&text)
        .with_context(|| format!("parsing desired dynamics {}", args.desired.display()))?;
    if !(args.tracker_dt > 0.0) || args.tracker_steps == 0 {
        bail!("--tracker-dt must be positive and --tracker-steps at least 1");
    }
    if !(args.pinv_damping >= 0.0) {
        bail!("--pinv-damping must be nonnegative");
    }
    let opts = FitOptions {
        tracker: TrackOptions {
            dt: args.tracker_dt,
            max_steps: args.tracker_steps,
            record_stride: 0,
            ..TrackOptions::default()
        },
        pinv: PinvOptions {
            rcond: RANK_RCOND,
            damping: args.pinv_damping,
        },
        warm_start: !args.cold_start,
        space: if args.full_space { FitSpace::Full } else { FitSpace::Compatible },
        ..FitOptions::default()
    };
    let state = eq.state();
    let report = fit_gains(&model, &state, &desired, &opts)?;
    let a = analytic_a(&c_matrices(&model, &state)?, &report.gains).a;
    // With several contacts, joint motions leaving the contacts are frozen
    // and show up as zero eigenvalues; stability is judged on the rest.
    let a_free = if report.corrected {
        let v = projector_basis(&two_feet_correction(&model, &state, &desired)?.n_j);
        let n = model.n_joints();
        let q1 = -v.transpose() * a.view((n, 0), (n, n)) * &v;
        let q2 = -v.transpose() * a.view((n, n), (n, n)) * &v;
        assemble_a(&q1, &q2)
    } else {
        a.clone()
    };
    let abscissa = spectral_abscissa(&a_free);
    let u = &report.unconstrained;
    let r = &report.rank;
    let trackers: Vec<Value> = report
        .per_gain
        .iter()
        .map(|g| {
            json!({
                "gain": g.name,
                "distance": g.distance,
                "status": format!("{:?}", g.status),
                "steps": g.steps,
                "monotone": g.monotone,
            })
        })
        .collect();
    run.write_json("gains.json", &report.gains.to_json_value())?;
    run.write_json(
        "tune_report.json",
        &json!({
            "n": model.n_joints(),
            "n_contacts": model.n_contacts(),
            "correction_applied": report.corrected,
            "desired": report.desired.to_json_value(),
            "rank": {
                "rank": r.rank,
                "rows": r.rows,
                "bound": r.bound,
                "full_row_rank": r.full_row_rank,
                "threshold": r.threshold,
                "singular_values": r.singular_values,
            },
            "residuals": {"stiffness": u.r1, "damping": u.r2},
            "unconstrained": {
                "Ki": rows(&u.ki),
                "Kp": rows(&u.kp),
                "Kpj": rows(&u.kpj),
                "Kdj": rows(&u.kdj),
            },
            "unconstrained_error": report.unconstrained_error,
            "achieved_error": report.achieved_error,
            "trackers": trackers,
            "eigenvalues": eig_json(&a),
            "free_dimension": a_free.nrows() / 2,
            "free_eigenvalues": eig_json(&a_free),
            "spectral_abscissa": abscissa,
        }),
    )?;
    if report.corrected {
        println!(
            "two-feet correction applied: desired dynamics restricted to the {} joint motions compatible with {} contacts",
            a_free.nrows() / 2,
            model.n_contacts()
        );
    }
    println!(
        "rank(Γ) = {} of {} rows; |A(K*) − A_d| = {:.3e}, |A(X*) − A_d| = {:.3e}, spectral abscissa {:.6e}",
        r.rank, r.rows, report.unconstrained_error, report.achieved_error, abscissa
    );
    report
        .gains
        .validate()
        .map_err(|e| NumericFailure(format!("tuned gains are not SPD: {e}")))?;
    if !(abscissa < 0.0) {
        return Err(NumericFailure(format!("tuned closed loop is not stable: spectral abscissa {abscissa:.6e}")).into());
    }
    Ok(())
}

pub fn track_spd(run: &mut Run, args: &TrackSpdArgs) -> anyhow::Result<()> {
    let text = run.read(&args.target)?;
    let target_rows: Vec<Vec<f64>> =
        serde_json::from_str(&text).with_context(|| format!("parsing target {}", args.target.display()))?;
    let target = matrix_from_rows("target", &target_rows)?;
    let m = target.nrows();
    if m == 0 || target.ncols() != m {
        bail!("target must be a non-empty square matrix");
    }
    let gains = TrackerGains {
        k_u: DVector::from_element(m, args.ku),
        k_v: KvGain::Scalar(args.kv),
    };
    gains.validate(m)?;
    if !(args.dt > 0.0) {
        bail!("--dt must be positive");
    }
    let opts = TrackOptions {
        dt: args.dt,
        max_steps: args.steps,
        record_stride: args.stride,
        ..TrackOptions::default()
    };
    let init = if args.cold_start {
        TrackerState::identity(m)
    } else {
        TrackerState::warm_start(&target)
    };
    let r = track(&target, &init, &gains, &opts)?;
    run.write("trace.csv", &r.trace_csv())?;
    run.write_json(
        "result.json",
        &json!({
            "X": rows(&r.x),
            "V0": r.v0,
            "V_final": r.v_final,
            "status": format!("{:?}", r.status),
            "steps": r.steps,
            "max_increase": r.max_increase,
            "max_orth_error": r.max_orth_error,
            "monotone": r.is_monotone(),
            "min_eigenvalue": min_sym_eigenvalue(&r.x),
        }),
    )?;
    println!(
        "{:?} after {} steps: V {:.6e} -> {:.6e}, monotone {}",
        r.status,
        r.steps,
        r.v0,
        r.v_final,
        r.is_monotone()
    );
    Ok(())
}

pub fn check_rank(run: &mut Run, args: &CheckRankArgs) -> anyhow::Result<()> {
    let (model, eq) = load(run, &args.model)?;
    let cm = c_matrices(&model, &eq.state())?;
    let n = cm.n();
    let problem = GainFitProblem {
        gamma: gamma(&cm),
        y1: DVector::zeros(n * n),
        y2: DVector::zeros(n * n),
        cm,
    };
    let nc = model.n_contacts();
    let r = rank_diagnostics(&problem, nc);
    println!("rank(Γ) = {} ({} rows, {} columns)", r.rank, r.rows, problem.gamma.ncols());
    match r.bound {
        Some(b) => println!("bound 36 + (n - 6 n_c)^2 = {b} (n = {n}, n_c = {nc})"),
        None => println!("bound: not applicable (n = {n} <= 6 n_c = {})", 6 * nc),
    }
    println!("{}", if r.full_row_rank { "full row rank" } else { "NOT full row rank" });
    run.write_json(
        "rank.json",
        &json!({
            "rank": r.rank,
            "rows": r.rows,
            "columns": problem.gamma.ncols(),
            "bound": r.bound,
            "within_bound": r.within_bound(),
            "full_row_rank": r.full_row_rank,
            "threshold": r.threshold,
            "singular_values": r.singular_values,
        }),
    )?;
    Ok(())
}

pub fn step_response(run: &mut Run, args: &StepResponseArgs) -> anyhow::Result<()> {
    let (model, eq) = load(run, &args.model)?;
    let n = model.n_joints();
    let gains = load_gains(run, args.gains.as_deref(), n)?;
    let cfg = SimConfig {
        dt: args.dt,
        duration: args.duration,
        record_stride: 1,
        ..SimConfig::default()
    };
    cfg.validate()?;
    if let Some(j) = args.joints.iter().find(|j| **j >= n) {
        bail!("joint {j} out of range (n = {n})");
    }
    let state = eq.state();
    let mut metrics = Vec::new();
    for &joint in &args.joints {
        let r = simulator::step_response(&model, &state, &gains, joint, args.amplitude, &cfg)?;
        let csv = format!("step_joint{joint}.csv");
        run.write(&csv, &r.trajectory.to_csv())?;
        run.write(&format!("step_joint{joint}.gp"), &r.trajectory.gnuplot_script(&csv))?;
        run.write(&format!("step_joint{joint}_linear.csv"), &linear_csv(&r.linear))?;
        let m = &r.metrics;
        println!(
            "joint {joint}: settling {:.4} s (linear model {:.4} s, -3/Re(λ) {:.4} s), overshoot {:.3}",
            m.t_s_measured, m.t_s_linear, m.t_s_predicted, m.overshoot
        );
        let mut v = m.to_json_value();
        v["joint"] = joint.into();
        v["amplitude"] = args.amplitude.into();
        metrics.push(v);
    }
    run.write_json("step_response.json", &Value::Array(metrics))?;
    Ok(())
}
