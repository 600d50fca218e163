//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any of them fails. Tolerances are fixed below.

mod common;

use std::collections::HashSet;
use std::path::Path;
use std::time::Instant;

use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use neurove::config::RunConfig;
use neurove::datasets::poses::{poses_to_velocity, PoseSample};
use neurove::encoding::{
    bin_events, encode_polarity, read_binary, read_text, write_binary, write_text, Event, WindowSpec,
};
use neurove::metrics::{firing_profile, relative_error, rmse, MetricReport};
use neurove::network::CellKind;
use neurove::neuron::{alif_step, lif_step, NeuronKind, NeuronParams, NeuronState};
use neurove::pipeline::{self, SineRun};
use neurove::training::loss::{velocity_loss, LossScaleState};

use common::oracle;

const SMOOTH_GRAD_TOL: f64 = 1e-5;
const SPIKING_GRAD_TOL: f64 = 1e-3;
const FIT_RMSE_MAX: f64 = 1e-3;
const FORECAST_RMSE_MAX: f64 = 0.2;
const FIRING_SEEDS: u64 = 20;
const FIRING_WINS_MIN: usize = 18;
const FIRING_STEPS: usize = 1000;
const REDUCTION_CASES: usize = 10_000;
const METRIC_CASES: usize = 100;
const METRIC_REL_TOL: f64 = 1e-12;
const ENCODING_EVENTS: usize = 100_000;
const LINEAR_VELOCITY_TOL: f64 = 1e-9;
const YAW_RATE_TOL: f64 = 0.1;
const VELOCITY_RE_MAX: f64 = 0.35;
const BASELINE_IMPROVEMENT_MIN: f64 = 0.40;
const DETERMINISM_EPOCHS: usize = 3;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn fmt_list(xs: &[f64]) -> String {
    let parts: Vec<String> = xs.iter().map(|x| format!("{x:.4e}")).collect();
    format!("[{}]", parts.join(", "))
}

struct SineRuns {
    aslstm: SineRun,
    slstm: SineRun,
}

fn train_sine(cell: CellKind, out: &Path) -> SineRun {
    let mut cfg = RunConfig::default();
    cfg.sine.model.cell = cell;
    let data = pipeline::sine_dataset(&cfg, None).expect("sine data");
    pipeline::train_sine(&cfg, &data, out, None).expect("sine training")
}

fn sine_fit(runs: &SineRuns) -> Outcome {
    let fit = &runs.aslstm.report.val.fit_rmse;
    let pass = fit.len() == 3 && fit.iter().all(|&r| r <= FIT_RMSE_MAX);
    outcome(
        pass,
        format!("fit RMSE {} (limit {FIT_RMSE_MAX:e} each)", fmt_list(fit)),
    )
}

fn sine_forecast(runs: &SineRuns) -> Outcome {
    let a = &runs.aslstm.report.val.forecast_rmse;
    let s = &runs.slstm.report.val.forecast_rmse;
    let bounded = a.iter().all(|&r| r <= FORECAST_RMSE_MAX);
    let beats = a.iter().zip(s).all(|(x, y)| x < y);
    outcome(
        bounded && beats && a.len() == 3,
        format!(
            "ASLSTM forecast RMSE {} (limit {FORECAST_RMSE_MAX}), SLSTM {}",
            fmt_list(a),
            fmt_list(s)
        ),
    )
}

fn sine_ordering(runs: &SineRuns) -> Outcome {
    let (a, s) = (&runs.aslstm.report.val, &runs.slstm.report.val);
    let fit = a.fit_rmse.iter().zip(&s.fit_rmse).all(|(x, y)| x < y);
    let fc = a.forecast_rmse.iter().zip(&s.forecast_rmse).all(|(x, y)| x < y);
    outcome(
        fit && fc,
        format!(
            "fit ASLSTM {} vs SLSTM {}; forecast ordering {}",
            fmt_list(&a.fit_rmse),
            fmt_list(&s.fit_rmse),
            if fc { "holds" } else { "violated" }
        ),
    )
}

fn firing_property() -> Outcome {
    let params = NeuronParams::new(0.9, 1.0, 0.5);
    let mut wins = 0;
    let mut worst = f64::INFINITY;
    for seed in 0..FIRING_SEEDS {
        let trace = pipeline::random_current(seed, FIRING_STEPS, 16, 0.0, 0.5);
        let lif = firing_profile(NeuronKind::Lif, &params, &trace).expect("lif");
        let alif = firing_profile(NeuronKind::Alif, &params, &trace).expect("alif");
        if alif.mean_rate >= lif.mean_rate {
            wins += 1;
        }
        worst = worst.min(alif.mean_rate - lif.mean_rate);
    }
    outcome(
        wins >= FIRING_WINS_MIN,
        format!("ALIF >= LIF on {wins}/{FIRING_SEEDS} seeds, smallest margin {worst:.4}"),
    )
}

fn diffusion_free_reduction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mismatches = 0;
    for _ in 0..REDUCTION_CASES {
        let n = rng.gen_range(1..8);
        let alpha = rng.gen_range(0.01..0.99);
        let v_th = rng.gen_range(0.1..2.0);
        let params = NeuronParams::new(alpha, v_th, 0.0);
        let state = NeuronState {
            v: (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            s: (0..n).map(|_| f64::from(u8::from(rng.gen_bool(0.5)))).collect(),
            v_final_prev_layer: (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect(),
        };
        let input: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let (a, sa) = alif_step(&state, &input, &params).expect("alif");
        let (l, sl) = lif_step(&state, &input, &params).expect("lif");
        let same = a.v.iter().zip(&l.v).all(|(x, y)| x.to_bits() == y.to_bits()) && sa == sl;
        if !same {
            mismatches += 1;
        }
    }
    outcome(
        mismatches == 0,
        format!("{mismatches} of {REDUCTION_CASES} random cases differ bitwise"),
    )
}

fn gradient_oracle() -> Outcome {
    let smooth = oracle::smooth_networks_worst();
    let spiking = oracle::spiking_networks_worst();
    outcome(
        smooth <= SMOOTH_GRAD_TOL && spiking <= SPIKING_GRAD_TOL,
        format!(
            "worst relative error {smooth:.2e} on smooth networks (limit {SMOOTH_GRAD_TOL:e}), {spiking:.2e} on spiking networks (limit {SPIKING_GRAD_TOL:e})"
        ),
    )
}

fn loss_value() -> Outcome {
    let pred = [0.0; 6];
    let gt = [3.0, 4.0, 0.0, 0.0, 0.0, 0.0];
    let scales = LossScaleState::<f64>::new(0.99);
    let l = velocity_loss(&pred, &gt, &scales).expect("loss");
    outcome(l.total == 2.5, format!("L = {}", l.total))
}

fn brute_rmse(p: &[f64], g: &[f64], dim: usize) -> f64 {
    let n = p.len() / dim;
    let mut acc = 0.0;
    for i in 0..n {
        let mut sq = 0.0;
        for k in 0..dim {
            let d = p[i * dim + k] - g[i * dim + k];
            sq += d * d;
        }
        acc += sq;
    }
    (acc / n as f64).sqrt()
}

fn brute_re(p: &[f64], g: &[f64], dim: usize) -> f64 {
    let n = p.len() / dim;
    let mut acc = 0.0;
    for i in 0..n {
        let (mut e, mut m) = (0.0f64, 0.0f64);
        for k in 0..dim {
            e += (p[i * dim + k] - g[i * dim + k]).powi(2);
            m += g[i * dim + k].powi(2);
        }
        acc += e.sqrt() / m.sqrt().max(1e-6);
    }
    acc / n as f64
}

fn metric_contracts() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    let mut exact = true;
    for _ in 0..METRIC_CASES {
        let dim = rng.gen_range(1..7);
        let n = rng.gen_range(1..50);
        let p: Vec<f64> = (0..n * dim).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let g: Vec<f64> = (0..n * dim).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let r = rmse(&p, &g, dim).expect("rmse");
        let re = relative_error(&p, &g, dim, 1e-6).expect("re");
        let (br, bre) = (brute_rmse(&p, &g, dim), brute_re(&p, &g, dim));
        worst = worst.max(((r - br) / br).abs()).max(((re - bre) / bre).abs());
        let mut report = MetricReport::default();
        report.add("angular", &p, &g, dim).expect("report");
        exact &= report.rmse_dagger["angular"] == 1000.0 * r;
        exact &= report.rmse_star_angular == Some(100.0 * r);
    }
    outcome(
        worst <= METRIC_REL_TOL && exact,
        format!("largest relative deviation {worst:.2e}; scaled RMSE conventions exact: {exact}"),
    )
}

fn encoding_invariants() -> Outcome {
    let spec = WindowSpec {
        window_duration: 0.01,
        n_bins: 4,
        t_steps: 5,
        sensor_h: 24,
        sensor_w: 32,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let t0 = 1_000u64;
    // the draw runs a little past the covered span so some events drop
    let mut events: Vec<Event> = (0..ENCODING_EVENTS)
        .map(|_| Event {
            t: t0 + rng.gen_range(0..spec.span_us() + spec.span_us() / 10),
            x: rng.gen_range(0..spec.sensor_w as u16),
            y: rng.gen_range(0..spec.sensor_h as u16),
            p: if rng.gen_bool(0.5) { 1 } else { -1 },
        })
        .collect();
    events.sort();
    let binned = bin_events(&events, &spec, Some(t0)).expect("bin");
    let tensor = encode_polarity(&binned, &spec).expect("encode");

    let mut partition = binned.assigned + binned.dropped == events.len();
    let mut seen = 0;
    let w = spec.window_us();
    for window in 0..spec.t_steps {
        for bin in 0..spec.n_bins {
            for e in binned.group(&spec, window, bin) {
                let dt = e.t - t0;
                let lo = window as u64 * w + (bin as u64 * w).div_ceil(spec.n_bins as u64);
                let hi = window as u64 * w + ((bin as u64 + 1) * w).div_ceil(spec.n_bins as u64);
                partition &= dt >= lo && dt < hi;
                seen += 1;
            }
        }
    }
    partition &= seen == binned.assigned;
    let beyond = events.iter().filter(|e| e.t - t0 >= spec.span_us()).count();
    partition &= beyond == binned.dropped;

    let binary = tensor.is_binary();
    let occupied: HashSet<(usize, usize, usize, usize)> = (0..spec.t_steps)
        .flat_map(|window| (0..spec.n_bins).map(move |bin| (window, bin)))
        .flat_map(|(window, bin)| {
            binned
                .group(&spec, window, bin)
                .iter()
                .map(move |e| (window, 2 * bin + e.channel_in_bin(), e.y as usize, e.x as usize))
        })
        .collect();
    let conserved = occupied.len() == tensor.popcount();

    let dir = tempfile::tempdir().expect("tempdir");
    let round_trip = (|| -> neurove::Result<bool> {
        let (txt, txt2, bin, bin2) = (
            dir.path().join("a.txt"),
            dir.path().join("b.txt"),
            dir.path().join("a.bin"),
            dir.path().join("b.bin"),
        );
        write_text(&txt, &events)?;
        let back = read_text(&txt)?;
        write_text(&txt2, &back)?;
        write_binary(&bin, &back)?;
        let back2 = read_binary(&bin)?;
        write_binary(&bin2, &back2)?;
        Ok(back == events
            && back2 == events
            && std::fs::read(&txt)? == std::fs::read(&txt2)?
            && std::fs::read(&bin)? == std::fs::read(&bin2)?)
    })()
    .unwrap_or(false);

    outcome(
        partition && binary && conserved && round_trip,
        format!(
            "{} events ({} assigned, {} dropped): partition {partition}, binary {binary}, occupancy {} = popcount {}, round trip {round_trip}",
            events.len(),
            binned.assigned,
            binned.dropped,
            occupied.len(),
            tensor.popcount()
        ),
    )
}

fn velocity_task() -> Outcome {
    let cfg = RunConfig::default();
    let data = match pipeline::velocity_dataset(&cfg, None) {
        Ok(d) => d,
        Err(e) => return outcome(false, format!("dataset generation failed: {e}")),
    };
    let dir = tempfile::tempdir().expect("tempdir");
    let run = match pipeline::train_velocity::<pipeline::VelocityScalar>(&cfg, &data, dir.path(), None) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("training failed: {e}")),
    };
    let r = &run.report;
    let re = r.val.report.re["linear"];
    let shape_ok = r.output_shape[1] == cfg.velocity.data.window.n_bins && r.output_shape[2] == 6;
    outcome(
        re <= VELOCITY_RE_MAX && r.linear_improvement >= BASELINE_IMPROVEMENT_MIN && shape_ok,
        format!(
            "{} train / {} val clips: linear RE {re:.3} (limit {VELOCITY_RE_MAX}), linear RMSE {:.4} vs mean baseline {:.4} ({:.1}% better, need {:.0}%), output shape {:?}",
            data.train.len(),
            data.val.len(),
            r.val.report.rmse["linear"],
            r.mean_baseline.rmse["linear"],
            100.0 * r.linear_improvement,
            100.0 * BASELINE_IMPROVEMENT_MIN,
            r.output_shape
        ),
    )
}

fn pose_recovery() -> Outcome {
    let v_world = Vector3::new(0.7, -0.2, 1.3);
    let tilt = UnitQuaternion::from_euler_angles(0.1, -0.05, 0.3);
    let poses: Vec<PoseSample> = (0..200)
        .map(|k| {
            let t = k as f64 * 1e-3;
            PoseSample {
                t,
                position: Vector3::new(0.5, 1.0, -2.0) + v_world * t,
                orientation: tilt,
            }
        })
        .collect();
    let recs = poses_to_velocity(&poses).expect("poses");
    let expected = tilt.inverse_transform_vector(&v_world);
    let lin_err = recs
        .iter()
        .flat_map(|r| (0..3).map(move |i| (r.linear[i] - expected[i]).abs()))
        .fold(0.0, f64::max);

    let rate = 10f64.to_radians();
    let poses: Vec<PoseSample> = (0..200)
        .map(|k| {
            let t = k as f64 * 1e-3;
            PoseSample {
                t,
                position: Vector3::zeros(),
                orientation: UnitQuaternion::from_euler_angles(0.0, 0.0, rate * t),
            }
        })
        .collect();
    let recs = poses_to_velocity(&poses).expect("poses");
    let yaw_err = recs.iter().map(|r| (r.angular[2] - 10.0).abs()).fold(0.0, f64::max);
    outcome(
        lin_err <= LINEAR_VELOCITY_TOL && yaw_err <= YAW_RATE_TOL,
        format!("linear error {lin_err:.2e} m/s, yaw-rate error {yaw_err:.2e} deg/s"),
    )
}

fn determinism() -> Outcome {
    let mut cfg = RunConfig::default();
    cfg.sine.train.epochs = DETERMINISM_EPOCHS;
    let data = pipeline::sine_dataset(&cfg, None).expect("sine data");
    let dir = tempfile::tempdir().expect("tempdir");
    let logs: Vec<Vec<u8>> = ["a", "b"]
        .iter()
        .map(|name| {
            let out = dir.path().join(name);
            pipeline::train_sine(&cfg, &data, &out, None).expect("sine training");
            std::fs::read(out.join(pipeline::EPOCH_LOG)).expect("epoch log")
        })
        .collect();
    outcome(
        logs[0] == logs[1] && !logs[0].is_empty(),
        format!(
            "{DETERMINISM_EPOCHS}-epoch logs of {} and {} bytes identical: {}",
            logs[0].len(),
            logs[1].len(),
            logs[0] == logs[1]
        ),
    )
}

fn main() {
    let only: Option<HashSet<usize>> = std::env::var("NEUROVE_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |i: usize| only.as_ref().map_or(true, |set| set.contains(&i));

    let sine = if (1..=3).any(wanted) {
        let dir = tempfile::tempdir().expect("tempdir");
        Some(SineRuns {
            aslstm: train_sine(CellKind::Aslstm, &dir.path().join("aslstm")),
            slstm: train_sine(CellKind::Slstm, &dir.path().join("slstm")),
        })
    } else {
        None
    };

    type Check<'a> = Box<dyn Fn() -> Outcome + 'a>;
    let criteria: Vec<(usize, &str, Check)> = vec![
        (1, "sine fit regression", Box::new(|| sine_fit(sine.as_ref().unwrap()))),
        (
            2,
            "sine closed-loop forecast",
            Box::new(|| sine_forecast(sine.as_ref().unwrap())),
        ),
        (
            3,
            "ASLSTM beats SLSTM",
            Box::new(|| sine_ordering(sine.as_ref().unwrap())),
        ),
        (4, "ALIF fires at least as often as LIF", Box::new(firing_property)),
        (
            5,
            "zero diffusion reduces ALIF to LIF",
            Box::new(diffusion_free_reduction),
        ),
        (6, "gradients match finite differences", Box::new(gradient_oracle)),
        (7, "velocity loss value", Box::new(loss_value)),
        (8, "metric contracts", Box::new(metric_contracts)),
        (9, "event encoding invariants", Box::new(encoding_invariants)),
        (10, "synthetic velocity task", Box::new(velocity_task)),
        (11, "pose differentiation", Box::new(pose_recovery)),
        (12, "end-to-end determinism", Box::new(determinism)),
    ];

    let mut failed = Vec::new();
    for (id, name, check) in &criteria {
        if !wanted(*id) {
            continue;
        }
        let start = Instant::now();
        let o = check();
        println!(
            "{} [{id:>2}] {name}: {} ({:.1}s)",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            start.elapsed().as_secs_f64()
        );
        if !o.pass {
            failed.push(*id);
        }
    }
    if !failed.is_empty() {
        println!("acceptance: criteria {failed:?} failed");
        std::process::exit(1);
    }
    println!("acceptance: all selected criteria passed");
}
