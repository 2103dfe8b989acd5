//! Acceptance criteria, one PASS/FAIL line each. Run with `cargo test --test acceptance`.

use std::time::Instant;

use pitchcatch::numerics::fit_slope;
use pitchcatch::pulseshaper::{
    analytic_sech_control, control_from_field, max_correctable_distortion, DmaxMethod,
    EffectiveModel, EffectiveModelParams, SynthesisOptions,
};
use pitchcatch::scalar::{sech, Cx};
use pitchcatch::scenario::{
    calibration_report, mhz_to_rad_per_ns, run_scenario, sweep_kappa, write_results_csv,
    ResultRecord, ScenarioConfig, Strategy,
};
use pitchcatch::simulator::{estimate_from_series, EstimatorOptions};
use pitchcatch::wavepacket::{analytic_overlap_series, chirp_overlap, sech_field, TimeGrid};

struct Outcome {
    pass: bool,
    detail: String,
}

fn report(n: usize, title: &str, secs: f64, budget: Option<f64>, o: Outcome) -> bool {
    let in_time = budget.is_none_or(|b| secs < b);
    let pass = o.pass && in_time;
    let budget = budget
        .map(|b| format!(" (budget {b} s)"))
        .unwrap_or_default();
    println!(
        "criterion {n} {}: {title}: {}; {secs:.2} s{budget}",
        if pass { "PASS" } else { "FAIL" },
        o.detail
    );
    pass
}

fn timed<R>(f: impl FnOnce() -> R) -> (R, f64) {
    let t = Instant::now();
    let r = f();
    (r, t.elapsed().as_secs_f64())
}

fn standard_pulse() -> Outcome {
    let kappa = mhz_to_rad_per_ns(200.0);
    let grid = TimeGrid::symmetric_with_step(10.0 / kappa, 0.002 / kappa).unwrap();
    let target = sech_field(kappa, 0.0, &grid);
    let s = control_from_field(
        &target,
        &EffectiveModelParams::markovian(kappa),
        &SynthesisOptions::default(),
    )
    .unwrap();
    let mut err = 0.0f64;
    for (i, g) in s.control.samples.iter().enumerate() {
        let exact = 0.5 * kappa * sech(0.5 * kappa * grid.time(i));
        err = err.max((g - exact).norm());
    }
    let rel = err / (0.5 * kappa);
    Outcome {
        pass: rel < 1e-6,
        detail: format!("sup rel err {rel:.2e} (< 1e-6)"),
    }
}

fn pulse_fidelity_gain() -> Outcome {
    let cfg = ScenarioConfig::preset_pulse(5.0).at_kappa(200.0);
    let recs = run_scenario(&cfg).unwrap();
    let get = |s: Strategy| {
        recs.iter()
            .find(|r| r.strategy == s)
            .and_then(|r| r.infidelity)
            .unwrap_or(f64::NAN)
    };
    let (m, n) = (
        get(Strategy::MarkovCorrected),
        get(Strategy::NonmarkovCorrected),
    );
    let ratio = m / n;
    Outcome {
        pass: ratio >= 5.0,
        detail: format!("1-F markov {m:.3e}, corrected {n:.3e}, ratio {ratio:.1} (>= 5)"),
    }
}

fn parameter_extraction() -> Outcome {
    let kappa = mhz_to_rad_per_ns(200.0);
    let mut worst = 0.0f64;
    for (shift, n) in [
        (0.05, Cx::new(0.04, 0.02)),
        (-0.03, Cx::new(0.1, -0.05)),
        (0.02, Cx::new(0.02, 0.01)),
    ] {
        let params = EffectiveModelParams::new(kappa, shift, n).unwrap();
        let model = EffectiveModel::resonant(params);
        let grid = TimeGrid::symmetric(12.0 / kappa, 6001).unwrap();
        let g = analytic_sech_control(kappa, 0.0, 0.0, &grid).unwrap();
        let tr = model.simulate(
            |t| g.value_at(t),
            &grid,
            Cx::new(1.0, 0.0),
            Cx::new(0.0, 0.0),
        );
        let gamma: Vec<Cx<f64>> = (0..grid.len)
            .map(|i| -(tr.c_dot[i] + Cx::<f64>::i() * g.samples[i].conj() * tr.q[i]))
            .collect();
        let e = estimate_from_series(
            &grid,
            &tr.c,
            &tr.c_dot,
            &gamma,
            &EstimatorOptions::default(),
        )
        .unwrap()
        .params;
        worst = worst
            .max((e.kappa / kappa - 1.0).abs())
            .max((e.lamb_shift / shift - 1.0).abs())
            .max((e.non_markov - n).norm() / n.norm());
    }
    let rep = calibration_report(&ScenarioConfig::preset_calibration()).unwrap();
    let dw = rep.estimate.params.lamb_shift / rep.kappa;
    let re = rep.estimate.mean_ratio.re / (0.5 * rep.kappa) - 1.0;
    let pass = worst < 0.02 && dw.abs() <= 0.02 && re.abs() < 0.05;
    Outcome {
        pass,
        detail: format!(
            "synthetic worst rel err {worst:.2e} (< 2%); linear link δω/κ = {dw:.2e} (|·| <= 0.02), <Re Γ/c>/(κ/2) - 1 = {re:.2e} (|·| < 5%)"
        ),
    }
}

fn memory_plateau() -> Outcome {
    let rep = calibration_report(&ScenarioConfig::preset_calibration()).unwrap();
    let e = &rep.estimate;
    let kept = e.memory_samples as f64 / e.grid.len as f64;
    Outcome {
        pass: e.memory_relative_std < 0.3,
        detail: format!(
            "relative std of N(t) {:.3} (< 0.3), N = {:.4e}{:+.2e}i, {:.0}% of samples unmasked",
            e.memory_relative_std,
            e.memory_mean.re,
            e.memory_mean.im,
            100.0 * kept
        ),
    }
}

fn dmax_law() -> Outcome {
    let mut worst = 0.0f64;
    for mhz in [25.0, 50.0, 100.0, 200.0, 400.0] {
        let kappa = mhz_to_rad_per_ns(mhz);
        let scan = max_correctable_distortion(kappa, DmaxMethod::Scan).unwrap();
        let law = 3.0 / (2.0 * 5f64.sqrt() * kappa * kappa);
        worst = worst.max((scan / law - 1.0).abs());
    }
    Outcome {
        pass: worst < 0.15,
        detail: format!("worst |scan/law - 1| = {:.2}% (< 15%)", 100.0 * worst),
    }
}

fn overlap_series() -> Outcome {
    let kappa = 1.0;
    let xs: Vec<f64> = (0..8).map(|i| 0.05 * 10f64.powf(i as f64 / 7.0)).collect();
    let mut lx = Vec::new();
    let mut lr = Vec::new();
    for x in &xs {
        let d = x / (kappa * kappa);
        let r = chirp_overlap(kappa, d).unwrap() - analytic_overlap_series(d, kappa);
        lx.push(x.ln());
        lr.push(r.abs().ln());
    }
    let slope = fit_slope(&lx, &lr);
    Outcome {
        pass: (slope - 4.0).abs() <= 0.2,
        detail: format!("log-log residual slope {slope:.3} (4 ± 0.2)"),
    }
}

fn infidelity(recs: &[ResultRecord], kappa: f64, s: Strategy) -> Option<f64> {
    recs.iter()
        .find(|r| r.kappa_mhz == kappa && r.strategy == s && r.is_ok())
        .and_then(|r| r.infidelity)
}

fn distortion_correction(short: &[ResultRecord], long: &[ResultRecord]) -> Outcome {
    let mut pass = true;
    let mut detail = Vec::new();
    for (name, recs) in [("5 m", short), ("60 m", long)] {
        let k = recs.iter().map(|r| r.kappa_mhz).fold(f64::MIN, f64::max);
        let blue = infidelity(recs, k, Strategy::IdealSech).unwrap_or(f64::NAN);
        let green = infidelity(recs, k, Strategy::NonmarkovCorrected).unwrap_or(f64::NAN);
        pass &= blue >= 1e-2 && green * 100.0 <= blue;
        detail.push(format!("{name} @ {k} MHz: sech {blue:.3e} (>= 1e-2), corrected {green:.3e}, ratio {:.0} (>= 100)", blue / green));
    }
    Outcome {
        pass,
        detail: detail.join("; "),
    }
}

fn strategy_ordering(sets: &[(&str, &[ResultRecord])]) -> Outcome {
    let mut checked = 0;
    let mut bad = Vec::new();
    for (name, recs) in sets {
        let mut kappas: Vec<f64> = recs.iter().map(|r| r.kappa_mhz).collect();
        kappas.sort_by(f64::total_cmp);
        kappas.dedup();
        for k in kappas {
            let (Some(b), Some(o), Some(g)) = (
                infidelity(recs, k, Strategy::IdealSech),
                infidelity(recs, k, Strategy::MarkovCorrected),
                infidelity(recs, k, Strategy::NonmarkovCorrected),
            ) else {
                continue;
            };
            checked += 1;
            if g > 1.1 * o || o > 1.1 * b {
                bad.push(format!("{name} {k} MHz: {g:.2e} / {o:.2e} / {b:.2e}"));
            }
        }
    }
    Outcome {
        pass: bad.is_empty() && checked > 0,
        detail: if bad.is_empty() {
            format!("green <= orange <= blue (10% slack) at all {checked} feasible points")
        } else {
            format!("violations: {}", bad.join(", "))
        },
    }
}

fn hygiene(recs: &[ResultRecord], rerun_identical: bool) -> Outcome {
    let drift = recs.iter().filter_map(|r| r.norm_drift).fold(0.0, f64::max);
    let delta = recs
        .iter()
        .filter_map(|r| r.step_doubling_delta)
        .fold(0.0, f64::max);
    let all_certified = recs
        .iter()
        .filter(|r| r.is_ok())
        .all(|r| r.norm_drift.is_some() && r.step_doubling_delta.is_some());
    Outcome {
        pass: drift < 1e-9 && delta < 1e-6 && all_certified && rerun_identical,
        detail: format!(
            "max norm drift {drift:.2e} (< 1e-9), max step-doubling change {delta:.2e} (< 1e-6), byte-identical rerun: {rerun_identical}"
        ),
    }
}

fn main() {
    let mut ok = true;
    let (o, t) = timed(standard_pulse);
    ok &= report(1, "standard-pulse recovery", t, Some(1.0), o);
    let (o, t) = timed(pulse_fidelity_gain);
    ok &= report(
        2,
        "Markov vs memory-corrected pulse fidelity",
        t,
        Some(30.0),
        o,
    );
    let (o, t) = timed(parameter_extraction);
    ok &= report(3, "parameter extraction", t, Some(60.0), o);
    let (o, t) = timed(memory_plateau);
    ok &= report(4, "memory-parameter plateau", t, Some(60.0), o);
    let (o, t) = timed(dmax_law);
    ok &= report(5, "D_max law", t, Some(120.0), o);
    let (o, t) = timed(overlap_series);
    ok &= report(6, "chirp overlap series", t, Some(10.0), o);

    let short_cfg = ScenarioConfig::preset_wr90(5.0);
    let ((short, long), t) = timed(|| {
        let short = sweep_kappa(&short_cfg, 2, &|_| {}).unwrap();
        let long_cfg = ScenarioConfig::preset_wr90(60.0);
        let top = long_cfg.kappas().into_iter().fold(f64::MIN, f64::max);
        let long = run_scenario(&long_cfg.at_kappa(top)).unwrap();
        (short, long)
    });
    ok &= report(
        7,
        "end-to-end distortion correction",
        t,
        Some(600.0),
        distortion_correction(&short, &long),
    );

    let sets: [(&str, &[ResultRecord]); 2] = [("5 m", &short), ("60 m", &long)];
    ok &= report(8, "strategy ordering", 0.0, None, strategy_ordering(&sets));

    let (identical, t) = timed(|| {
        let again = sweep_kappa(&short_cfg, 1, &|_| {}).unwrap();
        let mut a = Vec::new();
        let mut b = Vec::new();
        write_results_csv(&short, &mut a).unwrap();
        write_results_csv(&again, &mut b).unwrap();
        a == b
    });
    let mut every = short;
    every.extend(long);
    ok &= report(9, "numerical hygiene", t, None, hygiene(&every, identical));

    if !ok {
        std::process::exit(1);
    }
}
