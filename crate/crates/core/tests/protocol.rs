use std::sync::Mutex;

use pitchcatch::scenario::{
    calibration_report, mhz_to_rad_per_ns, run_scenario, sweep_kappa, write_results_csv,
    Experiment, PointSetup, ScenarioConfig, Strategy,
};

#[test]
fn corrected_transfer_over_linear_link() {
    let mut c = ScenarioConfig::preset_pulse(5.0).at_kappa(200.0);
    c.experiment = Experiment::Transfer;
    c.protocol.strategies = vec![Strategy::NonmarkovCorrected];
    let r = run_scenario(&c).unwrap();
    assert!(r[0].f_transfer.unwrap() > 0.999, "{:?}", r[0]);
    assert!(r[0].norm_drift.unwrap() < 1e-9);
}

#[test]
fn single_point_sweep_matches_run_scenario() {
    let mut c = ScenarioConfig::preset_pulse(5.0);
    c.sweep.kappa_mhz = vec![100.0];
    c.protocol.step_doubling = false;
    let swept = sweep_kappa(&c, 1, &|_| {}).unwrap();
    let direct = run_scenario(&c.at_kappa(100.0)).unwrap();
    let csv = |r: &[_]| {
        let mut b = Vec::new();
        write_results_csv(r, &mut b).unwrap();
        b
    };
    assert_eq!(csv(&swept), csv(&direct));
}

#[test]
fn sweep_streams_every_record_and_keeps_order() {
    let mut c = ScenarioConfig::preset_pulse(5.0);
    c.sweep.kappa_mhz = vec![150.0, 50.0, 100.0];
    c.protocol.step_doubling = false;
    let seen = Mutex::new(Vec::new());
    let out = sweep_kappa(&c, 3, &|r| {
        seen.lock().unwrap().push((r.kappa_mhz, r.strategy))
    })
    .unwrap();
    let order: Vec<(f64, Strategy)> = out.iter().map(|r| (r.kappa_mhz, r.strategy)).collect();
    let expected: Vec<(f64, Strategy)> = [150.0, 50.0, 100.0]
        .into_iter()
        .flat_map(|k| {
            [
                (k, Strategy::MarkovCorrected),
                (k, Strategy::NonmarkovCorrected),
            ]
        })
        .collect();
    assert_eq!(order, expected);
    let mut seen = seen.into_inner().unwrap();
    seen.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut exp = expected.clone();
    exp.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    assert_eq!(seen, exp);
}

#[test]
fn too_much_distortion_is_flagged_not_fatal() {
    let mut c = ScenarioConfig::preset_wr90(5.0).at_kappa(400.0);
    c.protocol.step_doubling = false;
    let r = run_scenario(&c).unwrap();
    assert_eq!(r.len(), 3);
    assert!(r[0].is_ok() && r[0].feasible);
    for rec in &r[1..] {
        assert!(!rec.feasible && rec.status == "infeasible", "{rec:?}");
        assert!(rec.distortion_imprinted > rec.d_max && rec.d_max > 0.0);
        assert!(rec.f_transfer.is_none());
    }
}

#[test]
fn uncorrected_infidelity_rises_with_kappa() {
    let mut c = ScenarioConfig::preset_wr90(5.0);
    c.protocol.strategies = vec![Strategy::IdealSech];
    c.protocol.step_doubling = false;
    let r = sweep_kappa(&c, 1, &|_| {}).unwrap();
    let inf: Vec<f64> = r.iter().map(|x| x.infidelity.unwrap()).collect();
    assert!(inf.windows(2).all(|w| w[1] > w[0]), "{inf:?}");
}

#[test]
fn calibration_csv_has_the_three_panels() {
    let rep = calibration_report(&ScenarioConfig::preset_calibration()).unwrap();
    let mut buf = Vec::new();
    rep.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "t,re_2gamma_over_kappa_c,im_2gamma_over_kappa_c,abs_n,arg_n"
    );
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), rep.trajectory.grid.len);
    let im: Vec<f64> = rows.iter().filter_map(|r| r[2].parse().ok()).collect();
    let mean = im.iter().sum::<f64>() / im.len() as f64;
    assert!(mean.abs() < 1e-6, "{mean}");
}

#[test]
fn wr90_calibration_sees_a_lamb_shift() {
    let mut c = ScenarioConfig::preset_calibration();
    c.link = ScenarioConfig::wr90_link(5.0, 351, 8.6);
    let rep = calibration_report(&c).unwrap();
    let p = rep.params();
    assert!(p.lamb_shift.abs() > 0.01 * rep.kappa, "{p:?}");
    assert!((p.kappa / mhz_to_rad_per_ns(200.0) - 1.0).abs() < 0.05);
}

#[test]
fn explicit_parameters_skip_calibration() {
    let mut c = ScenarioConfig::preset_pulse(5.0).at_kappa(200.0);
    c.calibration.enabled = false;
    c.protocol.explicit = Some(pitchcatch::scenario::ExplicitParams {
        kappa_mhz: None,
        lamb_shift_mhz: 0.0,
        non_markov: [0.0177, 0.0],
    });
    let s = PointSetup::new(&c).unwrap();
    assert!(!s.calibrated);
    assert_eq!(s.params.non_markov.re, 0.0177);
    let r = run_scenario(&c).unwrap();
    assert!(r[1].infidelity.unwrap() < 1e-6, "{:?}", r[1]);
}
