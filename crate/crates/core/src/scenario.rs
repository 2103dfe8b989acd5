//! Declarative experiments: a JSON scenario describes the link, the nodes and the
//! protocol; running it calibrates the effective model, synthesizes controls for
//! each strategy and simulates the full system.

use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linkmodel::{
    CouplingLaw, DispersionRelation, Link, ModeGrid, Node, NodeCoupling, LIGHT_SPEED, WR90_WIDTH,
};
use crate::pulseshaper::{
    analytic_sech_control, control_from_field, max_correctable_distortion, receiver_control,
    ControlPulse, DmaxMethod, EffectiveModelParams, SynthesisOptions,
};
use crate::scalar::{cis, Cx};
use crate::simulator::{
    estimate_params, run_emission, run_transfer, transfer_fidelity, EstimatorMethod,
    EstimatorOptions, Integrator, LinkSystem, ParameterEstimate, SimConfig, Trajectory,
};
use crate::wavepacket::{
    distortion_parameter, predistorted_sech_field, sech_spectrum, PhaseModel, TimeGrid,
};

pub const SCHEMA_VERSION: u32 = 1;

/// `2 pi * MHz` in rad/ns.
pub fn mhz_to_rad_per_ns(mhz: f64) -> f64 {
    std::f64::consts::TAU * mhz * 1e-3
}

/// `2 pi * GHz` in rad/ns.
pub fn ghz_to_rad_per_ns(ghz: f64) -> f64 {
    std::f64::consts::TAU * ghz
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DispersionSpec {
    Linear {
        /// m/ns
        group_velocity: f64,
        /// rad/ns
        #[serde(default)]
        offset: f64,
    },
    Wr90,
    RectangularGuide {
        width: f64,
        #[serde(default = "default_light_speed")]
        light_speed: f64,
    },
}

fn default_light_speed() -> f64 {
    LIGHT_SPEED
}

impl DispersionSpec {
    pub fn build(&self) -> DispersionRelation<f64> {
        match *self {
            Self::Linear {
                group_velocity,
                offset,
            } => DispersionRelation::Linear {
                group_velocity,
                offset,
            },
            Self::Wr90 => DispersionRelation::rectangular(WR90_WIDTH),
            Self::RectangularGuide { width, light_speed } => {
                DispersionRelation::RectangularGuide { light_speed, width }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSpec {
    pub length: f64,
    pub dispersion: DispersionSpec,
    pub modes: usize,
    /// Carrier as a frequency; the nearest mode becomes the grid centre.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub carrier_ghz: Option<f64>,
    /// Carrier as a mode number, used when no frequency is given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub carrier_mode: Option<u64>,
    #[serde(default)]
    pub coupling_law: CouplingLaw,
}

impl LinkSpec {
    pub fn build(&self) -> Result<Link<f64>> {
        let disp = self.dispersion.build();
        let grid = match (self.carrier_ghz, self.carrier_mode) {
            (Some(f), _) => {
                ModeGrid::around_frequency(self.length, &disp, ghz_to_rad_per_ns(f), self.modes)?
            }
            (None, Some(m)) => ModeGrid::centered(self.length, m, self.modes)?,
            (None, None) => {
                return Err(Error::Config(
                    "link needs carrier_ghz or carrier_mode".into(),
                ))
            }
        };
        Link::new(grid, disp)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    /// `kappa / 2 pi` in MHz; used when the sweep list is empty.
    pub kappa_mhz: f64,
    /// Resonator frequency relative to the carrier, `/ 2 pi` in MHz.
    #[serde(default)]
    pub resonator_offset_mhz: f64,
}

/// The three control strategies compared in the transfer experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// `g = (kappa/2) sech(kappa t / 2)`, no predistortion.
    IdealSech,
    /// Predistorted photon, control from the Markovian model.
    MarkovCorrected,
    /// Predistorted photon, control including the memory correction.
    NonmarkovCorrected,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Self::IdealSech => "ideal_sech",
            Self::MarkovCorrected => "markov_corrected",
            Self::NonmarkovCorrected => "nonmarkov_corrected",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    /// Full pitch-and-catch; reports `|q_2(t_f)|^2`.
    #[default]
    Transfer,
    /// Emission from node A only; reports the overlap of the emitted photon with the target.
    PulseFidelity,
}

/// Parameters used instead of a calibration run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplicitParams {
    /// Defaults to the configured kappa.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa_mhz: Option<f64>,
    #[serde(default)]
    pub lamb_shift_mhz: f64,
    #[serde(default)]
    pub non_markov: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolSpec {
    /// Half-width of the simulation window in units of `1/kappa`.
    pub window: f64,
    pub steps: usize,
    pub strategies: Vec<Strategy>,
    /// Fraction of the link distortion precompensated by each node.
    #[serde(default = "default_share")]
    pub distortion_share: [f64; 2],
    #[serde(default)]
    pub integrator: Integrator,
    #[serde(default)]
    pub phase_model: PhaseModel,
    /// Control sampling step in units of `1/kappa`.
    #[serde(default = "default_control_step")]
    pub control_step: f64,
    /// Minimum clearance, in `1/kappa`, between a pulse centre and the window edge.
    #[serde(default = "default_margin")]
    pub margin: f64,
    /// Repeat every run at twice the step count and report the change.
    #[serde(default = "default_true")]
    pub step_doubling: bool,
    #[serde(default = "default_dmax_method")]
    pub dmax_method: DmaxMethod,
    /// Upper bound on `|ω_k - ω_c| dt`; the step count is raised to respect it.
    #[serde(default = "default_max_phase")]
    pub max_phase_per_step: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explicit: Option<ExplicitParams>,
}

fn default_share() -> [f64; 2] {
    [0.5, 0.5]
}
fn default_control_step() -> f64 {
    0.01
}
fn default_margin() -> f64 {
    20.0
}
fn default_true() -> bool {
    true
}
fn default_max_phase() -> f64 {
    std::f64::consts::FRAC_PI_8
}
fn default_dmax_method() -> DmaxMethod {
    DmaxMethod::ClosedForm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationSpec {
    #[serde(default = "default_true")]
    pub enabled: bool,
    /// Half-width of the pilot window in units of `1/kappa`.
    #[serde(default = "default_pilot_window")]
    pub window: f64,
    #[serde(default = "default_pilot_steps")]
    pub steps: usize,
    #[serde(default = "default_cavity_mask")]
    pub cavity_mask: f64,
    #[serde(default = "default_rate_mask")]
    pub rate_mask: f64,
    #[serde(default)]
    pub method: EstimatorMethod,
}

fn default_pilot_window() -> f64 {
    12.0
}
fn default_pilot_steps() -> usize {
    5000
}
fn default_cavity_mask() -> f64 {
    1e-3
}
fn default_rate_mask() -> f64 {
    1e-2
}

impl Default for CalibrationSpec {
    fn default() -> Self {
        Self {
            enabled: true,
            window: default_pilot_window(),
            steps: default_pilot_steps(),
            cavity_mask: default_cavity_mask(),
            rate_mask: default_rate_mask(),
            method: EstimatorMethod::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(default)]
    pub kappa_mhz: Vec<f64>,
}

impl SweepSpec {
    /// `per_decade` log-spaced points from `lo` to `hi` inclusive.
    pub fn log_spaced(lo: f64, hi: f64, per_decade: usize) -> Self {
        let decades = (hi / lo).log10();
        let n = ((decades * per_decade as f64).round() as usize).max(1);
        let kappa_mhz = (0..=n)
            .map(|i| lo * 10f64.powf(decades * i as f64 / n as f64))
            .collect();
        Self { kappa_mhz }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default = "default_results")]
    pub results: String,
    #[serde(default = "default_resolved")]
    pub resolved_config: String,
    #[serde(default = "default_timings")]
    pub timings: String,
    #[serde(default = "default_progress")]
    pub progress: String,
    /// Also write per-run trajectory and control CSVs.
    #[serde(default)]
    pub traces: bool,
}

fn default_results() -> String {
    "results.csv".into()
}
fn default_resolved() -> String {
    "config.json".into()
}
fn default_timings() -> String {
    "timings.csv".into()
}
fn default_progress() -> String {
    "progress.jsonl".into()
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self {
            results: default_results(),
            resolved_config: default_resolved(),
            timings: default_timings(),
            progress: default_progress(),
            traces: false,
        }
    }
}

/// A complete experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub schema_version: u32,
    pub id: String,
    #[serde(default)]
    pub experiment: Experiment,
    pub link: LinkSpec,
    pub nodes: NodeSpec,
    pub protocol: ProtocolSpec,
    #[serde(default)]
    pub calibration: CalibrationSpec,
    #[serde(default)]
    pub sweep: SweepSpec,
    #[serde(default)]
    pub outputs: OutputSpec,
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Pretty JSON with every default filled in.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "unsupported schema_version {}, expected {SCHEMA_VERSION}",
                self.schema_version
            ));
        }
        if !(self.link.length > 0.0) || self.link.modes < 3 {
            return bad("link needs a positive length and at least 3 modes".into());
        }
        for k in self.kappas() {
            if !(k > 0.0) || !k.is_finite() {
                return bad(format!("kappa must be positive, got {k} MHz"));
            }
        }
        let p = &self.protocol;
        if !(p.window > 0.0)
            || p.steps < 2
            || !(p.control_step > 0.0)
            || !(p.margin >= 0.0)
            || !(p.max_phase_per_step > 0.0)
        {
            return bad("protocol needs window > 0, steps >= 2, control_step > 0 and max_phase_per_step > 0".into());
        }
        if p.strategies.is_empty() {
            return bad("no strategies selected".into());
        }
        let mut seen = p.strategies.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != p.strategies.len() {
            return bad("strategies must not repeat".into());
        }
        if p.distortion_share.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return bad("distortion_share entries must lie in [0, 1]".into());
        }
        let needs_model = p.strategies.iter().any(|s| *s != Strategy::IdealSech);
        if needs_model && !self.calibration.enabled && p.explicit.is_none() {
            return bad(
                "corrected strategies need a calibration stage or explicit parameters".into(),
            );
        }
        if let Some(e) = p.explicit {
            if !(e.non_markov[0].hypot(e.non_markov[1]) < 1.0) {
                return bad("explicit |N| must be below 1".into());
            }
        }
        if self.calibration.enabled
            && (!(self.calibration.window > 0.0) || self.calibration.steps < 2)
        {
            return bad("calibration needs window > 0 and steps >= 2".into());
        }
        self.link.build()?;
        Ok(())
    }

    /// Sweep values, or the single node kappa when the sweep is empty.
    pub fn kappas(&self) -> Vec<f64> {
        if self.sweep.kappa_mhz.is_empty() {
            vec![self.nodes.kappa_mhz]
        } else {
            self.sweep.kappa_mhz.clone()
        }
    }

    /// Copy with a single kappa and no sweep.
    pub fn at_kappa(&self, kappa_mhz: f64) -> Self {
        let mut c = self.clone();
        c.nodes.kappa_mhz = kappa_mhz;
        c.sweep.kappa_mhz.clear();
        c
    }

    fn base(
        id: &str,
        link: LinkSpec,
        kappa_mhz: f64,
        window: f64,
        strategies: Vec<Strategy>,
    ) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            id: id.into(),
            experiment: Experiment::Transfer,
            link,
            nodes: NodeSpec {
                kappa_mhz,
                resonator_offset_mhz: 0.0,
            },
            protocol: ProtocolSpec {
                window,
                steps: 2000,
                strategies,
                distortion_share: default_share(),
                integrator: Integrator::default(),
                phase_model: PhaseModel::default(),
                control_step: default_control_step(),
                margin: default_margin(),
                step_doubling: true,
                dmax_method: default_dmax_method(),
                max_phase_per_step: default_max_phase(),
                explicit: None,
            },
            calibration: CalibrationSpec::default(),
            sweep: SweepSpec::default(),
            outputs: OutputSpec::default(),
        }
    }

    /// Linear, flat-coupling link: `v_g = 0.2 m/ns`, carrier at 10 GHz (mode 500 for 5 m).
    pub fn linear_link(length: f64, modes: usize) -> LinkSpec {
        LinkSpec {
            length,
            dispersion: DispersionSpec::Linear {
                group_velocity: 0.2,
                offset: 0.0,
            },
            modes,
            carrier_ghz: None,
            carrier_mode: Some((100.0 * length).round() as u64),
            coupling_law: CouplingLaw::Flat,
        }
    }

    /// WR90 guide with the physical coupling law.
    pub fn wr90_link(length: f64, modes: usize, carrier_ghz: f64) -> LinkSpec {
        LinkSpec {
            length,
            dispersion: DispersionSpec::Wr90,
            modes,
            carrier_ghz: Some(carrier_ghz),
            carrier_mode: None,
            coupling_law: CouplingLaw::Physical,
        }
    }

    /// Single-node emission on the 5 m linear link at 200 MHz.
    pub fn preset_calibration() -> Self {
        let mut c = Self::base(
            "calibration_5m",
            Self::linear_link(5.0, 351),
            200.0,
            12.0,
            vec![Strategy::IdealSech],
        );
        c.experiment = Experiment::PulseFidelity;
        c.protocol.step_doubling = false;
        c
    }

    /// Markov vs memory-corrected emission on a linear link.
    pub fn preset_pulse(length: f64) -> Self {
        let (modes, window, id, sweep) = if length > 10.0 {
            (
                4000,
                100.0,
                "pulse_60m",
                SweepSpec::log_spaced(10.0, 100.0, 6),
            )
        } else {
            (351, 40.0, "pulse_5m", SweepSpec::log_spaced(25.0, 400.0, 6))
        };
        let mut c = Self::base(
            id,
            Self::linear_link(length, modes),
            200.0,
            window,
            vec![Strategy::MarkovCorrected, Strategy::NonmarkovCorrected],
        );
        c.experiment = Experiment::PulseFidelity;
        c.sweep = sweep;
        c
    }

    /// Transfer across a WR90 guide, all three strategies.
    pub fn preset_wr90(length: f64) -> Self {
        let all = vec![
            Strategy::IdealSech,
            Strategy::MarkovCorrected,
            Strategy::NonmarkovCorrected,
        ];
        if length > 10.0 {
            let mut c = Self::base(
                "wr90_60m",
                Self::wr90_link(60.0, 4000, 8.4),
                80.0,
                100.0,
                all,
            );
            c.sweep = SweepSpec {
                kappa_mhz: vec![10.0, 20.0, 40.0, 60.0, 80.0],
            };
            c
        } else {
            let mut c = Self::base("wr90_5m", Self::wr90_link(5.0, 351, 8.6), 300.0, 40.0, all);
            c.sweep = SweepSpec {
                kappa_mhz: vec![25.0, 50.0, 100.0, 200.0, 300.0],
            };
            c
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        Some(match name {
            "calibration_5m" => Self::preset_calibration(),
            "pulse_5m" => Self::preset_pulse(5.0),
            "pulse_60m" => Self::preset_pulse(60.0),
            "wr90_5m" => Self::preset_wr90(5.0),
            "wr90_60m" => Self::preset_wr90(60.0),
            _ => return None,
        })
    }

    pub const PRESETS: [&'static str; 5] = [
        "calibration_5m",
        "pulse_5m",
        "pulse_60m",
        "wr90_5m",
        "wr90_60m",
    ];
}

/// One line of the result table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub scenario: String,
    pub kappa_mhz: f64,
    pub strategy: Strategy,
    pub f_pulse: Option<f64>,
    pub f_transfer: Option<f64>,
    pub infidelity: Option<f64>,
    pub kappa_est_mhz: Option<f64>,
    pub lamb_shift_mhz: Option<f64>,
    pub non_markov: Option<[f64; 2]>,
    /// Total link distortion `D` (ns²).
    pub distortion: f64,
    /// Largest per-node share of `D` that was imprinted.
    pub distortion_imprinted: f64,
    pub d_max: f64,
    pub feasible: bool,
    pub norm_drift: Option<f64>,
    pub step_doubling_delta: Option<f64>,
    pub steps: usize,
    pub status: String,
    /// Seconds; kept out of the result table so reruns are byte-identical.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_time: Option<f64>,
}

pub const RESULTS_HEADER: &str = "scenario,kappa_mhz,strategy,f_pulse,f_transfer,infidelity,kappa_est_mhz,lamb_shift_mhz,n_re,n_im,distortion_ns2,distortion_imprinted_ns2,d_max_ns2,feasible,norm_drift,step_doubling_delta,steps,status";

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:e}")).unwrap_or_default()
}

impl ResultRecord {
    pub fn csv_row(&self) -> String {
        let (nr, ni) = match self.non_markov {
            Some([a, b]) => (Some(a), Some(b)),
            None => (None, None),
        };
        let status = self.status.replace([',', '\n'], ";");
        format!(
            "{},{:e},{},{},{},{},{},{},{},{},{:e},{:e},{:e},{},{},{},{},{}",
            self.scenario,
            self.kappa_mhz,
            self.strategy.name(),
            opt(self.f_pulse),
            opt(self.f_transfer),
            opt(self.infidelity),
            opt(self.kappa_est_mhz),
            opt(self.lamb_shift_mhz),
            opt(nr),
            opt(ni),
            self.distortion,
            self.distortion_imprinted,
            self.d_max,
            self.feasible,
            opt(self.norm_drift),
            opt(self.step_doubling_delta),
            self.steps,
            status
        )
    }

    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

pub fn write_results_csv<W: Write>(records: &[ResultRecord], mut w: W) -> std::io::Result<()> {
    writeln!(w, "{RESULTS_HEADER}")?;
    for r in records {
        writeln!(w, "{}", r.csv_row())?;
    }
    Ok(())
}

pub fn write_timings_csv<W: Write>(records: &[ResultRecord], mut w: W) -> std::io::Result<()> {
    writeln!(w, "scenario,kappa_mhz,strategy,wall_time_s")?;
    for r in records {
        writeln!(
            w,
            "{},{:e},{},{}",
            r.scenario,
            r.kappa_mhz,
            r.strategy.name(),
            opt(r.wall_time)
        )?;
    }
    Ok(())
}

/// Pilot emission and the parameters extracted from it.
#[derive(Debug, Clone)]
pub struct CalibrationReport {
    pub kappa: f64,
    pub system: LinkSystem<f64>,
    pub trajectory: Trajectory<f64>,
    pub estimate: ParameterEstimate<f64>,
}

impl CalibrationReport {
    pub fn params(&self) -> EffectiveModelParams<f64> {
        self.estimate.params
    }

    /// `t, Re/Im 2Γ/(κc), |N(t)|, arg N(t)`; masked samples are left empty.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(
            w,
            "t,re_2gamma_over_kappa_c,im_2gamma_over_kappa_c,abs_n,arg_n"
        )?;
        let e = &self.estimate;
        let until = e.grid.len;
        for i in 0..until {
            let r = e.ratio[i] * (2.0 / self.kappa);
            let m = e.memory[i];
            let (rr, ri) = if r.re.is_finite() {
                (format!("{:e}", r.re), format!("{:e}", r.im))
            } else {
                Default::default()
            };
            let (ma, mp) = if m.re.is_finite() {
                (format!("{:e}", m.norm()), format!("{:e}", m.arg()))
            } else {
                Default::default()
            };
            writeln!(w, "{:e},{rr},{ri},{ma},{mp}", e.grid.time(i))?;
        }
        Ok(())
    }
}

fn node_pair(
    link: &Link<f64>,
    kappa: f64,
    resonator: f64,
    law: CouplingLaw,
) -> Result<[NodeCoupling<f64>; 2]> {
    Ok([
        NodeCoupling::new(link, kappa, resonator, Node::A, law)?,
        NodeCoupling::new(link, kappa, resonator, Node::B, law)?,
    ])
}

fn resonator_frequency(cfg: &ScenarioConfig, link: &Link<f64>) -> f64 {
    link.carrier_frequency() + mhz_to_rad_per_ns(cfg.nodes.resonator_offset_mhz)
}

/// Runs the pilot emission with the analytic Markov control and extracts `(κ, δω, N)`.
pub fn calibration_report(cfg: &ScenarioConfig) -> Result<CalibrationReport> {
    cfg.validate()?;
    let kappa = mhz_to_rad_per_ns(cfg.nodes.kappa_mhz);
    let link = cfg.link.build()?;
    let wr = resonator_frequency(cfg, &link);
    let node = NodeCoupling::new(&link, kappa, wr, Node::A, cfg.link.coupling_law)?;
    let system = LinkSystem::single_node(link, node)?;
    let cal = &cfg.calibration;
    let half = cal.window / kappa;
    let grid = TimeGrid::symmetric_with_step(half, cfg.protocol.control_step / kappa)?;
    let control = analytic_sech_control(kappa, 0.0, 0.0, &grid)?;
    let mut sim = SimConfig::new(-half, half, cal.steps).with_integrator(cfg.protocol.integrator);
    sim.record.mode_every = 0;
    sim.max_phase_per_step = Some(cfg.protocol.max_phase_per_step);
    let trajectory = run_emission(&system, &sim, &control)?;
    let opts = EstimatorOptions {
        cavity_mask: cal.cavity_mask,
        rate_mask: cal.rate_mask,
        method: cal.method,
        until: Some(-half + system.link.revival_time()?),
    };
    let estimate = estimate_params(&trajectory, &system, Node::A, &opts)?;
    Ok(CalibrationReport {
        kappa,
        system,
        trajectory,
        estimate,
    })
}

/// Quantities shared by every strategy at one kappa.
#[derive(Debug, Clone)]
pub struct PointSetup {
    pub kappa: f64,
    pub params: EffectiveModelParams<f64>,
    pub calibrated: bool,
    pub link: Link<f64>,
    pub resonator: f64,
    /// `L / v_g` at the dressed photon frequency.
    pub travel_time: f64,
    pub distortion: f64,
    pub d_max: f64,
    pub half_window: f64,
}

impl PointSetup {
    pub fn new(cfg: &ScenarioConfig) -> Result<Self> {
        cfg.validate()?;
        let kappa = mhz_to_rad_per_ns(cfg.nodes.kappa_mhz);
        let link = cfg.link.build()?;
        let resonator = resonator_frequency(cfg, &link);
        let (params, calibrated) = match cfg.protocol.explicit {
            Some(e) if !cfg.calibration.enabled => (
                EffectiveModelParams::new(
                    e.kappa_mhz.map(mhz_to_rad_per_ns).unwrap_or(kappa),
                    mhz_to_rad_per_ns(e.lamb_shift_mhz),
                    Cx::new(e.non_markov[0], e.non_markov[1]),
                )?,
                false,
            ),
            _ if cfg.calibration.enabled => (calibration_report(cfg)?.params(), true),
            _ => (EffectiveModelParams::markovian(kappa), false),
        };
        let disp = link.dispersion;
        let k_p = disp
            .wavenumber_at(resonator + params.lamb_shift)
            .ok_or(Error::CutoffCarrier)?;
        let vg = disp.group_velocity(k_p);
        if !(vg > 0.0) {
            return Err(Error::CutoffCarrier);
        }
        let travel_time = link.grid.length() / vg;
        let distortion = distortion_parameter(&disp, k_p, travel_time)?;
        let d_max = max_correctable_distortion(params.kappa, cfg.protocol.dmax_method)?;
        let mut half_window = cfg.protocol.window / kappa;
        if cfg.experiment == Experiment::Transfer {
            half_window = half_window.max(0.5 * travel_time + cfg.protocol.margin / kappa);
        } else {
            half_window = half_window.max(cfg.protocol.margin / kappa);
        }
        Ok(Self {
            kappa,
            params,
            calibrated,
            link,
            resonator,
            travel_time,
            distortion,
            d_max,
            half_window,
        })
    }

    /// Emission centre: half a transit before `t = 0` for transfers, `t = 0` otherwise.
    pub fn emission_center(&self, experiment: Experiment) -> f64 {
        match experiment {
            Experiment::Transfer => -0.5 * self.travel_time,
            Experiment::PulseFidelity => 0.0,
        }
    }

    fn system(&self, cfg: &ScenarioConfig) -> Result<LinkSystem<f64>> {
        let mut nodes = node_pair(
            &self.link,
            self.kappa,
            self.resonator,
            cfg.link.coupling_law,
        )?;
        for n in nodes.iter_mut() {
            n.qubit_frequency = self.resonator + self.params.lamb_shift;
        }
        match cfg.experiment {
            Experiment::Transfer => LinkSystem::new(self.link.clone(), nodes),
            Experiment::PulseFidelity => {
                let [a, _] = nodes;
                let mut sys = LinkSystem::single_node(self.link.clone(), a)?;
                sys.nodes[1].qubit_frequency = self.resonator + self.params.lamb_shift;
                Ok(sys)
            }
        }
    }

    fn photon_phase(
        &self,
        share: f64,
        model: PhaseModel,
    ) -> impl Fn(f64) -> Option<f64> + Sync + '_ {
        let disp = self.link.dispersion;
        let wp = self.resonator + self.params.lamb_shift;
        let k0 = disp.wavenumber_at(wp);
        let d2 = k0.map(|k| disp.curvature(k)).unwrap_or(0.0);
        let delay = share * self.travel_time;
        move |w| {
            let k0 = k0?;
            let k = disp.wavenumber_at(wp + w)?;
            let nl = match model {
                PhaseModel::Exact => crate::linkmodel::nonlinear_residual(&disp, k, k0),
                PhaseModel::Quadratic => 0.5 * d2 * (k - k0) * (k - k0),
            };
            Some(nl * delay)
        }
    }

    /// Control for one node and strategy; `Ok(None)` when the distortion cannot be imprinted.
    pub fn control(
        &self,
        cfg: &ScenarioConfig,
        strategy: Strategy,
        share: f64,
    ) -> Result<Option<ControlPulse<f64>>> {
        let grid = TimeGrid::symmetric_with_step(
            self.half_window,
            cfg.protocol.control_step / self.kappa,
        )?;
        let center = self.emission_center(cfg.experiment);
        if strategy == Strategy::IdealSech {
            return analytic_sech_control(self.kappa, 0.0, center, &grid).map(Some);
        }
        if (self.distortion * share).abs() > self.d_max {
            return Ok(None);
        }
        let params = match strategy {
            Strategy::NonmarkovCorrected => self.params,
            _ => self.params.without_memory(),
        };
        let target = predistorted_sech_field(
            params.kappa,
            &self.link,
            share * self.travel_time,
            cfg.protocol.phase_model,
            self.resonator + params.lamb_shift - self.link.carrier_frequency(),
            center,
            &grid,
        )?;
        match control_from_field(&target, &params, &SynthesisOptions::default()) {
            Ok(s) => {
                let mut c = s.control;
                if strategy == Strategy::NonmarkovCorrected {
                    c.provenance = crate::pulseshaper::Provenance::NonMarkovian;
                }
                Ok(Some(c))
            }
            Err(Error::InfeasiblePulse { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    }

    /// Mode amplitudes an ideal emitter of the strategy's photon leaves in the link at `t_ref`.
    pub fn target_modes(
        &self,
        system: &LinkSystem<f64>,
        strategy: Strategy,
        share: f64,
        model: PhaseModel,
        center: f64,
        t_ref: f64,
    ) -> Vec<Cx<f64>> {
        let kappa = if strategy == Strategy::IdealSech {
            self.kappa
        } else {
            self.params.kappa
        };
        let shift = self.resonator + self.params.lamb_shift - system.frame();
        let share = if strategy == Strategy::IdealSech {
            0.0
        } else {
            share
        };
        let phase = self.photon_phase(share, model);
        system
            .mode_detunings()
            .iter()
            .zip(&system.nodes[0].couplings)
            .map(|(w, g)| {
                let rel = *w - shift;
                match phase(rel) {
                    Some(p) => cis(p - *w * (t_ref - center)) * (*g * sech_spectrum(kappa, rel)),
                    None => Cx::new(0.0, 0.0),
                }
            })
            .collect()
    }
}

/// `|<target|psi>|^2` with the target normalized and `psi` taken as is.
pub fn mode_overlap(target: &[Cx<f64>], psi: &[Cx<f64>]) -> f64 {
    let norm: f64 = target.iter().map(|a| a.norm_sqr()).sum();
    let dot: Cx<f64> = target.iter().zip(psi).map(|(a, b)| a.conj() * b).sum();
    dot.norm_sqr() / norm
}

struct RunOutcome {
    fidelity: f64,
    norm_drift: f64,
    steps: usize,
    trajectory: Trajectory<f64>,
}

fn simulate(
    cfg: &ScenarioConfig,
    setup: &PointSetup,
    system: &LinkSystem<f64>,
    g1: &ControlPulse<f64>,
    g2: Option<&ControlPulse<f64>>,
    strategy: Strategy,
    steps: usize,
) -> Result<RunOutcome> {
    let mut sim = SimConfig::new(-setup.half_window, setup.half_window, steps)
        .with_integrator(cfg.protocol.integrator);
    sim.record.mode_every = 0;
    sim.max_phase_per_step = Some(cfg.protocol.max_phase_per_step);
    let traj = match g2 {
        Some(g2) => run_transfer(system, &sim, g1, g2)?,
        None => run_emission(system, &sim, g1)?,
    };
    let fidelity = match cfg.experiment {
        Experiment::Transfer => transfer_fidelity(&traj),
        Experiment::PulseFidelity => {
            let center = setup.emission_center(cfg.experiment);
            let target = setup.target_modes(
                system,
                strategy,
                cfg.protocol.distortion_share[0],
                cfg.protocol.phase_model,
                center,
                traj.grid.end(),
            );
            mode_overlap(&target, &traj.final_state.modes)
        }
    };
    Ok(RunOutcome {
        fidelity,
        norm_drift: traj.norm_drift(),
        steps: traj.steps(),
        trajectory: traj,
    })
}

/// Everything produced for one strategy at one kappa.
pub struct StrategyRun {
    pub record: ResultRecord,
    pub controls: Vec<ControlPulse<f64>>,
    pub trajectory: Option<Trajectory<f64>>,
}

fn empty_record(
    cfg: &ScenarioConfig,
    setup: Option<&PointSetup>,
    strategy: Strategy,
) -> ResultRecord {
    ResultRecord {
        scenario: cfg.id.clone(),
        kappa_mhz: cfg.nodes.kappa_mhz,
        strategy,
        f_pulse: None,
        f_transfer: None,
        infidelity: None,
        kappa_est_mhz: None,
        lamb_shift_mhz: None,
        non_markov: None,
        distortion: setup.map_or(f64::NAN, |s| s.distortion),
        distortion_imprinted: 0.0,
        d_max: setup.map_or(f64::NAN, |s| s.d_max),
        feasible: true,
        norm_drift: None,
        step_doubling_delta: None,
        steps: 0,
        status: "ok".into(),
        wall_time: None,
    }
}

/// Runs one strategy on a prepared point.
pub fn run_strategy(
    cfg: &ScenarioConfig,
    setup: &PointSetup,
    strategy: Strategy,
) -> Result<StrategyRun> {
    let start = Instant::now();
    let mut rec = empty_record(cfg, Some(setup), strategy);
    if setup.calibrated || cfg.protocol.explicit.is_some() {
        let p = setup.params;
        rec.kappa_est_mhz = Some(p.kappa / mhz_to_rad_per_ns(1.0));
        rec.lamb_shift_mhz = Some(p.lamb_shift / mhz_to_rad_per_ns(1.0));
        rec.non_markov = Some([p.non_markov.re, p.non_markov.im]);
    }
    let shares = cfg.protocol.distortion_share;
    let imprinted = if strategy == Strategy::IdealSech {
        0.0
    } else {
        match cfg.experiment {
            Experiment::Transfer => shares[0].max(shares[1]) * setup.distortion.abs(),
            Experiment::PulseFidelity => shares[0] * setup.distortion.abs(),
        }
    };
    rec.distortion_imprinted = imprinted;
    let g1 = setup.control(cfg, strategy, shares[0])?;
    let g2 = match cfg.experiment {
        Experiment::PulseFidelity => None,
        Experiment::Transfer => Some(if shares[1] == shares[0] {
            g1.as_ref().map(receiver_control).transpose()?
        } else {
            setup
                .control(cfg, strategy, shares[1])?
                .as_ref()
                .map(receiver_control)
                .transpose()?
        }),
    };
    let infeasible = g1.is_none() || matches!(g2, Some(None));
    if infeasible {
        rec.feasible = false;
        rec.status = "infeasible".into();
        rec.wall_time = Some(start.elapsed().as_secs_f64());
        return Ok(StrategyRun {
            record: rec,
            controls: vec![],
            trajectory: None,
        });
    }
    let g1 = g1.expect("checked");
    let g2 = g2.map(|g| g.expect("checked"));
    let system = setup.system(cfg)?;
    let base = simulate(
        cfg,
        setup,
        &system,
        &g1,
        g2.as_ref(),
        strategy,
        cfg.protocol.steps,
    )?;
    rec.steps = base.steps;
    rec.norm_drift = Some(base.norm_drift);
    if cfg.protocol.step_doubling {
        let fine = simulate(
            cfg,
            setup,
            &system,
            &g1,
            g2.as_ref(),
            strategy,
            2 * base.steps,
        )?;
        rec.step_doubling_delta = Some((fine.fidelity - base.fidelity).abs());
    }
    let f = base.fidelity.clamp(0.0, 1.0);
    match cfg.experiment {
        Experiment::Transfer => rec.f_transfer = Some(f),
        Experiment::PulseFidelity => rec.f_pulse = Some(f),
    }
    rec.infidelity = Some(1.0 - base.fidelity);
    rec.wall_time = Some(start.elapsed().as_secs_f64());
    let mut controls = vec![g1];
    controls.extend(g2);
    Ok(StrategyRun {
        record: rec,
        controls,
        trajectory: Some(base.trajectory),
    })
}

fn error_record(cfg: &ScenarioConfig, strategy: Strategy, e: &Error) -> ResultRecord {
    let mut r = empty_record(cfg, None, strategy);
    r.feasible = !matches!(e, Error::InfeasiblePulse { .. });
    r.status = format!("error: {e}");
    r
}

/// All strategies at the configured kappa, in configuration order. Numerical
/// failures become error records; validation failures are returned.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<Vec<ResultRecord>> {
    run_point(cfg, &|_| {}).map(|runs| runs.into_iter().map(|r| r.record).collect())
}

/// Like [`run_scenario`] but keeps controls and trajectories, and reports each
/// record as soon as it is ready.
pub fn run_point(
    cfg: &ScenarioConfig,
    on_record: &(dyn Fn(&ResultRecord) + Sync),
) -> Result<Vec<StrategyRun>> {
    cfg.validate()?;
    let strategies = &cfg.protocol.strategies;
    let setup = match PointSetup::new(cfg) {
        Ok(s) => s,
        Err(e) if e.is_validation() => return Err(e),
        Err(e) => {
            let runs: Vec<StrategyRun> = strategies
                .iter()
                .map(|s| StrategyRun {
                    record: error_record(cfg, *s, &e),
                    controls: vec![],
                    trajectory: None,
                })
                .collect();
            runs.iter().for_each(|r| on_record(&r.record));
            return Ok(runs);
        }
    };
    strategies
        .par_iter()
        .map(|s| {
            let run = match run_strategy(cfg, &setup, *s) {
                Ok(r) => r,
                Err(e) if e.is_validation() => return Err(e),
                Err(e) => {
                    let mut rec = error_record(cfg, *s, &e);
                    rec.distortion = setup.distortion;
                    rec.d_max = setup.d_max;
                    StrategyRun {
                        record: rec,
                        controls: vec![],
                        trajectory: None,
                    }
                }
            };
            on_record(&run.record);
            Ok(run)
        })
        .collect()
}

/// Every `(kappa, strategy)` pair of the sweep, computed on up to `workers`
/// threads and returned in sweep order whatever the completion order.
pub fn sweep_kappa(
    cfg: &ScenarioConfig,
    workers: usize,
    on_record: &(dyn Fn(&ResultRecord) + Sync),
) -> Result<Vec<ResultRecord>> {
    cfg.validate()?;
    let kappas = cfg.kappas();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let per_point: Vec<Vec<ResultRecord>> = pool.install(|| {
        kappas
            .par_iter()
            .map(|k| {
                let point = cfg.at_kappa(*k);
                run_point(&point, on_record)
                    .map(|runs| runs.into_iter().map(|r| r.record).collect())
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(per_point.into_iter().flatten().collect())
}
