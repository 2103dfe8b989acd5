//! Exact single-excitation dynamics of two qubits, two resonators and the
//! waveguide modes between them, plus the diagnostics built on it.
//!
//! Amplitudes are stored in a frame rotating at `frame` (the carrier by default):
//!
//! ```text
//! i q_j' = (δ_j - ω_f) q_j + g_j c_j
//! i c_j' = (Ω_Rj - ω_f) c_j + g_j* q_j + Σ_k G_kj ψ_k
//! i ψ_k' = (ω_k - ω_f) ψ_k + Σ_j G_kj c_j
//! ```

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linkmodel::{CouplingSet, Link, Node, NodeCoupling};
use crate::pulseshaper::{ControlPulse, EffectiveModelParams};
use crate::scalar::{cis, mul_i, mul_neg_i, real, Cx, Real};
use crate::wavepacket::{mode_sum, TimeGrid, TimeTrace};

/// Time-dependent coupling `g(t)`.
pub trait Control<T>: Sync {
    fn value(&self, t: T) -> Cx<T>;
}

impl<T: Real> Control<T> for ControlPulse<T> {
    fn value(&self, t: T) -> Cx<T> {
        self.value_at(t)
    }
}

impl<T: Real, F: Fn(T) -> Cx<T> + Sync> Control<T> for F {
    fn value(&self, t: T) -> Cx<T> {
        self(t)
    }
}

/// A control that is always off.
#[derive(Debug, Clone, Copy, Default)]
pub struct Off;

impl<T: Real> Control<T> for Off {
    fn value(&self, _t: T) -> Cx<T> {
        Cx::new(T::zero(), T::zero())
    }
}

/// Amplitudes of every degree of freedom at one instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FullState<T> {
    pub qubits: [Cx<T>; 2],
    pub cavities: [Cx<T>; 2],
    pub modes: Vec<Cx<T>>,
}

impl<T: Real> FullState<T> {
    pub fn vacuum(modes: usize) -> Self {
        let z = Cx::new(T::zero(), T::zero());
        Self {
            qubits: [z; 2],
            cavities: [z; 2],
            modes: vec![z; modes],
        }
    }

    /// Qubit at `node` excited, everything else empty.
    pub fn excited(node: Node, modes: usize) -> Self {
        let mut s = Self::vacuum(modes);
        s.qubits[node.index()] = Cx::new(T::one(), T::zero());
        s
    }

    pub fn norm_sqr(&self) -> T {
        self.qubits
            .iter()
            .chain(&self.cavities)
            .chain(&self.modes)
            .map(|a| a.norm_sqr())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.qubits
            .iter()
            .chain(&self.cavities)
            .chain(&self.modes)
            .all(|a| a.re.is_finite() && a.im.is_finite())
    }

    /// `self += s * other`.
    pub fn add_scaled(&mut self, other: &Self, s: Cx<T>) {
        for (a, b) in self.qubits.iter_mut().zip(&other.qubits) {
            *a += *b * s;
        }
        for (a, b) in self.cavities.iter_mut().zip(&other.cavities) {
            *a += *b * s;
        }
        for (a, b) in self.modes.iter_mut().zip(&other.modes) {
            *a += *b * s;
        }
    }
}

/// The full coupled system in a chosen rotating frame.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkSystem<T> {
    pub link: Link<T>,
    pub nodes: CouplingSet<T>,
    frame: T,
    mode_detunings: Vec<T>,
    coupling_norms: [T; 2],
}

impl<T: Real> LinkSystem<T> {
    /// Frame rotating at the carrier frequency.
    pub fn new(link: Link<T>, nodes: CouplingSet<T>) -> Result<Self> {
        let frame = link.carrier_frequency();
        Self::with_frame(link, nodes, frame)
    }

    pub fn with_frame(link: Link<T>, nodes: CouplingSet<T>, frame: T) -> Result<Self> {
        for n in &nodes {
            if n.couplings.len() != link.grid.count() {
                return Err(Error::GridMismatch(format!(
                    "{} couplings for {} modes",
                    n.couplings.len(),
                    link.grid.count()
                )));
            }
        }
        let mode_detunings = link.detunings(frame);
        let coupling_norms = [0, 1].map(|j| nodes[j].couplings.iter().map(|g| *g * *g).sum::<T>());
        Ok(Self {
            link,
            nodes,
            frame,
            mode_detunings,
            coupling_norms,
        })
    }

    /// Only node A talks to the line; node B is present but decoupled.
    pub fn single_node(link: Link<T>, node: NodeCoupling<T>) -> Result<Self> {
        let other = NodeCoupling::decoupled(&link, node.resonator_frequency);
        Self::new(link, [node, other])
    }

    pub fn frame(&self) -> T {
        self.frame
    }

    pub fn mode_detunings(&self) -> &[T] {
        &self.mode_detunings
    }

    pub fn qubit_detuning(&self, j: usize) -> T {
        self.nodes[j].qubit_frequency - self.frame
    }

    pub fn cavity_detuning(&self, j: usize) -> T {
        self.nodes[j].resonator_frequency - self.frame
    }

    /// Largest angular frequency in the problem measured from the carrier; sets the
    /// step needed to resolve every mode without aliasing, independent of the frame.
    pub fn spectral_radius(&self) -> T {
        let wc = self.link.carrier_frequency();
        let mut r = self
            .link
            .frequencies()
            .iter()
            .map(|w| (*w - wc).abs())
            .fold(T::zero(), T::max);
        for n in &self.nodes {
            r = r
                .max((n.qubit_frequency - wc).abs())
                .max((n.resonator_frequency - wc).abs());
        }
        r
    }

    /// `Γ_j = i Σ_k G_kj ψ_k`.
    pub fn gamma(&self, state: &FullState<T>, j: usize) -> Cx<T> {
        let s: Cx<T> = self.nodes[j]
            .couplings
            .iter()
            .zip(&state.modes)
            .map(|(g, p)| *p * *g)
            .sum();
        mul_i(s)
    }

    /// Exact `c_j'` from the equations of motion.
    pub fn cavity_rate(&self, state: &FullState<T>, j: usize, g: Cx<T>) -> Cx<T> {
        mul_neg_i(state.cavities[j] * self.cavity_detuning(j) + g.conj() * state.qubits[j])
            - self.gamma(state, j)
    }

    /// Full right-hand side, used by tests and by the reference integrator.
    pub fn derivative(&self, state: &FullState<T>, g: [Cx<T>; 2]) -> FullState<T> {
        let mut d = FullState::vacuum(state.modes.len());
        for j in 0..2 {
            d.qubits[j] =
                mul_neg_i(state.qubits[j] * self.qubit_detuning(j) + g[j] * state.cavities[j]);
            d.cavities[j] = self.cavity_rate(state, j, g[j]);
        }
        for (k, out) in d.modes.iter_mut().enumerate() {
            let mut acc = state.modes[k] * self.mode_detunings[k];
            for j in 0..2 {
                acc += state.cavities[j] * self.nodes[j].couplings[k];
            }
            *out = mul_neg_i(acc);
        }
        d
    }
}

/// Time-stepping scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    /// Symmetric second-order splitting.
    Strang,
    /// Triple-jump composition of the Strang step, fourth order.
    #[default]
    Yoshida4,
}

/// What to store while integrating.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordOptions {
    /// Store mode amplitudes every this many steps (0: final state only).
    pub mode_every: usize,
}

impl Default for RecordOptions {
    fn default() -> Self {
        Self { mode_every: 50 }
    }
}

/// Integration window and resolution, times in ns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig<T> {
    pub t_start: T,
    pub t_end: T,
    pub steps: usize,
    pub integrator: Integrator,
    pub record: RecordOptions,
    /// Raise the step count until `spectral_radius * dt` stays below this phase.
    pub max_phase_per_step: Option<T>,
}

impl<T: Real> SimConfig<T> {
    pub fn new(t_start: T, t_end: T, steps: usize) -> Self {
        Self {
            t_start,
            t_end,
            steps,
            integrator: Integrator::default(),
            record: RecordOptions::default(),
            max_phase_per_step: Some(T::FRAC_PI_8()),
        }
    }

    /// Window given in units of `1/kappa`.
    pub fn in_kappa_units(kappa: T, start: T, end: T, steps: usize) -> Self {
        Self::new(start / kappa, end / kappa, steps)
    }

    pub fn with_integrator(mut self, integrator: Integrator) -> Self {
        self.integrator = integrator;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps < 2 {
            return Err(Error::Config("need at least 2 steps".into()));
        }
        if !(self.t_end > self.t_start) {
            return Err(Error::Config(
                "simulation window must have t_end > t_start".into(),
            ));
        }
        Ok(())
    }

    /// Step count after anti-aliasing refinement.
    pub fn effective_steps(&self, system: &LinkSystem<T>) -> usize {
        let mut n = self.steps;
        if let Some(phi) = self.max_phase_per_step {
            let need = (system.spectral_radius() * (self.t_end - self.t_start) / phi)
                .ceil()
                .to_usize()
                .unwrap_or(n);
            n = n.max(need);
        }
        n
    }
}

/// Mode amplitudes stored at one recorded step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSnapshot<T> {
    pub step: usize,
    pub time: T,
    pub modes: Vec<Cx<T>>,
}

/// Everything recorded during a run. Per-step series have `steps + 1` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<T> {
    pub grid: TimeGrid<T>,
    pub qubits: [Vec<Cx<T>>; 2],
    pub cavities: [Vec<Cx<T>>; 2],
    /// Exact `c_j'` from the equations of motion.
    pub cavity_rates: [Vec<Cx<T>>; 2],
    /// Direct sums `i Σ_k G_kj ψ_k`.
    pub gammas: [Vec<Cx<T>>; 2],
    pub controls: [Vec<Cx<T>>; 2],
    pub norm: Vec<T>,
    pub snapshots: Vec<ModeSnapshot<T>>,
    pub final_state: FullState<T>,
    pub integrator: Integrator,
}

impl<T: Real> Trajectory<T> {
    pub fn steps(&self) -> usize {
        self.grid.len - 1
    }

    /// `max |norm(t) - norm(t0)|`.
    pub fn norm_drift(&self) -> T {
        let n0 = self.norm[0];
        self.norm
            .iter()
            .map(|n| (*n - n0).abs())
            .fold(T::zero(), T::max)
    }

    /// Summary CSV: `t, q1, c1, q2, c2` (re/im), norm, `Γ1` and `Γ1/c1` (re/im).
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(
            w,
            "t,re_q1,im_q1,re_c1,im_c1,re_q2,im_q2,re_c2,im_c2,norm,re_gamma1,im_gamma1,re_gamma1_over_c1,im_gamma1_over_c1"
        )?;
        for i in 0..self.grid.len {
            let ratio = self.gammas[0][i] / self.cavities[0][i];
            let ratio = if ratio.re.is_finite() && ratio.im.is_finite() {
                ratio
            } else {
                Cx::new(T::nan(), T::nan())
            };
            let cols = [
                self.qubits[0][i],
                self.cavities[0][i],
                self.qubits[1][i],
                self.cavities[1][i],
            ];
            write!(w, "{}", self.grid.time(i))?;
            for c in cols {
                write!(w, ",{},{}", c.re, c.im)?;
            }
            writeln!(
                w,
                ",{},{},{},{},{}",
                self.norm[i], self.gammas[0][i].re, self.gammas[0][i].im, ratio.re, ratio.im
            )?;
        }
        Ok(())
    }

    /// Flat CSV of every stored mode snapshot: `step,t,mode,re,im`.
    pub fn write_modes_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "step,t,mode,re,im")?;
        for s in &self.snapshots {
            for (k, a) in s.modes.iter().enumerate() {
                writeln!(w, "{},{},{},{},{}", s.step, s.time, k, a.re, a.im)?;
            }
        }
        Ok(())
    }
}

struct Substep<T> {
    tau: T,
    half_modes: Vec<Cx<T>>,
    half_qubits: [Cx<T>; 2],
    half_cavities: [Cx<T>; 2],
}

impl<T: Real> Substep<T> {
    fn new(system: &LinkSystem<T>, tau: T) -> Self {
        let h = T::lit(0.5) * tau;
        Self {
            tau,
            half_modes: system.mode_detunings.iter().map(|w| cis(-*w * h)).collect(),
            half_qubits: [0, 1].map(|j| cis(-system.qubit_detuning(j) * h)),
            half_cavities: [0, 1].map(|j| cis(-system.cavity_detuning(j) * h)),
        }
    }

    fn rotate(&self, s: &mut FullState<T>) {
        for j in 0..2 {
            s.qubits[j] *= self.half_qubits[j];
            s.cavities[j] *= self.half_cavities[j];
        }
        for (a, p) in s.modes.iter_mut().zip(&self.half_modes) {
            *a *= *p;
        }
    }
}

/// Exact `exp(-i H_j tau)` for the coupling terms of node `j`. With
/// `b = g|q> + Σ G_k |k>`, `H_j = |c><b| + |b><c|` acts as `β σ_x` on span{c, b/β}.
fn node_exchange<T: Real>(
    system: &LinkSystem<T>,
    s: &mut FullState<T>,
    j: usize,
    g: Cx<T>,
    tau: T,
) {
    let beta2 = g.norm_sqr() + system.coupling_norms[j];
    if beta2 == T::zero() {
        return;
    }
    let beta = beta2.sqrt();
    let couplings = &system.nodes[j].couplings;
    let mut proj = g.conj() * s.qubits[j];
    if system.coupling_norms[j] > T::zero() {
        for (gk, a) in couplings.iter().zip(&s.modes) {
            proj += *a * *gk;
        }
    }
    let p = proj / beta;
    let a = s.cavities[j];
    let (sn, cs) = (beta * tau).sin_cos();
    s.cavities[j] = a * cs - mul_i(p * sn);
    let f = (p * (cs - T::one()) - mul_i(a * sn)) / beta;
    s.qubits[j] += f * g;
    if system.coupling_norms[j] > T::zero() {
        for (gk, m) in couplings.iter().zip(s.modes.iter_mut()) {
            *m += f * *gk;
        }
    }
}

fn strang<T: Real>(
    system: &LinkSystem<T>,
    sub: &Substep<T>,
    s: &mut FullState<T>,
    t: T,
    g: [&dyn Control<T>; 2],
) {
    let mid = t + T::lit(0.5) * sub.tau;
    let gm = [g[0].value(mid), g[1].value(mid)];
    let half = T::lit(0.5) * sub.tau;
    sub.rotate(s);
    node_exchange(system, s, 0, gm[0], half);
    node_exchange(system, s, 1, gm[1], sub.tau);
    node_exchange(system, s, 0, gm[0], half);
    sub.rotate(s);
}

struct Stepper<T> {
    integrator: Integrator,
    parts: Vec<Substep<T>>,
}

impl<T: Real> Stepper<T> {
    fn new(system: &LinkSystem<T>, integrator: Integrator, dt: T) -> Self {
        let parts = match integrator {
            Integrator::Strang => vec![Substep::new(system, dt)],
            Integrator::Yoshida4 => {
                let cbrt2 = T::lit(2.0).cbrt();
                let w1 = T::one() / (T::lit(2.0) - cbrt2);
                let w0 = T::one() - T::lit(2.0) * w1;
                vec![Substep::new(system, w1 * dt), Substep::new(system, w0 * dt)]
            }
        };
        Self { integrator, parts }
    }

    fn advance(&self, system: &LinkSystem<T>, s: &mut FullState<T>, t: T, g: [&dyn Control<T>; 2]) {
        match self.integrator {
            Integrator::Strang => strang(system, &self.parts[0], s, t, g),
            Integrator::Yoshida4 => {
                let (outer, inner) = (&self.parts[0], &self.parts[1]);
                strang(system, outer, s, t, g);
                strang(system, inner, s, t + outer.tau, g);
                strang(system, outer, s, t + outer.tau + inner.tau, g);
            }
        }
    }
}

/// Advances `state` from `t` to `t + dt` in place.
pub fn step<T: Real>(
    system: &LinkSystem<T>,
    state: &mut FullState<T>,
    t: T,
    dt: T,
    controls: [&dyn Control<T>; 2],
    integrator: Integrator,
) -> Result<()> {
    if !(dt > T::zero()) {
        return Err(Error::Config("dt must be positive".into()));
    }
    Stepper::new(system, integrator, dt).advance(system, state, t, controls);
    if !state.is_finite() {
        return Err(Error::IntegrationFailure {
            time: (t + dt).as_f64(),
        });
    }
    Ok(())
}

/// Integrates from `initial` over the configured window.
pub fn run<T: Real>(
    system: &LinkSystem<T>,
    config: &SimConfig<T>,
    controls: [&dyn Control<T>; 2],
    initial: FullState<T>,
) -> Result<Trajectory<T>> {
    config.validate()?;
    if initial.modes.len() != system.link.grid.count() {
        return Err(Error::GridMismatch(
            "initial state has the wrong number of modes".into(),
        ));
    }
    let steps = config.effective_steps(system);
    let grid = TimeGrid::spanning(config.t_start, config.t_end, steps + 1)?;
    let stepper = Stepper::new(system, config.integrator, grid.dt);
    let mut tr = Trajectory {
        grid,
        qubits: [Vec::with_capacity(steps + 1), Vec::with_capacity(steps + 1)],
        cavities: [Vec::with_capacity(steps + 1), Vec::with_capacity(steps + 1)],
        cavity_rates: [Vec::with_capacity(steps + 1), Vec::with_capacity(steps + 1)],
        gammas: [Vec::with_capacity(steps + 1), Vec::with_capacity(steps + 1)],
        controls: [Vec::with_capacity(steps + 1), Vec::with_capacity(steps + 1)],
        norm: Vec::with_capacity(steps + 1),
        snapshots: Vec::new(),
        final_state: FullState::vacuum(0),
        integrator: config.integrator,
    };
    let mut state = initial;
    for n in 0..=steps {
        let t = grid.time(n);
        for j in 0..2 {
            let g = controls[j].value(t);
            let gamma = system.gamma(&state, j);
            let rate = mul_neg_i(
                state.cavities[j] * system.cavity_detuning(j) + g.conj() * state.qubits[j],
            ) - gamma;
            tr.qubits[j].push(state.qubits[j]);
            tr.cavities[j].push(state.cavities[j]);
            tr.cavity_rates[j].push(rate);
            tr.gammas[j].push(gamma);
            tr.controls[j].push(g);
        }
        tr.norm.push(state.norm_sqr());
        let keep =
            n == steps || (config.record.mode_every > 0 && n % config.record.mode_every == 0);
        if keep {
            tr.snapshots.push(ModeSnapshot {
                step: n,
                time: t,
                modes: state.modes.clone(),
            });
        }
        if n == steps {
            break;
        }
        stepper.advance(system, &mut state, t, controls);
        if !state.is_finite() {
            return Err(Error::IntegrationFailure {
                time: grid.time(n + 1).as_f64(),
            });
        }
    }
    tr.final_state = state;
    Ok(tr)
}

/// Emission from node A starting with its qubit excited and the line empty.
pub fn run_emission<T: Real>(
    system: &LinkSystem<T>,
    config: &SimConfig<T>,
    g1: &dyn Control<T>,
) -> Result<Trajectory<T>> {
    run(
        system,
        config,
        [g1, &Off],
        FullState::excited(Node::A, system.link.grid.count()),
    )
}

/// Full transfer A -> B with both controls active.
pub fn run_transfer<T: Real>(
    system: &LinkSystem<T>,
    config: &SimConfig<T>,
    g1: &dyn Control<T>,
    g2: &dyn Control<T>,
) -> Result<Trajectory<T>> {
    run(
        system,
        config,
        [g1, g2],
        FullState::excited(Node::A, system.link.grid.count()),
    )
}

/// `|q_2(t_f)|^2`.
pub fn transfer_fidelity<T: Real>(traj: &Trajectory<T>) -> T {
    traj.final_state.qubits[1].norm_sqr()
}

/// Field at position `x` radiated freely from the mode amplitudes stored nearest
/// to `reference` (the final state when `None`).
pub fn reconstruct_at<T: Real>(
    traj: &Trajectory<T>,
    system: &LinkSystem<T>,
    x: T,
    grid: &TimeGrid<T>,
    reference: Option<T>,
) -> Result<TimeTrace<T>> {
    let snap = match reference {
        None => traj.snapshots.last(),
        Some(tref) => traj.snapshots.iter().min_by(|a, b| {
            (a.time - tref)
                .abs()
                .partial_cmp(&(b.time - tref).abs())
                .unwrap_or(std::cmp::Ordering::Equal)
        }),
    }
    .ok_or(Error::ModesNotRecorded {
        time: reference.unwrap_or(traj.grid.end()).as_f64(),
    })?;
    if let Some(tref) = reference {
        if (snap.time - tref).abs() > T::lit(0.5) * traj.grid.dt {
            return Err(Error::ModesNotRecorded {
                time: tref.as_f64(),
            });
        }
    }
    if x < T::zero() || x > system.link.grid.length() {
        return Err(Error::Config(format!("position {x} m is outside the link")));
    }
    let weighted: Vec<Cx<T>> = snap
        .modes
        .iter()
        .zip(system.link.grid.wavenumbers())
        .map(|(a, k)| *a * cis(k * x))
        .collect();
    Ok(TimeTrace {
        grid: *grid,
        values: mode_sum(&weighted, system.mode_detunings(), grid, snap.time),
    })
}

/// `Γ(t) = -(c' + i g* q + i (Ω_R - ω_f) c)` from the recorded exact rates,
/// checked against the direct mode sums.
pub fn gamma_extract<T: Real>(
    traj: &Trajectory<T>,
    system: &LinkSystem<T>,
    node: Node,
) -> Result<Vec<Cx<T>>> {
    let j = node.index();
    let det = system.cavity_detuning(j);
    let mut out = Vec::with_capacity(traj.grid.len);
    let scale = traj.gammas[j]
        .iter()
        .map(|g| g.norm())
        .fold(T::zero(), T::max)
        .max(T::min_positive_value());
    for i in 0..traj.grid.len {
        let c = traj.cavities[j][i];
        let g = traj.controls[j][i];
        let gamma =
            -(traj.cavity_rates[j][i] + mul_i(g.conj() * traj.qubits[j][i]) + mul_i(c * det));
        if (gamma - traj.gammas[j][i]).norm() > T::lit(1e-8) * scale {
            return Err(Error::Consistency(format!(
                "Γ mismatch at t = {}: {} vs {}",
                traj.grid.time(i),
                gamma,
                traj.gammas[j][i]
            )));
        }
        out.push(gamma);
    }
    Ok(out)
}

/// `K_1(τ) = ∫_0^τ K(s) ds` and `K_2(τ) = ∫_0^τ s K(s) ds` with
/// `K(s) = Σ_k G_k^2 exp(-i (ω_k - Ω_R - δω) s)`, summed mode by mode in closed form.
pub fn kernel_integrals<T: Real>(
    system: &LinkSystem<T>,
    node: Node,
    lamb_shift: T,
    elapsed: T,
) -> (Cx<T>, Cx<T>) {
    let j = node.index();
    let n = &system.nodes[j];
    let mut k1 = Cx::new(T::zero(), T::zero());
    let mut k2 = Cx::new(T::zero(), T::zero());
    if elapsed == T::zero() {
        return (k1, k2);
    }
    for (w, g) in system.link.frequencies().iter().zip(&n.couplings) {
        let g2 = *g * *g;
        let x = (*w - n.resonator_frequency - lamb_shift) * elapsed;
        let (a, b) = kernel_factors(x);
        k1 += a * (g2 * elapsed);
        k2 += b * (g2 * elapsed * elapsed);
    }
    (k1, k2)
}

/// `(1 - e^{-ix})/(ix)` and `(e^{-ix}(1 + ix) - 1)/x^2`, with series near zero.
fn kernel_factors<T: Real>(x: T) -> (Cx<T>, Cx<T>) {
    if x.abs() < T::lit(1e-2) {
        let y = Cx::new(T::zero(), -x);
        let mut a = Cx::new(T::zero(), T::zero());
        let mut b = Cx::new(T::zero(), T::zero());
        let mut pow = Cx::new(T::one(), T::zero());
        let mut fact = T::one();
        for m in 0..10usize {
            let m1 = T::from_usize_lossy(m + 1);
            let m2 = T::from_usize_lossy(m + 2);
            // fact holds m!
            a += pow / (fact * m1);
            b += pow * m1 / (fact * m1 * m2);
            pow *= y;
            fact *= m1;
        }
        (a, b)
    } else {
        let e = cis(-x);
        let a = (real(T::one()) - e) / Cx::new(T::zero(), x);
        let b = (e * Cx::new(T::one(), x) - real(T::one())) / (x * x);
        (a, b)
    }
}

/// How the decay rate and Lamb shift are obtained from `Γ/c`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorMethod {
    /// Joint least-squares fit of `Γ/c` against `[1, c'/c]`.
    #[default]
    Regression,
    /// Plain time averages of `Re Γ/c` and `Im Γ/c`.
    WindowAverage,
}

/// Masks and method for [`estimate_params`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorOptions<T> {
    pub cavity_mask: T,
    pub rate_mask: T,
    pub method: EstimatorMethod,
    /// Ignore samples at or after this time (ns), e.g. the first revival.
    pub until: Option<T>,
}

impl<T: Real> Default for EstimatorOptions<T> {
    fn default() -> Self {
        Self {
            cavity_mask: T::lit(1e-3),
            rate_mask: T::lit(1e-2),
            method: EstimatorMethod::default(),
            until: None,
        }
    }
}

/// Estimated effective-model parameters with the series they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterEstimate<T> {
    pub params: EffectiveModelParams<T>,
    pub grid: TimeGrid<T>,
    /// `Γ/c` on every sample (NaN where `c = 0`).
    pub ratio: Vec<Cx<T>>,
    /// `N(t)` on samples passing both masks, NaN elsewhere.
    pub memory: Vec<Cx<T>>,
    pub cavity_samples: usize,
    pub memory_samples: usize,
    /// Averages of `Re Γ/c` and `Im Γ/c` over the cavity mask.
    pub mean_ratio: Cx<T>,
    /// Complex mean of `N(t)`.
    pub memory_mean: Cx<T>,
    /// `sqrt(<|N(t) - <N>|^2>) / |<N>|`.
    pub memory_relative_std: T,
}

/// Minimum number of unmasked samples the estimator accepts.
pub const MIN_ESTIMATOR_SAMPLES: usize = 10;

/// Estimates `(kappa, δω, N)` from the cavity amplitude `c`, its exact bare-frame
/// derivative `c_rate` and the source term `Γ`, using `Γ ≈ (κ/2 + iδω) c - N (c' + iδω c)`.
pub fn estimate_from_series<T: Real>(
    grid: &TimeGrid<T>,
    c: &[Cx<T>],
    c_rate: &[Cx<T>],
    gamma: &[Cx<T>],
    opts: &EstimatorOptions<T>,
) -> Result<ParameterEstimate<T>> {
    let n = grid.len;
    if c.len() != n || c_rate.len() != n || gamma.len() != n {
        return Err(Error::GridMismatch(
            "estimator series lengths differ".into(),
        ));
    }
    let nan = Cx::new(T::nan(), T::nan());
    let in_time = |i: usize| opts.until.is_none_or(|u| grid.time(i) < u);
    let c_max = (0..n)
        .filter(|i| in_time(*i))
        .map(|i| c[i].norm())
        .fold(T::zero(), T::max);
    let r_max = (0..n)
        .filter(|i| in_time(*i))
        .map(|i| c_rate[i].norm())
        .fold(T::zero(), T::max);
    let cav: Vec<bool> = (0..n)
        .map(|i| in_time(i) && c[i].norm() > opts.cavity_mask * c_max)
        .collect();
    let ratio: Vec<Cx<T>> = (0..n)
        .map(|i| {
            if c[i].norm() > T::zero() {
                gamma[i] / c[i]
            } else {
                nan
            }
        })
        .collect();
    let cavity_samples = cav.iter().filter(|m| **m).count();
    if cavity_samples < MIN_ESTIMATOR_SAMPLES {
        return Err(Error::InsufficientData {
            available: cavity_samples,
            required: MIN_ESTIMATOR_SAMPLES,
        });
    }
    let cnt = T::from_usize_lossy(cavity_samples);
    let mean_ratio: Cx<T> = (0..n).filter(|i| cav[*i]).map(|i| ratio[i]).sum::<Cx<T>>() / cnt;

    let (half_kappa, lamb_shift, fitted) = match opts.method {
        EstimatorMethod::WindowAverage => (mean_ratio.re, mean_ratio.im, None),
        EstimatorMethod::Regression => {
            // y = a + b z, with z = c'/c and b = -N
            let (mut sz, mut sy, mut szz, mut syz) = (
                Cx::new(T::zero(), T::zero()),
                Cx::new(T::zero(), T::zero()),
                T::zero(),
                Cx::new(T::zero(), T::zero()),
            );
            for i in (0..n).filter(|i| cav[*i]) {
                let z = c_rate[i] / c[i];
                let y = ratio[i];
                sz += z;
                sy += y;
                szz += z.norm_sqr();
                syz += y * z.conj();
            }
            let det = cnt * szz - sz.norm_sqr();
            if !(det > T::lit(1e-12) * cnt * szz.max(T::min_positive_value())) {
                return Err(Error::InsufficientData {
                    available: cavity_samples,
                    required: MIN_ESTIMATOR_SAMPLES,
                });
            }
            // normal equations: [cnt, sz; conj(sz), szz] [a; b] = [sy; syz]
            let a = (sy * szz - sz * syz) / det;
            let b = (syz * cnt - sz.conj() * sy) / det;
            let memory = -b;
            let shift = a.im / (T::one() - memory.re);
            let half = a.re - memory.im * shift;
            (half, shift, Some(memory))
        }
    };
    let offset = Cx::new(half_kappa, lamb_shift);
    let dressed_shift = Cx::new(T::zero(), lamb_shift);
    let mut memory = vec![nan; n];
    let mut memory_samples = 0usize;
    let mut sum = Cx::new(T::zero(), T::zero());
    for i in 0..n {
        if cav[i] && c_rate[i].norm() > opts.rate_mask * r_max {
            let z = c_rate[i] / c[i] + dressed_shift;
            let v = -(ratio[i] - offset) / z;
            memory[i] = v;
            sum += v;
            memory_samples += 1;
        }
    }
    if memory_samples < MIN_ESTIMATOR_SAMPLES {
        return Err(Error::InsufficientData {
            available: memory_samples,
            required: MIN_ESTIMATOR_SAMPLES,
        });
    }
    let memory_mean = sum / T::from_usize_lossy(memory_samples);
    let var = memory
        .iter()
        .filter(|v| !v.re.is_nan())
        .map(|v| (*v - memory_mean).norm_sqr())
        .sum::<T>()
        / T::from_usize_lossy(memory_samples);
    let memory_relative_std = var.sqrt() / memory_mean.norm();
    let non_markov = fitted.unwrap_or(memory_mean);
    let params = EffectiveModelParams::new(T::lit(2.0) * half_kappa, lamb_shift, non_markov)?;
    Ok(ParameterEstimate {
        params,
        grid: *grid,
        ratio,
        memory,
        cavity_samples,
        memory_samples,
        mean_ratio,
        memory_mean,
        memory_relative_std,
    })
}

/// Estimates the effective-model parameters of `node` from an emission trajectory.
pub fn estimate_params<T: Real>(
    traj: &Trajectory<T>,
    system: &LinkSystem<T>,
    node: Node,
    opts: &EstimatorOptions<T>,
) -> Result<ParameterEstimate<T>> {
    let j = node.index();
    let gamma = gamma_extract(traj, system, node)?;
    // derivative in the frame of the bare resonator
    let det = system.cavity_detuning(j);
    let rate: Vec<Cx<T>> = traj.cavity_rates[j]
        .iter()
        .zip(&traj.cavities[j])
        .map(|(r, c)| *r + mul_i(*c * det))
        .collect();
    estimate_from_series(&traj.grid, &traj.cavities[j], &rate, &gamma, opts)
}
