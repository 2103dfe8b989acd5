//! Inversion of the effective qubit-cavity model: from a target injected field
//! to the complex coupling `g(t)` that emits it.
//!
//! Conventions: the cavity amplitude is `c = xi / sqrt(kappa)`, `d = -i c`,
//! `d = e^{r - i theta}`, `q = e^{x - i sigma}`. Synthesis happens in the frame
//! of the dressed resonator, so the Lamb shift does not appear explicitly.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{cumulative_integral, interp_uniform, unwrap_phase};
use crate::scalar::{cx, mul_i, mul_neg_i, real, sech, Cx, Real};
use crate::wavepacket::{distorted_sech_field, FieldTarget, TimeGrid, TimeTrace};

/// Parameters of the effective single-mode model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectiveModelParams<T> {
    /// Decay rate in rad/ns.
    pub kappa: T,
    /// Lamb shift in rad/ns.
    pub lamb_shift: T,
    /// First-order memory correction.
    pub non_markov: Cx<T>,
}

impl<T: Real> EffectiveModelParams<T> {
    pub fn new(kappa: T, lamb_shift: T, non_markov: Cx<T>) -> Result<Self> {
        let p = Self {
            kappa,
            lamb_shift,
            non_markov,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn markovian(kappa: T) -> Self {
        Self {
            kappa,
            lamb_shift: T::zero(),
            non_markov: Cx::new(T::zero(), T::zero()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.kappa > T::zero()) || !self.kappa.is_finite() {
            return Err(Error::Config(format!(
                "kappa must be positive, got {}",
                self.kappa
            )));
        }
        if !(self.non_markov.norm() < T::one()) {
            return Err(Error::Config(format!(
                "|N| must be below 1, got {}",
                self.non_markov.norm()
            )));
        }
        if !self.lamb_shift.is_finite() {
            return Err(Error::Config("Lamb shift must be finite".into()));
        }
        Ok(())
    }

    pub fn without_memory(&self) -> Self {
        Self {
            non_markov: Cx::new(T::zero(), T::zero()),
            ..*self
        }
    }
}

/// How a control was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Markovian,
    NonMarkovian,
    AnalyticSech,
}

/// Sampled complex coupling `g(t)` in rad/ns.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlPulse<T> {
    pub grid: TimeGrid<T>,
    pub samples: Vec<Cx<T>>,
    pub provenance: Provenance,
    pub params: EffectiveModelParams<T>,
}

impl<T: Real> ControlPulse<T> {
    /// Cubic interpolation between samples; zero outside the window.
    pub fn value_at(&self, t: T) -> Cx<T> {
        interp_uniform(&self.samples, self.grid.t0, self.grid.dt, t)
    }

    pub fn max_abs(&self) -> T {
        self.samples
            .iter()
            .map(|g| g.norm())
            .fold(T::zero(), T::max)
    }

    /// Writes `t,re_g,im_g` rows.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t,re_g,im_g")?;
        for (i, g) in self.samples.iter().enumerate() {
            writeln!(w, "{},{},{}", self.grid.time(i), g.re, g.im)?;
        }
        Ok(())
    }

    /// Reads the format written by [`ControlPulse::write_csv`]; the grid must be uniform.
    pub fn read_csv<R: BufRead>(
        r: R,
        provenance: Provenance,
        params: EffectiveModelParams<T>,
    ) -> Result<Self> {
        let mut times = Vec::new();
        let mut samples = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line.map_err(|e| Error::Config(e.to_string()))?;
            if n == 0 || line.trim().is_empty() {
                continue;
            }
            let cols: Vec<f64> = line
                .split(',')
                .map(|c| c.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
            if cols.len() != 3 {
                return Err(Error::Config(format!("line {}: expected 3 columns", n + 1)));
            }
            times.push(T::lit(cols[0]));
            samples.push(cx(T::lit(cols[1]), T::lit(cols[2])));
        }
        if times.len() < 2 {
            return Err(Error::Config("control file needs at least two rows".into()));
        }
        let grid = TimeGrid::spanning(times[0], times[times.len() - 1], times.len())?;
        for (i, t) in times.iter().enumerate() {
            if (grid.time(i) - *t).abs() > T::lit(1e-6) * grid.dt {
                return Err(Error::GridMismatch(
                    "control samples are not uniformly spaced".into(),
                ));
            }
        }
        Ok(Self {
            grid,
            samples,
            provenance,
            params,
        })
    }
}

/// Qubit and cavity amplitudes implied by a synthesized control.
#[derive(Debug, Clone, PartialEq)]
pub struct QubitCavityTrace<T> {
    pub grid: TimeGrid<T>,
    pub q: Vec<Cx<T>>,
    pub c: Vec<Cx<T>>,
    pub population: Vec<T>,
    pub r: Vec<T>,
    pub theta: Vec<T>,
    pub x: Vec<T>,
    pub sigma: Vec<T>,
}

/// Numerical guards for [`control_from_field`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthesisOptions<T> {
    /// `g = 0` where `|d| < cavity_guard * max |d|`.
    pub cavity_guard: T,
    /// `g = 0` once the qubit population drops below this.
    pub population_floor: T,
    /// Allowed excursion of `|q|^2` outside `[0, 1]`.
    pub feasibility_tol: T,
    /// Optional bound on `|g|` in rad/ns.
    pub g_max: Option<T>,
}

impl<T: Real> Default for SynthesisOptions<T> {
    fn default() -> Self {
        Self {
            cavity_guard: T::lit(1e-8),
            population_floor: T::lit(1e-13),
            feasibility_tol: T::lit(1e-9),
            g_max: None,
        }
    }
}

/// `d(t) = -i xi(t) / sqrt(kappa)`.
pub fn cavity_from_field<T: Real>(xi: &TimeTrace<T>, kappa: T) -> Vec<Cx<T>> {
    let s = T::one() / kappa.sqrt();
    xi.values.iter().map(|v| mul_neg_i(*v) * s).collect()
}

/// `|q(t0)|^2` such that the qubit starts fully excited in the infinite past.
pub fn initial_population<T: Real>(target: &FieldTarget<T>, params: &EffectiveModelParams<T>) -> T {
    let n = params.non_markov;
    let xi0 = target.trace.values[0].norm_sqr();
    T::one()
        - target.prior.energy
        - ((T::one() - n.re) * xi0 + T::lit(2.0) * n.im * target.prior.phase_flux) / params.kappa
}

/// Cumulative qubit population consistent with emitting `target`.
pub fn qubit_population<T: Real>(
    target: &FieldTarget<T>,
    params: &EffectiveModelParams<T>,
    q0_sq: T,
    tol: T,
) -> Result<Vec<T>> {
    params.validate()?;
    let grid = target.trace.grid;
    let xi = &target.trace.values;
    let dxi = &target.derivative;
    let n = params.non_markov;
    let power: Vec<T> = xi.iter().map(|v| v.norm_sqr()).collect();
    let flux: Vec<T> = xi.iter().zip(dxi).map(|(a, b)| (a.conj() * b).im).collect();
    let emitted = cumulative_integral(&power, grid.dt);
    let phase = cumulative_integral(&flux, grid.dt);
    let two = T::lit(2.0);
    let pop: Vec<T> = (0..grid.len)
        .map(|i| {
            q0_sq
                - emitted[i]
                - ((T::one() - n.re) * (power[i] - power[0]) + two * n.im * phase[i]) / params.kappa
        })
        .collect();
    for (i, p) in pop.iter().enumerate() {
        if *p < -tol || *p > T::one() + tol || !p.is_finite() {
            return Err(Error::InfeasiblePulse {
                time: grid.time(i).as_f64(),
                population: p.as_f64(),
            });
        }
    }
    Ok(pop)
}

/// A control together with the implied qubit and cavity trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Synthesis<T> {
    pub control: ControlPulse<T>,
    pub trace: QubitCavityTrace<T>,
}

/// Synthesizes `g(t)` emitting `target` under the effective model `params`.
pub fn control_from_field<T: Real>(
    target: &FieldTarget<T>,
    params: &EffectiveModelParams<T>,
    opts: &SynthesisOptions<T>,
) -> Result<Synthesis<T>> {
    params.validate()?;
    let grid = target.trace.grid;
    let kappa = params.kappa;
    let n = params.non_markov;
    let one_minus_n = Cx::new(T::one() - n.re, -n.im);
    let half_kappa = T::lit(0.5) * kappa;
    let two = T::lit(2.0);

    let d = cavity_from_field(&target.trace, kappa);
    let q0_sq = initial_population(target, params);
    let pop = qubit_population(target, params, q0_sq, opts.feasibility_tol)?;

    let xi = &target.trace.values;
    let dxi = &target.derivative;
    let d_max = d.iter().map(|v| v.norm()).fold(T::zero(), T::max);
    if !(d_max > T::zero()) {
        return Err(Error::ZeroNorm);
    }
    let active: Vec<bool> = (0..grid.len)
        .map(|i| d[i].norm() >= opts.cavity_guard * d_max && pop[i] > opts.population_floor)
        .collect();

    let mut x_dot = vec![T::zero(); grid.len];
    let mut sigma_dot = vec![T::zero(); grid.len];
    for i in 0..grid.len {
        if !active[i] {
            continue;
        }
        // d'/d = xi'/xi = r' - i theta'
        let log_rate = dxi[i] / xi[i];
        let s = xi[i].conj() * dxi[i];
        let pop_rate = -xi[i].norm_sqr() - two * (one_minus_n * s).re / kappa;
        x_dot[i] = pop_rate / (two * pop[i]);
        let z = log_rate * one_minus_n + real(half_kappa);
        if z.re.abs() <= T::lit(1e-12) * kappa {
            return Err(Error::DenominatorVanishes {
                time: grid.time(i).as_f64(),
            });
        }
        sigma_dot[i] = x_dot[i] * z.im / z.re;
    }

    let theta = unwrap_phase(&d.iter().map(|v| -v.arg()).collect::<Vec<_>>());
    let r: Vec<T> = d.iter().map(|v| v.norm().ln()).collect();
    let x: Vec<T> = pop
        .iter()
        .map(|p| T::lit(0.5) * p.max(T::zero()).ln())
        .collect();
    let sigma0 = theta[0] + T::PI();
    let sigma: Vec<T> = cumulative_integral(&sigma_dot, grid.dt)
        .into_iter()
        .map(|s| s + sigma0)
        .collect();

    let mut q = Vec::with_capacity(grid.len);
    let mut samples = Vec::with_capacity(grid.len);
    for i in 0..grid.len {
        let qi = Cx::from_polar(pop[i].max(T::zero()).sqrt(), -sigma[i]);
        q.push(qi);
        let g = if active[i] {
            Cx::new(x_dot[i], -sigma_dot[i]) * qi / d[i]
        } else {
            Cx::new(T::zero(), T::zero())
        };
        if !(g.re.is_finite() && g.im.is_finite()) {
            return Err(Error::DenominatorVanishes {
                time: grid.time(i).as_f64(),
            });
        }
        if let Some(bound) = opts.g_max {
            if g.norm() > bound {
                return Err(Error::ControlBound {
                    time: grid.time(i).as_f64(),
                    magnitude: g.norm().as_f64(),
                });
            }
        }
        samples.push(g);
    }
    let provenance = if n.norm() > T::zero() {
        Provenance::NonMarkovian
    } else {
        Provenance::Markovian
    };
    let c = d.iter().map(|v| mul_i(*v)).collect();
    Ok(Synthesis {
        control: ControlPulse {
            grid,
            samples,
            provenance,
            params: *params,
        },
        trace: QubitCavityTrace {
            grid,
            q,
            c,
            population: pop,
            r,
            theta,
            x,
            sigma,
        },
    })
}

/// Closed-form control emitting a sech photon under a real memory correction `n`:
/// `g = kappa u sech(a t / 2) / (2 sqrt(n + (1 - n) u^2))`, `a = kappa / (1 - n)`, `u = 1 / (1 + e^{a t})`.
/// At `n = 0` this is `(kappa/2) sech(kappa t / 2)`.
pub fn analytic_sech_control<T: Real>(
    kappa: T,
    n: T,
    center: T,
    grid: &TimeGrid<T>,
) -> Result<ControlPulse<T>> {
    if !(n >= T::zero() && n < T::one()) {
        return Err(Error::Config(format!(
            "analytic control needs 0 <= N < 1, got {n}"
        )));
    }
    let params = EffectiveModelParams::new(kappa, T::zero(), real(n))?;
    let a = kappa / (T::one() - n);
    let half = T::lit(0.5);
    let samples = (0..grid.len)
        .map(|i| {
            let t = grid.time(i) - center;
            let u = crate::scalar::logistic_neg(a * t);
            let denom = (n + (T::one() - n) * u * u).sqrt();
            // u / denom -> 1 as n -> 0 even when u underflows
            let ratio = if n == T::zero() { T::one() } else { u / denom };
            real(half * kappa * ratio * sech(half * a * t))
        })
        .collect();
    Ok(ControlPulse {
        grid: *grid,
        samples,
        provenance: Provenance::AnalyticSech,
        params,
    })
}

/// How [`max_correctable_distortion`] decides the threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DmaxMethod {
    /// Bisection on the feasibility of the chirped sech photon.
    Scan,
    /// `3 / (2 sqrt(5) kappa^2)`.
    ClosedForm,
}

/// Whether the sech photon with quadratic spectral phase `exp(-i D w^2)` can be emitted.
pub fn chirp_is_feasible<T: Real>(kappa: T, d: T, tol: T) -> Result<bool> {
    let grid = TimeGrid::symmetric_with_step(T::lit(30.0) / kappa, T::lit(0.02) / kappa)?;
    let target = distorted_sech_field(kappa, d, T::zero(), &grid)?;
    let params = EffectiveModelParams::markovian(kappa);
    let q0 = initial_population(&target, &params);
    match qubit_population(&target, &params, q0, tol) {
        Ok(_) => Ok(true),
        Err(Error::InfeasiblePulse { .. }) => Ok(false),
        Err(e) => Err(e),
    }
}

/// Largest chirp `D` (ns²) a Markovian emitter can imprint on a sech photon.
pub fn max_correctable_distortion<T: Real>(kappa: T, method: DmaxMethod) -> Result<T> {
    if !(kappa > T::zero()) {
        return Err(Error::Config("kappa must be positive".into()));
    }
    let closed = T::lit(3.0) / (T::lit(2.0) * T::lit(5.0).sqrt() * kappa * kappa);
    if method == DmaxMethod::ClosedForm {
        return Ok(closed);
    }
    let tol = T::lit(1e-9);
    let mut lo = T::zero();
    let mut hi = closed;
    while chirp_is_feasible(kappa, hi, tol)? {
        lo = hi;
        hi = hi * T::lit(2.0);
        if hi > T::lit(64.0) * closed {
            return Err(Error::Consistency(
                "no infeasible chirp found while bracketing".into(),
            ));
        }
    }
    while hi - lo > T::lit(1e-4) * hi {
        let mid = T::lit(0.5) * (lo + hi);
        if chirp_is_feasible(kappa, mid, tol)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(T::lit(0.5) * (lo + hi))
}

/// `g_2(t) = conj(g_1(-t))`, the absorbing control for a mirror-symmetric protocol.
pub fn receiver_control<T: Real>(emit: &ControlPulse<T>) -> Result<ControlPulse<T>> {
    if !emit.grid.is_symmetric() {
        return Err(Error::AsymmetricWindow {
            start: emit.grid.t0.as_f64(),
            end: emit.grid.end().as_f64(),
        });
    }
    let samples = emit.samples.iter().rev().map(|g| g.conj()).collect();
    Ok(ControlPulse {
        samples,
        ..emit.clone()
    })
}

/// Forward model used to verify controls and to manufacture estimator test data.
///
/// In the frame rotating at the carrier: `q' = -i Δq q - i g c`,
/// `(1 - N) c' = -i g* q - (kappa/2 + i δω (1 - N)) c`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EffectiveModel<T> {
    pub params: EffectiveModelParams<T>,
    pub qubit_detuning: T,
}

/// Samples produced by [`EffectiveModel::simulate`].
#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveTrajectory<T> {
    pub grid: TimeGrid<T>,
    pub q: Vec<Cx<T>>,
    pub c: Vec<Cx<T>>,
    pub c_dot: Vec<Cx<T>>,
}

impl<T: Real> EffectiveTrajectory<T> {
    /// Injected field `sqrt(kappa) c`.
    pub fn emitted_field(&self, kappa: T) -> TimeTrace<T> {
        let s = kappa.sqrt();
        TimeTrace {
            grid: self.grid,
            values: self.c.iter().map(|c| *c * s).collect(),
        }
    }
}

impl<T: Real> EffectiveModel<T> {
    /// Resonant qubit in the dressed frame.
    pub fn resonant(params: EffectiveModelParams<T>) -> Self {
        Self {
            params,
            qubit_detuning: params.lamb_shift,
        }
    }

    fn rhs(&self, g: Cx<T>, q: Cx<T>, c: Cx<T>) -> (Cx<T>, Cx<T>) {
        let p = &self.params;
        let one_minus_n = Cx::new(T::one() - p.non_markov.re, -p.non_markov.im);
        let dq = mul_neg_i(q * self.qubit_detuning + g * c);
        let loss = real(T::lit(0.5) * p.kappa) + mul_i(one_minus_n * p.lamb_shift);
        let dc = (mul_neg_i(g.conj() * q) - loss * c) / one_minus_n;
        (dq, dc)
    }

    /// Classical RK4 on `grid` with the control evaluated at the stage times.
    pub fn simulate<F: Fn(T) -> Cx<T>>(
        &self,
        control: F,
        grid: &TimeGrid<T>,
        q0: Cx<T>,
        c0: Cx<T>,
    ) -> EffectiveTrajectory<T> {
        let h = grid.dt;
        let half = T::lit(0.5) * h;
        let sixth = h / T::lit(6.0);
        let mut q = Vec::with_capacity(grid.len);
        let mut c = Vec::with_capacity(grid.len);
        let mut c_dot = Vec::with_capacity(grid.len);
        let (mut qs, mut cs) = (q0, c0);
        for i in 0..grid.len {
            let t = grid.time(i);
            let g0 = control(t);
            let (k1q, k1c) = self.rhs(g0, qs, cs);
            q.push(qs);
            c.push(cs);
            c_dot.push(k1c);
            if i + 1 == grid.len {
                break;
            }
            let gm = control(t + half);
            let g1 = control(t + h);
            let (k2q, k2c) = self.rhs(gm, qs + k1q * half, cs + k1c * half);
            let (k3q, k3c) = self.rhs(gm, qs + k2q * half, cs + k2c * half);
            let (k4q, k4c) = self.rhs(g1, qs + k3q * h, cs + k3c * h);
            qs = qs + (k1q + k2q * T::lit(2.0) + k3q * T::lit(2.0) + k4q) * sixth;
            cs = cs + (k1c + k2c * T::lit(2.0) + k3c * T::lit(2.0) + k4c) * sixth;
        }
        EffectiveTrajectory {
            grid: *grid,
            q,
            c,
            c_dot,
        }
    }
}
