//! Photon wavepackets in frequency and time, predistortion, reconstruction and overlaps.
//!
//! All time traces live in the frame rotating at the carrier frequency.
//! Spectral amplitudes are plain mode amplitudes (no quadrature weights).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linkmodel::{nonlinear_residual, DispersionRelation, Link};
use crate::numerics::centered_derivative;
use crate::scalar::{cis, mul_neg_i, real, sech, Cx, Real};

/// Amplitude ratio allowed at either edge of the retained band.
pub const BAND_EDGE_GUARD: f64 = 1e-6;

/// Uniform time grid `t0 + i dt`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid<T> {
    pub t0: T,
    pub dt: T,
    pub len: usize,
}

impl<T: Real> TimeGrid<T> {
    pub fn new(t0: T, dt: T, len: usize) -> Result<Self> {
        if !(dt > T::zero()) || len < 2 {
            return Err(Error::Config(format!(
                "time grid needs dt > 0 and >= 2 samples (dt = {dt}, n = {len})"
            )));
        }
        Ok(Self { t0, dt, len })
    }

    /// `len` samples from `t0` to `t1` inclusive.
    pub fn spanning(t0: T, t1: T, len: usize) -> Result<Self> {
        if len < 2 || !(t1 > t0) {
            return Err(Error::Config(
                "time grid needs t1 > t0 and >= 2 samples".into(),
            ));
        }
        Self::new(t0, (t1 - t0) / T::from_usize_lossy(len - 1), len)
    }

    /// `[-half_width, half_width]` with `len` samples.
    pub fn symmetric(half_width: T, len: usize) -> Result<Self> {
        Self::spanning(-half_width, half_width, len)
    }

    /// Symmetric grid with spacing at most `max_dt`.
    pub fn symmetric_with_step(half_width: T, max_dt: T) -> Result<Self> {
        let n = (T::lit(2.0) * half_width / max_dt)
            .ceil()
            .to_usize()
            .unwrap_or(1)
            + 1;
        Self::symmetric(half_width, n.max(3))
    }

    pub fn time(&self, i: usize) -> T {
        self.t0 + self.dt * T::from_usize_lossy(i)
    }

    pub fn end(&self) -> T {
        self.time(self.len - 1)
    }

    pub fn times(&self) -> Vec<T> {
        (0..self.len).map(|i| self.time(i)).collect()
    }

    pub fn shifted(&self, by: T) -> Self {
        Self {
            t0: self.t0 + by,
            ..*self
        }
    }

    /// True when the grid is symmetric about zero to a relative tolerance.
    pub fn is_symmetric(&self) -> bool {
        let span = self.end() - self.t0;
        (self.t0 + self.end()).abs() <= T::lit(1e-9) * span.max(T::one())
    }

    pub fn same_as(&self, other: &Self) -> bool {
        let tol = T::lit(1e-9) * self.dt;
        self.len == other.len
            && (self.t0 - other.t0).abs() <= tol * T::from_usize_lossy(self.len)
            && (self.dt - other.dt).abs() <= tol
    }
}

/// Complex samples on a uniform time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeTrace<T> {
    pub grid: TimeGrid<T>,
    pub values: Vec<Cx<T>>,
}

impl<T: Real> TimeTrace<T> {
    pub fn new(grid: TimeGrid<T>, values: Vec<Cx<T>>) -> Result<Self> {
        if values.len() != grid.len {
            return Err(Error::GridMismatch(format!(
                "{} samples for a {}-point grid",
                values.len(),
                grid.len
            )));
        }
        Ok(Self { grid, values })
    }

    pub fn from_fn(grid: TimeGrid<T>, f: impl Fn(T) -> Cx<T>) -> Self {
        let values = (0..grid.len).map(|i| f(grid.time(i))).collect();
        Self { grid, values }
    }

    /// Discrete `sum |v|^2 dt`.
    pub fn energy(&self) -> T {
        self.values.iter().map(|v| v.norm_sqr()).sum::<T>() * self.grid.dt
    }

    pub fn normalized(&self) -> Result<Self> {
        let e = self.values.iter().map(|v| v.norm_sqr()).sum::<T>();
        if !(e > T::zero()) {
            return Err(Error::ZeroNorm);
        }
        let s = T::one() / e.sqrt();
        Ok(Self {
            grid: self.grid,
            values: self.values.iter().map(|v| *v * s).collect(),
        })
    }
}

/// Normalized photon amplitudes over the link's mode grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralWavepacket<T> {
    pub amplitudes: Vec<Cx<T>>,
    /// Frame the time-domain field is expressed in (rad/ns).
    pub frame_frequency: T,
}

impl<T: Real> SpectralWavepacket<T> {
    /// Normalizes `amplitudes` to unit norm.
    pub fn from_amplitudes(amplitudes: Vec<Cx<T>>, frame_frequency: T) -> Result<Self> {
        let n = amplitudes.iter().map(|a| a.norm_sqr()).sum::<T>();
        if !(n > T::zero()) {
            return Err(Error::ZeroNorm);
        }
        let s = T::one() / n.sqrt();
        Ok(Self {
            amplitudes: amplitudes.into_iter().map(|a| a * s).collect(),
            frame_frequency,
        })
    }

    pub fn norm_sqr(&self) -> T {
        self.amplitudes.iter().map(|a| a.norm_sqr()).sum()
    }
}

/// Anything that can be compared with [`pulse_fidelity`].
pub trait Amplitudes<T: Real> {
    fn amplitudes(&self) -> &[Cx<T>];
    fn compatible(&self, other: &Self) -> bool;
}

impl<T: Real> Amplitudes<T> for SpectralWavepacket<T> {
    fn amplitudes(&self) -> &[Cx<T>] {
        &self.amplitudes
    }
    fn compatible(&self, other: &Self) -> bool {
        self.amplitudes.len() == other.amplitudes.len()
    }
}

impl<T: Real> Amplitudes<T> for TimeTrace<T> {
    fn amplitudes(&self) -> &[Cx<T>] {
        &self.values
    }
    fn compatible(&self, other: &Self) -> bool {
        self.grid.same_as(&other.grid)
    }
}

/// `|<a|b>|^2 / (|a|^2 |b|^2)` over the raw samples.
pub fn overlap_fidelity<T: Real>(a: &[Cx<T>], b: &[Cx<T>]) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::GridMismatch(format!(
            "{} vs {} samples",
            a.len(),
            b.len()
        )));
    }
    let na: T = a.iter().map(|v| v.norm_sqr()).sum();
    let nb: T = b.iter().map(|v| v.norm_sqr()).sum();
    if !(na > T::zero()) || !(nb > T::zero()) {
        return Err(Error::ZeroNorm);
    }
    let ip: Cx<T> = a.iter().zip(b).map(|(x, y)| x.conj() * y).sum();
    Ok((ip.norm_sqr() / (na * nb)).min(T::one()))
}

/// Squared overlap of two normalized photons on the same grid; no time-shift search.
pub fn pulse_fidelity<T: Real, A: Amplitudes<T>>(a: &A, b: &A) -> Result<T> {
    if !a.compatible(b) {
        return Err(Error::GridMismatch(
            "pulse fidelity needs both inputs on the same grid".into(),
        ));
    }
    overlap_fidelity(a.amplitudes(), b.amplitudes())
}

/// `psi_k ∝ sech(pi (omega_k - omega_c) / kappa)`, normalized on the grid.
pub fn sech_target<T: Real>(kappa: T, link: &Link<T>) -> Result<SpectralWavepacket<T>> {
    if !(kappa > T::zero()) {
        return Err(Error::Config("kappa must be positive".into()));
    }
    let wc = link.carrier_frequency();
    let amps: Vec<Cx<T>> = link
        .frequencies()
        .iter()
        .map(|w| real(sech(T::PI() * (*w - wc) / kappa)))
        .collect();
    let peak = amps.iter().map(|a| a.re).fold(T::zero(), T::max);
    let edge = amps[0].re.max(amps[amps.len() - 1].re);
    let ratio = edge / peak;
    if ratio > T::lit(BAND_EDGE_GUARD) {
        return Err(Error::BandEdge {
            edge_ratio: ratio.as_f64(),
        });
    }
    SpectralWavepacket::from_amplitudes(amps, wc)
}

/// Multiplies each mode by `exp(+i omega_NL(k) t_AB share)`.
pub fn predistort<T: Real>(
    wp: &SpectralWavepacket<T>,
    link: &Link<T>,
    k0: T,
    t_ab: T,
    share: T,
) -> Result<SpectralWavepacket<T>> {
    if share < T::zero() || share > T::one() {
        return Err(Error::Config(format!(
            "distortion share must lie in [0, 1], got {share}"
        )));
    }
    if wp.amplitudes.len() != link.grid.count() {
        return Err(Error::GridMismatch(
            "wavepacket and link have different mode counts".into(),
        ));
    }
    let amplitudes = wp
        .amplitudes
        .iter()
        .zip(link.grid.wavenumbers())
        .map(|(a, k)| *a * cis(nonlinear_residual(&link.dispersion, k, k0) * t_ab * share))
        .collect();
    Ok(SpectralWavepacket {
        amplitudes,
        frame_frequency: wp.frame_frequency,
    })
}

/// `xi(x, t) = sum_k psi_k exp(i k x - i (omega_k - frame) t)`.
pub fn field_at<T: Real>(
    wp: &SpectralWavepacket<T>,
    link: &Link<T>,
    x: T,
    grid: &TimeGrid<T>,
) -> Result<TimeTrace<T>> {
    if x < T::zero() || x > link.grid.length() {
        return Err(Error::Config(format!("position {x} m is outside the link")));
    }
    if wp.amplitudes.len() != link.grid.count() {
        return Err(Error::GridMismatch(
            "wavepacket and link have different mode counts".into(),
        ));
    }
    let weighted: Vec<Cx<T>> = wp
        .amplitudes
        .iter()
        .zip(link.grid.wavenumbers())
        .map(|(a, k)| *a * cis(k * x))
        .collect();
    let det = link.detunings(wp.frame_frequency);
    Ok(TimeTrace {
        grid: *grid,
        values: mode_sum(&weighted, &det, grid, T::zero()),
    })
}

/// `sum_k a_k exp(-i det_k (t - t_ref))` on every grid time.
pub(crate) fn mode_sum<T: Real>(
    a: &[Cx<T>],
    det: &[T],
    grid: &TimeGrid<T>,
    t_ref: T,
) -> Vec<Cx<T>> {
    (0..grid.len)
        .into_par_iter()
        .map(|i| {
            let tau = grid.time(i) - t_ref;
            a.iter().zip(det).map(|(ak, w)| *ak * cis(-*w * tau)).sum()
        })
        .collect()
}

/// `D = D_2 t_AB / (2 v_g^2)`, in ns².
pub fn distortion_parameter<T: Real>(disp: &DispersionRelation<T>, k0: T, t_ab: T) -> Result<T> {
    let vg = disp.group_velocity(k0);
    if !(vg > T::zero()) {
        return Err(Error::CutoffCarrier);
    }
    Ok(disp.curvature(k0) * t_ab / (T::lit(2.0) * vg * vg))
}

/// Leading-order overlap `1 - D^2 kappa^4 / 45` between a sech photon and its chirped copy.
pub fn analytic_overlap_series<T: Real>(d: T, kappa: T) -> T {
    let x = d * kappa * kappa;
    T::one() - x * x / T::lit(45.0)
}

/// `|<xi(0)|xi(D)>|^2` for a normalized sech photon, by trapezoid quadrature of
/// `int |f(w)|^2 exp(-i D w^2) dw` over `|w| <= 40 kappa`.
pub fn chirp_overlap<T: Real>(kappa: T, d: T) -> Result<T> {
    if !(kappa > T::zero()) {
        return Err(Error::Config("kappa must be positive".into()));
    }
    let half_n = 16_000usize;
    let w_max = T::lit(40.0) * kappa;
    let dw = w_max / T::from_usize_lossy(half_n);
    let mut acc = Cx::new(T::zero(), T::zero());
    let mut norm = T::zero();
    for j in 0..=2 * half_n {
        let w = -w_max + dw * T::from_usize_lossy(j);
        let p = sech_spectrum(kappa, w).powi(2);
        acc += cis(-d * w * w) * p;
        norm += p;
    }
    Ok(acc.norm_sqr() / (norm * norm))
}

/// What was emitted before the first sample of a target, needed to start the
/// qubit population at the right value.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PriorEmission<T> {
    /// `int_{-inf}^{t0} |xi|^2 dt`.
    pub energy: T,
    /// `int_{-inf}^{t0} Im(xi* xi') dt`.
    pub phase_flux: T,
}

/// A target injected field with its time derivative, ready for control synthesis.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldTarget<T> {
    pub trace: TimeTrace<T>,
    pub derivative: Vec<Cx<T>>,
    pub prior: PriorEmission<T>,
}

impl<T: Real> FieldTarget<T> {
    /// Derivative by centred differences, prior emission from an exponential tail.
    pub fn from_samples(trace: TimeTrace<T>) -> Self {
        let derivative = centered_derivative(&trace.values, trace.grid.dt);
        let prior = exponential_prior(trace.values[0], derivative[0]);
        Self {
            trace,
            derivative,
            prior,
        }
    }

    pub fn with_derivative(trace: TimeTrace<T>, derivative: Vec<Cx<T>>) -> Result<Self> {
        if derivative.len() != trace.values.len() {
            return Err(Error::GridMismatch(
                "derivative length differs from trace".into(),
            ));
        }
        let prior = exponential_prior(trace.values[0], derivative[0]);
        Ok(Self {
            trace,
            derivative,
            prior,
        })
    }

    pub fn grid(&self) -> &TimeGrid<T> {
        &self.trace.grid
    }

    /// Total energy including what precedes the window.
    pub fn total_energy(&self) -> T {
        self.prior.energy
            + crate::numerics::cumulative_integral(
                &self
                    .trace
                    .values
                    .iter()
                    .map(|v| v.norm_sqr())
                    .collect::<Vec<_>>(),
                self.trace.grid.dt,
            )[self.trace.values.len() - 1]
    }
}

/// Tail estimate assuming `xi ~ exp(a t)` before the window.
pub fn exponential_prior<T: Real>(xi0: Cx<T>, dxi0: Cx<T>) -> PriorEmission<T> {
    let p = xi0.norm_sqr();
    if !(p > T::zero()) {
        return PriorEmission::default();
    }
    let rate = dxi0 / xi0;
    let gamma = T::lit(2.0) * rate.re;
    if !(gamma > T::zero()) {
        return PriorEmission::default();
    }
    PriorEmission {
        energy: p / gamma,
        phase_flux: p * rate.im / gamma,
    }
}

/// `sqrt(kappa/4) sech(kappa (t - center) / 2)` with analytic derivative and history.
pub fn sech_field<T: Real>(kappa: T, center: T, grid: &TimeGrid<T>) -> FieldTarget<T> {
    let half = T::lit(0.5) * kappa;
    let amp = (kappa / T::lit(4.0)).sqrt();
    let mut values = Vec::with_capacity(grid.len);
    let mut derivative = Vec::with_capacity(grid.len);
    for i in 0..grid.len {
        let u = half * (grid.time(i) - center);
        let v = amp * sech(u);
        values.push(real(v));
        derivative.push(real(-half * u.tanh() * v));
    }
    let u0 = half * (grid.t0 - center);
    let prior = PriorEmission {
        energy: T::lit(0.5) * (T::one() + u0.tanh()),
        phase_flux: T::zero(),
    };
    FieldTarget {
        trace: TimeTrace {
            grid: *grid,
            values,
        },
        derivative,
        prior,
    }
}

/// Spectral amplitude of the unit-energy sech photon, `sqrt(pi/(2 kappa)) sech(pi w / kappa)`.
pub fn sech_spectrum<T: Real>(kappa: T, w: T) -> T {
    (T::PI() / (T::lit(2.0) * kappa)).sqrt() * sech(T::PI() * w / kappa)
}

/// Time-domain field of a sech photon carrying the spectral phase `phase(w)`,
/// `xi(t) = (2 pi)^{-1/2} int f(w) e^{i phase(w)} e^{-i w (t - center)} dw`.
///
/// `phase` returns `None` where the frequency does not propagate; those
/// components are dropped. The integral is a trapezoid sum fine enough that
/// periodic images stay far outside the grid.
pub fn spectral_sech_field<T, F>(
    kappa: T,
    phase: F,
    center: T,
    grid: &TimeGrid<T>,
) -> Result<FieldTarget<T>>
where
    T: Real,
    F: Fn(T) -> Option<T> + Sync,
{
    if !(kappa > T::zero()) {
        return Err(Error::Config("kappa must be positive".into()));
    }
    let w_max = T::lit(12.0) * kappa;
    let probe = 4001usize;
    let dw_probe = T::lit(2.0) * w_max / T::from_usize_lossy(probe - 1);
    let mut delay = T::zero();
    let mut prev: Option<T> = None;
    for j in 0..probe {
        let w = -w_max + dw_probe * T::from_usize_lossy(j);
        let significant = sech(T::PI() * w / kappa) > T::lit(1e-12);
        match phase(w) {
            Some(p) => {
                if let (Some(q), true) = (prev, significant) {
                    delay = delay.max(((p - q) / dw_probe).abs());
                }
                prev = Some(p);
            }
            None => prev = None,
        }
    }
    let reach = (grid.t0 - center).abs().max((grid.end() - center).abs());
    let period = T::lit(2.0) * (reach + delay) + T::lit(90.0) / kappa;
    let dw_max = T::TAU() / period;
    let half_n = (w_max / dw_max).ceil().to_usize().unwrap_or(1).max(64);
    let dw = w_max / T::from_usize_lossy(half_n);
    let norm = dw / T::TAU().sqrt();
    let comps: Vec<(T, Cx<T>)> = (0..=2 * half_n)
        .filter_map(|j| {
            let w = -w_max + dw * T::from_usize_lossy(j);
            let edge = if j == 0 || j == 2 * half_n {
                T::lit(0.5)
            } else {
                T::one()
            };
            phase(w).map(|p| (w, cis(p) * (sech_spectrum(kappa, w) * norm * edge)))
        })
        .collect();
    let pairs: Vec<(Cx<T>, Cx<T>)> = (0..grid.len)
        .into_par_iter()
        .map(|i| {
            let tau = grid.time(i) - center;
            let mut v = Cx::new(T::zero(), T::zero());
            let mut d = Cx::new(T::zero(), T::zero());
            for (w, a) in &comps {
                let term = *a * cis(-*w * tau);
                v += term;
                d += mul_neg_i(term) * *w;
            }
            (v, d)
        })
        .collect();
    let (values, derivative): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    let trace = TimeTrace {
        grid: *grid,
        values,
    };
    FieldTarget::with_derivative(trace, derivative)
}

/// Sech photon after a quadratic spectral phase `exp(-i D w^2)`.
pub fn distorted_sech_field<T: Real>(
    kappa: T,
    d: T,
    center: T,
    grid: &TimeGrid<T>,
) -> Result<FieldTarget<T>> {
    spectral_sech_field(kappa, |w| Some(-d * w * w), center, grid)
}

/// How the predistortion phase is computed for a continuum target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseModel {
    /// Full nonlinear residual of the dispersion law.
    #[default]
    Exact,
    /// `D_2 (k - k_c)^2 / 2` only.
    Quadratic,
}

/// Sech photon centred at `carrier + carrier_offset` carrying `exp(+i omega_NL(k(w)) * delay)`,
/// `delay = share * t_AB`, with the residual taken about that centre.
/// Components below the guide's cutoff are dropped.
pub fn predistorted_sech_field<T: Real>(
    kappa: T,
    link: &Link<T>,
    delay: T,
    model: PhaseModel,
    carrier_offset: T,
    center: T,
    grid: &TimeGrid<T>,
) -> Result<FieldTarget<T>> {
    let disp = link.dispersion;
    let wp = link.carrier_frequency() + carrier_offset;
    let k0 = disp.wavenumber_at(wp).ok_or(Error::CutoffCarrier)?;
    let d2 = disp.curvature(k0);
    spectral_sech_field(
        kappa,
        |w| {
            let k = disp.wavenumber_at(wp + w)?;
            let nl = match model {
                PhaseModel::Exact => nonlinear_residual(&disp, k, k0),
                PhaseModel::Quadratic => T::lit(0.5) * d2 * (k - k0) * (k - k0),
            };
            Some(nl * delay)
        },
        center,
        grid,
    )
}

/// A spectral packet on the link grid built from a continuum target's spectral phase.
pub fn sample_spectrum<T: Real>(
    kappa: T,
    link: &Link<T>,
    phase: impl Fn(T) -> T,
) -> Result<SpectralWavepacket<T>> {
    let wc = link.carrier_frequency();
    let amps = link
        .frequencies()
        .iter()
        .map(|w| cis(phase(*w - wc)) * sech(T::PI() * (*w - wc) / kappa))
        .collect();
    SpectralWavepacket::from_amplitudes(amps, wc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linkmodel::ModeGrid;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn linear_link(count: usize) -> Link<f64> {
        Link::new(
            ModeGrid::centered(5.0, 500, count).unwrap(),
            DispersionRelation::linear(0.2),
        )
        .unwrap()
    }

    fn wr90_link() -> Link<f64> {
        let d = DispersionRelation::wr90();
        Link::new(
            ModeGrid::around_frequency(5.0, &d, 2.0 * PI * 8.6, 351).unwrap(),
            d,
        )
        .unwrap()
    }

    #[test]
    fn sech_target_symmetric_and_normalized() {
        let link = linear_link(351);
        let wp = sech_target(2.0 * PI * 0.2, &link).unwrap();
        assert!((wp.norm_sqr() - 1.0).abs() < 1e-12);
        let n = wp.amplitudes.len();
        for i in 0..n / 2 {
            assert!((wp.amplitudes[i] - wp.amplitudes[n - 1 - i]).norm() < 1e-12);
        }
    }

    #[test]
    fn band_edge_guard_trips_for_broad_photons() {
        let link = linear_link(31);
        assert!(matches!(
            sech_target(2.0 * PI * 0.4, &link),
            Err(Error::BandEdge { .. })
        ));
        assert!(sech_target(2.0 * PI * 0.2, &wr90_link()).is_ok());
    }

    #[test]
    fn sech_target_field_is_sech() {
        let kappa = 2.0 * PI * 0.05;
        let link = linear_link(351);
        let wp = sech_target(kappa, &link).unwrap();
        // one revival period; the discrete-mode field repeats, so the fitted shape includes the images
        let period = link.revival_time().unwrap();
        let grid = TimeGrid::symmetric(0.5 * period, 2001).unwrap();
        let f = field_at(&wp, &link, 0.0, &grid).unwrap();
        let shape: Vec<f64> = grid
            .times()
            .iter()
            .map(|t| {
                (-3..=3)
                    .map(|n| sech(kappa * (t - n as f64 * period) / 2.0))
                    .sum()
            })
            .collect();
        let a = f
            .values
            .iter()
            .zip(&shape)
            .map(|(v, s)| v.re * s)
            .sum::<f64>()
            / shape.iter().map(|s| s * s).sum::<f64>();
        let num: f64 = f
            .values
            .iter()
            .zip(&shape)
            .map(|(v, s)| (v - a * s).norm_sqr())
            .sum();
        let den: f64 = f.values.iter().map(|v| v.norm_sqr()).sum();
        assert!((num / den).sqrt() < 1e-3, "{}", (num / den).sqrt());
    }

    #[test]
    fn predistortion_undone_by_quadratic_propagation() {
        let link0 = wr90_link();
        let quad = link0.dispersion.quadratic_about(link0.carrier_wavenumber());
        let link = Link::new(link0.grid.clone(), quad).unwrap();
        let kappa = 2.0 * PI * 0.1;
        let t_ab = link.travel_time().unwrap();
        let wp = sech_target(kappa, &link).unwrap();
        let pre = predistort(&wp, &link, link.carrier_wavenumber(), t_ab, 1.0).unwrap();
        let grid = TimeGrid::symmetric(15.0 / kappa, 801).unwrap();
        let at_a = field_at(&wp, &link, 0.0, &grid).unwrap();
        let at_b = field_at(&pre, &link, link.grid.length(), &grid.shifted(t_ab)).unwrap();
        let f = overlap_fidelity(&at_a.values, &at_b.values).unwrap();
        assert!(f > 1.0 - 1e-10, "{f}");
    }

    #[test]
    fn predistort_identities() {
        let link = linear_link(101);
        let wp = sech_target(0.3, &link).unwrap();
        let p = predistort(&wp, &link, link.carrier_wavenumber(), 25.0, 0.7).unwrap();
        assert_eq!(p, wp);
        let w = wr90_link();
        let wp = sech_target(1.0, &w).unwrap();
        assert_eq!(
            predistort(&wp, &w, w.carrier_wavenumber(), 25.0, 0.0).unwrap(),
            wp
        );
        assert!(predistort(&wp, &w, w.carrier_wavenumber(), 25.0, 1.5).is_err());
    }

    #[test]
    fn parseval_over_revival() {
        let link = linear_link(101);
        let wp = sech_target(0.4, &link).unwrap();
        let period = link.revival_time().unwrap();
        let n = 4000;
        let grid = TimeGrid::new(0.0, period / n as f64, n).unwrap();
        let f = field_at(&wp, &link, 1.3, &grid).unwrap();
        assert!((f.energy() / period - 1.0).abs() < 1e-10);
    }

    #[test]
    fn single_mode_has_constant_modulus() {
        let link = linear_link(11);
        let mut a = vec![Cx::new(0.0, 0.0); 11];
        a[3] = Cx::new(0.6, 0.8);
        let wp = SpectralWavepacket::from_amplitudes(a, link.carrier_frequency()).unwrap();
        let f = field_at(&wp, &link, 2.0, &TimeGrid::symmetric(30.0, 50).unwrap()).unwrap();
        for v in f.values {
            assert!((v.norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn fidelity_basics() {
        let a = [Cx::new(1.0f64, 0.0), Cx::new(0.0, 0.0)];
        let b = [Cx::new(0.0, 0.0), Cx::new(0.0, 2.0)];
        assert_eq!(overlap_fidelity(&a, &b).unwrap(), 0.0);
        assert!((overlap_fidelity(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(
            overlap_fidelity(&a, &[Cx::new(0.0, 0.0); 2]),
            Err(Error::ZeroNorm)
        );
    }

    #[test]
    fn chirped_sech_overlap_near_series() {
        let kappa = 1.0f64;
        let grid = TimeGrid::symmetric(60.0, 6001).unwrap();
        let a = distorted_sech_field(kappa, 0.0, 0.0, &grid).unwrap();
        let b = distorted_sech_field(kappa, 0.3, 0.0, &grid).unwrap();
        let f = overlap_fidelity(&a.trace.values, &b.trace.values).unwrap();
        assert!((f - 0.998).abs() < 2e-4, "{f}");
    }

    #[test]
    fn spectral_sech_matches_closed_form() {
        let kappa = 1.7f64;
        let grid = TimeGrid::symmetric(25.0 / kappa, 1001).unwrap();
        let num = spectral_sech_field(kappa, |_| Some(0.0), 0.4, &grid).unwrap();
        let exact = sech_field(kappa, 0.4, &grid);
        for i in 0..grid.len {
            assert!((num.trace.values[i] - exact.trace.values[i]).norm() < 1e-12);
            assert!((num.derivative[i] - exact.derivative[i]).norm() < 1e-11);
        }
        assert!((num.prior.energy - exact.prior.energy).abs() < 1e-12);
    }

    #[test]
    fn distortion_parameter_at_reference_points() {
        let link = wr90_link();
        let t_ab = link.travel_time().unwrap();
        let d = distortion_parameter(&link.dispersion, link.carrier_wavenumber(), t_ab).unwrap();
        assert!((d - 0.33).abs() < 0.3 * 0.33, "{d}");
        let d2 =
            distortion_parameter(&link.dispersion, link.carrier_wavenumber(), 2.0 * t_ab).unwrap();
        assert!((d2 - 2.0 * d).abs() < 1e-14);
        assert_eq!(
            distortion_parameter(&DispersionRelation::linear(0.2), 1.0, 25.0).unwrap(),
            0.0
        );
    }

    #[test]
    fn series_plug_in() {
        assert_eq!(analytic_overlap_series(0.0, 3.0), 1.0);
        assert!((analytic_overlap_series(0.3f64, 1.0) - 0.998).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn predistort_composes_and_preserves_moduli(a in 0.0f64..0.5, b in 0.0f64..0.5) {
            let link = wr90_link();
            let wp = sech_target(1.0, &link).unwrap();
            let k0 = link.carrier_wavenumber();
            let one = predistort(&predistort(&wp, &link, k0, 25.0, a).unwrap(), &link, k0, 25.0, b).unwrap();
            let two = predistort(&wp, &link, k0, 25.0, a + b).unwrap();
            for ((x, y), z) in one.amplitudes.iter().zip(&two.amplitudes).zip(&wp.amplitudes) {
                prop_assert!((x - y).norm() < 1e-9);
                prop_assert!((x.norm() - z.norm()).abs() < 1e-15);
            }
        }

        #[test]
        fn fidelity_symmetric_and_phase_invariant(
            re in proptest::collection::vec(-1.0f64..1.0, 8),
            im in proptest::collection::vec(-1.0f64..1.0, 8),
            phi in 0.0f64..6.3,
        ) {
            let a: Vec<Cx<f64>> = re.iter().zip(&im).map(|(x, y)| Cx::new(*x, *y)).collect();
            let b: Vec<Cx<f64>> = re.iter().rev().zip(&im).map(|(x, y)| Cx::new(*y, *x)).collect();
            prop_assume!(a.iter().map(|v| v.norm_sqr()).sum::<f64>() > 1e-6);
            prop_assume!(b.iter().map(|v| v.norm_sqr()).sum::<f64>() > 1e-6);
            let fab = overlap_fidelity(&a, &b).unwrap();
            let fba = overlap_fidelity(&b, &a).unwrap();
            let rot: Vec<Cx<f64>> = b.iter().map(|v| v * cis(phi)).collect();
            prop_assert!((fab - fba).abs() < 1e-12);
            prop_assert!((fab - overlap_fidelity(&a, &rot).unwrap()).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&fab));
            prop_assert!((overlap_fidelity(&a, &a.iter().map(|v| v * cis(phi) * 3.0).collect::<Vec<_>>()).unwrap() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn field_is_linear(s in -2.0f64..2.0, x in 0.0f64..5.0) {
            let link = linear_link(21);
            let a = sech_target(0.1, &link).unwrap();
            let b = predistort(&sech_target(0.1, &wr90_link()).unwrap(), &wr90_link(), 150.0, 3.0, 0.5).unwrap();
            let b = SpectralWavepacket { amplitudes: b.amplitudes[..21].to_vec(), frame_frequency: a.frame_frequency };
            let sum = SpectralWavepacket {
                amplitudes: a.amplitudes.iter().zip(&b.amplitudes).map(|(p, q)| p * s + q).collect(),
                frame_frequency: a.frame_frequency,
            };
            let grid = TimeGrid::symmetric(10.0, 17).unwrap();
            let fa = field_at(&a, &link, x, &grid).unwrap();
            let fb = field_at(&b, &link, x, &grid).unwrap();
            let fs = field_at(&sum, &link, x, &grid).unwrap();
            for i in 0..grid.len {
                prop_assert!((fs.values[i] - (fa.values[i] * s + fb.values[i])).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn chirp_overlap_matches_time_domain() {
        let kappa = 1.0f64;
        let grid = TimeGrid::symmetric_with_step(60.0, 0.02).unwrap();
        let plain = spectral_sech_field(kappa, |_| Some(0.0), 0.0, &grid).unwrap();
        for d in [0.1, 0.4, 1.0] {
            let chirped = distorted_sech_field(kappa, d, 0.0, &grid).unwrap();
            let f = pulse_fidelity(&plain.trace, &chirped.trace).unwrap();
            let q = chirp_overlap(kappa, d).unwrap();
            assert!((f - q).abs() < 1e-9, "{d}: {f} vs {q}");
        }
        assert!((chirp_overlap(kappa, 0.0).unwrap() - 1.0).abs() < 1e-14);
    }
}
