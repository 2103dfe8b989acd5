//! Waveguide mode grid, dispersion laws and resonator-waveguide couplings.
//!
//! Units: metres, nanoseconds, angular frequencies in rad/ns.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Speed of light in m/ns.
pub const LIGHT_SPEED: f64 = 0.299_792_458;
/// Interior broad-wall width of a WR90 guide in metres.
pub const WR90_WIDTH: f64 = 0.022_86;

/// Consecutive standing-wave modes `k_m = m pi / L` for `m` in `m_min..m_min + count`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeGrid<T> {
    length: T,
    m_min: u64,
    count: usize,
    carrier_index: usize,
}

impl<T: Real> ModeGrid<T> {
    pub fn new(length: T, m_min: u64, count: usize, carrier_index: usize) -> Result<Self> {
        if !(length > T::zero()) || !length.is_finite() {
            return Err(Error::Config(format!(
                "link length must be positive, got {length}"
            )));
        }
        if m_min == 0 {
            return Err(Error::Config("mode numbers must start at 1 (k > 0)".into()));
        }
        if count < 3 {
            return Err(Error::Config(format!("need at least 3 modes, got {count}")));
        }
        if carrier_index == 0 || carrier_index + 1 >= count {
            return Err(Error::Config(format!(
                "carrier index {carrier_index} must lie strictly inside 0..{count}"
            )));
        }
        Ok(Self {
            length,
            m_min,
            count,
            carrier_index,
        })
    }

    /// `count` consecutive modes with the carrier mode in the middle.
    pub fn centered(length: T, carrier_mode: u64, count: usize) -> Result<Self> {
        let below = (count.saturating_sub(1) / 2) as u64 + u64::from(count % 2 == 0);
        if carrier_mode <= below {
            return Err(Error::Config(format!(
                "carrier mode {carrier_mode} too low to centre {count} modes on it"
            )));
        }
        Self::new(length, carrier_mode - below, count, below as usize)
    }

    /// Centres the grid on the mode whose frequency is nearest to `omega`.
    pub fn around_frequency(
        length: T,
        disp: &DispersionRelation<T>,
        omega: T,
        count: usize,
    ) -> Result<Self> {
        let k = disp.wavenumber_at(omega).ok_or_else(|| {
            Error::Config(format!(
                "frequency {omega} rad/ns is outside the guide's band"
            ))
        })?;
        let m = (k * length / T::PI()).round().to_u64().unwrap_or(0).max(1);
        Self::centered(length, m, count)
    }

    pub fn length(&self) -> T {
        self.length
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn carrier_index(&self) -> usize {
        self.carrier_index
    }

    pub fn mode_number(&self, i: usize) -> u64 {
        self.m_min + i as u64
    }

    pub fn mode_numbers(&self) -> std::ops::Range<u64> {
        self.m_min..self.m_min + self.count as u64
    }

    /// Wavenumber spacing `pi / L`.
    pub fn spacing(&self) -> T {
        T::PI() / self.length
    }

    pub fn wavenumber(&self, i: usize) -> T {
        T::from_u64(self.mode_number(i)).expect("mode number") * self.spacing()
    }

    pub fn wavenumbers(&self) -> Vec<T> {
        (0..self.count).map(|i| self.wavenumber(i)).collect()
    }

    pub fn carrier_wavenumber(&self) -> T {
        self.wavenumber(self.carrier_index)
    }

    /// True when the carrier sits exactly in the middle of the grid.
    pub fn is_symmetric(&self) -> bool {
        2 * self.carrier_index + 1 == self.count
    }
}

/// Frequency law `omega(k)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DispersionRelation<T> {
    /// `omega = offset + v_g k`.
    Linear { group_velocity: T, offset: T },
    /// Second-order expansion about `carrier_wavenumber`.
    Quadratic {
        carrier_frequency: T,
        carrier_wavenumber: T,
        group_velocity: T,
        curvature: T,
    },
    /// Lowest TE mode of a rectangular guide: `omega = c sqrt((pi/l)^2 + k^2)`.
    RectangularGuide { light_speed: T, width: T },
}

impl<T: Real> DispersionRelation<T> {
    pub fn linear(group_velocity: T) -> Self {
        Self::Linear {
            group_velocity,
            offset: T::zero(),
        }
    }

    pub fn rectangular(width: T) -> Self {
        Self::RectangularGuide {
            light_speed: T::lit(LIGHT_SPEED),
            width,
        }
    }

    pub fn wr90() -> Self {
        Self::rectangular(T::lit(WR90_WIDTH))
    }

    pub fn frequency(&self, k: T) -> T {
        match *self {
            Self::Linear {
                group_velocity,
                offset,
            } => offset + group_velocity * k,
            Self::Quadratic {
                carrier_frequency,
                carrier_wavenumber,
                group_velocity,
                curvature,
            } => {
                let dk = k - carrier_wavenumber;
                carrier_frequency + group_velocity * dk + T::lit(0.5) * curvature * dk * dk
            }
            Self::RectangularGuide { light_speed, width } => {
                let kc = T::PI() / width;
                light_speed * kc.hypot(k)
            }
        }
    }

    pub fn group_velocity(&self, k: T) -> T {
        match *self {
            Self::Linear { group_velocity, .. } => group_velocity,
            Self::Quadratic {
                carrier_wavenumber,
                group_velocity,
                curvature,
                ..
            } => group_velocity + curvature * (k - carrier_wavenumber),
            Self::RectangularGuide { light_speed, .. } => {
                light_speed * light_speed * k / self.frequency(k)
            }
        }
    }

    pub fn curvature(&self, k: T) -> T {
        match *self {
            Self::Linear { .. } => T::zero(),
            Self::Quadratic { curvature, .. } => curvature,
            Self::RectangularGuide { light_speed, .. } => {
                let w = self.frequency(k);
                let c2 = light_speed * light_speed;
                c2 / w - c2 * c2 * k * k / (w * w * w)
            }
        }
    }

    /// Lower edge of the propagating band, if the law has one.
    pub fn cutoff(&self) -> Option<T> {
        match *self {
            Self::RectangularGuide { light_speed, width } => Some(light_speed * T::PI() / width),
            _ => None,
        }
    }

    /// Positive wavenumber carrying frequency `omega`, when one exists on the increasing branch.
    pub fn wavenumber_at(&self, omega: T) -> Option<T> {
        let k = match *self {
            Self::Linear {
                group_velocity,
                offset,
            } => {
                if group_velocity <= T::zero() {
                    return None;
                }
                (omega - offset) / group_velocity
            }
            Self::Quadratic {
                carrier_frequency,
                carrier_wavenumber,
                group_velocity,
                curvature,
            } => {
                let dw = omega - carrier_frequency;
                let disc = group_velocity * group_velocity + T::lit(2.0) * curvature * dw;
                if disc < T::zero() {
                    return None;
                }
                let denom = group_velocity + disc.sqrt();
                if denom <= T::zero() {
                    return None;
                }
                carrier_wavenumber + T::lit(2.0) * dw / denom
            }
            Self::RectangularGuide { light_speed, width } => {
                let kc = T::PI() / width;
                let r = omega / light_speed;
                if r < kc {
                    return None;
                }
                ((r - kc) * (r + kc)).sqrt()
            }
        };
        (k >= T::zero() && k.is_finite()).then_some(k)
    }

    /// Quadratic expansion of this law about `k0`.
    pub fn quadratic_about(&self, k0: T) -> Self {
        Self::Quadratic {
            carrier_frequency: self.frequency(k0),
            carrier_wavenumber: k0,
            group_velocity: self.group_velocity(k0),
            curvature: self.curvature(k0),
        }
    }
}

/// `omega(k_m)` for every grid mode; fails if the law is not positive and increasing there.
pub fn mode_frequencies<T: Real>(
    grid: &ModeGrid<T>,
    disp: &DispersionRelation<T>,
) -> Result<Vec<T>> {
    let w: Vec<T> = grid
        .wavenumbers()
        .into_iter()
        .map(|k| disp.frequency(k))
        .collect();
    if let Some(bad) = w.iter().position(|x| !(*x > T::zero()) || !x.is_finite()) {
        return Err(Error::Config(format!(
            "non-positive frequency at mode index {bad}"
        )));
    }
    if let Some(i) = w.windows(2).position(|p| p[1] <= p[0]) {
        return Err(Error::Config(format!(
            "dispersion is not increasing across the grid (mode index {i}); the grid spans a band edge"
        )));
    }
    Ok(w)
}

pub fn group_velocity<T: Real>(disp: &DispersionRelation<T>, k0: T) -> T {
    disp.group_velocity(k0)
}

pub fn curvature_d2<T: Real>(disp: &DispersionRelation<T>, k0: T) -> T {
    disp.curvature(k0)
}

/// `omega(k) - omega(k0) - v_g(k0) (k - k0)`.
pub fn nonlinear_residual<T: Real>(disp: &DispersionRelation<T>, k: T, k0: T) -> T {
    match *disp {
        DispersionRelation::Linear { .. } => T::zero(),
        DispersionRelation::Quadratic {
            curvature,
            carrier_wavenumber,
            ..
        } if carrier_wavenumber == k0 => {
            let dk = k - k0;
            T::lit(0.5) * curvature * dk * dk
        }
        _ => disp.frequency(k) - disp.frequency(k0) - disp.group_velocity(k0) * (k - k0),
    }
}

pub fn travel_time<T: Real>(disp: &DispersionRelation<T>, k0: T, x_a: T, x_b: T) -> Result<T> {
    let vg = disp.group_velocity(k0);
    if !(vg > T::zero()) {
        return Err(Error::CutoffCarrier);
    }
    Ok((x_b - x_a).abs() / vg)
}

/// Which end of the link a node sits on. `A` is at `x = 0`, `B` at `x = L`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Node {
    A,
    B,
}

impl Node {
    pub fn index(self) -> usize {
        match self {
            Node::A => 0,
            Node::B => 1,
        }
    }

    pub fn position<T: Real>(self, length: T) -> T {
        match self {
            Node::A => T::zero(),
            Node::B => length,
        }
    }
}

/// How the coupling magnitude depends on the mode frequency.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CouplingLaw {
    /// `|G_m| ∝ sqrt(omega(k_m))`.
    #[default]
    Physical,
    /// Same magnitude on every mode.
    Flat,
}

/// `G_{m,j} = (-1)^{m(j-1)} sqrt(kappa v_g omega(k_m) / (2 Omega_R L))`, `v_g` taken at the carrier.
pub fn couplings_from_kappa<T: Real>(
    grid: &ModeGrid<T>,
    disp: &DispersionRelation<T>,
    kappa: T,
    resonator_frequency: T,
    node: Node,
    law: CouplingLaw,
) -> Result<Vec<T>> {
    if !(kappa > T::zero()) {
        return Err(Error::Config(format!(
            "kappa must be positive, got {kappa}"
        )));
    }
    if !(resonator_frequency > T::zero()) {
        return Err(Error::Config("resonator frequency must be positive".into()));
    }
    let vg = disp.group_velocity(grid.carrier_wavenumber());
    if !(vg > T::zero()) {
        return Err(Error::CutoffCarrier);
    }
    let base = kappa * vg / (T::lit(2.0) * resonator_frequency * grid.length());
    Ok((0..grid.count())
        .map(|i| {
            let ratio = match law {
                CouplingLaw::Physical => disp.frequency(grid.wavenumber(i)),
                CouplingLaw::Flat => resonator_frequency,
            };
            let mag = (base * ratio).sqrt();
            if node == Node::B && grid.mode_number(i) % 2 == 1 {
                -mag
            } else {
                mag
            }
        })
        .collect())
}

/// Parameters and couplings of one qubit-resonator node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeCoupling<T> {
    pub kappa: T,
    pub resonator_frequency: T,
    pub qubit_frequency: T,
    pub couplings: Vec<T>,
}

impl<T: Real> NodeCoupling<T> {
    /// Couplings from `kappa`; the qubit starts resonant with the bare resonator.
    pub fn new(
        link: &Link<T>,
        kappa: T,
        resonator_frequency: T,
        node: Node,
        law: CouplingLaw,
    ) -> Result<Self> {
        let couplings = couplings_from_kappa(
            &link.grid,
            &link.dispersion,
            kappa,
            resonator_frequency,
            node,
            law,
        )?;
        Ok(Self {
            kappa,
            resonator_frequency,
            qubit_frequency: resonator_frequency,
            couplings,
        })
    }

    /// A node that does not talk to the line at all.
    pub fn decoupled(link: &Link<T>, resonator_frequency: T) -> Self {
        Self {
            kappa: T::zero(),
            resonator_frequency,
            qubit_frequency: resonator_frequency,
            couplings: vec![T::zero(); link.grid.count()],
        }
    }

    /// Sets `delta = Omega_R + lamb_shift`.
    pub fn with_lamb_shift(mut self, lamb_shift: T) -> Self {
        self.qubit_frequency = self.resonator_frequency + lamb_shift;
        self
    }

    pub fn is_coupled(&self) -> bool {
        self.couplings.iter().any(|g| *g != T::zero())
    }
}

/// The two nodes of a link.
pub type CouplingSet<T> = [NodeCoupling<T>; 2];

/// A mode grid together with its dispersion law and cached frequencies.
#[derive(Debug, Clone, PartialEq)]
pub struct Link<T> {
    pub grid: ModeGrid<T>,
    pub dispersion: DispersionRelation<T>,
    frequencies: Vec<T>,
}

impl<T: Real> Link<T> {
    pub fn new(grid: ModeGrid<T>, dispersion: DispersionRelation<T>) -> Result<Self> {
        let frequencies = mode_frequencies(&grid, &dispersion)?;
        let link = Self {
            grid,
            dispersion,
            frequencies,
        };
        if !(link.group_velocity() > T::zero()) {
            return Err(Error::CutoffCarrier);
        }
        Ok(link)
    }

    pub fn frequencies(&self) -> &[T] {
        &self.frequencies
    }

    pub fn carrier_wavenumber(&self) -> T {
        self.grid.carrier_wavenumber()
    }

    pub fn carrier_frequency(&self) -> T {
        self.frequencies[self.grid.carrier_index()]
    }

    pub fn group_velocity(&self) -> T {
        self.dispersion.group_velocity(self.carrier_wavenumber())
    }

    pub fn curvature(&self) -> T {
        self.dispersion.curvature(self.carrier_wavenumber())
    }

    /// End-to-end group delay `L / v_g`.
    pub fn travel_time(&self) -> Result<T> {
        travel_time(
            &self.dispersion,
            self.carrier_wavenumber(),
            T::zero(),
            self.grid.length(),
        )
    }

    /// Round trip back to the emitter, `2L / v_g`.
    pub fn revival_time(&self) -> Result<T> {
        Ok(T::lit(2.0) * self.travel_time()?)
    }

    /// Free spectral range `v_g pi / L` at the carrier.
    pub fn free_spectral_range(&self) -> T {
        self.group_velocity() * self.grid.spacing()
    }

    /// Mode frequencies relative to `frame`.
    pub fn detunings(&self, frame: T) -> Vec<T> {
        self.frequencies.iter().map(|w| *w - frame).collect()
    }

    /// Offsets `omega(k) - omega(k_c)` at the lowest and highest retained modes.
    pub fn band_offsets(&self) -> (T, T) {
        let wc = self.carrier_frequency();
        (
            self.frequencies[0] - wc,
            self.frequencies[self.frequencies.len() - 1] - wc,
        )
    }
}
