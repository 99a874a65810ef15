//! Pseudo-Bayesian mass functions over the driving frame.
//!
//! The frame of discernment has five singleton classes plus the full frame
//! `Ω` standing for ignorance. Mass is carried only by singletons and `Ω`
//! (the pseudo-Bayesian restriction), which keeps every operation closed-form:
//! discounting moves singleton mass to `Ω`, the contour function is singleton
//! mass plus `Ω` mass, and conjunctive fusion reduces to a pointwise product
//! of contours followed by a renormalization that preserves the product of
//! the two `Ω` masses.

use crate::{Error, Result};

/// Number of singleton classes.
pub const NUM_CLASSES: usize = 5;
/// Channels per cell: the five classes plus `Ω`.
pub const NUM_CHANNELS: usize = 6;
/// Channel index of `Ω`.
pub const OMEGA: usize = 5;

/// Fixed class order; part of every file format.
pub const CLASS_NAMES: [&str; NUM_CHANNELS] =
    ["pedestrian", "car", "road-lines", "road", "other", "omega"];

/// Absolute tolerance for mass-function equality checks.
pub const MASS_EPS: f64 = 1e-9;
/// Constructors renormalize a drifted sum below this threshold and reject above it.
const DRIFT_EPS: f64 = 1e-6;

/// Singleton class channels, in fixed order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(usize)]
pub enum Class {
    Pedestrian = 0,
    Car = 1,
    RoadLines = 2,
    Road = 3,
    Other = 4,
}

impl Class {
    pub const ALL: [Class; NUM_CLASSES] =
        [Class::Pedestrian, Class::Car, Class::RoadLines, Class::Road, Class::Other];

    pub fn index(self) -> usize {
        self as usize
    }

    /// True for classes tall enough to block line of sight.
    pub fn blocks_sight(self) -> bool {
        matches!(self, Class::Pedestrian | Class::Car | Class::Other)
    }
}

/// A pseudo-Bayesian mass function: five singleton masses plus the mass on `Ω`.
///
/// Invariant: all six masses are nonnegative and sum to 1 within [`MASS_EPS`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MassFunction {
    masses: [f64; NUM_CHANNELS],
}

/// Per-class plausibilities of a pseudo-Bayesian mass function.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContourFunction {
    pub plausibilities: [f64; NUM_CLASSES],
}

impl MassFunction {
    /// Builds a mass function, renormalizing drift below 1e-6 and rejecting anything worse.
    pub fn new(masses: [f64; NUM_CHANNELS]) -> Result<Self> {
        for (k, &m) in masses.iter().enumerate() {
            if !m.is_finite() || m < 0.0 {
                return Err(Error::Mass(format!(
                    "channel {} ({}) has invalid mass {}",
                    k, CLASS_NAMES[k], m
                )));
            }
        }
        let sum: f64 = masses.iter().sum();
        if (sum - 1.0).abs() > DRIFT_EPS {
            return Err(Error::Mass(format!("masses sum to {sum}, expected 1")));
        }
        let mut masses = masses;
        if sum != 1.0 {
            for m in &mut masses {
                *m /= sum;
            }
        }
        Ok(Self { masses })
    }

    /// Full ignorance: all mass on `Ω`. Neutral element of fusion.
    pub fn vacuous() -> Self {
        let mut masses = [0.0; NUM_CHANNELS];
        masses[OMEGA] = 1.0;
        Self { masses }
    }

    /// All mass on one singleton class.
    pub fn certain(class: Class) -> Self {
        let mut masses = [0.0; NUM_CHANNELS];
        masses[class.index()] = 1.0;
        Self { masses }
    }

    pub fn masses(&self) -> &[f64; NUM_CHANNELS] {
        &self.masses
    }

    pub fn mass(&self, channel: usize) -> f64 {
        self.masses[channel]
    }

    pub fn omega(&self) -> f64 {
        self.masses[OMEGA]
    }

    /// Singleton channel with maximum mass; ties resolved to the lowest index.
    pub fn argmax_class(&self) -> Class {
        let mut best = Class::Pedestrian;
        let mut best_mass = self.masses[0];
        for &c in &Class::ALL[1..] {
            if self.masses[c.index()] > best_mass {
                best_mass = self.masses[c.index()];
                best = c;
            }
        }
        best
    }

    /// Discounts by `gamma`: singleton masses shrink by the factor, the
    /// difference moves to `Ω`, so `Ω` becomes `1 − gamma·(1 − m[Ω])`.
    pub fn discount(&self, gamma: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::Parameter(format!("discount factor {gamma} outside [0, 1]")));
        }
        let mut masses = [0.0; NUM_CHANNELS];
        for (out, &m) in masses.iter_mut().zip(&self.masses).take(NUM_CLASSES) {
            *out = gamma * m;
        }
        masses[OMEGA] = 1.0 - gamma * (1.0 - self.masses[OMEGA]);
        Ok(Self { masses })
    }

    /// Per-class plausibility: singleton mass plus `Ω` mass.
    pub fn contour(&self) -> ContourFunction {
        let mut plausibilities = [0.0; NUM_CLASSES];
        for (pl, &m) in plausibilities.iter_mut().zip(&self.masses) {
            *pl = m + self.masses[OMEGA];
        }
        ContourFunction { plausibilities }
    }

    /// Conjunctive fusion of two pseudo-Bayesian mass functions.
    ///
    /// The `Ω` mass of the result is the product of the inputs' `Ω` masses.
    /// Pre-normalization singleton masses are the products of the inputs'
    /// plausibilities minus that `Ω` product; if their sum is positive they
    /// are rescaled to total `1 − Ω`. A zero sum with `Ω < 1` is total
    /// conflict: the deficit is spread uniformly over the five singletons so
    /// the output stays a valid mass function.
    pub fn fuse(&self, other: &Self) -> Self {
        let (o1, o2) = (self.masses[OMEGA], other.masses[OMEGA]);
        // The vacuous function is the neutral element; short-circuiting keeps
        // no-information fusion from accumulating rounding residue.
        if o2 == 1.0 {
            return *self;
        }
        if o1 == 1.0 {
            return *other;
        }
        let omega = o1 * o2;
        let mut raw = [0.0; NUM_CLASSES];
        let mut s = 0.0;
        for ((r, &m1), &m2) in raw.iter_mut().zip(&self.masses).zip(&other.masses) {
            // Products of plausibilities can undershoot omega by rounding only.
            *r = ((m1 + o1) * (m2 + o2) - omega).max(0.0);
            s += *r;
        }
        let mut masses = [0.0; NUM_CHANNELS];
        masses[OMEGA] = omega;
        if s > 0.0 {
            let scale = (1.0 - omega) / s;
            for (m, r) in masses.iter_mut().zip(&raw) {
                *m = r * scale;
            }
        } else if omega < 1.0 {
            let share = (1.0 - omega) / NUM_CLASSES as f64;
            masses[..NUM_CLASSES].fill(share);
        }
        Self { masses }
    }

    /// Max absolute channel difference.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.masses
            .iter()
            .zip(other.masses.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// True when every channel matches within [`MASS_EPS`].
    pub fn approx_eq(&self, other: &Self) -> bool {
        self.max_abs_diff(other) <= MASS_EPS
    }
}
