//! Single-ion qubit backend.
//!
//! The qubit is a Bloch vector. Gates are rotations, noise is a depolarizing
//! contraction (or its stochastic twin) plus state-preparation flips, and
//! readout is threshold discrimination of Poisson photon counts: the ground
//! state (z = +1) is dark, the excited state (z = -1) is bright.
//!
//! Rotation convention: `R_axis(θ) = exp(-iθσ/2)`, which turns the Bloch
//! vector right-handedly by +θ about the axis. `Y(π/2)` takes |0⟩ to x = +1
//! and `X(π/2)` takes |0⟩ to y = -1.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rtio::Timestamp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Axis {
    X,
    Y,
}

impl Axis {
    fn unit(self) -> [f64; 3] {
        match self {
            Axis::X => [1.0, 0.0, 0.0],
            Axis::Y => [0.0, 1.0, 0.0],
        }
    }

    /// DDS phase (turns) that drives rotations about this axis.
    pub fn phase_turns(self) -> f64 {
        match self {
            Axis::X => 0.0,
            Axis::Y => 0.25,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QubitState {
    pub bloch: [f64; 3],
}

impl QubitState {
    pub const GROUND: QubitState = QubitState {
        bloch: [0.0, 0.0, 1.0],
    };
    pub const EXCITED: QubitState = QubitState {
        bloch: [0.0, 0.0, -1.0],
    };
    pub const MIXED: QubitState = QubitState {
        bloch: [0.0, 0.0, 0.0],
    };

    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { bloch: [x, y, z] }
    }

    pub fn x(&self) -> f64 {
        self.bloch[0]
    }
    pub fn y(&self) -> f64 {
        self.bloch[1]
    }
    pub fn z(&self) -> f64 {
        self.bloch[2]
    }

    pub fn norm(&self) -> f64 {
        self.bloch.iter().map(|c| c * c).sum::<f64>().sqrt()
    }

    /// Probability that detection sees the bright (excited) state.
    pub fn bright_probability(&self) -> f64 {
        ((1.0 - self.z()) / 2.0).clamp(0.0, 1.0)
    }

    /// Right-handed rotation by `angle` about the unit vector `n`.
    pub fn rotated_about(&self, n: [f64; 3], angle: f64) -> QubitState {
        let v = self.bloch;
        let (s, c) = angle.sin_cos();
        let dot = n[0] * v[0] + n[1] * v[1] + n[2] * v[2];
        let cross = [
            n[1] * v[2] - n[2] * v[1],
            n[2] * v[0] - n[0] * v[2],
            n[0] * v[1] - n[1] * v[0],
        ];
        let mut out = [0.0; 3];
        for i in 0..3 {
            out[i] = v[i] * c + cross[i] * s + n[i] * dot * (1.0 - c);
        }
        QubitState { bloch: out }
    }

    fn scaled(&self, f: f64) -> QubitState {
        QubitState {
            bloch: self.bloch.map(|c| c * f),
        }
    }
}

pub fn apply_rotation(q: QubitState, axis: Axis, angle: f64) -> QubitState {
    q.rotated_about(axis.unit(), angle)
}

/// Free precession: rotation about +z.
pub fn apply_z_rotation(q: QubitState, angle: f64) -> QubitState {
    q.rotated_about([0.0, 0.0, 1.0], angle)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepolarizingVariant {
    /// Scale the Bloch vector by (1 - p).
    #[default]
    Contraction,
    /// With probability p, replace the state by the maximally mixed state.
    Stochastic,
}

pub fn apply_depolarizing<R: Rng + ?Sized>(
    q: QubitState,
    p: f64,
    variant: DepolarizingVariant,
    rng: &mut R,
) -> QubitState {
    debug_assert!((0.0..=1.0).contains(&p));
    if p <= 0.0 {
        return q;
    }
    match variant {
        DepolarizingVariant::Contraction => q.scaled(1.0 - p),
        DepolarizingVariant::Stochastic => {
            if rng.random::<f64>() < p {
                QubitState::MIXED
            } else {
                q
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseModel {
    pub depol_per_gate: f64,
    pub depolarizing: DepolarizingVariant,
    pub prep_error: f64,
    /// Expected photon counts per reference detection window.
    pub bright_mean: f64,
    pub dark_mean: f64,
    /// Counts at or above this threshold classify as bright (1).
    pub detect_threshold: u64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            depol_per_gate: 0.0,
            depolarizing: DepolarizingVariant::Contraction,
            prep_error: 0.005,
            bright_mean: 20.0,
            dark_mean: 0.5,
            detect_threshold: 3,
        }
    }
}

impl NoiseModel {
    /// No gate noise, no preparation error, perfectly separated counts.
    pub fn noiseless() -> Self {
        Self {
            depol_per_gate: 0.0,
            prep_error: 0.0,
            bright_mean: 20.0,
            dark_mean: 0.0,
            detect_threshold: 1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), PhysicsError> {
        for (name, p) in [
            ("depol_per_gate", self.depol_per_gate),
            ("prep_error", self.prep_error),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(PhysicsError::Invalid(format!(
                    "{name} must be a probability, got {p}"
                )));
            }
        }
        if !(self.dark_mean >= 0.0 && self.bright_mean > self.dark_mean) {
            return Err(PhysicsError::Invalid(format!(
                "need bright_mean > dark_mean >= 0, got {} and {}",
                self.bright_mean, self.dark_mean
            )));
        }
        if self.detect_threshold < 1 {
            return Err(PhysicsError::Invalid("detect_threshold must be >= 1".into()));
        }
        Ok(())
    }

    pub fn classify(&self, count: u64) -> u8 {
        u8::from(count >= self.detect_threshold)
    }

    /// Exact misclassification probabilities at unit window scale:
    /// (dark read as bright, bright read as dark).
    pub fn misclassification(&self) -> (f64, f64) {
        let t = self.detect_threshold;
        let dark_as_bright = 1.0 - poisson_cdf_below(self.dark_mean, t);
        let bright_as_dark = poisson_cdf_below(self.bright_mean, t);
        (dark_as_bright, bright_as_dark)
    }
}

/// P(X < k) for X ~ Poisson(mean).
fn poisson_cdf_below(mean: f64, k: u64) -> f64 {
    if mean == 0.0 {
        return 1.0;
    }
    let mut term = (-mean).exp();
    let mut sum = 0.0;
    for i in 0..k {
        sum += term;
        term *= mean / (i + 1) as f64;
    }
    sum.min(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DriveParams {
    /// Rabi frequency Ω/2π at full DDS amplitude.
    pub rabi_hz: f64,
    /// Offset of the true transition from `qubit_freq_hz`.
    pub detuning_hz: f64,
    pub qubit_freq_hz: f64,
}

impl Default for DriveParams {
    fn default() -> Self {
        Self {
            rabi_hz: 50_000.0,
            detuning_hz: 0.0,
            qubit_freq_hz: 12.642_812_118e9,
        }
    }
}

impl DriveParams {
    pub fn validate(&self) -> Result<(), PhysicsError> {
        if !(self.rabi_hz > 0.0) {
            return Err(PhysicsError::Invalid(format!(
                "rabi_hz must be positive, got {}",
                self.rabi_hz
            )));
        }
        if !(self.qubit_freq_hz > 0.0) || !self.detuning_hz.is_finite() {
            return Err(PhysicsError::Invalid("qubit frequency must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PhysicsError {
    #[error("invalid physics parameter: {0}")]
    Invalid(String),
}

/// Generalized Rabi formula: flip probability after driving for `t` seconds.
pub fn rabi_flip_probability(d: &DriveParams, t: f64) -> f64 {
    let omega = 2.0 * PI * d.rabi_hz;
    let delta = 2.0 * PI * d.detuning_hz;
    let w2 = omega * omega + delta * delta;
    let w = w2.sqrt();
    let s = (w * t / 2.0).sin();
    (omega * omega / w2 * s * s).clamp(0.0, 1.0)
}

/// Evolves `q` under a drive of Rabi frequency `rabi_hz`, detuning
/// `detuning_hz` and phase `phase_turns` for `t` seconds.
pub fn apply_drive(q: QubitState, rabi_hz: f64, detuning_hz: f64, phase_turns: f64, t: f64) -> QubitState {
    let omega = 2.0 * PI * rabi_hz;
    let delta = 2.0 * PI * detuning_hz;
    let w = (omega * omega + delta * delta).sqrt();
    if w == 0.0 || t == 0.0 {
        return q;
    }
    let phi = 2.0 * PI * phase_turns;
    let n = [omega * phi.cos() / w, omega * phi.sin() / w, delta / w];
    q.rotated_about(n, w * t)
}

/// Samples a detection: chooses bright/dark from the state, collapses it,
/// and draws a Poisson photon count.
pub fn measure<R: Rng + ?Sized>(
    q: &mut QubitState,
    n: &NoiseModel,
    window_scale: f64,
    rng: &mut R,
) -> u64 {
    debug_assert!(window_scale > 0.0);
    let bright = rng.random::<f64>() < q.bright_probability();
    *q = if bright {
        QubitState::EXCITED
    } else {
        QubitState::GROUND
    };
    let mean = window_scale * if bright { n.bright_mean } else { n.dark_mean };
    sample_poisson(mean, rng)
}

pub fn sample_poisson<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    let d = Poisson::new(mean).expect("positive finite mean");
    d.sample(rng) as u64
}

/// Derives an independent stream seed from a base seed and an index key.
pub fn stream_seed(seed: u64, key: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    key.iter().fold(mix(seed), |acc, k| mix(acc ^ mix(*k)))
}

/// A trapped ion on the timeline: qubit state, noise, drive, its own RNG
/// stream, and the timeline position its state refers to.
#[derive(Debug, Clone)]
pub struct Ion {
    pub state: QubitState,
    pub noise: NoiseModel,
    pub drive: DriveParams,
    seed: u64,
    rng: ChaCha8Rng,
    clock: Timestamp,
}

impl Ion {
    pub fn new(noise: NoiseModel, drive: DriveParams, seed: u64) -> Self {
        Self {
            state: QubitState::GROUND,
            noise,
            drive,
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
            clock: Timestamp::ZERO,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Restarts the RNG at the stream for `seed`.
    pub fn reseed(&mut self, seed: u64) {
        self.seed = seed;
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    /// Switches to the stream keyed by `key` under the current base seed.
    pub fn select_stream(&mut self, key: &[u64]) {
        self.rng = ChaCha8Rng::seed_from_u64(stream_seed(self.seed, key));
    }

    /// Free precession up to `t` at `detuning_hz` relative to the drive frame.
    pub fn evolve_to(&mut self, t: Timestamp, detuning_hz: f64) {
        let dt = t.since(self.clock) as f64 * 1e-9;
        if dt != 0.0 && detuning_hz != 0.0 {
            self.state = apply_z_rotation(self.state, 2.0 * PI * detuning_hz * dt);
        }
        self.clock = t;
    }

    /// Optical pumping to |0⟩, flipped with probability `prep_error`.
    pub fn prepare(&mut self, t: Timestamp) {
        let flipped = self.noise.prep_error > 0.0 && self.rng.random::<f64>() < self.noise.prep_error;
        self.state = if flipped {
            QubitState::EXCITED
        } else {
            QubitState::GROUND
        };
        self.clock = t;
    }

    /// A drive pulse starting at `start` lasting `duration_mu`, followed by
    /// one application of the per-gate depolarizing channel.
    pub fn pulse(
        &mut self,
        start: Timestamp,
        duration_mu: i64,
        amp_frac: f64,
        phase_turns: f64,
        detuning_hz: f64,
    ) {
        self.evolve_to(start, detuning_hz);
        let t = duration_mu as f64 * 1e-9;
        self.state = apply_drive(
            self.state,
            self.drive.rabi_hz * amp_frac,
            detuning_hz,
            phase_turns,
            t,
        );
        self.state = apply_depolarizing(
            self.state,
            self.noise.depol_per_gate,
            self.noise.depolarizing,
            &mut self.rng,
        );
        self.clock = Timestamp(start.0.saturating_add(duration_mu));
    }

    /// Photon count for a detection starting at `start`; collapses the state.
    pub fn detect(&mut self, start: Timestamp, window_scale: f64, detuning_hz: f64) -> u64 {
        self.evolve_to(start, detuning_hz);
        measure(&mut self.state, &self.noise, window_scale, &mut self.rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn close(a: QubitState, b: QubitState, tol: f64) -> bool {
        a.bloch.iter().zip(b.bloch).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn pi_flip_about_x() {
        let q = apply_rotation(QubitState::GROUND, Axis::X, PI);
        assert!((q.z() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn half_pi_about_y_points_along_plus_x() {
        let q = apply_rotation(QubitState::GROUND, Axis::Y, FRAC_PI_2);
        assert!(close(q, QubitState::new(1.0, 0.0, 0.0), 1e-12));
        let q = apply_rotation(QubitState::GROUND, Axis::X, FRAC_PI_2);
        assert!(close(q, QubitState::new(0.0, -1.0, 0.0), 1e-12));
    }

    #[test]
    fn zero_angle_is_identity() {
        let q = QubitState::new(0.3, -0.4, 0.5);
        assert_eq!(apply_rotation(q, Axis::Y, 0.0), q);
    }

    #[test]
    fn depolarizing_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = QubitState::new(0.1, 0.2, 0.3);
        assert_eq!(
            apply_depolarizing(q, 0.0, DepolarizingVariant::Contraction, &mut rng),
            q
        );
        assert_eq!(
            apply_depolarizing(q, 1.0, DepolarizingVariant::Contraction, &mut rng),
            QubitState::MIXED
        );
        let mut z = QubitState::GROUND;
        for _ in 0..7 {
            z = apply_depolarizing(z, 0.1, DepolarizingVariant::Contraction, &mut rng);
        }
        assert!((z.z() - 0.9f64.powi(7)).abs() < 1e-12);
    }

    #[test]
    fn stochastic_depolarizing_matches_contraction_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 40_000;
        let mean: f64 = (0..n)
            .map(|_| {
                apply_depolarizing(QubitState::GROUND, 0.3, DepolarizingVariant::Stochastic, &mut rng).z()
            })
            .sum::<f64>()
            / n as f64;
        // binomial sd of the "kept" fraction: sqrt(0.3*0.7/n) ~ 0.0023
        assert!((mean - 0.7).abs() < 0.01, "{mean}");
    }

    #[test]
    fn rabi_formula_examples() {
        let d = DriveParams {
            rabi_hz: 50_000.0,
            detuning_hz: 0.0,
            ..DriveParams::default()
        };
        let omega = 2.0 * PI * d.rabi_hz;
        assert!((rabi_flip_probability(&d, PI / omega) - 1.0).abs() < 1e-12);
        assert_eq!(rabi_flip_probability(&d, 0.0), 0.0);
        let d = DriveParams {
            detuning_hz: 50_000.0,
            ..d
        };
        // 40-digit evaluation of the closed form.
        let expected = 0.316_563_835_510_353_872_152_233_151_729_330_572_218_4;
        assert!((rabi_flip_probability(&d, PI / omega) - expected).abs() < 1e-14);
    }

    #[test]
    fn drive_matches_closed_form() {
        for &(rabi, det, t) in &[(50e3, 0.0, 3e-6), (50e3, 20e3, 13e-6), (10e3, -7e3, 1e-4)] {
            let d = DriveParams {
                rabi_hz: rabi,
                detuning_hz: det,
                ..DriveParams::default()
            };
            let q = apply_drive(QubitState::GROUND, rabi, det, 0.0, t);
            assert!((q.bright_probability() - rabi_flip_probability(&d, t)).abs() < 1e-12);
        }
    }

    #[test]
    fn dark_ground_state_never_counts() {
        let n = NoiseModel {
            dark_mean: 0.0,
            ..NoiseModel::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let mut q = QubitState::GROUND;
            assert_eq!(measure(&mut q, &n, 1.0, &mut rng), 0);
            assert_eq!(q, QubitState::GROUND);
        }
    }

    #[test]
    fn bright_counts_are_seed_reproducible() {
        let n = NoiseModel::default();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..20)
                .map(|_| {
                    let mut q = QubitState::EXCITED;
                    measure(&mut q, &n, 1.0, &mut rng)
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(11), draw(11));
        assert_ne!(draw(11), draw(12));
    }

    #[test]
    fn equator_state_is_bright_half_the_time() {
        let n = NoiseModel::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let trials = 10_000;
        let bright = (0..trials)
            .filter(|_| {
                let mut q = QubitState::new(1.0, 0.0, 0.0);
                measure(&mut q, &n, 1.0, &mut rng);
                q == QubitState::EXCITED
            })
            .count();
        let sigma = (0.25f64 / trials as f64).sqrt();
        assert!((bright as f64 / trials as f64 - 0.5).abs() < 3.0 * sigma);
    }

    #[test]
    fn prep_error_flips_at_configured_rate() {
        let mut ion = Ion::new(
            NoiseModel {
                prep_error: 0.2,
                ..NoiseModel::default()
            },
            DriveParams::default(),
            4,
        );
        let flips = (0..20_000)
            .filter(|_| {
                ion.prepare(Timestamp::ZERO);
                ion.state == QubitState::EXCITED
            })
            .count();
        assert!((flips as f64 / 20_000.0 - 0.2).abs() < 0.01);
    }

    #[test]
    fn free_precession_follows_timeline() {
        let mut ion = Ion::new(NoiseModel::noiseless(), DriveParams::default(), 0);
        ion.state = QubitState::new(1.0, 0.0, 0.0);
        ion.evolve_to(Timestamp(250_000), 1000.0); // quarter period
        assert!(close(ion.state, QubitState::new(0.0, 1.0, 0.0), 1e-12));
    }

    #[test]
    fn noise_validation() {
        assert!(NoiseModel::default().validate().is_ok());
        let bad = NoiseModel {
            bright_mean: 0.1,
            dark_mean: 0.5,
            ..NoiseModel::default()
        };
        assert!(bad.validate().is_err());
        let bad = NoiseModel {
            prep_error: 1.5,
            ..NoiseModel::default()
        };
        assert!(bad.validate().is_err());
        assert!(DriveParams {
            rabi_hz: 0.0,
            ..DriveParams::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn stream_seeds_differ_by_key() {
        assert_ne!(stream_seed(1, &[0, 1]), stream_seed(1, &[1, 0]));
        assert_eq!(stream_seed(1, &[3, 4]), stream_seed(1, &[3, 4]));
    }
}
