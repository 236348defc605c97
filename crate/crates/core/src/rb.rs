//! Portable clients: Direct randomized benchmarking and the single-qubit
//! calibrations (Rabi scan, Ramsey, π-pulse train).
//!
//! Direct RB samples native gates i.i.d. from a distribution Ω, tracks the
//! accumulated single-qubit Clifford frame, and appends the shortest native
//! word that maps the frame to either the identity or X(π), chosen at random
//! so the expected outcome is itself randomized.

use std::f64::consts::PI;
use std::sync::OnceLock;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::experiment::{
    run_scan, ExperimentError, HostSink, ScanAxis, ScanDefinition, ScanOutcome,
};
use crate::fit::{levenberg_marquardt, linear_lsq, mean, percentile, std_dev, FitError};
use crate::framework::{DataContextInterface, InterfaceError, InterfaceId, OperationInterface};
use crate::physics::{stream_seed, Axis};
use crate::system::{ClientContext, ScanRig, SystemError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RbError {
    #[error("invalid design: {0}")]
    InvalidDesign(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("length {length}, circuit {circuit}, sample {sample}: {source}")]
    Execution {
        length: usize,
        circuit: usize,
        sample: usize,
        source: InterfaceError,
    },
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Experiment(#[from] ExperimentError),
    #[error(transparent)]
    System(#[from] SystemError),
    #[error("no service implements {0}")]
    NoInterface(InterfaceId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Gate {
    pub axis: Axis,
    /// 1, 2 or 3 quarter turns.
    pub quarter_turns: u8,
}

impl Gate {
    pub const fn new(axis: Axis, quarter_turns: u8) -> Self {
        Self {
            axis,
            quarter_turns,
        }
    }

    /// The six native gates.
    pub const NATIVE: [Gate; 6] = [
        Gate::new(Axis::X, 1),
        Gate::new(Axis::X, 2),
        Gate::new(Axis::X, 3),
        Gate::new(Axis::Y, 1),
        Gate::new(Axis::Y, 2),
        Gate::new(Axis::Y, 3),
    ];

    pub fn angle(&self) -> f64 {
        self.quarter_turns as f64 * PI / 2.0
    }

    /// Action on Bloch vectors as a signed permutation.
    pub fn frame(&self) -> CliffordFrame {
        let q = CliffordFrame(match self.axis {
            Axis::X => [[1, 0, 0], [0, 0, -1], [0, 1, 0]],
            Axis::Y => [[0, 0, 1], [0, 1, 0], [-1, 0, 0]],
        });
        let mut f = CliffordFrame::IDENTITY;
        for _ in 0..self.quarter_turns {
            f = q.compose(&f);
        }
        f
    }

    pub fn apply<O: OperationInterface + ?Sized>(&self, op: &mut O) -> Result<(), InterfaceError> {
        match self.axis {
            Axis::X => op.rx(self.angle()),
            Axis::Y => op.ry(self.angle()),
        }
    }
}

/// A single-qubit Clifford as a 3×3 signed permutation acting on Bloch
/// vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CliffordFrame(pub [[i8; 3]; 3]);

impl CliffordFrame {
    pub const IDENTITY: CliffordFrame = CliffordFrame([[1, 0, 0], [0, 1, 0], [0, 0, 1]]);
    pub const X_PI: CliffordFrame = CliffordFrame([[1, 0, 0], [0, -1, 0], [0, 0, -1]]);

    /// `self · other`, i.e. `other` applied first.
    pub fn compose(&self, other: &CliffordFrame) -> CliffordFrame {
        let mut m = [[0i8; 3]; 3];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| self.0[i][k] * other.0[k][j]).sum();
            }
        }
        CliffordFrame(m)
    }

    pub fn inverse(&self) -> CliffordFrame {
        let mut m = [[0i8; 3]; 3];
        for (i, row) in self.0.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                m[j][i] = *v;
            }
        }
        CliffordFrame(m)
    }

    pub fn determinant(&self) -> i32 {
        let m = self.0.map(|r| r.map(i32::from));
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn is_signed_permutation(&self) -> bool {
        let rows_ok = self
            .0
            .iter()
            .all(|r| r.iter().filter(|v| **v != 0).count() == 1 && r.iter().all(|v| v.abs() <= 1));
        let cols_ok = (0..3).all(|j| (0..3).filter(|i| self.0[*i][j] != 0).count() == 1);
        rows_ok && cols_ok
    }

    pub fn apply(&self, v: [f64; 3]) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (i, o) in out.iter_mut().enumerate() {
            *o = (0..3).map(|k| self.0[i][k] as f64 * v[k]).sum();
        }
        out
    }

    /// Net frame of a gate word applied left to right.
    pub fn of_word(word: &[Gate]) -> CliffordFrame {
        word.iter()
            .fold(CliffordFrame::IDENTITY, |f, g| g.frame().compose(&f))
    }
}

/// Shortest native word for every group element, by breadth-first search
/// from the identity.
#[derive(Debug, Clone)]
pub struct InversionTable {
    entries: Vec<(CliffordFrame, Vec<Gate>)>,
}

impl InversionTable {
    pub fn build() -> Self {
        let mut entries = vec![(CliffordFrame::IDENTITY, Vec::new())];
        let mut frontier = 0;
        while frontier < entries.len() {
            let (frame, word) = entries[frontier].clone();
            for g in Gate::NATIVE {
                let next = g.frame().compose(&frame);
                if entries.iter().all(|(f, _)| *f != next) {
                    let mut w = word.clone();
                    w.push(g);
                    entries.push((next, w));
                }
            }
            frontier += 1;
        }
        Self { entries }
    }

    pub fn shared() -> &'static InversionTable {
        static TABLE: OnceLock<InversionTable> = OnceLock::new();
        TABLE.get_or_init(InversionTable::build)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn elements(&self) -> impl Iterator<Item = (&CliffordFrame, &[Gate])> {
        self.entries.iter().map(|(f, w)| (f, w.as_slice()))
    }

    /// Shortest word whose net frame is `frame`.
    pub fn word_for(&self, frame: &CliffordFrame) -> &[Gate] {
        self.entries
            .iter()
            .find(|(f, _)| f == frame)
            .map(|(_, w)| w.as_slice())
            .expect("frame is a single-qubit Clifford")
    }
}

/// Sampling distribution over the native gates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Omega {
    pub gates: Vec<Gate>,
    pub weights: Vec<f64>,
}

impl Default for Omega {
    fn default() -> Self {
        Self {
            gates: Gate::NATIVE.to_vec(),
            weights: vec![1.0 / 6.0; 6],
        }
    }
}

impl Omega {
    pub fn validate(&self) -> Result<(), RbError> {
        if self.gates.is_empty() || self.gates.len() != self.weights.len() {
            return Err(RbError::InvalidDesign(
                "omega needs one weight per gate".into(),
            ));
        }
        if self.gates.iter().any(|g| !(1..=3).contains(&g.quarter_turns)) {
            return Err(RbError::InvalidDesign("omega contains a non-native gate".into()));
        }
        if self.weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(RbError::InvalidDesign("omega weights must be non-negative".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(RbError::InvalidDesign(format!(
                "omega weights sum to {total}, not 1"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RbCircuit {
    pub core: Vec<Gate>,
    pub inversion: Vec<Gate>,
    pub target_bit: u8,
}

impl RbCircuit {
    pub fn gates(&self) -> impl Iterator<Item = &Gate> {
        self.core.iter().chain(&self.inversion)
    }

    pub fn core_frame(&self) -> CliffordFrame {
        CliffordFrame::of_word(&self.core)
    }
}

/// Samples a circuit with `m` core gates drawn from `omega`.
pub fn sample_circuit<R: Rng + ?Sized>(m: usize, omega: &Omega, rng: &mut R) -> RbCircuit {
    assert!(m >= 1, "circuit length must be at least 1");
    let dist = WeightedIndex::new(&omega.weights).expect("validated omega");
    let core: Vec<Gate> = (0..m).map(|_| omega.gates[dist.sample(rng)]).collect();
    let target_bit: u8 = rng.random_range(0..2);
    let target = if target_bit == 1 {
        CliffordFrame::X_PI
    } else {
        CliffordFrame::IDENTITY
    };
    let frame = CliffordFrame::of_word(&core);
    let inversion = InversionTable::shared()
        .word_for(&target.compose(&frame.inverse()))
        .to_vec();
    RbCircuit {
        core,
        inversion,
        target_bit,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RbDesign {
    pub lengths: Vec<usize>,
    pub circuits_per_length: usize,
    pub samples_per_circuit: usize,
    #[serde(default)]
    pub omega: Omega,
    pub seed: u64,
}

impl Default for RbDesign {
    fn default() -> Self {
        Self {
            lengths: (0..=10).map(|k| 1usize << k).collect(),
            circuits_per_length: 10,
            samples_per_circuit: 100,
            omega: Omega::default(),
            seed: 0,
        }
    }
}

const CIRCUIT_STREAM: u64 = 0x5242;

impl RbDesign {
    pub fn validate(&self) -> Result<(), RbError> {
        if self.lengths.is_empty() || self.lengths[0] < 1 {
            return Err(RbError::InvalidDesign("lengths must start at 1 or more".into()));
        }
        if self.lengths.windows(2).any(|w| w[0] >= w[1]) {
            return Err(RbError::InvalidDesign("lengths must be strictly increasing".into()));
        }
        if self.circuits_per_length == 0 || self.samples_per_circuit == 0 {
            return Err(RbError::InvalidDesign(
                "circuits and samples must be positive".into(),
            ));
        }
        self.omega.validate()
    }

    /// Circuit `circuit` at length index `li`; pure given the seed.
    pub fn circuit(&self, li: usize, circuit: usize) -> RbCircuit {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(
            self.seed,
            &[CIRCUIT_STREAM, li as u64, circuit as u64],
        ));
        sample_circuit(self.lengths[li], &self.omega, &mut rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalData {
    pub lengths: Vec<usize>,
    /// Per length, the survival fraction of each circuit.
    pub survival: Vec<Vec<f64>>,
}

impl SurvivalData {
    pub fn means(&self) -> Vec<f64> {
        self.survival.iter().map(|s| mean(s)).collect()
    }
}

/// Runs every circuit of `design` through the two interfaces.
pub fn execute_design<O, D>(design: &RbDesign, op: &mut O, data: &mut D) -> Result<SurvivalData, RbError>
where
    O: OperationInterface + ?Sized,
    D: DataContextInterface + ?Sized,
{
    design.validate()?;
    let mut survival = Vec::with_capacity(design.lengths.len());
    for (li, &length) in design.lengths.iter().enumerate() {
        let mut per_circuit = Vec::with_capacity(design.circuits_per_length);
        for c in 0..design.circuits_per_length {
            let circuit = design.circuit(li, c);
            let at = |sample: usize| {
                move |source: InterfaceError| RbError::Execution {
                    length,
                    circuit: c,
                    sample,
                    source,
                }
            };
            data.open().map_err(at(0))?;
            for s in 0..design.samples_per_circuit {
                op.prep_0().map_err(at(s))?;
                for g in circuit.gates() {
                    g.apply(op).map_err(at(s))?;
                }
                let bit = op.measure().map_err(at(s))?;
                data.push(bit).map_err(at(s))?;
            }
            data.close().map_err(at(design.samples_per_circuit))?;
            let hist = data.histogram().map_err(at(design.samples_per_circuit))?;
            let total = (hist[0] + hist[1]) as f64;
            per_circuit.push(hist[circuit.target_bit as usize] as f64 / total);
        }
        survival.push(per_circuit);
    }
    Ok(SurvivalData {
        lengths: design.lengths.clone(),
        survival,
    })
}

/// Direct RB as a client: resolves the first operation and data-context
/// implementations and executes the design through them.
pub fn direct_rb_client(ctx: &mut ClientContext<'_>, design: &RbDesign) -> Result<SurvivalData, RbError> {
    let op = ctx
        .find_interface(&InterfaceId::Operation)
        .into_iter()
        .next()
        .ok_or(RbError::NoInterface(InterfaceId::Operation))?;
    let dc = ctx
        .find_interface(&InterfaceId::DataContext)
        .into_iter()
        .next()
        .ok_or(RbError::NoInterface(InterfaceId::DataContext))?;
    let (mut op, mut dc) = ctx.interfaces(&op, &dc)?;
    execute_design(design, &mut op, &mut dc)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RbFit {
    #[serde(rename = "B")]
    pub b: f64,
    pub p: f64,
    pub r: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Bootstrap standard deviation of `p`.
    #[serde(skip)]
    pub p_std: f64,
    /// Per length: (length, mean survival, 10th and 90th bootstrap percentile).
    #[serde(skip)]
    pub band: Vec<(usize, f64, f64, f64)>,
}

pub fn error_per_gate(p: f64) -> f64 {
    4.0 * (1.0 - p) / 3.0
}

/// Upper bound on the fitted decay. Slightly above 1 so the estimate and its
/// bootstrap spread are not truncated for near-perfect gates.
const P_MAX: f64 = 1.05;

fn fit_curve(lengths: &[f64], y: &[f64], init: Option<(f64, f64)>) -> Result<(f64, f64), FitError> {
    let (b0, p0) = match init {
        Some(i) => i,
        None => {
            let pts: Vec<(f64, f64)> = lengths
                .iter()
                .zip(y)
                .filter(|(_, v)| **v > 0.5)
                .map(|(m, v)| (*m, (v - 0.5).ln()))
                .collect();
            if pts.len() < 2 {
                return Err(FitError::Degenerate(
                    "fewer than two lengths above the 0.5 floor".into(),
                ));
            }
            let ones = vec![1.0; pts.len()];
            let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
            let ls: Vec<f64> = pts.iter().map(|p| p.1).collect();
            let (c, _) = linear_lsq(&[ones, xs], &ls)
                .ok_or_else(|| FitError::Degenerate("log-linear fit failed".into()))?;
            (c[0].exp().min(1.0), c[1].exp().clamp(0.0, P_MAX))
        }
    };
    let fit = levenberg_marquardt(&[b0, p0], &[(-1.0, 1.0), (0.0, P_MAX)], y.len(), |p, r, j| {
        for (i, m) in lengths.iter().enumerate() {
            let pm = p[1].powf(*m);
            r[i] = 0.5 + p[0] * pm - y[i];
            j[(i, 0)] = pm;
            j[(i, 1)] = if p[1] > 0.0 { p[0] * m * p[1].powf(m - 1.0) } else { 0.0 };
        }
    });
    Ok((fit.params[0], fit.params[1]))
}

/// Fits `P(m) = 0.5 + B·p^m` to the per-length means, with a bootstrap over
/// circuits for the percentile band of `r` and the spread of `p`.
pub fn fit_decay(data: &SurvivalData, replicates: usize, seed: u64) -> Result<RbFit, FitError> {
    let distinct = {
        let mut l = data.lengths.clone();
        l.dedup();
        l.len()
    };
    if distinct < 3 || data.survival.len() != data.lengths.len() {
        return Err(FitError::InvalidInput(
            "need survival data at three or more distinct lengths".into(),
        ));
    }
    if data.survival.iter().any(Vec::is_empty) {
        return Err(FitError::InvalidInput("a length has no circuits".into()));
    }
    let means = data.means();
    if means.iter().all(|m| *m <= 0.5) {
        return Err(FitError::Degenerate("no survival above 0.5".into()));
    }
    let xs: Vec<f64> = data.lengths.iter().map(|m| *m as f64).collect();
    let (b, p) = fit_curve(&xs, &means, None)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = Vec::with_capacity(replicates);
    let mut rs = Vec::with_capacity(replicates);
    let mut boot_means: Vec<Vec<f64>> = vec![Vec::with_capacity(replicates); xs.len()];
    let mut y = vec![0.0; xs.len()];
    for _ in 0..replicates {
        for (li, circuits) in data.survival.iter().enumerate() {
            let n = circuits.len();
            y[li] = (0..n).map(|_| circuits[rng.random_range(0..n)]).sum::<f64>() / n as f64;
            boot_means[li].push(y[li]);
        }
        let (_, pb) = fit_curve(&xs, &y, Some((b, p)))?;
        ps.push(pb);
        rs.push(error_per_gate(pb));
    }
    let (ci_low, ci_high, p_std) = if replicates > 0 {
        (percentile(&rs, 0.1), percentile(&rs, 0.9), std_dev(&ps))
    } else {
        let r = error_per_gate(p);
        (r, r, 0.0)
    };
    let band = data
        .lengths
        .iter()
        .zip(&means)
        .zip(&boot_means)
        .map(|((m, mu), bm)| {
            if bm.is_empty() {
                (*m, *mu, *mu, *mu)
            } else {
                (*m, *mu, percentile(bm, 0.1), percentile(bm, 0.9))
            }
        })
        .collect();
    Ok(RbFit {
        b,
        p,
        r: error_per_gate(p),
        ci_low,
        ci_high,
        p_std,
        band,
    })
}

/// Minimum resolvable fringe amplitude for `samples` shots per point.
fn amplitude_floor(samples: usize) -> f64 {
    (2.5 / (samples as f64).sqrt()).max(0.05)
}

#[derive(Debug, Clone)]
pub struct ScanData {
    pub x: Vec<f64>,
    pub bright: Vec<f64>,
    pub outcome: ScanOutcome,
}

fn run_axis(
    rig: &mut ScanRig<'_>,
    axis: ScanAxis,
    samples: usize,
    buffer_size: usize,
    mut body: impl FnMut(&mut ScanRig<'_>, f64) -> Result<(), ExperimentError>,
) -> Result<ScanData, ExperimentError> {
    let scan = ScanDefinition::one_d(axis, samples, buffer_size);
    let sink = HostSink::new();
    let outcome = run_scan(
        rig,
        &scan,
        |rig, pt| {
            body(rig, pt.coords[0])?;
            Ok(rig.detect()?)
        },
        &sink,
    )?;
    Ok(ScanData {
        x: scan.axes[0].values.clone(),
        bright: outcome.bright_fraction(),
        outcome,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RabiScanConfig {
    pub durations_mu: Vec<i64>,
    pub samples: usize,
    pub buffer_size: usize,
}

impl RabiScanConfig {
    /// `points` durations covering `periods` Rabi periods of a drive whose
    /// π time is `pi_time_mu`.
    pub fn covering(pi_time_mu: i64, periods: f64, points: usize, samples: usize) -> Self {
        let stop = 2.0 * pi_time_mu as f64 * periods;
        Self {
            durations_mu: ScanAxis::linspace("duration_mu", 0.0, stop, points)
                .values
                .iter()
                .map(|v| v.round() as i64)
                .collect(),
            samples,
            buffer_size: 16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RabiFit {
    pub rabi_hz: f64,
    pub amplitude: f64,
    pub offset: f64,
    pub pi_time_mu: i64,
}

/// Fits `A·sin²(π f t) + c` to bright fractions at durations `t` (seconds).
pub fn fit_rabi(t: &[f64], y: &[f64], samples: usize) -> Result<RabiFit, FitError> {
    if t.len() < 4 || t.len() != y.len() {
        return Err(FitError::InvalidInput("need four or more points".into()));
    }
    let span = t.iter().cloned().fold(f64::MIN, f64::max) - t.iter().cloned().fold(f64::MAX, f64::min);
    if span <= 0.0 {
        return Err(FitError::InvalidInput("durations do not span an interval".into()));
    }
    let f_max = (t.len() - 1) as f64 / (2.0 * span);
    let f_min = 0.5 / span;
    let grid = 4000;
    let mut best: Option<(f64, f64, f64, f64)> = None;
    for k in 0..=grid {
        let f = f_min + (f_max - f_min) * k as f64 / grid as f64;
        let col: Vec<f64> = t.iter().map(|x| (PI * f * x).sin().powi(2)).collect();
        if let Some((c, sse)) = linear_lsq(&[col, vec![1.0; t.len()]], y) {
            if best.is_none_or(|b| sse < b.3) {
                best = Some((c[0], f, c[1], sse));
            }
        }
    }
    let (a0, f0, c0, _) = best.ok_or_else(|| FitError::Degenerate("no candidate frequency".into()))?;
    let fit = levenberg_marquardt(
        &[a0, f0, c0],
        &[(-2.0, 2.0), (f_min * 0.5, f_max * 1.5), (-1.0, 2.0)],
        t.len(),
        |p, r, j| {
            for (i, x) in t.iter().enumerate() {
                let s = (PI * p[1] * x).sin();
                let c = (PI * p[1] * x).cos();
                r[i] = p[0] * s * s + p[2] - y[i];
                j[(i, 0)] = s * s;
                j[(i, 1)] = p[0] * 2.0 * s * c * PI * x;
                j[(i, 2)] = 1.0;
            }
        },
    );
    let (a, f, c) = (fit.params[0], fit.params[1], fit.params[2]);
    if a < amplitude_floor(samples) {
        return Err(FitError::Degenerate(format!(
            "oscillation amplitude {a:.3} is below the noise floor"
        )));
    }
    Ok(RabiFit {
        rabi_hz: f,
        amplitude: a,
        offset: c,
        pi_time_mu: (0.5e9 / f).round() as i64,
    })
}

/// Scans the X-pulse duration and fits the Rabi frequency.
pub fn rabi_scan(rig: &mut ScanRig<'_>, cfg: &RabiScanConfig) -> Result<(RabiFit, ScanData), RbError> {
    if cfg.durations_mu.iter().any(|d| *d < 0) {
        return Err(RbError::Precondition("durations must be non-negative".into()));
    }
    let axis = ScanAxis::new(
        "duration_mu",
        cfg.durations_mu.iter().map(|d| *d as f64).collect(),
    );
    let data = run_axis(rig, axis, cfg.samples, cfg.buffer_size, |rig, d| {
        rig.prepare()?;
        rig.pulse(Axis::X, d as i64)?;
        Ok(())
    })?;
    let t: Vec<f64> = data.x.iter().map(|d| d * 1e-9).collect();
    let fit = fit_rabi(&t, &data.bright, cfg.samples)?;
    Ok((fit, data))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RamseyConfig {
    pub delays_mu: Vec<i64>,
    pub samples: usize,
    pub buffer_size: usize,
}

impl RamseyConfig {
    pub fn linear(stop_mu: i64, points: usize, samples: usize) -> Self {
        Self {
            delays_mu: ScanAxis::linspace("delay_mu", 0.0, stop_mu as f64, points)
                .values
                .iter()
                .map(|v| v.round() as i64)
                .collect(),
            samples,
            buffer_size: 16,
        }
    }
}

impl Default for RamseyConfig {
    fn default() -> Self {
        Self::linear(2_000_000, 41, 200)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RamseyFit {
    /// Magnitude of the drive detuning.
    pub detuning_hz: f64,
    pub contrast: f64,
    pub offset: f64,
    pub phase: f64,
}

/// Fits `a + b·cos(2πδT) + c·sin(2πδT)` to a Ramsey fringe.
pub fn fit_ramsey(t: &[f64], y: &[f64], samples: usize) -> Result<RamseyFit, FitError> {
    let n = t.len();
    if n < 5 || n != y.len() {
        return Err(FitError::InvalidInput("need five or more points".into()));
    }
    let span = t[n - 1] - t[0];
    if span <= 0.0 {
        return Err(FitError::InvalidInput("delays must increase".into()));
    }
    let nyquist = (n - 1) as f64 / (2.0 * span);
    let grid = 4000;
    let mut best: Option<([f64; 3], f64, f64)> = None;
    for k in 1..=grid {
        let f = nyquist * k as f64 / grid as f64;
        let cos: Vec<f64> = t.iter().map(|x| (2.0 * PI * f * x).cos()).collect();
        let sin: Vec<f64> = t.iter().map(|x| (2.0 * PI * f * x).sin()).collect();
        if let Some((c, sse)) = linear_lsq(&[vec![1.0; n], cos, sin], y) {
            if best.is_none_or(|b| sse < b.2) {
                best = Some(([c[0], c[1], c[2]], f, sse));
            }
        }
    }
    let (c0, f0, _) = best.ok_or_else(|| FitError::Degenerate("no candidate frequency".into()))?;
    let fit = levenberg_marquardt(
        &[c0[0], c0[1], c0[2], f0],
        &[(-1.0, 2.0), (-2.0, 2.0), (-2.0, 2.0), (0.0, nyquist * 1.05)],
        n,
        |p, r, j| {
            for (i, x) in t.iter().enumerate() {
                let w = 2.0 * PI * x;
                let (s, c) = (w * p[3]).sin_cos();
                r[i] = p[0] + p[1] * c + p[2] * s - y[i];
                j[(i, 0)] = 1.0;
                j[(i, 1)] = c;
                j[(i, 2)] = s;
                j[(i, 3)] = w * (-p[1] * s + p[2] * c);
            }
        },
    );
    let [a, b, c, f] = [fit.params[0], fit.params[1], fit.params[2], fit.params[3]];
    let contrast = b.hypot(c);
    if contrast < amplitude_floor(samples) {
        let avg = mean(y);
        if avg >= 0.75 {
            return Ok(RamseyFit {
                detuning_hz: 0.0,
                contrast: 0.0,
                offset: avg,
                phase: 0.0,
            });
        }
        return Err(FitError::Degenerate(format!(
            "fringe contrast {contrast:.3} is below the noise floor"
        )));
    }
    if f >= 0.95 * nyquist {
        return Err(FitError::Aliased {
            estimate_hz: f,
            nyquist_hz: nyquist,
        });
    }
    Ok(RamseyFit {
        detuning_hz: f,
        contrast,
        offset: a,
        phase: (-c).atan2(b),
    })
}

/// π/2 – wait T – π/2 about Y, scanning T.
pub fn ramsey_scan(rig: &mut ScanRig<'_>, cfg: &RamseyConfig) -> Result<(RamseyFit, ScanData), RbError> {
    if cfg.delays_mu.windows(2).any(|w| w[0] >= w[1]) || cfg.delays_mu.first().is_some_and(|d| *d < 0) {
        return Err(RbError::Precondition(
            "delays must be non-negative and increasing".into(),
        ));
    }
    let axis = ScanAxis::new("delay_mu", cfg.delays_mu.iter().map(|d| *d as f64).collect());
    let data = run_axis(rig, axis, cfg.samples, cfg.buffer_size, |rig, d| {
        rig.prepare()?;
        rig.rotate(Axis::Y, PI / 2.0)?;
        rig.wait(d as i64)?;
        rig.rotate(Axis::Y, PI / 2.0)?;
        Ok(())
    })?;
    let t: Vec<f64> = data.x.iter().map(|d| d * 1e-9).collect();
    let fit = fit_ramsey(&t, &data.bright, cfg.samples)?;
    Ok((fit, data))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiTrainConfig {
    /// Odd numbers of π pulses.
    pub train_lengths: Vec<usize>,
    pub samples: usize,
    pub buffer_size: usize,
}

impl Default for PiTrainConfig {
    fn default() -> Self {
        Self {
            train_lengths: (1..=31).step_by(2).collect(),
            samples: 400,
            buffer_size: 16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PiTrainFit {
    /// Fractional over-rotation of the nominal π pulse.
    pub fractional_error: f64,
    pub nominal_pi_time_mu: i64,
    pub corrected_pi_time_mu: i64,
    pub contrast: f64,
}

/// Fits the fractional rotation error `e` from normalized ground-state
/// signals `z_n = sin((n + ½)·π·e)`.
pub fn fit_pi_train(lengths: &[usize], z: &[f64]) -> Result<f64, FitError> {
    let xs: Vec<f64> = lengths.iter().map(|n| (*n as f64 + 0.5) * PI).collect();
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    let e0 = xs.iter().zip(z).map(|(x, z)| x * z).sum::<f64>() / sxx;
    let bound = 0.5 / (xs.iter().cloned().fold(0.0, f64::max) / PI);
    let fit = levenberg_marquardt(&[e0.clamp(-bound, bound)], &[(-bound, bound)], xs.len(), |p, r, j| {
        for (i, x) in xs.iter().enumerate() {
            r[i] = (x * p[0]).sin() - z[i];
            j[(i, 0)] = x * (x * p[0]).cos();
        }
    });
    Ok(fit.params[0])
}

/// Trains of nominal π pulses after a nominal π/2 pulse; the accumulated
/// over-rotation shows up linearly in the ground-state population.
pub fn pi_train_calibration(rig: &mut ScanRig<'_>, cfg: &PiTrainConfig) -> Result<(PiTrainFit, ScanData), RbError> {
    if cfg.train_lengths.is_empty() {
        return Err(RbError::Precondition("no train lengths".into()));
    }
    if let Some(n) = cfg.train_lengths.iter().find(|n| **n == 0 || **n % 2 == 0) {
        return Err(RbError::Precondition(format!(
            "train length {n} is not a positive odd number"
        )));
    }
    let pi = rig.cal.pi_time_mu;
    if pi <= 1 {
        return Err(RbError::Precondition("no π-time estimate".into()));
    }
    let reference = run_axis(
        rig,
        ScanAxis::new("flips", vec![0.0, 1.0]),
        cfg.samples,
        cfg.buffer_size,
        |rig, flips| {
            rig.prepare()?;
            if flips > 0.0 {
                rig.pulse(Axis::X, pi)?;
            }
            Ok(())
        },
    )?;
    let ground0 = 1.0 - reference.bright[0];
    let ground1 = 1.0 - reference.bright[1];
    let contrast = (ground0 - ground1) / 2.0;
    let center = (ground0 + ground1) / 2.0;
    if contrast < amplitude_floor(cfg.samples) {
        return Err(FitError::Degenerate(format!("readout contrast {contrast:.3} too small")).into());
    }
    let axis = ScanAxis::new(
        "train_length",
        cfg.train_lengths.iter().map(|n| *n as f64).collect(),
    );
    let data = run_axis(rig, axis, cfg.samples, cfg.buffer_size, |rig, n| {
        rig.prepare()?;
        rig.pulse(Axis::X, pi / 2)?;
        for _ in 0..n as usize {
            rig.pulse(Axis::X, pi)?;
        }
        Ok(())
    })?;
    let z: Vec<f64> = data
        .bright
        .iter()
        .map(|b| ((1.0 - b - center) / contrast).clamp(-1.0, 1.0))
        .collect();
    let e = fit_pi_train(&cfg.train_lengths, &z)?;
    Ok((
        PiTrainFit {
            fractional_error: e,
            nominal_pi_time_mu: pi,
            corrected_pi_time_mu: (pi as f64 / (1.0 + e)).round() as i64,
            contrast,
        },
        data,
    ))
}
