//! Experiment lifecycle, scanning, host offloading, and overhead accounting.
//!
//! An experiment runs four phases in order: build, prepare, run, analyze.
//! Only the run phase may touch devices or datasets. Scans iterate a 1D or
//! 2D grid, take a number of samples per point, and stream each sample to a
//! [`HostSink`] through asynchronous RPCs. With a buffer size `B > 0` up to
//! `B` detection windows are scheduled before the oldest is read, so the
//! kernel stalls on input less often.

use std::collections::VecDeque;
use std::io::Write;
use std::sync::Arc;

use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::devices::{CountHandle, DeviceError};
use crate::framework::{DatasetError, InterfaceError, RegistryError};
use crate::rtio::{CoreState, ExecutionRecord, InstructionClass, RtioError};
use crate::system::{PhaseContext, System};

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentPhase {
    Build,
    Prepare,
    Run,
    Analyze,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Device(#[from] DeviceError),
    #[error(transparent)]
    Interface(#[from] InterfaceError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error("{access} is not allowed in the {phase:?} phase")]
    PhaseViolation {
        phase: ExperimentPhase,
        access: String,
    },
    #[error("buffer size {requested} exceeds the input buffer capacity {capacity}")]
    BufferTooLarge { requested: usize, capacity: usize },
    #[error("invalid scan: {0}")]
    InvalidScan(String),
    #[error("host sink is closed")]
    SinkClosed,
    #[error("minimal execution time must be positive, got {0} mu")]
    NonPositiveMinimum(i64),
    #[error("{0}")]
    Other(String),
}

impl From<RtioError> for ExperimentError {
    fn from(e: RtioError) -> Self {
        ExperimentError::Device(DeviceError::Rtio(e))
    }
}

/// An experiment's four phase bodies.
pub trait Experiment {
    type Output;

    fn build(&mut self, _ctx: &mut PhaseContext<'_>) -> Result<(), ExperimentError> {
        Ok(())
    }

    fn prepare(&mut self, _ctx: &mut PhaseContext<'_>) -> Result<(), ExperimentError> {
        Ok(())
    }

    fn run(&mut self, ctx: &mut PhaseContext<'_>) -> Result<(), ExperimentError>;

    fn analyze(&mut self, ctx: &mut PhaseContext<'_>) -> Result<Self::Output, ExperimentError>;
}

/// Runs each phase once, in order.
pub fn run_lifecycle<E: Experiment>(
    system: &mut System,
    experiment: &mut E,
) -> Result<E::Output, ExperimentError> {
    experiment.build(&mut PhaseContext::new(system, ExperimentPhase::Build))?;
    experiment.prepare(&mut PhaseContext::new(system, ExperimentPhase::Prepare))?;
    experiment.run(&mut PhaseContext::new(system, ExperimentPhase::Run))?;
    experiment.analyze(&mut PhaseContext::new(system, ExperimentPhase::Analyze))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanAxis {
    pub name: String,
    pub values: Vec<f64>,
}

impl ScanAxis {
    pub fn new(name: impl Into<String>, values: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            values,
        }
    }

    /// `n` evenly spaced values from `start` to `stop` inclusive.
    pub fn linspace(name: impl Into<String>, start: f64, stop: f64, n: usize) -> Self {
        let values = match n {
            0 => Vec::new(),
            1 => vec![start],
            _ => (0..n)
                .map(|i| start + (stop - start) * i as f64 / (n - 1) as f64)
                .collect(),
        };
        Self::new(name, values)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanDefinition {
    pub axes: Vec<ScanAxis>,
    pub samples_per_point: usize,
    /// 0 = unbuffered.
    pub buffer_size: usize,
}

impl ScanDefinition {
    pub fn one_d(axis: ScanAxis, samples_per_point: usize, buffer_size: usize) -> Self {
        Self {
            axes: vec![axis],
            samples_per_point,
            buffer_size,
        }
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.axes.is_empty() || self.axes.len() > 2 {
            return Err(ExperimentError::InvalidScan(format!(
                "expected 1 or 2 axes, got {}",
                self.axes.len()
            )));
        }
        if let Some(a) = self.axes.iter().find(|a| a.values.is_empty()) {
            return Err(ExperimentError::InvalidScan(format!(
                "axis {} has no values",
                a.name
            )));
        }
        if self.samples_per_point == 0 {
            return Err(ExperimentError::InvalidScan(
                "samples_per_point must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn num_points(&self) -> usize {
        self.axes.iter().map(|a| a.values.len()).product()
    }

    /// Grid coordinates, row-major in declared axis order.
    pub fn points(&self) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = vec![Vec::new()];
        for axis in &self.axes {
            out = out
                .into_iter()
                .flat_map(|prefix| {
                    axis.values.iter().map(move |v| {
                        let mut p = prefix.clone();
                        p.push(*v);
                        p
                    })
                })
                .collect();
        }
        out
    }
}

/// One offloaded measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub point: usize,
    pub coords: Vec<f64>,
    pub sample: usize,
    pub count: u64,
    pub bit: u8,
}

#[derive(Debug, Default)]
struct SinkState {
    records: Vec<SampleRecord>,
    closed: bool,
}

/// Append-only host-side record list. Clones share the same list, so a
/// reader thread may drain it while the kernel appends.
#[derive(Debug, Clone, Default)]
pub struct HostSink {
    inner: Arc<(Mutex<SinkState>, Condvar)>,
}

impl HostSink {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&self, record: SampleRecord) -> Result<(), ExperimentError> {
        let (lock, cv) = &*self.inner;
        let mut st = lock.lock();
        if st.closed {
            return Err(ExperimentError::SinkClosed);
        }
        st.records.push(record);
        cv.notify_all();
        Ok(())
    }

    /// Marks the sink complete. Idempotent.
    pub fn close(&self) {
        let (lock, cv) = &*self.inner;
        lock.lock().closed = true;
        cv.notify_all();
    }

    pub fn is_closed(&self) -> bool {
        self.inner.0.lock().closed
    }

    pub fn len(&self) -> usize {
        self.inner.0.lock().records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn snapshot(&self) -> Vec<SampleRecord> {
        self.inner.0.lock().records.clone()
    }

    pub fn reader(&self) -> SinkReader {
        SinkReader {
            sink: self.clone(),
            pos: 0,
        }
    }
}

/// Cursor over a [`HostSink`] that sees records in submission order.
#[derive(Debug)]
pub struct SinkReader {
    sink: HostSink,
    pos: usize,
}

impl SinkReader {
    /// Blocks until new records arrive or the sink closes. Returns `None`
    /// once the sink is closed and fully read.
    pub fn next_batch(&mut self) -> Option<Vec<SampleRecord>> {
        let (lock, cv) = &*self.sink.inner;
        let mut st = lock.lock();
        while st.records.len() == self.pos && !st.closed {
            cv.wait(&mut st);
        }
        if st.records.len() == self.pos {
            return None;
        }
        let batch = st.records[self.pos..].to_vec();
        self.pos = st.records.len();
        Some(batch)
    }
}

/// Enqueues `record` on the host; costs one async enqueue on the wall clock.
pub fn rpc_async(
    core: &mut CoreState,
    sink: &HostSink,
    record: SampleRecord,
) -> Result<(), ExperimentError> {
    sink.push(record)?;
    core.charge(InstructionClass::RpcAsyncEnqueue);
    Ok(())
}

/// Calls `host_fn` on the host and waits for the reply.
pub fn rpc_sync<A, R>(core: &mut CoreState, host_fn: impl FnOnce(A) -> R, args: A) -> R {
    core.charge(InstructionClass::RpcSyncRoundtrip);
    host_fn(args)
}

/// Kernel-side access a scan needs from the system it runs on.
pub trait ScanTarget {
    fn core(&mut self) -> &mut CoreState;

    /// Called before each sample's body; selects the sample's RNG stream.
    fn begin_sample(&mut self, point: usize, sample: usize);

    /// Classifies a photon count as a bit.
    fn classify(&self, count: u64) -> u8;

    /// Total physical duration (pulses, detection windows, waits) scheduled
    /// so far.
    fn scheduled_physical_mu(&self) -> i64;
}

/// Where the scan body is in the grid.
#[derive(Debug, Clone, Copy)]
pub struct ScanPoint<'a> {
    pub index: usize,
    pub coords: &'a [f64],
    pub sample: usize,
}

#[derive(Debug, Clone)]
pub struct ScanOutcome {
    /// Per point, the samples in order.
    pub samples: Vec<Vec<SampleRecord>>,
    pub record: ExecutionRecord,
    pub physical_mu: i64,
}

impl ScanOutcome {
    pub fn bright_fraction(&self) -> Vec<f64> {
        self.samples
            .iter()
            .map(|s| s.iter().map(|r| r.bit as f64).sum::<f64>() / s.len().max(1) as f64)
            .collect()
    }
}

/// Runs a scan as one kernel. `body` schedules one sample and returns its
/// detection window.
pub fn run_scan<T: ScanTarget>(
    target: &mut T,
    scan: &ScanDefinition,
    mut body: impl FnMut(&mut T, ScanPoint<'_>) -> Result<CountHandle, ExperimentError>,
    sink: &HostSink,
) -> Result<ScanOutcome, ExperimentError> {
    scan.validate()?;
    let capacity = target.core().config().input_buffer_capacity;
    if scan.buffer_size > capacity {
        return Err(ExperimentError::BufferTooLarge {
            requested: scan.buffer_size,
            capacity,
        });
    }
    let points = scan.points();
    let physical_start = target.scheduled_physical_mu();
    target.core().begin_kernel();

    let limit = scan.buffer_size.max(1);
    let mut samples: Vec<Vec<SampleRecord>> = vec![Vec::with_capacity(scan.samples_per_point); points.len()];
    let mut outstanding: VecDeque<(usize, usize, CountHandle)> = VecDeque::with_capacity(limit);

    let read_oldest = |target: &mut T,
                       outstanding: &mut VecDeque<(usize, usize, CountHandle)>,
                       samples: &mut Vec<Vec<SampleRecord>>|
     -> Result<(), ExperimentError> {
        let (p, s, handle) = outstanding.pop_front().expect("outstanding sample");
        let count = handle.read(target.core())?;
        let record = SampleRecord {
            point: p,
            coords: points[p].clone(),
            sample: s,
            count,
            bit: target.classify(count),
        };
        rpc_async(target.core(), sink, record.clone())?;
        samples[p].push(record);
        Ok(())
    };

    let result = (|| -> Result<(), ExperimentError> {
        for (p, coords) in points.iter().enumerate() {
            for s in 0..scan.samples_per_point {
                while outstanding.len() >= limit {
                    read_oldest(target, &mut outstanding, &mut samples)?;
                }
                target.core().ensure_slack();
                target.begin_sample(p, s);
                let handle = body(
                    target,
                    ScanPoint {
                        index: p,
                        coords,
                        sample: s,
                    },
                )?;
                outstanding.push_back((p, s, handle));
            }
        }
        while !outstanding.is_empty() {
            read_oldest(target, &mut outstanding, &mut samples)?;
        }
        Ok(())
    })();

    let record = target.core().finish_kernel(result.is_err());
    sink.close();
    result?;
    Ok(ScanOutcome {
        samples,
        record,
        physical_mu: target.scheduled_physical_mu() - physical_start,
    })
}

/// Declared physical durations of one sample.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleDurations {
    pub pulse_mu: i64,
    pub detect_mu: i64,
    pub wait_mu: i64,
}

impl SampleDurations {
    pub fn total(&self) -> i64 {
        self.pulse_mu + self.detect_mu + self.wait_mu
    }
}

/// Minimal execution time: the physical durations of every sample of every
/// point. Programming delays, CPU time, and RPCs are excluded.
pub fn t_min_of(scan: &ScanDefinition, per_sample: impl Fn(&[f64]) -> SampleDurations) -> i64 {
    if scan.axes.is_empty() || scan.axes.iter().any(|a| a.values.is_empty()) {
        return 0;
    }
    scan.points()
        .iter()
        .map(|p| per_sample(p).total() * scan.samples_per_point as i64)
        .sum()
}

pub fn compute_overhead(t_exe_mu: i64, t_min_mu: i64) -> Result<f64, ExperimentError> {
    if t_min_mu <= 0 {
        return Err(ExperimentError::NonPositiveMinimum(t_min_mu));
    }
    Ok((t_exe_mu - t_min_mu) as f64 / t_min_mu as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExecutionReport {
    pub t_exe_mu: i64,
    pub t_min_mu: i64,
    pub overhead: f64,
}

impl ExecutionReport {
    pub fn new(t_exe_mu: i64, t_min_mu: i64) -> Result<Self, ExperimentError> {
        Ok(Self {
            t_exe_mu,
            t_min_mu,
            overhead: compute_overhead(t_exe_mu, t_min_mu)?,
        })
    }
}

/// Writes scan samples as CSV: one column per axis, then sample, count, bit.
pub fn write_samples_csv<W: Write>(
    out: W,
    scan: &ScanDefinition,
    samples: &[Vec<SampleRecord>],
) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = scan.axes.iter().map(|a| a.name.clone()).collect();
    header.extend(["sample", "count", "bit"].map(String::from));
    w.write_record(&header)?;
    for r in samples.iter().flatten() {
        let mut row: Vec<String> = r.coords.iter().map(|c| c.to_string()).collect();
        row.push(r.sample.to_string());
        row.push(r.count.to_string());
        row.push(r.bit.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
