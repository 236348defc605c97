//! The runnable experiments. Each goes through the build, prepare, run and
//! analyze phases and returns its result files.

use std::collections::BTreeMap;

use qctl_core::experiment::{run_lifecycle, ExecutionReport, Experiment, ExperimentError};
use qctl_core::framework::{Actor, DatasetValue, InterfaceId};
use qctl_core::rb::{
    direct_rb_client, fit_decay, pi_train_calibration, rabi_scan, ramsey_scan, PiTrainConfig,
    PiTrainFit, RabiFit, RabiScanConfig, RamseyConfig, RamseyFit, RbDesign, RbFit, ScanData,
    SurvivalData,
};
use qctl_core::rtio::ExecutionRecord;
use qctl_core::system::{PhaseContext, System, PI_TIME_KEY};
use serde::Serialize;

use crate::bench::{run_scenario, Scenario, ScenarioReport};
use crate::report::OverheadReport;
use crate::{to_json_bytes, CliError, ExperimentId, Params, RunFiles, RunManifest};

pub fn run_experiment(
    manifest: &RunManifest,
    params: &Params,
    system: &mut System,
) -> Result<RunFiles, CliError> {
    let buffer = manifest.buffer.unwrap_or(16);
    match manifest.experiment {
        ExperimentId::Rabi => {
            params.check_known(&["points", "samples", "periods"])?;
            let mut e = Rabi {
                points: params.usize("points", 21)?,
                samples: params.usize("samples", 100)?,
                periods: params.f64("periods", 2.0)?,
                buffer,
                ..Rabi::default()
            };
            lifecycle(system, &mut e)
        }
        ExperimentId::Ramsey => {
            params.check_known(&["points", "samples", "stop_mu"])?;
            let mut e = Ramsey {
                cfg: RamseyConfig {
                    buffer_size: buffer,
                    ..RamseyConfig::linear(
                        params.i64("stop_mu", 2_000_000)?,
                        params.usize("points", 41)?,
                        params.usize("samples", 200)?,
                    )
                },
                ..Ramsey::default()
            };
            lifecycle(system, &mut e)
        }
        ExperimentId::PiTrain => {
            params.check_known(&["lengths", "samples"])?;
            let d = PiTrainConfig::default();
            let mut e = PiTrain {
                cfg: PiTrainConfig {
                    train_lengths: params.usize_list("lengths", d.train_lengths)?,
                    samples: params.usize("samples", d.samples)?,
                    buffer_size: buffer,
                },
                ..PiTrain::default()
            };
            lifecycle(system, &mut e)
        }
        ExperimentId::DirectRb => {
            params.check_known(&["lengths", "circuits", "samples", "replicates"])?;
            let d = RbDesign::default();
            let mut e = DirectRb {
                design: RbDesign {
                    lengths: params.usize_list("lengths", d.lengths)?,
                    circuits_per_length: params.usize("circuits", d.circuits_per_length)?,
                    samples_per_circuit: params.usize("samples", d.samples_per_circuit)?,
                    omega: d.omega,
                    seed: manifest.seed,
                },
                replicates: params.usize("replicates", 1000)?,
                ..DirectRb::default()
            };
            lifecycle(system, &mut e)
        }
        ExperimentId::OverheadBench => {
            params.check_known(&["scenario"])?;
            let scenarios = match params.str("scenario", "both")? {
                "short" => vec![Scenario::Short],
                "long" => vec![Scenario::Long],
                "both" => Scenario::ALL.to_vec(),
                _ => {
                    return Err(CliError::Override {
                        key: "exp.scenario".into(),
                        message: "expected short, long or both".into(),
                    })
                }
            };
            let mut e = OverheadBench {
                scenarios,
                buffer: manifest.buffer.unwrap_or(0),
                ..OverheadBench::default()
            };
            lifecycle(system, &mut e)
        }
    }
}

fn lifecycle<E: Experiment<Output = RunFiles>>(system: &mut System, e: &mut E) -> Result<RunFiles, CliError> {
    Ok(run_lifecycle(system, e)?)
}

/// First implementation of the operation interface.
fn operation_service(ctx: &PhaseContext<'_>) -> Result<String, ExperimentError> {
    ctx.registry()
        .find_interface(&InterfaceId::Operation)
        .into_iter()
        .next()
        .ok_or_else(|| ExperimentError::Other("no operation service".into()))
}

fn check_nonzero(what: &str, v: usize) -> Result<(), ExperimentError> {
    if v == 0 {
        Err(ExperimentError::Other(format!("{what} must be positive")))
    } else {
        Ok(())
    }
}

fn scan_csv(axis: &str, data: &ScanData) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([axis, "bright_fraction"]).expect("in-memory csv");
    for (x, y) in data.x.iter().zip(&data.bright) {
        w.write_record([x.to_string(), y.to_string()]).expect("in-memory csv");
    }
    w.into_inner().expect("in-memory csv")
}

fn scan_report(data: &ScanData) -> Result<ExecutionReport, ExperimentError> {
    ExecutionReport::new(data.outcome.record.t_exe_mu, data.outcome.physical_mu)
}

fn rb_err(e: qctl_core::rb::RbError) -> ExperimentError {
    match e {
        qctl_core::rb::RbError::Experiment(e) => e,
        other => ExperimentError::Other(other.to_string()),
    }
}

#[derive(Debug, Default)]
struct Rabi {
    points: usize,
    samples: usize,
    periods: f64,
    buffer: usize,
    op: String,
    result: Option<(RabiFit, ScanData)>,
}

impl Experiment for Rabi {
    type Output = RunFiles;

    fn build(&mut self, ctx: &mut PhaseContext<'_>) -> Result<(), ExperimentError> {
        self.op = operation_service(ctx)?;
        Ok(())
    }

    fn prepare(&mut self, _ctx: &mut PhaseContext<'_>) -> Result<(), ExperimentError> {
        check_nonzero("points", self.points)?;
        check_nonzero("samples", self.samples)?;
        if !(self.periods > 0.0) {
            return Err(ExperimentError::Other("periods must be positive".into()));
        }
        Ok(())
    }

    fn run(&mut self, ctx: &mut PhaseContext<'_>) -> Result<(), ExperimentError> {
        let module = ctx.system()?.binding(&self.op).expect("bound").calibration_module.clone();
        let mut rig = ctx.scan_rig(&self.op)?;
        let mut cfg = RabiScanConfig::covering(rig.cal.pi_time_mu, self.periods, self.points, self.samples);
        cfg.buffer_size = self.buffer;
        let (fit, data) = rabi_scan(&mut rig, &cfg).map_err(rb_err)?;
        ctx.dataset_set(&module, PI_TIME_KEY, DatasetValue::Int(fit.pi_time_mu))?;
        self.result = Some((fit, data));
        Ok(())
    }

    fn analyze(&mut self, _ctx: &mut PhaseContext<'_>) -> Result<RunFiles, ExperimentError> {
        let (fit, data) = self.result.take().expect("run completed");
        Ok(BTreeMap::from([
            ("calibration.json".into(), to_json_bytes(&fit)),
            ("rabi_scan.csv".into(), scan_csv("duration_mu", &data)),
            ("execution_report.json".into(), to_json_bytes(&scan_report(&data)?)),
        ]))
    }
}

#[derive(Debug, Default)]
struct Ramsey {
    cfg: RamseyConfig,
    op: String,
    result: Option<(RamseyFit, ScanData)>,
}

impl Experiment for Ramsey {
    type Output = RunFiles;

    fn build(&mut self, ctx: &mut PhaseContext<'_>) -> Result<(), ExperimentError> {
        self.op = operation_service(ctx)?;
        Ok(())
    }

    fn prepare(&mut self, _ctx: &mut PhaseContext<'_>) -> Result<(), ExperimentError> {
        check_nonzero("samples", self.cfg.samples)
    }

    fn run(&mut self, ctx: &mut PhaseContext<'_>) -> Result<(), ExperimentError> {
        let mut rig = ctx.scan_rig(&self.op)?;
        self.result = Some(ramsey_scan(&mut rig, &self.cfg).map_err(rb_err)?);
        Ok(())
    }

    fn analyze(&mut self, _ctx: &mut PhaseContext<'_>) -> Result<RunFiles, ExperimentError> {
        let (fit, data) = self.result.take().expect("run completed");
        Ok(BTreeMap::from([
            ("calibration.json".into(), to_json_bytes(&fit)),
            ("ramsey_scan.csv".into(), scan_csv("delay_mu", &data)),
            ("execution_report.json".into(), to_json_bytes(&scan_report(&data)?)),
        ]))
    }
}

#[derive(Debug, Default)]
struct PiTrain {
    cfg: PiTrainConfig,
    op: String,
    result: Option<(PiTrainFit, ScanData)>,
}

impl Experiment for PiTrain {
    type Output = RunFiles;

    fn build(&mut self, ctx: &mut PhaseContext<'_>) -> Result<(), ExperimentError> {
        self.op = operation_service(ctx)?;
        Ok(())
    }

    fn prepare(&mut self, _ctx: &mut PhaseContext<'_>) -> Result<(), ExperimentError> {
        check_nonzero("samples", self.cfg.samples)
    }

    fn run(&mut self, ctx: &mut PhaseContext<'_>) -> Result<(), ExperimentError> {
        let module = ctx.system()?.binding(&self.op).expect("bound").calibration_module.clone();
        let mut rig = ctx.scan_rig(&self.op)?;
        let (fit, data) = pi_train_calibration(&mut rig, &self.cfg).map_err(rb_err)?;
        ctx.dataset_set(&module, PI_TIME_KEY, DatasetValue::Int(fit.corrected_pi_time_mu))?;
        self.result = Some((fit, data));
        Ok(())
    }

    fn analyze(&mut self, _ctx: &mut PhaseContext<'_>) -> Result<RunFiles, ExperimentError> {
        let (fit, data) = self.result.take().expect("run completed");
        Ok(BTreeMap::from([
            ("calibration.json".into(), to_json_bytes(&fit)),
            ("pi_train_scan.csv".into(), scan_csv("train_length", &data)),
            ("execution_report.json".into(), to_json_bytes(&scan_report(&data)?)),
        ]))
    }
}

#[derive(Debug, Serialize)]
struct RbResults<'a> {
    lengths: &'a [usize],
    survival: &'a [Vec<f64>],
    fit: &'a RbFit,
}

#[derive(Debug, Serialize)]
struct AuditSummary {
    actor: &'static str,
    interface_only: bool,
    accesses: Vec<AuditEntry>,
}

#[derive(Debug, Serialize)]
struct AuditEntry {
    access: serde_json::Value,
    count: u64,
}

#[derive(Debug, Default)]
struct DirectRb {
    design: RbDesign,
    replicates: usize,
    result: Option<(SurvivalData, ExecutionRecord, i64)>,
    audit: Option<AuditSummary>,
}

impl Experiment for DirectRb {
    type Output = RunFiles;

    fn build(&mut self, ctx: &mut PhaseContext<'_>) -> Result<(), ExperimentError> {
        operation_service(ctx)?;
        Ok(())
    }

    fn prepare(&mut self, _ctx: &mut PhaseContext<'_>) -> Result<(), ExperimentError> {
        self.design.validate().map_err(rb_err)
    }

    fn run(&mut self, ctx: &mut PhaseContext<'_>) -> Result<(), ExperimentError> {
        let before = ctx.system()?.hardware().physical_mu();
        let design = self.design.clone();
        let (data, record) = ctx.run_client(|c| direct_rb_client(c, &design))?;
        let data = data.map_err(rb_err)?;
        let sys = ctx.system()?;
        let physical = sys.hardware().physical_mu() - before;
        let accesses: Vec<AuditEntry> = sys
            .audit()
            .by_actor(&Actor::Client)
            .into_iter()
            .map(|(a, count)| AuditEntry {
                access: serde_json::to_value(&a).expect("access serializes"),
                count,
            })
            .collect();
        self.audit = Some(AuditSummary {
            actor: "client",
            interface_only: sys.audit().client_violations().is_empty(),
            accesses,
        });
        self.result = Some((data, record, physical));
        Ok(())
    }

    fn analyze(&mut self, _ctx: &mut PhaseContext<'_>) -> Result<RunFiles, ExperimentError> {
        let (data, record, physical) = self.result.take().expect("run completed");
        let fit = fit_decay(&data, self.replicates, self.design.seed)
            .map_err(|e| ExperimentError::Other(e.to_string()))?;
        let mut plot = csv::Writer::from_writer(Vec::new());
        plot.write_record(["length", "mean", "ci_low", "ci_high"])
            .expect("in-memory csv");
        for (m, mean, lo, hi) in &fit.band {
            plot.write_record([m.to_string(), mean.to_string(), lo.to_string(), hi.to_string()])
                .expect("in-memory csv");
        }
        let results = RbResults {
            lengths: &data.lengths,
            survival: &data.survival,
            fit: &fit,
        };
        Ok(BTreeMap::from([
            ("rb_results.json".into(), to_json_bytes(&results)),
            ("rb_plot.csv".into(), plot.into_inner().expect("in-memory csv")),
            (
                "execution_report.json".into(),
                to_json_bytes(&ExecutionReport::new(record.t_exe_mu, physical)?),
            ),
            ("audit.json".into(), to_json_bytes(&self.audit.take())),
        ]))
    }
}

#[derive(Debug, Default)]
struct OverheadBench {
    scenarios: Vec<Scenario>,
    buffer: usize,
    op: String,
    reports: Vec<ScenarioReport>,
    system: String,
    policy: String,
}

impl Experiment for OverheadBench {
    type Output = RunFiles;

    fn build(&mut self, ctx: &mut PhaseContext<'_>) -> Result<(), ExperimentError> {
        self.op = operation_service(ctx)?;
        self.system = ctx.definition().name.clone();
        self.policy = serde_json::to_value(ctx.definition().policy.mode)
            .ok()
            .and_then(|v| v.as_str().map(String::from))
            .unwrap_or_default();
        Ok(())
    }

    fn run(&mut self, ctx: &mut PhaseContext<'_>) -> Result<(), ExperimentError> {
        let mut rig = ctx.scan_rig(&self.op)?;
        for s in &self.scenarios {
            self.reports.push(run_scenario(&mut rig, *s, self.buffer)?);
        }
        Ok(())
    }

    fn analyze(&mut self, _ctx: &mut PhaseContext<'_>) -> Result<RunFiles, ExperimentError> {
        let report = OverheadReport {
            system: self.system.clone(),
            policy: self.policy.clone(),
            buffer_size: self.buffer,
            scenarios: std::mem::take(&mut self.reports),
        };
        Ok(BTreeMap::from([(
            "overhead_report.json".into(),
            to_json_bytes(&report),
        )]))
    }
}
