//! A loaded system: the sealed registry, datasets, simulated hardware, and
//! the service implementations behind the standard interfaces.
//!
//! A [`SystemDefinition`] (usually TOML) declares devices, the module tree
//! with device claims, services with their dependencies and interfaces,
//! physics parameters, and initial datasets. Loading validates all registry
//! invariants and binds every operation service to the devices it reaches
//! through its dependency closure.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::devices::{
    CountHandle, CounterDevice, DdsDevice, DelayPolicy, DeviceError, DeviceKind, TtlDevice,
};
use crate::experiment::{ExperimentError, ExperimentPhase, ScanTarget};
use crate::framework::{
    Access, Actor, AuditLog, DataContextInterface, DatasetStore, DatasetValue, InterfaceError,
    InterfaceId, OperationInterface, Registry, RegistryError, ServiceNode,
};
use crate::physics::{Axis, DriveParams, Ion, NoiseModel};
use crate::rtio::{CoreConfig, CoreState, ExecutionRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceRole {
    /// DDS that synthesizes the gate drive.
    GateDds,
    /// Switch gating the drive onto the ion.
    GateSwitch,
    Cool,
    Pump,
    DetectLaser,
    Pmt,
    Aux,
}

impl fmt::Display for DeviceRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DeviceRole::GateDds => "gate_dds",
            DeviceRole::GateSwitch => "gate_switch",
            DeviceRole::Cool => "cool",
            DeviceRole::Pump => "pump",
            DeviceRole::DetectLaser => "detect_laser",
            DeviceRole::Pmt => "pmt",
            DeviceRole::Aux => "aux",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<DeviceRole>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub freq_hz: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub amp_frac: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceSpec {
    pub key: String,
    pub kind: DeviceKind,
    pub channel: u32,
    #[serde(default)]
    pub params: DeviceParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModuleSpec {
    pub key: String,
    #[serde(default)]
    pub claims: Vec<String>,
}

/// Fixed durations of the state-preparation and detection steps.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OperationTiming {
    pub cool_mu: i64,
    pub pump_mu: i64,
    pub detect_mu: i64,
    /// Detection window the noise model's mean counts refer to.
    pub detect_reference_mu: i64,
}

impl Default for OperationTiming {
    fn default() -> Self {
        Self {
            cool_mu: 3_000,
            pump_mu: 2_000,
            detect_mu: 100_000,
            detect_reference_mu: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemDefinition {
    pub name: String,
    #[serde(default)]
    pub core: CoreConfig,
    #[serde(default)]
    pub policy: DelayPolicy,
    #[serde(default)]
    pub noise: NoiseModel,
    #[serde(default)]
    pub drive: DriveParams,
    #[serde(default)]
    pub timing: OperationTiming,
    #[serde(default)]
    pub datasets: BTreeMap<String, DatasetValue>,
    pub devices: Vec<DeviceSpec>,
    pub modules: Vec<ModuleSpec>,
    #[serde(default)]
    pub services: Vec<ServiceNode>,
}

impl SystemDefinition {
    pub fn from_toml(text: &str) -> Result<Self, SystemError> {
        toml::from_str(text).map_err(|e| SystemError::Parse(e.to_string()))
    }

    /// Canonical TOML rendering.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("system definition serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ValidationError {
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error("{0}")]
    Config(String),
    #[error("service {service}: {detail}")]
    Binding { service: String, detail: String },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SystemError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("validation error: {0}")]
    Validation(#[from] ValidationError),
    #[error("unknown service {0}")]
    UnknownService(String),
    #[error("service {service} does not implement {interface}")]
    NotImplemented {
        service: String,
        interface: InterfaceId,
    },
}

impl From<RegistryError> for SystemError {
    fn from(e: RegistryError) -> Self {
        SystemError::Validation(ValidationError::Registry(e))
    }
}

/// Devices an operation service drives, resolved at load time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpBinding {
    pub service: String,
    pub gate_dds: String,
    pub gate_switch: String,
    pub cool: String,
    pub pump: String,
    pub detect_laser: String,
    pub pmt: String,
    /// Module whose datasets hold the gate calibration.
    pub calibration_module: String,
}

/// Gate calibration read from the calibration module's datasets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateCalibration {
    pub pi_time_mu: i64,
    /// Drive frequency offset from the nominal qubit frequency.
    pub freq_offset_hz: f64,
    pub amp_frac: f64,
}

pub const PI_TIME_KEY: &str = "pi_time_mu";
pub const FREQ_OFFSET_KEY: &str = "freq_offset_hz";

/// Simulated hardware: the core device, drivers, and the ion.
#[derive(Debug, Clone)]
pub struct Hardware {
    pub core: CoreState,
    pub policy: DelayPolicy,
    pub timing: OperationTiming,
    pub dds: BTreeMap<String, DdsDevice>,
    pub ttl: BTreeMap<String, TtlDevice>,
    pub counters: BTreeMap<String, CounterDevice>,
    pub ion: Ion,
    qubit_freq_hz: f64,
    physical_mu: i64,
}

impl Hardware {
    pub fn physical_mu(&self) -> i64 {
        self.physical_mu
    }

    fn ttl_pulse(&mut self, key: &str, duration: i64) -> Result<(), DeviceError> {
        let ttl = self.ttl.get_mut(key).expect("bound ttl");
        ttl.pulse(&mut self.core, &self.policy, duration)?;
        self.physical_mu += duration;
        Ok(())
    }

    /// Doppler cooling followed by optical pumping into |0⟩.
    pub fn prepare(&mut self, b: &OpBinding) -> Result<(), DeviceError> {
        self.ttl_pulse(&b.cool, self.timing.cool_mu)?;
        self.ttl_pulse(&b.pump, self.timing.pump_mu)?;
        let t = self.core.now_mu();
        self.ion.prepare(t);
        Ok(())
    }

    /// Unconditionally reprograms the gate DDS.
    pub fn program_drive(
        &mut self,
        b: &OpBinding,
        freq_hz: f64,
        phase_turns: f64,
        amp_frac: f64,
    ) -> Result<(), DeviceError> {
        let dds = self.dds.get_mut(&b.gate_dds).expect("bound dds");
        dds.set(&mut self.core, &self.policy, freq_hz, phase_turns, amp_frac)
    }

    /// A drive pulse of `duration_mu`; the DDS is reprogrammed only if its
    /// registers differ from what the pulse needs.
    pub fn drive_pulse(
        &mut self,
        b: &OpBinding,
        cal: &GateCalibration,
        phase_turns: f64,
        duration_mu: i64,
    ) -> Result<(), DeviceError> {
        let freq = self.qubit_freq_hz + cal.freq_offset_hz;
        let dds = &self.dds[&b.gate_dds];
        if dds.freq_hz != freq || dds.phase_turns != phase_turns || dds.amp_frac != cal.amp_frac {
            self.program_drive(b, freq, phase_turns, cal.amp_frac)?;
        }
        let start = self.core.now_mu();
        self.ttl_pulse(&b.gate_switch, duration_mu)?;
        let detuning = self.detuning_hz(b);
        let amp = self.dds[&b.gate_dds].amp_frac;
        self.ion
            .pulse(start, duration_mu, amp, phase_turns, detuning);
        Ok(())
    }

    /// Intentional wait; the ion precesses freely.
    pub fn wait(&mut self, duration_mu: i64) -> Result<(), DeviceError> {
        if duration_mu < 0 {
            return Err(DeviceError::InvalidParameter(format!(
                "wait must be non-negative, got {duration_mu} mu"
            )));
        }
        self.core.delay_mu(duration_mu)?;
        self.physical_mu += duration_mu;
        Ok(())
    }

    /// Detection laser on for the detection window while the PMT counts.
    pub fn detect(&mut self, b: &OpBinding) -> Result<CountHandle, DeviceError> {
        let duration = self.timing.detect_mu;
        let scale = duration as f64 / self.timing.detect_reference_mu as f64;
        let detuning = self.detuning_hz(b);
        self.ttl
            .get_mut(&b.detect_laser)
            .expect("bound laser")
            .on(&mut self.core, &self.policy)?;
        let ion = &mut self.ion;
        let handle = self.counters[&b.pmt].count_window(&mut self.core, duration, |start, _| {
            ion.detect(start, scale, detuning)
        })?;
        self.ttl
            .get_mut(&b.detect_laser)
            .expect("bound laser")
            .off(&mut self.core, &self.policy)?;
        self.physical_mu += duration;
        Ok(handle)
    }

    pub fn classify(&self, count: u64) -> u8 {
        self.ion.noise.classify(count)
    }

    /// Drive detuning relative to the ion's true transition.
    fn detuning_hz(&self, b: &OpBinding) -> f64 {
        let dds_freq = self.dds[&b.gate_dds].freq_hz;
        (self.qubit_freq_hz + self.ion.drive.detuning_hz) - dds_freq
    }
}

/// Storage behind data-context services.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DataContextStore {
    open: Option<[u64; 2]>,
    closed: Vec<[u64; 2]>,
}

impl DataContextStore {
    pub fn closed_contexts(&self) -> &[[u64; 2]] {
        &self.closed
    }
}

/// A loaded, validated system.
#[derive(Debug, Clone)]
pub struct System {
    definition: SystemDefinition,
    registry: Registry,
    datasets: DatasetStore,
    hw: Hardware,
    bindings: BTreeMap<String, OpBinding>,
    data_contexts: BTreeMap<String, DataContextStore>,
    audit: AuditLog,
}

impl System {
    pub fn from_toml(text: &str, seed: u64) -> Result<Self, SystemError> {
        Self::from_definition(SystemDefinition::from_toml(text)?, seed)
    }

    pub fn from_definition(def: SystemDefinition, seed: u64) -> Result<Self, SystemError> {
        let cfg = |e: String| SystemError::Validation(ValidationError::Config(e));
        def.core.validate().map_err(|e| cfg(format!("core: {e}")))?;
        def.policy.validate().map_err(|e| cfg(format!("policy: {e}")))?;
        def.noise.validate().map_err(|e| cfg(format!("noise: {e}")))?;
        def.drive.validate().map_err(|e| cfg(format!("drive: {e}")))?;
        if def.timing.detect_mu <= 0
            || def.timing.detect_reference_mu <= 0
            || def.timing.cool_mu <= 0
            || def.timing.pump_mu <= 0
        {
            return Err(cfg("timing durations must be positive".into()));
        }

        let mut registry = Registry::new();
        let mut channels: BTreeMap<u32, &str> = BTreeMap::new();
        for d in &def.devices {
            registry.declare_device(&d.key)?;
            if let Some(other) = channels.insert(d.channel, &d.key) {
                return Err(cfg(format!(
                    "devices {other} and {} share channel {}",
                    d.key, d.channel
                )));
            }
        }
        for m in &def.modules {
            let (parent, name) = match m.key.rsplit_once('.') {
                Some((p, n)) => (Some(p), n),
                None => (None, m.key.as_str()),
            };
            registry.add_module(parent, name)?;
            for dev in &m.claims {
                registry.claim_device(&m.key, dev)?;
            }
        }
        for s in dependency_order(&def.services)? {
            registry.add_service(s.clone())?;
        }
        registry
            .check_invariants()
            .map_err(|e| cfg(format!("registry invariant: {e}")))?;

        let specs: BTreeMap<&str, &DeviceSpec> =
            def.devices.iter().map(|d| (d.key.as_str(), d)).collect();
        let mut bindings = BTreeMap::new();
        for name in registry.find_interface(&InterfaceId::Operation) {
            let b = bind_operation(&registry, &specs, &name)?;
            bindings.insert(name, b);
        }
        let data_contexts = registry
            .find_interface(&InterfaceId::DataContext)
            .into_iter()
            .map(|n| (n, DataContextStore::default()))
            .collect();

        let mut datasets = DatasetStore::new();
        for (full, value) in &def.datasets {
            let Some((ns, key)) = full.rsplit_once('.') else {
                return Err(cfg(format!("dataset key {full} has no namespace")));
            };
            if registry.module(ns).is_none() && registry.service(ns).is_none() {
                return Err(cfg(format!("dataset {full} names unknown node {ns}")));
            }
            datasets
                .set(ns, ns, key, value.clone(), true)
                .map_err(|e| cfg(e.to_string()))?;
        }

        let num_channels = def.devices.iter().map(|d| d.channel as usize + 1).max().unwrap_or(0);
        let core = CoreState::new(def.core.clone(), num_channels)
            .map_err(|e| cfg(format!("core: {e}")))?;
        let mut hw = Hardware {
            core,
            policy: def.policy.clone(),
            timing: def.timing.clone(),
            dds: BTreeMap::new(),
            ttl: BTreeMap::new(),
            counters: BTreeMap::new(),
            ion: Ion::new(def.noise.clone(), def.drive.clone(), seed),
            qubit_freq_hz: def.drive.qubit_freq_hz,
            physical_mu: 0,
        };
        for d in &def.devices {
            match d.kind {
                DeviceKind::Dds => {
                    let mut dds = DdsDevice::new(
                        &d.key,
                        d.channel,
                        d.params.freq_hz.unwrap_or(def.drive.qubit_freq_hz),
                    );
                    dds.amp_frac = d.params.amp_frac.unwrap_or(1.0);
                    hw.dds.insert(d.key.clone(), dds);
                }
                DeviceKind::Ttl => {
                    hw.ttl.insert(d.key.clone(), TtlDevice::new(&d.key, d.channel));
                }
                DeviceKind::Counter => {
                    hw.counters
                        .insert(d.key.clone(), CounterDevice::new(&d.key, d.channel));
                }
            }
        }
        registry.seal();

        Ok(Self {
            definition: def,
            registry,
            datasets,
            hw,
            bindings,
            data_contexts,
            audit: AuditLog::new(),
        })
    }

    pub fn name(&self) -> &str {
        &self.definition.name
    }

    pub fn definition(&self) -> &SystemDefinition {
        &self.definition
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn datasets(&self) -> &DatasetStore {
        &self.datasets
    }

    pub fn audit(&self) -> &AuditLog {
        &self.audit
    }

    pub fn hardware(&self) -> &Hardware {
        &self.hw
    }

    pub fn hardware_mut(&mut self) -> &mut Hardware {
        &mut self.hw
    }

    pub fn binding(&self, service: &str) -> Option<&OpBinding> {
        self.bindings.get(service)
    }

    pub fn data_context(&self, service: &str) -> Option<&DataContextStore> {
        self.data_contexts.get(service)
    }

    /// Restarts the ion's RNG stream.
    pub fn reseed(&mut self, seed: u64) {
        self.hw.ion.reseed(seed);
    }

    /// Calibration values for `service`, falling back to a π time derived
    /// from the configured Rabi frequency.
    pub fn gate_calibration(&self, service: &str) -> Result<GateCalibration, SystemError> {
        let b = self
            .bindings
            .get(service)
            .ok_or_else(|| SystemError::UnknownService(service.to_string()))?;
        let ns = &b.calibration_module;
        let default_pi = (0.5e9 / self.definition.drive.rabi_hz).round() as i64;
        let pi_time_mu = self
            .datasets
            .lookup(ns, PI_TIME_KEY)
            .and_then(DatasetValue::as_i64)
            .unwrap_or(default_pi);
        let freq_offset_hz = self
            .datasets
            .lookup(ns, FREQ_OFFSET_KEY)
            .and_then(DatasetValue::as_f64)
            .unwrap_or(0.0);
        let amp_frac = self.hw.dds[&b.gate_dds].amp_frac;
        Ok(GateCalibration {
            pi_time_mu,
            freq_offset_hz,
            amp_frac,
        })
    }

    /// Kernel-side handle for scans driven by operation service `service`.
    pub fn scan_rig(&mut self, service: &str) -> Result<ScanRig<'_>, SystemError> {
        let cal = self.gate_calibration(service)?;
        let binding = &self.bindings[service];
        Ok(ScanRig {
            hw: &mut self.hw,
            binding,
            cal,
        })
    }

    /// Runs a portable client. The client sees only a [`ClientContext`];
    /// every lookup and interface call it makes is audited. The client runs
    /// as one kernel; the returned record carries timing but no event list.
    pub fn run_client<R>(
        &mut self,
        client: impl FnOnce(&mut ClientContext<'_>) -> R,
    ) -> (R, ExecutionRecord) {
        let recording = self.hw.core.config().record_events;
        self.hw.core.set_record_events(false);
        self.hw.core.begin_kernel();
        let out = {
            let mut ctx = ClientContext { sys: self };
            client(&mut ctx)
        };
        let record = self.hw.core.finish_kernel(false);
        self.hw.core.set_record_events(recording);
        (out, record)
    }

    /// Writes a module-owned dataset value as that module.
    pub fn module_dataset_set(
        &mut self,
        module: &str,
        key: &str,
        value: DatasetValue,
    ) -> Result<(), crate::framework::DatasetError> {
        self.datasets.set(module, module, key, value, true)
    }
}

/// Services of a definition ordered so that every in-file dependency is
/// registered first. Deps naming no service in the file are left for the
/// registry to reject.
fn dependency_order(services: &[ServiceNode]) -> Result<Vec<&ServiceNode>, RegistryError> {
    let index: BTreeMap<&str, usize> = services
        .iter()
        .enumerate()
        .map(|(i, s)| (s.name.as_str(), i))
        .collect();
    // 0 unvisited, 1 on the current path, 2 placed
    let mut state = vec![0u8; services.len()];
    let mut order = Vec::with_capacity(services.len());
    fn visit<'a>(
        i: usize,
        services: &'a [ServiceNode],
        index: &BTreeMap<&str, usize>,
        state: &mut [u8],
        path: &mut Vec<usize>,
        order: &mut Vec<&'a ServiceNode>,
    ) -> Result<(), RegistryError> {
        match state[i] {
            2 => return Ok(()),
            1 => {
                let from = path.iter().position(|p| *p == i).unwrap_or(0);
                let mut cycle: Vec<String> =
                    path[from..].iter().map(|p| services[*p].name.clone()).collect();
                cycle.push(services[i].name.clone());
                return Err(RegistryError::DependencyCycle(cycle));
            }
            _ => {}
        }
        state[i] = 1;
        path.push(i);
        for dep in &services[i].service_deps {
            if let Some(&j) = index.get(dep.as_str()) {
                visit(j, services, index, state, path, order)?;
            }
        }
        path.pop();
        state[i] = 2;
        order.push(&services[i]);
        Ok(())
    }
    for i in 0..services.len() {
        visit(i, services, &index, &mut state, &mut Vec::new(), &mut order)?;
    }
    Ok(order)
}

fn bind_operation(
    registry: &Registry,
    specs: &BTreeMap<&str, &DeviceSpec>,
    service: &str,
) -> Result<OpBinding, SystemError> {
    let modules = registry.service_module_closure(service);
    let mut by_role: BTreeMap<DeviceRole, Vec<(&str, &str)>> = BTreeMap::new();
    for m in &modules {
        for dev in &registry.module(m).expect("closure module").claimed_devices {
            let spec = specs[dev.as_str()];
            if let Some(role) = spec.params.role {
                by_role.entry(role).or_default().push((dev.as_str(), m.as_str()));
            }
        }
    }
    let pick = |role: DeviceRole, kind: DeviceKind| -> Result<(String, String), SystemError> {
        let found = by_role.get(&role).map(Vec::as_slice).unwrap_or(&[]);
        match found {
            [(dev, module)] => {
                if specs[dev].kind != kind {
                    return Err(ValidationError::Binding {
                        service: service.to_string(),
                        detail: format!("{role} device {dev} is not a {}", kind.label()),
                    }
                    .into());
                }
                Ok((dev.to_string(), module.to_string()))
            }
            [] => Err(ValidationError::Binding {
                service: service.to_string(),
                detail: format!("no reachable {role} device"),
            }
            .into()),
            _ => Err(ValidationError::Binding {
                service: service.to_string(),
                detail: format!("{} reachable {role} devices", found.len()),
            }
            .into()),
        }
    };
    let (gate_dds, calibration_module) = pick(DeviceRole::GateDds, DeviceKind::Dds)?;
    Ok(OpBinding {
        service: service.to_string(),
        gate_dds,
        gate_switch: pick(DeviceRole::GateSwitch, DeviceKind::Ttl)?.0,
        cool: pick(DeviceRole::Cool, DeviceKind::Ttl)?.0,
        pump: pick(DeviceRole::Pump, DeviceKind::Ttl)?.0,
        detect_laser: pick(DeviceRole::DetectLaser, DeviceKind::Ttl)?.0,
        pmt: pick(DeviceRole::Pmt, DeviceKind::Counter)?.0,
        calibration_module,
    })
}

/// Kernel-side operations of one operation service, plus the hooks the
/// scanning infrastructure needs.
pub struct ScanRig<'a> {
    pub hw: &'a mut Hardware,
    pub binding: &'a OpBinding,
    pub cal: GateCalibration,
}

impl ScanRig<'_> {
    pub fn prepare(&mut self) -> Result<(), DeviceError> {
        self.hw.prepare(self.binding)
    }

    /// Raw drive pulse about `axis` for `duration_mu`.
    pub fn pulse(&mut self, axis: Axis, duration_mu: i64) -> Result<(), DeviceError> {
        if duration_mu <= 0 {
            return Ok(());
        }
        self.hw
            .drive_pulse(self.binding, &self.cal, axis.phase_turns(), duration_mu)
    }

    /// Calibrated rotation by `angle` about `axis`.
    pub fn rotate(&mut self, axis: Axis, angle: f64) -> Result<(), DeviceError> {
        self.pulse(axis, rotation_duration(angle, self.cal.pi_time_mu))
    }

    pub fn wait(&mut self, duration_mu: i64) -> Result<(), DeviceError> {
        self.hw.wait(duration_mu)
    }

    /// Reprograms the drive at its current calibration and `phase_turns`.
    pub fn program(&mut self, phase_turns: f64) -> Result<(), DeviceError> {
        let freq = self.hw.qubit_freq_hz + self.cal.freq_offset_hz;
        self.hw
            .program_drive(self.binding, freq, phase_turns, self.cal.amp_frac)
    }

    pub fn detect(&mut self) -> Result<CountHandle, DeviceError> {
        self.hw.detect(self.binding)
    }
}

impl ScanTarget for ScanRig<'_> {
    fn core(&mut self) -> &mut CoreState {
        &mut self.hw.core
    }

    fn begin_sample(&mut self, point: usize, sample: usize) {
        self.hw.ion.select_stream(&[point as u64, sample as u64]);
    }

    fn classify(&self, count: u64) -> u8 {
        self.hw.classify(count)
    }

    fn scheduled_physical_mu(&self) -> i64 {
        self.hw.physical_mu()
    }
}

/// Pulse length for a rotation by `angle` (any sign) with the given π time.
pub fn rotation_duration(angle: f64, pi_time_mu: i64) -> i64 {
    let a = angle.rem_euclid(2.0 * PI);
    let a = if (2.0 * PI - a) < 1e-12 { 0.0 } else { a };
    (a / PI * pi_time_mu as f64).round() as i64
}

/// What a client may touch: interface lookup and interface handles.
pub struct ClientContext<'a> {
    sys: &'a mut System,
}

impl ClientContext<'_> {
    pub fn find_interface(&mut self, id: &InterfaceId) -> Vec<String> {
        self.sys
            .audit
            .record(Actor::Client, Access::FindInterface(id.clone()));
        self.sys.registry.find_interface(id)
    }

    /// Handles for operation service `op` and data-context service `data`.
    pub fn interfaces(
        &mut self,
        op: &str,
        data: &str,
    ) -> Result<(OperationHandle<'_>, DataContextHandle<'_>), SystemError> {
        let implements = |name: &str, id: InterfaceId| -> Result<(), SystemError> {
            match self.sys.registry.service(name) {
                None => Err(SystemError::UnknownService(name.to_string())),
                Some(s) if !s.interfaces.contains(&id) => Err(SystemError::NotImplemented {
                    service: name.to_string(),
                    interface: id,
                }),
                Some(_) => Ok(()),
            }
        };
        implements(op, InterfaceId::Operation)?;
        implements(data, InterfaceId::DataContext)?;
        let cal = self.sys.gate_calibration(op)?;
        let sys = &mut *self.sys;
        let op_handle = OperationHandle {
            hw: &mut sys.hw,
            binding: &sys.bindings[op],
            cal,
            audit: &sys.audit,
        };
        let dc_handle = DataContextHandle {
            store: sys.data_contexts.get_mut(data).expect("data context store"),
            service: data.to_string(),
            audit: &sys.audit,
        };
        Ok((op_handle, dc_handle))
    }
}

/// An operation service as seen by a client.
pub struct OperationHandle<'a> {
    hw: &'a mut Hardware,
    binding: &'a OpBinding,
    cal: GateCalibration,
    audit: &'a AuditLog,
}

impl OperationHandle<'_> {
    fn log(&self, function: &'static str) {
        self.audit.record(
            Actor::Client,
            Access::InterfaceCall {
                service: self.binding.service.clone(),
                interface: InterfaceId::Operation,
                function,
            },
        );
    }

    fn rotate(&mut self, axis: Axis, angle: f64) -> Result<(), InterfaceError> {
        let d = rotation_duration(angle, self.cal.pi_time_mu);
        if d > 0 {
            self.hw
                .drive_pulse(self.binding, &self.cal, axis.phase_turns(), d)?;
        }
        Ok(())
    }
}

impl OperationInterface for OperationHandle<'_> {
    fn prep_0(&mut self) -> Result<(), InterfaceError> {
        self.log("prep_0");
        self.hw.core.ensure_slack();
        Ok(self.hw.prepare(self.binding)?)
    }

    fn rx(&mut self, angle: f64) -> Result<(), InterfaceError> {
        self.log("rx");
        self.rotate(Axis::X, angle)
    }

    fn ry(&mut self, angle: f64) -> Result<(), InterfaceError> {
        self.log("ry");
        self.rotate(Axis::Y, angle)
    }

    fn measure(&mut self) -> Result<u8, InterfaceError> {
        self.log("measure");
        let handle = self.hw.detect(self.binding)?;
        let count = handle.read(&mut self.hw.core)?;
        Ok(self.hw.classify(count))
    }

    fn num_qubits(&self) -> usize {
        self.log("num_qubits");
        1
    }
}

/// A data-context service as seen by a client.
pub struct DataContextHandle<'a> {
    store: &'a mut DataContextStore,
    service: String,
    audit: &'a AuditLog,
}

impl DataContextHandle<'_> {
    fn log(&self, function: &'static str) {
        self.audit.record(
            Actor::Client,
            Access::InterfaceCall {
                service: self.service.clone(),
                interface: InterfaceId::DataContext,
                function,
            },
        );
    }
}

impl DataContextInterface for DataContextHandle<'_> {
    fn open(&mut self) -> Result<(), InterfaceError> {
        self.log("open");
        if self.store.open.is_some() {
            return Err(InterfaceError::State("data context already open".into()));
        }
        self.store.open = Some([0, 0]);
        Ok(())
    }

    fn push(&mut self, bit: u8) -> Result<(), InterfaceError> {
        self.log("push");
        let Some(h) = self.store.open.as_mut() else {
            return Err(InterfaceError::State("push outside an open data context".into()));
        };
        if bit > 1 {
            return Err(InterfaceError::State(format!("not a bit: {bit}")));
        }
        h[bit as usize] += 1;
        Ok(())
    }

    fn close(&mut self) -> Result<(), InterfaceError> {
        self.log("close");
        let h = self
            .store
            .open
            .take()
            .ok_or_else(|| InterfaceError::State("no open data context".into()))?;
        self.store.closed.push(h);
        Ok(())
    }

    fn histogram(&self) -> Result<[u64; 2], InterfaceError> {
        self.log("histogram");
        self.store
            .closed
            .last()
            .copied()
            .ok_or_else(|| InterfaceError::State("no closed data context".into()))
    }
}

/// A phase-scoped view of the system handed to experiment phase bodies.
/// Devices and datasets are reachable only in the run phase.
pub struct PhaseContext<'a> {
    sys: &'a mut System,
    phase: ExperimentPhase,
}

impl<'a> PhaseContext<'a> {
    pub fn new(sys: &'a mut System, phase: ExperimentPhase) -> Self {
        Self { sys, phase }
    }

    pub fn phase(&self) -> ExperimentPhase {
        self.phase
    }

    pub fn registry(&self) -> &Registry {
        &self.sys.registry
    }

    pub fn definition(&self) -> &SystemDefinition {
        &self.sys.definition
    }

    fn guard(&self, access: Access) -> Result<(), ExperimentError> {
        let label = format!("{access:?}");
        self.sys
            .audit
            .record(Actor::Experiment(self.phase), access);
        if self.phase == ExperimentPhase::Run {
            Ok(())
        } else {
            Err(ExperimentError::PhaseViolation {
                phase: self.phase,
                access: label,
            })
        }
    }

    pub fn dataset_get(
        &self,
        namespace: &str,
        key: &str,
        default: DatasetValue,
    ) -> Result<DatasetValue, ExperimentError> {
        self.guard(Access::DatasetRead(format!("{namespace}.{key}")))?;
        Ok(self.sys.datasets.get(namespace, key, default))
    }

    /// Stores `value` in `module`'s namespace through that module.
    pub fn dataset_set(
        &mut self,
        module: &str,
        key: &str,
        value: DatasetValue,
    ) -> Result<(), ExperimentError> {
        self.guard(Access::DatasetWrite(format!("{module}.{key}")))?;
        if self.sys.registry.module(module).is_none() {
            return Err(RegistryError::UnknownModule(module.to_string()).into());
        }
        self.sys.module_dataset_set(module, key, value)?;
        Ok(())
    }

    /// Direct hardware access.
    pub fn hardware(&mut self, device: &str) -> Result<&mut Hardware, ExperimentError> {
        self.guard(Access::Device(device.to_string()))?;
        Ok(&mut self.sys.hw)
    }

    /// Scan rig for operation service `service`.
    pub fn scan_rig(&mut self, service: &str) -> Result<ScanRig<'_>, ExperimentError> {
        self.guard(Access::Kernel)?;
        self.sys
            .scan_rig(service)
            .map_err(|e| ExperimentError::Other(e.to_string()))
    }

    pub fn run_client<R>(
        &mut self,
        client: impl FnOnce(&mut ClientContext<'_>) -> R,
    ) -> Result<(R, ExecutionRecord), ExperimentError> {
        self.guard(Access::Kernel)?;
        Ok(self.sys.run_client(client))
    }

    pub fn system(&mut self) -> Result<&mut System, ExperimentError> {
        self.guard(Access::Kernel)?;
        Ok(self.sys)
    }
}
