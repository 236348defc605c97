//! System organization: the module tree, the service DAG, the registry that
//! indexes both, per-node datasets, and the standard interfaces clients use.
//!
//! Modules own devices and form a tree rooted at the system module; keys are
//! dotted paths (`system.mw`). A device belongs to exactly one module, so
//! modules in disjoint subtrees never share hardware. Services compose
//! modules and other services and must form a DAG. Every mutation of the
//! registry is transactional: a failed call leaves it untouched.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use indexmap::IndexMap;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::devices::DeviceError;
use crate::experiment::ExperimentPhase;
use crate::rtio::RtioError;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "String", into = "String")]
pub enum InterfaceId {
    Operation,
    DataContext,
    Other(String),
}

impl From<String> for InterfaceId {
    fn from(s: String) -> Self {
        match s.as_str() {
            "operation" => InterfaceId::Operation,
            "data_context" => InterfaceId::DataContext,
            _ => InterfaceId::Other(s),
        }
    }
}

impl From<InterfaceId> for String {
    fn from(id: InterfaceId) -> Self {
        id.to_string()
    }
}

impl fmt::Display for InterfaceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InterfaceId::Operation => f.write_str("operation"),
            InterfaceId::DataContext => f.write_str("data_context"),
            InterfaceId::Other(s) => f.write_str(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleNode {
    pub key: String,
    pub parent: Option<String>,
    pub children: BTreeSet<String>,
    pub claimed_devices: BTreeSet<String>,
}

impl ModuleNode {
    pub fn dataset_ns(&self) -> &str {
        &self.key
    }

    pub fn name(&self) -> &str {
        self.key.rsplit('.').next().unwrap_or(&self.key)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceNode {
    pub name: String,
    #[serde(default)]
    pub service_deps: BTreeSet<String>,
    #[serde(default)]
    pub module_deps: BTreeSet<String>,
    #[serde(default)]
    pub interfaces: BTreeSet<InterfaceId>,
}

impl ServiceNode {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            ..Self::default()
        }
    }

    pub fn service_deps<I: IntoIterator<Item = S>, S: Into<String>>(mut self, deps: I) -> Self {
        self.service_deps = deps.into_iter().map(Into::into).collect();
        self
    }

    pub fn module_deps<I: IntoIterator<Item = S>, S: Into<String>>(mut self, deps: I) -> Self {
        self.module_deps = deps.into_iter().map(Into::into).collect();
        self
    }

    pub fn implements<I: IntoIterator<Item = InterfaceId>>(mut self, ids: I) -> Self {
        self.interfaces = ids.into_iter().collect();
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RegistryError {
    #[error("key {0} already registered")]
    DuplicateKey(String),
    #[error("parent module {0} does not exist")]
    MissingParent(String),
    #[error("a root module ({0}) already exists")]
    SecondRoot(String),
    #[error("invalid module name {0:?}")]
    InvalidName(String),
    #[error("module {0} does not exist")]
    UnknownModule(String),
    #[error("device {device} already claimed by {owner}")]
    DeviceAlreadyClaimed { device: String, owner: String },
    #[error("device {0} is not declared")]
    UnknownDevice(String),
    #[error("device {0} declared twice")]
    DuplicateDevice(String),
    #[error("service dependency cycle: {}", .0.join(" -> "))]
    DependencyCycle(Vec<String>),
    #[error("service {0} already registered")]
    DuplicateService(String),
    #[error("dependency {0} does not exist")]
    MissingDependency(String),
    #[error("unknown key {0}")]
    UnknownKey(String),
    #[error("registry is sealed")]
    Sealed,
}

/// Central index of modules, services, device claims, and interfaces.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Registry {
    modules: IndexMap<String, ModuleNode>,
    services: IndexMap<String, ServiceNode>,
    declared_devices: BTreeSet<String>,
    device_claims: BTreeMap<String, String>,
    interface_index: BTreeMap<InterfaceId, Vec<String>>,
    root: Option<String>,
    sealed: bool,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    fn check_open(&self) -> Result<(), RegistryError> {
        if self.sealed {
            Err(RegistryError::Sealed)
        } else {
            Ok(())
        }
    }

    /// Makes the registry immutable.
    pub fn seal(&mut self) {
        self.sealed = true;
    }

    pub fn is_sealed(&self) -> bool {
        self.sealed
    }

    pub fn declare_device(&mut self, key: &str) -> Result<(), RegistryError> {
        self.check_open()?;
        if key.is_empty() {
            return Err(RegistryError::InvalidName(key.to_string()));
        }
        if !self.declared_devices.insert(key.to_string()) {
            return Err(RegistryError::DuplicateDevice(key.to_string()));
        }
        Ok(())
    }

    pub fn add_module(&mut self, parent: Option<&str>, name: &str) -> Result<String, RegistryError> {
        self.check_open()?;
        if name.is_empty() || name.contains('.') || name.chars().any(char::is_whitespace) {
            return Err(RegistryError::InvalidName(name.to_string()));
        }
        let key = match parent {
            None => {
                if let Some(root) = &self.root {
                    return Err(RegistryError::SecondRoot(root.clone()));
                }
                name.to_string()
            }
            Some(p) => {
                if !self.modules.contains_key(p) {
                    return Err(RegistryError::MissingParent(p.to_string()));
                }
                format!("{p}.{name}")
            }
        };
        if self.modules.contains_key(&key) || self.services.contains_key(&key) {
            return Err(RegistryError::DuplicateKey(key));
        }
        self.modules.insert(
            key.clone(),
            ModuleNode {
                key: key.clone(),
                parent: parent.map(str::to_string),
                children: BTreeSet::new(),
                claimed_devices: BTreeSet::new(),
            },
        );
        match parent {
            None => self.root = Some(key.clone()),
            Some(p) => {
                self.modules[p].children.insert(key.clone());
            }
        }
        Ok(key)
    }

    pub fn claim_device(&mut self, module: &str, device: &str) -> Result<(), RegistryError> {
        self.check_open()?;
        if !self.modules.contains_key(module) {
            return Err(RegistryError::UnknownModule(module.to_string()));
        }
        if !self.declared_devices.contains(device) {
            return Err(RegistryError::UnknownDevice(device.to_string()));
        }
        if let Some(owner) = self.device_claims.get(device) {
            return Err(RegistryError::DeviceAlreadyClaimed {
                device: device.to_string(),
                owner: owner.clone(),
            });
        }
        self.device_claims
            .insert(device.to_string(), module.to_string());
        self.modules[module]
            .claimed_devices
            .insert(device.to_string());
        Ok(())
    }

    /// Registers `service`. Re-registering an existing name is rejected, with
    /// a cycle reported in preference to the duplicate.
    pub fn add_service(&mut self, service: ServiceNode) -> Result<(), RegistryError> {
        self.check_open()?;
        let name = &service.name;
        if name.is_empty() || name.contains('.') {
            return Err(RegistryError::InvalidName(name.clone()));
        }
        if self.modules.contains_key(name) {
            return Err(RegistryError::DuplicateKey(name.clone()));
        }
        for dep in &service.service_deps {
            if !self.services.contains_key(dep) {
                return Err(RegistryError::MissingDependency(dep.clone()));
            }
        }
        for dep in &service.module_deps {
            if !self.modules.contains_key(dep) {
                return Err(RegistryError::MissingDependency(dep.clone()));
            }
        }
        if let Some(cycle) = self.cycle_through(&service) {
            return Err(RegistryError::DependencyCycle(cycle));
        }
        if self.services.contains_key(name) {
            return Err(RegistryError::DuplicateService(name.clone()));
        }
        for id in &service.interfaces {
            self.interface_index
                .entry(id.clone())
                .or_default()
                .push(name.clone());
        }
        self.services.insert(name.clone(), service);
        Ok(())
    }

    /// A dependency path from `candidate` back to itself, if registering it
    /// would close one.
    fn cycle_through(&self, candidate: &ServiceNode) -> Option<Vec<String>> {
        let start = candidate.name.as_str();
        let deps_of = |n: &str| -> Vec<String> {
            if n == start {
                candidate.service_deps.iter().cloned().collect()
            } else {
                self.services
                    .get(n)
                    .map(|s| s.service_deps.iter().cloned().collect())
                    .unwrap_or_default()
            }
        };
        // Iterative DFS keeping the current path.
        let mut path = vec![start.to_string()];
        let mut stack: Vec<std::vec::IntoIter<String>> = vec![deps_of(start).into_iter()];
        let mut done: BTreeSet<String> = BTreeSet::new();
        while let Some(iter) = stack.last_mut() {
            match iter.next() {
                Some(next) => {
                    if next == start {
                        path.push(next);
                        return Some(path);
                    }
                    if done.contains(&next) || path.contains(&next) {
                        continue;
                    }
                    stack.push(deps_of(&next).into_iter());
                    path.push(next);
                }
                None => {
                    stack.pop();
                    if let Some(n) = path.pop() {
                        done.insert(n);
                    }
                }
            }
        }
        None
    }

    fn contains_key(&self, key: &str) -> bool {
        self.modules.contains_key(key) || self.services.contains_key(key)
    }

    /// True iff neither key lies in the other's subtree.
    pub fn are_independent(&self, a: &str, b: &str) -> Result<bool, RegistryError> {
        for k in [a, b] {
            if !self.contains_key(k) {
                return Err(RegistryError::UnknownKey(k.to_string()));
            }
        }
        Ok(!is_prefix_key(a, b) && !is_prefix_key(b, a))
    }

    /// Services implementing `id`, in registration order.
    pub fn find_interface(&self, id: &InterfaceId) -> Vec<String> {
        self.interface_index.get(id).cloned().unwrap_or_default()
    }

    pub fn root(&self) -> Option<&str> {
        self.root.as_deref()
    }

    pub fn module(&self, key: &str) -> Option<&ModuleNode> {
        self.modules.get(key)
    }

    pub fn service(&self, name: &str) -> Option<&ServiceNode> {
        self.services.get(name)
    }

    pub fn modules(&self) -> impl Iterator<Item = &ModuleNode> {
        self.modules.values()
    }

    pub fn services(&self) -> impl Iterator<Item = &ServiceNode> {
        self.services.values()
    }

    pub fn declared_devices(&self) -> &BTreeSet<String> {
        &self.declared_devices
    }

    pub fn device_owner(&self, device: &str) -> Option<&str> {
        self.device_claims.get(device).map(String::as_str)
    }

    pub fn device_claims(&self) -> &BTreeMap<String, String> {
        &self.device_claims
    }

    /// Devices claimed anywhere in the subtree rooted at `key`.
    pub fn subtree_devices(&self, key: &str) -> BTreeSet<String> {
        self.modules
            .values()
            .filter(|m| is_prefix_key(key, &m.key))
            .flat_map(|m| m.claimed_devices.iter().cloned())
            .collect()
    }

    /// Modules reachable from `service` through module and service deps.
    pub fn service_module_closure(&self, service: &str) -> BTreeSet<String> {
        let mut seen = BTreeSet::new();
        let mut modules = BTreeSet::new();
        let mut todo = vec![service.to_string()];
        while let Some(s) = todo.pop() {
            if !seen.insert(s.clone()) {
                continue;
            }
            if let Some(node) = self.services.get(&s) {
                modules.extend(node.module_deps.iter().cloned());
                todo.extend(node.service_deps.iter().cloned());
            }
        }
        modules
    }

    /// Dependencies before dependents; ties in registration order.
    pub fn topological_order(&self) -> Option<Vec<String>> {
        let mut order = Vec::with_capacity(self.services.len());
        let mut placed: BTreeSet<&str> = BTreeSet::new();
        while order.len() < self.services.len() {
            let next = self.services.values().find(|s| {
                !placed.contains(s.name.as_str())
                    && s.service_deps.iter().all(|d| placed.contains(d.as_str()))
            })?;
            placed.insert(&next.name);
            order.push(next.name.clone());
        }
        Some(order)
    }

    /// Checks every structural invariant; returns the first violation.
    pub fn check_invariants(&self) -> Result<(), String> {
        let roots: Vec<_> = self.modules.values().filter(|m| m.parent.is_none()).collect();
        if roots.len() > 1 {
            return Err(format!("{} roots", roots.len()));
        }
        for m in self.modules.values() {
            if let Some(p) = &m.parent {
                let expected = format!("{p}.{}", m.name());
                if m.key != expected || !self.modules.contains_key(p) {
                    return Err(format!("module {} has inconsistent parent {p}", m.key));
                }
                if !self.modules[p.as_str()].children.contains(&m.key) {
                    return Err(format!("{p} does not list child {}", m.key));
                }
            }
            for d in &m.claimed_devices {
                if self.device_claims.get(d) != Some(&m.key) {
                    return Err(format!("claim of {d} by {} not indexed", m.key));
                }
            }
        }
        for (d, owner) in &self.device_claims {
            let Some(m) = self.modules.get(owner) else {
                return Err(format!("{d} claimed by missing module {owner}"));
            };
            if !m.claimed_devices.contains(d) {
                return Err(format!("{d} claim not recorded on {owner}"));
            }
            let holders = self
                .modules
                .values()
                .filter(|m| m.claimed_devices.contains(d))
                .count();
            if holders != 1 {
                return Err(format!("{d} held by {holders} modules"));
            }
        }
        if self.topological_order().is_none() {
            return Err("service graph has a cycle".into());
        }
        for (id, names) in &self.interface_index {
            for n in names {
                if !self.services.get(n).is_some_and(|s| s.interfaces.contains(id)) {
                    return Err(format!("interface index lists {n} for {id}"));
                }
            }
        }
        Ok(())
    }
}

/// `prefix` equals `key` or is a dotted ancestor of it.
pub fn is_prefix_key(prefix: &str, key: &str) -> bool {
    key == prefix
        || (key.len() > prefix.len()
            && key.starts_with(prefix)
            && key.as_bytes()[prefix.len()] == b'.')
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DatasetValue {
    Int(i64),
    Real(f64),
    Text(String),
    RealList(Vec<f64>),
}

impl DatasetValue {
    pub fn type_name(&self) -> &'static str {
        match self {
            DatasetValue::Int(_) => "integer",
            DatasetValue::Real(_) => "real",
            DatasetValue::Text(_) => "string",
            DatasetValue::RealList(_) => "list of reals",
        }
    }

    pub fn as_i64(&self) -> Option<i64> {
        match self {
            DatasetValue::Int(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            DatasetValue::Real(v) => Some(*v),
            DatasetValue::Int(v) => Some(*v as f64),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DatasetError {
    #[error("{writer} may not write into namespace {namespace}")]
    NamespaceViolation { writer: String, namespace: String },
    #[error("{key} holds a {stored}, refusing to store a {offered}")]
    TypeMismatch {
        key: String,
        stored: &'static str,
        offered: &'static str,
    },
    #[error("invalid dataset key {0:?}")]
    InvalidKey(String),
    #[error("dataset persistence failed: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq)]
struct DatasetEntry {
    value: DatasetValue,
    persist: bool,
}

/// Namespaced key-value storage; each namespace is writable only by the
/// node that owns it.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetStore {
    entries: BTreeMap<String, DatasetEntry>,
}

impl DatasetStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn full_key(namespace: &str, key: &str) -> Result<String, DatasetError> {
        if key.is_empty() || key.contains('.') || namespace.is_empty() {
            return Err(DatasetError::InvalidKey(format!("{namespace}.{key}")));
        }
        Ok(format!("{namespace}.{key}"))
    }

    pub fn set(
        &mut self,
        writer: &str,
        namespace: &str,
        key: &str,
        value: DatasetValue,
        persist: bool,
    ) -> Result<(), DatasetError> {
        if writer != namespace {
            return Err(DatasetError::NamespaceViolation {
                writer: writer.to_string(),
                namespace: namespace.to_string(),
            });
        }
        let full = Self::full_key(namespace, key)?;
        if let Some(old) = self.entries.get(&full) {
            if std::mem::discriminant(&old.value) != std::mem::discriminant(&value) {
                return Err(DatasetError::TypeMismatch {
                    key: full,
                    stored: old.value.type_name(),
                    offered: value.type_name(),
                });
            }
        }
        self.entries.insert(full, DatasetEntry { value, persist });
        Ok(())
    }

    pub fn get(&self, namespace: &str, key: &str, default: DatasetValue) -> DatasetValue {
        self.lookup(namespace, key).cloned().unwrap_or(default)
    }

    pub fn lookup(&self, namespace: &str, key: &str) -> Option<&DatasetValue> {
        self.entries
            .get(&format!("{namespace}.{key}"))
            .map(|e| &e.value)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Persisted entries as `{"namespace.key": value}`.
    pub fn to_json(&self) -> String {
        let map: BTreeMap<&str, &DatasetValue> = self
            .entries
            .iter()
            .filter(|(_, e)| e.persist)
            .map(|(k, e)| (k.as_str(), &e.value))
            .collect();
        serde_json::to_string_pretty(&map).expect("dataset values serialize")
    }

    /// Loads persisted entries; keys split at the last dot.
    pub fn from_json(text: &str) -> Result<Self, DatasetError> {
        let map: BTreeMap<String, DatasetValue> =
            serde_json::from_str(text).map_err(|e| DatasetError::Io(e.to_string()))?;
        let mut store = Self::new();
        for (full, value) in map {
            let Some((ns, key)) = full.rsplit_once('.') else {
                return Err(DatasetError::InvalidKey(full));
            };
            store.set(ns, ns, key, value, true)?;
        }
        Ok(store)
    }

    /// Writes the persistence file via a temporary file and rename.
    pub fn save_atomic(&self, path: &Path) -> Result<(), DatasetError> {
        use std::io::Write;
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let mut tmp =
            tempfile::NamedTempFile::new_in(dir).map_err(|e| DatasetError::Io(e.to_string()))?;
        tmp.write_all(self.to_json().as_bytes())
            .and_then(|_| tmp.write_all(b"\n"))
            .map_err(|e| DatasetError::Io(e.to_string()))?;
        tmp.persist(path)
            .map_err(|e| DatasetError::Io(e.error.to_string()))?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum InterfaceError {
    #[error(transparent)]
    Device(#[from] DeviceError),
    #[error("{0}")]
    State(String),
}

impl From<RtioError> for InterfaceError {
    fn from(e: RtioError) -> Self {
        InterfaceError::Device(DeviceError::Rtio(e))
    }
}

/// Gate-level control of the qubits.
pub trait OperationInterface {
    fn prep_0(&mut self) -> Result<(), InterfaceError>;
    fn rx(&mut self, angle: f64) -> Result<(), InterfaceError>;
    fn ry(&mut self, angle: f64) -> Result<(), InterfaceError>;
    /// Measured bit: 1 for the bright (excited) state.
    fn measure(&mut self) -> Result<u8, InterfaceError>;
    fn num_qubits(&self) -> usize;
}

/// Collection of measurement results into contexts.
pub trait DataContextInterface {
    fn open(&mut self) -> Result<(), InterfaceError>;
    fn push(&mut self, bit: u8) -> Result<(), InterfaceError>;
    fn close(&mut self) -> Result<(), InterfaceError>;
    /// Counts per outcome (index 0 and 1) of the most recently closed context.
    fn histogram(&self) -> Result<[u64; 2], InterfaceError>;
}

/// Who performed an audited access.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Actor {
    Client,
    Service(String),
    Experiment(ExperimentPhase),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Access {
    FindInterface(InterfaceId),
    InterfaceCall {
        service: String,
        interface: InterfaceId,
        function: &'static str,
    },
    Device(String),
    Registry(&'static str),
    DatasetRead(String),
    DatasetWrite(String),
    Kernel,
}

impl Access {
    pub fn is_interface_only(&self) -> bool {
        matches!(self, Access::FindInterface(_) | Access::InterfaceCall { .. })
    }
}

/// Shared, thread-safe tally of accesses by (actor, access).
#[derive(Debug, Clone, Default)]
pub struct AuditLog {
    counts: Arc<Mutex<BTreeMap<(Actor, Access), u64>>>,
}

impl AuditLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, actor: Actor, access: Access) {
        *self.counts.lock().entry((actor, access)).or_insert(0) += 1;
    }

    pub fn entries(&self) -> Vec<(Actor, Access, u64)> {
        self.counts
            .lock()
            .iter()
            .map(|((a, x), n)| (a.clone(), x.clone(), *n))
            .collect()
    }

    pub fn by_actor(&self, actor: &Actor) -> Vec<(Access, u64)> {
        self.counts
            .lock()
            .iter()
            .filter(|((a, _), _)| a == actor)
            .map(|((_, x), n)| (x.clone(), *n))
            .collect()
    }

    /// Accesses by the client other than interface lookups and calls.
    pub fn client_violations(&self) -> Vec<Access> {
        self.by_actor(&Actor::Client)
            .into_iter()
            .filter(|(a, _)| !a.is_interface_only())
            .map(|(a, _)| a)
            .collect()
    }

    pub fn clear(&self) {
        self.counts.lock().clear();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reg() -> Registry {
        let mut r = Registry::new();
        for d in ["dds0", "ttl0", "pmt0"] {
            r.declare_device(d).unwrap();
        }
        r.add_module(None, "system").unwrap();
        r
    }

    #[test]
    fn add_modules() {
        let mut r = reg();
        assert_eq!(r.add_module(Some("system"), "cw").unwrap(), "system.cw");
        assert_eq!(
            r.add_module(Some("system"), "cw"),
            Err(RegistryError::DuplicateKey("system.cw".into()))
        );
        assert_eq!(
            r.add_module(Some("ghost"), "x"),
            Err(RegistryError::MissingParent("ghost".into()))
        );
        assert_eq!(
            r.add_module(None, "other"),
            Err(RegistryError::SecondRoot("system".into()))
        );
        assert!(matches!(
            r.add_module(Some("system"), "a.b"),
            Err(RegistryError::InvalidName(_))
        ));
        assert!(r.module("system").unwrap().children.contains("system.cw"));
    }

    #[test]
    fn device_exclusivity() {
        let mut r = reg();
        r.add_module(Some("system"), "mw").unwrap();
        r.add_module(Some("system"), "cw").unwrap();
        r.claim_device("system.mw", "dds0").unwrap();
        assert_eq!(
            r.claim_device("system.cw", "dds0"),
            Err(RegistryError::DeviceAlreadyClaimed {
                device: "dds0".into(),
                owner: "system.mw".into()
            })
        );
        assert_eq!(
            r.claim_device("system.cw", "dds9"),
            Err(RegistryError::UnknownDevice("dds9".into()))
        );
    }

    #[test]
    fn service_dependencies_and_cycles() {
        let mut r = reg();
        r.add_service(ServiceNode::new("A")).unwrap();
        r.add_service(ServiceNode::new("B").service_deps(["A"])).unwrap();
        r.add_service(ServiceNode::new("C").service_deps(["B"])).unwrap();
        let before = r.clone();
        assert_eq!(
            r.add_service(ServiceNode::new("A").service_deps(["C"])),
            Err(RegistryError::DependencyCycle(
                ["A", "C", "B", "A"].map(String::from).to_vec()
            ))
        );
        assert_eq!(r, before);
        assert_eq!(
            r.add_service(ServiceNode::new("D").service_deps(["unknown"])),
            Err(RegistryError::MissingDependency("unknown".into()))
        );
        assert_eq!(
            r.add_service(ServiceNode::new("B")),
            Err(RegistryError::DuplicateService("B".into()))
        );
        assert_eq!(r.topological_order().unwrap(), vec!["A", "B", "C"]);
    }

    #[test]
    fn independence_is_subtree_disjointness() {
        let mut r = reg();
        r.add_module(Some("system"), "cw").unwrap();
        r.add_module(Some("system"), "pmt").unwrap();
        r.add_module(Some("system"), "cwx").unwrap();
        assert!(r.are_independent("system.cw", "system.pmt").unwrap());
        assert!(!r.are_independent("system", "system.cw").unwrap());
        assert!(!r.are_independent("system.cw", "system.cw").unwrap());
        // a string prefix that is not a dotted prefix
        assert!(r.are_independent("system.cw", "system.cwx").unwrap());
        assert_eq!(
            r.are_independent("system.cw", "nope"),
            Err(RegistryError::UnknownKey("nope".into()))
        );
    }

    #[test]
    fn interface_lookup() {
        let mut r = reg();
        r.add_module(Some("system"), "mw").unwrap();
        r.add_service(
            ServiceNode::new("mw_op")
                .module_deps(["system.mw"])
                .implements([InterfaceId::Operation]),
        )
        .unwrap();
        assert_eq!(r.find_interface(&InterfaceId::Operation), vec!["mw_op"]);
        assert!(r
            .find_interface(&InterfaceId::Other("gst".into()))
            .is_empty());
        assert!(r.find_interface(&InterfaceId::DataContext).is_empty());
    }

    #[test]
    fn sealed_registry_rejects_mutation() {
        let mut r = reg();
        r.seal();
        assert_eq!(r.add_module(Some("system"), "x"), Err(RegistryError::Sealed));
        assert_eq!(
            r.add_service(ServiceNode::new("s")),
            Err(RegistryError::Sealed)
        );
    }

    #[test]
    fn interface_id_strings() {
        let id: InterfaceId = "operation".to_string().into();
        assert_eq!(id, InterfaceId::Operation);
        assert_eq!(InterfaceId::DataContext.to_string(), "data_context");
        assert_eq!(
            serde_json::to_string(&InterfaceId::Other("gst".into())).unwrap(),
            "\"gst\""
        );
    }

    #[test]
    fn dataset_set_get() {
        let mut s = DatasetStore::new();
        s.set("system.mw", "system.mw", "pi_time_mu", DatasetValue::Int(31_250), true)
            .unwrap();
        assert_eq!(
            s.get("system.mw", "pi_time_mu", DatasetValue::Int(0)),
            DatasetValue::Int(31_250)
        );
        let before = s.clone();
        assert_eq!(
            s.get("system.mw", "missing", DatasetValue::Int(0)),
            DatasetValue::Int(0)
        );
        assert_eq!(s, before);
        assert!(matches!(
            s.set("mw_op", "system.mw", "x", DatasetValue::Int(1), true),
            Err(DatasetError::NamespaceViolation { .. })
        ));
        assert!(matches!(
            s.set("system.mw", "system.mw", "pi_time_mu", DatasetValue::Real(1.0), true),
            Err(DatasetError::TypeMismatch { .. })
        ));
    }

    #[test]
    fn dataset_persistence_roundtrip() {
        let mut s = DatasetStore::new();
        s.set("system.mw", "system.mw", "pi_time_mu", DatasetValue::Int(10_000), true)
            .unwrap();
        s.set("system.mw", "system.mw", "scratch", DatasetValue::Real(0.5), false)
            .unwrap();
        s.set(
            "system.ion",
            "system.ion",
            "freqs",
            DatasetValue::RealList(vec![1.0, 2.5]),
            true,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("datasets.json");
        s.save_atomic(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(!text.contains("scratch"));
        let back = DatasetStore::from_json(&text).unwrap();
        assert_eq!(back.lookup("system.mw", "pi_time_mu"), Some(&DatasetValue::Int(10_000)));
        assert_eq!(
            back.lookup("system.ion", "freqs"),
            Some(&DatasetValue::RealList(vec![1.0, 2.5]))
        );
        assert_eq!(back.len(), 2);
    }

    #[test]
    fn audit_flags_non_interface_client_access() {
        let log = AuditLog::new();
        log.record(Actor::Client, Access::FindInterface(InterfaceId::Operation));
        assert!(log.client_violations().is_empty());
        log.record(Actor::Client, Access::Device("dds0".into()));
        assert_eq!(log.client_violations(), vec![Access::Device("dds0".into())]);
    }
}
