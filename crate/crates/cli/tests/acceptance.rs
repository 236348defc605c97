//! One PASS/FAIL line per acceptance criterion. Run with
//! `cargo test -p qctl --test acceptance -- --nocapture --test-threads 1`
//! to see the lines in order.

use std::time::{Duration, Instant};

use num_complex::Complex64 as C;
use qctl::bench::Scenario;
use qctl::report::{reduction, OverheadReport};
use qctl::{apply_overrides, definition_text, execute, load_system, ExperimentId, RunFiles, RunManifest, BUNDLED};
use qctl_core::devices::DelayMode;
use qctl_core::experiment::{run_scan, HostSink, SampleRecord, ScanAxis, ScanDefinition};
use qctl_core::framework::{InterfaceId, Registry, RegistryError, ServiceNode};
use qctl_core::physics::Axis;
use qctl_core::rb::{direct_rb_client, fit_decay, Gate, RbDesign, SurvivalData};
use qctl_core::system::System;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

fn verdict(name: &str, pass: bool, detail: String, elapsed: Duration, limit: Option<Duration>) {
    let in_time = limit.is_none_or(|l| elapsed <= l);
    let ok = pass && in_time;
    let budget = limit.map(|l| format!(" / {:.0} s", l.as_secs_f64())).unwrap_or_default();
    println!(
        "{} {name}: {detail} [{:.2} s{budget}]",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    assert!(pass, "{name}: {detail}");
    assert!(in_time, "{name}: took {elapsed:?}, limit {limit:?}");
}

fn json(files: &RunFiles, name: &str) -> Value {
    serde_json::from_slice(&files[name]).unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn manifest(system: &str, exp: ExperimentId, seed: u64) -> RunManifest {
    RunManifest::new(system, exp, seed, "unused")
}

fn system_with(name: &str, overrides: &[(&str, String)], seed: u64) -> System {
    let o: Vec<(String, String)> = overrides.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
    System::from_definition(apply_overrides(&definition_text(name).unwrap(), &o).unwrap(), seed).unwrap()
}

// Overhead

fn overhead_report(policy: DelayMode, buffer: usize) -> OverheadReport {
    let mut m = manifest("staq_sim", ExperimentId::OverheadBench, 1);
    m.policy = Some(policy);
    m.buffer = Some(buffer);
    let files = execute(&m).unwrap();
    OverheadReport::from_json(std::str::from_utf8(&files["overhead_report.json"]).unwrap()).unwrap()
}

fn overhead_of(r: &OverheadReport, s: Scenario) -> f64 {
    r.scenarios.iter().find(|x| x.scenario == s).unwrap().overhead
}

#[test]
fn overhead_qualitative_reproduction() {
    let start = Instant::now();
    let worst = overhead_report(DelayMode::WorstCase, 0);
    let tuned = overhead_report(DelayMode::PerFunction, 0);
    let tuned16 = overhead_report(DelayMode::PerFunction, 16);
    let worst16 = overhead_report(DelayMode::WorstCase, 16);
    let short = |r| overhead_of(r, Scenario::Short);
    let cut = reduction(short(&worst), short(&tuned));
    let long_max = [&worst, &tuned, &tuned16, &worst16]
        .iter()
        .map(|r| overhead_of(r, Scenario::Long))
        .fold(0.0, f64::max);
    let pass = cut >= 0.40 && short(&tuned16) < short(&tuned) && long_max < 0.01;
    verdict(
        "overhead qualitative reproduction",
        pass,
        format!(
            "short overhead {:.3} -> {:.3} (reduction {:.1}%, need >= 40%), buffered {:.3}; long max {:.4} (need < 0.01)",
            short(&worst),
            short(&tuned),
            100.0 * cut,
            short(&tuned16),
            long_max
        ),
        start.elapsed(),
        Some(Duration::from_secs(10)),
    );
}

// Buffering transparency

#[derive(Debug, Clone)]
enum Step {
    Rotate(Axis, f64),
    Wait(i64),
}

fn random_body(rng: &mut ChaCha8Rng) -> Vec<Step> {
    (0..rng.random_range(0..4))
        .map(|_| {
            if rng.random_bool(0.7) {
                let axis = if rng.random_bool(0.5) { Axis::X } else { Axis::Y };
                Step::Rotate(axis, rng.random_range(0.0..2.0 * std::f64::consts::PI))
            } else {
                Step::Wait(rng.random_range(0..20_000))
            }
        })
        .collect()
}

fn scan_with_buffer(system: &str, body: &[Step], b: usize, seed: u64) -> (Vec<SampleRecord>, i64) {
    let mut sys = load_system(system, seed).unwrap();
    let op = sys.registry().find_interface(&InterfaceId::Operation)[0].clone();
    let mut rig = sys.scan_rig(&op).unwrap();
    let scan = ScanDefinition::one_d(ScanAxis::linspace("x", 0.0, 1.0, 3), 20, b);
    let sink = HostSink::new();
    let out = run_scan(
        &mut rig,
        &scan,
        |rig, _| {
            rig.prepare()?;
            for s in body {
                match *s {
                    Step::Rotate(axis, angle) => rig.rotate(axis, angle)?,
                    Step::Wait(d) => rig.wait(d)?,
                }
            }
            Ok(rig.detect()?)
        },
        &sink,
    )
    .unwrap();
    (sink.snapshot(), out.record.t_exe_mu)
}

#[test]
fn buffering_transparency() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut violations = Vec::new();
    for case in 0..100 {
        let body = random_body(&mut rng);
        let system = BUNDLED[case % 2];
        let (reference, mut previous) = scan_with_buffer(system, &body, 0, case as u64);
        for b in [1, 4, 16] {
            let (records, t_exe) = scan_with_buffer(system, &body, b, case as u64);
            if records != reference {
                violations.push(format!("case {case} B={b}: records differ"));
            }
            if t_exe > previous {
                violations.push(format!("case {case} B={b}: t_exe {previous} -> {t_exe}"));
            }
            previous = t_exe;
        }
    }
    verdict(
        "buffering transparency",
        violations.is_empty(),
        format!("100 bodies x B in {{0,1,4,16}}, {} violations {:?}", violations.len(), violations.first()),
        start.elapsed(),
        Some(Duration::from_secs(30)),
    );
}

// RB noiseless soundness

type U = [[C; 2]; 2];

fn mul(a: &U, b: &U) -> U {
    let mut m = [[C::new(0.0, 0.0); 2]; 2];
    for (i, row) in m.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    m
}

fn unitary(g: &Gate) -> U {
    let t = g.angle() / 2.0;
    let (c, s) = (C::new(t.cos(), 0.0), t.sin());
    match g.axis {
        Axis::X => [[c, C::new(0.0, -s)], [C::new(0.0, -s), c]],
        Axis::Y => [[c, C::new(-s, 0.0)], [C::new(s, 0.0), c]],
    }
}

#[test]
fn rb_noiseless_soundness() {
    let start = Instant::now();
    let design = RbDesign {
        lengths: (1..=64).collect(),
        circuits_per_length: 157,
        samples_per_circuit: 1,
        seed: 99,
        ..RbDesign::default()
    };
    let circuits = design.lengths.len() * design.circuits_per_length;
    let mut oracle_misses = 0;
    for li in 0..design.lengths.len() {
        for c in 0..design.circuits_per_length {
            let circuit = design.circuit(li, c);
            let id = [[C::new(1.0, 0.0), C::new(0.0, 0.0)], [C::new(0.0, 0.0), C::new(1.0, 0.0)]];
            let u = circuit.gates().fold(id, |acc, g| mul(&unitary(g), &acc));
            let p_target = u[circuit.target_bit as usize][0].norm_sqr();
            if (p_target - 1.0).abs() > 1e-9 {
                oracle_misses += 1;
            }
        }
    }
    let noiseless = [
        ("noise.depol_per_gate", "0.0".to_string()),
        ("noise.prep_error", "0.0".to_string()),
        ("noise.dark_mean", "0.0".to_string()),
        ("noise.bright_mean", "60.0".to_string()),
        ("noise.detect_threshold", "1".to_string()),
    ];
    let mut sim_misses = 0;
    for name in BUNDLED {
        let mut sys = system_with(name, &noiseless, 5);
        let (data, _) = sys.run_client(|ctx| direct_rb_client(ctx, &design));
        sim_misses += data.unwrap().survival.iter().flatten().filter(|s| **s != 1.0).count();
    }
    verdict(
        "RB noiseless soundness",
        oracle_misses == 0 && sim_misses == 0,
        format!("{circuits} circuits, lengths 1..64: {oracle_misses} oracle misses, {sim_misses} simulated misses over both systems"),
        start.elapsed(),
        Some(Duration::from_secs(10)),
    );
}

// RB fit recovery

#[test]
fn rb_fit_recovery() {
    let start = Instant::now();
    let mut lines = Vec::new();
    let mut pass = true;
    for p_dep in [0.02, 0.005, 0.001] {
        let mut hits = 0;
        for rep in 0..20u64 {
            let mut sys = system_with(
                "staq_sim",
                &[
                    ("noise.depol_per_gate", p_dep.to_string()),
                    ("noise.depolarizing", "\"contraction\"".to_string()),
                ],
                1000 + rep,
            );
            let design = RbDesign {
                lengths: vec![1, 2, 4, 8, 16, 32],
                circuits_per_length: 10,
                samples_per_circuit: 100,
                seed: 7000 + rep,
                ..RbDesign::default()
            };
            let (data, _) = sys.run_client(|ctx| direct_rb_client(ctx, &design));
            let fit = fit_decay(&data.unwrap(), 500, rep).unwrap();
            if (fit.p - (1.0 - p_dep)).abs() <= 3.0 * fit.p_std {
                hits += 1;
            }
        }
        pass &= hits >= 19;
        lines.push(format!("p_dep {p_dep}: {hits}/20"));
    }
    verdict(
        "RB fit recovery",
        pass,
        format!("{} (need >= 19/20 within 3 bootstrap sigma)", lines.join(", ")),
        start.elapsed(),
        Some(Duration::from_secs(120)),
    );
}

// Synthetic fit exactness

#[test]
fn synthetic_fit_exactness() {
    let start = Instant::now();
    let lengths: Vec<usize> = vec![1, 2, 4, 8, 16, 32, 64, 128, 256, 512, 1024];
    let survival = lengths
        .iter()
        .map(|m| vec![0.5 + 0.48 * 0.995f64.powi(*m as i32); 10])
        .collect();
    let fit = fit_decay(&SurvivalData { lengths, survival }, 100, 0).unwrap();
    let (db, dp) = ((fit.b - 0.48).abs(), (fit.p - 0.995).abs());
    verdict(
        "synthetic fit exactness",
        db <= 1e-6 && dp <= 1e-6,
        format!("|dB| = {db:.2e}, |dp| = {dp:.2e} (need <= 1e-6)"),
        start.elapsed(),
        None,
    );
}

// Calibration recovery

#[test]
fn calibration_recovery() {
    let start = Instant::now();
    let mut lines = Vec::new();
    let mut pass = true;
    for (name, rabi_hz, pi_key, true_pi) in [
        ("staq_sim", 50_000.0, "datasets.system.mw.pi_time_mu", 10_000.0),
        ("rc_sim", 40_000.0, "datasets.system.mw.source.pi_time_mu", 12_500.0),
    ] {
        let files = execute(&manifest(name, ExperimentId::Rabi, 3)).unwrap();
        let got = json(&files, "calibration.json")["rabi_hz"].as_f64().unwrap();
        let rabi_err = (got / rabi_hz - 1.0).abs();

        let m = manifest(name, ExperimentId::Ramsey, 3).with_override("drive.detuning_hz", "1000.0");
        let got = json(&execute(&m).unwrap(), "calibration.json")["detuning_hz"].as_f64().unwrap();
        let ramsey_err = (got / 1000.0 - 1.0).abs();

        let nominal = (true_pi * 1.01f64).round() as i64;
        let m = manifest(name, ExperimentId::PiTrain, 3).with_override(pi_key, &nominal.to_string());
        let cal = json(&execute(&m).unwrap(), "calibration.json");
        let e = cal["fractional_error"].as_f64().unwrap();
        let expected_e = nominal as f64 / true_pi - 1.0;
        let pi_err = (e / expected_e - 1.0).abs();

        pass &= rabi_err <= 0.02 && ramsey_err <= 0.01 && pi_err <= 0.10;
        lines.push(format!(
            "{name}: rabi {:.2}% (<= 2%), ramsey {:.2}% (<= 1%), pi-train {:.1}% (<= 10%)",
            100.0 * rabi_err,
            100.0 * ramsey_err,
            100.0 * pi_err
        ));
    }
    verdict(
        "calibration recovery",
        pass,
        lines.join("; "),
        start.elapsed(),
        Some(Duration::from_secs(60)),
    );
}

// Portability

#[test]
fn portability() {
    let start = Instant::now();
    let mut lines = Vec::new();
    let mut pass = true;
    for name in BUNDLED {
        let files = execute(&manifest(name, ExperimentId::DirectRb, 7)).unwrap();
        let audit = json(&files, "audit.json");
        let interface_only = audit["interface_only"].as_bool() == Some(true)
            && audit["accesses"].as_array().is_some_and(|a| !a.is_empty());
        let fit = &json(&files, "rb_results.json")["fit"];
        let (p, r, lo, hi) = (
            fit["p"].as_f64().unwrap(),
            fit["r"].as_f64().unwrap(),
            fit["ci_low"].as_f64().unwrap(),
            fit["ci_high"].as_f64().unwrap(),
        );
        let valid = p > 0.0 && p < 1.0 && r.is_finite() && lo <= r && r <= hi && fit["B"].as_f64().is_some();
        pass &= interface_only && valid;
        lines.push(format!("{name}: interface-only {interface_only}, r = {r:.3e} [{lo:.3e}, {hi:.3e}]"));
    }
    verdict("portability", pass, lines.join("; "), start.elapsed(), None);
}

// Framework invariants

fn random_mutation(reg: &mut Registry, rng: &mut ChaCha8Rng) -> Result<(), RegistryError> {
    const NAMES: [&str; 5] = ["a", "b", "c", "d", "e"];
    let modules: Vec<String> = reg.modules().map(|m| m.key.clone()).collect();
    let pick = |rng: &mut ChaCha8Rng| {
        if modules.is_empty() || rng.random_bool(0.05) {
            "ghost".to_string()
        } else {
            modules[rng.random_range(0..modules.len())].clone()
        }
    };
    match rng.random_range(0..4) {
        0 => {
            let parent = if rng.random_bool(0.1) { None } else { Some(pick(rng)) };
            reg.add_module(parent.as_deref(), NAMES[rng.random_range(0..NAMES.len())]).map(|_| ())
        }
        1 => reg.declare_device(&format!("dev{}", rng.random_range(0..8))),
        2 => {
            let m = pick(rng);
            reg.claim_device(&m, &format!("dev{}", rng.random_range(0..8)))
        }
        _ => {
            let deps: Vec<String> = (0..rng.random_range(0..3)).map(|_| format!("s{}", rng.random_range(0..8))).collect();
            let mods: Vec<String> = (0..rng.random_range(0..2)).map(|_| pick(rng)).collect();
            let mut s = ServiceNode::new(format!("s{}", rng.random_range(0..8))).service_deps(deps).module_deps(mods);
            if rng.random_bool(0.5) {
                s = s.implements([InterfaceId::Operation]);
            }
            reg.add_service(s)
        }
    }
}

#[test]
fn framework_invariants() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (mut ok, mut rejected, mut violations) = (0usize, 0usize, Vec::new());
    for case in 0..1000 {
        let mut reg = Registry::new();
        for _ in 0..rng.random_range(1..80) {
            let before = reg.clone();
            match random_mutation(&mut reg, &mut rng) {
                Ok(()) => ok += 1,
                Err(e) => {
                    rejected += 1;
                    if reg != before {
                        violations.push(format!("case {case}: failed mutation {e} changed state"));
                    }
                }
            }
            if let Err(e) = reg.check_invariants() {
                violations.push(format!("case {case}: {e}"));
            }
        }
        for (dev, owner) in reg.device_claims() {
            if reg.modules().filter(|m| m.claimed_devices.contains(dev)).count() != 1 || reg.device_owner(dev) != Some(owner) {
                violations.push(format!("case {case}: {dev} not exclusive"));
            }
        }
        if reg.modules().filter(|m| m.parent.is_none()).count() > 1 || reg.topological_order().is_none() {
            violations.push(format!("case {case}: tree or DAG broken"));
        }
    }
    verdict(
        "framework invariants",
        violations.is_empty(),
        format!("1000 registries, {ok} accepted and {rejected} rejected mutations, {} violations {:?}", violations.len(), violations.first()),
        start.elapsed(),
        None,
    );
}

// Determinism

#[test]
fn determinism() {
    let start = Instant::now();
    let mut runs = 0;
    let mut mismatches = Vec::new();
    for name in BUNDLED {
        for (exp, overrides) in [
            (ExperimentId::Rabi, vec![]),
            (ExperimentId::Ramsey, vec![("exp.samples", "50")]),
            (ExperimentId::PiTrain, vec![("exp.samples", "100")]),
            (ExperimentId::DirectRb, vec![("exp.lengths", "[1, 4, 16, 64]"), ("exp.replicates", "200")]),
            (ExperimentId::OverheadBench, vec![]),
        ] {
            let m = overrides
                .iter()
                .fold(manifest(name, exp, 11), |m, (k, v)| m.with_override(k, v));
            let a = execute(&m).unwrap();
            let b = execute(&m).unwrap();
            runs += 1;
            if a != b {
                let differing: Vec<_> = a.keys().filter(|k| a.get(*k) != b.get(*k)).cloned().collect();
                mismatches.push(format!("{name}/{}: {differing:?}", exp.label()));
            }
        }
    }
    verdict(
        "determinism",
        mismatches.is_empty(),
        format!("{runs} manifests re-run, {} with differing files {:?}", mismatches.len(), mismatches),
        start.elapsed(),
        None,
    );
}
