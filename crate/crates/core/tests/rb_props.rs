use num_complex::Complex64 as C;
use proptest::prelude::*;
use qctl_core::physics::Axis;
use qctl_core::rb::{
    direct_rb_client, fit_decay, pi_train_calibration, rabi_scan, ramsey_scan, sample_circuit,
    CliffordFrame, Gate, InversionTable, Omega, PiTrainConfig, RabiScanConfig, RamseyConfig,
    RbDesign, RbError,
};
use qctl_core::fit::FitError;
use qctl_core::system::System;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type U = [[C; 2]; 2];

fn mul(a: &U, b: &U) -> U {
    let mut m = [[C::new(0.0, 0.0); 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            m[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    m
}

fn dagger(a: &U) -> U {
    [[a[0][0].conj(), a[1][0].conj()], [a[0][1].conj(), a[1][1].conj()]]
}

fn pauli() -> [U; 3] {
    let (o, z, i) = (C::new(1.0, 0.0), C::new(0.0, 0.0), C::new(0.0, 1.0));
    [[[z, o], [o, z]], [[z, -i], [i, z]], [[o, z], [z, -o]]]
}

/// exp(-iθσ/2) for the gate's axis.
fn unitary(g: &Gate) -> U {
    let t = g.angle() / 2.0;
    let (c, s) = (C::new(t.cos(), 0.0), t.sin());
    match g.axis {
        Axis::X => [[c, C::new(0.0, -s)], [C::new(0.0, -s), c]],
        Axis::Y => [[c, C::new(-s, 0.0)], [C::new(s, 0.0), c]],
    }
}

/// Bloch-sphere action R_ij = Tr(σ_i U σ_j U†) / 2.
fn bloch_action(u: &U) -> [[f64; 3]; 3] {
    let p = pauli();
    let mut r = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let m = mul(&mul(&p[i], u), &mul(&p[j], &dagger(u)));
            r[i][j] = (m[0][0] + m[1][1]).re / 2.0;
        }
    }
    r
}

fn word_unitary(word: &[Gate]) -> U {
    let id = [[C::new(1.0, 0.0), C::new(0.0, 0.0)], [C::new(0.0, 0.0), C::new(1.0, 0.0)]];
    word.iter().fold(id, |acc, g| mul(&unitary(g), &acc))
}

fn frame_matches(f: &CliffordFrame, r: &[[f64; 3]; 3]) -> bool {
    (0..3).all(|i| (0..3).all(|j| (f.0[i][j] as f64 - r[i][j]).abs() < 1e-9))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn frames_match_unitary_oracle(m in 1usize..=64, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = sample_circuit(m, &Omega::default(), &mut rng);
        prop_assert!(c.inversion.len() <= 3);
        let core = bloch_action(&word_unitary(&c.core));
        prop_assert!(frame_matches(&c.core_frame(), &core));
        let all: Vec<Gate> = c.gates().copied().collect();
        let net = word_unitary(&all);
        let target = if c.target_bit == 1 { CliffordFrame::X_PI } else { CliffordFrame::IDENTITY };
        prop_assert!(frame_matches(&target, &bloch_action(&net)));
        // |0> lands on |target> up to global phase
        let amp = net[c.target_bit as usize][0].norm();
        prop_assert!((amp - 1.0).abs() < 1e-9);
    }
}

#[test]
fn every_table_word_realises_its_frame() {
    let table = InversionTable::shared();
    assert_eq!(table.len(), 24);
    for (f, w) in table.elements() {
        assert!(frame_matches(f, &bloch_action(&word_unitary(w))));
    }
}

#[test]
fn targets_are_balanced() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 20_000;
    let ones: usize = (0..n)
        .map(|_| sample_circuit(8, &Omega::default(), &mut rng).target_bit as usize)
        .sum();
    let sigma = (n as f64 * 0.25).sqrt();
    assert!((ones as f64 - n as f64 / 2.0).abs() < 3.0 * sigma, "{ones} of {n}");
}

const MINI: &str = r#"
name = "mini"

[core]
fifo_depth = 8192

[datasets]
"system.mw.pi_time_mu" = 10000

[[devices]]
key = "mw_dds"
kind = "dds"
channel = 0
params = { role = "gate_dds" }

[[devices]]
key = "mw_sw"
kind = "ttl"
channel = 1
params = { role = "gate_switch" }

[[devices]]
key = "cool"
kind = "ttl"
channel = 2
params = { role = "cool" }

[[devices]]
key = "pump"
kind = "ttl"
channel = 3
params = { role = "pump" }

[[devices]]
key = "det"
kind = "ttl"
channel = 4
params = { role = "detect_laser" }

[[devices]]
key = "pmt"
kind = "counter"
channel = 5
params = { role = "pmt" }

[[modules]]
key = "system"

[[modules]]
key = "system.mw"
claims = ["mw_dds", "mw_sw"]

[[modules]]
key = "system.det"
claims = ["cool", "pump", "det", "pmt"]

[[services]]
name = "state"
module_deps = ["system.det"]
interfaces = ["data_context"]

[[services]]
name = "mw_op"
service_deps = ["state"]
module_deps = ["system.mw"]
interfaces = ["operation"]
"#;

const NOISELESS: &str = r#"
[noise]
depol_per_gate = 0.0
prep_error = 0.0
bright_mean = 20.0
dark_mean = 0.0
detect_threshold = 1
"#;

/// The mini system with extra top-level tables spliced in before the
/// dataset table.
fn mini(extra: &str, seed: u64) -> System {
    let text = MINI.replacen("[datasets]", &format!("{extra}\n[datasets]"), 1);
    System::from_toml(&text, seed).unwrap()
}

#[test]
fn noiseless_survival_is_one() {
    let mut sys = mini(NOISELESS, 5);
    let design = RbDesign {
        lengths: vec![1, 2, 4, 8, 16, 32, 64],
        circuits_per_length: 10,
        samples_per_circuit: 20,
        ..RbDesign::default()
    };
    let (data, _) = sys.run_client(|ctx| direct_rb_client(ctx, &design));
    let data = data.unwrap();
    for row in &data.survival {
        assert!(row.iter().all(|s| *s == 1.0), "{row:?}");
    }
}

#[test]
fn contraction_survival_matches_geometric_law() {
    let depol: f64 = 0.01;
    let noise = format!(
        "[noise]\ndepol_per_gate = {depol}\nprep_error = 0.0\nbright_mean = 20.0\ndark_mean = 0.0\ndetect_threshold = 1\n"
    );
    let mut sys = mini(&noise, 9);
    let design = RbDesign {
        lengths: vec![1, 4, 16, 64],
        circuits_per_length: 20,
        samples_per_circuit: 200,
        seed: 4,
        ..RbDesign::default()
    };
    let (data, _) = sys.run_client(|ctx| direct_rb_client(ctx, &design));
    let data = data.unwrap();
    for (li, row) in data.survival.iter().enumerate() {
        // each native gate is one pulse, so the inversion word also decays
        let expect: Vec<f64> = (0..row.len())
            .map(|c| {
                let pulses = design.circuit(li, c).gates().count() as i32;
                0.5 + 0.5 * (1.0 - depol).powi(pulses)
            })
            .collect();
        let n = (row.len() * design.samples_per_circuit) as f64;
        let got = row.iter().sum::<f64>() / row.len() as f64;
        let want = expect.iter().sum::<f64>() / expect.len() as f64;
        let var = expect.iter().map(|p| p * (1.0 - p)).sum::<f64>() / expect.len() as f64;
        let sigma = (var / n).sqrt().max(1e-3);
        assert!((got - want).abs() < 3.0 * sigma, "m = {}: {got} vs {want}", design.lengths[li]);
    }
}

#[test]
fn fit_recovers_contraction_rate() {
    let depol: f64 = 0.01;
    let noise = format!(
        "[noise]\ndepol_per_gate = {depol}\nprep_error = 0.0\nbright_mean = 20.0\ndark_mean = 0.0\ndetect_threshold = 1\n"
    );
    let mut sys = mini(&noise, 2);
    let design = RbDesign {
        lengths: vec![1, 2, 4, 8, 16, 32, 64],
        circuits_per_length: 10,
        samples_per_circuit: 100,
        seed: 8,
        ..RbDesign::default()
    };
    let (data, _) = sys.run_client(|ctx| direct_rb_client(ctx, &design));
    let fit = fit_decay(&data.unwrap(), 300, 1).unwrap();
    assert!((fit.p - (1.0 - depol)).abs() < 3.0 * fit.p_std.max(1e-3), "{fit:?}");
    assert!(fit.ci_low <= fit.r && fit.r <= fit.ci_high);
}

#[test]
fn rabi_frequency_recovered() {
    let mut sys = mini("", 21);
    let mut rig = sys.scan_rig("mw_op").unwrap();
    let cfg = RabiScanConfig::covering(10_000, 1.0, 20, 100);
    let (fit, _) = rabi_scan(&mut rig, &cfg).unwrap();
    assert!((fit.rabi_hz / 50_000.0 - 1.0).abs() < 0.02, "{fit:?}");
}

#[test]
fn ramsey_detuning_recovered() {
    let extra = format!("{NOISELESS}\n[drive]\nrabi_hz = 50000.0\ndetuning_hz = 1000.0\n");
    let mut sys = mini(&extra, 13);
    let mut rig = sys.scan_rig("mw_op").unwrap();
    let (fit, _) = ramsey_scan(&mut rig, &RamseyConfig::default()).unwrap();
    assert!((fit.detuning_hz / 1000.0 - 1.0).abs() < 0.01, "{fit:?}");
}

#[test]
fn pi_train_recovers_over_rotation() {
    let text = MINI.replace("\"system.mw.pi_time_mu\" = 10000", "\"system.mw.pi_time_mu\" = 10100");
    let mut sys = System::from_toml(&text, 17).unwrap();
    let mut rig = sys.scan_rig("mw_op").unwrap();
    let (fit, _) = pi_train_calibration(&mut rig, &PiTrainConfig::default()).unwrap();
    assert!((fit.fractional_error / 0.01 - 1.0).abs() < 0.10, "{fit:?}");
    assert!((fit.corrected_pi_time_mu - 10_000).abs() <= 10);
}

#[test]
fn zero_amplitude_rabi_is_degenerate() {
    let mut sys = mini("[drive]\nrabi_hz = 1e-6\n", 1);
    let mut rig = sys.scan_rig("mw_op").unwrap();
    let cfg = RabiScanConfig::covering(10_000, 1.0, 20, 100);
    assert!(matches!(rabi_scan(&mut rig, &cfg), Err(RbError::Fit(FitError::Degenerate(_)))));
}

#[test]
fn empty_or_even_trains_are_rejected() {
    let mut sys = mini("", 1);
    let mut rig = sys.scan_rig("mw_op").unwrap();
    for lengths in [vec![0usize, 1], vec![1, 2], vec![]] {
        let cfg = PiTrainConfig { train_lengths: lengths, ..PiTrainConfig::default() };
        assert!(matches!(pi_train_calibration(&mut rig, &cfg), Err(RbError::Precondition(_))));
    }
}
