//! Acceptance criteria. Each criterion is one test that writes a single
//! `criterion N: PASS|FAIL` line to stderr (bypassing output capture) and
//! then asserts its verdict.

use std::io::Write;
use std::path::PathBuf;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use num_complex::Complex64;
use qeps_core::channel::{tap_split, LaserConfig, TapConfig};
use qeps_core::expharness::{export, run_link, sweep, ExportFormat, ScenarioConfig, SweepAxis, SweepResult};
use qeps_core::infotheory::{awgn_mi_oracle, estimate_mi_polar, sample_pairs, ChannelMode, MiReport, DEFAULT_AMP_BINS, DEFAULT_PHASE_BINS};
use qeps_core::iqcore::{photons_per_symbol_to_dbm, IqFrame, RandomStream};
use qeps_core::modem::{build_constellation, Format};
use qeps_core::rxdsp::{coherent_detect, CpeMode, DetectorStreams, ReceiverId};

// criteria run one at a time so the runtime budgets measure a single workload
static SERIAL: Mutex<()> = Mutex::new(());

fn verdict(n: u32, title: &str, pass: bool, detail: &str) {
    let line = format!("criterion {n:>2}: {} {title} | {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "criterion {n} ({title}) failed: {detail}");
}

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn with_deviation(s: &ScenarioConfig, deg: f64) -> ScenarioConfig {
    SweepAxis::PhaseDeviation.apply(s, deg).unwrap()
}

fn defaults(format: Format) -> ScenarioConfig {
    ScenarioConfig {
        format,
        ..ScenarioConfig::default()
    }
}

fn eve_ber(r: &SweepResult, value: f64) -> f64 {
    r.row(value, ReceiverId::Eve).unwrap().ber_mean
}

/// Standard normal upper tail.
fn q_function(x: f64) -> f64 {
    0.5 * libm::erfc(x / std::f64::consts::SQRT_2)
}

#[test]
fn criterion_01_round_trip_identity() {
    let _g = serial();
    let start = Instant::now();
    let mut failures = Vec::new();
    let mut min_bits = u64::MAX;
    for format in Format::ALL {
        let k = format.bits_per_symbol();
        let mut s = defaults(format);
        s.sequence_length_bits = 65_536usize.div_ceil(k) * k;
        s.repetitions = 1;
        s.quantum_noise = false;
        s.amplifier.gain_db = 0.0;
        for l in [&mut s.alice_laser, &mut s.bob_lo, &mut s.eve_lo] {
            l.linewidth_hz = 0.0;
        }
        let s = with_deviation(&s, 90.0);
        let out = run_link(&s).unwrap();
        min_bits = min_bits.min(out.bob_no_tap.n_bits);
        if out.bob_no_tap.bit_errors != 0 {
            failures.push(format!("{format}: {} errors", out.bob_no_tap.bit_errors));
        }
    }
    let elapsed = start.elapsed();
    let pass = failures.is_empty() && min_bits >= 65_536 && elapsed < Duration::from_secs(5);
    verdict(
        1,
        "round-trip identity",
        pass,
        &format!("6 formats, >= {min_bits} bits each, failures {failures:?}, {:.2} s (< 5 s)", elapsed.as_secs_f64()),
    );
}

#[test]
fn criterion_02_eve_saturation() {
    let _g = serial();
    let start = Instant::now();
    let cases = [
        (Format::Qpsk, vec![70.0, 90.0]),
        (Format::Psk16, vec![70.0, 90.0]),
        (Format::Qam128, vec![45.0, 70.0, 90.0]),
    ];
    let mut details = Vec::new();
    let mut pass = true;
    for (format, grid) in cases {
        let s = defaults(format);
        let r = sweep(&s, SweepAxis::PhaseDeviation, &grid).unwrap();
        for &d in &grid {
            let row = r.row(d, ReceiverId::Eve).unwrap();
            let ok = (0.45..=0.52).contains(&row.ber_mean) && row.n_bits >= 200_000;
            pass &= ok;
            details.push(format!("{format}@{d}deg={:.4}", row.ber_mean));
        }
    }
    let elapsed = start.elapsed();
    pass &= elapsed < Duration::from_secs(120);
    verdict(
        2,
        "eavesdropper saturation",
        pass,
        &format!("Eve BER in [0.45, 0.52] over 5 seeds: {} | {:.1} s (< 120 s)", details.join(" "), elapsed.as_secs_f64()),
    );
}

#[test]
fn criterion_03_zero_deviation_leak() {
    let _g = serial();
    let s = with_deviation(&defaults(Format::Qam128), 0.0);
    let r = sweep(&s, SweepAxis::CwPower, &[0.0, 10.0]).unwrap();
    let at = |p: f64, id: ReceiverId| r.row(p, id).unwrap().clone();
    let (eve, bob) = (at(0.0, ReceiverId::Eve), at(0.0, ReceiverId::BobTapped));
    let var = |p: f64, n: u64| p * (1.0 - p) / n as f64;
    let sigma = (var(eve.ber_mean, eve.n_bits) + var(bob.ber_mean, bob.n_bits)).sqrt();
    let diff = (eve.ber_mean - bob.ber_mean).abs();
    let (eve_hi, bob_hi) = (at(10.0, ReceiverId::Eve).ber_mean, at(10.0, ReceiverId::BobTapped).ber_mean);
    let pass = diff <= 2.0 * sigma && eve_hi < 1e-4 && bob_hi < 1e-4;
    verdict(
        3,
        "zero-deviation leak",
        pass,
        &format!(
            "0 dBm: Eve {:.2e} vs Bob-tapped {:.2e}, |diff| {diff:.2e} <= 2 sigma {:.2e}; +10 dBm: Eve {eve_hi:.2e}, Bob-tapped {bob_hi:.2e} (< 1e-4)",
            eve.ber_mean,
            bob.ber_mean,
            2.0 * sigma
        ),
    );
}

#[test]
fn criterion_04_deviation_monotonicity() {
    let _g = serial();
    let grid = [0.0, 20.0, 45.0, 70.0, 90.0];
    let r = sweep(&defaults(Format::Qam128), SweepAxis::PhaseDeviation, &grid).unwrap();
    let bers: Vec<f64> = grid.iter().map(|&d| eve_ber(&r, d)).collect();
    let first_saturated = bers.iter().position(|&b| b >= 0.45);
    let pass = match first_saturated {
        Some(k) => {
            bers[..=k].windows(2).all(|w| w[1] > w[0]) && bers[k..].iter().all(|b| (0.45..=0.52).contains(b))
        }
        None => false,
    } && bers[1] > 0.0
        && bers[1] < 0.45;
    verdict(
        4,
        "deviation monotonicity",
        pass,
        &format!("QAM128 Eve BER at {grid:?} deg = {bers:.4?}; needs strict rise to a plateau in [0.45, 0.52], 20 deg in (0, 0.45)"),
    );
}

#[test]
fn criterion_05_desynchronization() {
    let _g = serial();
    let mut details = Vec::new();
    let mut pass = true;
    for format in [Format::Psk16, Format::Qam128] {
        let mut s = defaults(format);
        s.bob.sync_offset_blocks = 1;
        let r = sweep(&s, SweepAxis::PhaseDeviation, &[70.0, 90.0]).unwrap();
        for d in [70.0, 90.0] {
            let ber = r.row(d, ReceiverId::BobNoTap).unwrap().ber_mean;
            pass &= ber >= 0.4;
            details.push(format!("{format}@{d}deg={ber:.4}"));
        }
    }
    verdict(
        5,
        "one-block desynchronization",
        pass,
        &format!("Bob BER with a one-block keystream offset (>= 0.4): {}", details.join(" ")),
    );
}

#[test]
fn criterion_06_linewidth_independence() {
    let _g = serial();
    let grid = [1e3, 1e5, 1e6];
    let enc = with_deviation(&defaults(Format::Qam128), 90.0);
    let r = sweep(&enc, SweepAxis::Linewidth, &grid).unwrap();
    let with: Vec<f64> = grid.iter().map(|&l| eve_ber(&r, l)).collect();
    let spread = with.iter().cloned().fold(f64::MIN, f64::max) - with.iter().cloned().fold(f64::MAX, f64::min);
    let plain = ScenarioConfig {
        encryption: false,
        ..enc
    };
    let r = sweep(&plain, SweepAxis::Linewidth, &grid).unwrap();
    let without: Vec<f64> = grid.iter().map(|&l| eve_ber(&r, l)).collect();
    let improves = without.windows(2).all(|w| w[0] < w[1]);
    verdict(
        6,
        "linewidth independence under encryption",
        spread < 0.02 && improves,
        &format!(
            "QAM128 Eve BER at {grid:?} Hz: encrypted {with:.4?} (spread {spread:.4} < 0.02), unencrypted {without:?} (strictly decreasing with linewidth: {improves})"
        ),
    );
}

#[test]
fn criterion_07_awgn_oracle() {
    let _g = serial();
    let start = Instant::now();
    let mut details = Vec::new();
    let mut pass = true;
    for ebn0_db in [4.0, 6.0, 8.0] {
        // quantum-limited detection: Es/N0 = 2 nbar, so Eb/N0 = nbar for QPSK
        let nbar = 10f64.powf(ebn0_db / 10.0);
        let mut s = defaults(Format::Qpsk);
        s.encryption = false;
        s.sequence_length_bits = 1_000_000;
        s.repetitions = 1;
        s.insertion_loss_db = 0.0;
        s.fiber.length_km = 0.0;
        s.amplifier.gain_db = 0.0;
        s.tap = TapConfig::new(0.0);
        s.bob.cpe = CpeMode::Off;
        for l in [&mut s.alice_laser, &mut s.bob_lo, &mut s.eve_lo] {
            *l = LaserConfig {
                power_dbm: photons_per_symbol_to_dbm(nbar, s.symbol_rate, s.fiber.wavelength_m).unwrap(),
                linewidth_hz: 0.0,
                static_phase_offset: 0.0,
            };
        }
        let out = run_link(&s).unwrap();
        let ber = out.bob_no_tap.ber;
        let expected = q_function((2.0 * nbar).sqrt());
        let sigma = (expected * (1.0 - expected) / out.bob_no_tap.n_bits as f64).sqrt();
        let ok = (ber - expected).abs() <= 3.0 * sigma && out.bob_no_tap.n_bits >= 1_000_000;
        pass &= ok;
        details.push(format!("{ebn0_db} dB: {ber:.5} vs {expected:.5} (3 sigma {:.5})", 3.0 * sigma));
    }
    let elapsed = start.elapsed();
    pass &= elapsed < Duration::from_secs(60);
    verdict(
        7,
        "AWGN oracle",
        pass,
        &format!("QPSK BER vs Q(sqrt(2 Eb/N0)): {} | {:.1} s (< 60 s)", details.join("; "), elapsed.as_secs_f64()),
    );
}

fn detected_phase_std(nbar: f64, seed: u64) -> f64 {
    let n = 1_000_000;
    let frame = IqFrame::new(vec![Complex64::new(nbar.sqrt(), 0.0); n], 28e9).unwrap();
    phase_std_after_detection(&frame, seed)
}

fn phase_std_after_detection(frame: &IqFrame, seed: u64) -> f64 {
    let lo = LaserConfig {
        power_dbm: 0.0,
        linewidth_hz: 0.0,
        static_phase_offset: 0.0,
    };
    let streams = DetectorStreams::from_root(&RandomStream::from_u64(seed, "uncertainty"));
    let out = coherent_detect(frame, &lo, &streams).unwrap();
    let phases: Vec<f64> = out.samples().iter().map(|z| z.arg()).collect();
    let m = phases.iter().sum::<f64>() / phases.len() as f64;
    (phases.iter().map(|p| (p - m).powi(2)).sum::<f64>() / (phases.len() - 1) as f64).sqrt()
}

#[test]
fn criterion_08_number_phase_uncertainty() {
    let _g = serial();
    let nbars = [1e2, 1e4, 1e6];
    let stds: Vec<f64> = nbars.iter().enumerate().map(|(i, &n)| detected_phase_std(n, i as u64)).collect();
    let xs: Vec<f64> = nbars.iter().map(|n| n.ln()).collect();
    let ys: Vec<f64> = stds.iter().map(|s| s.ln()).collect();
    let (mx, my) = (xs.iter().sum::<f64>() / 3.0, ys.iter().sum::<f64>() / 3.0);
    let slope = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();

    let full = IqFrame::new(vec![Complex64::new(1e2, 0.0); 1_000_000], 28e9).unwrap();
    let (_, tapped) = tap_split(&full, &TapConfig::new(0.10)).unwrap();
    let ratio = phase_std_after_detection(&tapped, 10) / phase_std_after_detection(&full, 11);
    let want = 10f64.sqrt();
    let pass = (slope + 0.5).abs() <= 0.02 && (ratio / want - 1.0).abs() <= 0.05;
    verdict(
        8,
        "number-phase uncertainty",
        pass,
        &format!(
            "phase std {stds:?} at nbar {nbars:?}, log-log slope {slope:.4} (-0.5 +/- 0.02); 10% tap std ratio {ratio:.4} (sqrt 10 = {want:.4} +/- 5%)"
        ),
    );
}

fn mi(format: Format, snr: f64, mode: ChannelMode) -> (MiReport, MiReport) {
    let c = build_constellation(format);
    let pairs = sample_pairs(&c, snr, mode, 1_000_000, &RandomStream::from_u64(9, "acceptance/mi")).unwrap();
    let report = estimate_mi_polar(&pairs, &c, DEFAULT_AMP_BINS, DEFAULT_PHASE_BINS).unwrap();
    let recovered = estimate_mi_polar(&pairs.derandomized(), &c, DEFAULT_AMP_BINS, DEFAULT_PHASE_BINS).unwrap();
    (report, recovered)
}

#[test]
fn criterion_09_mutual_information_structure() {
    let _g = serial();
    let start = Instant::now();
    let mut pass = true;
    let mut notes = Vec::new();
    let quantized = ChannelMode::QepsQuantized {
        deviation: std::f64::consts::FRAC_PI_2,
        levels: 64,
    };
    for snr in [5.0, 10.0, 20.0] {
        let (u16q, _) = mi(Format::Qam16, snr, ChannelMode::QepsUniform);
        let rest = u16q.terms().non_amplitude();
        let ok = rest < 0.05 && (u16q.total - u16q.amplitude_term).abs() < 0.05;
        pass &= ok;
        notes.push(format!("qam16/uniform@{snr}dB phase+mixed {rest:.4} (bias-corrected {:.4})", u16q.bias_corrected.non_amplitude()));

        let (u16p, _) = mi(Format::Psk16, snr, ChannelMode::QepsUniform);
        pass &= u16p.total < 0.05;
        notes.push(format!("psk16/uniform@{snr}dB total {:.4} (bias-corrected {:.4})", u16p.total, u16p.bias_corrected.total));

        for format in [Format::Qam16, Format::Psk16] {
            let (coh, _) = mi(format, snr, ChannelMode::Coherent);
            let oracle = awgn_mi_oracle(&build_constellation(format), snr);
            pass &= (coh.total - oracle).abs() < 0.05;
            notes.push(format!("{format}/coherent@{snr}dB {:.4} vs quadrature {oracle:.4}", coh.total));

            let (_, recovered) = mi(format, snr, quantized);
            let worst = [
                (recovered.amplitude_term, coh.amplitude_term),
                (recovered.phase_term, coh.phase_term),
                (recovered.mixed_1, coh.mixed_1),
                (recovered.mixed_2, coh.mixed_2),
                (recovered.total, coh.total),
            ]
            .iter()
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
            pass &= worst < 0.05;
            notes.push(format!("{format}/decrypted@{snr}dB max term gap {worst:.4}"));
        }
    }
    let elapsed = start.elapsed();
    pass &= elapsed < Duration::from_secs(180);
    verdict(
        9,
        "mutual information structure",
        pass,
        &format!("{} | {:.1} s (< 180 s)", notes.join("; "), elapsed.as_secs_f64()),
    );
}

fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/golden.scn")
}

fn golden_outputs(threads: usize, dir: &std::path::Path, tag: &str) -> (Vec<u8>, Vec<u8>, Vec<u8>) {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    pool.install(|| {
        let s = ScenarioConfig::load(&golden_path()).unwrap();
        let r = sweep(&s, SweepAxis::PhaseDeviation, &[0.0, 45.0, 90.0]).unwrap();
        let csv = dir.join(format!("{tag}.csv"));
        let json = dir.join(format!("{tag}.json"));
        export(&r, &csv, ExportFormat::Csv).unwrap();
        export(&r, &json, ExportFormat::Json).unwrap();
        let link = run_link(&s).unwrap().to_json().unwrap();
        (std::fs::read(csv).unwrap(), std::fs::read(json).unwrap(), link.into_bytes())
    })
}

#[test]
fn criterion_10_determinism() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    let a = golden_outputs(1, dir.path(), "a");
    let b = golden_outputs(8, dir.path(), "b");
    let pass = a == b && !a.0.is_empty();
    verdict(
        10,
        "golden-scenario determinism",
        pass,
        &format!(
            "sweep CSV {} bytes, JSON {} bytes, link report {} bytes; identical across 1- and 8-thread runs: {}",
            a.0.len(),
            a.1.len(),
            a.2.len(),
            a == b
        ),
    );
}
