//! Receiver signal processing: coherent detection, dispersion compensation,
//! digital decryption, blind carrier-phase estimation, ambiguity resolution,
//! gain normalization and decision.
//!
//! Bob and Eve run the same [`run_receiver`] pipeline; the only difference is
//! whether a [`CipherContext`] is present.

use std::f64::consts::TAU;
use std::ops::Range;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::channel::{add_vacuum_noise, dispersion_response, filter_frequency, wiener_phase, FiberConfig, LaserConfig};
use crate::error::{QepsError, Result};
use crate::iqcore::{IqFrame, RandomStream};
use crate::modem::{count_errors, demap_samples, BitStream, Constellation};
use crate::phasecipher::{decrypt, CipherContext};

pub const DEFAULT_CPE_WINDOW: usize = 64;
pub const DEFAULT_CPE_TEST_PHASES: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReceiverId {
    BobNoTap,
    BobTapped,
    Eve,
}

impl ReceiverId {
    pub fn as_str(self) -> &'static str {
        match self {
            ReceiverId::BobNoTap => "bob_no_tap",
            ReceiverId::BobTapped => "bob_tapped",
            ReceiverId::Eve => "eve",
        }
    }
}

impl std::fmt::Display for ReceiverId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum CpeMode {
    Off,
    Blind { window: usize, test_phases: usize },
}

impl Default for CpeMode {
    fn default() -> Self {
        CpeMode::Blind {
            window: DEFAULT_CPE_WINDOW,
            test_phases: DEFAULT_CPE_TEST_PHASES,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum AmbiguityMode {
    /// Pick the rotation that best matches the transmitted symbols. Simulation only.
    Genie,
    /// Pick the rotation from the first `n_symbols` known symbols.
    Preamble { n_symbols: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReceiverConfig {
    pub id: ReceiverId,
    pub lo: LaserConfig,
    /// Keystream for digital decryption; `None` for a receiver without the key.
    pub cipher: Option<CipherContext>,
    /// Lets an eavesdropper carry a guessed cipher context.
    pub key_guess: bool,
    pub cpe: CpeMode,
    pub ambiguity: AmbiguityMode,
    /// Fiber whose dispersion is undone; `None` disables compensation.
    pub cd_compensation: Option<FiberConfig>,
    /// Decrypt before dispersion compensation instead of after.
    pub decrypt_before_cd: bool,
    /// Keystream block the frame starts at.
    pub start_block: i64,
}

impl ReceiverConfig {
    pub fn new(id: ReceiverId, lo: LaserConfig) -> Self {
        ReceiverConfig {
            id,
            lo,
            cipher: None,
            key_guess: false,
            cpe: CpeMode::default(),
            ambiguity: AmbiguityMode::Genie,
            cd_compensation: None,
            decrypt_before_cd: false,
            start_block: 0,
        }
    }

    pub fn has_key(&self) -> bool {
        self.cipher.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        let field = |f: &str| format!("{}.{f}", self.id);
        if self.id == ReceiverId::Eve && self.cipher.is_some() && !self.key_guess {
            return Err(QepsError::config(field("cipher"), "the eavesdropper does not hold the key"));
        }
        self.lo.validate(&field("lo"))?;
        if let CpeMode::Blind { window, test_phases } = self.cpe {
            if window == 0 {
                return Err(QepsError::config(field("cpe_window"), "window must be >= 1"));
            }
            if test_phases < 2 {
                return Err(QepsError::config(field("cpe_test_phases"), "need at least 2 test phases"));
            }
        }
        if let AmbiguityMode::Preamble { n_symbols: 0 } = self.ambiguity {
            return Err(QepsError::config(field("preamble_symbols"), "preamble must be non-empty"));
        }
        if let Some(f) = &self.cd_compensation {
            f.validate()?;
        }
        Ok(())
    }
}

/// What the simulator knows about the transmission.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    /// Unencrypted transmitted constellation points, one per symbol.
    pub symbols: Vec<Complex64>,
    /// Transmitted bits of the symbols in `data`.
    pub data_bits: BitStream,
    /// Symbols carrying payload; symbols outside are preamble or padding.
    pub data: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkReport {
    pub receiver_id: ReceiverId,
    pub ber: f64,
    pub ser: f64,
    pub n_bits: u64,
    pub bit_errors: u64,
    pub evm_percent: f64,
    pub mean_photons_at_detector: f64,
}

/// Random sources a detector consumes.
#[derive(Debug, Clone)]
pub struct DetectorStreams {
    pub lo_phase: RandomStream,
    pub vacuum: RandomStream,
    /// Add quadrature (vacuum) noise at detection.
    pub quantum_noise: bool,
}

impl DetectorStreams {
    pub fn from_root(root: &RandomStream) -> Self {
        DetectorStreams {
            lo_phase: root.derive("lo_phase"),
            vacuum: root.derive("vacuum"),
            quantum_noise: true,
        }
    }
}

/// Incident optical power on one photodiode when signal and LO fields add.
/// For `signal = sqrt(mu) e^{j a}` and `lo = sqrt(nu)` this is
/// `mu + nu + 2 sqrt(mu nu) cos(a)`.
pub fn photodetector_power(signal: Complex64, lo: Complex64) -> f64 {
    (signal + lo).norm_sqr()
}

/// Balanced 90-degree-hybrid detection of one sample against an LO field,
/// from the four photodiode powers. Returns the beat term scaled to signal
/// units: `signal * exp(-j arg(lo))`.
pub fn hybrid_detect(signal: Complex64, lo: Complex64) -> Complex64 {
    let j = Complex64::i();
    let i_branch = photodetector_power(signal, lo) - photodetector_power(signal, -lo);
    let q_branch = photodetector_power(signal, j * lo) - photodetector_power(signal, -j * lo);
    // the I branch is 4 Re(s lo*), the Q branch 4 Re(s (j lo)*) = 4 Im(s lo*)
    Complex64::new(i_branch, q_branch) / (4.0 * lo.norm())
}

/// Coherent detection against a local oscillator: removes the LO phase
/// (Wiener noise plus static offset) and adds vacuum noise.
pub fn coherent_detect(frame: &IqFrame, lo: &LaserConfig, streams: &DetectorStreams) -> Result<IqFrame> {
    let theta = wiener_phase(frame.len(), lo.linewidth_hz, frame.symbol_rate(), &streams.lo_phase);
    let out = frame.with_samples(
        frame
            .samples()
            .iter()
            .zip(&theta)
            .map(|(s, t)| s * Complex64::from_polar(1.0, -(t + lo.static_phase_offset)))
            .collect(),
    );
    Ok(if streams.quantum_noise {
        add_vacuum_noise(&out, &streams.vacuum)
    } else {
        out
    })
}

/// Inverse all-pass dispersion filter on the symbol-rate grid.
pub fn cd_compensate(frame: &IqFrame, cfg: &FiberConfig) -> IqFrame {
    if cfg.length_km == 0.0 || cfg.dispersion_ps_nm_km == 0.0 {
        return frame.clone();
    }
    filter_frequency(frame, &dispersion_response(cfg, frame.len(), frame.symbol_rate(), -1.0))
}

/// Blind phase search. Each symbol's phase is estimated from a centered
/// window of `window` symbols as the test phase in `[0, 2 pi / M_rot)`
/// minimizing the summed squared distance to the nearest constellation
/// point, refined by parabolic interpolation, then unwrapped to the branch
/// nearest the previous estimate. Returns the derotated frame and the
/// per-symbol phase estimates.
pub fn blind_cpe(frame: &IqFrame, c: &Constellation, window: usize, test_phases: usize) -> Result<(IqFrame, Vec<f64>)> {
    if window == 0 || test_phases < 2 {
        return Err(QepsError::invalid("blind CPE needs window >= 1 and at least 2 test phases"));
    }
    let y = frame.samples();
    let n = y.len();
    let period = TAU / c.rotational_symmetry() as f64;
    let step = period / test_phases as f64;
    let half = window / 2;
    let bounds = |k: usize| (k.saturating_sub(half), (k + window - half).min(n));

    let metric = |rot: Complex64, z: Complex64| {
        let r = z * rot;
        (r - c.points()[c.nearest(r)]).norm_sqr()
    };

    let mut best_val = vec![f64::INFINITY; n];
    let mut best_idx = vec![0usize; n];
    let mut prefix = vec![0.0; n + 1];
    for b in 0..test_phases {
        let rot = Complex64::from_polar(1.0, -(b as f64) * step);
        for k in 0..n {
            prefix[k + 1] = prefix[k] + metric(rot, y[k]);
        }
        for k in 0..n {
            let (lo, hi) = bounds(k);
            let v = prefix[hi] - prefix[lo];
            if v < best_val[k] {
                best_val[k] = v;
                best_idx[k] = b;
            }
        }
    }

    let window_metric = |k: usize, phase: f64| {
        let (lo, hi) = bounds(k);
        let rot = Complex64::from_polar(1.0, -phase);
        y[lo..hi].iter().map(|&z| metric(rot, z)).sum::<f64>()
    };

    let mut estimates = Vec::with_capacity(n);
    let mut prev: Option<f64> = None;
    for k in 0..n {
        let centre = best_idx[k] as f64 * step;
        let f0 = best_val[k];
        let fm = window_metric(k, centre - step);
        let fp = window_metric(k, centre + step);
        let denom = fm - 2.0 * f0 + fp;
        let delta = if denom > 0.0 {
            (0.5 * (fm - fp) / denom).clamp(-0.5, 0.5)
        } else {
            0.0
        };
        let raw = centre + delta * step;
        let est = match prev {
            None => raw,
            Some(p) => raw + period * ((p - raw) / period).round(),
        };
        estimates.push(est);
        prev = Some(est);
    }
    let out = y
        .iter()
        .zip(&estimates)
        .map(|(z, &e)| z * Complex64::from_polar(1.0, -e))
        .collect();
    Ok((frame.with_samples(out), estimates))
}

/// Index `k` of the rotation `exp(j 2 pi k / M_rot)` whose decisions best
/// match `reference` over `range`; ties go to the smallest `k`.
fn best_rotation(samples: &[Complex64], reference: &[Complex64], range: Range<usize>, c: &Constellation) -> usize {
    let m = c.rotational_symmetry();
    let mut best = (usize::MAX, 0);
    for k in 0..m {
        let rot = Complex64::from_polar(1.0, TAU * k as f64 / m as f64);
        let errors = range
            .clone()
            .filter(|&i| {
                let d = c.points()[c.nearest(samples[i] * rot)];
                (d - reference[i]).norm_sqr() > 1e-18
            })
            .count();
        if errors < best.0 {
            best = (errors, k);
        }
    }
    best.1
}

fn rms_normalize(samples: &mut [Complex64]) {
    let p = samples.iter().map(|s| s.norm_sqr()).sum::<f64>() / samples.len() as f64;
    if p > 0.0 {
        let g = p.sqrt().recip();
        samples.iter_mut().for_each(|s| *s *= g);
    }
}

/// Decision-directed least-squares complex gain, two passes.
fn ls_gain_normalize(samples: &mut [Complex64], c: &Constellation) {
    for _ in 0..2 {
        let mut num = Complex64::new(0.0, 0.0);
        let mut den = 0.0;
        for s in samples.iter() {
            num += c.points()[c.nearest(*s)] * s.conj();
            den += s.norm_sqr();
        }
        if den > 0.0 && num.norm() > 0.0 {
            let g = num / den;
            samples.iter_mut().for_each(|s| *s *= g);
        }
    }
}

/// Intermediate signals of one receiver run, for constellation dumps.
#[derive(Debug, Clone)]
pub struct Reception {
    pub pre_decrypt: IqFrame,
    pub post_decrypt: IqFrame,
    pub post_cpe: IqFrame,
    /// Final decision-ready samples.
    pub equalized: IqFrame,
    pub phase_estimates: Option<Vec<f64>>,
    pub decided_bits: BitStream,
    pub mean_photons_at_detector: f64,
}

/// Runs the receive chain up to decisions. `truth` is needed for genie
/// ambiguity resolution and supplies the preamble symbols otherwise.
pub fn receive(frame: &IqFrame, rx: &ReceiverConfig, c: &Constellation, streams: &DetectorStreams, truth: Option<&GroundTruth>) -> Result<Reception> {
    rx.validate()?;
    if matches!(rx.ambiguity, AmbiguityMode::Genie) && truth.is_none() {
        return Err(QepsError::invalid("genie ambiguity resolution needs ground truth"));
    }
    if let Some(t) = truth {
        if t.symbols.len() != frame.len() || t.data.end > frame.len() {
            return Err(QepsError::invalid("ground truth does not match the frame"));
        }
    }
    let mean_photons_at_detector = frame.mean_photons();
    let detected = coherent_detect(frame, &rx.lo, streams)?;

    let plan = match &rx.cipher {
        Some(ctx) => Some(ctx.receive_plan(frame.len(), rx.start_block)?),
        None => None,
    };
    let decrypt_now = |f: &IqFrame| -> Result<IqFrame> {
        match &plan {
            Some(p) => decrypt(f, p),
            None => Ok(f.clone()),
        }
    };
    let compensate = |f: &IqFrame| match &rx.cd_compensation {
        Some(fiber) => cd_compensate(f, fiber),
        None => f.clone(),
    };

    let (pre_decrypt, post_decrypt) = if rx.decrypt_before_cd {
        let d = decrypt_now(&detected)?;
        (detected.clone(), compensate(&d))
    } else {
        let pre = compensate(&detected);
        let post = decrypt_now(&pre)?;
        (pre, post)
    };

    let mut work = post_decrypt.samples().to_vec();
    rms_normalize(&mut work);
    let normalized = post_decrypt.with_samples(work);

    let (post_cpe, phase_estimates) = match rx.cpe {
        CpeMode::Off => (normalized, None),
        CpeMode::Blind { window, test_phases } => {
            let (f, est) = blind_cpe(&normalized, c, window, test_phases)?;
            (f, Some(est))
        }
    };

    let k = match (rx.ambiguity, truth) {
        (AmbiguityMode::Genie, Some(t)) => best_rotation(post_cpe.samples(), &t.symbols, t.data.clone(), c),
        (AmbiguityMode::Preamble { n_symbols }, Some(t)) => {
            let end = n_symbols.min(frame.len());
            best_rotation(post_cpe.samples(), &t.symbols, 0..end, c)
        }
        (AmbiguityMode::Preamble { .. }, None) => 0,
        (AmbiguityMode::Genie, None) => unreachable!("checked above"),
    };
    let rot = Complex64::from_polar(1.0, TAU * k as f64 / c.rotational_symmetry() as f64);
    let mut eq: Vec<Complex64> = post_cpe.samples().iter().map(|s| s * rot).collect();
    ls_gain_normalize(&mut eq, c);
    let equalized = post_cpe.with_samples(eq);

    let data = truth.map(|t| t.data.clone()).unwrap_or(0..frame.len());
    let decided_bits = demap_samples(&equalized.samples()[data], c);

    Ok(Reception {
        pre_decrypt,
        post_decrypt,
        post_cpe,
        equalized,
        phase_estimates,
        decided_bits,
        mean_photons_at_detector,
    })
}

/// Full receiver run with error counting against ground truth.
pub fn run_receiver(frame: &IqFrame, rx: &ReceiverConfig, c: &Constellation, streams: &DetectorStreams, truth: Option<&GroundTruth>) -> Result<LinkReport> {
    let truth = truth.ok_or_else(|| QepsError::invalid("error counting needs ground truth"))?;
    let rec = receive(frame, rx, c, streams, Some(truth))?;
    let errors = count_errors(&truth.data_bits, &rec.decided_bits, c.bits_per_symbol())?;
    let (mut err_pow, mut ref_pow) = (0.0, 0.0);
    for i in truth.data.clone() {
        err_pow += (rec.equalized.samples()[i] - truth.symbols[i]).norm_sqr();
        ref_pow += truth.symbols[i].norm_sqr();
    }
    Ok(LinkReport {
        receiver_id: rx.id,
        ber: errors.ber,
        ser: errors.ser,
        n_bits: errors.n_bits,
        bit_errors: errors.bit_errors,
        evm_percent: 100.0 * (err_pow / ref_pow).sqrt(),
        mean_photons_at_detector: rec.mean_photons_at_detector,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::fiber_propagate;
    use crate::keystream::KeystreamConfig;
    use crate::modem::{build_constellation, map_bits, Format};
    use crate::phasecipher::encrypt;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn quiet_streams() -> DetectorStreams {
        DetectorStreams {
            lo_phase: RandomStream::from_u64(1, "lo"),
            vacuum: RandomStream::from_u64(1, "vac"),
            quantum_noise: false,
        }
    }

    fn ideal_lo() -> LaserConfig {
        LaserConfig {
            power_dbm: 0.0,
            linewidth_hz: 0.0,
            static_phase_offset: 0.0,
        }
    }

    fn tx(format: Format, n_bits: usize, seed: u64) -> (Constellation, BitStream, IqFrame) {
        let c = build_constellation(format);
        let bits = BitStream::random(&RandomStream::from_u64(seed, "bits"), n_bits);
        let f = map_bits(&bits, &c, 28e9).unwrap();
        (c, bits, f)
    }

    fn truth_for(bits: &BitStream, f: &IqFrame) -> GroundTruth {
        GroundTruth {
            symbols: f.samples().to_vec(),
            data_bits: bits.clone(),
            data: 0..f.len(),
        }
    }

    #[test]
    fn ideal_detection_is_identity() {
        let (_, _, f) = tx(Format::Qam16, 4000, 1);
        let out = coherent_detect(&f, &ideal_lo(), &quiet_streams()).unwrap();
        assert_eq!(out, f);
    }

    #[test]
    fn lo_offset_rotates() {
        let (_, _, f) = tx(Format::Qam16, 400, 2);
        let lo = LaserConfig {
            static_phase_offset: FRAC_PI_2,
            ..ideal_lo()
        };
        let out = coherent_detect(&f, &lo, &quiet_streams()).unwrap();
        for (a, b) in f.samples().iter().zip(out.samples()) {
            assert!((a * Complex64::new(0.0, -1.0) - b).norm() < 1e-14);
        }
    }

    #[test]
    fn photodetector_power_traces_cosine() {
        // P - mu - nu against 2 sqrt(mu nu) cos(phi): least-squares fit R^2
        let (mu, nu) = (50.0f64, 2.0e4f64);
        let s = Complex64::new(mu.sqrt(), 0.0);
        let phases: Vec<f64> = (0..360).map(|k| k as f64 * TAU / 360.0).collect();
        let beat: Vec<f64> = phases
            .iter()
            .map(|&p| photodetector_power(s, Complex64::from_polar(nu.sqrt(), -p)) - mu - nu)
            .collect();
        let model: Vec<f64> = phases.iter().map(|p| 2.0 * (mu * nu).sqrt() * p.cos()).collect();
        let mean = beat.iter().sum::<f64>() / beat.len() as f64;
        let ss_tot: f64 = beat.iter().map(|b| (b - mean).powi(2)).sum();
        let ss_res: f64 = beat.iter().zip(&model).map(|(b, m)| (b - m).powi(2)).sum();
        assert!(1.0 - ss_res / ss_tot > 0.999);
    }

    #[test]
    fn hybrid_matches_algebraic_detection() {
        let s = Complex64::new(3.0, -7.0);
        let lo = Complex64::from_polar(300.0, 0.7);
        let want = s * Complex64::from_polar(1.0, -0.7);
        assert!((hybrid_detect(s, lo) - want).norm() < 1e-9);
    }

    #[test]
    fn cd_zero_length_identity() {
        let (_, _, f) = tx(Format::Qpsk, 512, 3);
        let cfg = FiberConfig {
            length_km: 0.0,
            ..FiberConfig::default()
        };
        assert_eq!(cd_compensate(&f, &cfg), f);
    }

    #[test]
    fn cd_compensation_inverts_fiber() {
        let (_, _, f) = tx(Format::Qam64, 6 * 8192, 4);
        let cfg = FiberConfig::default();
        let back = cd_compensate(&fiber_propagate(&f, &cfg), &cfg);
        let amp = 10f64.powf(-16.0 / 20.0);
        let resid: f64 = f.samples().iter().zip(back.samples()).map(|(a, b)| (a * amp - b).norm_sqr()).sum();
        assert!(resid / (f.energy() * amp * amp) < 1e-9);
        let twice = cd_compensate(&back, &cfg);
        let isi: f64 = back.samples().iter().zip(twice.samples()).map(|(a, b)| (a - b).norm_sqr()).sum();
        assert!(isi > 0.1 * back.energy());
    }

    #[test]
    fn bps_zero_phase() {
        let (c, _, f) = tx(Format::Qam16, 4 * 2000, 5);
        let (_, est) = blind_cpe(&f, &c, 32, 32).unwrap();
        assert!(est.iter().all(|e| e.abs() < 1e-9), "{:?}", &est[..4]);
    }

    #[test]
    fn bps_constant_rotation() {
        // grid-search oracle: 0.3 rad lies between test phases; refinement must land within 1e-3
        let (c, _, f) = tx(Format::Qam16, 4 * 2000, 6);
        let rotated = f.with_samples(f.samples().iter().map(|s| s * Complex64::from_polar(1.0, 0.3)).collect());
        let (_, est) = blind_cpe(&rotated, &c, 64, 64).unwrap();
        for e in est {
            let d = (e - 0.3).rem_euclid(FRAC_PI_2);
            let d = d.min(FRAC_PI_2 - d);
            assert!(d < 1e-3, "{e}");
        }
    }

    #[test]
    fn bps_rejects_bad_params() {
        let (c, _, f) = tx(Format::Qpsk, 64, 7);
        assert!(blind_cpe(&f, &c, 0, 8).is_err());
        assert!(blind_cpe(&f, &c, 8, 1).is_err());
    }

    #[test]
    fn bps_tracks_laser_phase_noise() {
        // QAM16 at nbar = 1e4 with 0.1 MHz lasers at 28 GBaud
        let (c, bits, f) = tx(Format::Qam16, 4 * 50_000, 8);
        let nbar: f64 = 1e4;
        let sig = f.scaled(nbar.sqrt());
        let lo = LaserConfig {
            power_dbm: 0.0,
            linewidth_hz: 0.1e6,
            static_phase_offset: 0.4,
        };
        let streams = DetectorStreams::from_root(&RandomStream::from_u64(9, "bob"));
        let rx = ReceiverConfig::new(ReceiverId::BobNoTap, lo);
        let rep = run_receiver(&sig, &rx, &c, &streams, Some(&truth_for(&bits, &f))).unwrap();
        assert!(rep.ber < 1e-3, "{}", rep.ber);
    }

    #[test]
    fn bob_noiseless_with_key() {
        let (c, bits, f) = tx(Format::Qam128, 7 * 8192, 10);
        let ks = KeystreamConfig::new(b"key".to_vec(), 1024, FRAC_PI_2, 64).unwrap();
        let ctx = CipherContext::synchronized(ks);
        let enc = encrypt(&f, &ctx.transmit_plan(f.len(), 0).unwrap()).unwrap();
        let mut rx = ReceiverConfig::new(ReceiverId::BobNoTap, ideal_lo());
        rx.cipher = Some(ctx);
        let rep = run_receiver(&enc.scaled(100.0), &rx, &c, &quiet_streams(), Some(&truth_for(&bits, &f))).unwrap();
        assert_eq!(rep.ber, 0.0);
        assert!(rep.evm_percent < 1e-9);
    }

    #[test]
    fn genie_requires_truth() {
        let (c, _, f) = tx(Format::Qpsk, 64, 11);
        let rx = ReceiverConfig::new(ReceiverId::BobNoTap, ideal_lo());
        assert!(receive(&f, &rx, &c, &quiet_streams(), None).is_err());
        assert!(run_receiver(&f, &rx, &c, &quiet_streams(), None).is_err());
    }

    #[test]
    fn eve_cannot_hold_key() {
        let ks = KeystreamConfig::new(b"key".to_vec(), 16, 1.0, 64).unwrap();
        let mut rx = ReceiverConfig::new(ReceiverId::Eve, ideal_lo());
        rx.cipher = Some(CipherContext::synchronized(ks));
        assert!(rx.validate().is_err());
        rx.key_guess = true;
        assert!(rx.validate().is_ok());
    }

    #[test]
    fn preamble_resolves_rotation() {
        let (c, bits, f) = tx(Format::Qam16, 4 * 4096, 12);
        let lo = LaserConfig {
            static_phase_offset: PI + 0.2,
            ..ideal_lo()
        };
        let mut rx = ReceiverConfig::new(ReceiverId::BobNoTap, lo);
        rx.ambiguity = AmbiguityMode::Preamble { n_symbols: 64 };
        let truth = truth_for(&bits, &f);
        let rep = run_receiver(&f.scaled(30.0), &rx, &c, &quiet_streams(), Some(&truth)).unwrap();
        assert_eq!(rep.ber, 0.0);
    }
}
