//! Polar decomposition of mutual information for discrete constellations.
//!
//! `I(X;Y)` is split into an amplitude term, a phase term and two mixed
//! terms by the chain rule over `X = (X_amp, X_phase)` and
//! `Y = (Y_amp, Y_phase)`:
//!
//! * amplitude: `I(X_amp; Y_amp)`
//! * phase: `I(X_phase; Y_phase | X_amp)`
//! * mixed I: `I(X_amp; Y_phase | Y_amp)`
//! * mixed II: `I(X_phase; Y_amp | X_amp, Y_phase)`
//!
//! which sum to `I(X;Y)`. Estimates are plug-in histograms over polar bins
//! of `Y`; the input is discrete and uniform, so its marginal is exact.

use std::f64::consts::{PI, TAU};

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{QepsError, Result};
use crate::iqcore::{db_to_linear, RandomStream};
use crate::modem::Constellation;

pub const DEFAULT_AMP_BINS: usize = 64;
pub const DEFAULT_PHASE_BINS: usize = 64;
/// Minimum mean count per occupied joint cell before the estimate is flagged.
pub const MIN_CELL_COUNT: f64 = 5.0;

const CHUNK: usize = 1 << 14;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ChannelMode {
    Coherent,
    /// Residual phase drawn i.i.d. `N(0, sigma_theta^2)` per symbol.
    PartiallyCoherent { sigma_theta: f64 },
    QepsUniform,
    /// Phases `k * deviation / (levels - 1)`, `k` uniform in `0..levels`.
    QepsQuantized { deviation: f64, levels: usize },
}

impl ChannelMode {
    fn validate(&self) -> Result<()> {
        match *self {
            ChannelMode::PartiallyCoherent { sigma_theta } if !(sigma_theta >= 0.0 && sigma_theta.is_finite()) => {
                Err(QepsError::invalid("sigma_theta must be finite and >= 0"))
            }
            ChannelMode::QepsQuantized { deviation, levels } if !(deviation.is_finite() && deviation >= 0.0) || levels == 0 => {
                Err(QepsError::invalid("quantized mode needs deviation >= 0 and levels >= 1"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ChannelPairs {
    pub labels: Vec<usize>,
    pub x: Vec<Complex64>,
    pub y: Vec<Complex64>,
    /// Cipher phase applied to each symbol (zero outside QEPS modes).
    pub cipher_phases: Vec<f64>,
    pub mode: ChannelMode,
    pub snr_db: f64,
}

impl ChannelPairs {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Removes the cipher phases from `Y`, as the key holder would.
    pub fn derandomized(&self) -> ChannelPairs {
        let y = self
            .y
            .iter()
            .zip(&self.cipher_phases)
            .map(|(y, &p)| y * Complex64::from_polar(1.0, -p))
            .collect();
        ChannelPairs {
            y,
            cipher_phases: vec![0.0; self.len()],
            mode: ChannelMode::Coherent,
            ..self.clone()
        }
    }
}

/// Per-quadrature noise standard deviation for unit-energy symbols.
pub fn noise_sigma(snr_db: f64) -> f64 {
    if snr_db == f64::INFINITY {
        0.0
    } else {
        (0.5 / db_to_linear(snr_db)).sqrt()
    }
}

/// Draws `n` uniform inputs and passes them through `Y = X e^{j(theta+phi)} + N`.
/// Sample `i` reads its own block of the stream, so the result does not
/// depend on how the work is split across threads.
pub fn sample_pairs(c: &Constellation, snr_db: f64, mode: ChannelMode, n: usize, stream: &RandomStream) -> Result<ChannelPairs> {
    if n == 0 {
        return Err(QepsError::invalid("need at least one sample"));
    }
    if snr_db.is_nan() {
        return Err(QepsError::invalid("snr must not be NaN"));
    }
    mode.validate()?;
    let sigma = noise_sigma(snr_db);
    let m = c.order() as u64;
    let draws: Vec<(usize, Complex64, f64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut cur = stream.cursor(8 * i as u64);
            let label = cur.next_below(m) as usize;
            let noise = cur.next_complex_normal(sigma);
            let (theta, phi) = match mode {
                ChannelMode::Coherent => (0.0, 0.0),
                ChannelMode::PartiallyCoherent { sigma_theta } => (cur.next_normal_pair().0 * sigma_theta, 0.0),
                ChannelMode::QepsUniform => (0.0, cur.next_open01() * TAU - PI),
                ChannelMode::QepsQuantized { deviation, levels } => {
                    let k = cur.next_below(levels as u64) as f64;
                    let step = if levels > 1 { deviation / (levels - 1) as f64 } else { 0.0 };
                    (0.0, k * step)
                }
            };
            let x = c.points()[label];
            (label, x * Complex64::from_polar(1.0, theta + phi) + noise, phi)
        })
        .collect();
    let labels: Vec<usize> = draws.iter().map(|d| d.0).collect();
    Ok(ChannelPairs {
        x: labels.iter().map(|&l| c.points()[l]).collect(),
        labels,
        y: draws.iter().map(|d| d.1).collect(),
        cipher_phases: draws.iter().map(|d| d.2).collect(),
        mode,
        snr_db,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiTerms {
    pub amplitude_term: f64,
    pub phase_term: f64,
    pub mixed_1: f64,
    pub mixed_2: f64,
    pub total: f64,
}

impl MiTerms {
    fn combine(a: &MiTerms, b: &MiTerms, f: impl Fn(f64, f64) -> f64) -> MiTerms {
        MiTerms {
            amplitude_term: f(a.amplitude_term, b.amplitude_term),
            phase_term: f(a.phase_term, b.phase_term),
            mixed_1: f(a.mixed_1, b.mixed_1),
            mixed_2: f(a.mixed_2, b.mixed_2),
            total: f(a.total, b.total),
        }
    }

    /// Phase and both mixed terms.
    pub fn non_amplitude(&self) -> f64 {
        self.phase_term + self.mixed_1 + self.mixed_2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorStatus {
    Ok,
    Undersampled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiReport {
    pub amplitude_term: f64,
    pub phase_term: f64,
    pub mixed_1: f64,
    pub mixed_2: f64,
    pub total: f64,
    pub n_samples: usize,
    pub amp_bins: usize,
    pub phase_bins: usize,
    /// Mean of the estimates on each half of the sample.
    pub half_sample: MiTerms,
    /// `2 I_n - I_{n/2}`: first-order plug-in bias removed.
    pub bias_corrected: MiTerms,
    pub mean_cell_count: f64,
    pub status: EstimatorStatus,
}

impl MiReport {
    pub fn terms(&self) -> MiTerms {
        MiTerms {
            amplitude_term: self.amplitude_term,
            phase_term: self.phase_term,
            mixed_1: self.mixed_1,
            mixed_2: self.mixed_2,
            total: self.total,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| QepsError::Serialization(e.to_string()))
    }
}

/// Groups constellation labels by amplitude ring and by phase value.
struct InputClasses {
    amp_of: Vec<usize>,
    phase_of: Vec<usize>,
    n_amp: usize,
    n_phase: usize,
}

fn classify(values: impl Iterator<Item = f64>) -> (Vec<usize>, usize) {
    let mut uniq: Vec<f64> = Vec::new();
    let idx = values
        .map(|v| match uniq.iter().position(|u| (u - v).abs() < 1e-9) {
            Some(i) => i,
            None => {
                uniq.push(v);
                uniq.len() - 1
            }
        })
        .collect();
    (idx, uniq.len())
}

impl InputClasses {
    fn new(c: &Constellation) -> Self {
        let (amp_of, n_amp) = classify(c.points().iter().map(|p| p.norm()));
        // arg in (-pi, pi]; fold -pi onto pi so both compare equal
        let (phase_of, n_phase) = classify(c.points().iter().map(|p| {
            let a = p.arg();
            if a <= -PI + 1e-12 {
                PI
            } else {
                a
            }
        }));
        InputClasses { amp_of, phase_of, n_amp, n_phase }
    }
}

struct Binning {
    amp_edges: Vec<f64>,
    phase_bins: usize,
}

impl Binning {
    /// Equal-occupancy amplitude edges from the pooled sample.
    fn new(y: &[Complex64], amp_bins: usize, phase_bins: usize) -> Self {
        let mut r: Vec<f64> = y.iter().map(|z| z.norm()).collect();
        r.sort_by(f64::total_cmp);
        let amp_edges = (1..amp_bins).map(|k| r[k * r.len() / amp_bins]).collect();
        Binning { amp_edges, phase_bins }
    }

    fn cell(&self, z: Complex64) -> (usize, usize) {
        let r = z.norm();
        let a = self.amp_edges.partition_point(|&e| e <= r);
        let t = (((z.arg() + PI) / TAU) * self.phase_bins as f64) as usize;
        (a, t.min(self.phase_bins - 1))
    }
}

fn entropy(counts: &[f64]) -> f64 {
    let total: f64 = counts.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    -counts
        .iter()
        .filter(|&&c| c > 0.0)
        .map(|&c| {
            let p = c / total;
            p * p.log2()
        })
        .sum::<f64>()
}

/// Counts per (label, amp bin, phase bin), merged in chunk order.
fn joint_counts(labels: &[usize], y: &[Complex64], m: usize, bins: &Binning) -> Vec<u64> {
    let nr = bins.amp_edges.len() + 1;
    let nt = bins.phase_bins;
    let size = m * nr * nt;
    labels
        .par_chunks(CHUNK)
        .zip(y.par_chunks(CHUNK))
        .map(|(l, y)| {
            let mut h = vec![0u64; size];
            for (&label, &z) in l.iter().zip(y) {
                let (a, t) = bins.cell(z);
                h[(label * nr + a) * nt + t] += 1;
            }
            h
        })
        .reduce(
            || vec![0u64; size],
            |mut a, b| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                a
            },
        )
}

/// Chain-rule terms from a joint histogram, with the uniform input marginal
/// imposed: `p(x, y) = p(y | x) / M`.
fn terms_from_counts(counts: &[u64], classes: &InputClasses, nr: usize, nt: usize) -> MiTerms {
    let m = classes.amp_of.len();
    let mut p = vec![0.0; counts.len()];
    for x in 0..m {
        let row = &counts[x * nr * nt..(x + 1) * nr * nt];
        let nx: u64 = row.iter().sum();
        if nx == 0 {
            continue;
        }
        let w = 1.0 / (m as f64 * nx as f64);
        for (dst, &c) in p[x * nr * nt..(x + 1) * nr * nt].iter_mut().zip(row) {
            *dst = c as f64 * w;
        }
    }
    let (na, np) = (classes.n_amp, classes.n_phase);
    let mut a_ = vec![0.0; na];
    let mut r_ = vec![0.0; nr];
    let mut ar = vec![0.0; na * nr];
    let mut at = vec![0.0; na * nt];
    let mut rt = vec![0.0; nr * nt];
    let mut art = vec![0.0; na * nr * nt];
    let mut ap = vec![0.0; na * np];
    let mut apt = vec![0.0; na * np * nt];
    for x in 0..m {
        let (a, ph) = (classes.amp_of[x], classes.phase_of[x]);
        for r in 0..nr {
            for t in 0..nt {
                let v = p[(x * nr + r) * nt + t];
                if v == 0.0 {
                    continue;
                }
                a_[a] += v;
                r_[r] += v;
                ar[a * nr + r] += v;
                at[a * nt + t] += v;
                rt[r * nt + t] += v;
                art[(a * nr + r) * nt + t] += v;
                ap[a * np + ph] += v;
                apt[(a * np + ph) * nt + t] += v;
            }
        }
    }
    let (h_a, h_r, h_ar, h_at, h_rt, h_art) = (entropy(&a_), entropy(&r_), entropy(&ar), entropy(&at), entropy(&rt), entropy(&art));
    let (h_ap, h_apt, h_full) = (entropy(&ap), entropy(&apt), entropy(&p));
    let amplitude_term = h_a + h_r - h_ar;
    let phase_term = h_ap + h_at - h_apt - h_a;
    let mixed_1 = h_ar + h_rt - h_art - h_r;
    let mixed_2 = h_apt + h_art - h_full - h_at;
    MiTerms {
        amplitude_term,
        phase_term,
        mixed_1,
        mixed_2,
        total: amplitude_term + phase_term + mixed_1 + mixed_2,
    }
}

/// Plug-in polar MI estimate with half-sample bias diagnostics.
pub fn estimate_mi_polar(pairs: &ChannelPairs, c: &Constellation, amp_bins: usize, phase_bins: usize) -> Result<MiReport> {
    let n = pairs.len();
    if n < 2 || pairs.labels.len() != n {
        return Err(QepsError::invalid("need at least two paired samples"));
    }
    if amp_bins == 0 || phase_bins == 0 {
        return Err(QepsError::invalid("bin counts must be >= 1"));
    }
    if pairs.labels.iter().any(|&l| l >= c.order()) {
        return Err(QepsError::invalid("input label outside the constellation"));
    }
    let classes = InputClasses::new(c);
    let bins = Binning::new(&pairs.y, amp_bins, phase_bins);
    let nr = bins.amp_edges.len() + 1;
    let m = c.order();

    let full = joint_counts(&pairs.labels, &pairs.y, m, &bins);
    let half = n / 2;
    let first = joint_counts(&pairs.labels[..half], &pairs.y[..half], m, &bins);
    let second = joint_counts(&pairs.labels[half..], &pairs.y[half..], m, &bins);

    let est = terms_from_counts(&full, &classes, nr, phase_bins);
    let h1 = terms_from_counts(&first, &classes, nr, phase_bins);
    let h2 = terms_from_counts(&second, &classes, nr, phase_bins);
    let half_sample = MiTerms::combine(&h1, &h2, |a, b| 0.5 * (a + b));
    let bias_corrected = MiTerms::combine(&est, &half_sample, |a, h| 2.0 * a - h);

    let occupied = full.iter().filter(|&&c| c > 0).count().max(1);
    let mean_cell_count = n as f64 / occupied as f64;
    Ok(MiReport {
        amplitude_term: est.amplitude_term,
        phase_term: est.phase_term,
        mixed_1: est.mixed_1,
        mixed_2: est.mixed_2,
        total: est.total,
        n_samples: n,
        amp_bins: nr,
        phase_bins,
        half_sample,
        bias_corrected,
        mean_cell_count,
        status: if mean_cell_count < MIN_CELL_COUNT {
            EstimatorStatus::Undersampled
        } else {
            EstimatorStatus::Ok
        },
    })
}

/// Gauss-Hermite nodes and weights for `int exp(-x^2) f(x) dx`, by Newton
/// iteration on the orthonormal Hermite recursion.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let pim4 = PI.powf(-0.25);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let mut z = 0.0f64;
    for i in 0..n.div_ceil(2) {
        z = match i {
            0 => (2.0 * n as f64 + 1.0).sqrt() - 1.85575 * (2.0 * n as f64 + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * (n as f64).powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 1..=n {
                let p3 = p2;
                p2 = p1;
                p1 = z * (2.0 / j as f64).sqrt() * p2 - ((j - 1) as f64 / j as f64).sqrt() * p3;
            }
            pp = (2.0 * n as f64).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-14 {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

pub const ORACLE_NODES: usize = 64;

/// `I(X;Y)` in bits for uniform inputs on `c` over complex AWGN at `snr_db`,
/// by 2-D Gauss-Hermite quadrature over the noise.
pub fn awgn_mi_oracle(c: &Constellation, snr_db: f64) -> f64 {
    let m = c.order();
    let sigma = noise_sigma(snr_db);
    if sigma == 0.0 {
        return (m as f64).log2();
    }
    let (nodes, weights) = gauss_hermite(ORACLE_NODES);
    let s2 = 2.0 * sigma * sigma;
    let pts = c.points();
    let sum: f64 = (0..m)
        .into_par_iter()
        .map(|i| {
            let mut acc = 0.0;
            for (u, wu) in nodes.iter().zip(&weights) {
                for (v, wv) in nodes.iter().zip(&weights) {
                    let noise = Complex64::new(*u, *v) * (2.0f64.sqrt() * sigma);
                    let base = noise.norm_sqr();
                    let inner: f64 = pts
                        .iter()
                        .map(|xj| (-((pts[i] - xj + noise).norm_sqr() - base) / s2).exp())
                        .sum();
                    acc += wu * wv * inner.log2();
                }
            }
            acc / PI
        })
        .sum();
    (m as f64).log2() - sum / m as f64
}
