//! Numeric foundation: IQ frames in normalized field units, power/photon
//! conversions and the counter-based random streams every noise source and
//! the keystream draw from.
//!
//! A sample `a` carries `|a|^2` mean photons per symbol. One sample per
//! symbol throughout.

use num_complex::Complex64;
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

use crate::error::{QepsError, Result};

/// Planck constant, J s.
pub const PLANCK: f64 = 6.626_070_15e-34;
/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 2.997_924_58e8;

/// Largest accepted seed / pre-shared secret, in bytes.
pub const MAX_SEED_BYTES: usize = 16 * 1024;

/// A block of complex baseband samples, one per symbol.
#[derive(Debug, Clone, PartialEq)]
pub struct IqFrame {
    samples: Vec<Complex64>,
    symbol_rate: f64,
}

impl IqFrame {
    pub fn new(samples: Vec<Complex64>, symbol_rate: f64) -> Result<Self> {
        if samples.is_empty() {
            return Err(QepsError::invalid("IQ frame must contain at least one sample"));
        }
        if !(symbol_rate > 0.0 && symbol_rate.is_finite()) {
            return Err(QepsError::invalid(format!(
                "symbol rate must be positive, got {symbol_rate}"
            )));
        }
        if let Some(i) = samples.iter().position(|s| !(s.re.is_finite() && s.im.is_finite())) {
            return Err(QepsError::invalid(format!("non-finite sample at index {i}")));
        }
        Ok(IqFrame {
            samples,
            symbol_rate,
        })
    }

    pub fn samples(&self) -> &[Complex64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<Complex64> {
        self.samples
    }

    pub fn symbol_rate(&self) -> f64 {
        self.symbol_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sum of `|a|^2` over the frame (total photons).
    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|s| s.norm_sqr()).sum()
    }

    /// Mean photons per symbol.
    pub fn mean_photons(&self) -> f64 {
        self.energy() / self.samples.len() as f64
    }

    /// Same rate, new samples. Used by transforms that cannot produce
    /// non-finite output from finite input.
    pub(crate) fn with_samples(&self, samples: Vec<Complex64>) -> IqFrame {
        debug_assert_eq!(samples.len(), self.samples.len());
        IqFrame {
            samples,
            symbol_rate: self.symbol_rate,
        }
    }

    pub fn scaled(&self, gain: f64) -> IqFrame {
        self.with_samples(self.samples.iter().map(|s| s * gain).collect())
    }

    /// A sub-range of the frame.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Result<IqFrame> {
        if range.start >= range.end || range.end > self.samples.len() {
            return Err(QepsError::invalid(format!(
                "slice {range:?} out of bounds for frame of {}",
                self.samples.len()
            )));
        }
        Ok(IqFrame {
            samples: self.samples[range].to_vec(),
            symbol_rate: self.symbol_rate,
        })
    }
}

fn check_link_args(symbol_rate: f64, wavelength: f64) -> Result<()> {
    if !(symbol_rate > 0.0 && symbol_rate.is_finite()) {
        return Err(QepsError::invalid(format!(
            "symbol rate must be positive, got {symbol_rate}"
        )));
    }
    if !(wavelength > 0.0 && wavelength.is_finite()) {
        return Err(QepsError::invalid(format!(
            "wavelength must be positive, got {wavelength}"
        )));
    }
    Ok(())
}

/// Energy of one photon at `wavelength` metres.
pub fn photon_energy(wavelength: f64) -> f64 {
    PLANCK * SPEED_OF_LIGHT / wavelength
}

/// Mean photon number per symbol for an optical power in dBm.
pub fn dbm_to_photons_per_symbol(power_dbm: f64, symbol_rate: f64, wavelength: f64) -> Result<f64> {
    check_link_args(symbol_rate, wavelength)?;
    let watts = 1e-3 * 10f64.powf(power_dbm / 10.0);
    Ok(watts / symbol_rate / photon_energy(wavelength))
}

/// Inverse of [`dbm_to_photons_per_symbol`].
pub fn photons_per_symbol_to_dbm(photons: f64, symbol_rate: f64, wavelength: f64) -> Result<f64> {
    check_link_args(symbol_rate, wavelength)?;
    if !(photons > 0.0) {
        return Err(QepsError::invalid(format!(
            "photon number must be positive, got {photons}"
        )));
    }
    let watts = photons * photon_energy(wavelength) * symbol_rate;
    Ok(10.0 * (watts / 1e-3).log10())
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// A keyed, domain-separated, counter-addressed random source.
///
/// Draw `i` of a stream is a pure function of `(seed, domain_tag, i)`: the
/// seed and tag are hashed into a ChaCha20 key and draw `i` is read from
/// keystream word position `2 i`. Streams hold no mutable state; use
/// [`RandomStream::cursor`] to read sequential draws.
#[derive(Clone, PartialEq, Eq)]
pub struct RandomStream {
    key: [u8; 32],
    tag: String,
}

impl std::fmt::Debug for RandomStream {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        // key material stays out of logs
        f.debug_struct("RandomStream").field("tag", &self.tag).finish_non_exhaustive()
    }
}

impl RandomStream {
    pub fn new(seed: &[u8], domain_tag: &str) -> Result<Self> {
        if seed.is_empty() || seed.len() > MAX_SEED_BYTES {
            return Err(QepsError::invalid(format!(
                "seed must be 1..={MAX_SEED_BYTES} bytes, got {}",
                seed.len()
            )));
        }
        let mut h = Sha256::new();
        h.update((seed.len() as u64).to_le_bytes());
        h.update(seed);
        h.update((domain_tag.len() as u64).to_le_bytes());
        h.update(domain_tag.as_bytes());
        Ok(RandomStream {
            key: h.finalize().into(),
            tag: domain_tag.to_owned(),
        })
    }

    pub fn from_u64(seed: u64, domain_tag: &str) -> Self {
        Self::new(&seed.to_le_bytes(), domain_tag).expect("8-byte seed is always valid")
    }

    /// Independent child stream, e.g. `bob` -> `bob/vacuum`.
    pub fn derive(&self, sub_tag: &str) -> RandomStream {
        let tag = format!("{}/{}", self.tag, sub_tag);
        let mut h = Sha256::new();
        h.update(self.key);
        h.update((sub_tag.len() as u64).to_le_bytes());
        h.update(sub_tag.as_bytes());
        RandomStream {
            key: h.finalize().into(),
            tag,
        }
    }

    pub fn domain_tag(&self) -> &str {
        &self.tag
    }

    /// Sequential reader positioned at draw `index`.
    pub fn cursor(&self, index: u64) -> StreamCursor {
        let mut rng = ChaCha20Rng::from_seed(self.key);
        rng.set_word_pos(u128::from(index) * 2);
        StreamCursor { rng }
    }

    /// Raw 64-bit draw number `index`.
    pub fn u64_at(&self, index: u64) -> u64 {
        self.cursor(index).next_u64()
    }
}

/// Sequential view into a [`RandomStream`].
pub struct StreamCursor {
    rng: ChaCha20Rng,
}

impl StreamCursor {
    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform on the open interval (0, 1).
    pub fn next_open01(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n` (multiply-shift; bias below 2^-64 * n).
    pub fn next_below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        ((u128::from(self.next_u64()) * u128::from(n)) >> 64) as u64
    }

    /// A pair of independent standard normals (Box-Muller), consuming two draws.
    pub fn next_normal_pair(&mut self) -> (f64, f64) {
        let u1 = self.next_open01();
        let u2 = self.next_open01();
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
        (r * c, r * s)
    }

    /// Circular complex Gaussian with standard deviation `sigma` per quadrature.
    pub fn next_complex_normal(&mut self, sigma: f64) -> Complex64 {
        let (a, b) = self.next_normal_pair();
        Complex64::new(a * sigma, b * sigma)
    }
}

/// `n` Gaussian draws with standard deviation `sigma`, from the start of `stream`.
pub fn gaussian_draws(stream: &RandomStream, n: usize, sigma: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n);
    if sigma == 0.0 {
        out.resize(n, 0.0);
        return out;
    }
    let mut cur = stream.cursor(0);
    while out.len() < n {
        let (a, b) = cur.next_normal_pair();
        out.push(a * sigma);
        if out.len() < n {
            out.push(b * sigma);
        }
    }
    out
}

/// `n` circular complex Gaussian samples, per-quadrature std `sigma`.
pub fn complex_gaussian_draws(stream: &RandomStream, n: usize, sigma: f64) -> Vec<Complex64> {
    if sigma == 0.0 {
        return vec![Complex64::new(0.0, 0.0); n];
    }
    let mut cur = stream.cursor(0);
    (0..n).map(|_| cur.next_complex_normal(sigma)).collect()
}
