//! Constellations, bit mapping, hard decisions and error counting.
//!
//! Points are stored indexed by their label: `points[l]` carries label `l`,
//! with the first bit of each symbol group as the label's MSB.

use std::f64::consts::TAU;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{QepsError, Result};
use crate::iqcore::{IqFrame, RandomStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Qpsk,
    Psk16,
    Qam16,
    Qam32,
    Qam64,
    Qam128,
}

impl Format {
    pub const ALL: [Format; 6] = [
        Format::Qpsk,
        Format::Psk16,
        Format::Qam16,
        Format::Qam32,
        Format::Qam64,
        Format::Qam128,
    ];

    pub fn order(self) -> usize {
        match self {
            Format::Qpsk => 4,
            Format::Psk16 | Format::Qam16 => 16,
            Format::Qam32 => 32,
            Format::Qam64 => 64,
            Format::Qam128 => 128,
        }
    }

    pub fn bits_per_symbol(self) -> usize {
        self.order().trailing_zeros() as usize
    }

    /// Order of the rotational symmetry group of the constellation.
    pub fn rotational_symmetry(self) -> usize {
        match self {
            Format::Psk16 => 16,
            _ => 4,
        }
    }

    pub fn is_psk(self) -> bool {
        matches!(self, Format::Qpsk | Format::Psk16)
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Format::Qpsk => "qpsk",
            Format::Psk16 => "psk16",
            Format::Qam16 => "qam16",
            Format::Qam32 => "qam32",
            Format::Qam64 => "qam64",
            Format::Qam128 => "qam128",
        };
        f.write_str(s)
    }
}

impl FromStr for Format {
    type Err = QepsError;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        Ok(match norm.as_str() {
            "qpsk" | "4qam" | "qam4" => Format::Qpsk,
            "psk16" | "16psk" => Format::Psk16,
            "qam16" | "16qam" => Format::Qam16,
            "qam32" | "32qam" => Format::Qam32,
            "qam64" | "64qam" => Format::Qam64,
            "qam128" | "128qam" => Format::Qam128,
            _ => return Err(QepsError::invalid(format!("unknown modulation format `{s}`"))),
        })
    }
}

// Quadrant labels for cross QAM. Row = |I| index (1, 3, 5, ...), column =
// |Q| index; NONE marks the removed corner. Labels are mirrored across the
// axes, so neighbours across an axis differ only in the sign bit and
// neighbours inside a quadrant in at most two bits.
const NONE: u8 = u8::MAX;
const QUADRANT_32: [[u8; 3]; 3] = [[3, 1, 0], [7, 5, 4], [2, 6, NONE]];
const QUADRANT_128: [[u8; 6]; 6] = [
    [0, 8, 11, 9, 1, 13],
    [6, 14, 15, 12, 4, 5],
    [22, 30, 31, 28, 20, 21],
    [2, 10, 26, 24, 16, 17],
    [18, 3, 27, 25, NONE, NONE],
    [19, 7, 23, 29, NONE, NONE],
];

fn gray(n: usize) -> usize {
    n ^ (n >> 1)
}

/// Fast nearest-point search used inside phase search loops.
#[derive(Debug, Clone)]
enum Slicer {
    /// Points on odd-integer grid coordinates times `scale`; `cells[i * side + j]`
    /// holds the label at column i, row j.
    Grid {
        side: usize,
        scale: f64,
        cells: Vec<Option<usize>>,
    },
    Ring {
        labels: Vec<usize>,
    },
}

#[derive(Debug, Clone)]
pub struct Constellation {
    format: Format,
    points: Vec<Complex64>,
    slicer: Slicer,
}

impl Constellation {
    pub fn new(format: Format) -> Self {
        build_constellation(format)
    }

    pub fn format(&self) -> Format {
        self.format
    }

    pub fn points(&self) -> &[Complex64] {
        &self.points
    }

    pub fn order(&self) -> usize {
        self.points.len()
    }

    pub fn bits_per_symbol(&self) -> usize {
        self.format.bits_per_symbol()
    }

    pub fn rotational_symmetry(&self) -> usize {
        self.format.rotational_symmetry()
    }

    pub fn label_bits(&self, label: usize) -> String {
        format!("{:0width$b}", label, width = self.bits_per_symbol())
    }

    /// Exhaustive minimum-distance decision; ties go to the lowest label.
    pub fn nearest_exhaustive(&self, z: Complex64) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, p) in self.points.iter().enumerate() {
            let d = (z - p).norm_sqr();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }

    /// Minimum-distance decision via grid rounding; equal to
    /// [`Self::nearest_exhaustive`] except possibly on exact ties.
    pub fn nearest(&self, z: Complex64) -> usize {
        match &self.slicer {
            Slicer::Grid { side, scale, cells } => {
                let n = *side as f64;
                let idx = |v: f64| ((v / scale + n - 1.0) / 2.0).round().clamp(0.0, n - 1.0) as usize;
                // Removing lattice points only grows the remaining Voronoi
                // cells, so a surviving full-grid winner is the nearest point.
                match cells[idx(z.re) * side + idx(z.im)] {
                    Some(l) => l,
                    None => self.nearest_exhaustive(z),
                }
            }
            Slicer::Ring { labels } => {
                let m = labels.len() as f64;
                let k = (z.arg().rem_euclid(TAU) / (TAU / m)).round() as usize % labels.len();
                labels[k]
            }
        }
    }

    /// Writes `index,label_bits,re,im` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["index", "label_bits", "re", "im"])
            .map_err(|e| QepsError::Serialization(e.to_string()))?;
        for (i, p) in self.points.iter().enumerate() {
            w.write_record([
                i.to_string(),
                self.label_bits(i),
                format!("{:.17e}", p.re),
                format!("{:.17e}", p.im),
            ])
            .map_err(|e| QepsError::Serialization(e.to_string()))?;
        }
        w.flush().map_err(|e| QepsError::Serialization(e.to_string()))?;
        Ok(())
    }
}

fn normalize(points: &mut [Complex64]) -> f64 {
    let e = points.iter().map(|p| p.norm_sqr()).sum::<f64>() / points.len() as f64;
    let s = e.sqrt().recip();
    points.iter_mut().for_each(|p| *p *= s);
    s
}

fn grid_constellation(format: Format, side: usize, label_of: impl Fn(usize, usize) -> Option<usize>) -> Constellation {
    let m = format.order();
    let mut raw = vec![None; m];
    let mut cells = vec![None; side * side];
    for i in 0..side {
        for j in 0..side {
            if let Some(l) = label_of(i, j) {
                let x = 2.0 * i as f64 - (side as f64 - 1.0);
                let y = 2.0 * j as f64 - (side as f64 - 1.0);
                assert!(raw[l].is_none(), "duplicate label {l}");
                raw[l] = Some(Complex64::new(x, y));
                cells[i * side + j] = Some(l);
            }
        }
    }
    let mut points: Vec<Complex64> = raw.into_iter().map(|p| p.expect("label coverage")).collect();
    let scale = normalize(&mut points);
    Constellation {
        format,
        points,
        slicer: Slicer::Grid { side, scale, cells },
    }
}

/// Label of a cross-QAM point from mirrored quadrant tables.
fn cross_label<const N: usize>(table: &[[u8; N]; N], bits: usize, side: usize, i: usize, j: usize) -> Option<usize> {
    let half = side / 2;
    let (neg_x, ai) = if i < half { (1, half - 1 - i) } else { (0, i - half) };
    let (neg_y, bj) = if j < half { (1, half - 1 - j) } else { (0, j - half) };
    let inner = table[ai][bj];
    (inner != NONE).then(|| (neg_x << (bits - 1)) | (neg_y << (bits - 2)) | inner as usize)
}

/// Builds the labeled, unit-energy constellation for `format`.
pub fn build_constellation(format: Format) -> Constellation {
    let bits = format.bits_per_symbol();
    match format {
        Format::Qpsk => grid_constellation(format, 2, |i, j| Some(((1 - i) << 1) | (1 - j))),
        Format::Qam16 | Format::Qam64 => {
            let side = 1 << (bits / 2);
            let half_bits = bits / 2;
            grid_constellation(format, side, |i, j| Some((gray(i) << half_bits) | gray(j)))
        }
        Format::Qam32 => grid_constellation(format, 6, |i, j| cross_label(&QUADRANT_32, bits, 6, i, j)),
        Format::Qam128 => grid_constellation(format, 12, |i, j| cross_label(&QUADRANT_128, bits, 12, i, j)),
        Format::Psk16 => {
            let m = format.order();
            let mut points = vec![Complex64::new(0.0, 0.0); m];
            let mut labels = vec![0; m];
            for k in 0..m {
                let l = gray(k);
                points[l] = Complex64::from_polar(1.0, TAU * k as f64 / m as f64);
                labels[k] = l;
            }
            Constellation {
                format,
                points,
                slicer: Slicer::Ring { labels },
            }
        }
    }
}

/// A sequence of bits, each stored as 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BitStream(Vec<u8>);

impl BitStream {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if let Some(i) = bits.iter().position(|&b| b > 1) {
            return Err(QepsError::invalid(format!("bit {i} is not 0 or 1")));
        }
        Ok(BitStream(bits))
    }

    /// `n` uniform bits from `stream`.
    pub fn random(stream: &RandomStream, n: usize) -> Self {
        let mut cur = stream.cursor(0);
        let mut bits = Vec::with_capacity(n);
        while bits.len() < n {
            let w = cur.next_u64();
            let take = (n - bits.len()).min(64);
            bits.extend((0..take).map(|k| ((w >> k) & 1) as u8));
        }
        BitStream(bits)
    }

    pub fn bits(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn slice(&self, range: std::ops::Range<usize>) -> BitStream {
        BitStream(self.0[range].to_vec())
    }

    /// Labels of consecutive `k`-bit groups.
    pub fn labels(&self, k: usize) -> Result<Vec<usize>> {
        if k == 0 || self.0.len() % k != 0 {
            return Err(QepsError::invalid(format!(
                "{} bits do not divide into {k}-bit symbols",
                self.0.len()
            )));
        }
        Ok(self
            .0
            .chunks_exact(k)
            .map(|c| c.iter().fold(0usize, |acc, &b| (acc << 1) | b as usize))
            .collect())
    }

    pub fn from_labels(labels: &[usize], k: usize) -> Self {
        let mut bits = Vec::with_capacity(labels.len() * k);
        for &l in labels {
            bits.extend((0..k).rev().map(|s| ((l >> s) & 1) as u8));
        }
        BitStream(bits)
    }
}

pub fn map_bits(bits: &BitStream, c: &Constellation, symbol_rate: f64) -> Result<IqFrame> {
    let labels = bits.labels(c.bits_per_symbol())?;
    IqFrame::new(labels.iter().map(|&l| c.points()[l]).collect(), symbol_rate)
}

pub fn demap_hard(frame: &IqFrame, c: &Constellation) -> BitStream {
    demap_samples(frame.samples(), c)
}

pub(crate) fn demap_samples(samples: &[Complex64], c: &Constellation) -> BitStream {
    let labels: Vec<usize> = samples.iter().map(|&z| c.nearest_exhaustive(z)).collect();
    BitStream::from_labels(&labels, c.bits_per_symbol())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorCount {
    pub bit_errors: u64,
    pub symbol_errors: u64,
    pub n_bits: u64,
    pub n_symbols: u64,
    pub ber: f64,
    pub ser: f64,
}

/// Bit and symbol error rates between two streams; symbols are groups of
/// `bits_per_symbol` bits.
pub fn count_errors(tx: &BitStream, rx: &BitStream, bits_per_symbol: usize) -> Result<ErrorCount> {
    if tx.len() != rx.len() {
        return Err(QepsError::invalid(format!(
            "stream lengths differ: {} vs {}",
            tx.len(),
            rx.len()
        )));
    }
    if tx.is_empty() {
        return Err(QepsError::invalid("cannot count errors over empty streams"));
    }
    if bits_per_symbol == 0 || tx.len() % bits_per_symbol != 0 {
        return Err(QepsError::invalid("stream length is not a whole number of symbols"));
    }
    let mut bit_errors = 0u64;
    let mut symbol_errors = 0u64;
    for (a, b) in tx.bits().chunks_exact(bits_per_symbol).zip(rx.bits().chunks_exact(bits_per_symbol)) {
        let e = a.iter().zip(b).filter(|(x, y)| x != y).count() as u64;
        bit_errors += e;
        symbol_errors += u64::from(e > 0);
    }
    let n_bits = tx.len() as u64;
    let n_symbols = n_bits / bits_per_symbol as u64;
    Ok(ErrorCount {
        bit_errors,
        symbol_errors,
        n_bits,
        n_symbols,
        ber: bit_errors as f64 / n_bits as f64,
        ser: symbol_errors as f64 / n_symbols as f64,
    })
}
