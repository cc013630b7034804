//! Scenario files, link runs, parameter sweeps and result export.
//!
//! A scenario is a flat `key = value` text file; every key is the dotted
//! path of a [`ScenarioConfig`] field. Unknown keys are rejected so typos
//! surface as config errors instead of silently falling back to defaults.

use std::f64::consts::{PI, TAU};
use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{apply_phase, dispersion_memory_symbols, edfa_amplify, fiber_propagate, tap_split, wiener_phase, FiberConfig, LaserConfig, TapConfig};
use crate::error::{QepsError, Result};
use crate::iqcore::{dbm_to_photons_per_symbol, IqFrame, RandomStream, MAX_SEED_BYTES};
use crate::keystream::KeystreamConfig;
use crate::modem::{build_constellation, map_bits, BitStream, Constellation, Format};
use crate::phasecipher::{encrypt, CipherContext};
use crate::rxdsp::{receive, run_receiver, AmbiguityMode, CpeMode, DetectorStreams, GroundTruth, LinkReport, ReceiverConfig, ReceiverId, Reception, DEFAULT_CPE_TEST_PHASES, DEFAULT_CPE_WINDOW};

pub const HD_FEC_THRESHOLD: f64 = 3.8e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AmplifierConfig {
    pub gain_db: f64,
    pub noise_figure_db: f64,
}

impl Default for AmplifierConfig {
    fn default() -> Self {
        AmplifierConfig {
            gain_db: 16.0,
            noise_figure_db: 5.0,
        }
    }
}

/// Per-receiver DSP settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RxSettings {
    pub cpe: CpeMode,
    pub cd_compensation: bool,
    pub decrypt_before_cd: bool,
    pub sync_offset_blocks: i64,
    pub sync_offset_symbols: i64,
}

impl Default for RxSettings {
    fn default() -> Self {
        RxSettings {
            cpe: CpeMode::default(),
            cd_compensation: true,
            decrypt_before_cd: false,
            sync_offset_blocks: 0,
            sync_offset_symbols: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PhaseOffset {
    /// Uniform in `[-pi, pi)`, drawn from the noise seed.
    Random,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Vary {
    Noise,
    Key,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ambiguity {
    Genie,
    /// Known symbols filling the first `blocks` keystream blocks.
    Preamble { blocks: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub format: Format,
    pub sequence_length_bits: usize,
    pub symbol_rate: f64,
    pub encryption: bool,
    /// Key bytes are filled in from `key_seed` unless `key_override` is set.
    pub keystream: KeystreamConfig,
    pub key_override: Option<Vec<u8>>,
    pub start_block: i64,
    pub alice_laser: LaserConfig,
    pub bob_lo: LaserConfig,
    pub eve_lo: LaserConfig,
    pub eve_lo_offset: PhaseOffset,
    pub insertion_loss_db: f64,
    pub fiber: FiberConfig,
    pub tap: TapConfig,
    pub amplifier: AmplifierConfig,
    pub quantum_noise: bool,
    pub bob: RxSettings,
    pub eve: RxSettings,
    pub ambiguity: Ambiguity,
    pub key_seed: u64,
    pub noise_seed: u64,
    pub repetitions: usize,
    pub vary: Vary,
    pub hd_fec_threshold: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        let key_seed: u64 = 1;
        ScenarioConfig {
            format: Format::Qam128,
            sequence_length_bits: 65_536,
            symbol_rate: 28e9,
            encryption: true,
            keystream: KeystreamConfig {
                key: key_seed.to_le_bytes().to_vec(),
                period_symbols: 1024,
                phase_deviation: PI / 2.0,
                levels: 64,
                period_choices: None,
            },
            key_override: None,
            start_block: 0,
            alice_laser: LaserConfig::default(),
            bob_lo: LaserConfig::default(),
            eve_lo: LaserConfig::default(),
            eve_lo_offset: PhaseOffset::Random,
            insertion_loss_db: 5.0,
            fiber: FiberConfig::default(),
            tap: TapConfig::default(),
            amplifier: AmplifierConfig::default(),
            quantum_noise: true,
            bob: RxSettings::default(),
            eve: RxSettings {
                cd_compensation: false,
                ..RxSettings::default()
            },
            ambiguity: Ambiguity::Genie,
            key_seed,
            noise_seed: 1,
            repetitions: 5,
            vary: Vary::Noise,
            hd_fec_threshold: HD_FEC_THRESHOLD,
        }
    }
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    let x: f64 = v
        .parse()
        .map_err(|_| QepsError::config(key, format!("expected a number, got `{v}`")))?;
    if !x.is_finite() {
        return Err(QepsError::config(key, "must be finite"));
    }
    Ok(x)
}

fn parse_int<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| QepsError::config(key, format!("expected an integer, got `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(QepsError::config(key, format!("expected true/false, got `{v}`"))),
    }
}

fn parse_hex(key: &str, v: &str) -> Result<Vec<u8>> {
    hex::decode(v).map_err(|e| QepsError::config(key, format!("bad hex: {e}")))
}

fn set_laser(l: &mut LaserConfig, key: &str, field: &str, v: &str) -> Result<()> {
    match field {
        "power_dbm" => l.power_dbm = parse_f64(key, v)?,
        "linewidth_hz" => l.linewidth_hz = parse_f64(key, v)?,
        "static_phase_offset" => l.static_phase_offset = parse_f64(key, v)?,
        _ => return Err(QepsError::config(key, "unknown key")),
    }
    Ok(())
}

fn set_rx(rx: &mut RxSettings, key: &str, field: &str, v: &str) -> Result<()> {
    let (window, phases) = match rx.cpe {
        CpeMode::Blind { window, test_phases } => (window, test_phases),
        CpeMode::Off => (DEFAULT_CPE_WINDOW, DEFAULT_CPE_TEST_PHASES),
    };
    match field {
        "cpe" => {
            rx.cpe = match v {
                "blind" => CpeMode::Blind { window, test_phases: phases },
                "off" => CpeMode::Off,
                _ => return Err(QepsError::config(key, format!("expected blind or off, got `{v}`"))),
            }
        }
        "cpe_window" => {
            let w = parse_int(key, v)?;
            if let CpeMode::Blind { window, .. } = &mut rx.cpe {
                *window = w;
            }
        }
        "cpe_test_phases" => {
            let t = parse_int(key, v)?;
            if let CpeMode::Blind { test_phases, .. } = &mut rx.cpe {
                *test_phases = t;
            }
        }
        "cd_compensation" => rx.cd_compensation = parse_bool(key, v)?,
        "decrypt_before_cd" => rx.decrypt_before_cd = parse_bool(key, v)?,
        "sync_offset_blocks" => rx.sync_offset_blocks = parse_int(key, v)?,
        "sync_offset_symbols" => rx.sync_offset_symbols = parse_int(key, v)?,
        _ => return Err(QepsError::config(key, "unknown key")),
    }
    Ok(())
}

impl ScenarioConfig {
    /// Parses scenario text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut s = ScenarioConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                QepsError::config(format!("line {}", lineno + 1), format!("expected `key = value`, got `{line}`"))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_owned()) {
                return Err(QepsError::config(key, "duplicate key"));
            }
            s.set(key, value)?;
        }
        s.finalize()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| QepsError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Sets one dotted-path field from its text value.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let (head, tail) = key.split_once('.').unwrap_or((key, ""));
        match (head, tail) {
            ("format", "") => self.format = v.parse().map_err(|_| QepsError::config(key, format!("unknown format `{v}`")))?,
            ("sequence_length_bits", "") => self.sequence_length_bits = parse_int(key, v)?,
            ("symbol_rate", "") => self.symbol_rate = parse_f64(key, v)?,
            ("encryption", "") => self.encryption = parse_bool(key, v)?,
            ("start_block", "") => self.start_block = parse_int(key, v)?,
            ("insertion_loss_db", "") => self.insertion_loss_db = parse_f64(key, v)?,
            ("quantum_noise", "") => self.quantum_noise = parse_bool(key, v)?,
            ("repetitions", "") => self.repetitions = parse_int(key, v)?,
            ("hd_fec_threshold", "") => self.hd_fec_threshold = parse_f64(key, v)?,
            ("vary", "") => {
                self.vary = match v {
                    "noise" => Vary::Noise,
                    "key" => Vary::Key,
                    _ => return Err(QepsError::config(key, format!("expected noise or key, got `{v}`"))),
                }
            }
            ("ambiguity", "") => {
                self.ambiguity = match v {
                    "genie" => Ambiguity::Genie,
                    "preamble" => Ambiguity::Preamble { blocks: 1 },
                    _ => return Err(QepsError::config(key, format!("expected genie or preamble, got `{v}`"))),
                }
            }
            ("preamble_blocks", "") => {
                let b = parse_int(key, v)?;
                self.ambiguity = Ambiguity::Preamble { blocks: b };
            }
            ("keystream", "period_symbols") => self.keystream.period_symbols = parse_int(key, v)?,
            ("keystream", "phase_deviation") => self.keystream.phase_deviation = parse_f64(key, v)?,
            ("keystream", "phase_deviation_deg") => self.keystream.phase_deviation = parse_f64(key, v)?.to_radians(),
            ("keystream", "levels") => self.keystream.levels = parse_int(key, v)?,
            ("keystream", "period_choices") => {
                let list = v
                    .split(',')
                    .map(|p| parse_int(key, p.trim()))
                    .collect::<Result<Vec<usize>>>()?;
                self.keystream.period_choices = Some(list);
            }
            ("keystream", "key_hex") => self.key_override = Some(parse_hex(key, v)?),
            ("seeds", "key") => self.key_seed = parse_int(key, v)?,
            ("seeds", "noise") => self.noise_seed = parse_int(key, v)?,
            ("alice_laser", f) => set_laser(&mut self.alice_laser, key, f, v)?,
            ("bob_lo", f) => set_laser(&mut self.bob_lo, key, f, v)?,
            ("eve_lo", "static_phase_offset") => {
                self.eve_lo_offset = if v == "random" {
                    PhaseOffset::Random
                } else {
                    PhaseOffset::Fixed(parse_f64(key, v)?)
                }
            }
            ("eve_lo", f) => set_laser(&mut self.eve_lo, key, f, v)?,
            ("fiber", "length_km") => self.fiber.length_km = parse_f64(key, v)?,
            ("fiber", "attenuation_db_per_km") => self.fiber.attenuation_db_per_km = parse_f64(key, v)?,
            ("fiber", "dispersion_ps_nm_km") => self.fiber.dispersion_ps_nm_km = parse_f64(key, v)?,
            ("fiber", "wavelength_m") => self.fiber.wavelength_m = parse_f64(key, v)?,
            ("tap", "ratio") => self.tap.ratio = parse_f64(key, v)?,
            ("tap", "coupling_loss_db") => self.tap.coupling_loss_db = parse_f64(key, v)?,
            ("tap", "max_ratio") => self.tap.max_ratio = parse_f64(key, v)?,
            ("amplifier", "gain_db") => self.amplifier.gain_db = parse_f64(key, v)?,
            ("amplifier", "noise_figure_db") => self.amplifier.noise_figure_db = parse_f64(key, v)?,
            ("bob", f) => set_rx(&mut self.bob, key, f, v)?,
            ("eve", f) => set_rx(&mut self.eve, key, f, v)?,
            _ => return Err(QepsError::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Fills in derived fields and validates.
    pub fn finalize(&mut self) -> Result<()> {
        self.keystream.key = self.key_for(0)?;
        self.validate()
    }

    fn key_for(&self, rep: usize) -> Result<Vec<u8>> {
        match (&self.key_override, self.vary) {
            (Some(_), Vary::Key) => Err(QepsError::config("vary", "cannot vary the key when an explicit key is given")),
            (Some(k), Vary::Noise) => Ok(k.clone()),
            (None, Vary::Key) => Ok(self.key_seed.wrapping_add(rep as u64).to_le_bytes().to_vec()),
            (None, Vary::Noise) => Ok(self.key_seed.to_le_bytes().to_vec()),
        }
    }

    fn noise_seed_for(&self, rep: usize) -> u64 {
        match self.vary {
            Vary::Noise => self.noise_seed.wrapping_add(rep as u64),
            Vary::Key => self.noise_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sequence_length_bits < self.format.bits_per_symbol() {
            return Err(QepsError::config("sequence_length_bits", "need at least one symbol"));
        }
        if !(self.symbol_rate > 0.0) {
            return Err(QepsError::config("symbol_rate", "must be > 0"));
        }
        if self.repetitions == 0 {
            return Err(QepsError::config("repetitions", "must be >= 1"));
        }
        if !(self.insertion_loss_db >= 0.0) {
            return Err(QepsError::config("insertion_loss_db", "must be >= 0"));
        }
        if let Some(k) = &self.key_override {
            if k.is_empty() || k.len() > MAX_SEED_BYTES {
                return Err(QepsError::config("keystream.key_hex", format!("key must be 1..={MAX_SEED_BYTES} bytes")));
            }
        }
        self.key_for(0)?;
        self.keystream.validate()?;
        self.alice_laser.validate("alice_laser")?;
        self.bob_lo.validate("bob_lo")?;
        self.eve_lo.validate("eve_lo")?;
        if let PhaseOffset::Fixed(x) = self.eve_lo_offset {
            if !x.is_finite() {
                return Err(QepsError::config("eve_lo.static_phase_offset", "must be finite"));
            }
        }
        self.fiber.validate()?;
        self.tap.validate()?;
        if !(self.amplifier.gain_db >= 0.0) {
            return Err(QepsError::config("amplifier.gain_db", "gain must be >= 0 dB"));
        }
        for (name, rx) in [("bob", &self.bob), ("eve", &self.eve)] {
            if let CpeMode::Blind { window, test_phases } = rx.cpe {
                if window == 0 {
                    return Err(QepsError::config(format!("{name}.cpe_window"), "must be >= 1"));
                }
                if test_phases < 2 {
                    return Err(QepsError::config(format!("{name}.cpe_test_phases"), "must be >= 2"));
                }
            }
        }
        if self.eve.sync_offset_blocks != 0 || self.eve.sync_offset_symbols != 0 {
            return Err(QepsError::config("eve.sync_offset_blocks", "the eavesdropper has no keystream to offset"));
        }
        if let Ambiguity::Preamble { blocks } = self.ambiguity {
            if blocks == 0 {
                return Err(QepsError::config("preamble_blocks", "must be >= 1"));
            }
            if self.keystream.period_choices.is_some() {
                return Err(QepsError::config("preamble_blocks", "preamble needs a fixed keystream period"));
            }
        }
        if !(self.hd_fec_threshold > 0.0) {
            return Err(QepsError::config("hd_fec_threshold", "must be > 0"));
        }
        Ok(())
    }

    /// Scenario text that [`ScenarioConfig::parse`] maps back to `self`.
    pub fn to_text(&self) -> String {
        let mut o = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(o, "{k} = {v}");
        };
        kv("format", self.format.to_string());
        kv("sequence_length_bits", self.sequence_length_bits.to_string());
        kv("symbol_rate", self.symbol_rate.to_string());
        kv("encryption", self.encryption.to_string());
        kv("start_block", self.start_block.to_string());
        kv("keystream.period_symbols", self.keystream.period_symbols.to_string());
        kv("keystream.phase_deviation", self.keystream.phase_deviation.to_string());
        kv("keystream.levels", self.keystream.levels.to_string());
        if let Some(c) = &self.keystream.period_choices {
            kv("keystream.period_choices", c.iter().map(|p| p.to_string()).collect::<Vec<_>>().join(","));
        }
        if let Some(k) = &self.key_override {
            kv("keystream.key_hex", hex::encode(k));
        }
        for (name, l) in [("alice_laser", &self.alice_laser), ("bob_lo", &self.bob_lo)] {
            kv(&format!("{name}.power_dbm"), l.power_dbm.to_string());
            kv(&format!("{name}.linewidth_hz"), l.linewidth_hz.to_string());
            kv(&format!("{name}.static_phase_offset"), l.static_phase_offset.to_string());
        }
        kv("eve_lo.power_dbm", self.eve_lo.power_dbm.to_string());
        kv("eve_lo.linewidth_hz", self.eve_lo.linewidth_hz.to_string());
        kv(
            "eve_lo.static_phase_offset",
            match self.eve_lo_offset {
                PhaseOffset::Random => "random".into(),
                PhaseOffset::Fixed(x) => x.to_string(),
            },
        );
        kv("insertion_loss_db", self.insertion_loss_db.to_string());
        kv("fiber.length_km", self.fiber.length_km.to_string());
        kv("fiber.attenuation_db_per_km", self.fiber.attenuation_db_per_km.to_string());
        kv("fiber.dispersion_ps_nm_km", self.fiber.dispersion_ps_nm_km.to_string());
        kv("fiber.wavelength_m", self.fiber.wavelength_m.to_string());
        kv("tap.ratio", self.tap.ratio.to_string());
        kv("tap.coupling_loss_db", self.tap.coupling_loss_db.to_string());
        kv("tap.max_ratio", self.tap.max_ratio.to_string());
        kv("amplifier.gain_db", self.amplifier.gain_db.to_string());
        kv("amplifier.noise_figure_db", self.amplifier.noise_figure_db.to_string());
        kv("quantum_noise", self.quantum_noise.to_string());
        for (name, rx) in [("bob", &self.bob), ("eve", &self.eve)] {
            match rx.cpe {
                CpeMode::Off => kv(&format!("{name}.cpe"), "off".into()),
                CpeMode::Blind { window, test_phases } => {
                    kv(&format!("{name}.cpe"), "blind".into());
                    kv(&format!("{name}.cpe_window"), window.to_string());
                    kv(&format!("{name}.cpe_test_phases"), test_phases.to_string());
                }
            }
            kv(&format!("{name}.cd_compensation"), rx.cd_compensation.to_string());
            kv(&format!("{name}.decrypt_before_cd"), rx.decrypt_before_cd.to_string());
            if name == "bob" {
                kv("bob.sync_offset_blocks", rx.sync_offset_blocks.to_string());
                kv("bob.sync_offset_symbols", rx.sync_offset_symbols.to_string());
            }
        }
        match self.ambiguity {
            Ambiguity::Genie => kv("ambiguity", "genie".into()),
            Ambiguity::Preamble { blocks } => kv("preamble_blocks", blocks.to_string()),
        }
        kv("seeds.key", self.key_seed.to_string());
        kv("seeds.noise", self.noise_seed.to_string());
        kv("repetitions", self.repetitions.to_string());
        kv(
            "vary",
            match self.vary {
                Vary::Noise => "noise".into(),
                Vary::Key => "key".into(),
            },
        );
        kv("hd_fec_threshold", self.hd_fec_threshold.to_string());
        o
    }

    /// Mean photons per symbol leaving the modulator.
    pub fn transmit_photons(&self) -> Result<f64> {
        let cw = dbm_to_photons_per_symbol(self.alice_laser.power_dbm, self.symbol_rate, self.fiber.wavelength_m)?;
        Ok(cw * 10f64.powf(-self.insertion_loss_db / 10.0))
    }
}

/// Reports of the three receivers for one repetition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkOutcome {
    pub bob_no_tap: LinkReport,
    pub bob_tapped: LinkReport,
    pub eve: LinkReport,
    pub transmit_photons: f64,
    pub eve_lo_offset: f64,
    pub noise_seed: u64,
    pub hd_fec_threshold: f64,
    pub bob_below_hd_fec: bool,
}

impl LinkOutcome {
    pub fn reports(&self) -> [&LinkReport; 3] {
        [&self.bob_no_tap, &self.bob_tapped, &self.eve]
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| QepsError::Serialization(e.to_string()))
    }
}

struct Transmission {
    constellation: Constellation,
    truth: GroundTruth,
    /// Field at Alice's output, before the tap.
    launched: IqFrame,
    keystream: KeystreamConfig,
    root: RandomStream,
    noise_seed: u64,
}

/// Unscored symbols at each frame edge. Dispersion is simulated on a
/// circular grid, and receiver phase noise between dispersion and its
/// compensation leaks the far edge of the frame into the near one.
pub fn guard_symbols(s: &ScenarioConfig) -> usize {
    let memory = dispersion_memory_symbols(&s.fiber, s.symbol_rate);
    if memory == 0.0 {
        0
    } else {
        (4.0 * memory).ceil() as usize + 8
    }
}

fn transmit(s: &ScenarioConfig, rep: usize) -> Result<Transmission> {
    s.validate()?;
    let c = build_constellation(s.format);
    let k = c.bits_per_symbol();
    let n_data = s.sequence_length_bits / k;
    let guard = guard_symbols(s);
    // the leading guard doubles as the preamble when there is one
    let n_lead = match s.ambiguity {
        Ambiguity::Genie => guard,
        Ambiguity::Preamble { blocks } => blocks * s.keystream.period_symbols,
    };
    let noise_seed = s.noise_seed_for(rep);
    let root = RandomStream::from_u64(noise_seed, "qeps/link");
    let bits = BitStream::random(&root.derive("bits"), (n_lead + n_data + guard) * k);
    let symbols = map_bits(&bits, &c, s.symbol_rate)?;
    let truth = GroundTruth {
        symbols: symbols.samples().to_vec(),
        data_bits: bits.slice(n_lead * k..(n_lead + n_data) * k),
        data: n_lead..n_lead + n_data,
    };

    let keystream = KeystreamConfig {
        key: s.key_for(rep)?,
        ..s.keystream.clone()
    };
    let mut field = symbols.scaled(s.transmit_photons()?.sqrt());
    if s.encryption {
        let plan = CipherContext::synchronized(keystream.clone()).transmit_plan(field.len(), s.start_block)?;
        field = encrypt(&field, &plan)?;
    }
    let theta = wiener_phase(field.len(), s.alice_laser.linewidth_hz, s.symbol_rate, &root.derive("alice_phase"));
    let launched = apply_phase(&field, &theta, s.alice_laser.static_phase_offset)?;
    Ok(Transmission {
        constellation: c,
        truth,
        launched,
        keystream,
        root,
        noise_seed,
    })
}

fn receiver_config(s: &ScenarioConfig, id: ReceiverId, keystream: &KeystreamConfig, eve_offset: f64) -> ReceiverConfig {
    let (settings, lo) = match id {
        ReceiverId::Eve => (
            &s.eve,
            LaserConfig {
                static_phase_offset: eve_offset,
                ..s.eve_lo
            },
        ),
        _ => (&s.bob, s.bob_lo),
    };
    let mut rx = ReceiverConfig::new(id, lo);
    rx.cpe = settings.cpe;
    rx.decrypt_before_cd = settings.decrypt_before_cd;
    rx.start_block = s.start_block;
    rx.ambiguity = match s.ambiguity {
        Ambiguity::Genie => AmbiguityMode::Genie,
        Ambiguity::Preamble { blocks } => AmbiguityMode::Preamble {
            n_symbols: blocks * s.keystream.period_symbols,
        },
    };
    if id != ReceiverId::Eve {
        if settings.cd_compensation {
            rx.cd_compensation = Some(s.fiber);
        }
        if s.encryption {
            rx.cipher = Some(CipherContext {
                keystream: keystream.clone(),
                sync_offset_blocks: settings.sync_offset_blocks,
                sync_offset_symbols: settings.sync_offset_symbols,
            });
        }
    }
    rx
}

fn eve_offset(s: &ScenarioConfig, root: &RandomStream) -> f64 {
    match s.eve_lo_offset {
        PhaseOffset::Fixed(x) => x,
        PhaseOffset::Random => root.derive("eve_lo_offset").cursor(0).next_open01() * TAU - PI,
    }
}

/// Bob's received field: fiber then pre-amplifier.
fn bob_path(s: &ScenarioConfig, field: &IqFrame, root: &RandomStream) -> Result<IqFrame> {
    let f = fiber_propagate(field, &s.fiber);
    edfa_amplify(&f, s.amplifier.gain_db, s.amplifier.noise_figure_db, &root.derive("edfa"))
}

fn detector_streams(s: &ScenarioConfig, root: &RandomStream, who: &str) -> DetectorStreams {
    DetectorStreams {
        quantum_noise: s.quantum_noise,
        ..DetectorStreams::from_root(&root.derive(who))
    }
}

/// One repetition of the link with all three receivers. The untapped and
/// tapped Bob runs reuse the same noise streams.
pub fn run_link_rep(s: &ScenarioConfig, rep: usize) -> Result<LinkOutcome> {
    let tx = transmit(s, rep)?;
    let c = &tx.constellation;
    let offset = eve_offset(s, &tx.root);
    let bob_streams = detector_streams(s, &tx.root, "bob");

    let (untapped, _) = tap_split(&tx.launched, &TapConfig { ratio: 0.0, ..s.tap })?;
    let (to_bob, to_eve) = tap_split(&tx.launched, &s.tap)?;

    let bob_rx = receiver_config(s, ReceiverId::BobNoTap, &tx.keystream, offset);
    let bob_no_tap = run_receiver(&bob_path(s, &untapped, &tx.root)?, &bob_rx, c, &bob_streams, Some(&tx.truth))?;
    let bob_rx = ReceiverConfig {
        id: ReceiverId::BobTapped,
        ..bob_rx
    };
    let bob_tapped = run_receiver(&bob_path(s, &to_bob, &tx.root)?, &bob_rx, c, &bob_streams, Some(&tx.truth))?;
    let eve_rx = receiver_config(s, ReceiverId::Eve, &tx.keystream, offset);
    let eve = run_receiver(&to_eve, &eve_rx, c, &detector_streams(s, &tx.root, "eve"), Some(&tx.truth))?;

    Ok(LinkOutcome {
        bob_below_hd_fec: bob_tapped.ber < s.hd_fec_threshold,
        bob_no_tap,
        bob_tapped,
        eve,
        transmit_photons: s.transmit_photons()?,
        eve_lo_offset: offset,
        noise_seed: tx.noise_seed,
        hd_fec_threshold: s.hd_fec_threshold,
    })
}

/// First repetition of the scenario.
pub fn run_link(s: &ScenarioConfig) -> Result<LinkOutcome> {
    run_link_rep(s, 0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    PreDecrypt,
    PostDecrypt,
    PostCpe,
}

impl std::str::FromStr for Stage {
    type Err = QepsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pre-decrypt" | "pre_decrypt" => Ok(Stage::PreDecrypt),
            "post-decrypt" | "post_decrypt" => Ok(Stage::PostDecrypt),
            "post-cpe" | "post_cpe" => Ok(Stage::PostCpe),
            _ => Err(QepsError::invalid(format!("unknown stage `{s}`"))),
        }
    }
}

/// Pipeline signals of one receiver (tapped link), for constellation dumps.
pub fn capture_reception(s: &ScenarioConfig, id: ReceiverId, rep: usize) -> Result<Reception> {
    let tx = transmit(s, rep)?;
    let offset = eve_offset(s, &tx.root);
    let (to_bob, to_eve) = match id {
        ReceiverId::BobNoTap => tap_split(&tx.launched, &TapConfig { ratio: 0.0, ..s.tap })?,
        _ => tap_split(&tx.launched, &s.tap)?,
    };
    let rx = receiver_config(s, id, &tx.keystream, offset);
    match id {
        ReceiverId::Eve => receive(&to_eve, &rx, &tx.constellation, &detector_streams(s, &tx.root, "eve"), Some(&tx.truth)),
        _ => receive(&bob_path(s, &to_bob, &tx.root)?, &rx, &tx.constellation, &detector_streams(s, &tx.root, "bob"), Some(&tx.truth)),
    }
}

impl Reception {
    pub fn stage(&self, stage: Stage) -> &IqFrame {
        match stage {
            Stage::PreDecrypt => &self.pre_decrypt,
            Stage::PostDecrypt => &self.post_decrypt,
            Stage::PostCpe => &self.post_cpe,
        }
    }
}

/// Writes `symbol_index,re,im` rows.
pub fn write_constellation_csv<W: Write>(frame: &IqFrame, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let ser = |e: csv::Error| QepsError::Serialization(e.to_string());
    w.write_record(["symbol_index", "re", "im"]).map_err(ser)?;
    for (i, z) in frame.samples().iter().enumerate() {
        w.write_record([i.to_string(), z.re.to_string(), z.im.to_string()]).map_err(ser)?;
    }
    w.flush().map_err(|e| QepsError::Serialization(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    CwPower,
    PhaseDeviation,
    Period,
    Linewidth,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::CwPower => "cw_power",
            SweepAxis::PhaseDeviation => "phase_deviation",
            SweepAxis::Period => "period",
            SweepAxis::Linewidth => "linewidth",
        }
    }

    /// Scenario at grid value `v`: dBm, degrees, symbols or Hz.
    pub fn apply(self, s: &ScenarioConfig, v: f64) -> Result<ScenarioConfig> {
        let mut out = s.clone();
        match self {
            SweepAxis::CwPower => {
                out.alice_laser.power_dbm = v;
                out.bob_lo.power_dbm = v;
                out.eve_lo.power_dbm = v;
            }
            SweepAxis::PhaseDeviation => out.keystream.phase_deviation = v.to_radians(),
            SweepAxis::Period => {
                if v < 1.0 || v.fract() != 0.0 {
                    return Err(QepsError::config("keystream.period_symbols", format!("period must be a positive integer, got {v}")));
                }
                out.keystream.period_symbols = v as usize;
            }
            SweepAxis::Linewidth => {
                out.alice_laser.linewidth_hz = v;
                out.bob_lo.linewidth_hz = v;
                out.eve_lo.linewidth_hz = v;
            }
        }
        out.validate()?;
        Ok(out)
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = QepsError;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "cw_power" => Ok(SweepAxis::CwPower),
            "phase_deviation" => Ok(SweepAxis::PhaseDeviation),
            "period" => Ok(SweepAxis::Period),
            "linewidth" => Ok(SweepAxis::Linewidth),
            _ => Err(QepsError::config("axis", format!("unknown sweep axis `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis_name: String,
    pub axis_value: f64,
    pub receiver: ReceiverId,
    pub ber_mean: f64,
    pub ber_std: f64,
    pub ser_mean: f64,
    pub n_bits: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRow {
    pub axis_name: String,
    pub axis_value: f64,
    pub receiver: ReceiverId,
    pub repetition: usize,
    pub seed: u64,
    pub ber: f64,
    pub ser: f64,
    pub n_bits: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
    pub raw: Vec<RawRow>,
}

impl SweepResult {
    /// Row for one grid value and receiver.
    pub fn row(&self, value: f64, receiver: ReceiverId) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.axis_value == value && r.receiver == receiver)
    }
}

/// Sample mean and sample standard deviation (zero for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

const RECEIVERS: [ReceiverId; 3] = [ReceiverId::BobNoTap, ReceiverId::BobTapped, ReceiverId::Eve];

/// Runs every grid point and repetition in parallel; rows come out in grid
/// order, then receiver order, whatever order the cells finish in.
pub fn sweep(s: &ScenarioConfig, axis: SweepAxis, grid: &[f64]) -> Result<SweepResult> {
    if grid.is_empty() {
        return Err(QepsError::config("grid", "sweep grid must not be empty"));
    }
    let points = grid.iter().map(|&v| axis.apply(s, v)).collect::<Result<Vec<_>>>()?;
    let reps = s.repetitions;
    let outcomes = (0..points.len() * reps)
        .into_par_iter()
        .map(|cell| run_link_rep(&points[cell / reps], cell % reps))
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    let mut raw = Vec::new();
    for (gi, &value) in grid.iter().enumerate() {
        let cell = &outcomes[gi * reps..(gi + 1) * reps];
        for (ri, &receiver) in RECEIVERS.iter().enumerate() {
            let reports: Vec<&LinkReport> = cell.iter().map(|o| o.reports()[ri]).collect();
            let bers: Vec<f64> = reports.iter().map(|r| r.ber).collect();
            let sers: Vec<f64> = reports.iter().map(|r| r.ser).collect();
            let (ber_mean, ber_std) = mean_std(&bers);
            rows.push(SweepRow {
                axis_name: axis.as_str().into(),
                axis_value: value,
                receiver,
                ber_mean,
                ber_std,
                ser_mean: mean_std(&sers).0,
                n_bits: reports.iter().map(|r| r.n_bits).sum(),
                seed: s.noise_seed,
            });
            for (rep, (o, r)) in cell.iter().zip(&reports).enumerate() {
                raw.push(RawRow {
                    axis_name: axis.as_str().into(),
                    axis_value: value,
                    receiver,
                    repetition: rep,
                    seed: o.noise_seed,
                    ber: r.ber,
                    ser: r.ser,
                    n_bits: r.n_bits,
                });
            }
        }
    }
    Ok(SweepResult { axis, rows, raw })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Csv,
    Json,
}

pub const SWEEP_CSV_HEADER: [&str; 8] = ["axis_name", "axis_value", "receiver", "ber_mean", "ber_std", "ser_mean", "n_bits", "seed"];

fn csv_err(e: csv::Error) -> QepsError {
    QepsError::Serialization(e.to_string())
}

pub fn write_sweep_csv<W: Write>(result: &SweepResult, out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(SWEEP_CSV_HEADER).map_err(csv_err)?;
    for r in &result.rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| QepsError::Serialization(e.to_string()))
}

/// Per-repetition rows, from which the aggregated statistics can be recomputed.
pub fn write_raw_csv<W: Write>(result: &SweepResult, out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(["axis_name", "axis_value", "receiver", "repetition", "seed", "ber", "ser", "n_bits"])
        .map_err(csv_err)?;
    for r in &result.raw {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| QepsError::Serialization(e.to_string()))
}

pub fn export(result: &SweepResult, path: &Path, format: ExportFormat) -> Result<()> {
    let io = |source| QepsError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = std::fs::File::create(path).map_err(io)?;
    let mut out = std::io::BufWriter::new(file);
    match format {
        ExportFormat::Csv => write_sweep_csv(result, &mut out)?,
        ExportFormat::Json => {
            serde_json::to_writer_pretty(&mut out, result).map_err(|e| QepsError::Serialization(e.to_string()))?;
            out.write_all(b"\n").map_err(io)?;
        }
    }
    out.flush().map_err(io)
}
