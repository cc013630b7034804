//! Keyed per-symbol phase plans.
//!
//! The pre-shared key seeds a counter-based generator. Block `b` of the plan
//! holds one phase chosen from `levels` equally spaced values in
//! `[0, phase_deviation]`; the block lasts `period_symbols` symbols, or a
//! keyed choice from `period_choices` when period randomization is on.

use std::f64::consts::TAU;

use crate::error::{QepsError, Result};
use crate::iqcore::{RandomStream, MAX_SEED_BYTES};

pub const DEFAULT_PERIOD_SYMBOLS: usize = 1024;
pub const DEFAULT_LEVELS: u32 = 64;

/// Source of keyed block selections. Both ends of the link must use the same
/// implementation; swap it to plug in a different generator.
pub trait BlockSelector: Send + Sync {
    /// Uniform choice in `0..n` for block `block`, under stream `purpose`.
    fn select(&self, purpose: SelectPurpose, block: u64, n: u64) -> u64;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectPurpose {
    Level,
    Period,
}

/// Default selector: ChaCha20 counter stream keyed by the pre-shared secret.
#[derive(Debug, Clone)]
pub struct KeyedSelector {
    level: RandomStream,
    period: RandomStream,
}

impl KeyedSelector {
    pub fn new(key: &[u8]) -> Result<Self> {
        let root = RandomStream::new(key, "qeps/keystream")?;
        Ok(KeyedSelector {
            level: root.derive("level"),
            period: root.derive("period"),
        })
    }
}

impl BlockSelector for KeyedSelector {
    fn select(&self, purpose: SelectPurpose, block: u64, n: u64) -> u64 {
        let stream = match purpose {
            SelectPurpose::Level => &self.level,
            SelectPurpose::Period => &self.period,
        };
        stream.cursor(block).next_below(n)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeystreamConfig {
    pub key: Vec<u8>,
    pub period_symbols: usize,
    /// Maximum phase, radians, in `[0, 2 pi)`.
    pub phase_deviation: f64,
    pub levels: u32,
    /// When set, each block length is a keyed pick from this list and
    /// `period_symbols` is ignored.
    pub period_choices: Option<Vec<usize>>,
}

impl KeystreamConfig {
    pub fn new(key: Vec<u8>, period_symbols: usize, phase_deviation: f64, levels: u32) -> Result<Self> {
        let cfg = KeystreamConfig {
            key,
            period_symbols,
            phase_deviation,
            levels,
            period_choices: None,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.key.is_empty() || self.key.len() > MAX_SEED_BYTES {
            return Err(QepsError::config(
                "keystream.key",
                format!("key must be 1..={MAX_SEED_BYTES} bytes, got {}", self.key.len()),
            ));
        }
        if self.period_symbols == 0 {
            return Err(QepsError::config("keystream.period_symbols", "period must be >= 1"));
        }
        if !(0.0..TAU).contains(&self.phase_deviation) {
            return Err(QepsError::config(
                "keystream.phase_deviation",
                format!("deviation must lie in [0, 2pi), got {}", self.phase_deviation),
            ));
        }
        if self.levels == 0 {
            return Err(QepsError::config("keystream.levels", "levels must be >= 1"));
        }
        if let Some(choices) = &self.period_choices {
            if choices.is_empty() || choices.contains(&0) {
                return Err(QepsError::config(
                    "keystream.period_choices",
                    "period choices must be a non-empty list of positive lengths",
                ));
            }
        }
        Ok(())
    }

    /// Spacing between adjacent quantized phases.
    pub fn level_step(&self) -> f64 {
        if self.levels <= 1 {
            0.0
        } else {
            self.phase_deviation / f64::from(self.levels - 1)
        }
    }

    /// Phase of level `k`.
    pub fn level_phase(&self, k: u32) -> f64 {
        f64::from(k) * self.level_step()
    }
}

/// The realized encryption phase for each symbol of a frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PhasePlan {
    phases: Vec<f64>,
    block_boundaries: Vec<usize>,
}

impl PhasePlan {
    /// Plan from arbitrary per-symbol phases; a boundary is recorded at every
    /// change of value.
    pub fn from_phases(phases: Vec<f64>) -> Result<Self> {
        if phases.is_empty() {
            return Err(QepsError::invalid("phase plan must cover at least one symbol"));
        }
        if phases.iter().any(|p| !p.is_finite()) {
            return Err(QepsError::invalid("phase plan contains non-finite phase"));
        }
        let mut block_boundaries = vec![0];
        block_boundaries.extend((1..phases.len()).filter(|&i| phases[i] != phases[i - 1]));
        Ok(PhasePlan {
            phases,
            block_boundaries,
        })
    }

    /// All-zero plan (encryption off).
    pub fn zeros(n: usize) -> Self {
        PhasePlan {
            phases: vec![0.0; n.max(1)],
            block_boundaries: vec![0],
        }
    }

    pub fn phases(&self) -> &[f64] {
        &self.phases
    }

    pub fn block_boundaries(&self) -> &[usize] {
        &self.block_boundaries
    }

    pub fn len(&self) -> usize {
        self.phases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phases.is_empty()
    }

    /// Per-symbol sum of two plans (the plan equivalent to applying both).
    pub fn compose(&self, other: &PhasePlan) -> Result<PhasePlan> {
        if self.len() != other.len() {
            return Err(QepsError::invalid("cannot compose plans of different length"));
        }
        PhasePlan::from_phases(
            self.phases
                .iter()
                .zip(&other.phases)
                .map(|(a, b)| (a + b).rem_euclid(TAU))
                .collect(),
        )
    }
}

/// Generates plans for one keystream configuration.
pub struct PlanGenerator<S: BlockSelector = KeyedSelector> {
    cfg: KeystreamConfig,
    selector: S,
}

impl PlanGenerator<KeyedSelector> {
    pub fn new(cfg: KeystreamConfig) -> Result<Self> {
        cfg.validate()?;
        let selector = KeyedSelector::new(&cfg.key)?;
        Ok(PlanGenerator { cfg, selector })
    }
}

impl<S: BlockSelector> PlanGenerator<S> {
    pub fn with_selector(cfg: KeystreamConfig, selector: S) -> Result<Self> {
        cfg.validate()?;
        Ok(PlanGenerator { cfg, selector })
    }

    pub fn config(&self) -> &KeystreamConfig {
        &self.cfg
    }

    /// Quantized level index of block `block`.
    pub fn block_level(&self, block: i64) -> u32 {
        if self.cfg.levels == 1 {
            return 0;
        }
        self.selector
            .select(SelectPurpose::Level, block as u64, u64::from(self.cfg.levels)) as u32
    }

    pub fn block_len(&self, block: i64) -> usize {
        match &self.cfg.period_choices {
            None => self.cfg.period_symbols,
            Some(choices) => {
                let k = self
                    .selector
                    .select(SelectPurpose::Period, block as u64, choices.len() as u64);
                choices[k as usize]
            }
        }
    }

    /// Plan of `n_symbols` symbols beginning at the first symbol of block
    /// `start_block`.
    pub fn generate(&self, n_symbols: usize, start_block: i64) -> Result<PhasePlan> {
        if n_symbols == 0 {
            return Err(QepsError::invalid("plan must cover at least one symbol"));
        }
        let mut phases = Vec::with_capacity(n_symbols);
        let mut block_boundaries = Vec::new();
        let mut block = start_block;
        while phases.len() < n_symbols {
            block_boundaries.push(phases.len());
            let phase = if self.cfg.phase_deviation == 0.0 {
                0.0
            } else {
                self.cfg.level_phase(self.block_level(block))
            };
            let take = self.block_len(block).min(n_symbols - phases.len());
            phases.extend(std::iter::repeat(phase).take(take));
            block = block.wrapping_add(1);
        }
        Ok(PhasePlan {
            phases,
            block_boundaries,
        })
    }

    /// The plan a receiver slipped by `offset_blocks` keystream blocks uses.
    pub fn generate_offset_blocks(&self, n_symbols: usize, start_block: i64, offset_blocks: i64) -> Result<PhasePlan> {
        self.generate(n_symbols, start_block.wrapping_add(offset_blocks))
    }

    /// The plan a receiver slipped by `offset_symbols` symbols uses: symbol
    /// `i` gets the phase of symbol `i + offset_symbols` of the true plan.
    pub fn generate_offset_symbols(&self, n_symbols: usize, start_block: i64, offset_symbols: i64) -> Result<PhasePlan> {
        if offset_symbols == 0 {
            return self.generate(n_symbols, start_block);
        }
        let (first_block, skip) = match &self.cfg.period_choices {
            None => {
                let p = self.cfg.period_symbols as i64;
                let global = start_block * p + offset_symbols;
                (global.div_euclid(p), global.rem_euclid(p) as usize)
            }
            Some(_) if offset_symbols > 0 => (start_block, offset_symbols as usize),
            Some(_) => {
                return Err(QepsError::invalid(
                    "negative symbol offsets need a fixed period",
                ))
            }
        };
        let wide = self.generate(n_symbols + skip, first_block)?;
        PhasePlan::from_phases(wide.phases[skip..].to_vec())
    }
}

/// Convenience wrapper over [`PlanGenerator::generate`] with the keyed selector.
pub fn generate_plan(cfg: &KeystreamConfig, n_symbols: usize, start_block: i64) -> Result<PhasePlan> {
    PlanGenerator::new(cfg.clone())?.generate(n_symbols, start_block)
}

/// Convenience wrapper over [`PlanGenerator::generate_offset_blocks`].
pub fn plan_offset(cfg: &KeystreamConfig, n_symbols: usize, start_block: i64, offset_blocks: i64) -> Result<PhasePlan> {
    PlanGenerator::new(cfg.clone())?.generate_offset_blocks(n_symbols, start_block, offset_blocks)
}
