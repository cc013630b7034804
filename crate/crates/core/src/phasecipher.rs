//! The phase-shifting operator and its conjugate transpose.
//!
//! Encryption multiplies sample `i` by `exp(+j phi_i)`, decryption by the
//! conjugate of the same phasor. Both ends compute the phasor from the same
//! quantized phase value, so cancellation leaves no phase residue.

use num_complex::Complex64;

use crate::error::{QepsError, Result};
use crate::iqcore::IqFrame;
use crate::keystream::{KeystreamConfig, PhasePlan, PlanGenerator};

/// Keystream plus the receiver's synchronization state.
#[derive(Debug, Clone, PartialEq)]
pub struct CipherContext {
    pub keystream: KeystreamConfig,
    /// Keystream blocks the receiver is slipped by; 0 for a synchronized party.
    pub sync_offset_blocks: i64,
    /// Additional slip in symbols.
    pub sync_offset_symbols: i64,
}

impl CipherContext {
    pub fn synchronized(keystream: KeystreamConfig) -> Self {
        CipherContext {
            keystream,
            sync_offset_blocks: 0,
            sync_offset_symbols: 0,
        }
    }

    pub fn is_synchronized(&self) -> bool {
        self.sync_offset_blocks == 0 && self.sync_offset_symbols == 0
    }

    /// Transmit-side plan for `n` symbols from `start_block`.
    pub fn transmit_plan(&self, n: usize, start_block: i64) -> Result<PhasePlan> {
        PlanGenerator::new(self.keystream.clone())?.generate(n, start_block)
    }

    /// The plan this party believes in, including any slip.
    pub fn receive_plan(&self, n: usize, start_block: i64) -> Result<PhasePlan> {
        let gen = PlanGenerator::new(self.keystream.clone())?;
        let start = start_block.wrapping_add(self.sync_offset_blocks);
        gen.generate_offset_symbols(n, start, self.sync_offset_symbols)
    }
}

fn check_len(frame: &IqFrame, plan: &PhasePlan) -> Result<()> {
    if plan.len() < frame.len() {
        return Err(QepsError::invalid(format!(
            "plan covers {} symbols but the frame has {}",
            plan.len(),
            frame.len()
        )));
    }
    Ok(())
}

fn rotate(frame: &IqFrame, plan: &PhasePlan, conjugate: bool) -> IqFrame {
    let out = frame
        .samples()
        .iter()
        .zip(plan.phases())
        .map(|(s, &phi)| {
            let u = Complex64::from_polar(1.0, phi);
            if conjugate {
                s * u.conj()
            } else {
                s * u
            }
        })
        .collect();
    frame.with_samples(out)
}

/// Applies `exp(+j phi_i)` to each sample.
pub fn encrypt(frame: &IqFrame, plan: &PhasePlan) -> Result<IqFrame> {
    check_len(frame, plan)?;
    Ok(rotate(frame, plan, false))
}

/// Applies `exp(-j phi_i)` to each sample.
pub fn decrypt(frame: &IqFrame, plan: &PhasePlan) -> Result<IqFrame> {
    check_len(frame, plan)?;
    Ok(rotate(frame, plan, true))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::iqcore::RandomStream;
    use crate::keystream::generate_plan;
    use crate::modem::{build_constellation, count_errors, demap_hard, map_bits, BitStream, Constellation, Format};
    use std::f64::consts::{FRAC_PI_2, PI};

    fn frame(n: usize, seed: u64) -> IqFrame {
        let mut cur = RandomStream::from_u64(seed, "frame").cursor(0);
        IqFrame::new((0..n).map(|_| cur.next_complex_normal(3.0)).collect(), 1e9).unwrap()
    }

    fn ks(dev: f64, period: usize) -> KeystreamConfig {
        KeystreamConfig::new(b"k".to_vec(), period, dev, 64).unwrap()
    }

    #[test]
    fn zero_plan_is_identity() {
        let f = frame(100, 1);
        let p = PhasePlan::zeros(100);
        assert_eq!(encrypt(&f, &p).unwrap(), f);
        assert_eq!(decrypt(&f, &p).unwrap(), f);
    }

    #[test]
    fn half_turn() {
        let f = IqFrame::new(vec![Complex64::new(1.0, 0.0)], 1.0).unwrap();
        let p = PhasePlan::from_phases(vec![PI]).unwrap();
        let out = encrypt(&f, &p).unwrap().samples()[0];
        assert!((out - Complex64::new(-1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn magnitude_preserved() {
        let f = frame(5000, 2);
        let p = generate_plan(&ks(1.3, 17), 5000, 0).unwrap();
        let e = encrypt(&f, &p).unwrap();
        for (a, b) in f.samples().iter().zip(e.samples()) {
            assert!((a.norm() - b.norm()).abs() <= 4.0 * f64::EPSILON * a.norm());
        }
    }

    #[test]
    fn short_plan_rejected() {
        let f = frame(10, 3);
        assert!(encrypt(&f, &PhasePlan::zeros(9)).is_err());
        assert!(decrypt(&f, &PhasePlan::zeros(9)).is_err());
        assert!(encrypt(&f, &PhasePlan::zeros(11)).is_ok());
    }

    #[test]
    fn qam128_round_trip() {
        let c = build_constellation(Format::Qam128);
        let bits = BitStream::random(&RandomStream::from_u64(4, "b"), 65_536 * 7);
        let f = map_bits(&bits, &c, 28e9).unwrap();
        assert_eq!(f.len(), 65_536);
        let p = generate_plan(&ks(FRAC_PI_2, 1024), f.len(), 0).unwrap();
        let back = decrypt(&encrypt(&f, &p).unwrap(), &p).unwrap();
        let max_err = f
            .samples()
            .iter()
            .zip(back.samples())
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        assert!(max_err < 1e-12, "{max_err}");
    }

    /// Expected BER when transmit and receive phases are independent uniform
    /// draws from the level grid: enumerate every level pair and every label.
    fn slip_ber_oracle(c: &Constellation, cfg: &KeystreamConfig) -> f64 {
        let levels = cfg.levels as usize;
        let k = c.bits_per_symbol();
        let mut errors = 0u64;
        for a in 0..levels {
            for b in 0..levels {
                let rot = Complex64::from_polar(1.0, cfg.level_phase(a as u32) - cfg.level_phase(b as u32));
                for label in 0..c.order() {
                    let got = c.nearest_exhaustive(c.points()[label] * rot);
                    errors += u64::from((got ^ label).count_ones());
                }
            }
        }
        errors as f64 / (levels * levels * c.order() * k) as f64
    }

    #[test]
    fn one_block_slip_noiseless_psk16() {
        let c = build_constellation(Format::Psk16);
        let bits = BitStream::random(&RandomStream::from_u64(5, "b"), 4 * 262_144);
        let f = map_bits(&bits, &c, 28e9).unwrap();
        let cfg = ks(70f64.to_radians(), 1024);
        let oracle = slip_ber_oracle(&c, &cfg);
        let gen = PlanGenerator::new(cfg).unwrap();
        let tx = gen.generate(f.len(), 0).unwrap();
        let rx = gen.generate_offset_blocks(f.len(), 0, 1).unwrap();
        let out = decrypt(&encrypt(&f, &tx).unwrap(), &rx).unwrap();
        let ber = count_errors(&bits, &demap_hard(&out, &c), 4).unwrap().ber;
        // 256 blocks, per-block BER spread about 0.2
        assert!((ber - oracle).abs() < 0.05, "{ber} vs {oracle}");
        let exact = decrypt(&encrypt(&f, &tx).unwrap(), &tx).unwrap();
        assert_eq!(count_errors(&bits, &demap_hard(&exact, &c), 4).unwrap().ber, 0.0);
    }

    #[test]
    fn context_plans() {
        let mut ctx = CipherContext::synchronized(ks(FRAC_PI_2, 8));
        assert_eq!(ctx.receive_plan(100, 0).unwrap(), ctx.transmit_plan(100, 0).unwrap());
        ctx.sync_offset_blocks = 1;
        assert_eq!(ctx.receive_plan(100, 0).unwrap(), ctx.transmit_plan(100, 1).unwrap());
        ctx.sync_offset_blocks = 0;
        ctx.sync_offset_symbols = 2;
        let t = ctx.transmit_plan(102, 0).unwrap();
        assert_eq!(ctx.receive_plan(100, 0).unwrap().phases(), &t.phases()[2..]);
        assert!(!ctx.is_synchronized());
    }
}
