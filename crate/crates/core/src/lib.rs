//! Simulation library for phase-space encryption of coherent optical links.
//!
//! A keyed phase plan rotates each transmitted symbol block; the legitimate
//! receiver removes it digitally after coherent detection, while a tapping
//! eavesdropper sees a phase-randomized signal. The crate models the whole
//! link in normalized field units (`|a|^2` = photons per symbol) and
//! estimates the information each party can extract.

pub mod channel;
pub mod error;
pub mod expharness;
pub mod infotheory;
pub mod iqcore;
pub mod keystream;
pub mod modem;
pub mod phasecipher;
pub mod rxdsp;

pub use error::{QepsError, Result};
