//! caveforge: intra-section code-cave rewriting for PE32 binaries and
//! adversarial byte optimization against a byte-level CNN detector.
//!
//! The crate is organized around one pipeline:
//!
//! ```text
//!  pe       parse / edit / re-serialize PE32 files byte-exactly
//!  cave     choose a target section, plan and open a code cave
//!  loader   emit the restoring x86 stub, map images, emulate, verify
//!  malconv  byte-level gated-convolution detector (embed/forward/grad/train)
//!  attack   gradient-guided byte optimization inside caves or appended tails
//!  harness  synthetic corpora, section statistics, evasion campaigns, CLI
//! ```

pub mod attack;
pub mod cave;
pub mod cli;
pub mod harness;
pub mod loader;
pub mod malconv;
pub mod pe;
