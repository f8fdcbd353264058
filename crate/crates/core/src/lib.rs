//! Changeable-rate CSI feedback compression toolkit.
//!
//! The crate is organized around the feedback pipeline of a massive-MIMO
//! FDD system: the UE compresses the angular-delay CSI matrix into a short
//! codeword, optionally truncates it to the current overhead budget and
//! quantizes it into a bit stream; the BS de-quantizes, zero-pads and
//! reconstructs the channel.
//!
//! Modules:
//! - [`channel`]: synthetic multipath channel generation, 2-D DFT
//!   transforms, normalization and dataset I/O.
//! - [`netcore`]: minimal dense/conv layer stack with reverse-mode
//!   gradients, parameter/FLOP accounting and a finite-difference checker.
//! - [`focu`]: feedback overhead control (truncate / zero-pad / overhead
//!   sampling) and the changeable-rate training loss.
//! - [`quant`]: quantizers (uniform, mu-law, soft-to-hard, PQB with a
//!   bump-function surrogate gradient), entropy and bit packing.
//! - [`models`]: CsiNetPro / DualNetSph builders and the assembled
//!   encoder-quantizer-decoder feedback model.
//! - [`harness`]: training/evaluation loops, metrics, experiment runner
//!   and report rendering.

pub mod channel;
pub mod focu;
pub mod harness;
pub mod models;
pub mod netcore;
pub mod quant;
