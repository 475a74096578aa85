//! Desk-scale toolkit for fuzzing FPGA configuration engines.
//!
//! The crate is organized around five layers:
//!
//! * [`bitstream`]: bit-exact encoding/decoding of 32-bit configuration
//!   words, packets and the running write CRC.
//! * [`crypto`]: the surrogate cipher suite: an XOR-malleable counter-mode
//!   keystream, a GF(2^32) block checksum evaluated every 8th word, and a
//!   textbook RSA signature with a fused public-key digest.
//! * [`grammar`]: declarative bitstream templates with fuzzing masks and
//!   deterministic, exhaustive case enumeration.
//! * [`sim`]: a register-level simulation of an UltraScale(+)-style
//!   configuration engine, including its crash modes and both known
//!   security flaws.
//! * [`harness`] / [`wire`]: crash-settings evaluation, campaign
//!   execution with sharding and resume, and the newline-delimited TCP
//!   target protocol.

pub mod bitstream;
pub mod crypto;
pub mod geometry;
pub mod grammar;
pub mod harness;
mod hexfmt;
pub mod regs;
pub mod sim;
pub mod wire;

pub use bitstream::{BitstreamImage, CommandCode, Opcode, PacketHeader, RegisterAddress, Word};
pub use geometry::DeviceGeometry;
pub use grammar::{FuzzPosition, FuzzRequest, TemplateNode};
pub use harness::{Campaign, CrashRecord, CrashSettings, FuzzerSpec, Outcome, Target};
pub use sim::{DeviceConfig, EngineState, Lifecycle};
