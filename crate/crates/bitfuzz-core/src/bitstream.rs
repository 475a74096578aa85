//! Bit-exact encoding, decoding and streaming of configuration words.
//!
//! A bitstream is a sequence of big-endian 32-bit words. Everything before
//! the sync word `0xAA995566` is an opaque plaintext preamble; after it the
//! words form packets: a header word followed by `word_count` payload words.
//!
//! Type 1 header layout (bit positions, MSB first):
//!
//! ```text
//! [31:29] kind = 001        [28:27] opcode
//! [26:13] address field     (only [17:13] select a register, rest reserved)
//! [12:11] reserved          [10:0]  word count
//! ```
//!
//! Type 2 headers (`kind = 010`) drop the address field and use [26:0] as
//! the word count.

use std::fmt;
use std::path::Path;

use thiserror::Error;

use crate::regs;

/// A 32-bit configuration word. Serialized big-endian on the wire.
pub type Word = u32;

/// Sync marker after which packet parsing begins.
pub const SYNC_WORD: Word = 0xAA99_5566;

/// A NOP header word (type 1, opcode 00, count 0).
pub const NOP_WORD: Word = 0x2000_0000;

const KIND_SHIFT: u32 = 29;
const OPCODE_SHIFT: u32 = 27;
const ADDR_SHIFT: u32 = 13;
const ADDR_MASK: Word = 0x0003_E000;
const TYPE1_COUNT_MASK: Word = 0x0000_07FF;
const TYPE2_COUNT_MASK: Word = 0x07FF_FFFF;
/// Reserved positions of a type 1 header: upper address-field bits [26:18]
/// plus [12:11].
pub const TYPE1_RESERVED_MASK: Word = 0x07FC_1800;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodecError {
    #[error("{field} {value:#x} out of range (max {max:#x})")]
    ArgumentRange {
        field: &'static str,
        value: u64,
        max: u64,
    },
    #[error("unknown header kind {0:#05b}")]
    UnknownHeaderKind(u8),
    #[error("truncated packet: header at word {0} runs past end of image")]
    TruncatedPacket(usize),
    #[error("byte stream length {0} is not a multiple of 4")]
    Misaligned(usize),
}

/// Packet opcode, bits [28:27] of a header.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Opcode {
    Nop,
    Read,
    Write,
    Reserved,
}

impl Opcode {
    pub fn from_bits(bits: u32) -> Opcode {
        match bits & 0b11 {
            0 => Opcode::Nop,
            1 => Opcode::Read,
            2 => Opcode::Write,
            _ => Opcode::Reserved,
        }
    }

    pub fn bits(self) -> u32 {
        match self {
            Opcode::Nop => 0,
            Opcode::Read => 1,
            Opcode::Write => 2,
            Opcode::Reserved => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Opcode::Nop => "NOP",
            Opcode::Read => "READ",
            Opcode::Write => "WRITE",
            Opcode::Reserved => "RSVD",
        }
    }
}

/// A validated 5-bit register address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RegisterAddress(u8);

impl RegisterAddress {
    pub fn new(addr: u8) -> Result<RegisterAddress, CodecError> {
        if addr < 32 {
            Ok(RegisterAddress(addr))
        } else {
            Err(CodecError::ArgumentRange {
                field: "register address",
                value: addr as u64,
                max: 31,
            })
        }
    }

    /// Constructor for compile-time known addresses; panics on overflow.
    pub const fn from_const(addr: u8) -> RegisterAddress {
        assert!(addr < 32);
        RegisterAddress(addr)
    }

    pub const fn value(self) -> u8 {
        self.0
    }

    pub const fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for RegisterAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match regs::register_name(self.0) {
            Some(name) => f.write_str(name),
            None => write!(f, "{}", self.0),
        }
    }
}

/// Header kind, bits [31:29]. Only `001` and `010` decode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HeaderKind {
    Type1,
    Type2,
}

/// A decoded packet header. `reserved_bits` holds the raw value of every
/// reserved position in place, so `encode` is the exact inverse of `decode`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PacketHeader {
    pub kind: HeaderKind,
    pub opcode: Opcode,
    /// Register address; only meaningful for type 1 headers.
    pub reg_addr: RegisterAddress,
    pub word_count: u32,
    pub reserved_bits: Word,
}

impl PacketHeader {
    pub fn encode(&self) -> Word {
        match self.kind {
            HeaderKind::Type1 => {
                (0b001 << KIND_SHIFT)
                    | (self.opcode.bits() << OPCODE_SHIFT)
                    | ((self.reg_addr.value() as u32) << ADDR_SHIFT)
                    | (self.word_count & TYPE1_COUNT_MASK)
                    | self.reserved_bits
            }
            HeaderKind::Type2 => {
                (0b010 << KIND_SHIFT)
                    | (self.opcode.bits() << OPCODE_SHIFT)
                    | (self.word_count & TYPE2_COUNT_MASK)
            }
        }
    }
}

/// Encode a type 1 header with all reserved bits zero.
pub fn encode_type1_header(
    opcode: Opcode,
    reg_addr: u8,
    word_count: u32,
) -> Result<Word, CodecError> {
    let reg = RegisterAddress::new(reg_addr)?;
    if word_count > TYPE1_COUNT_MASK {
        return Err(CodecError::ArgumentRange {
            field: "type 1 word count",
            value: word_count as u64,
            max: TYPE1_COUNT_MASK as u64,
        });
    }
    Ok(PacketHeader {
        kind: HeaderKind::Type1,
        opcode,
        reg_addr: reg,
        word_count,
        reserved_bits: 0,
    }
    .encode())
}

/// Encode a type 2 header (no register address, 27-bit count).
pub fn encode_type2_header(opcode: Opcode, word_count: u32) -> Result<Word, CodecError> {
    if word_count > TYPE2_COUNT_MASK {
        return Err(CodecError::ArgumentRange {
            field: "type 2 word count",
            value: word_count as u64,
            max: TYPE2_COUNT_MASK as u64,
        });
    }
    Ok(PacketHeader {
        kind: HeaderKind::Type2,
        opcode,
        reg_addr: RegisterAddress(0),
        word_count,
        reserved_bits: 0,
    }
    .encode())
}

/// Decode a header word. Kinds other than `001`/`010` are reported as
/// [`CodecError::UnknownHeaderKind`]; the simulator decides whether that is
/// fatal.
pub fn decode_header(word: Word) -> Result<PacketHeader, CodecError> {
    let kind_bits = (word >> KIND_SHIFT) as u8;
    let opcode = Opcode::from_bits(word >> OPCODE_SHIFT);
    match kind_bits {
        0b001 => Ok(PacketHeader {
            kind: HeaderKind::Type1,
            opcode,
            reg_addr: RegisterAddress(((word & ADDR_MASK) >> ADDR_SHIFT) as u8),
            word_count: word & TYPE1_COUNT_MASK,
            reserved_bits: word & TYPE1_RESERVED_MASK,
        }),
        0b010 => Ok(PacketHeader {
            kind: HeaderKind::Type2,
            opcode,
            reg_addr: RegisterAddress(0),
            word_count: word & TYPE2_COUNT_MASK,
            reserved_bits: 0,
        }),
        other => Err(CodecError::UnknownHeaderKind(other)),
    }
}

/// Configuration-engine command codes, written to the CMD register.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CommandCode {
    Null,
    Wcfg,
    Dghigh,
    Start,
    Grestore,
    Desync,
    RdwGo,
}

impl CommandCode {
    pub const fn code(self) -> Word {
        match self {
            CommandCode::Null => 0x00,
            CommandCode::Wcfg => 0x01,
            CommandCode::Dghigh => 0x03,
            CommandCode::Start => 0x05,
            CommandCode::Grestore => 0x0A,
            CommandCode::Desync => 0x0D,
            CommandCode::RdwGo => 0x16,
        }
    }

    pub fn from_word(word: Word) -> Option<CommandCode> {
        match word {
            0x00 => Some(CommandCode::Null),
            0x01 => Some(CommandCode::Wcfg),
            0x03 => Some(CommandCode::Dghigh),
            0x05 => Some(CommandCode::Start),
            0x0A => Some(CommandCode::Grestore),
            0x0D => Some(CommandCode::Desync),
            0x16 => Some(CommandCode::RdwGo),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CommandCode::Null => "NULL",
            CommandCode::Wcfg => "WCFG",
            CommandCode::Dghigh => "DGHIGH",
            CommandCode::Start => "START",
            CommandCode::Grestore => "GRESTORE",
            CommandCode::Desync => "DESYNC",
            CommandCode::RdwGo => "RDW_GO",
        }
    }
}

/// An ordered word sequence plus the position of the first word after the
/// sync word, when one is present.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitstreamImage {
    pub words: Vec<Word>,
    pub sync_offset: Option<usize>,
}

impl BitstreamImage {
    /// Build an image from raw words, locating the first sync word.
    pub fn from_words(words: Vec<Word>) -> BitstreamImage {
        let sync_offset = words.iter().position(|&w| w == SYNC_WORD).map(|i| i + 1);
        BitstreamImage { words, sync_offset }
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<BitstreamImage, CodecError> {
        if !bytes.len().is_multiple_of(4) {
            return Err(CodecError::Misaligned(bytes.len()));
        }
        let words = bytes
            .chunks_exact(4)
            .map(|c| Word::from_be_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(BitstreamImage::from_words(words))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.words.len() * 4);
        for w in &self.words {
            out.extend_from_slice(&w.to_be_bytes());
        }
        out
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<BitstreamImage, std::io::Error> {
        let bytes = std::fs::read(path)?;
        BitstreamImage::from_bytes(&bytes)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<(), std::io::Error> {
        std::fs::write(path, self.to_bytes())
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// One packet of a parsed stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Packet {
    /// Word index of the header within the image.
    pub index: usize,
    pub header: PacketHeader,
    pub payload: Vec<Word>,
}

/// A post-sync stream element. Words whose header kind does not decode stay
/// in the stream as `Unknown` so a disassembly stays lossless.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StreamItem {
    Packet(Packet),
    Unknown { index: usize, word: Word, kind: u8 },
}

/// Result of scanning an image: pre-sync preamble blob plus the packet
/// stream after the sync word.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedBitstream {
    pub preamble: Vec<Word>,
    pub synced: bool,
    pub items: Vec<StreamItem>,
}

impl ParsedBitstream {
    /// Reassemble the exact word sequence this was parsed from.
    pub fn serialize(&self) -> BitstreamImage {
        let mut words = self.preamble.clone();
        if self.synced {
            words.push(SYNC_WORD);
        }
        for item in &self.items {
            match item {
                StreamItem::Packet(p) => {
                    words.push(p.header.encode());
                    words.extend_from_slice(&p.payload);
                }
                StreamItem::Unknown { word, .. } => words.push(*word),
            }
        }
        BitstreamImage::from_words(words)
    }
}

/// Scan an image word-aligned for the sync word and group everything after
/// it greedily as header + `word_count` payload words. Words before the sync
/// word are returned as an opaque blob. A header whose payload runs past the
/// end of the image is a [`CodecError::TruncatedPacket`].
pub fn parse(image: &BitstreamImage) -> Result<ParsedBitstream, CodecError> {
    let words = &image.words;
    let sync = words.iter().position(|&w| w == SYNC_WORD);
    let (preamble, mut pos, synced) = match sync {
        Some(i) => (words[..i].to_vec(), i + 1, true),
        None => (words.to_vec(), words.len(), false),
    };

    let mut items = Vec::new();
    while pos < words.len() {
        let index = pos;
        let word = words[pos];
        match decode_header(word) {
            Ok(header) => {
                let count = header.word_count as usize;
                if pos + 1 + count > words.len() {
                    return Err(CodecError::TruncatedPacket(index));
                }
                let payload = words[pos + 1..pos + 1 + count].to_vec();
                pos += 1 + count;
                items.push(StreamItem::Packet(Packet {
                    index,
                    header,
                    payload,
                }));
            }
            Err(CodecError::UnknownHeaderKind(kind)) => {
                pos += 1;
                items.push(StreamItem::Unknown { index, word, kind });
            }
            Err(e) => return Err(e),
        }
    }

    Ok(ParsedBitstream {
        preamble,
        synced,
        items,
    })
}

fn fmt_payload_word(w: Word) -> String {
    format!("{:04x} {:04x}", w >> 16, w & 0xFFFF)
}

fn fmt_payload(payload: &[Word]) -> String {
    const FULL: usize = 16;
    const SHOWN: usize = 12;
    if payload.len() <= FULL {
        payload
            .iter()
            .map(|&w| fmt_payload_word(w))
            .collect::<Vec<_>>()
            .join("  ")
    } else {
        let head = payload[..SHOWN]
            .iter()
            .map(|&w| fmt_payload_word(w))
            .collect::<Vec<_>>()
            .join("  ");
        format!("{}  ... (+{} words)", head, payload.len() - SHOWN)
    }
}

/// Render a parsed image as text, one packet per line:
/// `@index TYPE1 WRITE reg=CMD count=1 : 0000 0016`.
pub fn disassemble(image: &BitstreamImage) -> Result<String, CodecError> {
    let parsed = parse(image)?;
    let mut out = String::new();
    if !parsed.preamble.is_empty() {
        out.push_str(&format!(
            "@0 BLOB count={} : {}\n",
            parsed.preamble.len(),
            fmt_payload(&parsed.preamble)
        ));
    }
    if parsed.synced {
        out.push_str(&format!("@{} SYNC\n", parsed.preamble.len()));
    }
    for item in &parsed.items {
        match item {
            StreamItem::Packet(p) => {
                let h = &p.header;
                let kind = match h.kind {
                    HeaderKind::Type1 => "TYPE1",
                    HeaderKind::Type2 => "TYPE2",
                };
                let mut line = format!("@{} {} {}", p.index, kind, h.opcode.name());
                if h.kind == HeaderKind::Type1 && h.opcode != Opcode::Nop {
                    line.push_str(&format!(" reg={}", h.reg_addr));
                }
                line.push_str(&format!(" count={}", h.word_count));
                if h.reserved_bits != 0 {
                    line.push_str(&format!(" rsvd={:08x}", h.reserved_bits));
                }
                if !p.payload.is_empty() {
                    line.push_str(&format!(" : {}", fmt_payload(&p.payload)));
                }
                out.push_str(&line);
                out.push('\n');
            }
            StreamItem::Unknown { index, word, kind } => {
                out.push_str(&format!(
                    "@{} UNKNOWN kind={:03b} : {}\n",
                    index,
                    kind,
                    fmt_payload_word(*word)
                ));
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Running write CRC
// ---------------------------------------------------------------------------

const fn crc32c_table() -> [u32; 256] {
    // CRC-32C (Castagnoli), reflected polynomial 0x82F63B78.
    let mut table = [0u32; 256];
    let mut i = 0;
    while i < 256 {
        let mut crc = i as u32;
        let mut bit = 0;
        while bit < 8 {
            crc = if crc & 1 != 0 {
                (crc >> 1) ^ 0x82F6_3B78
            } else {
                crc >> 1
            };
            bit += 1;
        }
        table[i] = crc;
        i += 1;
    }
    table
}

static CRC32C_TABLE: [u32; 256] = crc32c_table();

fn crc32c_append(crc: u32, data: &[u8]) -> u32 {
    let mut reg = crc ^ 0xFFFF_FFFF;
    for &b in data {
        reg = (reg >> 8) ^ CRC32C_TABLE[((reg ^ b as u32) & 0xFF) as usize];
    }
    reg ^ 0xFFFF_FFFF
}

/// The running checksum over `(register address, data word)` pairs.
///
/// Each pair is packed as the 37-bit value `addr << 32 | word` and fed as 5
/// little-endian bytes into an incremental CRC-32C. A fresh state reads 0.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CrcState {
    acc: u32,
}

impl CrcState {
    pub fn new() -> CrcState {
        CrcState::default()
    }

    pub fn feed(&mut self, reg_addr: RegisterAddress, word: Word) {
        let packed = ((reg_addr.value() as u64) << 32) | word as u64;
        let bytes = packed.to_le_bytes();
        self.acc = crc32c_append(self.acc, &bytes[..5]);
    }

    pub fn value(&self) -> Word {
        self.acc
    }

    pub fn reset(&mut self) {
        self.acc = 0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Independent bit-field packing oracle: writes each field bit by bit at
    /// the positions given in the header layout table, never reusing the
    /// shift/mask constants from the implementation.
    fn oracle_set_bits(word: &mut u32, hi: u32, lo: u32, value: u32) {
        let mut v = value;
        for pos in lo..=hi {
            if v & 1 != 0 {
                *word |= 1 << pos;
            }
            v >>= 1;
        }
        assert_eq!(v, 0, "value wider than field");
    }

    fn oracle_pack_type1(opcode: u32, reg: u32, count: u32) -> u32 {
        let mut w = 0;
        oracle_set_bits(&mut w, 31, 29, 0b001);
        oracle_set_bits(&mut w, 28, 27, opcode);
        oracle_set_bits(&mut w, 17, 13, reg);
        oracle_set_bits(&mut w, 10, 0, count);
        w
    }

    fn oracle_pack_type2(opcode: u32, count: u32) -> u32 {
        let mut w = 0;
        oracle_set_bits(&mut w, 31, 29, 0b010);
        oracle_set_bits(&mut w, 28, 27, opcode);
        oracle_set_bits(&mut w, 26, 0, count);
        w
    }

    #[test]
    fn encode_type1_matches_oracle() {
        assert_eq!(oracle_pack_type1(2, 4, 1), 0x3000_8001);
        assert_eq!(
            encode_type1_header(Opcode::Write, 4, 1).unwrap(),
            0x3000_8001
        );
        assert_eq!(encode_type1_header(Opcode::Nop, 0, 0).unwrap(), 0x2000_0000);
        assert_eq!(oracle_pack_type1(1, 7, 1), 0x2800_E001);
        assert_eq!(
            encode_type1_header(Opcode::Read, 7, 1).unwrap(),
            0x2800_E001
        );
    }

    #[test]
    fn encode_range_errors() {
        assert!(matches!(
            encode_type1_header(Opcode::Write, 32, 0),
            Err(CodecError::ArgumentRange { .. })
        ));
        assert!(matches!(
            encode_type1_header(Opcode::Write, 0, 2048),
            Err(CodecError::ArgumentRange { .. })
        ));
        assert!(matches!(
            encode_type2_header(Opcode::Write, 1 << 27),
            Err(CodecError::ArgumentRange { .. })
        ));
    }

    #[test]
    fn decode_known_headers() {
        let h = decode_header(0x3000_8001).unwrap();
        assert_eq!(h.kind, HeaderKind::Type1);
        assert_eq!(h.opcode, Opcode::Write);
        assert_eq!(h.reg_addr.value(), 4);
        assert_eq!(h.word_count, 1);
        assert_eq!(h.reserved_bits, 0);

        let h = decode_header(0x2000_0000).unwrap();
        assert_eq!((h.kind, h.opcode), (HeaderKind::Type1, Opcode::Nop));
        assert_eq!((h.reg_addr.value(), h.word_count), (0, 0));

        // Type 2 packed by the oracle: oracle_pack_type2(write, 5) gives
        // 0x50000005; the read variant is 0x48000005.
        assert_eq!(oracle_pack_type2(2, 5), 0x5000_0005);
        let h = decode_header(0x5000_0005).unwrap();
        assert_eq!((h.kind, h.opcode), (HeaderKind::Type2, Opcode::Write));
        assert_eq!(h.word_count, 5);
        let h = decode_header(oracle_pack_type2(1, 5)).unwrap();
        assert_eq!((h.kind, h.opcode), (HeaderKind::Type2, Opcode::Read));
    }

    #[test]
    fn decode_unknown_kind_carries_bits() {
        assert_eq!(
            decode_header(SYNC_WORD),
            Err(CodecError::UnknownHeaderKind(0b101))
        );
        assert_eq!(decode_header(0), Err(CodecError::UnknownHeaderKind(0)));
        assert_eq!(
            decode_header(0xFFFF_FFFF),
            Err(CodecError::UnknownHeaderKind(0b111))
        );
    }

    #[test]
    fn parse_minimal_stream() {
        let image = BitstreamImage::from_words(vec![SYNC_WORD, NOP_WORD]);
        let parsed = parse(&image).unwrap();
        assert!(parsed.preamble.is_empty());
        assert!(parsed.synced);
        assert_eq!(parsed.items.len(), 1);
        match &parsed.items[0] {
            StreamItem::Packet(p) => {
                assert_eq!(p.header.opcode, Opcode::Nop);
                assert!(p.payload.is_empty());
            }
            other => panic!("expected packet, got {other:?}"),
        }
    }

    #[test]
    fn parse_preamble_and_rdw_go() {
        let image =
            BitstreamImage::from_words(vec![0xFFFF_FFFF, SYNC_WORD, 0x3000_8001, 0x0000_0016]);
        let parsed = parse(&image).unwrap();
        assert_eq!(parsed.preamble, vec![0xFFFF_FFFF]);
        assert_eq!(parsed.items.len(), 1);
        match &parsed.items[0] {
            StreamItem::Packet(p) => {
                assert_eq!(p.header.reg_addr.value(), regs::CMD);
                assert_eq!(p.payload, vec![CommandCode::RdwGo.code()]);
            }
            other => panic!("expected packet, got {other:?}"),
        }
        assert_eq!(parsed.serialize(), image);
    }

    #[test]
    fn parse_truncated_payload() {
        let image = BitstreamImage::from_words(vec![SYNC_WORD, 0x3000_8001]);
        assert_eq!(parse(&image), Err(CodecError::TruncatedPacket(1)));
    }

    #[test]
    fn disassemble_contains_expected_line() {
        let image =
            BitstreamImage::from_words(vec![0xFFFF_FFFF, SYNC_WORD, 0x3000_8001, 0x0000_0016]);
        let text = disassemble(&image).unwrap();
        assert!(text.contains("@2 TYPE1 WRITE reg=CMD count=1 : 0000 0016"));
        assert!(text.contains("@0 BLOB count=1 : ffff ffff"));
        assert!(text.contains("@1 SYNC"));
    }

    #[test]
    fn disassemble_syncless_is_blob_only() {
        let image = BitstreamImage::from_words(vec![0x1234_5678, 0xDEAD_C0DE]);
        let text = disassemble(&image).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(text.starts_with("@0 BLOB count=2"));
    }

    #[test]
    fn crc_fresh_value_is_zero() {
        assert_eq!(CrcState::new().value(), 0);
    }

    #[test]
    fn crc_golden_vectors() {
        // Frozen from an independent bitwise CRC-32C reference.
        let cmd = RegisterAddress::new(4).unwrap();
        let mut c = CrcState::new();
        c.feed(cmd, 1);
        assert_eq!(c.value(), 0xBAF9_8E86);
        c.feed(cmd, 1);
        assert_eq!(c.value(), 0x65F5_440A);

        let mut c = CrcState::new();
        c.feed(RegisterAddress::new(6).unwrap(), 0x0000_0501);
        c.feed(RegisterAddress::new(5).unwrap(), 0x0000_0501);
        c.feed(cmd, 0x0000_0001);
        assert_eq!(c.value(), 0x0B8F_3F28);
    }

    /// Bitwise reference CRC-32C, independent of the table implementation.
    fn reference_crc32c(data: &[u8], crc: u32) -> u32 {
        let mut reg = crc ^ 0xFFFF_FFFF;
        for &b in data {
            reg ^= b as u32;
            for _ in 0..8 {
                reg = if reg & 1 != 0 {
                    (reg >> 1) ^ 0x82F6_3B78
                } else {
                    reg >> 1
                };
            }
        }
        reg ^ 0xFFFF_FFFF
    }

    #[test]
    fn crc_table_matches_bitwise_reference() {
        assert_eq!(reference_crc32c(b"123456789", 0), 0xE306_9283);
        assert_eq!(crc32c_append(0, b"123456789"), 0xE306_9283);
        let data: Vec<u8> = (0u16..256).map(|b| b as u8).collect();
        assert_eq!(
            crc32c_append(0x1234, &data),
            reference_crc32c(&data, 0x1234)
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]

        /// decode(encode(..)) is the identity for every valid field triple.
        #[test]
        fn type1_field_roundtrip(op in 0u32..4, reg in 0u8..32, count in 0u32..2048) {
            let opcode = Opcode::from_bits(op);
            let word = encode_type1_header(opcode, reg, count).unwrap();
            prop_assert_eq!(word, oracle_pack_type1(op, reg as u32, count));
            let h = decode_header(word).unwrap();
            prop_assert_eq!(h.opcode, opcode);
            prop_assert_eq!(h.reg_addr.value(), reg);
            prop_assert_eq!(h.word_count, count);
            prop_assert_eq!(h.reserved_bits, 0);
        }

        /// encode(decode(w)) == w for every word whose kind is 001 or 010,
        /// reserved bits included.
        #[test]
        fn header_word_roundtrip(w in any::<u32>()) {
            let kind = w >> 29;
            if kind == 0b001 || kind == 0b010 {
                let h = decode_header(w).unwrap();
                prop_assert_eq!(h.encode(), w);
            } else {
                prop_assert!(decode_header(w).is_err());
            }
        }

        /// Word sequences without a sync word parse to a single blob.
        #[test]
        fn syncless_images_parse_to_blob(mut words in proptest::collection::vec(any::<u32>(), 0..64)) {
            for w in words.iter_mut() {
                if *w == SYNC_WORD {
                    *w = 0;
                }
            }
            let parsed = parse(&BitstreamImage::from_words(words.clone())).unwrap();
            prop_assert_eq!(parsed.preamble, words);
            prop_assert!(!parsed.synced);
            prop_assert!(parsed.items.is_empty());
        }

        /// Flipping any single bit of a fed word changes the CRC value.
        #[test]
        fn crc_detects_single_bit_flips(reg in 0u8..32, word in any::<u32>(), bit in 0u32..32) {
            let addr = RegisterAddress::new(reg).unwrap();
            let mut a = CrcState::new();
            a.feed(addr, word);
            let mut b = CrcState::new();
            b.feed(addr, word ^ (1 << bit));
            prop_assert_ne!(a.value(), b.value());
        }
    }
}
