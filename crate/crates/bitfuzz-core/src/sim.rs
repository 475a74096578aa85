//! Register-level simulation of an UltraScale(+)-style configuration engine.
//!
//! The engine consumes a bitstream word by word through a packet state
//! machine and deliberately embodies every documented behavior of the real
//! control plane, including its two security flaws:
//!
//! * decrypted words execute immediately and the block checksum is only
//!   verified at each 8-word boundary, so a ciphertext manipulation acts
//!   before it is detected (the readback-diversion leak);
//! * the words following an RSA_DATA_IN block are executed unauthenticated,
//!   so a start-up sequence in place of RDW_GO boots the buffered design
//!   without any signature check (the authentication bypass).
//!
//! Crash semantics: a soft-crashed engine reads all registers as zero until
//! a JPROGRAM reset; a hard-crashed engine times out on everything until a
//! power cycle.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bitstream::{
    decode_header, BitstreamImage, CommandCode, CrcState, HeaderKind, Opcode, RegisterAddress,
    Word, SYNC_WORD,
};
use crate::crypto::{
    block_checksum, derive_h, digest256, keystream_word, rsa_verify, words_to_biguint, AesKey,
    Digest256, GcmIv, KeyMaterial,
};
use crate::geometry::{DeviceGeometry, RSA_PADDING_WORDS};
use crate::hexfmt;
use crate::regs;

/// Readback produced by one `program` call is capped at this many words.
/// A fuzzed type 2 read header can ask for up to 2^27 words; the real
/// engine would stream them out over the configuration port, this model
/// truncates instead of materializing gigabytes.
pub const MAX_READBACK_WORDS: usize = 1 << 20;

/// The device no longer answers; only a power cycle recovers it.
#[derive(Debug, Error, PartialEq, Eq)]
#[error("target unresponsive")]
pub struct Unresponsive;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("device config parse error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("device config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    UltraScale,
    UltraScalePlus,
}

impl Family {
    /// FDRO pipelining depth: 10 words on UltraScale, 25 on UltraScale+.
    pub fn pipeline_words(self) -> usize {
        match self {
            Family::UltraScale => 10,
            Family::UltraScalePlus => 25,
        }
    }
}

/// Static description of one device.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceModel {
    pub family: Family,
    pub geometry: DeviceGeometry,
    pub device_seed: u64,
}

impl DeviceModel {
    pub fn pipeline_words(&self) -> usize {
        self.family.pipeline_words()
    }
}

/// One-time-programmable security state. Immutable during a session.
#[derive(Debug, Clone, PartialEq)]
pub struct Fuses {
    pub aes_only: bool,
    pub rsa_only: bool,
    pub pubkey_digest: Option<Digest256>,
    pub fuse_cntl: Word,
}

/// Key storage. A flagged BBRAM key is erased by the next power cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyStore {
    pub bbram_key: Option<AesKey>,
    pub efuse_key: Option<AesKey>,
    pub(crate) bbram_delete_flag: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lifecycle {
    AwaitSync,
    Synced,
    SoftCrashed,
    HardCrashed,
}

/// JSON device description, the `sim:`/`serve` configuration format.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DeviceConfig {
    pub family: Family,
    pub geometry: DeviceGeometry,
    #[serde(with = "hexfmt::u64hex")]
    pub device_seed: u64,
    pub fuses: FuseConfig,
    pub keys: KeyConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct FuseConfig {
    pub aes_only: bool,
    pub rsa_only: bool,
    /// 64 hex chars, or empty when `pubkey_digest_of` is used instead.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pubkey_digest: Option<String>,
    /// Path to a key fixture file whose public key gets digested at load.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pubkey_digest_of: Option<String>,
    #[serde(with = "hexfmt::word")]
    pub fuse_cntl: Word,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct KeyConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bbram: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub efuse: Option<String>,
}

impl Default for DeviceConfig {
    fn default() -> Self {
        DeviceConfig {
            family: Family::UltraScalePlus,
            geometry: DeviceGeometry::default(),
            device_seed: 0x5EED_C0DE_1234_5678,
            fuses: FuseConfig::default(),
            keys: KeyConfig::default(),
        }
    }
}

impl DeviceConfig {
    /// Load from a JSON file, resolving `pubkey_digest_of` relative to it.
    pub fn load(path: impl AsRef<Path>) -> Result<DeviceConfig, SimError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let mut cfg: DeviceConfig = serde_json::from_str(&text)?;
        if let Some(key_path) = cfg.fuses.pubkey_digest_of.take() {
            let dir = path.parent().unwrap_or_else(|| Path::new("."));
            let material = KeyMaterial::load(dir.join(&key_path))
                .map_err(|e| SimError::Config(e.to_string()))?;
            let public = material
                .public_key()
                .map_err(|e| SimError::Config(e.to_string()))?;
            cfg.fuses.pubkey_digest = Some(public.digest().to_hex());
        }
        Ok(cfg)
    }

    fn resolve(&self) -> Result<(DeviceModel, Fuses, KeyStore), SimError> {
        let parse_key = |s: &Option<String>| -> Result<Option<AesKey>, SimError> {
            match s {
                None => Ok(None),
                Some(hex) => AesKey::from_hex(hex)
                    .map(Some)
                    .map_err(|e| SimError::Config(e.to_string())),
            }
        };
        let digest = match &self.fuses.pubkey_digest {
            None => None,
            Some(hex) => {
                Some(Digest256::from_hex(hex).map_err(|e| SimError::Config(e.to_string()))?)
            }
        };
        Ok((
            DeviceModel {
                family: self.family,
                geometry: self.geometry,
                device_seed: self.device_seed,
            },
            Fuses {
                aes_only: self.fuses.aes_only,
                rsa_only: self.fuses.rsa_only,
                pubkey_digest: digest,
                fuse_cntl: self.fuses.fuse_cntl,
            },
            KeyStore {
                bbram_key: parse_key(&self.keys.bbram)?,
                efuse_key: parse_key(&self.keys.efuse)?,
                bbram_delete_flag: false,
            },
        ))
    }
}

/// What a single `program` call produced.
#[derive(Debug, Clone, PartialEq)]
pub struct ProgramReport {
    pub lifecycle: Lifecycle,
    /// Words returned by in-stream register/FDRO reads.
    pub readback: Vec<Word>,
    /// The 39-word dump a hard crash emits before the device locks up.
    pub emission: Option<Vec<Word>>,
}

#[derive(Debug, Clone, PartialEq)]
enum PayloadMode {
    /// Plain register write.
    Register,
    /// Streaming into fabric storage.
    Fabric { next: usize },
    /// Buffering an RSA_DATA_IN block; nothing executes.
    RsaBuffer { words: Vec<Word> },
    /// Fuse-rejected write; payload is consumed without effect.
    Discard,
}

#[derive(Debug, Clone, PartialEq)]
enum ParseState {
    Idle,
    WritePayload {
        reg: RegisterAddress,
        remaining: u32,
        mode: PayloadMode,
    },
}

/// The buffered, parsed RSA block awaiting RDW_GO.
#[derive(Debug, Clone, PartialEq)]
struct RsaBlock {
    pubkey_words: Vec<Word>,
    signature: Vec<Word>,
    signed_payload: Vec<Word>,
    header: Vec<Word>,
    footer: Vec<Word>,
}

/// One simulated configuration engine. Instances are independent; one
/// logical owner drives each at a time.
#[derive(Debug, Clone, PartialEq)]
pub struct EngineState {
    pub model: DeviceModel,
    pub fuses: Fuses,
    pub keys: KeyStore,
    lifecycle: Lifecycle,
    regs: [Word; 32],
    iv: GcmIv,
    iv_words_written: usize,
    fabric: Vec<Word>,
    fabric_written: usize,
    fabric_holds_data: bool,
    fabric_configured: bool,
    done: bool,
    dghigh_seen: bool,
    start_seen: bool,
    dirty_cmd: bool,
    crc_error: bool,
    security_error: bool,
    crc: CrcState,
    parse: ParseState,
    prev_zero_count: Option<RegisterAddress>,
    dec_enabled: bool,
    cipher_engaged: bool,
    cipher_pos: u64,
    cipher_key: AesKey,
    cipher_h: Word,
    cipher_block: [Word; 7],
    encrypted_loaded: bool,
    rsa_block: Option<RsaBlock>,
    abort: bool,
    readback: Vec<Word>,
    emission: Option<Vec<Word>>,
}

impl EngineState {
    pub fn new(config: &DeviceConfig) -> Result<EngineState, SimError> {
        let (model, fuses, keys) = config.resolve()?;
        let fabric_words = model.geometry.fabric_words();
        Ok(EngineState {
            model,
            fuses,
            keys,
            lifecycle: Lifecycle::AwaitSync,
            regs: [0; 32],
            iv: GcmIv::default(),
            iv_words_written: 0,
            fabric: vec![0; fabric_words],
            fabric_written: 0,
            fabric_holds_data: false,
            fabric_configured: false,
            done: false,
            dghigh_seen: false,
            start_seen: false,
            dirty_cmd: false,
            crc_error: false,
            security_error: false,
            crc: CrcState::new(),
            parse: ParseState::Idle,
            prev_zero_count: None,
            dec_enabled: false,
            cipher_engaged: false,
            cipher_pos: 0,
            cipher_key: AesKey([0; 32]),
            cipher_h: 1,
            cipher_block: [0; 7],
            encrypted_loaded: false,
            rsa_block: None,
            abort: false,
            readback: Vec::new(),
            emission: None,
        })
    }

    pub fn lifecycle(&self) -> Lifecycle {
        self.lifecycle
    }

    pub fn done_pin(&self) -> Result<bool, Unresponsive> {
        if self.lifecycle == Lifecycle::HardCrashed {
            return Err(Unresponsive);
        }
        Ok(self.done)
    }

    /// Feed a whole image through the packet state machine.
    pub fn program(&mut self, image: &BitstreamImage) -> Result<ProgramReport, Unresponsive> {
        if self.lifecycle == Lifecycle::HardCrashed {
            return Err(Unresponsive);
        }
        self.readback.clear();
        self.emission = None;
        for &word in &image.words {
            if self.abort
                || matches!(
                    self.lifecycle,
                    Lifecycle::SoftCrashed | Lifecycle::HardCrashed
                )
            {
                break;
            }
            self.step(word);
        }
        Ok(ProgramReport {
            lifecycle: self.lifecycle,
            readback: std::mem::take(&mut self.readback),
            emission: self.emission.take(),
        })
    }

    /// JPROGRAM: recovers a soft crash, clears everything except the sticky
    /// registers. Times out when hard-crashed.
    pub fn reset_jprogram(&mut self) -> Result<(), Unresponsive> {
        if self.lifecycle == Lifecycle::HardCrashed {
            return Err(Unresponsive);
        }
        self.clear_configuration();
        self.encrypted_loaded = false;
        Ok(())
    }

    /// Full factory reset including the sticky registers and a hard crash;
    /// applies a pending BBRAM deletion.
    pub fn power_cycle(&mut self) {
        self.clear_configuration();
        self.encrypted_loaded = false;
        for addr in regs::STICKY {
            self.regs[addr as usize] = 0;
        }
        if self.keys.bbram_delete_flag {
            self.keys.bbram_key = None;
            self.keys.bbram_delete_flag = false;
        }
    }

    pub fn read_register(&self, addr: u8) -> Result<Word, Unresponsive> {
        match self.lifecycle {
            Lifecycle::HardCrashed => Err(Unresponsive),
            Lifecycle::SoftCrashed => Ok(0),
            _ => Ok(self.register_value(addr)),
        }
    }

    pub fn read_all(&self) -> Result<[Word; 32], Unresponsive> {
        let mut out = [0; 32];
        for (addr, slot) in out.iter_mut().enumerate() {
            *slot = self.read_register(addr as u8)?;
        }
        Ok(out)
    }

    // -- internals ---------------------------------------------------------

    /// Reset shared by the security reset and JPROGRAM: clears all state
    /// except the sticky registers, fuses, keys and the encrypted-session
    /// flag.
    fn clear_configuration(&mut self) {
        for addr in 0..32u8 {
            if !regs::is_sticky(addr) {
                self.regs[addr as usize] = 0;
            }
        }
        self.lifecycle = Lifecycle::AwaitSync;
        self.iv = GcmIv::default();
        self.iv_words_written = 0;
        self.fabric.fill(0);
        self.fabric_written = 0;
        self.fabric_holds_data = false;
        self.fabric_configured = false;
        self.done = false;
        self.dghigh_seen = false;
        self.start_seen = false;
        self.dirty_cmd = false;
        self.crc_error = false;
        self.security_error = false;
        self.crc.reset();
        self.parse = ParseState::Idle;
        self.prev_zero_count = None;
        self.dec_enabled = false;
        self.cipher_engaged = false;
        self.cipher_pos = 0;
        self.rsa_block = None;
        self.abort = false;
    }

    /// Checksum mismatch or failed authentication with fallback enabled:
    /// the engine resets but the sticky set survives and stays readable
    /// after a re-sync.
    fn security_reset(&mut self) {
        self.clear_configuration();
    }

    fn active_key(&self) -> AesKey {
        // Missing keys decrypt with the zero key; the stream turns to
        // garbage and fails its first checksum.
        self.keys
            .bbram_key
            .or(self.keys.efuse_key)
            .unwrap_or(AesKey([0; 32]))
    }

    fn iv_loaded(&self) -> bool {
        self.iv_words_written >= 4
    }

    fn step(&mut self, word: Word) {
        match self.lifecycle {
            Lifecycle::AwaitSync => {
                if word == SYNC_WORD {
                    self.lifecycle = Lifecycle::Synced;
                    self.parse = ParseState::Idle;
                    self.prev_zero_count = None;
                }
            }
            Lifecycle::Synced => {
                if !self.cipher_engaged
                    && self.dec_enabled
                    && self.iv_loaded()
                    && self.parse == ParseState::Idle
                {
                    self.cipher_engaged = true;
                    self.cipher_pos = 0;
                    self.cipher_key = self.active_key();
                    self.cipher_h = derive_h(&self.cipher_key, &self.iv);
                }
                if self.cipher_engaged {
                    self.cipher_step(word);
                } else {
                    self.exec_word(word);
                }
            }
            Lifecycle::SoftCrashed | Lifecycle::HardCrashed => {}
        }
    }

    /// Decrypt one stream word. Words at positions 0..6 of each 8-word
    /// block execute immediately; the 8th word is the block checksum and a
    /// mismatch triggers the security reset.
    fn cipher_step(&mut self, ciphertext: Word) {
        self.encrypted_loaded = true;
        let pos = self.cipher_pos;
        self.cipher_pos += 1;
        let plaintext = ciphertext ^ keystream_word(&self.cipher_key, &self.iv, pos);
        let lane = (pos % 8) as usize;
        if lane < 7 {
            self.cipher_block[lane] = plaintext;
            self.exec_word(plaintext);
        } else {
            let block_index = (pos / 8) as u32;
            let expected = block_checksum(
                self.cipher_h,
                &self.cipher_key,
                &self.iv,
                block_index,
                &self.cipher_block,
            )
            .expect("fixed-size block");
            if plaintext != expected {
                self.security_reset();
            }
        }
    }

    fn exec_word(&mut self, word: Word) {
        match std::mem::replace(&mut self.parse, ParseState::Idle) {
            ParseState::Idle => self.exec_header(word),
            ParseState::WritePayload {
                reg,
                remaining,
                mode,
            } => self.payload_word(reg, remaining, mode, word),
        }
    }

    fn exec_header(&mut self, word: Word) {
        let prev = self.prev_zero_count.take();
        let header = match decode_header(word) {
            Ok(h) => h,
            // Undocumented kinds showed no effect; only 010-standalone and
            // 001/opcode-11 crash, handled below.
            Err(_) => return,
        };
        match header.kind {
            HeaderKind::Type1 => {
                if header.opcode == Opcode::Reserved {
                    self.lifecycle = Lifecycle::SoftCrashed;
                    return;
                }
                if header.word_count == 0 {
                    self.prev_zero_count = Some(header.reg_addr);
                }
                match header.opcode {
                    Opcode::Nop => {}
                    Opcode::Read => self.do_read(header.reg_addr, header.word_count),
                    Opcode::Write if header.word_count > 0 => {
                        self.begin_write(header.reg_addr, header.word_count)
                    }
                    _ => {}
                }
            }
            HeaderKind::Type2 => {
                let Some(reg) = prev else {
                    // A type 2 header not immediately following a
                    // zero-count type 1 packet crashes the engine.
                    self.lifecycle = Lifecycle::SoftCrashed;
                    return;
                };
                match header.opcode {
                    Opcode::Read => self.do_read(reg, header.word_count),
                    Opcode::Write if header.word_count > 0 => {
                        self.begin_write(reg, header.word_count)
                    }
                    _ => {}
                }
            }
        }
    }

    fn begin_write(&mut self, reg: RegisterAddress, count: u32) {
        let in_cipher = self.cipher_engaged;
        let mode = match reg.value() {
            r if r == regs::FDRI => {
                if self.fuses.rsa_only || (self.fuses.aes_only && !in_cipher) {
                    self.security_error = true;
                    PayloadMode::Discard
                } else {
                    PayloadMode::Fabric {
                        next: self.far_word_offset(),
                    }
                }
            }
            r if r == regs::RSA_DATA_IN => {
                if self.fuses.aes_only && !in_cipher {
                    // The AES-only fuse rejects plaintext RSA blocks; this
                    // is the countermeasure that stops the bypass.
                    self.security_error = true;
                    PayloadMode::Discard
                } else {
                    // The declared count is attacker-controlled; the vec
                    // grows with the words that actually arrive.
                    PayloadMode::RsaBuffer {
                        words: Vec::with_capacity((count as usize).min(4096)),
                    }
                }
            }
            _ => PayloadMode::Register,
        };
        self.parse = ParseState::WritePayload {
            reg,
            remaining: count,
            mode,
        };
    }

    fn payload_word(
        &mut self,
        reg: RegisterAddress,
        remaining: u32,
        mode: PayloadMode,
        word: Word,
    ) {
        let mut mode = mode;
        match &mut mode {
            PayloadMode::Register => {
                self.crc_feed_write(reg, word);
                self.write_register(reg, word);
            }
            PayloadMode::Fabric { next } => {
                self.crc_feed_write(reg, word);
                if *next < self.fabric.len() {
                    self.fabric[*next] = word;
                }
                *next += 1;
                self.fabric_written += 1;
                self.fabric_holds_data = true;
            }
            PayloadMode::RsaBuffer { words } => words.push(word),
            PayloadMode::Discard => {}
        }
        // A crash or reset inside write_register invalidates the packet.
        if self.lifecycle != Lifecycle::Synced || self.abort {
            return;
        }
        if remaining > 1 {
            self.parse = ParseState::WritePayload {
                reg,
                remaining: remaining - 1,
                mode,
            };
        } else {
            if let PayloadMode::RsaBuffer { words } = mode {
                self.finalize_rsa_block(words);
            }
            if self.fabric_written >= self.fabric.len() {
                self.fabric_configured = true;
            }
            self.eval_done();
        }
    }

    fn crc_feed_write(&mut self, reg: RegisterAddress, word: Word) {
        if reg.value() != regs::CRC && reg.value() != regs::RSA_DATA_IN {
            self.crc.feed(reg, word);
        }
    }

    fn far_word_offset(&self) -> usize {
        (self.regs[regs::FAR as usize] as usize).saturating_mul(self.model.geometry.frame_length)
    }

    fn write_register(&mut self, reg: RegisterAddress, word: Word) {
        match reg.value() {
            r if r == regs::CRC => {
                if word == self.crc.value() {
                    self.crc.reset();
                } else {
                    self.crc_error = true;
                    self.abort = true;
                }
            }
            r if r == regs::CMD => {
                self.regs[r as usize] = word;
                self.exec_cmd(word);
            }
            r if r == regs::CTL0 => {
                let mask = self.regs[regs::MASK as usize];
                let old = self.regs[r as usize];
                let mut new = (old & !mask) | (word & mask);
                // The decryption bit cannot be enabled once the fabric
                // holds any data since the last reset.
                if self.fabric_holds_data && new & regs::CTL0_DEC != 0 && old & regs::CTL0_DEC == 0
                {
                    new = (new & !regs::CTL0_DEC) | (old & regs::CTL0_DEC);
                }
                self.regs[r as usize] = new;
                self.dec_enabled = new & regs::CTL0_DEC != 0;
                if !self.dec_enabled {
                    self.cipher_engaged = false;
                }
            }
            r if r == regs::GCM_IV => {
                self.iv.0[self.iv_words_written % 4] = word;
                self.iv_words_written += 1;
                self.regs[r as usize] = word;
            }
            r if r == regs::UNKNOWN_23 => {
                self.regs[r as usize] = word;
                if word & (1 << 23) != 0 && word & (1 << 25) != 0 {
                    if self.keys.bbram_key.is_some() {
                        self.keys.bbram_delete_flag = true;
                    } else {
                        self.emission = Some(hard_crash_dump(self.model.device_seed, word));
                        self.lifecycle = Lifecycle::HardCrashed;
                    }
                } else if word & (1 << 24) != 0 {
                    self.lifecycle = Lifecycle::SoftCrashed;
                }
            }
            // Status and fuse-mapped registers ignore writes.
            r if r == regs::STAT
                || r == regs::BOOTSTS
                || r == regs::UNKNOWN_29
                || r == regs::FDRO => {}
            r if r == regs::FAR || r == regs::MASK || r == regs::CTL1 || regs::is_sticky(r) => {
                self.regs[r as usize] = word;
            }
            // Undocumented registers other than 23 do not retain written
            // values.
            _ => {}
        }
    }

    fn exec_cmd(&mut self, word: Word) {
        match CommandCode::from_word(word) {
            Some(CommandCode::Null) | Some(CommandCode::Wcfg) | Some(CommandCode::Grestore) => {}
            Some(CommandCode::Dghigh) => self.dghigh_seen = true,
            Some(CommandCode::Start) => self.start_seen = true,
            Some(CommandCode::Desync) => {
                self.lifecycle = Lifecycle::AwaitSync;
                self.parse = ParseState::Idle;
                self.prev_zero_count = None;
            }
            Some(CommandCode::RdwGo) => self.rdw_go(),
            None => self.dirty_cmd = true,
        }
        self.eval_done();
    }

    /// The boot predicate: fabric configured, DGHIGH and START both seen in
    /// either order, no dirty command, no error flags. DONE latches until a
    /// reset.
    fn eval_done(&mut self) {
        if !self.done
            && self.fabric_configured
            && self.dghigh_seen
            && self.start_seen
            && !self.dirty_cmd
            && !self.crc_error
            && !self.security_error
        {
            self.done = true;
            self.regs[regs::BOOTSTS as usize] |= regs::BOOTSTS_STATUS_VALID_0;
        }
    }

    fn finalize_rsa_block(&mut self, words: Vec<Word>) {
        let g = self.model.geometry;
        let nw = g.rsa_modulus_words;
        let dlc_off = g.rsa_dlc_offset();
        let malformed = |state: &mut EngineState| {
            state.security_error = true;
            state.rsa_block = None;
        };
        if words.len() <= dlc_off {
            return malformed(self);
        }
        let dlc = words[dlc_off];
        let test_mode = dlc >> 31 != 0;
        let fabric_words = g.rsa_fabric_words(test_mode);
        // The block length is rigid: with the test-mode bit set the engine
        // expects exactly the test-mode frame count.
        if words.len() != g.rsa_block_words(test_mode)
            || (dlc & 0x7FFF_FFFF) as usize != fabric_words
        {
            return malformed(self);
        }

        let pubkey_words = words[..1 + nw].to_vec();
        let sig_start = 1 + nw + RSA_PADDING_WORDS;
        let signature = words[sig_start..sig_start + nw].to_vec();
        let signed_payload = words[sig_start + nw..].to_vec();
        let header_start = dlc_off + 1;
        let header = words[header_start..header_start + g.header_buffer_words].to_vec();
        let fabric_start = header_start + g.header_buffer_words;
        let footer_start = fabric_start + fabric_words;
        let footer = words[footer_start..].to_vec();

        // Fabric data is buffered in the fabric itself; the design is
        // already in place waiting to be authenticated.
        let n = fabric_words.min(self.fabric.len());
        self.fabric[..n].copy_from_slice(&words[fabric_start..fabric_start + n]);
        self.fabric_written += fabric_words;
        self.fabric_holds_data = true;
        self.fabric_configured = true;

        self.rsa_block = Some(RsaBlock {
            pubkey_words,
            signature,
            signed_payload,
            header,
            footer,
        });
    }

    /// RDW_GO: verify the buffered block against the fused key digest; on
    /// success execute the header and footer buffers, on failure set the
    /// security error and reset unless CTL0 disables the fallback.
    fn rdw_go(&mut self) {
        let verified = match &self.rsa_block {
            None => false,
            Some(block) => {
                let fused_ok = match &self.fuses.pubkey_digest {
                    Some(d) => *d == digest256(&block.pubkey_words),
                    None => false,
                };
                fused_ok && {
                    let e = block.pubkey_words[0];
                    let n = words_to_biguint(&block.pubkey_words[1..]);
                    rsa_verify(e, &n, &block.signature, &digest256(&block.signed_payload))
                }
            }
        };
        if verified {
            let block = self.rsa_block.take().expect("verified implies buffered");
            for buffer in [block.header, block.footer] {
                for word in buffer {
                    if self.lifecycle != Lifecycle::Synced || self.abort {
                        break;
                    }
                    self.exec_word(word);
                }
            }
        } else {
            self.security_error = true;
            if self.regs[regs::CTL0 as usize] & regs::CTL0_FALLBACK_DISABLE == 0 {
                self.security_reset();
            }
        }
    }

    fn readback_budget(&self) -> usize {
        MAX_READBACK_WORDS.saturating_sub(self.readback.len())
    }

    fn do_read(&mut self, reg: RegisterAddress, count: u32) {
        if reg.value() == regs::FDRO {
            let budget = self.readback_budget();
            let n = (count as usize).min(budget);
            let pipeline = self.model.pipeline_words();
            let frame = self.model.geometry.frame_length;
            if self.encrypted_loaded {
                // Readback is disabled for encrypted sessions.
                self.readback
                    .extend(std::iter::repeat_n(0, (n + pipeline + frame).min(budget)));
                return;
            }
            let start = self.far_word_offset();
            for i in 0..n {
                self.readback
                    .push(self.fabric.get(start + i).copied().unwrap_or(0));
            }
            let u23 = self.regs[regs::UNKNOWN_23 as usize];
            let pipe_word = if u23 & (1 << 17) != 0 { SYNC_WORD } else { 0 };
            self.readback.extend(std::iter::repeat_n(
                pipe_word,
                pipeline.min(self.readback_budget()),
            ));
            let frame = frame.min(self.readback_budget());
            for i in 0..frame {
                let pad = if u23 & (1 << 16) != 0 {
                    1 << (i % 32)
                } else {
                    0
                };
                self.readback.push(pad);
            }
        } else {
            let value = self.register_value(reg.value());
            let n = (count as usize).min(self.readback_budget());
            self.readback.extend(std::iter::repeat_n(value, n));
        }
    }

    fn register_value(&self, addr: u8) -> Word {
        match addr {
            a if a == regs::STAT => {
                let mut v = 0;
                if self.crc_error {
                    v |= regs::STAT_CRC_ERROR;
                }
                if self.security_error {
                    v |= regs::STAT_SECURITY_ERROR;
                }
                if self.done {
                    v |= regs::STAT_DONE_INTERNAL | regs::STAT_DONE_PIN;
                }
                v
            }
            a if a == regs::UNKNOWN_29 => self.fuses.fuse_cntl,
            a if a == regs::CRC => self.crc.value(),
            a if a == regs::FDRO => {
                if self.encrypted_loaded {
                    0
                } else {
                    self.fabric
                        .get(self.far_word_offset())
                        .copied()
                        .unwrap_or(0)
                }
            }
            a => self.regs[a as usize],
        }
    }
}

/// The 39-word (156-byte) dump a hard crash emits: keystream words from the
/// device seed and the trigger value, with bits 31, 21 and 0 forced to
/// 1, 0, 1, the positions that are always identical across dumps.
pub fn hard_crash_dump(device_seed: u64, trigger_word: Word) -> Vec<Word> {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&device_seed.to_be_bytes());
    let key = AesKey(key);
    let iv = GcmIv([trigger_word, 0, 0, 0]);
    (0..39)
        .map(|i| (keystream_word(&key, &iv, i) | 0x8000_0001) & !(1 << 21))
        .collect()
}
