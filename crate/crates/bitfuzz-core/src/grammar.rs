//! Declarative bitstream templates with fuzzing masks.
//!
//! A [`FuzzRequest`] is an ordered tree of [`TemplateNode`]s. Nodes with a
//! fuzzing mask span a finite, deterministic case space: a `BitstreamWord`
//! contributes a factor of `2^popcount(mask)`, a `FuzzedFileOverlay` a
//! factor of `word_count * 2^popcount(mask)`. Enumeration is exhaustive and
//! reproducible; there is no randomness anywhere. The last fuzzed node varies
//! fastest; inside an overlay the position is the slower digit and the mask
//! counter the faster one.
//!
//! Checksums, encrypted blocks and signed blocks are generated on render,
//! so every enumerated case is structurally valid except for the bits being
//! fuzzed.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bitstream::{
    decode_header, encode_type1_header, encode_type2_header, BitstreamImage, CommandCode, CrcState,
    HeaderKind, Opcode, RegisterAddress, Word, NOP_WORD, SYNC_WORD,
};
use crate::crypto::{
    block_checksum, derive_h, digest256, encrypt_ctr, rsa_sign, CryptoError, GcmIv, KeyMaterial,
};
use crate::geometry::{DeviceGeometry, RSA_PADDING_WORDS};
use crate::regs;

#[derive(Debug, Error)]
pub enum GrammarError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("template parse error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("node {path}: {message}")]
    Node { path: String, message: String },
    #[error("case space of {0} cases exceeds 2^63")]
    Capacity(u128),
    #[error("case index {case} out of range (case count {count})")]
    CaseOutOfRange { case: u64, count: u64 },
    #[error("counter {counter:#x} out of range for mask {mask:#010x}")]
    CounterOutOfRange { counter: u64, mask: u32 },
    #[error("node {path}: unresolved reference {reference:?}")]
    MissingResource { path: String, reference: String },
    #[error("node {path}: rendered {got} words where the fixed layout needs {expected}")]
    Layout {
        path: String,
        expected: usize,
        got: usize,
    },
    #[error(transparent)]
    Crypto(#[from] CryptoError),
}

fn node_err(path: &str, message: impl Into<String>) -> GrammarError {
    GrammarError::Node {
        path: path.to_string(),
        message: message.into(),
    }
}

use crate::hexfmt::{bytes as hexbytes, word as hexword};

mod hexiv {
    use super::GcmIv;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(iv: &GcmIv, s: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeSeq;
        let mut seq = s.serialize_seq(Some(4))?;
        for w in iv.0 {
            seq.serialize_element(&format!("{:08x}", w))?;
        }
        seq.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<GcmIv, D::Error> {
        let parts: Vec<String> = Vec::deserialize(d)?;
        if parts.len() != 4 {
            return Err(serde::de::Error::custom("iv must be exactly 4 words"));
        }
        let mut words = [0u32; 4];
        for (i, p) in parts.iter().enumerate() {
            words[i] = u32::from_str_radix(p.trim().trim_start_matches("0x"), 16)
                .map_err(|_| serde::de::Error::custom(format!("bad iv word {p:?}")))?;
        }
        Ok(GcmIv(words))
    }
}

fn default_repeat() -> u32 {
    1
}

fn default_count() -> u32 {
    1
}

/// A word-index window into an overlay's base words.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FuzzPosition {
    pub index_start: usize,
    pub word_count: usize,
}

/// One node of a bitstream template.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TemplateNode {
    /// Raw bytes, packed big-endian into words, optionally repeated.
    Static {
        #[serde(rename = "hex", with = "hexbytes")]
        bytes: Vec<u8>,
        #[serde(default = "default_repeat")]
        repeat: u32,
    },
    /// `count` NOP header words.
    Nop {
        count: u32,
    },
    /// A type 1 write header for `reg` covering `count` payload words.
    Type1Write {
        reg: u8,
        #[serde(default = "default_count")]
        count: u32,
    },
    /// A type 1 read header for `reg` requesting `count` words.
    Type1Read {
        reg: u8,
        count: u32,
    },
    /// One word whose masked bits run through the exhaustive counter.
    BitstreamWord {
        #[serde(with = "hexword")]
        static_bits: Word,
        #[serde(with = "hexword")]
        fuzzing_mask: Word,
    },
    SyncWord,
    /// A write of the running CRC to the CRC register.
    AutoCrcPacket,
    /// Children are rendered, padded to 7-word groups, closed with block
    /// checksums and counter-mode encrypted; prefixed by the IV write and
    /// the CTL0 DEC enable.
    EncryptedGcmBlock {
        children: Vec<TemplateNode>,
        key_ref: String,
        #[serde(with = "hexiv")]
        iv: GcmIv,
    },
    /// A fixed-length signed block written to RSA_DATA_IN, followed by
    /// RDW_GO only if `rdw_go` is set.
    PlaintextRsaBlock {
        children: Vec<TemplateNode>,
        rsa_key_ref: String,
        signing_key_ref: String,
        test_mode: bool,
        rdw_go: bool,
        children_contain_header_and_footer: bool,
    },
    /// A pre-rendered base image with exactly one word mutated per case:
    /// position-major over the window, mask counter within.
    FuzzedFileOverlay {
        base_file: String,
        #[serde(with = "hexword")]
        fuzzing_mask: Word,
        position: FuzzPosition,
    },
}

/// Side table of resolved references: key fixture files and overlay base
/// images, keyed by the reference string in the node tree.
#[derive(Debug, Default)]
pub struct Resources {
    pub keys: BTreeMap<String, KeyMaterial>,
    pub files: BTreeMap<String, Vec<Word>>,
    sig_cache: Mutex<BTreeMap<[u8; 32], Vec<Word>>>,
}

impl Clone for Resources {
    fn clone(&self) -> Self {
        Resources {
            keys: self.keys.clone(),
            files: self.files.clone(),
            sig_cache: Mutex::new(BTreeMap::new()),
        }
    }
}

impl PartialEq for Resources {
    fn eq(&self, other: &Self) -> bool {
        self.keys == other.keys && self.files == other.files
    }
}

/// A named template tree plus the geometry it renders against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FuzzRequest {
    pub name: String,
    #[serde(default)]
    pub geometry: DeviceGeometry,
    pub children: Vec<TemplateNode>,
    #[serde(skip)]
    pub resources: Resources,
}

struct FuzzSite {
    radix: u64,
}

impl FuzzRequest {
    pub fn new(name: impl Into<String>, children: Vec<TemplateNode>) -> FuzzRequest {
        FuzzRequest {
            name: name.into(),
            geometry: DeviceGeometry::default(),
            children,
            resources: Resources::default(),
        }
    }

    pub fn with_key(mut self, name: &str, material: KeyMaterial) -> FuzzRequest {
        self.resources.keys.insert(name.to_string(), material);
        self
    }

    pub fn with_file(mut self, name: &str, words: Vec<Word>) -> FuzzRequest {
        self.resources.files.insert(name.to_string(), words);
        self
    }

    /// Parse a template from JSON; references stay unresolved unless
    /// `base_dir` is given.
    pub fn from_json(text: &str, base_dir: Option<&Path>) -> Result<FuzzRequest, GrammarError> {
        let mut req: FuzzRequest = serde_json::from_str(text)?;
        if let Some(dir) = base_dir {
            req.resolve_resources(dir)?;
        }
        req.validate()?;
        Ok(req)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<FuzzRequest, GrammarError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        FuzzRequest::from_json(&text, Some(dir))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), GrammarError> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    /// Load every `*_ref` key file and overlay base image relative to `dir`.
    pub fn resolve_resources(&mut self, dir: &Path) -> Result<(), GrammarError> {
        fn walk(
            nodes: &[TemplateNode],
            dir: &Path,
            keys: &mut BTreeMap<String, KeyMaterial>,
            files: &mut BTreeMap<String, Vec<Word>>,
        ) -> Result<(), GrammarError> {
            for node in nodes {
                match node {
                    TemplateNode::EncryptedGcmBlock {
                        children, key_ref, ..
                    } => {
                        if !keys.contains_key(key_ref) {
                            keys.insert(key_ref.clone(), KeyMaterial::load(dir.join(key_ref))?);
                        }
                        walk(children, dir, keys, files)?;
                    }
                    TemplateNode::PlaintextRsaBlock {
                        children,
                        rsa_key_ref,
                        signing_key_ref,
                        ..
                    } => {
                        for key_ref in [rsa_key_ref, signing_key_ref] {
                            if !keys.contains_key(key_ref) {
                                keys.insert(key_ref.clone(), KeyMaterial::load(dir.join(key_ref))?);
                            }
                        }
                        walk(children, dir, keys, files)?;
                    }
                    TemplateNode::FuzzedFileOverlay { base_file, .. }
                        if !files.contains_key(base_file) =>
                    {
                        let image = BitstreamImage::read_file(dir.join(base_file))?;
                        files.insert(base_file.clone(), image.words);
                    }
                    _ => {}
                }
            }
            Ok(())
        }
        let mut keys = std::mem::take(&mut self.resources.keys);
        let mut files = std::mem::take(&mut self.resources.files);
        walk(&self.children, dir, &mut keys, &mut files)?;
        self.resources.keys = keys;
        self.resources.files = files;
        Ok(())
    }

    /// Structural validation with node paths in error messages.
    pub fn validate(&self) -> Result<(), GrammarError> {
        let mut encrypted_blocks = 0usize;
        self.validate_nodes(&self.children, "children", &mut encrypted_blocks)
    }

    fn validate_nodes(
        &self,
        nodes: &[TemplateNode],
        prefix: &str,
        encrypted_blocks: &mut usize,
    ) -> Result<(), GrammarError> {
        for (i, node) in nodes.iter().enumerate() {
            let path = format!("{prefix}[{i}]");
            match node {
                TemplateNode::Static { bytes, repeat } => {
                    if bytes.len() % 4 != 0 {
                        return Err(node_err(
                            &path,
                            format!("{} bytes is not word aligned", bytes.len()),
                        ));
                    }
                    if *repeat == 0 {
                        return Err(node_err(&path, "repeat must be at least 1"));
                    }
                }
                TemplateNode::Type1Write { reg, count }
                | TemplateNode::Type1Read { reg, count } => {
                    if *reg > 31 {
                        return Err(node_err(
                            &path,
                            format!("register address {reg} out of range"),
                        ));
                    }
                    if *count > 2047 {
                        return Err(node_err(
                            &path,
                            format!("word count {count} exceeds type 1 range"),
                        ));
                    }
                }
                TemplateNode::BitstreamWord {
                    static_bits,
                    fuzzing_mask,
                } => {
                    if static_bits & fuzzing_mask != 0 {
                        return Err(node_err(
                            &path,
                            format!(
                                "static bits {static_bits:#010x} overlap fuzzing mask {fuzzing_mask:#010x}"
                            ),
                        ));
                    }
                }
                TemplateNode::EncryptedGcmBlock {
                    children, key_ref, ..
                } => {
                    *encrypted_blocks += 1;
                    if *encrypted_blocks > 1 {
                        return Err(node_err(&path, "at most one encrypted block per request"));
                    }
                    if let Some(km) = self.resources.keys.get(key_ref) {
                        if km.aes.is_none() {
                            return Err(node_err(
                                &path,
                                format!("key file {key_ref:?} has no key= field"),
                            ));
                        }
                    }
                    self.validate_nodes(children, &path, encrypted_blocks)?;
                }
                TemplateNode::PlaintextRsaBlock { children, .. } => {
                    self.validate_nodes(children, &path, encrypted_blocks)?;
                }
                TemplateNode::FuzzedFileOverlay {
                    base_file,
                    position,
                    ..
                } => {
                    if let Some(base) = self.resources.files.get(base_file) {
                        if position.index_start + position.word_count > base.len() {
                            return Err(node_err(
                                &path,
                                format!(
                                    "window {}+{} exceeds base of {} words",
                                    position.index_start,
                                    position.word_count,
                                    base.len()
                                ),
                            ));
                        }
                    }
                    if position.word_count == 0 {
                        return Err(node_err(&path, "window must cover at least one word"));
                    }
                }
                TemplateNode::Nop { .. } | TemplateNode::SyncWord | TemplateNode::AutoCrcPacket => {
                }
            }
        }
        Ok(())
    }

    fn sites(nodes: &[TemplateNode], out: &mut Vec<FuzzSite>) {
        for node in nodes {
            match node {
                TemplateNode::BitstreamWord { fuzzing_mask, .. } => out.push(FuzzSite {
                    radix: 1u64 << fuzzing_mask.count_ones(),
                }),
                TemplateNode::FuzzedFileOverlay {
                    fuzzing_mask,
                    position,
                    ..
                } => out.push(FuzzSite {
                    radix: (position.word_count as u64) << fuzzing_mask.count_ones(),
                }),
                TemplateNode::EncryptedGcmBlock { children, .. }
                | TemplateNode::PlaintextRsaBlock { children, .. } => {
                    FuzzRequest::sites(children, out)
                }
                _ => {}
            }
        }
    }

    /// Size of the exhaustive case space: the product over every fuzzed
    /// node's factor.
    pub fn case_count(&self) -> Result<u64, GrammarError> {
        let mut sites = Vec::new();
        FuzzRequest::sites(&self.children, &mut sites);
        let mut total: u128 = 1;
        for site in &sites {
            total = total.saturating_mul(site.radix as u128);
            if total > 1u128 << 63 {
                return Err(GrammarError::Capacity(total));
            }
        }
        Ok(total as u64)
    }

    /// Render one concrete case. Pure: identical inputs give bit-identical
    /// images across runs and processes.
    pub fn render(&self, case_index: u64) -> Result<BitstreamImage, GrammarError> {
        let count = self.case_count()?;
        if case_index >= count {
            return Err(GrammarError::CaseOutOfRange {
                case: case_index,
                count,
            });
        }
        let mut sites = Vec::new();
        FuzzRequest::sites(&self.children, &mut sites);
        // Mixed-radix decomposition, last site varying fastest.
        let mut digits = vec![0u64; sites.len()];
        let mut rest = case_index;
        for (i, site) in sites.iter().enumerate().rev() {
            digits[i] = rest % site.radix;
            rest /= site.radix;
        }

        let mut ctx = RenderCtx {
            geometry: &self.geometry,
            resources: &self.resources,
            digits: &digits,
            next_digit: 0,
            crc: CrcState::new(),
            tracker: CrcTracker::new(),
            buffering: false,
        };
        let mut out = Vec::new();
        render_nodes(&self.children, &mut ctx, &mut out, "children")?;
        Ok(BitstreamImage::from_words(out))
    }
}

/// Place the low bits of `counter` into the set bits of `mask`, counter bit
/// 0 landing in the lowest set mask bit.
pub fn inject(counter: u64, mask: Word) -> Result<Word, GrammarError> {
    let width = mask.count_ones();
    if width < 64 && counter >= (1u64 << width) {
        return Err(GrammarError::CounterOutOfRange { counter, mask });
    }
    let mut out = 0u32;
    let mut remaining = mask;
    let mut c = counter;
    while remaining != 0 {
        let bit = remaining & remaining.wrapping_neg();
        if c & 1 != 0 {
            out |= bit;
        }
        c >>= 1;
        remaining ^= bit;
    }
    Ok(out)
}

/// Mirrors the engine's header/payload grouping just enough to know which
/// emitted words are register-write payloads, so the running CRC matches
/// what the engine accumulates. CRC and RSA_DATA_IN payloads never feed.
struct CrcTracker {
    synced: bool,
    payload: Option<(u8, u32, bool)>, // (reg, remaining, is_write)
    prev_zero_count: Option<u8>,
}

impl CrcTracker {
    fn new() -> CrcTracker {
        CrcTracker {
            synced: false,
            payload: None,
            prev_zero_count: None,
        }
    }

    fn feed(&mut self, word: Word, crc: &mut CrcState) {
        if !self.synced {
            if word == SYNC_WORD {
                self.synced = true;
            }
            return;
        }
        if let Some((reg, remaining, is_write)) = self.payload {
            if is_write && reg != regs::CRC && reg != regs::RSA_DATA_IN {
                crc.feed(RegisterAddress::from_const(reg), word);
            }
            self.payload = if remaining > 1 {
                Some((reg, remaining - 1, is_write))
            } else {
                None
            };
            return;
        }
        let prev = self.prev_zero_count.take();
        // Unknown header kinds are skipped, like the engine skips them.
        let Ok(h) = decode_header(word) else { return };
        let reg = match h.kind {
            HeaderKind::Type1 => h.reg_addr.value(),
            HeaderKind::Type2 => match prev {
                Some(r) => r,
                None => return, // engine crashes here; nothing to track
            },
        };
        if h.opcode == Opcode::Write && h.word_count > 0 {
            self.payload = Some((reg, h.word_count, true));
        }
        if h.kind == HeaderKind::Type1 && h.word_count == 0 {
            self.prev_zero_count = Some(h.reg_addr.value());
        }
    }
}

struct RenderCtx<'a> {
    geometry: &'a DeviceGeometry,
    resources: &'a Resources,
    digits: &'a [u64],
    next_digit: usize,
    crc: CrcState,
    tracker: CrcTracker,
    buffering: bool,
}

impl RenderCtx<'_> {
    fn take_digit(&mut self) -> u64 {
        let d = self.digits[self.next_digit];
        self.next_digit += 1;
        d
    }

    fn emit(&mut self, word: Word, out: &mut Vec<Word>) {
        if !self.buffering {
            self.tracker.feed(word, &mut self.crc);
        }
        out.push(word);
    }

    fn emit_all(&mut self, words: &[Word], out: &mut Vec<Word>) {
        for &w in words {
            self.emit(w, out);
        }
    }
}

fn key_for<'a>(
    resources: &'a Resources,
    reference: &str,
    path: &str,
) -> Result<&'a KeyMaterial, GrammarError> {
    resources
        .keys
        .get(reference)
        .ok_or_else(|| GrammarError::MissingResource {
            path: path.to_string(),
            reference: reference.to_string(),
        })
}

fn render_nodes(
    nodes: &[TemplateNode],
    ctx: &mut RenderCtx,
    out: &mut Vec<Word>,
    prefix: &str,
) -> Result<(), GrammarError> {
    for (i, node) in nodes.iter().enumerate() {
        let path = format!("{prefix}[{i}]");
        render_node(node, ctx, out, &path)?;
    }
    Ok(())
}

fn render_node(
    node: &TemplateNode,
    ctx: &mut RenderCtx,
    out: &mut Vec<Word>,
    path: &str,
) -> Result<(), GrammarError> {
    match node {
        TemplateNode::Static { bytes, repeat } => {
            for _ in 0..*repeat {
                for chunk in bytes.chunks_exact(4) {
                    ctx.emit(
                        Word::from_be_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]),
                        out,
                    );
                }
            }
        }
        TemplateNode::Nop { count } => {
            for _ in 0..*count {
                ctx.emit(NOP_WORD, out);
            }
        }
        TemplateNode::Type1Write { reg, count } => {
            let w = encode_type1_header(Opcode::Write, *reg, *count)
                .map_err(|e| node_err(path, e.to_string()))?;
            ctx.emit(w, out);
        }
        TemplateNode::Type1Read { reg, count } => {
            let w = encode_type1_header(Opcode::Read, *reg, *count)
                .map_err(|e| node_err(path, e.to_string()))?;
            ctx.emit(w, out);
        }
        TemplateNode::BitstreamWord {
            static_bits,
            fuzzing_mask,
        } => {
            let digit = ctx.take_digit();
            let w = static_bits | inject(digit, *fuzzing_mask)?;
            ctx.emit(w, out);
        }
        TemplateNode::SyncWord => ctx.emit(SYNC_WORD, out),
        TemplateNode::AutoCrcPacket => {
            let hdr = encode_type1_header(Opcode::Write, regs::CRC, 1).expect("static header");
            let value = ctx.crc.value();
            ctx.emit(hdr, out);
            ctx.emit(value, out);
            // The engine resets its accumulator after a matching compare.
            ctx.crc.reset();
        }
        TemplateNode::EncryptedGcmBlock {
            children,
            key_ref,
            iv,
        } => {
            let key = key_for(ctx.resources, key_ref, path)?.aes_key()?;
            // Plaintext preamble: load the IV, then enable CTL0.DEC through
            // the mask register.
            let hdr_iv =
                encode_type1_header(Opcode::Write, regs::GCM_IV, 4).expect("static header");
            ctx.emit(hdr_iv, out);
            ctx.emit_all(&iv.0, out);
            let hdr_mask =
                encode_type1_header(Opcode::Write, regs::MASK, 1).expect("static header");
            ctx.emit(hdr_mask, out);
            ctx.emit(regs::CTL0_DEC, out);
            let hdr_ctl0 =
                encode_type1_header(Opcode::Write, regs::CTL0, 1).expect("static header");
            ctx.emit(hdr_ctl0, out);
            ctx.emit(regs::CTL0_DEC, out);

            // Children render as the plaintext command stream; the engine
            // executes these words after decryption, so they feed the
            // tracker exactly like plain words.
            let mut plain = Vec::new();
            render_nodes(children, ctx, &mut plain, path)?;
            while plain.len() % 7 != 0 {
                ctx.tracker.feed(NOP_WORD, &mut ctx.crc);
                plain.push(NOP_WORD);
            }

            let h = derive_h(&key, iv);
            let mut stream = Vec::with_capacity(plain.len() / 7 * 8);
            for (block_index, chunk) in plain.chunks_exact(7).enumerate() {
                stream.extend_from_slice(chunk);
                stream.push(block_checksum(h, &key, iv, block_index as u32, chunk)?);
            }
            out.extend(encrypt_ctr(&key, iv, &stream));
        }
        TemplateNode::PlaintextRsaBlock {
            children,
            rsa_key_ref,
            signing_key_ref,
            test_mode,
            rdw_go,
            children_contain_header_and_footer,
        } => {
            let g = ctx.geometry;
            let pubkey = key_for(ctx.resources, rsa_key_ref, path)?.public_key()?;
            let signer = key_for(ctx.resources, signing_key_ref, path)?.keypair()?;
            if pubkey.n_words != g.rsa_modulus_words {
                return Err(GrammarError::Layout {
                    path: path.to_string(),
                    expected: g.rsa_modulus_words,
                    got: pubkey.n_words,
                });
            }

            // Buffered content: the engine executes none of it while the
            // block is written, so nothing here feeds the running CRC.
            let was_buffering = ctx.buffering;
            ctx.buffering = true;
            let mut inner = Vec::new();
            render_nodes(children, ctx, &mut inner, path)?;
            ctx.buffering = was_buffering;

            let fabric_words = g.rsa_fabric_words(*test_mode);
            let (header, fabric, footer) = if *children_contain_header_and_footer {
                let expected = g.header_buffer_words + fabric_words + g.footer_buffer_words;
                if inner.len() != expected {
                    return Err(GrammarError::Layout {
                        path: path.to_string(),
                        expected,
                        got: inner.len(),
                    });
                }
                let header = inner[..g.header_buffer_words].to_vec();
                let fabric =
                    inner[g.header_buffer_words..g.header_buffer_words + fabric_words].to_vec();
                let footer = inner[g.header_buffer_words + fabric_words..].to_vec();
                (header, fabric, footer)
            } else {
                if inner.len() != fabric_words {
                    return Err(GrammarError::Layout {
                        path: path.to_string(),
                        expected: fabric_words,
                        got: inner.len(),
                    });
                }
                (
                    default_rsa_header(g, path)?,
                    inner,
                    default_rsa_footer(g, path)?,
                )
            };

            let dlc = (if *test_mode { 1u32 << 31 } else { 0 }) | fabric_words as u32;
            let mut signed = Vec::with_capacity(5 + header.len() + fabric.len() + footer.len());
            signed.extend_from_slice(&[0, 0, 0, 0]); // plaintext blocks carry a zero IV
            signed.push(dlc);
            signed.extend_from_slice(&header);
            signed.extend_from_slice(&fabric);
            signed.extend_from_slice(&footer);

            let digest = digest256(&signed);
            let signature = {
                let mut cache = ctx.resources.sig_cache.lock().expect("cache poisoned");
                match cache.get(&digest.0) {
                    Some(sig) => sig.clone(),
                    None => {
                        let sig = rsa_sign(&signer, &digest)?;
                        cache.insert(digest.0, sig.clone());
                        sig
                    }
                }
            };

            let mut block = pubkey.words();
            block.extend_from_slice(&[0; RSA_PADDING_WORDS]);
            block.extend_from_slice(&signature);
            block.extend_from_slice(&signed);

            // Large writes use the zero-count type 1 / type 2 pair.
            let t1 =
                encode_type1_header(Opcode::Write, regs::RSA_DATA_IN, 0).expect("static header");
            let t2 = encode_type2_header(Opcode::Write, block.len() as u32)
                .map_err(|e| node_err(path, e.to_string()))?;
            ctx.emit(t1, out);
            ctx.emit(t2, out);
            ctx.emit_all(&block, out);

            if *rdw_go {
                let hdr = encode_type1_header(Opcode::Write, regs::CMD, 1).expect("static header");
                ctx.emit(hdr, out);
                ctx.emit(CommandCode::RdwGo.code(), out);
            }
        }
        TemplateNode::FuzzedFileOverlay {
            base_file,
            fuzzing_mask,
            position,
        } => {
            let base = ctx.resources.files.get(base_file).ok_or_else(|| {
                GrammarError::MissingResource {
                    path: path.to_string(),
                    reference: base_file.to_string(),
                }
            })?;
            let digit = ctx.take_digit();
            let per_position = 1u64 << fuzzing_mask.count_ones();
            let pos = (digit / per_position) as usize;
            let counter = digit % per_position;
            let at = out.len() + position.index_start + pos;
            out.extend_from_slice(base);
            out[at] = (out[at] & !fuzzing_mask) | inject(counter, *fuzzing_mask)?;
        }
    }
    Ok(())
}

fn default_rsa_header(g: &DeviceGeometry, path: &str) -> Result<Vec<Word>, GrammarError> {
    let mut words = vec![
        encode_type1_header(Opcode::Write, regs::FAR, 1).expect("static header"),
        0,
        encode_type1_header(Opcode::Write, regs::CMD, 1).expect("static header"),
        CommandCode::Wcfg.code(),
    ];
    if words.len() > g.header_buffer_words {
        return Err(node_err(
            path,
            "header buffer too small for the default header",
        ));
    }
    words.resize(g.header_buffer_words, NOP_WORD);
    Ok(words)
}

fn default_rsa_footer(g: &DeviceGeometry, path: &str) -> Result<Vec<Word>, GrammarError> {
    let cmd = encode_type1_header(Opcode::Write, regs::CMD, 1).expect("static header");
    let mut words = vec![
        cmd,
        CommandCode::Grestore.code(),
        cmd,
        CommandCode::Dghigh.code(),
        cmd,
        CommandCode::Start.code(),
        cmd,
        CommandCode::Desync.code(),
    ];
    if words.len() > g.footer_buffer_words {
        return Err(node_err(
            path,
            "footer buffer too small for the default footer",
        ));
    }
    words.resize(g.footer_buffer_words, NOP_WORD);
    Ok(words)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{decrypt_ctr, keystream_word, AesKey};
    use proptest::prelude::*;

    fn test_key_material() -> KeyMaterial {
        let mut bytes = [0u8; 32];
        for (i, b) in bytes.iter_mut().enumerate() {
            *b = i as u8;
        }
        KeyMaterial::from_aes(AesKey(bytes))
    }

    #[test]
    fn inject_examples() {
        assert_eq!(inject(0b101, 0x0000_001F).unwrap(), 0x0000_0005);
        assert_eq!(inject(0b10, 0x0000_0030).unwrap(), 0x0000_0020);
        assert_eq!(inject((1 << 21) - 1, 0xF803_E7FF).unwrap(), 0xF803_E7FF);
        assert!(matches!(
            inject(4, 0x3),
            Err(GrammarError::CounterOutOfRange { .. })
        ));
    }

    #[test]
    fn case_count_products() {
        let masked_cmd = |mask| TemplateNode::BitstreamWord {
            static_bits: 0,
            fuzzing_mask: mask,
        };
        let req = FuzzRequest::new(
            "three_slots",
            vec![masked_cmd(0x1F), masked_cmd(0x1F), masked_cmd(0x1F)],
        );
        assert_eq!(req.case_count().unwrap(), 32_768);

        let req = FuzzRequest::new(
            "overlay",
            vec![TemplateNode::FuzzedFileOverlay {
                base_file: "base".into(),
                fuzzing_mask: 0xF803_E7FF,
                position: FuzzPosition {
                    index_start: 284,
                    word_count: 40,
                },
            }],
        )
        .with_file("base", vec![0; 400]);
        assert_eq!(req.case_count().unwrap(), 83_886_080);
    }

    #[test]
    fn case_count_overflow_is_a_capacity_error() {
        let wide = TemplateNode::BitstreamWord {
            static_bits: 0,
            fuzzing_mask: 0xFFFF_FFFF,
        };
        let req = FuzzRequest::new("too_big", vec![wide.clone(), wide.clone(), wide]);
        assert!(matches!(req.case_count(), Err(GrammarError::Capacity(_))));
    }

    #[test]
    fn render_sync_and_nop() {
        let req = FuzzRequest::new(
            "tiny",
            vec![TemplateNode::SyncWord, TemplateNode::Nop { count: 1 }],
        );
        let image = req.render(0).unwrap();
        assert_eq!(image.words, vec![SYNC_WORD, NOP_WORD]);
        assert_eq!(image.sync_offset, Some(1));
    }

    #[test]
    fn last_fuzz_site_varies_fastest() {
        let req = FuzzRequest::new(
            "order",
            vec![
                TemplateNode::BitstreamWord {
                    static_bits: 0,
                    fuzzing_mask: 0x2,
                },
                TemplateNode::BitstreamWord {
                    static_bits: 0,
                    fuzzing_mask: 0x1,
                },
            ],
        );
        let words: Vec<(Word, Word)> = (0..4)
            .map(|i| {
                let w = req.render(i).unwrap().words;
                (w[0], w[1])
            })
            .collect();
        assert_eq!(words, vec![(0, 0), (0, 1), (2, 0), (2, 1)]);
    }

    #[test]
    fn overlay_mutates_exactly_one_word() {
        let base = vec![0x1111_1111, 0x2222_2222, 0x3333_3333, 0x4444_4444];
        let req = FuzzRequest::new(
            "overlay",
            vec![TemplateNode::FuzzedFileOverlay {
                base_file: "base".into(),
                fuzzing_mask: 0x0000_00FF,
                position: FuzzPosition {
                    index_start: 1,
                    word_count: 2,
                },
            }],
        )
        .with_file("base", base.clone());
        assert_eq!(req.case_count().unwrap(), 2 * 256);

        // Position-major: case 256 is the first case of position 1.
        let image = req.render(256 + 0x5A).unwrap();
        let diffs: Vec<usize> = (0..base.len())
            .filter(|&i| image.words[i] != base[i])
            .collect();
        assert_eq!(diffs, vec![2]);
        assert_eq!(image.words[2], (0x3333_3333 & !0xFF) | 0x5A);
    }

    #[test]
    fn auto_crc_tracks_write_payloads() {
        let req = FuzzRequest::new(
            "crc",
            vec![
                TemplateNode::SyncWord,
                TemplateNode::Type1Write { reg: 6, count: 1 },
                TemplateNode::Static {
                    bytes: vec![0x00, 0x00, 0x05, 0x01],
                    repeat: 1,
                },
                TemplateNode::Type1Write { reg: 5, count: 1 },
                TemplateNode::Static {
                    bytes: vec![0x00, 0x00, 0x05, 0x01],
                    repeat: 1,
                },
                TemplateNode::Type1Write { reg: 4, count: 1 },
                TemplateNode::Static {
                    bytes: vec![0x00, 0x00, 0x00, 0x01],
                    repeat: 1,
                },
                TemplateNode::AutoCrcPacket,
            ],
        );
        let image = req.render(0).unwrap();
        // Golden CRC over (6,0x501) (5,0x501) (4,0x1) from the reference
        // implementation.
        assert_eq!(*image.words.last().unwrap(), 0x0B8F_3F28);
        assert_eq!(
            image.words[image.words.len() - 2],
            encode_type1_header(Opcode::Write, regs::CRC, 1).unwrap()
        );
    }

    #[test]
    fn encrypted_block_decrypts_and_verifies() {
        let key_material = test_key_material();
        let key = key_material.aes_key().unwrap();
        let iv = GcmIv([1, 2, 3, 4]);
        let req = FuzzRequest::new(
            "enc",
            vec![
                TemplateNode::SyncWord,
                TemplateNode::EncryptedGcmBlock {
                    children: vec![
                        TemplateNode::Type1Write { reg: 16, count: 1 },
                        TemplateNode::Static {
                            bytes: vec![0xDE, 0xAD, 0xC0, 0xDE],
                            repeat: 1,
                        },
                        TemplateNode::Nop { count: 3 },
                    ],
                    key_ref: "k".into(),
                    iv,
                },
            ],
        )
        .with_key("k", key_material);

        let image = req.render(0).unwrap();
        // sync + IV write (5) + mask write (2) + ctl0 write (2) = 10 words
        // of plaintext preamble; children are 5 words padded to 7, plus one
        // checksum word per block.
        assert_eq!(image.words.len(), 10 + 8);
        let ct = &image.words[10..];
        let stream = decrypt_ctr(&key, &iv, ct);
        let h = derive_h(&key, &iv);
        assert_eq!(
            stream[7],
            block_checksum(h, &key, &iv, 0, &stream[..7]).unwrap()
        );
        assert_eq!(
            stream[0],
            encode_type1_header(Opcode::Write, 16, 1).unwrap()
        );
        assert_eq!(stream[1], 0xDEAD_C0DE);
        assert_eq!(&stream[2..7], &[NOP_WORD; 5]);
    }

    #[test]
    fn encrypted_zero_plaintext_words_equal_keystream() {
        // Sanity link between the render path and the raw keystream: an
        // all-zero child word at stream position i encrypts to ks(i).
        let key_material = test_key_material();
        let key = key_material.aes_key().unwrap();
        let iv = GcmIv([9, 9, 9, 9]);
        let req = FuzzRequest::new(
            "zeros",
            vec![TemplateNode::EncryptedGcmBlock {
                children: vec![TemplateNode::Static {
                    bytes: vec![0; 4],
                    repeat: 1,
                }],
                key_ref: "k".into(),
                iv,
            }],
        )
        .with_key("k", key_material);
        let image = req.render(0).unwrap();
        let ct = &image.words[9..];
        assert_eq!(ct[0], keystream_word(&key, &iv, 0));
    }

    #[test]
    fn template_json_roundtrip() {
        let json = r#"{
            "name": "roundtrip",
            "children": [
                {"kind": "sync_word"},
                {"kind": "nop", "count": 3},
                {"kind": "type1_write", "reg": 4},
                {"kind": "bitstream_word", "static_bits": "00000000", "fuzzing_mask": "0000001f"},
                {"kind": "static", "hex": "00000016"}
            ]
        }"#;
        let req = FuzzRequest::from_json(json, None).unwrap();
        assert_eq!(req.children.len(), 5);
        let text = serde_json::to_string(&req).unwrap();
        let again = FuzzRequest::from_json(&text, None).unwrap();
        assert_eq!(req, again);
    }

    #[test]
    fn template_rejects_mask_overlap() {
        let json = r#"{
            "name": "bad",
            "children": [
                {"kind": "bitstream_word", "static_bits": "00000010", "fuzzing_mask": "000000f0"}
            ]
        }"#;
        let err = FuzzRequest::from_json(json, None).unwrap_err();
        assert!(matches!(err, GrammarError::Node { .. }), "{err}");
        assert!(err.to_string().contains("children[0]"));
    }

    #[test]
    fn template_rejects_unknown_kind() {
        let json = r#"{"name": "bad", "children": [{"kind": "mystery"}]}"#;
        assert!(matches!(
            FuzzRequest::from_json(json, None),
            Err(GrammarError::Json(_))
        ));
    }

    proptest! {
        /// Enumeration is exhaustive and duplicate-free for nonempty masks.
        #[test]
        fn enumeration_has_no_duplicates(mask in 1u32..256, statics in any::<u32>()) {
            let req = FuzzRequest::new(
                "dedup",
                vec![
                    TemplateNode::SyncWord,
                    TemplateNode::BitstreamWord {
                        static_bits: statics & !mask,
                        fuzzing_mask: mask,
                    },
                ],
            );
            let count = req.case_count().unwrap();
            let mut seen = std::collections::HashSet::new();
            for case in 0..count {
                prop_assert!(seen.insert(req.render(case).unwrap().words));
            }
            prop_assert_eq!(seen.len() as u64, count);
        }
    }
}
