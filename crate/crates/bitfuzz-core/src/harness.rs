//! Crash-settings evaluation, campaign execution, persistence and replay.
//!
//! A campaign couples a fuzzer spec (one or more requests plus crash
//! settings) with a target. The case space is partitioned contiguously:
//! first by the `--shard i/k` selection, then across the targets of one
//! run. Everything is deterministic given (spec, shard plan), so crash sets
//! are invariant under shard count and survive interruption and resume
//! bit-exactly.
//!
//! Workers share only the append-only crash sink and a stop flag. The stop
//! flag is raised once total crashes reach `max_crashes`, but workers only
//! look at it on checkpoint boundaries, so a run may overshoot by up to one
//! checkpoint window.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write as _};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant, SystemTime};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bitstream::{BitstreamImage, Word};
use crate::grammar::{FuzzRequest, GrammarError};
use crate::hexfmt;
use crate::sim::{DeviceConfig, EngineState, Lifecycle, SimError, Unresponsive};
use crate::wire::TcpTarget;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Grammar(#[from] GrammarError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("spec parse error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("fuzzer spec: {0}")]
    BadSpec(String),
    #[error("target uri {0:?} (expected sim:<device-config> or tcp:<host>:<port>)")]
    BadUri(String),
    #[error("target unresponsive during campaign setup")]
    SetupUnresponsive,
    #[error("transport: {0}")]
    Transport(String),
    #[error("campaign state: {0}")]
    Campaign(String),
}

// ---------------------------------------------------------------------------
// Targets
// ---------------------------------------------------------------------------

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TargetError {
    /// The device does not answer; a power cycle is the only way out.
    #[error("target unresponsive")]
    Unresponsive,
    /// The transport failed; distinct from unresponsiveness and retriable.
    #[error("transport: {0}")]
    Transport(String),
}

/// What programming one bitstream did to the target.
#[derive(Debug, Clone, PartialEq)]
pub struct ProgramOutcome {
    pub lifecycle: Lifecycle,
    pub emission: Option<Vec<Word>>,
}

/// A device under test: the in-process simulator or a wire-protocol peer.
pub trait Target: Send {
    fn program(&mut self, image: &BitstreamImage) -> Result<ProgramOutcome, TargetError>;
    fn read_all(&mut self) -> Result<[Word; 32], TargetError>;
    fn reset(&mut self) -> Result<(), TargetError>;
    fn power_cycle(&mut self) -> Result<(), TargetError>;
    fn done_pin(&mut self) -> Result<bool, TargetError>;
}

/// In-process simulator target.
pub struct SimTarget {
    engine: EngineState,
}

impl SimTarget {
    pub fn new(config: &DeviceConfig) -> Result<SimTarget, SimError> {
        Ok(SimTarget {
            engine: EngineState::new(config)?,
        })
    }

    pub fn engine(&self) -> &EngineState {
        &self.engine
    }

    pub fn engine_mut(&mut self) -> &mut EngineState {
        &mut self.engine
    }
}

fn unresponsive(_: Unresponsive) -> TargetError {
    TargetError::Unresponsive
}

impl Target for SimTarget {
    fn program(&mut self, image: &BitstreamImage) -> Result<ProgramOutcome, TargetError> {
        let report = self.engine.program(image).map_err(unresponsive)?;
        Ok(ProgramOutcome {
            lifecycle: report.lifecycle,
            emission: report.emission,
        })
    }

    fn read_all(&mut self) -> Result<[Word; 32], TargetError> {
        self.engine.read_all().map_err(unresponsive)
    }

    fn reset(&mut self) -> Result<(), TargetError> {
        self.engine.reset_jprogram().map_err(unresponsive)
    }

    fn power_cycle(&mut self) -> Result<(), TargetError> {
        self.engine.power_cycle();
        Ok(())
    }

    fn done_pin(&mut self) -> Result<bool, TargetError> {
        self.engine.done_pin().map_err(unresponsive)
    }
}

/// Open a target from a URI: `sim:<device-config.json>` (empty path for the
/// default device) or `tcp:<host>:<port>`.
pub fn connect(uri: &str) -> Result<Box<dyn Target>, HarnessError> {
    if let Some(path) = uri.strip_prefix("sim:") {
        let config = if path.is_empty() {
            DeviceConfig::default()
        } else {
            DeviceConfig::load(path)?
        };
        return Ok(Box::new(SimTarget::new(&config)?));
    }
    if let Some(addr) = uri.strip_prefix("tcp:") {
        let target =
            TcpTarget::connect(addr).map_err(|e| HarnessError::Transport(e.to_string()))?;
        return Ok(Box::new(target));
    }
    Err(HarnessError::BadUri(uri.to_string()))
}

// ---------------------------------------------------------------------------
// Crash settings
// ---------------------------------------------------------------------------

mod opt_words {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<Vec<u32>>, s: S) -> Result<S::Ok, S::Error> {
        v.as_ref()
            .map(|words| {
                words
                    .iter()
                    .map(|w| format!("{:08x}", w))
                    .collect::<Vec<_>>()
            })
            .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vec<u32>>, D::Error> {
        let raw: Option<Vec<String>> = Option::deserialize(d)?;
        match raw {
            None => Ok(None),
            Some(items) => items
                .iter()
                .map(|s| {
                    u32::from_str_radix(s.trim().trim_start_matches("0x"), 16)
                        .map_err(|_| serde::de::Error::custom(format!("bad hex word {s:?}")))
                })
                .collect::<Result<Vec<_>, _>>()
                .map(Some),
        }
    }
}

mod opt_word {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<u32>, s: S) -> Result<S::Ok, S::Error> {
        v.map(|w| format!("{:08x}", w)).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<u32>, D::Error> {
        let raw: Option<String> = Option::deserialize(d)?;
        match raw {
            None => Ok(None),
            Some(s) => u32::from_str_radix(s.trim().trim_start_matches("0x"), 16)
                .map(Some)
                .map_err(|_| serde::de::Error::custom(format!("bad hex word {s:?}"))),
        }
    }
}

/// Per-register crash predicates. `None` fields inherit from the DEFAULT
/// entry; an empty value list disables the predicate.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegisterSettings {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub probe: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub crash_if_differs_from_default: Option<bool>,
    #[serde(with = "opt_words", skip_serializing_if = "Option::is_none")]
    pub crash_if_equal_to: Option<Vec<Word>>,
    #[serde(with = "opt_words", skip_serializing_if = "Option::is_none")]
    pub crash_if_not_equal_to: Option<Vec<Word>>,
    #[serde(with = "opt_word", skip_serializing_if = "Option::is_none")]
    pub crash_if_some_bits_in_mask_set: Option<Word>,
}

/// The DEFAULT entry plus specific register entries overriding it
/// field by field. Built-in baseline: probe everything, crash on any
/// deviation from the defaults snapshot.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CrashSettings {
    pub default: RegisterSettings,
    pub registers: BTreeMap<u8, RegisterSettings>,
}

/// Resolved predicates for one register.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveSettings {
    pub probe: bool,
    pub differs_from_default: bool,
    pub equal_to: Vec<Word>,
    pub not_equal_to: Vec<Word>,
    pub bits_mask: Word,
}

impl CrashSettings {
    pub fn effective(&self, reg: u8) -> EffectiveSettings {
        let spec = self.registers.get(&reg);
        let d = &self.default;
        let pick = |f: fn(&RegisterSettings) -> Option<bool>, fallback: bool| {
            spec.and_then(f).or_else(|| f(d)).unwrap_or(fallback)
        };
        let pick_words = |f: fn(&RegisterSettings) -> Option<&Vec<Word>>| {
            spec.and_then(f)
                .or_else(|| f(d))
                .cloned()
                .unwrap_or_default()
        };
        EffectiveSettings {
            probe: pick(|s| s.probe, true),
            differs_from_default: pick(|s| s.crash_if_differs_from_default, true),
            equal_to: pick_words(|s| s.crash_if_equal_to.as_ref()),
            not_equal_to: pick_words(|s| s.crash_if_not_equal_to.as_ref()),
            bits_mask: spec
                .and_then(|s| s.crash_if_some_bits_in_mask_set)
                .or(d.crash_if_some_bits_in_mask_set)
                .unwrap_or(0),
        }
    }

    /// Whether the built-in soft-crash predicate is armed. An all-zero dump
    /// on an all-zero-default device is indistinguishable from the default
    /// state by value comparison, so the target-layer soft-crash signal
    /// stands in for crash_if_differs_from_default at the DEFAULT level.
    pub fn soft_crash_heuristic_enabled(&self) -> bool {
        self.default.crash_if_differs_from_default.unwrap_or(true)
    }
}

#[derive(Serialize, Deserialize, Default)]
#[serde(transparent)]
struct SettingsFile(BTreeMap<String, RegisterSettings>);

impl TryFrom<SettingsFile> for CrashSettings {
    type Error = String;

    fn try_from(file: SettingsFile) -> Result<CrashSettings, String> {
        let mut out = CrashSettings::default();
        for (key, value) in file.0 {
            if key == "DEFAULT" {
                out.default = value;
            } else if let Some(n) = key.strip_prefix("register") {
                let reg: u8 = n.parse().map_err(|_| format!("bad settings key {key:?}"))?;
                if reg > 31 {
                    return Err(format!("register {reg} out of range"));
                }
                out.registers.insert(reg, value);
            } else {
                return Err(format!(
                    "bad settings key {key:?} (expected DEFAULT or register<n>)"
                ));
            }
        }
        Ok(out)
    }
}

impl From<CrashSettings> for SettingsFile {
    fn from(s: CrashSettings) -> SettingsFile {
        let mut map = BTreeMap::new();
        if s.default != RegisterSettings::default() {
            map.insert("DEFAULT".to_string(), s.default);
        }
        for (reg, value) in s.registers {
            map.insert(format!("register{reg}"), value);
        }
        SettingsFile(map)
    }
}

impl Serialize for CrashSettings {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        SettingsFile::from(self.clone()).serialize(s)
    }
}

impl<'de> Deserialize<'de> for CrashSettings {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<CrashSettings, D::Error> {
        let file = SettingsFile::deserialize(d)?;
        CrashSettings::try_from(file).map_err(serde::de::Error::custom)
    }
}

// ---------------------------------------------------------------------------
// Case evaluation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Normal,
    SoftCrash,
    Unresponsive,
}

impl std::fmt::Display for Outcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Outcome::Normal => "normal",
            Outcome::SoftCrash => "soft_crash",
            Outcome::Unresponsive => "unresponsive",
        })
    }
}

/// One fired predicate: which register (None for target-level signals),
/// which predicate, and what was observed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Triggered {
    pub register: Option<u8>,
    pub predicate: String,
    pub observed: String,
}

/// Fire every enabled predicate of every probed register. Pure in
/// (dump, defaults, settings).
pub fn evaluate(
    dump: &[Word; 32],
    defaults: &[Word; 32],
    settings: &CrashSettings,
) -> Vec<Triggered> {
    let mut out = Vec::new();
    for reg in 0..32u8 {
        let eff = settings.effective(reg);
        if !eff.probe {
            continue;
        }
        let value = dump[reg as usize];
        let observed = hexfmt::word_to_hex(value);
        if eff.differs_from_default && value != defaults[reg as usize] {
            out.push(Triggered {
                register: Some(reg),
                predicate: "crash_if_differs_from_default".into(),
                observed: format!(
                    "{} (default {})",
                    observed,
                    hexfmt::word_to_hex(defaults[reg as usize])
                ),
            });
        }
        if eff.equal_to.contains(&value) {
            out.push(Triggered {
                register: Some(reg),
                predicate: "crash_if_equal_to".into(),
                observed: observed.clone(),
            });
        }
        if !eff.not_equal_to.is_empty() && !eff.not_equal_to.contains(&value) {
            out.push(Triggered {
                register: Some(reg),
                predicate: "crash_if_not_equal_to".into(),
                observed: observed.clone(),
            });
        }
        if eff.bits_mask != 0 && value & eff.bits_mask != 0 {
            out.push(Triggered {
                register: Some(reg),
                predicate: "crash_if_some_bits_in_mask_set".into(),
                observed: format!("{} & mask {}", observed, hexfmt::word_to_hex(eff.bits_mask)),
            });
        }
    }
    out
}

/// Snapshot the clean state: reset, then read every register.
pub fn snapshot_defaults(target: &mut dyn Target) -> Result<[Word; 32], TargetError> {
    target.reset()?;
    target.read_all()
}

/// Everything one test case produced.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseResult {
    pub outcome: Outcome,
    pub dump: Option<[Word; 32]>,
    pub emission: Option<Vec<Word>>,
    pub triggered: Vec<Triggered>,
}

impl CaseResult {
    pub fn is_crash(&self) -> bool {
        !self.triggered.is_empty()
    }
}

/// Power-cycle, reset, program, read back, evaluate. An unresponsive target
/// is logged as a crash and recovered with a power cycle. Transport
/// failures propagate as retriable errors.
///
/// The power cycle before each case clears the sticky registers, so every
/// case starts from factory state. Without it a diverted write from one
/// case leaks into the dumps of all later cases on the same target, crash
/// sets would depend on the shard plan, and records would not replay on a
/// fresh device.
pub fn run_case(
    target: &mut dyn Target,
    image: &BitstreamImage,
    defaults: &[Word; 32],
    settings: &CrashSettings,
) -> Result<CaseResult, TargetError> {
    target.power_cycle()?;
    target.reset()?;

    let (mut outcome, emission) = match target.program(image) {
        Ok(o) => match o.lifecycle {
            Lifecycle::HardCrashed => (Outcome::Unresponsive, o.emission),
            Lifecycle::SoftCrashed => (Outcome::SoftCrash, o.emission),
            _ => (Outcome::Normal, o.emission),
        },
        Err(TargetError::Unresponsive) => (Outcome::Unresponsive, None),
        Err(e) => return Err(e),
    };

    let dump = if outcome == Outcome::Unresponsive {
        target.power_cycle()?;
        None
    } else {
        match target.read_all() {
            Ok(d) => Some(d),
            Err(TargetError::Unresponsive) => {
                outcome = Outcome::Unresponsive;
                target.power_cycle()?;
                None
            }
            Err(e) => return Err(e),
        }
    };

    let mut triggered = match &dump {
        Some(d) => evaluate(d, defaults, settings),
        None => Vec::new(),
    };
    match outcome {
        Outcome::SoftCrash if settings.soft_crash_heuristic_enabled() => {
            triggered.push(Triggered {
                register: None,
                predicate: "soft_crash_all_registers_zero".into(),
                observed: "target reported soft crash".into(),
            })
        }
        Outcome::Unresponsive => triggered.push(Triggered {
            register: None,
            predicate: "unresponsive".into(),
            observed: "target timed out".into(),
        }),
        _ => {}
    }

    Ok(CaseResult {
        outcome,
        dump,
        emission,
        triggered,
    })
}

// ---------------------------------------------------------------------------
// Crash records
// ---------------------------------------------------------------------------

/// One logged crash, fully replayable on its own: the bitstream, the
/// register dump and every fired predicate ride along.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrashRecord {
    pub case_index: u64,
    pub request: String,
    pub outcome: Outcome,
    pub bitstream: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dump: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub emission: Option<String>,
    pub triggered: Vec<Triggered>,
}

impl CrashRecord {
    pub fn new(case_index: u64, request: &str, image: &BitstreamImage, case: &CaseResult) -> Self {
        CrashRecord {
            case_index,
            request: request.to_string(),
            outcome: case.outcome,
            bitstream: hexfmt::words_to_hex(&image.words),
            dump: case
                .dump
                .map(|d| d.iter().map(|&w| hexfmt::word_to_hex(w)).collect()),
            emission: case.emission.as_deref().map(hexfmt::words_to_hex),
            triggered: case.triggered.clone(),
        }
    }

    pub fn image(&self) -> Result<BitstreamImage, HarnessError> {
        let words = hexfmt::words_from_hex(&self.bitstream)
            .ok_or_else(|| HarnessError::Campaign("bad bitstream hex in record".into()))?;
        Ok(BitstreamImage::from_words(words))
    }

    pub fn dump_words(&self) -> Option<[Word; 32]> {
        let dump = self.dump.as_ref()?;
        if dump.len() != 32 {
            return None;
        }
        let mut out = [0; 32];
        for (i, s) in dump.iter().enumerate() {
            out[i] = hexfmt::word_from_hex(s)?;
        }
        Some(out)
    }

    pub fn emission_words(&self) -> Option<Vec<Word>> {
        self.emission.as_deref().and_then(hexfmt::words_from_hex)
    }
}

// ---------------------------------------------------------------------------
// Fuzzer specs
// ---------------------------------------------------------------------------

fn default_max_crashes() -> u64 {
    128
}

fn default_checkpoint_every() -> u64 {
    1024
}

#[derive(Serialize, Deserialize, Default)]
#[serde(default)]
struct SpecFile {
    requests: Vec<FuzzRequest>,
    request_files: Vec<String>,
    settings: CrashSettings,
    max_crashes: Option<u64>,
    checkpoint_every: Option<u64>,
}

/// One or more requests plus crash settings and campaign parameters. The
/// campaign case space is the concatenation of the requests' spaces.
#[derive(Debug, Clone, PartialEq)]
pub struct FuzzerSpec {
    pub requests: Vec<FuzzRequest>,
    pub settings: CrashSettings,
    pub max_crashes: u64,
    pub checkpoint_every: u64,
}

impl FuzzerSpec {
    pub fn new(requests: Vec<FuzzRequest>, settings: CrashSettings) -> FuzzerSpec {
        FuzzerSpec {
            requests,
            settings,
            max_crashes: default_max_crashes(),
            checkpoint_every: default_checkpoint_every(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<FuzzerSpec, HarnessError> {
        let path = path.as_ref();
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        let text = std::fs::read_to_string(path)?;
        let file: SpecFile = serde_json::from_str(&text)?;
        let mut requests = Vec::new();
        for name in &file.request_files {
            requests.push(FuzzRequest::load(dir.join(name))?);
        }
        for mut req in file.requests {
            req.resolve_resources(dir)?;
            req.validate()?;
            requests.push(req);
        }
        if requests.is_empty() {
            return Err(HarnessError::BadSpec("no requests".into()));
        }
        Ok(FuzzerSpec {
            requests,
            settings: file.settings,
            max_crashes: file.max_crashes.unwrap_or_else(default_max_crashes),
            checkpoint_every: file
                .checkpoint_every
                .unwrap_or_else(default_checkpoint_every),
        })
    }

    /// Total case count across all requests.
    pub fn total_cases(&self) -> Result<u64, HarnessError> {
        let mut total: u128 = 0;
        for req in &self.requests {
            total += req.case_count()? as u128;
            if total > 1 << 63 {
                return Err(HarnessError::BadSpec(format!(
                    "campaign case space of {total} cases exceeds 2^63"
                )));
            }
        }
        Ok(total as u64)
    }

    /// Map a global case index onto (request, local index). Indices are
    /// request-major in declaration order.
    pub fn locate(&self, case_index: u64) -> Result<(&FuzzRequest, u64), HarnessError> {
        let mut rest = case_index;
        for req in &self.requests {
            let count = req.case_count()?;
            if rest < count {
                return Ok((req, rest));
            }
            rest -= count;
        }
        Err(HarnessError::BadSpec(format!(
            "case index {case_index} out of range"
        )))
    }

    pub fn render(&self, case_index: u64) -> Result<(&str, BitstreamImage), HarnessError> {
        let (req, local) = self.locate(case_index)?;
        Ok((req.name.as_str(), req.render(local)?))
    }
}

// ---------------------------------------------------------------------------
// Campaigns
// ---------------------------------------------------------------------------

/// A contiguous 1-of-k slice of the case space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shard {
    pub index: u64,
    pub total: u64,
}

impl Default for Shard {
    fn default() -> Self {
        Shard { index: 0, total: 1 }
    }
}

impl Shard {
    pub fn parse(s: &str) -> Result<Shard, HarnessError> {
        let (i, k) = s
            .split_once('/')
            .ok_or_else(|| HarnessError::BadSpec(format!("bad shard {s:?}, expected i/k")))?;
        let shard = Shard {
            index: i
                .parse()
                .map_err(|_| HarnessError::BadSpec(format!("bad shard index {i:?}")))?,
            total: k
                .parse()
                .map_err(|_| HarnessError::BadSpec(format!("bad shard total {k:?}")))?,
        };
        if shard.total == 0 || shard.index >= shard.total {
            return Err(HarnessError::BadSpec(format!("bad shard {s:?}")));
        }
        Ok(shard)
    }

    fn range(&self, total_cases: u64) -> (u64, u64) {
        let chunk = total_cases.div_ceil(self.total);
        let lo = (self.index * chunk).min(total_cases);
        let hi = (lo + chunk).min(total_cases);
        (lo, hi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerRange {
    pub start: u64,
    pub end: u64,
    pub next: u64,
}

/// The persisted campaign state: manifest plus checkpoint. Lives as
/// `campaign.json` next to `crashes.jsonl` in the campaign directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Campaign {
    /// Wall-clock creation stamp; the single nondeterministic field, always
    /// excluded from comparisons.
    pub created_at: String,
    pub shard: Shard,
    pub max_crashes: u64,
    pub checkpoint_every: u64,
    pub total_cases: u64,
    pub defaults: Vec<String>,
    pub workers: Vec<WorkerRange>,
    pub crashes: u64,
    pub finished: bool,
}

impl Campaign {
    pub fn manifest_path(dir: &Path) -> PathBuf {
        dir.join("campaign.json")
    }

    pub fn crashes_path(dir: &Path) -> PathBuf {
        dir.join("crashes.jsonl")
    }

    pub fn load(dir: &Path) -> Result<Campaign, HarnessError> {
        let text = std::fs::read_to_string(Campaign::manifest_path(dir))?;
        Ok(serde_json::from_str(&text)?)
    }

    fn store(&self, dir: &Path) -> Result<(), HarnessError> {
        let tmp = dir.join("campaign.json.tmp");
        std::fs::write(&tmp, serde_json::to_string_pretty(self)?)?;
        std::fs::rename(tmp, Campaign::manifest_path(dir))?;
        Ok(())
    }

    pub fn defaults_words(&self) -> Result<[Word; 32], HarnessError> {
        if self.defaults.len() != 32 {
            return Err(HarnessError::Campaign(
                "defaults snapshot not 32 words".into(),
            ));
        }
        let mut out = [0; 32];
        for (i, s) in self.defaults.iter().enumerate() {
            out[i] = hexfmt::word_from_hex(s)
                .ok_or_else(|| HarnessError::Campaign(format!("bad defaults word {s:?}")))?;
        }
        Ok(out)
    }
}

/// Load every crash record from a campaign directory, sorted by case index.
pub fn load_crash_records(dir: &Path) -> Result<Vec<CrashRecord>, HarnessError> {
    let path = Campaign::crashes_path(dir);
    if !path.exists() {
        return Ok(Vec::new());
    }
    let file = File::open(path)?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    out.sort_by_key(|r: &CrashRecord| r.case_index);
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct CampaignOptions {
    pub out_dir: PathBuf,
    /// None means the whole case space for a new campaign, or whatever the
    /// manifest says on resume.
    pub shard: Option<Shard>,
    pub max_crashes: Option<u64>,
    pub checkpoint_every: Option<u64>,
    /// Stop cleanly after this many cases (across all workers); the
    /// campaign checkpoint stays resumable. Test hook for interruption.
    pub case_budget: Option<u64>,
    pub resume: bool,
}

impl CampaignOptions {
    pub fn new(out_dir: impl Into<PathBuf>) -> CampaignOptions {
        CampaignOptions {
            out_dir: out_dir.into(),
            shard: None,
            max_crashes: None,
            checkpoint_every: None,
            case_budget: None,
            resume: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CampaignStats {
    pub total_cases: u64,
    pub cases_run: u64,
    pub crashes: u64,
    pub elapsed: Duration,
    pub finished: bool,
}

impl CampaignStats {
    pub fn rate(&self) -> f64 {
        let secs = self.elapsed.as_secs_f64();
        if secs > 0.0 {
            self.cases_run as f64 / secs
        } else {
            0.0
        }
    }
}

fn split_range(lo: u64, hi: u64, parts: usize) -> Vec<WorkerRange> {
    let total = hi - lo;
    let parts = parts as u64;
    let chunk = total.div_ceil(parts.max(1));
    (0..parts)
        .map(|i| {
            let start = (lo + i * chunk).min(hi);
            let end = (start + chunk).min(hi);
            WorkerRange {
                start,
                end,
                next: start,
            }
        })
        .collect()
}

struct CrashSink {
    writer: Mutex<(BufWriter<File>, Vec<CrashRecord>)>,
    count: AtomicU64,
    stop: AtomicBool,
    max_crashes: u64,
}

impl CrashSink {
    fn append(&self, record: CrashRecord) -> Result<(), HarnessError> {
        let mut guard = self.writer.lock().expect("sink poisoned");
        let line = serde_json::to_string(&record)?;
        guard.0.write_all(line.as_bytes())?;
        guard.0.write_all(b"\n")?;
        guard.0.flush()?;
        guard.1.push(record);
        drop(guard);
        let total = self.count.fetch_add(1, Ordering::SeqCst) + 1;
        if total >= self.max_crashes {
            self.stop.store(true, Ordering::SeqCst);
        }
        Ok(())
    }
}

/// Run (or resume) a campaign over one or more targets. The shard range is
/// split contiguously across the targets; each worker streams its cases,
/// appends crash records, and checkpoints every `checkpoint_every` cases.
pub fn run_campaign(
    spec: &FuzzerSpec,
    targets: &mut [Box<dyn Target>],
    options: &CampaignOptions,
) -> Result<CampaignStats, HarnessError> {
    assert!(!targets.is_empty(), "at least one target");
    let started = Instant::now();
    let dir = options.out_dir.clone();
    std::fs::create_dir_all(&dir)?;

    let total_cases = spec.total_cases()?;
    let max_crashes = options.max_crashes.unwrap_or(spec.max_crashes);
    let checkpoint_every = options
        .checkpoint_every
        .unwrap_or(spec.checkpoint_every)
        .max(1);

    let (campaign, defaults, existing_records) = if options.resume {
        let campaign = Campaign::load(&dir)?;
        // An explicit shard must match the manifest; omitted means
        // "continue whatever this directory holds".
        if campaign.total_cases != total_cases || options.shard.is_some_and(|s| s != campaign.shard)
        {
            return Err(HarnessError::Campaign(
                "manifest does not match the spec/shard being resumed".into(),
            ));
        }
        if campaign.workers.len() != targets.len() {
            return Err(HarnessError::Campaign(format!(
                "campaign was started with {} workers, resumed with {}",
                campaign.workers.len(),
                targets.len()
            )));
        }
        let defaults = campaign.defaults_words()?;
        // Drop records past any worker checkpoint; those cases re-run.
        let records: Vec<CrashRecord> = load_crash_records(&dir)?
            .into_iter()
            .filter(|r| {
                campaign
                    .workers
                    .iter()
                    .any(|w| r.case_index >= w.start && r.case_index < w.next)
            })
            .collect();
        (campaign, defaults, records)
    } else {
        let defaults = snapshot_defaults(targets[0].as_mut()).map_err(|e| match e {
            TargetError::Unresponsive => HarnessError::SetupUnresponsive,
            TargetError::Transport(t) => HarnessError::Transport(t),
        })?;
        let shard = options.shard.unwrap_or_default();
        let (lo, hi) = shard.range(total_cases);
        let campaign = Campaign {
            created_at: SystemTime::now()
                .duration_since(SystemTime::UNIX_EPOCH)
                .map(|d| d.as_secs().to_string())
                .unwrap_or_default(),
            shard,
            max_crashes,
            checkpoint_every,
            total_cases,
            defaults: defaults.iter().map(|&w| hexfmt::word_to_hex(w)).collect(),
            workers: split_range(lo, hi, targets.len()),
            crashes: 0,
            finished: false,
        };
        (campaign, defaults, Vec::new())
    };

    // Rewrite the record file to exactly the retained set before appending.
    {
        let mut file = BufWriter::new(File::create(Campaign::crashes_path(&dir))?);
        for record in &existing_records {
            file.write_all(serde_json::to_string(record)?.as_bytes())?;
            file.write_all(b"\n")?;
        }
        file.flush()?;
    }

    let sink = CrashSink {
        writer: Mutex::new((
            BufWriter::new(
                OpenOptions::new()
                    .append(true)
                    .open(Campaign::crashes_path(&dir))?,
            ),
            existing_records,
        )),
        count: AtomicU64::new(0),
        stop: AtomicBool::new(false),
        max_crashes,
    };
    sink.count
        .store(sink.writer.lock().unwrap().1.len() as u64, Ordering::SeqCst);
    if sink.count.load(Ordering::SeqCst) >= max_crashes {
        sink.stop.store(true, Ordering::SeqCst);
    }

    campaign.store(&dir)?;
    let manifest = Mutex::new(campaign);
    let budget = options.case_budget.map(|b| (b, AtomicU64::new(0)));
    let cases_run = AtomicU64::new(0);
    let budget_hit = AtomicBool::new(false);
    let worker_plans: Vec<WorkerRange> = manifest.lock().unwrap().workers.clone();

    let errors: Mutex<Vec<HarnessError>> = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for (worker_id, (target, plan)) in targets.iter_mut().zip(worker_plans.iter()).enumerate() {
            let sink = &sink;
            let manifest = &manifest;
            let errors = &errors;
            let budget = &budget;
            let cases_run = &cases_run;
            let budget_hit = &budget_hit;
            let dir = &dir;
            scope.spawn(move || {
                let result = run_worker(
                    spec,
                    target.as_mut(),
                    plan.clone(),
                    worker_id,
                    &defaults,
                    checkpoint_every,
                    sink,
                    manifest,
                    dir,
                    budget,
                    budget_hit,
                    cases_run,
                );
                if let Err(e) = result {
                    sink.stop.store(true, Ordering::SeqCst);
                    errors.lock().unwrap().push(e);
                }
            });
        }
    });

    if let Some(e) = errors.lock().unwrap().drain(..).next() {
        return Err(e);
    }

    // Final bookkeeping: sorted record file, updated manifest.
    let mut campaign = manifest.into_inner().unwrap();
    {
        let mut guard = sink.writer.lock().unwrap();
        guard.0.flush()?;
        guard.1.sort_by_key(|r| r.case_index);
        let mut file = BufWriter::new(File::create(Campaign::crashes_path(&dir))?);
        for record in guard.1.iter() {
            file.write_all(serde_json::to_string(record)?.as_bytes())?;
            file.write_all(b"\n")?;
        }
        file.flush()?;
    }
    let interrupted = budget_hit.load(Ordering::SeqCst);
    campaign.crashes = sink.count.load(Ordering::SeqCst);
    campaign.finished = !interrupted
        && (sink.stop.load(Ordering::SeqCst) || campaign.workers.iter().all(|w| w.next >= w.end));
    campaign.store(&dir)?;

    Ok(CampaignStats {
        total_cases,
        cases_run: cases_run.load(Ordering::SeqCst),
        crashes: campaign.crashes,
        elapsed: started.elapsed(),
        finished: campaign.finished,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_worker(
    spec: &FuzzerSpec,
    target: &mut dyn Target,
    mut plan: WorkerRange,
    worker_id: usize,
    defaults: &[Word; 32],
    checkpoint_every: u64,
    sink: &CrashSink,
    manifest: &Mutex<Campaign>,
    dir: &Path,
    budget: &Option<(u64, AtomicU64)>,
    budget_hit: &AtomicBool,
    cases_run: &AtomicU64,
) -> Result<(), HarnessError> {
    let checkpoint = |plan: &WorkerRange| -> Result<(), HarnessError> {
        let mut m = manifest.lock().unwrap();
        m.workers[worker_id] = plan.clone();
        m.crashes = sink.count.load(Ordering::SeqCst);
        m.store(dir)
    };

    if sink.stop.load(Ordering::SeqCst) {
        return Ok(());
    }
    let mut window = 0u64;
    while plan.next < plan.end {
        if let Some((limit, used)) = budget {
            if used.fetch_add(1, Ordering::SeqCst) >= *limit {
                budget_hit.store(true, Ordering::SeqCst);
                break;
            }
        }
        let (request_name, image) = spec.render(plan.next)?;
        let case = retry_case(target, &image, defaults, &spec.settings)?;
        if case.is_crash() {
            sink.append(CrashRecord::new(plan.next, request_name, &image, &case))?;
        }
        plan.next += 1;
        window += 1;
        cases_run.fetch_add(1, Ordering::SeqCst);
        if window >= checkpoint_every {
            window = 0;
            checkpoint(&plan)?;
            // The stop rule is only observed on checkpoint boundaries;
            // parallel workers overshoot at most one window.
            if sink.stop.load(Ordering::SeqCst) {
                break;
            }
        }
    }
    checkpoint(&plan)
}

fn retry_case(
    target: &mut dyn Target,
    image: &BitstreamImage,
    defaults: &[Word; 32],
    settings: &CrashSettings,
) -> Result<CaseResult, HarnessError> {
    let mut last = String::new();
    for _ in 0..3 {
        match run_case(target, image, defaults, settings) {
            Ok(case) => return Ok(case),
            Err(TargetError::Transport(t)) => last = t,
            Err(TargetError::Unresponsive) => {
                // run_case already power-cycles; a second unresponsive layer
                // means the recovery path itself failed.
                last = "unresponsive during recovery".into();
            }
        }
    }
    Err(HarnessError::Transport(last))
}

// ---------------------------------------------------------------------------
// Replay
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayReport {
    pub outcome: Outcome,
    pub dump: Option<[Word; 32]>,
    pub emission: Option<Vec<Word>>,
    /// Divergence descriptions; empty when the rerun reproduced the
    /// record exactly.
    pub divergences: Vec<String>,
}

impl ReplayReport {
    pub fn matches(&self) -> bool {
        self.divergences.is_empty()
    }
}

/// Re-run a stored record against a target and compare. A mismatch is a
/// divergence report, not an error.
pub fn replay(record: &CrashRecord, target: &mut dyn Target) -> Result<ReplayReport, HarnessError> {
    let image = record.image()?;
    let case = retry_case(target, &image, &[0; 32], &CrashSettings::default())?;

    let mut divergences = Vec::new();
    if case.outcome != record.outcome {
        divergences.push(format!(
            "outcome {} != recorded {}",
            case.outcome, record.outcome
        ));
    }
    match (case.dump, record.dump_words()) {
        (Some(now), Some(stored)) => {
            for reg in 0..32 {
                if now[reg] != stored[reg] {
                    divergences.push(format!(
                        "register {}: {} != recorded {}",
                        reg,
                        hexfmt::word_to_hex(now[reg]),
                        hexfmt::word_to_hex(stored[reg])
                    ));
                }
            }
        }
        (None, None) => {}
        (now, stored) => divergences.push(format!(
            "dump presence differs: now {} recorded {}",
            now.is_some(),
            stored.is_some()
        )),
    }
    if case.emission != record.emission_words() {
        divergences.push("hard-crash emission differs".into());
    }

    Ok(ReplayReport {
        outcome: case.outcome,
        dump: case.dump,
        emission: case.emission,
        divergences,
    })
}
