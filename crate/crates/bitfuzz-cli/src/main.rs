//! Operator entry point. Every path is scriptable: no prompts, all state in
//! files, stable exit codes: 0 success, 1 usage/parse error, 2 a fuzz run
//! logged crashes, 3 target unresponsive or transport failure.

use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};

use bitfuzz_core::bitstream::{disassemble, BitstreamImage};
use bitfuzz_core::crypto::keystream_word;
use bitfuzz_core::grammar::{FuzzRequest, TemplateNode};
use bitfuzz_core::harness::{
    self, connect, load_crash_records, CampaignOptions, CrashRecord, FuzzerSpec, HarnessError,
    Shard, SimTarget, Target,
};
use bitfuzz_core::regs;
use bitfuzz_core::sim::DeviceConfig;
use bitfuzz_core::wire;

const EXIT_OK: u8 = 0;
const EXIT_USAGE: u8 = 1;
const EXIT_CRASHES: u8 = 2;
const EXIT_TARGET: u8 = 3;

#[derive(Parser)]
#[command(
    name = "bitfuzz",
    version,
    about = "Structure-aware fuzzing toolkit for FPGA configuration engines"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render one case of a template (or fuzzer spec) to a raw bitstream.
    Asm {
        template: PathBuf,
        case_index: u64,
        /// Output file (raw big-endian 32-bit words).
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Print the packet listing of a bitstream file.
    Disasm { bitstream: PathBuf },
    /// Run or resume a fuzzing campaign against one or more targets.
    Fuzz {
        spec: PathBuf,
        /// Target URI: sim:<device-config.json> or tcp:<host>:<port>.
        /// Repeat to fan a run out over several targets.
        #[arg(long, required = true)]
        target: Vec<String>,
        #[arg(long)]
        max_crashes: Option<u64>,
        /// Contiguous slice of the case space, as i/k.
        #[arg(long)]
        shard: Option<String>,
        /// Campaign directory (crash DB + manifest + checkpoint).
        #[arg(long, default_value = "campaign")]
        out: PathBuf,
        /// Continue a previously interrupted campaign in --out.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        checkpoint_every: Option<u64>,
        /// Stop cleanly after this many cases (the checkpoint stays
        /// resumable).
        #[arg(long)]
        case_budget: Option<u64>,
    },
    /// Inspect and export logged crashes.
    Crashes {
        #[command(subcommand)]
        action: CrashesAction,
    },
    /// Serve a simulated device over the wire protocol.
    Serve {
        /// Device config JSON; omit for the default device.
        device: Option<PathBuf>,
        #[arg(long, default_value_t = 5555)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        bind: String,
    },
    /// Re-execute a logged crash record against a target.
    Replay {
        /// Campaign directory, crashes.jsonl, or an exported record file.
        dir: PathBuf,
        case_index: u64,
        #[arg(long, default_value = "sim:")]
        target: String,
    },
    /// Run a built-in end-to-end attack regression demo.
    Attack {
        #[arg(value_parser = ["juststart", "starbleed"])]
        demo: String,
        /// Device config to attack; defaults to the demo's standard device.
        #[arg(long)]
        device: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum CrashesAction {
    /// One line per crash: index, outcome, fired predicates.
    List {
        #[arg(long, default_value = "campaign")]
        dir: PathBuf,
    },
    /// Full register dump of one crash, with documented bit names.
    Show {
        case_index: u64,
        #[arg(long, default_value = "campaign")]
        dir: PathBuf,
    },
    /// Emit machine- or human-readable records to stdout.
    Export {
        #[arg(long, default_value = "campaign")]
        dir: PathBuf,
        #[arg(long, default_value = "json", value_parser = ["json", "text"])]
        format: String,
    },
}

fn main() -> ExitCode {
    // Die quietly when a pipe consumer (head, grep -q) hangs up.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version are not usage errors.
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn exit_code_for(error: &anyhow::Error) -> u8 {
    for cause in error.chain() {
        if let Some(h) = cause.downcast_ref::<HarnessError>() {
            match h {
                HarnessError::Transport(_) | HarnessError::SetupUnresponsive => return EXIT_TARGET,
                _ => return EXIT_USAGE,
            }
        }
        if let Some(io) = cause.downcast_ref::<std::io::Error>() {
            if io.kind() == std::io::ErrorKind::AddrInUse
                || io.kind() == std::io::ErrorKind::ConnectionRefused
            {
                return EXIT_TARGET;
            }
        }
    }
    EXIT_USAGE
}

fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Asm {
            template,
            case_index,
            out,
        } => cmd_asm(&template, case_index, &out),
        Command::Disasm { bitstream } => cmd_disasm(&bitstream),
        Command::Fuzz {
            spec,
            target,
            max_crashes,
            shard,
            out,
            resume,
            checkpoint_every,
            case_budget,
        } => cmd_fuzz(
            &spec,
            &target,
            max_crashes,
            shard.as_deref(),
            &out,
            resume,
            checkpoint_every,
            case_budget,
        ),
        Command::Crashes { action } => match action {
            CrashesAction::List { dir } => cmd_crashes_list(&dir),
            CrashesAction::Show { case_index, dir } => cmd_crashes_show(&dir, case_index),
            CrashesAction::Export { dir, format } => cmd_crashes_export(&dir, &format),
        },
        Command::Serve { device, port, bind } => cmd_serve(device.as_deref(), &bind, port),
        Command::Replay {
            dir,
            case_index,
            target,
        } => cmd_replay(&dir, case_index, &target),
        Command::Attack { demo, device } => cmd_attack(&demo, device.as_deref()),
    }
}

/// A template file holds a single request (`children` at top level); a
/// fuzzer spec concatenates several requests.
fn load_request_source(path: &Path) -> Result<FuzzerSpec> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    if value.get("children").is_some() {
        let request = FuzzRequest::load(path)?;
        Ok(FuzzerSpec::new(vec![request], Default::default()))
    } else {
        Ok(FuzzerSpec::load(path)?)
    }
}

fn cmd_asm(template: &Path, case_index: u64, out: &Path) -> Result<u8> {
    let spec = load_request_source(template)?;
    let total = spec.total_cases()?;
    if case_index >= total {
        bail!("case index {case_index} out of range ({total} cases)");
    }
    let (name, image) = spec.render(case_index)?;
    image
        .write_file(out)
        .with_context(|| format!("writing {}", out.display()))?;
    println!(
        "{}: case {} of {} -> {} ({} words)",
        name,
        case_index,
        total,
        out.display(),
        image.len()
    );
    Ok(EXIT_OK)
}

fn cmd_disasm(path: &Path) -> Result<u8> {
    let image =
        BitstreamImage::read_file(path).with_context(|| format!("reading {}", path.display()))?;
    let text = disassemble(&image)?;
    print!("{text}");
    Ok(EXIT_OK)
}

#[allow(clippy::too_many_arguments)]
fn cmd_fuzz(
    spec_path: &Path,
    target_uris: &[String],
    max_crashes: Option<u64>,
    shard: Option<&str>,
    out: &Path,
    resume: bool,
    checkpoint_every: Option<u64>,
    case_budget: Option<u64>,
) -> Result<u8> {
    let spec =
        FuzzerSpec::load(spec_path).with_context(|| format!("loading {}", spec_path.display()))?;
    let mut targets: Vec<Box<dyn Target>> = Vec::new();
    for uri in target_uris {
        targets.push(connect(uri).with_context(|| format!("connecting {uri}"))?);
    }
    let mut options = CampaignOptions::new(out);
    options.max_crashes = max_crashes;
    options.checkpoint_every = checkpoint_every;
    options.case_budget = case_budget;
    options.resume = resume;
    if let Some(s) = shard {
        options.shard = Some(Shard::parse(s)?);
    }

    let stats = harness::run_campaign(&spec, &mut targets, &options)?;
    println!(
        "cases run:   {} (of {} total{})",
        stats.cases_run,
        stats.total_cases,
        match options.shard {
            Some(s) if s.total > 1 => format!(", shard {}/{}", s.index, s.total),
            _ => String::new(),
        }
    );
    println!("crashes:     {}", stats.crashes);
    println!("rate:        {:.0} cases/sec", stats.rate());
    println!("finished:    {}", stats.finished);
    println!("crash db:    {}", out.join("crashes.jsonl").display());
    Ok(if stats.crashes > 0 {
        EXIT_CRASHES
    } else {
        EXIT_OK
    })
}

/// Records come from a campaign directory or directly from a JSON-Lines
/// file (crashes.jsonl or an `export --format json` dump).
fn records_for(path: &Path) -> Result<Vec<CrashRecord>> {
    if path.is_file() {
        let text = std::fs::read_to_string(path)?;
        let trimmed = text.trim_start();
        let mut records: Vec<CrashRecord> = if trimmed.starts_with('[') {
            serde_json::from_str(&text)?
        } else {
            text.lines()
                .filter(|l| !l.trim().is_empty())
                .map(serde_json::from_str)
                .collect::<Result<_, _>>()?
        };
        records.sort_by_key(|r| r.case_index);
        return Ok(records);
    }
    if !path.exists() {
        bail!("campaign directory {} does not exist", path.display());
    }
    Ok(load_crash_records(path)?)
}

fn predicates_line(record: &CrashRecord) -> String {
    let mut names: Vec<String> = record
        .triggered
        .iter()
        .map(|t| match t.register {
            Some(r) => format!("register{r}:{}", t.predicate),
            None => t.predicate.clone(),
        })
        .collect();
    names.dedup();
    names.join(", ")
}

fn cmd_crashes_list(dir: &Path) -> Result<u8> {
    let records = records_for(dir)?;
    println!(
        "{:>10}  {:<12}  {:<28}  predicates",
        "case", "outcome", "request"
    );
    for r in &records {
        println!(
            "{:>10}  {:<12}  {:<28}  {}",
            r.case_index,
            r.outcome.to_string(),
            r.request,
            predicates_line(r)
        );
    }
    if records.is_empty() {
        println!("(no crashes logged)");
    }
    Ok(EXIT_OK)
}

fn cmd_crashes_show(dir: &Path, case_index: u64) -> Result<u8> {
    let records = records_for(dir)?;
    let record = records
        .iter()
        .find(|r| r.case_index == case_index)
        .ok_or_else(|| anyhow!("no crash record for case {case_index}"))?;
    println!(
        "case {} ({}) outcome={}",
        record.case_index, record.request, record.outcome
    );
    println!("bitstream: {} words", record.bitstream.len() / 8);
    println!("triggered:");
    for t in &record.triggered {
        match t.register {
            Some(r) => println!(
                "  register{} ({}) {}: {}",
                r,
                regs::register_name(r).unwrap_or("?"),
                t.predicate,
                t.observed
            ),
            None => println!("  {}: {}", t.predicate, t.observed),
        }
    }
    if let Some(dump) = record.dump_words() {
        println!("registers:");
        for (addr, value) in dump.iter().enumerate() {
            let name = regs::register_name(addr as u8).unwrap_or("");
            let mut bits = String::new();
            for (mask, bit_name) in regs::bit_names(addr as u8) {
                if value & mask != 0 {
                    bits.push_str(&format!(" {bit_name}=1"));
                }
            }
            println!("  reg{addr:>3} {name:<12} = {value:08x}{bits}");
        }
    } else {
        println!("registers: unreadable (target was unresponsive)");
    }
    if let Some(emission) = &record.emission {
        println!("emission ({} bytes): {}", emission.len() / 2, emission);
    }
    Ok(EXIT_OK)
}

fn cmd_crashes_export(dir: &Path, format: &str) -> Result<u8> {
    let records = records_for(dir)?;
    match format {
        "json" => println!("{}", serde_json::to_string_pretty(&records)?),
        _ => {
            for r in &records {
                println!(
                    "case={} request={} outcome={} predicates=[{}]",
                    r.case_index,
                    r.request,
                    r.outcome,
                    predicates_line(r)
                );
            }
        }
    }
    Ok(EXIT_OK)
}

fn cmd_serve(device: Option<&Path>, bind: &str, port: u16) -> Result<u8> {
    let config = match device {
        Some(path) => DeviceConfig::load(path)?,
        None => DeviceConfig::default(),
    };
    let listener =
        TcpListener::bind((bind, port)).with_context(|| format!("binding {bind}:{port}"))?;
    println!("serving on {}", listener.local_addr()?);
    wire::serve(listener, &config)?;
    Ok(EXIT_OK)
}

fn cmd_replay(dir: &Path, case_index: u64, target_uri: &str) -> Result<u8> {
    let records = records_for(dir)?;
    let record = records
        .iter()
        .find(|r| r.case_index == case_index)
        .ok_or_else(|| anyhow!("no crash record for case {case_index}"))?;
    let mut target = connect(target_uri)?;
    let report = harness::replay(record, target.as_mut())?;
    println!("outcome: {}", report.outcome);
    if let Some(dump) = report.dump {
        for (addr, value) in dump.iter().enumerate() {
            if *value != 0 {
                println!("  reg{addr:>3} = {value:08x}");
            }
        }
    }
    if report.matches() {
        println!("replay matches the stored record");
    } else {
        println!("divergence report:");
        for d in &report.divergences {
            println!("  {d}");
        }
    }
    Ok(EXIT_OK)
}

// ---------------------------------------------------------------------------
// Attack demos
// ---------------------------------------------------------------------------

fn fixture(path: &str) -> PathBuf {
    PathBuf::from("fixtures").join(path)
}

/// Boot the device from a plaintext RSA bitstream with an invalid signature
/// by replacing RDW_GO with a start-up sequence in the unauthenticated tail.
fn cmd_attack_juststart(device: Option<&Path>) -> Result<u8> {
    let device_path = device
        .map(Path::to_path_buf)
        .unwrap_or_else(|| fixture("devices/uplus_rsa_only.json"));
    let config = DeviceConfig::load(&device_path)?;
    let request = FuzzRequest::load(fixture("templates/juststart.json"))?;

    // Fuzzed CMD slots (DGHIGH, START, NULL): the last slot varies fastest.
    let case_index = (3 << 10) | (5 << 5);
    let image = request.render(case_index)?;

    let mut target = SimTarget::new(&config)?;
    target.reset()?;
    target.program(&image)?;
    let done = target.done_pin()?;
    let dump = target.read_all()?;
    let stat = dump[regs::STAT as usize];
    let bootsts = dump[regs::BOOTSTS as usize];

    println!("juststart: case {case_index} (CMD slots DGHIGH, START, NULL; RDW_GO never runs)");
    println!("device:    {}", device_path.display());
    println!(
        "result:    done={} STAT={:08x} BOOTSTS={:08x}",
        done, stat, bootsts
    );
    let vulnerable = !config.fuses.aes_only;
    if done {
        println!("PASS: device booted with an invalid RSA signature; authentication bypassed");
    } else {
        println!("FAIL: device did not boot (attack blocked)");
    }
    match (done, vulnerable) {
        (true, true) | (false, false) => {
            if !vulnerable {
                println!("(expected: the AES-only fuse rejects plaintext RSA blocks)");
            }
            Ok(EXIT_OK)
        }
        _ => Ok(EXIT_USAGE),
    }
}

/// Recover a fabric word from an encrypted bitstream by flipping ciphertext
/// bits so the fabric-write header turns into a WBSTAR write, then reading
/// the sticky register after the checksum-triggered reset.
fn cmd_attack_starbleed(device: Option<&Path>) -> Result<u8> {
    let device_path = device
        .map(Path::to_path_buf)
        .unwrap_or_else(|| fixture("devices/uplus_default.json"));
    let config = DeviceConfig::load(&device_path)?;
    let request = FuzzRequest::load(fixture("templates/starbleed_base.json"))?;
    let base = request.render(0)?;

    // Pull key and IV from the template to compute the targeted flip. A
    // real attacker would enumerate the masked header bits instead; the
    // fuzzer spec in fixtures/specs/starbleed.json does exactly that.
    let (key, iv) = request
        .children
        .iter()
        .find_map(|node| match node {
            TemplateNode::EncryptedGcmBlock { key_ref, iv, .. } => {
                Some((request.resources.keys.get(key_ref)?.aes_key().ok()?, *iv))
            }
            _ => None,
        })
        .ok_or_else(|| anyhow!("template has no encrypted block"))?;

    const HEADER_IMAGE_INDEX: usize = 15; // first encrypted command
    const HEADER_CIPHER_POS: u64 = 4;
    let planted = 0xDEAD_C0DE;
    let mut words = base.words.clone();
    let wbstar_write = 0x3002_0001; // type 1 write, WBSTAR, count 1
    words[HEADER_IMAGE_INDEX] = wbstar_write ^ keystream_word(&key, &iv, HEADER_CIPHER_POS);
    let attack = BitstreamImage::from_words(words);

    let mut target = SimTarget::new(&config)?;
    target.reset()?;
    target.program(&attack)?;
    let dump = target.read_all()?;
    let recovered = dump[regs::WBSTAR as usize];

    println!("starbleed: ciphertext flip at word {HEADER_IMAGE_INDEX} rewrites the fabric write into a WBSTAR write");
    println!("device:    {}", device_path.display());
    println!(
        "result:    WBSTAR={:08x} planted fabric word={:08x}",
        recovered, planted
    );
    let leaked = recovered == planted;
    if leaked {
        println!("PASS: decrypted fabric content recovered through the sticky register");
    } else {
        println!("FAIL: nothing leaked (attack blocked)");
    }
    let vulnerable = !config.fuses.rsa_only && config.keys.bbram.as_deref() == Some(&key.to_hex());
    match (leaked, vulnerable) {
        (true, true) | (false, false) => {
            if !vulnerable {
                println!("(expected: this device cannot decrypt the fixture bitstream)");
            }
            Ok(EXIT_OK)
        }
        _ => Ok(EXIT_USAGE),
    }
}

fn cmd_attack(demo: &str, device: Option<&Path>) -> Result<u8> {
    match demo {
        "juststart" => cmd_attack_juststart(device),
        "starbleed" => cmd_attack_starbleed(device),
        other => bail!("unknown demo {other:?}"),
    }
}
