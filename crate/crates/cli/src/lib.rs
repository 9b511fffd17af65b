//! `aura`: operator entry point for the agent kernel simulator.
//!
//! Stores live under `$AURA_HOME` (default `./.aura`): the registry journal
//! at `registry.journal` and per-run audit stores in `audit/`.

use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use aura_core::approval::{ApprovalProvider, InteractiveApproval, ScriptedApproval};
use aura_core::audit::{AuditError, AuditLog, ChainStatus, EraseScope, Tombstone};
use aura_core::firewall::Blacklist;
use aura_core::kernel::KernelMode;
use aura_core::platform::{hash, BootImages, BootStage, ExpectedMeasurements, Platform, PublicKey};
use aura_core::registry::{AgentDid, AppCategory, CapabilityBoundary, DeveloperKey, Registry, RegistryError, SemanticPermission};
use aura_core::session::TokenId;
use aura_sim::scenario::{shipped_by_kind, ScenarioError};
use aura_sim::suite::summarize;
use aura_sim::{run, shipped, RunOptions, Scenario, ScenarioKind, SimError};
use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

/// Exit status when a command ran but its verdict is negative (unmet
/// scenario, broken chain).
pub const EXIT_UNMET: u8 = 1;
/// Exit status for bad arguments or unusable inputs.
pub const EXIT_USAGE: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "aura", version, about = "Agent kernel simulator: scenarios, registry and audit tools")]
pub struct Cli {
    /// Directory holding the registry journal and audit stores.
    #[arg(long, env = "AURA_HOME", default_value = ".aura", global = true)]
    pub home: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run scenarios and stream one JSON report per run.
    Run(RunArgs),
    /// Inspect, verify, export or erase an audit store.
    Audit {
        #[command(subcommand)]
        cmd: AuditCmd,
    },
    /// Manage the agent registry.
    Registry {
        /// Seed for the registry root key.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(subcommand)]
        cmd: RegistryCmd,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Enforced,
    Passthrough,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SuiteSel {
    All,
    Attack,
    Benign,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long, value_enum, default_value_t = Mode::Enforced)]
    pub mode: Mode,
    /// Validate critical actions asynchronously behind trust tokens.
    #[arg(long)]
    pub optimistic: bool,
    /// Pending async verdicts tolerated per category before a sync point publishes them.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub window: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// `interactive`, or a decision file keyed by prompt id. Defaults to each
    /// scenario's own script.
    #[arg(long)]
    pub approval: Option<String>,
    /// Intent blacklist, one term per line.
    #[arg(long)]
    pub blacklist: Option<PathBuf>,
    /// Boot with this stage's image tampered.
    #[arg(long, value_parser = parse_stage)]
    pub tamper_stage: Option<BootStage>,
    /// Scenario file; repeatable.
    #[arg(long, conflicts_with = "suite")]
    pub scenario: Vec<PathBuf>,
    /// Shipped suite to run when no scenario file is given.
    #[arg(long, value_enum)]
    pub suite: Option<SuiteSel>,
}

#[derive(Debug, Subcommand)]
pub enum AuditCmd {
    /// List records with their decrypted summaries.
    Show {
        #[command(flatten)]
        store: StoreArgs,
        /// Only records of this session (hex token id).
        #[arg(long, value_parser = parse_token)]
        session: Option<TokenId>,
    },
    /// Check the hash chain, checkpoint and payloads.
    Verify {
        #[command(flatten)]
        store: StoreArgs,
    },
    /// Signed Merkle digest over a record range (whole log by default).
    Export {
        #[command(flatten)]
        store: StoreArgs,
        #[arg(long)]
        first: Option<u64>,
        #[arg(long)]
        last: Option<u64>,
    },
    /// Destroy a session's payloads, leaving a signed tombstone.
    Erase {
        #[command(flatten)]
        store: StoreArgs,
        #[arg(long, value_parser = parse_token)]
        session: TokenId,
    },
}

#[derive(Debug, Args)]
pub struct StoreArgs {
    /// Store path, or a run name such as `fake_app-enforced` under `$AURA_HOME/audit`.
    pub log: String,
    /// Device seed of the run that wrote the store.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Subcommand)]
pub enum RegistryCmd {
    /// Enroll a developer under a key derived from its id and the seed.
    Enroll { dev_id: String },
    /// Vet a manifest and issue an identity card.
    Issue {
        #[arg(long)]
        developer: String,
        #[arg(long)]
        app: String,
        #[arg(long, value_parser = parse_category)]
        category: AppCategory,
        #[arg(long = "permission", value_parser = parse_permission)]
        permissions: Vec<SemanticPermission>,
        #[arg(long = "domain")]
        domains: Vec<String>,
        #[arg(long, default_value = "owner")]
        user: String,
    },
    /// Revoke an issued card by serial.
    Revoke {
        serial: u64,
        #[arg(long, default_value = "revoked by operator")]
        reason: String,
    },
    /// Print developers, issued cards and the revocation list.
    Show,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Audit(#[from] AuditError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Scenario(_) => EXIT_USAGE,
            _ => EXIT_UNMET,
        }
    }
}

fn parse_stage(s: &str) -> Result<BootStage, String> {
    s.parse().map_err(|e| format!("{e}"))
}

fn parse_token(s: &str) -> Result<TokenId, String> {
    u128::from_str_radix(s.trim(), 16)
        .map(TokenId)
        .map_err(|e| format!("bad token id: {e}"))
}

fn parse_category(s: &str) -> Result<AppCategory, String> {
    s.parse().map_err(|e| format!("{e}"))
}

fn parse_permission(s: &str) -> Result<SemanticPermission, String> {
    s.parse()
}

/// Runs a parsed command; returns the process exit status.
pub fn execute(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<u8, CliError> {
    match cli.command {
        Command::Run(args) => cmd_run(&cli.home, args, out, err),
        Command::Audit { cmd } => cmd_audit(&cli.home, cmd, out),
        Command::Registry { seed, cmd } => cmd_registry(&cli.home, seed, cmd, out),
    }
}

// ----- run -----

fn scenarios(args: &RunArgs) -> Result<Vec<Scenario>, CliError> {
    if !args.scenario.is_empty() {
        return args.scenario.iter().map(|p| Scenario::load(p).map_err(CliError::from)).collect();
    }
    Ok(match args.suite.unwrap_or(SuiteSel::All) {
        SuiteSel::All => shipped(),
        SuiteSel::Attack => shipped_by_kind(ScenarioKind::Attack),
        SuiteSel::Benign => shipped_by_kind(ScenarioKind::Benign),
    })
}

fn cmd_run(home: &Path, args: RunArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<u8, CliError> {
    let list = scenarios(&args)?;
    let approval: Option<Arc<dyn ApprovalProvider>> = match args.approval.as_deref() {
        None => None,
        Some("interactive") => Some(Arc::new(InteractiveApproval::new(BufReader::new(io::stdin()), io::stderr()))),
        Some(path) => Some(Arc::new(
            ScriptedApproval::load(path).map_err(|e| CliError::Usage(format!("--approval {path}: {e}")))?,
        )),
    };
    let blacklist = match &args.blacklist {
        Some(p) => Blacklist::load(p).map_err(|e| CliError::Usage(format!("--blacklist {}: {e}", p.display())))?,
        None => Blacklist::default(),
    };
    let audit_dir = home.join("audit");
    std::fs::create_dir_all(&audit_dir)?;
    let opts = RunOptions {
        mode: match args.mode {
            Mode::Enforced => KernelMode::Enforced,
            Mode::Passthrough => KernelMode::Passthrough,
        },
        seed: args.seed,
        optimistic: args.optimistic,
        window: args.window as usize,
        blacklist,
        judges: None,
        approval,
        audit_dir: Some(audit_dir),
        tamper: args.tamper_stage,
    };
    let mut reports = Vec::new();
    for s in &list {
        let r = run(s, &opts)?.report;
        writeln!(out, "{}", serde_json::to_string(&r).expect("report serializes"))?;
        reports.push(r);
    }
    let suite = summarize(reports, &opts)?;
    let met = suite.reports.iter().filter(|r| r.met).count();
    writeln!(
        err,
        "{} runs, seed {}: TSR {} ASR {}, {met}/{} met expected verdicts",
        aura_sim::engine::mode_name(opts.mode),
        opts.seed,
        suite.tsr,
        suite.asr,
        suite.reports.len()
    )?;
    for r in suite.reports.iter().filter(|r| !r.met) {
        writeln!(err, "  unmet: {} -> {}", r.scenario_id, r.outcome.label())?;
    }
    Ok(if suite.all_met { 0 } else { EXIT_UNMET })
}

// ----- audit -----

fn device(seed: u64) -> Result<Arc<Platform>, CliError> {
    let p = Arc::new(Platform::new(seed));
    let img = BootImages::reference();
    p.secure_boot(&img, &ExpectedMeasurements::from_images(&img));
    if !p.is_online() {
        return Err(CliError::Usage("platform failed to boot".into()));
    }
    Ok(p)
}

fn store_path(home: &Path, log: &str) -> PathBuf {
    let p = PathBuf::from(log);
    if p.exists() || log.contains('/') || log.ends_with(".log") {
        p
    } else {
        home.join("audit").join(format!("{log}.log"))
    }
}

fn open_store(home: &Path, s: &StoreArgs) -> Result<(AuditLog, PathBuf), CliError> {
    let path = store_path(home, &s.log);
    if !path.exists() {
        return Err(CliError::Usage(format!("no audit store at {}", path.display())));
    }
    Ok((AuditLog::open(device(s.seed)?, &path)?, path))
}

fn summary(payload: &Option<Vec<u8>>) -> String {
    match payload {
        None => "[erased]".into(),
        Some(p) => serde_json::from_slice::<serde_json::Value>(p)
            .ok()
            .and_then(|v| v["summary"].as_str().map(str::to_string))
            .unwrap_or_else(|| "-".into()),
    }
}

fn cmd_audit(home: &Path, cmd: AuditCmd, out: &mut dyn Write) -> Result<u8, CliError> {
    match cmd {
        AuditCmd::Show { store, session } => {
            let (log, _) = open_store(home, &store)?;
            for (r, p) in log.entries() {
                if session.is_some_and(|s| s != r.session) {
                    continue;
                }
                writeln!(
                    out,
                    "{:>5} {:<16} {:<8} {} {}",
                    r.record_id,
                    r.event.name(),
                    r.severity.name(),
                    r.session,
                    summary(&p)
                )?;
            }
            Ok(0)
        }
        AuditCmd::Verify { store } => {
            let path = store_path(home, &store.log);
            let mut bytes = std::fs::read(&path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            if let Ok(head) = std::fs::read(path.with_extension("log.head")) {
                bytes.extend_from_slice(&head);
            }
            let checker = AuditLog::in_memory(device(store.seed)?)?;
            match checker.verify_serialized(&bytes)? {
                ChainStatus::Intact => {
                    writeln!(out, "intact")?;
                    Ok(0)
                }
                ChainStatus::Broken { at } => {
                    writeln!(out, "broken at record {at}")?;
                    Ok(EXIT_UNMET)
                }
                ChainStatus::Corrupt => {
                    writeln!(out, "corrupt")?;
                    Ok(EXIT_UNMET)
                }
            }
        }
        AuditCmd::Export { store, first, last } => {
            let (log, _) = open_store(home, &store)?;
            let n = log.len() as u64;
            let ex = log.export(first.unwrap_or(1), last.unwrap_or(n))?;
            writeln!(out, "{}", serde_json::to_string_pretty(&ex).expect("export serializes"))?;
            Ok(0)
        }
        AuditCmd::Erase { store, session } => {
            let (log, _) = open_store(home, &store)?;
            let rec = log.erase(EraseScope::Session(session))?;
            let tomb: Option<Tombstone> = log
                .entries()
                .last()
                .and_then(|(_, p)| serde_json::from_slice(p.as_ref()?).ok());
            let erased = tomb.map(|t| t.erased.len()).unwrap_or(0);
            writeln!(out, "erased {erased} records of session {session}; tombstone is record {}", rec.record_id)?;
            Ok(0)
        }
    }
}

// ----- registry -----

/// Stand-in for the key an agent's vault would generate on install.
fn agent_key(app: &str, seed: u64) -> PublicKey {
    DeveloperKey::derive(&format!("agent:{app}"), seed).public()
}

fn cmd_registry(home: &Path, seed: u64, cmd: RegistryCmd, out: &mut dyn Write) -> Result<u8, CliError> {
    std::fs::create_dir_all(home)?;
    let reg = Registry::open(home.join("registry.journal"), seed)?;
    match cmd {
        RegistryCmd::Enroll { dev_id } => {
            let key = DeveloperKey::derive(&dev_id, seed);
            let d = reg.enroll_developer(&dev_id, key.public())?;
            writeln!(out, "enrolled {} key={}", d.dev_id, d.dev_pubkey)?;
        }
        RegistryCmd::Issue {
            developer,
            app,
            category,
            permissions,
            domains,
            user,
        } => {
            let did = AgentDid::new(&developer, hash(format!("bundle:{app}").as_bytes()), &user)?;
            let s_max = CapabilityBoundary::new(permissions, &domains)?;
            let sig = DeveloperKey::derive(&developer, seed).sign_manifest(&did, &s_max);
            let aic = reg.issue_aic(category, did, agent_key(&app, seed), s_max, &sig)?;
            writeln!(out, "issued serial={} did={} fp={}", aic.serial, aic.did, aic.fingerprint())?;
        }
        RegistryCmd::Revoke { serial, reason } => {
            let list = reg.revoke_aic(serial, &reason)?;
            writeln!(out, "revoked serial={serial}; revocation list epoch {}", list.epoch)?;
        }
        RegistryCmd::Show => write!(out, "{}", reg.show())?,
    }
    Ok(0)
}
