//! Runs one scenario against a fresh device: boot, registry, kernel, apps,
//! scripted agents, then post-run inspection.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::sync::{Arc, OnceLock};

use aura_core::approval::{ApprovalDecision, ApprovalProvider, ApprovalRequest, ScriptedApproval};
use aura_core::audit::AuditLog;
use aura_core::cognition::CellId;
use aura_core::firewall::{AcceptedObservation, Blacklist, ObservationEnvelope};
use aura_core::judge::JudgeRegistry;
use aura_core::kernel::{Dispatch, Kernel, KernelConfig, KernelError, KernelMode, Received};
use aura_core::platform::{
    hash, BootImages, BootStage, Caller, Digest, ExpectedMeasurements, KeyHandle, Platform, ProcessIdentity, Signature,
};
use aura_core::registry::{AgentDid, AgentIdentityCard, AppCategory, CapabilityBoundary, DeveloperKey, Registry};
use aura_core::session::{challenge_message, TokenId};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::agent::{AaReply, AaRequest, ActOutcome, ActRequest, AgentConfig, AgentHandle};
use crate::inspect::{inspect, RunOutcome};
use crate::process::ProcessTable;
use crate::scenario::{AdversaryMove, Expected, MoveKind, ParamSrc, Scenario, ScenarioError, ScenarioKind, Step};
use crate::world::{Item, MockApp, World, WorldSnapshot};

/// Appended by the on-device generator to whatever it continues.
pub const COMPLETION_MARK: &str = "[continued by generator]";

const SA_DEVELOPER: &str = "aura-system";
const USER_ACCOUNT: &str = "owner";

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("setup of {scenario}: {message}")]
    Setup { scenario: String, message: String },
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("suite is empty")]
    EmptySuite,
}

#[derive(Clone)]
pub struct RunOptions {
    pub mode: KernelMode,
    pub seed: u64,
    pub optimistic: bool,
    pub window: usize,
    pub blacklist: Blacklist,
    /// Defaults to the rule judges.
    pub judges: Option<JudgeRegistry>,
    /// Overrides the scenario's scripted approvals (e.g. an interactive prompt).
    pub approval: Option<Arc<dyn ApprovalProvider>>,
    /// Directory for per-run audit stores; in memory when unset.
    pub audit_dir: Option<PathBuf>,
    /// Boot with this stage's image tampered.
    pub tamper: Option<BootStage>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            mode: KernelMode::Enforced,
            seed: 0,
            optimistic: false,
            window: 1,
            blacklist: Blacklist::default(),
            judges: None,
            approval: None,
            audit_dir: None,
            tamper: None,
        }
    }
}

impl fmt::Debug for RunOptions {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RunOptions")
            .field("mode", &self.mode)
            .field("seed", &self.seed)
            .field("optimistic", &self.optimistic)
            .field("window", &self.window)
            .field("audit_dir", &self.audit_dir)
            .field("tamper", &self.tamper)
            .finish_non_exhaustive()
    }
}

pub fn mode_name(m: KernelMode) -> &'static str {
    match m {
        KernelMode::Enforced => "enforced",
        KernelMode::Passthrough => "passthrough",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario_id: String,
    pub kind: ScenarioKind,
    pub mode: KernelMode,
    pub seed: u64,
    pub outcome: RunOutcome,
    pub expected: Expected,
    pub met: bool,
    pub goal_met: bool,
    pub attack_landed: bool,
    pub steps_used: u64,
    /// First and last audit record ids written by this run.
    pub audit_range: Option<(u64, u64)>,
    pub audit_head: Option<Digest>,
    pub effects: usize,
    pub trace: Vec<String>,
}

/// A finished run with everything needed for after-the-fact checks.
pub struct Run {
    pub report: RunReport,
    pub world: WorldSnapshot,
    pub kernel: Arc<Kernel>,
    pub audit: Option<Arc<AuditLog>>,
    /// Observation texts the SA consumed, all via a kernel-built context.
    pub context_inputs: u64,
    pub login_order: Vec<String>,
}

pub fn run_scenario(s: &Scenario, mode: KernelMode, seed: u64) -> Result<RunReport, SimError> {
    let opts = RunOptions {
        mode,
        seed,
        ..RunOptions::default()
    };
    Ok(run(s, &opts)?.report)
}

enum Stop {
    Halted,
    Timeout,
}

struct Label {
    cell: CellId,
    /// Index into the accepted observations, for observation-backed labels.
    obs: Option<usize>,
}

struct Genuine {
    pid: u32,
    did: AgentDid,
}

struct Sim<'a> {
    s: &'a Scenario,
    kernel: Arc<Kernel>,
    world: Arc<World>,
    procs: ProcessTable,
    approval: Arc<dyn ApprovalProvider>,
    agents: BTreeMap<u32, AgentHandle>,
    genuine: BTreeMap<String, Genuine>,
    tokens: BTreeMap<u32, TokenId>,
    sa_proc: ProcessIdentity,
    sa_tok: TokenId,
    labels: BTreeMap<String, Label>,
    accepted: Vec<AcceptedObservation>,
    invoked: BTreeMap<String, u32>,
    rng: ChaCha20Rng,
    steps: u64,
    trace: Vec<String>,
    context_inputs: u64,
}

fn url_pattern() -> &'static Regex {
    static R: OnceLock<Regex> = OnceLock::new();
    R.get_or_init(|| Regex::new(r"https?://([A-Za-z0-9.-]+)(?:/[^\s]*)?").expect("static pattern"))
}

/// The deterministic stand-in for a text generator.
pub fn generate(text: &str) -> String {
    format!("{text}\n{COMPLETION_MARK}")
}

/// Case and spacing noise an attacker uses to slip past exact matching.
pub fn evade(text: &str) -> String {
    text.split(' ')
        .enumerate()
        .map(|(i, w)| if i % 2 == 0 { w.to_uppercase() } else { w.to_string() })
        .collect::<Vec<_>>()
        .join("  ")
}

impl Sim<'_> {
    fn tick(&mut self) -> Result<(), Stop> {
        self.steps += 1;
        if self.steps > self.s.budget() {
            Err(Stop::Timeout)
        } else {
            Ok(())
        }
    }

    fn note(&mut self, line: String) {
        self.trace.push(line);
    }

    fn halt<T>(&mut self, why: String) -> Result<T, Stop> {
        self.note(format!("halt: {why}"));
        Err(Stop::Halted)
    }

    fn mode(&self) -> KernelMode {
        self.kernel.config().mode
    }

    fn call(&mut self, pid: u32, req: AaRequest) -> Result<AaReply, Stop> {
        self.tick()?;
        let r = self.agents[&pid].call(req);
        match r {
            Ok(r) => Ok(r),
            Err(e) => self.halt(e),
        }
    }

    fn kernel_result<T>(&mut self, r: Result<T, KernelError>) -> Result<T, Stop> {
        match r {
            Ok(v) => Ok(v),
            Err(e) => self.halt(e.to_string()),
        }
    }

    /// Hands `task` to the app's agent: by authenticated identity when the
    /// kernel enforces, by launcher display name otherwise.
    fn invoke(&mut self, app: &str, task: &str) -> Result<u32, Stop> {
        self.tick()?;
        let (pid, task) = match self.mode() {
            KernelMode::Enforced => {
                let did = self.genuine[app].did.clone();
                let r = self.kernel.invoke_agent(self.sa_tok, &self.sa_proc, &did, task);
                match self.kernel_result(r)? {
                    Dispatch::Dispatched { aa, task } => (aa.bound_process.pid, task),
                    Dispatch::Blocked(o) => return self.halt(format!("dispatch to {app}: {}", o.label())),
                }
            }
            KernelMode::Passthrough => {
                let display = self.s.setup.apps.iter().find(|a| a.name == app).map(|a| a.display_name.clone());
                match display.and_then(|d| self.procs.resolve_display_name(&d)) {
                    Some(e) => (e.identity.pid, task.to_string()),
                    None => return self.halt(format!("no process for {app}")),
                }
            }
        };
        let name = self.agents[&pid].app.clone();
        self.note(format!("invoke {app} -> {name} (pid {pid})"));
        self.call(pid, AaRequest::Task(task))?;
        self.invoked.insert(app.to_string(), pid);
        Ok(pid)
    }

    fn target(&mut self, app: &str) -> Result<u32, Stop> {
        match self.invoked.get(app) {
            Some(p) => Ok(*p),
            None => {
                let task = format!("Help with: {}", self.s.instruction);
                self.invoke(app, &task)
            }
        }
    }

    fn receive(&mut self, env: &ObservationEnvelope, label: Option<&str>) -> Result<(), Stop> {
        self.tick()?;
        let r = self.kernel.receive_observation(self.sa_tok, &self.sa_proc, env);
        match self.kernel_result(r)? {
            Received::Accepted { observation, cell } => {
                self.note(format!("observation {} accepted as cell {}", env.resource_id, cell.cell_id));
                if let Some(l) = label {
                    self.labels.insert(
                        l.to_string(),
                        Label {
                            cell: cell.cell_id,
                            obs: Some(self.accepted.len()),
                        },
                    );
                }
                self.accepted.push(observation);
            }
            Received::Rejected(r) => self.note(format!("observation {} rejected: {r:?}", env.resource_id)),
        }
        Ok(())
    }

    /// The text behind a label, as the SA sees it. Observations are only ever
    /// read out of a kernel-built context.
    fn observed(&mut self, label: &str) -> Result<Option<(CellId, String)>, Stop> {
        let Some(l) = self.labels.get(label) else {
            return Ok(None);
        };
        let (cell, obs) = (l.cell, l.obs);
        self.tick()?;
        let text = match obs {
            Some(i) => {
                let r = self.kernel.build_context(self.sa_tok, &self.sa_proc, &self.accepted, &[]);
                let ctx = self.kernel_result(r)?;
                self.context_inputs += 1;
                let text = ctx.observations().nth(i).map(str::to_string);
                text
            }
            None => {
                let r = self.kernel.read_cell(self.sa_tok, &self.sa_proc, cell);
                Some(self.kernel_result(r)?.content)
            }
        };
        Ok(text.map(|t| (cell, t)))
    }

    fn store(&mut self, text: &str) -> Result<CellId, Stop> {
        self.tick()?;
        let r = self.kernel.store_reasoning(self.sa_tok, &self.sa_proc, text);
        Ok(self.kernel_result(r)?.cell_id)
    }

    fn derive(&mut self, parent: CellId, text: &str) -> Result<CellId, Stop> {
        self.tick()?;
        let r = self.kernel.derive(self.sa_tok, &self.sa_proc, &[parent], text);
        Ok(self.kernel_result(r)?.cell_id)
    }

    fn act(&mut self, app: &str, req: ActRequest) -> Result<(), Stop> {
        let pid = self.target(app)?;
        let api = req.api.clone();
        let mut reply = self.call(pid, AaRequest::Act(req))?;
        loop {
            let AaReply::Acted(outcome) = reply else {
                return self.halt(format!("{app}: unexpected reply"));
            };
            match outcome {
                ActOutcome::Executed {
                    record_id,
                    outcome,
                    fast_path,
                } => {
                    let fp = if fast_path { " fast-path" } else { "" };
                    self.note(format!("{app}.{api}: {}{fp} (#{record_id})", outcome.label()));
                    return Ok(());
                }
                ActOutcome::Stopped { record_id, outcome } => {
                    return self.halt(format!("{app}.{api}: {} (#{record_id})", outcome.label()))
                }
                ActOutcome::Refused { record_id, reason } => {
                    return self.halt(format!("{app}.{api}: refused by app agent: {reason} (#{record_id})"))
                }
                ActOutcome::Failed(e) => return self.halt(format!("{app}.{api}: {e}")),
                ActOutcome::Escalated { approval, reason } => {
                    let req = ApprovalRequest {
                        kind: approval,
                        subject: api.clone(),
                        card: format!("{app} is unsure about {api}: {reason}. Proceed?"),
                    };
                    let approved = matches!(self.approval.decide(&req), Ok(ApprovalDecision::Approve));
                    self.note(format!("{app}.{api}: escalated ({reason}); user approved={approved}"));
                    reply = self.call(pid, AaRequest::Resume { approved })?;
                }
            }
        }
    }

    fn step(&mut self, step: &Step) -> Result<(), Stop> {
        match step {
            Step::Invoke { app, task } => {
                self.invoke(app, task)?;
            }
            Step::Read {
                app,
                api,
                collection,
                id,
                label,
            } => {
                let pid = self.target(app)?;
                let resource = format!("{app}/{collection}/{}", id.as_deref().unwrap_or("*"));
                let reply = self.call(
                    pid,
                    AaRequest::Read {
                        api: api.clone(),
                        collection: collection.clone(),
                        id: id.clone(),
                        resource,
                    },
                )?;
                match reply {
                    AaReply::Observation(Ok(env)) => self.receive(&env, Some(label))?,
                    AaReply::Observation(Err(e)) => return self.halt(format!("{app}.{api}: {e}")),
                    _ => return self.halt(format!("{app}: unexpected reply")),
                }
            }
            Step::Act {
                app,
                api,
                params,
                host,
                justification,
                needs,
            } => {
                let mut cells = BTreeMap::new();
                for (k, src) in params {
                    let id = match src {
                        ParamSrc::Lit(t) => self.store(t)?,
                        ParamSrc::Cell(l) => match self.labels.get(l) {
                            Some(l) => l.cell,
                            None => {
                                self.note(format!("skip {app}.{api}: nothing under {l}"));
                                return Ok(());
                            }
                        },
                        ParamSrc::Quote { from, prefix } => match self.observed(from)? {
                            Some((parent, text)) => self.derive(parent, &format!("{prefix}{text}"))?,
                            None => {
                                self.note(format!("skip {app}.{api}: nothing under {from}"));
                                return Ok(());
                            }
                        },
                    };
                    cells.insert(k.clone(), id);
                }
                self.act(
                    app,
                    ActRequest {
                        api: api.clone(),
                        params: cells,
                        host: host.clone(),
                        justification: justification.clone(),
                        needs: needs.clone(),
                    },
                )?;
            }
            Step::Generate { from, prompt, label } => {
                let Some((parent, text)) = self.observed(from)? else {
                    self.note(format!("skip generate: nothing under {from}"));
                    return Ok(());
                };
                self.tick()?;
                let request = format!("{prompt}:\n{text}");
                let r = self.kernel.screen_request(self.sa_tok, &self.sa_proc, &request);
                let v = self.kernel_result(r)?;
                if !v.allowed() {
                    return self.halt(format!("generation request rejected ({:?})", v.stage));
                }
                let out = generate(&text);
                let cell = self.derive(parent, &out)?;
                self.labels.insert(label.clone(), Label { cell, obs: None });
                self.note(format!("generated {label} as cell {cell}"));
            }
            Step::FollowLinks { app, from } => {
                let Some((parent, text)) = self.observed(from)? else {
                    self.note(format!("skip follow_links: nothing under {from}"));
                    return Ok(());
                };
                let links: Vec<(String, String)> = url_pattern()
                    .captures_iter(&text)
                    .map(|c| (c[0].to_string(), c[1].to_lowercase()))
                    .collect();
                for (url, host) in links {
                    let cell = self.derive(parent, &url)?;
                    self.act(
                        app,
                        ActRequest {
                            api: "open_url".into(),
                            params: BTreeMap::from([("url".to_string(), cell)]),
                            host: Some(host),
                            justification: format!("open the link from {from} as the message asks"),
                            needs: Vec::new(),
                        },
                    )?;
                }
            }
        }
        Ok(())
    }

    fn adversary(&mut self, m: &AdversaryMove) -> Result<(), Stop> {
        let kind = m.move_kind().expect("validated");
        self.note(format!("adversary: {} on {}", m.kind, m.app));
        let id = m.id.clone().unwrap_or_else(|| "injected".into());
        let plant = |world: &World, coll: &str, text: String, tags: Vec<String>| {
            world.plant(&m.app, coll, Item { id: id.clone(), text, tags })
        };
        match kind {
            MoveKind::ForgedEnvelope | MoveKind::FakeObservation => {
                let victim = &self.genuine[&m.app];
                let session = match kind {
                    MoveKind::ForgedEnvelope => self.tokens.get(&victim.pid).copied().unwrap_or(TokenId::NONE),
                    _ => TokenId(self.rng.gen()),
                };
                let mut sig = [0u8; 64];
                self.rng.fill_bytes(&mut sig);
                let env = ObservationEnvelope {
                    payload: m.payload.clone(),
                    origin: victim.did.clone(),
                    session,
                    step_stamp: self.kernel.now(),
                    resource_id: format!("{}/{id}", m.app),
                    signature: Signature(sig),
                    attestation: None,
                };
                self.receive(&env, m.label.as_deref())?;
            }
            MoveKind::BlacklistEvasionText => {
                let coll = m.collection.as_deref().unwrap_or("memos");
                let _ = plant(&self.world, coll, evade(&m.payload), m.tags.clone());
            }
            MoveKind::TaintedSourceWrite => {
                let coll = m.collection.as_deref().unwrap_or("inbox");
                let _ = plant(&self.world, coll, m.payload.clone(), m.tags.clone());
            }
            MoveKind::EndorsementTarget => {
                let _ = plant(&self.world, "posts", m.payload.clone(), m.tags.clone());
            }
        }
        Ok(())
    }

    fn script(&mut self) -> Result<(), Stop> {
        self.tick()?;
        let r = self.kernel.submit_instruction(self.sa_tok, &self.sa_proc, &self.s.instruction);
        let out = self.kernel_result(r)?;
        if !out.verdict.allowed() {
            return self.halt(format!("instruction rejected ({:?})", out.verdict.stage));
        }
        let s = self.s;
        for (i, step) in s.steps.iter().enumerate() {
            for m in s.adversary.iter().filter(|m| m.at == i) {
                self.adversary(m)?;
            }
            self.step(step)?;
        }
        for m in s.adversary.iter().filter(|m| m.at == s.steps.len()) {
            self.adversary(m)?;
        }
        Ok(())
    }
}

fn setup_err(s: &Scenario, e: impl fmt::Display) -> SimError {
    SimError::Setup {
        scenario: s.id.clone(),
        message: e.to_string(),
    }
}

fn bundle(app: &str) -> Digest {
    hash(format!("bundle:{app}").as_bytes())
}

struct Provisioned {
    proc: ProcessIdentity,
    handle: KeyHandle,
    aic: AgentIdentityCard,
}

fn provision(
    s: &Scenario,
    kernel: &Kernel,
    registry: &Registry,
    seed: u64,
    proc: ProcessIdentity,
    dev_id: &str,
    did: AgentDid,
    category: AppCategory,
    s_max: CapabilityBoundary,
) -> Result<Provisioned, SimError> {
    let dev = DeveloperKey::derive(dev_id, seed);
    if !registry.developers().iter().any(|d| d.dev_id == dev_id) {
        registry.enroll_developer(dev_id, dev.public()).map_err(|e| setup_err(s, e))?;
    }
    let (handle, pk) = kernel.provision_agent(&proc)?;
    let sig = dev.sign_manifest(&did, &s_max);
    let aic = registry.issue_aic(category, did, pk, s_max, &sig).map_err(|e| setup_err(s, e))?;
    Ok(Provisioned { proc, handle, aic })
}

/// Runs a scenario end to end.
pub fn run(s: &Scenario, opts: &RunOptions) -> Result<Run, SimError> {
    s.validate()?;
    let seed = opts.seed;
    let platform = Arc::new(Platform::new(seed));
    let reference = BootImages::reference();
    let images = match opts.tamper {
        Some(stage) => reference.tampered(stage),
        None => reference.clone(),
    };
    let boot = platform.secure_boot(&images, &ExpectedMeasurements::from_images(&reference));
    let registry = Arc::new(Registry::new(seed));
    let sa_did = AgentDid::new(SA_DEVELOPER, hash(b"bundle:system-agent"), USER_ACCOUNT).map_err(|e| setup_err(s, e))?;
    let approval: Arc<dyn ApprovalProvider> = match &opts.approval {
        Some(a) => a.clone(),
        None => Arc::new(match &s.approvals {
            Some(script) => ScriptedApproval::new(script.clone()),
            None => ScriptedApproval::with_default(ApprovalDecision::Approve),
        }),
    };
    let audit_path = opts.audit_dir.as_ref().map(|d| d.join(format!("{}-{}.log", s.id, mode_name(opts.mode))));
    if let Some(p) = &audit_path {
        // A run owns its store.
        for f in [p.clone(), p.with_extension("log.head")] {
            if f.exists() {
                std::fs::remove_file(&f).map_err(|e| setup_err(s, e))?;
            }
        }
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir).map_err(|e| setup_err(s, e))?;
        }
    }
    let config = KernelConfig {
        mode: opts.mode,
        optimistic: opts.optimistic,
        window: opts.window,
        seed,
        system_agents: vec![sa_did.clone()],
        blacklist: opts.blacklist.clone(),
        audit_path,
        ..KernelConfig::default()
    };
    let judges = opts.judges.clone().unwrap_or_else(JudgeRegistry::with_defaults);
    let kernel = Arc::new(Kernel::new(platform.clone(), registry.clone(), config, judges, approval.clone())?);

    let apps = s.setup.apps.iter().map(|a| MockApp {
        name: a.name.clone(),
        display_name: a.display_name.clone(),
        bundle_fingerprint: bundle(&a.name),
        host: a.host.clone(),
        state: a.state.clone(),
    });
    let world = Arc::new(World::new(apps));
    let failure_report = |why: String, world: &World| RunReport {
        scenario_id: s.id.clone(),
        kind: s.kind,
        mode: opts.mode,
        seed,
        outcome: RunOutcome::Failure { reason: why.clone() },
        expected: s.expected,
        met: false,
        goal_met: false,
        attack_landed: false,
        steps_used: 0,
        audit_range: None,
        audit_head: None,
        effects: world.snapshot().effects.len(),
        trace: vec![format!("halt: {why}")],
    };
    if !boot.is_online() {
        let report = failure_report(format!("kernel unavailable: {boot:?}"), &world);
        return Ok(Run {
            report,
            world: world.snapshot(),
            kernel,
            audit: None,
            context_inputs: 0,
            login_order: Vec::new(),
        });
    }
    kernel.record_config(json!({
        "scenario": s.id, "mode": mode_name(opts.mode), "optimistic": opts.optimistic,
        "window": opts.window, "seed": seed, "blacklist_terms": opts.blacklist.terms().len(),
        "approval": if opts.approval.is_some() { "provided" } else { "scripted" },
    }))?;

    let procs = ProcessTable::default();
    let sa_proc = procs.spawn("system-agent", "Assistant", sa_did.bundle_fingerprint());
    let sa = provision(
        s,
        &kernel,
        &registry,
        seed,
        sa_proc,
        SA_DEVELOPER,
        sa_did,
        AppCategory::SystemAssistant,
        CapabilityBoundary::new(Vec::new(), Vec::<String>::new()).map_err(|e| setup_err(s, e))?,
    )?;

    let mut configs = Vec::new();
    let mut genuine = BTreeMap::new();
    let mut cards: BTreeMap<String, AgentIdentityCard> = BTreeMap::new();
    let guards_enabled = opts.mode == KernelMode::Enforced;
    for a in s.setup.apps.iter().filter(|a| a.impersonates.is_none()) {
        let did = AgentDid::new(&a.name, bundle(&a.name), USER_ACCOUNT).map_err(|e| setup_err(s, e))?;
        let proc = procs.spawn(&a.name, &a.display_name, bundle(&a.name));
        let s_max = CapabilityBoundary::new(a.permissions.clone(), a.domains.clone()).map_err(|e| setup_err(s, e))?;
        let p = provision(s, &kernel, &registry, seed, proc, &a.name, did.clone(), a.category()?, s_max)?;
        genuine.insert(a.name.clone(), Genuine { pid: proc.pid, did });
        cards.insert(a.name.clone(), p.aic.clone());
        configs.push(AgentConfig {
            app: a.name.clone(),
            proc: p.proc,
            handle: p.handle,
            aic: p.aic,
            refusal_policy: a.refusal_policy.clone(),
            guards_enabled,
            malicious: false,
        });
    }
    for a in s.setup.apps.iter() {
        let Some(victim) = &a.impersonates else { continue };
        // Look-alike: own code, own vault key, the victim's public card.
        let proc = procs.spawn(&a.name, &a.display_name, bundle(&a.name));
        let (handle, _) = kernel.provision_agent(&proc)?;
        configs.push(AgentConfig {
            app: a.name.clone(),
            proc,
            handle,
            aic: cards[victim].clone(),
            refusal_policy: Vec::new(),
            guards_enabled: false,
            malicious: true,
        });
    }

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut sim = Sim {
        s,
        kernel: kernel.clone(),
        world: world.clone(),
        procs,
        approval,
        agents: BTreeMap::new(),
        genuine,
        tokens: BTreeMap::new(),
        sa_proc,
        sa_tok: TokenId::NONE,
        labels: BTreeMap::new(),
        accepted: Vec::new(),
        invoked: BTreeMap::new(),
        rng: ChaCha20Rng::seed_from_u64(seed ^ 0xad5e_75a1),
        steps: 0,
        trace: Vec::new(),
        context_inputs: 0,
    };
    let mut order: Vec<u32> = configs.iter().map(|c| c.proc.pid).collect();
    order.shuffle(&mut rng);
    for cfg in configs {
        let h = AgentHandle::spawn(cfg, kernel.clone(), world.clone());
        sim.agents.insert(h.pid, h);
    }

    let mut stop: Option<Stop> = None;
    // The SA logs in first; app agents follow in seeded order.
    let nonce = kernel.challenge(&sa.proc)?;
    let proof = platform
        .vault_sign(&sa.handle, Caller::Process(sa.proc), &challenge_message(&nonce, &sa.aic.did))
        .map_err(KernelError::from)?;
    sim.sa_tok = kernel.authenticate_agent(&sa.proc, &sa.aic, &proof)?.token_id;
    let mut login_order = Vec::new();
    for pid in order {
        let app = sim.agents[&pid].app.clone();
        login_order.push(app.clone());
        match sim.call(pid, AaRequest::Login) {
            Ok(AaReply::LoggedIn(Ok(t))) => {
                sim.tokens.insert(pid, t);
                sim.note(format!("login {app} (pid {pid}): ok"));
            }
            Ok(AaReply::LoggedIn(Err(e))) => sim.note(format!("login {app} (pid {pid}): {e}")),
            Ok(_) => sim.note(format!("login {app}: unexpected reply")),
            Err(e) => {
                stop = Some(e);
                break;
            }
        }
    }
    if stop.is_none() {
        stop = sim.script().err();
    }
    kernel.flush()?;
    let failure = match &stop {
        Some(Stop::Timeout) => Some("timeout".to_string()),
        Some(Stop::Halted) | None => None,
    };
    if let Some(Stop::Timeout) = stop {
        sim.note("halt: step budget exhausted".into());
    }
    let Sim {
        agents,
        steps,
        trace,
        context_inputs,
        ..
    } = sim;
    drop(agents);

    let audit = kernel.audit()?;
    let entries = audit.entries();
    let snapshot = world.snapshot();
    let verdict = inspect(s, &snapshot, &entries, failure.as_deref());
    let report = RunReport {
        scenario_id: s.id.clone(),
        kind: s.kind,
        mode: opts.mode,
        seed,
        met: verdict.outcome.meets(s.expected),
        outcome: verdict.outcome,
        expected: s.expected,
        goal_met: verdict.goal_met,
        attack_landed: verdict.attack_landed,
        steps_used: steps,
        audit_range: match (entries.first(), entries.last()) {
            (Some((a, _)), Some((b, _))) => Some((a.record_id, b.record_id)),
            _ => None,
        },
        audit_head: Some(audit.head()),
        effects: snapshot.effects.len(),
        trace,
    };
    Ok(Run {
        report,
        world: snapshot,
        kernel,
        audit: Some(audit),
        context_inputs,
        login_order,
    })
}

