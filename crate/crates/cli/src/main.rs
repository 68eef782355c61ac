use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use cagg_cli::client::{Gateway, HttpGateway, LocalGateway};
use cagg_cli::simulate::{simulate, ReviewMode};
use cagg_cli::trace::{diurnal_intensity, generate, Trace};
use cagg_cli::{verdict_exit_code, CliError};
use cagg_core::engine::{EngineSettings, WorkloadItem, WorkloadReport};
use cagg_core::ledger::verify_bytes;
use cagg_core::orchestrator::{plan_validation, RiskSignal, RiskSource};
use cagg_core::policy::{GateKind, GateRequest, PolicyConfig, ReviewOutcome, ReviewResolution};
use cagg_core::{
    Clock, Engine, IntensitySeries, ReservationId, ScopeId, SystemClock, VirtualClock, WorkloadKind,
};
use chrono::{DateTime, Utc};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Parser)]
#[command(
    name = "cagg",
    version,
    about = "Carbon-aware governance gates for CI/CD"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Gate service base URL.
    #[arg(
        long,
        global = true,
        env = "CAGG_SERVER",
        default_value = "http://127.0.0.1:8087"
    )]
    server: String,
    /// Bearer token for the gate service.
    #[arg(long, global = true, env = "CAGG_TOKEN", hide_env_values = true)]
    token: Option<String>,
    /// Run against a local data directory instead of a server.
    #[arg(long, global = true)]
    local: bool,
    #[arg(long, global = true, env = "CAGG_DATA_DIR", default_value = ".cagg")]
    data_dir: PathBuf,
    /// Policy file (TOML). Defaults to the built-in policy.
    #[arg(long, global = true, env = "CAGG_POLICY_PATH")]
    policy: Option<PathBuf>,
    /// Grid-intensity trace file.
    #[arg(long, global = true, env = "CAGG_INTENSITY_TRACE")]
    intensity_trace: Option<PathBuf>,
    /// Evaluate as of this instant (local mode only).
    #[arg(long, global = true)]
    at: Option<DateTime<Utc>>,
}

#[derive(Subcommand)]
enum Command {
    /// Gate evaluation.
    Gate {
        #[command(subcommand)]
        command: GateCommand,
    },
    /// Report executed work against a reservation.
    Record(RecordArgs),
    /// Carbon budgets.
    Budget {
        #[command(subcommand)]
        command: BudgetCommand,
    },
    /// Provenance ledger.
    Ledger {
        #[command(subcommand)]
        command: LedgerCommand,
    },
    /// Regeneration loops.
    Loops {
        #[command(subcommand)]
        command: LoopCommand,
    },
    /// Human review queue.
    Reviews {
        #[command(subcommand)]
        command: ReviewCommand,
    },
    /// Policy documents.
    Policy {
        #[command(subcommand)]
        command: PolicyCommand,
    },
    /// Replay a workload trace through the engine under a virtual clock.
    Simulate(SimulateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Pr,
    Pipeline,
    Release,
}

impl From<Kind> for GateKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Pr => GateKind::PullRequestValidation,
            Kind::Pipeline => GateKind::PipelineStage,
            Kind::Release => GateKind::ReleaseReview,
        }
    }
}

#[derive(Subcommand)]
enum GateCommand {
    /// Ask the gate whether work may proceed. Exit status: 0 allow or
    /// downgrade, 10 defer, 20 escalate, 30 deny, 1 error.
    Check {
        #[arg(long)]
        scope: ScopeId,
        #[arg(long, value_enum, default_value = "pr")]
        kind: Kind,
        #[arg(long)]
        risk: f64,
        /// gCO2e. Estimated from the policy's plan when omitted.
        #[arg(long)]
        est_carbon: Option<f64>,
        /// Seconds the work may wait for a cleaner window.
        #[arg(long, default_value_t = 0)]
        deferrable_by: u64,
        #[arg(long)]
        loop_id: Option<String>,
    },
}

#[derive(Args)]
struct RecordArgs {
    #[arg(long)]
    reservation: Option<String>,
    #[arg(long)]
    scope: Option<ScopeId>,
    /// Record against the scope without a reservation.
    #[arg(long)]
    unbudgeted: bool,
    /// kind:tier:tokens_in[:tokens_out[:duration_secs]], repeatable.
    #[arg(long = "item")]
    items: Vec<String>,
    /// Full report as JSON; `-` reads stdin.
    #[arg(long, conflicts_with_all = ["items", "reservation", "scope", "unbudgeted"])]
    report: Option<PathBuf>,
}

#[derive(Subcommand)]
enum BudgetCommand {
    Set {
        scope: ScopeId,
        #[arg(long)]
        allocation: f64,
        #[arg(long, default_value_t = 0.8)]
        soft: f64,
    },
    /// Show one budget, or all of them.
    Show { scope: Option<ScopeId> },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Lines,
    Summary,
}

#[derive(Subcommand)]
enum LedgerCommand {
    /// Check the hash chain. Exit status 3 when it is broken.
    Verify {
        /// Verify a ledger file directly, without a server.
        #[arg(long)]
        file: Option<PathBuf>,
    },
    Export {
        #[arg(long, value_enum, default_value = "lines")]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum LoopCommand {
    Attempt {
        loop_id: String,
        #[arg(long)]
        scope: ScopeId,
    },
    Justify {
        loop_id: String,
        #[arg(long)]
        approver: String,
        #[arg(long)]
        text: String,
        #[arg(long, default_value_t = 1)]
        extension: u32,
    },
    Terminate {
        loop_id: String,
        #[arg(long)]
        approver: String,
        #[arg(long)]
        reason: String,
    },
    Show {
        loop_id: Option<String>,
    },
}

#[derive(Subcommand)]
enum ReviewCommand {
    Pending,
    Decide {
        review_id: String,
        #[arg(long, conflicts_with = "deny", required_unless_present = "deny")]
        approve: bool,
        #[arg(long)]
        deny: bool,
        #[arg(long)]
        approver: String,
        #[arg(long, default_value = "")]
        note: String,
        #[arg(long)]
        extension: Option<u32>,
    },
}

#[derive(Subcommand)]
enum PolicyCommand {
    /// Print the built-in policy as TOML.
    Template,
    /// Show the active policy.
    Show,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 500)]
    entries: u32,
    /// Replay this trace instead of generating one.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Save the generated trace.
    #[arg(long)]
    write_trace: Option<PathBuf>,
    /// Also replay an always-deep, unbudgeted, undeferred baseline.
    #[arg(long)]
    baseline: bool,
    #[arg(long, conflicts_with = "auto_deny")]
    auto_approve: bool,
    #[arg(long)]
    auto_deny: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load_policy(g: &Global) -> Result<PolicyConfig, CliError> {
    match &g.policy {
        Some(p) => PolicyConfig::load(p).map_err(|e| CliError::Usage(e.to_string())),
        None => Ok(PolicyConfig::default()),
    }
}

fn load_intensity(path: &Path) -> Result<IntensitySeries, CliError> {
    IntensitySeries::load(path).map_err(|e| CliError::Usage(e.to_string()))
}

fn gateway(g: &Global) -> Result<Box<dyn Gateway>, CliError> {
    if !g.local {
        if g.at.is_some() {
            return Err(CliError::Usage("--at only applies with --local".into()));
        }
        return Ok(Box::new(HttpGateway::new(&g.server, g.token.clone())?));
    }
    let trace = g
        .intensity_trace
        .as_ref()
        .ok_or_else(|| CliError::Usage("--local needs --intensity-trace".into()))?;
    let clock: Arc<dyn Clock> = match g.at {
        Some(t) => Arc::new(VirtualClock::new(t)),
        None => Arc::new(SystemClock),
    };
    let settings = EngineSettings {
        policy: load_policy(g)?,
        policy_path: g.policy.clone(),
        intensity: load_intensity(trace)?,
        intensity_path: Some(trace.clone()),
        clock,
    };
    Ok(Box::new(LocalGateway::new(Engine::open(
        &g.data_dir,
        settings,
    )?)))
}

fn print_json(value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    writeln!(std::io::stdout(), "{text}").map_err(|e| CliError::Io(e.to_string()))
}

fn parse_kind(raw: &str) -> Result<WorkloadKind, CliError> {
    match raw {
        "inference" => Ok(WorkloadKind::Inference),
        "validation_run" | "validation" => Ok(WorkloadKind::ValidationRun),
        "regeneration" => Ok(WorkloadKind::Regeneration),
        other => Err(CliError::Usage(format!("unknown workload kind `{other}`"))),
    }
}

fn parse_item(raw: &str) -> Result<WorkloadItem, CliError> {
    let parts: Vec<&str> = raw.split(':').collect();
    if !(3..=5).contains(&parts.len()) {
        return Err(CliError::Usage(format!(
            "item `{raw}` must be kind:tier:tokens_in[:tokens_out[:duration]]"
        )));
    }
    let num = |s: &str| {
        s.parse::<u64>()
            .map_err(|_| CliError::Usage(format!("`{s}` in item `{raw}` is not a token count")))
    };
    Ok(WorkloadItem {
        event_id: None,
        kind: parse_kind(parts[0])?,
        tier: parts[1].to_string(),
        tokens_in: num(parts[2])?,
        tokens_out: parts.get(3).map(|s| num(s)).transpose()?.unwrap_or(0),
        duration: match parts.get(4) {
            Some(s) => s
                .parse()
                .map_err(|_| CliError::Usage(format!("`{s}` in item `{raw}` is not a duration")))?,
            None => 0.0,
        },
    })
}

fn read_report(path: &Path) -> Result<WorkloadReport, CliError> {
    let mut text = String::new();
    if path == Path::new("-") {
        std::io::stdin()
            .read_to_string(&mut text)
            .map_err(|e| CliError::Io(e.to_string()))?;
    } else {
        text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    }
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("invalid report: {e}")))
}

fn run(cli: Cli) -> Result<u8, CliError> {
    let g = &cli.global;
    match cli.command {
        Command::Gate {
            command:
                GateCommand::Check {
                    scope,
                    kind,
                    risk,
                    est_carbon,
                    deferrable_by,
                    loop_id,
                },
        } => {
            let risk = RiskSignal::new(risk, RiskSource::Manual)
                .map_err(|e| CliError::Usage(e.to_string()))?;
            let gw = gateway(g)?;
            let est_carbon = match est_carbon {
                Some(c) => c,
                None => {
                    let policy = gw.policy()?;
                    let intensity = gw.intensity_now()?.intensity;
                    plan_validation(&risk, &policy.ladder, &policy.plan_params(intensity))
                        .map_err(|e| CliError::Usage(e.to_string()))?
                        .est_carbon
                }
            };
            let decision = gw.check_gate(&GateRequest {
                scope,
                gate_kind: kind.into(),
                risk,
                est_carbon,
                deferrable_by,
                loop_id,
            })?;
            print_json(&decision)?;
            Ok(verdict_exit_code(&decision.verdict))
        }
        Command::Record(args) => {
            let report = match &args.report {
                Some(path) => read_report(path)?,
                None => {
                    if args.items.is_empty() {
                        return Err(CliError::Usage(
                            "give at least one --item or a --report".into(),
                        ));
                    }
                    WorkloadReport {
                        reservation: args.reservation.map(ReservationId),
                        scope: args.scope,
                        unbudgeted: args.unbudgeted,
                        items: args
                            .items
                            .iter()
                            .map(|i| parse_item(i))
                            .collect::<Result<_, _>>()?,
                    }
                }
            };
            print_json(&gateway(g)?.record(&report)?)?;
            Ok(0)
        }
        Command::Budget { command } => {
            let gw = gateway(g)?;
            match command {
                BudgetCommand::Set {
                    scope,
                    allocation,
                    soft,
                } => print_json(&gw.set_budget(&scope, allocation, soft)?)?,
                BudgetCommand::Show { scope: Some(s) } => print_json(&gw.budget(&s)?)?,
                BudgetCommand::Show { scope: None } => print_json(&gw.budgets()?)?,
            }
            Ok(0)
        }
        Command::Ledger { command } => match command {
            LedgerCommand::Verify { file } => {
                let report = match file {
                    Some(path) => {
                        let bytes = std::fs::read(&path)
                            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
                        verify_bytes(&bytes)
                    }
                    None => gateway(g)?.audit()?,
                };
                print_json(&report)?;
                Ok(if report.chain_valid { 0 } else { 3 })
            }
            LedgerCommand::Export { format, out } => {
                let gw = gateway(g)?;
                let bytes = match format {
                    Format::Lines => gw.export_lines()?,
                    Format::Summary => {
                        let mut v = serde_json::to_vec_pretty(&gw.audit()?).expect("serializable");
                        v.push(b'\n');
                        v
                    }
                };
                match out {
                    Some(path) => {
                        std::fs::write(&path, bytes).map_err(|e| CliError::Io(e.to_string()))?
                    }
                    None => std::io::stdout()
                        .write_all(&bytes)
                        .map_err(|e| CliError::Io(e.to_string()))?,
                }
                Ok(0)
            }
        },
        Command::Loops { command } => {
            let gw = gateway(g)?;
            match command {
                LoopCommand::Attempt { loop_id, scope } => {
                    print_json(&gw.loop_attempt(&loop_id, &scope)?)?
                }
                LoopCommand::Justify {
                    loop_id,
                    approver,
                    text,
                    extension,
                } => print_json(&gw.loop_justify(&loop_id, &approver, &text, extension)?)?,
                LoopCommand::Terminate {
                    loop_id,
                    approver,
                    reason,
                } => print_json(&gw.loop_terminate(&loop_id, &approver, &reason)?)?,
                LoopCommand::Show { loop_id: Some(id) } => print_json(&gw.loop_state(&id)?)?,
                LoopCommand::Show { loop_id: None } => print_json(&gw.loops()?)?,
            }
            Ok(0)
        }
        Command::Reviews { command } => {
            let gw = gateway(g)?;
            match command {
                ReviewCommand::Pending => {
                    print_json(&gw.pending_reviews()?)?;
                    Ok(0)
                }
                ReviewCommand::Decide {
                    review_id,
                    approve,
                    deny: _,
                    approver,
                    note,
                    extension,
                } => {
                    let resolution = ReviewResolution {
                        outcome: if approve {
                            ReviewOutcome::Approve
                        } else {
                            ReviewOutcome::Deny
                        },
                        approver,
                        note,
                        extension,
                    };
                    let decision = gw.decide_review(&review_id, &resolution)?;
                    print_json(&decision)?;
                    Ok(verdict_exit_code(&decision.verdict))
                }
            }
        }
        Command::Policy { command } => {
            match command {
                PolicyCommand::Template => print!("{}", PolicyConfig::default().to_toml()),
                PolicyCommand::Show => print_json(&gateway(g)?.policy()?)?,
            }
            Ok(0)
        }
        Command::Simulate(args) => {
            let trace = match &args.trace {
                Some(path) => Trace::load(path)?,
                None => generate(args.seed, args.entries),
            };
            if let Some(path) = &args.write_trace {
                let text = serde_json::to_string_pretty(&trace).expect("serializable");
                std::fs::write(path, text)
                    .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
            }
            let intensity = match &g.intensity_trace {
                Some(path) => load_intensity(path)?,
                None => diurnal_intensity(),
            };
            let mode = if args.auto_deny {
                ReviewMode::AutoDeny
            } else {
                ReviewMode::AutoApprove
            };
            let output = simulate(&trace, &load_policy(g)?, &intensity, mode, args.baseline)?;
            match &args.out {
                Some(path) => {
                    let text = serde_json::to_string_pretty(&output).expect("serializable");
                    std::fs::write(path, text + "\n").map_err(|e| CliError::Io(e.to_string()))?;
                }
                None => print_json(&output)?,
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
