//! Operator command line: runs services, registers applications, calls the
//! management API, approves agents, edits profiles and policies, and runs
//! simulated scenarios.

pub mod output;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use iotmp_core::http::{ApiRequest, ApiResponse};
use iotmp_core::model::{AppId, ManagerId, Mtid};
use iotmp_core::privacy::{DisclosurePolicy, PolicyAction, RequesterScope};
use iotmp_core::sim::{run_scenario, FleetJoin, FleetSpec, ManagerSpec, ScenarioScript, SimReport};
use iotmp_server::client::ApiClient;
use iotmp_server::config::{self as svc, AgentRunConfig, ManagerServerConfig, MomsServerConfig};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value as Json};

pub use output::exit_code;

/// Configuration and usage errors.
pub const EXIT_USAGE: i32 = 1;
/// Scenario probes that did not meet their expectation.
pub const EXIT_PROBES: i32 = 2;
/// Transport failures count as server-side errors.
pub const EXIT_UNREACHABLE: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "iotmp", version, about = "IoT management platform operator tool")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Default)]
pub struct Global {
    /// Manager API base URL.
    #[arg(long, global = true, env = "IOTMP_MANAGER")]
    pub manager: Option<String>,
    /// Manager-of-managers base URL; thing requests go here when set.
    #[arg(long, global = true, env = "IOTMP_MOMS")]
    pub moms: Option<String>,
    /// Token file written by `app token --save`.
    #[arg(long, global = true, env = "IOTMP_TOKEN")]
    pub token: Option<PathBuf>,
    /// Print raw API bodies.
    #[arg(long, global = true)]
    pub json: bool,
    /// CLI profile in TOML.
    #[arg(long, global = true, env = "IOTMP_CONFIG")]
    pub config: Option<PathBuf>,
    /// Extra PEM root certificates for HTTPS.
    #[arg(long = "ca", global = true, env = "IOTMP_CA", value_delimiter = ',')]
    pub ca_certs: Vec<PathBuf>,
    #[arg(long, global = true, env = "IOTMP_TIMEOUT_MS")]
    pub timeout_ms: Option<u64>,
    /// Operator key for application registration and the clock.
    #[arg(long, global = true, env = "IOTMP_OPERATOR_KEY", hide_env_values = true)]
    pub operator_key: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a service in the foreground.
    #[command(subcommand)]
    Run(RunCmd),
    /// Register applications and obtain tokens.
    #[command(subcommand)]
    App(AppCmd),
    /// Read and act on managed things.
    #[command(subcommand)]
    Mt(MtCmd),
    /// Administrative operations.
    #[command(subcommand)]
    Admin(AdminCmd),
    /// Directory held by the manager of managers.
    Topology,
    /// Read or move a manager's clock.
    #[command(subcommand)]
    Clock(ClockCmd),
    /// Simulated scenarios.
    #[command(subcommand)]
    Scenario(ScenarioCmd),
}

#[derive(Debug, Subcommand)]
pub enum RunCmd {
    Manager {
        #[arg(value_name = "CONFIG")]
        file: PathBuf,
    },
    Moms {
        #[arg(value_name = "CONFIG")]
        file: PathBuf,
    },
    Agent {
        #[arg(value_name = "CONFIG")]
        file: PathBuf,
    },
    /// Simulated fleet spread over simulated managers.
    Fleet(FleetArgs),
}

#[derive(Debug, Args)]
pub struct FleetArgs {
    #[arg(long, default_value_t = 10)]
    pub count: usize,
    #[arg(long, default_value = "m1", value_delimiter = ',')]
    pub managers: Vec<String>,
    #[arg(long, value_enum, default_value_t = JoinArg::Spread)]
    pub join: JoinArg,
    #[arg(long)]
    pub with_moms: bool,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 30_000)]
    pub duration_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum JoinArg {
    Spread,
    Associate,
}

#[derive(Debug, Subcommand)]
pub enum AppCmd {
    /// Registers an application and prints its secret once.
    Register {
        appid: String,
        #[arg(long, default_value = "iot_app")]
        role: String,
        /// Write the credentials here instead of printing the secret.
        #[arg(long)]
        save: Option<PathBuf>,
    },
    /// Exchanges the secret for a token.
    Token {
        appid: String,
        /// Credentials file from `app register --save`, or a file holding the secret.
        #[arg(long, conflicts_with = "secret")]
        secret_file: Option<PathBuf>,
        #[arg(long, env = "IOTMP_SECRET", hide_env_values = true)]
        secret: Option<String>,
        /// Write the token here instead of printing it.
        #[arg(long)]
        save: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum MtCmd {
    /// Things visible to the caller.
    List,
    /// A thing's record, or one attribute's readings.
    Get {
        mtid: String,
        attribute: Option<String>,
        #[arg(long)]
        latest: bool,
        /// Ask the device instead of the store.
        #[arg(long)]
        live: bool,
        #[arg(long)]
        from: Option<u64>,
        #[arg(long)]
        to: Option<u64>,
    },
    /// Actuation or contributed data.
    Post {
        mtid: String,
        #[arg(value_enum)]
        kind: PostKind,
        /// Request body as JSON.
        #[arg(long)]
        body: Option<String>,
        /// Actuation shorthand: attribute name.
        #[arg(long, requires = "value")]
        attribute: Option<String>,
        /// Actuation shorthand: value as JSON, e.g. '{"bool":true}'.
        #[arg(long)]
        value: Option<String>,
    },
    /// Live status query.
    Status { mtid: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PostKind {
    Actuation,
    Data,
}

#[derive(Debug, Subcommand)]
pub enum AdminCmd {
    ListPending,
    Approve { agentid: String },
    Revoke { agentid: String },
    ShowProfile { mtid: String },
    EditProfile {
        mtid: String,
        #[arg(long)]
        add_entity: Vec<String>,
        #[arg(long)]
        remove_entity: Vec<String>,
        #[arg(long)]
        secure_only: Option<bool>,
    },
    ShowPolicy { mtid: String },
    /// Replaces the policy list from a file, or upserts one always-on policy.
    EditPolicy {
        mtid: String,
        /// JSON file with the full policy list.
        #[arg(long, conflicts_with_all = ["app", "any", "level", "deny", "remove"])]
        file: Option<PathBuf>,
        /// Requester the policy applies to.
        #[arg(long, conflicts_with = "any")]
        app: Option<String>,
        /// Any requester.
        #[arg(long)]
        any: bool,
        /// Levels of detail removed from the location.
        #[arg(long, conflicts_with = "deny")]
        level: Option<u32>,
        #[arg(long)]
        deny: bool,
        /// Remove the requester's always-on policy.
        #[arg(long, conflicts_with_all = ["level", "deny"])]
        remove: bool,
    },
}

#[derive(Debug, Subcommand)]
pub enum ClockCmd {
    Get,
    Set { now: u64 },
}

#[derive(Debug, Subcommand)]
pub enum ScenarioCmd {
    Run {
        script: PathBuf,
        /// Write the event trace as JSON lines.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Write the run report as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

/// CLI profile file. Flags and `IOTMP_` variables take precedence.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CliConfig {
    pub manager: Option<String>,
    pub moms: Option<String>,
    pub token: Option<PathBuf>,
    #[serde(default)]
    pub ca_certs: Vec<PathBuf>,
    pub timeout_ms: Option<u64>,
    pub output: Option<OutputFormat>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    Table,
    Json,
}

/// Credentials written by `app register --save`.
#[derive(Debug, Serialize, Deserialize)]
pub struct CredentialsFile {
    pub appid: String,
    pub secret_token: String,
}

/// Token written by `app token --save`.
#[derive(Debug, Serialize, Deserialize)]
pub struct TokenFile {
    pub appid: String,
    pub token: String,
    #[serde(default)]
    pub expires_at: Option<u64>,
}

#[derive(Debug)]
struct Fail {
    code: i32,
    msg: String,
}

fn usage(msg: impl Into<String>) -> Fail {
    Fail { code: EXIT_USAGE, msg: msg.into() }
}

type Res = Result<i32, Fail>;

/// Runs the CLI on its own runtime.
pub fn run<I, T>(args: I, out: &mut (dyn Write + Send)) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let rt = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: cannot start runtime: {e}");
            return EXIT_USAGE;
        }
    };
    rt.block_on(run_async(args, out))
}

/// Parses `args` and executes the command, returning the exit code.
pub async fn run_async<I, T>(args: I, out: &mut (dyn Write + Send)) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = write!(out, "{}", e.render());
            return code;
        }
    };
    match execute(cli, out).await {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            f.code
        }
    }
}

/// Settings after merging flags, environment and the profile file.
struct Ctx {
    manager: Option<String>,
    moms: Option<String>,
    token: Option<PathBuf>,
    json: bool,
    ca_certs: Vec<PathBuf>,
    timeout_ms: u64,
    operator_key: Option<String>,
}

impl Ctx {
    fn from_global(g: Global) -> Result<Self, Fail> {
        let file: CliConfig = match &g.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| usage(format!("{}: {e}", p.display())))?;
                toml::from_str(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?
            }
            None => CliConfig::default(),
        };
        Ok(Ctx {
            manager: g.manager.or(file.manager),
            moms: g.moms.or(file.moms),
            token: g.token.or(file.token),
            json: g.json || file.output == Some(OutputFormat::Json),
            ca_certs: if g.ca_certs.is_empty() { file.ca_certs } else { g.ca_certs },
            timeout_ms: g.timeout_ms.or(file.timeout_ms).unwrap_or(10_000),
            operator_key: g.operator_key,
        })
    }

    fn client(&self, base: &str) -> Result<ApiClient, Fail> {
        ApiClient::new(base, &self.ca_certs, self.timeout_ms).map_err(|e| usage(e.to_string()))
    }

    fn manager_client(&self) -> Result<ApiClient, Fail> {
        let base = self.manager.as_deref().ok_or_else(|| usage("no manager URL; pass --manager or set IOTMP_MANAGER"))?;
        self.client(base)
    }

    /// Client for thing requests: the manager of managers when configured.
    fn thing_client(&self) -> Result<ApiClient, Fail> {
        match (&self.moms, &self.manager) {
            (Some(m), _) => self.client(m),
            (None, Some(m)) => self.client(m),
            (None, None) => Err(usage("no target; pass --manager or --moms")),
        }
    }

    fn authed(&self, c: ApiClient) -> Result<ApiClient, Fail> {
        let path = self.token.as_ref().ok_or_else(|| usage("no token; pass --token or set IOTMP_TOKEN"))?;
        let t = read_token_file(path)?;
        Ok(c.with_token(&t.appid, &t.token))
    }
}

fn read_token_file(path: &Path) -> Result<TokenFile, Fail> {
    let text = std::fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    if let Ok(t) = serde_json::from_str::<TokenFile>(&text) {
        return Ok(t);
    }
    let token = text.trim().to_string();
    if token.is_empty() || token.contains(char::is_whitespace) {
        return Err(usage(format!("{}: not a token file", path.display())));
    }
    Ok(TokenFile { appid: String::new(), token, expires_at: None })
}

/// Writes a secret-bearing file readable by the owner only.
fn write_private(path: &Path, body: &Json) -> Result<(), Fail> {
    let text = serde_json::to_string_pretty(body).expect("json serialises");
    let mut opts = std::fs::OpenOptions::new();
    opts.write(true).create(true).truncate(true);
    #[cfg(unix)]
    {
        use std::os::unix::fs::OpenOptionsExt;
        opts.mode(0o600);
    }
    let mut f = opts.open(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    f.write_all(text.as_bytes()).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn emit(out: &mut (dyn Write + Send), text: &str) -> Result<(), Fail> {
    out.write_all(text.as_bytes()).map_err(|e| usage(format!("stdout: {e}")))?;
    out.flush().map_err(|e| usage(format!("stdout: {e}")))
}

fn transport(e: impl std::fmt::Display) -> Fail {
    Fail { code: EXIT_UNREACHABLE, msg: format!("request failed: {e}") }
}

async fn execute(cli: Cli, out: &mut (dyn Write + Send)) -> Res {
    let ctx = Ctx::from_global(cli.global)?;
    match cli.command {
        Command::Run(r) => run_service(r, &ctx, out).await,
        Command::App(a) => app(a, &ctx, out).await,
        Command::Mt(m) => mt(m, &ctx, out).await,
        Command::Admin(a) => admin(a, &ctx, out).await,
        Command::Topology => {
            let base = ctx.moms.as_deref().ok_or_else(|| usage("no manager of managers; pass --moms"))?;
            let r = ctx.client(base)?.get("/topology").await.map_err(transport)?;
            respond(&ctx, &r, out)
        }
        Command::Clock(c) => clock(c, &ctx, out).await,
        Command::Scenario(ScenarioCmd::Run { script, trace, report }) => scenario(&script, trace, report, &ctx, out),
    }
}

fn respond(ctx: &Ctx, r: &ApiResponse, out: &mut (dyn Write + Send)) -> Res {
    emit(out, &output::render(r, ctx.json))?;
    Ok(exit_code(r.status))
}

async fn run_service(r: RunCmd, ctx: &Ctx, out: &mut (dyn Write + Send)) -> Res {
    let failed = |e: iotmp_server::ServerError| usage(e.to_string());
    match r {
        RunCmd::Manager { file } => {
            let cfg: ManagerServerConfig = svc::load(&file).map_err(|e| usage(e.to_string()))?;
            let h = iotmp_server::manager_server::start(cfg).await.map_err(failed)?;
            let https = h.https_url().map(|u| format!(" https={u}")).unwrap_or_default();
            emit(out, &format!("manager {} ready http={}{https} agents={}\n", h.id, h.http_url(), h.agent_addr))?;
            let _ = tokio::signal::ctrl_c().await;
            h.shutdown().await;
            Ok(0)
        }
        RunCmd::Moms { file } => {
            let cfg: MomsServerConfig = svc::load(&file).map_err(|e| usage(e.to_string()))?;
            let h = iotmp_server::moms_server::start(cfg).await.map_err(failed)?;
            let https = h.https_url().map(|u| format!(" https={u}")).unwrap_or_default();
            emit(out, &format!("moms ready http={}{https}\n", h.http_url()))?;
            let _ = tokio::signal::ctrl_c().await;
            h.shutdown().await;
            Ok(0)
        }
        RunCmd::Agent { file } => {
            let cfg: AgentRunConfig = svc::load(&file).map_err(|e| usage(e.to_string()))?;
            let h = iotmp_server::agent_runner::start(cfg).map_err(failed)?;
            emit(out, &format!("agent {} started\n", h.mtid))?;
            let _ = tokio::signal::ctrl_c().await;
            h.shutdown().await;
            Ok(0)
        }
        RunCmd::Fleet(f) => fleet(f, ctx, out),
    }
}

/// Script equivalent to `run fleet` arguments.
pub fn fleet_script(f: &FleetArgs) -> Result<ScenarioScript, String> {
    let managers: Vec<ManagerId> = f
        .managers
        .iter()
        .map(|m| ManagerId::new(m).map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    let join = match f.join {
        JoinArg::Spread => FleetJoin::Spread { managers: managers.clone() },
        JoinArg::Associate => FleetJoin::Associate { managers: managers.clone() },
    };
    Ok(ScenarioScript {
        seed: f.seed,
        duration_ms: f.duration_ms,
        managers: managers.iter().map(|m| ManagerSpec::new(m.as_str())).collect(),
        moms: f.with_moms,
        fleets: vec![FleetSpec::new(f.count, "mt", join)],
        apps: Vec::new(),
        admin: Default::default(),
        faults: Vec::new(),
        probes: Vec::new(),
        network: Default::default(),
        hierarchy: Default::default(),
    })
}

fn fleet(f: FleetArgs, ctx: &Ctx, out: &mut (dyn Write + Send)) -> Res {
    let script = fleet_script(&f).map_err(usage)?;
    let report = run_scenario(script).map_err(|e| usage(e.to_string()))?;
    if ctx.json {
        emit(out, &format!("{}\n", report.to_json()))?;
        return Ok(0);
    }
    let registered = report.agents.values().filter(|a| a.phase == iotmp_core::agent::Phase::Registered).count();
    emit(
        out,
        &format!(
            "launched {} agents (sim transport)\nregistered {registered}\nrecords {}\ntrace {}\n",
            report.agents.len(),
            report.records.len(),
            report.trace_digest
        ),
    )?;
    Ok(0)
}

async fn app(a: AppCmd, ctx: &Ctx, out: &mut (dyn Write + Send)) -> Res {
    let c = ctx.manager_client()?;
    match a {
        AppCmd::Register { appid, role, save } => {
            AppId::new(&appid).map_err(|e| usage(e.to_string()))?;
            let r = c.register_app(&appid, &role, ctx.operator_key.as_deref()).await.map_err(transport)?;
            let body = r.body_json();
            let secret = body.as_ref().and_then(|b| b["secret_token"].as_str().map(str::to_string));
            match (r.is_success(), secret, save) {
                (true, Some(secret), Some(path)) => {
                    write_private(&path, &json!(CredentialsFile { appid: appid.clone(), secret_token: secret }))?;
                    let text = if ctx.json {
                        format!("{}\n", json!({ "appid": appid, "role": role, "saved": path }))
                    } else {
                        format!("appid  {appid}\nrole   {role}\nsecret written to {}\n", path.display())
                    };
                    emit(out, &text)?;
                    Ok(0)
                }
                _ => respond(ctx, &r, out),
            }
        }
        AppCmd::Token { appid, secret_file, secret, save } => {
            let secret = match (secret_file, secret) {
                (Some(p), _) => {
                    let text = std::fs::read_to_string(&p).map_err(|e| usage(format!("{}: {e}", p.display())))?;
                    match serde_json::from_str::<CredentialsFile>(&text) {
                        Ok(c) => c.secret_token,
                        Err(_) => text.trim().to_string(),
                    }
                }
                (None, Some(s)) => s,
                (None, None) => return Err(usage("no secret; pass --secret-file or set IOTMP_SECRET")),
            };
            let r = c.mint_token(&appid, &secret).await.map_err(transport)?;
            let body = r.body_json().unwrap_or(Json::Null);
            match (r.is_success(), body["token"].as_str(), save) {
                (true, Some(token), Some(path)) => {
                    let tf = TokenFile { appid: appid.clone(), token: token.to_string(), expires_at: body["expires_at"].as_u64() };
                    write_private(&path, &json!(tf))?;
                    let exp = body["expires_at"].clone();
                    let text = if ctx.json {
                        format!("{}\n", json!({ "appid": appid, "expires_at": exp, "saved": path }))
                    } else {
                        format!("appid       {appid}\nexpires_at  {exp}\ntoken written to {}\n", path.display())
                    };
                    emit(out, &text)?;
                    Ok(0)
                }
                _ => respond(ctx, &r, out),
            }
        }
    }
}

fn check_mtid(m: &str) -> Result<Mtid, Fail> {
    Mtid::new(m).map_err(|e| usage(e.to_string()))
}

async fn mt(m: MtCmd, ctx: &Ctx, out: &mut (dyn Write + Send)) -> Res {
    let c = ctx.authed(ctx.thing_client()?)?;
    let req = match m {
        MtCmd::List => {
            let c = ctx.authed(ctx.manager_client()?)?;
            let r = c.get("/mt").await.map_err(transport)?;
            return respond(ctx, &r, out);
        }
        MtCmd::Get { mtid, attribute, latest, live, from, to } => {
            let mtid = check_mtid(&mtid)?;
            let mut target = match attribute {
                Some(a) => format!("/mt/{mtid}/{a}"),
                None => format!("/mt/{mtid}"),
            };
            let mut q = Vec::new();
            if latest {
                q.push("latest=1".to_string());
            }
            if live {
                q.push("live=1".to_string());
            }
            if let Some(f) = from {
                q.push(format!("from={f}"));
            }
            if let Some(t) = to {
                q.push(format!("to={t}"));
            }
            if !q.is_empty() {
                target = format!("{target}?{}", q.join("&"));
            }
            ApiRequest::get(&target)
        }
        MtCmd::Post { mtid, kind, body, attribute, value } => {
            let mtid = check_mtid(&mtid)?;
            let body: Json = match (body, attribute, value) {
                (Some(b), None, _) => serde_json::from_str(&b).map_err(|e| usage(format!("--body: {e}")))?,
                (None, Some(a), Some(v)) if kind == PostKind::Actuation => {
                    let v: Json = serde_json::from_str(&v).map_err(|e| usage(format!("--value: {e}")))?;
                    json!({ "attribute": a, "value": v })
                }
                _ => return Err(usage("pass --body, or --attribute with --value for actuation")),
            };
            let path = match kind {
                PostKind::Actuation => format!("/mt/{mtid}/actuation"),
                PostKind::Data => format!("/mt/{mtid}/data"),
            };
            ApiRequest::post(&path, &body)
        }
        MtCmd::Status { mtid } => ApiRequest::get(&format!("/mt/{}/status", check_mtid(&mtid)?)),
    };
    let r = c.call(req).await.map_err(transport)?;
    respond(ctx, &r, out)
}

/// Adds or replaces the always-on policy for `requester`, or removes it.
pub fn upsert_policy(
    mut policies: Vec<DisclosurePolicy>,
    mtid: &Mtid,
    requester: RequesterScope,
    action: Option<(PolicyAction, u32)>,
) -> Vec<DisclosurePolicy> {
    let always = |p: &DisclosurePolicy| p.requester == requester && p.windows.is_empty() && p.zone.is_none();
    let existing = policies.iter().position(always);
    match (action, existing) {
        (None, Some(i)) => {
            policies.remove(i);
        }
        (None, None) => {}
        (Some((act, level)), Some(i)) => {
            policies[i].action = act;
            policies[i].level = level;
        }
        (Some((act, level)), None) => {
            let id = policies.iter().map(|p| p.id).max().unwrap_or(0) + 1;
            let mut p = DisclosurePolicy::disclose(id, mtid.clone(), requester, level);
            p.action = act;
            policies.push(p);
        }
    }
    policies
}

async fn admin(a: AdminCmd, ctx: &Ctx, out: &mut (dyn Write + Send)) -> Res {
    let c = ctx.authed(ctx.manager_client()?)?;
    let r = match a {
        AdminCmd::ListPending => c.get("/agents/pending").await,
        AdminCmd::Approve { agentid } => c.post(&format!("/agents/{agentid}/approve"), &json!({})).await,
        AdminCmd::Revoke { agentid } => c.post(&format!("/agents/{agentid}/revoke"), &json!({})).await,
        AdminCmd::ShowProfile { mtid } => c.get(&format!("/profiles/{}", check_mtid(&mtid)?)).await,
        AdminCmd::EditProfile { mtid, add_entity, remove_entity, secure_only } => {
            let mtid = check_mtid(&mtid)?;
            let mut changes: Vec<Json> = Vec::new();
            changes.extend(add_entity.iter().map(|a| json!({ "add_entity": a })));
            changes.extend(remove_entity.iter().map(|a| json!({ "remove_entity": a })));
            if let Some(s) = secure_only {
                changes.push(json!({ "set_secure_only": s }));
            }
            if changes.is_empty() {
                return Err(usage("nothing to change"));
            }
            c.put(&format!("/profiles/{mtid}"), &json!({ "changes": changes })).await
        }
        AdminCmd::ShowPolicy { mtid } => c.get(&format!("/policies/{}", check_mtid(&mtid)?)).await,
        AdminCmd::EditPolicy { mtid, file, app, any, level, deny, remove } => {
            let mtid = check_mtid(&mtid)?;
            let policies: Json = match file {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).map_err(|e| usage(format!("{}: {e}", p.display())))?;
                    let v: Json = serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?;
                    match v {
                        Json::Object(mut o) if o.contains_key("policies") => o.remove("policies").expect("checked"),
                        other => other,
                    }
                }
                None => {
                    let requester = match (app, any) {
                        (Some(a), false) => RequesterScope::App(AppId::new(&a).map_err(|e| usage(e.to_string()))?),
                        (None, true) => RequesterScope::Any,
                        _ => return Err(usage("pass --file, --app or --any")),
                    };
                    let action = match (remove, deny, level) {
                        (true, _, _) => None,
                        (false, true, _) => Some((PolicyAction::Deny, 0)),
                        (false, false, Some(l)) => Some((PolicyAction::Disclose, l)),
                        (false, false, None) => return Err(usage("pass --level, --deny or --remove")),
                    };
                    let r = c.get(&format!("/policies/{mtid}")).await.map_err(transport)?;
                    if !r.is_success() {
                        return respond(ctx, &r, out);
                    }
                    let current: Vec<DisclosurePolicy> = r
                        .body_json()
                        .and_then(|b| serde_json::from_value(b["policies"].clone()).ok())
                        .ok_or_else(|| usage("manager returned an unreadable policy list"))?;
                    json!(upsert_policy(current, &mtid, requester, action))
                }
            };
            c.put(&format!("/policies/{mtid}"), &json!({ "policies": policies })).await
        }
    }
    .map_err(transport)?;
    respond(ctx, &r, out)
}

async fn clock(c: ClockCmd, ctx: &Ctx, out: &mut (dyn Write + Send)) -> Res {
    let client = ctx.manager_client()?;
    let req = match c {
        ClockCmd::Get => ApiRequest::get("/clock"),
        ClockCmd::Set { now } => {
            let key = ctx.operator_key.as_deref().ok_or_else(|| usage("setting the clock needs IOTMP_OPERATOR_KEY"))?;
            ApiRequest::put("/clock", &json!({ "now": now })).with_header(iotmp_core::api::OPERATOR_KEY_HEADER, key)
        }
    };
    let r = client.call(req).await.map_err(transport)?;
    respond(ctx, &r, out)
}

fn scenario(script: &Path, trace: Option<PathBuf>, report_path: Option<PathBuf>, ctx: &Ctx, out: &mut (dyn Write + Send)) -> Res {
    let text = std::fs::read_to_string(script).map_err(|e| usage(format!("{}: {e}", script.display())))?;
    let s = ScenarioScript::from_json(&text).map_err(|e| usage(format!("{}: {e}", script.display())))?;
    let mut sim = iotmp_core::sim::Sim::new(s).map_err(|e| usage(e.to_string()))?;
    let report: SimReport = sim.run();
    if let Some(p) = trace {
        sim.trace().write(&p).map_err(|e| usage(format!("{}: {e}", p.display())))?;
    }
    if let Some(p) = report_path {
        std::fs::write(&p, report.to_json()).map_err(|e| usage(format!("{}: {e}", p.display())))?;
    }
    let ok = report.probes.iter().filter(|p| p.ok).count();
    if ctx.json {
        emit(out, &format!("{}\n", report.to_json()))?;
    } else {
        emit(
            out,
            &format!(
                "seed      {}\nend_time  {}\nrecords   {}\nprobes    {ok}/{}\ntrace     {} ({} events)\n",
                report.seed,
                report.end_time,
                report.records.len(),
                report.probes.len(),
                report.trace_digest,
                report.trace_events
            ),
        )?;
        for p in report.probes.iter().filter(|p| !p.ok) {
            let mtid = p.mtid.as_ref().map(|m| m.as_str()).unwrap_or("-");
            emit(out, &format!("failed probe {} at {} on {mtid}: {} {}\n", p.probe, p.at, p.status, p.detail.as_deref().unwrap_or("")))?;
        }
    }
    Ok(if ok == report.probes.len() { 0 } else { EXIT_PROBES })
}
