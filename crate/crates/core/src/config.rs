//! Network configuration: drivers, rails, gates and command-line options.
//!
//! The format is a sectioned plain-text document with three block kinds:
//!
//! ```text
//! config tcp_config_mpi { driver = tcp }
//! rail tcp_mpi   { priority = 1;  topology = ring; config = tcp_config_mpi }
//! rail tcp_large { priority = 10; topology = none; config = tcp_config_mpi;
//!                  gate minsize = 32KB; }
//! option multirail_tcp { rails = tcp_large, tcp_mpi; }
//! ```
//!
//! Statements inside a block are separated by `;` or newlines and `#` starts a
//! comment that runs to the end of the line.

use std::collections::BTreeSet;
use std::fmt;
use std::path::PathBuf;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::sched::CostModel;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConfigError {
    #[error("syntax error at line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("dangling reference: {kind} `{name}` is not defined")]
    DanglingReference { kind: &'static str, name: String },
    #[error("option `{0}` has no gate-free ring rail")]
    NoRingRail(String),
    #[error("duplicate {kind} name `{name}`")]
    Duplicate { kind: &'static str, name: String },
    #[error("invalid value for `{key}`: {value}")]
    InvalidValue { key: String, value: String },
    #[error("unknown option `{0}`")]
    UnknownOption(String),
    #[error("invalid job spec: {0}")]
    InvalidJob(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DriverKind {
    Inproc,
    Tcp,
    MockRdma,
}

impl DriverKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DriverKind::Inproc => "inproc",
            DriverKind::Tcp => "tcp",
            DriverKind::MockRdma => "mock_rdma",
        }
    }

    /// Whether endpoints of this driver survive inside a process image.
    pub fn default_checkpointable(self) -> bool {
        matches!(self, DriverKind::Inproc)
    }

    /// Per-message latency constant, in virtual ticks.
    pub fn latency(self) -> u64 {
        match self {
            DriverKind::Inproc => 10,
            DriverKind::Tcp => 100,
            DriverKind::MockRdma => 20,
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "inproc" => Some(DriverKind::Inproc),
            "tcp" => Some(DriverKind::Tcp),
            "mock_rdma" => Some(DriverKind::MockRdma),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Topology {
    Ring,
    None,
    Full,
}

impl Topology {
    pub fn as_str(self) -> &'static str {
        match self {
            Topology::Ring => "ring",
            Topology::None => "none",
            Topology::Full => "full",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "ring" => Some(Topology::Ring),
            "none" => Some(Topology::None),
            "full" => Some(Topology::Full),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GateKind {
    MinSize,
}

/// A predicate restricting which messages may use a rail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GateSpec {
    pub kind: GateKind,
    pub value: u64,
}

impl GateSpec {
    pub fn min_size(value: u64) -> Self {
        GateSpec {
            kind: GateKind::MinSize,
            value,
        }
    }

    /// `minsize` is strict: a message must be larger than the threshold.
    pub fn passes(&self, size: usize) -> bool {
        match self.kind {
            GateKind::MinSize => size as u64 > self.value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DriverConfig {
    pub name: String,
    pub driver: DriverKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RailSpec {
    pub name: String,
    pub priority: u32,
    pub driver: DriverKind,
    pub topology: Topology,
    pub checkpointable: bool,
    pub gates: Vec<GateSpec>,
    pub config_ref: String,
}

impl RailSpec {
    pub fn gates_pass(&self, size: usize) -> bool {
        self.gates.iter().all(|g| g.passes(size))
    }

    /// A rail that can carry every message over a guaranteed ring.
    pub fn is_signaling_ring(&self) -> bool {
        self.topology == Topology::Ring && self.gates.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetOption {
    pub name: String,
    pub rails: Vec<String>,
}

/// A fully resolved configuration document.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct NetConfig {
    pub configs: Vec<DriverConfig>,
    pub rails: Vec<RailSpec>,
    pub options: Vec<NetOption>,
}

/// The configuration shipped with the runtime. `multirail_tcp` is the classic
/// two-rail TCP setup; `ib_shm` pairs a non-checkpointable RDMA-like rail with
/// a checkpointable shared-memory ring.
pub const DEFAULT_CONFIG: &str = "\
# driver instances
config tcp_config_mpi { driver = tcp }
config shm_config { driver = inproc }
config rdma_config { driver = mock_rdma }

# rails
rail tcp_mpi { priority = 1; topology = ring; config = tcp_config_mpi }
rail tcp_large {
    priority = 10
    topology = none
    config = tcp_config_mpi
    gate minsize = 32KB
}
rail shm_ring { priority = 1; topology = ring; config = shm_config }
rail rdma { priority = 20; topology = none; config = rdma_config }

# command-line options
option multirail_tcp { rails = tcp_large, tcp_mpi }
option shm { rails = shm_ring }
option ib_shm { rails = rdma, shm_ring }
";

impl NetConfig {
    pub fn builtin() -> Self {
        parse_config(DEFAULT_CONFIG).expect("built-in configuration is valid")
    }

    pub fn option(&self, name: &str) -> Result<&NetOption, ConfigError> {
        self.options
            .iter()
            .find(|o| o.name == name)
            .ok_or_else(|| ConfigError::UnknownOption(name.to_string()))
    }

    pub fn rail(&self, name: &str) -> Option<&RailSpec> {
        self.rails.iter().find(|r| r.name == name)
    }

    /// Rails of an option, sorted by priority (descending) and then by their
    /// position in the option. This is the order election walks.
    pub fn option_rails(&self, option: &str) -> Result<Vec<RailSpec>, ConfigError> {
        let opt = self.option(option)?;
        let mut rails: Vec<(usize, RailSpec)> = opt
            .rails
            .iter()
            .enumerate()
            .map(|(i, n)| {
                self.rail(n).cloned().map(|r| (i, r)).ok_or_else(|| {
                    ConfigError::DanglingReference {
                        kind: "rail",
                        name: n.clone(),
                    }
                })
            })
            .collect::<Result<_, _>>()?;
        rails.sort_by(|(ia, a), (ib, b)| b.priority.cmp(&a.priority).then(ia.cmp(ib)));
        Ok(rails.into_iter().map(|(_, r)| r).collect())
    }

    /// Serializes back to the text format. Checkpointability is always written
    /// out explicitly so a re-parse never depends on driver defaults.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for c in &self.configs {
            out.push_str(&format!(
                "config {} {{ driver = {} }}\n",
                c.name,
                c.driver.as_str()
            ));
        }
        for r in &self.rails {
            out.push_str(&format!(
                "rail {} {{ priority = {}; topology = {}; config = {}; checkpointable = {};",
                r.name,
                r.priority,
                r.topology.as_str(),
                r.config_ref,
                r.checkpointable
            ));
            for g in &r.gates {
                match g.kind {
                    GateKind::MinSize => {
                        out.push_str(&format!(" gate minsize = {};", format_size(g.value)))
                    }
                }
            }
            out.push_str(" }\n");
        }
        for o in &self.options {
            out.push_str(&format!(
                "option {} {{ rails = {}; }}\n",
                o.name,
                o.rails.join(", ")
            ));
        }
        out
    }

    /// SHA-256 of the canonical text of one option's rails, used to check that
    /// a restart runs with the configuration the checkpoint was taken with.
    pub fn option_digest(&self, option: &str) -> Result<[u8; 32], ConfigError> {
        let rails = self.option_rails(option)?;
        let mut h = Sha256::new();
        h.update(format!("option={option}\n").as_bytes());
        for r in &rails {
            h.update(
                format!(
                    "{}|{}|{}|{}|{}|{:?}\n",
                    r.name,
                    r.priority,
                    r.driver.as_str(),
                    r.topology.as_str(),
                    r.checkpointable,
                    r.gates
                )
                .as_bytes(),
            );
        }
        let mut out = [0u8; 32];
        out.copy_from_slice(&h.finalize());
        Ok(out)
    }
}

/// Formats a byte count with the largest exact suffix.
pub fn format_size(bytes: u64) -> String {
    if bytes != 0 && bytes.is_multiple_of(1 << 20) {
        format!("{}MB", bytes >> 20)
    } else if bytes != 0 && bytes.is_multiple_of(1 << 10) {
        format!("{}KB", bytes >> 10)
    } else {
        format!("{bytes}B")
    }
}

/// Parses `32KB`, `1MB`, `512B` or a bare byte count. Suffixes are powers of
/// 1024 and case-insensitive.
pub fn parse_size(s: &str) -> Option<u64> {
    let s = s.trim();
    let upper = s.to_ascii_uppercase();
    let (digits, mult) = if let Some(d) = upper.strip_suffix("MB") {
        (d, 1u64 << 20)
    } else if let Some(d) = upper.strip_suffix("KB") {
        (d, 1 << 10)
    } else if let Some(d) = upper.strip_suffix('B') {
        (d, 1)
    } else {
        (upper.as_str(), 1)
    };
    digits.trim().parse::<u64>().ok()?.checked_mul(mult)
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Tok {
    Word(String),
    LBrace,
    RBrace,
    Eq,
    Sep,
    Comma,
}

fn tokenize(text: &str) -> Result<Vec<(usize, Tok)>, ConfigError> {
    let mut toks = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let body = raw.split('#').next().unwrap_or("");
        let mut chars = body.chars().peekable();
        while let Some(&c) = chars.peek() {
            match c {
                c if c.is_whitespace() => {
                    chars.next();
                }
                '{' => {
                    chars.next();
                    toks.push((line, Tok::LBrace));
                }
                '}' => {
                    chars.next();
                    toks.push((line, Tok::RBrace));
                }
                '=' => {
                    chars.next();
                    toks.push((line, Tok::Eq));
                }
                ';' => {
                    chars.next();
                    toks.push((line, Tok::Sep));
                }
                ',' => {
                    chars.next();
                    toks.push((line, Tok::Comma));
                }
                c if c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.' => {
                    let mut w = String::new();
                    while let Some(&c) = chars.peek() {
                        if c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.' {
                            w.push(c);
                            chars.next();
                        } else {
                            break;
                        }
                    }
                    toks.push((line, Tok::Word(w)));
                }
                other => {
                    return Err(ConfigError::Syntax {
                        line,
                        msg: format!("unexpected character `{other}`"),
                    })
                }
            }
        }
        toks.push((line, Tok::Sep));
    }
    Ok(toks)
}

/// One `key = value[, value...]` statement inside a block.
struct Stmt {
    line: usize,
    key: Vec<String>,
    values: Vec<String>,
}

struct Block {
    line: usize,
    kind: String,
    name: String,
    stmts: Vec<Stmt>,
}

struct Parser {
    toks: Vec<(usize, Tok)>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(_, t)| t)
    }

    fn line(&self) -> usize {
        self.toks
            .get(self.pos)
            .or_else(|| self.toks.last())
            .map(|(l, _)| *l)
            .unwrap_or(0)
    }

    fn err<T>(&self, msg: impl Into<String>) -> Result<T, ConfigError> {
        Err(ConfigError::Syntax {
            line: self.line(),
            msg: msg.into(),
        })
    }

    fn skip_seps(&mut self) {
        while self.peek() == Some(&Tok::Sep) {
            self.pos += 1;
        }
    }

    fn word(&mut self, what: &str) -> Result<String, ConfigError> {
        match self.peek() {
            Some(Tok::Word(w)) => {
                let w = w.clone();
                self.pos += 1;
                Ok(w)
            }
            _ => self.err(format!("expected {what}")),
        }
    }

    fn blocks(&mut self) -> Result<Vec<Block>, ConfigError> {
        let mut blocks = Vec::new();
        loop {
            self.skip_seps();
            if self.peek().is_none() {
                return Ok(blocks);
            }
            let line = self.line();
            let kind = self.word("block kind")?;
            let name = self.word("block name")?;
            self.skip_seps();
            if self.peek() != Some(&Tok::LBrace) {
                return self.err("expected `{`");
            }
            self.pos += 1;
            let mut stmts = Vec::new();
            loop {
                self.skip_seps();
                match self.peek() {
                    Some(Tok::RBrace) => {
                        self.pos += 1;
                        break;
                    }
                    None => return self.err("unterminated block"),
                    _ => stmts.push(self.stmt()?),
                }
            }
            blocks.push(Block {
                line,
                kind,
                name,
                stmts,
            });
        }
    }

    fn stmt(&mut self) -> Result<Stmt, ConfigError> {
        let line = self.line();
        let mut key = Vec::new();
        while let Some(Tok::Word(_)) = self.peek() {
            key.push(self.word("key")?);
        }
        if key.is_empty() || self.peek() != Some(&Tok::Eq) {
            return self.err("expected `key = value`");
        }
        self.pos += 1;
        let mut values = vec![self.word("value")?];
        while self.peek() == Some(&Tok::Comma) {
            self.pos += 1;
            values.push(self.word("value")?);
        }
        match self.peek() {
            Some(Tok::Sep) | Some(Tok::RBrace) => {}
            _ => return self.err("expected `;`, newline or `}` after value"),
        }
        Ok(Stmt { line, key, values })
    }
}

fn single(stmt: &Stmt) -> Result<&str, ConfigError> {
    if stmt.values.len() != 1 {
        return Err(ConfigError::Syntax {
            line: stmt.line,
            msg: format!("`{}` takes a single value", stmt.key.join(" ")),
        });
    }
    Ok(&stmt.values[0])
}

fn invalid(stmt: &Stmt) -> ConfigError {
    ConfigError::InvalidValue {
        key: stmt.key.join(" "),
        value: stmt.values.join(","),
    }
}

/// Parses and validates a configuration document.
pub fn parse_config(text: &str) -> Result<NetConfig, ConfigError> {
    let toks = tokenize(text)?;
    let blocks = Parser { toks, pos: 0 }.blocks()?;

    let mut configs = Vec::new();
    // rails are resolved after all configs are known
    let mut raw_rails = Vec::new();
    let mut options = Vec::new();

    for b in blocks {
        match b.kind.as_str() {
            "config" => {
                let mut driver = None;
                for s in &b.stmts {
                    match s.key.as_slice() {
                        [k] if k == "driver" => {
                            driver = Some(DriverKind::parse(single(s)?).ok_or_else(|| invalid(s))?);
                        }
                        _ => {
                            return Err(ConfigError::Syntax {
                                line: s.line,
                                msg: format!("unknown config key `{}`", s.key.join(" ")),
                            })
                        }
                    }
                }
                let driver = driver.ok_or(ConfigError::Syntax {
                    line: b.line,
                    msg: format!("config `{}` has no driver", b.name),
                })?;
                configs.push(DriverConfig {
                    name: b.name,
                    driver,
                });
            }
            "rail" => raw_rails.push(b),
            "option" => {
                let mut rails = None;
                for s in &b.stmts {
                    match s.key.as_slice() {
                        [k] if k == "rails" => rails = Some(s.values.clone()),
                        _ => {
                            return Err(ConfigError::Syntax {
                                line: s.line,
                                msg: format!("unknown option key `{}`", s.key.join(" ")),
                            })
                        }
                    }
                }
                let rails = rails.ok_or(ConfigError::Syntax {
                    line: b.line,
                    msg: format!("option `{}` lists no rails", b.name),
                })?;
                options.push(NetOption {
                    name: b.name,
                    rails,
                });
            }
            other => {
                return Err(ConfigError::Syntax {
                    line: b.line,
                    msg: format!("unknown block kind `{other}`"),
                })
            }
        }
    }

    let mut rails = Vec::new();
    for b in raw_rails {
        let mut priority = 0u32;
        let mut topology = None;
        let mut config_ref = None;
        let mut checkpointable = None;
        let mut gates = Vec::new();
        for s in &b.stmts {
            let key: Vec<&str> = s.key.iter().map(String::as_str).collect();
            match key.as_slice() {
                ["priority"] => {
                    let v: i64 = single(s)?.parse().map_err(|_| invalid(s))?;
                    priority = u32::try_from(v).map_err(|_| invalid(s))?;
                }
                ["topology"] => {
                    topology = Some(Topology::parse(single(s)?).ok_or_else(|| invalid(s))?)
                }
                ["config"] => config_ref = Some(single(s)?.to_string()),
                ["checkpointable"] => {
                    checkpointable = Some(match single(s)? {
                        "true" => true,
                        "false" => false,
                        _ => return Err(invalid(s)),
                    })
                }
                ["gate", "minsize"] => {
                    let v = parse_size(single(s)?).ok_or_else(|| invalid(s))?;
                    if v == 0 {
                        return Err(invalid(s));
                    }
                    gates.push(GateSpec::min_size(v));
                }
                _ => {
                    return Err(ConfigError::Syntax {
                        line: s.line,
                        msg: format!("unknown rail key `{}`", s.key.join(" ")),
                    })
                }
            }
        }
        let config_ref = config_ref.ok_or(ConfigError::Syntax {
            line: b.line,
            msg: format!("rail `{}` has no config", b.name),
        })?;
        let driver = configs
            .iter()
            .find(|c: &&DriverConfig| c.name == config_ref)
            .map(|c| c.driver)
            .ok_or_else(|| ConfigError::DanglingReference {
                kind: "config",
                name: config_ref.clone(),
            })?;
        rails.push(RailSpec {
            name: b.name,
            priority,
            driver,
            topology: topology.unwrap_or(Topology::None),
            checkpointable: checkpointable.unwrap_or(driver.default_checkpointable()),
            gates,
            config_ref,
        });
    }

    let cfg = NetConfig {
        configs,
        rails,
        options,
    };
    validate(&cfg)?;
    Ok(cfg)
}

fn unique<'a>(kind: &'static str, names: impl Iterator<Item = &'a str>) -> Result<(), ConfigError> {
    let mut seen = BTreeSet::new();
    for n in names {
        if !seen.insert(n) {
            return Err(ConfigError::Duplicate {
                kind,
                name: n.to_string(),
            });
        }
    }
    Ok(())
}

/// Checks name uniqueness, cross references and the ring invariant.
pub fn validate(cfg: &NetConfig) -> Result<(), ConfigError> {
    unique("config", cfg.configs.iter().map(|c| c.name.as_str()))?;
    unique("rail", cfg.rails.iter().map(|r| r.name.as_str()))?;
    unique("option", cfg.options.iter().map(|o| o.name.as_str()))?;
    for r in &cfg.rails {
        if !cfg.configs.iter().any(|c| c.name == r.config_ref) {
            return Err(ConfigError::DanglingReference {
                kind: "config",
                name: r.config_ref.clone(),
            });
        }
    }
    for o in &cfg.options {
        let mut has_ring = false;
        for name in &o.rails {
            let rail = cfg
                .rail(name)
                .ok_or_else(|| ConfigError::DanglingReference {
                    kind: "rail",
                    name: name.clone(),
                })?;
            has_ring |= rail.is_signaling_ring();
        }
        if !has_ring {
            return Err(ConfigError::NoRingRail(o.name.clone()));
        }
    }
    Ok(())
}

/// Shape of a job: how many logical processes, tasks and lanes.
#[derive(Debug, Clone, PartialEq)]
pub struct JobSpec {
    pub n_processes: usize,
    pub tasks_per_process: usize,
    pub lanes_per_process: usize,
    pub seed: u64,
    pub cost_model: CostModel,
    pub ckpt_dir: PathBuf,
    pub net_option: String,
}

impl JobSpec {
    pub fn new(
        n_processes: usize,
        tasks_per_process: usize,
        net_option: impl Into<String>,
    ) -> Self {
        JobSpec {
            n_processes,
            tasks_per_process,
            lanes_per_process: tasks_per_process,
            seed: 0,
            cost_model: CostModel::default(),
            ckpt_dir: PathBuf::from("ckpt"),
            net_option: net_option.into(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.n_processes < 1 {
            return Err(ConfigError::InvalidJob("n_processes must be >= 1".into()));
        }
        if self.tasks_per_process < 1 {
            return Err(ConfigError::InvalidJob(
                "tasks_per_process must be >= 1".into(),
            ));
        }
        if self.lanes_per_process < 1 {
            return Err(ConfigError::InvalidJob(
                "lanes_per_process must be >= 1".into(),
            ));
        }
        // application tasks each own a lane; only helpers oversubscribe
        if self.tasks_per_process > self.lanes_per_process {
            return Err(ConfigError::InvalidJob(format!(
                "tasks_per_process ({}) exceeds lanes_per_process ({})",
                self.tasks_per_process, self.lanes_per_process
            )));
        }
        Ok(())
    }

    pub fn n_tasks(&self) -> usize {
        self.n_processes * self.tasks_per_process
    }

    /// SHA-256 over the selected option and the job shape, hex encoded.
    pub fn config_hash(&self, net: &NetConfig) -> Result<String, ConfigError> {
        let mut h = Sha256::new();
        h.update(net.option_digest(&self.net_option)?);
        h.update(
            format!(
                "np={};tpp={};lpp={}",
                self.n_processes, self.tasks_per_process, self.lanes_per_process
            )
            .as_bytes(),
        );
        Ok(hex::encode(h.finalize()))
    }
}

impl fmt::Display for JobSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}x{} tasks on `{}` (seed {})",
            self.n_processes, self.tasks_per_process, self.net_option, self.seed
        )
    }
}
