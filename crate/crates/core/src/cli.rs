//! The `mcr` command line.
//!
//! Every command writes CSV reports with a one-line header into `--out` and
//! prints a few `key=value` lines. Reports hold virtual time only, so a run
//! repeated with the same seed produces the same bytes.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::bench::{
    recover_heatdis, report_overhead_breakdown, restart_heatdis, run_comm_bench, run_heatdis,
    CkptMode, CommConfig, FaultPlan, HeatdisConfig, HeatdisReport, RunRecord,
};
use crate::ckpt::{checkpoint_period, overhead};
use crate::config::{parse_config, JobSpec, NetConfig};
use crate::multilevel::{CkptLevel, GroupConfig, HelperMode};
use crate::multirail::{Runtime, RuntimeOptions};

#[derive(Debug, Parser)]
#[command(name = "mcr", about = "Multirail checkpoint/restart runtime simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a benchmark.
    Run(RunArgs),
    /// Continue a job from a transparent checkpoint manifest.
    Restart {
        #[arg(long)]
        manifest: PathBuf,
        /// Report directory; defaults to the one the checkpoint belongs to.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Network configuration file; the built-in one when absent.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Recover a heatdis job from its multilevel checkpoints and finish it.
    Recover {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=4))]
        level: u8,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Run heatdis and kill processes after a given step.
    Inject {
        #[arg(long)]
        step: u64,
        /// Comma-separated process ids.
        #[arg(long, value_delimiter = ',', required = true)]
        ranks: Vec<usize>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Checkpoint period for a time budget, and the resulting walltime.
    Budget {
        /// Seconds per checkpoint.
        #[arg(long)]
        tc: f64,
        /// Allowed overhead as a fraction of the solve time.
        #[arg(long)]
        overhead: f64,
        /// Solve time in seconds, to also print the walltime.
        #[arg(long)]
        ts: Option<f64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BenchKind {
    Heatdis,
    Comm,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[arg(long, default_value = "shm")]
    pub net: String,
    #[arg(long, default_value_t = 4)]
    pub np: usize,
    #[arg(long = "tasks-per-proc", default_value_t = 2)]
    pub tasks_per_proc: usize,
    #[arg(long, value_enum, default_value_t = BenchKind::Heatdis)]
    pub bench: BenchKind,
    #[arg(long = "ckpt-mode", default_value = "none", value_parser = parse_mode)]
    pub ckpt_mode: CkptMode,
    #[arg(long = "ckpt-every")]
    pub ckpt_every: Option<u64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub rows: usize,
    #[arg(long, default_value_t = 64)]
    pub cols: usize,
    #[arg(long, default_value_t = 100)]
    pub iterations: u64,
    /// Message sizes of the comm bench.
    #[arg(long, value_delimiter = ',', default_value = "8,1024,65536")]
    pub sizes: Vec<usize>,
    /// Offload multilevel redundancy work to one helper task per process.
    #[arg(long)]
    pub helper: bool,
    #[arg(long, default_value_t = 4)]
    pub k: usize,
    #[arg(long, default_value_t = 2)]
    pub m: usize,
    /// Network configuration file; the built-in one when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

fn parse_mode(s: &str) -> Result<CkptMode, String> {
    s.parse()
}

fn load_net(path: Option<&Path>) -> anyhow::Result<NetConfig> {
    match path {
        None => Ok(NetConfig::builtin()),
        Some(p) => {
            let text =
                std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(parse_config(&text)?)
        }
    }
}

impl RunArgs {
    fn job(&self) -> JobSpec {
        let mut job = JobSpec::new(self.np, self.tasks_per_proc, self.net.clone());
        job.seed = self.seed;
        job.ckpt_dir = self.out.join("ckpt");
        job
    }

    fn job_id(&self) -> String {
        match self.bench {
            BenchKind::Heatdis => "heatdis".into(),
            BenchKind::Comm => "comm".into(),
        }
    }

    fn opts(&self) -> RuntimeOptions {
        RuntimeOptions {
            job_id: self.job_id(),
            ..RuntimeOptions::default()
        }
    }

    fn heatdis(&self) -> HeatdisConfig {
        let mut cfg = HeatdisConfig::new(self.rows, self.cols, self.iterations);
        cfg.ckpt_mode = self.ckpt_mode;
        cfg.ckpt_every = self.ckpt_every;
        cfg.helper = if self.helper {
            HelperMode::HelperTask
        } else {
            HelperMode::Inline
        };
        cfg.group = GroupConfig {
            k: self.k,
            m: self.m,
            ..GroupConfig::default()
        };
        cfg
    }

    /// Fields shared by paired runs.
    fn signature(&self) -> String {
        format!(
            "{:?} {}x{} np={} tpp={} net={} iters={}",
            self.bench,
            self.rows,
            self.cols,
            self.np,
            self.tasks_per_proc,
            self.net,
            self.iterations
        )
    }

    fn prefix_header(&self) -> &'static str {
        "bench,net,np,tpp,ckpt_mode,ckpt_every,seed"
    }

    fn prefix(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.job_id(),
            self.net,
            self.np,
            self.tasks_per_proc,
            self.ckpt_mode,
            self.ckpt_every.map_or("none".into(), |e| e.to_string()),
            self.seed
        )
    }

    fn start(&self, net: &NetConfig) -> anyhow::Result<Runtime> {
        // checkpoints of an earlier run in the same directory are not reused
        let root = self.out.join("ckpt").join(self.job_id());
        if root.exists() {
            std::fs::remove_dir_all(&root)?;
        }
        Ok(Runtime::start(self.job(), net.clone(), self.opts())?)
    }
}

fn write_report(dir: &Path, name: &str, body: &str, out: &mut dyn Write) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    std::fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;
    writeln!(out, "report={}", path.display())?;
    Ok(())
}

fn heatdis_csv(args: &RunArgs, rep: &HeatdisReport) -> String {
    format!(
        "{},{}\n{},{}\n",
        args.prefix_header(),
        HeatdisReport::CSV_HEADER,
        args.prefix(),
        rep.csv_row()
    )
}

fn print_heatdis(rep: &HeatdisReport, out: &mut dyn Write) -> anyhow::Result<()> {
    writeln!(out, "step={}", rep.step)?;
    writeln!(out, "residual={}", rep.residual)?;
    writeln!(out, "digest={}", hex::encode(rep.digest))?;
    writeln!(out, "virtual_ticks={}", rep.walltime)?;
    if let Some(m) = &rep.last_manifest {
        writeln!(out, "manifest={}", m.display())?;
    }
    Ok(())
}

fn cmd_run(args: &RunArgs, fault: Option<FaultPlan>, out: &mut dyn Write) -> anyhow::Result<()> {
    let net = load_net(args.config.as_deref())?;
    match args.bench {
        BenchKind::Heatdis => {
            let mut cfg = args.heatdis();
            cfg.fault = fault;
            let mut rt = args.start(&net)?;
            let rep = run_heatdis(&mut rt, cfg.clone())?;
            write_report(&args.out, "heatdis.csv", &heatdis_csv(args, &rep), out)?;
            print_heatdis(&rep, out)?;
            if args.ckpt_mode != CkptMode::None && !rep.halted {
                // the same job without checkpoints, for the walltime breakdown
                let mut reference = RunArgs {
                    ckpt_mode: CkptMode::None,
                    ckpt_every: None,
                    out: args.out.join("reference"),
                    ..args.clone()
                };
                reference.helper = false;
                let mut rt_ref = reference.start(&net)?;
                let base = run_heatdis(&mut rt_ref, reference.heatdis())?;
                std::fs::remove_dir_all(&reference.out).ok();
                if base.digest != rep.digest {
                    bail!("checkpointed run diverged from the reference run");
                }
                let record = |label: &str, r: &HeatdisReport| RunRecord {
                    label: label.into(),
                    seed: args.seed,
                    config: args.signature(),
                    total: r.walltime,
                    checkpoint: r.counters.ckpt_ticks,
                    reconnects: r.counters.reconnects,
                };
                let csv = report_overhead_breakdown(
                    &record("reference", &base),
                    &[record(&args.ckpt_mode.to_string(), &rep)],
                )?;
                write_report(&args.out, "overhead.csv", &csv, out)?;
            }
        }
        BenchKind::Comm => {
            if fault.is_some() {
                bail!("faults can only be injected into heatdis");
            }
            let cfg = CommConfig {
                sizes: args.sizes.clone(),
                with_checkpoint: args.ckpt_mode == CkptMode::Transparent,
                ..CommConfig::default()
            };
            if !matches!(args.ckpt_mode, CkptMode::None | CkptMode::Transparent) {
                bail!("the comm bench supports --ckpt-mode none or transparent");
            }
            let rt = args.start(&net)?;
            let (_, rep) = run_comm_bench(rt, &cfg)?;
            write_report(&args.out, "comm.csv", &rep.to_csv(), out)?;
            let summary = format!(
                "{},census,reconnects,ckpt_ticks,virtual_ticks\n{},{},{},{},{}\n",
                args.prefix_header(),
                args.prefix(),
                rep.census,
                rep.reconnects,
                rep.ckpt_ticks,
                rep.walltime
            );
            write_report(&args.out, "comm_summary.csv", &summary, out)?;
            writeln!(out, "census={}", rep.census)?;
            writeln!(out, "reconnects={}", rep.reconnects)?;
        }
    }
    Ok(())
}

fn cmd_restart(
    manifest: &Path,
    dir: Option<&Path>,
    config: Option<&Path>,
    out: &mut dyn Write,
) -> anyhow::Result<()> {
    let net = load_net(config)?;
    let job_id = manifest
        .parent()
        .and_then(Path::parent)
        .and_then(Path::file_name)
        .and_then(|s| s.to_str())
        .unwrap_or("job")
        .to_string();
    let opts = RuntimeOptions {
        job_id,
        ..RuntimeOptions::default()
    };
    let (rt, rep) = restart_heatdis(manifest, &net, opts)?;
    let dir = match dir {
        Some(d) => d.to_path_buf(),
        None => rt
            .job()
            .ckpt_dir
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default(),
    };
    let j = rt.job();
    let csv = format!(
        "bench,net,np,tpp,seed,{}\nheatdis,{},{},{},{},{}\n",
        HeatdisReport::CSV_HEADER,
        j.net_option,
        j.n_processes,
        j.tasks_per_process,
        j.seed,
        rep.csv_row()
    );
    write_report(&dir, "restart.csv", &csv, out)?;
    print_heatdis(&rep, out)
}

fn cmd_recover(level: u8, args: &RunArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    if args.bench != BenchKind::Heatdis {
        bail!("only heatdis keeps multilevel checkpoints");
    }
    let net = load_net(args.config.as_deref())?;
    let level = CkptLevel::from_u8(level).expect("clap checks the range");
    let (_, rep, rec) = recover_heatdis(args.job(), &net, args.opts(), args.heatdis(), level)?;
    let mut csv = String::from("rank,source\n");
    for (r, s) in &rec.sources {
        csv.push_str(&format!("{r},{s:?}\n"));
    }
    write_report(&args.out, "recovery_sources.csv", &csv, out)?;
    write_report(&args.out, "recover.csv", &heatdis_csv(args, &rep), out)?;
    writeln!(out, "recovered_epoch={}", rec.epoch)?;
    writeln!(out, "recovered_level={}", rec.level.as_u8())?;
    print_heatdis(&rep, out)
}

fn cmd_budget(tc: f64, b: f64, ts: Option<f64>, out: &mut dyn Write) -> anyhow::Result<()> {
    let tau = checkpoint_period(tc, b)?;
    writeln!(out, "tau_seconds={tau}")?;
    if let Some(ts) = ts {
        let o = overhead(ts, tc, tau)?;
        writeln!(out, "walltime_seconds={}", o.d)?;
        writeln!(out, "overhead_factor={}", o.ovh)?;
    }
    Ok(())
}

/// Executes a parsed command line, writing its console output to `out`.
pub fn execute(cli: Cli, out: &mut dyn Write) -> anyhow::Result<()> {
    match cli.command {
        Command::Run(args) => cmd_run(&args, None, out),
        Command::Inject { step, ranks, run } => {
            let plan = FaultPlan::new(step, ranks)?;
            cmd_run(&run, Some(plan), out)
        }
        Command::Restart {
            manifest,
            out: dir,
            config,
        } => cmd_restart(&manifest, dir.as_deref(), config.as_deref(), out),
        Command::Recover { level, run } => cmd_recover(level, &run, out),
        Command::Budget { tc, overhead, ts } => cmd_budget(tc, overhead, ts, out),
    }
}

pub fn main() -> anyhow::Result<()> {
    execute(Cli::parse(), &mut std::io::stdout().lock())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(args: &[&str]) -> String {
        let cli = Cli::try_parse_from(std::iter::once("mcr").chain(args.iter().copied())).unwrap();
        let mut out = Vec::new();
        execute(cli, &mut out).unwrap();
        String::from_utf8(out).unwrap()
    }

    #[test]
    fn budget_prints_tau() {
        assert_eq!(
            run(&["budget", "--tc", "60", "--overhead", "0.01"]),
            "tau_seconds=6000\n"
        );
        let s = run(&["budget", "--tc", "60", "--overhead", "0.01", "--ts", "3600"]);
        assert!(s.contains("walltime_seconds=3636\n"));
        let cli =
            Cli::try_parse_from(["mcr", "budget", "--tc", "0", "--overhead", "0.01"]).unwrap();
        assert!(execute(cli, &mut Vec::new()).is_err());
    }

    #[test]
    fn run_writes_reports() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        let s = run(&[
            "run",
            "--np",
            "2",
            "--tasks-per-proc",
            "2",
            "--rows",
            "8",
            "--cols",
            "8",
            "--iterations",
            "6",
            "--ckpt-mode",
            "transparent",
            "--ckpt-every",
            "3",
            "--out",
            out,
        ]);
        assert!(s.contains("digest="));
        let csv = std::fs::read_to_string(dir.path().join("heatdis.csv")).unwrap();
        assert_eq!(csv.lines().count(), 2);
        assert!(csv.starts_with("bench,net,np,tpp,ckpt_mode,ckpt_every,seed,step,"));
        assert!(dir.path().join("overhead.csv").exists());
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(Cli::try_parse_from(["mcr", "run", "--ckpt-mode", "l7"]).is_err());
        assert!(Cli::try_parse_from(["mcr", "recover", "--level", "5"]).is_err());
        assert!(Cli::try_parse_from(["mcr", "inject", "--step", "3"]).is_err());
    }
}
