//! Heat diffusion on a 2-D grid, split into contiguous row blocks.
//!
//! Every step each rank swaps its edge rows with its neighbours, applies a
//! 5-point Jacobi update to the cells it owns and joins a max-reduction of
//! the largest cell change. The outer border is fixed: 100.0 along the top
//! row, 0.0 elsewhere.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::fault::{inject_fault, FaultPlan};
use super::{BenchError, CkptMode};
use crate::ckpt::{checkpoint_collective, restore, CkptState, Snapshot};
use crate::config::{JobSpec, NetConfig};
use crate::multilevel::{
    fti_init, CkptLevel, GroupConfig, HelperMode, Multilevel, MultilevelOptions, Recovery,
};
use crate::multirail::{Runtime, RuntimeOptions, TaskRank};
use crate::sched::Ticks;

const TAG_DOWN: i64 = 0;
const TAG_UP: i64 = 1;
const TOP: f64 = 100.0;

const REGION_STEP: u32 = 0;
const REGION_GRID: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeatdisConfig {
    pub rows: usize,
    pub cols: usize,
    pub iterations: u64,
    pub ckpt_every: Option<u64>,
    pub ckpt_mode: CkptMode,
    pub helper: HelperMode,
    pub group: GroupConfig,
    pub fault: Option<FaultPlan>,
}

impl HeatdisConfig {
    pub fn new(rows: usize, cols: usize, iterations: u64) -> Self {
        HeatdisConfig {
            rows,
            cols,
            iterations,
            ckpt_every: None,
            ckpt_mode: CkptMode::None,
            helper: HelperMode::Inline,
            group: GroupConfig::default(),
            fault: None,
        }
    }

    pub fn validate(&self, ranks: usize, n_processes: usize) -> Result<(), BenchError> {
        if self.iterations < 1 {
            return Err(BenchError::Config("iterations must be >= 1".into()));
        }
        if self.rows == 0 || self.cols == 0 {
            return Err(BenchError::Config("grid must not be empty".into()));
        }
        if ranks == 0 || !self.rows.is_multiple_of(ranks) {
            return Err(BenchError::Config(format!(
                "{} rows do not split over {ranks} ranks",
                self.rows
            )));
        }
        if self.ckpt_every == Some(0) {
            return Err(BenchError::Config("ckpt_every must be >= 1".into()));
        }
        if let Some(f) = &self.fault {
            f.validate(self.iterations, n_processes)?;
        }
        Ok(())
    }

    fn params(&self) -> BTreeMap<String, String> {
        [
            ("bench", "heatdis".to_string()),
            ("rows", self.rows.to_string()),
            ("cols", self.cols.to_string()),
            ("iterations", self.iterations.to_string()),
            (
                "ckpt_every",
                self.ckpt_every.map_or("none".into(), |e| e.to_string()),
            ),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    fn from_params(app: &BTreeMap<String, String>) -> Result<Self, BenchError> {
        let get = |k: &str| {
            app.get(k)
                .ok_or_else(|| BenchError::Config(format!("checkpoint lacks `app.{k}`")))
        };
        let num = |k: &str| -> Result<u64, BenchError> {
            get(k)?
                .parse()
                .map_err(|_| BenchError::Config(format!("`app.{k}` is not a number")))
        };
        if get("bench")? != "heatdis" {
            return Err(BenchError::Config(format!(
                "checkpoint holds bench `{}`",
                get("bench")?
            )));
        }
        let mut cfg = HeatdisConfig::new(
            num("rows")? as usize,
            num("cols")? as usize,
            num("iterations")?,
        );
        cfg.ckpt_every = match get("ckpt_every")?.as_str() {
            "none" => None,
            _ => Some(num("ckpt_every")?),
        };
        cfg.ckpt_mode = CkptMode::Transparent;
        Ok(cfg)
    }
}

/// Grid state of every rank plus the number of completed steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatdis {
    cfg: HeatdisConfig,
    step: u64,
    residual: f64,
    /// Owned rows of each rank, row-major.
    blocks: Vec<Vec<f64>>,
}

fn f64s_to_bytes(v: &[f64]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn bytes_to_f64s(b: &[u8]) -> Vec<f64> {
    b.chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

/// SHA-256 of the grid's little-endian bytes in row-major order.
pub fn grid_digest(grid: &[f64]) -> [u8; 32] {
    let mut h = Sha256::new();
    for x in grid {
        h.update(x.to_le_bytes());
    }
    h.finalize().into()
}

impl Heatdis {
    pub fn new(cfg: HeatdisConfig, ranks: usize) -> Result<Self, BenchError> {
        cfg.validate(ranks, usize::MAX)?;
        let rpr = cfg.rows / ranks;
        let blocks = (0..ranks)
            .map(|r| {
                let mut b = vec![0.0; rpr * cfg.cols];
                if r == 0 {
                    b[..cfg.cols].fill(TOP);
                }
                b
            })
            .collect();
        Ok(Heatdis {
            cfg,
            step: 0,
            residual: 0.0,
            blocks,
        })
    }

    /// Rebuilds the state from per-rank blobs as produced by [`Heatdis::blob`].
    pub fn from_blobs(
        cfg: HeatdisConfig,
        blobs: &BTreeMap<TaskRank, Vec<u8>>,
    ) -> Result<Self, BenchError> {
        let ranks = blobs.len();
        let mut app = Heatdis::new(cfg, ranks)?;
        let want = 8 + 8 * app.rows_per_rank() * app.cfg.cols;
        let mut steps = Vec::new();
        for r in 0..ranks {
            let b = blobs
                .get(&r)
                .ok_or_else(|| BenchError::Config(format!("no state for rank {r}")))?;
            if b.len() != want {
                return Err(BenchError::Config(format!(
                    "rank {r} state is {} bytes, expected {want}",
                    b.len()
                )));
            }
            steps.push(u64::from_le_bytes(b[..8].try_into().unwrap()));
            app.blocks[r] = bytes_to_f64s(&b[8..]);
        }
        if steps.windows(2).any(|w| w[0] != w[1]) {
            return Err(BenchError::Config(format!(
                "ranks disagree on the step: {steps:?}"
            )));
        }
        app.step = steps[0];
        Ok(app)
    }

    fn from_multilevel(cfg: HeatdisConfig, ml: &Multilevel) -> Result<Self, BenchError> {
        let blobs = ml
            .world()
            .ranks
            .iter()
            .map(|&r| {
                let mut b = ml.region(r, REGION_STEP).unwrap_or_default().to_vec();
                b.extend_from_slice(ml.region(r, REGION_GRID).unwrap_or_default());
                (r, b)
            })
            .collect();
        Heatdis::from_blobs(cfg, &blobs)
    }

    pub fn config(&self) -> &HeatdisConfig {
        &self.cfg
    }

    pub fn ranks(&self) -> usize {
        self.blocks.len()
    }

    pub fn rows_per_rank(&self) -> usize {
        self.cfg.rows / self.blocks.len()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn residual(&self) -> f64 {
        self.residual
    }

    /// `[u64 step][owned rows as f64]`, little-endian.
    pub fn blob(&self, rank: TaskRank) -> Vec<u8> {
        let mut b = self.step.to_le_bytes().to_vec();
        b.extend(f64s_to_bytes(&self.blocks[rank]));
        b
    }

    pub fn grid(&self) -> Vec<f64> {
        self.blocks.concat()
    }

    pub fn digest(&self) -> [u8; 32] {
        grid_digest(&self.grid())
    }

    /// One Jacobi step across all ranks. Returns the reduced residual.
    pub fn iterate(&mut self, rt: &mut Runtime) -> Result<f64, BenchError> {
        let ranks = self.ranks();
        let cols = self.cfg.cols;
        let rpr = self.rows_per_rank();
        for r in 0..ranks {
            let b = &self.blocks[r];
            if r > 0 {
                rt.send(r, r - 1, TAG_UP, f64s_to_bytes(&b[..cols]))?;
            }
            if r + 1 < ranks {
                rt.send(r, r + 1, TAG_DOWN, f64s_to_bytes(&b[(rpr - 1) * cols..]))?;
            }
        }
        let mut deltas = vec![0.0; ranks];
        for r in 0..ranks {
            let above = match r {
                0 => None,
                _ => Some(bytes_to_f64s(
                    &rt.recv(r, Some(r - 1), Some(TAG_DOWN))?.payload,
                )),
            };
            let below = match r + 1 < ranks {
                true => Some(bytes_to_f64s(
                    &rt.recv(r, Some(r + 1), Some(TAG_UP))?.payload,
                )),
                false => None,
            };
            let old = &self.blocks[r];
            let mut new = old.clone();
            let mut cells = 0;
            for i in 0..rpr {
                let g = r * rpr + i;
                if g == 0 || g + 1 == self.cfg.rows {
                    continue;
                }
                let up = if i == 0 {
                    &above.as_ref().unwrap()[..]
                } else {
                    &old[(i - 1) * cols..i * cols]
                };
                let down = if i + 1 == rpr {
                    &below.as_ref().unwrap()[..]
                } else {
                    &old[(i + 1) * cols..(i + 2) * cols]
                };
                for j in 1..cols.saturating_sub(1) {
                    let v =
                        0.25 * (up[j] + down[j] + old[i * cols + j - 1] + old[i * cols + j + 1]);
                    let d = (v - old[i * cols + j]).abs();
                    if d > deltas[r] {
                        deltas[r] = d;
                    }
                    new[i * cols + j] = v;
                    cells += 1;
                }
            }
            self.blocks[r] = new;
            rt.compute(r, cells)?;
        }
        let world: Vec<TaskRank> = (0..ranks).collect();
        self.residual = rt.allreduce_max(&world, &deltas)?;
        self.step += 1;
        Ok(self.residual)
    }
}

impl Snapshot for Heatdis {
    fn save(&self, rank: TaskRank) -> Vec<u8> {
        self.blob(rank)
    }

    fn params(&self) -> BTreeMap<String, String> {
        let mut p = self.cfg.params();
        p.insert("step".into(), self.step.to_string());
        p
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct HeatdisCounters {
    pub messages: u64,
    pub on_demand_connects: u64,
    /// Connections made after the first checkpoint, or all of them after a
    /// restart.
    pub reconnects: u64,
    pub checkpoints: u64,
    pub failed_checkpoints: u64,
    /// Ticks spent inside checkpoint calls.
    pub ckpt_ticks: Ticks,
    /// When the last helper finished its queued redundancy work.
    pub helper_end: Ticks,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeatdisReport {
    pub step: u64,
    pub iterations: u64,
    pub residual: f64,
    pub digest: [u8; 32],
    pub walltime: Ticks,
    pub counters: HeatdisCounters,
    pub halted: bool,
    pub last_manifest: Option<PathBuf>,
}

impl HeatdisReport {
    pub const CSV_HEADER: &'static str = "step,iterations,halted,residual,digest,virtual_ticks,messages,on_demand_connects,reconnects,checkpoints,failed_checkpoints,ckpt_ticks,helper_end";

    pub fn csv_row(&self) -> String {
        let c = &self.counters;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.iterations,
            self.halted,
            self.residual,
            hex::encode(self.digest),
            self.walltime,
            c.messages,
            c.on_demand_connects,
            c.reconnects,
            c.checkpoints,
            c.failed_checkpoints,
            c.ckpt_ticks,
            c.helper_end
        )
    }
}

fn multilevel_context(rt: &mut Runtime, app: &Heatdis) -> Result<Multilevel, BenchError> {
    let cfg = app.config();
    let mut ml = fti_init(
        rt,
        MultilevelOptions {
            group: cfg.group,
            mode: cfg.helper,
            ..MultilevelOptions::default()
        },
    )?;
    for r in 0..app.ranks() {
        ml.protect(r, REGION_STEP, 8, app.step.to_le_bytes().to_vec())?;
        ml.protect(r, REGION_GRID, 8, f64s_to_bytes(&app.blocks[r]))?;
    }
    Ok(ml)
}

fn drive(
    rt: &mut Runtime,
    mut app: Heatdis,
    mut ml: Option<Multilevel>,
    restarted: bool,
) -> Result<HeatdisReport, BenchError> {
    let cfg = app.config().clone();
    let connects_at_start = rt.on_demand_connects();
    let mut counters = HeatdisCounters::default();
    let mut connects_at_ckpt = restarted.then_some(connects_at_start);
    let mut last_manifest = None;
    let mut halted = false;
    while app.step < cfg.iterations {
        if let Some(plan) = cfg.fault.as_ref().filter(|f| f.step == app.step) {
            inject_fault(rt, plan, ml.as_ref())?;
            halted = true;
            break;
        }
        app.iterate(rt)?;
        let due = cfg.ckpt_every.is_some_and(|e| app.step.is_multiple_of(e)) && app.step < cfg.iterations;
        if !due {
            continue;
        }
        match (cfg.ckpt_mode, ml.as_mut()) {
            (CkptMode::Transparent, _) => {
                let out = checkpoint_collective(rt, &app);
                counters.ckpt_ticks += out.ticks();
                if out.state == CkptState::Checkpoint {
                    counters.checkpoints += 1;
                    last_manifest = out.manifest;
                    connects_at_ckpt.get_or_insert(rt.on_demand_connects());
                } else {
                    counters.failed_checkpoints += 1;
                }
            }
            (CkptMode::App(level), Some(ml)) => {
                for r in 0..app.ranks() {
                    ml.update(r, REGION_STEP, &app.step.to_le_bytes())?;
                    ml.update(r, REGION_GRID, &f64s_to_bytes(&app.blocks[r]))?;
                }
                let rep = ml.checkpoint(rt, level)?;
                counters.ckpt_ticks += rep.blocked.values().copied().max().unwrap_or(0);
                counters.checkpoints += 1;
            }
            _ => {}
        }
    }
    if let Some(ml) = &ml {
        if !halted {
            counters.helper_end = ml.drain_helpers(rt);
        }
    }
    counters.messages = rt.messages_sent();
    counters.on_demand_connects = rt.on_demand_connects() - connects_at_start;
    counters.reconnects = connects_at_ckpt.map_or(0, |c| rt.on_demand_connects() - c);
    Ok(HeatdisReport {
        step: app.step,
        iterations: cfg.iterations,
        residual: app.residual,
        digest: app.digest(),
        walltime: rt.walltime(),
        counters,
        halted,
        last_manifest,
    })
}

/// Runs heatdis from the initial condition on every application rank of `rt`.
pub fn run_heatdis(rt: &mut Runtime, cfg: HeatdisConfig) -> Result<HeatdisReport, BenchError> {
    cfg.validate(rt.n_app_tasks(), rt.n_processes())?;
    if cfg.ckpt_mode != CkptMode::None && cfg.ckpt_every.is_none() {
        return Err(BenchError::Config(format!(
            "checkpoint mode {} needs an interval",
            cfg.ckpt_mode
        )));
    }
    let app = Heatdis::new(cfg, rt.n_app_tasks())?;
    let ml = match app.config().ckpt_mode {
        CkptMode::App(_) => Some(multilevel_context(rt, &app)?),
        _ => None,
    };
    drive(rt, app, ml, false)
}

/// Brings a job back from a transparent checkpoint and runs it to the end.
pub fn restart_heatdis(
    manifest: &Path,
    net: &NetConfig,
    opts: RuntimeOptions,
) -> Result<(Runtime, HeatdisReport), BenchError> {
    let restored = restore(manifest, net, None, opts)?;
    let cfg = HeatdisConfig::from_params(&restored.manifest.app)?;
    let app = Heatdis::from_blobs(cfg, &restored.blobs)?;
    let mut rt = restored.runtime;
    let report = drive(&mut rt, app, None, true)?;
    Ok((rt, report))
}

/// Starts a fresh job over the checkpoint storage of an earlier one, restores
/// the protected state from the best surviving epoch at `level` or above and
/// runs to the end.
pub fn recover_heatdis(
    job: JobSpec,
    net: &NetConfig,
    opts: RuntimeOptions,
    mut cfg: HeatdisConfig,
    level: CkptLevel,
) -> Result<(Runtime, HeatdisReport, Recovery), BenchError> {
    cfg.fault = None;
    if !matches!(cfg.ckpt_mode, CkptMode::App(_)) {
        cfg.ckpt_mode = CkptMode::App(level);
    }
    let mut rt = Runtime::start(job, net.clone(), opts)?;
    cfg.validate(rt.n_app_tasks(), rt.n_processes())?;
    let fresh = Heatdis::new(cfg.clone(), rt.n_app_tasks())?;
    let mut ml = multilevel_context(&mut rt, &fresh)?;
    let recovery = ml.recover(&mut rt, level)?;
    let app = Heatdis::from_multilevel(cfg, &ml)?;
    let report = drive(&mut rt, app, Some(ml), false)?;
    Ok((rt, report, recovery))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn runtime(dir: &Path, np: usize, tpp: usize, net: &str) -> Runtime {
        let mut job = JobSpec::new(np, tpp, net);
        job.ckpt_dir = dir.to_path_buf();
        Runtime::start(job, NetConfig::builtin(), RuntimeOptions::default()).unwrap()
    }

    #[test]
    fn one_step_by_hand() {
        let dir = tempfile::tempdir().unwrap();
        let mut rt = runtime(dir.path(), 1, 1, "shm");
        let rep = run_heatdis(&mut rt, HeatdisConfig::new(4, 4, 1)).unwrap();
        let mut app = Heatdis::new(HeatdisConfig::new(4, 4, 1), 1).unwrap();
        app.iterate(&mut runtime(dir.path(), 1, 1, "shm")).unwrap();
        #[rustfmt::skip]
        let want = [
            100.0, 100.0, 100.0, 100.0,
            0.0,   25.0,  25.0,  0.0,
            0.0,   0.0,   0.0,   0.0,
            0.0,   0.0,   0.0,   0.0,
        ];
        assert_eq!(app.grid(), want);
        assert_eq!(rep.residual, 25.0);
        assert_eq!(rep.digest, grid_digest(&want));
        // 4 interior cells at one tick each
        assert_eq!(rep.walltime, 4);
    }

    #[test]
    fn second_step_by_hand() {
        let dir = tempfile::tempdir().unwrap();
        let mut rt = runtime(dir.path(), 1, 1, "shm");
        let mut app = Heatdis::new(HeatdisConfig::new(4, 4, 2), 1).unwrap();
        app.iterate(&mut rt).unwrap();
        app.iterate(&mut rt).unwrap();
        // (1,1) = (100 + 0 + 0 + 25) / 4, (2,1) = (25 + 0 + 0 + 0) / 4
        assert_eq!(
            &app.grid()[4..12],
            &[0.0, 31.25, 31.25, 0.0, 0.0, 6.25, 6.25, 0.0]
        );
        assert_eq!(app.residual(), 6.25);
    }

    #[test]
    fn decomposition_does_not_change_the_grid() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = HeatdisConfig::new(16, 12, 25);
        let one = run_heatdis(&mut runtime(dir.path(), 1, 1, "shm"), cfg.clone()).unwrap();
        let four = run_heatdis(&mut runtime(dir.path(), 4, 1, "shm"), cfg.clone()).unwrap();
        let eight = run_heatdis(&mut runtime(dir.path(), 2, 4, "multirail_tcp"), cfg).unwrap();
        assert_eq!(one.digest, four.digest);
        assert_eq!(one.digest, eight.digest);
        assert_eq!(one.residual, eight.residual);
    }

    #[test]
    fn config_rules() {
        let dir = tempfile::tempdir().unwrap();
        let mut rt = runtime(dir.path(), 4, 1, "shm");
        assert!(matches!(
            run_heatdis(&mut rt, HeatdisConfig::new(8, 8, 0)),
            Err(BenchError::Config(_))
        ));
        assert!(matches!(
            run_heatdis(&mut rt, HeatdisConfig::new(6, 8, 3)),
            Err(BenchError::Config(_))
        ));
        let mut cfg = HeatdisConfig::new(8, 8, 5);
        cfg.fault = Some(FaultPlan::new(5, [0]).unwrap());
        assert!(matches!(
            run_heatdis(&mut rt, cfg),
            Err(BenchError::InvalidStep { .. })
        ));
    }

    #[test]
    fn blob_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rt = runtime(dir.path(), 2, 1, "shm");
        let mut app = Heatdis::new(HeatdisConfig::new(8, 6, 10), 2).unwrap();
        for _ in 0..3 {
            app.iterate(&mut rt).unwrap();
        }
        let blobs = (0..2).map(|r| (r, app.blob(r))).collect();
        let back = Heatdis::from_blobs(app.config().clone(), &blobs).unwrap();
        assert_eq!(back.step(), 3);
        assert_eq!(back.grid(), app.grid());
    }

    #[test]
    fn transparent_restart_matches() {
        let dir = tempfile::tempdir().unwrap();
        let base = HeatdisConfig::new(16, 8, 20);
        let want = run_heatdis(&mut runtime(dir.path(), 4, 2, "ib_shm"), base.clone()).unwrap();

        let mut cfg = base;
        cfg.ckpt_mode = CkptMode::Transparent;
        cfg.ckpt_every = Some(10);
        cfg.fault = Some(FaultPlan::new(15, 0..4).unwrap());
        let mut rt = runtime(dir.path(), 4, 2, "ib_shm");
        let halted = run_heatdis(&mut rt, cfg).unwrap();
        assert!(halted.halted);
        assert_eq!(halted.step, 15);
        assert_eq!(halted.counters.checkpoints, 1);
        let manifest = halted.last_manifest.unwrap();
        let (_, done) =
            restart_heatdis(&manifest, &NetConfig::builtin(), RuntimeOptions::default()).unwrap();
        assert_eq!(done.step, 20);
        assert_eq!(done.digest, want.digest);
        assert!(done.counters.reconnects > 0);
    }

    #[test]
    fn multilevel_recovery_matches() {
        let dir = tempfile::tempdir().unwrap();
        let base = HeatdisConfig::new(16, 8, 12);
        let want = run_heatdis(&mut runtime(dir.path(), 8, 1, "shm"), base.clone()).unwrap();
        let mut cfg = base;
        cfg.ckpt_mode = CkptMode::App(CkptLevel::L3);
        cfg.ckpt_every = Some(4);
        cfg.fault = Some(FaultPlan::new(6, [1, 2]).unwrap());
        let mut job = JobSpec::new(8, 1, "shm");
        job.ckpt_dir = dir.path().join("ml");
        let mut rt =
            Runtime::start(job.clone(), NetConfig::builtin(), RuntimeOptions::default()).unwrap();
        assert!(run_heatdis(&mut rt, cfg.clone()).unwrap().halted);
        let (_, rep, rec) = recover_heatdis(
            job,
            &NetConfig::builtin(),
            RuntimeOptions::default(),
            cfg,
            CkptLevel::L1,
        )
        .unwrap();
        assert_eq!(rec.epoch, 1);
        assert_eq!(rep.digest, want.digest);
    }
}
