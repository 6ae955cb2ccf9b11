//! Application-level multilevel checkpointing.
//!
//! Tasks protect byte regions of their state; a checkpoint serializes them
//! into one blob per rank and stores it at one of four levels:
//!
//! | level | redundancy                                           |
//! |-------|------------------------------------------------------|
//! | L1    | local blob only                                      |
//! | L2    | local blob + copy on a partner rank                  |
//! | L3    | local blob + Reed-Solomon parity on parity holders   |
//! | L4    | local blob + copy in the shared store                |
//!
//! Ranks form contiguous groups of `k`. Storage is node-local: when a process
//! fails, every object it holds is lost, except the shared store.
//!
//! In helper mode every process gets one helper task oversubscribed onto its
//! first lane. Only the local write blocks the application; the redundancy
//! work is queued to the helper, which runs it while the application waits
//! for messages.

pub mod gf256;
mod region;
mod rs;
mod shard;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::multirail::{NetError, ProcessId, Runtime, TaskRank};
use crate::sched::{HelperLane, Ticks};

pub use region::{
    deserialize as deserialize_regions, serialize as serialize_regions, ProtectedRegion,
};
pub use rs::{cauchy, rs_decode, rs_encode, RsError};
pub use shard::{EncodedShard, ShardHeader, SHARD_HEADER_LEN, SHARD_MAGIC};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CkptLevel {
    L1 = 1,
    L2 = 2,
    L3 = 3,
    L4 = 4,
}

impl CkptLevel {
    pub const ALL: [CkptLevel; 4] = [CkptLevel::L1, CkptLevel::L2, CkptLevel::L3, CkptLevel::L4];

    pub fn from_u8(v: u8) -> Option<Self> {
        Self::ALL.get((v as usize).wrapping_sub(1)).copied()
    }

    pub fn as_u8(self) -> u8 {
        self as u8
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupConfig {
    pub k: usize,
    pub m: usize,
    pub partner_offset: usize,
}

impl Default for GroupConfig {
    fn default() -> Self {
        GroupConfig {
            k: 4,
            m: 2,
            partner_offset: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HelperMode {
    Inline,
    HelperTask,
}

#[derive(Debug, Clone)]
pub struct MultilevelOptions {
    pub group: GroupConfig,
    pub mode: HelperMode,
    /// Whether helper I/O releases the lane.
    pub io_yield: bool,
    /// Bound on queued redundancy jobs per helper.
    pub queue_depth: usize,
    /// Bytes each process may hold in node-local storage.
    pub quota: Option<u64>,
}

impl Default for MultilevelOptions {
    fn default() -> Self {
        MultilevelOptions {
            group: GroupConfig::default(),
            mode: HelperMode::Inline,
            io_yield: true,
            queue_depth: 4,
            quota: None,
        }
    }
}

/// Application ranks, i.e. the world with helpers split off.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AppWorld {
    pub ranks: Vec<TaskRank>,
    pub helpers: Vec<TaskRank>,
}

impl AppWorld {
    pub fn len(&self) -> usize {
        self.ranks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranks.is_empty()
    }

    pub fn contains(&self, r: TaskRank) -> bool {
        self.ranks.contains(&r)
    }
}

#[derive(Debug, Error)]
pub enum MlError {
    #[error("invalid multilevel configuration: {0}")]
    Config(String),
    #[error("task {task} already protects region {id}")]
    DuplicateId { task: TaskRank, id: u32 },
    #[error("task {task} has no region {id}")]
    UnknownRegion { task: TaskRank, id: u32 },
    #[error("region {id} of task {task} holds {got} bytes, expected {want}")]
    LengthMismatch {
        task: TaskRank,
        id: u32,
        got: usize,
        want: usize,
    },
    #[error("task {0} is not an application rank")]
    NotInWorld(TaskRank),
    #[error("process {process} would hold {need} bytes, quota is {quota}")]
    StorageFull {
        process: ProcessId,
        need: u64,
        quota: u64,
    },
    #[error("helper of process {process} has {depth} queued jobs")]
    HelperBacklog { process: ProcessId, depth: usize },
    #[error("unrecoverable: {0}")]
    Unrecoverable(String),
    #[error(transparent)]
    Rs(#[from] RsError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Where a rank's blob came from during recovery.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Local,
    Partner,
    ErasureCode,
    SharedStore,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointReport {
    pub epoch: u32,
    pub level: CkptLevel,
    /// Ticks each application task spent blocked in the call.
    pub blocked: BTreeMap<TaskRank, Ticks>,
    /// Redundancy work handed to helpers, in ticks.
    pub offloaded: Ticks,
    pub bytes_written: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Recovery {
    pub epoch: u32,
    pub level: CkptLevel,
    pub sources: BTreeMap<TaskRank, Source>,
}

/// Sets up multilevel checkpointing on a running job.
pub fn fti_init(rt: &mut Runtime, opts: MultilevelOptions) -> Result<Multilevel, MlError> {
    Multilevel::init(rt, opts)
}

pub struct Multilevel {
    opts: MultilevelOptions,
    world: AppWorld,
    /// Hosting process of each application rank.
    owner: Vec<ProcessId>,
    root: PathBuf,
    regions: BTreeMap<TaskRank, BTreeMap<u32, ProtectedRegion>>,
    next_epoch: u32,
}

fn epoch_dir(root: &Path, level: u8, epoch: u32) -> PathBuf {
    root.join(format!("l{level}"))
        .join(format!("epoch-{epoch}"))
}

fn blob_name(rank: TaskRank) -> String {
    format!("rank-{rank}.blob")
}

fn shard_name(holder: TaskRank, idx: usize) -> String {
    format!("rank-{holder}.shard{idx}")
}

/// Rank encoded in a stored object's file name.
fn holder_of(name: &str) -> Option<TaskRank> {
    name.strip_prefix("rank-")?.split('.').next()?.parse().ok()
}

fn list_epochs(level_dir: &Path) -> Vec<u32> {
    let Ok(entries) = fs::read_dir(level_dir) else {
        return Vec::new();
    };
    entries
        .flatten()
        .filter_map(|e| e.file_name().to_str()?.strip_prefix("epoch-")?.parse().ok())
        .collect()
}

impl Multilevel {
    pub fn init(rt: &mut Runtime, opts: MultilevelOptions) -> Result<Self, MlError> {
        let n = rt.n_app_tasks();
        let GroupConfig { k, m, .. } = opts.group;
        if k == 0 || k + m > 255 {
            return Err(MlError::Config(format!(
                "k={k}, m={m} (need 1 <= k, k + m <= 255)"
            )));
        }
        if k + m > n {
            return Err(MlError::Config(format!(
                "k + m = {} exceeds the {n} application ranks",
                k + m
            )));
        }
        if !n.is_multiple_of(k) {
            return Err(MlError::Config(format!(
                "{n} application ranks do not split into groups of {k}"
            )));
        }
        let owner = (0..n)
            .map(|r| rt.process_of(r))
            .collect::<Result<Vec<_>, _>>()?;
        let mut helpers = Vec::new();
        if opts.mode == HelperMode::HelperTask {
            for p in 0..rt.n_processes() {
                let lane = HelperLane::new(opts.io_yield, rt.cost().ctx_switch, opts.queue_depth);
                helpers.push(rt.attach_helper(p, lane));
            }
        }
        let root = rt.ckpt_root();
        let next_epoch = CkptLevel::ALL
            .iter()
            .flat_map(|l| list_epochs(&root.join(format!("l{}", l.as_u8()))))
            .max()
            .unwrap_or(0)
            + 1;
        Ok(Multilevel {
            opts,
            world: AppWorld {
                ranks: (0..n).collect(),
                helpers,
            },
            owner,
            root,
            regions: BTreeMap::new(),
            next_epoch,
        })
    }

    pub fn world(&self) -> &AppWorld {
        &self.world
    }

    pub fn options(&self) -> &MultilevelOptions {
        &self.opts
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn check_rank(&self, task: TaskRank) -> Result<(), MlError> {
        if self.world.contains(task) {
            Ok(())
        } else {
            Err(MlError::NotInWorld(task))
        }
    }

    /// Registers a region. `data.len()` must be a multiple of `elem_size`.
    pub fn protect(
        &mut self,
        task: TaskRank,
        id: u32,
        elem_size: u32,
        data: Vec<u8>,
    ) -> Result<(), MlError> {
        self.check_rank(task)?;
        let region = ProtectedRegion::new(id, elem_size, data);
        if !region.is_consistent() {
            return Err(MlError::LengthMismatch {
                task,
                id,
                got: region.len(),
                want: (region.count * elem_size as u64) as usize,
            });
        }
        let regions = self.regions.entry(task).or_default();
        if regions.contains_key(&id) {
            return Err(MlError::DuplicateId { task, id });
        }
        regions.insert(id, region);
        Ok(())
    }

    /// Refreshes the contents of a protected region; the length is fixed.
    pub fn update(&mut self, task: TaskRank, id: u32, data: &[u8]) -> Result<(), MlError> {
        let r = self
            .regions
            .get_mut(&task)
            .and_then(|m| m.get_mut(&id))
            .ok_or(MlError::UnknownRegion { task, id })?;
        if r.data.len() != data.len() {
            return Err(MlError::LengthMismatch {
                task,
                id,
                got: data.len(),
                want: r.data.len(),
            });
        }
        r.data.copy_from_slice(data);
        Ok(())
    }

    pub fn region(&self, task: TaskRank, id: u32) -> Option<&[u8]> {
        self.regions.get(&task)?.get(&id).map(|r| r.data.as_slice())
    }

    pub fn blob(&self, task: TaskRank) -> Vec<u8> {
        serialize_regions(self.regions.get(&task).unwrap_or(&BTreeMap::new()))
    }

    fn group_of(&self, r: TaskRank) -> (usize, usize) {
        (r / self.opts.group.k, r % self.opts.group.k)
    }

    /// Rank holding `r`'s partner copy: the next group member at the
    /// configured offset that lives on another process, wrapping.
    pub fn partner(&self, r: TaskRank) -> Option<TaskRank> {
        let GroupConfig {
            k, partner_offset, ..
        } = self.opts.group;
        let n = self.world.len();
        let (g, i) = self.group_of(r);
        let in_group = (0..k).map(|s| g * k + (i + partner_offset + s) % k);
        let outside = (1..n).map(|s| (r + s) % n);
        let candidates: Vec<TaskRank> = in_group.chain(outside).filter(|&c| c != r).collect();
        candidates
            .iter()
            .copied()
            .find(|&c| self.owner[c] != self.owner[r])
            .or_else(|| candidates.first().copied())
    }

    /// Ranks holding the `m` parity shards of group `g`, preferring ranks on
    /// processes outside the group, one per process.
    pub fn parity_holders(&self, g: usize) -> Vec<TaskRank> {
        let GroupConfig { k, m, .. } = self.opts.group;
        let n = self.world.len();
        let members: Vec<TaskRank> = (g * k..(g + 1) * k).collect();
        let group_procs: BTreeSet<ProcessId> = members.iter().map(|&r| self.owner[r]).collect();
        let others: Vec<TaskRank> = (0..n)
            .map(|s| ((g + 1) * k + s) % n)
            .filter(|r| !members.contains(r))
            .collect();
        let mut chosen: Vec<TaskRank> = Vec::with_capacity(m);
        let mut used: BTreeSet<ProcessId> = BTreeSet::new();
        for &r in &others {
            if chosen.len() < m
                && !group_procs.contains(&self.owner[r])
                && used.insert(self.owner[r])
            {
                chosen.push(r);
            }
        }
        for &r in others.iter().chain(&members) {
            if chosen.len() < m && !chosen.contains(&r) {
                chosen.push(r);
            }
        }
        chosen
    }

    fn write_object(
        &self,
        level: u8,
        epoch: u32,
        name: &str,
        shard: &EncodedShard,
    ) -> Result<u64, MlError> {
        let dir = epoch_dir(&self.root, level, epoch);
        fs::create_dir_all(&dir)?;
        let bytes = shard.encode();
        fs::write(dir.join(name), &bytes)?;
        Ok(bytes.len() as u64)
    }

    fn read_object(&self, level: u8, epoch: u32, name: &str) -> Option<EncodedShard> {
        let bytes = fs::read(epoch_dir(&self.root, level, epoch).join(name)).ok()?;
        let shard = EncodedShard::decode(&bytes).ok()?;
        (shard.header.epoch == epoch && shard.header.level == level).then_some(shard)
    }

    /// Bytes of node-local storage held by process `p`.
    pub fn usage(&self, p: ProcessId) -> u64 {
        let mut total = 0;
        for level in 1..=3u8 {
            for e in list_epochs(&self.root.join(format!("l{level}"))) {
                let Ok(entries) = fs::read_dir(epoch_dir(&self.root, level, e)) else {
                    continue;
                };
                for f in entries.flatten() {
                    let held = f.file_name().to_str().and_then(holder_of);
                    if held.and_then(|r| self.owner.get(r)) == Some(&p) {
                        total += f.metadata().map(|m| m.len()).unwrap_or(0);
                    }
                }
            }
        }
        total
    }

    /// Collective checkpoint of every application rank at `level`.
    pub fn checkpoint(
        &mut self,
        rt: &mut Runtime,
        level: CkptLevel,
    ) -> Result<CheckpointReport, MlError> {
        let GroupConfig { k, m, .. } = self.opts.group;
        let cost = rt.cost().clone();
        let n = self.world.len();
        let epoch = self.next_epoch;
        let blobs: Vec<Vec<u8>> = (0..n).map(|r| self.blob(r)).collect();
        let region_bytes: Vec<u64> = (0..n)
            .map(|r| {
                self.regions
                    .get(&r)
                    .map_or(0, |m| m.values().map(|x| x.len() as u64).sum())
            })
            .collect();
        let lens: Vec<u64> = blobs.iter().map(|b| b.len() as u64).collect();

        // plan every object first so quota and backlog failures write nothing
        let mut objects: Vec<(u8, String, TaskRank, EncodedShard)> = Vec::new();
        let mut jobs: Vec<(Ticks, Ticks)> = vec![(0, 0); n];
        for r in 0..n {
            let (g, i) = self.group_of(r);
            let s = EncodedShard::new(1, i as u8, g as u16, epoch, lens[r], blobs[r].clone());
            objects.push((1, blob_name(r), r, s));
        }
        match level {
            CkptLevel::L1 => {}
            CkptLevel::L2 => {
                for r in 0..n {
                    let (g, i) = self.group_of(r);
                    let h = self.partner(r).ok_or_else(|| {
                        MlError::Config("partner copies need at least two ranks".into())
                    })?;
                    let s =
                        EncodedShard::new(2, i as u8, g as u16, epoch, lens[r], blobs[r].clone());
                    objects.push((2, shard_name(h, i), h, s));
                    jobs[r] = (
                        cost.net_per_byte * lens[r],
                        cost.local_write_per_byte * lens[r],
                    );
                }
            }
            CkptLevel::L3 => {
                for g in 0..n / k {
                    let members: Vec<TaskRank> = (g * k..(g + 1) * k).collect();
                    let width = members.iter().map(|&r| blobs[r].len()).max().unwrap_or(0);
                    let padded: Vec<Vec<u8>> = members
                        .iter()
                        .map(|&r| {
                            let mut b = blobs[r].clone();
                            b.resize(width, 0);
                            b
                        })
                        .collect();
                    let refs: Vec<&[u8]> = padded.iter().map(Vec::as_slice).collect();
                    let parity = rs_encode(&refs, m)?;
                    for (j, (p, h)) in parity.into_iter().zip(self.parity_holders(g)).enumerate() {
                        let s =
                            EncodedShard::new(3, (k + j) as u8, g as u16, epoch, width as u64, p);
                        objects.push((3, shard_name(h, k + j), h, s));
                    }
                    let w = width as u64;
                    let share = (w * m as u64).div_ceil(k as u64);
                    for &r in &members {
                        jobs[r] = (
                            cost.encode_per_byte * w,
                            (cost.net_per_byte + cost.local_write_per_byte) * share,
                        );
                    }
                }
            }
            CkptLevel::L4 => {
                for r in 0..n {
                    let (g, i) = self.group_of(r);
                    let s =
                        EncodedShard::new(4, i as u8, g as u16, epoch, lens[r], blobs[r].clone());
                    objects.push((4, blob_name(r), r, s));
                    jobs[r] = (0, cost.pfs_per_byte * lens[r]);
                }
            }
        }

        let helper_mode = self.opts.mode == HelperMode::HelperTask;
        if helper_mode {
            let mut per_proc: BTreeMap<ProcessId, usize> = BTreeMap::new();
            for (r, &(c, io)) in jobs.iter().enumerate() {
                if c + io > 0 {
                    *per_proc.entry(self.owner[r]).or_default() += 1;
                }
            }
            for (p, count) in per_proc {
                let h = rt.helper(p).expect("helper attached at init");
                if h.pending() + count > h.max_depth() {
                    return Err(MlError::HelperBacklog {
                        process: p,
                        depth: h.pending(),
                    });
                }
            }
        }

        if let Some(quota) = self.opts.quota {
            let mut add: BTreeMap<ProcessId, u64> = BTreeMap::new();
            for (lvl, _, holder, s) in &objects {
                if *lvl < 4 {
                    *add.entry(self.owner[*holder]).or_default() +=
                        (SHARD_HEADER_LEN + s.payload.len()) as u64;
                }
            }
            for (p, extra) in add {
                let need = self.usage(p) + extra;
                if need > quota {
                    return Err(MlError::StorageFull {
                        process: p,
                        need,
                        quota,
                    });
                }
            }
        }
        let mut bytes_written = 0;
        for (lvl, name, _, s) in &objects {
            bytes_written += self.write_object(*lvl, epoch, name, s)?;
        }
        let mut blocked = BTreeMap::new();
        let mut offloaded = 0;
        for (r, &(c, io)) in jobs.iter().enumerate() {
            let local = cost.local_write_per_byte * region_bytes[r];
            let b = if helper_mode {
                if c + io > 0 {
                    let p = self.owner[r];
                    rt.helper_mut(p)
                        .expect("helper attached at init")
                        .enqueue(c, io)
                        .map_err(|e| MlError::HelperBacklog {
                            process: p,
                            depth: e.depth,
                        })?;
                    offloaded += c + io;
                }
                local
            } else {
                local + c + io
            };
            rt.advance(r, b)?;
            blocked.insert(r, b);
        }
        self.next_epoch += 1;
        Ok(CheckpointReport {
            epoch,
            level,
            blocked,
            offloaded,
            bytes_written,
        })
    }

    /// Epochs on storage with their level, newest first.
    pub fn epochs(&self) -> Vec<(u32, CkptLevel)> {
        let mut by_epoch: BTreeMap<u32, CkptLevel> = BTreeMap::new();
        for l in CkptLevel::ALL {
            for e in list_epochs(&self.root.join(format!("l{}", l.as_u8()))) {
                let slot = by_epoch.entry(e).or_insert(l);
                *slot = (*slot).max(l);
            }
        }
        by_epoch.into_iter().rev().collect()
    }

    /// Marks a process as failed and drops everything its node-local storage
    /// held. The shared store survives.
    pub fn fail_process(&self, rt: &mut Runtime, p: ProcessId) -> Result<usize, MlError> {
        rt.kill(p);
        self.lose_storage(p)
    }

    pub fn lose_storage(&self, p: ProcessId) -> Result<usize, MlError> {
        let mut removed = 0;
        for level in 1..=3u8 {
            for e in list_epochs(&self.root.join(format!("l{level}"))) {
                let Ok(entries) = fs::read_dir(epoch_dir(&self.root, level, e)) else {
                    continue;
                };
                for f in entries.flatten() {
                    let held = f.file_name().to_str().and_then(holder_of);
                    if held.and_then(|r| self.owner.get(r)) == Some(&p) {
                        fs::remove_file(f.path())?;
                        removed += 1;
                    }
                }
            }
        }
        Ok(removed)
    }

    /// Restores every protected region from the newest epoch at `level` or
    /// above that can be rebuilt, trying older epochs when a newer one cannot.
    pub fn recover(&mut self, rt: &mut Runtime, level: CkptLevel) -> Result<Recovery, MlError> {
        let mut reasons = Vec::new();
        for (epoch, lvl) in self.epochs().into_iter().filter(|&(_, l)| l >= level) {
            match self.rebuild_epoch(epoch, lvl) {
                Ok((blobs, sources, ticks)) => {
                    let mut restored = BTreeMap::new();
                    for (r, blob) in blobs.iter().enumerate() {
                        let regions = deserialize_regions(blob).map_err(|e| {
                            MlError::Unrecoverable(format!("rank {r} epoch {epoch}: {e}"))
                        })?;
                        restored.insert(r, regions);
                    }
                    for (&r, regions) in &restored {
                        let mine = self.regions.entry(r).or_default();
                        if !mine.is_empty() && mine.keys().ne(regions.keys()) {
                            return Err(MlError::Unrecoverable(format!(
                                "rank {r} protects regions {:?}, epoch {epoch} holds {:?}",
                                mine.keys().collect::<Vec<_>>(),
                                regions.keys().collect::<Vec<_>>()
                            )));
                        }
                    }
                    for (r, regions) in restored {
                        self.regions.insert(r, regions);
                        rt.advance(r, ticks[r])?;
                    }
                    return Ok(Recovery {
                        epoch,
                        level: lvl,
                        sources,
                    });
                }
                Err(why) => reasons.push(why),
            }
        }
        if reasons.is_empty() {
            reasons.push(format!("no checkpoint at level {} or above", level.as_u8()));
        }
        Err(MlError::Unrecoverable(reasons.join("; ")))
    }

    #[allow(clippy::type_complexity)]
    fn rebuild_epoch(
        &self,
        epoch: u32,
        level: CkptLevel,
    ) -> Result<(Vec<Vec<u8>>, BTreeMap<TaskRank, Source>, Vec<Ticks>), String> {
        let GroupConfig { k, m, .. } = self.opts.group;
        let n = self.world.len();
        let mut blobs: Vec<Option<Vec<u8>>> = vec![None; n];
        let mut sources = BTreeMap::new();
        let mut ticks = vec![0; n];
        for r in 0..n {
            if let Some(s) = self.read_object(1, epoch, &blob_name(r)) {
                let len = s.header.orig_len as usize;
                ticks[r] = len as Ticks;
                blobs[r] = Some(s.payload[..len.min(s.payload.len())].to_vec());
                sources.insert(r, Source::Local);
            }
        }
        for g in 0..n / k {
            let members: Vec<TaskRank> = (g * k..(g + 1) * k).collect();
            let missing: Vec<TaskRank> = members
                .iter()
                .copied()
                .filter(|&r| blobs[r].is_none())
                .collect();
            if missing.is_empty() {
                continue;
            }
            match level {
                CkptLevel::L1 => {}
                CkptLevel::L2 => {
                    for &r in &missing {
                        let (_, i) = self.group_of(r);
                        let Some(h) = self.partner(r) else { continue };
                        if let Some(s) = self.read_object(2, epoch, &shard_name(h, i)) {
                            ticks[r] = 2 * s.payload.len() as Ticks;
                            blobs[r] = Some(s.payload);
                            sources.insert(r, Source::Partner);
                        }
                    }
                }
                CkptLevel::L3 => {
                    let parity: Vec<(usize, EncodedShard)> = self
                        .parity_holders(g)
                        .into_iter()
                        .enumerate()
                        .filter_map(|(j, h)| {
                            self.read_object(3, epoch, &shard_name(h, k + j))
                                .map(|s| (k + j, s))
                        })
                        .collect();
                    if let Some((_, first)) = parity.first() {
                        let width = first.header.orig_len as usize;
                        let data: Vec<(usize, Vec<u8>)> = members
                            .iter()
                            .enumerate()
                            .filter_map(|(i, &r)| {
                                blobs[r].as_ref().map(|b| {
                                    let mut p = b.clone();
                                    p.resize(width, 0);
                                    (i, p)
                                })
                            })
                            .collect();
                        let shards: Vec<(usize, &[u8])> = data
                            .iter()
                            .map(|(i, b)| (*i, b.as_slice()))
                            .chain(parity.iter().map(|(i, s)| (*i, s.payload.as_slice())))
                            .collect();
                        if let Ok(decoded) = rs_decode(&shards, k, m) {
                            for &r in &missing {
                                let (_, i) = self.group_of(r);
                                ticks[r] = 2 * width as Ticks;
                                blobs[r] = Some(decoded[i].clone());
                                sources.insert(r, Source::ErasureCode);
                            }
                        }
                    }
                }
                CkptLevel::L4 => {
                    for &r in &missing {
                        if let Some(s) = self.read_object(4, epoch, &blob_name(r)) {
                            ticks[r] = 4 * s.payload.len() as Ticks;
                            blobs[r] = Some(s.payload);
                            sources.insert(r, Source::SharedStore);
                        }
                    }
                }
            }
            let lost: Vec<TaskRank> = members
                .iter()
                .copied()
                .filter(|&r| blobs[r].is_none())
                .collect();
            if !lost.is_empty() {
                return Err(format!(
                    "epoch {epoch} (L{}): group {g} cannot rebuild ranks {lost:?}",
                    level.as_u8()
                ));
            }
        }
        Ok((
            blobs.into_iter().map(Option::unwrap).collect(),
            sources,
            ticks,
        ))
    }

    /// Runs whatever redundancy work helpers still hold once the application
    /// has finished. Returns the tick at which the last helper is done.
    pub fn drain_helpers(&self, rt: &mut Runtime) -> Ticks {
        let mut end = 0;
        for p in 0..rt.n_processes() {
            let app_end = rt
                .tasks_of(p)
                .iter()
                .map(|t| t.clock.now())
                .max()
                .unwrap_or(0);
            if let Some(h) = rt.helper_mut(p) {
                end = end.max(h.drain(app_end));
            }
        }
        end
    }
}
