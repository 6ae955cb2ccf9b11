use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::image::{EndpointRecord, ProcessImage, RailSection, TaskRecord, IMAGE_VERSION};
use super::manifest::Manifest;
use super::{CkptError, CkptState};
use crate::config::{JobSpec, NetConfig};
use crate::multirail::{Event, NetError, ProcessId, RailId, Runtime, RuntimeOptions, TaskRank};
use crate::sched::{TaskKind, Ticks};
use crate::signaling::{ControlKind, ControlMessage};

/// Application state hook: each task's state as an opaque blob.
pub trait Snapshot {
    fn save(&self, rank: TaskRank) -> Vec<u8>;

    /// Extra `key=value` pairs recorded in the manifest as `app.<key>`.
    fn params(&self) -> BTreeMap<String, String> {
        BTreeMap::new()
    }
}

impl<F: Fn(TaskRank) -> Vec<u8>> Snapshot for F {
    fn save(&self, rank: TaskRank) -> Vec<u8> {
        self(rank)
    }
}

#[derive(Debug, Clone)]
pub struct CkptOutcome {
    pub epoch: u64,
    /// The value every application task returned.
    pub state: CkptState,
    pub per_task: BTreeMap<TaskRank, CkptState>,
    pub manifest: Option<PathBuf>,
    pub images: Vec<PathBuf>,
    /// Latest task clock before and after the collective.
    pub started: Ticks,
    pub finished: Ticks,
    pub detail: Option<String>,
}

impl CkptOutcome {
    pub fn ticks(&self) -> Ticks {
        self.finished - self.started
    }
}

fn epoch_dir(rt: &Runtime, epoch: u64) -> PathBuf {
    rt.job
        .ckpt_dir
        .join(&rt.opts.job_id)
        .join(format!("epoch-{epoch}"))
}

fn app_ranks(rt: &Runtime, p: ProcessId) -> Vec<TaskRank> {
    rt.procs[p]
        .tasks
        .iter()
        .filter(|t| t.kind == TaskKind::App)
        .map(|t| t.rank)
        .collect()
}

fn encode_counters(rt: &Runtime, p: ProcessId, out: &mut Vec<u8>) {
    for &c in rt.procs[p].sent_to.iter().chain(&rt.procs[p].recv_from) {
        out.extend_from_slice(&c.to_le_bytes());
    }
}

/// Checks that every message sent from `p` to `q` was received by `q`.
fn check_quiescence(n: usize, payload: &[u8]) -> Result<(), String> {
    let words: Vec<u64> = payload
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if words.len() != 2 * n * n {
        return Err(format!(
            "token carries {} counters, expected {}",
            words.len(),
            2 * n * n
        ));
    }
    let sent = |p: usize, q: usize| words[p * 2 * n + q];
    let recv = |q: usize, p: usize| words[q * 2 * n + n + p];
    for p in 0..n {
        for q in 0..n {
            if sent(p, q) != recv(q, p) {
                return Err(format!(
                    "process {p} sent {} messages to {q}, which received {}",
                    sent(p, q),
                    recv(q, p)
                ));
            }
        }
    }
    Ok(())
}

/// Collective checkpoint of every application task.
///
/// Runs the per-process barrier, the token-ring barrier with its quiescence
/// check, closes non-checkpointable rails, writes one image per process plus
/// the manifest, and reopens the rails. Failures are reported through
/// [`CkptState::Error`] on every task; no files are left behind.
pub fn checkpoint_collective(rt: &mut Runtime, app: &dyn Snapshot) -> CkptOutcome {
    let wall = Instant::now();
    let n = rt.procs.len();
    let all_ranks: Vec<TaskRank> = (0..n).flat_map(|p| app_ranks(rt, p)).collect();
    let started = all_ranks
        .iter()
        .map(|&r| rt.clock(r).unwrap_or(0))
        .max()
        .unwrap_or(0);
    let mut out = CkptOutcome {
        epoch: rt.epoch,
        state: CkptState::Ignore,
        per_task: BTreeMap::new(),
        manifest: None,
        images: Vec::new(),
        started,
        finished: started,
        detail: None,
    };
    if !rt.opts.checkpointing {
        return finish(rt, out, &all_ranks, CkptState::Ignore, None);
    }
    let epoch = rt.epoch + 1;
    out.epoch = epoch;
    match run_protocol(rt, app, epoch, &mut out, wall) {
        Ok(end) => {
            rt.epoch = epoch;
            out.finished = end;
            finish(rt, out, &all_ranks, CkptState::Checkpoint, None)
        }
        Err((end, detail)) => {
            let _ = std::fs::remove_dir_all(epoch_dir(rt, epoch));
            out.images.clear();
            out.manifest = None;
            out.finished = end.max(started);
            finish(rt, out, &all_ranks, CkptState::Error, Some(detail))
        }
    }
}

fn finish(
    rt: &mut Runtime,
    mut out: CkptOutcome,
    ranks: &[TaskRank],
    state: CkptState,
    detail: Option<String>,
) -> CkptOutcome {
    for &r in ranks {
        if let Ok((p, i)) = rt.slot_index(r) {
            rt.procs[p].tasks[i].clock.advance_to(out.finished);
        }
        out.per_task.insert(r, state);
        rt.events.push(Event::CkptReturn {
            epoch: out.epoch,
            task: r,
            state,
        });
    }
    out.state = state;
    out.detail = detail;
    out
}

type Failure = (Ticks, String);

fn run_protocol(
    rt: &mut Runtime,
    app: &dyn Snapshot,
    epoch: u64,
    out: &mut CkptOutcome,
    wall: Instant,
) -> Result<Ticks, Failure> {
    let n = rt.procs.len();
    let mut rng =
        ChaCha8Rng::seed_from_u64(rt.job.seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));

    // first level: tasks of a process meet; the first to arrive is the master
    let mut masters = Vec::with_capacity(n);
    let mut local_done = Vec::with_capacity(n);
    for p in 0..n {
        if !rt.procs[p].alive {
            return Err((out.started, NetError::PeerFailed(p).to_string()));
        }
        let mut arrivals = app_ranks(rt, p);
        arrivals.shuffle(&mut rng);
        // stable: equal clocks keep the shuffled order
        arrivals.sort_by_key(|&r| rt.clock(r).unwrap_or(0));
        for &r in &arrivals {
            rt.events.push(Event::CkptArrive {
                epoch,
                process: p,
                task: r,
            });
        }
        let master = arrivals[0];
        rt.events.push(Event::CkptMaster {
            epoch,
            process: p,
            task: master,
        });
        masters.push(master);
        let done = arrivals
            .iter()
            .map(|&r| rt.clock(r).unwrap_or(0))
            .max()
            .unwrap_or(0);
        local_done.push(done + rt.cost().ctx_switch);
    }

    // second level: gather counters around the ring to process 0
    let ttl = rt.default_ttl();
    let mut t = local_done[0];
    let mut token = Vec::new();
    encode_counters(rt, 0, &mut token);
    if n > 1 {
        for hop in 1..=n {
            let (from, to) = (hop - 1, hop % n);
            let d = rt
                .deliver_control(ControlMessage::new(
                    ControlKind::BarrierToken,
                    from,
                    to,
                    ttl,
                    token,
                ))
                .map_err(|e| (t, e.to_string()))?;
            rt.events.push(Event::BarrierToken {
                epoch,
                release: false,
                from,
                to,
            });
            token = d.message.payload;
            t = (t + d.ticks).max(local_done[to]);
            if to != 0 {
                encode_counters(rt, to, &mut token);
            }
        }
    }
    let verdict = check_quiescence(n, &token);
    if let Err(detail) = &verdict {
        rt.events.push(Event::QuiescenceFailed {
            epoch,
            detail: detail.clone(),
        });
    }
    // release broadcast carries the verdict
    for to in 1..n {
        let d = rt
            .deliver_control(ControlMessage::new(
                ControlKind::BarrierToken,
                to - 1,
                to,
                ttl,
                vec![verdict.is_ok() as u8],
            ))
            .map_err(|e| (t, e.to_string()))?;
        rt.events.push(Event::BarrierToken {
            epoch,
            release: true,
            from: to - 1,
            to,
        });
        t += d.ticks;
    }
    verdict.map_err(|d| (t, d))?;

    // rails that cannot be saved are closed before anything is written
    let closed: Vec<String> = rt
        .rails
        .iter()
        .filter(|r| !r.checkpointable)
        .map(|r| r.name.clone())
        .collect();
    for name in &closed {
        rt.close_rail(name).map_err(|e| (t, e.to_string()))?;
    }

    let dir = epoch_dir(rt, epoch);
    std::fs::create_dir_all(&dir).map_err(|e| (t, e.to_string()))?;
    let mut end = t;
    let mut images = Vec::with_capacity(n);
    for p in 0..n {
        let image = build_image(rt, app, p, epoch, t);
        for s in &image.rails {
            debug_assert!(rt
                .rails
                .iter()
                .any(|r| r.name == s.rail && r.checkpointable));
        }
        let bytes = image.encode();
        let name = format!("rank-{p}.img");
        let path = dir.join(&name);
        write_atomic(&path, &bytes).map_err(|e| (t, format!("{}: {e}", path.display())))?;
        rt.events.push(Event::ImageWritten {
            epoch,
            process: p,
            task: masters[p],
            path: path.clone(),
        });
        end = end.max(t + rt.cost().local_write_per_byte * bytes.len() as u64);
        images.push(name);
        out.images.push(path);
    }

    let manifest = Manifest {
        job_id: rt.opts.job_id.clone(),
        epoch,
        n_processes: n,
        tasks_per_process: rt.job.tasks_per_process,
        lanes_per_process: rt.job.lanes_per_process,
        seed: rt.job.seed,
        net_option: rt.job.net_option.clone(),
        config_sha256: rt
            .job
            .config_hash(&rt.net)
            .map_err(|e| (end, e.to_string()))?,
        cost: rt.job.cost_model.clone(),
        images,
        virtual_ticks: end,
        wall_ms: wall.elapsed().as_millis(),
        app: app.params(),
    };
    let mpath = dir.join("manifest.txt");
    write_atomic(&mpath, manifest.to_text().as_bytes()).map_err(|e| (end, e.to_string()))?;
    rt.events.push(Event::ManifestWritten {
        epoch,
        path: mpath.clone(),
    });
    out.manifest = Some(mpath);
    prune_epochs(&dir, epoch);

    for name in &closed {
        rt.reopen_rail(name).map_err(|e| (end, e.to_string()))?;
    }
    Ok(end)
}

fn build_image(
    rt: &Runtime,
    app: &dyn Snapshot,
    p: ProcessId,
    epoch: u64,
    now: Ticks,
) -> ProcessImage {
    let ps = &rt.procs[p];
    let tasks = ps
        .tasks
        .iter()
        .map(|t| TaskRecord {
            rank: t.rank as u64,
            kind: t.kind,
            state: t.state,
            clock: now.max(t.clock.now()),
            blob: match t.kind {
                TaskKind::App => app.save(t.rank),
                TaskKind::Helper => Vec::new(),
            },
        })
        .collect();
    let rails = rt
        .rails
        .iter()
        .enumerate()
        .filter(|(_, r)| r.checkpointable)
        .map(|(i, r)| RailSection {
            rail: r.name.clone(),
            endpoints: ps
                .table
                .iter()
                .filter(|e| e.rail == RailId(i))
                .map(|e| EndpointRecord {
                    remote: e.remote as u64,
                    state: e.state,
                    origin: e.origin,
                    seq: e.seq,
                    conn_info: e.conn_info.clone(),
                })
                .collect(),
        })
        .collect();
    ProcessImage {
        version: IMAGE_VERSION,
        epoch,
        process: p as u64,
        tasks,
        rails,
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)
}

/// Keeps the two most recent epochs.
fn prune_epochs(current: &Path, epoch: u64) {
    let Some(job_dir) = current.parent() else {
        return;
    };
    let Ok(entries) = std::fs::read_dir(job_dir) else {
        return;
    };
    for e in entries.flatten() {
        let name = e.file_name();
        let Some(k) = name
            .to_str()
            .and_then(|s| s.strip_prefix("epoch-"))
            .and_then(|s| s.parse::<u64>().ok())
        else {
            continue;
        };
        if k + 2 <= epoch {
            let _ = std::fs::remove_dir_all(e.path());
        }
    }
}

/// A job brought back from a manifest.
pub struct Restored {
    pub runtime: Runtime,
    pub manifest: Manifest,
    /// Application blobs by task rank.
    pub blobs: BTreeMap<TaskRank, Vec<u8>>,
    /// What every task observes on return from the checkpoint call.
    pub per_task: BTreeMap<TaskRank, CkptState>,
}

/// Recreates a job from `manifest_path`. Ring rails are bootstrapped afresh,
/// endpoints of checkpointable rails come back from the images, and routes on
/// other rails are left to reconnect on demand.
///
/// `expected`, when given, must describe the same job shape and configuration.
pub fn restore(
    manifest_path: &Path,
    net: &NetConfig,
    expected: Option<&JobSpec>,
    opts: RuntimeOptions,
) -> Result<Restored, CkptError> {
    let manifest = Manifest::read(manifest_path)?;
    let epoch_dir = manifest_path.parent().unwrap_or(Path::new("."));
    let ckpt_dir = epoch_dir
        .parent()
        .and_then(Path::parent)
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let job = manifest.job_spec(ckpt_dir);
    let hash = job.config_hash(net)?;
    if hash != manifest.config_sha256 {
        return Err(CkptError::ConfigMismatch(format!(
            "config hash {hash} differs from manifest {}",
            manifest.config_sha256
        )));
    }
    if let Some(want) = expected {
        if want.n_processes != manifest.n_processes
            || want.config_hash(net)? != manifest.config_sha256
        {
            return Err(CkptError::ConfigMismatch(format!(
                "requested {want} but the checkpoint holds {}x{} tasks on `{}`",
                manifest.n_processes, manifest.tasks_per_process, manifest.net_option
            )));
        }
    }
    let images = manifest
        .images
        .iter()
        .enumerate()
        .map(|(p, name)| {
            let path = epoch_dir.join(name);
            let img = ProcessImage::read(&path)?;
            if img.process != p as u64 || img.epoch != manifest.epoch {
                return Err(CkptError::ConfigMismatch(format!(
                    "{} holds process {} epoch {}",
                    path.display(),
                    img.process,
                    img.epoch
                )));
            }
            Ok(img)
        })
        .collect::<Result<Vec<_>, _>>()?;

    let opts = RuntimeOptions {
        job_id: manifest.job_id.clone(),
        ..opts
    };
    let mut rt = Runtime::start(job, net.clone(), opts).map_err(|e| match e {
        crate::Error::Config(c) => CkptError::Config(c),
        crate::Error::Net(n) => CkptError::Net(n),
        other => CkptError::ConfigMismatch(other.to_string()),
    })?;
    rt.epoch = manifest.epoch;

    let mut blobs = BTreeMap::new();
    let mut per_task = BTreeMap::new();
    for (p, img) in images.into_iter().enumerate() {
        for section in &img.rails {
            let rail = rt.rail_id(&section.rail)?;
            if !rt.rails[rail.0].checkpointable {
                return Err(CkptError::ConfigMismatch(format!(
                    "image of process {p} holds routes of non-checkpointable rail `{}`",
                    section.rail
                )));
            }
            for e in &section.endpoints {
                rt.add_endpoint(p, rail, e.remote as usize, e.origin, e.conn_info.clone());
            }
        }
        for t in img.tasks.into_iter().filter(|t| t.kind == TaskKind::App) {
            let rank = t.rank as usize;
            let (pp, i) = rt.slot_index(rank)?;
            rt.procs[pp].tasks[i].clock.advance_to(t.clock);
            blobs.insert(rank, t.blob);
            per_task.insert(rank, CkptState::Restart);
            rt.events.push(Event::CkptReturn {
                epoch: manifest.epoch,
                task: rank,
                state: CkptState::Restart,
            });
        }
    }
    Ok(Restored {
        runtime: rt,
        manifest,
        blobs,
        per_task,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::multirail::RouteOrigin;

    fn job(dir: &Path, np: usize, tpp: usize, option: &str) -> JobSpec {
        let mut j = JobSpec::new(np, tpp, option);
        j.ckpt_dir = dir.to_path_buf();
        j.seed = 11;
        j
    }

    fn start(dir: &Path, np: usize, tpp: usize, option: &str) -> Runtime {
        Runtime::start(
            job(dir, np, tpp, option),
            NetConfig::builtin(),
            RuntimeOptions::default(),
        )
        .unwrap()
    }

    fn blob(rank: TaskRank) -> Vec<u8> {
        vec![rank as u8; 3 + rank]
    }

    #[test]
    fn four_by_two_writes_four_images_and_a_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let mut rt = start(dir.path(), 4, 2, "multirail_tcp");
        let out = checkpoint_collective(&mut rt, &blob);
        assert_eq!(out.state, CkptState::Checkpoint);
        assert_eq!(out.per_task.len(), 8);
        assert!(out.per_task.values().all(|&s| s == CkptState::Checkpoint));
        assert_eq!(out.images.len(), 4);
        let files: Vec<_> = std::fs::read_dir(dir.path().join("job/epoch-1"))
            .unwrap()
            .collect();
        assert_eq!(files.len(), 5);
        let writers: Vec<ProcessId> = rt
            .events()
            .iter()
            .filter_map(|e| match e {
                Event::ImageWritten { process, .. } => Some(*process),
                _ => None,
            })
            .collect();
        assert_eq!(writers, vec![0, 1, 2, 3]);
    }

    #[test]
    fn disabled_checkpointing_is_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let opts = RuntimeOptions {
            checkpointing: false,
            ..RuntimeOptions::default()
        };
        let mut rt =
            Runtime::start(job(dir.path(), 2, 1, "shm"), NetConfig::builtin(), opts).unwrap();
        let out = checkpoint_collective(&mut rt, &blob);
        assert_eq!(out.state, CkptState::Ignore);
        assert!(std::fs::read_dir(dir.path()).unwrap().next().is_none());
    }

    #[test]
    fn unmatched_message_fails_everywhere() {
        let dir = tempfile::tempdir().unwrap();
        let mut rt = start(dir.path(), 3, 1, "multirail_tcp");
        rt.send(0, 2, 5, vec![1, 2, 3]).unwrap();
        let out = checkpoint_collective(&mut rt, &blob);
        assert_eq!(out.state, CkptState::Error);
        assert!(out.per_task.values().all(|&s| s == CkptState::Error));
        assert!(!dir.path().join("job/epoch-1").exists());
        assert!(rt
            .events()
            .iter()
            .any(|e| matches!(e, Event::QuiescenceFailed { .. })));
        // the message is still deliverable and the next attempt succeeds
        rt.recv(2, Some(0), Some(5)).unwrap();
        assert_eq!(
            checkpoint_collective(&mut rt, &blob).state,
            CkptState::Checkpoint
        );
    }

    #[test]
    fn images_hold_only_checkpointable_routes() {
        let dir = tempfile::tempdir().unwrap();
        let mut rt = start(dir.path(), 6, 1, "ib_shm");
        rt.send(0, 3, 0, vec![0; 100]).unwrap();
        rt.recv(3, None, None).unwrap();
        let out = checkpoint_collective(&mut rt, &blob);
        assert_eq!(out.state, CkptState::Checkpoint);
        for path in &out.images {
            let img = ProcessImage::read(path).unwrap();
            assert!(img.rails.iter().all(|s| s.rail == "shm_ring"));
            assert_eq!(img.endpoint_count(), 2);
        }
        // mock RDMA state was released and routes come back lazily
        assert!((0..6).all(|p| rt.rdma_state(p, "rdma").is_none()));
        assert!(rt.rail_is_open("rdma").unwrap());
    }

    #[test]
    fn retention_keeps_two_epochs() {
        let dir = tempfile::tempdir().unwrap();
        let mut rt = start(dir.path(), 2, 1, "shm");
        for _ in 0..4 {
            assert_eq!(
                checkpoint_collective(&mut rt, &blob).state,
                CkptState::Checkpoint
            );
        }
        let mut names: Vec<String> = std::fs::read_dir(dir.path().join("job"))
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        names.sort();
        assert_eq!(names, vec!["epoch-3", "epoch-4"]);
    }

    #[test]
    fn restore_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rt = start(dir.path(), 4, 2, "shm");
        // dynamic route on a checkpointable rail survives in the image
        rt.send(0, 4, 0, vec![9]).unwrap();
        rt.recv(4, None, None).unwrap();
        let out = checkpoint_collective(&mut rt, &blob);
        let manifest = out.manifest.unwrap();
        let r = restore(
            &manifest,
            &NetConfig::builtin(),
            None,
            RuntimeOptions::default(),
        )
        .unwrap();
        assert_eq!(r.blobs.len(), 8);
        assert!((0..8).all(|k| r.blobs[&k] == blob(k)));
        assert!(r.per_task.values().all(|&s| s == CkptState::Restart));
        let shm = r.runtime.rail_id("shm_ring").unwrap();
        let ep = r.runtime.table(0).get(2, shm).unwrap();
        assert_eq!(ep.origin, RouteOrigin::Dynamic);
        assert_eq!(r.runtime.on_demand_connects(), 0);
        // tasks resume at the instant their image was taken
        let resumed = r.runtime.clock(0).unwrap();
        assert!(resumed > out.started && resumed < out.finished);
    }

    #[test]
    fn restore_errors() {
        let dir = tempfile::tempdir().unwrap();
        let mut rt = start(dir.path(), 3, 1, "multirail_tcp");
        let manifest = checkpoint_collective(&mut rt, &blob).manifest.unwrap();
        let net = NetConfig::builtin();
        let bigger = job(dir.path(), 4, 1, "multirail_tcp");
        assert!(matches!(
            restore(&manifest, &net, Some(&bigger), RuntimeOptions::default()),
            Err(CkptError::ConfigMismatch(_))
        ));
        let img = manifest.parent().unwrap().join("rank-1.img");
        let bytes = std::fs::read(&img).unwrap();
        std::fs::write(&img, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(
            restore(&manifest, &net, None, RuntimeOptions::default()),
            Err(CkptError::CrcMismatch(_))
        ));
        std::fs::remove_file(&img).unwrap();
        assert!(matches!(
            restore(&manifest, &net, None, RuntimeOptions::default()),
            Err(CkptError::MissingImage(_))
        ));
    }

    #[test]
    fn one_master_per_process_for_any_seed() {
        let dir = tempfile::tempdir().unwrap();
        for seed in 0..10 {
            let mut j = job(dir.path(), 3, 3, "shm");
            j.seed = seed;
            let mut rt =
                Runtime::start(j, NetConfig::builtin(), RuntimeOptions::default()).unwrap();
            rt.advance(4, 10).unwrap();
            checkpoint_collective(&mut rt, &blob);
            let masters: Vec<(ProcessId, TaskRank)> = rt
                .events()
                .iter()
                .filter_map(|e| match e {
                    Event::CkptMaster { process, task, .. } => Some((*process, *task)),
                    _ => None,
                })
                .collect();
            assert_eq!(masters.len(), 3);
            assert!(masters.iter().all(|&(p, t)| t / 3 == p));
            // task 4 arrived late, so it is never the master of process 1
            assert_ne!(masters[1].1, 4);
        }
    }
}
