//! Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any
//! criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use clap::Parser;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mcr::bench::{
    recover_heatdis, restart_heatdis, run_comm_bench, run_heatdis, CkptMode, CommConfig, FaultPlan,
    HeatdisConfig, Phase,
};
use mcr::ckpt::{checkpoint_collective, overhead, CkptState, Manifest, ProcessImage};
use mcr::cli::{execute, Cli};
use mcr::config::{JobSpec, NetConfig};
use mcr::multilevel::{
    fti_init, gf256, rs_decode, rs_encode, CkptLevel, GroupConfig, HelperMode, MlError,
    MultilevelOptions, RsError, Source,
};
use mcr::multirail::{Event, Runtime, RuntimeOptions};
use mcr::signaling::{greedy_path, RouteView};

type Check = Result<String, String>;

fn runtime(dir: &Path, np: usize, tpp: usize, net: &str, seed: u64) -> Runtime {
    let mut job = JobSpec::new(np, tpp, net);
    job.ckpt_dir = dir.to_path_buf();
    job.seed = seed;
    Runtime::start(job, NetConfig::builtin(), RuntimeOptions::default()).unwrap()
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn mcr(args: &[&str]) -> Result<String, String> {
    let cli = Cli::try_parse_from(std::iter::once("mcr").chain(args.iter().copied()))
        .map_err(|e| e.to_string())?;
    let mut out = Vec::new();
    execute(cli, &mut out).map_err(|e| e.to_string())?;
    Ok(String::from_utf8(out).unwrap())
}

fn criterion_1() -> Check {
    let out = mcr(&["budget", "--tc", "60", "--overhead", "0.01"])?;
    ensure(out == "tau_seconds=6000\n", || {
        format!("budget printed {out:?}")
    })?;
    let o = overhead(3600.0, 60.0, 6000.0).map_err(|e| e.to_string())?;
    ensure((o.ovh - 1.01).abs() <= 1e-12, || format!("Ovh = {}", o.ovh))?;
    Ok(format!("tau_seconds=6000, Ovh={}", o.ovh))
}

fn criterion_2() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let base = HeatdisConfig::new(64, 64, 100);
    let want = run_heatdis(&mut runtime(dir.path(), 4, 2, "ib_shm", 2), base.clone())
        .map_err(|e| e.to_string())?;

    let mut cfg = base;
    cfg.ckpt_mode = CkptMode::Transparent;
    cfg.ckpt_every = Some(50);
    cfg.fault = Some(FaultPlan::new(50, 0..4).unwrap());
    let mut job = JobSpec::new(4, 2, "ib_shm");
    job.ckpt_dir = dir.path().join("c2");
    job.seed = 2;
    let mut rt = Runtime::start(job, NetConfig::builtin(), RuntimeOptions::default()).unwrap();
    let halted = run_heatdis(&mut rt, cfg).map_err(|e| e.to_string())?;
    ensure(halted.halted && halted.step == 50, || {
        format!("job did not halt at step 50: {halted:?}")
    })?;
    drop(rt);
    let manifest = halted.last_manifest.ok_or("no manifest written")?;
    let (_, done) = restart_heatdis(&manifest, &NetConfig::builtin(), RuntimeOptions::default())
        .map_err(|e| e.to_string())?;
    ensure(done.step == 100, || {
        format!("restarted run stopped at {}", done.step)
    })?;
    ensure(done.digest == want.digest, || {
        format!(
            "digest {} != {}",
            hex::encode(done.digest),
            hex::encode(want.digest)
        )
    })?;
    Ok(format!("digest {}", &hex::encode(done.digest)[..16]))
}

fn criterion_3() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let mut seeds = ChaCha8Rng::seed_from_u64(3);
    for i in 0..50 {
        let seed = seeds.next_u64();
        let np = 2 + i % 4;
        let tpp = 1 + i % 3;
        let mut rt = runtime(&dir.path().join(format!("s{i}")), np, tpp, "ib_shm", seed);
        for r in 1..rt.n_app_tasks() {
            rt.send(r, 0, 7, vec![r as u8; 16]).unwrap();
            rt.recv(0, Some(r), Some(7)).unwrap();
        }
        rt.clear_events();
        let out = checkpoint_collective(&mut rt, &|r: usize| vec![r as u8]);
        ensure(out.state == CkptState::Checkpoint, || {
            format!("seed {seed}: {:?}", out.detail)
        })?;
        let mut writers: BTreeMap<usize, usize> = BTreeMap::new();
        let mut masters: BTreeMap<usize, usize> = BTreeMap::new();
        let mut returns = Vec::new();
        for e in rt.events() {
            match e {
                Event::ImageWritten { process, .. } => *writers.entry(*process).or_default() += 1,
                Event::CkptMaster { process, .. } => *masters.entry(*process).or_default() += 1,
                Event::CkptReturn { state, .. }
                    if !returns.contains(state) => {
                        returns.push(*state);
                    }
                _ => {}
            }
        }
        ensure((0..np).all(|p| writers.get(&p) == Some(&1)), || {
            format!("seed {seed}: image writers per process {writers:?}")
        })?;
        ensure((0..np).all(|p| masters.get(&p) == Some(&1)), || {
            format!("seed {seed}: masters per process {masters:?}")
        })?;
        ensure(returns.len() == 1 && out.per_task.len() == np * tpp, || {
            format!("seed {seed}: tasks returned {returns:?}")
        })?;
    }
    Ok("50 seeds, one writer per process, uniform state".into())
}

fn criterion_4() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let rt = runtime(dir.path(), 6, 2, "ib_shm", 4);
    let cfg = CommConfig {
        restart: true,
        ..CommConfig::default()
    };
    let (_, rep) = run_comm_bench(rt, &cfg).map_err(|e| e.to_string())?;

    let manifest_path = dir.path().join("job/epoch-1/manifest.txt");
    let manifest = Manifest::read(&manifest_path).map_err(|e| e.to_string())?;
    let net = NetConfig::builtin();
    let mut stale = 0;
    for name in &manifest.images {
        let img = ProcessImage::read(&manifest_path.parent().unwrap().join(name))
            .map_err(|e| e.to_string())?;
        for section in &img.rails {
            let spec = net
                .rail(&section.rail)
                .ok_or("image names an unknown rail")?;
            if !spec.checkpointable {
                stale += section.endpoints.len();
            }
        }
    }
    ensure(stale == 0, || {
        format!("{stale} non-checkpointable endpoints in images")
    })?;
    ensure(rep.census > 0, || {
        "no dynamic routes before the checkpoint".into()
    })?;
    ensure(rep.reconnects == rep.census as u64, || {
        format!("reconnects {} != census {}", rep.reconnects, rep.census)
    })?;
    for &size in &cfg.sizes {
        for peer in (1..6).map(|p| 2 * p) {
            let pre = rep.rtts(Phase::Pre, size, peer);
            let post = rep.rtts(Phase::Post, size, peer);
            ensure(!pre.is_empty() && pre == post, || {
                format!("size {size} peer {peer}: pre {pre:?} post {post:?}")
            })?;
        }
    }
    Ok(format!(
        "census {} == reconnects {}, 0 stale endpoints",
        rep.census, rep.reconnects
    ))
}

fn ring_view(n: usize) -> impl Fn(usize) -> RouteView {
    move |p| RouteView::ring(p, n)
}

fn criterion_5() -> Check {
    let mut mismatches = Vec::new();
    let mut pairs = 0u64;
    for n in 2..=64usize {
        for s in 0..n {
            for t in 0..n {
                if s == t {
                    continue;
                }
                pairs += 1;
                let path = greedy_path(s, t, n as u32, ring_view(n))
                    .map_err(|e| format!("ring-only route {s}->{t} (N={n}) failed: {e}"))?;
                if path.len() - 1 != s.abs_diff(t) {
                    mismatches.push((n, s, t, path.len() - 1));
                }
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for n in 2..=64usize {
        let mut adj: Vec<BTreeSet<usize>> =
            (0..n).map(|p| RouteView::ring(p, n).neighbors).collect();
        for _ in 0..20 {
            let a = rng.gen_range(0..n);
            let b = rng.gen_range(0..n);
            if a != b {
                adj[a].insert(b);
                adj[b].insert(a);
            }
        }
        for s in 0..n {
            for t in 0..n {
                if s == t {
                    continue;
                }
                let ring = greedy_path(s, t, n as u32, ring_view(n)).unwrap().len() - 1;
                let with = greedy_path(s, t, n as u32, |p| RouteView::new(adj[p].iter().copied()))
                    .map_err(|e| format!("shortcut route {s}->{t} (N={n}) failed: {e}"))?;
                ensure(with.len() - 1 <= ring, || {
                    format!(
                        "N={n} {s}->{t}: {} hops with shortcuts, {ring} on the ring",
                        with.len() - 1
                    )
                })?;
            }
        }
    }

    ensure(mismatches.is_empty(), || {
        let (n, s, t, h) = mismatches[0];
        format!(
            "ring-only hops differ from |s-t| for {} of {pairs} pairs, e.g. N={n} {s}->{t} takes {h} hops \
             over the wrap edge (shortcut part holds, no NoProgress)",
            mismatches.len()
        )
    })?;
    Ok(format!("{pairs} pairs"))
}

fn shift_xor_mul(mut a: u8, mut b: u8) -> u8 {
    let mut p = 0u8;
    while b != 0 {
        if b & 1 != 0 {
            p ^= a;
        }
        let carry = a & 0x80 != 0;
        a <<= 1;
        if carry {
            a ^= 0x1D;
        }
        b >>= 1;
    }
    p
}

fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    (0u32..1 << n)
        .filter(|m| m.count_ones() as usize == k)
        .map(|m| (0..n).filter(|i| m & (1 << i) != 0).collect())
        .collect()
}

fn criterion_6() -> Check {
    ensure(
        shift_xor_mul(0x02, 0x87) == 0x13 && gf256::mul(0x02, 0x87) == 0x13,
        || format!("0x02*0x87 = {:#04x}", gf256::mul(0x02, 0x87)),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut decodes = 0u64;
    for k in 1..=8usize {
        for m in 0..=8 - k {
            let survivor_sets = subsets(k + m, k);
            for _ in 0..100 {
                let len = rng.gen_range(1..=64);
                let data: Vec<Vec<u8>> = (0..k)
                    .map(|_| (0..len).map(|_| rng.gen()).collect())
                    .collect();
                let refs: Vec<&[u8]> = data.iter().map(Vec::as_slice).collect();
                let parity = rs_encode(&refs, m).map_err(|e| e.to_string())?;
                let all: Vec<&[u8]> = refs
                    .iter()
                    .copied()
                    .chain(parity.iter().map(Vec::as_slice))
                    .collect();
                for set in &survivor_sets {
                    let shards: Vec<(usize, &[u8])> = set.iter().map(|&i| (i, all[i])).collect();
                    let back = rs_decode(&shards, k, m).map_err(|e| e.to_string())?;
                    ensure(back == data, || {
                        format!("k={k} m={m} survivors {set:?} decode mismatch")
                    })?;
                    decodes += 1;
                }
                let short: Vec<(usize, &[u8])> = (0..k - 1).map(|i| (i, all[i])).collect();
                ensure(
                    matches!(
                        rs_decode(&short, k, m),
                        Err(RsError::InsufficientShards { .. })
                    ),
                    || format!("k={k} m={m}: decoding from k-1 shards did not fail"),
                )?;
            }
            multilevel_loss_beyond_parity(k, m)?;
        }
    }
    Ok(format!(
        "{decodes} decodes, m+1 losses unrecoverable for every (k, m)"
    ))
}

/// Loses `m + 1` holders of group 0's shards after an L3 checkpoint and
/// expects recovery to fail.
fn multilevel_loss_beyond_parity(k: usize, m: usize) -> Result<(), String> {
    let dir = tempfile::tempdir().unwrap();
    let n = k * (1 + m.div_ceil(k));
    let mut rt = runtime(dir.path(), n, 1, "shm", 0);
    let opts = MultilevelOptions {
        group: GroupConfig {
            k,
            m,
            partner_offset: 1,
        },
        ..MultilevelOptions::default()
    };
    let mut ml = fti_init(&mut rt, opts).map_err(|e| format!("k={k} m={m}: {e}"))?;
    for r in 0..n {
        ml.protect(r, 0, 1, vec![r as u8; 24]).unwrap();
    }
    ml.checkpoint(&mut rt, CkptLevel::L3)
        .map_err(|e| e.to_string())?;
    let holders: Vec<usize> = (0..k).chain(ml.parity_holders(0)).collect();
    for &p in holders.iter().take(m + 1) {
        ml.fail_process(&mut rt, p).unwrap();
    }
    ensure(
        matches!(
            ml.recover(&mut rt, CkptLevel::L1),
            Err(MlError::Unrecoverable(_))
        ),
        || format!("k={k} m={m}: losing {} shards was recoverable", m + 1),
    )
}

fn criterion_7() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let base = HeatdisConfig::new(64, 64, 100);
    let want = run_heatdis(
        &mut runtime(&dir.path().join("ref"), 8, 1, "shm", 7),
        base.clone(),
    )
    .map_err(|e| e.to_string())?
    .digest;
    let scenario = |name: &str, level: CkptLevel, victims: &[usize]| {
        let mut cfg = base.clone();
        cfg.ckpt_mode = CkptMode::App(level);
        cfg.ckpt_every = Some(40);
        cfg.group = GroupConfig::default();
        cfg.fault = Some(FaultPlan::new(60, victims.iter().copied()).unwrap());
        let mut job = JobSpec::new(8, 1, "shm");
        job.ckpt_dir = dir.path().join(name);
        job.seed = 7;
        let mut rt =
            Runtime::start(job.clone(), NetConfig::builtin(), RuntimeOptions::default()).unwrap();
        let halted = run_heatdis(&mut rt, cfg.clone()).map_err(|e| e.to_string())?;
        assert!(halted.halted);
        drop(rt);
        Ok::<_, String>(recover_heatdis(
            job,
            &NetConfig::builtin(),
            RuntimeOptions::default(),
            cfg,
            CkptLevel::L1,
        ))
    };
    let mut notes = Vec::new();
    for (name, level, victims, source) in [
        ("l2", CkptLevel::L2, &[1][..], Source::Partner),
        ("l3", CkptLevel::L3, &[0, 2][..], Source::ErasureCode),
        ("l4", CkptLevel::L4, &[0, 1, 2][..], Source::SharedStore),
    ] {
        let (_, rep, rec) = scenario(name, level, victims)?.map_err(|e| format!("{name}: {e}"))?;
        ensure(victims.iter().all(|v| rec.sources[v] == source), || {
            format!("{name}: sources {:?}", rec.sources)
        })?;
        ensure(rep.digest == want, || {
            format!("{name}: recovered digest differs")
        })?;
        notes.push(format!("{name} via {source:?}"));
    }
    match scenario("l3x3", CkptLevel::L3, &[0, 1, 2])? {
        Err(mcr::bench::BenchError::Multilevel(MlError::Unrecoverable(_))) => {}
        other => return Err(format!("3 losses after L3 gave {:?}", other.map(|r| r.2))),
    }
    notes.push("3 losses after L3 unrecoverable".into());
    Ok(notes.join(", "))
}

/// Task 0 (process 0) computes, checkpoints, sends a request to task 1
/// (process 1) and waits `blocked` ticks for the reply. The redundancy work
/// of one partner copy is `helper_work` ticks. Returns task 0's finish time,
/// the L1 cost and the measured blocked time.
fn oversubscription_schedule(
    mode: Option<(HelperMode, bool)>,
    helper_work: u64,
    blocked: u64,
) -> (u64, u64, u64) {
    let dir = tempfile::tempdir().unwrap();
    let mut rt = runtime(dir.path(), 2, 1, "shm", 8);
    let cost = rt.cost().clone();
    // a partner copy of an n-byte blob costs (net + write) * n; the blob is
    // the region plus a 4-byte count and a 16-byte region header
    let blob_len = helper_work / (cost.net_per_byte + cost.local_write_per_byte);
    let region_len = blob_len as usize - 4 - 16;
    // keeps task 1 idle long enough for its own helper to finish first
    rt.compute(0, 1000).unwrap();
    let mut l1 = 0;
    if let Some((helper, io_yield)) = mode {
        let opts = MultilevelOptions {
            group: GroupConfig {
                k: 1,
                m: 1,
                partner_offset: 1,
            },
            mode: helper,
            io_yield,
            ..MultilevelOptions::default()
        };
        let mut ml = fti_init(&mut rt, opts).unwrap();
        for r in 0..2 {
            ml.protect(r, 0, 1, vec![r as u8; region_len]).unwrap();
        }
        let rep = ml.checkpoint(&mut rt, CkptLevel::L2).unwrap();
        l1 = cost.local_write_per_byte * region_len as u64;
        let expect = if helper == HelperMode::Inline {
            l1 + helper_work
        } else {
            l1
        };
        assert_eq!(rep.blocked[&0], expect);
    }
    let transit = 10 + cost.net_per_byte;
    rt.send(0, 1, 0, vec![0]).unwrap();
    let sent = rt.clock(0).unwrap();
    rt.recv(1, Some(0), Some(0)).unwrap();
    assert_eq!(rt.clock(1).unwrap(), sent);
    rt.compute(1, blocked - transit).unwrap();
    rt.send(1, 0, 1, vec![0]).unwrap();
    rt.recv(0, Some(1), Some(1)).unwrap();
    let finish = rt.clock(0).unwrap();
    (finish, l1, finish - sent)
}

fn criterion_8() -> Check {
    let (b, w) = (200, 150);
    let (plain, _, blocked) = oversubscription_schedule(None, w, b);
    ensure(blocked == b, || {
        format!("constructed blocked time is {blocked}, not {b}")
    })?;
    let (helper, l1, _) = oversubscription_schedule(Some((HelperMode::HelperTask, true)), w, b);
    let (inline, _, _) = oversubscription_schedule(Some((HelperMode::Inline, true)), w, b);
    let (no_yield, _, _) = oversubscription_schedule(Some((HelperMode::HelperTask, false)), w, b);
    ensure(helper == plain + l1, || {
        format!("helper finish {helper} != {plain} + L1 {l1}")
    })?;
    ensure(helper < inline, || {
        format!("helper finish {helper} not below inline {inline}")
    })?;
    ensure(no_yield >= helper, || {
        format!("io_yield off finish {no_yield} below io_yield on {helper}")
    })?;
    Ok(format!(
        "plain {plain}, helper {helper} (L1 {l1}), inline {inline}, io_yield off {no_yield}"
    ))
}

fn criterion_9() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let runs: [&[&str]; 3] = [
        &[
            "--bench",
            "heatdis",
            "--net",
            "ib_shm",
            "--ckpt-mode",
            "transparent",
            "--ckpt-every",
            "30",
        ],
        &[
            "--bench",
            "heatdis",
            "--np",
            "8",
            "--tasks-per-proc",
            "1",
            "--ckpt-mode",
            "l3",
            "--ckpt-every",
            "25",
            "--helper",
        ],
        &[
            "--bench",
            "comm",
            "--np",
            "4",
            "--net",
            "multirail_tcp",
            "--ckpt-mode",
            "transparent",
        ],
    ];
    let reports = [
        "heatdis.csv",
        "overhead.csv",
        "comm.csv",
        "comm_summary.csv",
    ];
    for (i, extra) in runs.iter().enumerate() {
        let mut first: Option<(BTreeMap<String, Vec<u8>>, String)> = None;
        for rep in 0..10 {
            let out = dir.path().join(format!("run{i}-{rep}"));
            let out_s = out.to_str().unwrap();
            let mut args = vec!["run", "--seed", "42", "--out", out_s];
            args.extend_from_slice(extra);
            let stdout = mcr(&args)?;
            let digest = stdout
                .lines()
                .find(|l| l.starts_with("digest="))
                .unwrap_or("")
                .to_string();
            let files: BTreeMap<String, Vec<u8>> = reports
                .iter()
                .filter_map(|f| std::fs::read(out.join(f)).ok().map(|b| (f.to_string(), b)))
                .collect();
            ensure(!files.is_empty(), || format!("run {i} wrote no reports"))?;
            match &first {
                None => first = Some((files, digest)),
                Some((f0, d0)) => {
                    ensure(f0 == &files && d0 == &digest, || {
                        format!("run {i} repetition {rep} differs")
                    })?;
                }
            }
        }
    }
    Ok("3 configurations x 10 repetitions byte-identical".into())
}

fn main() {
    let criteria: [(u32, &str, fn() -> Check, u64); 9] = [
        (1, "budget algebra", criterion_1, 1),
        (2, "transparent restart equivalence", criterion_2, 30),
        (3, "two-level protocol", criterion_3, 60),
        (4, "rail-closing semantics", criterion_4, 30),
        (5, "routing", criterion_5, 60),
        (6, "erasure coding", criterion_6, 120),
        (7, "multilevel recovery", criterion_7, 60),
        (8, "oversubscription property", criterion_8, 10),
        (9, "determinism", criterion_9, 60),
    ];
    let only: Option<u32> = std::env::args().skip(1).find_map(|a| a.parse().ok());
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (n, name, f, budget) in criteria {
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let t = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let elapsed = t.elapsed();
        let result = match result {
            Ok(msg) if elapsed > Duration::from_secs(budget) => Err(format!(
                "{msg}; took {:.1}s, budget {budget}s",
                elapsed.as_secs_f64()
            )),
            r => r,
        };
        match result {
            Ok(msg) => println!(
                "criterion {n} ({name}): PASS [{:.2}s] {msg}",
                elapsed.as_secs_f64()
            ),
            Err(msg) => {
                failed += 1;
                println!(
                    "criterion {n} ({name}): FAIL [{:.2}s] {msg}",
                    elapsed.as_secs_f64()
                );
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
