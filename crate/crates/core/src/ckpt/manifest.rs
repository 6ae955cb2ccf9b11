//! Job-level restart metadata: one `key=value` pair per line.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::CkptError;
use crate::config::JobSpec;
use crate::sched::CostModel;

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub job_id: String,
    pub epoch: u64,
    pub n_processes: usize,
    pub tasks_per_process: usize,
    pub lanes_per_process: usize,
    pub seed: u64,
    pub net_option: String,
    pub config_sha256: String,
    pub cost: CostModel,
    /// Image file names relative to the manifest, indexed by process.
    pub images: Vec<String>,
    pub virtual_ticks: u64,
    /// Logged only; carries no meaning for restart.
    pub wall_ms: u128,
    /// Application parameters, written as `app.<key>`.
    pub app: BTreeMap<String, String>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let c = &self.cost;
        let mut lines = vec![
            format!("job_id={}", self.job_id),
            format!("epoch={}", self.epoch),
            format!("n_processes={}", self.n_processes),
            format!("tasks_per_process={}", self.tasks_per_process),
            format!("lanes_per_process={}", self.lanes_per_process),
            format!("seed={}", self.seed),
            format!("net_option={}", self.net_option),
            format!("config_sha256={}", self.config_sha256),
            format!("cost.compute_tick={}", c.compute_tick),
            format!("cost.net_per_byte={}", c.net_per_byte),
            format!("cost.local_write_per_byte={}", c.local_write_per_byte),
            format!("cost.encode_per_byte={}", c.encode_per_byte),
            format!("cost.ctx_switch={}", c.ctx_switch),
            format!("cost.pfs_per_byte={}", c.pfs_per_byte),
            format!(
                "cost.process_switch_multiplier={}",
                c.process_switch_multiplier
            ),
            format!("virtual_ticks={}", self.virtual_ticks),
            format!("wall_ms={}", self.wall_ms),
        ];
        for (i, img) in self.images.iter().enumerate() {
            lines.push(format!("image.{i}={img}"));
        }
        for (k, v) in &self.app {
            lines.push(format!("app.{k}={v}"));
        }
        let mut s = lines.join("\n");
        s.push('\n');
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self, CkptError> {
        let malformed = |msg: String| CkptError::Malformed {
            what: path.display().to_string(),
            msg,
        };
        let mut kv = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| malformed(format!("line {} has no `=`", n + 1)))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| {
            kv.get(k)
                .cloned()
                .ok_or_else(|| malformed(format!("missing key `{k}`")))
        };
        fn num<T: std::str::FromStr>(k: &str, v: String) -> Result<T, String> {
            v.parse().map_err(|_| format!("`{k}` is not a number: {v}"))
        }
        let n = |k: &str| -> Result<u64, CkptError> { num(k, get(k)?).map_err(malformed) };
        let n_processes = n("n_processes")? as usize;
        let images = (0..n_processes)
            .map(|i| get(&format!("image.{i}")))
            .collect::<Result<Vec<_>, _>>()?;
        if kv.keys().filter(|k| k.starts_with("image.")).count() != n_processes {
            return Err(malformed("image list does not match n_processes".into()));
        }
        let app = kv
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("app.").map(|k| (k.to_string(), v.clone())))
            .collect();
        Ok(Manifest {
            job_id: get("job_id")?,
            epoch: n("epoch")?,
            n_processes,
            tasks_per_process: n("tasks_per_process")? as usize,
            lanes_per_process: n("lanes_per_process")? as usize,
            seed: n("seed")?,
            net_option: get("net_option")?,
            config_sha256: get("config_sha256")?,
            cost: CostModel {
                compute_tick: n("cost.compute_tick")?,
                net_per_byte: n("cost.net_per_byte")?,
                local_write_per_byte: n("cost.local_write_per_byte")?,
                encode_per_byte: n("cost.encode_per_byte")?,
                ctx_switch: n("cost.ctx_switch")?,
                pfs_per_byte: n("cost.pfs_per_byte")?,
                process_switch_multiplier: n("cost.process_switch_multiplier")?,
            },
            images,
            virtual_ticks: n("virtual_ticks")?,
            wall_ms: num("wall_ms", get("wall_ms")?).map_err(malformed)?,
            app,
        })
    }

    pub fn read(path: &Path) -> Result<Self, CkptError> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => CkptError::MissingImage(path.to_path_buf()),
            _ => CkptError::Io(e),
        })?;
        Self::parse(&text, path)
    }

    /// The job shape recorded at checkpoint time. `ckpt_dir` is the directory
    /// that holds `<job_id>/epoch-<n>/`.
    pub fn job_spec(&self, ckpt_dir: PathBuf) -> JobSpec {
        JobSpec {
            n_processes: self.n_processes,
            tasks_per_process: self.tasks_per_process,
            lanes_per_process: self.lanes_per_process,
            seed: self.seed,
            cost_model: self.cost.clone(),
            ckpt_dir,
            net_option: self.net_option.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Manifest {
        Manifest {
            job_id: "heat".into(),
            epoch: 2,
            n_processes: 2,
            tasks_per_process: 2,
            lanes_per_process: 2,
            seed: 7,
            net_option: "multirail_tcp".into(),
            config_sha256: "ab".repeat(32),
            cost: CostModel::default(),
            images: vec!["rank-0.img".into(), "rank-1.img".into()],
            virtual_ticks: 1234,
            wall_ms: 5,
            app: [("step".to_string(), "50".to_string())]
                .into_iter()
                .collect(),
        }
    }

    #[test]
    fn text_round_trip() {
        let m = sample();
        let text = m.to_text();
        assert!(text.contains("image.1=rank-1.img\n"));
        assert!(text.contains("app.step=50\n"));
        assert_eq!(Manifest::parse(&text, Path::new("m")).unwrap(), m);
    }

    #[test]
    fn image_list_must_match_process_count() {
        let text = sample().to_text().replace("n_processes=2", "n_processes=3");
        assert!(Manifest::parse(&text, Path::new("m")).is_err());
        let text = sample().to_text().replace("image.1=rank-1.img\n", "");
        assert!(Manifest::parse(&text, Path::new("m")).is_err());
    }
}
