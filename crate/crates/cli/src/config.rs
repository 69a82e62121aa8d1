//! Flat `key = value` run configuration shared by every subcommand.

use std::path::{Path, PathBuf};

use cobra_core::data::{NoiseKind, SyntheticTaskSpec};
use cobra_core::kv::{parse_list, KvRecord};
use cobra_core::model::{ModelConfig, Variant};
use cobra_core::objective::BeamConfig;
use cobra_core::train::TrainConfig;
use cobra_core::{Error, Result};

/// Model keys that the task spec or the run seed already determine.
const SHARED_MODEL_KEYS: &[&str] = &["vocab_size", "audio_in", "video_in", "seed"];

const RUN_KEYS: &[&str] = &[
    "n_train",
    "n_eval",
    "beam",
    "decode_lambda",
    "max_decode_len",
    "length_bonus",
    "eval_noise",
    "eval_snr",
    "rollout_residual",
    "bench_frames",
    "bench_tokens",
    "bench_dim",
    "out_dir",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub task: SyntheticTaskSpec,
    pub train: TrainConfig,
    pub n_train: usize,
    pub n_eval: usize,
    pub beam: BeamConfig,
    pub eval_noise: Vec<NoiseKind>,
    pub eval_snr: Vec<f64>,
    pub rollout_residual: f64,
    pub bench_frames: Vec<usize>,
    pub bench_tokens: Vec<usize>,
    pub bench_dim: usize,
    pub out_dir: PathBuf,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut c = RunConfig {
            model: ModelConfig::default(),
            task: SyntheticTaskSpec::default(),
            train: TrainConfig::default(),
            n_train: 2000,
            n_eval: 200,
            beam: BeamConfig {
                beam: 4,
                ctc_weight: 0.3,
                max_len: 8,
                length_bonus: 0.0,
            },
            eval_noise: vec![NoiseKind::White, NoiseKind::Pink, NoiseKind::Babble],
            eval_snr: vec![12.5, 7.5, 2.5, -2.5, -7.5],
            rollout_residual: 0.5,
            bench_frames: (1..=8).map(|i| 50 * i).collect(),
            bench_tokens: vec![4, 16, 32],
            bench_dim: 8,
            out_dir: PathBuf::from("out"),
            seed: 0,
        };
        c.sync();
        c
    }
}

impl RunConfig {
    /// Every accepted key, in the order `to_kv` writes them.
    pub fn keys() -> Vec<&'static str> {
        let mut keys: Vec<&'static str> = ModelConfig::keys()
            .iter()
            .copied()
            .filter(|k| !SHARED_MODEL_KEYS.contains(k))
            .collect();
        keys.extend(SyntheticTaskSpec::keys().iter().copied());
        keys.extend(TrainConfig::keys().iter().copied());
        keys.extend(RUN_KEYS.iter().copied());
        keys
    }

    /// Propagate the shared fields into each component config.
    fn sync(&mut self) {
        self.task.seed = self.seed;
        self.train.seed = self.seed;
        self.model.seed = self.seed;
        self.model.vocab_size = self.task.vocab_size;
        self.model.audio_in = self.task.audio_dim;
        self.model.video_in = self.task.video_dim;
    }

    pub fn from_kv(r: &KvRecord, base_dir: &Path) -> Result<Self> {
        r.reject_unknown(&Self::keys())?;
        let mut c = RunConfig::default();
        c.task.read_kv(r)?;
        c.train.read_kv(r)?;
        r.read_into("seed", &mut c.seed)?;
        r.read_into("n_train", &mut c.n_train)?;
        r.read_into("n_eval", &mut c.n_eval)?;
        r.read_into("beam", &mut c.beam.beam)?;
        r.read_into("decode_lambda", &mut c.beam.ctc_weight)?;
        r.read_into("max_decode_len", &mut c.beam.max_len)?;
        r.read_into("length_bonus", &mut c.beam.length_bonus)?;
        if let Some(v) = r.get("eval_noise") {
            c.eval_noise = parse_list("eval_noise", v)?;
        }
        if let Some(v) = r.get("eval_snr") {
            c.eval_snr = parse_list("eval_snr", v)?;
        }
        r.read_into("rollout_residual", &mut c.rollout_residual)?;
        if let Some(v) = r.get("bench_frames") {
            c.bench_frames = parse_list("bench_frames", v)?;
        }
        if let Some(v) = r.get("bench_tokens") {
            c.bench_tokens = parse_list("bench_tokens", v)?;
        }
        r.read_into("bench_dim", &mut c.bench_dim)?;
        let out = r.get("out_dir").map_or_else(|| c.out_dir.clone(), PathBuf::from);
        c.out_dir = if out.is_absolute() { out } else { base_dir.join(out) };

        c.sync();
        let mut model = c.model.to_kv();
        for k in ModelConfig::keys() {
            if let (Some(v), false) = (r.get(k), SHARED_MODEL_KEYS.contains(k)) {
                model.set(k, v);
            }
        }
        c.model = ModelConfig::from_kv(&model)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_kv(&KvRecord::parse(&text)?, base)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.sync();
    }

    pub fn set_variant(&mut self, v: Variant) {
        self.model.variant = v;
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.task.validate()?;
        self.train.validate()?;
        if self.n_train == 0 || self.n_eval == 0 {
            return Err(Error::Config("n_train and n_eval must be positive".into()));
        }
        if self.beam.beam == 0 || !(0.0..=1.0).contains(&self.beam.ctc_weight) {
            return Err(Error::Config("beam must be positive and decode_lambda in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.rollout_residual) {
            return Err(Error::Config("rollout_residual must be in [0, 1]".into()));
        }
        if let Some(s) = self.eval_snr.iter().find(|s| !s.is_finite()) {
            return Err(Error::Config(format!("eval_snr entry {s} is not finite")));
        }
        if self.bench_dim == 0 || self.bench_frames.contains(&0) || self.bench_tokens.contains(&0) {
            return Err(Error::Config("bench sizes must be positive".into()));
        }
        Ok(())
    }

    #[cfg(test)]
    pub fn to_kv(&self) -> KvRecord {
        use cobra_core::kv::format_list;
        let mut r = KvRecord::new();
        let model = self.model.to_kv();
        for k in model.keys() {
            if !SHARED_MODEL_KEYS.contains(&k) {
                r.set(k, model.get(k).expect("key present"));
            }
        }
        let task = self.task.to_kv();
        for k in task.keys() {
            r.set(k, task.get(k).expect("key present"));
        }
        self.train.write_kv(&mut r);
        r.set("n_train", self.n_train);
        r.set("n_eval", self.n_eval);
        r.set("beam", self.beam.beam);
        r.set("decode_lambda", self.beam.ctc_weight);
        r.set("max_decode_len", self.beam.max_len);
        r.set("length_bonus", self.beam.length_bonus);
        r.set("eval_noise", format_list(&self.eval_noise));
        r.set("eval_snr", format_list(&self.eval_snr));
        r.set("rollout_residual", self.rollout_residual);
        r.set("bench_frames", format_list(&self.bench_frames));
        r.set("bench_tokens", format_list(&self.bench_tokens));
        r.set("bench_dim", self.bench_dim);
        r.set("out_dir", self.out_dir.display());
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        let kv = c.to_kv();
        let mut back = RunConfig::from_kv(&kv, Path::new("/")).unwrap();
        assert_eq!(back.out_dir, PathBuf::from("/out"));
        back.out_dir = c.out_dir.clone();
        assert_eq!(back, c);
        let keys = RunConfig::keys();
        let mut sorted = keys.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), keys.len());
    }

    #[test]
    fn shared_fields_propagate_and_typos_fail() {
        let kv = KvRecord::parse("vocab_size = 6\nviseme_classes = 2\nseed = 9\nd_model = 32\nout_dir = runs").unwrap();
        let c = RunConfig::from_kv(&kv, Path::new("/base")).unwrap();
        assert_eq!(c.model.vocab_size, 6);
        assert_eq!(c.model.seed, 9);
        assert_eq!(c.task.seed, 9);
        assert_eq!(c.model.d_model, 32);
        assert_eq!(c.out_dir, PathBuf::from("/base/runs"));
        for bad in ["d_modle = 3", "audio_in = 4", "epochs = many", "strategy = sum"] {
            assert!(RunConfig::from_kv(&KvRecord::parse(bad).unwrap(), Path::new("/")).is_err(), "{bad}");
        }
    }
}
