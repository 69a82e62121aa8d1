//! Dataset split files, integers little-endian:
//!
//! ```text
//! magic   "CBRD"
//! version u32
//! header  u32 byte length, then `key = value` lines (task spec and split)
//! count   u64 number of utterances
//! record* u32 id length, id bytes, u32 token count, u32 tokens,
//!         audio tensor, video tensor
//! tensor  u32 rank, rank × u64 dims, row-major f64 values
//! ```

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{derive_seed, SyntheticTask, SyntheticTaskSpec, Utterance, STREAM_EVAL, STREAM_TRAIN};
use crate::binio::{self, ByteReader};
use crate::error::{Error, Result};
use crate::kv::KvRecord;
use crate::numkernel::Tensor;
use crate::par;

pub const DATASET_MAGIC: &[u8; 4] = b"CBRD";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: SyntheticTaskSpec,
    pub split: String,
    pub utterances: Vec<Utterance>,
}

impl Dataset {
    /// Generate `count` utterances; utterance `i` draws from its own stream
    /// of `seed`, so the result does not depend on thread scheduling.
    pub fn generate(task: &SyntheticTask, split: &str, count: usize, seed: u64) -> Result<Self> {
        let stream = match split {
            "train" => STREAM_TRAIN,
            "eval" => STREAM_EVAL,
            other => return Err(Error::Usage(format!("unknown split `{other}`"))),
        };
        let idx: Vec<usize> = (0..count).collect();
        let utterances = par::map(&idx, |_, &i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, i as u64));
            task.generate_utterance(&format!("{split}-{i:06}"), &mut rng)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            spec: task.spec.clone(),
            split: split.to_string(),
            utterances,
        })
    }

    pub fn total_audio_frames(&self) -> usize {
        self.utterances.iter().map(|u| u.audio.rows()).sum()
    }
}

pub fn write_dataset<W: Write>(ds: &Dataset, w: &mut W) -> std::io::Result<()> {
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    let mut header = ds.spec.to_kv();
    header.set("split", &ds.split);
    binio::write_string(w, &header.to_text())?;
    w.write_all(&(ds.utterances.len() as u64).to_le_bytes())?;
    for u in &ds.utterances {
        binio::write_string(w, &u.id)?;
        w.write_all(&(u.transcript.len() as u32).to_le_bytes())?;
        for &t in &u.transcript {
            w.write_all(&(t as u32).to_le_bytes())?;
        }
        binio::write_tensor(w, &u.audio)?;
        binio::write_tensor(w, &u.video)?;
    }
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(f);
    read_dataset_from(&mut r, path)
}

fn read_dataset_from<R: Read>(r: &mut R, path: &Path) -> Result<Dataset> {
    let bad = |reason: String| Error::format(path, reason);
    let io = |e: std::io::Error| Error::format(path, format!("truncated or corrupt: {e}"));
    let mut br = ByteReader::new(r);
    if br.bytes(4).map_err(io)? != DATASET_MAGIC {
        return Err(bad("not a dataset file (bad magic)".into()));
    }
    let version = br.u32().map_err(io)?;
    if version != DATASET_VERSION {
        return Err(bad(format!("unsupported dataset version {version}")));
    }
    let mut header = KvRecord::parse(&br.string(1 << 20).map_err(io)?)?;
    let split: String = header.require("split")?;
    header.remove("split");
    let spec = SyntheticTaskSpec::from_kv(&header)?;
    let count = br.u64().map_err(io)? as usize;
    let mut utterances = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let id = br.string(4096).map_err(io)?;
        let n = br.u32().map_err(io)? as usize;
        if n > 1 << 16 {
            return Err(bad(format!("utterance {id}: transcript length {n} out of range")));
        }
        let transcript = (0..n)
            .map(|_| br.u32().map(|t| t as usize))
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(io)?;
        let mut tensor = || -> Result<Tensor> {
            let (shape, data) = br.tensor_parts().map_err(io)?;
            if shape.len() != 2 {
                return Err(bad(format!("utterance {id}: expected a matrix, got rank {}", shape.len())));
            }
            Tensor::new(shape, data)
        };
        let audio = tensor()?;
        let video = tensor()?;
        if audio.shape()[1] != spec.audio_dim || video.shape()[1] != spec.video_dim {
            return Err(bad(format!("utterance {id}: feature width disagrees with the header")));
        }
        utterances.push(Utterance {
            id,
            transcript,
            audio,
            video,
        });
    }
    if !br.at_end().map_err(io)? {
        return Err(bad("trailing bytes after last record".into()));
    }
    Ok(Dataset { spec, split, utterances })
}

fn save(ds: &Dataset, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_dataset(ds, &mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetFiles {
    pub train: PathBuf,
    pub eval: PathBuf,
}

impl DatasetFiles {
    pub fn in_dir(dir: &Path) -> Self {
        DatasetFiles {
            train: dir.join("train.cbd"),
            eval: dir.join("eval.cbd"),
        }
    }
}

/// Generate both splits and write them as `train.cbd` and `eval.cbd` in `dir`.
pub fn build_dataset(spec: &SyntheticTaskSpec, n_train: usize, n_eval: usize, seed: u64, dir: &Path) -> Result<DatasetFiles> {
    if n_train == 0 || n_eval == 0 {
        return Err(Error::Config("both splits need at least one utterance".into()));
    }
    let task = SyntheticTask::new(spec.clone())?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = DatasetFiles::in_dir(dir);
    save(&Dataset::generate(&task, "train", n_train, seed)?, &files.train)?;
    save(&Dataset::generate(&task, "eval", n_eval, seed)?, &files.eval)?;
    Ok(files)
}
