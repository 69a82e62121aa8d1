use std::fs;
use std::path::{Path, PathBuf};

use cobra_core::analysis::{attention_cost, influence_csv, snr_influence_sweep, Scheme};
use cobra_core::data::{build_dataset, read_dataset, Dataset, DatasetFiles, SyntheticTask};
use cobra_core::eval::{eval_conditions, evaluate_grid, wer_csv};
use cobra_core::model::{check_architecture, load_checkpoint, save_checkpoint, Model, Variant};
use cobra_core::train::train_log_csv;
use cobra_core::{Error, Result};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::CommonArgs;

pub const COST_HEADER: &str = "F_m,F_b,scheme,formula_pairs,measured_madds";

struct Run {
    cfg: RunConfig,
    out: PathBuf,
}

impl Run {
    fn load(args: &CommonArgs) -> Result<Self> {
        let mut cfg = RunConfig::load(&args.config)?;
        if let Some(s) = args.seed {
            cfg.set_seed(s);
        }
        if let Some(v) = args.variant {
            cfg.set_variant(v);
        }
        let out = match std::env::var_os("COBRA_OUT") {
            Some(p) if !p.is_empty() => PathBuf::from(p),
            _ => cfg.out_dir.clone(),
        };
        Ok(Run { cfg, out })
    }

    fn ensure_out(&self) -> Result<()> {
        fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))
    }

    fn task(&self) -> Result<SyntheticTask> {
        SyntheticTask::new(self.cfg.task.clone())
    }

    fn dataset(&self, path: &Path) -> Result<Dataset> {
        let ds = read_dataset(path)?;
        if ds.spec != self.cfg.task {
            return Err(Error::Mismatch(format!(
                "{} was generated with a different task specification",
                path.display()
            )));
        }
        Ok(ds)
    }

    fn checkpoint_path(&self, v: Variant) -> PathBuf {
        self.out.join(format!("{v}.ckpt"))
    }

    /// Load a checkpoint and check it against the configured architecture.
    /// Without an explicit variant the checkpoint's own variant is accepted.
    fn model(&self, path: &Path, variant: Option<Variant>) -> Result<Model> {
        let model = load_checkpoint(path, None)?;
        let mut expected = self.cfg.model.clone();
        expected.variant = variant.unwrap_or(model.cfg.variant);
        check_architecture(&model.cfg, &expected)?;
        Ok(model)
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn gen(args: &CommonArgs) -> Result<()> {
    let run = Run::load(args)?;
    let c = &run.cfg;
    let files = build_dataset(&c.task, c.n_train, c.n_eval, c.seed, &run.out)?;
    for p in [&files.train, &files.eval] {
        println!("{}  {}", sha256_file(p)?, p.display());
    }
    Ok(())
}

pub fn train(args: &CommonArgs) -> Result<()> {
    let run = Run::load(args)?;
    let files = DatasetFiles::in_dir(&run.out);
    let train_set = run.dataset(&files.train)?;
    let eval_set = run.dataset(&files.eval)?;
    let task = run.task()?;
    let variant = run.cfg.model.variant;
    let model = Model::new(run.cfg.model.clone())?;
    let outcome = cobra_core::train::train(model, &task, &train_set, &eval_set, &run.cfg.train, &run.cfg.beam, |log| {
        eprintln!(
            "epoch {:>3}  lr {:.2e}  loss {:.4}  eval_wer {:.4}",
            log.epoch, log.lr, log.loss, log.eval_wer
        )
    })?;
    let ckpt = args.checkpoint.clone().unwrap_or_else(|| run.checkpoint_path(variant));
    save_checkpoint(&outcome.best, &ckpt)?;
    let log_path = run.out.join(format!("train_log_{variant}.csv"));
    write(&log_path, &train_log_csv(&outcome.log))?;
    println!("best epoch {} -> {}", outcome.best_epoch, ckpt.display());
    println!("log -> {}", log_path.display());
    Ok(())
}

pub fn eval(args: &CommonArgs) -> Result<()> {
    let run = Run::load(args)?;
    let c = &run.cfg;
    let models: Vec<Model> = match (&args.checkpoint, args.variant) {
        (Some(p), v) => vec![run.model(p, v)?],
        (None, Some(v)) => vec![run.model(&run.checkpoint_path(v), Some(v))?],
        (None, None) => {
            let found: Vec<Variant> = [Variant::Bottleneck, Variant::AudioOnly]
                .into_iter()
                .filter(|v| run.checkpoint_path(*v).exists())
                .collect();
            if found.is_empty() {
                let p = run.checkpoint_path(c.model.variant);
                return Err(Error::io(&p, std::io::Error::from(std::io::ErrorKind::NotFound)));
            }
            found
                .into_iter()
                .map(|v| run.model(&run.checkpoint_path(v), Some(v)))
                .collect::<Result<_>>()?
        }
    };
    let task = run.task()?;
    let eval_set = run.dataset(&DatasetFiles::in_dir(&run.out).eval)?;
    let conditions = eval_conditions(&c.eval_noise, &c.eval_snr)?;
    let rows = models
        .iter()
        .map(|m| {
            let name = m.cfg.variant.to_string();
            evaluate_grid(&name, m, &task, &eval_set.utterances, &conditions, c.seed, &c.beam)
        })
        .collect::<Result<Vec<_>>>()?;
    let csv = wer_csv(&conditions, &rows);
    run.ensure_out()?;
    write(&run.out.join("wer.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

pub fn analyze(args: &CommonArgs) -> Result<()> {
    let run = Run::load(args)?;
    let c = &run.cfg;
    let path = args
        .checkpoint
        .clone()
        .unwrap_or_else(|| run.checkpoint_path(Variant::Bottleneck));
    let model = run.model(&path, args.variant)?;
    if !model.cfg.variant.has_video() {
        return Err(Error::Usage(format!(
            "{}: influence analysis needs a model with a video stream",
            path.display()
        )));
    }
    let task = run.task()?;
    let eval_set = run.dataset(&DatasetFiles::in_dir(&run.out).eval)?;
    let reports = snr_influence_sweep(&model, &task, &eval_set, &c.eval_noise, &c.eval_snr, c.seed, c.rollout_residual)?;
    let csv = influence_csv(&reports);
    write(&run.out.join("influence.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

/// Cost table rows for every frame count: concat, cross, then bottleneck
/// at each token count.
pub fn cost_csv(frames: &[usize], tokens: &[usize], dim: usize) -> Result<String> {
    let mut s = format!("{COST_HEADER}\n");
    for &f_m in frames {
        let mut schemes: Vec<(Scheme, usize)> = vec![(Scheme::Concat, 0), (Scheme::Cross, 0)];
        schemes.extend(tokens.iter().map(|&b| (Scheme::Bottleneck, b)));
        for (scheme, f_b) in schemes {
            let r = attention_cost(f_m, f_b, scheme, dim)?;
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                r.f_m, r.f_b, r.scheme, r.formula_pairs, r.measured_madds
            ));
        }
    }
    Ok(s)
}

pub fn bench(args: &CommonArgs) -> Result<()> {
    let run = Run::load(args)?;
    let c = &run.cfg;
    let csv = cost_csv(&c.bench_frames, &c.bench_tokens, c.bench_dim)?;
    run.ensure_out()?;
    write(&run.out.join("cost.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}
