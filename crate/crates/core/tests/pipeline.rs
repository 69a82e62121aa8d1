use cobra_core::analysis::snr_influence_sweep;
use cobra_core::data::{build_dataset, read_dataset, NoiseKind, SyntheticTask, SyntheticTaskSpec};
use cobra_core::eval::{decode, eval_conditions, evaluate_grid};
use cobra_core::model::{load_checkpoint, save_checkpoint, ForwardOptions, Model, ModelConfig, Variant};
use cobra_core::objective::BeamConfig;
use cobra_core::par::{self, Execution};
use cobra_core::train::{train, TrainConfig};

fn spec() -> SyntheticTaskSpec {
    SyntheticTaskSpec {
        vocab_size: 4,
        viseme_classes: 2,
        audio_dim: 6,
        video_dim: 4,
        max_tokens: 3,
        seed: 2,
        ..SyntheticTaskSpec::default()
    }
}

fn model_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        enc_layers: 2,
        fusion_layer: 1,
        bottleneck_len: 2,
        heads: 2,
        ffn_dim: 32,
        conv_kernel: 3,
        vocab_size: 4,
        decoder_layers: 1,
        audio_in: 6,
        video_in: 4,
        variant,
        ..ModelConfig::default()
    }
}

#[test]
fn generate_train_save_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let files = build_dataset(&spec(), 60, 8, 2, dir.path()).unwrap();
    let (tr, ev) = (read_dataset(&files.train).unwrap(), read_dataset(&files.eval).unwrap());
    let task = SyntheticTask::new(spec()).unwrap();
    let cfg = TrainConfig {
        epochs: 4,
        batch_frames: 60,
        lr_peak: 3e-3,
        epoch_eval_utterances: 4,
        ..TrainConfig::default()
    };
    let beam = BeamConfig { beam: 2, max_len: 4, ..BeamConfig::default() };
    let model = Model::new(model_config(Variant::Bottleneck)).unwrap();
    let out = train(model, &task, &tr, &ev, &cfg, &beam, |_| {}).unwrap();
    assert_eq!(out.log.len(), 4);
    assert!(out.log[3].loss < out.log[0].loss, "{:?}", out.log);
    assert!(out.log.iter().all(|r| r.ctc_video.is_some()));
    let best_wer = out.log[out.best_epoch - 1].eval_wer;
    assert!(out.log.iter().all(|r| r.eval_wer >= best_wer));

    let path = dir.path().join("m.ckpt");
    save_checkpoint(&out.best, &path).unwrap();
    let loaded = load_checkpoint(&path, Some(&out.best.cfg)).unwrap();
    let u = &ev.utterances[0];
    assert_eq!(
        decode(&out.best, &u.audio, Some(&u.video), &beam).unwrap(),
        decode(&loaded, &u.audio, Some(&u.video), &beam).unwrap()
    );

    let conds = eval_conditions(&[NoiseKind::White], &[0.0]).unwrap();
    let row = evaluate_grid("bottleneck", &loaded, &task, &ev.utterances, &conds, 0, &beam).unwrap();
    assert_eq!(row.wer.len(), 2);
    assert!(row.wer.iter().all(|w| w.is_finite() && *w >= 0.0));
    let sweep = snr_influence_sweep(&loaded, &task, &ev, &[NoiseKind::Pink], &[0.0], 0, 0.5).unwrap();
    assert_eq!(sweep.len(), 2);
}

#[test]
fn training_rejects_mismatched_widths() {
    let task = SyntheticTask::new(spec()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let files = build_dataset(&spec(), 4, 2, 0, dir.path()).unwrap();
    let (tr, ev) = (read_dataset(&files.train).unwrap(), read_dataset(&files.eval).unwrap());
    let model = Model::new(ModelConfig { audio_in: 5, ..model_config(Variant::AudioOnly) }).unwrap();
    let err = train(model, &task, &tr, &ev, &TrainConfig::default(), &BeamConfig::default(), |_| {});
    assert!(matches!(err, Err(cobra_core::Error::Mismatch(_))));
}

#[test]
fn parallel_and_sequential_paths_agree() {
    let task = SyntheticTask::new(spec()).unwrap();
    let ds = cobra_core::data::Dataset::generate(&task, "train", 6, 1).unwrap();
    let model = Model::new(model_config(Variant::Bottleneck)).unwrap();
    let run = |exec| {
        par::map_with(exec, &ds.utterances, |_, u| {
            let (p, g) = model
                .loss_and_grad(&u.audio, Some(&u.video), &u.transcript, &ForwardOptions::default(), 0.0)
                .unwrap();
            (p.total, g.global_norm())
        })
    };
    assert_eq!(run(Execution::Parallel), run(Execution::Sequential));
}
