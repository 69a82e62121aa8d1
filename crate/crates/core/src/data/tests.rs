use super::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, BTreeSet};

fn noiseless() -> SyntheticTask {
    SyntheticTask::new(SyntheticTaskSpec {
        jitter_std: 0.0,
        ..SyntheticTaskSpec::default()
    })
    .unwrap()
}

#[test]
fn spec_validation_and_round_trip() {
    let spec = SyntheticTaskSpec::default();
    spec.validate().unwrap();
    assert_eq!(SyntheticTaskSpec::from_kv(&spec.to_kv()).unwrap(), spec);
    let bad = [
        SyntheticTaskSpec { viseme_classes: 12, ..spec.clone() },
        SyntheticTaskSpec { viseme_classes: 0, ..spec.clone() },
        SyntheticTaskSpec { frames_per_token: 3, ..spec.clone() },
        SyntheticTaskSpec { min_tokens: 6, ..spec.clone() },
        SyntheticTaskSpec { jitter_std: -0.1, ..spec.clone() },
    ];
    for s in bad {
        assert!(matches!(SyntheticTask::new(s), Err(Error::Config(_))));
    }
    let mut kv = spec.to_kv();
    kv.set("vocab", 3);
    assert!(SyntheticTaskSpec::from_kv(&kv).is_err());
}

#[test]
fn noiseless_frames_are_templates() {
    let task = noiseless();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let u = task.generate_utterance("u", &mut rng).unwrap();
    let fpt = task.spec.frames_per_token;
    assert_eq!(u.audio.shape(), &[u.transcript.len() * fpt, 16]);
    assert_eq!(u.video.shape(), &[u.transcript.len() * fpt / 2, 16]);
    for (i, &t) in u.transcript.iter().enumerate() {
        assert_eq!(&u.audio.data()[i * fpt * 16..(i + 1) * fpt * 16], task.audio_template(t));
    }
    // tokens 1 and 5 share viseme 0 when C = 4
    let a = task.render("a", vec![1, 2], &mut rng).unwrap();
    let b = task.render("b", vec![5, 2], &mut rng).unwrap();
    assert_eq!(a.video, b.video);
    assert_ne!(a.audio, b.audio);
    assert!(task.render("c", vec![13], &mut rng).is_err());
    assert!(task.render("c", vec![], &mut rng).is_err());
}

#[test]
fn video_alone_cannot_beat_viseme_rate() {
    let task = noiseless();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    // group tokens by their noiseless video rendering; under a uniform prior
    // the best guess within a group is right once per group member
    let mut groups: BTreeMap<Vec<u64>, usize> = BTreeMap::new();
    for t in 1..=task.spec.vocab_size {
        let v = task.render_video(&[t], &mut rng).unwrap();
        *groups.entry(v.data().iter().map(|x| x.to_bits()).collect()).or_default() += 1;
    }
    let accuracy = groups.len() as f64 / task.spec.vocab_size as f64;
    let bound = task.spec.viseme_classes as f64 / task.spec.vocab_size as f64;
    assert!(accuracy <= bound + 1e-12);
    assert_eq!(groups.len(), 4);
}

#[test]
fn generation_is_seed_deterministic() {
    let task = SyntheticTask::new(SyntheticTaskSpec::default()).unwrap();
    let a = task.generate_utterance("x", &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let b = task.generate_utterance("x", &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert_eq!(a, b);
    let other = SyntheticTask::new(SyntheticTaskSpec { seed: 1, ..SyntheticTaskSpec::default() }).unwrap();
    assert_ne!(task.audio_template(1), other.audio_template(1));
    assert_ne!(derive_seed(0, 1, 2), derive_seed(0, 2, 1));
}

#[test]
fn white_noise_variance() {
    let task = noiseless();
    let n = synth_noise(NoiseKind::White, 10_000, 16, &task, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    assert!((power(&n) - 1.0).abs() < 0.05);
    assert!(synth_noise(NoiseKind::White, 0, 16, &task, &mut ChaCha8Rng::seed_from_u64(4)).is_err());
    assert!("brown".parse::<NoiseKind>().is_err());
    for k in NoiseKind::ALL {
        assert_eq!(k.to_string().parse::<NoiseKind>().unwrap(), k);
    }
}

/// Least-squares slope of log10 power against log10 frequency, from the
/// column-averaged periodogram in log-spaced bins.
fn periodogram_slope(x: &Tensor, lo: f64, hi: f64) -> f64 {
    use rustfft::{num_complex::Complex, FftPlanner};
    let (t, d) = x.dims2().unwrap();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(t);
    let mut psd = vec![0.0; t / 2];
    for c in 0..d {
        let mut buf: Vec<Complex<f64>> = (0..t).map(|i| Complex::new(x.data()[i * d + c], 0.0)).collect();
        fft.process(&mut buf);
        for (k, p) in psd.iter_mut().enumerate() {
            *p += buf[k].norm_sqr();
        }
    }
    let bins = 24;
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for b in 0..bins {
        let f0 = lo * (hi / lo).powf(b as f64 / bins as f64);
        let f1 = lo * (hi / lo).powf((b + 1) as f64 / bins as f64);
        let (k0, k1) = ((f0 * t as f64) as usize, (f1 * t as f64) as usize);
        if k1 <= k0 || k0 == 0 {
            continue;
        }
        let mean = psd[k0..k1].iter().sum::<f64>() / (k1 - k0) as f64;
        xs.push(((f0 * f1).sqrt()).log10());
        ys.push(mean.log10());
    }
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    cov / var
}

#[test]
fn pink_noise_spectral_slope() {
    let task = noiseless();
    let n = synth_noise(NoiseKind::Pink, 1 << 15, 4, &task, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    // band between the slowest and fastest poles, in cycles per frame
    let slope = periodogram_slope(&n, 1e-3, 5e-2);
    assert!((-1.5..=-0.5).contains(&slope), "slope {slope}");
    assert!((power(&n) - 1.0).abs() < 0.3);
    let w = synth_noise(NoiseKind::White, 1 << 15, 4, &task, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    assert!(periodogram_slope(&w, 1e-3, 5e-2).abs() < 0.2);
}

#[test]
fn single_stream_babble_is_clean_speech() {
    let task = SyntheticTask::new(SyntheticTaskSpec::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let b = babble(&task, 30, 1, &mut rng.clone()).unwrap();
    let mut clean = Vec::new();
    while clean.len() < 30 * 16 {
        let y = task.sample_transcript(&mut rng);
        clean.extend_from_slice(task.render_audio(&y, &mut rng).unwrap().data());
    }
    assert_eq!(b.data(), &clean[..30 * 16]);
    let six = synth_noise(NoiseKind::Babble, 30, 16, &task, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    assert_eq!(six.shape(), &[30, 16]);
    assert!(synth_noise(NoiseKind::Babble, 30, 5, &task, &mut rng).is_err());
}

fn snr_db(signal: &Tensor, mixed: &Tensor) -> f64 {
    let diff: Vec<f64> = mixed.data().iter().zip(signal.data()).map(|(m, s)| m - s).collect();
    10.0 * (power(signal) / power(&Tensor::new(signal.shape().to_vec(), diff).unwrap())).log10()
}

#[test]
fn snr_mixing() {
    let s = Tensor::new(vec![2, 2], vec![2.0, -2.0, 2.0, -2.0]).unwrap();
    let n = Tensor::new(vec![2, 2], vec![1.0, 1.0, -1.0, 1.0]).unwrap();
    let m = mix_at_snr(&s, &n, 10.0).unwrap();
    let scale = (m.data()[0] - 2.0) / 1.0;
    assert!((scale - 0.4f64.sqrt()).abs() < 1e-12);
    assert!((snr_db(&s, &m) - 10.0).abs() < 1e-9);

    let zero = mix_at_snr(&s, &n, 0.0).unwrap();
    let scaled: Vec<f64> = zero.data().iter().zip(s.data()).map(|(a, b)| a - b).collect();
    assert!((power(&Tensor::new(vec![2, 2], scaled).unwrap()) - power(&s)).abs() < 1e-9);

    let task = SyntheticTask::new(SyntheticTaskSpec::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let u = task.generate_utterance("u", &mut rng).unwrap();
    for kind in NoiseKind::ALL {
        for target in [20.0, 12.5, 2.5, -5.0, -7.5] {
            let noise = synth_noise(kind, u.audio.rows(), 16, &task, &mut rng).unwrap();
            let mixed = mix_at_snr(&u.audio, &noise, target).unwrap();
            assert!((snr_db(&u.audio, &mixed) - target).abs() < 0.01);
        }
    }
    let high = mix_at_snr(&u.audio, &synth_noise(NoiseKind::White, u.audio.rows(), 16, &task, &mut rng).unwrap(), 60.0)
        .unwrap();
    let rel = (power(&Tensor::new(
        u.audio.shape().to_vec(),
        high.data().iter().zip(u.audio.data()).map(|(a, b)| a - b).collect(),
    )
    .unwrap())
        / power(&u.audio))
    .sqrt();
    // a 60 dB ratio puts the perturbation at exactly 1e-3 of the signal RMS
    assert!((rel - 1e-3).abs() < 1e-12);
    assert!(((power(&high) / power(&u.audio)).sqrt() - 1.0).abs() < 1e-3);

    assert!(matches!(mix_at_snr(&Tensor::zeros(&[2, 2]), &n, 0.0), Err(Error::DegenerateSignal)));
    assert!(matches!(mix_at_snr(&s, &Tensor::zeros(&[3, 2]), 0.0), Err(Error::Shape { .. })));
    assert!(mix_at_snr(&s, &n, f64::NAN).is_err());
}

#[test]
fn time_mask_bounds() {
    let task = SyntheticTask::new(SyntheticTaskSpec::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let u = task.render("u", vec![1, 2, 3], &mut rng).unwrap();
    let t = u.audio.rows();
    assert_eq!(time_mask(&u.audio, 3, 0, &mut rng).unwrap(), u.audio);
    assert!(time_mask(&u.audio, t, 1, &mut rng).is_err());
    for seed in 0..500 {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let one = time_mask(&u.audio, t - 1, 1, &mut r).unwrap();
        assert!(masked_frames(&one) < t);
        let (span, n) = (1 + seed as usize % 4, seed as usize % 4);
        let many = time_mask(&u.audio, span, n, &mut r).unwrap();
        assert!(masked_frames(&many) <= n * span);
    }
}

#[test]
fn dataset_files_are_deterministic_and_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticTaskSpec::default();
    let a = build_dataset(&spec, 100, 20, 5, &dir.path().join("a")).unwrap();
    let b = build_dataset(&spec, 100, 20, 5, &dir.path().join("b")).unwrap();
    assert_eq!(std::fs::read(&a.train).unwrap(), std::fs::read(&b.train).unwrap());
    assert_eq!(std::fs::read(&a.eval).unwrap(), std::fs::read(&b.eval).unwrap());

    let train = read_dataset(&a.train).unwrap();
    let eval = read_dataset(&a.eval).unwrap();
    assert_eq!(train.utterances.len(), 100);
    assert_eq!(eval.utterances.len(), 20);
    assert_eq!(train.spec, spec);
    let ids: BTreeSet<_> = train.utterances.iter().map(|u| &u.id).collect();
    assert_eq!(ids.len(), 100);
    assert!(eval.utterances.iter().all(|u| !ids.contains(&u.id)));

    let task = SyntheticTask::new(spec.clone()).unwrap();
    assert_eq!(train, Dataset::generate(&task, "train", 100, 5).unwrap());
    assert_ne!(train.utterances[0], Dataset::generate(&task, "train", 1, 6).unwrap().utterances[0]);

    let mut bytes = std::fs::read(&a.train).unwrap();
    bytes[1] = b'!';
    let bad = dir.path().join("bad.cbd");
    std::fs::write(&bad, &bytes).unwrap();
    assert!(matches!(read_dataset(&bad), Err(Error::Format { .. })));
    std::fs::write(&bad, &std::fs::read(&a.train).unwrap()[..200]).unwrap();
    assert!(matches!(read_dataset(&bad), Err(Error::Format { .. })));
    let missing = dir.path().join("nope.cbd");
    let err = read_dataset(&missing).unwrap_err();
    assert!(err.to_string().contains("nope.cbd"), "{err}");
    assert!(build_dataset(&spec, 0, 1, 5, dir.path()).is_err());
}
