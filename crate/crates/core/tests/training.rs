use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::Rng;

use thgcl::graph::TemporalHeteroGraph;
use thgcl::manifest::LoadedClip;
use thgcl::synth::{self, describe, generate, SynthSpec};
use thgcl::train::{evaluate, evaluate_with, train, train_on, ClipScorer, Dataset, LogEvent, LossMode, TrainConfig};
use thgcl::{Checkpoint, Error, Precision, Result};

fn tiny_spec(seed: u64) -> SynthSpec {
    SynthSpec {
        num_classes: 4,
        clips_train: 48,
        clips_eval: 16,
        clip_ms: 4000,
        audio_dim: 6,
        video_dim: 10,
        event_len_ms: 1500,
        seed,
        ..SynthSpec::default()
    }
}

fn tiny_config(seed: u64) -> TrainConfig {
    TrainConfig {
        max_iterations: 12,
        batch_size: 8,
        eval_every: 4,
        seed,
        hidden: 8,
        d: 6,
        layers: 2,
        ..TrainConfig::default()
    }
}

fn datasets(dir: &Path, spec: &SynthSpec) -> (Dataset, Dataset) {
    let out = generate(spec, dir).unwrap();
    let train = Dataset::from_manifest(&out.train_manifest, spec.num_classes).unwrap();
    let eval = Dataset::from_manifest(&out.eval_manifest, spec.num_classes).unwrap();
    (train, eval)
}

#[test]
fn zero_iterations_returns_initial_model() {
    let dir = tempfile::tempdir().unwrap();
    let (tr, ev) = datasets(dir.path(), &tiny_spec(1));
    let cfg = TrainConfig {
        max_iterations: 0,
        ..tiny_config(3)
    };
    let out = train_on(&tr, &ev, &cfg, &mut |_| {}).unwrap();
    assert!(out.log.is_empty());
    assert_eq!(out.iterations_run, 0);
    assert_eq!(out.best_map, None);
    let (a, v) = tr.feature_dims().unwrap();
    let fresh = thgcl::ThgnModel::new(cfg.model_config(a, v, 4), thgcl::seeding::derive_seed(3, "init")).unwrap();
    assert_eq!(out.checkpoint.model.params, fresh.params);
}

#[test]
fn identical_runs_give_identical_logs() {
    let dir = tempfile::tempdir().unwrap();
    let (tr, ev) = datasets(dir.path(), &tiny_spec(2));
    for precision in [Precision::F64, Precision::F32] {
        let cfg = TrainConfig {
            precision,
            ..tiny_config(5)
        };
        let a = train_on(&tr, &ev, &cfg, &mut |_| {}).unwrap();
        let b = train_on(&tr, &ev, &cfg, &mut |_| {}).unwrap();
        assert_eq!(a.log.loss_sequence(), b.log.loss_sequence());
        assert_eq!(a.log.loss_sequence().len(), 12);
        assert_eq!(a.checkpoint.model.params, b.checkpoint.model.params);
    }
}

#[test]
fn loss_modes_differ_and_total_is_weighted_sum() {
    let dir = tempfile::tempdir().unwrap();
    let (tr, ev) = datasets(dir.path(), &tiny_spec(3));
    let mut seqs = Vec::new();
    for mode in LossMode::ALL {
        let cfg = TrainConfig {
            loss_mode: mode,
            ..tiny_config(7)
        };
        let out = train_on(&tr, &ev, &cfg, &mut |_| {}).unwrap();
        let lc = &cfg.loss_cfg;
        for r in out.log.iterations() {
            assert!((r.total - (lc.omega_fl * r.fl + lc.omega_cl * r.cl)).abs() < 1e-9);
            if mode.uses_contrastive() {
                assert!(r.cl > 0.0);
            } else {
                assert_eq!(r.cl, 0.0);
            }
        }
        seqs.push(out.log.loss_sequence());
    }
    assert_ne!(seqs[0], seqs[1]);
    assert_ne!(seqs[1], seqs[2]);
    assert_ne!(seqs[0], seqs[2]);
}

#[test]
fn best_checkpoint_dominates_every_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let (tr, ev) = datasets(dir.path(), &tiny_spec(4));
    let cfg = TrainConfig {
        max_iterations: 40,
        eval_every: 2,
        early_stop_patience: 3,
        lr: 0.05,
        ..tiny_config(9)
    };
    let mut seen = Vec::new();
    let out = train_on(&tr, &ev, &cfg, &mut |e| seen.push(e.clone())).unwrap();
    assert_eq!(seen, out.log.events);
    let evals: Vec<f64> = out.log.evaluations().map(|e| e.map).collect();
    let best = out.best_map.unwrap();
    assert!(evals.iter().all(|&m| m <= best));
    assert!(evals.contains(&best));
    let graphs = ev.build_graphs(&cfg.graph_config(), cfg.xi_seed()).unwrap();
    let scorer = thgcl::train::ModelScorer {
        model: &out.checkpoint.model,
        precision: cfg.precision,
    };
    let rep = evaluate_with(&scorer, &ev, &graphs).unwrap();
    assert!((rep.map.value - best).abs() < 1e-12);
    if out.iterations_run < 40 {
        // stopped early: the last `patience` evaluations did not improve
        let tail = &evals[evals.len() - 3..];
        assert!(tail.iter().all(|&m| m < best));
    }
}

#[test]
fn evaluation_is_repeatable_and_checks_dimensions() {
    let dir = tempfile::tempdir().unwrap();
    let spec = tiny_spec(5);
    let out = generate(&spec, dir.path()).unwrap();
    let run = train(&out.train_manifest, &tiny_config(1)).unwrap();
    let path = dir.path().join("model.ckpt");
    run.checkpoint.save(&path).unwrap();
    let ck = Checkpoint::load(&path, None).unwrap();
    let a = evaluate(&ck, &out.eval_manifest).unwrap();
    let b = evaluate(&ck, &out.eval_manifest).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.clips, 16);

    let other = tempfile::tempdir().unwrap();
    let wide = generate(&SynthSpec { audio_dim: 7, ..spec }, other.path()).unwrap();
    assert!(matches!(evaluate(&ck, &wide.eval_manifest), Err(Error::CheckpointMismatch(_))));
}

struct LabelScorer;

impl ClipScorer for LabelScorer {
    fn score_batch(&self, clips: &[&LoadedClip], _: &[&TemporalHeteroGraph]) -> Result<Vec<Vec<f64>>> {
        Ok(clips.iter().map(|c| c.record.label_vector(4)).collect())
    }
}

struct RandomScorer(u64);

impl ClipScorer for RandomScorer {
    fn score_batch(&self, clips: &[&LoadedClip], _: &[&TemporalHeteroGraph]) -> Result<Vec<Vec<f64>>> {
        Ok(clips
            .iter()
            .map(|c| {
                let mut r = thgcl::seeding::clip_rng(self.0, &c.record.clip_id);
                (0..4).map(|_| r.random::<f64>()).collect()
            })
            .collect())
    }
}

#[test]
fn oracle_and_random_scorers() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        clips_eval: 400,
        ..tiny_spec(6)
    };
    let (_, ev) = datasets(dir.path(), &spec);
    let graphs = ev.build_graphs(&Default::default(), 0).unwrap();
    let rep = evaluate_with(&LabelScorer, &ev, &graphs).unwrap();
    assert_eq!((rep.map.value, rep.auc.value), (1.0, 1.0));
    for seed in 0..5 {
        let rep = evaluate_with(&RandomScorer(seed), &ev, &graphs).unwrap();
        assert!((rep.auc.value - 0.5).abs() < 0.05, "{}", rep.auc.value);
    }
}

#[test]
fn synthetic_generation_is_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let spec = tiny_spec(7);
    generate(&spec, a.path()).unwrap();
    generate(&spec, b.path()).unwrap();
    let mut names: Vec<_> = walk(a.path());
    names.sort();
    assert_eq!(names.len(), 3 + 2 * 64);
    for rel in names {
        assert_eq!(fs::read(a.path().join(&rel)).unwrap(), fs::read(b.path().join(&rel)).unwrap(), "{rel}");
    }
}

fn walk(root: &Path) -> Vec<String> {
    let mut out = Vec::new();
    for e in fs::read_dir(root).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            let name = p.file_name().unwrap().to_string_lossy().to_string();
            out.extend(walk(&p).into_iter().map(|s| format!("{name}/{s}")));
        } else {
            out.push(p.file_name().unwrap().to_string_lossy().to_string());
        }
    }
    out
}

#[test]
fn describe_counts_and_balance() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        clips_train: 400,
        clips_eval: 1,
        audio_dim: 2,
        video_dim: 2,
        ..SynthSpec::default()
    };
    let out = generate(&spec, dir.path()).unwrap();
    let s = describe(&out.train_manifest).unwrap();
    assert_eq!(s.clips, 400);
    assert_eq!(s.audio_segments, 400 * 10);
    assert_eq!(s.video_segments, 400 * 40);
    assert_eq!(s.audio_segments_per_clip.get(&10), Some(&400));
    assert_eq!(s.video_segments_per_clip.get(&40), Some(&400));
    let total: usize = s.class_counts.iter().sum();
    let mean = total as f64 / 8.0;
    for &n in &s.class_counts {
        assert!((n as f64 - mean).abs() <= 0.5 * mean, "{:?}", s.class_counts);
    }

    let empty = dir.path().join("empty.tsv");
    fs::write(&empty, "").unwrap();
    let z = describe(&empty).unwrap();
    assert_eq!((z.clips, z.audio_segments, z.video_segments), (0, 0, 0));
}

#[test]
fn noiseless_single_label_is_nearest_prototype_separable() {
    let spec = SynthSpec {
        noise_sigma_audio: 0.0,
        noise_sigma_video: 0.0,
        labels_min: 1,
        labels_max: 1,
        audio_dim: 16,
        video_dim: 16,
        ..tiny_spec(8)
    };
    let protos = synth::prototypes(&spec);
    let (mut scores, mut labels) = (Vec::new(), Vec::new());
    for k in 0..40 {
        let clip = synth::generate_clip(&spec, &protos, &format!("c{k}")).unwrap();
        let d = spec.audio_dim;
        let row: Vec<f64> = (0..spec.num_classes)
            .map(|c| {
                // best segment match against each prototype
                (0..clip.audio.intervals.len())
                    .map(|s| {
                        let seg = &clip.audio.values[s * d..(s + 1) * d];
                        -seg.iter().zip(&protos.audio[c]).map(|(&x, &p)| (x as f64 - p).powi(2)).sum::<f64>()
                    })
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        scores.extend(row);
        labels.extend((0..spec.num_classes).map(|c| if clip.labels.contains(&c) { 1.0 } else { 0.0 }));
    }
    let m = thgcl::metrics::mean_average_precision(&scores, &labels, spec.num_classes).unwrap();
    assert_eq!(m.value, 1.0);
}

#[test]
fn lag_shifts_video_windows() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec {
        lag_ms: 1000,
        ..tiny_spec(9)
    };
    let out = generate(&spec, dir.path()).unwrap();
    let text = fs::read_to_string(out.events).unwrap();
    let mut ids = BTreeSet::new();
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split('\t').collect();
        let n: Vec<u32> = f[2..].iter().map(|x| x.parse().unwrap()).collect();
        assert_eq!(n[2], (n[0] + 1000).min(spec.clip_ms));
        assert_eq!(n[3], (n[1] + 1000).min(spec.clip_ms));
        assert_eq!(n[1] - n[0], spec.event_len_ms);
        ids.insert(f[0].to_string());
    }
    assert_eq!(ids.len(), 64);
}

#[test]
fn contrastive_training_needs_two_clips_per_batch() {
    let cfg = TrainConfig {
        batch_size: 1,
        ..tiny_config(0)
    };
    let dir = tempfile::tempdir().unwrap();
    let (tr, ev) = datasets(dir.path(), &tiny_spec(10));
    assert!(matches!(train_on(&tr, &ev, &cfg, &mut |_| {}), Err(Error::Config(_))));
    let fl = TrainConfig {
        loss_mode: LossMode::FlOnly,
        max_iterations: 2,
        ..cfg
    };
    assert!(train_on(&tr, &ev, &fl, &mut |_| {}).is_ok());
}

#[test]
fn log_files_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let (tr, ev) = datasets(dir.path(), &tiny_spec(11));
    let out = train_on(&tr, &ev, &tiny_config(2), &mut |_| {}).unwrap();
    out.log.write_to_dir(dir.path()).unwrap();
    let text = fs::read_to_string(dir.path().join("train_log.txt")).unwrap();
    assert_eq!(text.lines().count(), out.log.events.len());
    assert!(text.lines().next().unwrap().starts_with("iter=1 fl="));
    let loss = fs::read_to_string(dir.path().join("loss_curve.tsv")).unwrap();
    assert_eq!(loss.lines().count(), 1 + 12);
    let evals = fs::read_to_string(dir.path().join("eval_curve.tsv")).unwrap();
    assert_eq!(evals.lines().count(), 1 + out.log.evaluations().count());
    assert!(matches!(out.log.events.last(), Some(LogEvent::Eval(e)) if e.iter == 12));
}
