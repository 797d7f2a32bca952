//! Synthetic multi-label audio-visual clips.
//!
//! Each class owns one unit-norm audio prototype and one unit-norm video
//! prototype. A clip carries one event window per label; audio segments that
//! overlap the window receive the class's audio prototype, video segments that
//! overlap the window shifted by `lag_ms` receive the video prototype, and
//! every segment gets independent Gaussian noise.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{write_feature_file, FeatureSequence, Interval, Modality};
use crate::manifest::{format_manifest, infer_num_classes, load_manifest, ClipRecord};
use crate::seeding::{derive_seed, derived_rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub clips_train: usize,
    pub clips_eval: usize,
    pub clip_ms: u32,
    pub audio_seg_ms: u32,
    pub video_seg_ms: u32,
    pub audio_dim: usize,
    pub video_dim: usize,
    /// Inclusive range of labels per clip.
    pub labels_min: usize,
    pub labels_max: usize,
    pub noise_sigma_audio: f64,
    pub noise_sigma_video: f64,
    /// Video events start this much later than their audio counterparts.
    pub lag_ms: u32,
    pub event_len_ms: u32,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_classes: 8,
            clips_train: 512,
            clips_eval: 128,
            clip_ms: 10_000,
            audio_seg_ms: 960,
            video_seg_ms: 250,
            audio_dim: 128,
            video_dim: 1024,
            labels_min: 1,
            labels_max: 3,
            noise_sigma_audio: 0.1,
            noise_sigma_video: 0.1,
            lag_ms: 0,
            event_len_ms: 2000,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_classes < 2 {
            return fail(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if self.audio_dim == 0 || self.video_dim == 0 {
            return fail("feature dims must be positive".into());
        }
        if self.event_len_ms == 0 || self.clip_ms < self.event_len_ms {
            return fail(format!(
                "event_len_ms {} must be positive and fit in clip_ms {}",
                self.event_len_ms, self.clip_ms
            ));
        }
        if self.audio_seg_ms == 0 || self.video_seg_ms == 0 {
            return fail("segment lengths must be positive".into());
        }
        if self.clip_ms < self.audio_seg_ms || self.clip_ms < self.video_seg_ms {
            return fail("clip_ms must hold at least one segment of each modality".into());
        }
        if self.labels_min == 0 || self.labels_min > self.labels_max || self.labels_max > self.num_classes {
            return fail(format!(
                "labels per clip {}..{} must satisfy 1 <= min <= max <= num_classes",
                self.labels_min, self.labels_max
            ));
        }
        if !(self.noise_sigma_audio >= 0.0 && self.noise_sigma_video >= 0.0) {
            return fail("noise sigmas must be non-negative".into());
        }
        Ok(())
    }

    pub fn audio_segments(&self) -> usize {
        (self.clip_ms / self.audio_seg_ms) as usize
    }

    pub fn video_segments(&self) -> usize {
        (self.clip_ms / self.video_seg_ms) as usize
    }
}

/// One placed event.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EventWindow {
    pub class: usize,
    pub audio: Interval,
    /// The audio window shifted by the lag, cut at the clip end.
    pub video: Interval,
}

/// A generated clip before it is written out.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthClip {
    pub clip_id: String,
    pub labels: BTreeSet<usize>,
    pub events: Vec<EventWindow>,
    pub audio: FeatureSequence,
    pub video: FeatureSequence,
}

/// Per-class unit vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototypes {
    pub audio: Vec<Vec<f64>>,
    pub video: Vec<Vec<f64>>,
}

fn unit_vector(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

pub fn prototypes(spec: &SynthSpec) -> Prototypes {
    let mut rng = derived_rng(spec.seed, "prototypes");
    let audio = (0..spec.num_classes).map(|_| unit_vector(&mut rng, spec.audio_dim)).collect();
    let video = (0..spec.num_classes).map(|_| unit_vector(&mut rng, spec.video_dim)).collect();
    Prototypes { audio, video }
}

fn render(
    modality: Modality,
    intervals: Vec<Interval>,
    dim: usize,
    windows: &[(usize, Interval)],
    protos: &[Vec<f64>],
    sigma: f64,
    rng: &mut impl Rng,
) -> Result<FeatureSequence> {
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut values = Vec::with_capacity(intervals.len() * dim);
    for seg in &intervals {
        let mut row = vec![0.0f64; dim];
        for (class, win) in windows {
            if seg.overlap_ms(win) > 0 {
                row.iter_mut().zip(&protos[*class]).for_each(|(r, p)| *r += p);
            }
        }
        for r in row.iter_mut() {
            if sigma > 0.0 {
                *r += noise.sample(rng);
            }
            values.push(*r as f32);
        }
    }
    let shaped = dim == modality.encoder_dim();
    FeatureSequence::new(modality, shaped, dim, intervals, values).map_err(|kind| Error::Format {
        path: PathBuf::new(),
        kind,
    })
}

/// Generates one clip from its own seeded stream.
pub fn generate_clip(spec: &SynthSpec, protos: &Prototypes, clip_id: &str) -> Result<SynthClip> {
    let mut rng = derived_rng(derive_seed(spec.seed, "clips"), clip_id);
    let k = rng.random_range(spec.labels_min..=spec.labels_max);
    let labels: BTreeSet<usize> = rand::seq::index::sample(&mut rng, spec.num_classes, k)
        .into_iter()
        .collect();
    let mut events = Vec::with_capacity(labels.len());
    for &class in &labels {
        let start = rng.random_range(0..=spec.clip_ms - spec.event_len_ms);
        let audio = Interval::new(start, start + spec.event_len_ms);
        let v_start = (start + spec.lag_ms).min(spec.clip_ms);
        let v_end = (start + spec.event_len_ms + spec.lag_ms).min(spec.clip_ms);
        events.push(EventWindow {
            class,
            audio,
            video: Interval::new(v_start, v_end),
        });
    }
    let audio_windows: Vec<(usize, Interval)> = events.iter().map(|e| (e.class, e.audio)).collect();
    let video_windows: Vec<(usize, Interval)> = events.iter().map(|e| (e.class, e.video)).collect();
    let audio = render(
        Modality::Audio,
        Interval::uniform(spec.audio_segments(), spec.audio_seg_ms),
        spec.audio_dim,
        &audio_windows,
        &protos.audio,
        spec.noise_sigma_audio,
        &mut rng,
    )?;
    let video = render(
        Modality::Video,
        Interval::uniform(spec.video_segments(), spec.video_seg_ms),
        spec.video_dim,
        &video_windows,
        &protos.video,
        spec.noise_sigma_video,
        &mut rng,
    )?;
    Ok(SynthClip {
        clip_id: clip_id.to_string(),
        labels,
        events,
        audio,
        video,
    })
}

/// Paths of a generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub train_manifest: PathBuf,
    pub eval_manifest: PathBuf,
    pub events: PathBuf,
}

/// Writes `train.tsv`, `eval.tsv`, `events.tsv` and `features/*.thgf` under
/// `dir`. Event lines are
/// `clip_id class audio_start audio_end video_start video_end` (tab-separated).
pub fn generate(spec: &SynthSpec, dir: impl AsRef<Path>) -> Result<SynthOutput> {
    spec.validate()?;
    let dir = dir.as_ref();
    let feat_dir = dir.join("features");
    fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
    let protos = prototypes(spec);
    let mut events = String::from("clip_id\tclass\taudio_start_ms\taudio_end_ms\tvideo_start_ms\tvideo_end_ms\n");
    let mut write_split = |split: &str, count: usize| -> Result<PathBuf> {
        let mut records = Vec::with_capacity(count);
        for k in 0..count {
            let id = format!("{split}-{k:05}");
            let clip = generate_clip(spec, &protos, &id)?;
            let audio_path = feat_dir.join(format!("{id}.audio.thgf"));
            let video_path = feat_dir.join(format!("{id}.video.thgf"));
            write_feature_file(&clip.audio, &audio_path)?;
            write_feature_file(&clip.video, &video_path)?;
            for e in &clip.events {
                let _ = writeln!(
                    events,
                    "{id}\t{}\t{}\t{}\t{}\t{}",
                    e.class, e.audio.start_ms, e.audio.end_ms, e.video.start_ms, e.video.end_ms
                );
            }
            records.push(ClipRecord {
                clip_id: id,
                audio_path,
                video_path,
                labels: clip.labels,
            });
        }
        let path = dir.join(format!("{split}.tsv"));
        fs::write(&path, format_manifest(&records, dir)).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    };
    let train_manifest = write_split("train", spec.clips_train)?;
    let eval_manifest = write_split("eval", spec.clips_eval)?;
    let events_path = dir.join("events.tsv");
    fs::write(&events_path, events).map_err(|e| Error::io(&events_path, e))?;
    Ok(SynthOutput {
        train_manifest,
        eval_manifest,
        events: events_path,
    })
}

/// Per-manifest statistics.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetSummary {
    pub clips: usize,
    pub class_counts: Vec<usize>,
    pub audio_segments: usize,
    pub video_segments: usize,
    /// Clip count keyed by audio segment count.
    pub audio_segments_per_clip: BTreeMap<usize, usize>,
    /// Clip count keyed by video segment count.
    pub video_segments_per_clip: BTreeMap<usize, usize>,
    /// Clip count keyed by whole seconds of audio duration.
    pub duration_seconds: BTreeMap<u32, usize>,
}

impl DatasetSummary {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "clips {}", self.clips);
        let _ = writeln!(out, "audio_segments {}", self.audio_segments);
        let _ = writeln!(out, "video_segments {}", self.video_segments);
        for (c, n) in self.class_counts.iter().enumerate() {
            let _ = writeln!(out, "class {c} {n}");
        }
        for (k, n) in &self.audio_segments_per_clip {
            let _ = writeln!(out, "audio_segments_per_clip {k} {n}");
        }
        for (k, n) in &self.video_segments_per_clip {
            let _ = writeln!(out, "video_segments_per_clip {k} {n}");
        }
        for (s, n) in &self.duration_seconds {
            let _ = writeln!(out, "duration_s {s} {n}");
        }
        out
    }
}

/// Summarises a manifest, reading every feature file it names.
pub fn describe(manifest: impl AsRef<Path>) -> Result<DatasetSummary> {
    let manifest = manifest.as_ref();
    let classes = infer_num_classes(manifest)?;
    let records = load_manifest(manifest, classes)?;
    let mut s = DatasetSummary {
        class_counts: vec![0; classes],
        ..DatasetSummary::default()
    };
    for rec in &records {
        let clip = rec.load()?;
        s.clips += 1;
        for &c in &rec.labels {
            s.class_counts[c] += 1;
        }
        let (pa, pv) = (clip.audio.num_segments(), clip.video.num_segments());
        s.audio_segments += pa;
        s.video_segments += pv;
        *s.audio_segments_per_clip.entry(pa).or_default() += 1;
        *s.video_segments_per_clip.entry(pv).or_default() += 1;
        *s.duration_seconds.entry(clip.audio.end_ms() / 1000).or_default() += 1;
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SynthSpec {
        SynthSpec {
            clips_train: 4,
            clips_eval: 2,
            audio_dim: 6,
            video_dim: 10,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn segment_counts() {
        let s = SynthSpec::default();
        assert_eq!(s.audio_segments(), 10);
        assert_eq!(s.video_segments(), 40);
    }

    #[test]
    fn validation() {
        assert!(SynthSpec::default().validate().is_ok());
        let bad = SynthSpec {
            num_classes: 1,
            labels_max: 1,
            ..SynthSpec::default()
        };
        assert!(bad.validate().is_err());
        let bad = SynthSpec {
            event_len_ms: 20_000,
            ..SynthSpec::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn noiseless_single_label_segments_are_prototypes() {
        let spec = SynthSpec {
            noise_sigma_audio: 0.0,
            noise_sigma_video: 0.0,
            labels_max: 1,
            ..tiny()
        };
        let protos = prototypes(&spec);
        let clip = generate_clip(&spec, &protos, "x").unwrap();
        let e = clip.events[0];
        for (k, iv) in clip.audio.intervals.iter().enumerate() {
            let row = &clip.audio.values[k * spec.audio_dim..(k + 1) * spec.audio_dim];
            if iv.overlap_ms(&e.audio) > 0 {
                for (a, p) in row.iter().zip(&protos.audio[e.class]) {
                    assert_eq!(*a, *p as f32);
                }
            } else {
                assert!(row.iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn lag_shifts_video_windows() {
        let spec = SynthSpec {
            lag_ms: 1000,
            ..tiny()
        };
        let protos = prototypes(&spec);
        for k in 0..20 {
            let clip = generate_clip(&spec, &protos, &format!("c{k}")).unwrap();
            for e in &clip.events {
                assert_eq!(e.video.start_ms, (e.audio.start_ms + 1000).min(spec.clip_ms));
            }
        }
    }
}
