//! Dataset manifests: one clip per line,
//! `clip_id<TAB>audio_path<TAB>video_path<TAB>label,label,...`.
//!
//! Relative feature paths resolve against the manifest's directory.

use std::collections::{BTreeSet, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::features::{read_feature_file, FeatureSequence, Modality};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClipRecord {
    pub clip_id: String,
    pub audio_path: PathBuf,
    pub video_path: PathBuf,
    pub labels: BTreeSet<usize>,
}

/// A clip's features after loading and cross-checking.
#[derive(Debug, Clone)]
pub struct LoadedClip {
    pub record: ClipRecord,
    pub audio: FeatureSequence,
    pub video: FeatureSequence,
}

impl ClipRecord {
    /// Reads both feature files and checks modality tags and that the two
    /// streams end within one segment length of each other.
    pub fn load(&self) -> Result<LoadedClip> {
        let audio = read_feature_file(&self.audio_path)?;
        let video = read_feature_file(&self.video_path)?;
        for (seq, want, path) in [
            (&audio, Modality::Audio, &self.audio_path),
            (&video, Modality::Video, &self.video_path),
        ] {
            if seq.modality != want {
                return Err(Error::Config(format!(
                    "{}: expected {} features, found {}",
                    path.display(),
                    want.name(),
                    seq.modality.name()
                )));
            }
        }
        let seg_len = |s: &FeatureSequence| s.intervals.last().map_or(0, |iv| iv.len_ms());
        let tolerance = seg_len(&audio).max(seg_len(&video));
        if audio.end_ms().abs_diff(video.end_ms()) > tolerance {
            return Err(Error::Config(format!(
                "clip {}: audio ends at {} ms but video at {} ms",
                self.clip_id,
                audio.end_ms(),
                video.end_ms()
            )));
        }
        Ok(LoadedClip {
            record: self.clone(),
            audio,
            video,
        })
    }

    /// Multi-hot label row.
    pub fn label_vector(&self, num_classes: usize) -> Vec<f64> {
        let mut row = vec![0.0; num_classes];
        for &c in &self.labels {
            row[c] = 1.0;
        }
        row
    }
}

fn parse_line(line: &str, base: &Path, num_classes: usize) -> std::result::Result<ClipRecord, String> {
    let fields: Vec<&str> = line.split('\t').collect();
    let [clip_id, audio, video, labels] = fields.as_slice() else {
        return Err(format!("expected 4 tab-separated fields, found {}", fields.len()));
    };
    if clip_id.is_empty() {
        return Err("empty clip id".into());
    }
    let mut set = BTreeSet::new();
    for tok in labels.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        let c: usize = tok
            .parse()
            .map_err(|_| format!("label {tok:?} is not a class index"))?;
        if c >= num_classes {
            return Err(format!("label {c} out of range for {num_classes} classes"));
        }
        set.insert(c);
    }
    let resolve = |p: &str| {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    };
    Ok(ClipRecord {
        clip_id: clip_id.to_string(),
        audio_path: resolve(audio),
        video_path: resolve(video),
        labels: set,
    })
}

/// Parses manifest text; `base` anchors relative paths.
pub fn parse_manifest(text: &str, base: &Path, num_classes: usize, origin: &Path) -> Result<Vec<ClipRecord>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let err = |detail: String| Error::Manifest {
            path: origin.to_path_buf(),
            line: idx + 1,
            detail,
        };
        let rec = parse_line(line, base, num_classes).map_err(err)?;
        if !seen.insert(rec.clip_id.clone()) {
            return Err(err(format!("duplicate clip id {:?}", rec.clip_id)));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn load_manifest(path: impl AsRef<Path>, num_classes: usize) -> Result<Vec<ClipRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    parse_manifest(&text, base, num_classes, path)
}

/// Largest label index plus one, scanning without a class bound.
pub fn infer_num_classes(path: impl AsRef<Path>) -> Result<usize> {
    let recs = load_manifest(path, usize::MAX)?;
    Ok(recs
        .iter()
        .filter_map(|r| r.labels.iter().next_back())
        .max()
        .map_or(0, |&c| c + 1))
}

/// Serialises records, writing paths relative to `base` where possible.
pub fn format_manifest(records: &[ClipRecord], base: &Path) -> String {
    let rel = |p: &Path| {
        p.strip_prefix(base)
            .unwrap_or(p)
            .to_string_lossy()
            .into_owned()
    };
    let mut out = String::new();
    for r in records {
        let labels: Vec<String> = r.labels.iter().map(|c| c.to_string()).collect();
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}",
            r.clip_id,
            rel(&r.audio_path),
            rel(&r.video_path),
            labels.join(",")
        );
    }
    out
}
