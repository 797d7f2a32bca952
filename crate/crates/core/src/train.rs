//! Mini-batch training with Adam, early stopping on validation mAP,
//! checkpointing and line-oriented training logs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::adam::{adam_step, AdamConfig, AdamState};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::graph::{build_graph, GraphConfig, TemporalHeteroGraph, TemporalMode};
use crate::loss::{contrastive_loss, focal_loss, total_loss, total_loss_value, LossConfig};
use crate::manifest::{infer_num_classes, load_manifest, ClipRecord, LoadedClip};
use crate::metrics::EvalReport;
use crate::model::{forward, ClipInput, ModelConfig, ThgnModel};
use crate::seeding::{clip_rng, derive_seed, derived_rng};
use crate::tape::Tape;
use crate::tensor::{Precision, Tensor};

/// Which terms of the objective are optimized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Focal plus contrastive.
    #[default]
    FlCl,
    /// Focal only.
    FlOnly,
    /// Plain binary cross-entropy (focal with `gamma = 0`, `alpha = 1`).
    CeOnly,
}

impl LossMode {
    pub const ALL: [LossMode; 3] = [LossMode::FlCl, LossMode::FlOnly, LossMode::CeOnly];

    pub fn name(self) -> &'static str {
        match self {
            LossMode::FlCl => "fl_cl",
            LossMode::FlOnly => "fl_only",
            LossMode::CeOnly => "ce_only",
        }
    }

    pub fn uses_contrastive(self) -> bool {
        self == LossMode::FlCl
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub max_iterations: usize,
    pub batch_size: usize,
    /// Evaluations without improvement before stopping.
    pub early_stop_patience: usize,
    pub eval_every: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub loss_cfg: LossConfig,
    pub graph_cfg: GraphConfig,
    pub hidden: usize,
    pub d: usize,
    pub layers: usize,
    pub loss_mode: LossMode,
    pub temporal_mode: TemporalMode,
    /// 0 infers the class count from the training manifest.
    pub num_classes: usize,
    /// Fraction of the training manifest held out for validation when no
    /// validation manifest is given.
    pub val_fraction: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_manifest: Option<PathBuf>,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.005,
            max_iterations: 5000,
            batch_size: 32,
            early_stop_patience: 10,
            eval_every: 100,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            loss_cfg: LossConfig::default(),
            graph_cfg: GraphConfig::default(),
            hidden: 512,
            d: 128,
            layers: 4,
            loss_mode: LossMode::FlCl,
            temporal_mode: TemporalMode::GauHaw,
            num_classes: 0,
            val_fraction: 0.2,
            val_manifest: None,
            precision: Precision::F64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.loss_mode.uses_contrastive() && self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size {} is too small for the contrastive loss (needs at least 2)",
                self.batch_size
            )));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam_eps must be positive".into()));
        }
        if self.val_manifest.is_none() && !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!(
                "val_fraction must lie in (0, 1), got {}",
                self.val_fraction
            )));
        }
        self.loss_cfg.validate()?;
        self.graph_config().validate()
    }

    /// Parses the TOML-style key/value configuration text. Nested settings use
    /// dotted keys such as `loss_cfg.temperature = 0.1`.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Graph settings with the run's temporal mode applied.
    pub fn graph_config(&self) -> GraphConfig {
        GraphConfig {
            temporal_mode: self.temporal_mode,
            ..self.graph_cfg.clone()
        }
    }

    pub fn adam_config(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn model_config(&self, audio_dim: usize, video_dim: usize, num_classes: usize) -> ModelConfig {
        ModelConfig {
            audio_dim,
            video_dim,
            d: self.d,
            hidden: self.hidden,
            layers: self.layers,
            num_classes,
        }
    }

    /// Seed for the per-clip excitation draws.
    pub fn xi_seed(&self) -> u64 {
        derive_seed(self.seed, &format!("xi/{}", self.graph_cfg.xi_seed))
    }
}

/// Loaded clips with their multi-hot labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub clips: Vec<LoadedClip>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn load(records: &[ClipRecord], num_classes: usize) -> Result<Self> {
        let clips = records.iter().map(ClipRecord::load).collect::<Result<Vec<_>>>()?;
        Ok(Dataset { clips, num_classes })
    }

    pub fn from_manifest(path: impl AsRef<Path>, num_classes: usize) -> Result<Self> {
        Self::load(&load_manifest(path, num_classes)?, num_classes)
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    /// Common `(audio_dim, video_dim)` of every clip.
    pub fn feature_dims(&self) -> Result<(usize, usize)> {
        let first = self
            .clips
            .first()
            .ok_or_else(|| Error::Config("dataset has no clips".into()))?;
        let dims = (first.audio.dim, first.video.dim);
        for c in &self.clips {
            if (c.audio.dim, c.video.dim) != dims {
                return Err(Error::Config(format!(
                    "clip {} has feature widths {}/{}, expected {}/{}",
                    c.record.clip_id, c.audio.dim, c.video.dim, dims.0, dims.1
                )));
            }
        }
        Ok(dims)
    }

    /// One graph per clip; excitation draws come from a per-clip stream so
    /// each graph is independent of dataset order.
    pub fn build_graphs(&self, cfg: &GraphConfig, xi_seed: u64) -> Result<Vec<TemporalHeteroGraph>> {
        self.clips
            .iter()
            .map(|c| {
                let mut rng = clip_rng(xi_seed, &c.record.clip_id);
                build_graph(&c.audio, &c.video, cfg, &mut rng)
            })
            .collect()
    }

    pub fn labels(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * self.num_classes);
        for &i in indices {
            data.extend(self.clips[i].record.label_vector(self.num_classes));
        }
        Tensor::matrix(indices.len(), self.num_classes, data).expect("label matrix shape")
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            clips: indices.iter().map(|&i| self.clips[i].clone()).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Seeded clip-level split into `(train, validation)`.
    pub fn split(&self, val_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        let n = self.len();
        let n_val = ((n as f64) * val_fraction).round() as usize;
        let n_val = n_val.clamp(1, n.saturating_sub(1));
        if n < 2 {
            return Err(Error::Config(format!("cannot split {n} clips into train and validation")));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut derived_rng(seed, "split"));
        let (val, train) = order.split_at(n_val);
        let (mut train, mut val) = (train.to_vec(), val.to_vec());
        train.sort_unstable();
        val.sort_unstable();
        Ok((self.subset(&train), self.subset(&val)))
    }
}

/// One optimizer step's loss components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterRecord {
    pub iter: usize,
    pub fl: f64,
    pub cl: f64,
    pub total: f64,
    pub wall_ms: u128,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalRecord {
    pub iter: usize,
    pub map: f64,
    pub auc: f64,
    pub wall_ms: u128,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LogEvent {
    Iter(IterRecord),
    Eval(EvalRecord),
}

impl LogEvent {
    /// `iter=<n> fl=<v> cl=<v> total=<v> wall_ms=<t>` or
    /// `eval_iter=<n> map=<v> auc=<v> wall_ms=<t>`.
    pub fn to_line(&self) -> String {
        match self {
            LogEvent::Iter(r) => format!(
                "iter={} fl={} cl={} total={} wall_ms={}",
                r.iter, r.fl, r.cl, r.total, r.wall_ms
            ),
            LogEvent::Eval(r) => format!(
                "eval_iter={} map={} auc={} wall_ms={}",
                r.iter, r.map, r.auc, r.wall_ms
            ),
        }
    }
}

/// Append-only record of a training run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub events: Vec<LogEvent>,
}

impl TrainLog {
    pub fn push(&mut self, event: LogEvent) {
        self.events.push(event);
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn iterations(&self) -> impl Iterator<Item = &IterRecord> {
        self.events.iter().filter_map(|e| match e {
            LogEvent::Iter(r) => Some(r),
            LogEvent::Eval(_) => None,
        })
    }

    pub fn evaluations(&self) -> impl Iterator<Item = &EvalRecord> {
        self.events.iter().filter_map(|e| match e {
            LogEvent::Eval(r) => Some(r),
            LogEvent::Iter(_) => None,
        })
    }

    /// `(fl, cl, total)` per iteration, without timestamps.
    pub fn loss_sequence(&self) -> Vec<(f64, f64, f64)> {
        self.iterations().map(|r| (r.fl, r.cl, r.total)).collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&e.to_line());
            out.push('\n');
        }
        out
    }

    /// Tab-separated loss and evaluation curves with a header row.
    pub fn curves(&self) -> (String, String) {
        let mut loss = String::from("iter\tfl\tcl\ttotal\twall_ms\n");
        for r in self.iterations() {
            let _ = writeln!(loss, "{}\t{}\t{}\t{}\t{}", r.iter, r.fl, r.cl, r.total, r.wall_ms);
        }
        let mut eval = String::from("iter\tmap\tauc\twall_ms\n");
        for r in self.evaluations() {
            let _ = writeln!(eval, "{}\t{}\t{}\t{}", r.iter, r.map, r.auc, r.wall_ms);
        }
        (loss, eval)
    }

    /// Writes `train_log.txt`, `loss_curve.tsv` and `eval_curve.tsv`.
    pub fn write_to_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (loss, eval) = self.curves();
        for (name, body) in [
            ("train_log.txt", self.to_text()),
            ("loss_curve.tsv", loss),
            ("eval_curve.tsv", eval),
        ] {
            let path = dir.join(name);
            fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// Anything that maps clips to per-class scores.
pub trait ClipScorer {
    /// One row of `num_classes` scores per input clip.
    fn score_batch(&self, clips: &[&LoadedClip], graphs: &[&TemporalHeteroGraph]) -> Result<Vec<Vec<f64>>>;
}

/// Scores with a trained model; forward only.
pub struct ModelScorer<'a> {
    pub model: &'a ThgnModel,
    pub precision: Precision,
}

impl ClipScorer for ModelScorer<'_> {
    fn score_batch(&self, clips: &[&LoadedClip], graphs: &[&TemporalHeteroGraph]) -> Result<Vec<Vec<f64>>> {
        let inputs: Vec<ClipInput<'_>> = clips
            .iter()
            .zip(graphs)
            .map(|(c, g)| ClipInput {
                audio: &c.audio,
                video: &c.video,
                graph: g,
            })
            .collect();
        let mut tape = Tape::with_precision(self.precision);
        let out = self.model.predict(&inputs, &mut tape)?;
        Ok((0..out.logits.rows()).map(|i| out.logits.row(i).to_vec()).collect())
    }
}

const EVAL_CHUNK: usize = 64;

/// Scores every clip and computes mAP / AUC.
pub fn evaluate_with(
    scorer: &dyn ClipScorer,
    data: &Dataset,
    graphs: &[TemporalHeteroGraph],
) -> Result<EvalReport> {
    if graphs.len() != data.len() {
        return Err(Error::shape("evaluate", &[data.len()], &[graphs.len()]));
    }
    let c = data.num_classes;
    let mut scores = Vec::with_capacity(data.len() * c);
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(EVAL_CHUNK) {
        let clips: Vec<&LoadedClip> = chunk.iter().map(|&i| &data.clips[i]).collect();
        let gs: Vec<&TemporalHeteroGraph> = chunk.iter().map(|&i| &graphs[i]).collect();
        for row in scorer.score_batch(&clips, &gs)? {
            if row.len() != c {
                return Err(Error::shape("evaluate", &[c], &[row.len()]));
            }
            scores.extend(row);
        }
    }
    let labels = data.labels(&indices);
    EvalReport::compute(&scores, labels.data(), c)
}

/// Evaluates a stored checkpoint on a manifest.
pub fn evaluate(checkpoint: &Checkpoint, manifest: impl AsRef<Path>) -> Result<EvalReport> {
    let mc = &checkpoint.model.config;
    let data = Dataset::from_manifest(manifest, mc.num_classes)?;
    let (a, v) = data.feature_dims()?;
    if (a, v) != (mc.audio_dim, mc.video_dim) {
        return Err(Error::CheckpointMismatch(format!(
            "features are {a}/{v} wide, model expects {}/{}",
            mc.audio_dim, mc.video_dim
        )));
    }
    let cfg = &checkpoint.train;
    let graphs = data.build_graphs(&cfg.graph_config(), cfg.xi_seed())?;
    let scorer = ModelScorer {
        model: &checkpoint.model,
        precision: cfg.precision,
    };
    evaluate_with(&scorer, &data, &graphs)
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters at the best validation mAP (the initial model when no
    /// iteration ran).
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
    pub best_map: Option<f64>,
    pub iterations_run: usize,
}

/// Loss components of one batch, with gradients applied to `model`.
fn train_step(
    model: &mut ThgnModel,
    adam: &mut AdamState,
    cfg: &TrainConfig,
    data: &Dataset,
    graphs: &[TemporalHeteroGraph],
    batch: &[usize],
) -> Result<(f64, f64, f64)> {
    let mut tape = Tape::with_precision(cfg.precision);
    let bound = model.bind(&mut tape)?;
    let inputs: Vec<ClipInput<'_>> = batch
        .iter()
        .map(|&i| ClipInput {
            audio: &data.clips[i].audio,
            video: &data.clips[i].video,
            graph: &graphs[i],
        })
        .collect();
    let out = forward(&mut tape, &bound, &inputs)?;
    let labels = data.labels(batch);
    let lc = &cfg.loss_cfg;
    let (gamma, alpha) = match cfg.loss_mode {
        LossMode::CeOnly => (0.0, 1.0),
        LossMode::FlCl | LossMode::FlOnly => (lc.focal_gamma, lc.focal_alpha),
    };
    let fl = focal_loss(&mut tape, out.logits, &labels, gamma, alpha)?;
    let (loss, cl_value) = if cfg.loss_mode.uses_contrastive() {
        let cl = contrastive_loss(&mut tape, out.audio_embed, out.video_embed, lc.temperature)?;
        (total_loss(&mut tape, fl, cl, lc)?, tape.value(cl).item())
    } else {
        (tape.scale(fl, lc.omega_fl), 0.0)
    };
    let fl_value = tape.value(fl).item();
    let total = total_loss_value(fl_value, cl_value, lc);
    if !total.is_finite() {
        return Err(Error::Domain {
            op: "train_step",
            detail: format!("non-finite loss (fl={fl_value}, cl={cl_value})"),
        });
    }
    let grads = tape.backward(loss)?;
    let grad_refs: Vec<&Tensor> = bound.all.iter().map(|(_, v)| grads.wrt(*v)).collect();
    adam_step(
        model.params.iter_mut().map(|(_, t)| t),
        &grad_refs,
        adam,
        &cfg.adam_config(),
    )?;
    for (_, t) in model.params.iter_mut() {
        cfg.precision.round_slice(t.data_mut());
    }
    Ok((fl_value, cl_value, total))
}

/// Trains on in-memory datasets. `observer` sees each log event as it is
/// appended.
pub fn train_on(
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&LogEvent),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if val.is_empty() {
        return Err(Error::Config("validation set is empty".into()));
    }
    if train.num_classes != val.num_classes {
        return Err(Error::Config(format!(
            "training data has {} classes, validation data {}",
            train.num_classes, val.num_classes
        )));
    }
    let (audio_dim, video_dim) = train.feature_dims()?;
    if val.feature_dims()? != (audio_dim, video_dim) {
        return Err(Error::Config("validation feature widths differ from training".into()));
    }
    let model_cfg = cfg.model_config(audio_dim, video_dim, train.num_classes);
    let mut model = ThgnModel::new(model_cfg, derive_seed(cfg.seed, "init"))?;
    for (_, t) in model.params.iter_mut() {
        cfg.precision.round_slice(t.data_mut());
    }

    let graph_cfg = cfg.graph_config();
    let train_graphs = train.build_graphs(&graph_cfg, cfg.xi_seed())?;
    let val_graphs = val.build_graphs(&graph_cfg, cfg.xi_seed())?;

    let batch_size = cfg.batch_size.min(train.len());
    if cfg.loss_mode.uses_contrastive() && batch_size < 2 {
        return Err(Error::BatchTooSmall(batch_size));
    }

    let start = Instant::now();
    let mut log = TrainLog::default();
    let mut emit = |log: &mut TrainLog, e: LogEvent| {
        observer(&e);
        log.push(e);
    };
    let mut best: Option<(f64, ThgnModel)> = None;
    let mut stale = 0usize;
    let mut adam = AdamState::default();
    let mut rng = derived_rng(cfg.seed, "batches");
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let mut iterations_run = 0;

    for iter in 1..=cfg.max_iterations {
        if cursor + batch_size > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let batch = &order[cursor..cursor + batch_size];
        cursor += batch_size;
        let (fl, cl, total) = train_step(&mut model, &mut adam, cfg, train, &train_graphs, batch)?;
        iterations_run = iter;
        emit(
            &mut log,
            LogEvent::Iter(IterRecord {
                iter,
                fl,
                cl,
                total,
                wall_ms: start.elapsed().as_millis(),
            }),
        );

        if iter % cfg.eval_every == 0 || iter == cfg.max_iterations {
            let scorer = ModelScorer {
                model: &model,
                precision: cfg.precision,
            };
            let report = evaluate_with(&scorer, val, &val_graphs)?;
            emit(
                &mut log,
                LogEvent::Eval(EvalRecord {
                    iter,
                    map: report.map.value,
                    auc: report.auc.value,
                    wall_ms: start.elapsed().as_millis(),
                }),
            );
            if best.as_ref().map_or(true, |(m, _)| report.map.value > *m) {
                best = Some((report.map.value, model.clone()));
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.early_stop_patience {
                    break;
                }
            }
        }
    }

    let (best_map, best_model) = match best {
        Some((m, b)) => (Some(m), b),
        None => (None, model),
    };
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            model: best_model,
            train: cfg.clone(),
        },
        log,
        best_map,
        iterations_run,
    })
}

/// Loads the training manifest (and the validation manifest or a seeded
/// split of the training one) and trains.
pub fn train(manifest: impl AsRef<Path>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_observed(manifest, cfg, &mut |_| {})
}

pub fn train_observed(
    manifest: impl AsRef<Path>,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&LogEvent),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let manifest = manifest.as_ref();
    let num_classes = if cfg.num_classes == 0 {
        infer_num_classes(manifest)?
    } else {
        cfg.num_classes
    };
    let mut cfg = cfg.clone();
    cfg.num_classes = num_classes;
    let all = Dataset::from_manifest(manifest, num_classes)?;
    let (train_set, val_set) = match &cfg.val_manifest {
        Some(path) => (all, Dataset::from_manifest(path, num_classes)?),
        None => all.split(cfg.val_fraction, cfg.seed)?,
    };
    train_on(&train_set, &val_set, &cfg, observer)
}
