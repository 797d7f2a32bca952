//! Central finite-difference verification of tape gradients.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::features::{FeatureSequence, Interval, Modality};
use crate::graph::{build_graph, GraphConfig, TemporalHeteroGraph};
use crate::loss::{contrastive_loss, focal_loss, total_loss, LossConfig};
use crate::model::{forward, ClipInput, ModelConfig, ThgnModel};
use crate::seeding::{clip_rng, derived_rng};
use crate::tape::{Tape, Var};
use crate::tensor::{Precision, Tensor};

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// `|a - n| / max(1, |a|, |n|)`, maximised over coordinates. NaN anywhere
/// makes the result NaN.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let mut worst = 0.0f64;
    for (&a, &n) in analytic.iter().zip(numeric) {
        let err = (a - n).abs() / 1f64.max(a.abs()).max(n.abs());
        if err.is_nan() {
            return f64::NAN;
        }
        worst = worst.max(err);
    }
    worst
}

/// Central-difference gradient of a scalar function of `x`.
pub fn numeric_gradient(
    mut eval: impl FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    step: f64,
) -> Result<Vec<f64>> {
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        out.push((plus - minus) / (2.0 * step));
    }
    Ok(out)
}

/// Compares the tape gradient of `f` at `x` against central differences.
///
/// `f` records a scalar-valued computation of its input variable on the
/// given tape. All evaluations run at 64-bit precision.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::with_precision(Precision::F64);
    let xv = tape.param(x.clone());
    let loss = f(&mut tape, xv)?;
    let grads = tape.backward(loss)?;
    let analytic = grads.wrt(xv).data().to_vec();

    let numeric = numeric_gradient(
        |probe| {
            let mut tape = Tape::with_precision(Precision::F64);
            let pv = tape.constant(probe.clone());
            let out = f(&mut tape, pv)?;
            Ok(tape.value(out).item())
        },
        x,
        step,
    )?;
    Ok(max_relative_error(&analytic, &numeric))
}

/// Sizes for the whole-model gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct EndToEndSpec {
    pub clips: usize,
    pub audio_segments: usize,
    pub video_segments: usize,
    pub model: ModelConfig,
    pub graph: GraphConfig,
    pub loss: LossConfig,
    pub seed: u64,
    pub step: f64,
}

impl Default for EndToEndSpec {
    fn default() -> Self {
        EndToEndSpec {
            clips: 2,
            audio_segments: 4,
            video_segments: 6,
            model: ModelConfig {
                audio_dim: 5,
                video_dim: 7,
                d: 6,
                hidden: 8,
                layers: 2,
                num_classes: 3,
            },
            graph: GraphConfig::default(),
            loss: LossConfig::default(),
            seed: 0,
            step: DEFAULT_STEP,
        }
    }
}

/// Worst relative error within one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupError {
    pub name: String,
    pub len: usize,
    pub max_relative_error: f64,
}

struct Fixture {
    clips: Vec<(FeatureSequence, FeatureSequence, TemporalHeteroGraph)>,
    labels: Tensor,
}

fn random_sequence(rng: &mut impl Rng, modality: Modality, segments: usize, seg_ms: u32, dim: usize) -> FeatureSequence {
    let values = (0..segments * dim).map(|_| rng.sample::<f64, _>(StandardNormal) as f32).collect();
    FeatureSequence::new(modality, false, dim, Interval::uniform(segments, seg_ms), values)
        .expect("well-formed random sequence")
}

fn fixture(spec: &EndToEndSpec) -> Result<Fixture> {
    let mut rng = derived_rng(spec.seed, "gradcheck/features");
    // equal clip durations for both modalities
    let total_ms = 240 * (spec.audio_segments * spec.video_segments) as u32;
    let a_ms = total_ms / spec.audio_segments as u32;
    let v_ms = total_ms / spec.video_segments as u32;
    let mut clips = Vec::with_capacity(spec.clips);
    for k in 0..spec.clips {
        let audio = random_sequence(&mut rng, Modality::Audio, spec.audio_segments, a_ms, spec.model.audio_dim);
        let video = random_sequence(&mut rng, Modality::Video, spec.video_segments, v_ms, spec.model.video_dim);
        let graph = build_graph(&audio, &video, &spec.graph, &mut clip_rng(spec.seed, &format!("clip{k}")))?;
        clips.push((audio, video, graph));
    }
    let c = spec.model.num_classes;
    let labels = (0..spec.clips * c)
        .map(|i| if (i / c + i % c) % 2 == 0 { 1.0 } else { 0.0 })
        .collect();
    Ok(Fixture {
        clips,
        labels: Tensor::matrix(spec.clips, c, labels)?,
    })
}

/// Focal plus contrastive objective of the whole model; returns the loss and
/// the `(name, var)` handles of every parameter.
fn objective(tape: &mut Tape, model: &ThgnModel, fx: &Fixture, loss: &LossConfig) -> Result<(Var, Vec<(String, Var)>)> {
    let bound = model.bind(tape)?;
    let inputs: Vec<ClipInput<'_>> = fx
        .clips
        .iter()
        .map(|(audio, video, graph)| ClipInput { audio, video, graph })
        .collect();
    let out = forward(tape, &bound, &inputs)?;
    let fl = focal_loss(tape, out.logits, &fx.labels, loss.focal_gamma, loss.focal_alpha)?;
    let cl = contrastive_loss(tape, out.audio_embed, out.video_embed, loss.temperature)?;
    Ok((total_loss(tape, fl, cl, loss)?, bound.all))
}

/// Checks the analytic gradient of the full training objective against
/// central differences for every parameter tensor, at 64-bit precision.
pub fn end_to_end(spec: &EndToEndSpec) -> Result<Vec<GroupError>> {
    let fx = fixture(spec)?;
    let model = ThgnModel::new(spec.model.clone(), spec.seed)?;
    let mut tape = Tape::with_precision(Precision::F64);
    let (loss, handles) = objective(&mut tape, &model, &fx, &spec.loss)?;
    let grads = tape.backward(loss)?;

    let mut out = Vec::with_capacity(handles.len());
    for (name, var) in handles {
        let analytic = grads.wrt(var).data().to_vec();
        let base = model.params.get(&name).expect("bound parameter").clone();
        let numeric = numeric_gradient(
            |probe| {
                let mut m = model.clone();
                *m.params.get_mut(&name).expect("bound parameter") = probe.clone();
                let mut tape = Tape::with_precision(Precision::F64);
                let (l, _) = objective(&mut tape, &m, &fx, &spec.loss)?;
                Ok(tape.value(l).item())
            },
            &base,
            spec.step,
        )?;
        out.push(GroupError {
            len: base.len(),
            max_relative_error: max_relative_error(&analytic, &numeric),
            name,
        });
    }
    Ok(out)
}
