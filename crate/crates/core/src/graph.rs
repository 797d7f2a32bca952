//! Per-clip temporal heterogeneous graphs.
//!
//! Audio and video segments become nodes. Intra-modal edges connect nodes
//! whose index offset is within `span` and divisible by `dilation`; every
//! node keeps a self-loop. Inter-modal edges connect an audio node to the
//! overlapping video nodes whose centers are nearest to its own. Edges are
//! directed toward the aggregating node, so row `i` of an adjacency holds the
//! weights node `i` gives to its neighbors.
//!
//! Intra-modal weights use a Gaussian of the index offset; inter-modal
//! weights use a sigmoid of a random excitation term plus a recency ratio.
//! [`TemporalMode`] swaps these for the ablation arms.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureSequence, Interval};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum XiMode {
    #[default]
    Sampled,
    Fixed,
}

/// Which weighting family each edge type uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalMode {
    /// Gaussian intra-modal, Hawkes inter-modal.
    #[default]
    GauHaw,
    /// Hawkes on every edge; intra edges use the node's own neighborhood
    /// bounds as the audio bounds.
    BothHaw,
    /// Gaussian on every edge; inter edges use the incident-audio bounds.
    BothGau,
}

impl TemporalMode {
    pub fn name(self) -> &'static str {
        match self {
            TemporalMode::GauHaw => "gau_haw",
            TemporalMode::BothHaw => "both_haw",
            TemporalMode::BothGau => "both_gau",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphConfig {
    pub span_audio: usize,
    pub span_video: usize,
    pub span_inter: usize,
    pub dilation_audio: usize,
    pub dilation_video: usize,
    pub tau: f64,
    pub xi_mode: XiMode,
    pub xi_seed: u64,
    pub xi_clamp_eps: f64,
    /// Set from the training configuration's `temporal_mode`.
    #[serde(skip)]
    pub temporal_mode: TemporalMode,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            span_audio: 6,
            span_video: 4,
            span_inter: 3,
            dilation_audio: 3,
            dilation_video: 4,
            tau: 1.0,
            xi_mode: XiMode::Sampled,
            xi_seed: 0,
            xi_clamp_eps: 1e-6,
            temporal_mode: TemporalMode::GauHaw,
        }
    }
}

impl GraphConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("span_audio", self.span_audio),
            ("span_video", self.span_video),
            ("span_inter", self.span_inter),
            ("dilation_audio", self.dilation_audio),
            ("dilation_video", self.dilation_video),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.xi_clamp_eps > 0.0 && self.xi_clamp_eps < 0.5) {
            return Err(Error::Config(format!(
                "xi_clamp_eps must lie in (0, 0.5), got {}",
                self.xi_clamp_eps
            )));
        }
        Ok(())
    }
}

/// Neighbors of node `i` among `count` nodes: itself plus every `j` with
/// `|i - j| <= span` and `|i - j|` divisible by `dilation`. Sorted.
pub fn intra_neighbors(i: usize, count: usize, span: usize, dilation: usize) -> Vec<usize> {
    let lo = i.saturating_sub(span);
    let hi = (i + span).min(count.saturating_sub(1));
    (lo..=hi)
        .filter(|&j| j == i || (dilation > 0 && i.abs_diff(j) % dilation == 0))
        .collect()
}

/// Gaussian temporal weight `exp(-(i-j)^2 / (2 (p_max - p_min + 1)^2))`.
pub fn gaussian_weight(i: i64, j: i64, p_min: i64, p_max: i64) -> f64 {
    gaussian_log_weight(i, j, p_min, p_max).exp()
}

fn gaussian_log_weight(i: i64, j: i64, p_min: i64, p_max: i64) -> f64 {
    let d = (i - j) as f64;
    let width = (p_max - p_min + 1) as f64;
    -(d * d) / (2.0 * width * width)
}

/// Default clamp keeping `xi` away from 0 and 1.
pub const DEFAULT_XI_CLAMP_EPS: f64 = 1e-6;

/// Hawkes inter-modal weight
/// `sigmoid(ln(xi) / ln(1 - xi) + (p_a_max - p_v + 1) / (p_a_max - p_a_min + 1)) / tau`,
/// with `xi` clamped to `[1e-6, 1 - 1e-6]`.
pub fn hawkes_weight(p_v: i64, p_a_max: i64, p_a_min: i64, xi: f64, tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("tau must be positive, got {tau}")));
    }
    let z = hawkes_argument(p_v, p_a_max, p_a_min, xi, DEFAULT_XI_CLAMP_EPS);
    Ok(crate::tape::sigmoid(z) / tau)
}

fn hawkes_argument(p_v: i64, p_a_max: i64, p_a_min: i64, xi: f64, eps: f64) -> f64 {
    let xi = xi.clamp(eps, 1.0 - eps);
    let excitation = xi.ln() / (1.0 - xi).ln();
    let recency = (p_a_max - p_v + 1) as f64 / (p_a_max - p_a_min + 1) as f64;
    excitation + recency
}

fn hawkes_log_weight(
    p_v: i64,
    p_a_max: i64,
    p_a_min: i64,
    xi: f64,
    tau: f64,
    eps: f64,
) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("tau must be positive, got {tau}")));
    }
    Ok(log_sigmoid(hawkes_argument(p_v, p_a_max, p_a_min, xi, eps)) - tau.ln())
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Inter-modal edges `(audio, video)`: video node `j` is linked to audio
/// node `i` when their intervals overlap and `j` is among the `span_inter`
/// overlapping video nodes whose centers lie closest to `i`'s center (ties
/// go to the earlier video node). Sorted by audio then video index.
pub fn inter_edges(audio: &[Interval], video: &[Interval], span_inter: usize) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    for (i, a) in audio.iter().enumerate() {
        let mut candidates: Vec<(u64, usize)> = video
            .iter()
            .enumerate()
            .filter(|(_, v)| a.overlap_ms(v) > 0)
            .map(|(j, v)| (a.center_x2().abs_diff(v.center_x2()), j))
            .collect();
        candidates.sort_unstable();
        let mut chosen: Vec<usize> = candidates.iter().take(span_inter).map(|&(_, j)| j).collect();
        chosen.sort_unstable();
        edges.extend(chosen.into_iter().map(|j| (i, j)));
    }
    edges
}

/// Divides every non-zero row by its sum; zero rows are left as they are.
pub fn row_normalize(a: &Tensor) -> Tensor {
    let (r, c) = a.dims2().expect("adjacency must be rank 2");
    let mut out = a.clone();
    for i in 0..r {
        let row = &mut out.data_mut()[i * c..(i + 1) * c];
        let s: f64 = row.iter().sum();
        if s != 0.0 {
            row.iter_mut().for_each(|x| *x /= s);
        }
    }
    out
}

/// A weighted, directed adjacency (row = destination).
#[derive(Debug, Clone, PartialEq)]
pub struct Adjacency {
    /// Raw edge weights, zero where there is no edge.
    pub weights: Tensor,
    /// Row-normalized weights.
    pub normalized: Tensor,
    /// Edge presence.
    pub mask: Vec<bool>,
    /// Log of `normalized`, computed in log space so tiny weights stay finite;
    /// zero where there is no edge.
    pub log_normalized: Vec<f64>,
}

impl Adjacency {
    fn from_log_weights(rows: usize, cols: usize, log_w: &[Option<f64>]) -> Self {
        let mask: Vec<bool> = log_w.iter().map(Option::is_some).collect();
        let raw: Vec<f64> = log_w
            .iter()
            .map(|lw| lw.map_or(0.0, |v| v.exp().max(f64::MIN_POSITIVE)))
            .collect();
        let weights = Tensor::matrix(rows, cols, raw).expect("adjacency shape");
        let normalized = row_normalize(&weights);
        let mut log_normalized = vec![0.0; rows * cols];
        for i in 0..rows {
            let row = &log_w[i * cols..(i + 1) * cols];
            let max = row.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let lse = max + row.iter().flatten().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (j, lw) in row.iter().enumerate() {
                if let Some(v) = lw {
                    log_normalized[i * cols + j] = v - lse;
                }
            }
        }
        Adjacency {
            weights,
            normalized,
            mask,
            log_normalized,
        }
    }

    pub fn rows(&self) -> usize {
        self.weights.rows()
    }

    pub fn cols(&self) -> usize {
        self.weights.cols()
    }

    pub fn nnz(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// `(dst, src, weight, normalized)` for every edge, row-major.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, f64, f64)> + '_ {
        let c = self.cols();
        self.mask.iter().enumerate().filter(|(_, &m)| m).map(move |(k, _)| {
            (
                k / c,
                k % c,
                self.weights.data()[k],
                self.normalized.data()[k],
            )
        })
    }
}

/// Graph for one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalHeteroGraph {
    pub audio_nodes: usize,
    pub video_nodes: usize,
    /// `P_a x P_a`.
    pub audio: Adjacency,
    /// `P_v x P_v`.
    pub video: Adjacency,
    /// `P_a x P_v`: audio nodes aggregate from video nodes.
    pub inter: Adjacency,
}

fn sample_xi(cfg: &GraphConfig, rng: &mut impl Rng) -> f64 {
    match cfg.xi_mode {
        XiMode::Sampled => rng.random::<f64>(),
        XiMode::Fixed => 0.5,
    }
}

fn intra_adjacency(
    count: usize,
    span: usize,
    dilation: usize,
    cfg: &GraphConfig,
    rng: &mut impl Rng,
) -> Result<Adjacency> {
    let mut log_w = vec![None; count * count];
    for i in 0..count {
        let nbrs = intra_neighbors(i, count, span, dilation);
        let (p_min, p_max) = (nbrs[0] as i64, *nbrs.last().unwrap() as i64);
        for &j in &nbrs {
            let lw = match cfg.temporal_mode {
                TemporalMode::GauHaw | TemporalMode::BothGau => {
                    gaussian_log_weight(i as i64, j as i64, p_min, p_max)
                }
                TemporalMode::BothHaw => {
                    let xi = sample_xi(cfg, rng);
                    hawkes_log_weight(j as i64, p_max, p_min, xi, cfg.tau, cfg.xi_clamp_eps)?
                }
            };
            log_w[i * count + j] = Some(lw);
        }
    }
    Ok(Adjacency::from_log_weights(count, count, &log_w))
}

/// Builds the graph for one clip. With `XiMode::Sampled`, one `xi` is drawn
/// per inter edge (in edge order) and then, for `BothHaw`, per intra edge.
pub fn build_graph(
    audio: &FeatureSequence,
    video: &FeatureSequence,
    cfg: &GraphConfig,
    rng: &mut impl Rng,
) -> Result<TemporalHeteroGraph> {
    cfg.validate()?;
    if audio.num_segments() == 0 {
        return Err(Error::EmptyModality("audio"));
    }
    if video.num_segments() == 0 {
        return Err(Error::EmptyModality("video"));
    }
    let (pa, pv) = (audio.num_segments(), video.num_segments());

    let edges = inter_edges(&audio.intervals, &video.intervals, cfg.span_inter);
    let mut incident: Vec<Option<(i64, i64)>> = vec![None; pv];
    for &(i, j) in &edges {
        let i = i as i64;
        incident[j] = Some(match incident[j] {
            None => (i, i),
            Some((lo, hi)) => (lo.min(i), hi.max(i)),
        });
    }
    let mut inter_log = vec![None; pa * pv];
    for &(i, j) in &edges {
        let (p_min, p_max) = incident[j].expect("edge implies incident audio");
        let lw = match cfg.temporal_mode {
            TemporalMode::GauHaw | TemporalMode::BothHaw => {
                let xi = sample_xi(cfg, rng);
                hawkes_log_weight(j as i64, p_max, p_min, xi, cfg.tau, cfg.xi_clamp_eps)?
            }
            TemporalMode::BothGau => gaussian_log_weight(i as i64, j as i64, p_min, p_max),
        };
        inter_log[i * pv + j] = Some(lw);
    }
    let inter = Adjacency::from_log_weights(pa, pv, &inter_log);

    let audio_adj = intra_adjacency(pa, cfg.span_audio, cfg.dilation_audio, cfg, rng)?;
    let video_adj = intra_adjacency(pv, cfg.span_video, cfg.dilation_video, cfg, rng)?;
    Ok(TemporalHeteroGraph {
        audio_nodes: pa,
        video_nodes: pv,
        audio: audio_adj,
        video: video_adj,
        inter,
    })
}

impl TemporalHeteroGraph {
    /// Line-oriented dump: one `<kind> <dst> <src> <weight> <normalized>`
    /// line per edge, values to 9 significant digits.
    pub fn to_text(&self, mode: TemporalMode) -> String {
        let mut out = format!(
            "# audio_nodes={} video_nodes={} temporal_mode={}\n",
            self.audio_nodes,
            self.video_nodes,
            mode.name()
        );
        for (kind, adj) in [("audio", &self.audio), ("video", &self.video), ("inter", &self.inter)] {
            for (dst, src, w, n) in adj.edges() {
                let _ = writeln!(out, "{kind} {dst} {src} {w:.8e} {n:.8e}");
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::Modality;
    use crate::seeding::clip_rng;

    fn seq(modality: Modality, count: usize, len: u32) -> FeatureSequence {
        FeatureSequence::new(modality, false, 1, Interval::uniform(count, len), vec![0.0; count]).unwrap()
    }

    #[test]
    fn neighbor_examples() {
        assert_eq!(intra_neighbors(5, 10, 6, 3), vec![2, 5, 8]);
        assert_eq!(intra_neighbors(0, 1, 6, 3), vec![0]);
        assert_eq!(intra_neighbors(4, 9, 4, 4), vec![0, 4, 8]);
    }

    #[test]
    fn gaussian_examples() {
        assert_eq!(gaussian_weight(3, 3, 1, 5), 1.0);
        assert!((gaussian_weight(2, 4, 1, 5) - 0.923116).abs() < 1e-6);
        assert!((gaussian_weight(1, 5, 1, 5) - 0.726149).abs() < 1e-6);
    }

    #[test]
    fn hawkes_examples() {
        let w = hawkes_weight(2, 4, 1, 0.5, 1.0).unwrap();
        assert!((w - 0.851953).abs() < 1e-6, "{w}");
        let half = hawkes_weight(2, 4, 1, 0.5, 2.0).unwrap();
        assert!((half - w / 2.0).abs() < 1e-15);
        let floor = hawkes_weight(2, 4, 1, 0.0, 1.0).unwrap();
        assert!((floor - 1.0).abs() < 1e-6);
        assert!(hawkes_weight(2, 4, 1, 0.5, 0.0).is_err());
    }

    #[test]
    fn inter_edge_examples() {
        let audio = [Interval::new(0, 960)];
        let video = Interval::uniform(8, 250);
        let four: Vec<usize> = inter_edges(&audio, &video, 4).into_iter().map(|e| e.1).collect();
        assert_eq!(four, vec![0, 1, 2, 3]);
        let three: Vec<usize> = inter_edges(&audio, &video, 3).into_iter().map(|e| e.1).collect();
        assert_eq!(three, vec![0, 1, 2]);
        let late = [Interval::new(2000, 2250)];
        assert!(inter_edges(&audio, &late, 3).is_empty());
    }

    #[test]
    fn row_normalize_examples() {
        let a = Tensor::from_rows(&[[2.0, 2.0]]).unwrap();
        assert_eq!(row_normalize(&a).data(), &[0.5, 0.5]);
        assert_eq!(row_normalize(&Tensor::eye(3)), Tensor::eye(3));
        let z = Tensor::zeros(&[2, 2]);
        assert_eq!(row_normalize(&z), z);
    }

    #[test]
    fn single_node_graph() {
        let a = seq(Modality::Audio, 1, 960);
        let v = FeatureSequence::new(Modality::Video, false, 1, vec![Interval::new(0, 250)], vec![0.0]).unwrap();
        let g = build_graph(&a, &v, &GraphConfig::default(), &mut clip_rng(0, "x")).unwrap();
        assert_eq!(g.audio.weights.data(), &[1.0]);
        assert_eq!(g.video.weights.data(), &[1.0]);
        assert!(g.inter.weights.data()[0] > 0.0);
        assert_eq!(g.inter.normalized.data(), &[1.0]);
    }

    #[test]
    fn log_normalized_matches_normalized() {
        let a = seq(Modality::Audio, 10, 960);
        let v = seq(Modality::Video, 40, 250);
        for mode in [TemporalMode::GauHaw, TemporalMode::BothHaw, TemporalMode::BothGau] {
            let cfg = GraphConfig {
                temporal_mode: mode,
                ..GraphConfig::default()
            };
            let g = build_graph(&a, &v, &cfg, &mut clip_rng(7, "clip")).unwrap();
            for adj in [&g.audio, &g.video, &g.inter] {
                for (k, &m) in adj.mask.iter().enumerate() {
                    if m {
                        let n = adj.normalized.data()[k];
                        assert!((adj.log_normalized[k].exp() - n).abs() < 1e-12);
                    }
                }
            }
        }
    }
}
