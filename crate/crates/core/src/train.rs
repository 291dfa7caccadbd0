//! Mini-batch SGD over labelled videos, per-epoch metrics and their CSV log.
//!
//! Each epoch shuffles the training videos, draws one frame per chunk from
//! every video of a batch, takes one SGD step on the batch-mean gradient and
//! then moves the lookup-table rows of the batch's identities towards the
//! embeddings computed before the step (in batch order). Evaluation uses the
//! first frame of every chunk so it does not consume randomness.

use std::collections::BTreeMap;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{self, Gallery};
use crate::gridfile::{self, LabeledVideo};
use crate::model::{GradientBundle, Hyperparams, ModelParams, Weights};
use crate::oim::{self, LossKind, OimState};
use crate::pipeline::{self, Objective};
use crate::rng::Rng;
use crate::sampling::{self, VideoSample};
use crate::synth::{self, SyntheticDataset};
use crate::temporal::TemporalMode;

const SHUFFLE_STREAM: u64 = 0x7368_7566;

/// Training videos plus the held-out gallery and probe splits.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainData {
    pub train: Vec<LabeledVideo>,
    pub gallery: Vec<LabeledVideo>,
    pub probe: Vec<LabeledVideo>,
}

impl From<SyntheticDataset> for TrainData {
    fn from(d: SyntheticDataset) -> Self {
        TrainData {
            train: d.train,
            gallery: d.gallery,
            probe: d.probe,
        }
    }
}

impl TrainData {
    /// Reads `train/`, `gallery/` and `probe/` under `cfg.data`, or generates
    /// the synthetic splits when no directory is given.
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        match &cfg.data {
            Some(dir) => Ok(TrainData {
                train: gridfile::read_split(&dir.join("train"))?,
                gallery: gridfile::read_split(&dir.join("gallery"))?,
                probe: gridfile::read_split(&dir.join("probe"))?,
            }),
            None => Ok(synth::make_synthetic(&cfg.synth, cfg.synth_seed)?.into()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub loss: f64,
    pub oim_loss: f64,
    /// Mean over training videos of Q summed over frames.
    pub penalty: f64,
    /// Held-out mean pairwise Bhattacharyya coefficient of receptive fields.
    pub mean_bhattacharyya: f64,
    /// Held-out mean of each field's largest cell mass.
    pub mean_max_mass: f64,
    pub rank1: f64,
    pub map: f64,
}

/// Where a run stopped on a non-finite loss, gradient or update.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Divergence {
    pub epoch: usize,
    pub step: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainRun {
    /// Final parameters, or the last finite ones if the run diverged.
    pub params: ModelParams,
    pub state: OimState,
    pub metrics: Vec<EpochMetrics>,
    pub divergence: Option<Divergence>,
}

/// Embeddings and receptive-field statistics of a held-out split.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitSummary {
    pub gallery: Gallery,
    pub mean_bhattacharyya: f64,
    pub mean_max_mass: f64,
}

fn check_video(v: &LabeledVideo, h: &Hyperparams) -> Result<()> {
    let Some(f) = v.frames.first() else {
        return Err(Error::InvalidInput("video with no frames".into()));
    };
    if f.grid_shape() != (h.grid_height, h.grid_width) || f.dim() != h.feature_dim {
        return Err(Error::shape(format!(
            "video grid {:?} with D={} does not fit the model ({}x{}, D={})",
            f.grid_shape(),
            f.dim(),
            h.grid_height,
            h.grid_width,
            h.feature_dim
        )));
    }
    Ok(())
}

/// Deterministic descriptor input: the first frame of every chunk.
pub fn eval_sample(video: &LabeledVideo, frames: usize) -> Result<VideoSample> {
    let idx = sampling::first_frame_sample(video.frames.len(), frames)?;
    VideoSample::gather(&video.frames, idx)
}

/// Describes every video of a split in parallel, in input order.
pub fn summarize_split(params: &ModelParams, videos: &[LabeledVideo]) -> Result<SplitSummary> {
    use rayon::prelude::*;
    let described: Vec<(Vec<f64>, f64, f64)> = videos
        .par_iter()
        .map(|v| {
            check_video(v, &params.hyper)?;
            let (descriptor, fields) = pipeline::describe(&eval_sample(v, params.hyper.frames)?, params)?;
            let n = fields.len() as f64;
            let bc = fields.iter().map(|f| f.mean_pairwise_bhattacharyya()).sum::<f64>() / n;
            let mass = fields.iter().map(|f| f.mean_max_mass()).sum::<f64>() / n;
            Ok((descriptor.embedding, bc, mass))
        })
        .collect::<Result<_>>()?;
    let m = described.len().max(1) as f64;
    let mean_bhattacharyya = described.iter().map(|d| d.1).sum::<f64>() / m;
    let mean_max_mass = described.iter().map(|d| d.2).sum::<f64>() / m;
    let gallery = Gallery::new(
        described.into_iter().map(|d| d.0).collect(),
        videos.iter().map(|v| v.label).collect(),
        Some(videos.iter().map(|v| v.camera).collect()),
    )?;
    Ok(SplitSummary {
        gallery,
        mean_bhattacharyya,
        mean_max_mass,
    })
}

/// Rank-1, mAP and field statistics of `params` on the held-out splits.
pub fn held_out_metrics(params: &ModelParams, data: &TrainData) -> Result<(f64, f64, f64, f64)> {
    if data.gallery.is_empty() || data.probe.is_empty() {
        return Ok((f64::NAN, f64::NAN, f64::NAN, f64::NAN));
    }
    let g = summarize_split(params, &data.gallery)?;
    let p = summarize_split(params, &data.probe)?;
    let r = eval::evaluate(&p.gallery, &g.gallery)?;
    let (ng, np) = (data.gallery.len() as f64, data.probe.len() as f64);
    let bc = (g.mean_bhattacharyya * ng + p.mean_bhattacharyya * np) / (ng + np);
    let mass = (g.mean_max_mass * ng + p.mean_max_mass * np) / (ng + np);
    Ok((r.rank1, r.map, bc, mass))
}

/// Maps training labels onto `0..C` in ascending order.
pub fn class_index(videos: &[LabeledVideo]) -> BTreeMap<usize, usize> {
    let mut labels: Vec<usize> = videos.iter().map(|v| v.label).collect();
    labels.sort_unstable();
    labels.dedup();
    labels.into_iter().enumerate().map(|(i, l)| (l, i)).collect()
}

fn step(weights: &mut Weights, velocity: &mut Option<Weights>, grads: &Weights, lr: f64, momentum: f64) {
    match velocity {
        Some(v) => {
            v.scale(momentum);
            v.add_scaled(1.0, grads);
            weights.add_scaled(-lr, v);
        }
        None => weights.add_scaled(-lr, grads),
    }
}

/// Trains from a fresh initialisation. `hyper.classes` is replaced by the
/// number of distinct training labels. `on_epoch` sees each epoch's metrics.
pub fn train(
    hyper: &Hyperparams,
    data: &TrainData,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainRun> {
    let classes = class_index(&data.train);
    let mut hyper = hyper.clone();
    hyper.classes = classes.len();
    hyper.validate()?;
    for v in data.train.iter().chain(&data.gallery).chain(&data.probe) {
        check_video(v, &hyper)?;
    }
    let mut params = ModelParams::init(hyper.clone())?;
    let mut state = OimState::new(hyper.classes, hyper.embed_dim, hyper.temperature, hyper.oim_momentum)?;
    let mut velocity = (hyper.sgd_momentum > 0.0).then(|| Weights::zeros(&hyper));
    let mut rng = Rng::new(hyper.seed).fork(SHUFFLE_STREAM);
    let mut metrics = Vec::with_capacity(hyper.epochs);

    for epoch in 0..hyper.epochs {
        let lr = hyper.lr_at(epoch);
        let warmup = epoch < hyper.warmup_epochs;
        let mut objective = Objective::from_params(&params);
        if warmup {
            objective.temporal_mode = TemporalMode::Average;
        }
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        rng.shuffle(&mut order);

        let (mut loss, mut oim_loss, mut penalty) = (0.0, 0.0, 0.0);
        for (s, chunk) in order.chunks(hyper.batch_size).enumerate() {
            let batch = chunk
                .iter()
                .map(|&i| {
                    let v = &data.train[i];
                    let idx = sampling::restricted_random_sample(v.frames.len(), hyper.frames, &mut rng)?;
                    Ok((VideoSample::gather(&v.frames, idx)?, classes[&v.label]))
                })
                .collect::<Result<Vec<_>>>()?;
            let diverged = Divergence { epoch, step: s };
            let (report, mut grads, embeddings) = match pipeline::batch_gradient(&batch, &params, &state, &objective) {
                Ok(r) => r,
                Err(e) if numeric_failure(&e) => {
                    return Ok(TrainRun { params, state, metrics, divergence: Some(diverged) });
                }
                Err(e) => return Err(e),
            };
            if !report.total.is_finite() || !grads.weights.is_finite() {
                return Ok(TrainRun { params, state, metrics, divergence: Some(diverged) });
            }
            if warmup {
                freeze_temporal(&mut grads);
            }
            let mut next = params.weights.clone();
            step(&mut next, &mut velocity, &grads.weights, lr, hyper.sgd_momentum);
            if !next.is_finite() {
                return Ok(TrainRun { params, state, metrics, divergence: Some(diverged) });
            }
            params.weights = next;
            if hyper.loss == LossKind::Oim {
                for ((_, label), e) in batch.iter().zip(&embeddings) {
                    oim::oim_update(&mut state, e, *label)?;
                }
            }
            let w = batch.len() as f64;
            loss += report.total * w;
            oim_loss += report.oim_loss * w;
            penalty += report.diversity_q * w;
        }

        let n = data.train.len().max(1) as f64;
        let (rank1, map, mean_bhattacharyya, mean_max_mass) = match held_out_metrics(&params, data) {
            Ok(r) => r,
            Err(e) if numeric_failure(&e) => {
                let divergence = Some(Divergence { epoch, step: order.len().div_ceil(hyper.batch_size) });
                return Ok(TrainRun { params, state, metrics, divergence });
            }
            Err(e) => return Err(e),
        };
        let m = EpochMetrics {
            epoch: epoch + 1,
            loss: loss / n,
            oim_loss: oim_loss / n,
            penalty: penalty / n,
            mean_bhattacharyya,
            mean_max_mass,
            rank1,
            map,
        };
        on_epoch(&m);
        metrics.push(m);
    }
    Ok(TrainRun {
        params,
        state,
        metrics,
        divergence: None,
    })
}

fn numeric_failure(e: &Error) -> bool {
    matches!(e, Error::NonFinite { .. } | Error::DegenerateVector { .. })
}

fn freeze_temporal(grads: &mut GradientBundle) {
    for t in &mut grads.weights.temporal {
        t.w.iter_mut().for_each(|g| *g = 0.0);
        t.b = 0.0;
    }
}

pub const METRICS_COLUMNS: &str = "epoch,loss,oim_loss,penalty,mean_bhattacharyya,rank1,mAP";

pub fn metrics_row(m: &EpochMetrics) -> String {
    format!(
        "{},{},{},{},{},{},{}\n",
        m.epoch, m.loss, m.oim_loss, m.penalty, m.mean_bhattacharyya, m.rank1, m.map
    )
}

/// Config header, column line and one row per epoch.
pub fn metrics_csv(header: &str, metrics: &[EpochMetrics]) -> String {
    let mut out = String::from(header);
    out.push_str(METRICS_COLUMNS);
    out.push('\n');
    for m in metrics {
        out.push_str(&metrics_row(m));
    }
    out
}
