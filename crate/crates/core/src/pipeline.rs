//! Full forward pass from sampled feature grids to the loss, and its
//! hand-written reverse pass.
//!
//! Stages per video: spatial attention on each of the N frames, enhancement
//! per head across frames, temporal attention per head, concatenation, affine
//! embedding, L2 normalisation and the identity loss. The receptive-field
//! penalty is summed over frames and added with weight `λ_div`.

use rayon::prelude::*;

use crate::enhancement::{self, ContributionMatrix, EnhancementGrads};
use crate::error::{Error, Result};
use crate::math::{self, Mat};
use crate::model::{GradientBundle, ModelParams, SpatialMode};
use crate::oim::{self, LossKind, LossReport, OimState};
use crate::sampling::VideoSample;
use crate::spatial::{self, PenaltyKind, ReceptiveFieldSet};
use crate::temporal::{self, TemporalMode, TemporalOutput, VideoDescriptor};

/// Per-step evaluation settings: objective weights and the temporal pooling mode.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Objective {
    pub oim_weight: f64,
    pub lambda_div: f64,
    pub penalty: PenaltyKind,
    pub temporal_mode: TemporalMode,
}

impl Objective {
    pub fn from_params(params: &ModelParams) -> Self {
        Objective {
            oim_weight: 1.0,
            lambda_div: params.hyper.lambda_div,
            penalty: params.hyper.penalty,
            temporal_mode: params.hyper.temporal_mode,
        }
    }
}

/// Intermediates of one spatial head on one frame.
#[derive(Clone, Debug)]
struct SpatialTrace {
    /// `None` in uniform mode.
    scores: Option<spatial::SpatialScores>,
}

#[derive(Clone, Debug)]
struct HeadTrace {
    /// D×N spatially gated features.
    x: Mat,
    contribution: Option<ContributionMatrix>,
    /// `X·C`, when enhancement is on.
    mixed: Option<Mat>,
    xhat: Mat,
    temporal: TemporalOutput,
}

/// Everything [`backward`] needs, tied to the parameters and table it was computed with.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    fingerprint: u64,
    table_fingerprint: u64,
    objective: Objective,
    label: usize,
    grids: Vec<spatial::FrameFeatureGrid>,
    /// `spatial[n][k]`.
    spatial: Vec<Vec<SpatialTrace>>,
    pub fields: Vec<ReceptiveFieldSet>,
    heads: Vec<HeadTrace>,
    pub descriptor: VideoDescriptor,
    probabilities: Vec<f64>,
}

fn table_fingerprint(state: &OimState) -> u64 {
    let mut h = crate::model::Fnv::default();
    h.write_values(state.table.as_slice());
    h.write_values(&[state.temperature]);
    h.0
}

fn check_video(video: &VideoSample, params: &ModelParams) -> Result<()> {
    let h = &params.hyper;
    if video.grids.len() != h.frames {
        return Err(Error::shape(format!(
            "video has {} sampled frames, model expects {}",
            video.grids.len(),
            h.frames
        )));
    }
    for g in &video.grids {
        if g.num_cells() != h.cells() || g.dim() != h.feature_dim {
            return Err(Error::shape(format!(
                "frame grid is {}x{} cells of D={}, model expects {}x{} of D={}",
                g.grid_shape().0,
                g.grid_shape().1,
                g.dim(),
                h.grid_height,
                h.grid_width,
                h.feature_dim
            )));
        }
    }
    Ok(())
}

/// Spatial, enhancement and temporal stages up to the unit embedding.
fn encode(
    video: &VideoSample,
    params: &ModelParams,
    temporal_mode: TemporalMode,
) -> Result<(Vec<Vec<SpatialTrace>>, Vec<ReceptiveFieldSet>, Vec<HeadTrace>, VideoDescriptor)> {
    check_video(video, params)?;
    let h = &params.hyper;
    let w = &params.weights;
    let (n_frames, k_heads, l_cells) = (h.frames, h.heads, h.cells());

    let mut traces = Vec::with_capacity(n_frames);
    let mut fields = Vec::with_capacity(n_frames);
    // gated[k][n] = x_{n,k}
    let mut gated: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(n_frames); k_heads];
    for grid in &video.grids {
        let mut s = Mat::zeros(k_heads, l_cells);
        let mut frame_traces = Vec::with_capacity(k_heads);
        for (k, head) in w.spatial.iter().enumerate() {
            let (field, scores) = match h.spatial_mode {
                SpatialMode::Attention => {
                    let scores = spatial::spatial_scores_traced(grid, head)?;
                    (math::softmax_row(&scores.scores)?, Some(scores))
                }
                SpatialMode::Uniform => (vec![1.0 / l_cells as f64; l_cells], None),
            };
            gated[k].push(spatial::pool_cells(grid, &field));
            s.row_mut(k).copy_from_slice(&field);
            frame_traces.push(SpatialTrace { scores });
        }
        traces.push(frame_traces);
        fields.push(ReceptiveFieldSet::from_trusted(s));
    }

    let mut heads = Vec::with_capacity(k_heads);
    let mut temporal_weights = Mat::zeros(n_frames, k_heads);
    for (k, columns) in gated.iter().enumerate() {
        let x = spatial::SpatialGatedFeatures::from_columns(columns)?.into_matrix();
        let (xhat, contribution, mixed) = if h.enhancement {
            let psi = enhancement::temporal_similarity(&w.enhancement, n_frames)?;
            let c = enhancement::contribution(&enhancement::feature_similarity(&x), &psi)?;
            let (xhat, mixed) = enhancement::enhance_traced(&x, &c, &w.enhancement)?;
            (xhat, Some(c), Some(mixed))
        } else {
            (x.clone(), None, None)
        };
        let t = temporal::temporal_attend(&xhat, &w.temporal[k], temporal_mode, h.temporal_norm)?;
        for (n, &tw) in t.weights.iter().enumerate() {
            temporal_weights[(n, k)] = tw;
        }
        heads.push(HeadTrace {
            x,
            contribution,
            mixed,
            xhat,
            temporal: t,
        });
    }

    let per_head = heads.iter().map(|t| t.temporal.pooled.clone()).collect();
    let mut descriptor = temporal::assemble_descriptor(per_head, &w.embedding)?;
    descriptor.temporal_weights = temporal_weights;
    Ok((traces, fields, heads, descriptor))
}

/// Test-time descriptor of a sampled video (no loss).
pub fn describe(video: &VideoSample, params: &ModelParams) -> Result<(VideoDescriptor, Vec<ReceptiveFieldSet>)> {
    let (_, fields, _, descriptor) = encode(video, params, params.hyper.temporal_mode)?;
    Ok((descriptor, fields))
}

fn classify(embedding: &[f64], label: usize, params: &ModelParams, state: &OimState) -> Result<(f64, Vec<f64>)> {
    match params.hyper.loss {
        LossKind::Oim => oim::oim_forward(embedding, label, state),
        LossKind::Softmax => {
            let c = params
                .weights
                .classifier
                .as_ref()
                .ok_or_else(|| Error::shape("softmax loss needs classifier weights"))?;
            let mut logits = c.w.matvec(embedding)?;
            math::axpy(1.0, &c.b, &mut logits);
            oim::cross_entropy(&logits, label)
        }
    }
}

/// Loss of one labelled video under the parameters' own objective.
pub fn forward(
    video: &VideoSample,
    params: &ModelParams,
    state: &OimState,
    label: usize,
) -> Result<(LossReport, ForwardCache)> {
    forward_with(video, params, state, label, &Objective::from_params(params))
}

pub fn forward_with(
    video: &VideoSample,
    params: &ModelParams,
    state: &OimState,
    label: usize,
    objective: &Objective,
) -> Result<(LossReport, ForwardCache)> {
    let (spatial, fields, heads, descriptor) = encode(video, params, objective.temporal_mode)?;
    let (oim_loss, probabilities) = classify(&descriptor.embedding, label, params, state)?;
    let penalty: f64 = fields.iter().map(|f| objective.penalty.value(f)).sum();
    let diversity_q = match objective.penalty {
        PenaltyKind::Q => penalty,
        _ => fields.iter().map(spatial::diversity_q).sum(),
    };
    let total = objective.oim_weight * oim_loss + objective.lambda_div * penalty;
    let report = LossReport {
        oim_loss,
        diversity_penalty: penalty,
        diversity_q,
        total,
        probabilities: probabilities.clone(),
    };
    let cache = ForwardCache {
        fingerprint: params.fingerprint(),
        table_fingerprint: table_fingerprint(state),
        objective: *objective,
        label,
        grids: video.grids.clone(),
        spatial,
        fields,
        heads,
        descriptor,
        probabilities,
    };
    Ok((report, cache))
}

/// Exact gradient of `cache`'s total loss with respect to every trainable array.
pub fn backward(cache: &ForwardCache, params: &ModelParams, state: &OimState) -> Result<GradientBundle> {
    if cache.fingerprint != params.fingerprint() || cache.table_fingerprint != table_fingerprint(state) {
        return Err(Error::StaleCache);
    }
    let h = &params.hyper;
    let w = &params.weights;
    let obj = &cache.objective;
    let mut grads = GradientBundle::zeros_like(params);
    let g = &mut grads.weights;
    let d = h.feature_dim;

    // Identity loss → unit embedding.
    let mut grad_embedding = match h.loss {
        LossKind::Oim => oim::oim_backward(&cache.probabilities, cache.label, state),
        LossKind::Softmax => {
            let c = w.classifier.as_ref().expect("checked in forward");
            let gc = g.classifier.as_mut().expect("same layout");
            let mut gl = cache.probabilities.clone();
            gl[cache.label] -= 1.0;
            gc.w.add_outer(1.0, &gl, &cache.descriptor.embedding);
            math::axpy(1.0, &gl, &mut gc.b);
            c.w.matvec_t(&gl)?
        }
    };
    for v in &mut grad_embedding {
        *v *= obj.oim_weight;
    }

    // Normalisation and affine embedding.
    let desc = &cache.descriptor;
    let grad_projected = math::l2_normalize_backward(
        &desc.embedding,
        math::norm(&desc.projected),
        &grad_embedding,
    );
    g.embedding.w.add_outer(1.0, &grad_projected, &desc.concat);
    math::axpy(1.0, &grad_projected, &mut g.embedding.b);
    let grad_concat = w.embedding.w.matvec_t(&grad_projected)?;

    // Per head: temporal attention, then enhancement, back to the gated features.
    let mut enh = EnhancementGrads {
        w_pos: Mat::zeros(h.frames, h.frames),
        b_pos: vec![0.0; h.frames],
        fcn_w: Mat::zeros(d, d),
        fcn_b: vec![0.0; d],
    };
    let mut grad_gated = Vec::with_capacity(h.heads);
    for (k, trace) in cache.heads.iter().enumerate() {
        let grad_pooled = &grad_concat[k * d..(k + 1) * d];
        let grad_xhat = temporal::temporal_backward(
            &trace.xhat,
            &w.temporal[k],
            &trace.temporal,
            obj.temporal_mode,
            h.temporal_norm,
            grad_pooled,
            &mut g.temporal[k],
        );
        let grad_x = match (&trace.contribution, &trace.mixed) {
            (Some(c), Some(mixed)) => enhancement::enhance_backward(
                &trace.x,
                c.matrix(),
                mixed,
                &w.enhancement,
                &grad_xhat,
                &mut enh,
            ),
            _ => grad_xhat,
        };
        grad_gated.push(grad_x);
    }
    g.enhancement.w_pos = enh.w_pos;
    g.enhancement.b_pos = enh.b_pos;
    g.enhancement.fcn_w = enh.fcn_w;
    g.enhancement.fcn_b = enh.fcn_b;

    if h.spatial_mode == SpatialMode::Uniform {
        return Ok(grads);
    }

    // Spatial heads: pooled features plus the receptive-field penalty.
    for (n, grid) in cache.grids.iter().enumerate() {
        let fields = &cache.fields[n];
        let mut grad_fields = if obj.lambda_div != 0.0 {
            obj.penalty.grad(fields)
        } else {
            Mat::zeros(fields.heads(), fields.cells())
        };
        for v in grad_fields.as_mut_slice() {
            *v *= obj.lambda_div;
        }
        for (k, head) in w.spatial.iter().enumerate() {
            let grad_x = grad_gated[k].col(n);
            let mut grad_s = grid.cells().matvec(&grad_x)?;
            math::axpy(1.0, grad_fields.row(k), &mut grad_s);
            let grad_e = math::softmax_backward(fields.field(k), &grad_s);
            let trace = cache.spatial[n][k]
                .scores
                .as_ref()
                .ok_or_else(|| Error::shape("attention trace missing"))?;
            let gh = &mut g.spatial[k];
            // b_out and the biases of always-on units are absent from the scores: zero gradient.
            for (l, &ge) in grad_e.iter().enumerate() {
                if ge == 0.0 {
                    continue;
                }
                let cell = grid.cell(l);
                for j in 0..head.hidden() {
                    let gpre = ge * head.w_out[j];
                    if trace.always_on[j] {
                        gh.w_out[j] += ge * trace.raw[(l, j)];
                        math::axpy(gpre, cell, gh.w.row_mut(j));
                    } else if trace.pre[(l, j)] > 0.0 {
                        gh.w_out[j] += ge * trace.pre[(l, j)];
                        gh.b[j] += gpre;
                        math::axpy(gpre, cell, gh.w.row_mut(j));
                    }
                }
            }
        }
    }
    Ok(grads)
}

/// Mean report and mean gradient over a labelled batch.
///
/// Items are processed in parallel; their gradients are reduced in batch order.
pub fn batch_gradient(
    batch: &[(VideoSample, usize)],
    params: &ModelParams,
    state: &OimState,
    objective: &Objective,
) -> Result<(LossReport, GradientBundle, Vec<Vec<f64>>)> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let items: Vec<Result<(LossReport, GradientBundle, Vec<f64>)>> = batch
        .par_iter()
        .map(|(video, label)| {
            let (report, cache) = forward_with(video, params, state, *label, objective)?;
            let grads = backward(&cache, params, state)?;
            Ok((report, grads, cache.descriptor.embedding))
        })
        .collect();
    let scale = 1.0 / batch.len() as f64;
    let mut mean_grads = GradientBundle::zeros_like(params);
    let mut reports = Vec::with_capacity(batch.len());
    let mut embeddings = Vec::with_capacity(batch.len());
    for item in items {
        let (report, grads, embedding) = item?;
        mean_grads.weights.add_scaled(scale, &grads.weights);
        reports.push(report);
        embeddings.push(embedding);
    }
    Ok((mean_report(&reports), mean_grads, embeddings))
}

/// Batch mean of `oim + λ_div·Σ_frames penalty`.
pub fn total_loss(
    batch: &[(VideoSample, usize)],
    params: &ModelParams,
    state: &OimState,
    objective: &Objective,
) -> Result<LossReport> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let reports = batch
        .iter()
        .map(|(video, label)| forward_with(video, params, state, *label, objective).map(|(r, _)| r))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_report(&reports))
}

fn mean_report(reports: &[LossReport]) -> LossReport {
    let m = reports.len() as f64;
    let classes = reports[0].probabilities.len();
    let mut probabilities = vec![0.0; classes];
    for r in reports {
        math::axpy(1.0 / m, &r.probabilities, &mut probabilities);
    }
    LossReport {
        oim_loss: reports.iter().map(|r| r.oim_loss).sum::<f64>() / m,
        diversity_penalty: reports.iter().map(|r| r.diversity_penalty).sum::<f64>() / m,
        diversity_q: reports.iter().map(|r| r.diversity_q).sum::<f64>() / m,
        total: reports.iter().map(|r| r.total).sum::<f64>() / m,
        probabilities,
    }
}

/// Read-only access for tests and exports.
impl ForwardCache {
    pub fn temporal_weights(&self) -> &Mat {
        &self.descriptor.temporal_weights
    }

    pub fn enhanced(&self, head: usize) -> &Mat {
        &self.heads[head].xhat
    }

    pub fn gated(&self, head: usize) -> &Mat {
        &self.heads[head].x
    }
}
