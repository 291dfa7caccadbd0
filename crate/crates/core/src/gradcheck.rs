//! Central-difference verification of analytic gradients.
//!
//! Each parameter group (an array name with the head index dropped, e.g.
//! `spatial.w`) is checked on all of its coordinates or on a random subset of
//! at least [`MIN_COORDS`]. The error of a coordinate is
//! `|g − ĝ| / max(|g|, |ĝ|, 1e-8)` with `ĝ = (f(θ+ε) − f(θ−ε)) / 2ε`.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::math::{self, Mat};
use crate::model::{group_of, GradientBundle, Hyperparams, ModelParams};
use crate::oim::{LossReport, OimState};
use crate::pipeline::{self, Objective};
use crate::rng::Rng;
use crate::sampling::VideoSample;
use crate::spatial::FrameFeatureGrid;

pub const MIN_COORDS: usize = 200;
pub const DEFAULT_EPS: f64 = 1e-5;
pub const PASS_THRESHOLD: f64 = 1e-4;
const DENOM_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct GroupError {
    pub group: String,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Array name, index, analytic and numeric value of the worst coordinate.
    pub worst: (String, usize, f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub groups: Vec<GroupError>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passes(&self, threshold: f64) -> bool {
        self.max_error() < threshold
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

/// Compares `analytic` with central differences of `objective` around `params`.
///
/// `objective` returns the terms of the checked function; their sum is what is
/// differentiated. The difference `f(θ+ε) − f(θ−ε)` is accumulated term by term,
/// so a large term that a coordinate does not touch cancels exactly instead of
/// setting the rounding floor of that coordinate's difference.
pub fn check_against<F>(
    params: &ModelParams,
    analytic: &GradientBundle,
    objective: F,
    eps: f64,
    rng: &mut Rng,
) -> Result<GradCheckReport>
where
    F: Fn(&ModelParams) -> Result<Vec<f64>>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::InvalidInput(format!("eps {eps} outside [1e-7, 1e-3]")));
    }
    let analytic_arrays = analytic.weights.arrays();
    let names: Vec<String> = params.weights.arrays().into_iter().map(|(n, _)| n).collect();
    if analytic_arrays.len() != names.len() {
        return Err(Error::shape("gradient layout differs from parameters"));
    }

    let mut by_group: BTreeMap<String, Vec<(usize, usize)>> = BTreeMap::new();
    for (a, (name, values)) in params.weights.arrays().into_iter().enumerate() {
        let coords = by_group.entry(group_of(&name)).or_default();
        coords.extend((0..values.len()).map(|i| (a, i)));
    }

    let mut probe = params.clone();
    let mut groups = Vec::with_capacity(by_group.len());
    for (group, mut coords) in by_group {
        if coords.len() > MIN_COORDS {
            rng.shuffle(&mut coords);
            coords.truncate(MIN_COORDS);
            coords.sort_unstable();
        }
        let mut worst = GroupError {
            group: group.clone(),
            max_rel_error: 0.0,
            checked: coords.len(),
            worst: (String::new(), 0, 0.0, 0.0),
        };
        for &(a, i) in &coords {
            let original = params.weights.arrays()[a].1[i];
            let evaluate = |probe: &mut ModelParams, value: f64| -> Result<Vec<f64>> {
                probe.weights.arrays_mut()[a].1[i] = value;
                let terms = objective(probe).map_err(|e| match e {
                    Error::NonFinite { .. } | Error::DegenerateVector { .. } => Error::NonFinite { group: group.clone() },
                    e => e,
                })?;
                if terms.iter().any(|t| !t.is_finite()) {
                    return Err(Error::NonFinite { group: group.clone() });
                }
                Ok(terms)
            };
            let plus = evaluate(&mut probe, original + eps)?;
            let minus = evaluate(&mut probe, original - eps)?;
            probe.weights.arrays_mut()[a].1[i] = original;
            if plus.len() != minus.len() {
                return Err(Error::shape("objective returned a varying number of terms"));
            }
            let numeric = plus.iter().zip(&minus).map(|(p, m)| p - m).sum::<f64>() / (2.0 * eps);
            let value = analytic_arrays[a].1[i];
            let err = relative_error(value, numeric);
            if err > worst.max_rel_error || worst.worst.0.is_empty() {
                worst.max_rel_error = worst.max_rel_error.max(err);
                worst.worst = (names[a].clone(), i, value, numeric);
            }
        }
        groups.push(worst);
    }
    Ok(GradCheckReport { groups })
}

/// A labelled sampled video with the lookup table and objective to check against.
#[derive(Clone, Debug)]
pub struct GradCheckInstance {
    pub video: VideoSample,
    pub label: usize,
    pub state: OimState,
    pub objective: Objective,
}

/// `[w·oim, λ·penalty]`, the two summands of `LossReport::total`.
fn objective_terms(r: &LossReport, objective: &Objective) -> Vec<f64> {
    vec![objective.oim_weight * r.oim_loss, objective.lambda_div * r.diversity_penalty]
}

/// Checks [`pipeline::backward`] on one instance.
pub fn grad_check(
    params: &ModelParams,
    instance: &GradCheckInstance,
    eps: f64,
    rng: &mut Rng,
) -> Result<GradCheckReport> {
    let (_, cache) = pipeline::forward_with(
        &instance.video,
        params,
        &instance.state,
        instance.label,
        &instance.objective,
    )?;
    let analytic = pipeline::backward(&cache, params, &instance.state)?;
    check_against(
        params,
        &analytic,
        |p| {
            pipeline::forward_with(
                &instance.video,
                p,
                &instance.state,
                instance.label,
                &instance.objective,
            )
            .map(|(r, _)| objective_terms(&r, &instance.objective))
        },
        eps,
        rng,
    )
}

/// Shape of a random check instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    pub frames: usize,
    pub heads: usize,
    pub grid_height: usize,
    pub grid_width: usize,
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub classes: usize,
}

impl Dims {
    pub const TINY: Dims = Dims {
        frames: 3,
        heads: 2,
        grid_height: 2,
        grid_width: 2,
        feature_dim: 5,
        hidden_dim: 3,
        embed_dim: 4,
        classes: 3,
    };

    pub fn from_hyper(h: &Hyperparams) -> Self {
        Dims {
            frames: h.frames,
            heads: h.heads,
            grid_height: h.grid_height,
            grid_width: h.grid_width,
            feature_dim: h.feature_dim,
            hidden_dim: h.hidden_dim,
            embed_dim: h.embed_dim,
            classes: h.classes,
        }
    }

    pub fn apply(&self, h: &mut Hyperparams) {
        h.frames = self.frames;
        h.heads = self.heads;
        h.grid_height = self.grid_height;
        h.grid_width = self.grid_width;
        h.feature_dim = self.feature_dim;
        h.hidden_dim = self.hidden_dim;
        h.embed_dim = self.embed_dim;
        h.classes = self.classes;
    }
}

/// Random parameters (every array non-trivial), random grids and a random unit table.
pub fn random_instance(base: &Hyperparams, dims: Dims, seed: u64) -> Result<(ModelParams, GradCheckInstance)> {
    let mut hyper = base.clone();
    dims.apply(&mut hyper);
    hyper.seed = seed;
    let mut params = ModelParams::init(hyper.clone())?;
    let mut rng = Rng::new(seed ^ 0x5eed_cafe);

    let e = &mut params.weights.enhancement;
    let n = dims.frames;
    let d = dims.feature_dim;
    e.w_pos = Mat::from_fn(n, n, |_, _| 0.5 * rng.normal());
    e.b_pos = (0..n).map(|_| 0.5 * rng.normal()).collect();
    e.fcn_w = Mat::from_fn(d, d, |_, _| 0.3 * rng.normal());
    e.fcn_b = (0..d).map(|_| 0.3 * rng.normal()).collect();
    for head in &mut params.weights.spatial {
        head.b = head.b.iter().map(|_| 0.3 * rng.normal()).collect();
        head.b_out = rng.normal();
    }
    for head in &mut params.weights.temporal {
        head.b = rng.normal();
    }
    params.weights.embedding.b = (0..dims.embed_dim).map(|_| 0.3 * rng.normal()).collect();
    if let Some(c) = &mut params.weights.classifier {
        c.w = Mat::from_fn(dims.classes, dims.embed_dim, |_, _| rng.normal());
        c.b = (0..dims.classes).map(|_| 0.3 * rng.normal()).collect();
    }

    let grids = (0..n)
        .map(|_| {
            let cells = Mat::from_fn(dims.grid_height * dims.grid_width, d, |_, _| 0.5 * rng.normal());
            FrameFeatureGrid::new(cells, (dims.grid_height, dims.grid_width))
        })
        .collect::<Result<Vec<_>>>()?;
    let video = VideoSample {
        total_frames: n,
        chunk_count: n,
        chosen_indices: (0..n).collect(),
        grids,
    };

    let mut state = OimState::new(dims.classes, dims.embed_dim, hyper.temperature, hyper.oim_momentum)?;
    for r in 0..dims.classes {
        let v: Vec<f64> = (0..dims.embed_dim).map(|_| rng.normal()).collect();
        state.table.row_mut(r).copy_from_slice(&math::l2_normalize(&v)?);
    }
    let label = rng.below(dims.classes);
    let objective = Objective::from_params(&params);
    Ok((
        params,
        GradCheckInstance {
            video,
            label,
            state,
            objective,
        },
    ))
}
