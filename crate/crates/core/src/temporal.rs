//! Per-head temporal attention, concatenation and the final embedding.

use crate::error::{Error, Result};
use crate::math::{self, Mat};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct TemporalHeadParams {
    pub w: Vec<f64>,
    pub b: f64,
}

impl TemporalHeadParams {
    pub fn zeros(dim: usize) -> Self {
        TemporalHeadParams {
            w: vec![0.0; dim],
            b: 0.0,
        }
    }

    pub fn init(dim: usize, rng: &mut Rng) -> Self {
        let a = (6.0 / (dim + 1) as f64).sqrt();
        TemporalHeadParams {
            w: (0..dim).map(|_| rng.uniform_in(-a, a)).collect(),
            b: 0.0,
        }
    }
}

/// How per-frame weights are formed from the responses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TemporalMode {
    /// Weights from the responses (see [`TemporalNorm`]).
    Attention,
    /// Uniform 1/N; responses ignored.
    Average,
    /// One-hot on the highest-response frame (first on ties).
    Max,
}

/// Normalisation applied to responses in [`TemporalMode::Attention`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TemporalNorm {
    Softmax,
    /// `t = e / Σe`; only defined for positive sums.
    Linear,
}

/// Result of attending over one head's N enhanced features.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalOutput {
    pub responses: Vec<f64>,
    pub weights: Vec<f64>,
    pub pooled: Vec<f64>,
}

/// `e_n = wᵀx̂_n + b` for every column of `xhat` (D×N).
pub fn temporal_responses(xhat: &Mat, head: &TemporalHeadParams) -> Result<Vec<f64>> {
    if head.w.len() != xhat.rows() {
        return Err(Error::shape(format!(
            "temporal head has D={}, features have D={}",
            head.w.len(),
            xhat.rows()
        )));
    }
    let mut e = xhat.matvec_t(&head.w)?;
    for v in &mut e {
        *v += head.b;
    }
    Ok(e)
}

/// Weights from the bias-free scores `wᵀx̂_n`. The bias only matters to the
/// linear ratio; softmax and argmax are invariant to it, exactly so this way.
fn weights_from(scores: &[f64], responses: &[f64], mode: TemporalMode, norm: TemporalNorm) -> Result<Vec<f64>> {
    let n = scores.len();
    match mode {
        TemporalMode::Average => Ok(vec![1.0 / n as f64; n]),
        TemporalMode::Max => {
            let mut t = vec![0.0; n];
            t[math::argmax(scores)] = 1.0;
            Ok(t)
        }
        TemporalMode::Attention => match norm {
            TemporalNorm::Softmax => math::softmax_row(scores),
            TemporalNorm::Linear => {
                let sum: f64 = responses.iter().sum();
                if !(sum > 0.0) {
                    return Err(Error::InvalidInput(format!(
                        "linear temporal normalisation needs a positive response sum, got {sum}"
                    )));
                }
                Ok(responses.iter().map(|e| e / sum).collect())
            }
        },
    }
}

/// Weights over the N frames of one head and the weighted average `x_k = Σ t_n x̂_n`.
pub fn temporal_attend(
    xhat: &Mat,
    head: &TemporalHeadParams,
    mode: TemporalMode,
    norm: TemporalNorm,
) -> Result<TemporalOutput> {
    if xhat.cols() == 0 {
        return Err(Error::InvalidInput("temporal attention over zero frames".into()));
    }
    let responses = temporal_responses(xhat, head)?;
    let scores = xhat.matvec_t(&head.w)?;
    let weights = weights_from(&scores, &responses, mode, norm)?;
    let pooled = xhat.matvec(&weights)?;
    Ok(TemporalOutput {
        responses,
        weights,
        pooled,
    })
}

/// Backward through [`temporal_attend`]. Returns `∂L/∂X̂` and accumulates head gradients.
pub fn temporal_backward(
    xhat: &Mat,
    head: &TemporalHeadParams,
    out: &TemporalOutput,
    mode: TemporalMode,
    norm: TemporalNorm,
    grad_pooled: &[f64],
    grad_head: &mut TemporalHeadParams,
) -> Mat {
    let (d, n) = xhat.shape();
    let mut grad_xhat = Mat::zeros(d, n);
    grad_xhat.add_outer(1.0, grad_pooled, &out.weights);
    if mode != TemporalMode::Attention {
        // Weights are constant (average) or piecewise constant (max).
        return grad_xhat;
    }
    let grad_t = xhat.matvec_t(grad_pooled).expect("D-vector");
    let grad_e = match norm {
        TemporalNorm::Softmax => math::softmax_backward(&out.weights, &grad_t),
        TemporalNorm::Linear => {
            let sum: f64 = out.responses.iter().sum();
            let inner = math::dot(&out.weights, &grad_t);
            grad_t.iter().map(|g| (g - inner) / sum).collect()
        }
    };
    for (col, &ge) in grad_e.iter().enumerate() {
        grad_head.b += ge;
        for r in 0..d {
            grad_head.w[r] += ge * xhat[(r, col)];
            grad_xhat[(r, col)] += ge * head.w[r];
        }
    }
    grad_xhat
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingParams {
    /// E×(K·D).
    pub w: Mat,
    pub b: Vec<f64>,
}

impl EmbeddingParams {
    pub fn zeros(embed: usize, input: usize) -> Self {
        EmbeddingParams {
            w: Mat::zeros(embed, input),
            b: vec![0.0; embed],
        }
    }

    pub fn init(embed: usize, input: usize, rng: &mut Rng) -> Self {
        let a = (6.0 / (embed + input) as f64).sqrt();
        EmbeddingParams {
            w: Mat::from_fn(embed, input, |_, _| rng.uniform_in(-a, a)),
            b: vec![0.0; embed],
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.b.len()
    }
}

/// Video-level representation.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoDescriptor {
    pub per_head: Vec<Vec<f64>>,
    /// `[x_1 … x_K]`.
    pub concat: Vec<f64>,
    /// Pre-normalisation affine output `W·concat + b`.
    pub projected: Vec<f64>,
    /// Unit-norm embedding.
    pub embedding: Vec<f64>,
    /// N×K; column k holds head k's frame weights. Empty when built without them.
    pub temporal_weights: Mat,
}

/// Concatenates head features in order and maps them to the unit sphere.
pub fn assemble_descriptor(per_head: Vec<Vec<f64>>, emb: &EmbeddingParams) -> Result<VideoDescriptor> {
    let concat = per_head.concat();
    if emb.w.shape() != (emb.embed_dim(), concat.len()) || emb.embed_dim() == 0 {
        return Err(Error::shape(format!(
            "embedding map {:?} cannot take a {}-dim concatenation",
            emb.w.shape(),
            concat.len()
        )));
    }
    let mut projected = emb.w.matvec(&concat)?;
    math::axpy(1.0, &emb.b, &mut projected);
    let embedding = math::l2_normalize(&projected)?;
    Ok(VideoDescriptor {
        per_head,
        concat,
        projected,
        embedding,
        temporal_weights: Mat::zeros(0, 0),
    })
}
