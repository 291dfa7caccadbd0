//! Hyperparameters and the learnable parameter set of the whole pipeline.

use std::fmt;
use std::str::FromStr;

use crate::enhancement::{EnhancementParams, DEFAULT_SIGMA};
use crate::error::{Error, Result};
use crate::oim::{ClassifierParams, LossKind, DEFAULT_MOMENTUM, DEFAULT_TEMPERATURE};
use crate::rng::Rng;
use crate::sampling::DEFAULT_CHUNKS;
use crate::spatial::{
    PenaltyKind, SpatialHeadParams, DEFAULT_GRID_HEIGHT, DEFAULT_GRID_WIDTH, DEFAULT_HEADS,
    MAX_HEADS,
};
use crate::temporal::{EmbeddingParams, TemporalHeadParams, TemporalMode, TemporalNorm};

/// How receptive fields are produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpatialMode {
    Attention,
    /// Every field is uniform over the grid (whole-frame mean pooling).
    Uniform,
}

/// Every knob of a run. Defaults are the desk-scale configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Hyperparams {
    /// Sampled frames per video (N).
    pub frames: usize,
    /// Spatial attention heads (K).
    pub heads: usize,
    pub grid_height: usize,
    pub grid_width: usize,
    /// Backbone feature dimension (D).
    pub feature_dim: usize,
    /// Spatial head hidden width (d).
    pub hidden_dim: usize,
    /// Embedding dimension (E).
    pub embed_dim: usize,
    /// Training identities (C); overwritten from the data at train time.
    pub classes: usize,
    pub lambda_div: f64,
    pub penalty: PenaltyKind,
    pub spatial_mode: SpatialMode,
    pub enhancement: bool,
    pub sigma: f64,
    pub temporal_mode: TemporalMode,
    pub temporal_norm: TemporalNorm,
    pub loss: LossKind,
    pub temperature: f64,
    /// Lookup-table momentum γ.
    pub oim_momentum: f64,
    pub lr: f64,
    pub lr_final: f64,
    /// Epoch at which `lr` drops to `lr_final`; `None` means halfway.
    pub lr_drop_epoch: Option<usize>,
    /// SGD momentum; 0 is plain SGD.
    pub sgd_momentum: f64,
    /// Epochs of spatial-only warmup (average temporal pooling, temporal heads frozen).
    pub warmup_epochs: usize,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            frames: DEFAULT_CHUNKS,
            heads: DEFAULT_HEADS,
            grid_height: DEFAULT_GRID_HEIGHT,
            grid_width: DEFAULT_GRID_WIDTH,
            feature_dim: 64,
            hidden_dim: 16,
            embed_dim: 32,
            classes: 16,
            lambda_div: 0.1,
            penalty: PenaltyKind::Q,
            spatial_mode: SpatialMode::Attention,
            enhancement: true,
            sigma: DEFAULT_SIGMA,
            temporal_mode: TemporalMode::Attention,
            temporal_norm: TemporalNorm::Softmax,
            loss: LossKind::Oim,
            temperature: DEFAULT_TEMPERATURE,
            oim_momentum: DEFAULT_MOMENTUM,
            lr: 0.1,
            lr_final: 0.01,
            lr_drop_epoch: None,
            sgd_momentum: 0.0,
            warmup_epochs: 0,
            seed: 0,
            epochs: 30,
            batch_size: 8,
        }
    }
}

impl Hyperparams {
    pub fn cells(&self) -> usize {
        self.grid_height * self.grid_width
    }

    pub fn drop_epoch(&self) -> usize {
        self.lr_drop_epoch.unwrap_or(self.epochs / 2)
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch < self.drop_epoch() {
            self.lr
        } else {
            self.lr_final
        }
    }

    /// Checks every constraint, naming the offending config key.
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("frames", self.frames),
            ("heads", self.heads),
            ("grid_height", self.grid_height),
            ("grid_width", self.grid_width),
            ("feature_dim", self.feature_dim),
            ("hidden_dim", self.hidden_dim),
            ("embed_dim", self.embed_dim),
            ("batch_size", self.batch_size),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if self.heads > MAX_HEADS {
            return Err(Error::config("heads", format!("at most {MAX_HEADS} heads")));
        }
        if self.classes < 2 {
            return Err(Error::config("classes", "need at least 2 identities"));
        }
        let finite_nonneg = [
            ("lambda_div", self.lambda_div),
            ("lr", self.lr),
            ("lr_final", self.lr_final),
        ];
        for (key, v) in finite_nonneg {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(key, "must be a finite non-negative number"));
            }
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::config("sigma", "must be positive"));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::config("temperature", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.oim_momentum) {
            return Err(Error::config("oim_momentum", "must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.sgd_momentum) {
            return Err(Error::config("sgd_momentum", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Textual names shared by the config parser and the checkpoint header.
pub trait Keyword: Sized + Copy + 'static {
    const ALL: &'static [Self];
    fn keyword(self) -> &'static str;
}

macro_rules! keywords {
    ($ty:ty { $($variant:path => $word:literal),+ $(,)? }) => {
        impl Keyword for $ty {
            const ALL: &'static [Self] = &[$($variant),+];
            fn keyword(self) -> &'static str {
                match self { $($variant => $word),+ }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.keyword())
            }
        }

        impl FromStr for $ty {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, String> {
                Self::ALL
                    .iter()
                    .copied()
                    .find(|v| v.keyword().eq_ignore_ascii_case(s))
                    .ok_or_else(|| {
                        let options: Vec<_> = Self::ALL.iter().map(|v| v.keyword()).collect();
                        format!("expected one of {}", options.join("|"))
                    })
            }
        }
    };
}

keywords!(PenaltyKind {
    PenaltyKind::Q => "Q",
    PenaltyKind::QPrime => "Qprime",
    PenaltyKind::None => "none",
});
keywords!(SpatialMode {
    SpatialMode::Attention => "attention",
    SpatialMode::Uniform => "uniform",
});
keywords!(TemporalMode {
    TemporalMode::Attention => "attention",
    TemporalMode::Average => "average",
    TemporalMode::Max => "max",
});
keywords!(TemporalNorm {
    TemporalNorm::Softmax => "softmax",
    TemporalNorm::Linear => "linear",
});
keywords!(LossKind {
    LossKind::Oim => "oim",
    LossKind::Softmax => "softmax",
});

/// All trainable arrays. Also used, shape for shape, to hold gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights {
    pub spatial: Vec<SpatialHeadParams>,
    pub enhancement: EnhancementParams,
    pub temporal: Vec<TemporalHeadParams>,
    pub embedding: EmbeddingParams,
    pub classifier: Option<ClassifierParams>,
}

impl Weights {
    pub fn zeros(h: &Hyperparams) -> Self {
        Weights {
            spatial: (0..h.heads)
                .map(|_| SpatialHeadParams::zeros(h.hidden_dim, h.feature_dim))
                .collect(),
            enhancement: EnhancementParams::zeros(h.frames, h.feature_dim, h.sigma),
            temporal: (0..h.heads)
                .map(|_| TemporalHeadParams::zeros(h.feature_dim))
                .collect(),
            embedding: EmbeddingParams::zeros(h.embed_dim, h.heads * h.feature_dim),
            classifier: (h.loss == LossKind::Softmax)
                .then(|| ClassifierParams::zeros(h.classes, h.embed_dim)),
        }
    }

    /// Named views of every array, in a fixed order.
    pub fn arrays(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = Vec::new();
        for (k, head) in self.spatial.iter().enumerate() {
            out.push((format!("spatial.{k}.w"), head.w.as_slice()));
            out.push((format!("spatial.{k}.b"), &head.b));
            out.push((format!("spatial.{k}.w_out"), &head.w_out));
            out.push((format!("spatial.{k}.b_out"), std::slice::from_ref(&head.b_out)));
        }
        let e = &self.enhancement;
        out.push(("enhance.w_pos".into(), e.w_pos.as_slice()));
        out.push(("enhance.b_pos".into(), &e.b_pos));
        out.push(("enhance.fcn_w".into(), e.fcn_w.as_slice()));
        out.push(("enhance.fcn_b".into(), &e.fcn_b));
        for (k, head) in self.temporal.iter().enumerate() {
            out.push((format!("temporal.{k}.w"), &head.w));
            out.push((format!("temporal.{k}.b"), std::slice::from_ref(&head.b)));
        }
        out.push(("embed.w".into(), self.embedding.w.as_slice()));
        out.push(("embed.b".into(), &self.embedding.b));
        if let Some(c) = &self.classifier {
            out.push(("classifier.w".into(), c.w.as_slice()));
            out.push(("classifier.b".into(), &c.b));
        }
        out
    }

    /// Mutable counterpart of [`Weights::arrays`], same order.
    pub fn arrays_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = Vec::new();
        for (k, head) in self.spatial.iter_mut().enumerate() {
            out.push((format!("spatial.{k}.w"), head.w.as_mut_slice()));
            out.push((format!("spatial.{k}.b"), &mut head.b));
            out.push((format!("spatial.{k}.w_out"), &mut head.w_out));
            out.push((format!("spatial.{k}.b_out"), std::slice::from_mut(&mut head.b_out)));
        }
        let e = &mut self.enhancement;
        out.push(("enhance.w_pos".into(), e.w_pos.as_mut_slice()));
        out.push(("enhance.b_pos".into(), &mut e.b_pos));
        out.push(("enhance.fcn_w".into(), e.fcn_w.as_mut_slice()));
        out.push(("enhance.fcn_b".into(), &mut e.fcn_b));
        for (k, head) in self.temporal.iter_mut().enumerate() {
            out.push((format!("temporal.{k}.w"), &mut head.w));
            out.push((format!("temporal.{k}.b"), std::slice::from_mut(&mut head.b)));
        }
        out.push(("embed.w".into(), self.embedding.w.as_mut_slice()));
        out.push(("embed.b".into(), &mut self.embedding.b));
        if let Some(c) = &mut self.classifier {
            out.push(("classifier.w".into(), c.w.as_mut_slice()));
            out.push(("classifier.b".into(), &mut c.b));
        }
        out
    }

    pub fn num_values(&self) -> usize {
        self.arrays().iter().map(|(_, a)| a.len()).sum()
    }

    /// `self += alpha · other`; shapes must agree.
    pub fn add_scaled(&mut self, alpha: f64, other: &Weights) {
        let src = other.arrays();
        let dst = self.arrays_mut();
        assert_eq!(src.len(), dst.len(), "parameter sets differ");
        for ((_, d), (_, s)) in dst.into_iter().zip(src) {
            crate::math::axpy(alpha, s, d);
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for (_, a) in self.arrays_mut() {
            for v in a.iter_mut() {
                *v *= alpha;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.arrays()
            .iter()
            .all(|(_, a)| a.iter().all(|v| v.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        self.arrays()
            .iter()
            .flat_map(|(_, a)| a.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Group name of an array: the name with its head index removed.
pub fn group_of(name: &str) -> String {
    name.split('.')
        .filter(|part| part.parse::<usize>().is_err())
        .collect::<Vec<_>>()
        .join(".")
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub hyper: Hyperparams,
    pub weights: Weights,
}

impl ModelParams {
    /// Glorot-uniform weights, zero biases, zero enhancement and classifier.
    pub fn init(hyper: Hyperparams) -> Result<Self> {
        hyper.validate()?;
        let mut rng = Rng::new(hyper.seed);
        let mut weights = Weights::zeros(&hyper);
        for head in &mut weights.spatial {
            *head = SpatialHeadParams::init(hyper.hidden_dim, hyper.feature_dim, &mut rng);
        }
        for head in &mut weights.temporal {
            *head = TemporalHeadParams::init(hyper.feature_dim, &mut rng);
        }
        weights.embedding =
            EmbeddingParams::init(hyper.embed_dim, hyper.heads * hyper.feature_dim, &mut rng);
        Ok(ModelParams { hyper, weights })
    }

    /// Bit-level digest of the weights, used to tie a forward cache to its parameters.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv::default();
        for (_, a) in self.weights.arrays() {
            h.write_values(a);
        }
        h.0
    }
}

/// Gradients with the same layout as [`Weights`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradientBundle {
    pub weights: Weights,
}

impl GradientBundle {
    pub fn zeros_like(params: &ModelParams) -> Self {
        GradientBundle {
            weights: Weights::zeros(&params.hyper),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.weights.max_abs()
    }
}

/// 64-bit FNV-1a over value bit patterns.
pub(crate) struct Fnv(pub u64);

impl Default for Fnv {
    fn default() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }
}

impl Fnv {
    pub fn write_values(&mut self, values: &[f64]) {
        for v in values {
            for byte in v.to_bits().to_le_bytes() {
                self.0 ^= byte as u64;
                self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_documented_values() {
        let h = Hyperparams::default();
        assert_eq!(h.frames, 6);
        assert_eq!(h.heads, 6);
        assert_eq!((h.grid_height, h.grid_width), (8, 4));
        assert_eq!(h.lr, 0.1);
        assert_eq!(h.lr_final, 0.01);
        assert_eq!(h.lambda_div, 0.1);
        assert_eq!(h.penalty, PenaltyKind::Q);
        assert_eq!(h.lr_at(0), 0.1);
        assert_eq!(h.lr_at(14), 0.1);
        assert_eq!(h.lr_at(15), 0.01);
        h.validate().unwrap();
    }

    #[test]
    fn keywords_round_trip() {
        for p in PenaltyKind::ALL {
            assert_eq!(p.keyword().parse::<PenaltyKind>().unwrap(), *p);
        }
        assert_eq!("qprime".parse::<PenaltyKind>().unwrap(), PenaltyKind::QPrime);
        assert!("sparse".parse::<TemporalMode>().is_err());
    }

    #[test]
    fn validation_names_keys() {
        let mut h = Hyperparams::default();
        h.sigma = -1.0;
        assert!(matches!(h.validate(), Err(Error::Config { ref key, .. }) if key == "sigma"));
        let mut h = Hyperparams::default();
        h.heads = 17;
        assert!(matches!(h.validate(), Err(Error::Config { ref key, .. }) if key == "heads"));
    }

    #[test]
    fn arrays_cover_every_parameter() {
        let mut h = Hyperparams::default();
        h.heads = 2;
        h.loss = LossKind::Softmax;
        let p = ModelParams::init(h.clone()).unwrap();
        let (d, dd, n, e, c) = (h.feature_dim, h.hidden_dim, h.frames, h.embed_dim, h.classes);
        let expected = 2 * (dd * d + dd + dd + 1) + (n * n + n + d * d + d) + 2 * (d + 1)
            + (e * 2 * d + e)
            + (c * e + c);
        assert_eq!(p.weights.num_values(), expected);
        let names: Vec<_> = p.weights.arrays().into_iter().map(|(n, _)| n).collect();
        let mut again = p.clone();
        let names_mut: Vec<_> = again.weights.arrays_mut().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, names_mut);
        assert_eq!(group_of("spatial.1.w_out"), "spatial.w_out");
    }

    #[test]
    fn init_is_seeded() {
        let a = ModelParams::init(Hyperparams::default()).unwrap();
        let b = ModelParams::init(Hyperparams::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.fingerprint(), b.fingerprint());
        let c = ModelParams::init(Hyperparams {
            seed: 1,
            ..Hyperparams::default()
        })
        .unwrap();
        assert_ne!(a.fingerprint(), c.fingerprint());
    }
}
