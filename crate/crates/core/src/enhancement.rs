//! Per-head feature enhancement across frames.
//!
//! For head k with gated features `X` (D×N):
//!
//! ```text
//! Φ = XᵀX                                   appearance similarity
//! Ψ[i][j] = W_pos[i][j]·exp(−|i−j|/σ) + b_pos[j]   positional similarity
//! C = row-softmax(Φ + Ψ)
//! X̂ = W_fcn·(X·C) + b_fcn·1ᵀ + X
//! ```
//!
//! The positional weight multiplies the decay elementwise, and `b_pos` is indexed
//! by the contributing (column) frame. `W_pos`, `b_pos`, `W_fcn` and `b_fcn` are
//! shared by all heads; σ is fixed.

use crate::error::{Error, Result};
use crate::math::{self, Mat};

pub const DEFAULT_SIGMA: f64 = 2.0;

#[derive(Clone, Debug, PartialEq)]
pub struct EnhancementParams {
    /// N×N positional weights.
    pub w_pos: Mat,
    /// Per-source-frame bias (length N).
    pub b_pos: Vec<f64>,
    /// Temporal decay scale; not trained.
    pub sigma: f64,
    /// D×D linear map of the residual branch.
    pub fcn_w: Mat,
    pub fcn_b: Vec<f64>,
}

impl EnhancementParams {
    /// All-zero trainable arrays: starts as the identity map with pure appearance similarity.
    pub fn zeros(frames: usize, dim: usize, sigma: f64) -> Self {
        EnhancementParams {
            w_pos: Mat::zeros(frames, frames),
            b_pos: vec![0.0; frames],
            sigma,
            fcn_w: Mat::zeros(dim, dim),
            fcn_b: vec![0.0; dim],
        }
    }

    pub fn frames(&self) -> usize {
        self.b_pos.len()
    }

    pub fn dim(&self) -> usize {
        self.fcn_b.len()
    }
}

/// N×N row-stochastic matrix: row i holds the contribution of every frame to frame i.
#[derive(Clone, Debug, PartialEq)]
pub struct ContributionMatrix {
    c: Mat,
}

impl ContributionMatrix {
    pub fn matrix(&self) -> &Mat {
        &self.c
    }

    pub fn into_matrix(self) -> Mat {
        self.c
    }
}

/// `Φ = XᵀX`.
pub fn feature_similarity(x: &Mat) -> Mat {
    let n = x.cols();
    let cols: Vec<Vec<f64>> = (0..n).map(|j| x.col(j)).collect();
    let mut phi = Mat::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = math::dot(&cols[i], &cols[j]);
            phi[(i, j)] = v;
            phi[(j, i)] = v;
        }
    }
    phi
}

/// `exp(−|i−j|/σ)` for an N-frame window.
pub fn temporal_decay(frames: usize, sigma: f64) -> Mat {
    Mat::from_fn(frames, frames, |i, j| {
        (-(i.abs_diff(j) as f64) / sigma).exp()
    })
}

/// `Ψ = W_pos ⊙ exp(−|i−j|/σ) + 1·b_posᵀ`.
pub fn temporal_similarity(params: &EnhancementParams, frames: usize) -> Result<Mat> {
    if !(params.sigma > 0.0) || !params.sigma.is_finite() {
        return Err(Error::InvalidParameter {
            name: "sigma".into(),
            reason: format!("must be positive, got {}", params.sigma),
        });
    }
    if params.w_pos.shape() != (frames, frames) || params.b_pos.len() != frames {
        return Err(Error::shape(format!(
            "positional parameters are not sized for {frames} frames"
        )));
    }
    let decay = temporal_decay(frames, params.sigma);
    Ok(Mat::from_fn(frames, frames, |i, j| {
        params.w_pos[(i, j)] * decay[(i, j)] + params.b_pos[j]
    }))
}

/// Row-wise softmax of `Φ + Ψ`.
pub fn contribution(phi: &Mat, psi: &Mat) -> Result<ContributionMatrix> {
    if phi.shape() != psi.shape() || phi.rows() != phi.cols() {
        return Err(Error::shape(format!(
            "similarities {:?} and {:?} are not matching square matrices",
            phi.shape(),
            psi.shape()
        )));
    }
    let mut sum = phi.clone();
    sum.add_scaled(1.0, psi);
    Ok(ContributionMatrix {
        c: sum.softmax_rows()?,
    })
}

/// `X̂ = W_fcn·(X·C) + b_fcn·1ᵀ + X`. Also returns `X·C` for the backward pass.
pub fn enhance_traced(
    x: &Mat,
    c: &ContributionMatrix,
    params: &EnhancementParams,
) -> Result<(Mat, Mat)> {
    let (d, n) = x.shape();
    if c.c.shape() != (n, n) {
        return Err(Error::shape(format!("contribution is {:?}, need {n}x{n}", c.c.shape())));
    }
    if params.fcn_w.shape() != (d, d) || params.fcn_b.len() != d {
        return Err(Error::shape(format!("residual map is not sized for D={d}")));
    }
    let mixed = x.matmul(&c.c)?;
    let mut out = params.fcn_w.matmul(&mixed)?;
    for r in 0..d {
        let bias = params.fcn_b[r];
        for v in out.row_mut(r) {
            *v += bias;
        }
    }
    out.add_scaled(1.0, x);
    Ok((out, mixed))
}

pub fn enhance(x: &Mat, c: &ContributionMatrix, params: &EnhancementParams) -> Result<Mat> {
    enhance_traced(x, c, params).map(|(out, _)| out)
}

/// Full enhancement of one head's features: `(X̂, C)`.
pub fn enhance_head(x: &Mat, params: &EnhancementParams) -> Result<(Mat, ContributionMatrix)> {
    let psi = temporal_similarity(params, x.cols())?;
    let c = contribution(&feature_similarity(x), &psi)?;
    let xhat = enhance(x, &c, params)?;
    Ok((xhat, c))
}

/// Gradients of the shared enhancement parameters.
#[derive(Clone, Debug)]
pub struct EnhancementGrads {
    pub w_pos: Mat,
    pub b_pos: Vec<f64>,
    pub fcn_w: Mat,
    pub fcn_b: Vec<f64>,
}

/// Backward through one head's enhancement. Accumulates parameter gradients
/// into `grads` and returns `∂L/∂X`.
pub fn enhance_backward(
    x: &Mat,
    c: &Mat,
    mixed: &Mat,
    params: &EnhancementParams,
    grad_xhat: &Mat,
    grads: &mut EnhancementGrads,
) -> Mat {
    let n = x.cols();
    // X̂ = W M + b 1ᵀ + X, M = X C
    let mixed_t = mixed.transpose();
    grads
        .fcn_w
        .add_scaled(1.0, &grad_xhat.matmul(&mixed_t).expect("D×N · N×D"));
    for (r, gb) in grads.fcn_b.iter_mut().enumerate() {
        *gb += grad_xhat.row(r).iter().sum::<f64>();
    }
    let grad_mixed = params.fcn_w.transpose().matmul(grad_xhat).expect("D×D · D×N");
    let mut grad_x = grad_xhat.clone();
    grad_x.add_scaled(1.0, &grad_mixed.matmul(&c.transpose()).expect("D×N · N×N"));
    let grad_c = x.transpose().matmul(&grad_mixed).expect("N×D · D×N");

    // C = row-softmax(A), A = Φ + Ψ
    let mut grad_a = Mat::zeros(n, n);
    for i in 0..n {
        grad_a
            .row_mut(i)
            .copy_from_slice(&math::softmax_backward(c.row(i), grad_c.row(i)));
    }

    // Φ = XᵀX  ⇒  ∂X += X (Ā + Āᵀ)
    let mut sym = grad_a.clone();
    sym.add_scaled(1.0, &grad_a.transpose());
    grad_x.add_scaled(1.0, &x.matmul(&sym).expect("D×N · N×N"));

    let decay = temporal_decay(n, params.sigma);
    for i in 0..n {
        for j in 0..n {
            grads.w_pos[(i, j)] += grad_a[(i, j)] * decay[(i, j)];
            grads.b_pos[j] += grad_a[(i, j)];
        }
    }
    grad_x
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn random(rng: &mut Rng, r: usize, c: usize) -> Mat {
        Mat::from_fn(r, c, |_, _| rng.normal())
    }

    #[test]
    fn similarity_examples() {
        let x = Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap();
        assert_eq!(feature_similarity(&x), Mat::identity(2));
        assert_eq!(feature_similarity(&Mat::zeros(3, 4)), Mat::zeros(4, 4));

        let mut rng = Rng::new(2);
        let x = random(&mut rng, 3, 4);
        let phi = feature_similarity(&x);
        for i in 0..4 {
            for j in 0..4 {
                let mut s = 0.0;
                for r in 0..3 {
                    s += x[(r, i)] * x[(r, j)];
                }
                assert!((phi[(i, j)] - s).abs() < 1e-12);
                assert_eq!(phi[(i, j)], phi[(j, i)]);
            }
        }
    }

    #[test]
    fn temporal_similarity_examples() {
        let p = EnhancementParams::zeros(3, 2, 2.0);
        assert_eq!(temporal_similarity(&p, 3).unwrap(), Mat::zeros(3, 3));

        let mut p = EnhancementParams::zeros(2, 2, 1.0);
        p.w_pos = Mat::from_vec(2, 2, vec![1.0; 4]).unwrap();
        let psi = temporal_similarity(&p, 2).unwrap();
        let e1 = (-1f64).exp();
        assert!((e1 - 0.367879).abs() < 1e-6);
        assert_eq!(psi, Mat::from_vec(2, 2, vec![1.0, e1, e1, 1.0]).unwrap());

        let mut p = EnhancementParams::zeros(2, 2, 1.0);
        p.b_pos = vec![1.0, 2.0];
        let psi = temporal_similarity(&p, 2).unwrap();
        assert_eq!(psi.row(0), &[1.0, 2.0]);
        assert_eq!(psi.row(1), &[1.0, 2.0]);

        for sigma in [0.0, -1.0, f64::NAN] {
            let p = EnhancementParams::zeros(2, 2, sigma);
            assert!(matches!(
                temporal_similarity(&p, 2),
                Err(Error::InvalidParameter { ref name, .. }) if name == "sigma"
            ));
        }
    }

    #[test]
    fn contribution_examples() {
        let c = contribution(&Mat::zeros(4, 4), &Mat::zeros(4, 4)).unwrap();
        assert!(c.matrix().as_slice().iter().all(|&v| (v - 0.25).abs() < 1e-15));

        let mut phi = Mat::zeros(3, 3);
        phi[(1, 2)] = 20.0;
        let c = contribution(&phi, &Mat::zeros(3, 3)).unwrap();
        assert!(c.matrix()[(1, 2)] > 0.999);

        let mut rng = Rng::new(8);
        let phi = random(&mut rng, 4, 4);
        let psi = random(&mut rng, 4, 4);
        let c = contribution(&phi, &psi).unwrap();
        for i in 0..4 {
            let e: Vec<f64> = (0..4).map(|j| (phi[(i, j)] + psi[(i, j)]).exp()).collect();
            let s: f64 = e.iter().sum();
            for j in 0..4 {
                assert!((c.matrix()[(i, j)] - e[j] / s).abs() < 1e-12);
            }
        }
        assert!(contribution(&Mat::zeros(2, 2), &Mat::zeros(3, 3)).is_err());
    }

    #[test]
    fn enhance_examples() {
        let mut rng = Rng::new(12);
        let x = random(&mut rng, 3, 4);
        let c = contribution(&feature_similarity(&x), &Mat::zeros(4, 4)).unwrap();
        let zero = EnhancementParams::zeros(4, 3, 2.0);
        assert_eq!(enhance(&x, &c, &zero).unwrap(), x);

        let ident = ContributionMatrix { c: Mat::identity(4) };
        let mut p = EnhancementParams::zeros(4, 3, 2.0);
        p.fcn_w = Mat::identity(3);
        let doubled = enhance(&x, &ident, &p).unwrap();
        for (a, b) in doubled.as_slice().iter().zip(x.as_slice()) {
            assert_eq!(*a, 2.0 * b);
        }
    }

    #[test]
    fn enhance_matches_matrix_chain_oracle() {
        let mut rng = Rng::new(31);
        let (d, n) = (3, 4);
        let x = random(&mut rng, d, n);
        let mut p = EnhancementParams::zeros(n, d, 2.0);
        p.fcn_w = random(&mut rng, d, d);
        p.fcn_b = (0..d).map(|_| rng.normal()).collect();
        let c = contribution(&random(&mut rng, n, n), &Mat::zeros(n, n)).unwrap();
        let got = enhance(&x, &c, &p).unwrap();
        for r in 0..d {
            for col in 0..n {
                let mut v = p.fcn_b[r] + x[(r, col)];
                for a in 0..d {
                    let mut m = 0.0;
                    for j in 0..n {
                        m += x[(a, j)] * c.matrix()[(j, col)];
                    }
                    v += p.fcn_w[(r, a)] * m;
                }
                assert!((got[(r, col)] - v).abs() < 1e-10);
            }
        }
        assert!(enhance(&random(&mut rng, 2, n), &c, &p).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = Rng::new(77);
        let (d, n) = (3, 4);
        let x = Mat::from_fn(d, n, |_, _| 0.5 * rng.normal());
        let mut p = EnhancementParams::zeros(n, d, 1.5);
        p.w_pos = random(&mut rng, n, n);
        p.b_pos = (0..n).map(|_| rng.normal()).collect();
        p.fcn_w = random(&mut rng, d, d);
        p.fcn_b = (0..d).map(|_| rng.normal()).collect();
        let weights = random(&mut rng, d, n);
        let objective = |x: &Mat, p: &EnhancementParams| -> f64 {
            let (xhat, _) = enhance_head(x, p).unwrap();
            xhat.as_slice().iter().zip(weights.as_slice()).map(|(a, b)| a * b).sum()
        };

        let psi = temporal_similarity(&p, n).unwrap();
        let c = contribution(&feature_similarity(&x), &psi).unwrap();
        let (_, mixed) = enhance_traced(&x, &c, &p).unwrap();
        let mut grads = EnhancementGrads {
            w_pos: Mat::zeros(n, n),
            b_pos: vec![0.0; n],
            fcn_w: Mat::zeros(d, d),
            fcn_b: vec![0.0; d],
        };
        let grad_x = enhance_backward(&x, c.matrix(), &mixed, &p, &weights, &mut grads);

        let eps = 1e-6;
        let check = |analytic: f64, plus: f64, minus: f64| {
            let numeric = (plus - minus) / (2.0 * eps);
            assert!(
                (analytic - numeric).abs() <= 1e-6 * analytic.abs().max(1.0),
                "{analytic} vs {numeric}"
            );
        };
        for i in 0..d * n {
            let mut xp = x.clone();
            xp.as_mut_slice()[i] += eps;
            let mut xm = x.clone();
            xm.as_mut_slice()[i] -= eps;
            check(grad_x.as_slice()[i], objective(&xp, &p), objective(&xm, &p));
        }
        for i in 0..n * n {
            let mut pp = p.clone();
            pp.w_pos.as_mut_slice()[i] += eps;
            let mut pm = p.clone();
            pm.w_pos.as_mut_slice()[i] -= eps;
            check(grads.w_pos.as_slice()[i], objective(&x, &pp), objective(&x, &pm));
        }
        for i in 0..n {
            let mut pp = p.clone();
            pp.b_pos[i] += eps;
            let mut pm = p.clone();
            pm.b_pos[i] -= eps;
            check(grads.b_pos[i], objective(&x, &pp), objective(&x, &pm));
        }
        for i in 0..d * d {
            let mut pp = p.clone();
            pp.fcn_w.as_mut_slice()[i] += eps;
            let mut pm = p.clone();
            pm.fcn_w.as_mut_slice()[i] -= eps;
            check(grads.fcn_w.as_slice()[i], objective(&x, &pp), objective(&x, &pm));
        }
    }

    proptest! {
        #[test]
        fn gram_is_exactly_symmetric_and_rows_are_pmfs(seed in any::<u64>(), n in 1usize..7) {
            let mut rng = Rng::new(seed);
            let x = random(&mut rng, 4, n);
            let phi = feature_similarity(&x);
            prop_assert_eq!(phi.clone(), phi.transpose());
            let c = contribution(&phi, &random(&mut rng, n, n)).unwrap();
            for i in 0..n {
                let row = c.matrix().row(i);
                prop_assert!(row.iter().all(|&v| v >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-10);
            }
        }
    }
}
