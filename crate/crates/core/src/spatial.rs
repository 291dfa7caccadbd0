//! Multi-region spatial attention and the receptive-field diversity penalties.
//!
//! Each head scores every grid cell with a two-layer response
//! `e = w_outᵀ·relu(W·f + b) + b_out`, turns the scores into a receptive field
//! with a softmax over cells, and pools the cell features with those weights.
//!
//! Receptive fields of the K heads on one frame form the rows of `S`. The
//! Hellinger penalty `Q = ‖√S·√Sᵀ − I‖²_F` discourages overlapping fields while
//! leaving each field free to be broad. `Q′ = ‖S·Sᵀ − I‖²_F` also rewards
//! concentrating each field on a single cell.

use crate::error::{Error, Result};
use crate::math::{self, Mat};
use crate::rng::Rng;

pub const DEFAULT_GRID_HEIGHT: usize = 8;
pub const DEFAULT_GRID_WIDTH: usize = 4;
pub const DEFAULT_HEADS: usize = 6;
pub const MAX_HEADS: usize = 16;

/// Tolerance on `Σ p = 1` when validating user-supplied pmfs.
const PMF_SUM_TOL: f64 = 1e-6;

/// One frame's backbone features: L = H·W cells of dimension D, cell-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameFeatureGrid {
    cells: Mat,
    grid_shape: (usize, usize),
}

impl FrameFeatureGrid {
    pub fn new(cells: Mat, grid_shape: (usize, usize)) -> Result<Self> {
        let (h, w) = grid_shape;
        if h == 0 || w == 0 || cells.rows() != h * w {
            return Err(Error::shape(format!(
                "{} cells do not tile a {h}x{w} grid",
                cells.rows()
            )));
        }
        if cells.cols() == 0 {
            return Err(Error::shape("feature dimension must be positive"));
        }
        if !cells.is_finite() {
            return Err(Error::InvalidInput("feature grid holds non-finite values".into()));
        }
        Ok(FrameFeatureGrid { cells, grid_shape })
    }

    /// A 1×L grid, convenient for small hand-built cases.
    pub fn from_cells(cells: Mat) -> Result<Self> {
        let l = cells.rows();
        Self::new(cells, (1, l))
    }

    pub fn cells(&self) -> &Mat {
        &self.cells
    }

    pub fn cell(&self, l: usize) -> &[f64] {
        self.cells.row(l)
    }

    pub fn grid_shape(&self) -> (usize, usize) {
        self.grid_shape
    }

    pub fn num_cells(&self) -> usize {
        self.cells.rows()
    }

    pub fn dim(&self) -> usize {
        self.cells.cols()
    }
}

/// Parameters of one spatial attention head.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialHeadParams {
    /// d×D projection.
    pub w: Mat,
    pub b: Vec<f64>,
    /// Second linear map, d → 1.
    pub w_out: Vec<f64>,
    pub b_out: f64,
}

impl SpatialHeadParams {
    pub fn zeros(hidden: usize, dim: usize) -> Self {
        SpatialHeadParams {
            w: Mat::zeros(hidden, dim),
            b: vec![0.0; hidden],
            w_out: vec![0.0; hidden],
            b_out: 0.0,
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(hidden: usize, dim: usize, rng: &mut Rng) -> Self {
        let a = (6.0 / (dim + hidden) as f64).sqrt();
        let a_out = (6.0 / (hidden + 1) as f64).sqrt();
        SpatialHeadParams {
            w: Mat::from_fn(hidden, dim, |_, _| rng.uniform_in(-a, a)),
            b: vec![0.0; hidden],
            w_out: (0..hidden).map(|_| rng.uniform_in(-a_out, a_out)).collect(),
            b_out: 0.0,
        }
    }

    pub fn hidden(&self) -> usize {
        self.w.rows()
    }

    pub fn dim(&self) -> usize {
        self.w.cols()
    }

    fn check(&self, dim: usize) -> Result<()> {
        let d = self.hidden();
        if d == 0 || self.b.len() != d || self.w_out.len() != d {
            return Err(Error::shape("inconsistent spatial head hidden size"));
        }
        if self.dim() != dim {
            return Err(Error::shape(format!(
                "head expects D={}, grid has D={dim}",
                self.dim()
            )));
        }
        Ok(())
    }
}

/// K×L matrix of receptive fields for a single frame; rows are pmfs.
#[derive(Clone, Debug, PartialEq)]
pub struct ReceptiveFieldSet {
    s: Mat,
}

impl ReceptiveFieldSet {
    /// Validates that every row is a pmf.
    pub fn new(s: Mat) -> Result<Self> {
        for k in 0..s.rows() {
            check_pmf(s.row(k))?;
        }
        Ok(ReceptiveFieldSet { s })
    }

    pub(crate) fn from_trusted(s: Mat) -> Self {
        ReceptiveFieldSet { s }
    }

    pub fn matrix(&self) -> &Mat {
        &self.s
    }

    pub fn field(&self, k: usize) -> &[f64] {
        self.s.row(k)
    }

    pub fn heads(&self) -> usize {
        self.s.rows()
    }

    pub fn cells(&self) -> usize {
        self.s.cols()
    }

    /// `R = √S`, elementwise.
    pub fn sqrt(&self) -> Mat {
        Mat::from_fn(self.s.rows(), self.s.cols(), |r, c| self.s[(r, c)].sqrt())
    }

    /// Mean Bhattacharyya coefficient over head pairs; 0 for a single head.
    pub fn mean_pairwise_bhattacharyya(&self) -> f64 {
        let k = self.heads();
        if k < 2 {
            return 0.0;
        }
        let mut total = 0.0;
        for i in 0..k {
            for j in i + 1..k {
                total += bhattacharyya_unchecked(self.field(i), self.field(j));
            }
        }
        total / (k * (k - 1) / 2) as f64
    }

    /// Mean over heads of the largest single-cell mass.
    pub fn mean_max_mass(&self) -> f64 {
        let k = self.heads();
        (0..k)
            .map(|i| self.field(i).iter().copied().fold(0.0, f64::max))
            .sum::<f64>()
            / k as f64
    }
}

/// Spatially gated features of one head across frames: column n is `x_{n,k}`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialGatedFeatures {
    x: Mat,
}

impl SpatialGatedFeatures {
    /// Stacks per-frame D-vectors as the columns of a D×N matrix.
    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        let n = columns.len();
        let d = columns.first().map_or(0, Vec::len);
        if n == 0 || d == 0 || columns.iter().any(|c| c.len() != d) {
            return Err(Error::shape("gated features need N ≥ 1 equal-length columns"));
        }
        Ok(SpatialGatedFeatures {
            x: Mat::from_fn(d, n, |r, c| columns[c][r]),
        })
    }

    pub fn matrix(&self) -> &Mat {
        &self.x
    }

    pub fn into_matrix(self) -> Mat {
        self.x
    }

    pub fn frames(&self) -> usize {
        self.x.cols()
    }
}

/// Softmax input of one head on one frame, plus what the backward pass needs.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialScores {
    /// Per-cell scores; the responses `e_ℓ` minus a per-frame constant.
    pub scores: Vec<f64>,
    /// L×d `F·Wᵀ`, without the hidden bias.
    pub raw: Mat,
    /// L×d pre-activations `F·Wᵀ + 1·bᵀ`.
    pub pre: Mat,
    /// Hidden units active on every cell.
    pub always_on: Vec<bool>,
}

/// Scores of one head for every cell of the grid.
///
/// Terms common to all cells are left out: `b_out`, and `w_out_j·b_j` of every
/// hidden unit that is active on all cells. The softmax cancels them, and
/// leaving them out makes the cancellation exact instead of exact up to rounding.
pub fn spatial_scores_traced(grid: &FrameFeatureGrid, head: &SpatialHeadParams) -> Result<SpatialScores> {
    head.check(grid.dim())?;
    let l = grid.num_cells();
    let d = head.hidden();
    let raw = grid.cells().matmul(&head.w.transpose())?;
    let mut pre = raw.clone();
    for c in 0..l {
        math::axpy(1.0, &head.b, pre.row_mut(c));
    }
    let always_on: Vec<bool> = (0..d).map(|j| (0..l).all(|c| pre[(c, j)] > 0.0)).collect();
    let scores = (0..l)
        .map(|c| {
            let mut e = 0.0;
            for j in 0..d {
                if always_on[j] {
                    e += head.w_out[j] * raw[(c, j)];
                } else if pre[(c, j)] > 0.0 {
                    e += head.w_out[j] * pre[(c, j)];
                }
            }
            e
        })
        .collect();
    Ok(SpatialScores {
        scores,
        raw,
        pre,
        always_on,
    })
}

/// Response `e_ℓ = w_outᵀ relu(W f_ℓ + b) + b_out` of one head for every cell of the grid.
pub fn spatial_response(grid: &FrameFeatureGrid, head: &SpatialHeadParams) -> Result<Vec<f64>> {
    let pre = spatial_scores_traced(grid, head)?.pre;
    Ok((0..pre.rows())
        .map(|c| {
            let relu: Vec<f64> = math::relu(pre.row(c));
            math::dot(&head.w_out, &relu) + head.b_out
        })
        .collect())
}

/// Attention-weighted average of the grid cells.
pub fn pool_cells(grid: &FrameFeatureGrid, weights: &[f64]) -> Vec<f64> {
    grid.cells()
        .matvec_t(weights)
        .expect("weights sized to the grid")
}

/// Runs all K heads on one frame: receptive fields and one gated feature per head.
pub fn spatial_attend(
    grid: &FrameFeatureGrid,
    heads: &[SpatialHeadParams],
) -> Result<(ReceptiveFieldSet, Vec<Vec<f64>>)> {
    if heads.is_empty() {
        return Err(Error::InvalidInput("at least one spatial head is required".into()));
    }
    let mut s = Mat::zeros(heads.len(), grid.num_cells());
    let mut gated = Vec::with_capacity(heads.len());
    for (k, head) in heads.iter().enumerate() {
        let field = math::softmax_row(&spatial_scores_traced(grid, head)?.scores)?;
        gated.push(pool_cells(grid, &field));
        s.row_mut(k).copy_from_slice(&field);
    }
    Ok((ReceptiveFieldSet::from_trusted(s), gated))
}

fn check_pmf(p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::InvalidPmf("empty".into()));
    }
    if let Some(x) = p.iter().find(|x| !x.is_finite() || **x < 0.0) {
        return Err(Error::InvalidPmf(format!("entry {x} is negative or non-finite")));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > PMF_SUM_TOL {
        return Err(Error::InvalidPmf(format!("sums to {sum}")));
    }
    Ok(())
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(format!("pmfs over {} and {} cells", a.len(), b.len())));
    }
    check_pmf(a)?;
    check_pmf(b)
}

fn bhattacharyya_unchecked(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x * y).sqrt()).sum()
}

/// Bhattacharyya coefficient `Σ √(a_ℓ b_ℓ)`.
pub fn bhattacharyya(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b)?;
    Ok(bhattacharyya_unchecked(a, b))
}

/// Hellinger distance `(1/√2)‖√a − √b‖₂`.
pub fn hellinger(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b)?;
    let sq: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x.sqrt() - y.sqrt()).powi(2))
        .sum();
    Ok(sq.sqrt() / std::f64::consts::SQRT_2)
}

/// Squared Hellinger distance through the pmf identity `H² = 1 − BC`.
pub fn hellinger_sq_via_overlap(a: &[f64], b: &[f64]) -> Result<f64> {
    Ok(1.0 - bhattacharyya(a, b)?)
}

/// Which receptive-field regulariser enters the objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PenaltyKind {
    /// Hellinger-based `‖√S√Sᵀ − I‖²_F`.
    Q,
    /// `‖SSᵀ − I‖²_F`.
    QPrime,
    None,
}

impl PenaltyKind {
    pub fn value(self, fields: &ReceptiveFieldSet) -> f64 {
        match self {
            PenaltyKind::Q => gram_penalty(&fields.sqrt()),
            PenaltyKind::QPrime => gram_penalty(fields.matrix()),
            PenaltyKind::None => 0.0,
        }
    }

    /// `∂penalty/∂S`, K×L.
    pub fn grad(self, fields: &ReceptiveFieldSet) -> Mat {
        let s = fields.matrix();
        match self {
            PenaltyKind::None => Mat::zeros(s.rows(), s.cols()),
            PenaltyKind::QPrime => gram_penalty_grad(s),
            PenaltyKind::Q => {
                let r = fields.sqrt();
                let grad_r = gram_penalty_grad(&r);
                // ∂√s/∂s = 1/(2√s); subgradient 0 where s underflowed to 0.
                Mat::from_fn(s.rows(), s.cols(), |i, j| {
                    let rij = r[(i, j)];
                    if rij > 0.0 {
                        grad_r[(i, j)] / (2.0 * rij)
                    } else {
                        0.0
                    }
                })
            }
        }
    }
}

/// `‖A·Aᵀ − I‖²_F`.
fn gram_penalty(a: &Mat) -> f64 {
    let mut g = a.matmul(&a.transpose()).expect("square gram");
    for i in 0..g.rows() {
        g[(i, i)] -= 1.0;
    }
    g.frobenius_sq()
}

/// `∂‖AAᵀ − I‖²_F / ∂A = 4·(AAᵀ − I)·A`.
fn gram_penalty_grad(a: &Mat) -> Mat {
    let mut g = a.matmul(&a.transpose()).expect("square gram");
    for i in 0..g.rows() {
        g[(i, i)] -= 1.0;
    }
    let mut out = g.matmul(a).expect("conformable");
    for v in out.as_mut_slice() {
        *v *= 4.0;
    }
    out
}

/// Hellinger diversity penalty `Q = ‖√S·√Sᵀ − I‖²_F`.
pub fn diversity_q(fields: &ReceptiveFieldSet) -> f64 {
    PenaltyKind::Q.value(fields)
}

/// `Q′ = ‖S·Sᵀ − I‖²_F`.
pub fn diversity_qprime(fields: &ReceptiveFieldSet) -> f64 {
    PenaltyKind::QPrime.value(fields)
}
