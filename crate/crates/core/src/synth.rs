//! Synthetic feature-grid videos with planted body parts.
//!
//! Every part `p` lives in its own horizontal band of grid rows. A part cell
//! holds the part's shared prototype plus the identity's signature for that
//! part, so attention can find parts without knowing who is shown. Each
//! identity has its own anchor cell per part; per frame the part may jitter one
//! column sideways or, with probability `p_occ`, be replaced by a clutter vector
//! drawn from a pool shared by all identities. Remaining cells hold a scene
//! vector fixed for the whole video (identity-uninformative) plus noise.
//!
//! Identities are split into training identities, which get `train_videos`
//! videos each, and evaluation identities, which get one gallery video
//! (camera 0) and one probe video (camera 1). With `test_identities = 0` the
//! gallery and probe videos are fresh videos of the training identities.

use crate::error::{Error, Result};
use crate::gridfile::LabeledVideo;
use crate::math::{self, Mat};
use crate::rng::Rng;
use crate::spatial::FrameFeatureGrid;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub identities: usize,
    pub test_identities: usize,
    pub train_videos: usize,
    pub frames_min: usize,
    pub frames_max: usize,
    pub grid_height: usize,
    pub grid_width: usize,
    pub feature_dim: usize,
    pub parts: usize,
    /// Cells per part along a row.
    pub part_width: usize,
    pub prototype: f64,
    pub signal: f64,
    pub background: f64,
    pub clutter: f64,
    pub distractors: usize,
    pub noise: f64,
    /// Probability per frame and part of a one-column shift.
    pub jitter: f64,
    pub p_occ: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            identities: 16,
            test_identities: 16,
            train_videos: 4,
            frames_min: 8,
            frames_max: 16,
            grid_height: 8,
            grid_width: 4,
            feature_dim: 64,
            parts: 4,
            part_width: 2,
            prototype: 1.0,
            signal: 1.0,
            background: 1.0,
            clutter: 1.5,
            distractors: 32,
            noise: 0.3,
            jitter: 0.2,
            p_occ: 0.0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let at_least = |key: &str, v: usize, min: usize| {
            if v < min {
                Err(Error::config(key, format!("must be at least {min}, got {v}")))
            } else {
                Ok(())
            }
        };
        at_least("identities", self.identities, 2)?;
        at_least("train_videos", self.train_videos, 1)?;
        at_least("frames_min", self.frames_min, 1)?;
        at_least("grid_height", self.grid_height, 1)?;
        at_least("grid_width", self.grid_width, 1)?;
        at_least("feature_dim", self.feature_dim, 1)?;
        at_least("parts", self.parts, 1)?;
        at_least("part_width", self.part_width, 1)?;
        at_least("distractors", self.distractors, 1)?;
        if self.test_identities == 1 {
            return Err(Error::config("test_identities", "must be 0 or at least 2"));
        }
        if self.frames_max < self.frames_min {
            return Err(Error::config("frames_max", "must not be below frames_min"));
        }
        if self.parts > self.grid_height {
            return Err(Error::config("parts", "cannot exceed grid_height"));
        }
        if self.part_width > self.grid_width {
            return Err(Error::config("part_width", "cannot exceed grid_width"));
        }
        let magnitudes = [
            ("prototype", self.prototype),
            ("signal", self.signal),
            ("background", self.background),
            ("clutter", self.clutter),
            ("noise", self.noise),
        ];
        for (key, v) in magnitudes {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(key, format!("must be a finite value >= 0, got {v}")));
            }
        }
        for (key, v) in [("jitter", self.jitter), ("p_occ", self.p_occ)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(key, format!("must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }

    pub fn total_identities(&self) -> usize {
        self.identities + self.test_identities
    }
}

/// Latent structure of one identity.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentityLayout {
    /// Per part: identity-specific signature (D).
    pub signatures: Vec<Vec<f64>>,
    /// Per part: (row, first column) of the part block without jitter.
    pub anchors: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub spec: SynthSpec,
    pub prototypes: Vec<Vec<f64>>,
    pub identities: Vec<IdentityLayout>,
    pub train: Vec<LabeledVideo>,
    pub gallery: Vec<LabeledVideo>,
    pub probe: Vec<LabeledVideo>,
}

fn direction(rng: &mut Rng, dim: usize, scale: f64) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        if let Ok(u) = math::l2_normalize(&v) {
            return u.into_iter().map(|x| x * scale).collect();
        }
    }
}

/// Rows `[start, end)` of part `p`'s band.
pub fn band(spec: &SynthSpec, p: usize) -> (usize, usize) {
    (p * spec.grid_height / spec.parts, (p + 1) * spec.grid_height / spec.parts)
}

struct Generator<'a> {
    spec: &'a SynthSpec,
    prototypes: Vec<Vec<f64>>,
    pool: Vec<Vec<f64>>,
}

impl Generator<'_> {
    fn video(&self, id: &IdentityLayout, label: usize, camera: usize, rng: &mut Rng) -> Result<LabeledVideo> {
        let s = self.spec;
        let (h, w, d) = (s.grid_height, s.grid_width, s.feature_dim);
        let frames = s.frames_min + rng.below(s.frames_max - s.frames_min + 1);
        let scene = direction(rng, d, s.background);
        let noise_sd = s.noise / (d as f64).sqrt();
        let max_col = w - s.part_width;
        let mut grids = Vec::with_capacity(frames);
        for _ in 0..frames {
            let mut cells = Mat::from_fn(h * w, d, |_, c| scene[c]);
            for p in 0..s.parts {
                let (row, col) = id.anchors[p];
                let col = if max_col > 0 && rng.bernoulli(s.jitter) {
                    match (col, rng.bernoulli(0.5)) {
                        (0, _) => 1,
                        (c, _) if c == max_col => c - 1,
                        (c, true) => c + 1,
                        (c, false) => c - 1,
                    }
                } else {
                    col
                };
                let content: Vec<f64> = if rng.bernoulli(s.p_occ) {
                    self.pool[rng.below(self.pool.len())].clone()
                } else {
                    self.prototypes[p].iter().zip(&id.signatures[p]).map(|(a, b)| a + b).collect()
                };
                for c in col..col + s.part_width {
                    cells.row_mut(row * w + c).copy_from_slice(&content);
                }
            }
            if noise_sd > 0.0 {
                for v in cells.as_mut_slice() {
                    *v += noise_sd * rng.normal();
                }
            }
            grids.push(FrameFeatureGrid::new(cells, (h, w))?);
        }
        Ok(LabeledVideo {
            frames: grids,
            label,
            camera,
        })
    }
}

/// Deterministic dataset for `(spec, seed)`.
pub fn make_synthetic(spec: &SynthSpec, seed: u64) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = Rng::new(seed);
    let d = spec.feature_dim;
    let prototypes: Vec<Vec<f64>> = (0..spec.parts).map(|_| direction(&mut rng, d, spec.prototype)).collect();
    let pool: Vec<Vec<f64>> = (0..spec.distractors).map(|_| direction(&mut rng, d, spec.clutter)).collect();
    let identities: Vec<IdentityLayout> = (0..spec.total_identities())
        .map(|_| {
            let signatures = (0..spec.parts).map(|_| direction(&mut rng, d, spec.signal)).collect();
            let anchors = (0..spec.parts)
                .map(|p| {
                    let (lo, hi) = band(spec, p);
                    (lo + rng.below(hi - lo), rng.below(spec.grid_width - spec.part_width + 1))
                })
                .collect();
            IdentityLayout { signatures, anchors }
        })
        .collect();

    let gen = Generator {
        spec,
        prototypes: prototypes.clone(),
        pool,
    };
    let mut train = Vec::new();
    for (label, id) in identities.iter().enumerate().take(spec.identities) {
        for v in 0..spec.train_videos {
            train.push(gen.video(id, label, v % 2, &mut rng)?);
        }
    }
    let eval_ids = if spec.test_identities == 0 {
        0..spec.identities
    } else {
        spec.identities..spec.total_identities()
    };
    let mut gallery = Vec::new();
    let mut probe = Vec::new();
    for label in eval_ids {
        gallery.push(gen.video(&identities[label], label, 0, &mut rng)?);
        probe.push(gen.video(&identities[label], label, 1, &mut rng)?);
    }
    Ok(SyntheticDataset {
        spec: spec.clone(),
        prototypes,
        identities,
        train,
        gallery,
        probe,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridfile;

    fn clean() -> SynthSpec {
        SynthSpec {
            identities: 4,
            noise: 0.0,
            p_occ: 0.0,
            jitter: 0.0,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn clean_frames_repeat_part_signatures_at_fixed_cells() {
        let data = make_synthetic(&clean(), 3).unwrap();
        let w = data.spec.grid_width;
        for v in &data.train {
            let id = &data.identities[v.label];
            for f in &v.frames {
                for p in 0..data.spec.parts {
                    let (row, col) = id.anchors[p];
                    let expected: Vec<f64> =
                        data.prototypes[p].iter().zip(&id.signatures[p]).map(|(a, b)| a + b).collect();
                    for c in col..col + data.spec.part_width {
                        assert_eq!(f.cell(row * w + c), &expected[..]);
                    }
                }
                assert_eq!(f.cells(), v.frames[0].cells());
            }
        }
    }

    #[test]
    fn anchors_stay_in_their_bands_and_labels_in_range() {
        let spec = SynthSpec {
            test_identities: 3,
            ..SynthSpec::default()
        };
        let data = make_synthetic(&spec, 9).unwrap();
        for id in &data.identities {
            for (p, &(row, col)) in id.anchors.iter().enumerate() {
                let (lo, hi) = band(&spec, p);
                assert!((lo..hi).contains(&row));
                assert!(col + spec.part_width <= spec.grid_width);
            }
        }
        assert_eq!(data.train.len(), 16 * 4);
        assert!(data.train.iter().all(|v| v.label < 16));
        assert!(data.gallery.iter().chain(&data.probe).all(|v| (16..19).contains(&v.label)));
        assert!(data.gallery.iter().all(|v| v.camera == 0));
        assert!(data.probe.iter().all(|v| v.camera == 1));
        for v in data.train.iter().chain(&data.gallery) {
            assert!((spec.frames_min..=spec.frames_max).contains(&v.frames.len()));
        }
    }

    fn mean_pool(v: &LabeledVideo) -> Vec<f64> {
        let d = v.frames[0].dim();
        let mut m = vec![0.0; d];
        let count = (v.frames.len() * v.frames[0].num_cells()) as f64;
        for f in &v.frames {
            for l in 0..f.num_cells() {
                math::axpy(1.0 / count, f.cell(l), &mut m);
            }
        }
        m
    }

    #[test]
    fn orthogonal_signatures_separate_under_nearest_neighbour() {
        let spec = SynthSpec {
            identities: 2,
            feature_dim: 8,
            parts: 1,
            background: 0.0,
            noise: 0.0,
            jitter: 0.0,
            ..SynthSpec::default()
        };
        let mut data = make_synthetic(&spec, 5).unwrap();
        // Replace the drawn signatures with orthogonal ones and regenerate frames.
        let axes = [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        data.identities[0].signatures[0] = axes.to_vec();
        data.identities[1].signatures[0] = axes.iter().rev().copied().collect();
        let gen = Generator {
            spec: &spec,
            prototypes: data.prototypes.clone(),
            pool: vec![vec![0.0; 8]],
        };
        let mut rng = Rng::new(1);
        let videos: Vec<LabeledVideo> = (0..10)
            .map(|i| gen.video(&data.identities[i % 2], i % 2, 0, &mut rng).unwrap())
            .collect();
        let pooled: Vec<Vec<f64>> = videos.iter().map(mean_pool).collect();
        for i in 0..videos.len() {
            let nearest = (0..videos.len())
                .filter(|&j| j != i)
                .min_by(|&a, &b| {
                    let da: f64 = pooled[i].iter().zip(&pooled[a]).map(|(x, y)| (x - y).powi(2)).sum();
                    let db: f64 = pooled[i].iter().zip(&pooled[b]).map(|(x, y)| (x - y).powi(2)).sum();
                    da.total_cmp(&db)
                })
                .unwrap();
            assert_eq!(videos[nearest].label, videos[i].label);
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let spec = SynthSpec {
            identities: 3,
            p_occ: 0.3,
            ..SynthSpec::default()
        };
        let bytes = |seed| {
            let data = make_synthetic(&spec, seed).unwrap();
            data.train
                .iter()
                .chain(&data.gallery)
                .chain(&data.probe)
                .flat_map(|v| gridfile::encode(&v.frames).unwrap())
                .collect::<Vec<u8>>()
        };
        assert_eq!(bytes(11), bytes(11));
        assert_ne!(bytes(11), bytes(12));
    }

    #[test]
    fn invalid_specs_name_the_key() {
        let cases = [
            (SynthSpec { identities: 1, ..SynthSpec::default() }, "identities"),
            (SynthSpec { parts: 0, ..SynthSpec::default() }, "parts"),
            (SynthSpec { parts: 9, ..SynthSpec::default() }, "parts"),
            (SynthSpec { p_occ: 1.5, ..SynthSpec::default() }, "p_occ"),
            (SynthSpec { noise: -1.0, ..SynthSpec::default() }, "noise"),
            (SynthSpec { frames_max: 2, ..SynthSpec::default() }, "frames_max"),
        ];
        for (spec, key) in cases {
            match make_synthetic(&spec, 0) {
                Err(Error::Config { key: k, .. }) => assert_eq!(k, key),
                other => panic!("{key}: {other:?}"),
            }
        }
    }

    #[test]
    fn full_occlusion_removes_identity_content() {
        let spec = SynthSpec {
            identities: 2,
            p_occ: 1.0,
            noise: 0.0,
            jitter: 0.0,
            distractors: 1,
            background: 0.0,
            ..SynthSpec::default()
        };
        let data = make_synthetic(&spec, 2).unwrap();
        let a = &data.train[0].frames[0];
        let b = &data.train[spec.train_videos].frames[0];
        let w = spec.grid_width;
        let (ra, ca) = data.identities[0].anchors[0];
        let (rb, cb) = data.identities[1].anchors[0];
        assert_eq!(a.cell(ra * w + ca), b.cell(rb * w + cb));
    }
}
