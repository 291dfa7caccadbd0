//! Retrieval metrics: ranked gallery lists, CMC curves and mean average precision.
//!
//! Similarity is the dot product of unit embeddings. When both probes and
//! gallery carry camera ids, gallery entries showing the probe's identity on
//! the probe's own camera are dropped from that probe's ranking.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::math;

const UNIT_TOL: f64 = 1e-6;

/// A set of labelled unit embeddings (used for both gallery and probes).
#[derive(Clone, Debug, PartialEq)]
pub struct Gallery {
    pub embeddings: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub camera_ids: Option<Vec<usize>>,
}

impl Gallery {
    pub fn new(embeddings: Vec<Vec<f64>>, labels: Vec<usize>, camera_ids: Option<Vec<usize>>) -> Result<Self> {
        if embeddings.len() != labels.len() || camera_ids.as_ref().is_some_and(|c| c.len() != labels.len()) {
            return Err(Error::shape("gallery arrays differ in length"));
        }
        if let Some(e) = embeddings.first() {
            if embeddings.iter().any(|v| v.len() != e.len()) {
                return Err(Error::shape("gallery embeddings differ in dimension"));
            }
        }
        if let Some(i) = embeddings.iter().position(|v| (math::norm(v) - 1.0).abs() > UNIT_TOL) {
            return Err(Error::InvalidInput(format!("embedding {i} is not unit-norm")));
        }
        Ok(Gallery {
            embeddings,
            labels,
            camera_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Gallery indices by descending similarity, ties by ascending index.
pub fn rank_list(probe: &[f64], gallery: &Gallery) -> Result<Vec<usize>> {
    if gallery.is_empty() {
        return Err(Error::InvalidInput("empty gallery".into()));
    }
    if probe.len() != gallery.embeddings[0].len() {
        return Err(Error::shape("probe and gallery dimensions differ"));
    }
    let sims: Vec<f64> = gallery.embeddings.iter().map(|g| math::dot(probe, g)).collect();
    let mut order: Vec<usize> = (0..gallery.len()).collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    Ok(order)
}

/// Relevance flags of probe `i`'s ranking after cross-camera filtering.
fn relevance(probes: &Gallery, i: usize, gallery: &Gallery) -> Result<Vec<bool>> {
    let label = probes.labels[i];
    let camera = match (&probes.camera_ids, &gallery.camera_ids) {
        (Some(p), Some(_)) => Some(p[i]),
        _ => None,
    };
    let order = rank_list(&probes.embeddings[i], gallery)?;
    let flags: Vec<bool> = order
        .into_iter()
        .filter(|&g| match camera {
            Some(c) => !(gallery.labels[g] == label && gallery.camera_ids.as_ref().unwrap()[g] == c),
            None => true,
        })
        .map(|g| gallery.labels[g] == label)
        .collect();
    if !flags.contains(&true) {
        return Err(Error::Protocol(format!(
            "probe {i} (identity {label}) has no valid match in the gallery"
        )));
    }
    Ok(flags)
}

fn all_relevance(probes: &Gallery, gallery: &Gallery) -> Result<Vec<Vec<bool>>> {
    if probes.is_empty() {
        return Err(Error::InvalidInput("no probes".into()));
    }
    (0..probes.len()).into_par_iter().map(|i| relevance(probes, i, gallery)).collect()
}

/// `curve[k-1]` is the fraction of probes whose first match is within the top k.
pub fn cmc(probes: &Gallery, gallery: &Gallery, k_max: usize) -> Result<Vec<f64>> {
    let rel = all_relevance(probes, gallery)?;
    let mut curve = vec![0.0; k_max];
    for flags in &rel {
        let first = flags.iter().position(|&r| r).unwrap();
        for v in curve.iter_mut().skip(first) {
            *v += 1.0;
        }
    }
    let m = rel.len() as f64;
    Ok(curve.into_iter().map(|c| c / m).collect())
}

fn average_precision(flags: &[bool]) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (r, &rel) in flags.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    sum / hits as f64
}

pub fn mean_ap(probes: &Gallery, gallery: &Gallery) -> Result<f64> {
    let rel = all_relevance(probes, gallery)?;
    Ok(rel.iter().map(|f| average_precision(f)).sum::<f64>() / rel.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalMetrics {
    /// Full curve, one entry per gallery rank.
    pub cmc: Vec<f64>,
    pub rank1: f64,
    pub map: f64,
}

pub fn evaluate(probes: &Gallery, gallery: &Gallery) -> Result<RetrievalMetrics> {
    let cmc = cmc(probes, gallery, gallery.len())?;
    let map = mean_ap(probes, gallery)?;
    Ok(RetrievalMetrics {
        rank1: cmc[0],
        cmc,
        map,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn unit(v: &[f64]) -> Vec<f64> {
        math::l2_normalize(v).unwrap()
    }

    fn gallery(rows: &[&[f64]], labels: &[usize]) -> Gallery {
        Gallery::new(rows.iter().map(|r| unit(r)).collect(), labels.to_vec(), None).unwrap()
    }

    #[test]
    fn probe_in_gallery_ranks_first() {
        let g = gallery(&[&[1.0, 0.0, 0.0], &[0.6, 0.8, 0.0], &[0.0, 0.0, 1.0]], &[0, 1, 2]);
        assert_eq!(rank_list(&unit(&[0.6, 0.8, 0.0]), &g).unwrap()[0], 1);
    }

    #[test]
    fn ties_fall_back_to_index() {
        let g = gallery(
            &[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0], &[0.0, 0.0, 1.0]],
            &[0, 1, 2, 3],
        );
        assert_eq!(rank_list(&[0.0, 0.0, 1.0], &g).unwrap(), vec![2, 3, 0, 1]);
        assert_eq!(rank_list(&[0.0, 1.0, 0.0], &g).unwrap(), vec![1, 0, 2, 3]);
    }

    #[test]
    fn empty_gallery_and_missing_identity() {
        let empty = Gallery::new(vec![], vec![], None).unwrap();
        assert!(matches!(rank_list(&[1.0], &empty), Err(Error::InvalidInput(_))));
        let g = gallery(&[&[1.0, 0.0]], &[0]);
        let p = gallery(&[&[1.0, 0.0]], &[5]);
        assert!(matches!(cmc(&p, &g, 1), Err(Error::Protocol(_))));
        assert!(matches!(mean_ap(&p, &g), Err(Error::Protocol(_))));
    }

    #[test]
    fn match_at_rank_two_of_five() {
        let g = gallery(
            &[&[1.0, 0.0], &[0.9, 0.1], &[0.5, 0.5], &[0.1, 0.9], &[0.0, 1.0]],
            &[7, 3, 8, 9, 10],
        );
        let p = gallery(&[&[1.0, 0.0]], &[3]);
        assert_eq!(cmc(&p, &g, 5).unwrap(), vec![0.0, 1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn single_relevant_at_rank_two_of_four_has_ap_half() {
        let g = gallery(&[&[1.0, 0.0], &[0.8, 0.2], &[0.3, 0.7], &[0.0, 1.0]], &[1, 0, 2, 3]);
        let p = gallery(&[&[1.0, 0.0]], &[0]);
        assert_eq!(mean_ap(&p, &g).unwrap(), 0.5);
    }

    #[test]
    fn perfect_retrieval() {
        let g = gallery(&[&[1.0, 0.0], &[0.9, 0.1], &[0.0, 1.0]], &[0, 0, 1]);
        let p = gallery(&[&[1.0, 0.05], &[0.0, 1.0]], &[0, 1]);
        assert_eq!(cmc(&p, &g, 3).unwrap(), vec![1.0, 1.0, 1.0]);
        assert_eq!(mean_ap(&p, &g).unwrap(), 1.0);
    }

    #[test]
    fn same_camera_matches_are_ignored() {
        let rows: Vec<Vec<f64>> = [[1.0, 0.0], [0.8, 0.6], [0.6, 0.8]].iter().map(|r| unit(r)).collect();
        let g = Gallery::new(rows, vec![0, 1, 0], Some(vec![0, 0, 1])).unwrap();
        let p = Gallery::new(vec![vec![1.0, 0.0]], vec![0], Some(vec![0])).unwrap();
        // Entry 0 is the same identity on the same camera: dropped, match is at rank 2.
        assert_eq!(cmc(&p, &g, 2).unwrap(), vec![0.0, 1.0]);
        let g_only_same = Gallery::new(vec![vec![1.0, 0.0]], vec![0], Some(vec![0])).unwrap();
        assert!(matches!(cmc(&p, &g_only_same, 1), Err(Error::Protocol(_))));
    }

    fn random_set(rng: &mut Rng, m: usize, ids: usize) -> Gallery {
        let e: Vec<Vec<f64>> = (0..m)
            .map(|_| unit(&(0..4).map(|_| rng.normal()).collect::<Vec<_>>()))
            .collect();
        let labels = (0..m).map(|_| rng.below(ids)).collect();
        Gallery::new(e, labels, None).unwrap()
    }

    #[test]
    fn random_instances_match_brute_force() {
        let mut rng = Rng::new(77);
        for _ in 0..100 {
            let m = 5 + rng.below(46);
            let g = random_set(&mut rng, m, 6);
            let mut p = random_set(&mut rng, 20, 6);
            p.labels = (0..20).map(|_| g.labels[rng.below(m)]).collect();

            let curve = cmc(&p, &g, m).unwrap();
            let mut oracle_curve = vec![0.0; m];
            let mut oracle_ap = 0.0;
            for i in 0..20 {
                // Brute force: rank of entry j = entries strictly more similar plus equal ones with lower index.
                let s = |j: usize| math::dot(&p.embeddings[i], &g.embeddings[j]);
                let rank = |j: usize| (0..m).filter(|&o| s(o) > s(j) || (s(o) == s(j) && o < j)).count();
                let mut relevant: Vec<usize> = (0..m).filter(|&j| g.labels[j] == p.labels[i]).map(rank).collect();
                relevant.sort_unstable();
                for k in relevant[0]..m {
                    oracle_curve[k] += 1.0 / 20.0;
                }
                oracle_ap += relevant
                    .iter()
                    .enumerate()
                    .map(|(h, &r)| (h + 1) as f64 / (r + 1) as f64)
                    .sum::<f64>()
                    / relevant.len() as f64
                    / 20.0;
            }
            for k in 0..m {
                assert!((curve[k] - oracle_curve[k]).abs() < 1e-12);
            }
            assert!((mean_ap(&p, &g).unwrap() - oracle_ap).abs() < 1e-12);
            assert!((curve[m - 1] - 1.0).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn cmc_is_monotone_and_map_permutation_invariant(seed in any::<u64>(), m in 2usize..30) {
            let mut rng = Rng::new(seed);
            let g = random_set(&mut rng, m, 4);
            let mut p = random_set(&mut rng, 6, 4);
            p.labels = (0..6).map(|_| g.labels[rng.below(m)]).collect();
            let curve = cmc(&p, &g, m).unwrap();
            prop_assert!(curve.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(curve.iter().all(|&c| (0.0..=1.0).contains(&c)));
            let mut perm: Vec<usize> = (0..m).collect();
            rng.shuffle(&mut perm);
            let shuffled = Gallery::new(
                perm.iter().map(|&i| g.embeddings[i].clone()).collect(),
                perm.iter().map(|&i| g.labels[i]).collect(),
                None,
            ).unwrap();
            let a = mean_ap(&p, &g).unwrap();
            let b = mean_ap(&p, &shuffled).unwrap();
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }
}
