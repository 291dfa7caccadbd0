//! Restricted random sampling: reduce a T-frame video to N frames, one per chunk.
//!
//! Chunk `n` covers frames `[⌊nT/N⌋, ⌊(n+1)T/N⌋)`. Videos shorter than N frames
//! are first extended by cyclic repetition of their frame indices so every
//! chunk holds exactly one frame.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::spatial::FrameFeatureGrid;

/// Chunk count used throughout training and testing.
pub const DEFAULT_CHUNKS: usize = 6;

/// N frames drawn from a longer video, together with their feature grids.
#[derive(Clone, Debug)]
pub struct VideoSample {
    pub total_frames: usize,
    pub chunk_count: usize,
    pub chosen_indices: Vec<usize>,
    pub grids: Vec<FrameFeatureGrid>,
}

impl VideoSample {
    /// Picks `indices` out of a decoded video.
    pub fn gather(frames: &[FrameFeatureGrid], indices: Vec<usize>) -> Result<Self> {
        let grids = indices
            .iter()
            .map(|&i| {
                frames.get(i).cloned().ok_or_else(|| {
                    Error::InvalidInput(format!("frame {i} beyond video of {}", frames.len()))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(VideoSample {
            total_frames: frames.len(),
            chunk_count: indices.len(),
            chosen_indices: indices,
            grids,
        })
    }
}

fn validate(total: usize, chunks: usize) -> Result<()> {
    if total == 0 {
        return Err(Error::InvalidInput("video has no frames".into()));
    }
    if chunks == 0 {
        return Err(Error::InvalidInput("chunk count must be positive".into()));
    }
    Ok(())
}

/// Half-open chunk boundaries `[start, end)` for `chunks` chunks over `total` frames.
/// Requires `total >= chunks`.
pub fn chunk_bounds(total: usize, chunks: usize) -> Vec<(usize, usize)> {
    (0..chunks)
        .map(|n| (n * total / chunks, (n + 1) * total / chunks))
        .collect()
}

/// One uniformly drawn frame index per chunk.
pub fn restricted_random_sample(total: usize, chunks: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    validate(total, chunks)?;
    if total < chunks {
        return Ok(cyclic(total, chunks));
    }
    Ok(chunk_bounds(total, chunks)
        .into_iter()
        .map(|(start, end)| start + rng.below(end - start))
        .collect())
}

/// Deterministic test-time variant: the first frame of every chunk.
pub fn first_frame_sample(total: usize, chunks: usize) -> Result<Vec<usize>> {
    validate(total, chunks)?;
    if total < chunks {
        return Ok(cyclic(total, chunks));
    }
    Ok(chunk_bounds(total, chunks)
        .into_iter()
        .map(|(start, _)| start)
        .collect())
}

fn cyclic(total: usize, chunks: usize) -> Vec<usize> {
    (0..chunks).map(|i| i % total).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    #[test]
    fn forced_and_bounded_cases() {
        let mut rng = Rng::new(1);
        assert_eq!(
            restricted_random_sample(6, 6, &mut rng).unwrap(),
            vec![0, 1, 2, 3, 4, 5]
        );
        for _ in 0..100 {
            let idx = restricted_random_sample(12, 6, &mut rng).unwrap();
            for (i, &x) in idx.iter().enumerate() {
                assert!(2 * i <= x && x < 2 * i + 2);
            }
        }
        assert_eq!(
            restricted_random_sample(4, 6, &mut rng).unwrap(),
            vec![0, 1, 2, 3, 0, 1]
        );
    }

    #[test]
    fn first_frame_examples() {
        assert_eq!(first_frame_sample(12, 6).unwrap(), vec![0, 2, 4, 6, 8, 10]);
        assert_eq!(first_frame_sample(6, 6).unwrap(), vec![0, 1, 2, 3, 4, 5]);
        // T=7: boundaries floor(7n/6) = 0,1,2,3,4,5,7 by direct enumeration.
        let bounds: Vec<usize> = (0..=6).map(|n| (7 * n) / 6).collect();
        assert_eq!(bounds, vec![0, 1, 2, 3, 4, 5, 7]);
        assert_eq!(first_frame_sample(7, 6).unwrap(), vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(first_frame_sample(2, 3).unwrap(), vec![0, 1, 0]);
    }

    #[test]
    fn rejects_empty() {
        let mut rng = Rng::new(0);
        assert!(restricted_random_sample(0, 6, &mut rng).is_err());
        assert!(restricted_random_sample(6, 0, &mut rng).is_err());
        assert!(first_frame_sample(0, 1).is_err());
    }

    #[test]
    fn chunk_members_are_equally_likely() {
        let mut rng = Rng::new(2024);
        let trials = 10_000;
        let mut firsts = [0usize; 6];
        for _ in 0..trials {
            let idx = restricted_random_sample(12, 6, &mut rng).unwrap();
            for (n, &i) in idx.iter().enumerate() {
                if i == 2 * n {
                    firsts[n] += 1;
                }
            }
        }
        for count in firsts {
            let freq = count as f64 / trials as f64;
            assert!((freq - 0.5).abs() <= 0.05, "frequency {freq}");
        }
    }

    proptest! {
        #[test]
        fn indices_strictly_increase_in_their_chunks(
            chunks in 1usize..12, extra in 0usize..60, seed in any::<u64>()
        ) {
            let total = chunks + extra;
            let mut rng = Rng::new(seed);
            let idx = restricted_random_sample(total, chunks, &mut rng).unwrap();
            prop_assert_eq!(idx.len(), chunks);
            prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
            for (i, (lo, hi)) in chunk_bounds(total, chunks).into_iter().enumerate() {
                prop_assert!(lo <= idx[i] && idx[i] < hi);
                prop_assert!(hi - lo == total / chunks || hi - lo == total / chunks + 1);
            }
            let mut again = Rng::new(seed);
            prop_assert_eq!(idx, restricted_random_sample(total, chunks, &mut again).unwrap());
        }
    }
}
