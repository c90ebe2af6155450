use fewmark_autodiff::Rng;

use crate::data::registry::{Region, Registry};
use crate::error::{Error, Result};

/// A seen/unseen partition of the 13 categories: 6 categories to train on,
/// 7 held out for evaluation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BenchmarkSplit {
    pub scheme: u8,
    pub seen: Vec<usize>,
    pub unseen: Vec<usize>,
}

/// Builds one of the four benchmark schemes:
///
/// 1. seen spans upper- and lower-body garments (first four upper, first two
///    lower by id); every full-body garment is unseen,
/// 2. seen is exactly the upper-body garments; unseen is all lower- and
///    full-body garments,
/// 3. seen is the six categories with the fewest landmarks, so every unseen
///    category has more landmarks than any seen one,
/// 4. seen is a seeded uniform draw of six categories.
///
/// Only scheme 4 reads `seed`. Both id lists come back sorted ascending.
pub fn build_benchmark(registry: &Registry, scheme: u8, seed: u64) -> Result<BenchmarkSplit> {
    let all: Vec<usize> = registry.categories().iter().map(|c| c.id).collect();
    let mut seen: Vec<usize> = match scheme {
        1 => {
            let upper = registry.ids_in_region(Region::Upper);
            let lower = registry.ids_in_region(Region::Lower);
            upper
                .into_iter()
                .take(4)
                .chain(lower.into_iter().take(2))
                .collect()
        }
        2 => registry.ids_in_region(Region::Upper),
        3 => {
            let mut by_count = all.clone();
            by_count.sort_by_key(|&id| {
                (registry.get(id).expect("id from registry").landmark_count(), id)
            });
            by_count.into_iter().take(6).collect()
        }
        4 => {
            let mut shuffled = all.clone();
            Rng::derive(seed, &[4]).shuffle(&mut shuffled);
            shuffled.into_iter().take(6).collect()
        }
        other => {
            return Err(Error::usage(format!(
                "benchmark scheme must be 1..=4, got {other}"
            )))
        }
    };
    seen.sort_unstable();
    let mut unseen: Vec<usize> = all.into_iter().filter(|id| !seen.contains(id)).collect();
    unseen.sort_unstable();
    debug_assert_eq!(seen.len(), 6);
    debug_assert_eq!(unseen.len(), 7);
    Ok(BenchmarkSplit {
        scheme,
        seen,
        unseen,
    })
}
