use fewmark_autodiff::seed_chain;

use crate::data::registry::Registry;
use crate::data::render::{render_sample, RenderConfig};
use crate::data::sample::Sample;
use crate::error::{Error, Result};

/// Default number of query images per episode.
pub const DEFAULT_QUERY_SIZE: usize = 24;

/// A few-shot task: `support` images to adapt on and `query` images to score.
#[derive(Clone, Debug)]
pub struct Episode {
    pub category_id: usize,
    pub support: Vec<Sample>,
    pub query: Vec<Sample>,
}

impl Episode {
    pub fn shot(&self) -> usize {
        self.support.len()
    }
}

/// Draws an episode of `k` support and `m` query samples of one category.
/// Support and query render seeds are derived from disjoint branches of
/// `seed`, so the two sets never share a sample and the episode depends only
/// on `(category, k, m, cfg, seed)`.
pub fn sample_episode(
    registry: &Registry,
    category_id: usize,
    k: usize,
    m: usize,
    cfg: &RenderConfig,
    seed: u64,
) -> Result<Episode> {
    if k == 0 || m == 0 {
        return Err(Error::data(format!(
            "episode needs at least one support and one query sample (got k={k}, m={m})"
        )));
    }
    let category = registry.get(category_id)?;
    let draw = |role: u64, idx: usize| -> Result<Sample> {
        render_sample(category, cfg, seed_chain(&[seed, role, idx as u64]))
    };
    let support: Vec<Sample> = (0..k).map(|i| draw(1, i)).collect::<Result<_>>()?;
    let query: Vec<Sample> = (0..m).map(|j| draw(2, j)).collect::<Result<_>>()?;
    Ok(Episode {
        category_id,
        support,
        query,
    })
}
