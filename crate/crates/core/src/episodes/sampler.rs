use afa_tensor::{Rng, Tensor};

use super::dataset::Dataset;
use crate::error::{CoreError, Result};

/// One n-way k-shot task drawn from a single domain.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    /// `n·k × C×H×W`, class-major.
    pub support: Tensor,
    pub support_labels: Vec<usize>,
    /// `n·q × C×H×W`, class-major.
    pub query: Tensor,
    pub query_labels: Vec<usize>,
    pub ways: usize,
    pub shots: usize,
    pub queries: usize,
    pub domain: usize,
    /// Dataset class id behind each episode label.
    pub classes: Vec<usize>,
    /// `(class id, sample index)` of each support row.
    pub support_ids: Vec<(usize, usize)>,
    pub query_ids: Vec<(usize, usize)>,
}

impl Episode {
    /// Support followed by query rows, `(n·k + n·q) × C×H×W`.
    pub fn all_images(&self) -> Tensor {
        let mut shape = self.support.shape().to_vec();
        shape[0] += self.query.shape()[0];
        let mut data = self.support.data().to_vec();
        data.extend_from_slice(self.query.data());
        Tensor::new(&shape, data).expect("matching trailing extents")
    }
}

fn gather(ds: &Dataset, domain: usize, ids: &[(usize, usize)]) -> Result<Tensor> {
    let [c, h, w] = ds.manifest.image_shape;
    let mut data = Vec::with_capacity(ids.len() * c * h * w);
    for &(class, i) in ids {
        data.extend_from_slice(ds.sample(domain, class, i));
    }
    Ok(Tensor::new(&[ids.len(), c, h, w], data)?)
}

/// Draws `ways` distinct classes from `pool`, then `shots + queries`
/// distinct samples per class within `domain`; labels are the position of
/// the class in the draw.
pub fn sample_episode(
    ds: &Dataset,
    pool: &[usize],
    domain: usize,
    ways: usize,
    shots: usize,
    queries: usize,
    rng: &mut Rng,
) -> Result<Episode> {
    if ways == 0 || shots == 0 || queries == 0 {
        return Err(CoreError::Episode("ways, shots and queries must be positive".into()));
    }
    if domain >= ds.manifest.domains.len() {
        return Err(CoreError::Episode(format!("domain {domain} does not exist")));
    }
    if pool.len() < ways {
        return Err(CoreError::Episode(format!(
            "pool has {} classes, episode needs {ways}",
            pool.len()
        )));
    }
    let need = shots + queries;
    let eligible: Vec<usize> = pool
        .iter()
        .copied()
        .filter(|&c| ds.count(domain, c) >= need)
        .collect();
    if eligible.len() < ways {
        return Err(CoreError::Episode(format!(
            "only {} classes in domain {:?} have {need} samples (need {ways})",
            eligible.len(),
            ds.manifest.domains[domain].name
        )));
    }
    let classes: Vec<usize> = rng
        .sample_indices(eligible.len(), ways)
        .into_iter()
        .map(|i| eligible[i])
        .collect();
    let mut support_ids = Vec::with_capacity(ways * shots);
    let mut query_ids = Vec::with_capacity(ways * queries);
    for &c in &classes {
        let picks = rng.sample_indices(ds.count(domain, c), need);
        support_ids.extend(picks[..shots].iter().map(|&i| (c, i)));
        query_ids.extend(picks[shots..].iter().map(|&i| (c, i)));
    }
    Ok(Episode {
        support: gather(ds, domain, &support_ids)?,
        support_labels: (0..ways).flat_map(|l| std::iter::repeat_n(l, shots)).collect(),
        query: gather(ds, domain, &query_ids)?,
        query_labels: (0..ways).flat_map(|l| std::iter::repeat_n(l, queries)).collect(),
        ways,
        shots,
        queries,
        domain,
        classes,
        support_ids,
        query_ids,
    })
}

/// A labelled batch of `size` samples drawn uniformly from `pool` in
/// `domain`, with labels given as positions in `pool`.
pub fn sample_batch(
    ds: &Dataset,
    pool: &[usize],
    domain: usize,
    size: usize,
    rng: &mut Rng,
) -> Result<(Tensor, Vec<usize>)> {
    let cells: Vec<(usize, usize)> = pool
        .iter()
        .enumerate()
        .map(|(label, &c)| (label, ds.count(domain, c)))
        .collect();
    let total: usize = cells.iter().map(|c| c.1).sum();
    if total == 0 || size == 0 {
        return Err(CoreError::Episode("empty pool for batch sampling".into()));
    }
    let picks = rng.sample_indices(total, size.min(total));
    let mut ids = Vec::with_capacity(picks.len());
    let mut labels = Vec::with_capacity(picks.len());
    for mut p in picks {
        for &(label, count) in &cells {
            if p < count {
                ids.push((pool[label], p));
                labels.push(label);
                break;
            }
            p -= count;
        }
    }
    Ok((gather(ds, domain, &ids)?, labels))
}
