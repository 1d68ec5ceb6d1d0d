use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::ItemId;
use crate::error::{Error, Result};

/// Draw `n` distinct items uniformly from `1..=catalog_size` minus `observed`.
///
/// `observed` must be sorted ascending.
pub fn sample_negatives<R: Rng + ?Sized>(
    rng: &mut R,
    catalog_size: usize,
    observed: &[ItemId],
    n: usize,
) -> Result<Vec<ItemId>> {
    debug_assert!(observed.windows(2).all(|w| w[0] <= w[1]));
    let is_observed = |i: ItemId| observed.binary_search(&i).is_ok();
    let n_observed = observed
        .iter()
        .filter(|&&i| i >= 1 && (i as usize) <= catalog_size)
        .fold((0usize, 0u32), |(count, prev), &i| {
            if i == prev {
                (count, prev)
            } else {
                (count + 1, i)
            }
        })
        .0;
    let available = catalog_size - n_observed;
    if available < n {
        return Err(Error::Sampling(format!(
            "need {n} negatives but only {available} unobserved items remain"
        )));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    // Rejection sampling while the pool is large, enumeration otherwise.
    if available >= 4 * n {
        let mut picked = HashSet::with_capacity(n);
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let c = rng.gen_range(1..=catalog_size) as ItemId;
            if !is_observed(c) && picked.insert(c) {
                out.push(c);
            }
        }
        Ok(out)
    } else {
        let pool: Vec<ItemId> = (1..=catalog_size as ItemId)
            .filter(|&i| !is_observed(i))
            .collect();
        Ok(pool.choose_multiple(rng, n).copied().collect())
    }
}
