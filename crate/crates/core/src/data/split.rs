//! Content-aware train/test splitting: every group lands wholly on one side.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::manifest::DatasetManifest;
use crate::error::{Error, Result};

pub const TRAIN_FRACTION: f64 = 0.8;

/// Splits item indices by group.
///
/// Groups (in first-appearance order) are shuffled by `seed` and moved to the
/// training side one at a time until it holds at least `fraction` of the
/// items. The last remaining group always stays on the held-out side.
pub fn split_by_groups<S: AsRef<str>>(groups: &[S], fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut order: Vec<&str> = Vec::new();
    let mut members: Vec<Vec<usize>> = Vec::new();
    for (i, g) in groups.iter().enumerate() {
        let g = g.as_ref();
        match order.iter().position(|&o| o == g) {
            Some(k) => members[k].push(i),
            None => {
                order.push(g);
                members.push(vec![i]);
            }
        }
    }
    if order.len() < 2 {
        return Err(Error::invalid(format!(
            "content-aware split needs at least two groups, found {}",
            order.len()
        )));
    }
    let mut perm: Vec<usize> = (0..order.len()).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let goal = fraction * groups.len() as f64;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (rank, &g) in perm.iter().enumerate() {
        let last = rank + 1 == perm.len();
        if (train.len() as f64) < goal && !last {
            train.extend_from_slice(&members[g]);
        } else {
            test.extend_from_slice(&members[g]);
        }
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// 80/20 split of a database with no content group straddling the boundary.
pub fn split_80_20(manifest: &DatasetManifest, seed: u64) -> Result<(DatasetManifest, DatasetManifest)> {
    let groups: Vec<&str> = manifest.entries.iter().map(|e| e.group_id.as_str()).collect();
    let (train, test) = split_by_groups(&groups, TRAIN_FRACTION, seed)?;
    Ok((manifest.subset(&train), manifest.subset(&test)))
}
