use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One epoch slot of the mixed schedule. `loop_index` and `epoch` count
/// from one; `database` is the zero-based position in the input order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ScheduleEntry {
    pub loop_index: usize,
    pub database: usize,
    pub epoch: usize,
    pub budget: usize,
}

/// Epochs database `i` receives per loop: `max(round(n_max / n_i), e)`,
/// rounding half away from zero.
pub fn compute_epoch_budget(n_i: usize, n_max: usize, e: usize) -> Result<usize> {
    if n_i == 0 || n_max == 0 || e == 0 {
        return Err(Error::invalid(format!(
            "epoch budget needs positive sizes, got n_i={n_i}, n_max={n_max}, e={e}"
        )));
    }
    if n_i > n_max {
        return Err(Error::invalid(format!("database size {n_i} exceeds the largest size {n_max}")));
    }
    let ratio = (n_max as f64 / n_i as f64).round() as usize;
    Ok(ratio.max(e))
}

/// Full schedule: for each loop, each database in order, its budgeted epochs.
pub fn build_schedule(loops: usize, epochs: usize, sizes: &[usize]) -> Result<Vec<ScheduleEntry>> {
    let n_max = *sizes.iter().max().ok_or_else(|| Error::invalid("schedule needs at least one database"))?;
    let budgets = sizes.iter().map(|&n| compute_epoch_budget(n, n_max, epochs)).collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(loops * budgets.iter().sum::<usize>());
    for loop_index in 1..=loops {
        for (database, &budget) in budgets.iter().enumerate() {
            out.extend((1..=budget).map(|epoch| ScheduleEntry { loop_index, database, epoch, budget }));
        }
    }
    Ok(out)
}
