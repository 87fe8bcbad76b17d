use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `counts[k][c]` is the number of items in cluster `k` whose true class is `c`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContingencyTable {
    pub counts: Vec<Vec<u64>>,
    pub k_true: usize,
}

impl ContingencyTable {
    pub fn new(k_pred: usize, k_true: usize) -> Self {
        Self {
            counts: vec![vec![0; k_true]; k_pred],
            k_true,
        }
    }

    pub fn from_pairs(k_pred: usize, k_true: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut t = Self::new(k_pred, k_true);
        for (k, c) in pairs {
            if k >= k_pred {
                return Err(Error::IndexOutOfRange { index: k, len: k_pred });
            }
            if c >= k_true {
                return Err(Error::IndexOutOfRange { index: c, len: k_true });
            }
            t.counts[k][c] += 1;
        }
        Ok(t)
    }

    pub fn k_pred(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Total count on the cells selected by `m`.
    pub fn matched(&self, m: &Matching) -> u64 {
        m.map
            .iter()
            .enumerate()
            .filter_map(|(k, c)| c.map(|c| self.counts[k][c]))
            .sum()
    }

    /// Fraction of items whose cluster maps to their true class.
    pub fn accuracy(&self, m: &Matching) -> f64 {
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            self.matched(m) as f64 / total as f64
        }
    }
}

/// Cluster-to-class map; `map[k] = None` leaves cluster `k` unmapped.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Matching {
    pub map: Vec<Option<usize>>,
}

impl Matching {
    pub fn identity(k: usize) -> Self {
        Self {
            map: (0..k).map(Some).collect(),
        }
    }

    pub fn get(&self, cluster: usize) -> Option<usize> {
        self.map.get(cluster).copied().flatten()
    }

    pub fn is_injective(&self) -> bool {
        let mut seen = std::collections::BTreeSet::new();
        self.map.iter().flatten().all(|c| seen.insert(*c))
    }
}

/// Minimum-cost assignment of every row of a square cost matrix
/// (shortest augmenting paths with potentials, O(n³)).
fn assign_min_cost(cost: &[Vec<i64>]) -> Vec<usize> {
    let n = cost.len();
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![i64::MAX; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = i64::MAX;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0; n];
    for j in 1..=n {
        if p[j] != 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    row_to_col
}

/// Injective matching maximising the matched count. With more clusters
/// than classes the surplus clusters stay unmapped.
pub fn hungarian_match(table: &ContingencyTable) -> Matching {
    let (kp, kt) = (table.k_pred(), table.k_true);
    let n = kp.max(kt);
    let max = table.counts.iter().flatten().copied().max().unwrap_or(0) as i64;
    let cost: Vec<Vec<i64>> = (0..n)
        .map(|k| {
            (0..n)
                .map(|c| if k < kp && c < kt { max - table.counts[k][c] as i64 } else { max })
                .collect()
        })
        .collect();
    let rows = assign_min_cost(&cost);
    Matching {
        map: (0..kp).map(|k| Some(rows[k]).filter(|&c| c < kt)).collect(),
    }
}

/// Index of the largest count, ties to the smaller index; `None` if all zero.
fn vote(counts: &[u64]) -> Option<usize> {
    let mut best: Option<(usize, u64)> = None;
    for (c, &n) in counts.iter().enumerate() {
        if n > 0 && best.is_none_or(|(_, b)| n > b) {
            best = Some((c, n));
        }
    }
    best.map(|(c, _)| c)
}

/// Each cluster takes its most frequent class; may be non-injective.
pub fn argmax_match(table: &ContingencyTable) -> Matching {
    Matching {
        map: table
            .counts
            .iter()
            .map(|row| vote(row).or(if table.k_true > 0 { Some(0) } else { None }))
            .collect(),
    }
}

/// Item assigned to `cluster` with association `strength` and true class `label`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterItem {
    pub cluster: usize,
    pub strength: f64,
    pub label: usize,
}

/// Majority vote over the `m` strongest items of each cluster (ties in
/// strength keep input order, ties in votes go to the smaller class).
pub fn kshot_match(items: &[ClusterItem], k_pred: usize, k_true: usize, m: usize) -> Result<Matching> {
    if m == 0 {
        return Err(Error::ConfigInvalid("k-shot m must be at least 1".into()));
    }
    let mut by_cluster: Vec<Vec<&ClusterItem>> = vec![Vec::new(); k_pred];
    for it in items {
        if it.cluster >= k_pred {
            return Err(Error::IndexOutOfRange { index: it.cluster, len: k_pred });
        }
        if it.label >= k_true {
            return Err(Error::IndexOutOfRange { index: it.label, len: k_true });
        }
        by_cluster[it.cluster].push(it);
    }
    Ok(Matching {
        map: by_cluster
            .into_iter()
            .map(|mut members| {
                members.sort_by(|a, b| b.strength.total_cmp(&a.strength));
                let mut counts = vec![0u64; k_true];
                for it in members.iter().take(m) {
                    counts[it.label] += 1;
                }
                vote(&counts)
            })
            .collect(),
    })
}

pub fn purity(table: &ContingencyTable) -> Result<f64> {
    let total = table.total();
    if total == 0 {
        return Err(Error::EmptyTable);
    }
    let hits: u64 = table.counts.iter().map(|r| r.iter().copied().max().unwrap_or(0)).sum();
    Ok(hits as f64 / total as f64)
}
