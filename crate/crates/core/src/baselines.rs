//! Reference solvers: the exhaustive NOMA optimum, the random pairing
//! heuristic and the optimal OMA association.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::assignment::Assignment;
use crate::error::{Error, Result};
use crate::netsim::NetworkInstance;
use crate::rates::{oma_rate, pair_rate};

/// Candidates of the symmetry-reduced enumeration for `N = 12`.
pub const DEFAULT_EXHAUSTIVE_BUDGET: u128 = 7_484_400;

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub assignment: Assignment,
    /// Aggregate rate in bits/s/Hz.
    pub phi: f64,
}

/// `N! / 2^(KB)`: permutations with the order inside each pair divided out.
pub fn exhaustive_candidates(num_ues: usize, num_slots: usize) -> u128 {
    let mut count: u128 = 1;
    for i in 2..=num_ues as u128 {
        count = count.saturating_mul(i);
    }
    if count == u128::MAX {
        return count;
    }
    count >> num_slots.min(127)
}

/// Rate of the unordered pair `{a, b}` at each base station, canonical SIC
/// order applied.
struct PairTable {
    num_ues: usize,
    rates: Vec<f64>,
}

impl PairTable {
    fn build(instance: &NetworkInstance) -> Result<Self> {
        let csi = &instance.csi;
        let params = instance.radio();
        let n = csi.num_ues();
        let mut rates = vec![0.0; csi.num_bs() * n * n];
        for k in 0..csi.num_bs() {
            for a in 0..n {
                for b in (a + 1)..n {
                    let (sic, nonsic) = canonical_pair(a, b, k, instance);
                    let r = pair_rate(nonsic, sic, k, csi, &params)?.pair_rate_sum;
                    rates[(k * n + a) * n + b] = r;
                    rates[(k * n + b) * n + a] = r;
                }
            }
        }
        Ok(PairTable { num_ues: n, rates })
    }

    #[inline]
    fn get(&self, k: usize, a: usize, b: usize) -> f64 {
        self.rates[(k * self.num_ues + a) * self.num_ues + b]
    }
}

#[inline]
fn canonical_pair(a: usize, b: usize, k: usize, instance: &NetworkInstance) -> (usize, usize) {
    let (ga, gb) = (instance.csi.gain(k, a), instance.csi.gain(k, b));
    if ga > gb || (ga == gb && a < b) {
        (a, b)
    } else {
        (b, a)
    }
}

struct Search<'a> {
    instance: &'a NetworkInstance,
    table: PairTable,
    prbs_per_bs: usize,
    used: Vec<bool>,
    current: Vec<usize>,
    best_u: Vec<usize>,
    best_phi: f64,
}

impl Search<'_> {
    fn descend(&mut self, slot: usize, partial: f64) {
        let num_slots = self.current.len() / 2;
        if slot == num_slots {
            if partial > self.best_phi || (partial == self.best_phi && self.current < self.best_u) {
                self.best_phi = partial;
                self.best_u.clone_from(&self.current);
            }
            return;
        }
        let k = slot / self.prbs_per_bs;
        let n = self.used.len();
        // Slots are distinguishable, so every unordered pair of free UEs is tried.
        for a in 0..n {
            if self.used[a] {
                continue;
            }
            self.used[a] = true;
            for b in (a + 1)..n {
                if self.used[b] {
                    continue;
                }
                self.used[b] = true;
                let (sic, nonsic) = canonical_pair(a, b, k, self.instance);
                self.current[2 * slot] = sic;
                self.current[2 * slot + 1] = nonsic;
                self.descend(slot + 1, partial + self.table.get(k, a, b));
                self.used[b] = false;
            }
            self.used[a] = false;
        }
    }
}

/// Exact NOMA optimum by enumerating every placement of unordered pairs into
/// PRBs. Ties resolve to the lexicographically smallest canonical permutation.
pub fn exhaustive_noma(instance: &NetworkInstance, budget: u128) -> Result<Solution> {
    let num_bs = instance.config.num_bs();
    let prbs = instance.config.prbs_per_bs;
    let n = instance.num_ues();
    let count = exhaustive_candidates(n, num_bs * prbs);
    if count > budget {
        return Err(Error::Budget { count, budget });
    }
    let mut search = Search {
        instance,
        table: PairTable::build(instance)?,
        prbs_per_bs: prbs,
        used: vec![false; n],
        current: vec![0; n],
        best_u: Vec::new(),
        best_phi: f64::NEG_INFINITY,
    };
    search.descend(0, 0.0);
    let assignment = Assignment::from_permutation(search.best_u, num_bs, prbs)?;
    Ok(Solution {
        assignment,
        phi: search.best_phi,
    })
}

/// Uniformly random permutation, canonicalized and scored.
pub fn random_heuristic<R: Rng + ?Sized>(instance: &NetworkInstance, rng: &mut R) -> Result<Solution> {
    let mut u: Vec<usize> = (0..instance.num_ues()).collect();
    u.shuffle(rng);
    let assignment =
        Assignment::from_permutation(u, instance.config.num_bs(), instance.config.prbs_per_bs)?.canonicalize(&instance.csi);
    let phi = assignment.aggregate_rate(&instance.csi, &instance.radio())?;
    Ok(Solution { assignment, phi })
}

/// Optimal OMA association: every base station serves exactly `2B` UEs, each
/// at its OMA rate. Solved as a square assignment problem with `2B` copies of
/// every base station as columns.
pub fn optimal_oma(instance: &NetworkInstance) -> Result<Solution> {
    let params = instance.radio();
    let csi = &instance.csi;
    let n = csi.num_ues();
    let per_bs = 2 * instance.config.prbs_per_bs;
    let profit: Vec<Vec<f64>> = (0..n)
        .map(|ue| (0..n).map(|col| oma_rate(csi.gain(col / per_bs, ue), &params)).collect())
        .collect();
    let cost: Vec<Vec<f64>> = profit.iter().map(|row| row.iter().map(|p| -p).collect()).collect();
    let row_to_col = hungarian(&cost)?;
    let mut u = vec![0; n];
    for (ue, &col) in row_to_col.iter().enumerate() {
        u[col] = ue;
    }
    let phi = u
        .iter()
        .enumerate()
        .map(|(col, &ue)| profit[ue][col])
        .sum();
    let assignment = Assignment::from_permutation(u, instance.config.num_bs(), instance.config.prbs_per_bs)?;
    Ok(Solution { assignment, phi })
}

/// Minimum-cost perfect matching on a square matrix (Hungarian method with
/// potentials, O(n^3)). Returns the column assigned to each row.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = cost.len();
    if cost.iter().any(|r| r.len() != n) {
        return Err(Error::Dimension("assignment cost matrix must be square".into()));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("assignment cost matrix".into()));
    }
    // 1-based arrays; index 0 is the virtual root column.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
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
    Ok(row_to_col)
}
