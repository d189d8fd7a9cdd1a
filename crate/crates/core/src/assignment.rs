//! Joint pairing/association decisions.
//!
//! The permutation `u` is the stored form. Positions `2s` and `2s+1` of `u`
//! hold the SIC and non-SIC occupants of slot `s = k*B + b`, i.e. PRB `b` of
//! base station `k`. The slot matrix and the binary indicator tensor are
//! derived views.

use std::fmt;

use crate::error::{Error, Result};
use crate::netsim::CsiMatrix;
use crate::rates::{pair_rate, PairRateResult, RadioParams};

pub const SIC: usize = 0;
pub const NON_SIC: usize = 1;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Assignment {
    u: Vec<usize>,
    num_bs: usize,
    prbs_per_bs: usize,
}

impl Assignment {
    /// Validates that `u` is a permutation of `0..2BK`.
    pub fn from_permutation(u: Vec<usize>, num_bs: usize, prbs_per_bs: usize) -> Result<Self> {
        let n = 2 * num_bs * prbs_per_bs;
        if u.len() != n {
            return Err(Error::Dimension(format!(
                "permutation has length {}, expected 2BK = {n}",
                u.len()
            )));
        }
        let mut seen = vec![false; n];
        for (pos, &ue) in u.iter().enumerate() {
            if ue >= n {
                return Err(Error::Constraint(format!("UE index {ue} at position {pos} is out of range 0..{n}")));
            }
            if std::mem::replace(&mut seen[ue], true) {
                return Err(Error::Constraint(format!("UE {ue} appears more than once (again at position {pos})")));
            }
        }
        Ok(Assignment { u, num_bs, prbs_per_bs })
    }

    /// Rebuilds the permutation from the binary indicator tensor
    /// `x[k][n][b][p]`, checking that every slot holds exactly one UE and every
    /// UE exactly one slot.
    pub fn from_binary(x: &[Vec<Vec<[bool; 2]>>]) -> Result<Self> {
        let num_bs = x.len();
        let num_ues = x.first().map_or(0, Vec::len);
        let prbs = x.first().and_then(|r| r.first()).map_or(0, Vec::len);
        let mut u = vec![usize::MAX; 2 * num_bs * prbs];
        if u.len() != num_ues {
            return Err(Error::Dimension(format!("{num_ues} UEs do not fill 2BK = {} slots", u.len())));
        }
        let mut placed = vec![0usize; num_ues];
        for (k, per_ue) in x.iter().enumerate() {
            for (n, per_prb) in per_ue.iter().enumerate() {
                for (b, roles) in per_prb.iter().enumerate() {
                    for (p, &on) in roles.iter().enumerate() {
                        if !on {
                            continue;
                        }
                        let pos = 2 * (k * prbs + b) + p;
                        if u[pos] != usize::MAX {
                            return Err(Error::Constraint(format!("slot (k={k}, b={b}, p={p}) is occupied twice")));
                        }
                        u[pos] = n;
                        placed[n] += 1;
                    }
                }
            }
        }
        if let Some(n) = placed.iter().position(|&c| c != 1) {
            return Err(Error::Constraint(format!("UE {n} occupies {} slots", placed[n])));
        }
        Assignment::from_permutation(u, num_bs, prbs)
    }

    pub fn permutation(&self) -> &[usize] {
        &self.u
    }

    pub fn into_permutation(self) -> Vec<usize> {
        self.u
    }

    pub fn num_bs(&self) -> usize {
        self.num_bs
    }

    pub fn prbs_per_bs(&self) -> usize {
        self.prbs_per_bs
    }

    pub fn num_slots(&self) -> usize {
        self.num_bs * self.prbs_per_bs
    }

    /// Base station and PRB of slot `s`.
    pub fn slot_location(&self, s: usize) -> (usize, usize) {
        (s / self.prbs_per_bs, s % self.prbs_per_bs)
    }

    /// `(SIC, non-SIC)` occupants of PRB `b` at base station `k`.
    pub fn slot(&self, k: usize, b: usize) -> [usize; 2] {
        let s = k * self.prbs_per_bs + b;
        [self.u[2 * s], self.u[2 * s + 1]]
    }

    /// Slot matrix view, indexed `[k][b][p]`.
    pub fn slot_matrix(&self) -> Vec<Vec<[usize; 2]>> {
        (0..self.num_bs)
            .map(|k| (0..self.prbs_per_bs).map(|b| self.slot(k, b)).collect())
            .collect()
    }

    /// Binary indicator view, indexed `[k][n][b][p]`.
    pub fn binary_matrix(&self) -> Vec<Vec<Vec<[bool; 2]>>> {
        let n = self.u.len();
        let mut x = vec![vec![vec![[false; 2]; self.prbs_per_bs]; n]; self.num_bs];
        for (pos, &ue) in self.u.iter().enumerate() {
            let (k, b) = self.slot_location(pos / 2);
            x[k][ue][b][pos % 2] = true;
        }
        x
    }

    /// Orders each pair so the SIC slot holds the UE with the larger gain at
    /// the serving base station. Equal gains put the smaller index first.
    pub fn canonicalize(&self, csi: &CsiMatrix) -> Assignment {
        let mut u = self.u.clone();
        for s in 0..self.num_slots() {
            let (k, _) = self.slot_location(s);
            if !in_canonical_order(u[2 * s], u[2 * s + 1], k, csi) {
                u.swap(2 * s, 2 * s + 1);
            }
        }
        Assignment {
            u,
            num_bs: self.num_bs,
            prbs_per_bs: self.prbs_per_bs,
        }
    }

    pub fn is_canonical(&self, csi: &CsiMatrix) -> bool {
        (0..self.num_slots()).all(|s| {
            let (k, _) = self.slot_location(s);
            in_canonical_order(self.u[2 * s], self.u[2 * s + 1], k, csi)
        })
    }

    /// SIC decodability: every SIC occupant's gain is at least its partner's.
    pub fn check_sic_constraint(&self, csi: &CsiMatrix) -> bool {
        (0..self.num_slots()).all(|s| {
            let (k, _) = self.slot_location(s);
            csi.gain(k, self.u[2 * s]) >= csi.gain(k, self.u[2 * s + 1])
        })
    }

    /// Per-PRB optimal rates. The assignment must be canonical.
    pub fn slot_reports(&self, csi: &CsiMatrix, params: &RadioParams) -> Result<Vec<SlotReport>> {
        self.check_shape(csi)?;
        if !self.is_canonical(csi) {
            return Err(Error::Constraint("assignment is not canonical; canonicalize it first".into()));
        }
        (0..self.num_slots())
            .map(|s| {
                let (k, b) = self.slot_location(s);
                let [sic, nonsic] = self.slot(k, b);
                let rates = pair_rate(nonsic, sic, k, csi, params)?;
                Ok(SlotReport { bs: k, prb: b, sic, nonsic, rates })
            })
            .collect()
    }

    /// Aggregate rate: the sum of the optimal pair rates over all PRBs in slot
    /// order. The assignment must be canonical.
    pub fn aggregate_rate(&self, csi: &CsiMatrix, params: &RadioParams) -> Result<f64> {
        let mut total = 0.0;
        for report in self.slot_reports(csi, params)? {
            total += report.rates.pair_rate_sum;
        }
        Ok(total)
    }

    fn check_shape(&self, csi: &CsiMatrix) -> Result<()> {
        if csi.num_bs() != self.num_bs || csi.num_ues() != self.u.len() {
            return Err(Error::Dimension(format!(
                "assignment for K={} N={} applied to a {}x{} CSI matrix",
                self.num_bs,
                self.u.len(),
                csi.num_bs(),
                csi.num_ues()
            )));
        }
        Ok(())
    }
}

#[inline]
fn in_canonical_order(sic: usize, nonsic: usize, k: usize, csi: &CsiMatrix) -> bool {
    let (gs, gn) = (csi.gain(k, sic), csi.gain(k, nonsic));
    gs > gn || (gs == gn && sic < nonsic)
}

/// Canonicalizes `u` and returns its aggregate rate.
pub fn score_permutation(u: &[usize], csi: &CsiMatrix, params: &RadioParams, prbs_per_bs: usize) -> Result<f64> {
    Assignment::from_permutation(u.to_vec(), csi.num_bs(), prbs_per_bs)?
        .canonicalize(csi)
        .aggregate_rate(csi, params)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlotReport {
    pub bs: usize,
    pub prb: usize,
    pub sic: usize,
    pub nonsic: usize,
    pub rates: PairRateResult,
}

/// One line per PRB, indices 1-based.
impl fmt::Display for SlotReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{} -> sic={} nonsic={} alpha={:.6} rate_sic={:.6} rate_nonsic={:.6}",
            self.bs + 1,
            self.prb + 1,
            self.sic + 1,
            self.nonsic + 1,
            self.rates.alpha_star,
            self.rates.rate_sic,
            self.rates.rate_nonsic
        )
    }
}
