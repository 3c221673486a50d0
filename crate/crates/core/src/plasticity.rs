//! Structural plasticity: the input→hidden connectivity mask, its
//! mutual-information scoring from the running probability traces, and the
//! greedy swap rule that rewires each hidden HCU under a fixed fan-in.

use rand::Rng;
use thiserror::Error;

use crate::mat::Mat;
use crate::model::{HypercolumnGeometry, LayerPairState};
use crate::precision::ScalarArith;

/// ChaCha stream id reserved for mask initialization (b"mask").
pub(crate) const MASK_STREAM: u64 = 0x6d61_736b;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PlasticityError {
    #[error("fan-in {fan_in} out of range 1..={n_features}")]
    FanInRange { fan_in: usize, n_features: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Boolean connectivity of input features to hidden HCUs. Every HCU column
/// holds exactly `fan_in` active features, at all times.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConnectivityMask {
    n_features: usize,
    n_hcus: usize,
    fan_in: usize,
    /// Feature-major flags: `active[i * n_hcus + h]`.
    active: Vec<bool>,
}

impl ConnectivityMask {
    pub fn fully_active(n_features: usize, n_hcus: usize) -> Self {
        ConnectivityMask {
            n_features,
            n_hcus,
            fan_in: n_features,
            active: vec![true; n_features * n_hcus],
        }
    }

    /// Rebuilds a mask from stored flags, re-validating the cardinality
    /// invariant.
    pub fn from_flags(
        n_features: usize,
        n_hcus: usize,
        fan_in: usize,
        active: Vec<bool>,
    ) -> Result<Self, PlasticityError> {
        if active.len() != n_features * n_hcus {
            return Err(PlasticityError::DimensionMismatch(format!(
                "flag count {} != {n_features}×{n_hcus}",
                active.len()
            )));
        }
        let mask = ConnectivityMask { n_features, n_hcus, fan_in, active };
        for h in 0..n_hcus {
            if mask.active_count(h) != fan_in {
                return Err(PlasticityError::DimensionMismatch(format!(
                    "HCU {h} holds {} active features, fan-in is {fan_in}",
                    mask.active_count(h)
                )));
            }
        }
        Ok(mask)
    }

    #[inline]
    pub fn is_active(&self, feature: usize, hcu: usize) -> bool {
        self.active[feature * self.n_hcus + hcu]
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_hcus(&self) -> usize {
        self.n_hcus
    }

    pub fn fan_in(&self) -> usize {
        self.fan_in
    }

    pub fn active_count(&self, hcu: usize) -> usize {
        (0..self.n_features).filter(|&i| self.is_active(i, hcu)).count()
    }

    #[cfg(test)]
    pub(crate) fn set_active(&mut self, feature: usize, hcu: usize, value: bool) {
        self.active[feature * self.n_hcus + hcu] = value;
    }
}

/// Random mask: each HCU column draws `fan_in` distinct features uniformly.
/// Deterministic for a given RNG state.
pub fn init_mask(
    rng: &mut impl Rng,
    n_features: usize,
    n_hcus: usize,
    fan_in: usize,
) -> Result<ConnectivityMask, PlasticityError> {
    if fan_in < 1 || fan_in > n_features {
        return Err(PlasticityError::FanInRange { fan_in, n_features });
    }
    let mut active = vec![false; n_features * n_hcus];
    for h in 0..n_hcus {
        for i in rand::seq::index::sample(rng, n_features, fan_in) {
            active[i * n_hcus + h] = true;
        }
    }
    Ok(ConnectivityMask { n_features, n_hcus, fan_in, active })
}

/// Mutual-information estimate of each (input feature, hidden HCU) pair,
/// computed from the running traces in f64 (scoring is control path — it
/// never touches the model's arithmetic provider):
///
/// `score[i][h] = Σ_{j∈h} p11·ln(p11/(p1·pj)) + p01·ln(p01/(p0·pj))`
///
/// with `p1 = C_i`, `p0 = 1−p1`, `pj = C_j`, `p11 = C_ij`, `p01 = pj−p11`.
/// Terms whose joint probability is nonpositive contribute zero, as do
/// degenerate marginals (`p1 ≥ 1` or `pj ≤ 0`).
pub fn mi_scores<P: ScalarArith>(
    p: P,
    state: &LayerPairState<P>,
    hidden_geom: &HypercolumnGeometry,
) -> Result<Mat<f64>, PlasticityError> {
    let (n_features, n_post) = (state.weights.rows(), state.weights.cols());
    if hidden_geom.total_units() != n_post {
        return Err(PlasticityError::DimensionMismatch(format!(
            "hidden geometry holds {} units, pair state {n_post}",
            hidden_geom.total_units()
        )));
    }
    let m = hidden_geom.mcus_per_hcu;
    let mut scores = Mat::zeros(n_features, hidden_geom.n_hcus);
    for i in 0..n_features {
        let p1 = p.emit(state.trace_ci[i]);
        let p0 = 1.0 - p1;
        let crow = state.trace_cij.row(i);
        for h in 0..hidden_geom.n_hcus {
            let mut acc = 0.0;
            for j in h * m..(h + 1) * m {
                let pj = p.emit(state.trace_cj[j]);
                if pj <= 0.0 {
                    continue;
                }
                let p11 = p.emit(crow[j]);
                if p11 > 0.0 && p1 > 0.0 {
                    acc += p11 * (p11 / (p1 * pj)).ln();
                }
                let p01 = pj - p11;
                if p01 > 0.0 && p0 > 0.0 {
                    acc += p01 * (p01 / (p0 * pj)).ln();
                }
            }
            scores.set(i, h, acc);
        }
    }
    Ok(scores)
}

/// Greedy rewiring: per HCU, up to `swaps_per_hcu` times, silence the active
/// feature with the lowest score and activate the silent feature with the
/// highest, but only when the exchange strictly raises the column's score
/// sum. Ties resolve to the lowest feature index. Returns the number of
/// swaps performed.
pub fn rewire(
    mask: &mut ConnectivityMask,
    scores: &Mat<f64>,
    swaps_per_hcu: usize,
) -> Result<u64, PlasticityError> {
    if scores.rows() != mask.n_features || scores.cols() != mask.n_hcus {
        return Err(PlasticityError::DimensionMismatch(format!(
            "scores {}×{}, mask {}×{}",
            scores.rows(),
            scores.cols(),
            mask.n_features,
            mask.n_hcus
        )));
    }
    let mut swaps = 0u64;
    for h in 0..mask.n_hcus {
        for _ in 0..swaps_per_hcu {
            let mut worst_active: Option<(usize, f64)> = None;
            let mut best_silent: Option<(usize, f64)> = None;
            for i in 0..mask.n_features {
                let s = scores.at(i, h);
                if mask.is_active(i, h) {
                    if worst_active.is_none_or(|(_, ws)| s < ws) {
                        worst_active = Some((i, s));
                    }
                } else if best_silent.is_none_or(|(_, bs)| s > bs) {
                    best_silent = Some((i, s));
                }
            }
            match (worst_active, best_silent) {
                (Some((a, sa)), Some((s, ss))) if ss > sa => {
                    mask.active[a * mask.n_hcus + h] = false;
                    mask.active[s * mask.n_hcus + h] = true;
                    swaps += 1;
                }
                _ => break,
            }
        }
    }
    Ok(swaps)
}
