//! Training-time model `T_total ≈ K_generation·T_generation + K_update·T_update`.
//!
//! Outputs are lower bounds: evaluation, checkpointing and scheduling
//! overheads are not modeled.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostParams {
    pub t_generation: f64,
    pub t_update: f64,
    pub k_generation: u64,
    pub k_update: u64,
}

impl CostParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_generation >= 0.0 && self.t_update >= 0.0) {
            return Err(Error::contract("unit times must be nonnegative"));
        }
        Ok(())
    }
}

pub fn total_time(p: &CostParams) -> f64 {
    p.k_generation as f64 * p.t_generation + p.k_update as f64 * p.t_update
}

/// Whether `K` updates per round over `ratio · K_gen` rounds beats one
/// update per round over `K_gen` rounds.
pub fn is_reuse_profitable(t_generation: f64, t_update: f64, ratio: f64, k: u64) -> bool {
    ratio * (t_generation + k as f64 * t_update) < t_generation + t_update
}

/// The range of reuse factors that lower total time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReuseWindow {
    /// Smallest profitable `K`.
    pub min_k: u64,
    /// Largest profitable `K`; `None` when every `K` is profitable.
    pub max_k: Option<u64>,
}

/// Profitable reuse factors for a given generation-round reduction ratio, or
/// `None` when no `K ≥ 1` is profitable.
pub fn breakeven_reuse(t_generation: f64, t_update: f64, gen_reduction_ratio: f64) -> Result<Option<ReuseWindow>> {
    if !(t_generation > 0.0 && t_update >= 0.0 && t_update <= t_generation) {
        return Err(Error::contract(
            "need T_generation > 0 and 0 <= T_update <= T_generation",
        ));
    }
    if !(gen_reduction_ratio > 0.0 && gen_reduction_ratio <= 1.0) {
        return Err(Error::contract("reduction ratio must lie in (0, 1]"));
    }
    let profitable = |k| is_reuse_profitable(t_generation, t_update, gen_reduction_ratio, k);
    if !profitable(1) {
        return Ok(None);
    }
    if t_update == 0.0 {
        return Ok(Some(ReuseWindow { min_k: 1, max_k: None }));
    }
    // ratio·(T_g + K·T_u) < T_g + T_u  ⇔  K < ((T_g + T_u)/ratio − T_g)/T_u
    let bound = ((t_generation + t_update) / gen_reduction_ratio - t_generation) / t_update;
    let mut k = bound.ceil().max(1.0) as u64;
    while k > 1 && !profitable(k) {
        k -= 1;
    }
    while profitable(k + 1) {
        k += 1;
    }
    Ok(Some(ReuseWindow {
        min_k: 1,
        max_k: Some(k),
    }))
}

/// One row of a cost report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub label: String,
    pub params: CostParams,
}

/// CSV table with one projected lower-bound total per row.
pub fn cost_report_csv(rows: &[CostRow]) -> String {
    let mut out = String::from("label,k_generation,k_update,t_generation,t_update,total_time_lower_bound\n");
    for r in rows {
        let p = &r.params;
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.label,
            p.k_generation,
            p.k_update,
            p.t_generation,
            p.t_update,
            total_time(p)
        )
        .unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn on_policy_projection() {
        let p = CostParams {
            t_generation: 36.8,
            t_update: 2.8,
            k_generation: 580,
            k_update: 580,
        };
        assert_eq!(total_time(&p), 22968.0);
    }

    #[test]
    fn linearity() {
        let mut p = CostParams {
            t_generation: 3.0,
            t_update: 0.5,
            k_generation: 10,
            k_update: 0,
        };
        assert_eq!(total_time(&p), 30.0);
        p.k_update = 7;
        let base = total_time(&p);
        p.k_update = 14;
        assert_eq!(total_time(&p) - base, 7.0 * 0.5);
    }

    #[test]
    fn reported_reduction_window() {
        let w = breakeven_reuse(36.8, 2.8, 470.0 / 580.0).unwrap().unwrap();
        assert_eq!(
            w,
            ReuseWindow {
                min_k: 1,
                max_k: Some(4)
            }
        );
        assert!(is_reuse_profitable(36.8, 2.8, 470.0 / 580.0, 2));
        // eight updates per round cost more than the saved generations
        assert!(!is_reuse_profitable(36.8, 2.8, 470.0 / 580.0, 8));
    }

    #[test]
    fn free_updates_and_no_reduction() {
        assert_eq!(
            breakeven_reuse(10.0, 0.0, 0.9).unwrap(),
            Some(ReuseWindow { min_k: 1, max_k: None })
        );
        assert_eq!(breakeven_reuse(10.0, 1.0, 1.0).unwrap(), None);
    }

    #[test]
    fn window_edges_are_tight() {
        for (tg, tu, ratio) in [(36.8, 2.8, 0.5), (5.0, 1.0, 0.9), (100.0, 1.0, 0.25)] {
            let w = breakeven_reuse(tg, tu, ratio).unwrap().unwrap();
            let k = w.max_k.unwrap();
            assert!(is_reuse_profitable(tg, tu, ratio, k));
            assert!(!is_reuse_profitable(tg, tu, ratio, k + 1));
        }
    }
}
