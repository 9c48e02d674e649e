//! Binary search over a global gate threshold to meet a FLOPS budget.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arch::{count_flops, place_gates, prune_by_threshold, ArchError, ArchSpec, ChannelConfig};
use crate::gates::GateState;

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error(transparent)]
    Arch(#[from] ArchError),
}

pub type Result<T, E = SearchError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    /// Target MAC count.
    pub budget: u64,
    pub max_iters: usize,
    pub rel_tolerance: f64,
    pub tau_min: f64,
    pub tau_max: f64,
}

impl SearchConfig {
    pub const DEFAULT_MAX_ITERS: usize = 20;
    pub const DEFAULT_TOLERANCE: f64 = 0.02;

    pub fn new(budget: u64) -> Self {
        Self {
            budget,
            max_iters: Self::DEFAULT_MAX_ITERS,
            rel_tolerance: Self::DEFAULT_TOLERANCE,
            tau_min: 0.0,
            tau_max: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.tau_min && self.tau_min < self.tau_max && self.tau_max <= 1.0) {
            return Err(SearchError::Precondition(format!(
                "threshold interval [{}, {}] must satisfy 0 ≤ min < max ≤ 1",
                self.tau_min, self.tau_max
            )));
        }
        if !(self.rel_tolerance > 0.0) || self.max_iters == 0 || self.budget == 0 {
            return Err(SearchError::Precondition("tolerance, iteration limit and budget must be positive".into()));
        }
        Ok(())
    }
}

/// One probe of the search: the threshold tried, what it cost, and the
/// interval left afterwards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchStep {
    pub tau: f64,
    pub flops: u64,
    pub rel_gap: f64,
    pub tau_min: f64,
    pub tau_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub tau_star: f64,
    pub config: ChannelConfig,
    pub achieved_flops: u64,
    pub iterations: usize,
    pub converged: bool,
    pub trace: Vec<SearchStep>,
    /// Why the search stopped short, when it did.
    pub diagnostics: Option<String>,
}

impl SearchResult {
    pub fn rel_gap(&self, budget: u64) -> f64 {
        rel_gap(self.achieved_flops, budget)
    }
}

fn rel_gap(flops: u64, budget: u64) -> f64 {
    (flops as f64 - budget as f64).abs() / budget as f64
}

/// Bisects `τ` until the pruned structure's FLOPS lie within the relative
/// tolerance of the budget. On exhaustion the closest structure seen is
/// returned with `converged = false`.
pub fn search_structure(gates: &GateState, arch: &ArchSpec, cfg: &SearchConfig) -> Result<SearchResult> {
    cfg.validate()?;
    let placement = place_gates(arch)?;
    let widths = placement.widths(arch);
    if gates.widths() != widths {
        return Err(SearchError::Precondition(format!(
            "gate widths {:?} do not match gated layers {widths:?}",
            gates.widths()
        )));
    }
    let full = count_flops(arch, None)?;
    if cfg.budget > full {
        return Err(SearchError::Precondition(format!("budget {} exceeds full FLOPS {full}", cfg.budget)));
    }
    let (mut lo, mut hi) = (cfg.tau_min, cfg.tau_max);
    let mut trace = Vec::with_capacity(cfg.max_iters);
    let mut best: Option<(f64, f64, ChannelConfig, u64)> = None;
    for _ in 0..cfg.max_iters {
        let tau = (lo + hi) / 2.0;
        let config = prune_by_threshold(gates, tau)?;
        let flops = count_flops(arch, Some(&config))?;
        let gap = rel_gap(flops, cfg.budget);
        // a larger τ prunes more, so undershooting the budget lowers τ
        if flops < cfg.budget {
            hi = tau;
        } else {
            lo = tau;
        }
        trace.push(SearchStep { tau, flops, rel_gap: gap, tau_min: lo, tau_max: hi });
        if gap <= cfg.rel_tolerance {
            return Ok(SearchResult {
                tau_star: tau,
                config,
                achieved_flops: flops,
                iterations: trace.len(),
                converged: true,
                trace,
                diagnostics: None,
            });
        }
        if best.as_ref().is_none_or(|b| gap < b.0) {
            best = Some((gap, tau, config, flops));
        }
    }
    let (gap, tau, config, flops) = best.expect("at least one iteration");
    let flat = gates.flattened();
    let degenerate = flat.windows(2).all(|w| w[0] == w[1]);
    let mut diagnostics = format!(
        "no threshold within {} of the budget after {} iterations; closest gap {gap:.4} at τ = {tau}",
        cfg.rel_tolerance, cfg.max_iters
    );
    if degenerate {
        diagnostics.push_str("; all gates are equal, so only the full and the minimal structure are reachable");
    }
    log::warn!("{diagnostics}");
    Ok(SearchResult {
        tau_star: tau,
        config,
        achieved_flops: flops,
        iterations: trace.len(),
        converged: false,
        trace,
        diagnostics: Some(diagnostics),
    })
}
