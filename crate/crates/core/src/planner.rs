//! Deployment planning under UE/BS resource limits and a feedback-bit budget.
//!
//! The expansion `k` is chosen first (largest feasible over all candidate
//! compression settings), FC layers are binarized only where the
//! full-precision layer breaks a memory limit, and `(eta, B)` is then picked
//! by quality rank among the settings that reach that `k`.

use std::collections::HashMap;
use std::fmt;

use thiserror::Error;

use crate::codec::feedback_bits;
use crate::complexity::{count_config, ComplexityReport, Side, SideTotals};
use crate::model::{Eta, ModelConfig, ModelError};

/// Resource limits. Parameter limits are in 32-bit-equivalent units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResourceBudget {
    pub ue_param_limit: f64,
    pub bs_param_limit: f64,
    pub ue_flops_limit: f64,
    pub bs_flops_limit: f64,
    pub max_feedback_bits: usize,
}

impl ResourceBudget {
    /// No limit on memory or FLOPs; only the feedback budget binds.
    pub fn unlimited(max_feedback_bits: usize) -> Self {
        Self {
            ue_param_limit: f64::INFINITY,
            bs_param_limit: f64::INFINITY,
            ue_flops_limit: f64::INFINITY,
            bs_flops_limit: f64::INFINITY,
            max_feedback_bits,
        }
    }

    pub fn validate(&self) -> Result<(), PlanError> {
        let limits = [
            ("ue_param_limit", self.ue_param_limit),
            ("bs_param_limit", self.bs_param_limit),
            ("ue_flops_limit", self.ue_flops_limit),
            ("bs_flops_limit", self.bs_flops_limit),
        ];
        for (name, v) in limits {
            if v.is_nan() || v <= 0.0 {
                return Err(PlanError::Budget(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        if self.max_feedback_bits == 0 {
            return Err(PlanError::Budget(
                "max_feedback_bits must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Candidate grids and search bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct PlannerOptions {
    pub etas: Vec<Eta>,
    pub bits: Vec<u8>,
    pub max_k: usize,
    /// Compression settings below this ratio are never proposed.
    pub min_eta: Eta,
    pub na: usize,
    pub nt: usize,
}

impl Default for PlannerOptions {
    fn default() -> Self {
        Self {
            etas: vec![Eta::QUARTER, Eta::reciprocal(8).expect("valid")],
            bits: vec![2, 3, 4, 6, 8],
            max_k: 20,
            min_eta: Eta::reciprocal(8).expect("valid"),
            na: 32,
            nt: 32,
        }
    }
}

impl PlannerOptions {
    pub fn with_etas(mut self, etas: &[Eta]) -> Self {
        self.etas = etas.to_vec();
        self
    }

    fn base_config(&self, k: usize, eta: Eta) -> ModelConfig {
        ModelConfig {
            na: self.na,
            nt: self.nt,
            ..ModelConfig::new(k, eta)
        }
    }

    /// `(eta, B)` pairs meeting the bit budget, best first.
    pub fn ranked(&self, max_bits: usize) -> Vec<(Eta, u8)> {
        let input_len = 2 * self.na * self.nt;
        let mut out: Vec<(Eta, u8)> = self
            .etas
            .iter()
            .filter(|e| e.value() >= self.min_eta.value())
            .flat_map(|&e| self.bits.iter().map(move |&b| (e, b)))
            .filter(|&(e, b)| {
                e.feature_dim(input_len)
                    .map(|fd| feedback_bits(fd, b) <= max_bits)
                    .unwrap_or(false)
            })
            .collect();
        out.sort_by(|a, b| b.0.value().total_cmp(&a.0.value()).then(b.1.cmp(&a.1)));
        out.dedup();
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Constraint {
    UeParams,
    BsParams,
    UeFlops,
    BsFlops,
    FeedbackBits,
}

impl fmt::Display for Constraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Constraint::UeParams => "ue-params",
            Constraint::BsParams => "bs-params",
            Constraint::UeFlops => "ue-flops",
            Constraint::BsFlops => "bs-flops",
            Constraint::FeedbackBits => "feedback-bits",
        })
    }
}

/// Why one candidate `(eta, B)` cannot be deployed at any `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateFailure {
    pub eta: Eta,
    pub bits: u8,
    pub violated: Vec<Constraint>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Infeasibility {
    /// Constraints violated by every candidate.
    pub binding: Vec<Constraint>,
    pub candidates: Vec<CandidateFailure>,
}

impl fmt::Display for Infeasibility {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.candidates.is_empty() {
            return write!(f, "no (eta, B) candidate fits the feedback-bit budget");
        }
        let names: Vec<String> = self.binding.iter().map(|c| c.to_string()).collect();
        if names.is_empty() {
            write!(f, "every candidate violates some limit")?;
        } else {
            write!(f, "violated by every candidate: {}", names.join(", "))?;
        }
        for c in &self.candidates {
            let v: Vec<String> = c.violated.iter().map(|c| c.to_string()).collect();
            write!(f, "; eta={} B={}: {}", c.eta, c.bits, v.join(","))?;
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("invalid budget: {0}")]
    Budget(String),
    #[error("no feasible plan: {0}")]
    Infeasible(Infeasibility),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("plan {0} violates its own budget")]
    Verification(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeploymentPlan {
    /// Complete model configuration, including `quant_bits`.
    pub config: ModelConfig,
    pub report: ComplexityReport,
    pub feedback_bits: usize,
}

impl DeploymentPlan {
    pub fn k(&self) -> usize {
        self.config.expansion
    }

    pub fn eta(&self) -> Eta {
        self.config.eta
    }

    pub fn bits(&self) -> u8 {
        self.config.quant_bits.expect("plans always quantize")
    }

    pub fn binarize_encoder_fc(&self) -> bool {
        self.config.binarize_encoder_fc
    }

    pub fn binarize_decoder_fc(&self) -> bool {
        self.config.binarize_decoder_fc
    }
}

impl fmt::Display for DeploymentPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "plan: {}", self.config.label())?;
        writeln!(f, "k={}", self.k())?;
        writeln!(f, "eta={}", self.eta())?;
        writeln!(f, "bits={}", self.bits())?;
        writeln!(f, "binarize_encoder_fc={}", self.binarize_encoder_fc())?;
        writeln!(f, "binarize_decoder_fc={}", self.binarize_decoder_fc())?;
        write!(f, "feedback_bits={}", self.feedback_bits)
    }
}

/// Full-precision reports, built on demand.
struct ReportCache<'a> {
    opts: &'a PlannerOptions,
    reports: HashMap<(usize, Eta), ComplexityReport>,
}

impl<'a> ReportCache<'a> {
    fn get(&mut self, k: usize, eta: Eta) -> Result<&ComplexityReport, ModelError> {
        if !self.reports.contains_key(&(k, eta)) {
            let r = count_config(&self.opts.base_config(k, eta))?;
            self.reports.insert((k, eta), r);
        }
        Ok(&self.reports[&(k, eta)])
    }
}

/// One side after optional FC binarization.
fn fit_side(report: &ComplexityReport, side: Side, param_limit: f64) -> (SideTotals, bool) {
    let fp = report.side(side);
    if fp.param_units() <= param_limit {
        return (fp, false);
    }
    (report.with_binarized_fc(side).side(side), true)
}

/// Encoder-side check; independent of `k`.
fn ue_violations(report: &ComplexityReport, budget: &ResourceBudget) -> (Vec<Constraint>, bool) {
    let (enc, binarized) = fit_side(report, Side::Encoder, budget.ue_param_limit);
    let mut v = Vec::new();
    if enc.param_units() > budget.ue_param_limit {
        v.push(Constraint::UeParams);
    }
    if enc.flops as f64 > budget.ue_flops_limit {
        v.push(Constraint::UeFlops);
    }
    (v, binarized)
}

fn bs_violations(report: &ComplexityReport, budget: &ResourceBudget) -> (Vec<Constraint>, bool) {
    let (dec, binarized) = fit_side(report, Side::Decoder, budget.bs_param_limit);
    let mut v = Vec::new();
    if dec.param_units() > budget.bs_param_limit {
        v.push(Constraint::BsParams);
    }
    if dec.flops as f64 > budget.bs_flops_limit {
        v.push(Constraint::BsFlops);
    }
    (v, binarized)
}

struct Candidate {
    eta: Eta,
    bits: u8,
    k: usize,
    binarize_encoder: bool,
    binarize_decoder: bool,
}

pub fn plan(budget: &ResourceBudget, opts: &PlannerOptions) -> Result<DeploymentPlan, PlanError> {
    budget.validate()?;
    if opts.max_k == 0 {
        return Err(PlanError::Budget("max_k must be at least 1".into()));
    }
    let ranked = opts.ranked(budget.max_feedback_bits);
    let mut cache = ReportCache {
        opts,
        reports: HashMap::new(),
    };

    let mut feasible: Vec<Candidate> = Vec::new();
    let mut failures = Vec::new();
    let mut largest_k: HashMap<Eta, usize> = HashMap::new();
    for &(eta, bits) in &ranked {
        let (ue, binarize_encoder) = ue_violations(cache.get(1, eta)?, budget);
        let (bs, _) = bs_violations(cache.get(1, eta)?, budget);
        if !ue.is_empty() || !bs.is_empty() {
            failures.push(CandidateFailure {
                eta,
                bits,
                violated: [ue, bs].concat(),
            });
            continue;
        }
        let k = match largest_k.get(&eta) {
            Some(&k) => k,
            None => {
                // Decoder cost grows with k, so the first failure ends the search.
                let mut best = 1;
                for k in 2..=opts.max_k {
                    if bs_violations(cache.get(k, eta)?, budget).0.is_empty() {
                        best = k;
                    } else {
                        break;
                    }
                }
                largest_k.insert(eta, best);
                best
            }
        };
        let (_, binarize_decoder) = bs_violations(cache.get(k, eta)?, budget);
        feasible.push(Candidate {
            eta,
            bits,
            k,
            binarize_encoder,
            binarize_decoder,
        });
    }

    let Some(k_star) = feasible.iter().map(|c| c.k).max() else {
        let all = [
            Constraint::UeParams,
            Constraint::UeFlops,
            Constraint::BsParams,
            Constraint::BsFlops,
        ];
        let binding = if ranked.is_empty() {
            vec![Constraint::FeedbackBits]
        } else {
            all.into_iter()
                .filter(|c| failures.iter().all(|f| f.violated.contains(c)))
                .collect()
        };
        return Err(PlanError::Infeasible(Infeasibility {
            binding,
            candidates: failures,
        }));
    };
    // `feasible` keeps rank order, so the first match is the best-ranked one.
    let chosen = feasible
        .iter()
        .find(|c| c.k == k_star)
        .expect("k_star comes from a feasible candidate");

    let config = ModelConfig {
        quant_bits: Some(chosen.bits),
        binarize_encoder_fc: chosen.binarize_encoder,
        binarize_decoder_fc: chosen.binarize_decoder,
        ..opts.base_config(chosen.k, chosen.eta)
    };
    let report = count_config(&config)?;
    let fb = feedback_bits(config.feature_dim()?, chosen.bits);
    let (enc, dec) = (report.encoder(), report.decoder());
    if enc.param_units() > budget.ue_param_limit
        || enc.flops as f64 > budget.ue_flops_limit
        || dec.param_units() > budget.bs_param_limit
        || dec.flops as f64 > budget.bs_flops_limit
        || fb > budget.max_feedback_bits
    {
        return Err(PlanError::Verification(config.label()));
    }
    Ok(DeploymentPlan {
        config,
        report,
        feedback_bits: fb,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eighth() -> Eta {
        Eta::reciprocal(8).unwrap()
    }

    #[test]
    fn ranking_prefers_eta_then_bits() {
        let r = PlannerOptions::default().ranked(2048);
        assert_eq!(r[0], (Eta::QUARTER, 4));
        assert_eq!(r[1], (Eta::QUARTER, 3));
        assert_eq!(r[2], (Eta::QUARTER, 2));
        assert_eq!(r[3], (eighth(), 8));
        assert!(r
            .iter()
            .all(|&(e, b)| feedback_bits(e.feature_dim(2048).unwrap(), b) <= 2048));
    }

    #[test]
    fn small_etas_are_never_proposed() {
        let opts = PlannerOptions::default().with_etas(&[Eta::reciprocal(16).unwrap()]);
        let err = plan(&ResourceBudget::unlimited(1 << 20), &opts).unwrap_err();
        match err {
            PlanError::Infeasible(r) => assert_eq!(r.binding, vec![Constraint::FeedbackBits]),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn ample_resources_pick_quarter_and_four_bits() {
        let p = plan(&ResourceBudget::unlimited(2048), &PlannerOptions::default()).unwrap();
        assert_eq!((p.eta(), p.bits()), (Eta::QUARTER, 4));
        assert_eq!(p.k(), 20);
        assert!(!p.binarize_encoder_fc() && !p.binarize_decoder_fc());
        assert_eq!(p.feedback_bits, 2048);
    }

    #[test]
    fn tight_ue_memory_binarizes_only_the_encoder() {
        let budget = ResourceBudget {
            ue_param_limit: 40_000.0,
            ..ResourceBudget::unlimited(2048)
        };
        let p = plan(
            &budget,
            &PlannerOptions::default().with_etas(&[Eta::QUARTER]),
        )
        .unwrap();
        assert!(p.binarize_encoder_fc());
        assert!(!p.binarize_decoder_fc());
        let ue = p.report.encoder().param_units();
        assert!(ue <= 40_000.0 && ue > 30_000.0, "{ue}");
    }

    #[test]
    fn bs_flops_limit_caps_expansion() {
        let budget = ResourceBudget {
            bs_flops_limit: 25e6,
            ..ResourceBudget::unlimited(2048)
        };
        let p = plan(
            &budget,
            &PlannerOptions::default().with_etas(&[Eta::QUARTER]),
        )
        .unwrap();
        assert_eq!(p.k(), 10);
        assert!(p.report.decoder().flops as f64 <= 25e6);
        let next = count_config(&ModelConfig::new(11, Eta::QUARTER)).unwrap();
        assert!(next.decoder().flops as f64 > 25e6);
    }

    #[test]
    fn tight_bs_memory_binarizes_the_decoder() {
        let budget = ResourceBudget {
            bs_param_limit: 60_000.0,
            ..ResourceBudget::unlimited(2048)
        };
        let p = plan(
            &budget,
            &PlannerOptions::default().with_etas(&[Eta::QUARTER]),
        )
        .unwrap();
        assert!(p.binarize_decoder_fc() && !p.binarize_encoder_fc());
        assert!(p.report.decoder().param_units() <= 60_000.0);
        assert!(p.k() >= 10);
    }

    #[test]
    fn loosening_a_budget_never_lowers_k() {
        let opts = PlannerOptions::default();
        let base = ResourceBudget {
            ue_param_limit: 600_000.0,
            bs_param_limit: 45_000.0,
            ue_flops_limit: 5e6,
            bs_flops_limit: 12e6,
            max_feedback_bits: 2048,
        };
        let k0 = plan(&base, &opts).unwrap().k();
        let looser = [
            ResourceBudget {
                ue_param_limit: 2e6,
                ..base
            },
            ResourceBudget {
                bs_param_limit: 2e6,
                ..base
            },
            ResourceBudget {
                ue_flops_limit: 1e9,
                ..base
            },
            ResourceBudget {
                bs_flops_limit: 30e6,
                ..base
            },
            ResourceBudget {
                max_feedback_bits: 8192,
                ..base
            },
        ];
        for b in looser {
            assert!(plan(&b, &opts).unwrap().k() >= k0, "{b:?}");
        }
    }

    #[test]
    fn infeasible_budget_names_a_binding_constraint() {
        let budget = ResourceBudget {
            bs_flops_limit: 1e6,
            ..ResourceBudget::unlimited(2048)
        };
        match plan(&budget, &PlannerOptions::default()).unwrap_err() {
            PlanError::Infeasible(r) => {
                assert_eq!(r.binding, vec![Constraint::BsFlops]);
                assert!(r
                    .candidates
                    .iter()
                    .all(|c| c.violated.contains(&Constraint::BsFlops)));
                assert!(r.to_string().contains("bs-flops"));
            }
            e => panic!("unexpected {e}"),
        }
        let budget = ResourceBudget {
            ue_param_limit: 100.0,
            ..ResourceBudget::unlimited(2048)
        };
        match plan(&budget, &PlannerOptions::default()).unwrap_err() {
            PlanError::Infeasible(r) => assert_eq!(r.binding, vec![Constraint::UeParams]),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn rejects_non_positive_limits() {
        let budget = ResourceBudget {
            ue_flops_limit: 0.0,
            ..ResourceBudget::unlimited(2048)
        };
        assert!(matches!(
            plan(&budget, &PlannerOptions::default()),
            Err(PlanError::Budget(_))
        ));
    }
}
