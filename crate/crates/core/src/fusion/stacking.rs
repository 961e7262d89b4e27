use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expert::ExpertModel;
use crate::scalar::Scalar;
use crate::taskgroups::GroupingPlan;

/// Clamp applied to the not-in-group score before it is used as a divisor.
pub const PHI_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StackVariant {
    /// `Σ_j Λ_j(c) PS(c, j) (1 − φ_j) / φ_j`, with `Λ = 1` in-group and `λ`
    /// otherwise.
    Odds,
    /// `Σ_j λ Λ_j(c) PS(c, j) φ_j`, with `Λ` the plain membership indicator.
    Scaled,
}

impl std::str::FromStr for StackVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "odds" => Ok(Self::Odds),
            "scaled" => Ok(Self::Scaled),
            other => Err(Error::invalid(format!("unknown stacking variant {other:?}"))),
        }
    }
}

impl std::fmt::Display for StackVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Odds => "odds",
            Self::Scaled => "scaled",
        })
    }
}

/// One expert's view of a sample: in-group class probabilities (aligned with
/// the group members) and the clamped not-in-group score φ.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertScores<F> {
    pub scores: Vec<F>,
    pub phi: F,
    /// φ before clamping.
    pub raw_phi: F,
}

impl<F: Scalar> ExpertScores<F> {
    pub fn from_probabilities(probs: &[F]) -> Self {
        let m = probs.len() - 1;
        let eps = F::of(PHI_EPSILON);
        let raw_phi = probs[m];
        Self { scores: probs[..m].to_vec(), phi: raw_phi.max(eps).min(F::one() - eps), raw_phi }
    }

    /// `(1 − φ) / φ`.
    pub fn odds(&self) -> F {
        (F::one() - self.phi) / self.phi
    }

    pub fn phi_clamped(&self) -> bool {
        self.phi != self.raw_phi
    }
}

pub fn expert_scores<F: Scalar>(model: &ExpertModel<F>, x: &[F]) -> Result<ExpertScores<F>> {
    Ok(ExpertScores::from_probabilities(&model.forward(x)?))
}

/// The Ω-dimensional fused feature.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedFeature<F> {
    pub upsilon: Vec<F>,
    pub variant: StackVariant,
}

/// Scalar in front of the scaled variant; λ itself unless it is zero.
pub fn scaled_factor(lambda: f64) -> f64 {
    if lambda > 0.0 {
        lambda
    } else {
        1.0
    }
}

/// Fuses precomputed expert scores. Out-of-group classes receive `PS = 0`
/// from an expert, so only members contribute; the `λ` weight that the odds
/// variant gives non-members therefore never changes the sum.
pub fn stack_scores<F: Scalar>(
    scores: &[ExpertScores<F>],
    plan: &GroupingPlan,
    n_classes: usize,
    lambda: f64,
    variant: StackVariant,
) -> Result<StackedFeature<F>> {
    if scores.len() != plan.len() {
        return Err(Error::invalid(format!("{} expert outputs for a plan of {} groups", scores.len(), plan.len())));
    }
    let mut upsilon = vec![F::zero(); n_classes];
    for (s, group) in scores.iter().zip(&plan.groups) {
        if s.scores.len() != group.size() {
            return Err(Error::invalid(format!("expert output for group {} has the wrong width", group.index)));
        }
        let weight = match variant {
            StackVariant::Odds => s.odds(),
            StackVariant::Scaled => F::of(scaled_factor(lambda)) * s.phi,
        };
        for (&class, &p) in group.members.iter().zip(&s.scores) {
            let slot = upsilon.get_mut(class).ok_or(Error::Lookup { kind: "class", id: class })?;
            *slot += p * weight;
        }
    }
    Ok(StackedFeature { upsilon, variant })
}

pub fn check_experts_match<F: Scalar>(experts: &[ExpertModel<F>], plan: &GroupingPlan) -> Result<()> {
    if experts.len() != plan.len() {
        return Err(Error::invalid(format!("{} experts for a plan of {} groups", experts.len(), plan.len())));
    }
    for (e, g) in experts.iter().zip(&plan.groups) {
        if e.group.members != g.members {
            return Err(Error::invalid(format!("expert {} was trained for a different group", g.index)));
        }
    }
    Ok(())
}

pub fn stack_features<F: Scalar>(
    experts: &[ExpertModel<F>],
    plan: &GroupingPlan,
    x: &[F],
    lambda: f64,
    variant: StackVariant,
) -> Result<StackedFeature<F>> {
    check_experts_match(experts, plan)?;
    let scores = experts.iter().map(|e| expert_scores(e, x)).collect::<Result<Vec<_>>>()?;
    stack_scores(&scores, plan, plan.n_classes(), lambda, variant)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taskgroups::TaskGroup;

    fn scores(p: &[f64], phi: f64) -> ExpertScores<f64> {
        ExpertScores { scores: p.to_vec(), phi, raw_phi: phi }
    }

    fn plan(groups: Vec<Vec<usize>>, lambda: f64) -> GroupingPlan {
        GroupingPlan {
            lambda,
            group_size: groups[0].len(),
            stride: 1,
            groups: groups.into_iter().enumerate().map(|(i, g)| TaskGroup::new(i, g).unwrap()).collect(),
        }
    }

    #[test]
    fn odds_factor_cases() {
        assert_eq!(scores(&[0.5], 0.5).odds(), 1.0);
        let uniform = ExpertScores::from_probabilities(&[0.25_f64, 0.25, 0.25, 0.25]);
        assert_eq!(uniform.odds(), 3.0);
        let certain = ExpertScores::from_probabilities(&[0.0_f64, 1.0]);
        assert!(certain.phi_clamped());
        assert!(certain.odds() > 0.0 && certain.odds() < 2e-6);
        let sure_member = ExpertScores::from_probabilities(&[1.0_f64, 0.0]);
        assert!((sure_member.odds() - (1.0 - 1e-6) / 1e-6).abs() < 1e-3);
    }

    #[test]
    fn single_membership_odds() {
        let p = plan(vec![vec![0, 1]], 0.0);
        let f = stack_scores(&[scores(&[0.8, 0.1], 0.5)], &p, 2, 0.0, StackVariant::Odds).unwrap();
        assert!((f.upsilon[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn double_membership_both_variants() {
        let p = plan(vec![vec![0, 1], vec![2, 0]], 0.5);
        let s = [scores(&[0.6, 0.1], 0.2), scores(&[0.05, 0.3], 0.5)];
        let odds = stack_scores(&s, &p, 3, 0.5, StackVariant::Odds).unwrap();
        assert!((odds.upsilon[0] - 2.7).abs() < 1e-12);
        let scaled = stack_scores(&s, &p, 3, 0.5, StackVariant::Scaled).unwrap();
        assert!((scaled.upsilon[0] - 0.135).abs() < 1e-12);
        let zero_lambda = stack_scores(&s, &p, 3, 0.0, StackVariant::Scaled).unwrap();
        assert!((zero_lambda.upsilon[0] - 0.27).abs() < 1e-12);
    }

    #[test]
    fn class_outside_every_group_is_zero() {
        let p = plan(vec![vec![0, 1]], 0.0);
        let f = stack_scores(&[scores(&[0.3, 0.3], 0.4)], &p, 3, 0.0, StackVariant::Odds).unwrap();
        assert_eq!(f.upsilon[2], 0.0);
    }

    #[test]
    fn mismatched_inputs() {
        let p = plan(vec![vec![0, 1]], 0.0);
        assert!(stack_scores::<f64>(&[], &p, 2, 0.0, StackVariant::Odds).is_err());
        assert!(stack_scores(&[scores(&[0.3], 0.4)], &p, 2, 0.0, StackVariant::Odds).is_err());
        assert!("median".parse::<StackVariant>().is_err());
        assert_eq!("scaled".parse::<StackVariant>().unwrap(), StackVariant::Scaled);
    }
}
