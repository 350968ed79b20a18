//! Differentiable reward terms and composite reward sets.
//!
//! A composite reward is the plain sum `r(x) = Σ_j r_j(x)`. The per-term
//! gradients are kept separate because the guidance engine measures how
//! well they agree.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::mog::{ConstraintTarget, GaussianMixture, LabelTable};
use crate::{Error, Result, Vec2};

/// The mixture and label table that define the Bayes classifiers.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierBank {
    pub gm: GaussianMixture,
    pub table: LabelTable,
}

impl ClassifierBank {
    pub fn new(gm: GaussianMixture, table: LabelTable) -> Result<Arc<Self>> {
        table.check_against(&gm)?;
        Ok(Arc::new(Self { gm, table }))
    }

    pub fn benchmark() -> Arc<Self> {
        Arc::new(Self {
            gm: GaussianMixture::benchmark(),
            table: LabelTable::benchmark(),
        })
    }
}

#[derive(Debug, Clone)]
pub enum RewardTerm {
    /// `λ log p(y_j = c | x)` under the exact Bayes posterior.
    Classifier {
        bank: Arc<ClassifierBank>,
        classifier: usize,
        label: u8,
        weight: f64,
    },
    /// `-Σ_k exp(-‖x - c_k‖² / σ²)`.
    Obstacle { centers: Vec<Vec2>, width: f64 },
    /// `Σ_k exp(-‖x - g_k‖² / σ²)`.
    Goal { centers: Vec<Vec2>, width: f64 },
}

impl RewardTerm {
    pub fn classifier(bank: Arc<ClassifierBank>, classifier: usize, label: u8, weight: f64) -> Result<Self> {
        let term = RewardTerm::Classifier {
            bank,
            classifier,
            label,
            weight,
        };
        term.validate()?;
        Ok(term)
    }

    pub fn obstacle(centers: Vec<Vec2>, width: f64) -> Result<Self> {
        let term = RewardTerm::Obstacle { centers, width };
        term.validate()?;
        Ok(term)
    }

    pub fn goal(centers: Vec<Vec2>, width: f64) -> Result<Self> {
        let term = RewardTerm::Goal { centers, width };
        term.validate()?;
        Ok(term)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            RewardTerm::Classifier {
                bank,
                classifier,
                label,
                weight,
            } => {
                if *classifier >= bank.table.n_classifiers() {
                    return Err(Error::Config(format!("classifier index {classifier} out of range")));
                }
                if *label > 1 {
                    return Err(Error::Config("classifier label must be 0 or 1".into()));
                }
                if !(*weight > 0.0) || !weight.is_finite() {
                    return Err(Error::Config("reward weight must be positive".into()));
                }
            }
            RewardTerm::Obstacle { centers, width } | RewardTerm::Goal { centers, width } => {
                if centers.is_empty() || centers.iter().any(|c| !c.is_finite()) {
                    return Err(Error::Config("bump rewards need finite centers".into()));
                }
                if !(*width > 0.0) || !width.is_finite() {
                    return Err(Error::Config("bump width must be positive".into()));
                }
            }
        }
        Ok(())
    }

    pub fn value(&self, x: Vec2) -> f64 {
        self.value_grad(x).0
    }

    pub fn grad(&self, x: Vec2) -> Vec2 {
        self.value_grad(x).1
    }

    pub fn value_grad(&self, x: Vec2) -> (f64, Vec2) {
        match self {
            RewardTerm::Classifier {
                bank,
                classifier,
                label,
                weight,
            } => {
                let (lp, g) = bank.gm.label_log_prob_grad(&bank.table, *classifier, *label, x);
                (weight * lp, g * *weight)
            }
            RewardTerm::Obstacle { centers, width } => {
                let (v, g) = bump_sum(centers, *width, x);
                (-v, -g)
            }
            RewardTerm::Goal { centers, width } => bump_sum(centers, *width, x),
        }
    }
}

fn bump_sum(centers: &[Vec2], width: f64, x: Vec2) -> (f64, Vec2) {
    let s2 = width * width;
    centers.iter().fold((0.0, Vec2::ZERO), |(v, g), c| {
        let d = x - *c;
        let e = (-d.norm_sq() / s2).exp();
        (v + e, g + d * (-2.0 * e / s2))
    })
}

/// Ordered, non-empty list of reward terms.
#[derive(Debug, Clone)]
pub struct RewardSet {
    terms: Vec<RewardTerm>,
}

impl RewardSet {
    pub fn new(terms: Vec<RewardTerm>) -> Result<Self> {
        if terms.is_empty() {
            return Err(Error::Config("reward set needs at least one term".into()));
        }
        for t in &terms {
            t.validate()?;
        }
        Ok(Self { terms })
    }

    /// One classifier term per constrained entry of `target`.
    pub fn for_target(bank: Arc<ClassifierBank>, target: &ConstraintTarget, weight: f64) -> Result<Self> {
        target.check_feasible(&bank.table)?;
        let terms = target
            .constrained()
            .map(|(j, c)| RewardTerm::classifier(bank.clone(), j, c, weight))
            .collect::<Result<Vec<_>>>()?;
        Self::new(terms)
    }

    pub fn terms(&self) -> &[RewardTerm] {
        &self.terms
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn value(&self, x: Vec2) -> f64 {
        self.terms.iter().map(|t| t.value(x)).sum()
    }

    /// Total value and the ordered per-term gradients (not summed).
    pub fn composite_value_grad(&self, x: Vec2) -> (f64, Vec<Vec2>) {
        let mut total = 0.0;
        let grads = self
            .terms
            .iter()
            .map(|t| {
                let (v, g) = t.value_grad(x);
                total += v;
                g
            })
            .collect();
        (total, grads)
    }

    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            terms: order.iter().map(|&i| self.terms[i].clone()).collect(),
        }
    }
}

/// Config-file form of a reward term; classifier terms refer to the
/// benchmark label table by index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RewardSpec {
    Classifier {
        classifier: usize,
        label: u8,
        #[serde(default = "default_weight")]
        weight: f64,
    },
    Obstacle {
        centers: Vec<Vec2>,
        width: f64,
    },
    Goal {
        centers: Vec<Vec2>,
        width: f64,
    },
}

fn default_weight() -> f64 {
    1.0
}

impl RewardSpec {
    pub fn build(&self, bank: &Arc<ClassifierBank>) -> Result<RewardTerm> {
        match self {
            RewardSpec::Classifier { classifier, label, weight } => RewardTerm::classifier(bank.clone(), *classifier, *label, *weight),
            RewardSpec::Obstacle { centers, width } => RewardTerm::obstacle(centers.clone(), *width),
            RewardSpec::Goal { centers, width } => RewardTerm::goal(centers.clone(), *width),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{CounterRng, Stream};
    use rand::Rng;

    fn fd_grad(term: &RewardTerm, x: Vec2, h: f64) -> Vec2 {
        Vec2::new(
            (term.value(x + Vec2::new(h, 0.0)) - term.value(x - Vec2::new(h, 0.0))) / (2.0 * h),
            (term.value(x + Vec2::new(0.0, h)) - term.value(x - Vec2::new(0.0, h))) / (2.0 * h),
        )
    }

    #[test]
    fn obstacle_at_center() {
        let c = Vec2::new(1.0, -2.0);
        for w in [0.5, 2.0, 7.0] {
            let t = RewardTerm::obstacle(vec![c], w).unwrap();
            assert_eq!(t.value(c), -1.0);
            assert_eq!(t.grad(c), Vec2::ZERO);
        }
    }

    #[test]
    fn goal_one_width_away() {
        let g = Vec2::new(3.0, 4.0);
        let s = 2.0;
        let t = RewardTerm::goal(vec![g], s).unwrap();
        let x = g + Vec2::new(s, 0.0);
        assert!((t.value(x) - (-1.0f64).exp()).abs() < 1e-15);
        assert!((t.value(x) - 0.367879).abs() < 1e-6);
        let expected = Vec2::new(-(2.0 / s) * (-1.0f64).exp(), 0.0);
        assert!((t.grad(x) - expected).norm() < 1e-15);
    }

    #[test]
    fn classifier_term_near_zero_at_matching_mode() {
        let bank = ClassifierBank::benchmark();
        let t = RewardTerm::classifier(bank, 0, 1, 1.0).unwrap();
        assert!(t.value(Vec2::new(8.0, -8.0)) >= -1e-15);
    }

    #[test]
    fn invalid_terms_rejected() {
        let bank = ClassifierBank::benchmark();
        assert!(RewardTerm::classifier(bank.clone(), 5, 1, 1.0).is_err());
        assert!(RewardTerm::classifier(bank, 0, 1, 0.0).is_err());
        assert!(RewardTerm::goal(vec![Vec2::ZERO], -1.0).is_err());
        assert!(RewardTerm::obstacle(vec![], 1.0).is_err());
        assert!(RewardSet::new(vec![]).is_err());
    }

    #[test]
    fn composite_additivity() {
        let g = RewardTerm::goal(vec![Vec2::new(1.0, 1.0)], 1.5).unwrap();
        let single = RewardSet::new(vec![g.clone()]).unwrap();
        let x = Vec2::new(0.3, 0.2);
        let (v1, gs1) = single.composite_value_grad(x);
        assert_eq!(gs1.len(), 1);
        assert_eq!(v1, g.value(x));
        let double = RewardSet::new(vec![g.clone(), g]).unwrap();
        let (v2, gs2) = double.composite_value_grad(x);
        assert_eq!(v2, 2.0 * v1);
        assert_eq!(gs2[0], gs2[1]);
    }

    #[test]
    fn benchmark_pair_gradients_at_probe() {
        let bank = ClassifierBank::benchmark();
        let set = RewardSet::for_target(bank, &"[1,0]".parse().unwrap(), 1.0).unwrap();
        let x = Vec2::new(4.0, 1.0);
        let (_, gs) = set.composite_value_grad(x);
        for (term, g) in set.terms().iter().zip(&gs) {
            let fd = fd_grad(term, x, 1e-5);
            assert!((*g - fd).norm() / g.norm().max(1e-3) < 1e-6);
        }
    }

    #[test]
    fn all_terms_pass_finite_difference_suite() {
        let bank = ClassifierBank::benchmark();
        let mut terms: Vec<RewardTerm> = Vec::new();
        for j in 0..2 {
            for c in 0..2 {
                terms.push(RewardTerm::classifier(bank.clone(), j, c, 1.0).unwrap());
            }
        }
        terms.push(RewardTerm::obstacle(vec![Vec2::new(2.0, 2.0), Vec2::new(-5.0, 3.0)], 2.0).unwrap());
        terms.push(RewardTerm::goal(vec![Vec2::new(8.0, -8.0), Vec2::new(0.0, 10.0)], 7.0).unwrap());
        let rng = CounterRng::new(2024);
        for (ti, term) in terms.iter().enumerate() {
            for i in 0..1000 {
                let mut r = rng.at(Stream::Probe, (ti * 1000 + i) as u64);
                let x = Vec2::new(r.random_range(-15.0..15.0), r.random_range(-15.0..15.0));
                let g = term.grad(x);
                let fd = fd_grad(term, x, 1e-5);
                // absolute floor: bump gradients far from every center underflow
                let err = (g - fd).norm() / g.norm().max(1e-3);
                assert!(err < 1e-6, "term {ti} at {x:?}: {g:?} vs {fd:?}");
            }
        }
    }

    #[test]
    fn permutation_leaves_sum_and_total() {
        let bank = ClassifierBank::benchmark();
        let set = RewardSet::new(vec![
            RewardTerm::classifier(bank.clone(), 0, 1, 1.0).unwrap(),
            RewardTerm::classifier(bank, 1, 0, 2.0).unwrap(),
            RewardTerm::goal(vec![Vec2::new(1.0, 2.0)], 3.0).unwrap(),
        ])
        .unwrap();
        let perm = set.permuted(&[2, 0, 1]);
        let x = Vec2::new(5.0, -1.0);
        let (v, g) = set.composite_value_grad(x);
        let (vp, gp) = perm.composite_value_grad(x);
        assert!((v - vp).abs() < 1e-12);
        assert!((Vec2::sum(&g) - Vec2::sum(&gp)).norm() < 1e-12);
    }

    #[test]
    fn reward_spec_round_trip() {
        let specs = vec![
            RewardSpec::Classifier {
                classifier: 1,
                label: 0,
                weight: 1.0,
            },
            RewardSpec::Goal {
                centers: vec![Vec2::new(1.0, 2.0)],
                width: 2.0,
            },
        ];
        let json = serde_json::to_string(&specs).unwrap();
        let back: Vec<RewardSpec> = serde_json::from_str(&json).unwrap();
        assert_eq!(specs, back);
        let bank = ClassifierBank::benchmark();
        assert!(specs.iter().all(|s| s.build(&bank).is_ok()));
    }
}
