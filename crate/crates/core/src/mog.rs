//! The benchmark world: an isotropic Gaussian mixture target, a standard
//! Gaussian source, exact Bayes label posteriors, and closed-form oracles for
//! the independent-coupling linear-path flow between them.
//!
//! All mixture arithmetic is done in log space. Label posteriors and their
//! gradients are written so that they keep full relative precision deep in
//! the saturated regime (p close to 0 or 1), which the conflict score relies
//! on.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::nn::Fnv;
use crate::rng::{CounterRng, Stream};
use crate::{Error, Result, Vec2};

/// Lower clamp for probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-300;

pub fn log_prob_floor() -> f64 {
    PROB_FLOOR.ln()
}

/// `log Σ exp(v)`; `-inf` for an empty or all `-inf` input.
pub fn log_sum_exp(values: impl IntoIterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().into_iter().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + values.into_iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    means: Vec<Vec2>,
    weights: Vec<f64>,
    #[serde(rename = "sigma1")]
    sigma: f64,
}

impl GaussianMixture {
    pub fn new(means: Vec<Vec2>, weights: Vec<f64>, sigma: f64) -> Result<Self> {
        let gm = Self { means, weights, sigma };
        gm.validate()?;
        Ok(gm)
    }

    /// Three unit-variance modes at (8,8), (8,-8), (0,10), equal weights.
    pub fn benchmark() -> Self {
        Self {
            means: vec![Vec2::new(8.0, 8.0), Vec2::new(8.0, -8.0), Vec2::new(0.0, 10.0)],
            weights: vec![1.0 / 3.0; 3],
            sigma: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.means.is_empty() || self.means.len() != self.weights.len() {
            return Err(Error::Config("mixture needs one weight per mean".into()));
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::Config("mixture sigma1 must be positive".into()));
        }
        if self.weights.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::Config("mixture weights must be positive".into()));
        }
        if (self.weights.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::Config("mixture weights must sum to 1".into()));
        }
        if self.means.iter().any(|m| !m.is_finite()) {
            return Err(Error::Config("mixture means must be finite".into()));
        }
        Ok(())
    }

    pub fn means(&self) -> &[Vec2] {
        &self.means
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn n_modes(&self) -> usize {
        self.means.len()
    }

    pub fn mean(&self) -> Vec2 {
        self.means.iter().zip(&self.weights).fold(Vec2::ZERO, |acc, (m, w)| acc + *m * *w)
    }

    /// Stable digest recorded by fields trained on this mixture.
    pub fn descriptor_hash(&self) -> u64 {
        let mut h = Fnv::default();
        for (m, w) in self.means.iter().zip(&self.weights) {
            h.write_f64(m.x());
            h.write_f64(m.y());
            h.write_f64(*w);
        }
        h.write_f64(self.sigma);
        h.finish()
    }

    /// Draw number `index` of the stream keyed by `seed`.
    pub fn sample_at(&self, seed: u64, index: u64) -> Vec2 {
        let mut r = CounterRng::new(seed).at(Stream::MixtureSample, index);
        self.draw(&mut r)
    }

    fn draw(&self, r: &mut impl Rng) -> Vec2 {
        let u: f64 = r.random();
        let mut acc = 0.0;
        let mut k = self.means.len() - 1;
        for (i, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        let zx: f64 = StandardNormal.sample(r);
        let zy: f64 = StandardNormal.sample(r);
        self.means[k] + Vec2::new(zx, zy) * self.sigma
    }

    pub fn sample(&self, n: usize, seed: u64) -> Result<Vec<Vec2>> {
        if n == 0 {
            return Err(Error::Config("sample count must be >= 1".into()));
        }
        Ok((0..n as u64).map(|i| self.sample_at(seed, i)).collect())
    }

    /// `log w_k + log N(x; μ_k, σ²I)` for every component.
    pub fn log_components(&self, x: Vec2) -> Vec<f64> {
        let s2 = self.sigma * self.sigma;
        let norm = -(2.0 * std::f64::consts::PI * s2).ln();
        self.means
            .iter()
            .zip(&self.weights)
            .map(|(m, w)| w.ln() + norm - (x - *m).norm_sq() / (2.0 * s2))
            .collect()
    }

    pub fn logpdf(&self, x: Vec2) -> f64 {
        log_sum_exp(self.log_components(x))
    }

    /// Log density of the interpolant `x_t = (1-t) x0 + t x1` at time `t`.
    pub fn log_density_t(&self, x: Vec2, t: f64) -> f64 {
        let a2 = (1.0 - t).powi(2) + t * t * self.sigma * self.sigma;
        let norm = -(2.0 * std::f64::consts::PI * a2).ln();
        log_sum_exp(
            self.means
                .iter()
                .zip(&self.weights)
                .map(|(m, w)| w.ln() + norm - (x - *m * t).norm_sq() / (2.0 * a2)),
        )
    }

    /// Draw number `index` of the interpolant at time `t`.
    pub fn sample_interpolant_at(&self, seed: u64, index: u64, t: f64) -> Vec2 {
        let mut r = CounterRng::new(seed).at(Stream::Probe, index);
        let x1 = self.draw(&mut r);
        let x0 = Vec2::new(StandardNormal.sample(&mut r), StandardNormal.sample(&mut r));
        x0 * (1.0 - t) + x1 * t
    }

    /// Posterior responsibilities of each component given `x_t` at time `t`,
    /// along with `a_t²`.
    fn path_responsibilities(&self, x: Vec2, t: f64) -> Result<(Vec<f64>, f64)> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain(format!("time {t} outside [0, 1]")));
        }
        let a2 = (1.0 - t).powi(2) + t * t * self.sigma * self.sigma;
        let logits: Vec<f64> = self
            .means
            .iter()
            .zip(&self.weights)
            .map(|(m, w)| w.ln() - (x - *m * t).norm_sq() / (2.0 * a2))
            .collect();
        let z = log_sum_exp(logits.iter().copied());
        Ok((logits.iter().map(|l| (l - z).exp()).collect(), a2))
    }

    /// `E[x1 | x_t = x]` under independent coupling and the linear path.
    pub fn oracle_terminal_mean(&self, x: Vec2, t: f64) -> Result<Vec2> {
        let (rho, a2) = self.path_responsibilities(x, t)?;
        let s2 = self.sigma * self.sigma;
        Ok(self
            .means
            .iter()
            .zip(&rho)
            .fold(Vec2::ZERO, |acc, (m, r)| acc + (*m + (x - *m * t) * (t * s2 / a2)) * *r))
    }

    /// `E[x0 | x_t = x]`, the source half of the marginal velocity.
    pub fn oracle_source_mean(&self, x: Vec2, t: f64) -> Result<Vec2> {
        let (rho, a2) = self.path_responsibilities(x, t)?;
        Ok(self
            .means
            .iter()
            .zip(&rho)
            .fold(Vec2::ZERO, |acc, (m, r)| acc + (x - *m * t) * ((1.0 - t) / a2 * *r)))
    }

    /// Optimal marginal velocity `E[x1 - x0 | x_t = x]`.
    pub fn oracle_velocity(&self, x: Vec2, t: f64) -> Result<Vec2> {
        let (rho, a2) = self.path_responsibilities(x, t)?;
        let s2 = self.sigma * self.sigma;
        Ok(self.means.iter().zip(&rho).fold(Vec2::ZERO, |acc, (m, r)| {
            let d = x - *m * t;
            acc + (*m + d * (t * s2 / a2) - d * ((1.0 - t) / a2)) * *r
        }))
    }

    /// `log p(y_j = c | x)` and its gradient in `x`, floored at [`PROB_FLOOR`].
    ///
    /// The gradient is evaluated as `p(y_j ≠ c | x) (E_c[μ] - E_¬c[μ]) / σ²`,
    /// where the expectations use responsibilities restricted to modes with
    /// and without label `c`. This form has no cancellation when `p → 1`.
    pub fn label_log_prob_grad(&self, table: &LabelTable, j: usize, c: u8, x: Vec2) -> (f64, Vec2) {
        let lc = self.log_components(x);
        let labels = table.row(j);
        let lse_where = |want: bool| log_sum_exp(lc.iter().zip(labels).filter(|(_, &l)| (l == c) == want).map(|(v, _)| *v));
        let (l_in, l_out) = (lse_where(true), lse_where(false));
        // log p = -softplus(l_out - l_in), accurate at both saturations
        let d = l_out - l_in;
        let log_p = -softplus(d);
        if log_p < log_prob_floor() || l_in == f64::NEG_INFINITY {
            return (log_prob_floor(), Vec2::ZERO);
        }
        if l_out == f64::NEG_INFINITY {
            return (0.0, Vec2::ZERO);
        }
        let mean_where = |want: bool, lse: f64| {
            lc.iter()
                .zip(labels)
                .zip(&self.means)
                .filter(|((_, &l), _)| (l == c) == want)
                .fold(Vec2::ZERO, |acc, ((v, _), m)| acc + *m * (v - lse).exp())
        };
        let p_out = 1.0 / (1.0 + (-d).exp());
        let s2 = self.sigma * self.sigma;
        let grad = (mean_where(true, l_in) - mean_where(false, l_out)) * (p_out / s2);
        (log_p, grad)
    }

    /// Exact Bayes posterior `p(y_j = 1 | x)`.
    pub fn bayes_prob(&self, table: &LabelTable, j: usize, x: Vec2) -> f64 {
        self.label_prob(table, j, 1, x)
    }

    /// `p(y_j = c | x)` without flooring.
    pub fn label_prob(&self, table: &LabelTable, j: usize, c: u8, x: Vec2) -> f64 {
        let lc = self.log_components(x);
        let labels = table.row(j);
        let lse_where = |want: bool| log_sum_exp(lc.iter().zip(labels).filter(|(_, &l)| (l == c) == want).map(|(v, _)| *v));
        let (l_in, l_out) = (lse_where(true), lse_where(false));
        if l_in == f64::NEG_INFINITY {
            return 0.0;
        }
        // the smaller class probability is computed directly and the larger
        // as its complement, so p(c) + p(not c) == 1 holds exactly
        let d = l_out - l_in;
        let small = 1.0 / (1.0 + d.abs().exp());
        if d > 0.0 {
            small
        } else {
            1.0 - small
        }
    }
}

/// Binary labels of every mode under every classifier, `labels[j][k]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LabelTable {
    labels: Vec<Vec<u8>>,
}

fn softplus(d: f64) -> f64 {
    if d > 0.0 {
        d + (-d).exp().ln_1p()
    } else {
        d.exp().ln_1p()
    }
}

impl LabelTable {
    pub fn new(labels: Vec<Vec<u8>>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Config("label table needs at least one classifier".into()));
        }
        let k = labels[0].len();
        if labels.iter().any(|row| row.len() != k) {
            return Err(Error::Config("label table rows must have equal length".into()));
        }
        if labels.iter().flatten().any(|&l| l > 1) {
            return Err(Error::Config("labels must be 0 or 1".into()));
        }
        Ok(Self { labels })
    }

    /// μ1 → (1,1), μ2 → (1,0), μ3 → (0,0).
    pub fn benchmark() -> Self {
        Self {
            labels: vec![vec![1, 1, 0], vec![1, 0, 0]],
        }
    }

    pub fn n_classifiers(&self) -> usize {
        self.labels.len()
    }

    pub fn n_modes(&self) -> usize {
        self.labels[0].len()
    }

    pub fn row(&self, j: usize) -> &[u8] {
        &self.labels[j]
    }

    pub fn check_against(&self, gm: &GaussianMixture) -> Result<()> {
        if self.n_modes() != gm.n_modes() {
            return Err(Error::Config(format!(
                "label table covers {} modes, mixture has {}",
                self.n_modes(),
                gm.n_modes()
            )));
        }
        Ok(())
    }

    /// Modes whose label vector agrees with every constrained entry.
    pub fn matching_modes(&self, target: &ConstraintTarget) -> Vec<usize> {
        (0..self.n_modes())
            .filter(|&k| target.entries().iter().enumerate().all(|(j, c)| c.is_none_or(|c| self.labels[j][k] == c)))
            .collect()
    }
}

/// Per-classifier target label; `None` leaves that classifier unconstrained.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ConstraintTarget(Vec<Option<u8>>);

impl ConstraintTarget {
    pub fn new(entries: Vec<Option<u8>>) -> Result<Self> {
        if entries.iter().all(Option::is_none) {
            return Err(Error::Config("target must constrain at least one classifier".into()));
        }
        if entries.iter().flatten().any(|&c| c > 1) {
            return Err(Error::Config("target labels must be 0 or 1".into()));
        }
        Ok(Self(entries))
    }

    pub fn entries(&self) -> &[Option<u8>] {
        &self.0
    }

    pub fn constrained(&self) -> impl Iterator<Item = (usize, u8)> + '_ {
        self.0.iter().enumerate().filter_map(|(j, c)| c.map(|c| (j, c)))
    }

    pub fn check_feasible(&self, table: &LabelTable) -> Result<Vec<usize>> {
        if self.0.len() != table.n_classifiers() {
            return Err(Error::Config(format!(
                "target {self} has {} entries for {} classifiers",
                self.0.len(),
                table.n_classifiers()
            )));
        }
        let modes = table.matching_modes(self);
        if modes.is_empty() {
            return Err(Error::InfeasibleTarget {
                target: self.to_string(),
                reason: "no mode carries these labels".into(),
            });
        }
        Ok(modes)
    }
}

impl fmt::Display for ConstraintTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|c| c.map_or_else(|| "_".to_string(), |c| c.to_string())).collect();
        write!(f, "[{}]", parts.join(","))
    }
}

impl FromStr for ConstraintTarget {
    type Err = Error;

    /// Accepts `[1,0]`, `[1,_]`, `1,0`; `_`, `-`, `*` and `∅` mean unconstrained.
    fn from_str(s: &str) -> Result<Self> {
        let inner = s.trim().trim_start_matches('[').trim_end_matches(']');
        let entries = inner
            .split(',')
            .map(|p| match p.trim() {
                "0" => Ok(Some(0)),
                "1" => Ok(Some(1)),
                "_" | "-" | "*" | "∅" => Ok(None),
                other => Err(Error::Parse(format!("bad target entry {other:?} in {s:?}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        ConstraintTarget::new(entries)
    }
}

impl Serialize for ConstraintTarget {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ConstraintTarget {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Draws from `p1` tilted by `Π_j p(y_j = c_j | x)`, by accept/reject.
pub fn rejection_sample_posterior(gm: &GaussianMixture, table: &LabelTable, target: &ConstraintTarget, n: usize, seed: u64) -> Result<Vec<Vec2>> {
    if n == 0 {
        return Err(Error::Config("sample count must be >= 1".into()));
    }
    table.check_against(gm)?;
    target.check_feasible(table)?;
    const BUDGET_CHECK: u64 = 10_000_000;
    let rng = CounterRng::new(seed);
    let mut out = Vec::with_capacity(n);
    let mut draws = 0u64;
    while out.len() < n {
        let mut r = rng.at(Stream::Rejection, draws);
        draws += 1;
        let x = gm.draw(&mut r);
        let accept: f64 = target.constrained().map(|(j, c)| gm.label_prob(table, j, c, x)).product();
        let u: f64 = r.random();
        if u < accept {
            out.push(x);
        }
        if draws >= BUDGET_CHECK && (out.len() as f64) < 1e-6 * draws as f64 {
            return Err(Error::InfeasibleTarget {
                target: target.to_string(),
                reason: format!("acceptance rate below 1e-6 after {draws} draws"),
            });
        }
    }
    Ok(out)
}

/// Independent `N(0, I)` source draw `index`.
pub fn source_sample_at(seed: u64, index: u64) -> Vec2 {
    let mut r = CounterRng::new(seed).at(Stream::Source, index);
    Vec2::new(StandardNormal.sample(&mut r), StandardNormal.sample(&mut r))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(s: &str) -> ConstraintTarget {
        s.parse().unwrap()
    }

    #[test]
    fn sample_mean_concentrates() {
        let gm = GaussianMixture::new(vec![Vec2::ZERO], vec![1.0], 1.0).unwrap();
        let xs = gm.sample(50_000, 3).unwrap();
        let m = Vec2::sum(&xs) * (1.0 / xs.len() as f64);
        assert!(m.x().abs() < 0.02 && m.y().abs() < 0.02, "{m:?}");
        assert!(gm.sample(0, 1).is_err());
        assert_eq!(gm.sample(100, 9).unwrap(), gm.sample(100, 9).unwrap());
    }

    #[test]
    fn logpdf_at_mode_matches_dominant_term() {
        let gm = GaussianMixture::benchmark();
        let brute: f64 = gm
            .means()
            .iter()
            .map(|m| (1.0 / 3.0) / (2.0 * std::f64::consts::PI) * (-(gm.means()[0] - *m).norm_sq() / 2.0).exp())
            .sum::<f64>()
            .ln();
        let lp = gm.logpdf(gm.means()[0]);
        assert!((lp - brute).abs() < 1e-12);
        assert!((lp - (-(3.0f64).ln() - (2.0 * std::f64::consts::PI).ln())).abs() < 1e-12);
        assert!((lp + 2.9365).abs() < 1e-3);
    }

    #[test]
    fn logpdf_single_component_peak_and_bound() {
        let gm = GaussianMixture::new(vec![Vec2::new(1.0, 2.0)], vec![1.0], 1.5).unwrap();
        let peak = -(2.0 * std::f64::consts::PI * 2.25f64).ln();
        assert!((gm.logpdf(Vec2::new(1.0, 2.0)) - peak).abs() < 1e-14);
        let bench = GaussianMixture::benchmark();
        let bench_peak = bench.means().iter().map(|m| bench.logpdf(*m)).fold(f64::MIN, f64::max);
        for i in 0..=40 {
            for j in 0..=40 {
                let x = Vec2::new(-20.0 + i as f64, -20.0 + j as f64);
                let lp = bench.logpdf(x);
                assert!(lp.is_finite() && lp <= bench_peak + 1e-12);
            }
        }
    }

    #[test]
    fn bayes_prob_dominance_at_mu2() {
        let gm = GaussianMixture::benchmark();
        let tab = LabelTable::benchmark();
        let mu2 = Vec2::new(8.0, -8.0);
        assert!(gm.label_log_prob_grad(&tab, 0, 0, mu2).0 < 1e-20f64.ln());
        assert!(gm.bayes_prob(&tab, 0, mu2) >= 1.0 - f64::EPSILON);
        assert!(gm.bayes_prob(&tab, 1, mu2) < 1e-20);
        for x in [mu2, Vec2::new(3.0, 4.0), Vec2::new(-7.0, 1.5)] {
            for j in 0..2 {
                let (p1, p0) = (gm.label_prob(&tab, j, 1, x), gm.label_prob(&tab, j, 0, x));
                assert_eq!(p1 + p0, 1.0);
            }
        }
    }

    #[test]
    fn bayes_prob_symmetric_midpoint() {
        let gm = GaussianMixture::new(vec![Vec2::new(-3.0, 0.0), Vec2::new(3.0, 0.0)], vec![0.5, 0.5], 1.0).unwrap();
        let tab = LabelTable::new(vec![vec![1, 0]]).unwrap();
        assert!((gm.bayes_prob(&tab, 0, Vec2::new(0.0, 5.0)) - 0.5).abs() < 1e-6);
    }

    #[test]
    fn bayes_prob_shift_invariant() {
        // Same mixture, all components shifted by a common constant in log
        // space (different common sigma normalizer, equal weights rescaled).
        let gm = GaussianMixture::benchmark();
        let tab = LabelTable::benchmark();
        let x = Vec2::new(4.0, 1.0);
        let lc = gm.log_components(x);
        let shifted: Vec<f64> = lc.iter().map(|v| v + 123.4).collect();
        let p = |l: &[f64]| {
            let on = log_sum_exp(l.iter().zip(tab.row(0)).filter(|(_, &k)| k == 1).map(|(v, _)| *v));
            (on - log_sum_exp(l.iter().copied())).exp()
        };
        assert!((p(&lc) - p(&shifted)).abs() < 1e-12);
        assert!((p(&lc) - gm.bayes_prob(&tab, 0, x)).abs() < 1e-12);
    }

    #[test]
    fn label_grad_matches_finite_differences() {
        let gm = GaussianMixture::benchmark();
        let tab = LabelTable::benchmark();
        let h = 1e-5;
        for (i, x) in [Vec2::new(4.0, 1.0), Vec2::new(2.0, 9.0), Vec2::new(8.5, -7.0), Vec2::new(-3.0, -3.0)]
            .into_iter()
            .enumerate()
        {
            for j in 0..2 {
                for c in 0..2u8 {
                    let (_, g) = gm.label_log_prob_grad(&tab, j, c, x);
                    let f = |y: Vec2| gm.label_log_prob_grad(&tab, j, c, y).0;
                    let fd = Vec2::new(
                        (f(x + Vec2::new(h, 0.0)) - f(x - Vec2::new(h, 0.0))) / (2.0 * h),
                        (f(x + Vec2::new(0.0, h)) - f(x - Vec2::new(0.0, h))) / (2.0 * h),
                    );
                    let err = (g - fd).norm() / g.norm().max(1e-3);
                    assert!(err < 1e-6, "case {i} j{j} c{c}: {g:?} vs {fd:?}");
                }
            }
        }
    }

    #[test]
    fn saturated_gradient_keeps_direction() {
        // At μ1, log p(y1=1) is saturated: the gradient is tiny but still
        // points away from the only label-0 mode μ3.
        let gm = GaussianMixture::benchmark();
        let tab = LabelTable::benchmark();
        let mu1 = gm.means()[0];
        let (lp, g) = gm.label_log_prob_grad(&tab, 0, 1, mu1);
        assert!(lp > -1e-12);
        assert!(g.norm() > 0.0 && g.norm() < 1e-10);
        let away = mu1 - gm.means()[2];
        assert!(g.dot(away) / (g.norm() * away.norm()) > 0.99);
    }

    #[test]
    fn oracle_velocity_boundaries() {
        let gm = GaussianMixture::benchmark();
        let m = gm.mean();
        assert!((m - Vec2::new(16.0 / 3.0, 10.0 / 3.0)).norm() < 1e-12);
        for x in [Vec2::ZERO, Vec2::new(3.0, -2.0), Vec2::new(-9.0, 12.0)] {
            let v0 = gm.oracle_velocity(x, 0.0).unwrap();
            assert!((v0 - (m - x)).norm() < 1e-9);
            let v1 = gm.oracle_velocity(x, 1.0).unwrap();
            assert!((v1 - x).norm() < 1e-9);
            assert!((gm.oracle_terminal_mean(x, 1.0).unwrap() - x).norm() < 1e-9);
            assert!((gm.oracle_terminal_mean(x, 0.0).unwrap() - m).norm() < 1e-9);
        }
        assert!(matches!(gm.oracle_velocity(Vec2::ZERO, 1.5), Err(Error::Domain(_))));
        assert!(gm.oracle_terminal_mean(Vec2::ZERO, -0.1).is_err());
    }

    #[test]
    fn oracle_velocity_splits_into_terminal_and_source_means() {
        let gm = GaussianMixture::benchmark();
        let rng = CounterRng::new(5);
        for i in 0..200 {
            let mut r = rng.at(Stream::Probe, i);
            let x = Vec2::new(r.random_range(-12.0..14.0), r.random_range(-12.0..14.0));
            let t: f64 = r.random_range(0.0..1.0);
            let v = gm.oracle_velocity(x, t).unwrap();
            let d = gm.oracle_terminal_mean(x, t).unwrap() - gm.oracle_source_mean(x, t).unwrap();
            assert!((v - d).norm() <= 1e-12 * (1.0 + v.norm()));
        }
    }

    #[test]
    fn oracle_velocity_matches_monte_carlo() {
        // Bin interpolant draws near a probe point and average x1 - x0.
        let gm = GaussianMixture::benchmark();
        let probe = Vec2::new(3.0, 2.0);
        let t = 0.4;
        let rng = CounterRng::new(77);
        let (mut sum, mut sq, mut count) = (Vec2::ZERO, Vec2::ZERO, 0usize);
        for i in 0..1_000_000u64 {
            let mut r = rng.at(Stream::Probe, i);
            let x1 = gm.draw(&mut r);
            let x0 = Vec2::new(StandardNormal.sample(&mut r), StandardNormal.sample(&mut r));
            let xt = x0 * (1.0 - t) + x1 * t;
            if (xt - probe).norm() < 0.15 {
                let u = x1 - x0;
                sum += u;
                sq += Vec2::new(u.x() * u.x(), u.y() * u.y());
                count += 1;
            }
        }
        assert!(count > 500, "too few binned samples: {count}");
        let n = count as f64;
        let mean = sum * (1.0 / n);
        let var = Vec2::new(sq.x() / n - mean.x().powi(2), sq.y() / n - mean.y().powi(2));
        let v = gm.oracle_velocity(probe, t).unwrap();
        for (a, (b, s2)) in v.0.iter().zip(mean.0.iter().zip(var.0)) {
            let se = (s2 / n).sqrt();
            // bin width bias is small relative to the sampling error here
            assert!((a - b).abs() < 3.0 * se + 0.05, "oracle {a} vs mc {b} (se {se})");
        }
    }

    #[test]
    fn source_center_velocity_equals_mode_mean() {
        let gm = GaussianMixture::benchmark();
        let v = gm.oracle_velocity(Vec2::ZERO, 0.0).unwrap();
        assert!((v - Vec2::new(16.0 / 3.0, 10.0 / 3.0)).norm() < 1e-12);
    }

    #[test]
    fn targets_parse_and_match_modes() {
        let tab = LabelTable::benchmark();
        assert_eq!(tab.matching_modes(&t("[1,0]")), vec![1]);
        assert_eq!(tab.matching_modes(&t("[1,1]")), vec![0]);
        assert_eq!(tab.matching_modes(&t("[0,0]")), vec![2]);
        assert_eq!(tab.matching_modes(&t("[1,_]")), vec![0, 1]);
        assert!(tab.matching_modes(&t("[0,1]")).is_empty());
        assert!(t("[0,1]").check_feasible(&tab).is_err());
        assert!("[_,_]".parse::<ConstraintTarget>().is_err());
        assert_eq!(t("[1,∅]").to_string(), "[1,_]");
    }

    #[test]
    fn rejection_posterior_concentrates_on_matching_mode() {
        let gm = GaussianMixture::benchmark();
        let tab = LabelTable::benchmark();
        let xs = rejection_sample_posterior(&gm, &tab, &t("[1,0]"), 4000, 1).unwrap();
        let mu2 = gm.means()[1];
        let near = xs.iter().filter(|x| (**x - mu2).norm() <= 4.0).count();
        assert!(near as f64 >= 0.99 * xs.len() as f64);
        let within2 = xs.iter().filter(|x| (**x - mu2).norm() <= 2.0).count() as f64 / xs.len() as f64;
        assert!((within2 - (1.0 - (-2.0f64).exp())).abs() < 0.025, "{within2}");
        let ys = rejection_sample_posterior(&gm, &tab, &t("[1,1]"), 2000, 2).unwrap();
        let m = Vec2::sum(&ys) * (1.0 / ys.len() as f64);
        assert!((m - gm.means()[0]).norm() < 0.2);
        assert!(rejection_sample_posterior(&gm, &tab, &t("[0,1]"), 10, 1).is_err());
    }
}
