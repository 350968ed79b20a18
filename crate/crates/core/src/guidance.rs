//! Per-step guidance: terminal prediction, per-reward gradients, conflict
//! score, energy dissipation, and the sum / PCGrad / CAR composition rules.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cfm::VelocityModel;
use crate::rewards::RewardSet;
use crate::rng::{CounterRng, Stream};
use crate::{Error, Result, Vec2};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Engine {
    None,
    CovG,
    Pcgrad,
    Car,
}

impl Engine {
    pub fn name(self) -> &'static str {
        match self {
            Engine::None => "none",
            Engine::CovG => "cov_g",
            Engine::Pcgrad => "pcgrad",
            Engine::Car => "car",
        }
    }
}

impl std::str::FromStr for Engine {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Engine::None),
            "cov_g" => Ok(Engine::CovG),
            "pcgrad" => Ok(Engine::Pcgrad),
            "car" => Ok(Engine::Car),
            other => Err(Error::Config(format!("unknown guidance engine {other:?}"))),
        }
    }
}

/// How the conflict score is computed from the per-reward gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ConflictMode {
    /// `w_raw = 1 - mean_{j<k} ⟨g_j, g_k⟩ / (‖g_j‖‖g_k‖ + ε)`; gradients far
    /// below `ε` read as orthogonal.
    Literal,
    /// As `Literal` but on unit directions, `⟨u_j, u_k⟩ / (1 + ε)`, with a
    /// zero gradient counted as aligned. Exactly scale-free.
    #[default]
    Normalized,
    /// `w_raw = 2 ΔE / (Σ‖g_j‖)²`. Agrees with `Normalized` for two
    /// gradients of equal length and discounts pairs where one reward's
    /// gradient is negligible next to the other's.
    Energy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    pub engine: Engine,
    pub scale: f64,
    pub conflict_threshold: f64,
    pub clip_norm: f64,
    pub epsilon_cos: f64,
    pub conflict_mode: ConflictMode,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            engine: Engine::CovG,
            scale: 1.0,
            conflict_threshold: 0.5,
            clip_norm: 10.0,
            epsilon_cos: 1e-8,
            conflict_mode: ConflictMode::Normalized,
        }
    }
}

impl GuidanceConfig {
    pub fn with_engine(engine: Engine) -> Self {
        Self { engine, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(Error::Config("guidance scale must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.conflict_threshold) {
            return Err(Error::Config("conflict threshold must lie in [0, 1]".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        if !(self.epsilon_cos > 0.0) {
            return Err(Error::Config("epsilon_cos must be positive".into()));
        }
        Ok(())
    }
}

/// Everything recorded about one guidance evaluation.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub w_raw: f64,
    pub w: f64,
    pub delta_e: f64,
    pub mean_pairwise_cos: f64,
    pub per_term_grad_norms: Vec<f64>,
}

impl StepDiagnostics {
    /// Diagnostics of a step where no rewards were evaluated.
    pub fn unguided() -> Self {
        Self {
            mean_pairwise_cos: 1.0,
            ..Self::default()
        }
    }

    pub fn from_grads(grads: &[Vec2], eps: f64, mode: ConflictMode) -> Self {
        let (w_raw, w) = conflict_score_with(grads, eps, mode);
        Self {
            w_raw,
            w,
            delta_e: energy_dissipation(grads),
            mean_pairwise_cos: mean_pairwise_cos(grads, eps, mode),
            per_term_grad_norms: grads.iter().map(|g| g.norm()).collect(),
        }
    }
}

/// A learned correction field, evaluated before clipping.
pub trait ValueGradient: Sync {
    fn grad_x(&self, x: Vec2, t: f64) -> Result<Vec2>;
}

/// One-step Euler extrapolation `x + (1 - t) v(x, t)`.
pub fn predict_terminal(field: &dyn VelocityModel, x: Vec2, t: f64) -> Result<Vec2> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("time {t} outside [0, 1]")));
    }
    if t == 1.0 {
        return Ok(x);
    }
    Ok(x + field.velocity(x, t)? * (1.0 - t))
}

/// `s ∇r_j(x̂1)` for every term, evaluated at the predicted terminal.
pub fn per_reward_guidance(field: &dyn VelocityModel, set: &RewardSet, x: Vec2, t: f64, s: f64) -> Result<Vec<Vec2>> {
    let x1 = predict_terminal(field, x, t)?;
    Ok(set.terms().iter().map(|term| term.grad(x1) * s).collect())
}

/// Mean of the pairwise cosines over all `j < k`; 1 when `G < 2`. The
/// `Energy` mode reports the `Normalized` cosines.
pub fn mean_pairwise_cos(grads: &[Vec2], eps: f64, mode: ConflictMode) -> f64 {
    let g = grads.len();
    if g < 2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for j in 0..g {
        for k in j + 1..g {
            sum += pair_cos(grads[j], grads[k], eps, mode);
        }
    }
    sum / (g * (g - 1) / 2) as f64
}

fn pair_cos(a: Vec2, b: Vec2, eps: f64, mode: ConflictMode) -> f64 {
    match mode {
        ConflictMode::Literal => a.dot(b) / (a.norm() * b.norm() + eps),
        ConflictMode::Normalized | ConflictMode::Energy => {
            let (na, nb) = (a.norm(), b.norm());
            if na == 0.0 || nb == 0.0 {
                return 1.0 / (1.0 + eps);
            }
            (a * (1.0 / na)).dot(b * (1.0 / nb)) / (1.0 + eps)
        }
    }
}

fn map_conflict(w_raw: f64, g: usize) -> f64 {
    if g < 2 {
        0.0
    } else {
        (w_raw / 2.0).clamp(0.0, 1.0)
    }
}

/// `(w_raw, w)` with `w_raw = 1 - mean_{j<k} ⟨g_j, g_k⟩ / (‖g_j‖‖g_k‖ + ε)`
/// and `w = clamp(w_raw / 2, 0, 1)`; both zero for fewer than two
/// gradients.
pub fn conflict_score(grads: &[Vec2], eps: f64) -> (f64, f64) {
    conflict_score_with(grads, eps, ConflictMode::Literal)
}

pub fn conflict_score_with(grads: &[Vec2], eps: f64, mode: ConflictMode) -> (f64, f64) {
    if grads.len() < 2 {
        return (0.0, 0.0);
    }
    let w_raw = match mode {
        ConflictMode::Literal | ConflictMode::Normalized => 1.0 - mean_pairwise_cos(grads, eps, mode),
        ConflictMode::Energy => {
            let total: f64 = grads.iter().map(|g| g.norm()).sum();
            if total == 0.0 {
                0.0
            } else {
                // normalizing first keeps tiny gradients clear of underflow
                let unit: Vec<Vec2> = grads.iter().map(|g| *g * (1.0 / total)).collect();
                (2.0 * energy_dissipation(&unit)).min(2.0)
            }
        }
    };
    (w_raw, map_conflict(w_raw, grads.len()))
}

/// `ΔE = 2 Σ_{j<k} (‖g_j‖‖g_k‖ - ⟨g_j, g_k⟩)`, each pair clamped at zero.
pub fn energy_dissipation(grads: &[Vec2]) -> f64 {
    let mut total = 0.0;
    for j in 0..grads.len() {
        for k in j + 1..grads.len() {
            total += (grads[j].norm() * grads[k].norm() - grads[j].dot(grads[k])).max(0.0);
        }
    }
    2.0 * total
}

/// `ΔE = (Σ‖g_j‖)² - ‖Σ g_j‖²`, the norm-deficit form.
pub fn energy_dissipation_norms(grads: &[Vec2]) -> f64 {
    let sum_norms: f64 = grads.iter().map(|g| g.norm()).sum();
    sum_norms * sum_norms - Vec2::sum(grads).norm_sq()
}

pub fn compose_sum(grads: &[Vec2]) -> Vec2 {
    Vec2::sum(grads)
}

/// Gradient surgery: every `g_j` is projected off each conflicting `g_k`
/// (in a random order of `k`), then the projected gradients are summed.
pub fn compose_pcgrad(grads: &[Vec2], rng: &mut impl Rng) -> Vec2 {
    let mut total = Vec2::ZERO;
    let mut order: Vec<usize> = (0..grads.len()).collect();
    for j in 0..grads.len() {
        let mut gj = grads[j];
        order.shuffle(rng);
        for &k in &order {
            if k == j {
                continue;
            }
            let gk = grads[k];
            let nk = gk.norm_sq();
            if nk == 0.0 {
                continue;
            }
            let d = gj.dot(gk);
            if d < 0.0 {
                gj = gj - gk * (d / nk);
            }
        }
        total += gj;
    }
    total
}

/// `(1 - w) g_approx + w g_psi`.
pub fn compose_car(g_approx: Vec2, g_psi: Vec2, w: f64) -> Vec2 {
    g_approx * (1.0 - w) + g_psi * w
}

/// Full guidance evaluation at `(x, t)`. `key` seeds the per-call PCGrad
/// ordering.
pub fn guidance_step(
    field: &dyn VelocityModel,
    set: &RewardSet,
    cfg: &GuidanceConfig,
    value: Option<&dyn ValueGradient>,
    x: Vec2,
    t: f64,
    key: u64,
) -> Result<(Vec2, StepDiagnostics)> {
    if cfg.engine == Engine::None {
        return Ok((Vec2::ZERO, StepDiagnostics::unguided()));
    }
    if cfg.engine == Engine::Car && value.is_none() {
        return Err(Error::Config("car guidance needs a value function".into()));
    }
    let grads = per_reward_guidance(field, set, x, t, cfg.scale)?;
    let diag = StepDiagnostics::from_grads(&grads, cfg.epsilon_cos, cfg.conflict_mode);
    let g = match cfg.engine {
        Engine::None => unreachable!(),
        Engine::CovG => compose_sum(&grads),
        Engine::Pcgrad => {
            let mut rng = CounterRng::new(key).at(Stream::PcGrad, 0);
            compose_pcgrad(&grads, &mut rng)
        }
        Engine::Car => {
            let g_sum = compose_sum(&grads);
            if diag.w == 0.0 {
                g_sum
            } else {
                let g_psi = value.expect("checked above").grad_x(x, t)?.clip_norm(cfg.clip_norm);
                compose_car(g_sum, g_psi, diag.w)
            }
        }
    };
    Ok((g, diag))
}
