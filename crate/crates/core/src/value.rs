//! The learned CAR correction: rollouts under the current guided dynamics,
//! the conflict-masked terminal value regression loss, and the training
//! loop with early stopping.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cfm::VelocityModel;
use crate::guidance::{per_reward_guidance, Engine, GuidanceConfig, StepDiagnostics, ValueGradient};
use crate::mog::source_sample_at;
use crate::nn::{Activation, Adam, AdamConfig, Checkpoint, NetworkParams, NetworkSpec, ParamGrads, Tape};
use crate::rewards::RewardSet;
use crate::rng::{CounterRng, Stream};
use crate::sampler::euler_sample;
use crate::{Error, Result, Vec2};

const CHECKPOINT_KIND: &str = "value_function";

/// Scalar network `V_ψ(x, t)` whose input gradient is the correction field.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueFunction {
    params: NetworkParams,
    pub clip_norm: f64,
}

impl ValueFunction {
    pub fn new(params: NetworkParams, clip_norm: f64) -> Result<Self> {
        let spec = params.spec();
        if spec.input_dim != 3 {
            return Err(Error::Dimension {
                what: "value network input",
                expected: 3,
                got: spec.input_dim,
            });
        }
        if spec.output_dim != 1 {
            return Err(Error::Dimension {
                what: "value network output",
                expected: 1,
                got: spec.output_dim,
            });
        }
        if !(clip_norm > 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        Ok(Self { params, clip_norm })
    }

    pub fn init(spec: NetworkSpec, clip_norm: f64) -> Result<Self> {
        Self::new(NetworkParams::init(spec)?, clip_norm)
    }

    pub fn params(&self) -> &NetworkParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut NetworkParams {
        &mut self.params
    }

    pub fn value(&self, x: Vec2, t: f64) -> Result<f64> {
        Ok(self.params.forward(&[x.x(), x.y(), t])?[0])
    }

    /// `(V, ∇_x V)` before clipping.
    pub fn value_and_grad(&self, x: Vec2, t: f64) -> Result<(f64, Vec2)> {
        let (out, g) = self.params.forward_input_grad(&[x.x(), x.y(), t], &[1.0])?;
        Ok((out[0], Vec2::new(g[0], g[1])))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut meta = BTreeMap::new();
        meta.insert("clip_norm".to_string(), serde_json::Value::from(self.clip_norm));
        self.params.to_checkpoint(CHECKPOINT_KIND, meta)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != CHECKPOINT_KIND {
            return Err(Error::Parse(format!("expected a {CHECKPOINT_KIND} checkpoint, found {}", ck.kind)));
        }
        let clip = ck
            .meta
            .get("clip_norm")
            .and_then(serde_json::Value::as_f64)
            .ok_or_else(|| Error::Parse("value checkpoint lacks clip_norm".into()))?;
        Self::new(NetworkParams::from_checkpoint(ck)?, clip)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

impl ValueGradient for ValueFunction {
    fn grad_x(&self, x: Vec2, t: f64) -> Result<Vec2> {
        Ok(self.value_and_grad(x, t)?.1)
    }
}

/// `∇_x V_ψ(x, t)` (not `t`), norm-clipped to the value's `clip_norm`.
pub fn eval_g_psi(value: &ValueFunction, x: Vec2, t: f64) -> Result<Vec2> {
    Ok(value.grad_x(x, t)?.clip_norm(value.clip_norm))
}

/// One regression example: a visited state and the terminal it reached.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RolloutTuple {
    pub x_t: Vec2,
    pub t: f64,
    pub x1: Vec2,
    pub w: f64,
    /// The `(x1, 1, x1)` anchor of its trajectory.
    pub boundary: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RolloutDataset {
    pub tuples: Vec<RolloutTuple>,
    pub trajectories_consumed: usize,
    pub discarded: usize,
    /// Conflict score at each kept trajectory's terminal state.
    pub terminal_w: Vec<f64>,
    /// Largest conflict score along each kept trajectory.
    pub max_w: Vec<f64>,
}

impl RolloutDataset {
    pub fn extend(&mut self, other: RolloutDataset) {
        self.tuples.extend(other.tuples);
        self.trajectories_consumed += other.trajectories_consumed;
        self.discarded += other.discarded;
        self.terminal_w.extend(other.terminal_w);
        self.max_w.extend(other.max_w);
    }

    /// Fraction of kept trajectories whose score exceeds `tau`.
    pub fn conflict_fraction(&self, tau: f64, measure: ConflictMeasure) -> f64 {
        let scores = match measure {
            ConflictMeasure::Terminal => &self.terminal_w,
            ConflictMeasure::MaxOverStates => &self.max_w,
        };
        if scores.is_empty() {
            return 0.0;
        }
        scores.iter().filter(|&&w| w > tau).count() as f64 / scores.len() as f64
    }
}

/// Tuples, terminal `w` and max `w` of one kept trajectory.
type KeptTrajectory = (Vec<RolloutTuple>, f64, f64);

/// Rolls out `n_traj` trajectories of `n_train` Euler steps under `cfg`
/// and records every visited state with the shared terminal.
#[allow(clippy::too_many_arguments)]
pub fn collect_rollouts(
    field: &dyn VelocityModel,
    set: &RewardSet,
    cfg: &GuidanceConfig,
    value: Option<&dyn ValueGradient>,
    n_traj: usize,
    n_train: usize,
    seed: u64,
    first_index: u64,
) -> Result<RolloutDataset> {
    let rng = CounterRng::new(seed);
    let per_traj: Vec<Result<Option<KeptTrajectory>>> = (0..n_traj as u64)
        .into_par_iter()
        .map(|i| {
            let idx = first_index + i;
            let x0 = source_sample_at(rng.derive(Stream::Rollout, 0), idx);
            let traj = match euler_sample(field, set, cfg, value, x0, n_train, rng.derive(Stream::PcGrad, idx)) {
                Ok(t) => t,
                Err(Error::AbortedTrajectory { .. }) => return Ok(None),
                Err(e) => return Err(e),
            };
            let x1 = traj.terminal();
            let mut tuples = Vec::with_capacity(n_train + 1);
            let mut max_w: f64 = 0.0;
            for (step, d) in traj.diagnostics.iter().enumerate() {
                let (x, t) = (traj.states[step], traj.times[step]);
                let w = if cfg.engine == Engine::None { state_w(field, set, cfg, x, t)? } else { d.w };
                max_w = max_w.max(w);
                tuples.push(RolloutTuple {
                    x_t: x,
                    t,
                    x1,
                    w,
                    boundary: false,
                });
            }
            let w1 = state_w(field, set, cfg, x1, 1.0)?;
            tuples.push(RolloutTuple {
                x_t: x1,
                t: 1.0,
                x1,
                w: w1,
                boundary: true,
            });
            Ok(Some((tuples, w1, max_w.max(w1))))
        })
        .collect();
    let mut out = RolloutDataset {
        trajectories_consumed: n_traj,
        ..RolloutDataset::default()
    };
    for r in per_traj {
        match r? {
            Some((tuples, w1, wmax)) => {
                out.tuples.extend(tuples);
                out.terminal_w.push(w1);
                out.max_w.push(wmax);
            }
            None => out.discarded += 1,
        }
    }
    Ok(out)
}

fn state_w(field: &dyn VelocityModel, set: &RewardSet, cfg: &GuidanceConfig, x: Vec2, t: f64) -> Result<f64> {
    let grads = per_reward_guidance(field, set, x, t, cfg.scale)?;
    Ok(StepDiagnostics::from_grads(&grads, cfg.epsilon_cos, cfg.conflict_mode).w)
}

/// A tuple enters the loss when its state is conflicted or it is a
/// boundary anchor.
pub fn masked_in(tuple: &RolloutTuple, tau: f64) -> bool {
    tuple.boundary || tuple.w > tau
}

/// Mean of `(r(x1) - V(x_t, t))²` over the masked-in tuples of `batch`;
/// zero loss and zero gradients when nothing passes the mask.
pub fn tvr_loss(value: &ValueFunction, batch: &[RolloutTuple], set: &RewardSet, tau: f64) -> Result<(f64, ParamGrads)> {
    let params = value.params();
    let mut grads = ParamGrads::zeros_like(params);
    let kept: Vec<&RolloutTuple> = batch.iter().filter(|t| masked_in(t, tau)).collect();
    if kept.is_empty() {
        return Ok((0.0, grads));
    }
    let n = kept.len() as f64;
    let mut tape = Tape::new(params);
    let mut loss = 0.0;
    for tuple in kept {
        let input = [tuple.x_t.x(), tuple.x_t.y(), tuple.t];
        if input.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite rollout state".into()));
        }
        params.forward_tape(&input, &mut tape);
        let resid = tape.output()[0] - set.value(tuple.x1);
        loss += resid * resid;
        params.backward_tape(&input, &mut tape, &[2.0 * resid / n], Some(&mut grads), None);
    }
    Ok((loss / n, grads))
}

/// Which per-trajectory conflict score drives early stopping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ConflictMeasure {
    /// Score at the terminal state reached by the trajectory.
    Terminal,
    /// Largest score along the trajectory, terminal state included.
    #[default]
    MaxOverStates,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceTrainConfig {
    pub rounds_max: usize,
    pub rollouts_per_round: usize,
    pub rollout_steps: usize,
    pub grad_updates_per_round: usize,
    pub batch_size: usize,
    pub conflict_threshold: f64,
    pub early_stop: f64,
    pub learning_rate: f64,
    pub seed: u64,
    /// Number of earlier rounds whose tuples stay in the training pool.
    pub replay_rounds: usize,
    pub conflict_measure: ConflictMeasure,
    pub network: NetworkSpec,
}

impl Default for GuidanceTrainConfig {
    fn default() -> Self {
        Self {
            rounds_max: 100,
            rollouts_per_round: 256,
            rollout_steps: 25,
            grad_updates_per_round: 200,
            batch_size: 256,
            conflict_threshold: 0.5,
            early_stop: 0.05,
            learning_rate: 1e-3,
            seed: 0,
            replay_rounds: 0,
            conflict_measure: ConflictMeasure::MaxOverStates,
            network: NetworkSpec::new(3, vec![64, 64], 1, Activation::Tanh, 0),
        }
    }
}

impl GuidanceTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds_max == 0 || self.rollouts_per_round == 0 || self.batch_size == 0 {
            return Err(Error::Config("rounds_max, rollouts_per_round and batch_size must be >= 1".into()));
        }
        if self.rollout_steps < 2 {
            return Err(Error::Config("rollout_steps must be >= 2".into()));
        }
        if !(0.0..=1.0).contains(&self.early_stop) || !(0.0..=1.0).contains(&self.conflict_threshold) {
            return Err(Error::Config("early_stop and conflict_threshold must lie in [0, 1]".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        self.network.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    pub conflict_fraction: f64,
    /// The other conflict measure, kept for auditing.
    pub conflict_fraction_alt: f64,
    pub loss: f64,
    pub trajectories_consumed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceUsage {
    pub trajectories_consumed: usize,
    pub rounds: usize,
    pub final_conflict_fraction: f64,
    pub conflict_fraction_series: Vec<f64>,
    pub converged: bool,
    pub discarded: usize,
    pub rounds_log: Vec<RoundLog>,
}

impl GuidanceUsage {
    /// Writes the round log as CSV
    /// `round,conflict_fraction,conflict_fraction_alt,loss,trajectories_consumed`.
    pub fn write_log(&self, path: &Path) -> Result<()> {
        let mut text = String::from("round,conflict_fraction,conflict_fraction_alt,loss,trajectories_consumed\n");
        for r in &self.rounds_log {
            text.push_str(&format!(
                "{},{},{},{},{}\n",
                r.round, r.conflict_fraction, r.conflict_fraction_alt, r.loss, r.trajectories_consumed
            ));
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Alternates rollout collection under the current CAR dynamics with
/// regression updates until the conflict fraction drops below
/// `early_stop` or `rounds_max` rounds have run.
pub fn train_guidance(field: &dyn VelocityModel, set: &RewardSet, cfg: &GuidanceConfig, train: &GuidanceTrainConfig) -> Result<(ValueFunction, GuidanceUsage)> {
    cfg.validate()?;
    train.validate()?;
    if cfg.engine != Engine::Car {
        return Err(Error::Config("guidance training runs under the car engine".into()));
    }
    if train.network.output_dim != 1 {
        return Err(Error::Config("value network must have a scalar output".into()));
    }
    let mut value = ValueFunction::init(train.network.clone(), cfg.clip_norm)?;
    // V starts constant, so the first round's dynamics add no correction
    let last = value.params().layers().len() - 1;
    value.params_mut().layers_mut()[last].weights.iter_mut().for_each(|w| *w = 0.0);
    let mut adam = Adam::new(
        value.params(),
        AdamConfig {
            learning_rate: train.learning_rate,
            ..AdamConfig::default()
        },
    )?;
    let rng = CounterRng::new(train.seed);
    let alt = match train.conflict_measure {
        ConflictMeasure::Terminal => ConflictMeasure::MaxOverStates,
        ConflictMeasure::MaxOverStates => ConflictMeasure::Terminal,
    };
    let mut pools: Vec<Vec<RolloutTuple>> = Vec::new();
    let mut usage = GuidanceUsage {
        trajectories_consumed: 0,
        rounds: 0,
        final_conflict_fraction: 1.0,
        conflict_fraction_series: Vec::new(),
        converged: false,
        discarded: 0,
        rounds_log: Vec::new(),
    };
    for round in 0..train.rounds_max {
        let data = collect_rollouts(
            field,
            set,
            cfg,
            Some(&value),
            train.rollouts_per_round,
            train.rollout_steps,
            train.seed,
            (round * train.rollouts_per_round) as u64,
        )?;
        let fraction = data.conflict_fraction(train.conflict_threshold, train.conflict_measure);
        let fraction_alt = data.conflict_fraction(train.conflict_threshold, alt);
        usage.trajectories_consumed += data.trajectories_consumed - data.discarded;
        usage.discarded += data.discarded;
        pools.push(data.tuples.into_iter().filter(|t| masked_in(t, train.conflict_threshold)).collect());
        if pools.len() > train.replay_rounds + 1 {
            pools.remove(0);
        }
        let pool: Vec<&RolloutTuple> = pools.iter().flatten().collect();
        let mut loss_sum = 0.0;
        if !pool.is_empty() {
            for update in 0..train.grad_updates_per_round {
                let mut r = rng.at2(Stream::TvrBatch, round as u64, update as u64);
                let batch: Vec<RolloutTuple> = (0..train.batch_size).map(|_| *pool[r.random_range(0..pool.len())]).collect();
                let (loss, grads) = tvr_loss(&value, &batch, set, train.conflict_threshold)?;
                if !loss.is_finite() {
                    return Err(Error::TrainingDiverged { step: update, loss });
                }
                adam.step(value.params_mut(), &grads)?;
                loss_sum += loss;
            }
        }
        let mean_loss = if train.grad_updates_per_round > 0 {
            loss_sum / train.grad_updates_per_round as f64
        } else {
            0.0
        };
        usage.rounds = round + 1;
        usage.conflict_fraction_series.push(fraction);
        usage.final_conflict_fraction = fraction;
        usage.rounds_log.push(RoundLog {
            round,
            conflict_fraction: fraction,
            conflict_fraction_alt: fraction_alt,
            loss: mean_loss,
            trajectories_consumed: usage.trajectories_consumed,
        });
        if fraction < train.early_stop {
            usage.converged = true;
            break;
        }
    }
    Ok((value, usage))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cfm::{OracleField, ZeroField};
    use crate::guidance::ConflictMode;
    use crate::mog::GaussianMixture;
    use crate::nn::Layer;
    use crate::rewards::{ClassifierBank, RewardTerm};
    use proptest::prelude::*;

    fn small_value(seed: u64) -> ValueFunction {
        ValueFunction::init(NetworkSpec::new(3, vec![8, 8], 1, Activation::Tanh, seed), 10.0).unwrap()
    }

    fn conflict_set() -> RewardSet {
        RewardSet::for_target(ClassifierBank::benchmark(), &"[1,0]".parse().unwrap(), 1.0).unwrap()
    }

    #[test]
    fn rollout_counts_and_boundaries() {
        let cfg = GuidanceConfig::with_engine(Engine::CovG);
        let oracle = OracleField(GaussianMixture::benchmark());
        let d = collect_rollouts(&oracle, &conflict_set(), &cfg, None, 3, 10, 1, 0).unwrap();
        assert_eq!(d.tuples.len(), 33);
        assert_eq!(d.trajectories_consumed, 3);
        for chunk in d.tuples.chunks(11) {
            let b = chunk[10];
            assert!(b.boundary);
            assert_eq!(b.t, 1.0);
            assert_eq!(b.x_t, b.x1);
            assert!(chunk.iter().all(|t| t.x1 == b.x1));
        }
    }

    #[test]
    fn degenerate_rollouts() {
        let cfg = GuidanceConfig::with_engine(Engine::None);
        let d = collect_rollouts(&ZeroField, &conflict_set(), &cfg, None, 4, 5, 2, 0).unwrap();
        for chunk in d.tuples.chunks(6) {
            let x0 = chunk[0].x_t;
            assert!(chunk.iter().all(|t| t.x_t == x0 && t.x1 == x0));
        }
    }

    #[test]
    fn tvr_loss_examples() {
        let set = RewardSet::new(vec![RewardTerm::goal(vec![Vec2::new(1.0, 1.0)], 1.0).unwrap()]).unwrap();
        let x1 = Vec2::new(0.0, 0.0);
        let r = set.value(x1);
        // constant net outputting exactly r(x1)
        let exact = ValueFunction::new(NetworkParams::linear(Layer::from_rows(&[vec![0.0; 3]], vec![r]).unwrap()), 10.0).unwrap();
        let tuple = RolloutTuple {
            x_t: Vec2::new(0.5, 0.5),
            t: 0.3,
            x1,
            w: 0.9,
            boundary: false,
        };
        let (loss, g) = tvr_loss(&exact, &[tuple, tuple], &set, 0.5).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.is_zero());
        let quiet = RolloutTuple { w: 0.2, ..tuple };
        let (loss, g) = tvr_loss(&small_value(1), &[quiet, quiet], &set, 0.5).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.is_zero());
        let anchored = RolloutTuple { boundary: true, ..quiet };
        assert!(tvr_loss(&small_value(1), &[anchored], &set, 0.5).unwrap().0 > 0.0);
    }

    #[test]
    fn tvr_loss_of_four_and_its_gradient() {
        // r(x1) = -2 from two unit obstacles at x1; V = 0 via zero output layer
        let x1 = Vec2::new(3.0, 3.0);
        let set = RewardSet::new(vec![RewardTerm::obstacle(vec![x1, x1], 1.0).unwrap()]).unwrap();
        assert_eq!(set.value(x1), -2.0);
        let mut v = small_value(4);
        let last = v.params().layers().len() - 1;
        v.params_mut().layers_mut()[last].weights.iter_mut().for_each(|w| *w = 0.0);
        let tuple = RolloutTuple {
            x_t: Vec2::new(1.0, -1.0),
            t: 0.4,
            x1,
            w: 1.0,
            boundary: false,
        };
        let (loss, grads) = tvr_loss(&v, &[tuple], &set, 0.5).unwrap();
        assert_eq!(loss, 4.0);
        check_param_grads(&v, &[tuple], &set, &grads);
        let (_, grads) = tvr_loss(&small_value(6), &[tuple], &set, 0.5).unwrap();
        check_param_grads(&small_value(6), &[tuple], &set, &grads);
    }

    fn check_param_grads(v: &ValueFunction, batch: &[RolloutTuple], set: &RewardSet, grads: &ParamGrads) {
        let flat: Vec<f64> = grads.flat().collect();
        let h = 1e-5;
        let mut k = 0;
        for li in 0..v.params().layers().len() {
            let n_w = v.params().layers()[li].weights.len();
            let n_b = v.params().layers()[li].bias.len();
            for pi in 0..n_w + n_b {
                let eval = |d: f64| {
                    let mut p = v.clone();
                    let layer = &mut p.params_mut().layers_mut()[li];
                    if pi < n_w {
                        layer.weights[pi] += d;
                    } else {
                        layer.bias[pi - n_w] += d;
                    }
                    tvr_loss(&p, batch, set, 0.5).unwrap().0
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                assert!((flat[k] - fd).abs() / fd.abs().max(1e-3) < 1e-5, "param {k}: {} vs {fd}", flat[k]);
                k += 1;
            }
        }
    }

    #[test]
    fn g_psi_basics() {
        let mut v = small_value(2);
        let last = v.params().layers().len() - 1;
        v.params_mut().layers_mut()[last].weights.iter_mut().for_each(|w| *w = 0.0);
        assert_eq!(eval_g_psi(&v, Vec2::new(1.0, 2.0), 0.5).unwrap(), Vec2::ZERO);
        // V(x, t) = 15 x1 + 20 x2: gradient norm 25 is clipped to 10
        let lin = ValueFunction::new(NetworkParams::linear(Layer::from_rows(&[vec![15.0, 20.0, 3.0]], vec![0.0]).unwrap()), 10.0).unwrap();
        let g = eval_g_psi(&lin, Vec2::new(-1.0, 4.0), 0.2).unwrap();
        assert!((g.norm() - 10.0).abs() < 1e-12);
        assert!((g - Vec2::new(6.0, 8.0)).norm() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip() {
        let v = small_value(3);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.json");
        v.save(&p).unwrap();
        assert_eq!(ValueFunction::load(&p).unwrap(), v);
    }

    #[test]
    fn aligned_target_stops_after_one_round_under_energy_score() {
        let set = RewardSet::for_target(ClassifierBank::benchmark(), &"[1,1]".parse().unwrap(), 1.0).unwrap();
        let cfg = GuidanceConfig {
            conflict_mode: ConflictMode::Energy,
            ..GuidanceConfig::with_engine(Engine::Car)
        };
        let train = GuidanceTrainConfig {
            rollouts_per_round: 64,
            grad_updates_per_round: 5,
            network: NetworkSpec::new(3, vec![16], 1, Activation::Tanh, 0),
            ..GuidanceTrainConfig::default()
        };
        let oracle = OracleField(GaussianMixture::benchmark());
        let (_, usage) = train_guidance(&oracle, &set, &cfg, &train).unwrap();
        assert!(usage.converged, "{:?}", usage.rounds_log);
        assert_eq!(usage.rounds, 1);
        assert_eq!(usage.trajectories_consumed, 64);
    }

    #[test]
    fn early_stop_threshold_of_one_stops_at_round_one_unless_all_conflict() {
        let cfg = GuidanceConfig {
            conflict_mode: ConflictMode::Energy,
            ..GuidanceConfig::with_engine(Engine::Car)
        };
        let train = GuidanceTrainConfig {
            rollouts_per_round: 16,
            grad_updates_per_round: 2,
            early_stop: 1.0,
            network: NetworkSpec::new(3, vec![8], 1, Activation::Tanh, 0),
            ..GuidanceTrainConfig::default()
        };
        let oracle = OracleField(GaussianMixture::benchmark());
        let (_, usage) = train_guidance(&oracle, &conflict_set(), &cfg, &train).unwrap();
        assert_eq!(usage.rounds, 1);
        assert!(usage.conflict_fraction_series[0] < 1.0);
        assert_eq!(usage.trajectories_consumed, 16);

        // every trajectory conflicts under the cosine score: no early stop
        let all = GuidanceTrainConfig { rounds_max: 3, ..train };
        let (_, usage) = train_guidance(&oracle, &conflict_set(), &GuidanceConfig::with_engine(Engine::Car), &all).unwrap();
        assert!(usage.conflict_fraction_series.iter().all(|&f| f == 1.0), "{:?}", usage.conflict_fraction_series);
        assert_eq!(usage.rounds, 3);
        assert!(!usage.converged);
    }

    #[test]
    fn train_guidance_requires_car() {
        let cfg = GuidanceConfig::with_engine(Engine::CovG);
        let oracle = OracleField(GaussianMixture::benchmark());
        assert!(train_guidance(&oracle, &conflict_set(), &cfg, &GuidanceTrainConfig::default()).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn g_psi_matches_finite_differences(x in -12.0f64..14.0, y in -12.0f64..14.0, t in 0.0f64..1.0, seed in 0u64..50) {
            let v = small_value(seed);
            let g = v.grad_x(Vec2::new(x, y), t).unwrap();
            let h = 1e-5;
            let f = |dx: f64, dy: f64| v.value(Vec2::new(x + dx, y + dy), t).unwrap();
            let fd = Vec2::new((f(h, 0.0) - f(-h, 0.0)) / (2.0 * h), (f(0.0, h) - f(0.0, -h)) / (2.0 * h));
            prop_assert!((g - fd).norm() / fd.norm().max(1e-3) < 1e-5);
        }

        #[test]
        fn g_psi_is_curl_free(x in -12.0f64..14.0, y in -12.0f64..14.0, t in 0.0f64..1.0, seed in 0u64..50) {
            let v = small_value(seed);
            let side = 1e-2;
            let corners = [Vec2::new(x, y), Vec2::new(x + side, y), Vec2::new(x + side, y + side), Vec2::new(x, y + side)];
            // trapezoid rule along each edge of the square
            let mut circ = 0.0;
            for i in 0..4 {
                let (a, b) = (corners[i], corners[(i + 1) % 4]);
                let ga = v.grad_x(a, t).unwrap();
                let gb = v.grad_x(b, t).unwrap();
                circ += (ga + gb).dot(b - a) * 0.5;
            }
            prop_assert!(circ.abs() < 1e-4);
        }
    }
}
