//! Conditional flow matching for the base velocity field.
//!
//! Independent coupling, linear paths `x_t = (1 - t) x0 + t x1`, regression
//! target `x1 - x0`, losses averaged over the batch.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::mog::{source_sample_at, GaussianMixture};
use crate::nn::{Activation, Adam, AdamConfig, Checkpoint, NetworkParams, NetworkSpec, ParamGrads, Tape};
use crate::rng::{CounterRng, Stream};
use crate::{Error, Result, Vec2};

/// Loss above which training is declared diverged.
pub const DIVERGENCE_LOSS: f64 = 1e6;

const CHECKPOINT_KIND: &str = "velocity_field";
const BATCH_CHUNK: usize = 64;

/// Anything that can be integrated as a time-dependent velocity field.
pub trait VelocityModel: Sync {
    fn velocity(&self, x: Vec2, t: f64) -> Result<Vec2>;
}

/// `v ≡ 0`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroField;

impl VelocityModel for ZeroField {
    fn velocity(&self, _x: Vec2, _t: f64) -> Result<Vec2> {
        Ok(Vec2::ZERO)
    }
}

/// `v ≡ c`.
#[derive(Debug, Clone, Copy)]
pub struct ConstantField(pub Vec2);

impl VelocityModel for ConstantField {
    fn velocity(&self, _x: Vec2, _t: f64) -> Result<Vec2> {
        Ok(self.0)
    }
}

/// The exact marginal velocity of a Gaussian-mixture target.
#[derive(Debug, Clone)]
pub struct OracleField(pub GaussianMixture);

impl VelocityModel for OracleField {
    fn velocity(&self, x: Vec2, t: f64) -> Result<Vec2> {
        self.0.oracle_velocity(x, t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowTrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub network: NetworkSpec,
}

impl Default for FlowTrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            steps: 20_000,
            learning_rate: 1e-3,
            seed: 0,
            network: NetworkSpec::new(3, vec![64, 64], 2, Activation::Tanh, 0),
        }
    }
}

impl FlowTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("flow training needs steps >= 1 and batch_size >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("flow learning rate must be positive".into()));
        }
        self.network.validate()?;
        if self.network.input_dim != 3 || self.network.output_dim != 2 {
            return Err(Error::Config("velocity network must map (x1, x2, t) to a 2-vector".into()));
        }
        Ok(())
    }
}

/// A trained velocity network together with the mixture it was fit to.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityField {
    params: NetworkParams,
    trained_on: u64,
}

impl VelocityField {
    pub fn new(params: NetworkParams, trained_on: u64) -> Result<Self> {
        let spec = params.spec();
        if spec.input_dim != 3 || spec.output_dim != 2 {
            return Err(Error::Dimension {
                what: "velocity network input",
                expected: 3,
                got: spec.input_dim,
            });
        }
        Ok(Self { params, trained_on })
    }

    pub fn params(&self) -> &NetworkParams {
        &self.params
    }

    pub fn spec(&self) -> &NetworkSpec {
        self.params.spec()
    }

    pub fn trained_on(&self) -> u64 {
        self.trained_on
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut meta = BTreeMap::new();
        meta.insert("trained_on".to_string(), serde_json::Value::from(self.trained_on));
        self.params.to_checkpoint(CHECKPOINT_KIND, meta)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != CHECKPOINT_KIND {
            return Err(Error::Parse(format!("expected a {CHECKPOINT_KIND} checkpoint, found {}", ck.kind)));
        }
        let trained_on = ck
            .meta
            .get("trained_on")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| Error::Parse("velocity checkpoint lacks trained_on".into()))?;
        Self::new(NetworkParams::from_checkpoint(ck)?, trained_on)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

impl VelocityModel for VelocityField {
    fn velocity(&self, x: Vec2, t: f64) -> Result<Vec2> {
        let out = self.params.forward(&[x.x(), x.y(), t])?;
        Ok(Vec2::new(out[0], out[1]))
    }
}

/// One CFM training example: `(x0, x1, t)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CfmTriple {
    pub x0: Vec2,
    pub x1: Vec2,
    pub t: f64,
}

impl CfmTriple {
    /// Example `index` of the batch keyed by `seed`.
    pub fn draw(gm: &GaussianMixture, seed: u64, index: u64) -> Self {
        let mut r = CounterRng::new(seed).at(Stream::CfmBatch, index);
        let t: f64 = r.random();
        Self {
            x0: source_sample_at(seed, index),
            x1: gm.sample_at(seed, index),
            t,
        }
    }

    pub fn x_t(&self) -> Vec2 {
        self.x0 * (1.0 - self.t) + self.x1 * self.t
    }

    pub fn target(&self) -> Vec2 {
        self.x1 - self.x0
    }
}

/// Mean squared residual over `triples` and its exact parameter gradient.
pub fn cfm_loss_on(params: &NetworkParams, triples: &[CfmTriple]) -> Result<(f64, ParamGrads)> {
    if triples.is_empty() {
        return Err(Error::Config("CFM batch must be non-empty".into()));
    }
    let n = triples.len() as f64;
    // fixed chunking keeps the floating-point reduction order independent
    // of the thread pool
    let partials: Vec<(f64, ParamGrads)> = triples
        .par_chunks(BATCH_CHUNK)
        .map(|chunk| {
            let mut grads = ParamGrads::zeros_like(params);
            let mut tape = Tape::new(params);
            let mut loss = 0.0;
            for tr in chunk {
                let xt = tr.x_t();
                let input = [xt.x(), xt.y(), tr.t];
                params.forward_tape(&input, &mut tape);
                let out = tape.output();
                let r = [out[0] - tr.target().x(), out[1] - tr.target().y()];
                loss += r[0] * r[0] + r[1] * r[1];
                let upstream = [2.0 * r[0] / n, 2.0 * r[1] / n];
                params.backward_tape(&input, &mut tape, &upstream, Some(&mut grads), None);
            }
            (loss, grads)
        })
        .collect();
    let mut grads = ParamGrads::zeros_like(params);
    let mut loss = 0.0;
    for (l, g) in &partials {
        loss += l;
        grads.add_assign(g);
    }
    let loss = loss / n;
    if !loss.is_finite() {
        return Err(Error::Numeric("non-finite CFM loss".into()));
    }
    Ok((loss, grads))
}

/// CFM loss on a fresh batch keyed by `seed`.
pub fn cfm_batch_loss(params: &NetworkParams, gm: &GaussianMixture, batch_size: usize, seed: u64) -> Result<(f64, ParamGrads)> {
    if batch_size == 0 {
        return Err(Error::Config("CFM batch must be non-empty".into()));
    }
    let triples: Vec<CfmTriple> = (0..batch_size as u64).map(|i| CfmTriple::draw(gm, seed, i)).collect();
    cfm_loss_on(params, &triples)
}

/// Result of [`train_flow`]: the field and its per-step loss curve.
#[derive(Debug, Clone)]
pub struct FlowTraining {
    pub field: VelocityField,
    pub log: Vec<(usize, f64)>,
}

impl FlowTraining {
    /// Writes the curve as CSV `step,loss`.
    pub fn write_log(&self, path: &Path) -> Result<()> {
        let mut text = String::from("step,loss\n");
        for (s, l) in &self.log {
            text.push_str(&format!("{s},{l}\n"));
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

pub fn train_flow(config: &FlowTrainConfig, gm: &GaussianMixture) -> Result<FlowTraining> {
    config.validate()?;
    gm.validate()?;
    let mut params = NetworkParams::init(config.network.clone())?;
    let mut adam = Adam::new(
        &params,
        AdamConfig {
            learning_rate: config.learning_rate,
            ..AdamConfig::default()
        },
    )?;
    let rng = CounterRng::new(config.seed);
    let mut log = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let key = rng.derive(Stream::CfmBatch, step as u64);
        let (loss, grads) = cfm_batch_loss(&params, gm, config.batch_size, key)?;
        if !(loss <= DIVERGENCE_LOSS) {
            return Err(Error::TrainingDiverged { step, loss });
        }
        adam.step(&mut params, &grads)?;
        log.push((step, loss));
    }
    Ok(FlowTraining {
        field: VelocityField::new(params, gm.descriptor_hash())?,
        log,
    })
}

/// Comparison of a field against the analytic marginal velocity.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleComparison {
    /// Root mean squared velocity error.
    pub velocity_rmse: f64,
    /// Mean Euclidean error of the one-step terminal prediction.
    pub terminal_mean_error: f64,
    /// Number of lattice points that passed the density filter.
    pub points: usize,
}

/// Compares `field` with the oracle on a `res × res` lattice over
/// `[lo, hi]²` at `t ∈ {0.1, …, 0.9}`, keeping only points whose `p_t`
/// density exceeds its 10th percentile (estimated from `mc` draws of `p_t`).
pub fn compare_with_oracle(field: &dyn VelocityModel, gm: &GaussianMixture, lo: f64, hi: f64, res: usize, mc: usize, seed: u64) -> Result<OracleComparison> {
    if res < 2 || mc == 0 || !(hi > lo) {
        return Err(Error::Config("oracle comparison needs res >= 2, mc >= 1, hi > lo".into()));
    }
    let mut sq = 0.0;
    let mut term = 0.0;
    let mut points = 0usize;
    for ti in 1..=9 {
        let t = ti as f64 / 10.0;
        let mut dens: Vec<f64> = (0..mc as u64)
            .map(|i| gm.log_density_t(gm.sample_interpolant_at(seed ^ ti as u64, i, t), t))
            .collect();
        dens.sort_by(f64::total_cmp);
        let cut = dens[mc / 10];
        for iy in 0..res {
            for ix in 0..res {
                let step = (hi - lo) / (res - 1) as f64;
                let x = Vec2::new(lo + ix as f64 * step, lo + iy as f64 * step);
                if gm.log_density_t(x, t) <= cut {
                    continue;
                }
                let v = field.velocity(x, t)?;
                let v_ref = gm.oracle_velocity(x, t)?;
                sq += (v - v_ref).norm_sq();
                let x1 = x + v * (1.0 - t);
                term += (x1 - gm.oracle_terminal_mean(x, t)?).norm();
                points += 1;
            }
        }
    }
    if points == 0 {
        return Err(Error::Domain("density filter removed every lattice point".into()));
    }
    Ok(OracleComparison {
        // velocities are 2-vectors; RMSE is per vector (Euclidean norm)
        velocity_rmse: (sq / points as f64).sqrt(),
        terminal_mean_error: term / points as f64,
        points,
    })
}
