//! Scalar fields on a regular lattice: composite energy, conflict score,
//! energy dissipation, and the learned value.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cfm::VelocityModel;
use crate::guidance::{conflict_score_with, energy_dissipation, per_reward_guidance, ConflictMode};
use crate::rewards::RewardSet;
use crate::value::ValueFunction;
use crate::{Error, Result, Vec2};

/// `[xmin, xmax] × [ymin, ymax]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub xmin: f64,
    pub xmax: f64,
    pub ymin: f64,
    pub ymax: f64,
}

impl Bounds {
    pub fn square(lo: f64, hi: f64) -> Self {
        Self {
            xmin: lo,
            xmax: hi,
            ymin: lo,
            ymax: hi,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = [self.xmin, self.xmax, self.ymin, self.ymax].iter().all(|v| v.is_finite());
        if !ok || !(self.xmax > self.xmin) || !(self.ymax > self.ymin) {
            return Err(Error::Config("lattice bounds must be finite with max > min".into()));
        }
        Ok(())
    }
}

impl Default for Bounds {
    fn default() -> Self {
        Self::square(-14.0, 16.0)
    }
}

/// Lattice with inclusive end points: `nx × ny` nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resolution {
    pub nx: usize,
    pub ny: usize,
}

impl Default for Resolution {
    fn default() -> Self {
        Self { nx: 120, ny: 120 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GridKind {
    Energy,
    ConflictW,
    DeltaE,
    LearnedValue { t: f64 },
}

impl GridKind {
    pub fn name(&self) -> &'static str {
        match self {
            GridKind::Energy => "energy",
            GridKind::ConflictW => "conflict_w",
            GridKind::DeltaE => "delta_e",
            GridKind::LearnedValue { .. } => "learned_value",
        }
    }

    pub fn time(&self) -> Option<f64> {
        match self {
            GridKind::LearnedValue { t } => Some(*t),
            _ => None,
        }
    }
}

/// Lattice node `(ix, iy)` of a grid.
pub fn lattice_point(bounds: &Bounds, res: Resolution, ix: usize, iy: usize) -> Vec2 {
    Vec2::new(
        bounds.xmin + (bounds.xmax - bounds.xmin) * ix as f64 / (res.nx - 1) as f64,
        bounds.ymin + (bounds.ymax - bounds.ymin) * iy as f64 / (res.ny - 1) as f64,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct LandscapeGrid {
    pub bounds: Bounds,
    pub resolution: Resolution,
    /// Row-major, `values[iy * nx + ix]`.
    pub values: Vec<f64>,
    pub kind: GridKind,
}

/// Where conflict and dissipation grids take their gradients.
#[derive(Clone, Copy)]
pub struct GridOptions<'a> {
    pub epsilon_cos: f64,
    pub conflict_mode: ConflictMode,
    /// Route gradients through the terminal prediction of this field at
    /// this time instead of using the lattice point itself.
    pub routed: Option<(&'a dyn VelocityModel, f64)>,
}

impl Default for GridOptions<'_> {
    fn default() -> Self {
        Self {
            epsilon_cos: 1e-8,
            conflict_mode: ConflictMode::default(),
            routed: None,
        }
    }
}

/// Evaluates the scalar selected by `kind` on the lattice.
pub fn landscape_grid(
    kind: GridKind,
    set: Option<&RewardSet>,
    value: Option<&ValueFunction>,
    bounds: Bounds,
    resolution: Resolution,
    options: &GridOptions<'_>,
) -> Result<LandscapeGrid> {
    bounds.validate()?;
    if resolution.nx < 2 || resolution.ny < 2 {
        return Err(Error::Config("lattice resolution must be at least 2x2".into()));
    }
    let need_set = || set.ok_or_else(|| Error::Config(format!("{} grid needs a reward set", kind.name())));
    let grads_at = |s: &RewardSet, x: Vec2| -> Result<Vec<Vec2>> {
        match options.routed {
            Some((field, t)) => per_reward_guidance(field, s, x, t, 1.0),
            None => Ok(s.composite_value_grad(x).1),
        }
    };
    let mut values = Vec::with_capacity(resolution.nx * resolution.ny);
    for iy in 0..resolution.ny {
        for ix in 0..resolution.nx {
            let x = lattice_point(&bounds, resolution, ix, iy);
            let v = match kind {
                GridKind::Energy => -need_set()?.value(x),
                GridKind::ConflictW => conflict_score_with(&grads_at(need_set()?, x)?, options.epsilon_cos, options.conflict_mode).1,
                GridKind::DeltaE => energy_dissipation(&grads_at(need_set()?, x)?),
                GridKind::LearnedValue { t } => value
                    .ok_or_else(|| Error::Config("learned_value grid needs a value function".into()))?
                    .value(x, t)?,
            };
            if !v.is_finite() {
                return Err(Error::Numeric(format!("non-finite {} value at {x:?}", kind.name())));
            }
            values.push(v);
        }
    }
    Ok(LandscapeGrid {
        bounds,
        resolution,
        values,
        kind,
    })
}

impl LandscapeGrid {
    pub fn at(&self, ix: usize, iy: usize) -> f64 {
        self.values[iy * self.resolution.nx + ix]
    }

    pub fn point(&self, ix: usize, iy: usize) -> Vec2 {
        lattice_point(&self.bounds, self.resolution, ix, iy)
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Lattice index of the smallest value.
    pub fn argmin(&self) -> (usize, usize) {
        let i = self.values.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).map(|(i, _)| i).unwrap_or(0);
        (i % self.resolution.nx, i / self.resolution.nx)
    }

    /// CSV with a four-line header (bounds, resolution, kind, t) followed
    /// by one row of values per lattice row.
    pub fn to_csv(&self) -> String {
        let b = &self.bounds;
        let mut out = String::new();
        let _ = writeln!(out, "bounds,{},{},{},{}", b.xmin, b.xmax, b.ymin, b.ymax);
        let _ = writeln!(out, "resolution,{},{}", self.resolution.nx, self.resolution.ny);
        let _ = writeln!(out, "kind,{}", self.kind.name());
        match self.kind.time() {
            Some(t) => {
                let _ = writeln!(out, "t,{t}");
            }
            None => out.push_str("t,na\n"),
        }
        for row in self.values.chunks(self.resolution.nx) {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |what: &str| Error::Parse(format!("grid csv: {what}"));
        let mut lines = text.lines();
        let mut header = |name: &str| -> Result<Vec<String>> {
            let line = lines.next().ok_or_else(|| bad("truncated header"))?;
            let mut parts = line.split(',');
            if parts.next() != Some(name) {
                return Err(bad(&format!("expected {name} line")));
            }
            Ok(parts.map(str::to_string).collect())
        };
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad("bad number"));
        let b = header("bounds")?;
        let r = header("resolution")?;
        let k = header("kind")?;
        let t = header("t")?;
        if b.len() != 4 || r.len() != 2 || k.len() != 1 || t.len() != 1 {
            return Err(bad("malformed header"));
        }
        let bounds = Bounds {
            xmin: num(&b[0])?,
            xmax: num(&b[1])?,
            ymin: num(&b[2])?,
            ymax: num(&b[3])?,
        };
        let resolution = Resolution {
            nx: r[0].parse().map_err(|_| bad("bad nx"))?,
            ny: r[1].parse().map_err(|_| bad("bad ny"))?,
        };
        let kind = match k[0].as_str() {
            "energy" => GridKind::Energy,
            "conflict_w" => GridKind::ConflictW,
            "delta_e" => GridKind::DeltaE,
            "learned_value" => GridKind::LearnedValue { t: num(&t[0])? },
            other => return Err(bad(&format!("unknown kind {other}"))),
        };
        let values = lines.flat_map(|l| l.split(',')).map(num).collect::<Result<Vec<f64>>>()?;
        if values.len() != resolution.nx * resolution.ny {
            return Err(bad("value count does not match resolution"));
        }
        Ok(Self {
            bounds,
            resolution,
            values,
            kind,
        })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mog::ConstraintTarget;
    use crate::nn::{Activation, NetworkSpec};
    use crate::rewards::{ClassifierBank, RewardTerm};

    fn benchmark_set(target: &str) -> RewardSet {
        RewardSet::for_target(ClassifierBank::benchmark(), &target.parse::<ConstraintTarget>().unwrap(), 1.0).unwrap()
    }

    #[test]
    fn single_goal_energy_minimum_at_center() {
        let g = Vec2::new(2.0, -3.0);
        let set = RewardSet::new(vec![RewardTerm::goal(vec![g], 2.0).unwrap()]).unwrap();
        let grid = landscape_grid(
            GridKind::Energy,
            Some(&set),
            None,
            Bounds::square(-6.0, 6.0),
            Resolution { nx: 25, ny: 25 },
            &GridOptions::default(),
        )
        .unwrap();
        let (ix, iy) = grid.argmin();
        assert_eq!(grid.point(ix, iy), g);
    }

    #[test]
    fn conflict_grids_separate_targets() {
        let res = Resolution { nx: 60, ny: 60 };
        for mode in [ConflictMode::Literal, ConflictMode::Normalized, ConflictMode::Energy] {
            let opts = GridOptions {
                conflict_mode: mode,
                ..GridOptions::default()
            };
            let aligned = landscape_grid(GridKind::ConflictW, Some(&benchmark_set("[1,1]")), None, Bounds::default(), res, &opts).unwrap();
            let conflicted = landscape_grid(GridKind::ConflictW, Some(&benchmark_set("[1,0]")), None, Bounds::default(), res, &opts).unwrap();
            assert!(conflicted.min_max().1 > 0.5, "{mode:?}");
            let high = |g: &LandscapeGrid| g.values.iter().filter(|v| **v > 0.5).count();
            assert!(high(&aligned) < high(&conflicted), "{mode:?}");
        }
    }

    #[test]
    fn delta_e_non_negative() {
        let grid = landscape_grid(
            GridKind::DeltaE,
            Some(&benchmark_set("[1,0]")),
            None,
            Bounds::default(),
            Resolution { nx: 40, ny: 40 },
            &GridOptions::default(),
        )
        .unwrap();
        assert!(grid.values.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn learned_value_needs_value_and_csv_round_trips() {
        let res = Resolution { nx: 3, ny: 4 };
        assert!(landscape_grid(GridKind::LearnedValue { t: 0.5 }, None, None, Bounds::default(), res, &GridOptions::default()).is_err());
        let v = ValueFunction::init(NetworkSpec::new(3, vec![4], 1, Activation::Tanh, 1), 10.0).unwrap();
        let grid = landscape_grid(
            GridKind::LearnedValue { t: 0.5 },
            None,
            Some(&v),
            Bounds::default(),
            res,
            &GridOptions::default(),
        )
        .unwrap();
        let text = grid.to_csv();
        assert!(text.starts_with("bounds,-14,16,-14,16\nresolution,3,4\nkind,learned_value\nt,0.5\n"));
        assert_eq!(LandscapeGrid::from_csv(&text).unwrap(), grid);
        assert!(landscape_grid(
            GridKind::Energy,
            None,
            None,
            Bounds::default(),
            Resolution { nx: 1, ny: 4 },
            &GridOptions::default()
        )
        .is_err());
    }
}
