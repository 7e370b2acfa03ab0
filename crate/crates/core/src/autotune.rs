//! Hyperparameter grid, tuning objective and exhaustive grid search.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::freezing::check_eta;
use crate::scheduler::LrHyper;

/// Floor applied to the accuracy loss before it enters the objective.
pub const DELTA_A_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    /// Accuracy-drop threshold in accuracy-fraction units. `+inf` never
    /// triggers fine-tuning, `-inf` always does.
    #[serde(with = "crate::floatser")]
    pub theta: f64,
    pub eta: f64,
    pub lr: LrHyper,
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        if self.theta.is_nan() {
            return Err(invalid("theta is NaN"));
        }
        check_eta(self.eta)?;
        self.lr.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub theta: Vec<f64>,
    pub eta: Vec<f64>,
    pub lr_base: Vec<f64>,
    pub delta: Vec<f64>,
    pub p: Vec<f64>,
    pub beta: Vec<f64>,
}

pub const AXES: [&str; 6] = ["theta", "eta", "lr_base", "delta", "p", "beta"];

impl Default for SearchSpace {
    /// 3^5 = 243 points with a fixed base learning rate of 0.001.
    fn default() -> Self {
        let lr_base = 0.001;
        Self {
            theta: vec![0.01, 0.02, 0.05],
            eta: vec![0.0, 0.25, 0.5],
            lr_base: vec![lr_base],
            delta: vec![0.25 * lr_base, 0.5 * lr_base, 0.75 * lr_base],
            p: vec![0.2, 0.35, 0.5],
            beta: vec![1.0, 2.0, 4.0],
        }
    }
}

impl SearchSpace {
    /// Single-point space.
    pub fn single(h: &HyperParams) -> Self {
        Self {
            theta: vec![h.theta],
            eta: vec![h.eta],
            lr_base: vec![h.lr.lr_base],
            delta: vec![h.lr.delta],
            p: vec![h.lr.p],
            beta: vec![h.lr.beta],
        }
    }

    fn axes(&self) -> [&Vec<f64>; 6] {
        [&self.theta, &self.eta, &self.lr_base, &self.delta, &self.p, &self.beta]
    }

    fn axes_mut(&mut self) -> [&mut Vec<f64>; 6] {
        [
            &mut self.theta,
            &mut self.eta,
            &mut self.lr_base,
            &mut self.delta,
            &mut self.p,
            &mut self.beta,
        ]
    }

    pub fn len(&self) -> usize {
        self.axes().iter().map(|a| a.len()).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Sorts and deduplicates every axis, then checks every grid point.
    pub fn normalize(mut self) -> Result<Self> {
        for axis in self.axes_mut() {
            if axis.iter().any(|v| v.is_nan()) {
                return Err(invalid("NaN in search space"));
            }
            axis.sort_by(f64::total_cmp);
            axis.dedup();
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, axis) in AXES.iter().zip(self.axes()) {
            if axis.is_empty() {
                return Err(invalid(format!("search axis '{name}' is empty")));
            }
            if axis.windows(2).any(|w| w[0] > w[1]) {
                return Err(invalid(format!("search axis '{name}' is not sorted")));
            }
        }
        for h in self.points() {
            h.validate()?;
        }
        Ok(())
    }

    /// Cartesian product in lexicographic axis order (`beta` varies fastest).
    pub fn points(&self) -> Vec<HyperParams> {
        let mut out = Vec::with_capacity(self.len());
        for &theta in &self.theta {
            for &eta in &self.eta {
                for &lr_base in &self.lr_base {
                    for &delta in &self.delta {
                        for &p in &self.p {
                            for &beta in &self.beta {
                                out.push(HyperParams {
                                    theta,
                                    eta,
                                    lr: LrHyper {
                                        lr_base,
                                        delta,
                                        p,
                                        beta,
                                    },
                                });
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Parses `key=v1,v2,...` lines. Keys left out keep their default axis.
    pub fn parse(text: &str) -> Result<Self> {
        let mut space = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, vals) = line
                .split_once('=')
                .ok_or_else(|| invalid(format!("space line {}: expected key=values", n + 1)))?;
            let values = vals
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| invalid(format!("space line {}: {e}", n + 1)))?;
            let key = key.trim();
            let slot = match key {
                "theta" => &mut space.theta,
                "eta" => &mut space.eta,
                "lr_base" => &mut space.lr_base,
                "delta" => &mut space.delta,
                "p" => &mut space.p,
                "beta" => &mut space.beta,
                other => return Err(invalid(format!("unknown search axis '{other}'"))),
            };
            *slot = values;
        }
        space.normalize()
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (name, axis) in AXES.iter().zip(self.axes()) {
            let vals: Vec<String> = axis.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(s, "{name}={}", vals.join(","));
        }
        s
    }
}

/// `(PT + dA) / max(PT, dA)` with the accuracy loss floored at [`DELTA_A_FLOOR`].
pub fn objective(pt_seconds: f64, delta_a: f64) -> Result<f64> {
    if !pt_seconds.is_finite() || !delta_a.is_finite() {
        return Err(invalid(format!("non-finite objective inputs ({pt_seconds}, {delta_a})")));
    }
    if pt_seconds <= 0.0 {
        return Err(invalid(format!("pruning time must be positive, got {pt_seconds}")));
    }
    let da = delta_a.max(DELTA_A_FLOOR);
    Ok((pt_seconds + da) / pt_seconds.max(da))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub params: HyperParams,
    #[serde(with = "crate::floatser")]
    pub pt_seconds: f64,
    #[serde(with = "crate::floatser")]
    pub delta_a: f64,
    #[serde(with = "crate::floatser")]
    pub error: f64,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub best: HyperParams,
    #[serde(with = "crate::floatser")]
    pub best_error: f64,
    pub best_index: usize,
    pub trials: Vec<Trial>,
}

/// Evaluates every grid point in order and keeps the earliest minimum.
/// A failing point is recorded with an infinite error and the search continues.
pub fn grid_search<F>(space: &SearchSpace, mut eval: F) -> Result<TuneResult>
where
    F: FnMut(usize, &HyperParams) -> Result<(f64, f64)>,
{
    space.validate()?;
    let points = space.points();
    let mut trials = Vec::with_capacity(points.len());
    let mut best_index = 0;
    let mut best_error = f64::INFINITY;
    for (i, h) in points.iter().enumerate() {
        let trial = match eval(i, h).and_then(|(pt, da)| objective(pt, da).map(|e| (pt, da, e))) {
            Ok((pt, da, e)) => Trial {
                params: *h,
                pt_seconds: pt,
                delta_a: da,
                error: e,
                failure: None,
            },
            Err(err) => {
                log::warn!("grid point {i} failed: {err}");
                Trial {
                    params: *h,
                    pt_seconds: f64::NAN,
                    delta_a: f64::NAN,
                    error: f64::INFINITY,
                    failure: Some(err.to_string()),
                }
            }
        };
        if trial.error < best_error {
            best_error = trial.error;
            best_index = i;
        }
        trials.push(trial);
    }
    Ok(TuneResult {
        best: points[best_index],
        best_error,
        best_index,
        trials,
    })
}

/// Writes trials as CSV: the six axes, PT, delta_A, objective, failure note.
pub fn write_trials_csv<W: std::io::Write>(result: &TuneResult, w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["theta", "eta", "lr_base", "delta", "p", "beta", "pt_seconds", "delta_a", "error", "failure"])?;
    for t in &result.trials {
        let h = &t.params;
        wr.write_record([
            h.theta.to_string(),
            h.eta.to_string(),
            h.lr.lr_base.to_string(),
            h.lr.delta.to_string(),
            h.lr.p.to_string(),
            h.lr.beta.to_string(),
            t.pt_seconds.to_string(),
            t.delta_a.to_string(),
            t.error.to_string(),
            t.failure.clone().unwrap_or_default(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}
