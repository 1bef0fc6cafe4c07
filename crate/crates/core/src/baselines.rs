//! Non-learning next-frame estimators.
//!
//! Every estimator works per pixel along the trailing time axis, so clips of
//! any leading shape are accepted. Spline outputs are clamped to `[0, 1]`
//! because inputs are min-max scaled.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scorer::{FrameScorer, ScoreMode};
use crate::tensor::Tensor;

/// Natural cubic spline (zero second derivative at both end knots).
#[derive(Debug, Clone, PartialEq)]
pub struct NaturalSpline {
    knots: Vec<f64>,
    values: Vec<f64>,
    second: Vec<f64>,
}

impl NaturalSpline {
    /// Fits through `(knots[i], values[i])`; knots must be strictly increasing.
    pub fn fit(knots: &[f64], values: &[f64]) -> Result<Self> {
        let n = knots.len();
        if n != values.len() {
            return Err(Error::invalid(
                "spline_fit_natural",
                format!("{n} knots but {} values", values.len()),
            ));
        }
        if n < 2 {
            return Err(Error::invalid("spline_fit_natural", format!("need at least 2 points, got {n}")));
        }
        if knots.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::invalid("spline_fit_natural", "knots must be strictly increasing"));
        }
        let mut second = vec![0.0; n];
        if n > 2 {
            // Thomas algorithm on the interior equations
            // h[i-1] M[i-1] + 2 (h[i-1] + h[i]) M[i] + h[i] M[i+1] = 6 (slope[i] - slope[i-1])
            let h: Vec<f64> = knots.windows(2).map(|w| w[1] - w[0]).collect();
            let slope: Vec<f64> = (0..n - 1).map(|i| (values[i + 1] - values[i]) / h[i]).collect();
            let m = n - 2;
            let mut diag = vec![0.0; m];
            let mut rhs = vec![0.0; m];
            for k in 0..m {
                diag[k] = 2.0 * (h[k] + h[k + 1]);
                rhs[k] = 6.0 * (slope[k + 1] - slope[k]);
            }
            for k in 1..m {
                let w = h[k] / diag[k - 1];
                diag[k] -= w * h[k];
                rhs[k] -= w * rhs[k - 1];
            }
            second[m] = rhs[m - 1] / diag[m - 1];
            for k in (0..m - 1).rev() {
                second[k + 1] = (rhs[k] - h[k + 1] * second[k + 2]) / diag[k];
            }
        }
        Ok(NaturalSpline {
            knots: knots.to_vec(),
            values: values.to_vec(),
            second,
        })
    }

    /// Fit on knots `0, 1, ..., n-1`.
    pub fn fit_uniform(values: &[f64]) -> Result<Self> {
        let knots: Vec<f64> = (0..values.len()).map(|i| i as f64).collect();
        Self::fit(&knots, values)
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Second derivatives at the knots.
    pub fn second_derivatives(&self) -> &[f64] {
        &self.second
    }

    /// Evaluates the piece containing `x`; outside the knot range the first
    /// or last piece is extended.
    pub fn eval(&self, x: f64) -> f64 {
        let n = self.knots.len();
        let i = match self.knots[1..n - 1].iter().position(|&k| x < k) {
            Some(p) => p,
            None => n - 2,
        };
        let (x0, x1) = (self.knots[i], self.knots[i + 1]);
        let h = x1 - x0;
        let (a, b) = (x1 - x, x - x0);
        let (m0, m1) = (self.second[i], self.second[i + 1]);
        m0 * a * a * a / (6.0 * h)
            + m1 * b * b * b / (6.0 * h)
            + (self.values[i] / h - m0 * h / 6.0) * a
            + (self.values[i + 1] / h - m1 * h / 6.0) * b
    }
}

/// Spline on `0..T-1` evaluated at `T`, unclamped.
pub fn extrapolate_series(values: &[f64]) -> Result<f64> {
    if values.len() < 2 {
        return Err(Error::invalid(
            "spline_extrapolate_next",
            format!("need T >= 2, got {}", values.len()),
        ));
    }
    Ok(NaturalSpline::fit_uniform(values)?.eval(values.len() as f64))
}

/// Spline on `{0..T-1} ∪ {T+1}` evaluated at `T`, unclamped.
pub fn interpolate_series(before: &[f64], after: f64) -> Result<f64> {
    let t = before.len();
    if t == 0 {
        return Err(Error::invalid("spline_interpolate_missing", "need T >= 1"));
    }
    let mut knots: Vec<f64> = (0..t).map(|i| i as f64).collect();
    knots.push((t + 1) as f64);
    let mut values = before.to_vec();
    values.push(after);
    Ok(NaturalSpline::fit(&knots, &values)?.eval(t as f64))
}

fn split_time(clip: &Tensor, op: &'static str) -> Result<(Vec<usize>, usize)> {
    let (&t, lead) = clip
        .dims()
        .split_last()
        .ok_or_else(|| Error::invalid(op, "clip has no time axis"))?;
    if t == 0 {
        return Err(Error::invalid(op, "clip has no frames"));
    }
    Ok((lead.to_vec(), t))
}

/// Frame `T-1` of a `[..., T]` clip.
pub fn last_frame_copy(clip: &Tensor) -> Result<Tensor> {
    let (lead, t) = split_time(clip, "last_frame_copy")?;
    let data = clip.data().chunks(t).map(|s| s[t - 1]).collect();
    Tensor::from_vec(&lead, data)
}

/// Per-pixel natural-spline extrapolation of a `[..., T]` clip to frame `T`.
pub fn spline_extrapolate_next(clip: &Tensor) -> Result<Tensor> {
    let (lead, _) = split_time(clip, "spline_extrapolate_next")?;
    let data = clip
        .data()
        .chunks(*clip.dims().last().unwrap())
        .map(|s| extrapolate_series(s).map(|v| v.clamp(0.0, 1.0)))
        .collect::<Result<_>>()?;
    Tensor::from_vec(&lead, data)
}

/// Per-pixel spline through `before` (`[..., T]`) and `after` (`[...]`),
/// evaluated at the gap between them.
pub fn spline_interpolate_missing(before: &Tensor, after: &Tensor) -> Result<Tensor> {
    let (lead, t) = split_time(before, "spline_interpolate_missing")?;
    after.ensure_dims("spline_interpolate_missing", &lead)?;
    let data = before
        .data()
        .chunks(t)
        .zip(after.data())
        .map(|(s, &a)| interpolate_series(s, a).map(|v| v.clamp(0.0, 1.0)))
        .collect::<Result<_>>()?;
    Tensor::from_vec(&lead, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMethod {
    Copy,
    Extrapolate,
    Interpolate,
}

impl BaselineMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            BaselineMethod::Copy => "copy",
            BaselineMethod::Extrapolate => "extrapolate",
            BaselineMethod::Interpolate => "interpolate",
        }
    }
}

impl fmt::Display for BaselineMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BaselineMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(BaselineMethod::Copy),
            "extrapolate" => Ok(BaselineMethod::Extrapolate),
            "interpolate" => Ok(BaselineMethod::Interpolate),
            other => Err(Error::invalid(
                "baseline",
                format!("unknown method {other:?} (expected copy, extrapolate or interpolate)"),
            )),
        }
    }
}

/// A baseline bound to an input length so it can be scored like a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Baseline {
    pub method: BaselineMethod,
    pub t: usize,
}

impl Baseline {
    pub fn new(method: BaselineMethod, t: usize) -> Result<Self> {
        let min = match method {
            BaselineMethod::Extrapolate => 2,
            _ => 1,
        };
        if t < min {
            return Err(Error::invalid(
                "baseline",
                format!("{method} needs T >= {min}, got {t}"),
            ));
        }
        Ok(Baseline { method, t })
    }
}

impl FrameScorer for Baseline {
    fn name(&self) -> String {
        self.method.to_string()
    }

    fn mode(&self) -> ScoreMode {
        ScoreMode::NextFrame
    }

    fn input_len(&self) -> usize {
        self.t
    }

    fn lookahead(&self) -> usize {
        usize::from(self.method == BaselineMethod::Interpolate)
    }

    fn predict(&self, frames: &Tensor) -> Result<Tensor> {
        let len = *frames.dims().last().unwrap_or(&0);
        if len < self.window_len() {
            return Err(Error::invalid(
                "baseline",
                format!("window has {len} frames, {} needs {}", self.method, self.window_len()),
            ));
        }
        let input = frames.time_range(0..self.t);
        let frame = match self.method {
            BaselineMethod::Copy => last_frame_copy(&input)?,
            BaselineMethod::Extrapolate => spline_extrapolate_next(&input)?,
            BaselineMethod::Interpolate => {
                let after = frames.time_range(self.t + 1..self.t + 2);
                let lead = &after.dims()[..after.ndim() - 1].to_vec();
                spline_interpolate_missing(&input, &after.reshape(lead)?)?
            }
        };
        let mut dims = frame.dims().to_vec();
        dims.push(1);
        frame.reshape(&dims)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_solved_four_knot_system() {
        // 4 M1 + M2 = -12 and M1 + 4 M2 = 12 give M1 = -4, M2 = 4
        let s = NaturalSpline::fit_uniform(&[0.0, 1.0, 0.0, 1.0]).unwrap();
        let m = s.second_derivatives();
        assert_eq!(m[0], 0.0);
        assert_eq!(m[3], 0.0);
        assert!((m[1] + 4.0).abs() < 1e-12);
        assert!((m[2] - 4.0).abs() < 1e-12);
        for (i, y) in [0.0, 1.0, 0.0, 1.0].iter().enumerate() {
            assert!((s.eval(i as f64) - y).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_and_constant_reproduction() {
        let ys: Vec<f64> = (0..6).map(|t| 2.0 * t as f64).collect();
        let s = NaturalSpline::fit_uniform(&ys).unwrap();
        assert!((s.eval(2.5) - 5.0).abs() < 1e-12);
        assert!((extrapolate_series(&ys).unwrap() - 12.0).abs() < 1e-10);
        assert!((interpolate_series(&ys, 14.0).unwrap() - 12.0).abs() < 1e-10);
        assert!((extrapolate_series(&[0.4; 7]).unwrap() - 0.4).abs() < 1e-12);
        assert!((extrapolate_series(&[0.2, 0.6]).unwrap() - 1.0).abs() < 1e-12);
        assert!(NaturalSpline::fit_uniform(&[1.0]).is_err());
        assert!(extrapolate_series(&[1.0]).is_err());
    }

    #[test]
    fn frame_level_baselines() {
        // ramp with slope 0.05 per frame at every pixel
        let clip = Tensor::from_fn(&[1, 2, 2, 5], |i| 0.1 + 0.05 * (i % 5) as f64 + 0.01 * (i / 5) as f64);
        let copy = last_frame_copy(&clip).unwrap();
        let ext = spline_extrapolate_next(&clip).unwrap();
        for p in 0..4 {
            let next = 0.1 + 0.05 * 5.0 + 0.01 * p as f64;
            assert!(((next - copy.data()[p]).abs() - 0.05).abs() < 1e-12);
            assert!((ext.data()[p] - next).abs() < 1e-10);
        }
        let zeros = Tensor::zeros(&[1, 2, 2, 3]);
        let out = spline_interpolate_missing(&zeros, &Tensor::zeros(&[1, 2, 2])).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        // overshoot is clamped
        let steep = Tensor::from_vec(&[1, 3], vec![0.0, 0.5, 1.0]).unwrap();
        assert_eq!(spline_extrapolate_next(&steep).unwrap().data(), &[1.0]);
    }

    #[test]
    fn scorer_shapes() {
        let b = Baseline::new(BaselineMethod::Interpolate, 3).unwrap();
        assert_eq!(b.window_len(), 5);
        let frames = Tensor::from_fn(&[1, 2, 2, 5], |i| 0.1 * (i % 5) as f64);
        let out = b.predict(&frames).unwrap();
        assert_eq!(out.dims(), &[1, 2, 2, 1]);
        assert!(out.data().iter().all(|v| (v - 0.3).abs() < 1e-12));
        assert!(Baseline::new(BaselineMethod::Extrapolate, 1).is_err());
        assert!("spline".parse::<BaselineMethod>().is_err());
    }
}
