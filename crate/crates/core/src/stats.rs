//! Anomaly scores and group statistics.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{clips_for, Group, VolumeSequence};
use crate::error::{Error, Result};
use crate::scorer::FrameScorer;
use crate::tensor::Tensor;

/// Pearson correlation; `None` when either side is constant or shorter than 2.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len();
    if n < 2 || n != b.len() {
        return None;
    }
    let ma = a.iter().sum::<f64>() / n as f64;
    let mb = b.iter().sum::<f64>() / n as f64;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

// ---------------------------------------------------------------------------
// special functions

/// ln Γ(x) for x > 0 (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + 7.5;
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Continued fraction for the incomplete beta (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularised incomplete beta I_x(a, b).
pub fn reg_inc_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

/// Two-sided tail probability P(|T| >= |t|) for Student's t with `df` degrees of freedom.
pub fn t_two_sided_p(t: f64, df: f64) -> f64 {
    if t.is_nan() {
        return f64::NAN;
    }
    if t.is_infinite() {
        return 0.0;
    }
    reg_inc_beta(0.5 * df, 0.5, df / (df + t * t)).clamp(0.0, 1.0)
}

/// Student t cumulative distribution function.
pub fn t_cdf(t: f64, df: f64) -> f64 {
    let tail = 0.5 * t_two_sided_p(t, df);
    if t >= 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

// ---------------------------------------------------------------------------
// tests of location and ranking

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    pub p: f64,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0);
    (m, v)
}

/// Two-sample t-test of `mean(a) - mean(b)`: pooled variance by default,
/// Welch–Satterthwaite when `welch` is set.
pub fn ttest_unpaired(a: &[f64], b: &[f64], welch: bool) -> Result<TTest> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::invalid(
            "ttest_unpaired",
            format!("each sample needs at least 2 values, got {} and {}", a.len(), b.len()),
        ));
    }
    let (n1, n2) = (a.len() as f64, b.len() as f64);
    let (m1, v1) = mean_var(a);
    let (m2, v2) = mean_var(b);
    let (se, df) = if welch {
        let (s1, s2) = (v1 / n1, v2 / n2);
        let se2 = s1 + s2;
        let df = se2 * se2 / (s1 * s1 / (n1 - 1.0) + s2 * s2 / (n2 - 1.0));
        (se2.sqrt(), df)
    } else {
        let pooled = ((n1 - 1.0) * v1 + (n2 - 1.0) * v2) / (n1 + n2 - 2.0);
        ((pooled * (1.0 / n1 + 1.0 / n2)).sqrt(), n1 + n2 - 2.0)
    };
    if !(se > 0.0) {
        return Err(Error::Degenerate("t-test with zero variance in both samples".into()));
    }
    let t = (m1 - m2) / se;
    Ok(TTest {
        t,
        df,
        p: t_two_sided_p(t, df),
    })
}

/// P(positive > negative) + ½ P(tie) by counting all pairs.
pub fn auc_pairs(positive: &[f64], negative: &[f64]) -> Result<f64> {
    if positive.is_empty() || negative.is_empty() {
        return Err(Error::invalid(
            "roc_auc",
            format!("both groups must be non-empty, got {} and {}", positive.len(), negative.len()),
        ));
    }
    let mut wins = 0.0;
    for &p in positive {
        for &n in negative {
            if p > n {
                wins += 1.0;
            } else if p == n {
                wins += 0.5;
            }
        }
    }
    Ok(wins / (positive.len() * negative.len()) as f64)
}

/// AUC with patients as the positive class.
pub fn roc_auc(scores: &[(Group, f64)]) -> Result<f64> {
    let (pos, neg) = split_groups(scores.iter().copied());
    auc_pairs(&pos, &neg)
}

fn split_groups(scores: impl Iterator<Item = (Group, f64)>) -> (Vec<f64>, Vec<f64>) {
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for (g, v) in scores {
        match g {
            Group::Patient => pos.push(v),
            Group::Control => neg.push(v),
        }
    }
    (pos, neg)
}

/// Benjamini–Hochberg step-up decisions at level `q`, in input order.
pub fn bh_fdr(p_values: &[f64], q: f64) -> Result<Vec<bool>> {
    if let Some(p) = p_values.iter().find(|p| !(**p > 0.0 && **p <= 1.0)) {
        return Err(Error::invalid("bh_fdr", format!("p-value {p} outside (0, 1]")));
    }
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| p_values[i].total_cmp(&p_values[j]).then(i.cmp(&j)));
    let k = (1..=m)
        .rev()
        .find(|&k| p_values[order[k - 1]] <= k as f64 * q / m as f64)
        .unwrap_or(0);
    let mut reject = vec![false; m];
    for &i in &order[..k] {
        reject[i] = true;
    }
    Ok(reject)
}

/// Bonferroni decisions at family-wise level `q`.
pub fn bonferroni(p_values: &[f64], q: f64) -> Vec<bool> {
    let m = p_values.len() as f64;
    p_values.iter().map(|&p| p <= q / m).collect()
}

// ---------------------------------------------------------------------------
// subject scoring

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectScore {
    pub subject_id: String,
    pub group: Group,
    /// Squared error averaged over every scored frame and masked voxel.
    pub mean_error: f64,
    /// Volume frame index of each scored frame.
    pub frames: Vec<usize>,
    /// Mean squared error over masked voxels of each scored frame.
    pub per_frame_error: Vec<f64>,
    /// Masked voxels contributing to each scored frame.
    pub per_frame_pixels: Vec<usize>,
    /// `[X, Y, Z]` time-averaged squared error; 0 outside `scored`.
    pub per_voxel_error: Tensor,
    /// `[X, Y, Z]` 1 where a voxel was scored.
    pub scored: Tensor,
}

/// Scores every window of a subject with `scorer`.
pub fn score_subject(scorer: &dyn FrameScorer, volume: &VolumeSequence) -> Result<SubjectScore> {
    volume.validate()?;
    let t = scorer.input_len();
    let [nx, ny, nz] = volume.spatial_dims();
    let clips = clips_for(volume, t, scorer.spatial_multiple(), scorer.lookahead())?;
    if clips.is_empty() {
        return Err(Error::Degenerate(format!(
            "{}: no scorable windows ({} frames, T = {t})",
            volume.subject_id,
            volume.frames()
        )));
    }
    let offsets = scorer.scored_offsets();
    let preds: Vec<Tensor> = clips
        .par_iter()
        .map(|c| scorer.predict(&c.frames.time_range(0..scorer.window_len())))
        .collect::<Result<_>>()?;

    // per (absolute frame) sums; BTreeMap keeps frame order deterministic
    let mut frame_sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    let mut voxel_sum = Tensor::zeros(&[nx, ny, nz]);
    let mut voxel_count = Tensor::zeros(&[nx, ny, nz]);
    for (clip, pred) in clips.iter().zip(&preds) {
        let [_, h, w, k] = crate::tensor::dims4(pred.dims());
        if k != offsets.len() {
            return Err(Error::ShapeMismatch {
                op: "score_subject",
                expected: vec![1, h, w, offsets.len()],
                got: pred.dims().to_vec(),
            });
        }
        let len = clip.frames.dims()[3];
        for (j, &off) in offsets.iter().enumerate() {
            let entry = frame_sums.entry(clip.window.start + off).or_insert((0.0, 0));
            for hh in 0..h {
                for ww in 0..w {
                    let p = hh * w + ww;
                    if clip.mask.data()[p] == 0.0 {
                        continue;
                    }
                    let e = pred.data()[p * k + j] - clip.frames.data()[p * len + off];
                    let e2 = e * e;
                    entry.0 += e2;
                    entry.1 += 1;
                    let (x, y) = clip.source_pixel(hh, ww).expect("masked pixel inside source");
                    let v = [x, y, clip.z];
                    voxel_sum.set(&v, voxel_sum.get(&v) + e2);
                    voxel_count.set(&v, voxel_count.get(&v) + 1.0);
                }
            }
        }
    }
    let total: f64 = frame_sums.values().map(|s| s.0).sum();
    let count: usize = frame_sums.values().map(|s| s.1).sum();
    let per_voxel_error = Tensor::from_fn(&[nx, ny, nz], |i| {
        let c = voxel_count.data()[i];
        if c > 0.0 {
            voxel_sum.data()[i] / c
        } else {
            0.0
        }
    });
    let scored = voxel_count.map(|c| if c > 0.0 { 1.0 } else { 0.0 });
    Ok(SubjectScore {
        subject_id: volume.subject_id.clone(),
        group: volume.group,
        mean_error: total / count as f64,
        frames: frame_sums.keys().copied().collect(),
        per_frame_error: frame_sums.values().map(|s| s.0 / s.1 as f64).collect(),
        per_frame_pixels: frame_sums.values().map(|s| s.1).collect(),
        per_voxel_error,
        scored,
    })
}

// ---------------------------------------------------------------------------
// group and regional analysis

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionRow {
    pub region_id: usize,
    pub mean_err_control: f64,
    pub mean_err_patient: f64,
    pub t: f64,
    pub p: f64,
    pub fdr_pass: bool,
    pub neg_log10_p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionalTable {
    pub q: f64,
    pub rows: Vec<RegionRow>,
    /// Regions without scored voxels, or with zero variance in both groups.
    pub excluded: Vec<usize>,
}

/// Mean of `per_voxel_error` over scored voxels with each atlas label (label 0 ignored).
pub fn region_means(score: &SubjectScore, atlas: &Tensor) -> Result<BTreeMap<usize, f64>> {
    atlas.ensure_dims("regional_analysis", score.per_voxel_error.dims())?;
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for ((&label, &err), &s) in atlas.data().iter().zip(score.per_voxel_error.data()).zip(score.scored.data()) {
        if label > 0.0 && s != 0.0 {
            let e = acc.entry(label as usize).or_insert((0.0, 0));
            e.0 += err;
            e.1 += 1;
        }
    }
    Ok(acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect())
}

/// Per-region t-tests (patients minus controls) with BH-FDR at `q`.
pub fn regional_analysis(scores: &[SubjectScore], atlas: &Tensor, q: f64, welch: bool) -> Result<RegionalTable> {
    let mut all_labels: Vec<usize> = atlas.data().iter().filter(|&&l| l > 0.0).map(|&l| l as usize).collect();
    all_labels.sort_unstable();
    all_labels.dedup();
    let means: Vec<(Group, BTreeMap<usize, f64>)> = scores
        .iter()
        .map(|s| region_means(s, atlas).map(|m| (s.group, m)))
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    let mut excluded = Vec::new();
    for &label in &all_labels {
        let (pat, ctl) = split_groups(means.iter().filter_map(|(g, m)| m.get(&label).map(|&v| (*g, v))));
        if pat.len() < 2 || ctl.len() < 2 {
            excluded.push(label);
            continue;
        }
        match ttest_unpaired(&pat, &ctl, welch) {
            Ok(tt) => rows.push(RegionRow {
                region_id: label,
                mean_err_control: ctl.iter().sum::<f64>() / ctl.len() as f64,
                mean_err_patient: pat.iter().sum::<f64>() / pat.len() as f64,
                t: tt.t,
                p: tt.p,
                fdr_pass: false,
                neg_log10_p: -tt.p.log10(),
            }),
            Err(Error::Degenerate(_)) => excluded.push(label),
            Err(e) => return Err(e),
        }
    }
    if !excluded.is_empty() {
        log::warn!("regions excluded from the regional analysis: {excluded:?}");
    }
    // p can underflow to 0 for huge effects; keep BH well defined
    let ps: Vec<f64> = rows.iter().map(|r| r.p.max(f64::MIN_POSITIVE)).collect();
    for (row, pass) in rows.iter_mut().zip(bh_fdr(&ps, q)?) {
        row.fdr_pass = pass;
    }
    Ok(RegionalTable { q, rows, excluded })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub r: f64,
    pub p: f64,
    pub n: usize,
}

/// Pearson r with a two-sided p from t = r √((n−2)/(1−r²)).
pub fn correlation_test(a: &[f64], b: &[f64]) -> Result<Correlation> {
    let n = a.len();
    if n < 3 || b.len() != n {
        return Err(Error::invalid("motion_correlation", format!("need at least 3 paired values, got {n}")));
    }
    let r = pearson(a, b).ok_or_else(|| Error::Degenerate("correlation undefined: zero variance".into()))?;
    let p = if r.abs() >= 1.0 {
        0.0
    } else {
        let t = r * ((n as f64 - 2.0) / (1.0 - r * r)).sqrt();
        t_two_sided_p(t, n as f64 - 2.0)
    };
    Ok(Correlation { r, p, n })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionReport {
    pub frame_level: Correlation,
    pub subject_level: Correlation,
}

/// Correlates per-frame errors with fd on non-scrubbed frames, and subject
/// mean error with subject mean fd.
pub fn motion_correlation(scores: &[SubjectScore], volumes: &[VolumeSequence]) -> Result<MotionReport> {
    let (mut fe, mut ff, mut se, mut sf) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for s in scores {
        let vol = volumes
            .iter()
            .find(|v| v.subject_id == s.subject_id)
            .ok_or_else(|| Error::invalid("motion_correlation", format!("no volume for {}", s.subject_id)))?;
        let fd = vol
            .fd
            .as_ref()
            .ok_or_else(|| Error::invalid("motion_correlation", format!("{} has no fd series", s.subject_id)))?;
        for (&frame, &err) in s.frames.iter().zip(&s.per_frame_error) {
            let scrubbed = vol.scrubbed.as_ref().is_some_and(|sc| sc[frame]);
            if !scrubbed {
                fe.push(err);
                ff.push(fd[frame]);
            }
        }
        se.push(s.mean_error);
        sf.push(fd.iter().sum::<f64>() / fd.len() as f64);
    }
    Ok(MotionReport {
        frame_level: correlation_test(&fe, &ff)?,
        subject_level: correlation_test(&se, &sf)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub auc: f64,
    pub t: f64,
    pub p: f64,
    pub df: f64,
    pub welch: bool,
    pub n_control: usize,
    pub n_patient: usize,
    pub mean_control: f64,
    pub mean_patient: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regional: Option<RegionalTable>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub motion: Option<MotionReport>,
}

/// AUC and t-test of subject mean errors, patients against controls.
pub fn group_report(scores: &[ScoreRow], welch: bool) -> Result<GroupReport> {
    let (pat, ctl) = split_groups(scores.iter().map(|s| (s.group, s.mean_error)));
    let auc = auc_pairs(&pat, &ctl)?;
    let tt = ttest_unpaired(&pat, &ctl, welch)?;
    Ok(GroupReport {
        auc,
        t: tt.t,
        p: tt.p,
        df: tt.df,
        welch,
        n_control: ctl.len(),
        n_patient: pat.len(),
        mean_control: ctl.iter().sum::<f64>() / ctl.len() as f64,
        mean_patient: pat.iter().sum::<f64>() / pat.len() as f64,
        regional: None,
        motion: None,
    })
}

// ---------------------------------------------------------------------------
// files

/// One line of `scores.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub subject_id: String,
    pub group: Group,
    pub mean_error: f64,
}

impl From<&SubjectScore> for ScoreRow {
    fn from(s: &SubjectScore) -> Self {
        ScoreRow {
            subject_id: s.subject_id.clone(),
            group: s.group,
            mean_error: s.mean_error,
        }
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line: e.position().map(|p| p.line() as usize).unwrap_or(0),
        msg: e.to_string(),
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_scores(path: &Path, rows: &[ScoreRow]) -> Result<()> {
    write_csv(path, rows)
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRow>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut out = Vec::new();
    for r in rdr.deserialize() {
        let row: ScoreRow = r.map_err(|e| csv_err(path, e))?;
        if !(row.mean_error >= 0.0) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: out.len() + 2,
                msg: format!("mean_error {} must be a non-negative number", row.mean_error),
            });
        }
        out.push(row);
    }
    Ok(out)
}

pub fn write_regional(path: &Path, table: &RegionalTable) -> Result<()> {
    write_csv(path, &table.rows)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Per-frame errors of one subject as CSV (`frame,error,pixels`).
pub fn write_frame_errors(path: &Path, score: &SubjectScore) -> Result<()> {
    #[derive(Serialize)]
    struct Row {
        frame: usize,
        error: f64,
        pixels: usize,
    }
    let rows: Vec<Row> = score
        .frames
        .iter()
        .zip(&score.per_frame_error)
        .zip(&score.per_frame_pixels)
        .map(|((&frame, &error), &pixels)| Row { frame, error, pixels })
        .collect();
    write_csv(path, &rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_examples() {
        assert_eq!(auc_pairs(&[0.9, 0.8], &[0.1, 0.2]).unwrap(), 1.0);
        assert_eq!(auc_pairs(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.5);
        assert_eq!(auc_pairs(&[3.0, 1.0], &[2.0, 0.0]).unwrap(), 0.75);
        assert!(auc_pairs(&[], &[1.0]).is_err());
        let scores = [(Group::Patient, 3.0), (Group::Control, 2.0), (Group::Patient, 1.0), (Group::Control, 0.0)];
        assert_eq!(roc_auc(&scores).unwrap(), 0.75);
    }

    #[test]
    fn ttest_examples() {
        let tt = ttest_unpaired(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0], false).unwrap();
        assert!((tt.t + 3.674_234_614_174_767).abs() < 1e-12);
        assert_eq!(tt.df, 4.0);
        assert!((tt.p - 0.0213).abs() < 1e-3);
        let same = ttest_unpaired(&[1.0, 2.0, 4.0], &[1.0, 2.0, 4.0], false).unwrap();
        assert_eq!(same.t, 0.0);
        assert!((same.p - 1.0).abs() < 1e-15);
        let scaled = ttest_unpaired(&[10.0, 20.0, 30.0], &[40.0, 50.0, 60.0], false).unwrap();
        assert!((scaled.t - tt.t).abs() < 1e-12 && (scaled.p - tt.p).abs() < 1e-15);
        assert!(ttest_unpaired(&[1.0, 1.0], &[2.0, 2.0], false).is_err());
        assert!(ttest_unpaired(&[1.0], &[2.0, 3.0], false).is_err());
    }

    #[test]
    fn special_function_values() {
        assert!((ln_gamma(5.0) - 24.0_f64.ln()).abs() < 1e-13);
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-13);
        // Cauchy (df = 1): P(|T| > 1) = 0.5
        assert!((t_two_sided_p(1.0, 1.0) - 0.5).abs() < 1e-13);
        // df = 2 closed form: p = 1 - t / sqrt(2 + t^2)
        for t in [0.3, 1.7, 5.0] {
            let exact = 1.0 - t / (2.0_f64 + t * t).sqrt();
            assert!((t_two_sided_p(t, 2.0) - exact).abs() < 1e-13);
        }
        assert!((t_cdf(0.0, 7.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn bh_examples() {
        assert_eq!(bh_fdr(&[0.01, 0.02, 0.04, 0.2], 0.05).unwrap(), vec![true, true, false, false]);
        assert_eq!(bh_fdr(&[1.0; 5], 0.05).unwrap(), vec![false; 5]);
        assert_eq!(bh_fdr(&[0.04], 0.05).unwrap(), vec![true]);
        assert!(bh_fdr(&[0.0], 0.05).is_err());
        assert!(bh_fdr(&[1.2], 0.05).is_err());
    }

    #[test]
    fn correlation_examples() {
        let a = [0.1, 0.5, 0.2, 0.9];
        let c = correlation_test(&a, &a).unwrap();
        assert!((c.r - 1.0).abs() < 1e-12);
        assert!(matches!(correlation_test(&a, &[0.3; 4]), Err(Error::Degenerate(_))));
        assert!(correlation_test(&a[..2], &a[..2]).is_err());
    }
}
