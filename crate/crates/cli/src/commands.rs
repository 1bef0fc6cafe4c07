use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use restdyn_core::baselines::Baseline;
use restdyn_core::data::{
    clips_for, load_cohort, planted_regions, read_manifest, read_tensor, save_cohort, synth_cohort, write_tensor,
    DType, SliceClip, SynthConfig, VolumeSequence,
};
use restdyn_core::gradcheck::run_suite;
use restdyn_core::models::{load_weights, save_weights, Model, ModelSpec};
use restdyn_core::optim::{evaluate, train, AdamConfig, TrainConfig};
use restdyn_core::stats::{
    group_report, motion_correlation, read_scores, regional_analysis, score_subject, write_frame_errors, write_json,
    write_regional, write_scores, MotionReport, RegionalTable, ScoreRow, SubjectScore,
};
use restdyn_core::{Error, FrameScorer, Tensor};
use serde::Serialize;

use crate::config::*;
use crate::CliError;

type Result<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(io_err(path, std::io::Error::new(std::io::ErrorKind::NotFound, "no such file")))
    }
}

/// Accepts a cohort directory (holding `manifest.csv`) or the manifest itself.
fn manifest_path(data: &Path) -> Result<PathBuf> {
    let p = if data.is_dir() { data.join("manifest.csv") } else { data.to_path_buf() };
    require_file(&p)?;
    Ok(p)
}

/// Refuses output locations that would overwrite inputs.
fn check_out_dir(out: &Path, inputs: &[&Path]) -> Result<()> {
    let resolve = |p: &Path| p.canonicalize().unwrap_or_else(|_| p.to_path_buf());
    let o = resolve(out);
    for i in inputs {
        let i = resolve(i);
        let dir = if i.is_file() { i.parent().map(Path::to_path_buf).unwrap_or_default() } else { i };
        if o == dir {
            return Err(usage(format!("output {} would write into input {}", out.display(), dir.display())));
        }
    }
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

/// Validates paths and arguments, then writes `run.json` into `run_dir`
/// before any computation starts.
fn record(run_dir: &Path, config: &RunConfig) -> Result<()> {
    create_dir(run_dir)?;
    write_json(&run_dir.join("run.json"), config)?;
    Ok(())
}

pub fn execute(config: &RunConfig) -> Result<()> {
    match &config.run {
        Command::Synth(a) => synth(a, config),
        Command::Train(a) => train_cmd(a, config),
        Command::Baseline(a) => baseline(a, config),
        Command::Score(a) => score(a, config),
        Command::Stats(a) => stats(a, config),
        Command::Regional(a) => regional(a, config),
        Command::Gradcheck(a) => gradcheck(a, config),
        Command::Replay(_) => Err(usage("replay cannot be nested")),
    }
}

pub fn synth_config(a: &SynthArgs) -> Result<SynthConfig> {
    let atlas_blocks: [usize; 3] = a
        .atlas_blocks
        .as_slice()
        .try_into()
        .map_err(|_| usage(format!("--atlas-blocks needs 3 values, got {}", a.atlas_blocks.len())))?;
    let cfg = SynthConfig {
        n_control: a.controls,
        n_patient: a.patients,
        x: a.x,
        y: a.y,
        z: a.z,
        n: a.frames,
        seed: a.seed,
        anomaly_strength: a.anomaly_strength,
        blobs: a.blobs,
        atlas_blocks,
        anomalous_regions: a.anomalous_regions,
        signal_amplitude: a.signal_amplitude,
        noise_sigma: a.noise_sigma,
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

#[derive(Serialize)]
struct Planted {
    regions: Vec<usize>,
}

fn synth(a: &SynthArgs, config: &RunConfig) -> Result<()> {
    let cfg = synth_config(a)?;
    record(&a.out, config)?;
    let cohort = synth_cohort(&cfg)?;
    let manifest = save_cohort(&a.out, &cohort)?;
    write_json(
        &a.out.join("planted_regions.json"),
        &Planted {
            regions: planted_regions(&cfg),
        },
    )?;
    info!("wrote {} subjects to {}", cohort.len(), manifest.display());
    Ok(())
}

fn select(cohort: Vec<VolumeSequence>, group: GroupFilter, ids: &[String]) -> Result<Vec<VolumeSequence>> {
    for id in ids {
        if !cohort.iter().any(|v| &v.subject_id == id) {
            return Err(usage(format!("subject `{id}` is not in the cohort")));
        }
    }
    let picked: Vec<_> = cohort
        .into_iter()
        .filter(|v| group.admits(v.group) && (ids.is_empty() || ids.contains(&v.subject_id)))
        .collect();
    if picked.is_empty() {
        return Err(usage("no subjects match the selection"));
    }
    Ok(picked)
}

pub fn model_spec(a: &TrainArgs) -> Result<ModelSpec> {
    let spec = ModelSpec {
        levels: a.levels,
        channels: a.channels.clone(),
        bottleneck: a.bottleneck,
        skip_mode: a.skip_mode,
        skips: !a.no_skips,
        hidden_activation: a.hidden_activation,
        output_activation: a.output_activation,
        kernel: a.kernel,
        t: a.t,
        ..ModelSpec::new(a.model)
    };
    spec.validate().map_err(|e| usage(e.to_string()))?;
    Ok(spec)
}

pub fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    if !(a.grad_clip >= 0.0) {
        return Err(usage("--grad-clip must be non-negative"));
    }
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch,
        val_fraction: a.val_split,
        seed: a.seed,
        shuffle: true,
        adam: AdamConfig {
            lr: a.lr,
            amsgrad: !a.no_amsgrad,
            grad_clip_norm: (a.grad_clip > 0.0).then_some(a.grad_clip),
            ..AdamConfig::default()
        },
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

#[derive(Serialize)]
struct TrainSummary {
    model: String,
    parameters: usize,
    subjects: Vec<String>,
    clips: usize,
    steps: usize,
    final_train_mse: f64,
    final_val_mse: Option<f64>,
}

fn train_cmd(a: &TrainArgs, config: &RunConfig) -> Result<()> {
    let manifest = manifest_path(&a.data)?;
    check_out_dir(&a.out, &[&manifest])?;
    let spec = model_spec(a)?;
    let tc = train_config(a)?;
    record(&a.out, config)?;

    let vols = select(load_cohort(&manifest)?, a.group, &a.subjects)?;
    let mut clips: Vec<SliceClip> = Vec::new();
    for v in &vols {
        clips.extend(clips_for(v, spec.t, spec.spatial_multiple(), 0)?);
    }
    info!("{} clips from {} subjects", clips.len(), vols.len());
    let mut model = Model::build(spec, a.seed)?;
    let history = train(&mut model, &clips, &tc)?;
    save_weights(&model, a.out.join("weights.vxw"))?;
    let hist_path = a.out.join("history.csv");
    fs::write(&hist_path, history.to_csv()).map_err(|e| io_err(&hist_path, e))?;
    let last = history.epochs.last();
    write_json(
        &a.out.join("train.json"),
        &TrainSummary {
            model: model.kind().to_string(),
            parameters: model.weights().num_scalars(),
            subjects: vols.iter().map(|v| v.subject_id.clone()).collect(),
            clips: clips.len(),
            steps: history.step_losses.len(),
            final_train_mse: last.map_or(f64::NAN, |r| r.train_mse),
            final_val_mse: last.and_then(|r| r.val_mse),
        },
    )?;
    Ok(())
}

#[derive(Serialize)]
struct ScoringSummary {
    scorer: String,
    t: usize,
    subjects: usize,
    clips: usize,
    mse: f64,
    mean_pearson: f64,
    frames: usize,
}

/// Shared tail of `score` and `baseline`: per-subject scores, per-frame and
/// per-voxel errors, clip-level evaluation and, when every subject has fd,
/// the motion correlation.
fn write_scoring(scorer: &dyn FrameScorer, vols: &[VolumeSequence], out: &Path) -> Result<()> {
    let frames_dir = out.join("frame_errors");
    let voxel_dir = out.join("voxel_errors");
    create_dir(&frames_dir)?;
    create_dir(&voxel_dir)?;

    let mut scores = Vec::with_capacity(vols.len());
    let mut clips = Vec::new();
    for v in vols {
        let s = score_subject(scorer, v)?;
        write_frame_errors(&frames_dir.join(format!("{}.csv", s.subject_id)), &s)?;
        write_tensor(&voxel_dir.join(format!("{}.vxt", s.subject_id)), &s.per_voxel_error, DType::F64)?;
        write_tensor(&voxel_dir.join(format!("{}_scored.vxt", s.subject_id)), &s.scored, DType::U8)?;
        info!("{}: mean error {:.6}", s.subject_id, s.mean_error);
        scores.push(s);
        clips.extend(clips_for(v, scorer.input_len(), scorer.spatial_multiple(), scorer.lookahead())?);
    }
    let rows: Vec<ScoreRow> = scores.iter().map(ScoreRow::from).collect();
    write_scores(&out.join("scores.csv"), &rows)?;

    let ev = evaluate(scorer, &clips)?;
    write_json(
        &out.join("evaluation.json"),
        &ScoringSummary {
            scorer: scorer.name(),
            t: scorer.input_len(),
            subjects: vols.len(),
            clips: clips.len(),
            mse: ev.mse,
            mean_pearson: ev.mean_pearson,
            frames: ev.frames,
        },
    )?;

    if vols.iter().all(|v| v.fd.is_some()) && vols.len() >= 3 {
        match motion_correlation(&scores, vols) {
            Ok(m) => write_json(&out.join("motion.json"), &m)?,
            Err(e) => warn!("motion correlation skipped: {e}"),
        }
    }
    Ok(())
}

fn baseline(a: &BaselineArgs, config: &RunConfig) -> Result<()> {
    let manifest = manifest_path(&a.data)?;
    check_out_dir(&a.out, &[&manifest])?;
    let scorer = Baseline::new(a.method, a.t).map_err(|e| usage(e.to_string()))?;
    record(&a.out, config)?;
    let vols = select(load_cohort(&manifest)?, a.group, &[])?;
    write_scoring(&scorer, &vols, &a.out)
}

fn score(a: &ScoreArgs, config: &RunConfig) -> Result<()> {
    require_file(&a.weights)?;
    let manifest = manifest_path(&a.data)?;
    check_out_dir(&a.out, &[&manifest, &a.weights])?;
    let mut model = load_weights(&a.weights)?;
    if let Some(t) = a.t {
        model = model.with_sequence_length(t).map_err(|e| usage(e.to_string()))?;
    }
    record(&a.out, config)?;
    let vols = select(load_cohort(&manifest)?, a.group, &[])?;
    write_scoring(&model, &vols, &a.out)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| {
        CliError::Data(Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            msg: e.to_string(),
        })
    })
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn stats(a: &StatsArgs, config: &RunConfig) -> Result<()> {
    require_file(&a.scores)?;
    let mut extras: Vec<&Path> = vec![&a.scores];
    for p in a.regional.iter().chain(&a.motion) {
        require_file(p)?;
        extras.push(p);
    }
    if extras.contains(&a.out.as_path()) {
        return Err(usage("--out would overwrite an input"));
    }
    let run_dir = parent_dir(&a.out);
    if extras.iter().any(|p| parent_dir(p).join("run.json") == run_dir.join("run.json")) {
        return Err(usage("--out must not share a directory with its inputs (run.json would be replaced)"));
    }
    record(&run_dir, config)?;

    let rows = read_scores(&a.scores)?;
    let mut report = group_report(&rows, a.welch)?;
    if let Some(p) = &a.regional {
        report.regional = Some(read_json::<RegionalTable>(p)?);
    }
    if let Some(p) = &a.motion {
        report.motion = Some(read_json::<MotionReport>(p)?);
    }
    info!("AUC {:.3}, t {:.3}, p {:.3e}", report.auc, report.t, report.p);
    write_json(&a.out, &report)?;
    Ok(())
}

/// Rebuilds the voxel fields of subject scores from a scoring directory.
fn load_voxel_scores(dir: &Path, rows: &[ScoreRow]) -> Result<Vec<SubjectScore>> {
    rows.iter()
        .map(|r| {
            let (per_voxel_error, _) = read_tensor(&dir.join("voxel_errors").join(format!("{}.vxt", r.subject_id)))?;
            let (scored, _) = read_tensor(&dir.join("voxel_errors").join(format!("{}_scored.vxt", r.subject_id)))?;
            Ok(SubjectScore {
                subject_id: r.subject_id.clone(),
                group: r.group,
                mean_error: r.mean_error,
                frames: vec![],
                per_frame_error: vec![],
                per_frame_pixels: vec![],
                per_voxel_error,
                scored,
            })
        })
        .collect()
}

/// The atlas shared by every subject of a cohort.
fn cohort_atlas(manifest: &Path) -> Result<Tensor> {
    let base = parent_dir(manifest);
    let mut atlas: Option<Tensor> = None;
    for row in read_manifest(manifest)? {
        let Some(p) = row.atlas_path else {
            return Err(CliError::Data(Error::Degenerate(format!("{} has no atlas", row.subject_id))));
        };
        let (t, _) = read_tensor(&base.join(p))?;
        match &atlas {
            None => atlas = Some(t),
            Some(a) if *a == t => {}
            Some(_) => {
                return Err(CliError::Data(Error::Degenerate(format!(
                    "{} uses a different atlas; regional analysis needs one shared atlas",
                    row.subject_id
                ))))
            }
        }
    }
    atlas.ok_or_else(|| CliError::Data(Error::Degenerate("empty manifest".into())))
}

fn regional(a: &RegionalArgs, config: &RunConfig) -> Result<()> {
    let scores_csv = a.scores_dir.join("scores.csv");
    require_file(&scores_csv)?;
    let manifest = manifest_path(&a.data)?;
    check_out_dir(&a.out, &[&manifest, &a.scores_dir])?;
    if !(a.fdr_q > 0.0 && a.fdr_q < 1.0) {
        return Err(usage("--fdr-q must lie in (0, 1)"));
    }
    record(&a.out, config)?;

    let rows = read_scores(&scores_csv)?;
    let scores = load_voxel_scores(&a.scores_dir, &rows)?;
    let atlas = cohort_atlas(&manifest)?;
    let table = regional_analysis(&scores, &atlas, a.fdr_q, a.welch)?;
    write_regional(&a.out.join("regional.csv"), &table)?;
    write_json(&a.out.join("regional.json"), &table)?;
    let passing: Vec<usize> = table.rows.iter().filter(|r| r.fdr_pass).map(|r| r.region_id).collect();
    info!("regions passing FDR at q = {}: {passing:?}", a.fdr_q);
    Ok(())
}

fn gradcheck(a: &GradcheckArgs, config: &RunConfig) -> Result<()> {
    record(&a.out, config)?;
    let reports = run_suite()?;
    for r in &reports {
        println!("{r}");
    }
    write_json(&a.out.join("gradcheck.json"), &reports)?;
    let failed = reports.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(CliError::Check(format!("{failed} of {} gradient checks failed", reports.len())));
    }
    Ok(())
}

/// Redirects a command's outputs (used by `replay --out`).
pub fn set_out(cmd: &mut Command, out: PathBuf) {
    match cmd {
        Command::Synth(a) => a.out = out,
        Command::Train(a) => a.out = out,
        Command::Baseline(a) => a.out = out,
        Command::Score(a) => a.out = out,
        Command::Stats(a) => a.out = out,
        Command::Regional(a) => a.out = out,
        Command::Gradcheck(a) => a.out = out,
        Command::Replay(_) => {}
    }
}
