//! The cascade: Stage 1 over the whole piece, then windowed networks whose
//! outputs are stitched back together after every stage.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baseline::synthesize_baseline;
use crate::error::{Error, Result};
use crate::eval::{evaluate, ContactScore, MetricsReport};
use crate::keyboard::KeyboardGeometry;
use crate::nn::{ParamStore, Tensor};
use crate::pose::{BoneTable, HandPose, PoseNet, PoseRefiner, NUM_JOINTS, TIPS};
use crate::prior::{PositionPrior, WristOffsetPrior};
use crate::refine::{midi_features, moving_average, press_rows, Refiner, TemporalSmoother};
use crate::score::fingering::FingeringGrid;
use crate::score::midi::NoteEvent;
use crate::score::raster::FrameGrid;
use crate::score::window::{make_windows, Window, WINDOW_STRIDE};
use crate::types::{FingertipTrajectory, Hand, WristTrajectory, NUM_FINGERS};
use crate::wrist::{base_wrist, WristRefiner};

use super::config::PipelineConfig;
use super::corpus::Piece;
use super::stitch::stitch_windows;
use super::trajfile::TrajectoryFile;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "S1")]
    S1,
    #[serde(rename = "S2.1")]
    S2_1,
    #[serde(rename = "S2.2")]
    S2_2,
    #[serde(rename = "S2.3")]
    S2_3,
    #[serde(rename = "S3")]
    S3,
    #[serde(rename = "S4")]
    S4,
}

impl Stage {
    pub const ALL: [Stage; 6] = [Stage::S1, Stage::S2_1, Stage::S2_2, Stage::S2_3, Stage::S3, Stage::S4];

    pub fn tag(self) -> &'static str {
        match self {
            Stage::S1 => "S1",
            Stage::S2_1 => "S2.1",
            Stage::S2_2 => "S2.2",
            Stage::S2_3 => "S2.3",
            Stage::S3 => "S3",
            Stage::S4 => "S4",
        }
    }

    /// Accepts `2.1` as well as `S2.1`.
    pub fn parse(s: &str) -> Result<Stage> {
        let t = s.trim();
        let t = t.strip_prefix('S').or_else(|| t.strip_prefix('s')).unwrap_or(t);
        Stage::ALL
            .into_iter()
            .find(|st| &st.tag()[1..] == t)
            .ok_or_else(|| Error::Argument(format!("unknown stage {s:?}; expected one of 1, 2.1, 2.2, 2.3, 3, 4")))
    }

    /// Stages whose output is fingertips only.
    pub fn is_fingertip(self) -> bool {
        self <= Stage::S2_3
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

/// Network modules for a configuration. Parameters live in [`Models`].
pub struct Networks {
    pub s2_1: Refiner,
    pub s2_2: Refiner,
    pub s2_3: TemporalSmoother,
    pub s3: WristRefiner,
    pub s4_net: PoseNet,
    pub s4_ref: PoseRefiner,
}

impl Networks {
    pub fn new(cfg: &PipelineConfig) -> Result<Self> {
        Ok(Self {
            s2_1: Refiner::new("s2_1", cfg.refiner.clone(), false)?,
            s2_2: Refiner::new("s2_2", cfg.refiner.clone(), true)?,
            s2_3: TemporalSmoother::new("s2_3", NUM_FINGERS * 3, 0, cfg.smoother.clone())?,
            s3: WristRefiner::new("s3", cfg.wrist.clone())?,
            s4_net: PoseNet::new("s4.net", cfg.pose.clone())?,
            s4_ref: PoseRefiner::new("s4.ref", cfg.pose_refiner.clone())?,
        })
    }
}

/// Everything learned: priors, per-stage parameters and the bone table.
#[derive(Debug, Clone, PartialEq)]
pub struct Models {
    pub prior: PositionPrior,
    pub offsets: Option<WristOffsetPrior>,
    pub s2_1: Option<ParamStore>,
    pub s2_2: Option<ParamStore>,
    pub s2_3: Option<ParamStore>,
    pub s3: Option<ParamStore>,
    pub s4: Option<ParamStore>,
    pub bones: Option<BoneTable>,
}

impl Models {
    pub fn new(prior: PositionPrior, offsets: Option<WristOffsetPrior>) -> Self {
        Self {
            prior,
            offsets,
            s2_1: None,
            s2_2: None,
            s2_3: None,
            s3: None,
            s4: None,
            bones: None,
        }
    }

    /// Loads whatever exists in the model directory; the prior is required.
    pub fn load(cfg: &PipelineConfig) -> Result<Self> {
        let m = &cfg.models;
        let (prior, offsets) = PositionPrior::load(cfg.model_path(&m.prior))?;
        let store = |name: &str| -> Result<Option<ParamStore>> {
            let p = cfg.model_path(name);
            if p.exists() { ParamStore::load(&p).map(Some) } else { Ok(None) }
        };
        let bones_path = cfg.model_path(&m.bones);
        Ok(Self {
            prior,
            offsets,
            s2_1: store(&m.s2_1)?,
            s2_2: store(&m.s2_2)?,
            s2_3: store(&m.s2_3)?,
            s3: store(&m.s3)?,
            s4: store(&m.s4)?,
            bones: if bones_path.exists() { Some(BoneTable::load(bones_path)?) } else { None },
        })
    }

    pub fn save(&self, cfg: &PipelineConfig) -> Result<()> {
        let m = &cfg.models;
        std::fs::create_dir_all(&cfg.model_dir)?;
        self.prior.save(cfg.model_path(&m.prior), self.offsets.as_ref())?;
        for (store, name) in [(&self.s2_1, &m.s2_1), (&self.s2_2, &m.s2_2), (&self.s2_3, &m.s2_3), (&self.s3, &m.s3), (&self.s4, &m.s4)] {
            if let Some(s) = store {
                s.save(&cfg.model_path(name))?;
            }
        }
        if let Some(b) = &self.bones {
            b.save(cfg.model_path(&m.bones))?;
        }
        Ok(())
    }

    fn need<'a, T>(slot: &'a Option<T>, stage: Stage) -> Result<&'a T> {
        slot.as_ref()
            .ok_or_else(|| Error::Config("no trained model for this stage".into()).in_stage(stage.tag()))
    }
}

/// Largest residuals observed during a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub max_tip_residual_mm: f32,
    pub max_wrist_residual_mm: f32,
    pub mean_pose_residual_mm: Option<f64>,
    /// Residuals beyond the configured bounds; always zero when clamping works.
    pub clamp_violations: usize,
    pub windows: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub frames: usize,
    pub tips: BTreeMap<Stage, [FingertipTrajectory; 2]>,
    pub wrists: Option<[WristTrajectory; 2]>,
    pub poses: Option<[HandPose; 2]>,
    pub diagnostics: Diagnostics,
}

impl PipelineOutput {
    pub fn last_stage(&self) -> Option<Stage> {
        if self.poses.is_some() {
            Some(Stage::S4)
        } else if self.wrists.is_some() {
            Some(Stage::S3)
        } else {
            self.tips.keys().next_back().copied()
        }
    }

    /// Fingertips of `stage`, or of the latest earlier stage that ran.
    pub fn tips_at(&self, stage: Stage) -> Option<&[FingertipTrajectory; 2]> {
        self.tips.range(..=stage).next_back().map(|(_, t)| t)
    }

    /// Every stage output as trajectory files named `<stage>.<hand>.tptj`.
    pub fn files(&self) -> Vec<(String, TrajectoryFile)> {
        let mut out = Vec::new();
        let name = |s: Stage, h: Hand| format!("{}.{}.tptj", s.tag(), h.tag());
        for (stage, tips) in &self.tips {
            for t in tips {
                out.push((name(*stage, t.hand), TrajectoryFile::from_tips(t, stage.tag())));
            }
        }
        if let Some(w) = &self.wrists {
            for t in w {
                out.push((name(Stage::S3, t.hand), TrajectoryFile::from_wrist(t, "S3")));
            }
        }
        if let Some(p) = &self.poses {
            for t in p {
                out.push((name(Stage::S4, t.hand), TrajectoryFile::from_pose(t, "S4")));
            }
        }
        out
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<Vec<std::path::PathBuf>> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut paths = Vec::new();
        for (name, file) in self.files() {
            let p = dir.join(name);
            file.save(&p)?;
            paths.push(p);
        }
        Ok(paths)
    }
}

pub(crate) fn slice_rows(t: &Tensor<f32>, start: usize, len: usize) -> Result<Tensor<f32>> {
    let c = t.cols();
    Tensor::new(&[len, c], t.data()[start * c..(start + len) * c].to_vec())
}

pub(crate) fn slice_tips(t: &FingertipTrajectory, w: &Window) -> FingertipTrajectory {
    FingertipTrajectory { hand: t.hand, frames: t.frames[w.frames()].to_vec() }
}

/// Cells holding pressed fingertip Y/Z, `[T, joints*3]` flattened.
fn pressed_cells(fingering: &FingeringGrid, hand: Hand, joints: usize, joint_of: impl Fn(usize) -> usize) -> Vec<bool> {
    let rows = press_rows(fingering, hand);
    let mut out = vec![false; rows.len() * joints * 3];
    for (t, r) in rows.iter().enumerate() {
        for f in 0..NUM_FINGERS {
            if r[f] {
                let b = (t * joints + joint_of(f)) * 3;
                out[b + 1] = true;
                out[b + 2] = true;
            }
        }
    }
    out
}

struct Context<'a> {
    cfg: &'a PipelineConfig,
    nets: &'a Networks,
    models: &'a Models,
    geom: &'a KeyboardGeometry,
    fingering: &'a FingeringGrid,
    midi: Tensor<f32>,
    windows: Vec<Window>,
    frames: usize,
}

impl Context<'_> {
    /// Runs `f` on every window and stitches the per-window outputs.
    fn windowed(
        &self,
        channels: usize,
        protect: Option<&[bool]>,
        mut f: impl FnMut(&Window, &FingeringGrid, &Tensor<f32>) -> Result<Vec<f32>>,
    ) -> Result<Vec<f32>> {
        let mut outs = Vec::with_capacity(self.windows.len());
        for w in &self.windows {
            let fing = self.fingering.slice_padded(w.start, w.valid);
            let midi = slice_rows(&self.midi, w.start, w.valid)?;
            outs.push(f(w, &fing, &midi)?);
        }
        stitch_windows(&outs, &self.windows, channels, self.frames, WINDOW_STRIDE, &self.cfg.stitch, protect)
    }

    fn tip_stage(&self, stage: Stage, input: &FingertipTrajectory, diag: &mut Diagnostics) -> Result<FingertipTrajectory> {
        let hand = input.hand;
        let cols = NUM_FINGERS * 3;
        let mask_y = self.cfg.refiner.mask_y;
        let protect = mask_y.then(|| pressed_cells(self.fingering, hand, NUM_FINGERS, |f| f));
        let bound = self.cfg.bounds.fingertip_mm;
        let track = |diag: &mut Diagnostics, r: f32| {
            diag.max_tip_residual_mm = diag.max_tip_residual_mm.max(r);
            if r > bound {
                diag.clamp_violations += 1;
            }
        };
        let flat = match stage {
            Stage::S2_1 | Stage::S2_2 => {
                let (net, store) = if stage == Stage::S2_1 {
                    (&self.nets.s2_1, Models::need(&self.models.s2_1, stage)?)
                } else {
                    (&self.nets.s2_2, Models::need(&self.models.s2_2, stage)?)
                };
                self.windowed(cols, protect.as_deref(), |w, fing, midi| {
                    let (out, r) = net.refine(store, &slice_tips(input, w), fing, net.uses_midi().then_some(midi), self.geom, &self.cfg.bounds)?;
                    track(diag, r);
                    Ok(out.to_flat())
                })?
            }
            Stage::S2_3 => match &self.models.s2_3 {
                Some(store) => self.windowed(cols, protect.as_deref(), |w, fing, _| {
                    let part = slice_tips(input, w);
                    let mask = if mask_y {
                        press_rows(fing, hand)
                    } else {
                        vec![[false; NUM_FINGERS]; part.len()]
                    };
                    let out = self.nets.s2_3.smooth_fingertips(store, &part, &mask, bound as f64)?;
                    let r = out.to_flat().iter().zip(part.to_flat()).fold(0.0f32, |m, (a, b)| m.max((a - b).abs()));
                    track(diag, r);
                    Ok(out.to_flat())
                })?,
                None => {
                    let mut out = moving_average(&input.to_flat(), cols, self.cfg.smoother.fallback_radius);
                    if let Some(p) = &protect {
                        let src = input.to_flat();
                        for (i, keep) in p.iter().enumerate() {
                            if *keep {
                                out[i] = src[i];
                            }
                        }
                    }
                    out
                }
            },
            _ => unreachable!("not a fingertip stage"),
        };
        FingertipTrajectory::from_flat(hand, &flat)
    }

    fn wrist_stage(&self, tips: &FingertipTrajectory, diag: &mut Diagnostics) -> Result<WristTrajectory> {
        let offsets = Models::need(&self.models.offsets, Stage::S3)?;
        let store = Models::need(&self.models.s3, Stage::S3)?;
        let base = base_wrist(tips, self.fingering, offsets, self.geom)?;
        let bound = self.cfg.bounds.wrist_mm;
        let flat = self.windowed(3, None, |w, fing, midi| {
            let part = WristTrajectory { hand: base.hand, frames: base.frames[w.frames()].to_vec() };
            let (out, r) = self.nets.s3.refine(store, &part, fing, midi, self.geom, bound)?;
            diag.max_wrist_residual_mm = diag.max_wrist_residual_mm.max(r);
            if r > bound {
                diag.clamp_violations += 1;
            }
            Ok(out.frames.iter().flatten().copied().collect())
        })?;
        Ok(WristTrajectory { hand: base.hand, frames: flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect() })
    }

    fn pose_stage(&self, wrist: &WristTrajectory, tips: &FingertipTrajectory, residuals: &mut Vec<f64>) -> Result<HandPose> {
        let store = Models::need(&self.models.s4, Stage::S4)?;
        let protect = pressed_cells(self.fingering, tips.hand, NUM_JOINTS, |f| TIPS[f]);
        let flat = self.windowed(NUM_JOINTS * 3, Some(&protect), |w, fing, midi| {
            let wr = WristTrajectory { hand: wrist.hand, frames: wrist.frames[w.frames()].to_vec() };
            let pose = self.nets.s4_net.synthesize(store, &wr, &slice_tips(tips, w), fing, self.geom)?;
            let (refined, mean_res) = self.nets.s4_ref.refine(store, &pose, fing, midi, self.geom)?;
            residuals.push(mean_res);
            Ok(refined.to_flat())
        })?;
        HandPose::from_flat(tips.hand, &flat)
    }
}

/// Runs the cascade through `through`. On failure the outputs of the stages
/// that finished are returned alongside the stage-tagged error.
pub fn run_pipeline_partial(
    cfg: &PipelineConfig,
    models: &Models,
    notes: &[NoteEvent],
    fingering: &FingeringGrid,
    geom: &KeyboardGeometry,
    through: Stage,
) -> (PipelineOutput, Result<()>) {
    let frames = fingering.frames();
    let mut out = PipelineOutput {
        frames,
        tips: BTreeMap::new(),
        wrists: None,
        poses: None,
        diagnostics: Diagnostics::default(),
    };
    let result = run_stages(cfg, models, notes, fingering, geom, through, &mut out);
    (out, result)
}

pub fn run_pipeline(
    cfg: &PipelineConfig,
    models: &Models,
    notes: &[NoteEvent],
    fingering: &FingeringGrid,
    geom: &KeyboardGeometry,
    through: Stage,
) -> Result<PipelineOutput> {
    let (out, res) = run_pipeline_partial(cfg, models, notes, fingering, geom, through);
    res.map(|_| out)
}

fn run_stages(
    cfg: &PipelineConfig,
    models: &Models,
    notes: &[NoteEvent],
    fingering: &FingeringGrid,
    geom: &KeyboardGeometry,
    through: Stage,
    out: &mut PipelineOutput,
) -> Result<()> {
    let frames = fingering.frames();
    if frames == 0 {
        return Err(Error::Argument("empty fingering".into()));
    }
    fingering.validate().map_err(|e| e.in_stage("ingest"))?;
    let s1 = synthesize_baseline(fingering, &models.prior, geom, &cfg.baseline).map_err(|e| e.in_stage("S1"))?;
    out.tips.insert(Stage::S1, s1);
    if through == Stage::S1 {
        return Ok(());
    }
    let nets = Networks::new(cfg)?;
    let ctx = Context {
        cfg,
        nets: &nets,
        models,
        geom,
        fingering,
        midi: midi_features(notes, FrameGrid::new(frames)),
        windows: make_windows(frames)?,
        frames,
    };
    out.diagnostics.windows = ctx.windows.len();
    let mut prev = Stage::S1;
    for stage in [Stage::S2_1, Stage::S2_2, Stage::S2_3] {
        if stage > through {
            return Ok(());
        }
        let input = out.tips[&prev].clone();
        let mut next = Vec::with_capacity(2);
        for t in &input {
            next.push(ctx.tip_stage(stage, t, &mut out.diagnostics).map_err(|e| e.in_stage(stage.tag()))?);
        }
        out.tips.insert(stage, next.try_into().unwrap());
        prev = stage;
    }
    if through < Stage::S3 {
        return Ok(());
    }
    let tips = out.tips[&Stage::S2_3].clone();
    let mut wrists = Vec::with_capacity(2);
    for t in &tips {
        wrists.push(ctx.wrist_stage(t, &mut out.diagnostics).map_err(|e| e.in_stage("S3"))?);
    }
    let wrists: [WristTrajectory; 2] = wrists.try_into().unwrap();
    out.wrists = Some(wrists.clone());
    if through < Stage::S4 {
        return Ok(());
    }
    let mut poses = Vec::with_capacity(2);
    let mut residuals = Vec::new();
    for (w, t) in wrists.iter().zip(&tips) {
        poses.push(ctx.pose_stage(w, t, &mut residuals).map_err(|e| e.in_stage("S4"))?);
    }
    out.diagnostics.mean_pose_residual_mm = Some(residuals.iter().sum::<f64>() / residuals.len().max(1) as f64);
    out.poses = Some(poses.try_into().unwrap());
    Ok(())
}

/// Metrics of one run: contacts from the `tap` fingertips, pose metrics
/// when both a full skeleton and ground truth are available.
pub fn evaluate_output(
    out: &PipelineOutput,
    notes: &[NoteEvent],
    gt: Option<&[HandPose; 2]>,
    geom: &KeyboardGeometry,
    cfg: &PipelineConfig,
    tap: Stage,
) -> Result<MetricsReport> {
    let tips = out
        .tips_at(tap)
        .ok_or_else(|| Error::Argument(format!("no fingertip output at or before {tap}")))?;
    let poses = match (&out.poses, gt) {
        (Some(p), Some(g)) => Some((&p[..], &g[..])),
        _ => None,
    };
    evaluate(tips, notes, poses, geom, &cfg.eval)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PieceReport {
    pub piece: String,
    pub frames: usize,
    pub metrics: MetricsReport,
    pub diagnostics: Diagnostics,
}

/// Pooled metrics over several pieces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusReport {
    pub tap: Stage,
    pub through: Stage,
    pub seed: u64,
    pub contact: ContactScore,
    /// Frame-weighted means over pieces.
    pub mpjpe_mm: Option<f64>,
    pub fingertip_mm: Option<f64>,
    pub max_tip_residual_mm: f32,
    pub max_wrist_residual_mm: f32,
    pub clamp_violations: usize,
    pub pieces: Vec<PieceReport>,
}

pub fn evaluate_pieces(
    cfg: &PipelineConfig,
    models: &Models,
    pieces: &[&Piece],
    geom: &KeyboardGeometry,
    through: Stage,
    tap: Stage,
) -> Result<(CorpusReport, Vec<PipelineOutput>)> {
    let mut reports = Vec::with_capacity(pieces.len());
    let mut outputs = Vec::with_capacity(pieces.len());
    for p in pieces {
        let out = run_pipeline(cfg, models, &p.notes, &p.fingering, geom, through)?;
        let metrics = evaluate_output(&out, &p.notes, Some(&p.poses), geom, cfg, tap)?;
        reports.push(PieceReport {
            piece: p.name.clone(),
            frames: p.frames(),
            metrics,
            diagnostics: out.diagnostics.clone(),
        });
        outputs.push(out);
    }
    let sum = |f: fn(&ContactScore) -> usize| reports.iter().map(|r| f(&r.metrics.contact)).sum::<usize>();
    let weighted = |f: fn(&MetricsReport) -> Option<f64>| {
        let parts: Vec<(f64, f64)> = reports.iter().filter_map(|r| f(&r.metrics).map(|v| (v, r.frames as f64))).collect();
        (!parts.is_empty()).then(|| parts.iter().map(|(v, w)| v * w).sum::<f64>() / parts.iter().map(|p| p.1).sum::<f64>())
    };
    let report = CorpusReport {
        tap,
        through,
        seed: cfg.seed,
        contact: ContactScore::from_counts(sum(|c| c.matched), sum(|c| c.predicted), sum(|c| c.reference)),
        mpjpe_mm: weighted(|m| m.mpjpe_mm),
        fingertip_mm: weighted(|m| m.fingertip_mm),
        max_tip_residual_mm: reports.iter().map(|r| r.diagnostics.max_tip_residual_mm).fold(0.0, f32::max),
        max_wrist_residual_mm: reports.iter().map(|r| r.diagnostics.max_wrist_residual_mm).fold(0.0, f32::max),
        clamp_violations: reports.iter().map(|r| r.diagnostics.clamp_violations).sum(),
        pieces: reports,
    };
    Ok((report, outputs))
}
