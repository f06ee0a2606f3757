//! Per-stage training on the corpus. Stages train in cascade order: each
//! stage sees the outputs of the already trained stages before it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::keyboard::KeyboardGeometry;
use crate::nn::{train, AdamConfig, Graph, ParamStore, Tensor, Var};
use crate::pose::{pose_loss, BoneTable, HandPose, PoseInput, PoseRefineInput, NUM_JOINTS};
use crate::prior::{build_position_prior, build_wrist_offsets, interpolate_missing};
use crate::refine::{
    mask_multipliers, midi_features, press_rows, to_tensor, trajectory_loss, RefineInput,
};
use crate::score::fingering::FingeringGrid;
use crate::score::raster::FrameGrid;
use crate::score::window::{Window, WINDOW_LEN};
use crate::types::{FingertipTrajectory, WristTrajectory, NUM_FINGERS};
use crate::wrist::{base_wrist, WristInput};

use super::config::PipelineConfig;
use super::corpus::Piece;
use super::run::{run_pipeline, slice_rows, slice_tips, Models, Networks, Stage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    pub steps: usize,
    /// Mean of the first and last ten losses.
    pub initial_loss: f64,
    pub final_loss: f64,
}

impl StageReport {
    fn from_losses(stage: Stage, losses: &[f64]) -> Self {
        let k = losses.len().min(10);
        let mean = |s: &[f64]| if s.is_empty() { f64::NAN } else { s.iter().sum::<f64>() / s.len() as f64 };
        Self {
            stage,
            steps: losses.len(),
            initial_loss: mean(&losses[..k]),
            final_loss: mean(&losses[losses.len() - k..]),
        }
    }
}

/// Contact prior and wrist offsets from the ground truth of `pieces`.
pub fn build_priors(cfg: &PipelineConfig, pieces: &[&Piece], geom: &KeyboardGeometry) -> Result<Models> {
    if pieces.is_empty() {
        return Err(Error::Build("no training pieces".into()));
    }
    let tips: Vec<[FingertipTrajectory; 2]> = pieces.iter().map(|p| p.tips()).collect();
    let wrists: Vec<[WristTrajectory; 2]> = pieces.iter().map(|p| p.wrists()).collect();
    let fingerings: Vec<FingeringGrid> = pieces.iter().map(|p| p.fingering.clone()).collect();
    let measured = build_position_prior(&tips, &fingerings, cfg.prior_min_count)?;
    let prior = interpolate_missing(&measured, geom)?;
    let offsets = build_wrist_offsets(&wrists, &tips, &fingerings)?;
    Ok(Models::new(prior, Some(offsets)))
}

fn stage_seed(seed: u64, stage: Stage) -> u64 {
    seed ^ (0xa076_1d64_78bd_642fu64.wrapping_mul(stage as u64 + 1))
}

fn adam(cfg: &PipelineConfig) -> AdamConfig {
    AdamConfig { lr: cfg.train.lr, ..AdamConfig::default() }
}

/// One hand of one training piece with the cascade's output so far.
struct Sample<'a> {
    piece: &'a Piece,
    hand: usize,
    midi: Tensor<f32>,
    tips: FingertipTrajectory,
    wrist: Option<WristTrajectory>,
    pose: Option<HandPose>,
}

impl Sample<'_> {
    fn frames(&self) -> usize {
        self.piece.frames()
    }

    fn crop(&self, len: usize, rng: &mut ChaCha8Rng) -> Window {
        let len = len.min(self.frames());
        let start = rng.random_range(0..=self.frames() - len);
        Window { start, len, valid: len }
    }

    fn fingering(&self, w: &Window) -> FingeringGrid {
        self.piece.fingering.slice_padded(w.start, w.valid)
    }

    fn gt_pose(&self, w: &Window) -> Vec<f32> {
        self.piece.poses[self.hand].frames[w.frames()].iter().flatten().flatten().copied().collect()
    }
}

/// Runs the already trained cascade up to `before` on every piece.
fn samples<'a>(cfg: &PipelineConfig, models: &Models, pieces: &[&'a Piece], geom: &KeyboardGeometry, before: Stage) -> Result<Vec<Sample<'a>>> {
    let mut out = Vec::with_capacity(2 * pieces.len());
    for p in pieces {
        let run = run_pipeline(cfg, models, &p.notes, &p.fingering, geom, before)?;
        let midi = midi_features(&p.notes, FrameGrid::new(p.frames()));
        let tips = run.tips_at(before).expect("stage 1 always runs").clone();
        for h in 0..2 {
            out.push(Sample {
                piece: p,
                hand: h,
                midi: midi.clone(),
                tips: tips[h].clone(),
                wrist: run.wrists.as_ref().map(|w| w[h].clone()),
                pose: None,
            });
        }
    }
    Ok(out)
}

fn pick<'s, 'a>(data: &'s [Sample<'a>], rng: &mut ChaCha8Rng) -> &'s Sample<'a> {
    &data[rng.random_range(0..data.len())]
}

fn mean_norm(g: &mut Graph<f32>, v: Var, joints: usize) -> Result<Var> {
    let t = g.shape(v)[0];
    let r = g.reshape(v, &[t, joints, 3])?;
    let n = g.norm_last(r);
    Ok(g.mean(n))
}

/// Trains one stage; earlier stages must already be in `models`.
pub fn train_stage(
    cfg: &PipelineConfig,
    models: &mut Models,
    stage: Stage,
    pieces: &[&Piece],
    geom: &KeyboardGeometry,
) -> Result<Vec<StageReport>> {
    let nets = Networks::new(cfg)?;
    let seed = stage_seed(cfg.seed, stage);
    let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
    let tc = &cfg.train;
    let bound = cfg.bounds.fingertip_mm as f64;
    let tag = |e: Error| e.in_stage(stage.tag());
    match stage {
        Stage::S1 => Err(Error::Argument("stage 1 has no learned parameters; build the priors instead".into())),
        Stage::S2_1 | Stage::S2_2 => {
            let prev = if stage == Stage::S2_1 { Stage::S1 } else { Stage::S2_1 };
            let data = samples(cfg, models, pieces, geom, prev)?;
            let net = if stage == Stage::S2_1 { &nets.s2_1 } else { &nets.s2_2 };
            let steps = if stage == Stage::S2_1 { tc.steps_s2_1 } else { tc.steps_s2_2 };
            let mut store = ParamStore::new(seed);
            net.init(&mut store, &mut init_rng)?;
            let report = train(&mut store, adam(cfg), steps, seed, |g, p, rng| {
                let s = pick(&data, rng);
                let w = s.crop(WINDOW_LEN, rng);
                let midi = slice_rows(&s.midi, w.start, w.valid)?;
                let input = RefineInput::<f32>::build(&slice_tips(&s.tips, &w), &s.fingering(&w), net.uses_midi().then_some(&midi), geom, net.cfg.mask_y)?;
                let (out, _) = net.forward(g, p, &input, bound)?;
                let gt = slice_tips(&s.piece.poses[s.hand].tips(), &w);
                let gt = g.constant(to_tensor(&gt.to_flat(), NUM_FINGERS * 3));
                trajectory_loss(g, out, gt, tc.lambda_pos, tc.lambda_vel)
            })
            .map_err(tag)?;
            if stage == Stage::S2_1 {
                models.s2_1 = Some(store);
            } else {
                models.s2_2 = Some(store);
            }
            Ok(vec![StageReport::from_losses(stage, &report.losses)])
        }
        Stage::S2_3 => {
            let data = samples(cfg, models, pieces, geom, Stage::S2_2)?;
            let net = &nets.s2_3;
            let mut store = ParamStore::new(seed);
            net.init(&mut store, &mut init_rng)?;
            let noise = Normal::new(0.0, tc.smoother_noise_mm.max(1e-9)).map_err(|e| Error::Config(e.to_string()))?;
            let cols = NUM_FINGERS * 3;
            let report = train(&mut store, adam(cfg), tc.steps_s2_3, seed, |g, p, rng| {
                let s = pick(&data, rng);
                let w = s.crop(tc.crop, rng);
                let fing = s.fingering(&w);
                let mask = press_rows(&fing, s.tips.hand);
                let mut flat = slice_tips(&s.tips, &w).to_flat();
                if tc.smoother_noise_mm > 0.0 {
                    // jitter everything except pressed Y/Z, which the stage keeps
                    for (t, row) in flat.chunks_exact_mut(cols).enumerate() {
                        for (c, v) in row.iter_mut().enumerate() {
                            let locked = cfg.refiner.mask_y && mask[t][c / 3] && c % 3 != 0;
                            if !locked {
                                *v += noise.sample(rng) as f32;
                            }
                        }
                    }
                }
                let feats = net.features::<f32>(&flat, None)?;
                let keep = mask_multipliers::<f32>(&mask, NUM_FINGERS, |f| f, cfg.refiner.mask_y);
                let (out, _) = net.forward(g, p, &to_tensor(&flat, cols), &feats, Some(&keep), bound)?;
                let gt = slice_tips(&s.piece.poses[s.hand].tips(), &w);
                let gt = g.constant(to_tensor(&gt.to_flat(), cols));
                trajectory_loss(g, out, gt, tc.lambda_pos, tc.lambda_vel)
            })
            .map_err(tag)?;
            models.s2_3 = Some(store);
            Ok(vec![StageReport::from_losses(stage, &report.losses)])
        }
        Stage::S3 => {
            let offsets = models
                .offsets
                .clone()
                .ok_or_else(|| Error::Config("wrist offsets missing from the prior".into()))?;
            let data = samples(cfg, models, pieces, geom, Stage::S2_3)?;
            let bases: Vec<WristTrajectory> = data
                .iter()
                .map(|s| base_wrist(&s.tips, &s.piece.fingering, &offsets, geom))
                .collect::<Result<_>>()?;
            let net = &nets.s3;
            let mut store = ParamStore::new(seed);
            net.init(&mut store, &mut init_rng)?;
            let report = train(&mut store, adam(cfg), tc.steps_s3, seed, |g, p, rng| {
                let i = rng.random_range(0..data.len());
                let s = &data[i];
                let w = s.crop(tc.crop, rng);
                let base = WristTrajectory { hand: bases[i].hand, frames: bases[i].frames[w.frames()].to_vec() };
                let midi = slice_rows(&s.midi, w.start, w.valid)?;
                let input = WristInput::<f32>::build(&base, &s.fingering(&w), &midi, geom)?;
                let (out, _) = net.forward(g, p, &input, cfg.bounds.wrist_mm as f64)?;
                let gt: Vec<f32> = s.piece.poses[s.hand].frames[w.frames()].iter().flat_map(|f| f[0]).collect();
                let gt = g.constant(to_tensor(&gt, 3));
                trajectory_loss(g, out, gt, tc.lambda_pos, tc.lambda_vel)
            })
            .map_err(tag)?;
            models.s3 = Some(store);
            Ok(vec![StageReport::from_losses(stage, &report.losses)])
        }
        Stage::S4 => {
            let mut data = samples(cfg, models, pieces, geom, Stage::S3)?;
            let graph = nets.s4_net.graph().clone();
            let gt_poses: Vec<&HandPose> = pieces.iter().flat_map(|p| p.poses.iter()).collect();
            let bones = BoneTable::from_poses(&graph, &gt_poses)?;
            let net = &nets.s4_net;
            let refiner = &nets.s4_ref;
            let mut store = ParamStore::new(seed);
            net.init(&mut store, &mut init_rng)?;
            refiner.init(&mut store, &mut init_rng)?;
            let cols = NUM_JOINTS * 3;
            let wts = tc.pose_weights;
            let first = train(&mut store, adam(cfg), tc.steps_s4, seed, |g, p, rng| {
                let s = pick(&data, rng);
                let w = s.crop(tc.crop, rng);
                let wrist = s.wrist.as_ref().expect("stage 3 ran");
                let wr = WristTrajectory { hand: wrist.hand, frames: wrist.frames[w.frames()].to_vec() };
                let input = PoseInput::<f32>::build(&wr, &slice_tips(&s.tips, &w), &s.fingering(&w), geom, net.cfg.arch_mm)?;
                let out = net.forward(g, p, &input)?;
                let gt = g.constant(to_tensor(&s.gt_pose(&w), cols));
                pose_loss(g, out, gt, &graph, &bones, wts)
            })
            .map_err(tag)?;
            for s in &mut data {
                let wrist = s.wrist.as_ref().expect("stage 3 ran");
                s.pose = Some(net.synthesize(&store, wrist, &s.tips, &s.piece.fingering, geom)?);
            }
            let second = train(&mut store, adam(cfg), tc.steps_s4_refine, seed.wrapping_add(1), |g, p, rng| {
                let s = pick(&data, rng);
                let w = s.crop(tc.crop, rng);
                let pose = s.pose.as_ref().expect("pose synthesized");
                let part = HandPose { hand: pose.hand, frames: pose.frames[w.frames()].to_vec() };
                let midi = slice_rows(&s.midi, w.start, w.valid)?;
                let input = PoseRefineInput::<f32>::build(&part, &s.fingering(&w), &midi, geom)?;
                let (out, res) = refiner.forward(g, p, &input)?;
                let gt = g.constant(to_tensor(&s.gt_pose(&w), cols));
                let l = pose_loss(g, out, gt, &graph, &bones, wts)?;
                let r = mean_norm(g, res, NUM_JOINTS)?;
                let r = g.scale(r, refiner.cfg.residual_penalty);
                g.add(l, r)
            })
            .map_err(tag)?;
            models.s4 = Some(store);
            models.bones = Some(bones);
            Ok(vec![
                StageReport::from_losses(stage, &first.losses),
                StageReport::from_losses(stage, &second.losses),
            ])
        }
    }
}

/// Builds the priors and trains every stage through `through`.
pub fn train_all(cfg: &PipelineConfig, pieces: &[&Piece], geom: &KeyboardGeometry, through: Stage) -> Result<(Models, Vec<StageReport>)> {
    let mut models = build_priors(cfg, pieces, geom)?;
    let mut reports = Vec::new();
    for stage in [Stage::S2_1, Stage::S2_2, Stage::S2_3, Stage::S3, Stage::S4] {
        if stage > through {
            break;
        }
        for r in train_stage(cfg, &mut models, stage, pieces, geom)? {
            log::info!("{}: {} steps, loss {:.3} -> {:.3}", r.stage, r.steps, r.initial_loss, r.final_loss);
            reports.push(r);
        }
    }
    Ok((models, reports))
}
