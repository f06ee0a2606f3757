//! Central-difference checks of every learned block and loss head, in
//! double precision. Used by the `gradcheck` command and the test suite.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::keyboard::KeyboardGeometry;
use crate::nn::{
    gradient_check, Bindings, FilmGenerator, Graph, GraphConv, Init, LayerNorm, Linear, MultiHeadAttention,
    ParamStore, TemporalResNet, Tensor, TransformerEncoder, Var,
};
use crate::pipeline::corpus::{generate_synthetic_corpus, CorpusSpec};
use crate::pose::{build_hand_graph, pose_loss, BoneTable, PoseConfig, PoseInput, PoseLossWeights, PoseNet, PoseRefineInput, PoseRefiner, PoseRefinerConfig, NUM_JOINTS};
use crate::refine::{midi_features, to_tensor, trajectory_loss, RefineInput, Refiner, RefinerConfig, SmootherConfig, TemporalSmoother};
use crate::score::raster::FrameGrid;
use crate::types::{FingertipTrajectory, WristTrajectory, NUM_FINGERS};
use crate::wrist::{WristConfig, WristInput, WristRefiner};

/// Tolerance for blocks built only from smooth operations.
pub const SMOOTH_TOL: f64 = 1e-4;
/// Tolerance for blocks containing kinks (norms, clamps, hinges, abs).
pub const KINKED_TOL: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockCheck {
    pub block: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub checked: usize,
}

impl BlockCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

fn input(shape: &[usize], k: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|i| ((i as f64 + 1.0) * k).sin()).collect()).expect("shape")
}

/// Parameters moved off their initial values so zero-initialised heads do
/// not hide the paths behind them.
fn perturbed(store: &ParamStore, scale: f64) -> BTreeMap<String, Tensor<f64>> {
    let mut p = store.tensors::<f64>();
    for (j, t) in p.values_mut().enumerate() {
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v += scale * ((i as f64 + 1.0) * 0.731 + j as f64).sin();
        }
    }
    p
}

fn sq_loss(g: &mut Graph<f64>, y: Var, target: &Tensor<f64>) -> Result<Var> {
    let t = g.constant(target.clone());
    let d = g.sub(y, t)?;
    let s = g.mul(d, d)?;
    Ok(g.mean(s))
}

fn check<L>(out: &mut Vec<BlockCheck>, block: &str, tol: f64, params: &BTreeMap<String, Tensor<f64>>, coords: usize, f: L) -> Result<()>
where
    L: Fn(&mut Graph<f64>, &Bindings) -> Result<Var>,
{
    let r = gradient_check(params, 1e-5, coords, f)?;
    log::info!("{block}: max rel err {:.2e} over {} coordinates", r.max_rel_err, r.checked);
    out.push(BlockCheck { block: block.into(), max_rel_err: r.max_rel_err, tolerance: tol, checked: r.checked });
    Ok(())
}

/// Runs every check. `coords` bounds the perturbed coordinates per tensor.
pub fn gradient_suite(seed: u64, coords: usize) -> Result<Vec<BlockCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let lin = Linear::new("lin", 4, 3);
    let mut s = ParamStore::new(seed);
    lin.init(&mut s, Init::Default, &mut rng)?;
    let (x, target) = (input(&[5, 4], 0.7), input(&[5, 3], 1.3));
    check(&mut out, "linear", SMOOTH_TOL, &s.tensors(), coords, |g, p| {
        let xv = g.constant(x.clone());
        let y = lin.forward(g, p, xv)?;
        sq_loss(g, y, &target)
    })?;

    let ln = LayerNorm::new("ln", 6);
    let mut s = ParamStore::new(seed);
    ln.init(&mut s)?;
    let (x, target) = (input(&[4, 6], 0.9), input(&[4, 6], 0.4));
    check(&mut out, "layer_norm", SMOOTH_TOL, &perturbed(&s, 0.2), coords, |g, p| {
        let xv = g.constant(x.clone());
        let y = ln.forward(g, p, xv)?;
        sq_loss(g, y, &target)
    })?;

    let att = MultiHeadAttention::new("att", 8, 2)?;
    let mut s = ParamStore::new(seed);
    att.init(&mut s, &mut rng)?;
    let (x, target) = (input(&[5, 8], 0.3), input(&[5, 8], 0.8));
    check(&mut out, "attention", SMOOTH_TOL, &perturbed(&s, 0.1), coords, |g, p| {
        let xv = g.constant(x.clone());
        let y = att.forward(g, p, xv)?;
        sq_loss(g, y, &target)
    })?;

    let enc = TransformerEncoder::new("enc", 8, 1, 2, 2)?;
    let mut s = ParamStore::new(seed);
    enc.init(&mut s, &mut rng)?;
    check(&mut out, "transformer_encoder", SMOOTH_TOL, &perturbed(&s, 0.1), coords, |g, p| {
        let xv = g.constant(x.clone());
        let y = enc.forward(g, p, xv)?;
        sq_loss(g, y, &target)
    })?;

    let tcn = TemporalResNet::new("tcn", 3, 2, 3)?;
    let mut s = ParamStore::new(seed);
    tcn.init(&mut s, &mut rng)?;
    let (x, target) = (input(&[7, 3], 0.5), input(&[7, 3], 1.1));
    check(&mut out, "temporal_conv", SMOOTH_TOL, &perturbed(&s, 0.2), coords, |g, p| {
        let xv = g.constant(x.clone());
        let y = tcn.forward(g, p, xv)?;
        sq_loss(g, y, &target)
    })?;

    let gc = GraphConv::new("gc", 2, 3, 3);
    let mut s = ParamStore::new(seed);
    gc.init(&mut s, Init::Default, &mut rng)?;
    let adj = build_hand_graph().adjacency::<f64>();
    let (x, target) = (input(&[4, NUM_JOINTS, 2], 0.45), input(&[4, NUM_JOINTS, 3], 0.33));
    check(&mut out, "graph_conv", SMOOTH_TOL, &s.tensors(), coords, |g, p| {
        let xv = g.constant(x.clone());
        let h = gc.forward(g, p, xv, &adj)?;
        sq_loss(g, h, &target)
    })?;

    let film = FilmGenerator::new("film", 3, 6, 4);
    let mut s = ParamStore::new(seed);
    film.init(&mut s, &mut rng)?;
    let (x, c, target) = (input(&[3, 4], 0.4), input(&[3, 3], 0.9), input(&[3, 4], 2.1));
    check(&mut out, "film", SMOOTH_TOL, &perturbed(&s, 0.3), coords, |g, p| {
        let xv = g.constant(x.clone());
        let cv = g.constant(c.clone());
        let y = film.apply(g, p, xv, cv)?;
        sq_loss(g, y, &target)
    })?;

    // stage networks and loss heads on a short real piece
    let geom = KeyboardGeometry::default();
    let spec = CorpusSpec { seed, pieces: 1, seconds: [2.0, 2.5], split: [1.0, 0.0, 0.0], ..CorpusSpec::default() };
    let corpus = generate_synthetic_corpus(&spec, &geom)?;
    let piece = &corpus.pieces[0];
    let t_len = 12;
    // frames around the first right-hand press so masks and FiLM inputs are live
    let start = (0..piece.frames()).find(|&t| piece.fingering.presses(t, crate::types::Hand::Right).next().is_some()).unwrap_or(0);
    let start = start.saturating_sub(4).min(piece.frames() - t_len);
    let fing = piece.fingering.slice_padded(start, t_len);
    let gt = &piece.poses[1];
    let pose_part = crate::pose::HandPose { hand: gt.hand, frames: gt.frames[start..start + t_len].to_vec() };
    let tips = pose_part.tips();
    let wrist = pose_part.wrist();
    let midi_full = midi_features(&piece.notes, FrameGrid::new(piece.frames()));
    let midi = Tensor::new(&[t_len, midi_full.cols()], midi_full.data()[start * midi_full.cols()..(start + t_len) * midi_full.cols()].to_vec())?;
    let shifted = FingertipTrajectory {
        hand: tips.hand,
        frames: tips.frames.iter().enumerate().map(|(t, f)| f.map(|p| [p[0] + 3.0 * (t as f32 * 0.3).sin(), p[1] - 2.0, p[2] + 1.5])).collect(),
    };
    let gt_tips = to_tensor::<f64>(&tips.to_flat(), NUM_FINGERS * 3);

    let rc = RefinerConfig { dim: 8, depth: 1, heads: 2, ff_mult: 2, film_hidden: 6, ..RefinerConfig::default() };
    let refiner = Refiner::new("s2", rc, true)?;
    let mut s = ParamStore::new(seed);
    refiner.init(&mut s, &mut rng)?;
    let rin = RefineInput::<f64>::build(&shifted, &fing, Some(&midi), &geom, true)?;
    check(&mut out, "fingertip_refiner", KINKED_TOL, &perturbed(&s, 0.05), coords, |g, p| {
        let (y, _) = refiner.forward(g, p, &rin, 80.0)?;
        let t = g.constant(gt_tips.clone());
        trajectory_loss(g, y, t, 1.0, 0.5)
    })?;

    let smoother = TemporalSmoother::new("s23", NUM_FINGERS * 3, 0, SmootherConfig { dim: 6, blocks: 1, kernel: 3, ..SmootherConfig::default() })?;
    let mut s = ParamStore::new(seed);
    smoother.init(&mut s, &mut rng)?;
    let flat = shifted.to_flat();
    let feats = smoother.features::<f64>(&flat, None)?;
    let pos = to_tensor::<f64>(&flat, NUM_FINGERS * 3);
    check(&mut out, "temporal_smoother", KINKED_TOL, &perturbed(&s, 0.05), coords, |g, p| {
        let (y, _) = smoother.forward(g, p, &pos, &feats, Some(&rin.keep), 80.0)?;
        let t = g.constant(gt_tips.clone());
        trajectory_loss(g, y, t, 1.0, 0.5)
    })?;

    let wr = WristRefiner::new("s3", WristConfig { dim: 6, blocks: 1, kernel: 3, film_hidden: 4, ..WristConfig::default() })?;
    let mut s = ParamStore::new(seed);
    wr.init(&mut s, &mut rng)?;
    let base = WristTrajectory { hand: wrist.hand, frames: wrist.frames.iter().map(|p| [p[0] + 4.0, p[1] - 3.0, p[2] + 2.0]).collect() };
    let win = WristInput::<f64>::build(&base, &fing, &midi, &geom)?;
    let gt_wrist = to_tensor::<f64>(&wrist.frames.iter().flatten().copied().collect::<Vec<_>>(), 3);
    check(&mut out, "wrist_refiner", KINKED_TOL, &perturbed(&s, 0.05), coords, |g, p| {
        let (y, _) = wr.forward(g, p, &win, 50.0)?;
        let t = g.constant(gt_wrist.clone());
        trajectory_loss(g, y, t, 1.0, 0.5)
    })?;

    let graph = build_hand_graph();
    let bones = BoneTable::from_poses(&graph, &[gt])?;
    let gt_pose = to_tensor::<f64>(&pose_part.to_flat(), NUM_JOINTS * 3);
    let net = PoseNet::new("s4", PoseConfig { channels: vec![4, 6], kernel: 3, blocks_per_level: 1, film_hidden: 4, ..PoseConfig::default() })?;
    let mut s = ParamStore::new(seed);
    net.init(&mut s, &mut rng)?;
    let pin = PoseInput::<f64>::build(&wrist, &shifted, &fing, &geom, 25.0)?;
    check(&mut out, "pose_network", KINKED_TOL, &perturbed(&s, 0.05), coords, |g, p| {
        let y = net.forward(g, p, &pin)?;
        let t = g.constant(gt_pose.clone());
        pose_loss(g, y, t, &graph, &bones, PoseLossWeights::default())
    })?;

    let pr = PoseRefiner::new("s4r", PoseRefinerConfig { dim: 6, blocks: 1, kernel: 3, film_hidden: 4, ..PoseRefinerConfig::default() })?;
    let mut s = ParamStore::new(seed);
    pr.init(&mut s, &mut rng)?;
    let rigged = crate::pose::rig_trajectory(&wrist, &shifted, 25.0)?;
    let prin = PoseRefineInput::<f64>::build(&rigged, &fing, &midi, &geom)?;
    check(&mut out, "pose_refiner", KINKED_TOL, &perturbed(&s, 0.05), coords, |g, p| {
        let (y, _) = pr.forward(g, p, &prin)?;
        let t = g.constant(gt_pose.clone());
        pose_loss(g, y, t, &graph, &bones, PoseLossWeights::default())
    })?;

    // loss heads with respect to their predictions
    let mut preds = BTreeMap::new();
    preds.insert("pred".to_string(), to_tensor::<f64>(&shifted.to_flat(), NUM_FINGERS * 3));
    check(&mut out, "trajectory_loss", KINKED_TOL, &preds, coords, |g, p| {
        let t = g.constant(gt_tips.clone());
        trajectory_loss(g, p.get("pred")?, t, 1.0, 0.5)
    })?;
    let mut preds = BTreeMap::new();
    preds.insert("pred".to_string(), to_tensor::<f64>(&rigged.to_flat(), NUM_JOINTS * 3));
    check(&mut out, "pose_loss", KINKED_TOL, &preds, coords, |g, p| {
        let t = g.constant(gt_pose.clone());
        pose_loss(g, p.get("pred")?, t, &graph, &bones, PoseLossWeights { bone: 0.5, vel: 0.5, bio: 1.0 })
    })?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_block_passes() {
        let checks = gradient_suite(3, 12).unwrap();
        assert!(checks.len() >= 14);
        for c in &checks {
            assert!(c.passed(), "{c:?}");
            assert!(c.checked > 0);
        }
    }
}
