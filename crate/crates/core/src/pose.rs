//! Stage 4: full 21-joint hand pose.
//!
//! Joint order: wrist (0), then thumb, index, middle, ring, pinky, each as
//! MCP, PIP, DIP, TIP. So finger `f` owns joints `1 + 4f ..= 4 + 4f` and its
//! tip is `4 + 4f`. For the thumb the three inner joints are CMC, MCP and IP
//! in anatomical terms; they keep the generic names here.
//!
//! A spatio-temporal graph UNet predicts the 15 inner joints on top of a
//! kinematic rig hung between the wrist and the fingertips. The wrist and
//! tips pass through untouched. A MIDI-conditioned residual then adjusts the
//! whole skeleton, followed by smoothing that restores pressed fingertips
//! and the first and last frames.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::keyboard::KeyboardGeometry;
use crate::nn::{
    Bindings, FilmGenerator, Graph, GraphConv, Init, Linear, ParamStore, Scalar, TemporalResNet, Tensor, Var,
};
use crate::refine::{
    axis_centre, fingering_features, moving_average, normalize_coords, press_rows, to_tensor,
    FINGERING_FEATURES, MIDI_FEATURES,
};
use crate::score::fingering::FingeringGrid;
use crate::types::{FingertipTrajectory, Hand, Vec3, WristTrajectory, NUM_FINGERS};

pub const NUM_JOINTS: usize = 21;
pub const NUM_BONES: usize = 20;
pub const WRIST: usize = 0;
pub const TIPS: [usize; NUM_FINGERS] = [4, 8, 12, 16, 20];
/// Joints that carry stage 2/3 values and are never predicted.
pub const ANCHORS: [usize; 6] = [0, 4, 8, 12, 16, 20];
pub const NUM_PARTITIONS: usize = 3;
/// Positions of MCP, PIP and DIP along the wrist-to-tip segment.
pub const RIG_FRACTIONS: [f32; 3] = [0.45, 0.70, 0.88];

pub fn joint(finger: usize, segment: usize) -> usize {
    1 + 4 * finger + segment
}

pub fn is_anchor(j: usize) -> bool {
    ANCHORS.contains(&j)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HandPose {
    pub hand: Hand,
    pub frames: Vec<[Vec3; NUM_JOINTS]>,
}

impl HandPose {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn to_flat(&self) -> Vec<f32> {
        self.frames.iter().flatten().flatten().copied().collect()
    }

    pub fn from_flat(hand: Hand, data: &[f32]) -> Result<Self> {
        if data.len() % (NUM_JOINTS * 3) != 0 {
            return Err(Error::Shape(format!("{} floats is not a multiple of 63", data.len())));
        }
        let frames = data
            .chunks_exact(NUM_JOINTS * 3)
            .map(|c| std::array::from_fn(|j| [c[3 * j], c[3 * j + 1], c[3 * j + 2]]))
            .collect();
        Ok(Self { hand, frames })
    }

    pub fn wrist(&self) -> WristTrajectory {
        WristTrajectory {
            hand: self.hand,
            frames: self.frames.iter().map(|f| f[WRIST]).collect(),
        }
    }

    pub fn tips(&self) -> FingertipTrajectory {
        FingertipTrajectory {
            hand: self.hand,
            frames: self.frames.iter().map(|f| TIPS.map(|j| f[j])).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Partition {
    /// The node itself and neighbours at the same hop distance from the wrist.
    Root,
    /// Neighbours closer to the wrist.
    Centripetal,
    /// Neighbours farther from the wrist.
    Centrifugal,
}

#[derive(Debug, Clone)]
pub struct HandGraph {
    pub edges: Vec<(usize, usize)>,
    /// Skeletal `(parent, child)` pairs, finger by finger from the wrist out.
    pub bones: Vec<(usize, usize)>,
    /// Hop distance of every joint from the wrist.
    pub hops: [usize; NUM_JOINTS],
}

pub fn build_hand_graph() -> HandGraph {
    let mut bones = Vec::with_capacity(NUM_BONES);
    for f in 0..NUM_FINGERS {
        bones.push((WRIST, joint(f, 0)));
        for s in 0..3 {
            bones.push((joint(f, s), joint(f, s + 1)));
        }
    }
    let mut edges = bones.clone();
    for f in 0..NUM_FINGERS - 1 {
        edges.push((joint(f, 0), joint(f + 1, 0)));
    }
    let mut hops = [0usize; NUM_JOINTS];
    for &(p, c) in &bones {
        hops[c] = hops[p] + 1;
    }
    HandGraph { edges, bones, hops }
}

impl HandGraph {
    pub fn neighbours(&self, j: usize) -> Vec<usize> {
        self.edges
            .iter()
            .filter_map(|&(a, b)| {
                if a == j {
                    Some(b)
                } else if b == j {
                    Some(a)
                } else {
                    None
                }
            })
            .collect()
    }

    pub fn degree(&self, j: usize) -> usize {
        self.neighbours(j).len()
    }

    pub fn is_connected(&self) -> bool {
        let mut seen = [false; NUM_JOINTS];
        let mut stack = vec![WRIST];
        seen[WRIST] = true;
        while let Some(j) = stack.pop() {
            for n in self.neighbours(j) {
                if !seen[n] {
                    seen[n] = true;
                    stack.push(n);
                }
            }
        }
        seen.iter().all(|&s| s)
    }

    /// Partition of neighbour `n` as seen from joint `j` (or of `j` itself).
    pub fn partition(&self, j: usize, n: usize) -> Partition {
        match self.hops[n].cmp(&self.hops[j]) {
            std::cmp::Ordering::Less => Partition::Centripetal,
            std::cmp::Ordering::Equal => Partition::Root,
            std::cmp::Ordering::Greater => Partition::Centrifugal,
        }
    }

    /// One `[J, J]` matrix per partition, rows divided by the joint's degree
    /// including itself, so the three matrices sum to a row-stochastic one.
    pub fn adjacency<F: Scalar>(&self) -> Vec<Tensor<F>> {
        let mut mats = vec![vec![0.0f64; NUM_JOINTS * NUM_JOINTS]; NUM_PARTITIONS];
        for j in 0..NUM_JOINTS {
            let mut members = self.neighbours(j);
            members.push(j);
            let norm = 1.0 / members.len() as f64;
            for n in members {
                let k = match self.partition(j, n) {
                    Partition::Root => 0,
                    Partition::Centripetal => 1,
                    Partition::Centrifugal => 2,
                };
                mats[k][j * NUM_JOINTS + n] += norm;
            }
        }
        mats.into_iter()
            .map(|m| Tensor::new(&[NUM_JOINTS, NUM_JOINTS], m.into_iter().map(F::from_f64).collect()).unwrap())
            .collect()
    }
}

/// Kinematic rig: inner joints on the wrist-to-tip segment at
/// [`RIG_FRACTIONS`], lifted by `arch_mm · 4s(1 - s)`.
pub fn rig_pose(wrist: Vec3, tips: &[Vec3; NUM_FINGERS], arch_mm: &[f32; NUM_FINGERS]) -> [Vec3; NUM_JOINTS] {
    let mut out = [[0.0f32; 3]; NUM_JOINTS];
    out[WRIST] = wrist;
    for f in 0..NUM_FINGERS {
        let tip = tips[f];
        for (s, &frac) in RIG_FRACTIONS.iter().enumerate() {
            let lift = arch_mm[f] * 4.0 * frac * (1.0 - frac);
            out[joint(f, s)] = [
                wrist[0] + frac * (tip[0] - wrist[0]),
                wrist[1] + frac * (tip[1] - wrist[1]),
                wrist[2] + frac * (tip[2] - wrist[2]) + lift,
            ];
        }
        out[joint(f, 3)] = tip;
    }
    out
}

pub fn rig_trajectory(wrist: &WristTrajectory, tips: &FingertipTrajectory, arch_mm: f32) -> Result<HandPose> {
    if wrist.len() != tips.len() {
        return Err(Error::Shape(format!("{} wrist vs {} fingertip frames", wrist.len(), tips.len())));
    }
    Ok(HandPose {
        hand: tips.hand,
        frames: wrist
            .frames
            .iter()
            .zip(&tips.frames)
            .map(|(&w, t)| rig_pose(w, t, &[arch_mm; NUM_FINGERS]))
            .collect(),
    })
}

/// Reference bone lengths, in [`HandGraph::bones`] order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoneTable {
    pub lengths: Vec<f64>,
}

fn bone_length(a: Vec3, b: Vec3) -> f64 {
    let mut s = 0.0f64;
    for k in 0..3 {
        let d = b[k] as f64 - a[k] as f64;
        s += d * d;
    }
    s.sqrt()
}

impl BoneTable {
    /// Per-bone median length over every frame of `poses`.
    pub fn from_poses(graph: &HandGraph, poses: &[&HandPose]) -> Result<Self> {
        let mut samples = vec![Vec::new(); graph.bones.len()];
        for pose in poses {
            for fr in &pose.frames {
                for (i, &(p, c)) in graph.bones.iter().enumerate() {
                    samples[i].push(bone_length(fr[p], fr[c]));
                }
            }
        }
        if samples[0].is_empty() {
            return Err(Error::Build("no frames to estimate bone lengths".into()));
        }
        let lengths = samples
            .into_iter()
            .map(|mut s| {
                s.sort_by(f64::total_cmp);
                s[(s.len() - 1) / 2]
            })
            .collect::<Vec<_>>();
        if lengths.iter().any(|&l| l <= 0.0) {
            return Err(Error::Build("degenerate bone of zero length".into()));
        }
        Ok(Self { lengths })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let t: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if t.lengths.len() != NUM_BONES || t.lengths.iter().any(|&l| !(l > 0.0)) {
            return Err(Error::Format("bone table needs 20 positive lengths".into()));
        }
        Ok(t)
    }
}

/// Flexion limits per inner joint, degrees: hyperextension allowed, then
/// maximum bend. Thumb first, then the four fingers share a row.
pub const THUMB_LIMITS: [(f64, f64); 3] = [(40.0, 90.0), (20.0, 80.0), (20.0, 90.0)];
pub const FINGER_LIMITS: [(f64, f64); 3] = [(30.0, 90.0), (5.0, 110.0), (10.0, 90.0)];
/// Minimum distance between neighbouring fingertips, mm.
pub const MIN_TIP_GAP_MM: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoseLossWeights {
    pub bone: f64,
    pub vel: f64,
    pub bio: f64,
}

impl Default for PoseLossWeights {
    fn default() -> Self {
        Self {
            bone: 0.5,
            vel: 0.5,
            bio: 0.1,
        }
    }
}

/// Unweighted pose loss terms, each a scalar node.
pub struct PoseLossTerms {
    pub pos: Var,
    pub bone: Var,
    pub vel: Var,
    pub bio: Var,
}

fn tile<F: Scalar>(row: &[f64], times: usize) -> Tensor<F> {
    let data = (0..times).flat_map(|_| row.iter().map(|&v| F::from_f64(v))).collect();
    Tensor::new(&[times, row.len()], data).unwrap()
}

/// Hinge penalty on joint flexion and fingertip crowding, `pred: [T, 21, 3]`.
pub fn biomech_penalty<F: Scalar>(g: &mut Graph<F>, p3: Var) -> Result<Var> {
    let t_len = g.shape(p3)[0];
    let mut parents = Vec::new();
    let mut mids = Vec::new();
    let mut children = Vec::new();
    let mut neg_sin_ext = Vec::new();
    let mut cos_flex = Vec::new();
    for f in 0..NUM_FINGERS {
        let limits = if f == 0 { THUMB_LIMITS } else { FINGER_LIMITS };
        for s in 0..3 {
            parents.push(if s == 0 { WRIST } else { joint(f, s - 1) });
            mids.push(joint(f, s));
            children.push(joint(f, s + 1));
            neg_sin_ext.push(-limits[s].0.to_radians().sin());
            cos_flex.push(limits[s].1.to_radians().cos());
        }
    }
    let n = mids.len();
    let a = g.gather(p3, &parents)?;
    let b = g.gather(p3, &mids)?;
    let c = g.gather(p3, &children)?;
    let d1 = g.sub(b, a)?;
    let d2 = g.sub(c, b)?;
    let n1 = g.norm_last(d1);
    let n2 = g.norm_last(d2);
    let den = g.mul(n1, n2)?;
    let den = g.add_const(den, &Tensor::full(&[t_len, n], F::from_f64(1e-6)))?;
    // signed flexion about the keyboard axis: (d1 × d2) · ŷ
    let d1x = g.slice_cols(d1, 0, 1)?;
    let d1z = g.slice_cols(d1, 2, 1)?;
    let d2x = g.slice_cols(d2, 0, 1)?;
    let d2z = g.slice_cols(d2, 2, 1)?;
    let zx = g.mul(d1z, d2x)?;
    let xz = g.mul(d1x, d2z)?;
    let cross = g.sub(zx, xz)?;
    let cross = g.reshape(cross, &[t_len, n])?;
    let prod = g.mul(d1, d2)?;
    let ones = g.constant(Tensor::full(&[3, 1], F::ONE));
    let dot = g.matmul(prod, ones)?;
    let dot = g.reshape(dot, &[t_len, n])?;
    let sin = g.div(cross, den)?;
    let cos = g.div(dot, den)?;
    // relu(-sin - sin_ext) + relu(cos_flex - cos)
    let neg = g.scale(sin, -1.0);
    let ext = g.add_const(neg, &tile(&neg_sin_ext, t_len))?;
    let ext = g.relu(ext);
    let negc = g.scale(cos, -1.0);
    let flex = g.add_const(negc, &tile(&cos_flex, t_len))?;
    let flex = g.relu(flex);
    let hinge = g.add(ext, flex)?;
    let angle_term = g.mean(hinge);

    let ta = g.gather(p3, &TIPS[..4])?;
    let tb = g.gather(p3, &TIPS[1..])?;
    let gap = g.sub(ta, tb)?;
    let dist = g.norm_last(gap);
    let negd = g.scale(dist, -1.0);
    let short = g.add_const(negd, &Tensor::full(&[t_len, 4], F::from_f64(MIN_TIP_GAP_MM)))?;
    let short = g.relu(short);
    let crowd = g.mean(short);
    g.add(angle_term, crowd)
}

/// Pose loss terms for `[T, 63]` prediction and target.
pub fn pose_loss_terms<F: Scalar>(
    g: &mut Graph<F>,
    pred: Var,
    gt: Var,
    graph: &HandGraph,
    bones: &BoneTable,
) -> Result<PoseLossTerms> {
    let shape = g.shape(pred).to_vec();
    if shape != g.shape(gt) || shape.len() != 2 || shape[1] != NUM_JOINTS * 3 {
        return Err(Error::Shape(format!("pose loss on {shape:?} vs {:?}", g.shape(gt))));
    }
    let t_len = shape[0];
    let p3 = g.reshape(pred, &[t_len, NUM_JOINTS, 3])?;
    let g3 = g.reshape(gt, &[t_len, NUM_JOINTS, 3])?;
    let d = g.sub(p3, g3)?;
    let dn = g.norm_last(d);
    let pos = g.mean(dn);

    let parents: Vec<usize> = graph.bones.iter().map(|b| b.0).collect();
    let children: Vec<usize> = graph.bones.iter().map(|b| b.1).collect();
    let pa = g.gather(p3, &parents)?;
    let ch = g.gather(p3, &children)?;
    let bv = g.sub(ch, pa)?;
    let bl = g.norm_last(bv);
    let neg_ref: Vec<f64> = bones.lengths.iter().map(|l| -l).collect();
    let dev = g.add_const(bl, &tile(&neg_ref, t_len))?;
    let dev = g.abs(dev);
    let bone = g.mean(dev);

    let vel = if t_len >= 2 {
        let later = g.narrow(d, 1, t_len - 1)?;
        let earlier = g.narrow(d, 0, t_len - 1)?;
        let dv = g.sub(later, earlier)?;
        let nv = g.norm_last(dv);
        g.mean(nv)
    } else {
        g.constant(Tensor::scalar(F::ZERO))
    };
    let bio = biomech_penalty(g, p3)?;
    Ok(PoseLossTerms { pos, bone, vel, bio })
}

pub fn pose_loss<F: Scalar>(
    g: &mut Graph<F>,
    pred: Var,
    gt: Var,
    graph: &HandGraph,
    bones: &BoneTable,
    w: PoseLossWeights,
) -> Result<Var> {
    let t = pose_loss_terms(g, pred, gt, graph, bones)?;
    let bone = g.scale(t.bone, w.bone);
    let vel = g.scale(t.vel, w.vel);
    let bio = g.scale(t.bio, w.bio);
    let s = g.add(t.pos, bone)?;
    let s = g.add(s, vel)?;
    g.add(s, bio)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoseConfig {
    /// Channel width of each UNet level.
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub blocks_per_level: usize,
    pub film_hidden: usize,
    pub residual_scale_mm: f64,
    pub arch_mm: f32,
}

impl Default for PoseConfig {
    fn default() -> Self {
        Self {
            channels: vec![64, 128, 256],
            kernel: 9,
            blocks_per_level: 2,
            film_hidden: 32,
            residual_scale_mm: 10.0,
            arch_mm: 25.0,
        }
    }
}

impl PoseConfig {
    /// Narrow channels for CPU training at desk scale.
    pub fn desk() -> Self {
        Self {
            channels: vec![16, 32, 64],
            ..Self::default()
        }
    }
}

/// Inputs of one pose synthesis pass.
#[derive(Debug, Clone)]
pub struct PoseInput<F> {
    /// `[T, 63]` rig positions, mm.
    pub rig: Tensor<F>,
    /// `[T, 21, 4]` normalized rig coordinates plus anchor flag.
    pub features: Tensor<F>,
    /// `[T, 15]` fingering conditioning.
    pub cond: Tensor<F>,
    /// `[T, 63]`: 0 on anchor joints, 1 elsewhere.
    pub keep: Tensor<F>,
}

impl<F: Scalar> PoseInput<F> {
    pub fn build(
        wrist: &WristTrajectory,
        tips: &FingertipTrajectory,
        fingering: &FingeringGrid,
        geom: &KeyboardGeometry,
        arch_mm: f32,
    ) -> Result<Self> {
        let rig = rig_trajectory(wrist, tips, arch_mm)?;
        if fingering.frames() != rig.len() {
            return Err(Error::Shape("pose inputs are not frame-aligned".into()));
        }
        let t_len = rig.len();
        let flat = rig.to_flat();
        let wflat: Vec<f32> = wrist.frames.iter().flatten().copied().collect();
        let centre = axis_centre(&wflat, 3);
        let coords = normalize_coords::<F>(&flat, NUM_JOINTS * 3, centre);
        let mut features = Vec::with_capacity(t_len * NUM_JOINTS * 4);
        let mut keep = Vec::with_capacity(t_len * NUM_JOINTS * 3);
        for t in 0..t_len {
            for j in 0..NUM_JOINTS {
                let base = (t * NUM_JOINTS + j) * 3;
                features.extend_from_slice(&coords.data()[base..base + 3]);
                let anchor = if is_anchor(j) { F::ONE } else { F::ZERO };
                features.push(anchor);
                keep.extend_from_slice(&[F::ONE - anchor; 3]);
            }
        }
        Ok(Self {
            rig: to_tensor(&flat, NUM_JOINTS * 3),
            features: Tensor::new(&[t_len, NUM_JOINTS, 4], features)?,
            cond: fingering_features(fingering, tips.hand, geom, centre[1]),
            keep: Tensor::new(&[t_len, NUM_JOINTS * 3], keep)?,
        })
    }
}

#[derive(Debug, Clone)]
struct StBlock {
    gconv: GraphConv,
    film: FilmGenerator,
    tconv_w: String,
    tconv_b: String,
    channels: usize,
}

impl StBlock {
    fn new(name: &str, channels: usize, film_hidden: usize) -> Self {
        Self {
            gconv: GraphConv::new(format!("{name}.g"), channels, channels, NUM_PARTITIONS),
            film: FilmGenerator::new(&format!("{name}.film"), FINGERING_FEATURES, film_hidden, channels),
            tconv_w: format!("{name}.t.w"),
            tconv_b: format!("{name}.t.b"),
            channels,
        }
    }

    fn init(&self, store: &mut ParamStore, kernel: usize, rng: &mut ChaCha8Rng) -> Result<()> {
        self.gconv.init(store, Init::Default, rng)?;
        self.film.init(store, rng)?;
        let std = 0.5 / ((kernel * self.channels) as f64).sqrt();
        store.init_normal(&self.tconv_w, &[kernel, self.channels, self.channels], std, rng)?;
        store.init_const(&self.tconv_b, &[self.channels], 0.0)
    }

    fn forward<F: Scalar>(&self, g: &mut Graph<F>, p: &Bindings, h: Var, cond: Var, adj: &[Tensor<F>]) -> Result<Var> {
        let a = g.silu(h);
        let a = self.gconv.forward(g, p, a, adj)?;
        let a = self.film.apply(g, p, a, cond)?;
        let a = g.silu(a);
        let a = g.conv1d(a, p.get(&self.tconv_w)?, p.get(&self.tconv_b)?, 1)?;
        g.add(h, a)
    }
}

/// Spatio-temporal graph UNet over `(time × joints)`.
#[derive(Debug, Clone)]
pub struct PoseNet {
    pub cfg: PoseConfig,
    graph: HandGraph,
    input: GraphConv,
    enc: Vec<Vec<StBlock>>,
    down: Vec<(String, String)>,
    up: Vec<Linear>,
    dec: Vec<StBlock>,
    head: Linear,
}

impl PoseNet {
    pub fn new(prefix: &str, cfg: PoseConfig) -> Result<Self> {
        if cfg.channels.is_empty() {
            return Err(Error::Config("pose network needs at least one level".into()));
        }
        if cfg.kernel % 2 == 0 {
            return Err(Error::Config(format!("temporal kernel must be odd, got {}", cfg.kernel)));
        }
        let levels = cfg.channels.len();
        let c = &cfg.channels;
        let enc = (0..levels)
            .map(|l| {
                (0..cfg.blocks_per_level)
                    .map(|b| StBlock::new(&format!("{prefix}.e{l}.{b}"), c[l], cfg.film_hidden))
                    .collect()
            })
            .collect();
        let down = (0..levels - 1)
            .map(|l| (format!("{prefix}.down{l}.w"), format!("{prefix}.down{l}.b")))
            .collect();
        let up = (0..levels - 1)
            .map(|l| Linear::new(format!("{prefix}.up{l}"), c[l + 1], c[l]))
            .collect();
        let dec = (0..levels - 1)
            .map(|l| StBlock::new(&format!("{prefix}.d{l}"), c[l], cfg.film_hidden))
            .collect();
        Ok(Self {
            graph: build_hand_graph(),
            input: GraphConv::new(format!("{prefix}.in"), 4, c[0], NUM_PARTITIONS),
            head: Linear::new(format!("{prefix}.head"), c[0], 3),
            enc,
            down,
            up,
            dec,
            cfg,
        })
    }

    pub fn graph(&self) -> &HandGraph {
        &self.graph
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        let c = &self.cfg.channels;
        self.input.init(store, Init::Default, rng)?;
        for (l, blocks) in self.enc.iter().enumerate() {
            for b in blocks {
                b.init(store, self.cfg.kernel, rng)?;
            }
            if l + 1 < c.len() {
                let (w, bias) = &self.down[l];
                store.init_normal(w, &[3, c[l], c[l + 1]], 1.0 / ((3 * c[l]) as f64).sqrt(), rng)?;
                store.init_const(bias, &[c[l + 1]], 0.0)?;
                self.up[l].init(store, Init::Default, rng)?;
                self.dec[l].init(store, self.cfg.kernel, rng)?;
            }
        }
        self.head.init(store, Init::Zero, rng)
    }

    /// `[T, 63]` pose: the rig plus a predicted residual on the inner joints.
    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, p: &Bindings, input: &PoseInput<F>) -> Result<Var> {
        let t_len = input.rig.shape()[0];
        let adj = self.graph.adjacency::<F>();
        let levels = self.cfg.channels.len();
        let mut lengths = vec![t_len];
        for l in 1..levels {
            lengths.push(lengths[l - 1].div_ceil(2));
        }
        // conditioning sampled at the centre frame of each strided output
        let conds: Vec<Var> = (0..levels)
            .map(|l| {
                let step = 1usize << l;
                let cols = FINGERING_FEATURES;
                let mut data = Vec::with_capacity(lengths[l] * cols);
                for o in 0..lengths[l] {
                    let t = (o * step).min(t_len - 1);
                    data.extend_from_slice(&input.cond.data()[t * cols..(t + 1) * cols]);
                }
                Tensor::new(&[lengths[l], cols], data).map(|t| g.constant(t))
            })
            .collect::<Result<_>>()?;

        let x = g.constant(input.features.clone());
        let mut h = self.input.forward(g, p, x, &adj)?;
        let mut skips = Vec::with_capacity(levels);
        for l in 0..levels {
            for b in &self.enc[l] {
                h = b.forward(g, p, h, conds[l], &adj)?;
            }
            skips.push(h);
            if l + 1 < levels {
                let (w, bias) = &self.down[l];
                h = g.silu(h);
                h = g.conv1d(h, p.get(w)?, p.get(bias)?, 2)?;
            }
        }
        for l in (0..levels - 1).rev() {
            h = g.upsample2(h, lengths[l])?;
            h = self.up[l].forward(g, p, h)?;
            h = g.add(h, skips[l])?;
            h = self.dec[l].forward(g, p, h, conds[l], &adj)?;
        }
        let h = g.silu(h);
        let raw = self.head.forward(g, p, h)?;
        let raw = g.reshape(raw, &[t_len, NUM_JOINTS * 3])?;
        let raw = g.scale(raw, self.cfg.residual_scale_mm);
        let residual = g.mul_const(raw, &input.keep)?;
        let rig = g.constant(input.rig.clone());
        g.add(rig, residual)
    }

    /// Full pose for one hand; wrist and tips are copied from the inputs.
    pub fn synthesize(
        &self,
        store: &ParamStore,
        wrist: &WristTrajectory,
        tips: &FingertipTrajectory,
        fingering: &FingeringGrid,
        geom: &KeyboardGeometry,
    ) -> Result<HandPose> {
        if tips.is_empty() {
            return Ok(HandPose { hand: tips.hand, frames: vec![] });
        }
        let input = PoseInput::<f32>::build(wrist, tips, fingering, geom, self.cfg.arch_mm)?;
        let mut g = Graph::<f32>::new();
        let p = g.bind(&store.tensors());
        let out = self.forward(&mut g, &p, &input)?;
        if !g.value(out).all_finite() {
            return Err(Error::Inference("pose network produced non-finite joints".into()));
        }
        let mut pose = HandPose::from_flat(tips.hand, g.value(out).data())?;
        for (t, fr) in pose.frames.iter_mut().enumerate() {
            fr[WRIST] = wrist.frames[t];
            for (f, &j) in TIPS.iter().enumerate() {
                fr[j] = tips.frames[t][f];
            }
        }
        Ok(pose)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoseRefinerConfig {
    pub dim: usize,
    pub blocks: usize,
    pub kernel: usize,
    pub film_hidden: usize,
    pub residual_scale_mm: f64,
    /// Weight of the mean residual magnitude in the training loss.
    pub residual_penalty: f64,
    /// Moving-average radius after refinement; 0 disables smoothing.
    pub smooth_radius: usize,
}

impl Default for PoseRefinerConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            blocks: 4,
            kernel: 9,
            film_hidden: 32,
            residual_scale_mm: 5.0,
            residual_penalty: 0.1,
            smooth_radius: 2,
        }
    }
}

/// Inputs of one full-skeleton refinement pass.
#[derive(Debug, Clone)]
pub struct PoseRefineInput<F> {
    pub pose: Tensor<F>,
    pub features: Tensor<F>,
    /// `[T, 15 + 452]`.
    pub cond: Tensor<F>,
    /// `[T, 63]`: 0 on Y/Z of pressing tips.
    pub keep: Tensor<F>,
}

impl<F: Scalar> PoseRefineInput<F> {
    pub fn build(
        pose: &HandPose,
        fingering: &FingeringGrid,
        midi: &Tensor<f32>,
        geom: &KeyboardGeometry,
    ) -> Result<Self> {
        let t_len = pose.len();
        if fingering.frames() != t_len || midi.shape()[0] != t_len {
            return Err(Error::Shape("pose refinement inputs are not frame-aligned".into()));
        }
        let cols = NUM_JOINTS * 3;
        let flat = pose.to_flat();
        let centre = axis_centre(&flat, cols);
        let fing = fingering_features::<F>(fingering, pose.hand, geom, centre[1]);
        let mut cond = Vec::with_capacity(t_len * (FINGERING_FEATURES + MIDI_FEATURES));
        for t in 0..t_len {
            cond.extend_from_slice(&fing.data()[t * FINGERING_FEATURES..(t + 1) * FINGERING_FEATURES]);
            cond.extend(midi.data()[t * MIDI_FEATURES..(t + 1) * MIDI_FEATURES].iter().map(|&v| F::from_f64(v as f64)));
        }
        let mask = press_rows(fingering, pose.hand);
        Ok(Self {
            pose: to_tensor(&flat, cols),
            features: normalize_coords(&flat, cols, centre),
            cond: Tensor::new(&[t_len, FINGERING_FEATURES + MIDI_FEATURES], cond)?,
            keep: crate::refine::mask_multipliers(&mask, NUM_JOINTS, |f| TIPS[f], true),
        })
    }
}

/// MIDI-conditioned residual over all 21 joints.
#[derive(Debug, Clone)]
pub struct PoseRefiner {
    pub cfg: PoseRefinerConfig,
    input: Linear,
    film_in: FilmGenerator,
    film_out: FilmGenerator,
    net: TemporalResNet,
    head: Linear,
}

impl PoseRefiner {
    pub fn new(prefix: &str, cfg: PoseRefinerConfig) -> Result<Self> {
        let cols = NUM_JOINTS * 3;
        let cond = FINGERING_FEATURES + MIDI_FEATURES;
        Ok(Self {
            input: Linear::new(format!("{prefix}.in"), cols, cfg.dim),
            film_in: FilmGenerator::new(&format!("{prefix}.film_in"), cond, cfg.film_hidden, cfg.dim),
            film_out: FilmGenerator::new(&format!("{prefix}.film_out"), cond, cfg.film_hidden, cfg.dim),
            net: TemporalResNet::new(format!("{prefix}.res"), cfg.dim, cfg.blocks, cfg.kernel)?,
            head: Linear::new(format!("{prefix}.head"), cfg.dim, cols),
            cfg,
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        self.input.init(store, Init::Default, rng)?;
        self.film_in.init(store, rng)?;
        self.film_out.init(store, rng)?;
        self.net.init(store, rng)?;
        self.head.init(store, Init::Zero, rng)
    }

    /// Returns `(refined pose, residual)`, both `[T, 63]`.
    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, p: &Bindings, input: &PoseRefineInput<F>) -> Result<(Var, Var)> {
        let x = g.constant(input.features.clone());
        let cond = g.constant(input.cond.clone());
        let h = self.input.forward(g, p, x)?;
        let h = self.film_in.apply(g, p, h, cond)?;
        let h = self.net.forward(g, p, h)?;
        let h = self.film_out.apply(g, p, h, cond)?;
        let h = g.silu(h);
        let raw = self.head.forward(g, p, h)?;
        let raw = g.scale(raw, self.cfg.residual_scale_mm);
        let residual = g.mul_const(raw, &input.keep)?;
        let base = g.constant(input.pose.clone());
        Ok((g.add(base, residual)?, residual))
    }

    /// Refines and smooths one hand. Returns the pose and the mean residual
    /// magnitude per joint, mm.
    pub fn refine(
        &self,
        store: &ParamStore,
        pose: &HandPose,
        fingering: &FingeringGrid,
        midi: &Tensor<f32>,
        geom: &KeyboardGeometry,
    ) -> Result<(HandPose, f64)> {
        if pose.is_empty() {
            return Ok((pose.clone(), 0.0));
        }
        let input = PoseRefineInput::<f32>::build(pose, fingering, midi, geom)?;
        let mut g = Graph::<f32>::new();
        let p = g.bind(&store.tensors());
        let (out, residual) = self.forward(&mut g, &p, &input)?;
        if !g.value(out).all_finite() {
            return Err(Error::Inference("pose refiner produced non-finite joints".into()));
        }
        let res = g.value(residual).data();
        let mean_res = res
            .chunks_exact(3)
            .map(|c| ((c[0] * c[0] + c[1] * c[1] + c[2] * c[2]) as f64).sqrt())
            .sum::<f64>()
            / (res.len() / 3).max(1) as f64;
        let mut flat = g.value(out).data().to_vec();
        if self.cfg.smooth_radius > 0 {
            flat = moving_average(&flat, NUM_JOINTS * 3, self.cfg.smooth_radius);
        }
        let mut refined = HandPose::from_flat(pose.hand, &flat)?;
        constrain_endpoints(&mut refined, pose, &press_rows(fingering, pose.hand));
        Ok((refined, mean_res))
    }
}

/// Restores pressed fingertip Y/Z and the first and last frames from `source`.
pub fn constrain_endpoints(pose: &mut HandPose, source: &HandPose, mask: &[[bool; NUM_FINGERS]]) {
    let n = pose.len();
    for (t, (fr, m)) in pose.frames.iter_mut().zip(mask).enumerate() {
        if t == 0 || t + 1 == n {
            *fr = source.frames[t];
            continue;
        }
        for f in 0..NUM_FINGERS {
            if m[f] {
                let j = TIPS[f];
                fr[j][1] = source.frames[t][j][1];
                fr[j][2] = source.frames[t][j][2];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score::fingering::finger_code;
    use rand::{Rng, SeedableRng};

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(8)
    }

    fn hand_frame(dx: f32) -> (Vec3, [Vec3; NUM_FINGERS]) {
        let wrist = [-50.0 + dx, 1000.0, 45.0];
        let tips = std::array::from_fn(|f| [30.0 + dx, 950.0 + 25.0 * f as f32, 0.0]);
        (wrist, tips)
    }

    fn pose_seq(t_len: usize) -> HandPose {
        HandPose {
            hand: Hand::Right,
            frames: (0..t_len)
                .map(|t| {
                    let (w, tips) = hand_frame(t as f32);
                    rig_pose(w, &tips, &[25.0; NUM_FINGERS])
                })
                .collect(),
        }
    }

    #[test]
    fn graph_structure() {
        let g = build_hand_graph();
        assert_eq!(g.edges.len(), 24);
        assert_eq!(g.bones.len(), NUM_BONES);
        assert_eq!(g.degree(WRIST), 5);
        assert!(g.is_connected());
        for (i, a) in g.adjacency::<f64>().iter().enumerate() {
            assert_eq!(a.shape(), &[NUM_JOINTS, NUM_JOINTS]);
            if i == 0 {
                assert!((0..NUM_JOINTS).all(|j| a.data()[j * NUM_JOINTS + j] > 0.0));
            }
        }
        let adj = g.adjacency::<f64>();
        for j in 0..NUM_JOINTS {
            let s: f64 = (0..NUM_PARTITIONS).map(|p| (0..NUM_JOINTS).map(|n| adj[p].data()[j * NUM_JOINTS + n]).sum::<f64>()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert_eq!(g.partition(joint(1, 1), joint(1, 0)), Partition::Centripetal);
        assert_eq!(g.partition(joint(1, 0), joint(2, 0)), Partition::Root);
    }

    #[test]
    fn rig_is_on_the_segment() {
        let (w, tips) = hand_frame(0.0);
        let r = rig_pose(w, &tips, &[0.0; NUM_FINGERS]);
        for f in 0..NUM_FINGERS {
            assert_eq!(r[TIPS[f]], tips[f]);
            let m = r[joint(f, 1)];
            assert!((m[0] - (w[0] + 0.7 * (tips[f][0] - w[0]))).abs() < 1e-4);
        }
        assert_eq!(r[WRIST], w);
    }

    fn loss_terms(pred: &HandPose, gt: &HandPose, bones: &BoneTable) -> (f64, f64, f64, f64) {
        let graph = build_hand_graph();
        let mut g = Graph::<f64>::new();
        let p = g.constant(to_tensor(&pred.to_flat(), 63));
        let q = g.constant(to_tensor(&gt.to_flat(), 63));
        let t = pose_loss_terms(&mut g, p, q, &graph, bones).unwrap();
        (g.value(t.pos).item(), g.value(t.bone).item(), g.value(t.vel).item(), g.value(t.bio).item())
    }

    #[test]
    fn loss_identity_and_single_bone() {
        let graph = build_hand_graph();
        // rigid translation keeps every bone length
        let x = pose_seq(6);
        let bones = BoneTable::from_poses(&graph, &[&x]).unwrap();
        let (pos, bone, vel, bio) = loss_terms(&x, &x, &bones);
        assert_eq!((pos, bone, vel, bio), (0.0, 0.0, 0.0, 0.0));

        // stretch the index DIP->TIP bone by exactly 1 mm along X
        let mut y = HandPose {
            hand: Hand::Right,
            frames: vec![[[0.0; 3]; NUM_JOINTS]; 3],
        };
        for fr in &mut y.frames {
            for f in 0..NUM_FINGERS {
                for s in 0..4 {
                    fr[joint(f, s)] = [16.0 * (s + 1) as f32, 20.0 * f as f32, 0.0];
                }
            }
        }
        let bones = BoneTable::from_poses(&graph, &[&y]).unwrap();
        let mut z = y.clone();
        for fr in &mut z.frames {
            fr[joint(1, 3)][0] += 1.0;
        }
        let (_, bone, _, _) = loss_terms(&z, &y, &bones);
        assert!((bone - 1.0 / 20.0).abs() < 1e-9, "{bone}");
    }

    #[test]
    fn hyperextension_is_penalized() {
        let graph = build_hand_graph();
        let x = pose_seq(3);
        let bones = BoneTable::from_poses(&graph, &[&x]).unwrap();
        assert_eq!(loss_terms(&x, &x, &bones).3, 0.0);
        let mut bent = x.clone();
        for fr in &mut bent.frames {
            // push the index PIP far below the MCP-DIP line
            fr[joint(1, 1)][2] -= 40.0;
        }
        assert!(loss_terms(&bent, &bent, &bones).3 > 0.0);
    }

    fn net_and_store(cfg: PoseConfig) -> (PoseNet, ParamStore) {
        let net = PoseNet::new("s4", cfg).unwrap();
        let mut store = ParamStore::new(0);
        net.init(&mut store, &mut rng()).unwrap();
        (net, store)
    }

    fn tiny() -> PoseConfig {
        PoseConfig {
            channels: vec![4, 8],
            kernel: 3,
            blocks_per_level: 1,
            film_hidden: 4,
            ..PoseConfig::default()
        }
    }

    #[test]
    fn zero_head_gives_rig_and_anchors_survive() {
        let geom = KeyboardGeometry::default();
        let (net, mut store) = net_and_store(tiny());
        let x = pose_seq(9);
        let mut fing = FingeringGrid::new(9);
        fing.set(3, 40, finger_code(Hand::Right, 1));
        let out = net.synthesize(&store, &x.wrist(), &x.tips(), &fing, &geom).unwrap();
        assert_eq!(out, x);

        let mut r = rng();
        for name in store.names().cloned().collect::<Vec<_>>() {
            for v in store.get_mut(&name).unwrap().data_mut() {
                *v += r.random_range(-0.2..0.2);
            }
        }
        for t_len in [1usize, 2, 7] {
            let x = pose_seq(t_len);
            let out = net.synthesize(&store, &x.wrist(), &x.tips(), &FingeringGrid::new(t_len), &geom).unwrap();
            assert_eq!(out.len(), t_len);
            for t in 0..t_len {
                for &j in &ANCHORS {
                    assert_eq!(out.frames[t][j], x.frames[t][j]);
                }
            }
        }
    }

    #[test]
    fn refiner_identity_and_pressed_tips() {
        let geom = KeyboardGeometry::default();
        let cfg = PoseRefinerConfig { dim: 8, blocks: 1, film_hidden: 4, smooth_radius: 0, ..Default::default() };
        let r = PoseRefiner::new("s4r", cfg.clone()).unwrap();
        let mut store = ParamStore::new(0);
        r.init(&mut store, &mut rng()).unwrap();
        let x = pose_seq(12);
        let mut fing = FingeringGrid::new(12);
        for t in 2..8 {
            fing.set(t, 40, finger_code(Hand::Right, 2));
        }
        let midi = crate::refine::midi_features(&[], crate::score::raster::FrameGrid::new(12));
        let (out, res) = r.refine(&store, &x, &fing, &midi, &geom).unwrap();
        assert_eq!(out, x);
        assert_eq!(res, 0.0);

        store.get_mut("s4r.head.b").unwrap().data_mut().iter_mut().for_each(|v| *v = 1.0);
        let r2 = PoseRefiner::new("s4r", PoseRefinerConfig { smooth_radius: 2, ..cfg }).unwrap();
        let (out, res) = r2.refine(&store, &x, &fing, &midi, &geom).unwrap();
        assert!(res > 0.0);
        for t in 2..8 {
            assert_eq!(out.frames[t][TIPS[2]][1], x.frames[t][TIPS[2]][1]);
            assert_eq!(out.frames[t][TIPS[2]][2], x.frames[t][TIPS[2]][2]);
        }
        assert_eq!(out.frames[0], x.frames[0]);
        assert_eq!(out.frames[11], x.frames[11]);
        assert_ne!(out.frames[5][WRIST], x.frames[5][WRIST]);
    }
}
