//! Stage 2: learned residual refinement of fingertip trajectories.
//!
//! A transformer encoder predicts a per-frame residual for the five
//! fingertips of one hand. The residual is clamped, then its Y and Z
//! components are zeroed wherever a finger presses, so refinement can move a
//! pressing finger along the key but never off it or out of contact. The
//! second refiner is modulated by MIDI features. A temporal smoother closes
//! the stage under the same mask.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::keyboard::KeyboardGeometry;
use crate::nn::{
    sinusoidal_positions, Bindings, FilmGenerator, Graph, Init, Linear, ParamStore, Scalar,
    TemporalResNet, Tensor, TransformerEncoder, Var,
};
use crate::score::fingering::FingeringGrid;
use crate::score::midi::NoteEvent;
use crate::score::raster::FrameGrid;
use crate::types::{FingertipTrajectory, Hand, Vec3, NUM_FINGERS, NUM_KEYS};

pub const MIDI_FEATURES: usize = 452;
/// Per-frame fingering encoding: press flag, pressed-key Y and black-key flag
/// per finger.
pub const FINGERING_FEATURES: usize = 3 * NUM_FINGERS;
/// Decay constant of the onset and release ramps, seconds.
pub const RAMP_TAU_S: f64 = 0.1;
/// Look-ahead for the upcoming-onset ramps, seconds.
pub const ANTICIPATION_S: f64 = 1.0;
/// Coordinates are centred and divided by this before entering a network.
pub const COORD_SCALE_MM: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualBounds {
    pub fingertip_mm: f32,
    pub wrist_mm: f32,
}

impl Default for ResidualBounds {
    fn default() -> Self {
        Self {
            fingertip_mm: 80.0,
            wrist_mm: 50.0,
        }
    }
}

/// Deterministic per-frame MIDI description, `[T, 452]`:
///
/// | columns   | content                                            |
/// |-----------|----------------------------------------------------|
/// | 0..88     | key sounding                                       |
/// | 88..176   | velocity / 127 of the sounding note                |
/// | 176..264  | onset ramp `exp(-Δ/τ)`, Δ frames since the onset   |
/// | 264..352  | release ramp `exp(-Δ/τ)`, Δ frames until the end   |
/// | 352..440  | upcoming-onset ramp over the next second           |
/// | 440..452  | polyphony, onset count, velocity mean/max, global  |
/// |           | onset ramps, inter-onset intervals, onset density, |
/// |           | pitch centroid and span                            |
pub fn midi_features(events: &[NoteEvent], grid: FrameGrid) -> Tensor<f32> {
    let t_len = grid.frame_count;
    let fps = FrameGrid::fps();
    let tau = RAMP_TAU_S * fps;
    let horizon = (ANTICIPATION_S * fps).round() as i64;
    let mut out = vec![0.0f32; t_len * MIDI_FEATURES];
    let col = |t: usize, c: usize| t * MIDI_FEATURES + c;

    let mut onset_frames: Vec<i64> = Vec::with_capacity(events.len());
    for e in events {
        let k = e.key as usize;
        let on = FrameGrid::frame_of(e.onset);
        onset_frames.push(on);
        let span = grid.frames_overlapping(e.onset, e.end());
        let last = span.end as i64 - 1;
        for t in span.clone() {
            out[col(t, k)] = 1.0;
            let v = e.velocity as f32 / 127.0;
            if v > out[col(t, 88 + k)] {
                out[col(t, 88 + k)] = v;
            }
            let since = (t as i64 - on).max(0) as f64;
            let ramp = (-since / tau).exp() as f32;
            if ramp > out[col(t, 176 + k)] {
                out[col(t, 176 + k)] = ramp;
            }
            let until = (last - t as i64).max(0) as f64;
            let ramp = (-until / tau).exp() as f32;
            if ramp > out[col(t, 264 + k)] {
                out[col(t, 264 + k)] = ramp;
            }
        }
        for t in (on - horizon).max(0)..on.min(t_len as i64) {
            let ramp = (-((on - t) as f64) / tau).exp() as f32;
            let c = col(t as usize, 352 + k);
            if ramp > out[c] {
                out[c] = ramp;
            }
        }
    }
    onset_frames.sort_unstable();

    let g = 440;
    for t in 0..t_len {
        let ti = t as i64;
        let mut active = 0usize;
        let (mut vsum, mut vmax) = (0.0f32, 0.0f32);
        let (mut lo, mut hi, mut ksum) = (usize::MAX, 0usize, 0usize);
        for k in 0..NUM_KEYS {
            if out[col(t, k)] > 0.0 {
                active += 1;
                let v = out[col(t, 88 + k)];
                vsum += v;
                vmax = vmax.max(v);
                lo = lo.min(k);
                hi = hi.max(k);
                ksum += k;
            }
        }
        out[col(t, g)] = active as f32 / 10.0;
        let here = onset_frames.iter().filter(|&&o| o == ti).count();
        out[col(t, g + 1)] = here as f32 / 5.0;
        if active > 0 {
            out[col(t, g + 2)] = vsum / active as f32;
            out[col(t, g + 3)] = vmax;
            out[col(t, g + 10)] = ksum as f32 / active as f32 / (NUM_KEYS - 1) as f32;
            out[col(t, g + 11)] = (hi - lo) as f32 / (NUM_KEYS - 1) as f32;
        }
        // onsets at or before t, and strictly after t
        let split = onset_frames.partition_point(|&o| o <= ti);
        let past = &onset_frames[..split];
        let future = &onset_frames[split..];
        if let Some(&p) = past.last() {
            out[col(t, g + 4)] = (-((ti - p) as f64) / tau).exp() as f32;
        }
        if let Some(&f) = future.first() {
            out[col(t, g + 5)] = (-((f - ti) as f64) / tau).exp() as f32;
        }
        let distinct_gap = |a: &[i64]| -> Option<i64> {
            a.windows(2).rev().find(|w| w[1] != w[0]).map(|w| (w[1] - w[0]).abs())
        };
        if let Some(d) = distinct_gap(past) {
            out[col(t, g + 6)] = ((d as f64 / fps).min(2.0) / 2.0) as f32;
        }
        let fut_rev: Vec<i64> = future.iter().take(8).rev().copied().collect();
        if let Some(d) = distinct_gap(&fut_rev) {
            out[col(t, g + 7)] = ((d as f64 / fps).min(2.0) / 2.0) as f32;
        }
        let half = (0.5 * fps).round() as i64;
        out[col(t, g + 8)] = past.iter().filter(|&&o| ti - o < half).count() as f32 / 10.0;
        out[col(t, g + 9)] = future.iter().filter(|&&o| o - ti <= half).count() as f32 / 10.0;
    }
    Tensor::new(&[t_len, MIDI_FEATURES], out).expect("feature shape")
}

/// Zeroes the Y and Z components of every residual whose finger presses.
pub fn apply_geometric_mask(residuals: &mut [[Vec3; NUM_FINGERS]], mask: &[[bool; NUM_FINGERS]]) {
    for (r, m) in residuals.iter_mut().zip(mask) {
        for f in 0..NUM_FINGERS {
            if m[f] {
                r[f][1] = 0.0;
                r[f][2] = 0.0;
            }
        }
    }
}

/// Multipliers that apply the geometric mask to a flat `[T, 3J]` residual:
/// 0 on the Y/Z columns of pressing fingers, 1 elsewhere. `joint_of`
/// maps a finger to its joint slot.
pub fn mask_multipliers<F: Scalar>(
    mask: &[[bool; NUM_FINGERS]],
    joints: usize,
    joint_of: impl Fn(usize) -> usize,
    enabled: bool,
) -> Tensor<F> {
    let mut keep = vec![F::ONE; mask.len() * joints * 3];
    if enabled {
        for (t, m) in mask.iter().enumerate() {
            for f in 0..NUM_FINGERS {
                if m[f] {
                    let base = (t * joints + joint_of(f)) * 3;
                    keep[base + 1] = F::ZERO;
                    keep[base + 2] = F::ZERO;
                }
            }
        }
    }
    Tensor::new(&[mask.len(), joints * 3], keep).expect("mask shape")
}

/// Press flags of `hand` per frame.
pub fn press_rows(fingering: &FingeringGrid, hand: Hand) -> Vec<[bool; NUM_FINGERS]> {
    (0..fingering.frames())
        .map(|t| fingering.finger_keys(t, hand).map(|k| k.is_some()))
        .collect()
}

/// Per-frame fingering encoding for one hand, `[T, 15]`, with pressed-key Y
/// expressed relative to `centre_y`.
pub fn fingering_features<F: Scalar>(
    fingering: &FingeringGrid,
    hand: Hand,
    geom: &KeyboardGeometry,
    centre_y: f64,
) -> Tensor<F> {
    let t_len = fingering.frames();
    let mut out = vec![F::ZERO; t_len * FINGERING_FEATURES];
    for t in 0..t_len {
        for (f, key) in fingering.finger_keys(t, hand).iter().enumerate() {
            if let Some(k) = *key {
                let row = t * FINGERING_FEATURES;
                out[row + f] = F::ONE;
                out[row + NUM_FINGERS + f] = F::from_f64((geom.keys[k].center_y() - centre_y) / COORD_SCALE_MM);
                if geom.keys[k].is_black {
                    out[row + 2 * NUM_FINGERS + f] = F::ONE;
                }
            }
        }
    }
    Tensor::new(&[t_len, FINGERING_FEATURES], out).expect("fingering feature shape")
}

/// Mean of every coordinate of a `[T, C]` flat trajectory, per axis.
pub fn axis_centre(flat: &[f32], stride: usize) -> [f64; 3] {
    let mut sum = [0.0f64; 3];
    let mut n = 0usize;
    for chunk in flat.chunks_exact(stride) {
        for p in chunk.chunks_exact(3) {
            for a in 0..3 {
                sum[a] += p[a] as f64;
            }
            n += 1;
        }
    }
    sum.map(|s| if n == 0 { 0.0 } else { s / n as f64 })
}

/// Centred, scaled copy of a flat trajectory.
pub fn normalize_coords<F: Scalar>(flat: &[f32], cols: usize, centre: [f64; 3]) -> Tensor<F> {
    let data = flat
        .iter()
        .enumerate()
        .map(|(i, &v)| F::from_f64((v as f64 - centre[i % 3]) / COORD_SCALE_MM))
        .collect();
    Tensor::new(&[flat.len() / cols, cols], data).expect("coordinate shape")
}

pub fn to_tensor<F: Scalar>(flat: &[f32], cols: usize) -> Tensor<F> {
    Tensor::new(&[flat.len() / cols, cols], flat.iter().map(|&v| F::from_f64(v as f64)).collect())
        .expect("trajectory shape")
}

/// Position plus velocity error over a `[T, 3J]` trajectory pair: mean
/// Euclidean joint error, plus mean Euclidean error of forward-difference
/// velocities (mm per frame).
pub fn trajectory_loss<F: Scalar>(
    g: &mut Graph<F>,
    pred: Var,
    gt: Var,
    lambda_pos: f64,
    lambda_vel: f64,
) -> Result<Var> {
    let shape = g.shape(pred).to_vec();
    if shape != g.shape(gt) || shape.len() != 2 || shape[1] % 3 != 0 {
        return Err(Error::Shape(format!(
            "trajectory loss on {shape:?} vs {:?}",
            g.shape(gt)
        )));
    }
    let (t, j) = (shape[0], shape[1] / 3);
    let d = g.sub(pred, gt)?;
    let d3 = g.reshape(d, &[t, j, 3])?;
    let n = g.norm_last(d3);
    let pos = g.mean(n);
    let mut loss = g.scale(pos, lambda_pos);
    if t >= 2 && lambda_vel != 0.0 {
        let later = g.narrow(d3, 1, t - 1)?;
        let earlier = g.narrow(d3, 0, t - 1)?;
        let dv = g.sub(later, earlier)?;
        let nv = g.norm_last(dv);
        let vel = g.mean(nv);
        let vel = g.scale(vel, lambda_vel);
        loss = g.add(loss, vel)?;
    }
    Ok(loss)
}

/// [`trajectory_loss`] on fingertip trajectories, in double precision.
pub fn refine_loss(
    pred: &FingertipTrajectory,
    gt: &FingertipTrajectory,
    lambda_pos: f64,
    lambda_vel: f64,
) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!("{} vs {} frames", pred.len(), gt.len())));
    }
    let cols = NUM_FINGERS * 3;
    let mut g = Graph::<f64>::new();
    let p = g.constant(to_tensor(&pred.to_flat(), cols));
    let q = g.constant(to_tensor(&gt.to_flat(), cols));
    let l = trajectory_loss(&mut g, p, q, lambda_pos, lambda_vel)?;
    Ok(g.value(l).item())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Conditioning {
    Raw,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    Film,
    Concat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefinerConfig {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub film_hidden: usize,
    /// Network output is multiplied by this to give millimetres.
    pub residual_scale_mm: f64,
    pub mask_y: bool,
    pub conditioning: Conditioning,
    pub fusion: Fusion,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            depth: 4,
            heads: 8,
            ff_mult: 2,
            film_hidden: 64,
            residual_scale_mm: 20.0,
            mask_y: true,
            conditioning: Conditioning::Raw,
            fusion: Fusion::Film,
        }
    }
}

/// Everything one refiner pass needs for one hand and one span of frames.
#[derive(Debug, Clone)]
pub struct RefineInput<F> {
    /// `[T, 15]` input positions, mm.
    pub traj: Tensor<F>,
    /// `[T, 30]` normalized coordinates plus fingering encoding.
    pub features: Tensor<F>,
    pub midi: Option<Tensor<F>>,
    /// `[T, 15]` mask multipliers.
    pub keep: Tensor<F>,
}

impl<F: Scalar> RefineInput<F> {
    pub fn build(
        traj: &FingertipTrajectory,
        fingering: &FingeringGrid,
        midi: Option<&Tensor<f32>>,
        geom: &KeyboardGeometry,
        mask_y: bool,
    ) -> Result<Self> {
        let t_len = traj.len();
        if fingering.frames() != t_len || midi.is_some_and(|m| m.shape()[0] != t_len) {
            return Err(Error::Shape("refiner inputs are not frame-aligned".into()));
        }
        let cols = NUM_FINGERS * 3;
        let flat = traj.to_flat();
        let centre = axis_centre(&flat, cols);
        let coords = normalize_coords::<F>(&flat, cols, centre);
        let fing = fingering_features::<F>(fingering, traj.hand, geom, centre[1]);
        let width = cols + FINGERING_FEATURES;
        let mut features = Vec::with_capacity(t_len * width);
        for t in 0..t_len {
            features.extend_from_slice(&coords.data()[t * cols..(t + 1) * cols]);
            features.extend_from_slice(&fing.data()[t * FINGERING_FEATURES..(t + 1) * FINGERING_FEATURES]);
        }
        let mask = press_rows(fingering, traj.hand);
        Ok(Self {
            traj: to_tensor(&flat, cols),
            features: Tensor::new(&[t_len, width], features)?,
            midi: midi.map(|m| m.cast()),
            keep: mask_multipliers(&mask, NUM_FINGERS, |f| f, mask_y),
        })
    }
}

/// Residual fingertip refiner for one stage.
#[derive(Debug, Clone)]
pub struct Refiner {
    pub cfg: RefinerConfig,
    uses_midi: bool,
    input: Linear,
    film_in: Option<FilmGenerator>,
    film_out: Option<FilmGenerator>,
    encoder: TransformerEncoder,
    head: Linear,
}

impl Refiner {
    /// `with_midi` selects the MIDI-conditioned variant; it is ignored when
    /// the config disables conditioning.
    pub fn new(prefix: &str, cfg: RefinerConfig, with_midi: bool) -> Result<Self> {
        let uses_midi = with_midi && cfg.conditioning == Conditioning::Raw;
        let concat = uses_midi && cfg.fusion == Fusion::Concat;
        let film = uses_midi && cfg.fusion == Fusion::Film;
        let din = NUM_FINGERS * 3 + FINGERING_FEATURES + if concat { MIDI_FEATURES } else { 0 };
        Ok(Self {
            input: Linear::new(format!("{prefix}.in"), din, cfg.dim),
            film_in: film.then(|| FilmGenerator::new(&format!("{prefix}.film_in"), MIDI_FEATURES, cfg.film_hidden, cfg.dim)),
            film_out: film.then(|| FilmGenerator::new(&format!("{prefix}.film_out"), MIDI_FEATURES, cfg.film_hidden, cfg.dim)),
            encoder: TransformerEncoder::new(&format!("{prefix}.enc"), cfg.dim, cfg.depth, cfg.heads, cfg.ff_mult)?,
            head: Linear::new(format!("{prefix}.head"), cfg.dim, NUM_FINGERS * 3),
            cfg,
            uses_midi,
        })
    }

    pub fn uses_midi(&self) -> bool {
        self.uses_midi
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        self.input.init(store, Init::Default, rng)?;
        if let (Some(a), Some(b)) = (&self.film_in, &self.film_out) {
            a.init(store, rng)?;
            b.init(store, rng)?;
        }
        self.encoder.init(store, rng)?;
        self.head.init(store, Init::Zero, rng)
    }

    /// Returns `(refined positions, clamped and masked residual)`, both `[T, 15]`.
    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        p: &Bindings,
        input: &RefineInput<F>,
        clamp_mm: f64,
    ) -> Result<(Var, Var)> {
        let t_len = input.traj.shape()[0];
        let midi = match (self.uses_midi, &input.midi) {
            (true, Some(m)) => Some(g.constant(m.clone())),
            (true, None) => {
                return Err(Error::Argument("MIDI-conditioned refiner needs MIDI features".into()))
            }
            (false, _) => None,
        };
        let mut x = g.constant(input.features.clone());
        if let (Some(m), Fusion::Concat) = (midi, self.cfg.fusion) {
            x = g.concat_cols(&[x, m])?;
        }
        let mut h = self.input.forward(g, p, x)?;
        let pe = sinusoidal_positions::<F>(t_len, self.cfg.dim);
        h = g.add_const(h, &pe)?;
        if let (Some(m), Some(film)) = (midi, &self.film_in) {
            h = film.apply(g, p, h, m)?;
        }
        h = self.encoder.forward(g, p, h)?;
        if let (Some(m), Some(film)) = (midi, &self.film_out) {
            h = film.apply(g, p, h, m)?;
        }
        let raw = self.head.forward(g, p, h)?;
        let raw = g.scale(raw, self.cfg.residual_scale_mm);
        let clamped = g.clamp(raw, -clamp_mm, clamp_mm);
        let residual = g.mul_const(clamped, &input.keep)?;
        let base = g.constant(input.traj.clone());
        Ok((g.add(base, residual)?, residual))
    }

    /// Inference for one hand. Returns the refined trajectory and the
    /// largest absolute residual component applied.
    pub fn refine(
        &self,
        store: &ParamStore,
        traj: &FingertipTrajectory,
        fingering: &FingeringGrid,
        midi: Option<&Tensor<f32>>,
        geom: &KeyboardGeometry,
        bounds: &ResidualBounds,
    ) -> Result<(FingertipTrajectory, f32)> {
        if traj.is_empty() {
            return Ok((traj.clone(), 0.0));
        }
        let input = RefineInput::<f32>::build(traj, fingering, midi, geom, self.cfg.mask_y)?;
        let mut g = Graph::<f32>::new();
        let p = g.bind(&store.tensors());
        let (out, residual) = self.forward(&mut g, &p, &input, bounds.fingertip_mm as f64)?;
        let values = g.value(out);
        if !values.all_finite() {
            return Err(Error::Inference("refiner produced non-finite positions".into()));
        }
        let max_res = g.value(residual).data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
        let mut refined = FingertipTrajectory::from_flat(traj.hand, values.data())?;
        // the mask is exact in the graph already; re-copy so rounding in the
        // addition of a zero residual can never leak
        if self.cfg.mask_y {
            let mask = press_rows(fingering, traj.hand);
            restore_pressed_yz(&mut refined.frames, &traj.frames, &mask);
        }
        Ok((refined, max_res))
    }
}

/// Copies Y and Z of pressing fingers from `source`.
pub fn restore_pressed_yz(
    target: &mut [[Vec3; NUM_FINGERS]],
    source: &[[Vec3; NUM_FINGERS]],
    mask: &[[bool; NUM_FINGERS]],
) {
    for ((t, s), m) in target.iter_mut().zip(source).zip(mask) {
        for f in 0..NUM_FINGERS {
            if m[f] {
                t[f][1] = s[f][1];
                t[f][2] = s[f][2];
            }
        }
    }
}

/// Symmetric moving average per channel; near the ends the window shrinks
/// symmetrically so the first and last samples are kept.
pub fn moving_average(series: &[f32], channels: usize, radius: usize) -> Vec<f32> {
    let t_len = series.len() / channels.max(1);
    let mut out = vec![0.0f32; series.len()];
    for t in 0..t_len {
        let r = radius.min(t).min(t_len - 1 - t);
        for c in 0..channels {
            let mut s = 0.0f64;
            for u in t - r..=t + r {
                s += series[u * channels + c] as f64;
            }
            out[t * channels + c] = (s / (2 * r + 1) as f64) as f32;
        }
    }
    out
}

/// Fallback smoother: moving average over every coordinate, then Y and Z of
/// pressing fingers restored.
pub fn smooth_trajectory(
    traj: &FingertipTrajectory,
    mask: &[[bool; NUM_FINGERS]],
    radius: usize,
) -> Result<FingertipTrajectory> {
    if radius == 0 {
        return Err(Error::Config("smoothing radius must be at least 1".into()));
    }
    if mask.len() != traj.len() {
        return Err(Error::Shape("press mask and trajectory lengths differ".into()));
    }
    let smoothed = moving_average(&traj.to_flat(), NUM_FINGERS * 3, radius);
    let mut out = FingertipTrajectory::from_flat(traj.hand, &smoothed)?;
    restore_pressed_yz(&mut out.frames, &traj.frames, mask);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SmootherConfig {
    pub dim: usize,
    pub blocks: usize,
    pub kernel: usize,
    pub residual_scale_mm: f64,
    /// Moving-average radius used when no learned smoother is available.
    pub fallback_radius: usize,
}

impl Default for SmootherConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            blocks: 4,
            kernel: 9,
            residual_scale_mm: 10.0,
            fallback_radius: 4,
        }
    }
}

/// Learned temporal smoother: residual temporal convolutions over the
/// centred coordinates of `channels / 3` points.
#[derive(Debug, Clone)]
pub struct TemporalSmoother {
    pub cfg: SmootherConfig,
    pub channels: usize,
    input: Linear,
    net: TemporalResNet,
    head: Linear,
}

impl TemporalSmoother {
    pub fn new(prefix: &str, channels: usize, extra_features: usize, cfg: SmootherConfig) -> Result<Self> {
        Ok(Self {
            input: Linear::new(format!("{prefix}.in"), channels + extra_features, cfg.dim),
            net: TemporalResNet::new(format!("{prefix}.res"), cfg.dim, cfg.blocks, cfg.kernel)?,
            head: Linear::new(format!("{prefix}.head"), cfg.dim, channels),
            channels,
            cfg,
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
        self.input.init(store, Init::Default, rng)?;
        self.net.init(store, rng)?;
        self.head.init(store, Init::Zero, rng)
    }

    /// Network input: normalized coordinates, then `extra` columns.
    pub fn features<F: Scalar>(&self, flat: &[f32], extra: Option<&Tensor<F>>) -> Result<Tensor<F>> {
        let centre = axis_centre(flat, self.channels);
        let coords = normalize_coords::<F>(flat, self.channels, centre);
        match extra {
            None => Ok(coords),
            Some(e) => {
                let t_len = coords.shape()[0];
                let ec = e.cols();
                if e.shape()[0] != t_len {
                    return Err(Error::Shape("smoother features are not frame-aligned".into()));
                }
                let mut data = Vec::with_capacity(t_len * (self.channels + ec));
                for t in 0..t_len {
                    data.extend_from_slice(&coords.data()[t * self.channels..(t + 1) * self.channels]);
                    data.extend_from_slice(&e.data()[t * ec..(t + 1) * ec]);
                }
                Tensor::new(&[t_len, self.channels + ec], data)
            }
        }
    }

    /// `positions + keep ⊙ clamp(residual)`, all `[T, channels]`.
    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        p: &Bindings,
        positions: &Tensor<F>,
        features: &Tensor<F>,
        keep: Option<&Tensor<F>>,
        clamp_mm: f64,
    ) -> Result<(Var, Var)> {
        let x = g.constant(features.clone());
        let h = self.input.forward(g, p, x)?;
        let h = self.net.forward(g, p, h)?;
        let h = g.silu(h);
        let raw = self.head.forward(g, p, h)?;
        let raw = g.scale(raw, self.cfg.residual_scale_mm);
        let mut residual = g.clamp(raw, -clamp_mm, clamp_mm);
        if let Some(k) = keep {
            residual = g.mul_const(residual, k)?;
        }
        let base = g.constant(positions.clone());
        Ok((g.add(base, residual)?, residual))
    }

    /// Smooths a fingertip trajectory, keeping pressed Y/Z.
    pub fn smooth_fingertips(
        &self,
        store: &ParamStore,
        traj: &FingertipTrajectory,
        mask: &[[bool; NUM_FINGERS]],
        clamp_mm: f64,
    ) -> Result<FingertipTrajectory> {
        if traj.is_empty() {
            return Ok(traj.clone());
        }
        let flat = traj.to_flat();
        let feats = self.features::<f32>(&flat, None)?;
        let keep = mask_multipliers::<f32>(mask, NUM_FINGERS, |f| f, true);
        let mut g = Graph::<f32>::new();
        let p = g.bind(&store.tensors());
        let (out, _) = self.forward(&mut g, &p, &to_tensor(&flat, self.channels), &feats, Some(&keep), clamp_mm)?;
        if !g.value(out).all_finite() {
            return Err(Error::Inference("smoother produced non-finite positions".into()));
        }
        let mut smoothed = FingertipTrajectory::from_flat(traj.hand, g.value(out).data())?;
        restore_pressed_yz(&mut smoothed.frames, &traj.frames, mask);
        Ok(smoothed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score::fingering::finger_code;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(21)
    }

    fn wave(hand: Hand, t_len: usize) -> FingertipTrajectory {
        FingertipTrajectory {
            hand,
            frames: (0..t_len)
                .map(|t| {
                    std::array::from_fn(|f| {
                        let s = t as f32 * 0.1 + f as f32;
                        [30.0 + 5.0 * s.sin(), 900.0 + 23.5 * f as f32 + 3.0 * s.cos(), 10.0 + 4.0 * (2.0 * s).sin()]
                    })
                })
                .collect(),
        }
    }

    fn one_press(t_len: usize, frames: std::ops::Range<usize>, key: usize, finger: usize) -> FingeringGrid {
        let mut g = FingeringGrid::new(t_len);
        for t in frames {
            g.set(t, key, finger_code(Hand::Right, finger));
        }
        g
    }

    #[test]
    fn silence_features_are_empty() {
        let f = midi_features(&[], FrameGrid::new(10));
        assert_eq!(f.shape(), &[10, MIDI_FEATURES]);
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_note_features() {
        let fps = FrameGrid::fps();
        let on_frame = 20usize;
        let note = NoteEvent {
            onset: FrameGrid::frame_start(on_frame),
            key: 39,
            velocity: 80,
            duration: 15.0 / fps,
        };
        let f = midi_features(&[note], FrameGrid::new(60));
        let at = |t: usize, c: usize| f.data()[t * MIDI_FEATURES + c];
        let tau = RAMP_TAU_S * fps;
        for t in 0..60 {
            let sounding = (on_frame..on_frame + 15).contains(&t);
            assert_eq!(at(t, 39), if sounding { 1.0 } else { 0.0 });
            if sounding {
                assert_eq!(at(t, 88 + 39), 80.0 / 127.0);
                let want = (-((t - on_frame) as f64) / tau).exp() as f32;
                assert!((at(t, 176 + 39) - want).abs() < 1e-7);
                assert_eq!(at(t, 440), 0.1);
            } else {
                assert_eq!(at(t, 176 + 39), 0.0);
                assert_eq!(at(t, 440), 0.0);
            }
            if t < on_frame {
                let want = (-((on_frame - t) as f64) / tau).exp() as f32;
                assert!((at(t, 352 + 39) - want).abs() < 1e-7);
            }
        }
        assert_eq!(at(on_frame, 441), 0.2);
        assert!(f.all_finite());
    }

    #[test]
    fn geometric_mask() {
        let mut r = vec![[[5.0, 7.0, -3.0]; NUM_FINGERS]; 2];
        let mut mask = vec![[false; NUM_FINGERS]; 2];
        mask[0][1] = true;
        apply_geometric_mask(&mut r, &mask);
        assert_eq!(r[0][1], [5.0, 0.0, 0.0]);
        assert_eq!(r[0][0], [5.0, 7.0, -3.0]);
        assert_eq!(r[1][1], [5.0, 7.0, -3.0]);
        let before = r.clone();
        apply_geometric_mask(&mut r, &[[false; NUM_FINGERS]; 2]);
        assert_eq!(r, before);
    }

    #[test]
    fn loss_values() {
        let a = wave(Hand::Right, 12);
        assert_eq!(refine_loss(&a, &a, 1.0, 0.5).unwrap(), 0.0);
        // dyadic coordinates so the 1 mm shift is exact in f32
        let a = FingertipTrajectory {
            hand: Hand::Right,
            frames: (0..12).map(|t| std::array::from_fn(|f| [t as f32 * 0.25, f as f32 * 23.5, 2.0])).collect(),
        };
        let mut b = a.clone();
        for fr in &mut b.frames {
            for p in fr.iter_mut() {
                p[0] += 1.0;
            }
        }
        assert!((refine_loss(&b, &a, 1.0, 1.0).unwrap() - 1.0).abs() < 1e-9);
        let mut shifted = a.clone();
        shifted.frames.rotate_left(1);
        let l = refine_loss(&shifted, &a, 0.0, 1.0).unwrap();
        assert!(l > 0.0);
        // a one-frame trajectory has no velocity term
        let one = wave(Hand::Right, 1);
        assert_eq!(refine_loss(&one, &one, 1.0, 1.0).unwrap(), 0.0);
    }

    fn refiner(cfg: RefinerConfig, midi: bool) -> (Refiner, ParamStore) {
        let r = Refiner::new("s21", cfg, midi).unwrap();
        let mut store = ParamStore::new(1);
        r.init(&mut store, &mut rng()).unwrap();
        (r, store)
    }

    fn small() -> RefinerConfig {
        RefinerConfig {
            dim: 16,
            depth: 1,
            heads: 2,
            film_hidden: 8,
            ..RefinerConfig::default()
        }
    }

    #[test]
    fn zero_head_is_identity() {
        let geom = KeyboardGeometry::default();
        for (midi, fusion) in [(false, Fusion::Film), (true, Fusion::Film), (true, Fusion::Concat)] {
            let (r, store) = refiner(RefinerConfig { fusion, ..small() }, midi);
            let traj = wave(Hand::Right, 30);
            let fing = one_press(30, 5..12, 40, 1);
            let feats = midi_features(&[], FrameGrid::new(30));
            let (out, res) = r
                .refine(&store, &traj, &fing, Some(&feats), &geom, &ResidualBounds::default())
                .unwrap();
            assert_eq!(out, traj);
            assert_eq!(res, 0.0);
        }
    }

    #[test]
    fn residual_is_clamped_then_masked() {
        let geom = KeyboardGeometry::default();
        let (r, mut store) = refiner(small(), false);
        // constant 5.0 output before scaling by 20 -> 100 mm raw residual
        store.get_mut("s21.head.b").unwrap().data_mut().iter_mut().for_each(|v| *v = 5.0);
        let traj = wave(Hand::Right, 20);
        let fing = one_press(20, 3..9, 40, 1);
        let (out, max_res) = r.refine(&store, &traj, &fing, None, &geom, &ResidualBounds::default()).unwrap();
        assert_eq!(max_res, 80.0);
        for t in 0..20 {
            for f in 0..NUM_FINGERS {
                let pressed = f == 1 && (3..9).contains(&t);
                assert_eq!(out.frames[t][f][0], traj.frames[t][f][0] + 80.0);
                if pressed {
                    assert_eq!(out.frames[t][f][1].to_bits(), traj.frames[t][f][1].to_bits());
                    assert_eq!(out.frames[t][f][2].to_bits(), traj.frames[t][f][2].to_bits());
                } else {
                    assert_eq!(out.frames[t][f][1], traj.frames[t][f][1] + 80.0);
                }
            }
        }
        // without masking every component moves
        let (r2, _) = refiner(RefinerConfig { mask_y: false, ..small() }, false);
        let (out2, _) = r2.refine(&store, &traj, &fing, None, &geom, &ResidualBounds::default()).unwrap();
        assert_eq!(out2.frames[4][1][2], traj.frames[4][1][2] + 80.0);
    }

    #[test]
    fn midi_refiner_requires_features() {
        let geom = KeyboardGeometry::default();
        let (r, store) = refiner(small(), true);
        assert!(r.uses_midi());
        let traj = wave(Hand::Right, 8);
        let fing = FingeringGrid::new(8);
        assert!(r.refine(&store, &traj, &fing, None, &geom, &ResidualBounds::default()).is_err());
        let (none, _) = refiner(RefinerConfig { conditioning: Conditioning::None, ..small() }, true);
        assert!(!none.uses_midi());
    }

    #[test]
    fn moving_average_oracle() {
        // step from 0 to 10 at frame 10, radius 2
        let series: Vec<f32> = (0..20).map(|t| if t < 10 { 0.0 } else { 10.0 }).collect();
        let out = moving_average(&series, 1, 2);
        for t in 2..18 {
            let want: f32 = (t - 2..=t + 2).map(|u| series[u]).sum::<f32>() / 5.0;
            assert!((out[t] - want).abs() < 1e-6);
        }
        assert_eq!(out[0], 0.0);
        assert_eq!(out[19], 10.0);
        let flat = vec![3.5f32; 30];
        assert_eq!(moving_average(&flat, 3, 4), flat);
    }

    #[test]
    fn smoothing_keeps_pressed_yz() {
        let traj = wave(Hand::Right, 40);
        let mut mask = vec![[false; NUM_FINGERS]; 40];
        for m in &mut mask[10..20] {
            m[2] = true;
        }
        let out = smooth_trajectory(&traj, &mask, 4).unwrap();
        for t in 10..20 {
            assert_eq!(out.frames[t][2][1], traj.frames[t][2][1]);
            assert_eq!(out.frames[t][2][2], traj.frames[t][2][2]);
        }
        assert_ne!(out.frames[15][2][0], traj.frames[15][2][0]);
        assert!(smooth_trajectory(&traj, &mask, 0).is_err());
        let constant = FingertipTrajectory { hand: Hand::Left, frames: vec![[[1.0, 2.0, 3.0]; 5]; 12] };
        assert_eq!(smooth_trajectory(&constant, &[[false; 5]; 12], 4).unwrap(), constant);
    }

    #[test]
    fn learned_smoother_starts_at_identity() {
        let s = TemporalSmoother::new("s23", 15, 0, SmootherConfig { dim: 8, blocks: 2, ..Default::default() }).unwrap();
        let mut store = ParamStore::new(0);
        s.init(&mut store, &mut rng()).unwrap();
        let traj = wave(Hand::Right, 25);
        let out = s.smooth_fingertips(&store, &traj, &[[false; 5]; 25], 80.0).unwrap();
        assert_eq!(out, traj);
    }
}
