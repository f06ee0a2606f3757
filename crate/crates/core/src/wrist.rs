//! Stage 3: wrist trajectories.
//!
//! The base wrist is the centroid of the pressing fingertips shifted by the
//! region's offset prior. A temporal convolution network, modulated by
//! fingering and MIDI features, adds a clamped residual; a moving average
//! finishes the stage.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::keyboard::{region_of, KeyboardGeometry};
use crate::nn::{Bindings, FilmGenerator, Graph, Init, Linear, ParamStore, Scalar, TemporalResNet, Tensor, Var};
use crate::prior::{region_of_keys, WristOffsetPrior};
use crate::refine::{axis_centre, moving_average, normalize_coords, to_tensor, COORD_SCALE_MM, MIDI_FEATURES};
use crate::score::fingering::FingeringGrid;
use crate::types::{FingertipTrajectory, Hand, Vec3, WristTrajectory, NUM_FINGERS};

/// Per-frame wrist conditioning: ten pressed-finger flags (left then right)
/// and the centroid Y of this hand's pressed keys.
pub const WRIST_FINGERING_FEATURES: usize = 2 * NUM_FINGERS + 1;

fn centroid(points: impl Iterator<Item = Vec3>) -> Vec3 {
    let mut s = [0.0f64; 3];
    let mut n = 0;
    for p in points {
        for a in 0..3 {
            s[a] += p[a] as f64;
        }
        n += 1;
    }
    s.map(|v| (v / n.max(1) as f64) as f32)
}

/// Region of the key whose centre lies nearest to `y`.
fn region_near(geom: &KeyboardGeometry, y: f64) -> usize {
    let key = (0..geom.keys.len())
        .min_by(|&a, &b| {
            let da = (geom.keys[a].center_y() - y).abs();
            let db = (geom.keys[b].center_y() - y).abs();
            da.total_cmp(&db)
        })
        .unwrap_or(0);
    region_of(key).unwrap_or(0)
}

/// Centroid of pressing fingertips (all five in silence) plus the region
/// offset. The region follows the rounded mean pressed key and is held
/// through silence; before the first press it comes from the key nearest
/// the fingertip centroid.
pub fn base_wrist(
    tips: &FingertipTrajectory,
    fingering: &FingeringGrid,
    offsets: &WristOffsetPrior,
    geom: &KeyboardGeometry,
) -> Result<WristTrajectory> {
    if fingering.frames() != tips.len() {
        return Err(Error::Shape(format!(
            "{} fingertip frames but {} fingering frames",
            tips.len(),
            fingering.frames()
        )));
    }
    let hand = tips.hand;
    let mut region: Option<usize> = None;
    let mut frames = Vec::with_capacity(tips.len());
    for (t, row) in tips.frames.iter().enumerate() {
        let presses: Vec<(usize, usize)> = fingering.presses(t, hand).collect();
        let c = if presses.is_empty() {
            centroid(row.iter().copied())
        } else {
            let keys: Vec<usize> = presses.iter().map(|p| p.0).collect();
            region = region_of_keys(&keys);
            centroid(presses.iter().map(|&(_, f)| row[f]))
        };
        let r = *region.get_or_insert_with(|| region_near(geom, c[1] as f64));
        let d = offsets.offset(hand, r);
        frames.push([c[0] + d[0] as f32, c[1] + d[1] as f32, c[2] + d[2] as f32]);
    }
    Ok(WristTrajectory { hand, frames })
}

/// `[T, 11]` wrist conditioning; key Y relative to `centre_y`.
pub fn wrist_fingering_features<F: Scalar>(
    fingering: &FingeringGrid,
    hand: Hand,
    geom: &KeyboardGeometry,
    centre_y: f64,
) -> Tensor<F> {
    let t_len = fingering.frames();
    let w = WRIST_FINGERING_FEATURES;
    let mut out = vec![F::ZERO; t_len * w];
    for t in 0..t_len {
        for h in Hand::BOTH {
            for (f, k) in fingering.finger_keys(t, h).iter().enumerate() {
                if k.is_some() {
                    out[t * w + h.index() * NUM_FINGERS + f] = F::ONE;
                }
            }
        }
        let keys: Vec<usize> = fingering.presses(t, hand).map(|p| p.0).collect();
        if !keys.is_empty() {
            let y = keys.iter().map(|&k| geom.keys[k].center_y()).sum::<f64>() / keys.len() as f64;
            out[t * w + 2 * NUM_FINGERS] = F::from_f64((y - centre_y) / COORD_SCALE_MM);
        }
    }
    Tensor::new(&[t_len, w], out).expect("wrist feature shape")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WristConfig {
    pub dim: usize,
    pub blocks: usize,
    pub kernel: usize,
    pub film_hidden: usize,
    pub residual_scale_mm: f64,
    /// Moving-average radius after refinement; 0 disables smoothing.
    pub smooth_radius: usize,
}

impl Default for WristConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            blocks: 6,
            kernel: 9,
            film_hidden: 32,
            residual_scale_mm: 10.0,
            smooth_radius: 4,
        }
    }
}

/// Inputs of one wrist refinement pass.
#[derive(Debug, Clone)]
pub struct WristInput<F> {
    /// `[T, 3]` base wrist, mm.
    pub base: Tensor<F>,
    /// `[T, 3 + 11]` normalized wrist plus fingering conditioning.
    pub features: Tensor<F>,
    /// `[T, 11 + 452]` FiLM conditioning.
    pub cond: Tensor<F>,
}

impl<F: Scalar> WristInput<F> {
    pub fn build(
        base: &WristTrajectory,
        fingering: &FingeringGrid,
        midi: &Tensor<f32>,
        geom: &KeyboardGeometry,
    ) -> Result<Self> {
        let t_len = base.len();
        if fingering.frames() != t_len || midi.shape()[0] != t_len {
            return Err(Error::Shape("wrist inputs are not frame-aligned".into()));
        }
        let flat: Vec<f32> = base.frames.iter().flatten().copied().collect();
        let centre = axis_centre(&flat, 3);
        let coords = normalize_coords::<F>(&flat, 3, centre);
        let fing = wrist_fingering_features::<F>(fingering, base.hand, geom, centre[1]);
        let w = WRIST_FINGERING_FEATURES;
        let mut features = Vec::with_capacity(t_len * (3 + w));
        let mut cond = Vec::with_capacity(t_len * (w + MIDI_FEATURES));
        for t in 0..t_len {
            features.extend_from_slice(&coords.data()[t * 3..t * 3 + 3]);
            features.extend_from_slice(&fing.data()[t * w..(t + 1) * w]);
            cond.extend_from_slice(&fing.data()[t * w..(t + 1) * w]);
            cond.extend(midi.data()[t * MIDI_FEATURES..(t + 1) * MIDI_FEATURES].iter().map(|&v| F::from_f64(v as f64)));
        }
        Ok(Self {
            base: to_tensor(&flat, 3),
            features: Tensor::new(&[t_len, 3 + w], features)?,
            cond: Tensor::new(&[t_len, w + MIDI_FEATURES], cond)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct WristRefiner {
    pub cfg: WristConfig,
    input: Linear,
    film_in: FilmGenerator,
    film_out: FilmGenerator,
    net: TemporalResNet,
    head: Linear,
}

impl WristRefiner {
    pub fn new(prefix: &str, cfg: WristConfig) -> Result<Self> {
        let cond = WRIST_FINGERING_FEATURES + MIDI_FEATURES;
        Ok(Self {
            input: Linear::new(format!("{prefix}.in"), 3 + WRIST_FINGERING_FEATURES, cfg.dim),
            film_in: FilmGenerator::new(&format!("{prefix}.film_in"), cond, cfg.film_hidden, cfg.dim),
            film_out: FilmGenerator::new(&format!("{prefix}.film_out"), cond, cfg.film_hidden, cfg.dim),
            net: TemporalResNet::new(format!("{prefix}.res"), cfg.dim, cfg.blocks, cfg.kernel)?,
            head: Linear::new(format!("{prefix}.head"), cfg.dim, 3),
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

    /// Returns `(base + clamped residual, clamped residual)`, both `[T, 3]`.
    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        p: &Bindings,
        input: &WristInput<F>,
        clamp_mm: f64,
    ) -> Result<(Var, Var)> {
        let x = g.constant(input.features.clone());
        let cond = g.constant(input.cond.clone());
        let h = self.input.forward(g, p, x)?;
        let h = self.film_in.apply(g, p, h, cond)?;
        let h = self.net.forward(g, p, h)?;
        let h = self.film_out.apply(g, p, h, cond)?;
        let h = g.silu(h);
        let raw = self.head.forward(g, p, h)?;
        let raw = g.scale(raw, self.cfg.residual_scale_mm);
        let residual = g.clamp(raw, -clamp_mm, clamp_mm);
        let base = g.constant(input.base.clone());
        Ok((g.add(base, residual)?, residual))
    }

    /// Refines then smooths one hand's wrist. Returns the trajectory and the
    /// largest residual component applied.
    pub fn refine(
        &self,
        store: &ParamStore,
        base: &WristTrajectory,
        fingering: &FingeringGrid,
        midi: &Tensor<f32>,
        geom: &KeyboardGeometry,
        clamp_mm: f32,
    ) -> Result<(WristTrajectory, f32)> {
        if base.is_empty() {
            return Ok((base.clone(), 0.0));
        }
        let input = WristInput::<f32>::build(base, fingering, midi, geom)?;
        let mut g = Graph::<f32>::new();
        let p = g.bind(&store.tensors());
        let (out, residual) = self.forward(&mut g, &p, &input, clamp_mm as f64)?;
        if !g.value(out).all_finite() {
            return Err(Error::Inference("wrist refiner produced non-finite positions".into()));
        }
        let max_res = g.value(residual).data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
        let mut flat = g.value(out).data().to_vec();
        if self.cfg.smooth_radius > 0 {
            flat = moving_average(&flat, 3, self.cfg.smooth_radius);
        }
        let frames = flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        Ok((WristTrajectory { hand: base.hand, frames }, max_res))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keyboard::NUM_REGIONS;
    use crate::refine::midi_features;
    use crate::score::fingering::finger_code;
    use crate::score::raster::FrameGrid;
    use rand::SeedableRng;

    fn offsets() -> WristOffsetPrior {
        let mut o = WristOffsetPrior {
            offsets: [[[0.0; 3]; NUM_REGIONS]; 2],
            counts: [[1; NUM_REGIONS]; 2],
        };
        for h in 0..2 {
            for r in 0..NUM_REGIONS {
                o.offsets[h][r] = [-60.0 - r as f64, 0.0, 30.0 + r as f64];
            }
        }
        o.offsets[1][5] = [50.0, 0.0, 30.0];
        o
    }

    fn tips(t_len: usize) -> FingertipTrajectory {
        FingertipTrajectory {
            hand: Hand::Right,
            frames: (0..t_len)
                .map(|t| std::array::from_fn(|f| [30.0 + f as f32, 1000.0 + 20.0 * f as f32 + t as f32, 10.0 * f as f32]))
                .collect(),
        }
    }

    #[test]
    fn single_press_and_pair_centroid() {
        let geom = KeyboardGeometry::default();
        let tr = tips(4);
        let mut fing = FingeringGrid::new(4);
        fing.set(0, 60, finger_code(Hand::Right, 2));
        fing.set(1, 58, finger_code(Hand::Right, 1));
        fing.set(1, 62, finger_code(Hand::Right, 3));
        let w = base_wrist(&tr, &fing, &offsets(), &geom).unwrap();
        let tip = tr.frames[0][2];
        assert_eq!(w.frames[0], [tip[0] + 50.0, tip[1], tip[2] + 30.0]);
        let a = tr.frames[1][1];
        let b = tr.frames[1][3];
        let mid = [(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0, (a[2] + b[2]) / 2.0];
        assert_eq!(w.frames[1], [mid[0] + 50.0, mid[1], mid[2] + 30.0]);
    }

    #[test]
    fn silence_holds_region() {
        let geom = KeyboardGeometry::default();
        let tr = tips(6);
        let mut fing = FingeringGrid::new(6);
        fing.set(1, 40, finger_code(Hand::Right, 0)); // region 3
        let w = base_wrist(&tr, &fing, &offsets(), &geom).unwrap();
        let d = offsets().offset(Hand::Right, 3);
        for t in 2..6 {
            let c = centroid(tr.frames[t].iter().copied());
            assert_eq!(w.frames[t], [c[0] + d[0] as f32, c[1] + d[1] as f32, c[2] + d[2] as f32]);
        }
    }

    #[test]
    fn zero_head_identity_and_clamp() {
        let geom = KeyboardGeometry::default();
        let cfg = WristConfig { dim: 8, blocks: 2, film_hidden: 8, smooth_radius: 0, ..Default::default() };
        let r = WristRefiner::new("s3", cfg).unwrap();
        let mut store = ParamStore::new(0);
        r.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let base = WristTrajectory { hand: Hand::Left, frames: vec![[-40.0, 700.0, 60.0]; 30] };
        let fing = FingeringGrid::new(30);
        let midi = midi_features(&[], FrameGrid::new(30));
        let (out, res) = r.refine(&store, &base, &fing, &midi, &geom, 50.0).unwrap();
        assert_eq!(out, base);
        assert_eq!(res, 0.0);

        // raw residual of 70 mm is cut to 50
        store.get_mut("s3.head.b").unwrap().data_mut().iter_mut().for_each(|v| *v = 7.0);
        let (out, res) = r.refine(&store, &base, &fing, &midi, &geom, 50.0).unwrap();
        assert_eq!(res, 50.0);
        assert!(out.frames.iter().all(|p| *p == [10.0, 750.0, 110.0]));
    }
}
