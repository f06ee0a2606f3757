//! Stage 1: fingertip placement straight from the contact prior.
//!
//! Pressing fingers sit at the prior median of their key. Every other finger
//! of the same hand hangs off the nearest pressing finger: shifted along the
//! keyboard by the finger spacing, raised by the hover height. A hand with
//! no press keeps its previous placement.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::keyboard::KeyboardGeometry;
use crate::prior::PositionPrior;
use crate::score::fingering::{decode_finger, FingeringGrid};
use crate::types::{FingertipTrajectory, Hand, Vec3, NUM_FINGERS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    pub hover_mm: f32,
    pub finger_spacing_mm: f32,
    /// Extra Y shift per (hand, finger) for non-pressing fingers.
    pub lateral_corrections: [[f32; NUM_FINGERS]; 2],
    /// Keys under the thumb..pinky of each hand before the first press.
    pub rest_keys: [[usize; NUM_FINGERS]; 2],
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            hover_mm: 14.0,
            finger_spacing_mm: 23.5,
            lateral_corrections: [[0.0; NUM_FINGERS]; 2],
            rest_keys: [[39, 38, 37, 36, 35], [39, 40, 41, 42, 43]],
        }
    }
}

pub type HandPlacement = [Vec3; NUM_FINGERS];

pub fn rest_pose(hand: Hand, geom: &KeyboardGeometry, cfg: &BaselineConfig) -> HandPlacement {
    std::array::from_fn(|f| {
        let key = &geom.keys[cfg.rest_keys[hand.index()][f]];
        let [x, y, z] = key.center();
        [x as f32, y as f32, z as f32 + cfg.hover_mm]
    })
}

/// Places one hand given the key under each pressing finger. Returns `None`
/// when no finger of the hand presses.
pub fn place_hand(
    hand: Hand,
    keys: &[Option<usize>; NUM_FINGERS],
    prior: &PositionPrior,
    cfg: &BaselineConfig,
) -> Result<Option<HandPlacement>> {
    let mut anchors: [Option<Vec3>; NUM_FINGERS] = [None; NUM_FINGERS];
    for (f, key) in keys.iter().enumerate() {
        if let Some(k) = *key {
            let p = prior.lookup(hand, f, k)?.p50;
            anchors[f] = Some([p[0] as f32, p[1] as f32, p[2] as f32]);
        }
    }
    if anchors.iter().all(Option::is_none) {
        return Ok(None);
    }
    let dir = hand.finger_direction();
    let out = std::array::from_fn(|f| {
        if let Some(p) = anchors[f] {
            return p;
        }
        // nearest anchor by finger distance, lower finger on ties
        let a = (0..NUM_FINGERS)
            .filter(|&a| anchors[a].is_some())
            .min_by_key(|&a| (a.abs_diff(f), a))
            .unwrap();
        let anchor = anchors[a].unwrap();
        let steps = f as f32 - a as f32;
        [
            anchor[0],
            anchor[1] + steps * cfg.finger_spacing_mm * dir + cfg.lateral_corrections[hand.index()][f],
            anchor[2] + cfg.hover_mm,
        ]
    });
    Ok(Some(out))
}

/// Placement of both hands for one fingering row (88 values).
pub fn place_frame(
    row: &[u8],
    prior: &PositionPrior,
    cfg: &BaselineConfig,
) -> Result<[Option<HandPlacement>; 2]> {
    let mut keys = [[None; NUM_FINGERS]; 2];
    for (k, &v) in row.iter().enumerate() {
        if let Some((h, f)) = decode_finger(v) {
            keys[h.index()][f] = Some(k);
        }
    }
    Ok([
        place_hand(Hand::Left, &keys[0], prior, cfg)?,
        place_hand(Hand::Right, &keys[1], prior, cfg)?,
    ])
}

/// Runs [`place_frame`] over every frame with a zero-order hold through
/// silence. Before a hand's first press it rests over its rest keys.
pub fn synthesize_baseline(
    fingering: &FingeringGrid,
    prior: &PositionPrior,
    geom: &KeyboardGeometry,
    cfg: &BaselineConfig,
) -> Result<[FingertipTrajectory; 2]> {
    let mut held = [rest_pose(Hand::Left, geom, cfg), rest_pose(Hand::Right, geom, cfg)];
    let mut out = [
        FingertipTrajectory { hand: Hand::Left, frames: Vec::with_capacity(fingering.frames()) },
        FingertipTrajectory { hand: Hand::Right, frames: Vec::with_capacity(fingering.frames()) },
    ];
    for t in 0..fingering.frames() {
        let placed = place_frame(fingering.row(t), prior, cfg)?;
        for h in 0..2 {
            if let Some(p) = placed[h] {
                held[h] = p;
            }
            out[h].frames.push(held[h]);
        }
    }
    Ok(out)
}
