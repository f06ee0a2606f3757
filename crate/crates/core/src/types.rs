//! Shared trajectory containers.
//!
//! All positions are millimetres in piano-aligned coordinates: X runs along
//! key depth (0 at the key fronts), Y along the keyboard (low to high pitch),
//! Z vertical with the white-key rest surface at 0.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f32; 3];

pub const NUM_FINGERS: usize = 5;
pub const NUM_KEYS: usize = 88;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Hand {
    Left,
    Right,
}

impl Hand {
    pub const BOTH: [Hand; 2] = [Hand::Left, Hand::Right];

    pub fn index(self) -> usize {
        match self {
            Hand::Left => 0,
            Hand::Right => 1,
        }
    }

    pub fn tag(self) -> char {
        match self {
            Hand::Left => 'L',
            Hand::Right => 'R',
        }
    }

    pub fn from_tag(tag: &str) -> Result<Hand> {
        match tag {
            "L" | "l" | "left" => Ok(Hand::Left),
            "R" | "r" | "right" => Ok(Hand::Right),
            other => Err(Error::Argument(format!("unknown hand tag {other:?}"))),
        }
    }

    /// +1 when finger order (thumb to pinky) runs up the keyboard.
    pub fn finger_direction(self) -> f32 {
        match self {
            Hand::Left => -1.0,
            Hand::Right => 1.0,
        }
    }
}

/// Per-hand fingertip positions, `frames[t][finger]`, thumb first.
#[derive(Debug, Clone, PartialEq)]
pub struct FingertipTrajectory {
    pub hand: Hand,
    pub frames: Vec<[Vec3; NUM_FINGERS]>,
}

impl FingertipTrajectory {
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
        if data.len() % (NUM_FINGERS * 3) != 0 {
            return Err(Error::Shape(format!(
                "fingertip payload of {} floats is not a multiple of 15",
                data.len()
            )));
        }
        let frames = data
            .chunks_exact(NUM_FINGERS * 3)
            .map(|c| std::array::from_fn(|f| [c[f * 3], c[f * 3 + 1], c[f * 3 + 2]]))
            .collect();
        Ok(Self { hand, frames })
    }

    pub fn is_finite(&self) -> bool {
        self.frames.iter().flatten().flatten().all(|v| v.is_finite())
    }
}

/// Per-hand wrist positions.
#[derive(Debug, Clone, PartialEq)]
pub struct WristTrajectory {
    pub hand: Hand,
    pub frames: Vec<Vec3>,
}

impl WristTrajectory {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}
