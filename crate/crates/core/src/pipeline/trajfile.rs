//! `TPTJ` trajectory files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "TPTJ" | u32 version | u32 fps_num | u32 fps_den | u32 frames | u32 joints
//! | u8 hand ('L'/'R') | u8 tag_len | tag bytes | frames*joints*3 f32 | u32 crc32
//! ```
//!
//! The checksum covers every byte before it.

use std::path::Path;

use crate::error::{Error, Result};
use crate::pose::{HandPose, NUM_JOINTS};
use crate::score::raster::{FPS_DEN, FPS_NUM};
use crate::types::{FingertipTrajectory, Hand, WristTrajectory, NUM_FINGERS};

pub const TRAJ_MAGIC: &[u8; 4] = b"TPTJ";
pub const TRAJ_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryFile {
    pub hand: Hand,
    /// Stage that produced the data, e.g. `S1`, `S2.2`, `S4`, `GT`.
    pub stage: String,
    pub frames: usize,
    pub joints: usize,
    /// `frames × joints × 3`, mm.
    pub data: Vec<f32>,
}

fn format_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Format(msg.into()))
}

impl TrajectoryFile {
    pub fn new(hand: Hand, stage: &str, joints: usize, data: Vec<f32>) -> Result<Self> {
        if joints == 0 || data.len() % (joints * 3) != 0 {
            return Err(Error::Shape(format!("{} floats do not form {joints}-joint frames", data.len())));
        }
        if stage.len() > u8::MAX as usize {
            return Err(Error::Argument("stage tag longer than 255 bytes".into()));
        }
        Ok(Self {
            hand,
            stage: stage.to_string(),
            frames: data.len() / (joints * 3),
            joints,
            data,
        })
    }

    pub fn from_tips(traj: &FingertipTrajectory, stage: &str) -> Self {
        Self::new(traj.hand, stage, NUM_FINGERS, traj.to_flat()).expect("fingertip layout")
    }

    pub fn from_wrist(traj: &WristTrajectory, stage: &str) -> Self {
        Self::new(traj.hand, stage, 1, traj.frames.iter().flatten().copied().collect()).expect("wrist layout")
    }

    pub fn from_pose(pose: &HandPose, stage: &str) -> Self {
        Self::new(pose.hand, stage, NUM_JOINTS, pose.to_flat()).expect("pose layout")
    }

    pub fn to_tips(&self) -> Result<FingertipTrajectory> {
        match self.joints {
            NUM_FINGERS => FingertipTrajectory::from_flat(self.hand, &self.data),
            NUM_JOINTS => Ok(HandPose::from_flat(self.hand, &self.data)?.tips()),
            j => Err(Error::Shape(format!("{j}-joint file carries no fingertips"))),
        }
    }

    pub fn to_pose(&self) -> Result<HandPose> {
        if self.joints != NUM_JOINTS {
            return Err(Error::Shape(format!("{}-joint file is not a full pose", self.joints)));
        }
        HandPose::from_flat(self.hand, &self.data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + self.stage.len() + self.data.len() * 4);
        out.extend_from_slice(TRAJ_MAGIC);
        for v in [TRAJ_VERSION, FPS_NUM, FPS_DEN, self.frames as u32, self.joints as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.push(self.hand.tag() as u8);
        out.push(self.stage.len() as u8);
        out.extend_from_slice(self.stage.as_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 30 {
            return format_err("trajectory file truncated");
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(trailer.try_into().unwrap()) {
            return format_err("trajectory checksum mismatch");
        }
        if &body[..4] != TRAJ_MAGIC {
            return format_err("not a TPTJ file");
        }
        let word = |i: usize| u32::from_le_bytes(body[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        if word(0) != TRAJ_VERSION {
            return format_err(format!("unsupported trajectory version {}", word(0)));
        }
        if (word(1), word(2)) != (FPS_NUM, FPS_DEN) {
            return format_err(format!("frame rate {}/{} is not {FPS_NUM}/{FPS_DEN}", word(1), word(2)));
        }
        let (frames, joints) = (word(3) as usize, word(4) as usize);
        let hand = match body[24] {
            b'L' => Hand::Left,
            b'R' => Hand::Right,
            h => return format_err(format!("bad hand tag {h:#x}")),
        };
        let tag_len = body[25] as usize;
        let payload_at = 26 + tag_len;
        if body.len() < payload_at {
            return format_err("trajectory header truncated");
        }
        let stage = std::str::from_utf8(&body[26..payload_at])
            .map_err(|_| Error::Format("stage tag is not UTF-8".into()))?
            .to_string();
        let payload = &body[payload_at..];
        let expected = frames
            .checked_mul(joints)
            .and_then(|n| n.checked_mul(12))
            .ok_or_else(|| Error::Format("trajectory size overflows".into()))?;
        if joints == 0 || payload.len() != expected {
            return format_err(format!("payload has {} bytes, header implies {expected}", payload.len()));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            hand,
            stage,
            frames,
            joints,
            data,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TrajectoryFile {
        let data: Vec<f32> = (0..4 * 5 * 3).map(|i| i as f32 * 0.25 - 3.0).collect();
        TrajectoryFile::new(Hand::Left, "S2.2", 5, data).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let f = sample();
        let bytes = f.to_bytes();
        assert_eq!(&bytes[..4], b"TPTJ");
        assert_eq!(bytes.len(), 26 + 4 + 60 * 4 + 4);
        assert_eq!(TrajectoryFile::from_bytes(&bytes).unwrap(), f);
        assert_eq!(f.to_tips().unwrap().len(), 4);
    }

    #[test]
    fn corruption_and_truncation_fail() {
        let mut bytes = sample().to_bytes();
        bytes[40] ^= 1;
        assert!(matches!(TrajectoryFile::from_bytes(&bytes), Err(Error::Format(_))));
        let bytes = sample().to_bytes();
        assert!(TrajectoryFile::from_bytes(&bytes[..bytes.len() - 7]).is_err());
        assert!(TrajectoryFile::new(Hand::Left, "x", 5, vec![0.0; 7]).is_err());
    }
}
