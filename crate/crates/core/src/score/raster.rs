use crate::error::{Error, Result};
use crate::score::fingering::{decode_finger, FingeringGrid};
use crate::score::midi::NoteEvent;
use crate::types::{Hand, NUM_FINGERS, NUM_KEYS};

pub const FPS_NUM: u32 = 60_000;
pub const FPS_DEN: u32 = 1_001;

/// The 59.94 fps capture grid. Frame `i` covers `[i/fps, (i+1)/fps)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameGrid {
    pub frame_count: usize,
}

fn snap(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r
    } else {
        x
    }
}

impl FrameGrid {
    pub fn new(frame_count: usize) -> Self {
        Self { frame_count }
    }

    pub fn fps() -> f64 {
        FPS_NUM as f64 / FPS_DEN as f64
    }

    /// Smallest grid whose frames cover `seconds`.
    pub fn covering(seconds: f64) -> Self {
        Self::new(snap(seconds.max(0.0) * Self::fps()).ceil() as usize)
    }

    pub fn frame_start(frame: usize) -> f64 {
        frame as f64 * FPS_DEN as f64 / FPS_NUM as f64
    }

    /// Frame containing time `t`.
    pub fn frame_of(t: f64) -> i64 {
        snap(t * Self::fps()).floor() as i64
    }

    /// Frames whose interval intersects `[start, end)`, clipped to the grid.
    pub fn frames_overlapping(&self, start: f64, end: f64) -> std::ops::Range<usize> {
        if end <= start {
            return 0..0;
        }
        let first = snap(start * Self::fps()).floor().max(0.0) as usize;
        let last = (snap(end * Self::fps()).ceil() as i64 - 1).max(-1);
        let stop = ((last + 1) as usize).min(self.frame_count);
        first.min(stop)..stop
    }
}

/// Per-frame press flags for one hand's five fingers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PressMask {
    pub hand: Hand,
    pub frames: Vec<[bool; NUM_FINGERS]>,
}

impl PressMask {
    pub fn from_fingering(fingering: &FingeringGrid, hand: Hand) -> Self {
        let frames = (0..fingering.frames())
            .map(|t| {
                let mut row = [false; NUM_FINGERS];
                for &v in fingering.row(t) {
                    if let Some((h, f)) = decode_finger(v) {
                        if h == hand {
                            row[f] = true;
                        }
                    }
                }
                row
            })
            .collect();
        Self { hand, frames }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn any(&self, frame: usize) -> bool {
        self.frames[frame].iter().any(|&b| b)
    }

    pub fn count(&self) -> usize {
        self.frames.iter().flatten().filter(|&&b| b).count()
    }
}

#[derive(Debug, Clone)]
pub struct Raster {
    /// Indexed by [`Hand::index`].
    pub masks: [PressMask; 2],
    /// Keys sounding at each frame, ascending.
    pub active_keys: Vec<Vec<u8>>,
}

impl Raster {
    pub fn mask(&self, hand: Hand) -> &PressMask {
        &self.masks[hand.index()]
    }
}

/// Derives press masks from the fingering and the sounding keys from the
/// note intervals.
pub fn rasterize(events: &[NoteEvent], grid: FrameGrid, fingering: &FingeringGrid) -> Result<Raster> {
    if fingering.frames() != grid.frame_count {
        return Err(Error::Argument(format!(
            "fingering has {} frames but the grid has {}",
            fingering.frames(),
            grid.frame_count
        )));
    }
    let masks = [
        PressMask::from_fingering(fingering, Hand::Left),
        PressMask::from_fingering(fingering, Hand::Right),
    ];
    let mut active = vec![[false; NUM_KEYS]; grid.frame_count];
    for e in events {
        for t in grid.frames_overlapping(e.onset, e.end()) {
            active[t][e.key as usize] = true;
        }
    }
    let active_keys = active
        .iter()
        .map(|row| (0..NUM_KEYS as u8).filter(|&k| row[k as usize]).collect())
        .collect();
    Ok(Raster { masks, active_keys })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score::fingering::finger_code;

    /// Brute-force interval test against exact frame boundaries.
    fn overlap_oracle(start: f64, end: f64, frames: usize) -> Vec<usize> {
        (0..frames)
            .filter(|&i| {
                let a = i as f64 * 1001.0 / 60000.0;
                let b = (i + 1) as f64 * 1001.0 / 60000.0;
                start < b && end > a
            })
            .collect()
    }

    #[test]
    fn note_frames_match_oracle() {
        let grid = FrameGrid::new(100);
        let r: Vec<usize> = grid.frames_overlapping(0.5, 0.6).collect();
        assert_eq!(r, (29..=35).collect::<Vec<_>>());
        assert_eq!(r, overlap_oracle(0.5, 0.6, 100));
        for (s, e) in [(0.0, 0.01), (0.2, 0.9), (1.0, 1.6), (1.6, 5.0)] {
            let got: Vec<usize> = grid.frames_overlapping(s, e).collect();
            assert_eq!(got, overlap_oracle(s, e, 100), "[{s}, {e})");
        }
    }

    #[test]
    fn exact_frame_boundaries() {
        let grid = FrameGrid::new(100);
        let s = FrameGrid::frame_start(10);
        let e = FrameGrid::frame_start(12);
        assert_eq!(grid.frames_overlapping(s, e).collect::<Vec<_>>(), vec![10, 11]);
    }

    #[test]
    fn right_hand_finger_mapping() {
        let mut f = FingeringGrid::new(12);
        for t in 5..=10 {
            f.set(t, 40, finger_code(Hand::Right, 1));
        }
        let r = rasterize(&[], FrameGrid::new(12), &f).unwrap();
        let m = r.mask(Hand::Right);
        for t in 0..12 {
            assert_eq!(m.frames[t][1], (5..=10).contains(&t));
        }
        assert_eq!(r.mask(Hand::Left).count(), 0);
    }

    #[test]
    fn silent_fingering() {
        let f = FingeringGrid::new(30);
        let ev = [NoteEvent { onset: 0.1, key: 3, velocity: 50, duration: 0.2 }];
        let r = rasterize(&ev, FrameGrid::new(30), &f).unwrap();
        assert_eq!(r.masks[0].count() + r.masks[1].count(), 0);
        assert_eq!(r.active_keys[10], vec![3]);
        assert!(r.active_keys[25].is_empty());
    }

    #[test]
    fn length_mismatch() {
        assert!(rasterize(&[], FrameGrid::new(3), &FingeringGrid::new(4)).is_err());
    }

    proptest::proptest! {
        #[test]
        fn every_nonzero_cell_yields_one_flag(cells in proptest::collection::vec((0usize..40, 0usize..88, 1u8..11), 0..60)) {
            let mut f = FingeringGrid::new(40);
            for (t, k, v) in cells {
                let taken = f.row(t).contains(&v) || f.get(t, k) != 0;
                if !taken {
                    f.set(t, k, v);
                }
            }
            let r = rasterize(&[], FrameGrid::new(40), &f).unwrap();
            proptest::prop_assert_eq!(r.masks[0].count() + r.masks[1].count(), f.nonzero_cells());
        }
    }
}
