use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Hand, NUM_FINGERS, NUM_KEYS};

/// Encodes a (hand, finger) pair as an annotation value: 1..=5 left hand,
/// 6..=10 right hand, thumb first.
pub fn finger_code(hand: Hand, finger: usize) -> u8 {
    debug_assert!(finger < NUM_FINGERS);
    (hand.index() * NUM_FINGERS + finger + 1) as u8
}

/// Inverse of [`finger_code`]; 0 means no press.
pub fn decode_finger(value: u8) -> Option<(Hand, usize)> {
    match value {
        1..=5 => Some((Hand::Left, value as usize - 1)),
        6..=10 => Some((Hand::Right, value as usize - 6)),
        _ => None,
    }
}

/// Dense per-frame, per-key finger assignment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FingeringGrid {
    frames: usize,
    values: Vec<u8>,
}

impl FingeringGrid {
    pub fn new(frames: usize) -> Self {
        Self {
            frames,
            values: vec![0; frames * NUM_KEYS],
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn get(&self, frame: usize, key: usize) -> u8 {
        self.values[frame * NUM_KEYS + key]
    }

    pub fn set(&mut self, frame: usize, key: usize, value: u8) {
        self.values[frame * NUM_KEYS + key] = value;
    }

    pub fn row(&self, frame: usize) -> &[u8] {
        &self.values[frame * NUM_KEYS..(frame + 1) * NUM_KEYS]
    }

    /// Frames `start..start+len`; frames past the end read as silence.
    pub fn slice_padded(&self, start: usize, len: usize) -> FingeringGrid {
        let mut out = FingeringGrid::new(len);
        let avail = self.frames.saturating_sub(start).min(len);
        out.values[..avail * NUM_KEYS]
            .copy_from_slice(&self.values[start * NUM_KEYS..(start + avail) * NUM_KEYS]);
        out
    }

    /// `(key, finger)` pairs pressed by `hand` at `frame`.
    pub fn presses(&self, frame: usize, hand: Hand) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.row(frame).iter().enumerate().filter_map(move |(k, &v)| match decode_finger(v) {
            Some((h, f)) if h == hand => Some((k, f)),
            _ => None,
        })
    }

    /// Key pressed by each finger of `hand` at `frame`.
    pub fn finger_keys(&self, frame: usize, hand: Hand) -> [Option<usize>; NUM_FINGERS] {
        let mut out = [None; NUM_FINGERS];
        for (k, f) in self.presses(frame, hand) {
            out[f] = Some(k);
        }
        out
    }

    pub fn nonzero_cells(&self) -> usize {
        self.values.iter().filter(|&&v| v != 0).count()
    }

    /// Checks value range and the one-key-per-finger rule.
    pub fn validate(&self) -> Result<()> {
        for t in 0..self.frames {
            let mut seen = [false; 2 * NUM_FINGERS + 1];
            for &v in self.row(t) {
                if v as usize > 2 * NUM_FINGERS {
                    return Err(Error::Validation {
                        message: format!("finger value {v} outside 0..=10 at frame {t}"),
                        rows: vec![t],
                    });
                }
                if v != 0 {
                    if seen[v as usize] {
                        return Err(Error::Validation {
                            message: format!("finger {v} presses two keys at frame {t}"),
                            rows: vec![t],
                        });
                    }
                    seen[v as usize] = true;
                }
            }
        }
        Ok(())
    }

    /// Serializes the nonzero cells as `frame,key,finger` CSV.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("frame,key,finger\n");
        for t in 0..self.frames {
            for (k, &v) in self.row(t).iter().enumerate() {
                if v != 0 {
                    out.push_str(&format!("{t},{k},{v}\n"));
                }
            }
        }
        out
    }
}

#[derive(Debug, Deserialize)]
struct FingeringRow {
    frame: usize,
    key: i64,
    finger: i64,
}

/// Parses `frame,key,finger` CSV into a dense grid. When `frames` is `None`
/// the grid is sized to the last annotated frame.
pub fn parse_fingering(text: &str, frames: Option<usize>) -> Result<FingeringGrid> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for (i, rec) in reader.deserialize::<FingeringRow>().enumerate() {
        let row = rec.map_err(|e| Error::Validation {
            message: format!("malformed fingering row: {e}"),
            rows: vec![i + 1],
        })?;
        rows.push(row);
    }

    let mut bad = Vec::new();
    for (i, r) in rows.iter().enumerate() {
        let out_of_range = !(0..=10).contains(&r.finger)
            || !(0..NUM_KEYS as i64).contains(&r.key)
            || frames.is_some_and(|n| r.frame >= n);
        if out_of_range {
            bad.push(i + 1);
        }
    }
    if !bad.is_empty() {
        return Err(Error::Validation {
            message: "finger, key or frame out of range".into(),
            rows: bad,
        });
    }

    let n = frames.unwrap_or_else(|| rows.iter().map(|r| r.frame + 1).max().unwrap_or(0));
    let mut grid = FingeringGrid::new(n);
    // row number that wrote each (frame, finger) and each (frame, key)
    let mut finger_owner = std::collections::HashMap::new();
    let mut cell_owner = std::collections::HashMap::new();
    let mut conflicts = Vec::new();
    for (i, r) in rows.iter().enumerate() {
        let (key, finger) = (r.key as usize, r.finger as u8);
        if finger == 0 {
            continue;
        }
        if let Some(&(prev_row, prev_finger)) = cell_owner.get(&(r.frame, key)) {
            if prev_finger != finger {
                conflicts.extend([prev_row, i + 1]);
            }
            continue;
        }
        if let Some(&(prev_row, prev_key)) = finger_owner.get(&(r.frame, finger)) {
            if prev_key != key {
                conflicts.extend([prev_row, i + 1]);
                continue;
            }
        }
        finger_owner.insert((r.frame, finger), (i + 1, key));
        cell_owner.insert((r.frame, key), (i + 1, finger));
        grid.set(r.frame, key, finger);
    }
    if !conflicts.is_empty() {
        conflicts.sort_unstable();
        conflicts.dedup();
        return Err(Error::Validation {
            message: "conflicting finger assignments".into(),
            rows: conflicts,
        });
    }
    Ok(grid)
}

/// Annotated span where a hand is placed on or lifted from the keyboard.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GestureBoundary {
    pub start_frame: usize,
    pub end_frame: usize,
    pub hand: Hand,
}

#[derive(Deserialize)]
struct GestureRow {
    start_frame: usize,
    end_frame: usize,
    hand: String,
}

/// Parses `start_frame,end_frame,hand` CSV.
pub fn parse_gestures(text: &str) -> Result<Vec<GestureBoundary>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (i, rec) in reader.deserialize::<GestureRow>().enumerate() {
        let row = rec.map_err(|e| Error::Validation {
            message: format!("malformed gesture row: {e}"),
            rows: vec![i + 1],
        })?;
        if row.end_frame < row.start_frame {
            return Err(Error::Validation {
                message: "gesture ends before it starts".into(),
                rows: vec![i + 1],
            });
        }
        let hand = Hand::from_tag(&row.hand).map_err(|_| Error::Validation {
            message: format!("unknown hand {:?}", row.hand),
            rows: vec![i + 1],
        })?;
        out.push(GestureBoundary {
            start_frame: row.start_frame,
            end_frame: row.end_frame,
            hand,
        });
    }
    Ok(out)
}
