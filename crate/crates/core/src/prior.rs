//! Fingertip contact prior and wrist offset prior.
//!
//! The contact prior holds robust statistics of where each finger of each
//! hand touches each key while pressing it: mean, standard deviation and
//! nearest-rank quartiles per axis. Slots with too few observations are
//! filled from neighbouring keys of the same colour.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::keyboard::{region_of, KeySpec, KeyboardGeometry, NUM_REGIONS};
use crate::score::fingering::FingeringGrid;
use crate::types::{FingertipTrajectory, Hand, WristTrajectory, NUM_FINGERS, NUM_KEYS};

pub const PRIOR_VERSION: u32 = 1;
pub const DEFAULT_MIN_COUNT: usize = 10;
pub const NUM_SLOTS: usize = 2 * NUM_FINGERS * NUM_KEYS;

pub type P3 = [f64; 3];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PositionPriorEntry {
    pub mean: P3,
    pub std: P3,
    pub p25: P3,
    pub p50: P3,
    pub p75: P3,
    /// Observation count; for interpolated entries the smaller donor count.
    pub n: usize,
    pub interpolated: bool,
}

fn slot(hand: Hand, finger: usize, key: usize) -> usize {
    (hand.index() * NUM_FINGERS + finger) * NUM_KEYS + key
}

fn slot_label(hand: Hand, finger: usize, key: usize) -> String {
    format!("{}/{}/{}", hand.tag(), finger + 1, key)
}

/// Nearest-rank quantile of a sorted sample, `q` in (0, 1].
pub fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    let rank = (q * n as f64).ceil().max(1.0) as usize;
    sorted[rank.min(n) - 1]
}

/// Statistics of a non-empty point cloud.
pub fn summarize(points: &[P3]) -> PositionPriorEntry {
    let n = points.len();
    assert!(n > 0, "cannot summarize an empty sample");
    let mut e = PositionPriorEntry {
        mean: [0.0; 3],
        std: [0.0; 3],
        p25: [0.0; 3],
        p50: [0.0; 3],
        p75: [0.0; 3],
        n,
        interpolated: false,
    };
    let mut axis = Vec::with_capacity(n);
    for a in 0..3 {
        axis.clear();
        axis.extend(points.iter().map(|p| p[a]));
        let mean = axis.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            axis.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        axis.sort_by(f64::total_cmp);
        e.mean[a] = mean;
        e.std[a] = var.sqrt();
        e.p25[a] = nearest_rank(&axis, 0.25);
        e.p50[a] = nearest_rank(&axis, 0.50);
        e.p75[a] = nearest_rank(&axis, 0.75);
    }
    e
}

#[derive(Debug, Clone, PartialEq)]
pub struct PositionPrior {
    entries: Vec<Option<PositionPriorEntry>>,
    pub min_count: usize,
}

impl PositionPrior {
    pub fn empty(min_count: usize) -> Self {
        Self {
            entries: vec![None; NUM_SLOTS],
            min_count,
        }
    }

    pub fn get(&self, hand: Hand, finger: usize, key: usize) -> Option<&PositionPriorEntry> {
        self.entries[slot(hand, finger, key)].as_ref()
    }

    pub fn set(&mut self, hand: Hand, finger: usize, key: usize, entry: Option<PositionPriorEntry>) {
        self.entries[slot(hand, finger, key)] = entry;
    }

    /// Entry lookup that fails on a gap.
    pub fn lookup(&self, hand: Hand, finger: usize, key: usize) -> Result<&PositionPriorEntry> {
        self.get(hand, finger, key).ok_or_else(|| {
            Error::Contract(format!("prior slot {} is empty", slot_label(hand, finger, key)))
        })
    }

    pub fn populated(&self) -> usize {
        self.entries.iter().filter(|e| e.is_some()).count()
    }

    pub fn measured(&self) -> usize {
        self.entries.iter().flatten().filter(|e| !e.interpolated).count()
    }

    pub fn is_complete(&self) -> bool {
        self.populated() == NUM_SLOTS
    }

    /// Slots whose median does not land on, and press, its own key.
    pub fn contact_violations(&self, geom: &KeyboardGeometry) -> Vec<(Hand, usize, usize)> {
        let mut out = Vec::new();
        for hand in Hand::BOTH {
            for finger in 0..NUM_FINGERS {
                for key in 0..NUM_KEYS {
                    let Some(e) = self.get(hand, finger, key) else { continue };
                    let ok = geom.key_at(e.p50) == Some(key)
                        && geom.is_pressed(e.p50, &geom.keys[key]).unwrap_or(false);
                    if !ok {
                        out.push((hand, finger, key));
                    }
                }
            }
        }
        out
    }

    fn to_document(&self, wrist: Option<&WristOffsetPrior>) -> PriorDocument {
        let mut entries = BTreeMap::new();
        for hand in Hand::BOTH {
            for finger in 0..NUM_FINGERS {
                for key in 0..NUM_KEYS {
                    if let Some(e) = self.get(hand, finger, key) {
                        entries.insert(slot_label(hand, finger, key), *e);
                    }
                }
            }
        }
        PriorDocument {
            prior_version: PRIOR_VERSION,
            units: "mm".into(),
            min_count: self.min_count,
            entries,
            wrist_offsets: wrist.cloned(),
        }
    }

    pub fn to_json(&self, wrist: Option<&WristOffsetPrior>) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_document(wrist))?)
    }

    pub fn from_json(text: &str) -> Result<(Self, Option<WristOffsetPrior>)> {
        let doc: PriorDocument = serde_json::from_str(text)?;
        if doc.prior_version != PRIOR_VERSION {
            return Err(Error::Format(format!(
                "prior version {} is not supported (expected {PRIOR_VERSION})",
                doc.prior_version
            )));
        }
        let mut prior = PositionPrior::empty(doc.min_count);
        for (label, entry) in doc.entries {
            let (hand, finger, key) = parse_label(&label)?;
            prior.set(hand, finger, key, Some(entry));
        }
        Ok((prior, doc.wrist_offsets))
    }

    pub fn save(&self, path: impl AsRef<Path>, wrist: Option<&WristOffsetPrior>) -> Result<()> {
        std::fs::write(path, self.to_json(wrist)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, Option<WristOffsetPrior>)> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn parse_label(label: &str) -> Result<(Hand, usize, usize)> {
    let bad = || Error::Format(format!("bad prior slot label {label:?}"));
    let mut parts = label.split('/');
    let hand = Hand::from_tag(parts.next().ok_or_else(bad)?).map_err(|_| bad())?;
    let finger: usize = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
    let key: usize = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
    if parts.next().is_some() || !(1..=NUM_FINGERS).contains(&finger) || key >= NUM_KEYS {
        return Err(bad());
    }
    Ok((hand, finger - 1, key))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PriorDocument {
    prior_version: u32,
    units: String,
    min_count: usize,
    entries: BTreeMap<String, PositionPriorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    wrist_offsets: Option<WristOffsetPrior>,
}

/// Accumulates press observations one sequence at a time.
#[derive(Debug, Clone)]
pub struct PriorBuilder {
    observations: Vec<Vec<P3>>,
    frames_read: usize,
}

impl Default for PriorBuilder {
    fn default() -> Self {
        Self {
            observations: vec![Vec::new(); NUM_SLOTS],
            frames_read: 0,
        }
    }
}

impl PriorBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn frames_read(&self) -> usize {
        self.frames_read
    }

    pub fn observe(&mut self, hand: Hand, finger: usize, key: usize, point: P3) {
        self.observations[slot(hand, finger, key)].push(point);
    }

    /// Adds every actively pressing fingertip of one sequence. `tips` is
    /// indexed by [`Hand::index`].
    pub fn add_sequence(&mut self, tips: &[FingertipTrajectory; 2], fingering: &FingeringGrid) -> Result<()> {
        for t in tips {
            if t.len() != fingering.frames() {
                return Err(Error::Validation {
                    message: format!(
                        "{:?} trajectory has {} frames, fingering has {}",
                        t.hand,
                        t.len(),
                        fingering.frames()
                    ),
                    rows: vec![],
                });
            }
        }
        for frame in 0..fingering.frames() {
            for hand in Hand::BOTH {
                for (key, finger) in fingering.presses(frame, hand) {
                    let p = tips[hand.index()].frames[frame][finger];
                    self.observe(hand, finger, key, [p[0] as f64, p[1] as f64, p[2] as f64]);
                }
            }
            self.frames_read += 1;
        }
        Ok(())
    }

    /// Summarizes every slot with at least `min_count` observations.
    pub fn finish(&self, min_count: usize) -> PositionPrior {
        let entries = self
            .observations
            .iter()
            .map(|obs| (!obs.is_empty() && obs.len() >= min_count).then(|| summarize(obs)))
            .collect();
        PositionPrior { entries, min_count }
    }
}

/// Builds the contact prior from frame-aligned training sequences.
pub fn build_position_prior(
    trajectories: &[[FingertipTrajectory; 2]],
    fingerings: &[FingeringGrid],
    min_count: usize,
) -> Result<PositionPrior> {
    if trajectories.len() != fingerings.len() {
        return Err(Error::Validation {
            message: format!(
                "{} trajectory pairs but {} fingerings",
                trajectories.len(),
                fingerings.len()
            ),
            rows: vec![],
        });
    }
    let mut builder = PriorBuilder::new();
    for (tips, fingering) in trajectories.iter().zip(fingerings) {
        builder.add_sequence(tips, fingering)?;
    }
    Ok(builder.finish(min_count))
}

fn lerp3(a: P3, b: P3, w: f64) -> P3 {
    [
        a[0] + w * (b[0] - a[0]),
        a[1] + w * (b[1] - a[1]),
        a[2] + w * (b[2] - a[2]),
    ]
}

/// Moves a donor entry of the other key colour into the target key's frame:
/// X keeps its distance past the key's front edge, Z its depth below the
/// press threshold. Same-colour donors pass through unchanged.
fn recolour(mut e: PositionPriorEntry, donor: &KeySpec, target: &KeySpec, geom: &KeyboardGeometry) -> PositionPriorEntry {
    if donor.is_black == target.is_black {
        return e;
    }
    let th = |k: &KeySpec| if k.is_black { geom.thresholds.black_z } else { geom.thresholds.white_z };
    let dx = target.x_min - donor.x_min;
    let dz = th(target) - th(donor);
    for v in [&mut e.mean, &mut e.p25, &mut e.p50, &mut e.p75] {
        v[0] = (v[0] + dx).clamp(target.x_min, target.x_max);
        v[2] += dz;
    }
    e
}

/// Fills every empty slot from the nearest measured slots of the same
/// (hand, finger) row along the keyboard. Donors of the target key's colour
/// are preferred; the other colour is used only when a row has none, after
/// shifting into the target colour's X range and rest height.
pub fn interpolate_missing(prior: &PositionPrior, geom: &KeyboardGeometry) -> Result<PositionPrior> {
    let mut out = prior.clone();
    for hand in Hand::BOTH {
        for finger in 0..NUM_FINGERS {
            let measured: Vec<usize> = (0..NUM_KEYS)
                .filter(|&k| prior.get(hand, finger, k).is_some_and(|e| !e.interpolated))
                .collect();
            if measured.is_empty() {
                return Err(Error::Build(format!(
                    "no measured prior slots for hand {} finger {}",
                    hand.tag(),
                    finger + 1
                )));
            }
            for key in 0..NUM_KEYS {
                if prior.get(hand, finger, key).is_some() {
                    continue;
                }
                let black = geom.keys[key].is_black;
                let same: Vec<usize> = measured
                    .iter()
                    .copied()
                    .filter(|&k| geom.keys[k].is_black == black)
                    .collect();
                let donors = if same.is_empty() { &measured } else { &same };
                let lo = donors.iter().copied().filter(|&k| k < key).max();
                let hi = donors.iter().copied().filter(|&k| k > key).min();
                let entry = |k: usize| recolour(*prior.get(hand, finger, k).unwrap(), &geom.keys[k], &geom.keys[key], geom);
                let target_y = geom.keys[key].center_y();
                let (blend, n) = match (lo, hi) {
                    (Some(a), Some(b)) => {
                        let (ea, eb) = (entry(a), entry(b));
                        let ya = geom.keys[a].center_y();
                        let yb = geom.keys[b].center_y();
                        let w = (target_y - ya) / (yb - ya);
                        let mix = |f: fn(&PositionPriorEntry) -> P3| lerp3(f(&ea), f(&eb), w);
                        (
                            [mix(|e| e.mean), mix(|e| e.std), mix(|e| e.p25), mix(|e| e.p50), mix(|e| e.p75)],
                            ea.n.min(eb.n),
                        )
                    }
                    (Some(a), None) | (None, Some(a)) => {
                        let e = entry(a);
                        ([e.mean, e.std, e.p25, e.p50, e.p75], e.n)
                    }
                    (None, None) => unreachable!("row has measured slots"),
                };
                let [mut mean, std, mut p25, mut p50, mut p75] = blend;
                // Y identifies the key: re-anchor on the target key's centre,
                // keeping the quartile spread around the median.
                let (d25, d75) = (p25[1] - p50[1], p75[1] - p50[1]);
                mean[1] = target_y;
                p50[1] = target_y;
                p25[1] = target_y + d25;
                p75[1] = target_y + d75;
                out.set(
                    hand,
                    finger,
                    key,
                    Some(PositionPriorEntry {
                        mean,
                        std,
                        p25,
                        p50,
                        p75,
                        n,
                        interpolated: true,
                    }),
                );
            }
        }
    }
    Ok(out)
}

/// Mean wrist displacement from the centroid of the pressing fingertips,
/// per hand and pitch region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WristOffsetPrior {
    pub offsets: [[P3; NUM_REGIONS]; 2],
    pub counts: [[usize; NUM_REGIONS]; 2],
}

impl WristOffsetPrior {
    pub fn offset(&self, hand: Hand, region: usize) -> P3 {
        self.offsets[hand.index()][region]
    }
}

/// Region of a set of pressed keys: the rounded mean key index.
pub fn region_of_keys(keys: &[usize]) -> Option<usize> {
    if keys.is_empty() {
        return None;
    }
    let mean = keys.iter().sum::<usize>() as f64 / keys.len() as f64;
    region_of(mean.round() as usize).ok()
}

pub fn build_wrist_offsets(
    wrists: &[[WristTrajectory; 2]],
    tips: &[[FingertipTrajectory; 2]],
    fingerings: &[FingeringGrid],
) -> Result<WristOffsetPrior> {
    if wrists.len() != tips.len() || tips.len() != fingerings.len() {
        return Err(Error::Validation {
            message: "wrist, fingertip and fingering lists differ in length".into(),
            rows: vec![],
        });
    }
    let mut sums = [[[0.0f64; 3]; NUM_REGIONS]; 2];
    let mut counts = [[0usize; NUM_REGIONS]; 2];
    for ((w, t), fingering) in wrists.iter().zip(tips).zip(fingerings) {
        for hand in Hand::BOTH {
            let (w, t) = (&w[hand.index()], &t[hand.index()]);
            if w.len() != fingering.frames() || t.len() != fingering.frames() {
                return Err(Error::Validation {
                    message: "wrist/fingertip/fingering frame counts differ".into(),
                    rows: vec![],
                });
            }
            for frame in 0..fingering.frames() {
                let presses: Vec<(usize, usize)> = fingering.presses(frame, hand).collect();
                if presses.is_empty() {
                    continue;
                }
                let keys: Vec<usize> = presses.iter().map(|p| p.0).collect();
                let region = region_of_keys(&keys).unwrap();
                let mut centroid = [0.0f64; 3];
                for &(_, f) in &presses {
                    for a in 0..3 {
                        centroid[a] += t.frames[frame][f][a] as f64;
                    }
                }
                for a in 0..3 {
                    centroid[a] /= presses.len() as f64;
                    sums[hand.index()][region][a] += w.frames[frame][a] as f64 - centroid[a];
                }
                counts[hand.index()][region] += 1;
            }
        }
    }

    let total: usize = counts.iter().flatten().sum();
    if total == 0 {
        return Err(Error::Build("no frame with an active press to estimate wrist offsets".into()));
    }
    let mut global = [0.0; 3];
    for h in 0..2 {
        for r in 0..NUM_REGIONS {
            for a in 0..3 {
                global[a] += sums[h][r][a];
            }
        }
    }
    let global = global.map(|g| g / total as f64);

    let mut offsets = [[[0.0; 3]; NUM_REGIONS]; 2];
    for h in 0..2 {
        for r in 0..NUM_REGIONS {
            if counts[h][r] > 0 {
                offsets[h][r] = sums[h][r].map(|s| s / counts[h][r] as f64);
            }
        }
        let populated: Vec<usize> = (0..NUM_REGIONS).filter(|&r| counts[h][r] > 0).collect();
        for r in 0..NUM_REGIONS {
            if counts[h][r] > 0 {
                continue;
            }
            // nearest populated region, lower one on ties
            offsets[h][r] = match populated.iter().min_by_key(|&&p| (p.abs_diff(r), p)) {
                Some(&p) => offsets[h][p],
                None => global,
            };
        }
    }
    Ok(WristOffsetPrior { offsets, counts })
}
