//! Synthetic corpus: random two-hand pieces with fingerings and ground-truth
//! 21-joint motion, built so every stage has something real to learn.
//!
//! Ground truth follows the Stage 1 placement rule with a few systematic
//! differences (finger-specific hover and curl, anticipatory transitions
//! with a lift arc, lifting on release, press-dependent finger arch and a
//! narrower knuckle line), plus optional capture jitter and dropout.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::baseline::{rest_pose, BaselineConfig};
use crate::error::{Error, Result};
use crate::keyboard::{region_of, KeyboardGeometry};
use crate::pose::{joint, rig_pose, HandPose, NUM_JOINTS, WRIST};
use crate::prior::region_of_keys;
use crate::refine::moving_average;
use crate::score::fingering::{finger_code, parse_fingering, FingeringGrid};
use crate::score::midi::{parse_midi, write_midi, NoteEvent};
use crate::score::raster::FrameGrid;
use crate::types::{FingertipTrajectory, Hand, Vec3, WristTrajectory, NUM_FINGERS};

use super::trajfile::TrajectoryFile;

const TICKS_PER_QUARTER: u16 = 480;
const TEMPO_US: u32 = 500_000;
const MAX_RETRIES: usize = 10;
const LIFT_MM: f32 = 20.0;
const LEAD_IN_FRAMES: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub seed: u64,
    pub pieces: usize,
    /// Piece length range, seconds.
    pub seconds: [f64; 2],
    /// Largest chord per hand.
    pub max_polyphony: usize,
    pub chord_probability: f64,
    /// Right hand plays eighth notes, left hand quarters.
    pub tempo_bpm: [f64; 2],
    /// Capture noise on every joint, mm.
    pub jitter_mm: f64,
    /// Probability that a frame repeats the previous one.
    pub dropout: f64,
    /// Train, validation and test fractions.
    pub split: [f64; 3],
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            pieces: 20,
            seconds: [8.0, 12.0],
            max_polyphony: 2,
            chord_probability: 0.2,
            tempo_bpm: [90.0, 140.0],
            jitter_mm: 0.0,
            dropout: 0.0,
            split: [0.7, 0.15, 0.15],
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.pieces == 0 {
            return bad("corpus needs at least one piece");
        }
        if !(self.seconds[0] > 1.0 && self.seconds[0] <= self.seconds[1]) {
            return bad("piece length range must be ordered and above 1 s");
        }
        if !(1..=3).contains(&self.max_polyphony) {
            return bad("max_polyphony must lie in 1..=3");
        }
        if !(0.0..=1.0).contains(&self.chord_probability) || !(0.0..1.0).contains(&self.dropout) {
            return bad("probabilities must lie in [0, 1)");
        }
        if !(self.tempo_bpm[0] >= 30.0 && self.tempo_bpm[0] <= self.tempo_bpm[1] && self.tempo_bpm[1] <= 200.0) {
            return bad("tempo range must be ordered within 30..=200 bpm");
        }
        if !(self.jitter_mm >= 0.0 && self.jitter_mm.is_finite()) {
            return bad("jitter must be non-negative");
        }
        if self.split.iter().any(|&s| s < 0.0) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("split fractions must be non-negative and sum to 1");
        }
        Ok(())
    }

    /// Piece counts per split; validation and test are rounded, train takes the rest.
    pub fn split_counts(&self) -> [usize; 3] {
        let n = self.pieces;
        let val = ((self.split[1] * n as f64).round() as usize).min(n);
        let test = ((self.split[2] * n as f64).round() as usize).min(n - val);
        [n - val - test, val, test]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Piece {
    pub name: String,
    pub split: Split,
    pub notes: Vec<NoteEvent>,
    pub fingering: FingeringGrid,
    /// Ground truth, indexed by [`Hand::index`].
    pub poses: [HandPose; 2],
}

impl Piece {
    pub fn frames(&self) -> usize {
        self.fingering.frames()
    }

    pub fn tips(&self) -> [FingertipTrajectory; 2] {
        [self.poses[0].tips(), self.poses[1].tips()]
    }

    pub fn wrists(&self) -> [WristTrajectory; 2] {
        [self.poses[0].wrist(), self.poses[1].wrist()]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub pieces: Vec<Piece>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> Vec<&Piece> {
        self.pieces.iter().filter(|p| p.split == split).collect()
    }
}

fn ticks_to_seconds(tick: u64) -> f64 {
    tick as f64 * TEMPO_US as f64 / (TICKS_PER_QUARTER as f64 * 1e6)
}

fn seconds_to_ticks(s: f64) -> u64 {
    (s * TICKS_PER_QUARTER as f64 * 1e6 / TEMPO_US as f64).round() as u64
}

/// One chord of one hand: `(finger, key)` pairs plus its frame span.
#[derive(Debug, Clone)]
struct Chord {
    notes: Vec<(usize, usize)>,
    onset: usize,
    release: usize,
}

struct HandLine {
    hand: Hand,
    chords: Vec<Chord>,
}

fn key_range(hand: Hand) -> (usize, usize) {
    match hand {
        Hand::Left => (12, 36),
        Hand::Right => (41, 70),
    }
}

/// Notes and fingering of one hand, nearest-finger heuristic: the hand
/// stays put while notes fall under a finger and shifts otherwise.
fn compose_hand(
    hand: Hand,
    spec: &CorpusSpec,
    bpm: f64,
    length_s: f64,
    geom: &KeyboardGeometry,
    rng: &mut ChaCha8Rng,
) -> Vec<(NoteEvent, usize)> {
    let (lo, hi) = key_range(hand);
    let dir = hand.finger_direction() as f64;
    let w = geom.white_key_width;
    let beat = 60.0 / bpm;
    let ioi = if hand == Hand::Right { beat / 2.0 } else { beat };
    let y = |k: usize| geom.keys[k].center_y();

    let mut key = rng.random_range(lo + 4..=hi - 4);
    let mut y_thumb = y(key) - dir * 2.0 * w;
    let mut prev: Vec<usize> = vec![];
    let mut out = Vec::new();
    let mut t = rng.random_range(0.3..0.6);
    let min_gap = 3.0 / FrameGrid::fps();
    loop {
        let span = if rng.random_bool(0.15) { 2.0 * ioi } else { ioi };
        if t + span > length_s {
            break;
        }
        // next melodic key, never a key of the previous chord
        let mut tries = 0;
        loop {
            let step = rng.random_range(1..=4) as i64 * if rng.random_bool(0.5) { 1 } else { -1 };
            let mut k = key as i64 + step;
            if k < lo as i64 || k > hi as i64 {
                k = key as i64 - step;
            }
            tries += 1;
            if !prev.contains(&(k as usize)) || tries > 20 {
                key = k as usize;
                break;
            }
        }
        let mut keys = vec![key];
        if spec.max_polyphony >= 2 && rng.random_bool(spec.chord_probability) {
            let upper = key as i64 + (dir as i64) * rng.random_range(3..=7);
            if (lo as i64..=hi as i64).contains(&upper) && !prev.contains(&(upper as usize)) {
                keys.push(upper as usize);
            }
        }
        let finger_of = |yt: f64, k: usize| ((y(k) - yt) * dir / w).round() as i64;
        let mut fingers: Vec<i64> = keys.iter().map(|&k| finger_of(y_thumb, k)).collect();
        let fits = fingers.iter().all(|f| (0..5).contains(f)) && fingers.windows(2).all(|p| p[0] < p[1]);
        if !fits {
            let f0 = if keys.len() > 1 {
                if (y(keys[1]) - y(keys[0])) * dir / w >= 2.5 { 0 } else { 1 }
            } else if finger_of(y_thumb, keys[0]) < 0 {
                1
            } else {
                3
            };
            y_thumb = y(keys[0]) - dir * f0 as f64 * w;
            fingers = keys.iter().map(|&k| finger_of(y_thumb, k)).collect();
            if keys.len() > 1 && !(fingers[1] > fingers[0] && fingers[1] <= 4) {
                keys.truncate(1);
                fingers.truncate(1);
            }
        }
        let onset_tick = seconds_to_ticks(t);
        let dur = (span * rng.random_range(0.65..0.9)).min(span - min_gap);
        let end_tick = seconds_to_ticks(t + dur).max(onset_tick + 1);
        let velocity = rng.random_range(40..=110u8);
        for (&k, &f) in keys.iter().zip(&fingers) {
            let onset = ticks_to_seconds(onset_tick);
            out.push((
                NoteEvent {
                    onset,
                    key: k as u8,
                    velocity,
                    duration: ticks_to_seconds(end_tick) - onset,
                },
                f as usize,
            ));
        }
        prev = keys;
        t += span;
    }
    out
}

/// Where a finger actually touches a key, before per-press variation.
fn contact_point(geom: &KeyboardGeometry, hand: Hand, finger: usize, key: usize) -> Vec3 {
    let k = &geom.keys[key];
    let dir = hand.finger_direction();
    let thumb = finger == 0;
    let x = if k.is_black { 100.0 } else { 40.0 } - if thumb { 6.0 } else { 0.0 };
    let y = k.center_y() as f32 + if thumb { -1.5 * dir } else { 0.0 };
    [x, y, k.rest_z as f32 - 6.0]
}

/// Ground-truth hover height and curl per finger.
const HOVER_MM: [f32; NUM_FINGERS] = [10.0, 14.0, 15.0, 15.0, 17.0];
const CURL_MM: [f32; NUM_FINGERS] = [-8.0, -3.0, -2.0, -3.0, -6.0];

fn placement(hand: Hand, pressed: &[(usize, Vec3)], spacing: f32) -> [Vec3; NUM_FINGERS] {
    let dir = hand.finger_direction();
    std::array::from_fn(|f| {
        if let Some(&(_, p)) = pressed.iter().find(|(pf, _)| *pf == f) {
            return p;
        }
        let &(a, anchor) = pressed.iter().min_by_key(|(a, _)| (a.abs_diff(f), *a)).unwrap();
        [
            anchor[0] + CURL_MM[f],
            anchor[1] + (f as f32 - a as f32) * spacing * dir,
            anchor[2] + HOVER_MM[f],
        ]
    })
}

fn lerp_frame(a: &[Vec3; NUM_FINGERS], b: &[Vec3; NUM_FINGERS], s: f32) -> [Vec3; NUM_FINGERS] {
    std::array::from_fn(|f| std::array::from_fn(|k| a[f][k] + s * (b[f][k] - a[f][k])))
}

fn smoothstep(u: f32) -> f32 {
    u * u * (3.0 - 2.0 * u)
}

/// Fingertip ground truth of one hand.
fn hand_tips(
    line: &HandLine,
    frames: usize,
    geom: &KeyboardGeometry,
    rng: &mut ChaCha8Rng,
) -> Vec<[Vec3; NUM_FINGERS]> {
    let hand = line.hand;
    let rest = rest_pose(hand, geom, &BaselineConfig::default());
    let spacing = geom.white_key_width as f32;
    let noise = [Normal::new(0.0, 1.5).unwrap(), Normal::new(0.0, 0.8).unwrap(), Normal::new(0.0, 0.4).unwrap()];
    let targets: Vec<[Vec3; NUM_FINGERS]> = line
        .chords
        .iter()
        .map(|c| {
            let pressed: Vec<(usize, Vec3)> = c
                .notes
                .iter()
                .map(|&(f, k)| {
                    let p = contact_point(geom, hand, f, k);
                    (f, std::array::from_fn(|i| p[i] + noise[i].sample(rng) as f32))
                })
                .collect();
            placement(hand, &pressed, spacing)
        })
        .collect();
    let moving = |a: Option<&Chord>, b: Option<&Chord>| -> [bool; NUM_FINGERS] {
        std::array::from_fn(|f| {
            let key = |c: Option<&Chord>| c.and_then(|c| c.notes.iter().find(|n| n.0 == f).map(|n| n.1));
            key(a) != key(b)
        })
    };

    let mut out = vec![rest; frames];
    let transition = |out: &mut Vec<[Vec3; NUM_FINGERS]>, from: &[Vec3; NUM_FINGERS], to: &[Vec3; NUM_FINGERS], lo: usize, hi: usize, lift: [bool; NUM_FINGERS]| {
        let n = hi - lo + 1;
        for t in lo..hi.min(frames) {
            let u = (t - lo + 1) as f32 / n as f32;
            let mut fr = lerp_frame(from, to, smoothstep(u));
            for f in 0..NUM_FINGERS {
                if lift[f] {
                    fr[f][2] += LIFT_MM * (std::f32::consts::PI * u).sin();
                }
            }
            out[t] = fr;
        }
    };
    let Some(first) = line.chords.first() else {
        return out;
    };
    let lead = first.onset.min(LEAD_IN_FRAMES);
    transition(&mut out, &rest, &targets[0], first.onset - lead, first.onset, moving(None, Some(first)));
    for (i, c) in line.chords.iter().enumerate() {
        for fr in out.iter_mut().take(c.release.min(frames)).skip(c.onset) {
            *fr = targets[i];
        }
        match line.chords.get(i + 1) {
            Some(next) => transition(&mut out, &targets[i], &targets[i + 1], c.release, next.onset, moving(Some(c), Some(next))),
            None => {
                // lift off after the last note and hold
                let mut up = targets[i];
                for &(f, _) in &c.notes {
                    up[f][2] += HOVER_MM[f];
                }
                let end = (c.release + LEAD_IN_FRAMES).min(frames);
                transition(&mut out, &targets[i], &up, c.release, end, [false; NUM_FINGERS]);
                for fr in out.iter_mut().skip(end) {
                    *fr = up;
                }
            }
        }
    }
    out
}

fn true_wrist_offset(hand: Hand, region: usize) -> Vec3 {
    let r = region as f32 - 3.5;
    [-85.0 - 1.5 * r.abs(), -8.0 * hand.finger_direction() + 1.0 * r, 48.0 + 0.8 * r]
}

/// Wrist, then full pose, from the fingertip ground truth.
fn hand_pose(hand: Hand, tips: &[[Vec3; NUM_FINGERS]], fingering: &FingeringGrid, geom: &KeyboardGeometry) -> HandPose {
    let t_len = tips.len();
    let mut region = None;
    let mut raw = Vec::with_capacity(t_len * 3);
    let mut arch = Vec::with_capacity(t_len * NUM_FINGERS);
    for (t, row) in tips.iter().enumerate() {
        let presses: Vec<(usize, usize)> = fingering.presses(t, hand).collect();
        let members: Vec<usize> = if presses.is_empty() {
            (0..NUM_FINGERS).collect()
        } else {
            region = region_of_keys(&presses.iter().map(|p| p.0).collect::<Vec<_>>());
            presses.iter().map(|p| p.1).collect()
        };
        let r = *region.get_or_insert_with(|| {
            let y = row.iter().map(|p| p[1] as f64).sum::<f64>() / NUM_FINGERS as f64;
            let k = (0..geom.keys.len())
                .min_by(|&a, &b| (geom.keys[a].center_y() - y).abs().total_cmp(&(geom.keys[b].center_y() - y).abs()))
                .unwrap();
            region_of(k).unwrap()
        });
        let off = true_wrist_offset(hand, r);
        for k in 0..3 {
            let c = members.iter().map(|&f| row[f][k]).sum::<f32>() / members.len() as f32;
            raw.push(c + off[k]);
        }
        let pressing: Vec<usize> = presses.iter().map(|p| p.1).collect();
        arch.extend((0..NUM_FINGERS).map(|f| if pressing.contains(&f) { 30.0f32 } else { 20.0 }));
    }
    let wrist = moving_average(&raw, 3, 8);
    let arch = moving_average(&arch, NUM_FINGERS, 6);
    let dir = hand.finger_direction();
    let frames = (0..t_len)
        .map(|t| {
            let w = [wrist[3 * t], wrist[3 * t + 1], wrist[3 * t + 2]];
            let a: [f32; NUM_FINGERS] = std::array::from_fn(|f| arch[t * NUM_FINGERS + f]);
            let mut pose = rig_pose(w, &tips[t], &a);
            for f in 0..NUM_FINGERS {
                let m = joint(f, 0);
                pose[m][1] = 0.75 * pose[m][1] + 0.25 * (w[1] + dir * (f as f32 - 2.0) * 17.0);
            }
            for (s, dz) in [6.0f32, 4.0, 2.0].iter().enumerate() {
                pose[joint(0, s)][2] -= dz;
            }
            pose
        })
        .collect();
    HandPose { hand, frames }
}

fn add_capture_noise(pose: &mut HandPose, spec: &CorpusSpec, rng: &mut ChaCha8Rng) {
    if spec.jitter_mm > 0.0 {
        let n = Normal::new(0.0, spec.jitter_mm).unwrap();
        for v in pose.frames.iter_mut().flatten().flatten() {
            *v += n.sample(rng) as f32;
        }
    }
    if spec.dropout > 0.0 {
        for t in 1..pose.frames.len() {
            if rng.random_bool(spec.dropout) {
                pose.frames[t] = pose.frames[t - 1];
            }
        }
    }
}

fn generate_piece(spec: &CorpusSpec, index: usize, split: Split, geom: &KeyboardGeometry) -> Result<Piece> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(index as u64 + 1)));
    for _ in 0..MAX_RETRIES {
        let length = rng.random_range(spec.seconds[0]..=spec.seconds[1]);
        let bpm = rng.random_range(spec.tempo_bpm[0]..=spec.tempo_bpm[1]);
        let parts: Vec<(Hand, Vec<(NoteEvent, usize)>)> = Hand::BOTH
            .iter()
            .map(|&h| (h, compose_hand(h, spec, bpm, length, geom, &mut rng)))
            .collect();
        let last_end = parts.iter().flat_map(|p| p.1.iter().map(|n| n.0.end())).fold(0.0, f64::max);
        let grid = FrameGrid::covering(last_end + 0.5);
        let frames = grid.frame_count;
        let mut fingering = FingeringGrid::new(frames);
        let mut lines = Vec::new();
        for (hand, notes) in &parts {
            let mut chords: Vec<Chord> = Vec::new();
            for (n, f) in notes {
                let span = grid.frames_overlapping(n.onset, n.end());
                for t in span.clone() {
                    fingering.set(t, n.key as usize, finger_code(*hand, *f));
                }
                match chords.last_mut() {
                    Some(c) if c.onset == span.start => c.notes.push((*f, n.key as usize)),
                    _ => chords.push(Chord {
                        notes: vec![(*f, n.key as usize)],
                        onset: span.start,
                        release: span.end,
                    }),
                }
            }
            lines.push(HandLine { hand: *hand, chords });
        }
        if fingering.validate().is_err() || lines.iter().any(|l| l.chords.is_empty()) {
            continue;
        }
        let mut notes: Vec<NoteEvent> = parts.iter().flat_map(|p| p.1.iter().map(|n| n.0)).collect();
        notes.sort_by(|a, b| a.onset.total_cmp(&b.onset).then(a.key.cmp(&b.key)));
        let poses: Vec<HandPose> = lines
            .iter()
            .map(|line| {
                let tips = hand_tips(line, frames, geom, &mut rng);
                let mut pose = hand_pose(line.hand, &tips, &fingering, geom);
                add_capture_noise(&mut pose, spec, &mut rng);
                pose
            })
            .collect();
        let [left, right]: [HandPose; 2] = poses.try_into().unwrap();
        return Ok(Piece {
            name: format!("piece_{index:03}"),
            split,
            notes,
            fingering,
            poses: [left, right],
        });
    }
    Err(Error::Build(format!("piece {index}: no feasible fingering after {MAX_RETRIES} attempts")))
}

/// Deterministic corpus for `spec.seed`.
pub fn generate_synthetic_corpus(spec: &CorpusSpec, geom: &KeyboardGeometry) -> Result<Corpus> {
    spec.validate()?;
    let [train, val, _] = spec.split_counts();
    let mut order: Vec<usize> = (0..spec.pieces).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(1)));
    let mut splits = vec![Split::Test; spec.pieces];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < train {
            Split::Train
        } else if rank < train + val {
            Split::Val
        } else {
            Split::Test
        };
    }
    let pieces = (0..spec.pieces)
        .map(|i| generate_piece(spec, i, splits[i], geom))
        .collect::<Result<_>>()?;
    Ok(Corpus { spec: spec.clone(), pieces })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub midi: PathBuf,
    pub fingering: PathBuf,
    /// Left then right hand, relative to the manifest.
    pub trajectories: [PathBuf; 2],
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: Option<CorpusSpec>,
    pub pieces: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Corpus {
    /// Writes MIDI, fingering CSV and ground-truth trajectory files plus a
    /// `manifest.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut entries = Vec::new();
        for p in &self.pieces {
            let midi = PathBuf::from(format!("{}.mid", p.name));
            let fingering = PathBuf::from(format!("{}.csv", p.name));
            let trajs = Hand::BOTH.map(|h| PathBuf::from(format!("{}.{}.tptj", p.name, h.tag())));
            std::fs::write(dir.join(&midi), write_midi(&p.notes, TICKS_PER_QUARTER, TEMPO_US))?;
            std::fs::write(dir.join(&fingering), p.fingering.to_csv())?;
            for h in Hand::BOTH {
                TrajectoryFile::from_pose(&p.poses[h.index()], "GT").save(dir.join(&trajs[h.index()]))?;
            }
            entries.push(ManifestEntry {
                name: p.name.clone(),
                midi,
                fingering,
                trajectories: trajs,
                split: p.split,
            });
        }
        let manifest = Manifest {
            spec: Some(self.spec.clone()),
            pieces: entries,
        };
        std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
        let mut pieces = Vec::with_capacity(manifest.pieces.len());
        for e in &manifest.pieces {
            let poses = [0, 1].map(|h| TrajectoryFile::load(dir.join(&e.trajectories[h])).and_then(|f| f.to_pose()));
            let [left, right] = poses;
            let (left, right) = (left?, right?);
            if left.hand != Hand::Left || right.hand != Hand::Right || left.len() != right.len() {
                return Err(Error::Format(format!("{}: trajectory files disagree", e.name)));
            }
            let fingering = parse_fingering(&std::fs::read_to_string(dir.join(&e.fingering))?, Some(left.len()))?;
            let notes = parse_midi(&std::fs::read(dir.join(&e.midi))?)?.events;
            pieces.push(Piece {
                name: e.name.clone(),
                split: e.split,
                notes,
                fingering,
                poses: [left, right],
            });
        }
        Ok(Self {
            spec: manifest.spec.unwrap_or_default(),
            pieces,
        })
    }
}

/// Checks that a pose trajectory is finite and joint-complete.
pub fn pose_is_finite(pose: &HandPose) -> bool {
    pose.frames.iter().all(|f| f.len() == NUM_JOINTS && f.iter().flatten().all(|v| v.is_finite()))
        && pose.frames.iter().all(|f| f[WRIST][2].is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CorpusSpec {
        CorpusSpec {
            pieces: 4,
            seconds: [4.0, 5.0],
            split: [0.5, 0.25, 0.25],
            ..CorpusSpec::default()
        }
    }

    #[test]
    fn deterministic_and_split() {
        let geom = KeyboardGeometry::default();
        let a = generate_synthetic_corpus(&small(), &geom).unwrap();
        let b = generate_synthetic_corpus(&small(), &geom).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.split(Split::Train).len(), 2);
        assert_eq!(CorpusSpec::default().split_counts(), [14, 3, 3]);
        for p in &a.pieces {
            p.fingering.validate().unwrap();
            assert!(p.poses.iter().all(pose_is_finite));
            assert!(!p.notes.is_empty());
        }
        let other = generate_synthetic_corpus(&CorpusSpec { seed: 99, ..small() }, &geom).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn ground_truth_presses_cover_the_notes() {
        let geom = KeyboardGeometry::default();
        let c = generate_synthetic_corpus(&small(), &geom).unwrap();
        for p in &c.pieces {
            for h in Hand::BOTH {
                let tips = p.poses[h.index()].tips();
                for t in 0..p.frames() {
                    for (k, f) in p.fingering.presses(t, h) {
                        let tip = tips.frames[t][f];
                        let pt = [tip[0] as f64, tip[1] as f64, tip[2] as f64];
                        assert_eq!(geom.key_at(pt), Some(k), "{} t={t}", p.name);
                        assert!(geom.is_pressed(pt, &geom.keys[k]).unwrap());
                    }
                }
            }
        }
    }

    #[test]
    fn save_load_round_trip() {
        let geom = KeyboardGeometry::default();
        let c = generate_synthetic_corpus(&CorpusSpec { pieces: 2, split: [0.5, 0.5, 0.0], ..small() }, &geom).unwrap();
        let dir = tempfile::tempdir().unwrap();
        c.save(dir.path()).unwrap();
        let back = Corpus::load(dir.path()).unwrap();
        assert_eq!(back.pieces.len(), 2);
        for (a, b) in c.pieces.iter().zip(&back.pieces) {
            assert_eq!(a.poses, b.poses);
            assert_eq!(a.fingering, b.fingering);
            assert_eq!(a.notes, b.notes);
        }
    }

    #[test]
    fn bad_specs_rejected() {
        assert!(CorpusSpec { split: [0.5, 0.5, 0.5], ..small() }.validate().is_err());
        assert!(CorpusSpec { pieces: 0, ..small() }.validate().is_err());
        assert!(CorpusSpec { max_polyphony: 4, ..small() }.validate().is_err());
    }
}
