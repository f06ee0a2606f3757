//! Evaluation: key-contact precision/recall/F1, position errors and the
//! acceleration ratio.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::keyboard::{KeyboardGeometry, PressThresholds};
use crate::pose::{HandPose, NUM_JOINTS, TIPS, WRIST};
use crate::score::midi::NoteEvent;
use crate::score::raster::FrameGrid;
use crate::types::{FingertipTrajectory, Hand, Vec3, NUM_FINGERS, NUM_KEYS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PressEvent {
    pub key: usize,
    /// First and last pressed frame, inclusive.
    pub start_frame: usize,
    pub end_frame: usize,
    pub finger: Option<(Hand, usize)>,
}

impl PressEvent {
    pub fn onset(&self) -> f64 {
        FrameGrid::frame_start(self.start_frame)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub onset_tol_ms: f64,
    pub min_frames: usize,
    /// Also report frame-level contact F1.
    pub frame_level: bool,
    pub thresholds: Option<PressThresholds>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            onset_tol_ms: 100.0,
            min_frames: 2,
            frame_level: true,
            thresholds: None,
        }
    }
}

fn pressed_key(geom: &KeyboardGeometry, th: &PressThresholds, p: Vec3) -> Option<usize> {
    let point = [p[0] as f64, p[1] as f64, p[2] as f64];
    if !point.iter().all(|v| v.is_finite()) {
        return None;
    }
    let key = geom.key_at(point)?;
    let limit = if geom.keys[key].is_black { th.black_z } else { th.white_z };
    (point[2] <= limit).then_some(key)
}

/// Press events of one hand: per finger, contiguous frames over the same key
/// at or below its threshold, dropping runs shorter than `min_frames`.
pub fn detect_presses(
    traj: &FingertipTrajectory,
    geom: &KeyboardGeometry,
    thresholds: &PressThresholds,
    min_frames: usize,
) -> Vec<PressEvent> {
    let mut events = Vec::new();
    for f in 0..NUM_FINGERS {
        let mut run: Option<(usize, usize)> = None;
        let keys = traj.frames.iter().map(|fr| pressed_key(geom, thresholds, fr[f]));
        for (t, key) in keys.chain(std::iter::once(None)).enumerate() {
            match (run, key) {
                (Some((k, _)), Some(k2)) if k == k2 => continue,
                _ => {}
            }
            if let Some((k, start)) = run.take() {
                if t - start >= min_frames.max(1) {
                    events.push(PressEvent {
                        key: k,
                        start_frame: start,
                        end_frame: t - 1,
                        finger: Some((traj.hand, f)),
                    });
                }
            }
            run = key.map(|k| (k, t));
        }
    }
    events.sort_by_key(|e| (e.start_frame, e.key, e.finger.map(|(h, f)| (h.index(), f))));
    events
}

pub fn detect_presses_both(
    tips: &[FingertipTrajectory],
    geom: &KeyboardGeometry,
    thresholds: &PressThresholds,
    min_frames: usize,
) -> Vec<PressEvent> {
    let mut all: Vec<PressEvent> = tips
        .iter()
        .flat_map(|t| detect_presses(t, geom, thresholds, min_frames))
        .collect();
    all.sort_by_key(|e| (e.start_frame, e.key, e.finger.map(|(h, f)| (h.index(), f))));
    all
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContactScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub matched: usize,
    pub predicted: usize,
    pub reference: usize,
}

impl ContactScore {
    pub fn from_counts(matched: usize, predicted: usize, reference: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(matched, predicted);
        let recall = ratio(matched, reference);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            precision,
            recall,
            f1,
            matched,
            predicted,
            reference,
        }
    }
}

/// Maximum one-to-one matching between onset lists of one key, where a pair
/// is allowed when the onsets differ by at most `tol` seconds. Sweeping the
/// predictions in time order and taking the earliest still-open reference
/// onset is optimal on this interval structure.
pub fn match_onsets(pred: &[f64], gt: &[f64], tol: f64) -> Vec<(usize, usize)> {
    let mut p: Vec<usize> = (0..pred.len()).collect();
    p.sort_by(|&a, &b| pred[a].total_cmp(&pred[b]).then(a.cmp(&b)));
    let mut g: Vec<usize> = (0..gt.len()).collect();
    g.sort_by(|&a, &b| gt[a].total_cmp(&gt[b]).then(a.cmp(&b)));
    let mut pairs = Vec::new();
    let mut next = 0;
    for &i in &p {
        // references that ended before this prediction's window can never match later ones
        while next < g.len() && gt[g[next]] < pred[i] - tol {
            next += 1;
        }
        if next < g.len() && (gt[g[next]] - pred[i]).abs() <= tol {
            pairs.push((i, g[next]));
            next += 1;
        }
    }
    pairs
}

/// Key-only event matching: a prediction matches a reference note on the
/// same key whose onset lies within `onset_tol_ms`.
pub fn key_contact_f1(pred: &[PressEvent], gt: &[NoteEvent], onset_tol_ms: f64) -> ContactScore {
    let tol = onset_tol_ms / 1000.0;
    let mut by_key_pred = vec![Vec::new(); NUM_KEYS];
    let mut by_key_gt = vec![Vec::new(); NUM_KEYS];
    for e in pred.iter().filter(|e| e.key < NUM_KEYS) {
        by_key_pred[e.key].push(e.onset());
    }
    for n in gt.iter().filter(|n| (n.key as usize) < NUM_KEYS) {
        by_key_gt[n.key as usize].push(n.onset);
    }
    let matched = (0..NUM_KEYS)
        .map(|k| match_onsets(&by_key_pred[k], &by_key_gt[k], tol).len())
        .sum();
    ContactScore::from_counts(matched, pred.len(), gt.len())
}

/// Frame-level contact: (frame, key) cells pressed in the prediction versus
/// sounding in the reference.
pub fn frame_contact_f1(pred: &[PressEvent], gt: &[NoteEvent], frames: usize) -> ContactScore {
    let mut p = vec![false; frames * NUM_KEYS];
    let mut g = vec![false; frames * NUM_KEYS];
    for e in pred.iter().filter(|e| e.key < NUM_KEYS) {
        for t in e.start_frame..=e.end_frame.min(frames.saturating_sub(1)) {
            p[t * NUM_KEYS + e.key] = true;
        }
    }
    let grid = FrameGrid::new(frames);
    for n in gt.iter().filter(|n| (n.key as usize) < NUM_KEYS) {
        for t in grid.frames_overlapping(n.onset, n.end()) {
            g[t * NUM_KEYS + n.key as usize] = true;
        }
    }
    let tp = p.iter().zip(&g).filter(|(a, b)| **a && **b).count();
    ContactScore::from_counts(tp, p.iter().filter(|v| **v).count(), g.iter().filter(|v| **v).count())
}

fn dist(a: Vec3, b: Vec3) -> f64 {
    let mut s = 0.0f64;
    for k in 0..3 {
        let d = a[k] as f64 - b[k] as f64;
        s += d * d;
    }
    s.sqrt()
}

fn check_lengths<T>(a: &[T], b: &[T]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Argument(format!("{} predicted vs {} reference frames", a.len(), b.len())));
    }
    Ok(())
}

/// Mean Euclidean distance over frames and the given joints.
pub fn mean_joint_error<const J: usize>(pred: &[[Vec3; J]], gt: &[[Vec3; J]], joints: &[usize]) -> Result<f64> {
    check_lengths(pred, gt)?;
    if pred.is_empty() || joints.is_empty() {
        return Ok(0.0);
    }
    let mut s = 0.0;
    for (a, b) in pred.iter().zip(gt) {
        for &j in joints {
            s += dist(a[j], b[j]);
        }
    }
    Ok(s / (pred.len() * joints.len()) as f64)
}

/// `(MPJPE, fingertip error)` in mm.
pub fn position_metrics(pred: &HandPose, gt: &HandPose) -> Result<(f64, f64)> {
    let all: Vec<usize> = (0..NUM_JOINTS).collect();
    Ok((
        mean_joint_error(&pred.frames, &gt.frames, &all)?,
        mean_joint_error(&pred.frames, &gt.frames, &TIPS)?,
    ))
}

fn mean_accel<const J: usize>(x: &[[Vec3; J]], joints: &[usize]) -> f64 {
    let mut s = 0.0;
    for t in 1..x.len() - 1 {
        for &j in joints {
            let mut sq = 0.0f64;
            for k in 0..3 {
                let a = x[t + 1][j][k] as f64 - 2.0 * x[t][j][k] as f64 + x[t - 1][j][k] as f64;
                sq += a * a;
            }
            s += sq.sqrt();
        }
    }
    s / ((x.len() - 2) * joints.len()) as f64
}

/// Ratio of mean second-difference magnitudes, prediction over reference.
/// `None` when the reference never accelerates.
pub fn accel_ratio<const J: usize>(pred: &[[Vec3; J]], gt: &[[Vec3; J]], joints: &[usize]) -> Result<Option<f64>> {
    check_lengths(pred, gt)?;
    if pred.len() < 3 {
        return Err(Error::Argument(format!("acceleration needs 3 frames, got {}", pred.len())));
    }
    if joints.is_empty() {
        return Err(Error::Argument("no joints selected".into()));
    }
    let den = mean_accel(gt, joints);
    if den <= 1e-12 {
        return Ok(None);
    }
    Ok(Some(mean_accel(pred, joints) / den))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandMetrics {
    pub hand: Hand,
    pub mpjpe_mm: f64,
    pub fingertip_mm: f64,
    pub accel_full: Option<f64>,
    pub accel_fingertip: Option<f64>,
    pub accel_wrist: Option<f64>,
}

pub fn hand_metrics(pred: &HandPose, gt: &HandPose) -> Result<HandMetrics> {
    let (mpjpe_mm, fingertip_mm) = position_metrics(pred, gt)?;
    let all: Vec<usize> = (0..NUM_JOINTS).collect();
    let long = pred.len() >= 3;
    let ratio = |joints: &[usize]| -> Result<Option<f64>> {
        if long {
            accel_ratio(&pred.frames, &gt.frames, joints)
        } else {
            Ok(None)
        }
    };
    Ok(HandMetrics {
        hand: pred.hand,
        mpjpe_mm,
        fingertip_mm,
        accel_full: ratio(&all)?,
        accel_fingertip: ratio(&TIPS)?,
        accel_wrist: ratio(&[WRIST])?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub contact: ContactScore,
    pub frame_contact: Option<ContactScore>,
    pub hands: Vec<HandMetrics>,
    /// Means over hands.
    pub mpjpe_mm: Option<f64>,
    pub fingertip_mm: Option<f64>,
    pub config: EvalConfig,
}

/// Contact metrics from fingertips, plus pose metrics when a prediction and
/// a reference pose are both supplied.
pub fn evaluate(
    tips: &[FingertipTrajectory],
    notes: &[NoteEvent],
    poses: Option<(&[HandPose], &[HandPose])>,
    geom: &KeyboardGeometry,
    cfg: &EvalConfig,
) -> Result<MetricsReport> {
    let th = cfg.thresholds.unwrap_or(geom.thresholds);
    let events = detect_presses_both(tips, geom, &th, cfg.min_frames);
    let frames = tips.iter().map(|t| t.len()).max().unwrap_or(0);
    let mut hands = Vec::new();
    if let Some((pred, gt)) = poses {
        if pred.len() != gt.len() {
            return Err(Error::Argument("prediction and reference cover different hands".into()));
        }
        for (p, g) in pred.iter().zip(gt) {
            if p.hand != g.hand {
                return Err(Error::Argument("hand order differs between prediction and reference".into()));
            }
            hands.push(hand_metrics(p, g)?);
        }
    }
    let mean = |f: fn(&HandMetrics) -> f64| (!hands.is_empty()).then(|| hands.iter().map(f).sum::<f64>() / hands.len() as f64);
    Ok(MetricsReport {
        contact: key_contact_f1(&events, notes, cfg.onset_tol_ms),
        frame_contact: cfg.frame_level.then(|| frame_contact_f1(&events, notes, frames)),
        mpjpe_mm: mean(|h| h.mpjpe_mm),
        fingertip_mm: mean(|h| h.fingertip_mm),
        hands,
        config: cfg.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tip_over(geom: &KeyboardGeometry, key: usize, depth: f32) -> Vec3 {
        let [x, y, z] = geom.keys[key].center();
        [x as f32, y as f32, z as f32 - depth]
    }

    fn traj(geom: &KeyboardGeometry, frames: &[(usize, f32)]) -> FingertipTrajectory {
        let rest = tip_over(geom, 10, -15.0);
        FingertipTrajectory {
            hand: Hand::Right,
            frames: frames
                .iter()
                .map(|&(k, d)| {
                    let mut fr = [rest; NUM_FINGERS];
                    fr[1] = tip_over(geom, k, d);
                    fr
                })
                .collect(),
        }
    }

    #[test]
    fn detects_single_run_and_debounces() {
        let geom = KeyboardGeometry::default();
        let th = geom.thresholds;
        let mut fr = vec![(39, -15.0f32); 12];
        for f in fr.iter_mut().take(10).skip(3) {
            f.1 = 2.0;
        }
        let ev = detect_presses(&traj(&geom, &fr), &geom, &th, 2);
        assert_eq!(ev.len(), 1);
        assert_eq!((ev[0].key, ev[0].start_frame, ev[0].end_frame), (39, 3, 9));

        let idle = detect_presses(&traj(&geom, &[(39, -15.0); 8]), &geom, &th, 2);
        assert!(idle.is_empty());

        let mut blip = vec![(39, -15.0f32); 8];
        blip[4].1 = 2.0;
        let t = traj(&geom, &blip);
        assert!(detect_presses(&t, &geom, &th, 2).is_empty());
        // frame-enumeration oracle: exactly one pressed frame exists
        let pressed: Vec<usize> = (0..8).filter(|&i| pressed_key(&geom, &th, t.frames[i][1]).is_some()).collect();
        assert_eq!(pressed, vec![4]);
        assert_eq!(detect_presses(&t, &geom, &th, 1).len(), 1);
    }

    fn note(key: u8, onset: f64) -> NoteEvent {
        NoteEvent { onset, key, velocity: 80, duration: 0.2 }
    }

    fn event(key: usize, frame: usize) -> PressEvent {
        PressEvent { key, start_frame: frame, end_frame: frame + 5, finger: None }
    }

    #[test]
    fn f1_conventions() {
        let s = key_contact_f1(&[event(40, 60)], &[note(40, FrameGrid::frame_start(60))], 100.0);
        assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));
        let s = key_contact_f1(&[], &[note(40, 1.0)], 100.0);
        assert_eq!((s.precision, s.recall, s.f1), (0.0, 0.0, 0.0));
        // wrong key never matches
        let s = key_contact_f1(&[event(41, 60)], &[note(40, FrameGrid::frame_start(60))], 100.0);
        assert_eq!(s.matched, 0);
    }

    /// Exhaustive maximum matching.
    fn brute(pred: &[f64], gt: &[f64], tol: f64) -> usize {
        fn go(i: usize, pred: &[f64], gt: &[f64], used: &mut Vec<bool>, tol: f64) -> usize {
            if i == pred.len() {
                return 0;
            }
            let mut best = go(i + 1, pred, gt, used, tol);
            for j in 0..gt.len() {
                if !used[j] && (pred[i] - gt[j]).abs() <= tol {
                    used[j] = true;
                    best = best.max(1 + go(i + 1, pred, gt, used, tol));
                    used[j] = false;
                }
            }
            best
        }
        go(0, pred, gt, &mut vec![false; gt.len()], tol)
    }

    #[test]
    fn sweep_matching_is_optimal() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let np = rng.random_range(0..=8);
            let ng = rng.random_range(0..=8);
            let pred: Vec<f64> = (0..np).map(|_| rng.random_range(0.0..0.6)).collect();
            let gt: Vec<f64> = (0..ng).map(|_| rng.random_range(0.0..0.6)).collect();
            let pairs = match_onsets(&pred, &gt, 0.1);
            assert_eq!(pairs.len(), brute(&pred, &gt, 0.1), "{pred:?} {gt:?}");
            for &(i, j) in &pairs {
                assert!((pred[i] - gt[j]).abs() <= 0.1);
            }
        }
    }

    #[test]
    fn f1_ignores_order() {
        let pred = vec![event(40, 10), event(40, 16), event(42, 30), event(40, 200)];
        let gt = vec![note(40, 0.17), note(42, 0.5), note(40, 0.25)];
        let a = key_contact_f1(&pred, &gt, 100.0);
        let mut rp = pred.clone();
        rp.reverse();
        let mut rg = gt.clone();
        rg.reverse();
        assert_eq!(a, key_contact_f1(&rp, &rg, 100.0));
        assert_eq!(a.matched, 3);
    }

    fn random_pose(rng: &mut ChaCha8Rng, t_len: usize) -> HandPose {
        HandPose {
            hand: Hand::Left,
            frames: (0..t_len)
                .map(|_| std::array::from_fn(|_| std::array::from_fn(|_| rng.random_range(-100.0..100.0))))
                .collect(),
        }
    }

    #[test]
    fn position_metrics_and_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_pose(&mut rng, 7);
        assert_eq!(position_metrics(&a, &a).unwrap(), (0.0, 0.0));
        let mut b = a.clone();
        for fr in &mut b.frames {
            for j in fr.iter_mut() {
                j[0] += 3.0;
                j[1] += 4.0;
            }
        }
        let (m, t) = position_metrics(&b, &a).unwrap();
        assert!((m - 5.0).abs() < 1e-4 && (t - 5.0).abs() < 1e-4);

        let c = random_pose(&mut rng, 7);
        let mut oracle = 0.0f64;
        for t in 0..7 {
            for j in 0..NUM_JOINTS {
                let d: f64 = (0..3).map(|k| (a.frames[t][j][k] as f64 - c.frames[t][j][k] as f64).powi(2)).sum();
                oracle += d.sqrt();
            }
        }
        oracle /= (7 * NUM_JOINTS) as f64;
        assert!((position_metrics(&a, &c).unwrap().0 - oracle).abs() < 1e-6);
        assert!(position_metrics(&a, &random_pose(&mut rng, 6)).is_err());
    }

    #[test]
    fn accel_ratio_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_pose(&mut rng, 9);
        let all: Vec<usize> = (0..NUM_JOINTS).collect();
        assert_eq!(accel_ratio(&a.frames, &a.frames, &all).unwrap(), Some(1.0));
        let mut b = a.clone();
        for v in b.frames.iter_mut().flatten().flatten() {
            *v *= 2.0;
        }
        let r = accel_ratio(&b.frames, &a.frames, &all).unwrap().unwrap();
        assert!((r - 2.0).abs() < 1e-9);
        let still = HandPose { hand: Hand::Left, frames: vec![a.frames[0]; 9] };
        assert_eq!(accel_ratio(&a.frames, &still.frames, &all).unwrap(), None);
        assert!(accel_ratio(&a.frames[..2], &a.frames[..2], &all).is_err());
    }

    #[test]
    fn frame_level_counts() {
        let n = note(40, FrameGrid::frame_start(10));
        let ev = PressEvent { key: 40, start_frame: 10, end_frame: 21, finger: None };
        let s = frame_contact_f1(&[ev], &[n], 40);
        assert!(s.recall > 0.9 && s.precision > 0.9, "{s:?}");
    }
}
