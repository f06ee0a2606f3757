//! Reassembling overlapping window outputs into one sequence.
//!
//! Each window contributes with a raised-cosine weight over its valid span;
//! weights are normalized per frame. A zero-phase Butterworth low-pass is
//! then blended in around each seam only.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::score::raster::FrameGrid;
use crate::score::window::Window;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StitchConfig {
    /// Filter order; must be even.
    pub order: usize,
    pub cutoff_hz: f64,
    /// Frames on either side of a seam that receive the filtered signal;
    /// 0 disables filtering.
    pub seam_radius: usize,
}

impl Default for StitchConfig {
    fn default() -> Self {
        Self {
            order: 4,
            cutoff_hz: 6.0,
            seam_radius: 12,
        }
    }
}

/// Second-order section `b0 + b1 z⁻¹ + b2 z⁻²` over `1 + a1 z⁻¹ + a2 z⁻²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

/// Digital Butterworth low-pass as cascaded sections, by the bilinear
/// transform with a pre-warped cutoff.
pub fn butterworth_lowpass(order: usize, cutoff_hz: f64, fs: f64) -> Result<Vec<Biquad>> {
    if order == 0 || order % 2 != 0 {
        return Err(Error::Config(format!("filter order must be even and positive, got {order}")));
    }
    if !(cutoff_hz > 0.0 && cutoff_hz < fs / 2.0) {
        return Err(Error::Config(format!("cutoff {cutoff_hz} Hz outside (0, {}) Hz", fs / 2.0)));
    }
    let k = (std::f64::consts::PI * cutoff_hz / fs).tan();
    Ok((0..order / 2)
        .map(|i| {
            let theta = std::f64::consts::PI * (2 * i + 1 + order) as f64 / (2 * order) as f64;
            // pole pair at angle theta; Q = -1 / (2 cos theta)
            let q = -1.0 / (2.0 * theta.cos());
            let norm = 1.0 / (1.0 + k / q + k * k);
            let b0 = k * k * norm;
            Biquad {
                b: [b0, 2.0 * b0, b0],
                a: [2.0 * (k * k - 1.0) * norm, (1.0 - k / q + k * k) * norm],
            }
        })
        .collect())
}

fn run_sections(sos: &[Biquad], x: &mut [f64]) {
    for s in sos {
        // transposed direct form II, started in steady state on x[0]
        let x0 = x[0];
        let mut z1 = (1.0 - s.b[0]) * x0;
        let mut z2 = (s.b[2] - s.a[1]) * x0;
        for v in x.iter_mut() {
            let xin = *v;
            let y = s.b[0] * xin + z1;
            z1 = s.b[1] * xin - s.a[0] * y + z2;
            z2 = s.b[2] * xin - s.a[1] * y;
            *v = y;
        }
    }
}

/// Forward-backward filtering with odd extension at both ends.
pub fn filtfilt(sos: &[Biquad], x: &[f64]) -> Vec<f64> {
    let n = x.len();
    if n < 2 {
        return x.to_vec();
    }
    let pad = (3 * (2 * sos.len() + 1)).min(n - 1);
    let mut ext = Vec::with_capacity(n + 2 * pad);
    for i in (1..=pad).rev() {
        ext.push(2.0 * x[0] - x[i]);
    }
    ext.extend_from_slice(x);
    for i in 1..=pad {
        ext.push(2.0 * x[n - 1] - x[n - 1 - i]);
    }
    run_sections(sos, &mut ext);
    ext.reverse();
    run_sections(sos, &mut ext);
    ext.reverse();
    ext[pad..pad + n].to_vec()
}

/// Raised-cosine weight of position `i` in a span of `valid` frames.
pub fn window_weight(i: usize, valid: usize) -> f64 {
    let s = (std::f64::consts::PI * (i as f64 + 0.5) / valid as f64).sin();
    s * s
}

fn check_windows(windows: &[Window], frames: usize, stride: usize) -> Result<()> {
    let bad = |m: String| Err(Error::Assembly(m));
    let (Some(first), Some(last)) = (windows.first(), windows.last()) else {
        return bad("no windows to stitch".into());
    };
    if first.start != 0 || last.end() != frames {
        return bad(format!("windows cover {}..{}, piece has {frames} frames", first.start, last.end()));
    }
    for (i, pair) in windows.windows(2).enumerate() {
        let (a, b) = (pair[0], pair[1]);
        let step = b.start.wrapping_sub(a.start);
        let last_pair = i + 2 == windows.len();
        if b.start <= a.start || b.start >= a.end() || step > stride || (!last_pair && step != stride) {
            return bad(format!("window {} at {} does not follow {} with stride {stride}", i + 1, b.start, a.start));
        }
    }
    Ok(())
}

/// Per-window normalized weights, each of length `valid`.
pub fn stitch_weights(windows: &[Window], frames: usize) -> Vec<Vec<f64>> {
    let mut total = vec![0.0f64; frames];
    for w in windows {
        for i in 0..w.valid {
            total[w.start + i] += window_weight(i, w.valid);
        }
    }
    windows
        .iter()
        .map(|w| (0..w.valid).map(|i| window_weight(i, w.valid) / total[w.start + i]).collect())
        .collect()
}

/// Frame where each consecutive pair of windows hands over: the middle of
/// their overlap.
pub fn seams(windows: &[Window]) -> Vec<usize> {
    windows.windows(2).map(|p| (p[1].start + p[0].end()) / 2).collect()
}

/// Blend factor of the filtered signal at distance `d` from the nearest seam.
fn seam_blend(d: usize, radius: usize) -> f64 {
    let flat = radius / 2;
    if d <= flat {
        1.0
    } else if d > radius {
        0.0
    } else {
        let u = (d - flat) as f64 / (radius + 1 - flat) as f64;
        0.5 * (1.0 + (std::f64::consts::PI * u).cos())
    }
}

/// Stitches per-window outputs (`valid × channels` each) into `frames ×
/// channels`. Cells flagged in `protect` (`frames × channels`) are copied
/// bit-exactly from the window with the largest weight and never filtered.
pub fn stitch_windows(
    outputs: &[Vec<f32>],
    windows: &[Window],
    channels: usize,
    frames: usize,
    stride: usize,
    cfg: &StitchConfig,
    protect: Option<&[bool]>,
) -> Result<Vec<f32>> {
    check_windows(windows, frames, stride)?;
    if outputs.len() != windows.len() {
        return Err(Error::Assembly(format!("{} outputs for {} windows", outputs.len(), windows.len())));
    }
    for (o, w) in outputs.iter().zip(windows) {
        if o.len() != w.valid * channels {
            return Err(Error::Assembly(format!("window at {} has {} values, expected {}", w.start, o.len(), w.valid * channels)));
        }
    }
    if protect.is_some_and(|p| p.len() != frames * channels) {
        return Err(Error::Assembly("protect mask does not match the output".into()));
    }
    if windows.len() == 1 {
        return Ok(outputs[0].clone());
    }

    let weights = stitch_weights(windows, frames);
    let mut blended = vec![0.0f64; frames * channels];
    let mut best = vec![(f64::NEG_INFINITY, 0usize); frames];
    for (wi, (w, o)) in windows.iter().zip(outputs).enumerate() {
        for i in 0..w.valid {
            let t = w.start + i;
            let wt = weights[wi][i];
            if wt > best[t].0 {
                best[t] = (wt, wi);
            }
            for c in 0..channels {
                blended[t * channels + c] += wt * o[i * channels + c] as f64;
            }
        }
    }

    if cfg.seam_radius > 0 {
        let sos = butterworth_lowpass(cfg.order, cfg.cutoff_hz, FrameGrid::fps())?;
        let seam_at = seams(windows);
        let alpha: Vec<f64> = (0..frames)
            .map(|t| {
                let d = seam_at.iter().map(|&s| s.abs_diff(t)).min().unwrap();
                seam_blend(d, cfg.seam_radius)
            })
            .collect();
        for c in 0..channels {
            let series: Vec<f64> = (0..frames).map(|t| blended[t * channels + c]).collect();
            let filtered = filtfilt(&sos, &series);
            for t in 0..frames {
                let a = alpha[t];
                if a > 0.0 {
                    blended[t * channels + c] = (1.0 - a) * series[t] + a * filtered[t];
                }
            }
        }
    }

    let mut out: Vec<f32> = blended.iter().map(|&v| v as f32).collect();
    if let Some(p) = protect {
        for t in 0..frames {
            let (_, wi) = best[t];
            let i = t - windows[wi].start;
            for c in 0..channels {
                if p[t * channels + c] {
                    out[t * channels + c] = outputs[wi][i * channels + c];
                }
            }
        }
    }
    Ok(out)
}
