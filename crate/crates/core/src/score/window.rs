use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const WINDOW_LEN: usize = 480;
pub const WINDOW_STRIDE: usize = 240;

/// A fixed-length synthesis window. Frames past `valid` are padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub start: usize,
    pub len: usize,
    pub valid: usize,
}

impl Window {
    pub fn end(&self) -> usize {
        self.start + self.valid
    }

    pub fn frames(&self) -> std::ops::Range<usize> {
        self.start..self.end()
    }

    pub fn validity(&self) -> Vec<bool> {
        (0..self.len).map(|i| i < self.valid).collect()
    }
}

/// Overlapping 480-frame windows with a 240-frame stride. The last window
/// is aligned to end exactly at `frames`; short pieces get one padded window.
pub fn make_windows(frames: usize) -> Result<Vec<Window>> {
    make_windows_with(frames, WINDOW_LEN, WINDOW_STRIDE)
}

pub fn make_windows_with(frames: usize, len: usize, stride: usize) -> Result<Vec<Window>> {
    if frames == 0 {
        return Err(Error::Argument("cannot window an empty sequence".into()));
    }
    if stride == 0 || stride > len {
        return Err(Error::Config(format!("stride {stride} must lie in 1..={len}")));
    }
    if frames <= len {
        return Ok(vec![Window { start: 0, len, valid: frames }]);
    }
    let mut out = Vec::new();
    let mut start = 0;
    loop {
        if start + len >= frames {
            out.push(Window { start: frames - len, len, valid: len });
            return Ok(out);
        }
        out.push(Window { start, len, valid: len });
        start += stride;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn starts(t: usize) -> Vec<usize> {
        make_windows(t).unwrap().iter().map(|w| w.start).collect()
    }

    #[test]
    fn examples() {
        assert_eq!(starts(480), vec![0]);
        assert_eq!(starts(960), vec![0, 240, 480]);
        assert_eq!(starts(1200), vec![0, 240, 480, 720]);
        let w = make_windows(100).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].valid, 100);
        assert_eq!(w[0].validity().iter().filter(|v| !**v).count(), 380);
        assert!(make_windows(0).is_err());
    }

    proptest::proptest! {
        #[test]
        fn coverage(t in 1usize..5000) {
            let ws = make_windows(t).unwrap();
            let mut cover = vec![0usize; t];
            for w in &ws {
                for f in w.frames() {
                    cover[f] += 1;
                }
            }
            proptest::prop_assert!(cover.iter().all(|&c| c >= 1));
            let last = ws.last().unwrap();
            proptest::prop_assert_eq!(last.end(), t);
            // only the tail-aligned window may create triple coverage
            let tail_start = last.start;
            for (f, &c) in cover.iter().enumerate() {
                if f < tail_start {
                    proptest::prop_assert!(c <= 2, "frame {} covered {} times", f, c);
                } else {
                    proptest::prop_assert!(c <= 3);
                }
            }
        }
    }
}
