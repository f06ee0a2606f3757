//! 88-key piano geometry in piano-aligned millimetre coordinates.
//!
//! Key 0 is A0 and key 87 is C8. White keys tile the Y axis edge to edge;
//! black keys sit on the boundaries between white keys and only span the
//! rear part of the key depth. Y intervals are half-open on the low side,
//! `(y_min, y_max]`, so a point on a shared boundary belongs to the lower
//! key. The lowest key also owns its own `y_min` edge.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::NUM_KEYS;

pub const NUM_WHITE_KEYS: usize = 52;
pub const NUM_BLACK_KEYS: usize = 36;
pub const NUM_REGIONS: usize = 8;

/// Lower edges of the eight pitch regions used by the wrist offset prior.
pub const REGION_STARTS: [usize; NUM_REGIONS] = [0, 15, 25, 35, 45, 55, 65, 75];

/// Pitch classes (C = 0) that are black keys.
const BLACK_PITCH_CLASSES: [usize; 5] = [1, 3, 6, 8, 10];

pub fn is_black_key(index: usize) -> bool {
    BLACK_PITCH_CLASSES.contains(&((index + 9) % 12))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PressThresholds {
    pub white_z: f64,
    pub black_z: f64,
    /// Depth at which the action sounds; carried for reference, not used in detection.
    pub acoustic_trigger_depth: f64,
}

impl Default for PressThresholds {
    fn default() -> Self {
        Self {
            white_z: -1.19,
            black_z: 10.38,
            acoustic_trigger_depth: 8.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeySpec {
    pub index: usize,
    pub is_black: bool,
    pub y_min: f64,
    pub y_max: f64,
    pub x_min: f64,
    pub x_max: f64,
    pub rest_z: f64,
}

impl KeySpec {
    pub fn center(&self) -> [f64; 3] {
        [
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
            self.rest_z,
        ]
    }

    pub fn center_y(&self) -> f64 {
        0.5 * (self.y_min + self.y_max)
    }

    fn contains_x(&self, x: f64) -> bool {
        x >= self.x_min && x <= self.x_max
    }

    fn contains_y(&self, y: f64, owns_low_edge: bool) -> bool {
        (y > self.y_min || (owns_low_edge && y == self.y_min)) && y <= self.y_max
    }
}

/// Layout overrides for [`build_standard_keyboard`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KeyboardConfig {
    pub white_key_width: f64,
    pub white_key_length: f64,
    pub black_key_width: f64,
    pub black_key_length: f64,
    pub black_rest_z: f64,
    /// Lateral shift of each black key from its white-key boundary, for
    /// C#, D#, F#, G#, A# in that order.
    pub black_offsets: [f64; 5],
    pub origin: [f64; 3],
    pub thresholds: PressThresholds,
}

impl Default for KeyboardConfig {
    fn default() -> Self {
        Self {
            white_key_width: 23.5,
            white_key_length: 150.0,
            black_key_width: 13.7,
            black_key_length: 95.0,
            black_rest_z: 12.5,
            black_offsets: [-1.8, 1.8, -2.5, 0.0, 2.5],
            origin: [0.0; 3],
            thresholds: PressThresholds::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyboardGeometry {
    pub keys: Vec<KeySpec>,
    pub white_key_width: f64,
    /// World-space position of key 0's front-left corner.
    pub origin: [f64; 3],
    pub thresholds: PressThresholds,
}

pub fn build_standard_keyboard(config: &KeyboardConfig) -> Result<KeyboardGeometry> {
    let positive = [
        ("white_key_width", config.white_key_width),
        ("white_key_length", config.white_key_length),
        ("black_key_width", config.black_key_width),
        ("black_key_length", config.black_key_length),
        ("black_rest_z", config.black_rest_z),
    ];
    for (name, value) in positive {
        if !(value.is_finite() && value > 0.0) {
            return Err(Error::Config(format!("{name} must be positive, got {value}")));
        }
    }
    if config.black_key_length > config.white_key_length {
        return Err(Error::Config("black keys cannot be longer than white keys".into()));
    }

    let w = config.white_key_width;
    let mut keys = Vec::with_capacity(NUM_KEYS);
    let mut white_seen = 0usize;
    for index in 0..NUM_KEYS {
        if is_black_key(index) {
            let pc = (index + 9) % 12;
            let slot = BLACK_PITCH_CLASSES.iter().position(|&p| p == pc).unwrap();
            let center = white_seen as f64 * w + config.black_offsets[slot];
            let half = 0.5 * config.black_key_width;
            keys.push(KeySpec {
                index,
                is_black: true,
                y_min: center - half,
                y_max: center + half,
                x_min: config.white_key_length - config.black_key_length,
                x_max: config.white_key_length,
                rest_z: config.black_rest_z,
            });
        } else {
            keys.push(KeySpec {
                index,
                is_black: false,
                y_min: white_seen as f64 * w,
                y_max: (white_seen + 1) as f64 * w,
                x_min: 0.0,
                x_max: config.white_key_length,
                rest_z: 0.0,
            });
            white_seen += 1;
        }
    }

    let geom = KeyboardGeometry {
        keys,
        white_key_width: w,
        origin: config.origin,
        thresholds: config.thresholds,
    };
    geom.validate()?;
    Ok(geom)
}

impl Default for KeyboardGeometry {
    fn default() -> Self {
        build_standard_keyboard(&KeyboardConfig::default()).expect("default layout is valid")
    }
}

impl KeyboardGeometry {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let geom: KeyboardGeometry = serde_json::from_str(&text)?;
        geom.validate()?;
        Ok(geom)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn key(&self, index: usize) -> Result<&KeySpec> {
        self.keys
            .get(index)
            .ok_or_else(|| Error::Argument(format!("key index {index} out of range 0..88")))
    }

    pub fn white_keys(&self) -> impl Iterator<Item = &KeySpec> {
        self.keys.iter().filter(|k| !k.is_black)
    }

    pub fn black_keys(&self) -> impl Iterator<Item = &KeySpec> {
        self.keys.iter().filter(|k| k.is_black)
    }

    /// Checks every structural invariant of the layout.
    pub fn validate(&self) -> Result<()> {
        if self.keys.len() != NUM_KEYS {
            return Err(Error::Config(format!("expected 88 keys, got {}", self.keys.len())));
        }
        let t = &self.thresholds;
        for (i, k) in self.keys.iter().enumerate() {
            if k.index != i {
                return Err(Error::Config(format!("key {i} carries index {}", k.index)));
            }
            if k.is_black != is_black_key(i) {
                return Err(Error::Config(format!("key {i} has the wrong colour")));
            }
            if !(k.y_min < k.y_max && k.x_min < k.x_max) {
                return Err(Error::Config(format!("key {i} has an empty extent")));
            }
            if i > 0 && k.y_min <= self.keys[i - 1].y_min {
                return Err(Error::Config(format!("key {i} Y extent is not increasing")));
            }
            if k.is_black && !(t.black_z < k.rest_z) {
                return Err(Error::Config(format!(
                    "black threshold {} must lie below black key {i} rest {}",
                    t.black_z, k.rest_z
                )));
            }
        }
        let whites: Vec<&KeySpec> = self.white_keys().collect();
        for pair in whites.windows(2) {
            if pair[0].y_max != pair[1].y_min {
                return Err(Error::Config(format!(
                    "white keys {} and {} do not tile",
                    pair[0].index, pair[1].index
                )));
            }
        }
        let blacks: Vec<&KeySpec> = self.black_keys().collect();
        for pair in blacks.windows(2) {
            if pair[0].y_max >= pair[1].y_min {
                return Err(Error::Config(format!(
                    "black keys {} and {} overlap",
                    pair[0].index, pair[1].index
                )));
            }
        }
        if !(t.white_z < 0.0 && 0.0 < t.black_z) {
            return Err(Error::Config("thresholds must satisfy white_z < 0 < black_z".into()));
        }
        Ok(())
    }

    /// Total Y span of the white keys.
    pub fn span(&self) -> f64 {
        let lo = self.keys.first().map_or(0.0, |k| k.y_min);
        let hi = self.keys.last().map_or(0.0, |k| k.y_max);
        hi - lo
    }

    /// Key whose XY footprint contains `point`. Black keys win over the
    /// white keys beneath them.
    pub fn key_at(&self, point: [f64; 3]) -> Option<usize> {
        let [x, y, _] = point;
        if !(x.is_finite() && y.is_finite()) {
            return None;
        }
        if let Some(k) = self
            .black_keys()
            .find(|k| k.contains_x(x) && k.contains_y(y, false))
        {
            return Some(k.index);
        }
        self.white_keys()
            .find(|k| k.contains_x(x) && k.contains_y(y, k.index == 0))
            .map(|k| k.index)
    }

    /// Like [`key_at`](Self::key_at) for single-precision trajectory samples.
    pub fn key_at_f32(&self, point: [f32; 3]) -> Option<usize> {
        self.key_at([point[0] as f64, point[1] as f64, point[2] as f64])
    }

    /// Whether `key` would claim `point` on its own footprint, ignoring
    /// every other key except the black keys that occlude a white key.
    pub fn claims(&self, key: usize, point: [f64; 3]) -> bool {
        let k = &self.keys[key];
        let [x, y, _] = point;
        if k.is_black {
            return k.contains_x(x) && k.contains_y(y, false);
        }
        k.contains_x(x)
            && k.contains_y(y, k.index == 0)
            && !self
                .black_keys()
                .any(|b| b.contains_x(x) && b.contains_y(y, false))
    }

    /// Whether a fingertip over `key` is deep enough to count as a press.
    pub fn is_pressed(&self, point: [f64; 3], key: &KeySpec) -> Result<bool> {
        is_pressed(self, point, key, &self.thresholds)
    }
}

/// Press test against explicit thresholds. The point must be over `key`.
pub fn is_pressed(
    geom: &KeyboardGeometry,
    point: [f64; 3],
    key: &KeySpec,
    thresholds: &PressThresholds,
) -> Result<bool> {
    match geom.key_at(point) {
        Some(k) if k == key.index => {}
        other => {
            return Err(Error::Contract(format!(
                "point {point:?} is over key {other:?}, not key {}",
                key.index
            )))
        }
    }
    let limit = if key.is_black {
        thresholds.black_z
    } else {
        thresholds.white_z
    };
    Ok(point[2] <= limit)
}

/// Pitch region 0..8 of a key, using half-open region boundaries.
pub fn region_of(key: usize) -> Result<usize> {
    if key >= NUM_KEYS {
        return Err(Error::Argument(format!("key index {key} out of range 0..88")));
    }
    Ok(REGION_STARTS.iter().rposition(|&s| key >= s).unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom() -> KeyboardGeometry {
        KeyboardGeometry::default()
    }

    #[test]
    fn standard_layout_counts() {
        let g = geom();
        assert_eq!(g.keys.len(), 88);
        assert_eq!(g.white_keys().count(), NUM_WHITE_KEYS);
        assert_eq!(g.black_keys().count(), NUM_BLACK_KEYS);
        assert_eq!(g.white_key_width, 23.5);
        assert!((g.span() - 1222.0).abs() < 1e-9);
    }

    #[test]
    fn colour_pattern() {
        // A0 white, A#0 black, B0 white, C1 white, middle C (39) white, C#4 (40) black
        assert!(!is_black_key(0));
        assert!(is_black_key(1));
        assert!(!is_black_key(2));
        assert!(!is_black_key(3));
        assert!(!is_black_key(39));
        assert!(is_black_key(40));
        assert!(!is_black_key(87));
    }

    #[test]
    fn rejects_non_positive_width() {
        let cfg = KeyboardConfig {
            white_key_width: 0.0,
            ..Default::default()
        };
        assert!(matches!(build_standard_keyboard(&cfg), Err(Error::Config(_))));
        let cfg = KeyboardConfig {
            black_key_width: -3.0,
            ..Default::default()
        };
        assert!(matches!(build_standard_keyboard(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn every_center_maps_to_its_key() {
        let g = geom();
        for k in &g.keys {
            assert_eq!(g.key_at(k.center()), Some(k.index), "key {}", k.index);
        }
    }

    #[test]
    fn off_keyboard_is_none() {
        let g = geom();
        let top = g.keys[87].y_max;
        assert_eq!(g.key_at([50.0, top + 0.01, 0.0]), None);
        assert_eq!(g.key_at([-1.0, 100.0, 0.0]), None);
        assert_eq!(g.key_at([50.0, -0.5, 0.0]), None);
        assert_eq!(g.key_at([f64::NAN, 100.0, 0.0]), None);
    }

    #[test]
    fn shared_boundary_goes_to_lower_key() {
        let g = geom();
        // In front of the black keys every white boundary is shared by two
        // white keys; scan all of them.
        let whites: Vec<&KeySpec> = g.white_keys().collect();
        for pair in whites.windows(2) {
            let y = pair[0].y_max;
            assert_eq!(g.key_at([10.0, y, 0.0]), Some(pair[0].index));
        }
        // Boundaries of black keys: the upper edge belongs to the black key,
        // the lower edge to the white key underneath.
        for b in g.black_keys() {
            let x = b.center()[0];
            assert_eq!(g.key_at([x, b.y_max, 0.0]), Some(b.index));
            assert_eq!(g.key_at([x, b.y_min, 0.0]), Some(b.index - 1));
        }
        assert_eq!(g.key_at([10.0, 0.0, 0.0]), Some(0));
    }

    #[test]
    fn dense_grid_has_unique_owner() {
        let g = geom();
        let mut y = -5.0;
        while y < g.span() + 5.0 {
            let mut x = -2.0;
            while x < 155.0 {
                let p = [x, y, 0.0];
                let owners: Vec<usize> = (0..NUM_KEYS).filter(|&k| g.claims(k, p)).collect();
                assert!(owners.len() <= 1, "{p:?} claimed by {owners:?}");
                assert_eq!(g.key_at(p), owners.first().copied(), "{p:?}");
                x += 2.5;
            }
            y += 0.7;
        }
    }

    #[test]
    fn press_thresholds() {
        let g = geom();
        let white = g.keys[39];
        let black = g.keys[40];
        let [wx, wy, _] = white.center();
        let [bx, by, _] = black.center();
        assert!(g.is_pressed([wx, wy, -2.0], &white).unwrap());
        assert!(!g.is_pressed([wx, wy, 0.0], &white).unwrap());
        assert!(g.is_pressed([wx, wy, -1.19], &white).unwrap());
        assert!(g.is_pressed([bx, by, 10.38], &black).unwrap());
        assert!(!g.is_pressed([bx, by, 10.39], &black).unwrap());
    }

    #[test]
    fn press_on_wrong_key_is_contract_error() {
        let g = geom();
        let p = g.keys[39].center();
        assert!(matches!(g.is_pressed(p, &g.keys[41]), Err(Error::Contract(_))));
    }

    #[test]
    fn regions() {
        assert_eq!(region_of(0).unwrap(), 0);
        assert_eq!(region_of(14).unwrap(), 0);
        assert_eq!(region_of(15).unwrap(), 1);
        assert_eq!(region_of(60).unwrap(), 5);
        assert_eq!(region_of(75).unwrap(), 7);
        assert_eq!(region_of(87).unwrap(), 7);
        assert!(region_of(88).is_err());
        let mut counts = [0usize; NUM_REGIONS];
        for k in 0..NUM_KEYS {
            counts[region_of(k).unwrap()] += 1;
        }
        assert_eq!(counts, [15, 10, 10, 10, 10, 10, 10, 13]);
    }

    #[test]
    fn json_round_trip() {
        let g = geom();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kb.json");
        g.save(&path).unwrap();
        assert_eq!(KeyboardGeometry::load(&path).unwrap(), g);
    }

    proptest::proptest! {
        #[test]
        fn press_is_monotone_in_depth(key in 0usize..88, z in -20.0f64..30.0, dz in 0.0f64..10.0) {
            let g = geom();
            let k = g.keys[key];
            let [x, y, _] = k.center();
            if g.is_pressed([x, y, z], &k).unwrap() {
                proptest::prop_assert!(g.is_pressed([x, y, z - dz], &k).unwrap());
            }
        }
    }
}
