//! MIDI and fingering ingestion onto the frame grid.

pub mod fingering;
pub mod midi;
pub mod raster;
pub mod window;

pub use fingering::{decode_finger, finger_code, parse_fingering, parse_gestures, FingeringGrid, GestureBoundary};
pub use midi::{parse_midi, write_midi, NoteEvent, ParsedMidi};
pub use raster::{rasterize, FrameGrid, PressMask, Raster};
pub use window::{make_windows, Window, WINDOW_LEN, WINDOW_STRIDE};
