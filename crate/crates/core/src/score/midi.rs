//! Standard MIDI File (format 0/1) reading and writing.
//!
//! Only note on/off and tempo events matter here. Everything else is
//! skipped by length. Format 2 files are read as if they were format 1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::NUM_KEYS;

/// MIDI pitch of key 0 (A0).
pub const LOWEST_PITCH: u8 = 21;
const DEFAULT_TEMPO_US: u32 = 500_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoteEvent {
    /// Seconds from the start of the file.
    pub onset: f64,
    /// Piano key 0..88, i.e. MIDI pitch minus 21.
    pub key: u8,
    pub velocity: u8,
    /// Seconds, always positive.
    pub duration: f64,
}

impl NoteEvent {
    pub fn end(&self) -> f64 {
        self.onset + self.duration
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParsedMidi {
    pub format: u16,
    pub events: Vec<NoteEvent>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy)]
enum Division {
    TicksPerQuarter(u16),
    Smpte { fps: f64, ticks_per_frame: u16 },
}

/// Tick-to-seconds conversion built from every tempo event in the file.
#[derive(Debug, Clone)]
pub struct TempoMap {
    division: Division,
    /// `(tick, seconds at tick, microseconds per quarter from tick on)`
    segments: Vec<(u64, f64, u32)>,
}

impl TempoMap {
    fn new(division: Division, mut changes: Vec<(u64, u32)>) -> Self {
        changes.sort_by_key(|c| c.0);
        let mut segments = vec![(0u64, 0.0f64, DEFAULT_TEMPO_US)];
        for (tick, tempo) in changes {
            let &(t0, s0, us0) = segments.last().unwrap();
            let seconds = s0 + Self::span(division, tick - t0, us0);
            if tick == t0 {
                segments.last_mut().unwrap().2 = tempo;
            } else {
                segments.push((tick, seconds, tempo));
            }
        }
        Self { division, segments }
    }

    fn span(division: Division, ticks: u64, us_per_quarter: u32) -> f64 {
        match division {
            Division::TicksPerQuarter(tpq) => {
                ticks as f64 * us_per_quarter as f64 / (tpq as f64 * 1e6)
            }
            Division::Smpte { fps, ticks_per_frame } => {
                ticks as f64 / (fps * ticks_per_frame as f64)
            }
        }
    }

    pub fn seconds(&self, tick: u64) -> f64 {
        let idx = self.segments.partition_point(|s| s.0 <= tick) - 1;
        let (t0, s0, us) = self.segments[idx];
        s0 + Self::span(self.division, tick - t0, us)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::MidiParse {
            offset: self.pos,
            message: message.into(),
        })
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn u8(&mut self) -> Result<u8> {
        match self.bytes.get(self.pos) {
            Some(&b) => {
                self.pos += 1;
                Ok(b)
            }
            None => self.err("unexpected end of data"),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return self.err(format!("need {n} bytes, {} left", self.remaining()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn varlen(&mut self) -> Result<u32> {
        let mut value = 0u32;
        for _ in 0..4 {
            let b = self.u8()?;
            value = (value << 7) | (b & 0x7f) as u32;
            if b & 0x80 == 0 {
                return Ok(value);
            }
        }
        self.err("variable-length quantity longer than 4 bytes")
    }
}

struct RawNote {
    on_tick: u64,
    off_tick: u64,
    pitch: u8,
    velocity: u8,
}

/// Parses an SMF byte stream into note events sorted by onset.
pub fn parse_midi(bytes: &[u8]) -> Result<ParsedMidi> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != b"MThd" {
        return Err(Error::MidiParse {
            offset: 0,
            message: "missing MThd header".into(),
        });
    }
    let header_len = r.u32()? as usize;
    if header_len < 6 {
        return r.err("header chunk shorter than 6 bytes");
    }
    let format = r.u16()?;
    let ntracks = r.u16()?;
    let raw_division = r.u16()?;
    r.take(header_len - 6)?;
    if format > 2 {
        return Err(Error::MidiParse {
            offset: 8,
            message: format!("unknown SMF format {format}"),
        });
    }
    let division = if raw_division & 0x8000 != 0 {
        let fps = -((raw_division >> 8) as u8 as i8) as f64;
        let fps = if fps == 29.0 { 29.97 } else { fps };
        Division::Smpte {
            fps,
            ticks_per_frame: raw_division & 0xff,
        }
    } else {
        if raw_division == 0 {
            return Err(Error::MidiParse {
                offset: 12,
                message: "division of zero ticks per quarter".into(),
            });
        }
        Division::TicksPerQuarter(raw_division)
    };

    let mut warnings = Vec::new();
    let mut tempos = Vec::new();
    let mut notes = Vec::new();
    let mut tracks_read = 0u16;
    while r.remaining() > 0 && tracks_read < ntracks {
        let chunk_start = r.pos;
        let id = r.take(4)?;
        let len = r.u32()? as usize;
        if r.remaining() < len {
            return Err(Error::MidiParse {
                offset: chunk_start,
                message: format!("chunk declares {len} bytes but only {} remain", r.remaining()),
            });
        }
        if id != b"MTrk" {
            r.take(len)?;
            continue;
        }
        let end = r.pos + len;
        read_track(&mut r, end, tracks_read, &mut tempos, &mut notes, &mut warnings)?;
        tracks_read += 1;
    }
    if tracks_read < ntracks {
        warnings.push(format!("header declares {ntracks} tracks, found {tracks_read}"));
    }

    let map = TempoMap::new(division, tempos);
    let mut events = Vec::with_capacity(notes.len());
    for n in notes {
        if !(LOWEST_PITCH..LOWEST_PITCH + NUM_KEYS as u8).contains(&n.pitch) {
            warnings.push(format!("pitch {} outside the piano range skipped", n.pitch));
            continue;
        }
        let onset = map.seconds(n.on_tick);
        let duration = map.seconds(n.off_tick) - onset;
        if duration <= 0.0 {
            warnings.push(format!("zero-length note at tick {} skipped", n.on_tick));
            continue;
        }
        events.push(NoteEvent {
            onset,
            key: n.pitch - LOWEST_PITCH,
            velocity: n.velocity,
            duration,
        });
    }
    events.sort_by(|a, b| a.onset.total_cmp(&b.onset).then(a.key.cmp(&b.key)));
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(ParsedMidi {
        format,
        events,
        warnings,
    })
}

fn read_track(
    r: &mut Reader<'_>,
    end: usize,
    track: u16,
    tempos: &mut Vec<(u64, u32)>,
    notes: &mut Vec<RawNote>,
    warnings: &mut Vec<String>,
) -> Result<()> {
    // open notes per (channel, pitch), oldest first
    let mut open: std::collections::HashMap<(u8, u8), std::collections::VecDeque<(u64, u8)>> =
        Default::default();
    let mut tick = 0u64;
    let mut running: Option<u8> = None;
    while r.pos < end {
        tick += r.varlen()? as u64;
        let first = r.u8()?;
        let status = if first & 0x80 != 0 {
            first
        } else {
            match running {
                Some(s) => {
                    r.pos -= 1;
                    s
                }
                None => {
                    r.pos -= 1;
                    return r.err("data byte without running status");
                }
            }
        };
        match status {
            0xff => {
                running = None;
                let kind = r.u8()?;
                let len = r.varlen()? as usize;
                let data = r.take(len)?;
                match kind {
                    0x51 if len == 3 => {
                        let us = u32::from_be_bytes([0, data[0], data[1], data[2]]);
                        if us == 0 {
                            return r.err("tempo of zero microseconds per quarter");
                        }
                        tempos.push((tick, us));
                    }
                    0x2f => break,
                    _ => {}
                }
            }
            0xf0 | 0xf7 => {
                running = None;
                let len = r.varlen()? as usize;
                r.take(len)?;
            }
            0x80..=0xef => {
                running = Some(status);
                let channel = status & 0x0f;
                match status & 0xf0 {
                    0x80 | 0x90 => {
                        let pitch = r.u8()? & 0x7f;
                        let velocity = r.u8()? & 0x7f;
                        let slot = open.entry((channel, pitch)).or_default();
                        if status & 0xf0 == 0x90 && velocity > 0 {
                            slot.push_back((tick, velocity));
                        } else if let Some((on_tick, vel)) = slot.pop_front() {
                            notes.push(RawNote {
                                on_tick,
                                off_tick: tick,
                                pitch,
                                velocity: vel,
                            });
                        }
                    }
                    0xc0 | 0xd0 => {
                        r.u8()?;
                    }
                    _ => {
                        r.take(2)?;
                    }
                }
            }
            _ => {
                r.pos -= 1;
                return r.err(format!("unsupported status byte {status:#04x}"));
            }
        }
    }
    if r.pos > end {
        return r.err("event runs past the end of its track chunk");
    }
    r.pos = end;
    let mut dangling: Vec<_> = open
        .into_iter()
        .flat_map(|((_, pitch), q)| q.into_iter().map(move |(t, v)| (t, pitch, v)))
        .collect();
    dangling.sort();
    for (on_tick, pitch, velocity) in dangling {
        warnings.push(format!(
            "track {track}: note {pitch} from tick {on_tick} never released; closed at track end"
        ));
        notes.push(RawNote {
            on_tick,
            off_tick: tick,
            pitch,
            velocity,
        });
    }
    Ok(())
}

fn write_varlen(out: &mut Vec<u8>, mut value: u32) {
    let mut buf = [0u8; 4];
    let mut n = 0;
    loop {
        buf[n] = (value & 0x7f) as u8;
        n += 1;
        value >>= 7;
        if value == 0 {
            break;
        }
    }
    for i in (0..n).rev() {
        out.push(if i > 0 { buf[i] | 0x80 } else { buf[i] });
    }
}

/// Writes a format 0 file at a constant tempo. Times are quantized to the
/// nearest tick; every note keeps at least one tick of duration.
pub fn write_midi(events: &[NoteEvent], ticks_per_quarter: u16, tempo_us: u32) -> Vec<u8> {
    let to_tick = |s: f64| (s * ticks_per_quarter as f64 * 1e6 / tempo_us as f64).round() as u64;
    // (tick, order, status, pitch, velocity); note-offs sort before note-ons
    let mut msgs: Vec<(u64, u8, u8, u8, u8)> = Vec::with_capacity(events.len() * 2);
    for e in events {
        let on = to_tick(e.onset);
        let off = to_tick(e.end()).max(on + 1);
        let pitch = e.key + LOWEST_PITCH;
        msgs.push((on, 1, 0x90, pitch, e.velocity.clamp(1, 127)));
        msgs.push((off, 0, 0x80, pitch, 64));
    }
    msgs.sort();

    let mut track = Vec::new();
    write_varlen(&mut track, 0);
    track.extend_from_slice(&[0xff, 0x51, 0x03]);
    track.extend_from_slice(&tempo_us.to_be_bytes()[1..]);
    let mut last = 0u64;
    for (tick, _, status, pitch, vel) in msgs {
        write_varlen(&mut track, (tick - last) as u32);
        track.extend_from_slice(&[status, pitch, vel]);
        last = tick;
    }
    write_varlen(&mut track, 0);
    track.extend_from_slice(&[0xff, 0x2f, 0x00]);

    let mut out = Vec::with_capacity(track.len() + 22);
    out.extend_from_slice(b"MThd");
    out.extend_from_slice(&6u32.to_be_bytes());
    out.extend_from_slice(&0u16.to_be_bytes());
    out.extend_from_slice(&1u16.to_be_bytes());
    out.extend_from_slice(&ticks_per_quarter.to_be_bytes());
    out.extend_from_slice(b"MTrk");
    out.extend_from_slice(&(track.len() as u32).to_be_bytes());
    out.extend_from_slice(&track);
    out
}
