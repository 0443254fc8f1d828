//! Analysis archives and their on-disk format.
//!
//! File layout: the 8-byte magic `EMUARCH\0`, a little-endian `u64` header
//! length, a UTF-8 JSON header, then `f32` little-endian values in
//! (time, variable, level, lat, lon) order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::layout::Layout;
use super::state::{FieldState, Space};
use crate::error::{Error, Result};
use crate::grid::GridDims;
use crate::time::{self, DateRange, Instant};

const MAGIC: &[u8; 8] = b"EMUARCH\0";
pub const ARCHIVE_FORMAT_VERSION: u32 = 1;

/// A gap-free six-hourly sequence of physical-space states.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisArchive {
    system: String,
    layout: Layout,
    grid: GridDims,
    start: Instant,
    n_times: usize,
    seed: u64,
    spec_digest: String,
    data: Vec<f32>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    system: String,
    n_times: usize,
    n_channels: usize,
    grid: GridDims,
    layout: Layout,
    start: Instant,
    end: Instant,
    cadence_hours: i64,
    seed: u64,
    spec_digest: String,
}

impl AnalysisArchive {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn from_parts(
        system: String,
        layout: Layout,
        grid: GridDims,
        start: Instant,
        n_times: usize,
        seed: u64,
        spec_digest: String,
        data: Vec<f32>,
    ) -> Self {
        debug_assert_eq!(data.len(), n_times * layout.n_channels() * grid.nlat * grid.nlon);
        Self {
            system,
            layout,
            grid,
            start,
            n_times,
            seed,
            spec_digest,
            data,
        }
    }

    /// Build an archive from explicit physical states (mainly for tests and
    /// externally produced data). States must be on a gap-free 6 h cadence.
    pub fn from_states(system: &str, layout: Layout, grid: GridDims, states: &[FieldState]) -> Result<Self> {
        let first = states
            .first()
            .ok_or_else(|| Error::InvalidParameter("archive needs at least one state".into()))?;
        for (k, s) in states.iter().enumerate() {
            s.expect_space(Space::Physical)?;
            if s.n_channels != layout.n_channels() || s.nlat != grid.nlat || s.nlon != grid.nlon {
                return Err(Error::ShapeMismatch(format!("state {k} does not match archive layout")));
            }
            if s.time != first.time + time::step() * k as i32 {
                return Err(Error::InvalidParameter(format!(
                    "state {k} at {} breaks the 6-hour cadence",
                    s.time
                )));
            }
        }
        let data = states
            .iter()
            .flat_map(|s| s.values.iter().map(|&v| v as f32))
            .collect();
        Ok(Self::from_parts(
            system.into(),
            layout,
            grid,
            first.time,
            states.len(),
            0,
            String::new(),
            data,
        ))
    }

    pub fn system(&self) -> &str {
        &self.system
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn grid(&self) -> GridDims {
        self.grid
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn spec_digest(&self) -> &str {
        &self.spec_digest
    }

    pub fn n_times(&self) -> usize {
        self.n_times
    }

    pub fn n_channels(&self) -> usize {
        self.layout.n_channels()
    }

    fn state_len(&self) -> usize {
        self.n_channels() * self.grid.nlat * self.grid.nlon
    }

    pub fn start(&self) -> Instant {
        self.start
    }

    pub fn range(&self) -> DateRange {
        DateRange {
            start: self.start,
            end: self.time(self.n_times),
        }
    }

    pub fn time(&self, index: usize) -> Instant {
        self.start + time::step() * index as i32
    }

    pub fn raw(&self) -> &[f32] {
        &self.data
    }

    /// Index of timestamp `t`, or an out-of-range error naming it.
    pub fn index_of(&self, t: Instant) -> Result<usize> {
        let secs = (t - self.start).num_seconds();
        let step = time::STEP_HOURS * 3600;
        if secs < 0 || secs % step != 0 || (secs / step) as usize >= self.n_times {
            return Err(Error::OutOfRange(format!(
                "{t} is not in archive {} ({} .. {})",
                self.system,
                self.start,
                self.time(self.n_times)
            )));
        }
        Ok((secs / step) as usize)
    }

    /// Raw single-precision values of channel `c` at time index `t`.
    pub fn channel_raw(&self, t: usize, c: usize) -> &[f32] {
        let n = self.grid.nlat * self.grid.nlon;
        let off = t * self.state_len() + c * n;
        &self.data[off..off + n]
    }

    pub fn state(&self, index: usize) -> FieldState {
        let len = self.state_len();
        FieldState {
            values: self.data[index * len..(index + 1) * len]
                .iter()
                .map(|&v| v as f64)
                .collect(),
            n_channels: self.n_channels(),
            nlat: self.grid.nlat,
            nlon: self.grid.nlon,
            time: self.time(index),
            space: Space::Physical,
        }
    }

    pub fn state_at(&self, t: Instant) -> Result<FieldState> {
        Ok(self.state(self.index_of(t)?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            format_version: ARCHIVE_FORMAT_VERSION,
            system: self.system.clone(),
            n_times: self.n_times,
            n_channels: self.n_channels(),
            grid: self.grid,
            layout: self.layout.clone(),
            start: self.start,
            end: self.time(self.n_times),
            cadence_hours: time::STEP_HOURS,
            seed: self.seed,
            spec_digest: self.spec_digest.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&json).map_err(io)?;
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf).map_err(io)?;
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| Error::format(path, "file too short for magic bytes"))?;
        if &magic != MAGIC {
            return Err(Error::format(path, "bad magic bytes (not an archive file)"));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)
            .map_err(|_| Error::format(path, "truncated header length"))?;
        let len = u64::from_le_bytes(len) as usize;
        if len > 64 << 20 {
            return Err(Error::format(path, "implausible header length"));
        }
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)
            .map_err(|_| Error::format(path, "truncated header"))?;
        let header: Header = serde_json::from_slice(&json)
            .map_err(|e| Error::format(path, format!("bad header: {e}")))?;
        if header.format_version != ARCHIVE_FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: header.format_version,
                expected: ARCHIVE_FORMAT_VERSION,
            });
        }
        if header.n_channels != header.layout.n_channels() {
            return Err(Error::format(path, "channel count disagrees with layout"));
        }
        let expected = header.n_times * header.n_channels * header.grid.nlat * header.grid.nlon;
        let mut bytes = Vec::with_capacity(expected * 4);
        r.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
        if bytes.len() != expected * 4 {
            return Err(Error::format(
                path,
                format!("payload has {} bytes, expected {}", bytes.len(), expected * 4),
            ));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self::from_parts(
            header.system,
            header.layout,
            header.grid,
            header.start,
            header.n_times,
            header.seed,
            header.spec_digest,
            data,
        ))
    }
}
