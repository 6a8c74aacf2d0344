//! Binary dataset container.
//!
//! ```text
//! magic "CRDFDATA" | version u32 | split u8 | config_len u32 | config TOML
//! | count u32 | count x (record_len u32 | record)
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use super::{Dataset, RoadGeometry, ScenarioConfig, ScenarioKind, ScenarioSample, Split};
use crate::bev::{LidarPoint, PointCloud, Polyline};
use crate::trajectory::Trajectory;

pub const DATASET_MAGIC: &[u8; 8] = b"CRDFDATA";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("not a dataset file (bad magic)")]
    BadMagic,
    #[error("unsupported dataset version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("dataset truncated while reading {0}")]
    Truncated(&'static str),
    #[error("corrupt dataset: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&u32::try_from(v).expect("length fits u32").to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn points(&mut self, p: &[(f64, f64)]) {
        self.u32(p.len());
        for &(x, y) in p {
            self.f64(x);
            self.f64(y);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], DatasetError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or(DatasetError::Truncated(what))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u8(&mut self, what: &'static str) -> Result<u8, DatasetError> {
        Ok(self.take(1, what)?[0])
    }
    fn u32(&mut self, what: &'static str) -> Result<usize, DatasetError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }
    fn u64(&mut self, what: &'static str) -> Result<u64, DatasetError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn f64(&mut self, what: &'static str) -> Result<f64, DatasetError> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn points(&mut self, what: &'static str) -> Result<Vec<(f64, f64)>, DatasetError> {
        let n = self.u32(what)?;
        if n.saturating_mul(16) > self.buf.len() - self.pos {
            return Err(DatasetError::Truncated(what));
        }
        (0..n).map(|_| Ok((self.f64(what)?, self.f64(what)?))).collect()
    }
}

fn encode_sample(s: &ScenarioSample, w: &mut Writer) {
    w.u8(s.kind.code());
    w.u64(s.seed);
    for v in [s.geometry.arc_start, s.geometry.radius, s.geometry.sweep, s.geometry.side] {
        w.f64(v);
    }
    w.u32(s.cloud.points.len());
    for p in &s.cloud.points {
        for v in [p.x, p.y, p.z, p.intensity] {
            w.f64(v);
        }
    }
    w.points(s.history.waypoints());
    w.points(s.route.waypoints());
    w.points(s.future.waypoints());
}

fn decode_sample(r: &mut Reader<'_>) -> Result<ScenarioSample, DatasetError> {
    let code = r.u8("kind")?;
    let kind = ScenarioKind::from_code(code).ok_or_else(|| DatasetError::Corrupt(format!("scenario kind {code}")))?;
    let seed = r.u64("seed")?;
    let geometry = RoadGeometry {
        arc_start: r.f64("geometry")?,
        radius: r.f64("geometry")?,
        sweep: r.f64("geometry")?,
        side: r.f64("geometry")?,
    };
    let n = r.u32("cloud")?;
    if n.saturating_mul(32) > r.buf.len() - r.pos {
        return Err(DatasetError::Truncated("cloud"));
    }
    let points = (0..n)
        .map(|_| {
            Ok(LidarPoint {
                x: r.f64("cloud")?,
                y: r.f64("cloud")?,
                z: r.f64("cloud")?,
                intensity: r.f64("cloud")?,
            })
        })
        .collect::<Result<Vec<_>, DatasetError>>()?;
    let corrupt = |e: &dyn std::fmt::Display| DatasetError::Corrupt(e.to_string());
    let history = Polyline::new(r.points("history")?).map_err(|e| corrupt(&e))?;
    let route = Polyline::new(r.points("route")?).map_err(|e| corrupt(&e))?;
    let future = Trajectory::new(r.points("future")?).map_err(|e| corrupt(&e))?;
    Ok(ScenarioSample {
        kind,
        seed,
        geometry,
        cloud: PointCloud { points },
        history,
        route,
        future,
    })
}

pub fn encode_dataset(ds: &Dataset) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(DATASET_MAGIC);
    w.0.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    w.u8(match ds.split {
        Split::Train => 0,
        Split::Test => 1,
    });
    let config = toml::to_string(&ds.config).expect("config serializes");
    w.u32(config.len());
    w.0.extend_from_slice(config.as_bytes());
    w.u32(ds.samples.len());
    for s in &ds.samples {
        let mut rec = Writer(Vec::new());
        encode_sample(s, &mut rec);
        w.u32(rec.0.len());
        w.0.extend_from_slice(&rec.0);
    }
    w.0
}

pub fn decode_dataset(buf: &[u8]) -> Result<Dataset, DatasetError> {
    let mut r = Reader { buf, pos: 0 };
    if buf.len() < DATASET_MAGIC.len() || &buf[..8] != DATASET_MAGIC {
        return Err(DatasetError::BadMagic);
    }
    r.pos = 8;
    let version = u32::from_le_bytes(r.take(4, "header")?.try_into().unwrap());
    if version != DATASET_VERSION {
        return Err(DatasetError::Version {
            found: version,
            expected: DATASET_VERSION,
        });
    }
    let split = match r.u8("header")? {
        0 => Split::Train,
        1 => Split::Test,
        other => return Err(DatasetError::Corrupt(format!("split tag {other}"))),
    };
    let len = r.u32("header")?;
    let text = std::str::from_utf8(r.take(len, "config")?).map_err(|e| DatasetError::Corrupt(e.to_string()))?;
    let config: ScenarioConfig = toml::from_str(text).map_err(|e| DatasetError::Corrupt(e.to_string()))?;
    let count = r.u32("header")?;
    if count == 0 {
        return Err(DatasetError::Corrupt("dataset has no samples".into()));
    }
    let mut samples = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32("record length")?;
        let body = r.take(len, "record")?;
        let mut rr = Reader { buf: body, pos: 0 };
        let sample = decode_sample(&mut rr)?;
        if rr.pos != body.len() {
            return Err(DatasetError::Corrupt("record has trailing bytes".into()));
        }
        samples.push(sample);
    }
    if r.pos != buf.len() {
        return Err(DatasetError::Corrupt("trailing bytes after last record".into()));
    }
    Ok(Dataset { split, config, samples })
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<(), DatasetError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode_dataset(ds))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset, DatasetError> {
    decode_dataset(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{make_dataset, KindCounts};
    use sha2::{Digest, Sha256};

    fn small() -> Dataset {
        make_dataset(&KindCounts::uniform(1), Split::Test, &ScenarioConfig::default(), 11).unwrap()
    }

    #[test]
    fn one_sample_round_trip() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        save_dataset(&ds, &path).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), ds);
    }

    #[test]
    fn distinct_errors() {
        let bytes = encode_dataset(&small());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_dataset(&bad), Err(DatasetError::BadMagic)));
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(decode_dataset(&bad), Err(DatasetError::Version { found: 9, .. })));
        for cut in [13, 40, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(decode_dataset(&bytes[..cut]), Err(DatasetError::Truncated(_))), "cut {cut}");
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode_dataset(&long), Err(DatasetError::Corrupt(_))));
    }

    #[test]
    fn full_dataset_checksum_round_trip() {
        let ds = make_dataset(&KindCounts::uniform(512), Split::Train, &ScenarioConfig::default(), 2024).unwrap();
        let bytes = encode_dataset(&ds);
        let back = decode_dataset(&bytes).unwrap();
        let d1 = Sha256::digest(&bytes);
        let d2 = Sha256::digest(encode_dataset(&back));
        assert_eq!(d1, d2);
        let bits = |d: &Dataset| -> Vec<u64> {
            d.samples.iter().flat_map(|s| s.future.to_flat()).map(f64::to_bits).collect()
        };
        assert_eq!(bits(&ds), bits(&back));
    }
}
