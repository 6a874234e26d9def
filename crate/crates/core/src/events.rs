//! Event-stream ingestion, stacking into frame tensors, annotation I/O, and
//! a synthetic moving-object event generator for desk-scale training.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One camera event: timestamp in microseconds, pixel position, polarity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Event {
    pub t: u64,
    pub x: u16,
    pub y: u16,
    pub p: u8,
}

/// A time-ordered event sequence with its sensor geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct EventStream {
    pub width: u16,
    pub height: u16,
    pub events: Vec<Event>,
    /// How many records arrived out of order and were repaired by the
    /// stable sort at load time.
    pub order_repairs: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EventFormat {
    Csv,
    Packed,
}

impl std::str::FromStr for EventFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(EventFormat::Csv),
            "packed" => Ok(EventFormat::Packed),
            other => Err(Error::invalid("event format", format!("unknown format '{other}'"))),
        }
    }
}

const PACKED_MAGIC: &[u8; 4] = b"EVS1";

fn validate_and_sort(mut events: Vec<Event>, width: u16, height: u16) -> Result<EventStream> {
    for e in &events {
        if e.x >= width || e.y >= height {
            return Err(Error::Validation(format!(
                "event at t={} has position ({}, {}) outside sensor {}x{}",
                e.t, e.x, e.y, width, height
            )));
        }
        if e.p > 1 {
            return Err(Error::Validation(format!(
                "event at t={} has polarity {} (must be 0 or 1)",
                e.t, e.p
            )));
        }
    }
    let order_repairs = events.windows(2).filter(|w| w[1].t < w[0].t).count();
    if order_repairs > 0 {
        events.sort_by_key(|e| e.t);
    }
    Ok(EventStream { width, height, events, order_repairs })
}

/// Load an event file. CSV needs the sensor geometry declared by the caller;
/// the packed format carries its own header, which must agree with a declared
/// geometry if one is given.
pub fn load_events(
    path: impl AsRef<Path>,
    format: EventFormat,
    geometry: Option<(u16, u16)>,
) -> Result<EventStream> {
    let path = path.as_ref();
    match format {
        EventFormat::Csv => {
            let (width, height) = geometry.ok_or_else(|| {
                Error::invalid("load_events", "CSV input needs a declared sensor geometry")
            })?;
            let file = fs::File::open(path)?;
            let mut events = Vec::new();
            for (lineno, line) in BufReader::new(file).lines().enumerate() {
                let line = line?;
                let s = line.trim();
                if s.is_empty() {
                    continue;
                }
                let parse = |field: &str, what: &str| -> Result<u64> {
                    field.trim().parse::<u64>().map_err(|e| Error::Parse {
                        path: path.to_path_buf(),
                        line: lineno + 1,
                        msg: format!("bad {what} '{}': {e}", field.trim()),
                    })
                };
                let mut it = s.split(',');
                let mut next = |what: &str| -> Result<u64> {
                    it.next()
                        .ok_or_else(|| Error::Parse {
                            path: path.to_path_buf(),
                            line: lineno + 1,
                            msg: format!("missing {what} field"),
                        })
                        .and_then(|f| parse(f, what))
                };
                let (t, x, y, p) = (next("timestamp")?, next("x")?, next("y")?, next("polarity")?);
                if it.next().is_some() {
                    return Err(Error::Parse {
                        path: path.to_path_buf(),
                        line: lineno + 1,
                        msg: "more than four fields".into(),
                    });
                }
                let narrow = |v: u64, what: &str| -> Result<u16> {
                    u16::try_from(v).map_err(|_| Error::Parse {
                        path: path.to_path_buf(),
                        line: lineno + 1,
                        msg: format!("{what} {v} exceeds u16"),
                    })
                };
                events.push(Event {
                    t,
                    x: narrow(x, "x")?,
                    y: narrow(y, "y")?,
                    p: p.min(255) as u8,
                });
            }
            validate_and_sort(events, width, height)
        }
        EventFormat::Packed => {
            let mut bytes = Vec::new();
            fs::File::open(path)?.read_to_end(&mut bytes)?;
            let header_err = |msg: &str| Error::Parse {
                path: path.to_path_buf(),
                line: 0,
                msg: msg.into(),
            };
            if bytes.len() < 12 || &bytes[..4] != PACKED_MAGIC {
                return Err(header_err("missing EVS1 header"));
            }
            let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
            let width = u16::from_le_bytes(bytes[8..10].try_into().unwrap());
            let height = u16::from_le_bytes(bytes[10..12].try_into().unwrap());
            if let Some((gw, gh)) = geometry {
                if (gw, gh) != (width, height) {
                    return Err(Error::Validation(format!(
                        "declared geometry {gw}x{gh} disagrees with file header {width}x{height}"
                    )));
                }
            }
            let record = 8 + 2 + 2 + 1;
            if bytes.len() != 12 + count * record {
                return Err(header_err(&format!(
                    "expected {} bytes for {count} records, found {}",
                    12 + count * record,
                    bytes.len()
                )));
            }
            let mut events = Vec::with_capacity(count);
            for i in 0..count {
                let o = 12 + i * record;
                events.push(Event {
                    t: u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap()),
                    x: u16::from_le_bytes(bytes[o + 8..o + 10].try_into().unwrap()),
                    y: u16::from_le_bytes(bytes[o + 10..o + 12].try_into().unwrap()),
                    p: bytes[o + 12],
                });
            }
            validate_and_sort(events, width, height)
        }
    }
}

/// Write the packed representation (EVS1 header + little-endian records).
pub fn save_events_packed(path: impl AsRef<Path>, stream: &EventStream) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(PACKED_MAGIC)?;
    w.write_all(&u32::try_from(stream.events.len()).map_err(|_| {
        Error::invalid("save_events", "more than u32::MAX events")
    })?.to_le_bytes())?;
    w.write_all(&stream.width.to_le_bytes())?;
    w.write_all(&stream.height.to_le_bytes())?;
    for e in &stream.events {
        w.write_all(&e.t.to_le_bytes())?;
        w.write_all(&e.x.to_le_bytes())?;
        w.write_all(&e.y.to_le_bytes())?;
        w.write_all(&[e.p])?;
    }
    w.flush()?;
    Ok(())
}

/// Write the CSV representation, one `t_us,x,y,p` record per line.
pub fn save_events_csv(path: impl AsRef<Path>, stream: &EventStream) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for e in &stream.events {
        writeln!(w, "{},{},{},{}", e.t, e.x, e.y, e.p)?;
    }
    w.flush()?;
    Ok(())
}

/// Per-bin, per-polarity event counts over `bins` temporal bins: channel
/// `2*bin + p`, spatial extents `h` x `w`.
#[derive(Clone, Debug, PartialEq)]
pub struct EventFrame {
    pub counts: Vec<u32>,
    pub bins: usize,
    pub h: usize,
    pub w: usize,
    /// Events outside the stacking window (dropped, not lost silently).
    pub dropped: usize,
}

impl EventFrame {
    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }

    /// Clip counts and scale into [0, 1] for the model stem.
    pub fn to_tensor<T: Scalar>(&self, clip: u32) -> Tensor<T> {
        let c = clip.max(1);
        let data: Vec<T> = self
            .counts
            .iter()
            .map(|&v| T::from_f64(v.min(c) as f64 / c as f64))
            .collect();
        Tensor::new(data, &[2 * self.bins, self.h, self.w])
    }
}

/// Stack an event window into per-bin polarity count planes. An event at
/// timestamp `t` lands in bin `floor(bins * (t - t0) / (t1 - t0))`; events
/// outside `[t0, t1)` are dropped and counted. Sensor coordinates are scaled
/// to the target extents when they differ.
pub fn stack_events(
    stream: &EventStream,
    window: (u64, u64),
    bins: usize,
    h: usize,
    w: usize,
) -> Result<EventFrame> {
    let (t0, t1) = window;
    if t1 <= t0 || bins == 0 || h == 0 || w == 0 {
        return Err(Error::invalid(
            "stack_events",
            format!("need t1 > t0 and bins, h, w >= 1; got window [{t0}, {t1}), bins {bins}, {h}x{w}"),
        ));
    }
    let mut counts = vec![0u32; 2 * bins * h * w];
    let mut dropped = 0usize;
    let span = (t1 - t0) as u128;
    for e in &stream.events {
        if e.t < t0 || e.t >= t1 {
            dropped += 1;
            continue;
        }
        let bin = ((bins as u128 * (e.t - t0) as u128) / span) as usize;
        let yy = (e.y as usize * h) / stream.height as usize;
        let xx = (e.x as usize * w) / stream.width as usize;
        let ch = 2 * bin + e.p as usize;
        counts[(ch * h + yy) * w + xx] = counts[(ch * h + yy) * w + xx].saturating_add(1);
    }
    Ok(EventFrame { counts, bins, h, w, dropped })
}

/// Batch event frames into a `[N, 2B, H, W]` model input.
pub fn frames_to_batch<T: Scalar>(frames: &[EventFrame], clip: u32) -> Result<Tensor<T>> {
    if frames.is_empty() {
        return Err(Error::invalid("frames_to_batch", "empty batch"));
    }
    let (b, h, w) = (frames[0].bins, frames[0].h, frames[0].w);
    if frames.iter().any(|f| (f.bins, f.h, f.w) != (b, h, w)) {
        return Err(Error::invalid("frames_to_batch", "frames disagree in shape"));
    }
    let c = clip.max(1);
    let mut data = Vec::with_capacity(frames.len() * 2 * b * h * w);
    for f in frames {
        data.extend(f.counts.iter().map(|&v| T::from_f64(v.min(c) as f64 / c as f64)));
    }
    Ok(Tensor::new(data, &[frames.len(), 2 * b, h, w]))
}

// ---- annotations ------------------------------------------------------------

/// Axis-aligned box with a class index, XYXY pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Annotation {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub cls: usize,
}

fn frame_id_order(a: &str, b: &str) -> std::cmp::Ordering {
    match (a.parse::<u64>(), b.parse::<u64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y),
        (Ok(_), Err(_)) => std::cmp::Ordering::Less,
        (Err(_), Ok(_)) => std::cmp::Ordering::Greater,
        (Err(_), Err(_)) => a.cmp(b),
    }
}

/// Read a JSON object mapping frame id to an array of `[x1, y1, x2, y2, cls]`
/// records. Frames come back sorted by numeric id where possible.
pub fn load_annotations(path: impl AsRef<Path>) -> Result<Vec<(String, Vec<Annotation>)>> {
    let text = fs::read_to_string(path.as_ref())?;
    let raw: BTreeMap<String, Vec<Vec<f64>>> =
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.as_ref().to_path_buf(),
            line: e.line(),
            msg: e.to_string(),
        })?;
    let mut out = Vec::with_capacity(raw.len());
    for (frame, records) in raw {
        let mut anns = Vec::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if r.len() != 5 {
                return Err(Error::Validation(format!(
                    "frame {frame} record {i}: expected 5 values, found {}",
                    r.len()
                )));
            }
            let (x1, y1, x2, y2, cls) = (r[0], r[1], r[2], r[3], r[4]);
            if !(x1 < x2) || !(y1 < y2) {
                return Err(Error::Validation(format!(
                    "frame {frame} record {i}: degenerate box [{x1}, {y1}, {x2}, {y2}]"
                )));
            }
            if cls < 0.0 || cls.fract() != 0.0 {
                return Err(Error::Validation(format!(
                    "frame {frame} record {i}: class {cls} is not a nonnegative integer"
                )));
            }
            anns.push(Annotation { x1, y1, x2, y2, cls: cls as usize });
        }
        out.push((frame, anns));
    }
    out.sort_by(|a, b| frame_id_order(&a.0, &b.0));
    Ok(out)
}

pub fn save_annotations(
    path: impl AsRef<Path>,
    frames: &[(String, Vec<Annotation>)],
) -> Result<()> {
    let mut map = serde_json::Map::new();
    for (frame, anns) in frames {
        let records: Vec<serde_json::Value> = anns
            .iter()
            .map(|a| serde_json::json!([a.x1, a.y1, a.x2, a.y2, a.cls]))
            .collect();
        map.insert(frame.clone(), serde_json::Value::Array(records));
    }
    fs::write(path, serde_json::to_string_pretty(&serde_json::Value::Object(map))?)?;
    Ok(())
}

// ---- synthetic scenes --------------------------------------------------------

/// Synthetic moving-object scene settings; generation is deterministic per seed.
#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub width: u16,
    pub height: u16,
    /// Inclusive object count range.
    pub objects: (usize, usize),
    /// How many shape archetypes to draw from: 1 = discs, 2 = +rectangles,
    /// 3 = +rings. Class index equals the archetype.
    pub classes: usize,
    /// Speed magnitude range in pixels per millisecond.
    pub speed: (f64, f64),
    /// Expected events per edge pixel per pixel of normal travel.
    pub edge_rate: f64,
    /// Expected background noise events per pixel per millisecond.
    pub noise_rate: f64,
    pub duration_ms: f64,
    /// Number of labeled frames (ground truth sampled at frame centers).
    pub frames: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            width: 64,
            height: 64,
            objects: (1, 3),
            classes: 3,
            speed: (0.3, 1.2),
            edge_rate: 2.0,
            noise_rate: 0.0005,
            duration_ms: 50.0,
            frames: 5,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Disc { r: f64 },
    Rect { ax: f64, ay: f64 },
    Ring { ro: f64, ri: f64 },
}

impl Shape {
    fn class(&self) -> usize {
        match self {
            Shape::Disc { .. } => 0,
            Shape::Rect { .. } => 1,
            Shape::Ring { .. } => 2,
        }
    }

    fn half_extents(&self) -> (f64, f64) {
        match *self {
            Shape::Disc { r } => (r, r),
            Shape::Rect { ax, ay } => (ax, ay),
            Shape::Ring { ro, .. } => (ro, ro),
        }
    }

    /// Outward edge normal at offset (dx, dy) from the center, if the offset
    /// lies on an intensity edge (within half a pixel of the contour).
    fn edge_normal(&self, dx: f64, dy: f64) -> Option<(f64, f64)> {
        let band = 0.5;
        match *self {
            Shape::Disc { r } => {
                let d = (dx * dx + dy * dy).sqrt();
                ((d - r).abs() <= band && d > 1e-9).then(|| (dx / d, dy / d))
            }
            Shape::Ring { ro, ri } => {
                let d = (dx * dx + dy * dy).sqrt();
                if d <= 1e-9 {
                    return None;
                }
                if (d - ro).abs() <= band {
                    Some((dx / d, dy / d))
                } else if (d - ri).abs() <= band {
                    Some((-dx / d, -dy / d))
                } else {
                    None
                }
            }
            Shape::Rect { ax, ay } => {
                if dx.abs() > ax + band || dy.abs() > ay + band {
                    return None;
                }
                if (dx.abs() - ax).abs() <= band && dy.abs() <= ay + band {
                    Some((dx.signum(), 0.0))
                } else if (dy.abs() - ay).abs() <= band && dx.abs() <= ax + band {
                    Some((0.0, dy.signum()))
                } else {
                    None
                }
            }
        }
    }
}

struct MovingObject {
    shape: Shape,
    cx: f64,
    cy: f64,
    vx: f64,
    vy: f64,
}

/// Generate a scene: shapes moving at constant velocity emit events along
/// their intensity edges at a rate proportional to the normal-direction speed
/// (polarity from the sign of the normal motion), plus uniform background
/// noise. Ground truth is each shape's bounding box at the labeled frames.
pub fn synth_generate(cfg: &SynthConfig) -> Result<(EventStream, Vec<(String, Vec<Annotation>)>)> {
    if cfg.objects.0 > cfg.objects.1
        || !(1..=3).contains(&cfg.classes)
        || cfg.speed.0 > cfg.speed.1
        || cfg.speed.0 < 0.0
        || cfg.duration_ms <= 0.0
        || cfg.frames == 0
        || cfg.width == 0
        || cfg.height == 0
    {
        return Err(Error::Config("invalid synthetic scene configuration".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (w, h) = (cfg.width as f64, cfg.height as f64);

    let n_obj = rng.gen_range(cfg.objects.0..=cfg.objects.1);
    let mut objects = Vec::with_capacity(n_obj);
    for _ in 0..n_obj {
        let class = rng.gen_range(0..cfg.classes);
        let scale = w.min(h);
        let shape = match class {
            0 => Shape::Disc { r: rng.gen_range(0.08..0.18) * scale },
            1 => Shape::Rect {
                ax: rng.gen_range(0.07..0.16) * scale,
                ay: rng.gen_range(0.07..0.16) * scale,
            },
            _ => {
                let ro = rng.gen_range(0.09..0.18) * scale;
                Shape::Ring { ro, ri: 0.6 * ro }
            }
        };
        let (hx, hy) = shape.half_extents();
        let cx = rng.gen_range(hx + 1.0..(w - hx - 1.0).max(hx + 1.0 + 1e-9));
        let cy = rng.gen_range(hy + 1.0..(h - hy - 1.0).max(hy + 1.0 + 1e-9));
        let speed = rng.gen_range(cfg.speed.0..=cfg.speed.1);
        let dir = rng.gen_range(0.0..std::f64::consts::TAU);
        objects.push(MovingObject {
            shape,
            cx,
            cy,
            vx: speed * dir.cos(),
            vy: speed * dir.sin(),
        });
    }

    let mut events = Vec::new();
    let max_speed = objects
        .iter()
        .map(|o| (o.vx * o.vx + o.vy * o.vy).sqrt())
        .fold(0.0f64, f64::max);
    // advance at most half a pixel per substep so edges emit smoothly
    let dt = if max_speed > 0.0 { (0.5 / max_speed).min(1.0) } else { cfg.duration_ms };
    let steps = (cfg.duration_ms / dt).ceil() as usize;
    let dt = cfg.duration_ms / steps as f64;
    let end_us = (cfg.duration_ms * 1000.0) as u64;

    for step in 0..steps {
        let tau = step as f64 * dt;
        for o in &objects {
            let speed2 = o.vx * o.vx + o.vy * o.vy;
            if speed2 == 0.0 || cfg.edge_rate <= 0.0 {
                continue; // a static edge sees no brightness change
            }
            let (cx, cy) = (o.cx + o.vx * tau, o.cy + o.vy * tau);
            let (hx, hy) = o.shape.half_extents();
            let x_lo = ((cx - hx - 1.0).floor().max(0.0)) as i64;
            let x_hi = ((cx + hx + 1.0).ceil().min(w - 1.0)) as i64;
            let y_lo = ((cy - hy - 1.0).floor().max(0.0)) as i64;
            let y_hi = ((cy + hy + 1.0).ceil().min(h - 1.0)) as i64;
            for py in y_lo..=y_hi {
                for px in x_lo..=x_hi {
                    let Some((nx, ny)) = o.shape.edge_normal(px as f64 - cx, py as f64 - cy)
                    else {
                        continue;
                    };
                    let vn = o.vx * nx + o.vy * ny;
                    let lambda = cfg.edge_rate * vn.abs() * dt;
                    if lambda <= 0.0 {
                        continue;
                    }
                    let count = Poisson::new(lambda).expect("lambda > 0").sample(&mut rng) as usize;
                    for _ in 0..count {
                        let t_us = (((tau + rng.gen::<f64>() * dt) * 1000.0) as u64).min(end_us - 1);
                        events.push(Event {
                            t: t_us,
                            x: px as u16,
                            y: py as u16,
                            p: (vn > 0.0) as u8,
                        });
                    }
                }
            }
        }
    }

    if cfg.noise_rate > 0.0 {
        let lambda = cfg.noise_rate * w * h * cfg.duration_ms;
        let count = Poisson::new(lambda).expect("lambda > 0").sample(&mut rng) as usize;
        for _ in 0..count {
            events.push(Event {
                t: rng.gen_range(0..end_us),
                x: rng.gen_range(0..cfg.width),
                y: rng.gen_range(0..cfg.height),
                p: rng.gen_range(0..=1),
            });
        }
    }

    events.sort_by_key(|e| e.t);
    let stream = EventStream {
        width: cfg.width,
        height: cfg.height,
        events,
        order_repairs: 0,
    };

    let mut truth = Vec::with_capacity(cfg.frames);
    for f in 0..cfg.frames {
        let tau = (f as f64 + 0.5) * cfg.duration_ms / cfg.frames as f64;
        let mut anns = Vec::new();
        for o in &objects {
            let (cx, cy) = (o.cx + o.vx * tau, o.cy + o.vy * tau);
            let (hx, hy) = o.shape.half_extents();
            let (x1, y1) = ((cx - hx).max(0.0), (cy - hy).max(0.0));
            let (x2, y2) = ((cx + hx).min(w), (cy + hy).min(h));
            if x1 < x2 && y1 < y2 {
                anns.push(Annotation { x1, y1, x2, y2, cls: o.shape.class() });
            }
        }
        truth.push((f.to_string(), anns));
    }
    Ok((stream, truth))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().expect("tempdir")
    }

    #[test]
    fn csv_parsing_golden_and_errors() {
        let dir = tmp();
        let p = dir.path().join("e.csv");

        fs::write(&p, "").unwrap();
        let s = load_events(&p, EventFormat::Csv, Some((16, 16))).unwrap();
        assert!(s.events.is_empty());

        fs::write(&p, "5,3,2,1\n").unwrap();
        let s = load_events(&p, EventFormat::Csv, Some((16, 16))).unwrap();
        assert_eq!(s.events, vec![Event { t: 5, x: 3, y: 2, p: 1 }]);

        fs::write(&p, "5,3,2\n").unwrap();
        match load_events(&p, EventFormat::Csv, Some((16, 16))) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
        fs::write(&p, "1,2,3,0\nx,2,3,0\n").unwrap();
        match load_events(&p, EventFormat::Csv, Some((16, 16))) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }

        fs::write(&p, "1,99,3,0\n").unwrap();
        assert!(matches!(
            load_events(&p, EventFormat::Csv, Some((16, 16))),
            Err(Error::Validation(_))
        ));
        fs::write(&p, "1,3,3,2\n").unwrap();
        assert!(matches!(
            load_events(&p, EventFormat::Csv, Some((16, 16))),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn unsorted_input_is_repaired_and_counted() {
        let dir = tmp();
        let p = dir.path().join("e.csv");
        fs::write(&p, "10,0,0,0\n5,1,1,1\n7,2,2,0\n").unwrap();
        let s = load_events(&p, EventFormat::Csv, Some((4, 4))).unwrap();
        assert!(s.order_repairs > 0);
        let ts: Vec<u64> = s.events.iter().map(|e| e.t).collect();
        assert_eq!(ts, vec![5, 7, 10]);
    }

    #[test]
    fn packed_round_trip_10k_events() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut events: Vec<Event> = (0..10_000)
            .map(|_| Event {
                t: rng.gen_range(0..1_000_000),
                x: rng.gen_range(0..1280),
                y: rng.gen_range(0..720),
                p: rng.gen_range(0..=1),
            })
            .collect();
        events.sort_by_key(|e| e.t);
        let stream =
            EventStream { width: 1280, height: 720, events, order_repairs: 0 };
        let dir = tmp();
        let p = dir.path().join("e.evs");
        save_events_packed(&p, &stream).unwrap();
        let back = load_events(&p, EventFormat::Packed, None).unwrap();
        assert_eq!(back, stream);
        // declared geometry must agree with the header
        assert!(matches!(
            load_events(&p, EventFormat::Packed, Some((640, 480))),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn stacking_counts_bins_and_drops() {
        let events = vec![
            Event { t: 100, x: 3, y: 2, p: 1 },
            Event { t: 200, x: 3, y: 2, p: 1 }, // same cell, same bin -> 2
            Event { t: 499, x: 1, y: 1, p: 0 }, // bin 0
            Event { t: 500, x: 1, y: 1, p: 0 }, // bin 1
            Event { t: 1500, x: 0, y: 0, p: 0 }, // outside window
        ];
        let s = EventStream { width: 8, height: 8, events, order_repairs: 0 };
        let f = stack_events(&s, (0, 1000), 2, 8, 8).unwrap();
        assert_eq!(f.dropped, 1);
        assert_eq!(f.total(), 4);
        let at = |ch: usize, y: usize, x: usize| f.counts[(ch * 8 + y) * 8 + x];
        assert_eq!(at(1, 2, 3), 2); // bin 0, polarity 1
        assert_eq!(at(0, 1, 1), 1); // bin 0, polarity 0
        assert_eq!(at(2, 1, 1), 1); // bin 1, polarity 0

        assert!(stack_events(&s, (1000, 1000), 2, 8, 8).is_err());
    }

    #[test]
    fn stacking_conserves_count_and_translates() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let events: Vec<Event> = (0..10_000)
            .map(|_| Event {
                t: rng.gen_range(0..2000),
                x: rng.gen_range(0..30),
                y: rng.gen_range(0..30),
                p: rng.gen_range(0..=1),
            })
            .collect();
        let mut sorted = events.clone();
        sorted.sort_by_key(|e| e.t);
        let s = EventStream { width: 32, height: 32, events: sorted.clone(), order_repairs: 0 };
        let f = stack_events(&s, (0, 1000), 5, 32, 32).unwrap();
        let in_window = sorted.iter().filter(|e| e.t < 1000).count();
        assert_eq!(f.total(), in_window as u64);
        assert_eq!(f.dropped, 10_000 - in_window);

        // translation equivariance: shift every event by (+2, +1)
        let shifted: Vec<Event> = sorted
            .iter()
            .map(|e| Event { x: e.x + 2, y: e.y + 1, ..*e })
            .collect();
        let s2 = EventStream { width: 32, height: 32, events: shifted, order_repairs: 0 };
        let f2 = stack_events(&s2, (0, 1000), 5, 32, 32).unwrap();
        for ch in 0..10 {
            for y in 0..31 {
                for x in 0..30 {
                    assert_eq!(
                        f.counts[(ch * 32 + y) * 32 + x],
                        f2.counts[(ch * 32 + y + 1) * 32 + x + 2],
                        "mismatch at ch {ch} ({x}, {y})"
                    );
                }
            }
        }
    }

    #[test]
    fn frame_tensor_is_clipped_and_scaled() {
        let mut counts = vec![0u32; 2 * 4 * 4];
        counts[0] = 300; // clips to 255 -> 1.0
        counts[5] = 51; // -> 0.2
        let f = EventFrame { counts, bins: 1, h: 4, w: 4, dropped: 0 };
        let t: Tensor<f64> = f.to_tensor(255);
        assert_eq!(t.shape(), &[2, 4, 4]);
        assert_eq!(t.data()[0], 1.0);
        assert!((t.data()[5] - 0.2).abs() < 1e-12);
        assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn annotation_golden_and_round_trip() {
        let dir = tmp();
        let p = dir.path().join("a.json");

        fs::write(&p, "{}").unwrap();
        assert!(load_annotations(&p).unwrap().is_empty());

        fs::write(&p, r#"{"0": [[10, 20, 50, 60, 3]]}"#).unwrap();
        let a = load_annotations(&p).unwrap();
        assert_eq!(a.len(), 1);
        assert_eq!(
            a[0].1[0],
            Annotation { x1: 10.0, y1: 20.0, x2: 50.0, y2: 60.0, cls: 3 }
        );

        fs::write(&p, r#"{"0": [[50, 20, 10, 60, 3]]}"#).unwrap();
        match load_annotations(&p) {
            Err(Error::Validation(msg)) => assert!(msg.contains("frame 0 record 0")),
            other => panic!("expected validation error, got {other:?}"),
        }

        let frames = vec![
            ("0".to_string(), vec![Annotation { x1: 1.0, y1: 2.0, x2: 3.0, y2: 4.5, cls: 0 }]),
            ("10".to_string(), vec![]),
            ("2".to_string(), vec![Annotation { x1: 0.5, y1: 0.5, x2: 9.0, y2: 9.0, cls: 2 }]),
        ];
        save_annotations(&p, &frames).unwrap();
        let back = load_annotations(&p).unwrap();
        // numeric ordering: 0, 2, 10
        assert_eq!(back[0].0, "0");
        assert_eq!(back[1].0, "2");
        assert_eq!(back[2].0, "10");
        assert_eq!(back[0].1, frames[0].1);
        assert_eq!(back[1].1, frames[2].1);
    }

    #[test]
    fn synth_empty_and_static_scenes() {
        let cfg = SynthConfig {
            objects: (0, 0),
            noise_rate: 0.0,
            ..SynthConfig::default()
        };
        let (stream, truth) = synth_generate(&cfg).unwrap();
        assert!(stream.events.is_empty());
        assert_eq!(truth.len(), 5);
        assert!(truth.iter().all(|(_, a)| a.is_empty()));

        // a static object produces no events (no brightness change)
        let cfg = SynthConfig {
            objects: (1, 1),
            speed: (0.0, 0.0),
            noise_rate: 0.0,
            ..SynthConfig::default()
        };
        let (stream, truth) = synth_generate(&cfg).unwrap();
        assert!(stream.events.is_empty());
        assert_eq!(truth[0].1.len(), 1);
    }

    #[test]
    fn synth_is_deterministic_per_seed() {
        let cfg = SynthConfig { seed: 42, ..SynthConfig::default() };
        let (s1, t1) = synth_generate(&cfg).unwrap();
        let (s2, t2) = synth_generate(&cfg).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(t1, t2);
        let (s3, _) = synth_generate(&SynthConfig { seed: 43, ..cfg }).unwrap();
        assert_ne!(s1, s3);
    }

    #[test]
    fn moving_disc_center_advances_at_configured_speed() {
        // one disc forced rightward: classes=1 guarantees a disc; direction is
        // random, so regress against both axes and check the speed magnitude.
        let cfg = SynthConfig {
            width: 192,
            height: 192,
            objects: (1, 1),
            classes: 1,
            speed: (0.8, 0.8),
            noise_rate: 0.0,
            duration_ms: 60.0,
            frames: 6,
            seed: 11,
            ..SynthConfig::default()
        };
        let (_, truth) = synth_generate(&cfg).unwrap();
        let pts: Vec<(f64, f64, f64)> = truth
            .iter()
            .enumerate()
            .map(|(i, (_, anns))| {
                assert_eq!(anns.len(), 1, "disc left the canvas");
                let a = &anns[0];
                let tau = (i as f64 + 0.5) * cfg.duration_ms / cfg.frames as f64;
                (tau, (a.x1 + a.x2) / 2.0, (a.y1 + a.y2) / 2.0)
            })
            .collect();
        let slope = |xs: &[f64], ys: &[f64]| -> f64 {
            let n = xs.len() as f64;
            let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
            let cov: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
            let var: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
            cov / var
        };
        let taus: Vec<f64> = pts.iter().map(|p| p.0).collect();
        let cxs: Vec<f64> = pts.iter().map(|p| p.1).collect();
        let cys: Vec<f64> = pts.iter().map(|p| p.2).collect();
        let (sx, sy) = (slope(&taus, &cxs), slope(&taus, &cys));
        let measured = (sx * sx + sy * sy).sqrt();
        assert!(
            (measured - 0.8).abs() / 0.8 < 0.05,
            "measured speed {measured} vs configured 0.8"
        );
    }
}
