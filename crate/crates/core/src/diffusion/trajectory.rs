//! Trajectories ("videos" of `F` frames, each a `D`-dimensional point) and
//! their on-disk formats.
//!
//! Single-trajectory CSV:
//!
//! ```text
//! # condition=2 seed=17
//! d0,d1
//! 0.125,-0.5
//! ...
//! ```
//!
//! `seed=none` marks a trajectory without seed provenance.
//!
//! Batch CSV (datasets, candidate sets): header `item,condition,seed,frame,d0,...`,
//! one row per frame, items contiguous and frames in order. An empty seed cell
//! means no provenance.
//!
//! Compact batch text: JSON Lines, one `{"condition","seed","frames"}` object per
//! trajectory.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Minimum frame count; second differences need three frames.
pub const MIN_FRAMES: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TrajectoryRecord", into = "TrajectoryRecord")]
pub struct Trajectory {
    frames: usize,
    dims: usize,
    values: Vec<f64>,
    pub condition: usize,
    pub seed: Option<u64>,
}

impl Trajectory {
    /// `values` is frame-major: `values[f * dims + d]`.
    pub fn new(
        frames: usize,
        dims: usize,
        values: Vec<f64>,
        condition: usize,
        seed: Option<u64>,
    ) -> Result<Self> {
        if frames < MIN_FRAMES {
            return Err(shape_err(format!(
                "trajectory needs at least {MIN_FRAMES} frames, got {frames}"
            )));
        }
        if dims == 0 {
            return Err(shape_err("trajectory needs at least one dimension"));
        }
        if values.len() != frames * dims {
            return Err(shape_err(format!(
                "{frames}x{dims} trajectory given {} values",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite trajectory value at {i}")));
        }
        Ok(Self {
            frames,
            dims,
            values,
            condition,
            seed,
        })
    }

    pub fn from_frames(frames: &[Vec<f64>], condition: usize, seed: Option<u64>) -> Result<Self> {
        let dims = frames.first().map_or(0, Vec::len);
        if frames.iter().any(|f| f.len() != dims) {
            return Err(shape_err("ragged frames"));
        }
        Self::new(frames.len(), dims, frames.concat(), condition, seed)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn frame(&self, f: usize) -> &[f64] {
        &self.values[f * self.dims..(f + 1) * self.dims]
    }

    pub fn frame_iter(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.dims)
    }

    pub fn same_shape(&self, other: &Trajectory) -> bool {
        self.frames == other.frames && self.dims == other.dims
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        match self.seed {
            Some(s) => writeln!(out, "# condition={} seed={s}", self.condition)?,
            None => writeln!(out, "# condition={} seed=none", self.condition)?,
        }
        let mut w = csv::Writer::from_writer(out);
        w.write_record((0..self.dims).map(|d| format!("d{d}")))?;
        for frame in self.frame_iter() {
            w.write_record(frame.iter().map(|v| v.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: BufRead>(mut input: R) -> Result<Self> {
        let mut first = String::new();
        input.read_line(&mut first)?;
        let (condition, seed) = parse_provenance(first.trim())?;
        let mut reader = csv::Reader::from_reader(input);
        let dims = reader.headers()?.len();
        let mut values = Vec::new();
        let mut frames = 0;
        for rec in reader.records() {
            let rec = rec?;
            if rec.len() != dims {
                return Err(Error::Format(format!("frame {frames} has {} columns", rec.len())));
            }
            for cell in rec.iter() {
                values.push(parse_f64(cell)?);
            }
            frames += 1;
        }
        Self::new(frames, dims, values, condition, seed)
    }
}

fn parse_f64(cell: &str) -> Result<f64> {
    cell.trim()
        .parse()
        .map_err(|_| Error::Format(format!("not a number: {cell:?}")))
}

fn parse_provenance(line: &str) -> Result<(usize, Option<u64>)> {
    let body = line
        .strip_prefix('#')
        .ok_or_else(|| Error::Format("missing '# condition=.. seed=..' line".into()))?;
    let mut condition = None;
    let mut seed = None;
    for field in body.split_whitespace() {
        match field.split_once('=') {
            Some(("condition", v)) => {
                condition = Some(v.parse().map_err(|_| Error::Format(format!("bad condition {v:?}")))?)
            }
            Some(("seed", "none")) => seed = Some(None),
            Some(("seed", v)) => {
                seed = Some(Some(v.parse().map_err(|_| Error::Format(format!("bad seed {v:?}")))?))
            }
            _ => return Err(Error::Format(format!("unexpected header field {field:?}"))),
        }
    }
    match (condition, seed) {
        (Some(c), Some(s)) => Ok((c, s)),
        _ => Err(Error::Format("header must carry condition and seed".into())),
    }
}

/// Writes trajectories in the batch CSV layout.
pub fn write_batch_csv<W: Write>(items: &[Trajectory], out: W) -> Result<()> {
    let dims = items.first().map_or(0, Trajectory::dims);
    if items.iter().any(|t| t.dims != dims) {
        return Err(shape_err("batch mixes frame dimensions"));
    }
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = ["item", "condition", "seed", "frame"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..dims).map(|d| format!("d{d}")));
    w.write_record(&header)?;
    for (i, t) in items.iter().enumerate() {
        let seed = t.seed.map(|s| s.to_string()).unwrap_or_default();
        for (f, frame) in t.frame_iter().enumerate() {
            let mut row = vec![i.to_string(), t.condition.to_string(), seed.clone(), f.to_string()];
            row.extend(frame.iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_batch_csv<R: std::io::Read>(input: R) -> Result<Vec<Trajectory>> {
    let mut reader = csv::Reader::from_reader(input);
    let header = reader.headers()?.clone();
    if header.len() < 5 || &header[0] != "item" || &header[3] != "frame" {
        return Err(Error::Format("batch CSV header must start item,condition,seed,frame".into()));
    }
    let dims = header.len() - 4;
    let mut out = Vec::new();
    let mut current: Option<(usize, usize, Option<u64>, Vec<f64>)> = None;
    for rec in reader.records() {
        let rec = rec?;
        let item: usize = rec[0].parse().map_err(|_| Error::Format(format!("bad item {:?}", &rec[0])))?;
        let condition: usize = rec[1]
            .parse()
            .map_err(|_| Error::Format(format!("bad condition {:?}", &rec[1])))?;
        let seed = match &rec[2] {
            "" => None,
            s => Some(s.parse().map_err(|_| Error::Format(format!("bad seed {s:?}")))?),
        };
        let frame: usize = rec[3].parse().map_err(|_| Error::Format(format!("bad frame {:?}", &rec[3])))?;
        let row = rec.iter().skip(4).map(parse_f64).collect::<Result<Vec<_>>>()?;
        match &mut current {
            Some((id, _, _, values)) if *id == item => {
                if frame * dims != values.len() {
                    return Err(Error::Format(format!("item {item}: frame {frame} out of order")));
                }
                values.extend(row);
            }
            _ => {
                if let Some((_, c, s, values)) = current.take() {
                    out.push(Trajectory::new(values.len() / dims, dims, values, c, s)?);
                }
                if frame != 0 {
                    return Err(Error::Format(format!("item {item} does not start at frame 0")));
                }
                current = Some((item, condition, seed, row));
            }
        }
    }
    if let Some((_, c, s, values)) = current {
        out.push(Trajectory::new(values.len() / dims, dims, values, c, s)?);
    }
    Ok(out)
}

pub fn write_jsonl<W: Write, T: Serialize>(items: &[T], mut out: W) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead, T: for<'de> Deserialize<'de>>(input: R) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct TrajectoryRecord {
    condition: usize,
    seed: Option<u64>,
    frames: Vec<Vec<f64>>,
}

impl From<Trajectory> for TrajectoryRecord {
    fn from(t: Trajectory) -> Self {
        Self {
            condition: t.condition,
            seed: t.seed,
            frames: t.frame_iter().map(<[f64]>::to_vec).collect(),
        }
    }
}

impl TryFrom<TrajectoryRecord> for Trajectory {
    type Error = Error;

    fn try_from(r: TrajectoryRecord) -> Result<Self> {
        Trajectory::from_frames(&r.frames, r.condition, r.seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn traj(frames: usize, dims: usize, seed: Option<u64>, cond: usize, vals: Vec<f64>) -> Trajectory {
        Trajectory::new(frames, dims, vals, cond, seed).unwrap()
    }

    #[test]
    fn too_few_frames_rejected() {
        assert!(matches!(
            Trajectory::new(2, 2, vec![0.0; 4], 0, None),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn non_finite_rejected() {
        assert!(matches!(
            Trajectory::new(3, 1, vec![0.0, f64::INFINITY, 1.0], 0, None),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn csv_carries_provenance_header() {
        let t = traj(3, 2, Some(17), 2, vec![0.5, -1.0, 0.25, 0.0, 1e-3, 3.0]);
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("# condition=2 seed=17\nd0,d1\n0.5,-1\n"));
        assert_eq!(Trajectory::read_csv(text.as_bytes()).unwrap(), t);
    }

    #[test]
    fn csv_without_seed() {
        let t = traj(3, 1, None, 0, vec![1.0, 2.0, 3.0]);
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("# condition=0 seed=none"));
        assert_eq!(Trajectory::read_csv(&buf[..]).unwrap(), t);
    }

    #[test]
    fn malformed_header_rejected() {
        assert!(matches!(
            Trajectory::read_csv("d0\n1\n2\n3\n".as_bytes()),
            Err(Error::Format(_))
        ));
    }

    fn arb_batch() -> impl Strategy<Value = Vec<Trajectory>> {
        (3usize..6, 1usize..4).prop_flat_map(|(f, d)| {
            proptest::collection::vec(
                (
                    proptest::collection::vec(-1e3f64..1e3, f * d),
                    0usize..5,
                    proptest::option::of(any::<u64>()),
                ),
                1..5,
            )
            .prop_map(move |items| {
                items
                    .into_iter()
                    .map(|(v, c, s)| Trajectory::new(f, d, v, c, s).unwrap())
                    .collect()
            })
        })
    }

    proptest! {
        #[test]
        fn batch_formats_round_trip(batch in arb_batch()) {
            let mut csv_buf = Vec::new();
            write_batch_csv(&batch, &mut csv_buf).unwrap();
            prop_assert_eq!(&read_batch_csv(&csv_buf[..]).unwrap(), &batch);

            let mut jsonl = Vec::new();
            write_jsonl(&batch, &mut jsonl).unwrap();
            let back: Vec<Trajectory> = read_jsonl(&jsonl[..]).unwrap();
            prop_assert_eq!(&back, &batch);
        }
    }
}
