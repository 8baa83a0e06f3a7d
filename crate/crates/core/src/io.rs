//! Trajectory, descriptor and channel file formats.
//!
//! Floats are written in Rust's shortest round-trip representation, so a
//! parsed value prints back to the same bytes.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};

use crate::descriptors::Descriptor;
use crate::error::{Error, PathContext, Result};
use crate::geometry::Pose;

const KFD_MAGIC: &[u8; 4] = b"KFD1";

/// Row-major `[R | t]`, the twelve numbers of one KITTI line.
pub type KittiRecord = [f64; 12];

/// `timestamp tx ty tz qx qy qz qw`, one TUM line.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TumRecord {
    pub timestamp: f64,
    pub pose: Pose,
}

fn parse_floats<const N: usize>(path: &Path, line_no: usize, line: &str) -> Result<[f64; N]> {
    let mut out = [0.0; N];
    let mut it = line.split_whitespace();
    for (k, slot) in out.iter_mut().enumerate() {
        let tok = it
            .next()
            .ok_or_else(|| Error::parse(path, line_no, format!("expected {N} values, found {k}")))?;
        *slot = tok
            .parse()
            .map_err(|_| Error::parse(path, line_no, format!("not a number: {tok:?}")))?;
    }
    if it.next().is_some() {
        return Err(Error::parse(path, line_no, format!("more than {N} values")));
    }
    Ok(out)
}

/// Non-empty, non-comment lines with their 1-based line numbers.
fn data_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let reader = BufReader::new(File::open(path).at(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if !t.is_empty() && !t.starts_with('#') {
            out.push((i + 1, t.to_string()));
        }
    }
    Ok(out)
}

fn join(values: &[f64]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ")
}

pub fn pose_to_kitti(p: &Pose) -> KittiRecord {
    let r = p.rotation_matrix();
    let t = p.translation;
    [
        r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x,
        r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y,
        r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z,
    ]
}

pub fn kitti_to_pose(r: &KittiRecord) -> Pose {
    let m = Matrix3::new(r[0], r[1], r[2], r[4], r[5], r[6], r[8], r[9], r[10]);
    Pose::from_rotation_matrix(&m, Vector3::new(r[3], r[7], r[11]))
}

pub fn read_kitti(path: &Path) -> Result<Vec<KittiRecord>> {
    data_lines(path)?
        .iter()
        .map(|(n, l)| parse_floats::<12>(path, *n, l))
        .collect()
}

pub fn write_kitti(path: &Path, records: &[KittiRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        writeln!(w, "{}", join(r))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_kitti_poses(path: &Path) -> Result<Vec<Pose>> {
    Ok(read_kitti(path)?.iter().map(kitti_to_pose).collect())
}

pub fn write_kitti_poses(path: &Path, poses: &[Pose]) -> Result<()> {
    write_kitti(path, &poses.iter().map(pose_to_kitti).collect::<Vec<_>>())
}

/// Quaternions already unit to 1e-12 are kept bit-for-bit.
fn quaternion_from_xyzw(x: f64, y: f64, z: f64, w: f64) -> Option<UnitQuaternion<f64>> {
    let q = Quaternion::new(w, x, y, z);
    let n = q.norm();
    if !(n > 1e-12) || !n.is_finite() {
        return None;
    }
    Some(if (n - 1.0).abs() < 1e-12 {
        UnitQuaternion::new_unchecked(q)
    } else {
        UnitQuaternion::from_quaternion(q)
    })
}

pub fn read_tum(path: &Path) -> Result<Vec<TumRecord>> {
    data_lines(path)?
        .iter()
        .map(|(n, l)| {
            let v = parse_floats::<8>(path, *n, l)?;
            let q = quaternion_from_xyzw(v[4], v[5], v[6], v[7])
                .ok_or_else(|| Error::parse(path, *n, "zero quaternion"))?;
            Ok(TumRecord {
                timestamp: v[0],
                pose: Pose::new(q, Vector3::new(v[1], v[2], v[3])),
            })
        })
        .collect()
}

pub fn write_tum(path: &Path, records: &[TumRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        let [qw, qx, qy, qz] = r.pose.wxyz();
        let t = r.pose.translation;
        writeln!(w, "{}", join(&[r.timestamp, t.x, t.y, t.z, qx, qy, qz, qw]))?;
    }
    w.flush()?;
    Ok(())
}

/// Descriptors as little-endian `KFD1 | u32 dim | u32 count | f32[count*dim]`.
pub fn write_descriptors(path: &Path, descriptors: &[Descriptor]) -> Result<()> {
    let dim = descriptors.first().map_or(0, Descriptor::dim);
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(KFD_MAGIC)?;
    w.write_all(&(dim as u32).to_le_bytes())?;
    w.write_all(&(descriptors.len() as u32).to_le_bytes())?;
    for d in descriptors {
        if d.dim() != dim {
            return Err(Error::DimensionMismatch {
                left: dim,
                right: d.dim(),
            });
        }
        for &v in d.values() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_descriptors(path: &Path) -> Result<Vec<Descriptor>> {
    let mut bytes = Vec::new();
    File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).at(path)?;
    if bytes.len() < 12 || &bytes[..4] != KFD_MAGIC {
        return Err(Error::BadMagic(path.to_path_buf()));
    }
    let word = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
    let (dim, count) = (word(4), word(8));
    let body = &bytes[12..];
    if body.len() != dim * count * 4 {
        return Err(Error::CountMismatch {
            what: "descriptor payload bytes",
            left: dim * count * 4,
            right: body.len(),
        });
    }
    Ok(body
        .chunks_exact(4 * dim.max(1))
        .take(count)
        .map(|row| {
            Descriptor::new(
                row.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect(),
            )
        })
        .collect())
}

/// One row of `channels.csv`; absent values are empty fields.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelRow {
    pub id: u64,
    pub spaciousness: Option<f64>,
    pub entropy_proxy: Option<f64>,
}

const CHANNEL_HEADER: &str = "id,spaciousness,entropy_proxy";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_channels(path: &Path, rows: &[ChannelRow]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{CHANNEL_HEADER}")?;
    for r in rows {
        writeln!(w, "{},{},{}", r.id, opt(r.spaciousness), opt(r.entropy_proxy))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_channels(path: &Path) -> Result<Vec<ChannelRow>> {
    let lines = data_lines(path)?;
    let mut out = Vec::new();
    for (n, line) in lines {
        if line == CHANNEL_HEADER {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 {
            return Err(Error::parse(path, n, "expected id,spaciousness,entropy_proxy"));
        }
        let num = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| Error::parse(path, n, format!("not a number: {s:?}")))
            }
        };
        out.push(ChannelRow {
            id: f[0].parse().map_err(|_| Error::parse(path, n, "bad id"))?,
            spaciousness: num(f[1])?,
            entropy_proxy: num(f[2])?,
        });
    }
    Ok(out)
}

pub fn write_ids(path: &Path, ids: &[u64]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "id")?;
    for id in ids {
        writeln!(w, "{id}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_ids(path: &Path) -> Result<Vec<u64>> {
    data_lines(path)?
        .into_iter()
        .filter(|(_, l)| l != "id")
        .map(|(n, l)| l.parse().map_err(|_| Error::parse(path, n, format!("bad id {l:?}"))))
        .collect()
}

/// Two-column numeric series with a header, e.g. `step,bytes`.
pub fn write_series<T: std::fmt::Display>(path: &Path, header: &str, rows: &[(u64, T)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{header}")?;
    for (k, v) in rows {
        writeln!(w, "{k},{v}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_series<T: std::str::FromStr>(path: &Path) -> Result<Vec<(u64, T)>> {
    let lines = data_lines(path)?;
    lines
        .into_iter()
        .skip(1)
        .map(|(n, l)| {
            let (a, b) = l.split_once(',').ok_or_else(|| Error::parse(path, n, "expected two columns"))?;
            Ok((
                a.parse().map_err(|_| Error::parse(path, n, "bad step"))?,
                b.parse().map_err(|_| Error::parse(path, n, "bad value"))?,
            ))
        })
        .collect()
}
