//! File formats: TUM trajectories, EuRoC-style IMU CSV, JSON documents.

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::eval::TimedPose;
use crate::imu::ImuMeasurement;
use crate::lie::{RigidTransform, Rotation3};

/// Writes `timestamp tx ty tz qx qy qz qw` lines.
pub fn write_tum<W: Write>(mut w: W, poses: &[TimedPose]) -> Result<()> {
    for p in poses {
        let t = p.pose.translation;
        let q = p.pose.rotation.quaternion();
        writeln!(w, "{:.9} {} {} {} {} {} {} {}", p.timestamp, t.x, t.y, t.z, q.i, q.j, q.k, q.w)?;
    }
    Ok(())
}

/// Reads a TUM trajectory; `#` comments and blank lines are skipped.
pub fn read_tum<R: Read>(r: R) -> Result<Vec<TimedPose>> {
    let mut out = Vec::new();
    for (n, line) in BufReader::new(r).lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Data(format!("line {}: {e}", n + 1)))?;
        if v.len() != 8 {
            return Err(Error::Data(format!("line {}: expected 8 fields, found {}", n + 1, v.len())));
        }
        let q = Quaternion::new(v[7], v[4], v[5], v[6]);
        if !(q.norm() > 0.0) {
            return Err(Error::Data(format!("line {}: zero quaternion", n + 1)));
        }
        out.push(TimedPose {
            timestamp: v[0],
            pose: RigidTransform::new(
                Rotation3::from_quaternion(UnitQuaternion::from_quaternion(q)),
                Vector3::new(v[1], v[2], v[3]),
            ),
        });
    }
    Ok(out)
}

pub fn write_tum_file(path: &Path, poses: &[TimedPose]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tum(&mut w, poses)?;
    w.flush()?;
    Ok(())
}

pub fn read_tum_file(path: &Path) -> Result<Vec<TimedPose>> {
    read_tum(File::open(path)?)
}

const IMU_HEADER: [&str; 7] = [
    "#timestamp [ns]",
    "w_RS_S_x [rad s^-1]",
    "w_RS_S_y [rad s^-1]",
    "w_RS_S_z [rad s^-1]",
    "a_RS_S_x [m s^-2]",
    "a_RS_S_y [m s^-2]",
    "a_RS_S_z [m s^-2]",
];

/// Writes `timestamp[ns],wx,wy,wz,ax,ay,az` rows with a EuRoC header.
pub fn write_imu_csv<W: Write>(w: W, samples: &[ImuMeasurement]) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(IMU_HEADER)?;
    for m in samples {
        let ns = (m.timestamp * 1e9).round() as i64;
        csv.write_record(&[
            ns.to_string(),
            m.gyro.x.to_string(),
            m.gyro.y.to_string(),
            m.gyro.z.to_string(),
            m.accel.x.to_string(),
            m.accel.y.to_string(),
            m.accel.z.to_string(),
        ])?;
    }
    csv.flush()?;
    Ok(())
}

pub fn read_imu_csv<R: Read>(r: R) -> Result<Vec<ImuMeasurement>> {
    let mut csv = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(r);
    let mut out = Vec::new();
    for (n, rec) in csv.records().enumerate() {
        let rec = rec?;
        if rec.len() != 7 {
            return Err(Error::Data(format!("IMU row {}: expected 7 columns, found {}", n + 1, rec.len())));
        }
        let ns: i64 = rec[0].parse().map_err(|e| Error::Data(format!("IMU row {}: {e}", n + 1)))?;
        let mut v = [0.0; 6];
        for (k, slot) in v.iter_mut().enumerate() {
            *slot = rec[k + 1].parse().map_err(|e| Error::Data(format!("IMU row {}: {e}", n + 1)))?;
        }
        out.push(ImuMeasurement::new(
            ns as f64 * 1e-9,
            Vector3::new(v[0], v[1], v[2]),
            Vector3::new(v[3], v[4], v[5]),
        ));
    }
    Ok(out)
}

pub fn write_imu_csv_file(path: &Path, samples: &[ImuMeasurement]) -> Result<()> {
    write_imu_csv(BufWriter::new(File::create(path)?), samples)
}

pub fn read_imu_csv_file(path: &Path) -> Result<Vec<ImuMeasurement>> {
    read_imu_csv(BufReader::new(File::open(path)?))
}

pub fn write_json_file<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.flush()?;
    Ok(())
}

pub fn read_json_file<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

/// Writes any serializable rows as CSV with a header.
pub fn write_csv_file<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut csv = csv::Writer::from_path(path)?;
    for r in rows {
        csv.serialize(r)?;
    }
    csv.flush()?;
    Ok(())
}

pub fn read_csv_file<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut csv = csv::Reader::from_path(path)?;
    csv.deserialize().map(|r| r.map_err(Error::from)).collect()
}
