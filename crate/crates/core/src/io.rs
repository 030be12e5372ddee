//! CSV and JSON input/output. Floats are written with 17 significant digits
//! so a write/read round trip is exact.

use std::io::{Read, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::mc::RepRecord;
use crate::model::StateSpace;
use crate::simulate::{JumpRecord, ObservationPath};

/// Relative tolerance on the spacing of the time column.
pub const GRID_TOL: f64 = 1e-9;

pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(e.to_string())
}

pub fn write_path_csv(path: &ObservationPath, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["i", "t", "x"]).map_err(csv_err)?;
    let delta = path.delta();
    for (i, x) in path.values.iter().enumerate() {
        w.write_record([i.to_string(), fmt_f64(i as f64 * delta), fmt_f64(*x)]).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_jumps_csv(jumps: &[JumpRecord], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["time", "x_pre", "z", "jump"]).map_err(csv_err)?;
    for j in jumps {
        w.write_record([fmt_f64(j.time), fmt_f64(j.x_pre), fmt_f64(j.z), fmt_f64(j.jump)]).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads an `i,t,x` table. `row` in errors is the 1-based line number, the
/// header being line 1.
pub fn read_path_csv(input: impl Read, space: &StateSpace) -> Result<ObservationPath> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(input);
    let mut records = r.records();
    let header = match records.next() {
        None => return Err(Error::EmptyData),
        Some(h) => h.map_err(|e| Error::Data { row: 1, message: e.to_string() })?,
    };
    if header.iter().collect::<Vec<_>>() != ["i", "t", "x"] {
        return Err(Error::Data { row: 1, message: format!("header must be exactly i,t,x, got {}", header.iter().collect::<Vec<_>>().join(",")) });
    }
    let mut times = Vec::new();
    let mut values = Vec::new();
    for (k, rec) in records.enumerate() {
        let row = k + 2;
        let rec = rec.map_err(|e| Error::Data { row, message: e.to_string() })?;
        if rec.len() != 3 {
            return Err(Error::Data { row, message: format!("expected 3 fields, got {}", rec.len()) });
        }
        let idx: usize = rec[0].parse().map_err(|_| Error::Data { row, message: format!("index {:?} is not an integer", &rec[0]) })?;
        if idx != k {
            return Err(Error::Data { row, message: format!("index {idx} out of sequence, expected {k}") });
        }
        let num = |s: &str, what: &str| -> Result<f64> {
            let v: f64 = s.parse().map_err(|_| Error::Data { row, message: format!("{what} {s:?} is not a number") })?;
            if !v.is_finite() {
                return Err(Error::Data { row, message: format!("{what} is not finite") });
            }
            Ok(v)
        };
        let t = num(&rec[1], "t")?;
        let x = num(&rec[2], "x")?;
        if !space.contains(x) {
            return Err(Error::Data { row, message: format!("x = {x} lies outside the state space") });
        }
        times.push(t);
        values.push(x);
    }
    if values.is_empty() {
        return Err(Error::EmptyData);
    }
    if values.len() < 2 {
        return Err(Error::Data { row: 2, message: "need at least two observations".into() });
    }
    let delta = times[1] - times[0];
    if !(delta > 0.0) {
        return Err(Error::NonuniformGrid { row: 3 });
    }
    for i in 1..times.len() {
        let step = times[i] - times[i - 1];
        if (step - delta).abs() > GRID_TOL * delta {
            return Err(Error::NonuniformGrid { row: i + 2 });
        }
    }
    ObservationPath::from_values(values, delta)
}

pub fn read_path_file(path: &Path, space: &StateSpace) -> Result<ObservationPath> {
    let f = std::fs::File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    read_path_csv(std::io::BufReader::new(f), space)
}

/// Per-replication table of a Monte Carlo run.
pub fn write_raw_csv(records: &[RepRecord], d: usize, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["rung".to_string(), "rep".into(), "seed".into(), "converged".into()];
    for prefix in ["theta_hat", "se", "studentized"] {
        header.extend((0..d).map(|j| format!("{prefix}_{j}")));
    }
    w.write_record(&header).map_err(csv_err)?;
    for r in records {
        let mut row = vec![r.rung.to_string(), r.rep.to_string(), r.seed.to_string(), r.converged.to_string()];
        for v in [&r.theta_hat, &r.se, &r.studentized] {
            row.extend(v.iter().map(|x| fmt_f64(*x)));
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Pretty JSON with a trailing newline. Non-finite floats become `null`.
pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Io(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ObservationPath {
        ObservationPath::from_values(vec![0.1, -0.3, 1.0 / 3.0, 2.0f64.sqrt(), 1e-300], 0.02).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let p = sample();
        let mut buf = Vec::new();
        write_path_csv(&p, &mut buf).unwrap();
        let q = read_path_csv(buf.as_slice(), &StateSpace::real_line()).unwrap();
        assert_eq!(p.values, q.values);
        assert!((q.delta() - 0.02).abs() < 1e-15);
    }

    #[test]
    fn bad_inputs() {
        let rl = StateSpace::real_line();
        assert_eq!(read_path_csv("".as_bytes(), &rl).unwrap_err(), Error::EmptyData);
        assert_eq!(read_path_csv("i,t,x\n".as_bytes(), &rl).unwrap_err(), Error::EmptyData);
        let e = read_path_csv("i,t,x\n0,0,1\n1,0.1,abc\n".as_bytes(), &rl).unwrap_err();
        assert!(matches!(e, Error::Data { row: 3, .. }), "{e:?}");
        let e = read_path_csv("i,t,x\n0,0,1\n1,0.1,2\n2,0.2001,3\n".as_bytes(), &rl).unwrap_err();
        assert_eq!(e, Error::NonuniformGrid { row: 4 });
        assert!(matches!(read_path_csv("a,b,c\n".as_bytes(), &rl).unwrap_err(), Error::Data { row: 1, .. }));
    }
}
