//! CSV and JSON readers/writers for observations, latents and parameters.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::DVector;

use super::{ModelParams, ObservationSequence};
use crate::error::{Error, Result};

/// Shortest representation that parses back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

fn parse_f64(s: &str, line: usize) -> Result<f64> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| Error::Format(format!("line {line}: cannot parse '{s}' as a number")))?;
    if !v.is_finite() {
        return Err(Error::Format(format!("line {line}: non-finite value '{s}'")));
    }
    Ok(v)
}

/// Read `t,y0,...,y{m-1}`. Rows must be in time order starting at 0.
pub fn read_observations_csv(path: &Path) -> Result<ObservationSequence> {
    let mut rdr = csv::Reader::from_reader(BufReader::new(File::open(path)?));
    let headers = rdr.headers()?.clone();
    if headers.get(0) != Some("t") || headers.len() < 2 {
        return Err(Error::Format("observation CSV must start with columns t,y0".into()));
    }
    for (i, h) in headers.iter().skip(1).enumerate() {
        if h != format!("y{i}") {
            return Err(Error::Format(format!("unexpected column '{h}', expected 'y{i}'")));
        }
    }
    let m = headers.len() - 1;
    let mut data = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = row + 2;
        if rec.len() != m + 1 {
            return Err(Error::Format(format!("line {line}: expected {} fields", m + 1)));
        }
        let t: usize = rec[0]
            .trim()
            .parse()
            .map_err(|_| Error::Format(format!("line {line}: bad time index")))?;
        if t != row {
            return Err(Error::Format(format!("line {line}: time index {t} out of order")));
        }
        let y = (1..=m).map(|i| parse_f64(&rec[i], line)).collect::<Result<Vec<_>>>()?;
        data.push(DVector::from_vec(y));
    }
    ObservationSequence::new(data)
}

pub fn write_observations_csv(path: &Path, obs: &ObservationSequence) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let m = obs.dim();
    let mut header = vec!["t".to_string()];
    header.extend((0..m).map(|i| format!("y{i}")));
    writeln!(w, "{}", header.join(","))?;
    for (t, y) in obs.as_slice().iter().enumerate() {
        let mut row = vec![t.to_string()];
        row.extend(y.iter().map(|v| fmt_f64(*v)));
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Write `t[,z][,x0,...]`.
pub fn write_latents_csv(path: &Path, z: Option<&[usize]>, x: Option<&[DVector<f64>]>) -> Result<()> {
    let len = z.map(|z| z.len()).or(x.map(|x| x.len())).unwrap_or(0);
    let n = x.and_then(|x| x.first()).map_or(0, |v| v.len());
    let mut w = BufWriter::new(File::create(path)?);
    let mut header = vec!["t".to_string()];
    if z.is_some() {
        header.push("z".into());
    }
    header.extend((0..n).map(|i| format!("x{i}")));
    writeln!(w, "{}", header.join(","))?;
    for t in 0..len {
        let mut row = vec![t.to_string()];
        if let Some(z) = z {
            row.push(z[t].to_string());
        }
        if let Some(x) = x {
            row.extend(x[t].iter().map(|v| fmt_f64(*v)));
        }
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

pub type Latents = (Option<Vec<usize>>, Option<Vec<DVector<f64>>>);

pub fn read_latents_csv(path: &Path) -> Result<Latents> {
    let mut rdr = csv::Reader::from_reader(BufReader::new(File::open(path)?));
    let headers = rdr.headers()?.clone();
    let has_z = headers.iter().any(|h| h == "z");
    let x_cols: Vec<usize> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| h.starts_with('x'))
        .map(|(i, _)| i)
        .collect();
    let z_col = headers.iter().position(|h| h == "z");
    let mut zs = Vec::new();
    let mut xs = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = row + 2;
        if let Some(c) = z_col {
            zs.push(
                rec[c]
                    .trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Format(format!("line {line}: bad state label")))?,
            );
        }
        if !x_cols.is_empty() {
            let v = x_cols.iter().map(|&c| parse_f64(&rec[c], line)).collect::<Result<Vec<_>>>()?;
            xs.push(DVector::from_vec(v));
        }
    }
    Ok((has_z.then_some(zs), (!x_cols.is_empty()).then_some(xs)))
}

pub fn read_params_json(path: &Path) -> Result<ModelParams> {
    let p: ModelParams = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    p.validate()?;
    Ok(p)
}

pub fn write_params_json(path: &Path, params: &ModelParams) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, params)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}
