//! File formats.
//!
//! | data        | format                                                   |
//! |-------------|----------------------------------------------------------|
//! | signal      | CSV `t,value`, or binary `PKSG` (16-byte header + f32 LE) |
//! | events      | CSV `tau,alpha`, 17 significant digits                   |
//! | clusters    | CSV `t1,t2,duration,area`                                |
//! | activations | CSV `k,a`                                                |
//! | histogram   | CSV `lo,hi,mass`                                         |
//!
//! Path-based helpers pick the signal format from the extension: `.bin`,
//! `.pksg` and `.raw` are binary, anything else is CSV.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::detect::Cluster;
use crate::error::{Error, Result};
use crate::pulse::PulseEvent;
use crate::signal::SampledSignal;
use crate::sparse::Activations;
use crate::spectrum::Histogram;

pub const MAGIC: &[u8; 4] = b"PKSG";
pub const BINARY_VERSION: u16 = 1;

/// Formats a float with 17 significant digits.
pub fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

fn csv_writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().has_headers(false).from_writer(w)
}

fn csv_reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r)
}

fn parse_f64(field: Option<&str>, row: usize, name: &str) -> Result<f64> {
    let s = field.ok_or_else(|| Error::Format(format!("row {row}: missing column {name}")))?;
    s.parse::<f64>()
        .map_err(|_| Error::Format(format!("row {row}: cannot parse {name} = {s:?}")))
}

fn check_header<R: Read>(rdr: &mut csv::Reader<R>, expected: &[&str]) -> Result<()> {
    let h = rdr.headers()?;
    let got: Vec<&str> = h.iter().collect();
    if got != expected {
        return Err(Error::Format(format!(
            "expected header {}, found {}",
            expected.join(","),
            got.join(",")
        )));
    }
    Ok(())
}

fn read_rows<R: Read>(r: R, header: &[&str]) -> Result<Vec<Vec<f64>>> {
    let mut rdr = csv_reader(r);
    check_header(&mut rdr, header)?;
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = header
            .iter()
            .enumerate()
            .map(|(j, name)| parse_f64(rec.get(j), i + 1, name))
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

// ---- signals ----------------------------------------------------------------

pub fn write_signal_csv<W: Write>(signal: &SampledSignal, w: W) -> Result<()> {
    let mut wtr = csv_writer(w);
    wtr.write_record(["t", "value"])?;
    for (k, v) in signal.values.iter().enumerate() {
        wtr.write_record([fmt17(signal.time(k)), fmt17(*v)])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Reads `t,value`; the sample period is taken from the first two rows.
pub fn read_signal_csv<R: Read>(r: R) -> Result<SampledSignal> {
    let rows = read_rows(r, &["t", "value"])?;
    if rows.len() < 2 {
        return Err(Error::Format(
            "signal CSV needs at least two rows to define the sample period".into(),
        ));
    }
    let t0 = rows[0][0];
    let dt = rows[1][0] - rows[0][0];
    let values = rows.iter().map(|r| r[1]).collect();
    SampledSignal::new(dt, t0, values).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_signal_binary<W: Write>(signal: &SampledSignal, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&BINARY_VERSION.to_le_bytes())?;
    w.write_all(&0u16.to_le_bytes())?;
    w.write_all(&signal.dt.to_le_bytes())?;
    for v in &signal.values {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a binary signal; the format carries no origin, so `t0 = 0`.
pub fn read_signal_binary<R: Read>(mut r: R) -> Result<SampledSignal> {
    let mut header = [0u8; 16];
    r.read_exact(&mut header)
        .map_err(|_| Error::Format("binary signal shorter than its 16-byte header".into()))?;
    if &header[0..4] != MAGIC {
        return Err(Error::Format("bad magic, expected PKSG".into()));
    }
    let version = u16::from_le_bytes([header[4], header[5]]);
    if version != BINARY_VERSION {
        return Err(Error::Format(format!("unsupported binary version {version}")));
    }
    let dt = f64::from_le_bytes(header[8..16].try_into().expect("8 bytes"));
    let mut body = Vec::new();
    r.read_to_end(&mut body)?;
    if body.len() % 4 != 0 {
        return Err(Error::Format("binary body is not a whole number of f32 samples".into()));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    SampledSignal::new(dt, 0.0, values).map_err(|e| Error::Format(e.to_string()))
}

fn is_binary_path(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()),
        Some(ref e) if e == "bin" || e == "pksg" || e == "raw"
    )
}

pub fn read_signal(path: &Path) -> Result<SampledSignal> {
    let f = BufReader::new(File::open(path)?);
    if is_binary_path(path) {
        read_signal_binary(f)
    } else {
        read_signal_csv(f)
    }
}

pub fn write_signal(signal: &SampledSignal, path: &Path) -> Result<()> {
    let f = BufWriter::new(File::create(path)?);
    if is_binary_path(path) {
        write_signal_binary(signal, f)
    } else {
        write_signal_csv(signal, f)
    }
}

// ---- events -----------------------------------------------------------------

pub fn write_events_csv<W: Write>(events: &[PulseEvent], w: W) -> Result<()> {
    let mut wtr = csv_writer(w);
    wtr.write_record(["tau", "alpha"])?;
    for e in events {
        wtr.write_record([fmt17(e.tau), fmt17(e.alpha)])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_events_csv<R: Read>(r: R) -> Result<Vec<PulseEvent>> {
    Ok(read_rows(r, &["tau", "alpha"])?
        .into_iter()
        .map(|r| PulseEvent::new(r[0], r[1]))
        .collect())
}

pub fn read_events(path: &Path) -> Result<Vec<PulseEvent>> {
    read_events_csv(BufReader::new(File::open(path)?))
}

pub fn write_events(events: &[PulseEvent], path: &Path) -> Result<()> {
    write_events_csv(events, BufWriter::new(File::create(path)?))
}

// ---- clusters, activations, histograms --------------------------------------

pub fn write_clusters_csv<W: Write>(clusters: &[Cluster], w: W) -> Result<()> {
    let mut wtr = csv_writer(w);
    wtr.write_record(["t1", "t2", "duration", "area"])?;
    for c in clusters {
        wtr.write_record([fmt17(c.t1), fmt17(c.t2), fmt17(c.duration), fmt17(c.area)])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_activations_csv<W: Write>(act: &Activations, w: W) -> Result<()> {
    let mut wtr = csv_writer(w);
    wtr.write_record(["k", "a"])?;
    for (k, a) in act.values.iter().enumerate() {
        wtr.write_record([k.to_string(), fmt17(*a)])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_histogram_csv<W: Write>(h: &Histogram, w: W) -> Result<()> {
    let mut wtr = csv_writer(w);
    wtr.write_record(["lo", "hi", "mass"])?;
    for (i, m) in h.masses.iter().enumerate() {
        wtr.write_record([fmt17(h.edges[i]), fmt17(h.edges[i + 1]), fmt17(*m)])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Reads `lo,hi,mass`; consecutive rows must share their boundary.
pub fn read_histogram_csv<R: Read>(r: R) -> Result<Histogram> {
    let rows = read_rows(r, &["lo", "hi", "mass"])?;
    if rows.is_empty() {
        return Err(Error::Format("histogram CSV has no bins".into()));
    }
    let mut edges = vec![rows[0][0]];
    for (i, row) in rows.iter().enumerate() {
        if i > 0 && row[0] != rows[i - 1][1] {
            return Err(Error::Format(format!("row {}: bins are not contiguous", i + 1)));
        }
        edges.push(row[1]);
    }
    let masses = rows.iter().map(|r| r[2]).collect();
    Histogram::new(edges, masses).map_err(|e| Error::Format(e.to_string()))
}

/// Reads a single-column list of numbers (amplitudes or areas); a non-numeric
/// first line is treated as a header.
pub fn read_values<R: Read>(r: R) -> Result<Vec<f64>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(r);
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let field = rec.get(0).unwrap_or("");
        match field.parse::<f64>() {
            Ok(v) => out.push(v),
            Err(_) if i == 0 => continue,
            Err(_) => return Err(Error::Format(format!("row {}: cannot parse {field:?}", i + 1))),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn signal_csv_round_trip_is_exact() {
        let s = SampledSignal::new(0.5, 2.0, vec![0.1, -3.25, 1e-300, 7.0]).unwrap();
        let mut buf = Vec::new();
        write_signal_csv(&s, &mut buf).unwrap();
        assert!(buf.starts_with(b"t,value\n"));
        assert_eq!(read_signal_csv(&buf[..]).unwrap(), s);
    }

    #[test]
    fn binary_layout() {
        let s = SampledSignal::new(0.25, 0.0, vec![1.0, -2.5]).unwrap();
        let mut buf = Vec::new();
        write_signal_binary(&s, &mut buf).unwrap();
        assert_eq!(buf.len(), 16 + 8);
        assert_eq!(&buf[0..4], b"PKSG");
        assert_eq!(&buf[4..6], &1u16.to_le_bytes());
        assert_eq!(&buf[8..16], &0.25f64.to_le_bytes());
        assert_eq!(&buf[16..20], &1.0f32.to_le_bytes());
        assert_eq!(read_signal_binary(&buf[..]).unwrap(), s);
    }

    #[test]
    fn binary_rejects_garbage() {
        assert!(read_signal_binary(&b"PKS"[..]).is_err());
        let mut bad = b"XXXX".to_vec();
        bad.extend_from_slice(&[0; 12]);
        assert!(read_signal_binary(&bad[..]).is_err());
        let mut odd = Vec::new();
        write_signal_binary(&SampledSignal::zeros(1, 1.0, 0.0), &mut odd).unwrap();
        odd.push(0);
        assert!(read_signal_binary(&odd[..]).is_err());
    }

    #[test]
    fn events_use_seventeen_digits() {
        let ev = [PulseEvent::new(0.1, 1.0 / 3.0)];
        let mut buf = Vec::new();
        write_events_csv(&ev, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().nth(1).unwrap(), "1.0000000000000001e-1,3.3333333333333331e-1");
        assert_eq!(read_events_csv(&buf[..]).unwrap(), ev);
    }

    #[test]
    fn empty_events_are_header_only() {
        let mut buf = Vec::new();
        write_events_csv(&[], &mut buf).unwrap();
        assert_eq!(buf, b"tau,alpha\n");
        assert!(read_events_csv(&buf[..]).unwrap().is_empty());
    }

    #[test]
    fn wrong_header_is_an_error() {
        assert!(read_events_csv(&b"a,b\n1,2\n"[..]).is_err());
        assert!(read_events_csv(&b"tau,alpha\n1,x\n"[..]).is_err());
    }

    #[test]
    fn histogram_round_trip() {
        let h = Histogram::new(vec![0.0, 1.0, 2.5], vec![0.25, 0.75]).unwrap();
        let mut buf = Vec::new();
        write_histogram_csv(&h, &mut buf).unwrap();
        let back = read_histogram_csv(&buf[..]).unwrap();
        assert_eq!(back.edges, h.edges);
        assert_eq!(back.masses, h.masses);
    }

    #[test]
    fn values_skip_header() {
        assert_eq!(read_values(&b"alpha\n1\n2.5\n"[..]).unwrap(), vec![1.0, 2.5]);
        assert_eq!(read_values(&b"1\n2\n"[..]).unwrap(), vec![1.0, 2.0]);
        assert!(read_values(&b"1\nx\n"[..]).is_err());
    }
}
