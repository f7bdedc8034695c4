//! File formats: binary matrices, `key=value` text, metrics CSV and SVG
//! scatter plots.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

const MAGIC: &[u8; 4] = b"MTXF";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8 + 8;

/// Serializes a matrix as `MTXF`, version, rows, cols, then the row-major
/// payload, all little-endian.
pub fn write_matrix_to(mut w: impl Write, m: &Matrix) -> Result<()> {
    let mut buf = Vec::with_capacity(HEADER_LEN + 8 * m.data().len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    buf.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    for v in m.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_matrix_from(mut r: impl Read) -> Result<Matrix> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode_matrix(&bytes)
}

fn decode_matrix(bytes: &[u8]) -> Result<Matrix> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!("matrix file too short: {} bytes", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic, expected MTXF".into()));
    }
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Format(format!("unsupported matrix version {version}")));
    }
    let (rows, cols) = (u64_at(8), u64_at(16));
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| Error::Format(format!("matrix size {rows}x{cols} overflows")))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() as u64 != expected {
        return Err(Error::Format(format!(
            "payload is {} bytes, header {rows}x{cols} needs {expected}",
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Matrix::from_vec(rows as usize, cols as usize, data)
}

pub fn write_matrix(path: impl AsRef<Path>, m: &Matrix) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_matrix_to(std::io::BufWriter::new(file), m)
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<Matrix> {
    decode_matrix(&std::fs::read(path)?)
}

/// Splits `key=value` lines. Blank lines and `#` comments are skipped;
/// duplicate keys and lines without `=` are errors.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!("line {}: expected key=value, got '{line}'", no + 1)));
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", no + 1)));
        }
        if out.iter().any(|(seen, _)| seen == k) {
            return Err(Error::Config(format!("line {}: duplicate key '{k}'", no + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

/// One row of the training metrics log.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub d_loss: f64,
    pub g_loss: f64,
    pub prox: f64,
    pub beta: f64,
    pub gamma: f64,
    pub r: f64,
    pub modes: usize,
    pub hq: f64,
    pub recon: f64,
}

pub const METRICS_HEADER: &str = "step,d_loss,g_loss,prox,beta,gamma,r,modes,hq,recon";

/// Renders metrics as CSV. Floats use Rust's shortest round-trip format so
/// parsing the file gives back the exact values.
pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            r.step, r.d_loss, r.g_loss, r.prox, r.beta, r.gamma, r.r, r.modes, r.hq, r.recon
        );
    }
    s
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Format("metrics CSV header mismatch".into()));
    }
    let mut rows = Vec::new();
    for (no, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 10 {
            return Err(Error::Format(format!("metrics row {}: {} fields", no + 1, f.len())));
        }
        let bad = |e: &dyn std::fmt::Display| Error::Format(format!("metrics row {}: {e}", no + 1));
        let fl = |i: usize| f[i].parse::<f64>().map_err(|e| bad(&e));
        rows.push(MetricsRow {
            step: f[0].parse().map_err(|e| bad(&e))?,
            d_loss: fl(1)?,
            g_loss: fl(2)?,
            prox: fl(3)?,
            beta: fl(4)?,
            gamma: fl(5)?,
            r: fl(6)?,
            modes: f[7].parse().map_err(|e| bad(&e))?,
            hq: fl(8)?,
            recon: fl(9)?,
        });
    }
    Ok(rows)
}

const SVG_SIZE: f64 = 800.0;
const SVG_EXTENT: f64 = 3.0;

/// Scatter plot of 2-D samples on a fixed `[-3, 3]²` canvas with the real
/// mode centers drawn as crosses.
pub fn scatter_svg(samples: &Matrix, centers: &[[f64; 2]]) -> Result<String> {
    if samples.rows() != 2 {
        return Err(Error::dims("scatter_svg", 2, samples.rows()));
    }
    let px = |v: f64| (v + SVG_EXTENT) / (2.0 * SVG_EXTENT) * SVG_SIZE;
    let py = |v: f64| (SVG_EXTENT - v) / (2.0 * SVG_EXTENT) * SVG_SIZE;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{0}" height="{0}" viewBox="0 0 {0} {0}">"#,
        SVG_SIZE
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for n in 0..samples.cols() {
        let (x, y) = (samples[(0, n)], samples[(1, n)]);
        if !(x.is_finite() && y.is_finite()) || x.abs() > SVG_EXTENT || y.abs() > SVG_EXTENT {
            continue;
        }
        let _ = writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="2" fill="steelblue" fill-opacity="0.5"/>"#,
            px(x),
            py(y)
        );
    }
    for c in centers {
        let (cx, cy) = (px(c[0]), py(c[1]));
        let _ = writeln!(
            s,
            r#"<path d="M{:.2} {:.2} L{:.2} {:.2} M{:.2} {:.2} L{:.2} {:.2}" stroke="crimson" stroke-width="2"/>"#,
            cx - 6.0,
            cy - 6.0,
            cx + 6.0,
            cy + 6.0,
            cx - 6.0,
            cy + 6.0,
            cx + 6.0,
            cy - 6.0
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn bits(m: &Matrix) -> Vec<u64> {
        m.data().iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn header_layout() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let mut buf = Vec::new();
        write_matrix_to(&mut buf, &m).unwrap();
        assert_eq!(&buf[..4], b"MTXF");
        assert_eq!(&buf[4..8], &[1, 0, 0, 0]);
        assert_eq!(&buf[8..16], &1u64.to_le_bytes());
        assert_eq!(&buf[16..24], &2u64.to_le_bytes());
        assert_eq!(&buf[24..32], &1.0f64.to_le_bytes());
        assert_eq!(buf.len(), 40);
    }

    #[test]
    fn special_values_round_trip() {
        let m = Matrix::from_rows(&[vec![f64::NAN, -0.0, f64::INFINITY, f64::MIN_POSITIVE / 2.0]]).unwrap();
        let mut buf = Vec::new();
        write_matrix_to(&mut buf, &m).unwrap();
        assert_eq!(bits(&read_matrix_from(&buf[..]).unwrap()), bits(&m));
    }

    #[test]
    fn empty_matrix_round_trips() {
        let m = Matrix::zeros(3, 0);
        let mut buf = Vec::new();
        write_matrix_to(&mut buf, &m).unwrap();
        assert_eq!(read_matrix_from(&buf[..]).unwrap().shape(), (3, 0));
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let mut buf = Vec::new();
        write_matrix_to(&mut buf, &Matrix::identity(2)).unwrap();
        assert!(read_matrix_from(&buf[..buf.len() - 1]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_matrix_from(&bad[..]).is_err());
        let mut bad = buf.clone();
        bad[4] = 2;
        assert!(read_matrix_from(&bad[..]).is_err());
        assert!(read_matrix_from(&buf[..10]).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.mtx");
        let m = Rng::new(90).normal_matrix(5, 7);
        write_matrix(&path, &m).unwrap();
        assert_eq!(bits(&read_matrix(&path).unwrap()), bits(&m));
    }

    #[test]
    fn key_values_skip_comments() {
        let kv = parse_key_values("# header\na = 1\n\nb=x # trailing\n").unwrap();
        assert_eq!(kv, vec![("a".into(), "1".into()), ("b".into(), "x".into())]);
        assert!(parse_key_values("a=1\na=2\n").is_err());
        assert!(parse_key_values("novalue\n").is_err());
        assert!(parse_key_values("=3\n").is_err());
    }

    #[test]
    fn metrics_round_trip() {
        let rows = vec![
            MetricsRow { step: 0, d_loss: 2.0, g_loss: -0.1, prox: 0.0, beta: 0.1, gamma: 0.22, r: 0.0, modes: 3, hq: 0.5, recon: 1e-300 },
            MetricsRow { step: 100, d_loss: 1.0 / 3.0, g_loss: 0.7, prox: 1e-9, beta: 0.101, gamma: 0.2212, r: -0.5, modes: 8, hq: 0.99, recon: 3.5 },
        ];
        let text = metrics_csv(&rows);
        assert!(text.starts_with("step,d_loss,g_loss,prox,beta,gamma,r,modes,hq,recon\n"));
        assert_eq!(parse_metrics_csv(&text).unwrap(), rows);
    }

    #[test]
    fn svg_is_well_formed() {
        let samples = Matrix::from_rows(&[vec![0.0, 5.0, -3.0], vec![0.0, 0.0, 3.0]]).unwrap();
        let svg = scatter_svg(&samples, &[[2.0, 0.0]]).unwrap();
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains(r#"width="800""#));
        // the out-of-range sample is dropped
        assert_eq!(svg.matches("<circle").count(), 2);
        assert!(svg.contains(r#"cx="400.00" cy="400.00""#));
        assert!(svg.contains(r#"cx="0.00" cy="0.00""#));
        assert_eq!(svg.matches("<path").count(), 1);
        assert!(svg.trim_end().ends_with("</svg>"));
    }

    proptest! {
        #[test]
        fn arbitrary_bits_round_trip(rows in 0usize..6, cols in 0usize..6, seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let data: Vec<f64> = (0..rows * cols).map(|_| f64::from_bits(rng.next_u64())).collect();
            let m = Matrix::from_vec(rows, cols, data).unwrap();
            let mut buf = Vec::new();
            write_matrix_to(&mut buf, &m).unwrap();
            let back = read_matrix_from(&buf[..]).unwrap();
            prop_assert_eq!(back.shape(), m.shape());
            prop_assert_eq!(bits(&back), bits(&m));
        }
    }
}
