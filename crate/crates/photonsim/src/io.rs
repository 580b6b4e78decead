//! File formats for simulation artifacts: CSV time series with `# key =
//! value` comment headers, JSON matrices with metadata, and a packed binary
//! format for shot sets.
//!
//! Floating point values are written with the shortest decimal that parses
//! back to the same bits, so every round trip here is bit-exact for finite
//! inputs (all container types validate finiteness).

use std::collections::BTreeMap;
use std::io::{BufRead, Read, Write};

use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::cxmat::CMat;
use crate::dynamics::{DensityMatrix, FieldRecord};
use crate::error::{Error, Result};
use crate::measurement::{Histogram2d, ShotKind, ShotSet};
use crate::shaping::IqWaveform;
use crate::tomography::{ChoiMatrix, PauliTransferMatrix, SolverReport};

pub type Metadata = BTreeMap<String, String>;

const SHOT_MAGIC: &[u8; 4] = b"PFSH";
const SHOT_VERSION: u32 = 1;

fn check_meta(meta: &Metadata) -> Result<()> {
    for (k, v) in meta {
        if k.is_empty() || k.contains('=') || k.contains('\n') || k.trim() != k {
            return Err(Error::InvalidParam(format!("metadata key {k:?} is not header-safe")));
        }
        if v.contains('\n') || v.trim() != v {
            return Err(Error::InvalidParam(format!(
                "metadata value for {k:?} is not header-safe"
            )));
        }
    }
    Ok(())
}

fn write_meta<W: Write>(w: &mut W, meta: &Metadata) -> Result<()> {
    for (k, v) in meta {
        writeln!(w, "# {k} = {v}")?;
    }
    Ok(())
}

/// Splits leading `# key = value` lines from the remaining data lines.
fn read_lines<R: BufRead>(r: &mut R) -> Result<(Metadata, Vec<String>)> {
    let mut meta = Metadata::new();
    let mut rows = Vec::new();
    for line in r.lines() {
        let line = line?;
        if let Some(rest) = line.strip_prefix('#') {
            let (k, v) = rest
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("header line without '=': {line:?}")))?;
            meta.insert(k.trim().to_string(), v.trim().to_string());
        } else if !line.is_empty() {
            rows.push(line);
        }
    }
    Ok((meta, rows))
}

fn parse_f64(field: &str, context: &str) -> Result<f64> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|_| Error::Format(format!("bad float {field:?} in {context}")))
}

fn take_meta_f64(meta: &mut Metadata, key: &str) -> Result<f64> {
    let v = meta
        .remove(key)
        .ok_or_else(|| Error::Format(format!("missing header key {key:?}")))?;
    parse_f64(&v, key)
}

// ---------------------------------------------------------------------------
// Field records
// ---------------------------------------------------------------------------

/// Columns t_ns, re, im; the demodulation frame rides in the header so the
/// file alone rebuilds the record.
pub fn write_field_csv<W: Write>(w: &mut W, record: &FieldRecord, meta: &Metadata) -> Result<()> {
    record.validate()?;
    check_meta(meta)?;
    write_meta(w, meta)?;
    writeln!(w, "# frame_rad_per_s = {}", record.frame)?;
    writeln!(w, "t_ns,re,im")?;
    for (t, a) in record.t_ns.iter().zip(&record.amp) {
        writeln!(w, "{t},{},{}", a.re, a.im)?;
    }
    Ok(())
}

pub fn read_field_csv<R: BufRead>(r: &mut R) -> Result<(FieldRecord, Metadata)> {
    let (mut meta, rows) = read_lines(r)?;
    let frame = take_meta_f64(&mut meta, "frame_rad_per_s")?;
    let mut rows = rows.into_iter();
    match rows.next().as_deref() {
        Some("t_ns,re,im") => {}
        other => return Err(Error::Format(format!("expected column header, got {other:?}"))),
    }
    let mut t_ns = Vec::new();
    let mut amp = Vec::new();
    for row in rows {
        let mut fields = row.split(',');
        let (Some(t), Some(re), Some(im), None) =
            (fields.next(), fields.next(), fields.next(), fields.next())
        else {
            return Err(Error::Format(format!("expected 3 fields, got {row:?}")));
        };
        t_ns.push(parse_f64(t, "t_ns")?);
        amp.push(C64::new(parse_f64(re, "re")?, parse_f64(im, "im")?));
    }
    let record = FieldRecord { t_ns, amp, frame };
    record.validate()?;
    Ok((record, meta))
}

#[derive(Serialize, Deserialize)]
struct FieldJson {
    frame_rad_per_s: f64,
    t_ns: Vec<f64>,
    re: Vec<f64>,
    im: Vec<f64>,
    metadata: Metadata,
}

pub fn write_field_json<W: Write>(w: &mut W, record: &FieldRecord, meta: &Metadata) -> Result<()> {
    record.validate()?;
    let doc = FieldJson {
        frame_rad_per_s: record.frame,
        t_ns: record.t_ns.clone(),
        re: record.amp.iter().map(|a| a.re).collect(),
        im: record.amp.iter().map(|a| a.im).collect(),
        metadata: meta.clone(),
    };
    serde_json::to_writer_pretty(&mut *w, &doc)?;
    writeln!(w)?;
    Ok(())
}

pub fn read_field_json<R: Read>(r: &mut R) -> Result<(FieldRecord, Metadata)> {
    let doc: FieldJson = serde_json::from_reader(r)?;
    if doc.re.len() != doc.t_ns.len() || doc.im.len() != doc.t_ns.len() {
        return Err(Error::Format("t_ns/re/im lengths differ".into()));
    }
    let record = FieldRecord {
        t_ns: doc.t_ns,
        amp: doc.re.iter().zip(&doc.im).map(|(&re, &im)| C64::new(re, im)).collect(),
        frame: doc.frame_rad_per_s,
    };
    record.validate()?;
    Ok((record, doc.metadata))
}

// ---------------------------------------------------------------------------
// IQ waveforms
// ---------------------------------------------------------------------------

/// Columns t_ns, i, q for AWG-style consumption. The grid origin and step
/// are kept in the header in seconds (their native unit) because the
/// per-row t_ns column is derived and not exactly invertible.
pub fn write_iq_csv<W: Write>(w: &mut W, iq: &IqWaveform, meta: &Metadata) -> Result<()> {
    iq.validate()?;
    check_meta(meta)?;
    write_meta(w, meta)?;
    writeln!(w, "# t0_s = {}", iq.t0)?;
    writeln!(w, "# dt_s = {}", iq.dt)?;
    writeln!(w, "t_ns,i,q")?;
    for (k, (i, q)) in iq.i.iter().zip(&iq.q).enumerate() {
        let t_ns = (iq.t0 + k as f64 * iq.dt) * 1e9;
        writeln!(w, "{t_ns},{i},{q}")?;
    }
    Ok(())
}

pub fn read_iq_csv<R: BufRead>(r: &mut R) -> Result<(IqWaveform, Metadata)> {
    let (mut meta, rows) = read_lines(r)?;
    let t0 = take_meta_f64(&mut meta, "t0_s")?;
    let dt = take_meta_f64(&mut meta, "dt_s")?;
    let mut rows = rows.into_iter();
    match rows.next().as_deref() {
        Some("t_ns,i,q") => {}
        other => return Err(Error::Format(format!("expected column header, got {other:?}"))),
    }
    let mut i = Vec::new();
    let mut q = Vec::new();
    for row in rows {
        let mut fields = row.split(',');
        let (Some(_t), Some(fi), Some(fq), None) =
            (fields.next(), fields.next(), fields.next(), fields.next())
        else {
            return Err(Error::Format(format!("expected 3 fields, got {row:?}")));
        };
        i.push(parse_f64(fi, "i")?);
        q.push(parse_f64(fq, "q")?);
    }
    let iq = IqWaveform { t0, dt, i, q };
    iq.validate()?;
    Ok((iq, meta))
}

#[derive(Serialize, Deserialize)]
struct IqJson {
    t0_s: f64,
    dt_s: f64,
    i: Vec<f64>,
    q: Vec<f64>,
    metadata: Metadata,
}

pub fn write_iq_json<W: Write>(w: &mut W, iq: &IqWaveform, meta: &Metadata) -> Result<()> {
    iq.validate()?;
    let doc =
        IqJson { t0_s: iq.t0, dt_s: iq.dt, i: iq.i.clone(), q: iq.q.clone(), metadata: meta.clone() };
    serde_json::to_writer_pretty(&mut *w, &doc)?;
    writeln!(w)?;
    Ok(())
}

pub fn read_iq_json<R: Read>(r: &mut R) -> Result<(IqWaveform, Metadata)> {
    let doc: IqJson = serde_json::from_reader(r)?;
    let iq = IqWaveform { t0: doc.t0_s, dt: doc.dt_s, i: doc.i, q: doc.q };
    iq.validate()?;
    Ok((iq, doc.metadata))
}

// ---------------------------------------------------------------------------
// Shot sets
// ---------------------------------------------------------------------------

/// Packed little-endian layout: magic "PFSH", version u32, shot count u64,
/// then interleaved re/im f64 per shot. Kind and seed are not part of the
/// format; readers supply them.
pub fn write_shots<W: Write>(w: &mut W, shots: &ShotSet) -> Result<()> {
    shots.validate()?;
    w.write_all(SHOT_MAGIC)?;
    w.write_all(&SHOT_VERSION.to_le_bytes())?;
    w.write_all(&(shots.samples.len() as u64).to_le_bytes())?;
    for s in &shots.samples {
        w.write_all(&s.re.to_le_bytes())?;
        w.write_all(&s.im.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_shots<R: Read>(r: &mut R, kind: ShotKind, seed: u64) -> Result<ShotSet> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != SHOT_MAGIC {
        return Err(Error::Format(format!("bad shot-file magic {magic:?}")));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != SHOT_VERSION {
        return Err(Error::Format(format!(
            "unsupported shot-file version {version} (expected {SHOT_VERSION})"
        )));
    }
    let mut count = [0u8; 8];
    r.read_exact(&mut count)?;
    let n = u64::from_le_bytes(count) as usize;
    let mut samples = Vec::with_capacity(n);
    let mut pair = [0u8; 16];
    for _ in 0..n {
        r.read_exact(&mut pair)?;
        let re = f64::from_le_bytes(pair[..8].try_into().expect("8-byte slice"));
        let im = f64::from_le_bytes(pair[8..].try_into().expect("8-byte slice"));
        samples.push(C64::new(re, im));
    }
    let shots = ShotSet { samples, kind, seed };
    shots.validate()?;
    Ok(shots)
}

pub fn write_shots_csv<W: Write>(w: &mut W, shots: &ShotSet, meta: &Metadata) -> Result<()> {
    shots.validate()?;
    check_meta(meta)?;
    write_meta(w, meta)?;
    writeln!(w, "# kind = {}", shots.kind.as_str())?;
    writeln!(w, "# seed = {}", shots.seed)?;
    writeln!(w, "re,im")?;
    for s in &shots.samples {
        writeln!(w, "{},{}", s.re, s.im)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Histograms
// ---------------------------------------------------------------------------

/// One row per bin (x center, y center, count), x fastest, with the grid
/// geometry in the header.
pub fn write_histogram_csv<W: Write>(w: &mut W, hist: &Histogram2d, meta: &Metadata) -> Result<()> {
    if hist.counts.len() != hist.nx * hist.ny {
        return Err(Error::DimensionMismatch {
            expected: hist.nx * hist.ny,
            got: hist.counts.len(),
        });
    }
    check_meta(meta)?;
    write_meta(w, meta)?;
    writeln!(w, "# x0 = {}", hist.x0)?;
    writeln!(w, "# y0 = {}", hist.y0)?;
    writeln!(w, "# dx = {}", hist.dx)?;
    writeln!(w, "# dy = {}", hist.dy)?;
    writeln!(w, "# nx = {}", hist.nx)?;
    writeln!(w, "# ny = {}", hist.ny)?;
    writeln!(w, "x,y,count")?;
    for iy in 0..hist.ny {
        for ix in 0..hist.nx {
            writeln!(
                w,
                "{},{},{}",
                hist.center_x(ix),
                hist.center_y(iy),
                hist.counts[iy * hist.nx + ix]
            )?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Matrices
// ---------------------------------------------------------------------------

/// Row-major complex matrix with free-form metadata; the JSON form shared
/// by density, Choi and Pauli-transfer exports.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatrixJson {
    pub dims: [usize; 2],
    /// Row-major [re, im] pairs.
    pub data: Vec<[f64; 2]>,
    pub metadata: Metadata,
}

impl MatrixJson {
    pub fn from_cmat(m: &CMat, meta: &Metadata) -> Self {
        let mut data = Vec::with_capacity(m.nrows() * m.ncols());
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                data.push([m[(r, c)].re, m[(r, c)].im]);
            }
        }
        MatrixJson { dims: [m.nrows(), m.ncols()], data, metadata: meta.clone() }
    }

    pub fn to_cmat(&self) -> Result<CMat> {
        let [rows, cols] = self.dims;
        if rows * cols != self.data.len() {
            return Err(Error::Format(format!(
                "dims {rows}x{cols} but {} entries",
                self.data.len()
            )));
        }
        let mut m = CMat::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                let [re, im] = self.data[r * cols + c];
                m[(r, c)] = C64::new(re, im);
            }
        }
        Ok(m)
    }
}

pub fn write_matrix_json<W: Write>(w: &mut W, doc: &MatrixJson) -> Result<()> {
    serde_json::to_writer_pretty(&mut *w, doc)?;
    writeln!(w)?;
    Ok(())
}

pub fn read_matrix_json<R: Read>(r: &mut R) -> Result<MatrixJson> {
    Ok(serde_json::from_reader(r)?)
}

pub fn density_to_json(rho: &DensityMatrix, meta: &Metadata) -> Result<MatrixJson> {
    rho.validate()?;
    Ok(MatrixJson::from_cmat(&rho.to_cmat(), meta))
}

pub fn density_from_json(doc: &MatrixJson) -> Result<DensityMatrix> {
    let m = doc.to_cmat()?;
    if m.nrows() != m.ncols() {
        return Err(Error::Format(format!("density matrix must be square, got {:?}", doc.dims)));
    }
    let rho = DensityMatrix::from_cmat(&m);
    rho.validate()?;
    Ok(rho)
}

pub fn choi_to_json(choi: &ChoiMatrix, meta: &Metadata) -> Result<MatrixJson> {
    choi.validate()?;
    Ok(MatrixJson::from_cmat(&choi.mat, meta))
}

pub fn choi_from_json(doc: &MatrixJson) -> Result<ChoiMatrix> {
    let choi = ChoiMatrix { mat: doc.to_cmat()? };
    choi.validate()?;
    Ok(choi)
}

pub fn ptm_to_json(ptm: &PauliTransferMatrix, meta: &Metadata) -> MatrixJson {
    let mut data = Vec::with_capacity(16);
    for row in &ptm.r {
        for &v in row {
            data.push([v, 0.0]);
        }
    }
    MatrixJson { dims: [4, 4], data, metadata: meta.clone() }
}

pub fn ptm_from_json(doc: &MatrixJson) -> Result<PauliTransferMatrix> {
    if doc.dims != [4, 4] || doc.data.len() != 16 {
        return Err(Error::Format(format!("PTM must be 4x4, got {:?}", doc.dims)));
    }
    let mut r = [[0.0; 4]; 4];
    for (idx, [re, im]) in doc.data.iter().enumerate() {
        if *im != 0.0 {
            return Err(Error::Format(format!("PTM entry {idx} has imaginary part {im}")));
        }
        r[idx / 4][idx % 4] = *re;
    }
    Ok(PauliTransferMatrix { r })
}

/// Flattens a solver report into metadata entries, for embedding next to a
/// reconstructed matrix.
pub fn solver_metadata(report: &SolverReport) -> Metadata {
    let mut meta = Metadata::new();
    meta.insert("solver_iterations".into(), report.iterations.to_string());
    meta.insert("solver_objective".into(), format!("{:e}", report.objective));
    meta.insert("solver_grad_norm".into(), format!("{:e}", report.grad_norm));
    meta.insert("solver_converged".into(), report.converged.to_string());
    meta
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tomography::cardinal_states;
    use std::io::Cursor;

    fn awkward_field() -> FieldRecord {
        // deliberately non-representable decimals and denormal-ish values
        let n = 64;
        let t_ns: Vec<f64> = (0..n).map(|k| k as f64 * 0.3).collect();
        let amp: Vec<C64> = (0..n)
            .map(|k| {
                let x = (k as f64 * 0.7183).sin() * 1e-3;
                let y = (k as f64 * 1.291).cos() / 3.0;
                C64::new(x, y)
            })
            .collect();
        FieldRecord { t_ns, amp, frame: 2.0 * std::f64::consts::PI * 1.13e9 / 7.0 }
    }

    fn meta_pair() -> Metadata {
        let mut m = Metadata::new();
        m.insert("config_sha256".into(), "0123abcd".into());
        m.insert("toolkit_version".into(), "0.1.0".into());
        m
    }

    #[test]
    fn field_csv_round_trip_is_bit_exact() {
        let rec = awkward_field();
        let meta = meta_pair();
        let mut buf = Vec::new();
        write_field_csv(&mut buf, &rec, &meta).unwrap();
        let (back, meta_back) = read_field_csv(&mut Cursor::new(&buf)).unwrap();
        assert_eq!(meta_back, meta);
        assert_eq!(back.frame.to_bits(), rec.frame.to_bits());
        for (a, b) in rec.t_ns.iter().zip(&back.t_ns) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for (a, b) in rec.amp.iter().zip(&back.amp) {
            assert_eq!(a.re.to_bits(), b.re.to_bits());
            assert_eq!(a.im.to_bits(), b.im.to_bits());
        }

        // a second write of the parsed record is byte-identical
        let mut buf2 = Vec::new();
        write_field_csv(&mut buf2, &back, &meta_back).unwrap();
        assert_eq!(buf, buf2);

        let mut bad = Metadata::new();
        bad.insert("k=brk".into(), "v".into());
        assert!(matches!(
            write_field_csv(&mut Vec::new(), &rec, &bad),
            Err(Error::InvalidParam(_))
        ));
    }

    #[test]
    fn field_json_round_trip_is_bit_exact() {
        let rec = awkward_field();
        let mut buf = Vec::new();
        write_field_json(&mut buf, &rec, &meta_pair()).unwrap();
        let (back, meta) = read_field_json(&mut Cursor::new(&buf)).unwrap();
        assert_eq!(meta, meta_pair());
        for (a, b) in rec.amp.iter().zip(&back.amp) {
            assert_eq!(a.re.to_bits(), b.re.to_bits());
            assert_eq!(a.im.to_bits(), b.im.to_bits());
        }
        assert_eq!(back.frame.to_bits(), rec.frame.to_bits());
    }

    #[test]
    fn iq_round_trips_through_csv_and_json() {
        let n = 40;
        let iq = IqWaveform {
            t0: -3.7e-8,
            dt: 1.0e-9 / 3.0,
            i: (0..n).map(|k| (k as f64 * 0.21).cos() * 0.013).collect(),
            q: (0..n).map(|k| -(k as f64 * 0.21).sin() * 0.013).collect(),
        };
        let mut buf = Vec::new();
        write_iq_csv(&mut buf, &iq, &meta_pair()).unwrap();
        let (back, meta) = read_iq_csv(&mut Cursor::new(&buf)).unwrap();
        assert_eq!(meta, meta_pair());
        assert_eq!(back.t0.to_bits(), iq.t0.to_bits());
        assert_eq!(back.dt.to_bits(), iq.dt.to_bits());
        for (a, b) in iq.i.iter().zip(&back.i) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for (a, b) in iq.q.iter().zip(&back.q) {
            assert_eq!(a.to_bits(), b.to_bits());
        }

        let mut jb = Vec::new();
        write_iq_json(&mut jb, &iq, &Metadata::new()).unwrap();
        let (jback, _) = read_iq_json(&mut Cursor::new(&jb)).unwrap();
        assert_eq!(jback.dt.to_bits(), iq.dt.to_bits());
        assert_eq!(jback.i.len(), iq.i.len());
    }

    #[test]
    fn shot_binary_round_trips_and_rejects_corruption() {
        let shots = ShotSet {
            samples: (0..257)
                .map(|k| C64::new((k as f64).sqrt() - 7.0, -(k as f64) / 11.0))
                .collect(),
            kind: ShotKind::On,
            seed: 42,
        };
        let mut buf = Vec::new();
        write_shots(&mut buf, &shots).unwrap();
        assert_eq!(buf.len(), 4 + 4 + 8 + 257 * 16);
        let back = read_shots(&mut Cursor::new(&buf), ShotKind::On, 42).unwrap();
        assert_eq!(back.samples.len(), shots.samples.len());
        for (a, b) in shots.samples.iter().zip(&back.samples) {
            assert_eq!(a.re.to_bits(), b.re.to_bits());
            assert_eq!(a.im.to_bits(), b.im.to_bits());
        }

        let mut bad_magic = buf.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            read_shots(&mut Cursor::new(&bad_magic), ShotKind::On, 0),
            Err(Error::Format(_))
        ));

        let mut bad_version = buf.clone();
        bad_version[4] = 9;
        assert!(matches!(
            read_shots(&mut Cursor::new(&bad_version), ShotKind::On, 0),
            Err(Error::Format(_))
        ));

        let truncated = &buf[..buf.len() - 5];
        assert!(matches!(
            read_shots(&mut Cursor::new(truncated), ShotKind::On, 0),
            Err(Error::Io(_))
        ));

        let mut csv = Vec::new();
        write_shots_csv(&mut csv, &shots, &Metadata::new()).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("# kind = on\n# seed = 42\nre,im\n"));
        assert_eq!(text.lines().count(), 3 + 257);
    }

    #[test]
    fn histogram_csv_lists_every_bin() {
        let hist = Histogram2d {
            x0: -1.0,
            y0: -2.0,
            dx: 1.0,
            dy: 2.0,
            nx: 2,
            ny: 2,
            counts: vec![3, 0, 1, 9],
        };
        let mut buf = Vec::new();
        write_histogram_csv(&mut buf, &hist, &meta_pair()).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(rows, vec!["x,y,count", "-0.5,-1,3", "0.5,-1,0", "-0.5,1,1", "0.5,1,9"]);
        assert!(text.contains("# nx = 2"));
    }

    #[test]
    fn matrix_json_round_trips_for_density_choi_and_ptm() {
        let rho = &cardinal_states()[4];
        let doc = density_to_json(rho, &meta_pair()).unwrap();
        let mut buf = Vec::new();
        write_matrix_json(&mut buf, &doc).unwrap();
        let parsed = read_matrix_json(&mut Cursor::new(&buf)).unwrap();
        let back = density_from_json(&parsed).unwrap();
        for r in 0..2 {
            for c in 0..2 {
                assert_eq!(back.get(r, c), rho.get(r, c));
            }
        }
        assert_eq!(parsed.metadata, meta_pair());

        let choi = ChoiMatrix::identity_channel();
        let cdoc = choi_to_json(&choi, &Metadata::new()).unwrap();
        let cback = choi_from_json(&cdoc).unwrap();
        assert!((&cback.mat - &choi.mat).norm() < 1e-15);

        let ptm = crate::tomography::choi_to_ptm(&choi);
        let pdoc = ptm_to_json(&ptm, &Metadata::new());
        let pback = ptm_from_json(&pdoc).unwrap();
        assert_eq!(pback, ptm);

        let mut broken = pdoc.clone();
        broken.dims = [3, 4];
        assert!(matches!(ptm_from_json(&broken), Err(Error::Format(_))));
        let mut short = cdoc.clone();
        short.data.pop();
        assert!(matches!(choi_from_json(&short), Err(Error::Format(_))));
    }
}
