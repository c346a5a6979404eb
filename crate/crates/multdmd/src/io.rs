//! Text file formats.
//!
//! All files are newline-delimited UTF-8 CSV with `.` decimals. Floats are
//! written in Rust's shortest round-trip form, so save/load reproduces every
//! value bit-for-bit. Lines starting with `#` are comments and are skipped by
//! every parser; the pipeline uses them to stamp outputs with the config hash.
//!
//! Formats:
//! * snapshots:   header `d=<int>,M=<int>,weighted=<0|1>`, then one row per
//!   pair with `d` columns of x, `d` columns of y and an optional weight;
//! * field matrix: header `D=<int>,T=<int>`, then `T` rows of `D` values;
//! * dictionary:  header `N=<int>,d=<int>`, then `N` centroid rows;
//! * operator:    header `N=<int>,variant=<multdmd|dense>`; `multdmd` rows
//!   are `(row, column)` positions of the unit entries, `dense` rows hold the
//!   full matrix;
//! * spectrum:    header `re,im,residual,support,cycle_length`;
//! * POD basis:   header `D=<int>,r=<int>`, a mean row, `r` mode rows, and a
//!   singular-value row.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2};

use crate::dictionary::Dictionary;
use crate::dynsys::SnapshotSet;
use crate::error::{Error, Result};
use crate::estimators::KoopmanApprox;
use crate::pod::PodBasis;
use crate::spectral::SpectralResult;

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

/// Lines of a text file with comments dropped, keeping 1-based line numbers.
fn data_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        out.push((idx + 1, line));
    }
    Ok(out)
}

/// Parses a `k=v` header such as `d=2,M=10,weighted=0` into the values of
/// `keys`, in order.
fn parse_header(path: &Path, line_no: usize, line: &str, keys: &[&str]) -> Result<Vec<String>> {
    let mut values = vec![None; keys.len()];
    for field in line.split(',') {
        let (k, v) = field
            .split_once('=')
            .ok_or_else(|| parse_err(path, line_no, format!("malformed header field `{field}`")))?;
        match keys.iter().position(|key| *key == k.trim()) {
            Some(pos) => values[pos] = Some(v.trim().to_string()),
            None => {
                return Err(parse_err(path, line_no, format!("unknown header key `{k}`")));
            }
        }
    }
    values
        .into_iter()
        .enumerate()
        .map(|(i, v)| v.ok_or_else(|| parse_err(path, line_no, format!("missing header key `{}`", keys[i]))))
        .collect()
}

fn parse_usize(path: &Path, line_no: usize, s: &str, what: &str) -> Result<usize> {
    s.parse()
        .map_err(|_| parse_err(path, line_no, format!("{what}: expected integer, got `{s}`")))
}

fn parse_f64(path: &Path, line_no: usize, s: &str) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| parse_err(path, line_no, format!("expected number, got `{s}`")))
}

fn writer(path: &Path) -> Result<BufWriter<File>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(BufWriter::new(file))
}

fn write_comments(w: &mut impl Write, path: &Path, comments: &[String]) -> Result<()> {
    for c in comments {
        writeln!(w, "# {c}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn join_row<'a>(values: impl Iterator<Item = &'a f64>) -> String {
    values.map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

pub fn save_snapshots(s: &SnapshotSet, path: &Path) -> Result<()> {
    save_snapshots_with_comments(s, path, &[])
}

pub fn save_snapshots_with_comments(s: &SnapshotSet, path: &Path, comments: &[String]) -> Result<()> {
    let mut w = writer(path)?;
    let uniform = 1.0 / s.count() as f64;
    let weighted = s.weights().iter().any(|v| v.to_bits() != uniform.to_bits());
    write_comments(&mut w, path, comments)?;
    writeln!(w, "d={},M={},weighted={}", s.dim(), s.count(), weighted as u8)
        .map_err(|e| Error::io(path, e))?;
    for m in 0..s.count() {
        let mut fields: Vec<String> = s.x().row(m).iter().map(|v| v.to_string()).collect();
        fields.extend(s.y().row(m).iter().map(|v| v.to_string()));
        if weighted {
            fields.push(s.weights()[m].to_string());
        }
        writeln!(w, "{}", fields.join(",")).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_snapshots(path: &Path) -> Result<SnapshotSet> {
    let lines = data_lines(path)?;
    let Some(((header_no, header), rows)) = lines.split_first() else {
        return Err(parse_err(path, 1, "missing header line"));
    };
    let vals = parse_header(path, *header_no, header, &["d", "M", "weighted"])?;
    let d = parse_usize(path, *header_no, &vals[0], "d")?;
    let m = parse_usize(path, *header_no, &vals[1], "M")?;
    let weighted = match vals[2].as_str() {
        "0" => false,
        "1" => true,
        other => return Err(parse_err(path, *header_no, format!("weighted must be 0 or 1, got `{other}`"))),
    };
    if rows.len() != m {
        return Err(parse_err(
            path,
            *header_no,
            format!("header declares M={m} but file has {} data rows", rows.len()),
        ));
    }
    let expected = 2 * d + weighted as usize;
    let mut x = Array2::zeros((m, d));
    let mut y = Array2::zeros((m, d));
    let mut weights = vec![1.0 / m as f64; m];
    for (row, (line_no, line)) in rows.iter().enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != expected {
            return Err(parse_err(
                path,
                *line_no,
                format!("expected {expected} columns, got {}", fields.len()),
            ));
        }
        for k in 0..d {
            x[[row, k]] = parse_f64(path, *line_no, fields[k])?;
            y[[row, k]] = parse_f64(path, *line_no, fields[d + k])?;
        }
        if weighted {
            weights[row] = parse_f64(path, *line_no, fields[2 * d])?;
        }
    }
    SnapshotSet::new(x, y, weights)
}

/// Writes a `D x T` field matrix as `T` rows of `D` values.
pub fn save_field_matrix(fields: ArrayView2<'_, f64>, path: &Path, comments: &[String]) -> Result<()> {
    let (d, t) = fields.dim();
    let mut w = writer(path)?;
    write_comments(&mut w, path, comments)?;
    writeln!(w, "D={d},T={t}").map_err(|e| Error::io(path, e))?;
    for col in 0..t {
        writeln!(w, "{}", join_row(fields.column(col).into_iter())).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Loads a field matrix, returned as `D x T` (one column per stored row).
pub fn load_field_matrix(path: &Path) -> Result<Array2<f64>> {
    let lines = data_lines(path)?;
    let Some(((header_no, header), rows)) = lines.split_first() else {
        return Err(parse_err(path, 1, "missing header line"));
    };
    let vals = parse_header(path, *header_no, header, &["D", "T"])?;
    let d = parse_usize(path, *header_no, &vals[0], "D")?;
    let t = parse_usize(path, *header_no, &vals[1], "T")?;
    if rows.len() != t {
        return Err(parse_err(
            path,
            *header_no,
            format!("header declares T={t} but file has {} data rows", rows.len()),
        ));
    }
    let mut fields = Array2::zeros((d, t));
    for (col, (line_no, line)) in rows.iter().enumerate() {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != d {
            return Err(parse_err(
                path,
                *line_no,
                format!("expected {d} columns, got {}", parts.len()),
            ));
        }
        for (row, part) in parts.iter().enumerate() {
            fields[[row, col]] = parse_f64(path, *line_no, part)?;
        }
    }
    Ok(fields)
}

pub fn save_dictionary(dict: &Dictionary, path: &Path, comments: &[String]) -> Result<()> {
    let mut w = writer(path)?;
    write_comments(&mut w, path, comments)?;
    writeln!(w, "N={},d={}", dict.len(), dict.dim()).map_err(|e| Error::io(path, e))?;
    for row in dict.centroids().rows() {
        writeln!(w, "{}", join_row(row.into_iter())).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_dictionary(path: &Path) -> Result<Dictionary> {
    let lines = data_lines(path)?;
    let Some(((header_no, header), rows)) = lines.split_first() else {
        return Err(parse_err(path, 1, "missing header line"));
    };
    let vals = parse_header(path, *header_no, header, &["N", "d"])?;
    let n = parse_usize(path, *header_no, &vals[0], "N")?;
    let d = parse_usize(path, *header_no, &vals[1], "d")?;
    if rows.len() != n {
        return Err(parse_err(
            path,
            *header_no,
            format!("header declares N={n} but file has {} centroid rows", rows.len()),
        ));
    }
    let mut centroids = Array2::zeros((n, d));
    for (i, (line_no, line)) in rows.iter().enumerate() {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != d {
            return Err(parse_err(
                path,
                *line_no,
                format!("expected {d} columns, got {}", parts.len()),
            ));
        }
        for (k, part) in parts.iter().enumerate() {
            centroids[[i, k]] = parse_f64(path, *line_no, part)?;
        }
    }
    Dictionary::from_centroids(centroids)
}

pub fn save_operator(k: &KoopmanApprox, path: &Path, comments: &[String]) -> Result<()> {
    let mut w = writer(path)?;
    write_comments(&mut w, path, comments)?;
    match k {
        KoopmanApprox::MultDmd { sigma, .. } => {
            writeln!(w, "N={},variant=multdmd", sigma.len()).map_err(|e| Error::io(path, e))?;
            for (i, target) in sigma.iter().enumerate() {
                if let Some(j) = target {
                    writeln!(w, "{i},{j}").map_err(|e| Error::io(path, e))?;
                }
            }
        }
        KoopmanApprox::Dense { matrix, .. } => {
            writeln!(w, "N={},variant=dense", matrix.nrows()).map_err(|e| Error::io(path, e))?;
            for row in matrix.rows() {
                writeln!(w, "{}", join_row(row.into_iter())).map_err(|e| Error::io(path, e))?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn save_spectrum(r: &SpectralResult, path: &Path, comments: &[String]) -> Result<()> {
    let mut w = writer(path)?;
    write_comments(&mut w, path, comments)?;
    writeln!(w, "re,im,residual,support,cycle_length").map_err(|e| Error::io(path, e))?;
    for (idx, lambda) in r.eigenvalues.iter().enumerate() {
        let residual = r
            .residuals
            .as_ref()
            .map(|res| res[idx].to_string())
            .unwrap_or_default();
        let cycle_length = r
            .phases
            .as_ref()
            .map(|p| p[idx].order.to_string())
            .unwrap_or_else(|| "0".to_string());
        writeln!(
            w,
            "{},{},{},{},{}",
            lambda.re, lambda.im, residual, r.support_sizes[idx], cycle_length
        )
        .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Cell-indexed eigenvector export joined with centroid coordinates:
/// columns `cell, centroid..., re_0, im_0, re_1, im_1, ...`.
///
/// When `gram` is given, each column is rescaled to unit norm in the
/// G-weighted inner product before writing, matching how eigenfunctions are
/// normalized for plotting.
pub fn save_eigenvectors(
    r: &SpectralResult,
    dict: &Dictionary,
    gram: Option<&[f64]>,
    path: &Path,
    comments: &[String],
) -> Result<()> {
    let n = dict.len();
    let k = r.eigenvalues.len();
    if r.eigvecs.nrows() != n {
        return Err(Error::Domain(format!(
            "eigenvectors have {} cells but dictionary has {n}",
            r.eigvecs.nrows()
        )));
    }
    let scales: Vec<f64> = (0..k)
        .map(|col| match gram {
            Some(g) => {
                let norm_sq: f64 = (0..n).map(|i| g[i] * r.eigvecs[[i, col]].norm_sqr()).sum();
                if norm_sq > 0.0 {
                    norm_sq.sqrt().recip()
                } else {
                    1.0
                }
            }
            None => 1.0,
        })
        .collect();
    let mut w = writer(path)?;
    write_comments(&mut w, path, comments)?;
    let coord_names: Vec<String> = (0..dict.dim()).map(|j| format!("mu{j}")).collect();
    let vec_names: Vec<String> = (0..k).flat_map(|j| [format!("re{j}"), format!("im{j}")]).collect();
    writeln!(w, "cell,{},{}", coord_names.join(","), vec_names.join(","))
        .map_err(|e| Error::io(path, e))?;
    for i in 0..n {
        let mut fields = vec![i.to_string()];
        fields.extend(dict.centroids().row(i).iter().map(|v| v.to_string()));
        for col in 0..k {
            let v = r.eigvecs[[i, col]] * scales[col];
            fields.push(v.re.to_string());
            fields.push(v.im.to_string());
        }
        writeln!(w, "{}", fields.join(",")).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn save_pod_basis(b: &PodBasis, path: &Path, comments: &[String]) -> Result<()> {
    let mut w = writer(path)?;
    write_comments(&mut w, path, comments)?;
    writeln!(w, "D={},r={}", b.dim(), b.rank()).map_err(|e| Error::io(path, e))?;
    writeln!(w, "{}", join_row(b.mean_field().iter())).map_err(|e| Error::io(path, e))?;
    for col in 0..b.rank() {
        writeln!(w, "{}", join_row(b.modes().column(col).into_iter())).map_err(|e| Error::io(path, e))?;
    }
    writeln!(w, "{}", join_row(b.singular_values().iter())).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_pod_basis(path: &Path) -> Result<PodBasis> {
    let lines = data_lines(path)?;
    let Some(((header_no, header), rows)) = lines.split_first() else {
        return Err(parse_err(path, 1, "missing header line"));
    };
    let vals = parse_header(path, *header_no, header, &["D", "r"])?;
    let d = parse_usize(path, *header_no, &vals[0], "D")?;
    let r = parse_usize(path, *header_no, &vals[1], "r")?;
    if rows.len() != r + 2 {
        return Err(parse_err(
            path,
            *header_no,
            format!("expected {} data rows (mean, {r} modes, singular values)", r + 2),
        ));
    }
    let parse_row = |(line_no, line): &(usize, String), len: usize| -> Result<Vec<f64>> {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != len {
            return Err(parse_err(
                path,
                *line_no,
                format!("expected {len} columns, got {}", parts.len()),
            ));
        }
        parts.iter().map(|p| parse_f64(path, *line_no, p)).collect()
    };
    let mean = parse_row(&rows[0], d)?;
    let mut modes = Array2::zeros((d, r));
    for col in 0..r {
        let row = parse_row(&rows[1 + col], d)?;
        for i in 0..d {
            modes[[i, col]] = row[i];
        }
    }
    let singular = parse_row(&rows[r + 1], r)?;
    PodBasis::from_parts(mean, modes, singular)
}
