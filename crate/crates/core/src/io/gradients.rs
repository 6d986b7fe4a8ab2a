//! FSL-style `bvals` / `bvecs` text files.
//!
//! `bvals` holds one row of N numbers, `bvecs` three rows (x, y, z) of N
//! numbers. Values are written with Rust's shortest round-trip formatting so
//! a write/read cycle reproduces the scheme exactly.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::GradientScheme;

pub fn read_gradients(
    bvals_path: impl AsRef<Path>,
    bvecs_path: impl AsRef<Path>,
    b0_threshold: f64,
) -> Result<GradientScheme> {
    read_gradients_scaled(bvals_path, bvecs_path, b0_threshold, 1.0)
}

/// Like [`read_gradients`] but multiplies every b-value by `bval_scale`
/// first (use `1e-3` for files in s/mm²).
pub fn read_gradients_scaled(
    bvals_path: impl AsRef<Path>,
    bvecs_path: impl AsRef<Path>,
    b0_threshold: f64,
    bval_scale: f64,
) -> Result<GradientScheme> {
    let read = |p: &Path| std::fs::read_to_string(p).map_err(|e| Error::io(p, e));
    let bvals = read(bvals_path.as_ref())?;
    let bvecs = read(bvecs_path.as_ref())?;
    parse_gradients(&bvals, &bvecs, b0_threshold, bval_scale)
}

fn parse_rows(text: &str, what: &str) -> Result<Vec<Vec<f64>>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(row, line)| {
            line.split_whitespace()
                .map(|tok| {
                    tok.parse::<f64>()
                        .map_err(|_| Error::Format(format!("{what} row {row}: cannot parse {tok:?}")))
                })
                .collect()
        })
        .collect()
}

pub fn parse_gradients(bvals: &str, bvecs: &str, b0_threshold: f64, bval_scale: f64) -> Result<GradientScheme> {
    let bval_rows = parse_rows(bvals, "bvals")?;
    let bvals: Vec<f64> = match bval_rows.as_slice() {
        [row] => row.iter().map(|b| b * bval_scale).collect(),
        // a single column is also common
        rows if !rows.is_empty() && rows.iter().all(|r| r.len() == 1) => {
            rows.iter().map(|r| r[0] * bval_scale).collect()
        }
        _ => return Err(Error::Format(format!("bvals: expected one row, found {}", bval_rows.len()))),
    };
    let vec_rows = parse_rows(bvecs, "bvecs")?;
    if vec_rows.len() != 3 {
        return Err(Error::Format(format!("bvecs: expected 3 rows, found {}", vec_rows.len())));
    }
    for (i, r) in vec_rows.iter().enumerate() {
        if r.len() != bvals.len() {
            return Err(Error::Format(format!(
                "bvecs row {i} has {} entries but bvals has {}",
                r.len(),
                bvals.len()
            )));
        }
    }
    let bvecs = (0..bvals.len())
        .map(|i| [vec_rows[0][i], vec_rows[1][i], vec_rows[2][i]])
        .collect();
    GradientScheme::new(bvals, bvecs, b0_threshold)
}

/// Returns the `(bvals, bvecs)` file contents for a scheme.
pub fn format_gradients(scheme: &GradientScheme) -> (String, String) {
    let join = |it: &mut dyn Iterator<Item = f64>| {
        let mut s = String::new();
        for (i, v) in it.enumerate() {
            if i > 0 {
                s.push(' ');
            }
            write!(s, "{v}").unwrap();
        }
        s.push('\n');
        s
    };
    let bvals = join(&mut scheme.bvals().iter().copied());
    let mut bvecs = String::new();
    for axis in 0..3 {
        bvecs.push_str(&join(&mut scheme.bvecs().iter().map(|v| v[axis])));
    }
    (bvals, bvecs)
}

pub fn write_gradients(
    scheme: &GradientScheme,
    bvals_path: impl AsRef<Path>,
    bvecs_path: impl AsRef<Path>,
) -> Result<()> {
    let (bvals, bvecs) = format_gradients(scheme);
    let (bp, vp) = (bvals_path.as_ref(), bvecs_path.as_ref());
    std::fs::write(bp, bvals).map_err(|e| Error::io(bp, e))?;
    std::fs::write(vp, bvecs).map_err(|e| Error::io(vp, e))
}
