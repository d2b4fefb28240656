//! Deterministic text and image output.
//!
//! Every float is printed with 17 significant digits and a lowercase `e`
//! exponent, lines end with `\n`, and nothing depends on the locale, so a
//! given (config, seed) pair always produces byte-identical files.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::Result;

pub fn fmt_float(x: f64) -> String {
    if x.is_nan() {
        "NaN".to_string()
    } else {
        format!("{x:.16e}")
    }
}

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut text = String::new();
    text.push_str(&header.join(","));
    text.push('\n');
    for row in rows {
        text.push_str(&row.join(","));
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

/// Binary portable graymap, 8 bit.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    debug_assert_eq!(pixels.len(), width * height);
    let mut file = fs::File::create(path)?;
    write!(file, "P5\n{width} {height}\n255\n")?;
    file.write_all(pixels)?;
    Ok(())
}

/// Reads a P5 graymap back; used by verification suites.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let raw = fs::read(path)?;
    let header_err = || {
        std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            format!("{} is not an 8-bit P5 graymap", path.display()),
        )
    };
    // header: magic, width, height, maxval, single whitespace, then raw bytes
    let mut fields = Vec::new();
    let mut pos = 0usize;
    while fields.len() < 4 && pos < raw.len() {
        while pos < raw.len() && raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < raw.len() && !raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(std::str::from_utf8(&raw[start..pos]).map_err(|_| header_err())?);
    }
    if fields.len() != 4 || fields[0] != "P5" || fields[3] != "255" {
        return Err(header_err().into());
    }
    let width: usize = fields[1].parse().map_err(|_| header_err())?;
    let height: usize = fields[2].parse().map_err(|_| header_err())?;
    pos += 1; // the single whitespace after maxval
    if raw.len() < pos + width * height {
        return Err(header_err().into());
    }
    Ok((width, height, raw[pos..pos + width * height].to_vec()))
}
