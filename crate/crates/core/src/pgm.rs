//! Minimal binary PGM (P5, maxval 255) reader/writer used by the diffusion
//! demo; values map linearly to [0, 1].

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub struct Gray {
    pub w: usize,
    pub h: usize,
    /// Row-major intensities in [0, 1].
    pub data: Vec<f64>,
}

pub fn write_pgm(path: &Path, w: usize, h: usize, data: &[f64]) -> Result<()> {
    if data.len() != w * h {
        return Err(Error::invalid(
            "write_pgm",
            format!("{} values for {w}x{h}", data.len()),
        ));
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P5\n{w} {h}\n255\n")?;
    let bytes: Vec<u8> = data
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<Gray> {
    let mut raw = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut raw)?;
    let bad = |msg: &str| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        msg: msg.to_string(),
    };
    // header: magic, width, height, maxval as whitespace-separated tokens,
    // with '#' comments running to end of line
    let mut pos = 0usize;
    let mut tokens = Vec::new();
    while tokens.len() < 4 && pos < raw.len() {
        match raw[pos] {
            b'#' => {
                while pos < raw.len() && raw[pos] != b'\n' {
                    pos += 1;
                }
            }
            c if c.is_ascii_whitespace() => pos += 1,
            _ => {
                let start = pos;
                while pos < raw.len() && !raw[pos].is_ascii_whitespace() && raw[pos] != b'#' {
                    pos += 1;
                }
                tokens.push(
                    std::str::from_utf8(&raw[start..pos])
                        .map_err(|_| bad("non-ascii header"))?
                        .to_string(),
                );
            }
        }
    }
    if tokens.len() < 4 || tokens[0] != "P5" {
        return Err(bad("expected binary PGM (P5) header"));
    }
    let w: usize = tokens[1].parse().map_err(|_| bad("bad width"))?;
    let h: usize = tokens[2].parse().map_err(|_| bad("bad height"))?;
    let maxval: usize = tokens[3].parse().map_err(|_| bad("bad maxval"))?;
    if maxval == 0 || maxval > 255 {
        return Err(bad("only maxval 1..=255 supported"));
    }
    pos += 1; // single whitespace byte after maxval
    if raw.len() < pos + w * h {
        return Err(bad("truncated pixel data"));
    }
    let data = raw[pos..pos + w * h]
        .iter()
        .map(|&b| b as f64 / maxval as f64)
        .collect();
    Ok(Gray { w, h, data })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pgm");
        let data: Vec<f64> = (0..12).map(|i| i as f64 / 11.0).collect();
        write_pgm(&path, 4, 3, &data).unwrap();
        let img = read_pgm(&path).unwrap();
        assert_eq!((img.w, img.h), (4, 3));
        for (a, b) in data.iter().zip(&img.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn comments_and_bad_headers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.pgm");
        std::fs::write(&path, b"P5 # comment\n# another\n2 1\n255\n\x00\xff").unwrap();
        let img = read_pgm(&path).unwrap();
        assert_eq!(img.data, vec![0.0, 1.0]);
        std::fs::write(&path, b"P6\n2 1\n255\n\x00\xff").unwrap();
        assert!(read_pgm(&path).is_err());
    }
}
