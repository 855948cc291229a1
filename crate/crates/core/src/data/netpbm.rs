//! Binary PPM (P6) and PGM (P5) files with 8-bit samples.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fields::LabelMap;
use crate::image::RgbImage;

struct Header {
    width: usize,
    height: usize,
    /// Offset of the first payload byte.
    payload: usize,
}

struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: self.pos,
            reason: reason.into(),
        }
    }

    /// Skips whitespace and `#` comments running to the end of the line.
    fn skip_separators(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' || c == b'\r' {
                        break;
                    }
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_separators();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.fail(format!("expected {what}")));
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).expect("ascii digits");
        text.parse().map_err(|_| {
            self.pos = start;
            self.fail(format!("{what} {text} is out of range"))
        })
    }
}

fn parse_header(path: &Path, bytes: &[u8], magic: &[u8; 2], channels: usize) -> Result<Header> {
    let mut cur = Cursor { path, bytes, pos: 0 };
    if bytes.len() < 2 || &bytes[..2] != magic {
        return Err(cur.fail(format!(
            "expected magic {}",
            String::from_utf8_lossy(magic)
        )));
    }
    cur.pos = 2;
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if maxval != 255 {
        return Err(cur.fail(format!("maxval {maxval} is not supported, only 255")));
    }
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        Some(_) => return Err(cur.fail("expected a single whitespace byte after maxval")),
        None => return Err(cur.fail("missing payload")),
    }
    if width == 0 || height == 0 {
        return Err(cur.fail(format!("empty {width}x{height} image")));
    }
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| cur.fail("dimensions overflow"))?;
    let have = bytes.len() - cur.pos;
    if have < need {
        cur.pos = bytes.len();
        return Err(cur.fail(format!("payload holds {have} bytes, expected {need}")));
    }
    Ok(Header {
        width,
        height,
        payload: cur.pos,
    })
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    let h = parse_header(path, &bytes, b"P6", 3)?;
    let end = h.payload + h.width * h.height * 3;
    RgbImage::new(h.width, h.height, bytes[h.payload..end].to_vec())
}

/// Reads a label map; sample values are label codes, 255 being void.
pub fn read_pgm(path: impl AsRef<Path>) -> Result<LabelMap> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    let h = parse_header(path, &bytes, b"P5", 1)?;
    let end = h.payload + h.width * h.height;
    LabelMap::new(h.height, h.width, bytes[h.payload..end].to_vec())
}

/// Writes `bytes` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::Invalid(format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    let result = fs::File::create(&tmp)
        .and_then(|mut f| f.write_all(bytes).and_then(|_| f.sync_all()))
        .and_then(|_| fs::rename(&tmp, path));
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

fn encode(magic: &str, width: usize, height: usize, payload: &[u8]) -> Vec<u8> {
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(payload);
    out
}

pub fn write_ppm(path: impl AsRef<Path>, image: &RgbImage) -> Result<()> {
    write_atomic(
        path.as_ref(),
        &encode("P6", image.width(), image.height(), image.data()),
    )
}

pub fn write_pgm(path: impl AsRef<Path>, labels: &LabelMap) -> Result<()> {
    write_atomic(
        path.as_ref(),
        &encode("P5", labels.width(), labels.height(), labels.labels()),
    )
}
