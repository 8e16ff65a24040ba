//! On-disk formats: XYZ text and VPTS binary point files, binary PPM images
//! and the JSON dataset manifest. Byte layouts are described in
//! `docs/formats.md`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Image, Split};
use crate::error::{Error, Result};

pub const VPTS_MAGIC: &[u8; 4] = b"VPTS";
pub const VPTS_VERSION: u32 = 1;
const VPTS_HEADER: usize = 16;

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Parses one `x y z` triple per line. Blank lines and `#` comments are
/// skipped; separators may be spaces, tabs or commas.
pub fn parse_xyz(text: &str) -> Result<Vec<[f32; 3]>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|s| !s.is_empty())
            .collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("expected 3 coordinates, found {}", fields.len()),
            });
        }
        let mut p = [0f32; 3];
        for (slot, f) in p.iter_mut().zip(&fields) {
            *slot = f.parse::<f32>().map_err(|e| Error::Parse {
                line: i + 1,
                msg: format!("bad coordinate {f:?}: {e}"),
            })?;
            if !slot.is_finite() {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("non-finite coordinate {f:?}"),
                });
            }
        }
        out.push(p);
    }
    Ok(out)
}

pub fn format_xyz(points: &[[f32; 3]]) -> String {
    let mut s = String::with_capacity(points.len() * 32);
    for p in points {
        s.push_str(&format!("{} {} {}\n", p[0], p[1], p[2]));
    }
    s
}

pub fn encode_vpts(points: &[[f32; 3]]) -> Vec<u8> {
    let mut out = Vec::with_capacity(VPTS_HEADER + points.len() * 12);
    out.extend_from_slice(VPTS_MAGIC);
    out.extend_from_slice(&VPTS_VERSION.to_le_bytes());
    out.extend_from_slice(&(points.len() as u64).to_le_bytes());
    for p in points {
        for v in p {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_vpts(bytes: &[u8]) -> Result<Vec<[f32; 3]>> {
    let fail = |offset: usize, msg: String| Error::Format {
        offset: offset as u64,
        msg,
    };
    if bytes.len() < 4 || &bytes[..4] != VPTS_MAGIC {
        return Err(fail(0, "missing VPTS magic".into()));
    }
    if bytes.len() < VPTS_HEADER {
        return Err(fail(bytes.len(), "truncated VPTS header".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VPTS_VERSION {
        return Err(fail(4, format!("unsupported VPTS version {version}")));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let need = n
        .checked_mul(12)
        .and_then(|b| b.checked_add(VPTS_HEADER as u64))
        .ok_or_else(|| fail(8, format!("point count {n} overflows")))?;
    if (bytes.len() as u64) < need {
        return Err(fail(
            bytes.len(),
            format!("payload holds {} bytes, {n} points need {}", bytes.len() - VPTS_HEADER, need - 16),
        ));
    }
    if (bytes.len() as u64) > need {
        return Err(fail(need as usize, "trailing bytes after point payload".into()));
    }
    let mut out = Vec::with_capacity(n as usize);
    for (i, chunk) in bytes[VPTS_HEADER..].chunks_exact(12).enumerate() {
        let mut p = [0f32; 3];
        for (k, slot) in p.iter_mut().enumerate() {
            *slot = f32::from_le_bytes(chunk[k * 4..k * 4 + 4].try_into().unwrap());
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(fail(VPTS_HEADER + i * 12, "non-finite coordinate".into()));
        }
        out.push(p);
    }
    Ok(out)
}

/// Raw (un-normalised) coordinates of a point file in either format.
pub fn read_points_raw(path: &Path) -> Result<Vec<[f32; 3]>> {
    let bytes = read_file(path)?;
    if bytes.starts_with(VPTS_MAGIC) {
        decode_vpts(&bytes)
    } else {
        let text = std::str::from_utf8(&bytes).map_err(|e| Error::Format {
            offset: e.valid_up_to() as u64,
            msg: "text point file is not valid UTF-8".into(),
        })?;
        parse_xyz(text)
    }
}

/// Writes binary VPTS for a `.vpts` extension and XYZ text otherwise.
pub fn write_points(path: &Path, points: &[[f32; 3]]) -> Result<()> {
    if path.extension().is_some_and(|e| e == "vpts") {
        write_file(path, &encode_vpts(points))
    } else {
        write_file(path, format_xyz(points).as_bytes())
    }
}

pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format {
                offset: pos as u64,
                msg: "truncated PPM header".into(),
            });
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token(bytes)? != "P6" {
        return Err(Error::Format {
            offset: 0,
            msg: "not a binary PPM (P6)".into(),
        });
    }
    let mut num = |what: &str| -> Result<usize> {
        let t = token(bytes)?;
        t.parse::<usize>().map_err(|_| Error::Format {
            offset: 0,
            msg: format!("bad PPM {what} {t:?}"),
        })
    };
    let width = num("width")?;
    let height = num("height")?;
    let maxval = num("maxval")?;
    if maxval != 255 || width == 0 || height == 0 {
        return Err(Error::Format {
            offset: 0,
            msg: format!("unsupported PPM {width}x{height} maxval {maxval}"),
        });
    }
    // exactly one whitespace byte separates the header from the raster
    let start = pos + 1;
    let need = width * height * 3;
    if bytes.len() < start + need {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            msg: format!("PPM raster truncated: need {need} bytes"),
        });
    }
    Ok(Image {
        height,
        width,
        pixels: bytes[start..start + need].to_vec(),
    })
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    decode_ppm(&read_file(path)?)
}

pub const MANIFEST_FORMAT: &str = "vipformer-dataset";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sample_id: String,
    pub class_id: usize,
    pub split: Split,
    /// Relative to the dataset root.
    pub points: String,
    #[serde(default)]
    pub images: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub classes: Vec<String>,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(classes: Vec<String>, entries: Vec<ManifestEntry>) -> Self {
        Self {
            format: MANIFEST_FORMAT.into(),
            version: 1,
            classes,
            entries,
        }
    }

    /// Structural checks: dense class ids, unique sample ids.
    pub fn validate(&self) -> Result<()> {
        if self.format != MANIFEST_FORMAT || self.version != 1 {
            return Err(Error::Data(format!(
                "unsupported manifest {} v{}",
                self.format, self.version
            )));
        }
        let c = self.classes.len();
        let mut seen = vec![false; c];
        let mut ids = std::collections::HashSet::new();
        for e in &self.entries {
            if e.class_id >= c {
                return Err(Error::Data(format!(
                    "sample {} has class {} but only {c} classes are declared",
                    e.sample_id, e.class_id
                )));
            }
            seen[e.class_id] = true;
            if !ids.insert(e.sample_id.as_str()) {
                return Err(Error::Data(format!("duplicate sample id {}", e.sample_id)));
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Data(format!(
                "class id {missing} ({}) has no samples; ids must be dense",
                self.classes[missing]
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serialises") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: DatasetManifest = serde_json::from_str(text).map_err(|e| Error::Parse {
            line: e.line(),
            msg: e.to_string(),
        })?;
        m.validate()?;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn xyz_parsing_reports_lines() {
        let pts = parse_xyz("# header\n1 2 3\n\n4,5,6\n").unwrap();
        assert_eq!(pts, vec![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]);
        match parse_xyz("1 2 3\n1 2\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_xyz("1 2 x\n"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn vpts_round_trip_and_truncation() {
        let pts = vec![[0.1f32, -2.5, 3.0], [f32::MIN_POSITIVE, 0.0, -0.0]];
        let bytes = encode_vpts(&pts);
        let back = decode_vpts(&bytes).unwrap();
        let bits = |v: &[[f32; 3]]| v.iter().flatten().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&pts));
        match decode_vpts(&bytes[..bytes.len() - 1]) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, bytes.len() as u64 - 1),
            other => panic!("{other:?}"),
        }
        assert!(matches!(decode_vpts(b"VPTX"), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn ppm_round_trip() {
        let img = Image {
            height: 2,
            width: 3,
            pixels: (0..18).collect(),
        };
        assert_eq!(decode_ppm(&encode_ppm(&img)).unwrap(), img);
        let commented = b"P6\n# c\n1 1\n255\n\x01\x02\x03";
        assert_eq!(decode_ppm(commented).unwrap().pixels, vec![1, 2, 3]);
    }

    #[test]
    fn manifest_requires_dense_classes() {
        let e = |id: &str, c| ManifestEntry {
            sample_id: id.into(),
            class_id: c,
            split: Split::Train,
            points: format!("{id}.xyz"),
            images: vec![],
        };
        let m = DatasetManifest::new(vec!["a".into(), "b".into()], vec![e("x", 0), e("y", 1)]);
        assert_eq!(DatasetManifest::from_json(&m.to_json()).unwrap(), m);
        let sparse = DatasetManifest::new(vec!["a".into(), "b".into()], vec![e("x", 0)]);
        assert!(matches!(sparse.validate(), Err(Error::Data(_))));
    }
}
