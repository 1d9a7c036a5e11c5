//! Image decoding (binary PPM and the raw `PLIM` tensor format), bilinear
//! resizing, and the CSV label manifest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{bail, Error, Result};
use super::ImageExample;
use crate::parallel::Execution;
use crate::tensor::Tensor;

pub const PLIM_MAGIC: &[u8; 4] = b"PLIM";

/// Decodes a PPM (P6) or PLIM file into `[H, W, 3]` floats in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes).map_err(|e| match e {
        Error::Decode(msg) => Error::Decode(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn decode_image(bytes: &[u8]) -> Result<Tensor<f32>> {
    if bytes.starts_with(PLIM_MAGIC) {
        decode_plim(bytes)
    } else if bytes.starts_with(b"P6") {
        decode_ppm(bytes)
    } else {
        bail!(Decode, "unrecognised image format (expected PPM P6 or PLIM)")
    }
}

fn decode_plim(bytes: &[u8]) -> Result<Tensor<f32>> {
    if bytes.len() < 16 {
        bail!(Decode, "PLIM header truncated");
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (h, w, c) = (word(0), word(1), word(2));
    if c != 3 {
        bail!(Decode, "expected 3 channels, PLIM declares {c}");
    }
    if h == 0 || w == 0 {
        bail!(Decode, "PLIM declares an empty {h}×{w} image");
    }
    let expected = h
        .checked_mul(w)
        .and_then(|n| n.checked_mul(c * 4))
        .ok_or_else(|| Error::Decode("PLIM dimensions overflow".into()))?;
    let payload = &bytes[16..];
    if payload.len() != expected {
        bail!(Decode, "PLIM payload is {} bytes, header implies {expected}", payload.len());
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        bail!(Decode, "PLIM pixel value {v} outside [0, 1]");
    }
    Tensor::new(&[h, w, 3], data)
}

fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f32>> {
    // header: magic, width, height, maxval separated by whitespace/comments
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => bail!(Decode, "PPM header truncated"),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Decode(format!("bad PPM header field at byte {start}")))?;
    }
    let [w, h, maxval] = fields;
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        bail!(Decode, "PPM header not terminated by whitespace");
    }
    pos += 1;
    if w == 0 || h == 0 || maxval == 0 || maxval > 65535 {
        bail!(Decode, "unsupported PPM geometry {w}×{h} maxval {maxval}");
    }
    let bpc = if maxval < 256 { 1 } else { 2 };
    let n = w * h * 3;
    let payload = &bytes[pos..];
    if payload.len() != n * bpc {
        bail!(Decode, "PPM payload is {} bytes, expected {}", payload.len(), n * bpc);
    }
    let scale = maxval as f32;
    let data: Vec<f32> = if bpc == 1 {
        payload.iter().map(|&b| (b as f32 / scale).min(1.0)).collect()
    } else {
        payload
            .chunks_exact(2)
            .map(|b| (u16::from_be_bytes([b[0], b[1]]) as f32 / scale).min(1.0))
            .collect()
    };
    Tensor::new(&[h, w, 3], data)
}

fn check_rgb(img: &Tensor<f32>) -> Result<(usize, usize)> {
    match *img.shape() {
        [h, w, 3] => Ok((h, w)),
        _ => bail!(Decode, "expected an [H, W, 3] image, got {:?}", img.shape()),
    }
}

/// Writes an 8-bit binary PPM.
pub fn encode_ppm(img: &Tensor<f32>) -> Result<Vec<u8>> {
    let (h, w) = check_rgb(img)?;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(img.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn encode_plim(img: &Tensor<f32>) -> Result<Vec<u8>> {
    let (h, w) = check_rgb(img)?;
    let mut out = Vec::with_capacity(16 + img.numel() * 4);
    out.extend_from_slice(PLIM_MAGIC);
    for d in [h, w, 3] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in img.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn save_image(img: &Tensor<f32>, path: &Path) -> Result<()> {
    let bytes = match path.extension().and_then(|e| e.to_str()) {
        Some("ppm") => encode_ppm(img)?,
        _ => encode_plim(img)?,
    };
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Bilinear resize to `size × size` with half-pixel centres.
pub fn resize_bilinear(img: &Tensor<f32>, size: usize) -> Result<Tensor<f32>> {
    let (h, w) = check_rgb(img)?;
    if size == 0 {
        bail!(Parameter, "resize target must be positive");
    }
    if h == size && w == size {
        return Ok(img.clone());
    }
    let src = img.data();
    let sample = |len: usize, out_len: usize, o: usize| -> (usize, usize, f32) {
        let x = ((o as f32 + 0.5) * len as f32 / out_len as f32 - 0.5).max(0.0);
        let x0 = (x.floor() as usize).min(len - 1);
        let x1 = (x0 + 1).min(len - 1);
        (x0, x1, x - x0 as f32)
    };
    let mut data = Vec::with_capacity(size * size * 3);
    for oy in 0..size {
        let (y0, y1, fy) = sample(h, size, oy);
        for ox in 0..size {
            let (x0, x1, fx) = sample(w, size, ox);
            for c in 0..3 {
                let at = |y: usize, x: usize| src[(y * w + x) * 3 + c];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                data.push((top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0));
            }
        }
    }
    Tensor::new(&[size, size, 3], data)
}

/// One manifest row: an image path and per-attribute labels aligned with
/// the requested attribute list.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    /// Path cell exactly as written.
    pub id: String,
    pub path: PathBuf,
    pub labels: Vec<Option<f32>>,
}

/// Reads a `path,<attr>,...` CSV. Blank cells mean "label absent"; columns
/// missing from the header are absent for every row. Relative paths resolve
/// against the manifest's directory.
pub fn read_manifest(path: &Path, attributes: &[String]) -> Result<Vec<ManifestRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let header = rdr.headers()?.clone();
    if header.get(0) != Some("path") {
        bail!(Decode, "{}: first manifest column must be `path`", path.display());
    }
    let columns: Vec<Option<usize>> = attributes
        .iter()
        .map(|a| header.iter().position(|h| h == a))
        .collect();
    let mut rows = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let id = rec[0].to_string();
        let rel = PathBuf::from(&id);
        let labels = columns
            .iter()
            .map(|col| {
                let Some(cell) = col.and_then(|c| rec.get(c)).map(str::trim) else {
                    return Ok(None);
                };
                if cell.is_empty() {
                    return Ok(None);
                }
                match cell.parse::<f32>() {
                    Ok(v) if (0.0..=1.0).contains(&v) => Ok(Some(v)),
                    _ => Err(Error::Decode(format!(
                        "{}: row {}: label {cell:?} is not a number in [0, 1]",
                        path.display(),
                        line + 2
                    ))),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let full = if rel.is_absolute() { rel } else { base.join(rel) };
        rows.push(ManifestRow { id, path: full, labels });
    }
    Ok(rows)
}

/// Decodes an image and resizes it to the model's input size.
pub fn load_for_model(path: &Path, size: usize) -> Result<Tensor<f32>> {
    resize_bilinear(&load_image(path)?, size)
}

/// Loads every image listed in a label manifest, in manifest order.
/// Example ids are the path cells as written in the manifest.
pub fn load_examples(manifest: &Path, attributes: &[String], size: usize, execution: Execution) -> Result<Vec<ImageExample>> {
    let rows = read_manifest(manifest, attributes)?;
    execution.try_map(&rows, |_, row| {
        Ok(ImageExample {
            id: row.id.clone(),
            pixels: load_for_model(&row.path, size)?,
            labels: row.labels.clone(),
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Tensor<f32> {
        Tensor::from_fn(&[2, 3, 3], |i| i as f32 / 17.0)
    }

    #[test]
    fn plim_roundtrip_is_exact() {
        let img = sample();
        assert_eq!(decode_image(&encode_plim(&img).unwrap()).unwrap(), img);
    }

    #[test]
    fn ppm_roundtrip_within_quantization() {
        let img = sample();
        let back = decode_image(&encode_ppm(&img).unwrap()).unwrap();
        assert!(back.max_abs_diff(&img) <= 0.5 / 255.0 + 1e-6);
    }

    #[test]
    fn ppm_with_comment() {
        let mut bytes = b"P6\n# made by hand\n1 1\n255\n".to_vec();
        bytes.extend([255, 0, 51]);
        let img = decode_image(&bytes).unwrap();
        assert_eq!(img.data(), &[1.0, 0.0, 0.2]);
    }

    #[test]
    fn wrong_channel_count_is_decode_error() {
        let mut bytes = PLIM_MAGIC.to_vec();
        for d in [1u32, 1, 1] {
            bytes.extend(d.to_le_bytes());
        }
        bytes.extend(0.5f32.to_le_bytes());
        assert!(matches!(decode_image(&bytes), Err(Error::Decode(_))));
    }

    #[test]
    fn truncated_payloads_are_errors() {
        let bytes = encode_plim(&sample()).unwrap();
        assert!(decode_image(&bytes[..bytes.len() - 1]).is_err());
        let bytes = encode_ppm(&sample()).unwrap();
        assert!(decode_image(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_image(b"GIF89a").is_err());
    }

    #[test]
    fn resize_constant_stays_constant() {
        let img = Tensor::full(&[5, 7, 3], 0.25f32);
        let r = resize_bilinear(&img, 4).unwrap();
        assert_eq!(r.shape(), &[4, 4, 3]);
        assert!(r.data().iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }

    #[test]
    fn resize_upsample_interpolates() {
        // 1×2 image, black then white; upsampled to 4 wide the middle
        // columns land between the two source pixels
        let img = Tensor::new(&[2, 2, 3], [0.0, 0.0, 0.0, 1.0, 1.0, 1.0].repeat(2)).unwrap();
        let r = resize_bilinear(&img, 4).unwrap();
        let row: Vec<f32> = (0..4).map(|x| r.data()[x * 3]).collect();
        assert_eq!(row, vec![0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn manifest_blank_cells_are_absent() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("labels.csv");
        fs::write(&p, "path,protest,violence,sign,police\na.ppm,1,0.4,,0\n").unwrap();
        let attrs: Vec<String> = ["protest", "violence", "sign", "police"].map(String::from).to_vec();
        let rows = read_manifest(&p, &attrs).unwrap();
        assert_eq!(rows[0].labels, vec![Some(1.0), Some(0.4), None, Some(0.0)]);
        assert_eq!(rows[0].path, dir.path().join("a.ppm"));
        fs::write(&p, "path,protest\na.ppm,2\n").unwrap();
        assert!(matches!(read_manifest(&p, &attrs), Err(Error::Decode(_))));
    }
}
