//! Raster I/O: PNG for everything, plus binary PPM (P6) images and PGM (P5)
//! label maps.
//!
//! Label maps are written as 8-bit indexed PNGs whose palette starts
//! black / green / blue, so proposal maps are readable in any viewer.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use super::{Image, LabelMap, Mask, CHANNELS};
use crate::error::{Error, Result};

const PNG_SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', 0x0d, 0x0a, 0x1a, 0x0a];

/// Palette entries for ids 0, 1, 2; further ids get generated colors.
const BASE_PALETTE: [[u8; 3]; 3] = [[0, 0, 0], [0, 255, 0], [0, 0, 255]];

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn corrupt(path: &Path, detail: impl ToString) -> Error {
    Error::CorruptData {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    }
}

fn unsupported(path: &Path, detail: impl ToString) -> Error {
    Error::UnsupportedFormat {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    }
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    let (height, width, rgb) = if bytes.starts_with(&PNG_SIGNATURE) {
        decode_png_rgb(path, &bytes)?
    } else if bytes.starts_with(b"P6") {
        decode_ppm(path, &bytes)?
    } else {
        return Err(unsupported(
            path,
            "expected a PNG or binary PPM (P6) raster",
        ));
    };
    let plane = height * width;
    let mut data = vec![0.0; CHANNELS * plane];
    for (i, px) in rgb.chunks_exact(3).enumerate() {
        for c in 0..CHANNELS {
            data[c * plane + i] = f64::from(px[c]) / 255.0;
        }
    }
    Image::new(height, width, data)
}

/// Writes an 8-bit RGB PNG, or P6 when the extension is `.ppm`.
pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let plane = img.height() * img.width();
    let mut rgb = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for c in 0..CHANNELS {
            rgb.push(quantize(img.data()[c * plane + i]));
        }
    }
    let bytes = if has_extension(path, "ppm") {
        let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
        out.extend_from_slice(&rgb);
        out
    } else {
        encode_png(
            path,
            img.width(),
            img.height(),
            png::ColorType::Rgb,
            None,
            &rgb,
        )?
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Loads a label map and checks every id against `classes`.
pub fn load_label_map(path: impl AsRef<Path>, classes: usize) -> Result<LabelMap> {
    let path = path.as_ref();
    let (height, width, ids) = load_index_raster(path)?;
    LabelMap::new(
        height,
        width,
        classes,
        ids.into_iter().map(u16::from).collect(),
    )
}

/// Writes an indexed PNG, or P5 when the extension is `.pgm`.
pub fn save_label_map(map: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut ids = Vec::with_capacity(map.data().len());
    for &id in map.data() {
        if id > 255 {
            return Err(Error::InvalidLabel {
                id: u32::from(id),
                classes: 256,
            });
        }
        ids.push(id as u8);
    }
    let bytes = if has_extension(path, "pgm") {
        pgm_bytes(map.width(), map.height(), &ids)
    } else {
        let entries = map.classes().clamp(1, 256);
        let palette: Vec<u8> = (0..entries).flat_map(palette_color).collect();
        encode_png(
            path,
            map.width(),
            map.height(),
            png::ColorType::Indexed,
            Some(palette),
            &ids,
        )?
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Binary masks are stored as 8-bit grayscale (0 / 255).
pub fn save_mask(mask: &Mask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let px: Vec<u8> = mask
        .data()
        .iter()
        .map(|&v| if v { 255 } else { 0 })
        .collect();
    let bytes = if has_extension(path, "pgm") {
        pgm_bytes(mask.width(), mask.height(), &px)
    } else {
        encode_png(
            path,
            mask.width(),
            mask.height(),
            png::ColorType::Grayscale,
            None,
            &px,
        )?
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a binary mask. Indexed rasters count any non-zero id as foreground;
/// gray rasters threshold at half intensity.
pub fn load_mask(path: impl AsRef<Path>) -> Result<Mask> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    let (height, width, values, indexed) = if bytes.starts_with(&PNG_SIGNATURE) {
        let (h, w, v, color) = decode_png_raw(path, &bytes)?;
        match color {
            png::ColorType::Indexed => (h, w, v, true),
            png::ColorType::Grayscale => (h, w, v, false),
            other => return Err(unsupported(path, format!("mask color type {other:?}"))),
        }
    } else if bytes.starts_with(b"P5") {
        let (h, w, v) = decode_pgm(path, &bytes)?;
        (h, w, v, true)
    } else {
        return Err(unsupported(path, "expected a PNG or binary PGM (P5) mask"));
    };
    let data = values
        .into_iter()
        .map(|v| if indexed { v != 0 } else { v >= 128 })
        .collect();
    Mask::new(height, width, data)
}

fn load_index_raster(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = read_bytes(path)?;
    if bytes.starts_with(&PNG_SIGNATURE) {
        let (h, w, v, color) = decode_png_raw(path, &bytes)?;
        match color {
            png::ColorType::Indexed | png::ColorType::Grayscale => Ok((h, w, v)),
            other => Err(unsupported(path, format!("label map color type {other:?}"))),
        }
    } else if bytes.starts_with(b"P5") {
        decode_pgm(path, &bytes)
    } else {
        Err(unsupported(
            path,
            "expected an indexed PNG or binary PGM (P5) label map",
        ))
    }
}

fn palette_color(id: usize) -> [u8; 3] {
    if let Some(c) = BASE_PALETTE.get(id) {
        return *c;
    }
    // spread remaining ids over the color cube deterministically
    let x = (id as u32).wrapping_mul(2_654_435_761);
    [(x >> 24) as u8, (x >> 16) as u8, (x >> 8) as u8]
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn has_extension(path: &Path, ext: &str) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case(ext))
}

fn encode_png(
    path: &Path,
    width: usize,
    height: usize,
    color: png::ColorType,
    palette: Option<Vec<u8>>,
    data: &[u8],
) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, width as u32, height as u32);
        encoder.set_color(color);
        encoder.set_depth(png::BitDepth::Eight);
        if let Some(p) = palette {
            encoder.set_palette(p);
        }
        let to_err = |e: png::EncodingError| match e {
            png::EncodingError::IoError(io) => Error::io(path, io),
            other => unsupported(path, other),
        };
        let mut writer = encoder.write_header().map_err(to_err)?;
        writer.write_image_data(data).map_err(to_err)?;
        writer.finish().map_err(to_err)?;
    }
    Ok(out)
}

/// Decoded 8-bit samples with the PNG's own color type (palette untouched).
fn decode_png_raw(path: &Path, bytes: &[u8]) -> Result<(usize, usize, Vec<u8>, png::ColorType)> {
    let decoder = png::Decoder::new(Cursor::new(bytes));
    let mut reader = decoder.read_info().map_err(|e| corrupt(path, e))?;
    let info = reader.info();
    if info.bit_depth != png::BitDepth::Eight {
        return Err(unsupported(
            path,
            format!(
                "bit depth {:?}, only 8-bit rasters are supported",
                info.bit_depth
            ),
        ));
    }
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| corrupt(path, "image too large"))?;
    let mut buf = vec![0; size];
    let frame = reader.next_frame(&mut buf).map_err(|e| corrupt(path, e))?;
    buf.truncate(frame.buffer_size());
    Ok((
        frame.height as usize,
        frame.width as usize,
        buf,
        frame.color_type,
    ))
}

fn decode_png_rgb(path: &Path, bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let (h, w, buf, color) = decode_png_raw(path, bytes)?;
    let rgb = match color {
        png::ColorType::Rgb => buf,
        png::ColorType::Rgba => buf
            .chunks_exact(4)
            .flat_map(|p| [p[0], p[1], p[2]])
            .collect(),
        png::ColorType::Grayscale => buf.iter().flat_map(|&g| [g, g, g]).collect(),
        png::ColorType::GrayscaleAlpha => buf.chunks_exact(2).flat_map(|p| [p[0]; 3]).collect(),
        png::ColorType::Indexed => {
            let decoder = png::Decoder::new(Cursor::new(bytes));
            let reader = decoder.read_info().map_err(|e| corrupt(path, e))?;
            let palette = reader
                .info()
                .palette
                .clone()
                .ok_or_else(|| corrupt(path, "indexed PNG without palette"))?;
            let mut rgb = Vec::with_capacity(buf.len() * 3);
            for &i in &buf {
                let at = 3 * i as usize;
                let entry = palette
                    .get(at..at + 3)
                    .ok_or_else(|| corrupt(path, format!("palette index {i} out of range")))?;
                rgb.extend_from_slice(entry);
            }
            rgb
        }
    };
    Ok((h, w, rgb))
}

/// Splits a PNM header into `(magic, width, height, maxval, payload offset)`.
fn parse_pnm_header<'a>(path: &Path, bytes: &'a [u8]) -> Result<(usize, usize, usize, &'a [u8])> {
    let mut fields = Vec::with_capacity(3);
    let mut pos = 2;
    while fields.len() < 3 {
        // skip whitespace and comments
        while pos < bytes.len() {
            match bytes[pos] {
                b'#' => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(corrupt(path, "truncated PNM header"));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).map_err(|e| corrupt(path, e))?;
        fields.push(text.parse::<usize>().map_err(|e| corrupt(path, e))?);
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(corrupt(path, "missing raster after PNM header"));
    }
    let (width, height, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(unsupported(
            path,
            format!("maxval {maxval}, only 8-bit PNM is supported"),
        ));
    }
    Ok((height, width, maxval, &bytes[pos + 1..]))
}

fn decode_ppm(path: &Path, bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let (h, w, _, payload) = parse_pnm_header(path, bytes)?;
    let need = 3 * h * w;
    if payload.len() < need {
        return Err(corrupt(
            path,
            format!("expected {need} raster bytes, found {}", payload.len()),
        ));
    }
    Ok((h, w, payload[..need].to_vec()))
}

fn decode_pgm(path: &Path, bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let (h, w, _, payload) = parse_pnm_header(path, bytes)?;
    let need = h * w;
    if payload.len() < need {
        return Err(corrupt(
            path,
            format!("expected {need} raster bytes, found {}", payload.len()),
        ));
    }
    Ok((h, w, payload[..need].to_vec()))
}

fn pgm_bytes(width: usize, height: usize, px: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(px);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::ProposalMap;

    fn write_ppm(dir: &Path, name: &str, w: usize, h: usize, byte: u8) -> std::path::PathBuf {
        let path = dir.join(name);
        let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
        bytes.extend(std::iter::repeat_n(byte, 3 * w * h));
        fs::write(&path, bytes).unwrap();
        path
    }

    #[test]
    fn white_black_and_mid_gray_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let white = load_image(write_ppm(dir.path(), "w.ppm", 1, 1, 255)).unwrap();
        assert!(white.data().iter().all(|&v| v == 1.0));
        let black = load_image(write_ppm(dir.path(), "b.ppm", 1, 1, 0)).unwrap();
        assert!(black.data().iter().all(|&v| v == 0.0));
        let mid = load_image(write_ppm(dir.path(), "m.ppm", 2, 2, 128)).unwrap();
        assert_eq!(mid.dims(), (2, 2));
        assert!(mid
            .data()
            .iter()
            .all(|&v| (v - 128.0 / 255.0).abs() < 1e-15));
    }

    #[test]
    fn png_image_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f64> = (0..3 * 5 * 4)
            .map(|i| (i * 17 % 256) as f64 / 255.0)
            .collect();
        let img = Image::new(5, 4, data).unwrap();
        let path = dir.path().join("x.png");
        save_image(&img, &path).unwrap();
        assert_eq!(load_image(&path).unwrap(), img);
    }

    #[test]
    fn load_errors_are_distinct_and_name_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.png");
        let err = load_image(&missing).unwrap_err();
        assert!(matches!(err, Error::MissingFile(_)));
        assert!(err.to_string().contains("nope.png"));

        let bogus = dir.path().join("bogus.bin");
        fs::write(&bogus, b"GIF89a....").unwrap();
        let err = load_image(&bogus).unwrap_err();
        assert!(matches!(err, Error::UnsupportedFormat { .. }));
        assert!(err.to_string().contains("bogus.bin"));

        let truncated = dir.path().join("trunc.png");
        let mut bytes = PNG_SIGNATURE.to_vec();
        bytes.extend_from_slice(b"\0\0\0\rIHDR garbage");
        fs::write(&truncated, bytes).unwrap();
        let err = load_image(&truncated).unwrap_err();
        assert!(matches!(err, Error::CorruptData { .. }));
        assert!(err.to_string().contains("trunc.png"));

        let short = dir.path().join("short.ppm");
        fs::write(&short, b"P6\n2 2\n255\n\x01\x02").unwrap();
        assert!(matches!(load_image(&short), Err(Error::CorruptData { .. })));
    }

    #[test]
    fn single_pixel_label_is_stored_as_index() {
        let dir = tempfile::tempdir().unwrap();
        let map = LabelMap::new(1, 1, 3, vec![2]).unwrap();
        let path = dir.path().join("one.png");
        save_label_map(&map, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        let (_, _, raw, color) = decode_png_raw(&path, &bytes).unwrap();
        assert_eq!(color, png::ColorType::Indexed);
        assert_eq!(raw, vec![2]);
        // palette entry 2 is blue
        let reader = png::Decoder::new(Cursor::new(&bytes[..]))
            .read_info()
            .unwrap();
        let palette = reader.info().palette.clone().unwrap();
        assert_eq!(&palette[6..9], &[0, 0, 255]);
    }

    #[test]
    fn out_of_range_label_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let map = LabelMap::new(1, 2, 8, vec![0, 7]).unwrap();
        let path = dir.path().join("seven.png");
        save_label_map(&map, &path).unwrap();
        assert!(matches!(
            load_label_map(&path, 3),
            Err(Error::InvalidLabel { id: 7, classes: 3 })
        ));
        assert_eq!(load_label_map(&path, 8).unwrap(), map);
    }

    #[test]
    fn label_ids_above_a_byte_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let map = LabelMap::new(1, 1, 300, vec![299]).unwrap();
        assert!(matches!(
            save_label_map(&map, dir.path().join("big.png")),
            Err(Error::InvalidLabel { id: 299, .. })
        ));
    }

    #[test]
    fn pgm_label_and_mask_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let prop = ProposalMap::new(2, 3, vec![0, 1, 2, 2, 1, 0]).unwrap();
        let path = dir.path().join("p.pgm");
        save_label_map(prop.as_label_map(), &path).unwrap();
        assert_eq!(&load_label_map(&path, 3).unwrap(), prop.as_label_map());

        let mask = prop.gland_mask();
        for name in ["m.png", "m.pgm"] {
            let p = dir.path().join(name);
            save_mask(&mask, &p).unwrap();
            assert_eq!(load_mask(&p).unwrap(), mask);
        }
        // an indexed proposal map also reads as a gland mask
        let p = dir.path().join("p.png");
        save_label_map(prop.as_label_map(), &p).unwrap();
        assert_eq!(load_mask(&p).unwrap(), mask);
    }
}
