//! Binary netpbm I/O: P6 colour images in, P5 label maps and P6
//! colourized masks out.

use std::path::Path;

use crate::error::{bail, Error, Result};
use crate::io::{read_file, write_atomic};
use crate::rng::Rng;
use crate::tensor::{Scalar, Shape, Tensor};

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    data_offset: usize,
}

fn parse_header(buf: &[u8]) -> Result<Header> {
    if buf.len() < 2 || buf[0] != b'P' || !(buf[1] == b'5' || buf[1] == b'6') {
        return Err(Error::Format { offset: 0, msg: "expected binary netpbm magic P5 or P6".into() });
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, slot) in fields.iter_mut().enumerate() {
        loop {
            match buf.get(pos) {
                Some(b'#') => {
                    while buf.get(pos).is_some_and(|&c| c != b'\n') {
                        pos += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while buf.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format { offset: start, msg: format!("expected header field {} (width, height, maxval)", i + 1) });
        }
        let text = std::str::from_utf8(&buf[start..pos]).expect("ascii digits");
        *slot = text.parse().map_err(|_| Error::Format { offset: start, msg: format!("header number {text} out of range") })?;
    }
    // exactly one whitespace byte separates the header from the raster
    match buf.get(pos) {
        Some(c) if c.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::Format { offset: pos, msg: "missing whitespace after maxval".into() }),
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::Format { offset: pos, msg: format!("only maxval 255 is supported, got {maxval}") });
    }
    if width == 0 || height == 0 {
        return Err(Error::Format { offset: pos, msg: format!("empty image {width}x{height}") });
    }
    Ok(Header { magic: [buf[0], buf[1]], width, height, data_offset: pos })
}

fn raster<'a>(buf: &'a [u8], h: &Header, channels: usize) -> Result<&'a [u8]> {
    let need = h.width.checked_mul(h.height).and_then(|n| n.checked_mul(channels));
    let have = buf.len() - h.data_offset;
    match need {
        Some(n) if n == have => Ok(&buf[h.data_offset..]),
        Some(n) => Err(Error::Format { offset: h.data_offset, msg: format!("raster holds {have} bytes, expected {n}") }),
        None => Err(Error::Format { offset: h.data_offset, msg: "image dimensions overflow".into() }),
    }
}

/// Decodes a P6 image to `[1, 3, H, W]` with values in `[0, 1]`.
pub fn decode_ppm<S: Scalar>(buf: &[u8]) -> Result<Tensor<S>> {
    let h = parse_header(buf)?;
    if &h.magic != b"P6" {
        return Err(Error::Format { offset: 0, msg: "expected P6 colour image".into() });
    }
    let px = raster(buf, &h, 3)?;
    let hw = h.width * h.height;
    let mut data = vec![S::zero(); 3 * hw];
    for (i, rgb) in px.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * hw + i] = S::from_f64(rgb[c] as f64 / 255.0);
        }
    }
    Tensor::from_vec(Shape::new(1, 3, h.height, h.width), data)
}

/// Encodes the first image of a `[N, 3, H, W]` tensor; values are clamped
/// to `[0, 1]` and rounded to the nearest level.
pub fn encode_ppm<S: Scalar>(img: &Tensor<S>) -> Result<Vec<u8>> {
    let s = img.shape();
    if s.c() != 3 || s.n() == 0 {
        bail!(Dimension, "PPM needs a [N,3,H,W] image, got {s}");
    }
    let (hw, w, h) = (s.hw(), s.w(), s.h());
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * hw);
    for i in 0..hw {
        for c in 0..3 {
            let v = img.data()[c * hw + i].to_f64();
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

/// Label map as a P5 image holding raw class indices.
pub fn encode_pgm(labels: &[i32], height: usize, width: usize) -> Result<Vec<u8>> {
    if labels.len() != height * width {
        bail!(Dimension, "label map has {} entries, expected {height}x{width}", labels.len());
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    for &l in labels {
        if !(0..=255).contains(&l) {
            bail!(Data, "class index {l} cannot be stored in an 8-bit PGM");
        }
        out.push(l as u8);
    }
    Ok(out)
}

pub fn decode_pgm(buf: &[u8]) -> Result<(Vec<i32>, usize, usize)> {
    let h = parse_header(buf)?;
    if &h.magic != b"P5" {
        return Err(Error::Format { offset: 0, msg: "expected P5 grey image".into() });
    }
    let px = raster(buf, &h, 1)?;
    Ok((px.iter().map(|&b| b as i32).collect(), h.height, h.width))
}

/// Deterministic colour table: class 0 is black, the rest come from a fixed
/// seed.
pub fn palette(num_classes: usize) -> Vec<[u8; 3]> {
    let mut rng = Rng::new(0x5c7_9a1e77e);
    (0..num_classes)
        .map(|k| {
            let rgb = [rng.next_u64() as u8, rng.next_u64() as u8, rng.next_u64() as u8];
            if k == 0 {
                [0, 0, 0]
            } else {
                rgb
            }
        })
        .collect()
}

pub fn encode_color_mask(labels: &[i32], height: usize, width: usize, num_classes: usize) -> Result<Vec<u8>> {
    if labels.len() != height * width {
        bail!(Dimension, "label map has {} entries, expected {height}x{width}", labels.len());
    }
    let pal = palette(num_classes);
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    for &l in labels {
        let c = usize::try_from(l).ok().and_then(|l| pal.get(l)).ok_or_else(|| Error::Data(format!("class index {l} outside palette of {num_classes}")))?;
        out.extend_from_slice(c);
    }
    Ok(out)
}

pub fn read_ppm<S: Scalar>(path: &Path) -> Result<Tensor<S>> {
    decode_ppm(&read_file(path)?)
}

pub fn write_ppm<S: Scalar>(img: &Tensor<S>, path: &Path) -> Result<()> {
    write_atomic(path, &encode_ppm(img)?)
}

pub fn read_pgm(path: &Path) -> Result<(Vec<i32>, usize, usize)> {
    decode_pgm(&read_file(path)?)
}

/// Writes a mask; `.ppm` paths get the colour palette, anything else raw
/// class indices as PGM.
pub fn write_mask(labels: &[i32], height: usize, width: usize, num_classes: usize, path: &Path) -> Result<()> {
    let colour = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm"));
    let bytes = if colour { encode_color_mask(labels, height, width, num_classes)? } else { encode_pgm(labels, height, width)? };
    write_atomic(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solid_colour_round_trip_is_exact() {
        let shape = Shape::new(1, 3, 5, 7);
        let mut data = vec![0.0f32; shape.numel()];
        for (c, v) in [10u8, 128, 255].iter().enumerate() {
            data[c * 35..(c + 1) * 35].fill(*v as f32 / 255.0);
        }
        let img = Tensor::from_vec(shape, data).unwrap();
        let bytes = encode_ppm(&img).unwrap();
        assert_eq!(&bytes[..11], b"P6\n7 5\n255\n");
        let back: Tensor<f32> = decode_ppm(&bytes).unwrap();
        assert_eq!(back, img);
        assert_eq!(encode_ppm(&back).unwrap(), bytes);
    }

    #[test]
    fn header_comments_and_whitespace() {
        let mut buf = b"P6 # c\n# another\n 2\t1 255\n".to_vec();
        buf.extend_from_slice(&[255, 0, 0, 0, 0, 255]);
        let t: Tensor<f64> = decode_ppm(&buf).unwrap();
        assert_eq!(t.shape(), Shape::new(1, 3, 1, 2));
        assert_eq!(t.data(), &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn malformed_headers() {
        assert!(matches!(decode_ppm::<f32>(b"P3\n1 1\n255\n\0\0\0"), Err(Error::Format { offset: 0, .. })));
        assert!(decode_ppm::<f32>(b"P6\n1 1\n65535\n\0\0\0\0\0\0").is_err());
        assert!(decode_ppm::<f32>(b"P6\n2 1\n255\n\0\0\0").is_err());
        assert!(decode_ppm::<f32>(b"P6\n1 1\n255\n\0\0\0\0").is_err());
        assert!(decode_ppm::<f32>(b"P6\n0 1\n255\n").is_err());
        assert!(decode_ppm::<f32>(b"P6\n1").is_err());
        assert!(decode_ppm::<f32>(b"P6\n99999999999999999999999 1\n255\n").is_err());
        assert!(decode_ppm::<f32>(b"P5\n1 1\n255\n\0").is_err());
    }

    #[test]
    fn two_class_pgm_holds_only_zero_and_one() {
        let labels = [0, 1, 1, 0, 1, 0];
        let bytes = encode_pgm(&labels, 2, 3).unwrap();
        let header = b"P5\n3 2\n255\n".len();
        assert!(bytes[header..].iter().all(|&b| b <= 1));
        assert_eq!(decode_pgm(&bytes).unwrap(), (labels.to_vec(), 2, 3));
    }

    #[test]
    fn pgm_rejects_large_classes() {
        assert!(encode_pgm(&[256], 1, 1).is_err());
        assert!(encode_pgm(&[-1], 1, 1).is_err());
        assert!(encode_pgm(&[0, 1], 1, 1).is_err());
    }

    #[test]
    fn palette_is_stable_and_distinct() {
        let a = palette(19);
        assert_eq!(a, palette(19));
        assert_eq!(a[..6], palette(6)[..]);
        assert_eq!(a[0], [0, 0, 0]);
        for i in 0..a.len() {
            for j in 0..i {
                assert_ne!(a[i], a[j]);
            }
        }
        let bytes = encode_color_mask(&[0, 2], 1, 2, 3).unwrap();
        let header = b"P6\n2 1\n255\n".len();
        assert_eq!(&bytes[header..header + 3], &[0, 0, 0]);
        assert_eq!(&bytes[header + 3..], &a[2]);
        assert!(encode_color_mask(&[3], 1, 1, 3).is_err());
    }

    #[test]
    fn write_mask_picks_format_by_extension() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.pgm");
        write_mask(&[1, 0], 1, 2, 2, &p).unwrap();
        assert_eq!(read_pgm(&p).unwrap(), (vec![1, 0], 1, 2));
        let p = dir.path().join("m.ppm");
        write_mask(&[1, 0], 1, 2, 2, &p).unwrap();
        assert_eq!(read_ppm::<f32>(&p).unwrap().shape(), Shape::new(1, 3, 1, 2));
    }
}
