//! Binary PPM (P6) and PGM (P5) encoding and decoding.

use thiserror::Error;

use crate::render::{Image, MaskImage, NUM_CLASSES};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PnmError {
    #[error("bad magic: expected {expected}")]
    BadMagic { expected: &'static str },
    #[error("malformed header: {0}")]
    BadHeader(String),
    #[error("truncated data: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("pixel value {value} exceeds maxval {maxval}")]
    ValueOutOfRange { value: u8, maxval: u16 },
}

pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

/// Mask as PGM with maxval 4; each byte is the class id.
pub fn encode_mask_pgm(mask: &MaskImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n{}\n", mask.width, mask.height, NUM_CLASSES - 1).into_bytes();
    out.extend_from_slice(&mask.data);
    out
}

/// Gray image as PGM with maxval 255.
pub fn encode_gray_pgm(width: usize, height: usize, data: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(data);
    out
}

struct Header {
    width: usize,
    height: usize,
    maxval: u16,
    data_offset: usize,
}

fn parse_header(bytes: &[u8], magic: &'static str) -> Result<Header, PnmError> {
    if bytes.len() < 2 || &bytes[..2] != magic.as_bytes() {
        return Err(PnmError::BadMagic { expected: magic });
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // Skip whitespace and comments.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(PnmError::BadHeader("unexpected end of header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(PnmError::BadHeader(format!("expected a number at byte {start}")));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("ascii digits");
        *field = text
            .parse()
            .map_err(|_| PnmError::BadHeader(format!("number too large: {text}")))?;
    }
    // Exactly one whitespace byte separates the header from the raster.
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(PnmError::BadHeader("missing separator after maxval".into()));
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(PnmError::BadHeader(format!("zero dimension {width}x{height}")));
    }
    if maxval == 0 || maxval > 255 {
        return Err(PnmError::BadHeader(format!("unsupported maxval {maxval}")));
    }
    Ok(Header {
        width,
        height,
        maxval: maxval as u16,
        data_offset: pos + 1,
    })
}

fn raster<'a>(bytes: &'a [u8], h: &Header, channels: usize) -> Result<&'a [u8], PnmError> {
    let expected = h
        .width
        .checked_mul(h.height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| PnmError::BadHeader("dimensions overflow".into()))?;
    let found = bytes.len() - h.data_offset;
    if found != expected {
        return Err(PnmError::Truncated { expected, found });
    }
    Ok(&bytes[h.data_offset..])
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image, PnmError> {
    let h = parse_header(bytes, "P6")?;
    if h.maxval != 255 {
        return Err(PnmError::BadHeader(format!("expected maxval 255, got {}", h.maxval)));
    }
    let data = raster(bytes, &h, 3)?.to_vec();
    Ok(Image {
        width: h.width,
        height: h.height,
        data,
    })
}

pub fn decode_mask_pgm(bytes: &[u8]) -> Result<MaskImage, PnmError> {
    let h = parse_header(bytes, "P5")?;
    let data = raster(bytes, &h, 1)?.to_vec();
    let limit = h.maxval.min((NUM_CLASSES - 1) as u16);
    if let Some(&value) = data.iter().find(|&&v| v as u16 > limit) {
        return Err(PnmError::ValueOutOfRange {
            value,
            maxval: limit,
        });
    }
    Ok(MaskImage {
        width: h.width,
        height: h.height,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ppm_header_is_exact() {
        let img = Image::filled(2, 1, [1, 2, 3]);
        assert_eq!(encode_ppm(&img), b"P6\n2 1\n255\n\x01\x02\x03\x01\x02\x03".to_vec());
    }

    #[test]
    fn pgm_mask_uses_maxval_4() {
        let m = MaskImage { width: 3, height: 1, data: vec![0, 4, 2] };
        assert_eq!(encode_mask_pgm(&m), b"P5\n3 1\n4\n\x00\x04\x02".to_vec());
    }

    #[test]
    fn truncated_and_bad_magic_are_rejected() {
        let mut bytes = encode_ppm(&Image::filled(4, 4, [9, 9, 9]));
        bytes.pop();
        assert!(matches!(decode_ppm(&bytes), Err(PnmError::Truncated { .. })));
        assert!(matches!(decode_ppm(b"P5\n1 1\n255\n\x00"), Err(PnmError::BadMagic { .. })));
        assert!(matches!(decode_mask_pgm(b"P5\n1 1\n4\n\x07"), Err(PnmError::ValueOutOfRange { .. })));
        assert!(decode_ppm(b"P6\n0 1\n255\n").is_err());
    }

    #[test]
    fn comments_in_header_are_skipped() {
        let img = decode_ppm(b"P6 # made by hand\n1 1\n255\n\x05\x06\x07").unwrap();
        assert_eq!(img.data, vec![5, 6, 7]);
    }

    proptest! {
        #[test]
        fn ppm_round_trip(w in 1usize..9, h in 1usize..9, seed in any::<u8>()) {
            let data: Vec<u8> = (0..w * h * 3).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)).collect();
            let img = Image { width: w, height: h, data };
            prop_assert_eq!(decode_ppm(&encode_ppm(&img)).unwrap(), img);
        }

        #[test]
        fn mask_round_trip(w in 1usize..9, h in 1usize..9, seed in any::<u8>()) {
            let data: Vec<u8> = (0..w * h).map(|i| ((i as u8).wrapping_add(seed)) % 5).collect();
            let m = MaskImage { width: w, height: h, data };
            prop_assert_eq!(decode_mask_pgm(&encode_mask_pgm(&m)).unwrap(), m);
        }
    }
}
