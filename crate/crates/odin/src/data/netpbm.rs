//! Binary PPM (P6) images and PGM (P5) label maps.
//!
//! Images are stored with maxval 255, row-major RGB; label maps store raw
//! label bytes. Parsing reports the byte offset where it stopped, and any
//! maxval other than 255 is rejected.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{LabelMap, TensorOf};

fn quantize<S: Scalar>(v: S) -> u8 {
    let x = v.to_f64_lossy().clamp(0.0, 1.0);
    (x * 255.0).round() as u8
}

/// Encode an `[h, w, 3]` image with values in [0, 1] as binary PPM bytes.
pub fn encode_image<S: Scalar>(image: &TensorOf<S>) -> Result<Vec<u8>> {
    let (h, w) = match image.shape() {
        [h, w, 3] => (*h, *w),
        s => return Err(Error::shape(format!("PPM wants h x w x 3, got {s:?}"))),
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|&v| quantize(v)));
    Ok(out)
}

/// Encode a label map (all labels < 255) as binary PGM bytes.
pub fn encode_labelmap(map: &LabelMap) -> Result<Vec<u8>> {
    if map.labels().iter().any(|&l| l >= 255) {
        return Err(Error::data("label map contains labels >= 255"));
    }
    let mut out = format!("P5\n{} {}\n255\n", map.width(), map.height()).into_bytes();
    out.extend_from_slice(map.labels());
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Cursor { bytes, pos: 0 }
    }

    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\r' | b'\n' => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => return,
            }
        }
    }

    fn read_int(&mut self, what: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if self.pos == start {
            return Err(Error::parse(start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .unwrap()
            .parse()
            .map_err(|_| Error::parse(start, format!("{what} out of range")))
    }

    /// Header of a binary netpbm file; returns (w, h) and leaves the cursor
    /// at the first payload byte.
    fn read_header(&mut self, magic: &[u8; 2]) -> Result<(usize, usize)> {
        if self.bytes.len() < 2 || &self.bytes[..2] != magic {
            return Err(Error::parse(
                0,
                format!("expected magic {}", String::from_utf8_lossy(magic)),
            ));
        }
        self.pos = 2;
        let w = self.read_int("width")?;
        let h = self.read_int("height")?;
        let maxval_at = {
            self.skip_space_and_comments();
            self.pos
        };
        let maxval = self.read_int("maxval")?;
        if maxval != 255 {
            return Err(Error::parse(maxval_at, format!("unsupported maxval {maxval}")));
        }
        // Exactly one whitespace byte separates the header from the payload.
        if self.pos >= self.bytes.len() || !self.bytes[self.pos].is_ascii_whitespace() {
            return Err(Error::parse(self.pos, "expected whitespace before payload"));
        }
        self.pos += 1;
        if w == 0 || h == 0 {
            return Err(Error::parse(2, "zero image extent"));
        }
        Ok((w, h))
    }

    fn read_payload(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::parse(
                self.bytes.len(),
                format!("payload truncated: want {n} bytes, have {}", self.bytes.len() - self.pos),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
}

/// Decode binary PPM bytes into an `[h, w, 3]` image with values in [0, 1].
pub fn decode_image<S: Scalar>(bytes: &[u8]) -> Result<TensorOf<S>> {
    let mut cur = Cursor::new(bytes);
    let (w, h) = cur.read_header(b"P6")?;
    let payload = cur.read_payload(w * h * 3)?;
    let data = payload.iter().map(|&b| S::lit(b as f64 / 255.0)).collect();
    TensorOf::new(vec![h, w, 3], data)
}

/// Decode binary PGM bytes into a label map.
pub fn decode_labelmap(bytes: &[u8]) -> Result<LabelMap> {
    let mut cur = Cursor::new(bytes);
    let (w, h) = cur.read_header(b"P5")?;
    let payload = cur.read_payload(w * h)?;
    Ok(LabelMap::new(h, w, payload.to_vec()))
}

pub fn write_image<S: Scalar>(path: &Path, image: &TensorOf<S>) -> Result<()> {
    fs::write(path, encode_image(image)?)?;
    Ok(())
}

pub fn read_image<S: Scalar>(path: &Path) -> Result<TensorOf<S>> {
    decode_image(&fs::read(path)?)
}

pub fn write_labelmap(path: &Path, map: &LabelMap) -> Result<()> {
    fs::write(path, encode_labelmap(map)?)?;
    Ok(())
}

pub fn read_labelmap(path: &Path) -> Result<LabelMap> {
    decode_labelmap(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_by_one_white_image_bytes() {
        let img = TensorOf::<f64>::full(vec![1, 1, 3], 1.0);
        let bytes = encode_image(&img).unwrap();
        assert_eq!(bytes, b"P6\n1 1\n255\n\xff\xff\xff");
    }

    #[test]
    fn label_map_round_trip_is_exact() {
        let map = LabelMap::from_fn(3, 4, |y, x| ((y * 4 + x) % 7) as u8);
        let back = decode_labelmap(&encode_labelmap(&map).unwrap()).unwrap();
        assert_eq!(back, map);
    }

    #[test]
    fn image_round_trip_quantization_bound_and_idempotence() {
        use rand::Rng;
        let mut rng = crate::util::substream(5, 5, 5);
        let data: Vec<f64> = (0..6 * 7 * 3).map(|_| rng.random_range(0.0..1.0)).collect();
        let img = TensorOf::new(vec![6, 7, 3], data).unwrap();
        let once: TensorOf<f64> = decode_image(&encode_image(&img).unwrap()).unwrap();
        for (&a, &b) in img.data().iter().zip(once.data()) {
            assert!((a - b).abs() <= 1.0 / 255.0);
        }
        let twice: TensorOf<f64> = decode_image(&encode_image(&once).unwrap()).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn unsupported_maxval_is_rejected_with_offset() {
        let bytes = b"P6\n2 2\n65535\n".to_vec();
        match decode_image::<f64>(&bytes) {
            Err(Error::Parse { offset, message }) => {
                assert_eq!(offset, 7);
                assert!(message.contains("unsupported maxval"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let mut bytes = encode_image(&TensorOf::<f64>::zeros(vec![2, 2, 3])).unwrap();
        bytes.truncate(bytes.len() - 1);
        assert!(matches!(decode_image::<f64>(&bytes), Err(Error::Parse { .. })));
    }

    #[test]
    fn malformed_header_is_rejected() {
        assert!(decode_image::<f64>(b"P5\n1 1\n255\n\x00").is_err());
        assert!(decode_image::<f64>(b"P6\nx 1\n255\n").is_err());
    }

    #[test]
    fn header_comments_are_skipped() {
        let bytes = b"P5\n# a comment\n2 1\n255\n\x01\x02".to_vec();
        let map = decode_labelmap(&bytes).unwrap();
        assert_eq!(map.labels(), &[1, 2]);
    }
}
