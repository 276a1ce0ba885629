//! Binary portable pixmap (P6, maxval 255) reader/writer.

use crate::error::{Error, Result};
use crate::tensor::{FloatTensor, Shape};
use std::io::{Read, Write};
use std::path::Path;

/// RGB image with values in `[0, 1]`, interleaved row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize) -> Self {
        ImageBuffer { width, height, data: vec![0.0; width * height * 3] }
    }

    /// Planar `(1, 3, h, w)` tensor view of the image.
    pub fn to_tensor(&self) -> FloatTensor {
        let shape = Shape::new(1, 3, self.height, self.width);
        let mut t = FloatTensor::zeros(shape);
        for i in 0..self.height {
            for j in 0..self.width {
                for c in 0..3 {
                    t.set(0, c, i, j, self.data[(i * self.width + j) * 3 + c]);
                }
            }
        }
        t
    }

    pub fn from_tensor(t: &FloatTensor) -> Result<Self> {
        let s = t.shape();
        if s.b != 1 || s.c != 3 {
            return Err(Error::dim("ImageBuffer::from_tensor", "(1,3,h,w)", s));
        }
        let mut img = ImageBuffer::new(s.w, s.h);
        for i in 0..s.h {
            for j in 0..s.w {
                for c in 0..3 {
                    img.data[(i * s.w + j) * 3 + c] = t.get(0, c, i, j);
                }
            }
        }
        Ok(img)
    }
}

fn read_token(bytes: &[u8], pos: &mut usize) -> Result<String> {
    // skip whitespace and '#' comments
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::MalformedImage("truncated header".into()));
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

/// Read a binary pixmap. Requires magic `P6` and maxval 255 exactly.
pub fn read_image(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let magic = read_token(&bytes, &mut pos)?;
    if magic != "P6" {
        return Err(Error::MalformedImage(format!("magic '{magic}', expected P6")));
    }
    let width: usize = read_token(&bytes, &mut pos)?
        .parse()
        .map_err(|_| Error::MalformedImage("bad width".into()))?;
    let height: usize = read_token(&bytes, &mut pos)?
        .parse()
        .map_err(|_| Error::MalformedImage("bad height".into()))?;
    let maxval: usize = read_token(&bytes, &mut pos)?
        .parse()
        .map_err(|_| Error::MalformedImage("bad maxval".into()))?;
    if maxval != 255 {
        return Err(Error::MalformedImage(format!("maxval {maxval}, expected 255")));
    }
    // exactly one whitespace byte separates the header from the payload
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::MalformedImage("missing header terminator".into()));
    }
    pos += 1;
    let need = width * height * 3;
    if bytes.len() - pos < need {
        return Err(Error::MalformedImage(format!(
            "payload truncated: need {need} bytes, have {}",
            bytes.len() - pos
        )));
    }
    let mut img = ImageBuffer::new(width, height);
    for (dst, &src) in img.data.iter_mut().zip(&bytes[pos..pos + need]) {
        *dst = src as f32 / 255.0;
    }
    Ok(img)
}

/// Write a binary pixmap; values quantize once as `round(v · 255)`.
pub fn write_image(path: impl AsRef<Path>, img: &ImageBuffer) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P6\n{} {}\n255\n", img.width, img.height)?;
    let payload: Vec<u8> = img
        .data
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    f.write_all(&payload)?;
    f.flush()?;
    Ok(())
}
