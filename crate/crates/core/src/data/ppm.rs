//! Binary portable pixmap (`P6`, maxval 255) reading and writing.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// 8-bit RGB raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize, fill: [u8; 3]) -> Self {
        RgbImage {
            height,
            width,
            pixels: fill.iter().copied().cycle().take(height * width * 3).collect(),
        }
    }

    pub fn set(&mut self, r: usize, c: usize, rgb: [u8; 3]) {
        let i = (r * self.width + c) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn get(&self, r: usize, c: usize) -> [u8; 3] {
        let i = (r * self.width + c) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// `[H, W, 3]` tensor with values in `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.height, self.width, 3],
            self.pixels.iter().map(|&v| v as f64 / 255.0).collect(),
        )
        .expect("image dimensions are positive")
    }
}

fn header_token<R: BufRead>(r: &mut R, path: &Path) -> Result<String> {
    let mut tok = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            break;
        }
        match byte[0] {
            b'#' if tok.is_empty() => {
                let mut skip = Vec::new();
                r.read_until(b'\n', &mut skip)?;
            }
            b if b.is_ascii_whitespace() => {
                if !tok.is_empty() {
                    break;
                }
            }
            b => tok.push(b),
        }
    }
    if tok.is_empty() {
        return Err(Error::parse(path.display().to_string(), "truncated PPM header"));
    }
    String::from_utf8(tok).map_err(|_| Error::parse(path.display().to_string(), "non-ASCII PPM header"))
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    let loc = || path.display().to_string();
    let mut r = BufReader::new(std::fs::File::open(path)?);
    if header_token(&mut r, path)? != "P6" {
        return Err(Error::parse(loc(), "not a binary PPM (P6)"));
    }
    let mut num = |what: &str| -> Result<usize> {
        let t = header_token(&mut r, path)?;
        t.parse().map_err(|_| Error::parse(loc(), format!("bad {what} {t:?}")))
    };
    let width = num("width")?;
    let height = num("height")?;
    let maxval = num("maxval")?;
    if maxval != 255 {
        return Err(Error::parse(loc(), format!("unsupported maxval {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(Error::parse(loc(), "empty image"));
    }
    let mut pixels = vec![0u8; width * height * 3];
    r.read_exact(&mut pixels)
        .map_err(|_| Error::parse(loc(), "truncated pixel data"))?;
    Ok(RgbImage { height, width, pixels })
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P6\n{} {}\n255\n", img.width, img.height)?;
    f.write_all(&img.pixels)?;
    f.flush()?;
    Ok(())
}
