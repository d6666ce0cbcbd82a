//! Binary PPM (P6) output for image grids.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Maps a pixel from `[-1, 1]` to `0..=255`, rounding half up and clamping.
///
/// ```
/// use dsd_core::ppm::to_byte;
/// assert_eq!(to_byte(-1.0), 0);
/// assert_eq!(to_byte(0.0), 128);
/// assert_eq!(to_byte(1.0), 255);
/// assert_eq!(to_byte(7.0), 255);
/// ```
pub fn to_byte(v: f64) -> u8 {
    ((v + 1.0) / 2.0 * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Writes a `[3, h, w]` image with values in `[-1, 1]`.
pub fn write_ppm<W: Write>(mut w: W, image: &Tensor) -> Result<()> {
    let &[3, h, wd] = image.shape() else {
        return Err(Error::invalid(format!("PPM needs a [3, h, w] image, got {:?}", image.shape())));
    };
    write!(w, "P6\n{wd} {h}\n255\n")?;
    let plane = h * wd;
    let d = image.data();
    let mut bytes = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            bytes.push(to_byte(d[c * plane + i]));
        }
    }
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

pub fn save_ppm(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    write_ppm(BufWriter::new(File::create(path)?), image)
}
