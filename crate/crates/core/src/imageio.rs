//! 8-bit RGB image files in and out of [0,1] float tensors, plus the
//! pad/crop pair that makes the codec extent-exact: inputs are
//! reflect-padded to multiples of 16 before analysis, the true extent
//! rides in the bitstream header, and decode crops back.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// The analysis transform halves the extent four times.
pub const EXTENT_MULTIPLE: usize = 16;

/// Reads a PNG or PPM (binary P6) into [1, 3, H, W] with values in
/// [0,1]. Grayscale and alpha inputs are expanded/flattened to RGB.
pub fn load_image<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let (w, h, rgb) = match extension(path)?.as_str() {
        "ppm" => read_ppm(path)?,
        _ => {
            let img = image::open(path)
                .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
                .to_rgb8();
            let (w, h) = (img.width() as usize, img.height() as usize);
            (w, h, img.into_raw())
        }
    };
    if w == 0 || h == 0 {
        return Err(Error::Image(format!("{}: empty image", path.display())));
    }
    // HWC u8 -> CHW float
    let mut data = vec![T::ZERO; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                data[c * h * w + y * w + x] = T::from_f64(rgb[(y * w + x) * 3 + c] as f64 / 255.0);
            }
        }
    }
    Ok(Tensor::from_vec(data, &[1, 3, h, w]))
}

/// Writes [1, 3, H, W] to PNG or PPM, clamping to [0,1] and rounding
/// to 8 bits.
pub fn save_image<T: Scalar>(path: &Path, x: &Tensor<T>) -> Result<()> {
    let s = x.shape().to_vec();
    if s.len() != 4 || s[0] != 1 || s[1] != 3 {
        return Err(Error::Image(format!("expected [1,3,H,W], got {s:?}")));
    }
    let (h, w) = (s[2], s[3]);
    let data = x.to_vec();
    let mut rgb = vec![0u8; 3 * h * w];
    for y in 0..h {
        for xi in 0..w {
            for c in 0..3 {
                let v = data[c * h * w + y * w + xi].to_f64().clamp(0.0, 1.0);
                rgb[(y * w + xi) * 3 + c] = (v * 255.0).round() as u8;
            }
        }
    }
    match extension(path)?.as_str() {
        "ppm" => write_ppm(path, w, h, &rgb),
        "png" => image::save_buffer(
            path,
            &rgb,
            w as u32,
            h as u32,
            image::ColorType::Rgb8,
        )
        .map_err(|e| Error::Image(format!("{}: {e}", path.display()))),
        other => Err(Error::Image(format!("unsupported image extension .{other}"))),
    }
}

fn extension(path: &Path) -> Result<String> {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .ok_or_else(|| Error::Image(format!("{}: no file extension", path.display())))
}

fn read_ppm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = std::fs::read(path)?;
    let err = |m: &str| Error::Image(format!("{}: {m}", path.display()));
    // header: "P6" <ws> width <ws> height <ws> maxval <single ws> data
    let mut pos = 0usize;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(err("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| err("non-ascii header"))?);
    }
    if fields[0] != "P6" {
        return Err(err("not a binary P6 file"));
    }
    let w: usize = fields[1].parse().map_err(|_| err("bad width"))?;
    let h: usize = fields[2].parse().map_err(|_| err("bad height"))?;
    if fields[3] != "255" {
        return Err(err("only maxval 255 is supported"));
    }
    pos += 1; // single whitespace byte after maxval
    let need = 3 * w * h;
    if bytes.len() < pos + need {
        return Err(err("pixel data truncated"));
    }
    Ok((w, h, bytes[pos..pos + need].to_vec()))
}

fn write_ppm(path: &Path, w: usize, h: usize, rgb: &[u8]) -> Result<()> {
    use std::io::Write as _;
    let mut f = std::fs::File::create(path)?;
    write!(f, "P6\n{w} {h}\n255\n")?;
    f.write_all(rgb)?;
    Ok(())
}

/// Reflect-pads [1,3,H,W] up to the next multiple of `multiple` on
/// each side, returning the padded tensor and the original extent for
/// the header. The codec uses 16 times the hyper downscale factor so
/// both the analysis transform and the hyper branch divide evenly.
pub fn pad_to_multiple<T: Scalar>(x: &Tensor<T>, multiple: usize) -> (Tensor<T>, (usize, usize)) {
    let s = x.shape().to_vec();
    let (h, w) = (s[2], s[3]);
    let ph = (multiple - h % multiple) % multiple;
    let pw = (multiple - w % multiple) % multiple;
    (x.reflect_pad_bottom_right(ph, pw), (h, w))
}
