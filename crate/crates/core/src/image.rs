//! Planar RGB images in `[0, 1]` and their PNG/tensor conversions.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use spaceedit_tensor::{Real, Tensor};

use crate::error::{Error, Result};

/// RGB image stored as three planes (`[3][height][width]`), values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

/// Rec. 709 luma weights.
pub const LUMA: [f32; 3] = [0.2126, 0.7152, 0.0722];

pub fn luma(p: [f32; 3]) -> f32 {
    LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2]
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * width * height {
            return Err(Error::shape(format!(
                "{} values for a {width}x{height} RGB image",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        Self::from_fn(width, height, |_, _| rgb)
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> [f32; 3],
    ) -> Self {
        let plane = width * height;
        let mut data = vec![0.0; 3 * plane];
        for y in 0..height {
            for x in 0..width {
                let p = f(x, y);
                for c in 0..3 {
                    data[c * plane + y * width + x] = p[c];
                }
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        let plane = self.width * self.height;
        let i = y * self.width + x;
        [self.data[i], self.data[plane + i], self.data[2 * plane + i]]
    }

    pub fn set(&mut self, x: usize, y: usize, p: [f32; 3]) {
        let plane = self.width * self.height;
        let i = y * self.width + x;
        self.data[i] = p[0];
        self.data[plane + i] = p[1];
        self.data[2 * plane + i] = p[2];
    }

    /// Apply `f(x, y, rgb)` to every pixel.
    pub fn map_pixels(&self, mut f: impl FnMut(usize, usize, [f32; 3]) -> [f32; 3]) -> Image {
        Image::from_fn(self.width, self.height, |x, y| f(x, y, self.get(x, y)))
    }

    pub fn clamp01(mut self) -> Self {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
        self
    }

    pub fn mean(&self) -> f32 {
        (self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len().max(1) as f64) as f32
    }

    pub fn mean_luma(&self) -> f32 {
        let n = (self.width * self.height).max(1);
        let mut acc = 0.0f64;
        for y in 0..self.height {
            for x in 0..self.width {
                acc += luma(self.get(x, y)) as f64;
            }
        }
        (acc / n as f64) as f32
    }

    pub fn channel_means(&self) -> [f32; 3] {
        let plane = (self.width * self.height).max(1);
        std::array::from_fn(|c| {
            (self.data[c * plane..(c + 1) * plane]
                .iter()
                .map(|&v| v as f64)
                .sum::<f64>()
                / plane as f64) as f32
        })
    }

    /// Round-trip through 8-bit storage.
    pub fn quantized(&self) -> Image {
        let data = self.data.iter().map(|&v| to_u8(v) as f32 / 255.0).collect();
        Image {
            width: self.width,
            height: self.height,
            data,
        }
    }

    /// Box-filter resize to an integer divisor or multiple of the current size.
    pub fn resized(&self, width: usize, height: usize) -> Image {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let sx = self.width as f32 / width as f32;
        let sy = self.height as f32 / height as f32;
        Image::from_fn(width, height, |x, y| {
            let x0 = (x as f32 * sx).floor() as usize;
            let y0 = (y as f32 * sy).floor() as usize;
            let x1 = (((x + 1) as f32 * sx).ceil() as usize).clamp(x0 + 1, self.width);
            let y1 = (((y + 1) as f32 * sy).ceil() as usize).clamp(y0 + 1, self.height);
            let mut acc = [0.0f32; 3];
            for yy in y0..y1 {
                for xx in x0..x1 {
                    let p = self.get(xx, yy);
                    for c in 0..3 {
                        acc[c] += p[c];
                    }
                }
            }
            let n = ((x1 - x0) * (y1 - y0)) as f32;
            acc.map(|v| v / n)
        })
    }

    /// Mean absolute difference in `[0, 1]` units.
    pub fn l1(&self, other: &Image) -> f32 {
        assert!(self.same_shape(other), "l1 on differently sized images");
        let s: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs() as f64)
            .sum();
        (s / self.data.len() as f64) as f32
    }

    /// Pack images into `[B, 3, H, W]` with values mapped to `[-1, 1]`.
    pub fn batch_signed<T: Real>(images: &[&Image]) -> Tensor<T> {
        let first = images.first().expect("empty image batch");
        let mut data = Vec::with_capacity(images.len() * first.data.len());
        for im in images {
            assert!(im.same_shape(first), "mixed image sizes in batch");
            data.extend(im.data.iter().map(|&v| T::lit((2.0 * v - 1.0) as f64)));
        }
        Tensor::new(vec![images.len(), 3, first.height, first.width], data)
    }

    pub fn to_signed<T: Real>(&self) -> Tensor<T> {
        Self::batch_signed(&[self])
    }

    /// Image `index` of a `[B, 3, H, W]` tensor in `[-1, 1]`, clamped to `[0, 1]`.
    pub fn from_signed<T: Real>(t: &Tensor<T>, index: usize) -> Image {
        let (_, c, h, w) = t.dims4();
        assert_eq!(c, 3, "expected RGB tensor");
        let plane = 3 * h * w;
        let data = t.data()[index * plane..(index + 1) * plane]
            .iter()
            .map(|&v| ((v.as_f64() as f32 + 1.0) * 0.5).clamp(0.0, 1.0))
            .collect();
        Image {
            width: w,
            height: h,
            data,
        }
    }

    pub fn unbatch_signed<T: Real>(t: &Tensor<T>) -> Vec<Image> {
        (0..t.dim(0)).map(|i| Self::from_signed(t, i)).collect()
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut rgb = Vec::with_capacity(3 * self.width * self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                rgb.extend(self.get(x, y).map(to_u8));
            }
        }
        write_png(path, self.width, self.height, png::ColorType::Rgb, &rgb)
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Image> {
        let path = path.as_ref();
        let (w, h, channels, bytes) = read_png(path)?;
        Ok(Image::from_fn(w, h, |x, y| {
            let i = (y * w + x) * channels;
            match channels {
                1 | 2 => [bytes[i] as f32 / 255.0; 3],
                _ => [0, 1, 2].map(|c| bytes[i + c] as f32 / 255.0),
            }
        }))
    }

    /// PNG-encoded bytes, for serving over HTTP.
    pub fn to_png_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut rgb = Vec::with_capacity(3 * self.width * self.height);
            for y in 0..self.height {
                for x in 0..self.width {
                    rgb.extend(self.get(x, y).map(to_u8));
                }
            }
            let mut writer = enc.write_header().expect("in-memory png header");
            writer.write_image_data(&rgb).expect("in-memory png data");
        }
        out
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Image> {
        let (w, h, channels, data) =
            decode_png(std::io::Cursor::new(bytes), Path::new("<upload>"))?;
        Ok(Image::from_fn(w, h, |x, y| {
            let i = (y * w + x) * channels;
            match channels {
                1 | 2 => [data[i] as f32 / 255.0; 3],
                _ => [0, 1, 2].map(|c| data[i + c] as f32 / 255.0),
            }
        }))
    }

    /// Place images side by side.
    pub fn hstack(images: &[Image]) -> Image {
        let h = images.iter().map(|i| i.height).max().unwrap_or(0);
        let w: usize = images.iter().map(|i| i.width).sum();
        let mut out = Image::filled(w, h, [0.0; 3]);
        let mut x0 = 0;
        for im in images {
            for y in 0..im.height {
                for x in 0..im.width {
                    out.set(x0 + x, y, im.get(x, y));
                }
            }
            x0 += im.width;
        }
        out
    }
}

pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary editing mask; `true` marks editable foreground.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::shape(format!(
                "{} values for a {width}x{height} mask",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let data = (0..width * height)
            .map(|i| f(i % width, i / width))
            .collect();
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    /// Single-channel PNG; any nonzero value is foreground.
    pub fn load_png(path: impl AsRef<Path>) -> Result<Mask> {
        let path = path.as_ref();
        let (w, h, channels, bytes) = read_png(path)?;
        Ok(Mask::from_fn(w, h, |x, y| {
            bytes[(y * w + x) * channels] != 0
        }))
    }

    pub fn from_png_bytes(bytes: &[u8]) -> Result<Mask> {
        let (w, h, channels, data) =
            decode_png(std::io::Cursor::new(bytes), Path::new("<upload>"))?;
        Ok(Mask::from_fn(w, h, |x, y| {
            data[(y * w + x) * channels] != 0
        }))
    }

    pub fn to_png_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Grayscale);
            enc.set_depth(png::BitDepth::Eight);
            let bytes: Vec<u8> = self.data.iter().map(|&b| if b { 255 } else { 0 }).collect();
            let mut writer = enc.write_header().expect("in-memory png header");
            writer.write_image_data(&bytes).expect("in-memory png data");
        }
        out
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|&b| if b { 255 } else { 0 }).collect();
        write_png(
            path.as_ref(),
            self.width,
            self.height,
            png::ColorType::Grayscale,
            &bytes,
        )
    }
}

fn write_png(path: &Path, w: usize, h: usize, color: png::ColorType, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let png_err = |e: png::EncodingError| Error::Png {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(bytes).map_err(png_err)?;
    Ok(())
}

fn read_png(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    decode_png(BufReader::new(file), path)
}

fn decode_png<R: std::io::BufRead + std::io::Seek>(
    reader: R,
    path: &Path,
) -> Result<(usize, usize, usize, Vec<u8>)> {
    let png_err = |reason: String| Error::Png {
        path: path.to_path_buf(),
        reason,
    };
    let mut decoder = png::Decoder::new(reader);
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| png_err(e.to_string()))?;
    let mut buf = vec![
        0;
        reader
            .output_buffer_size()
            .ok_or_else(|| png_err("image too large".into()))?
    ];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| png_err(e.to_string()))?;
    buf.truncate(info.buffer_size());
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(png_err("indexed color after expansion".into())),
    };
    Ok((info.width as usize, info.height as usize, channels, buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_roundtrip_is_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let im = Image::from_fn(5, 4, |x, y| [x as f32 / 4.0, y as f32 / 3.0, 0.3]);
        let p = dir.path().join("a.png");
        im.save_png(&p).unwrap();
        let back = Image::load_png(&p).unwrap();
        assert_eq!(back, im.quantized());
        assert_eq!(
            Image::from_png_bytes(&im.to_png_bytes()).unwrap(),
            im.quantized()
        );
    }

    #[test]
    fn signed_tensor_roundtrip() {
        let im = Image::from_fn(3, 2, |x, y| [0.1 * x as f32, 0.2 * y as f32, 0.5]);
        let t = im.to_signed::<f32>();
        assert_eq!(t.shape(), &[1, 3, 2, 3]);
        let back = Image::from_signed(&t, 0);
        assert!(back.l1(&im) < 1e-6);
    }

    #[test]
    fn mask_png_nonzero_is_foreground() {
        let dir = tempfile::tempdir().unwrap();
        let m = Mask::from_fn(4, 4, |x, _| x < 2);
        let p = dir.path().join("m.png");
        m.save_png(&p).unwrap();
        assert_eq!(Mask::load_png(&p).unwrap(), m);
    }

    #[test]
    fn resize_halves_by_box_filter() {
        let im = Image::from_fn(4, 4, |x, _| [x as f32 / 3.0; 3]);
        let half = im.resized(2, 2);
        assert!((half.get(0, 0)[0] - (0.0 + 1.0 / 3.0) / 2.0).abs() < 1e-6);
    }
}
