//! 8-bit RGB rasters and the pixel operations shared by the simulator,
//! the data pipeline and the codecs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Rgb = [u8; 3];

#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB triplets.
    pub data: Vec<u8>,
}

impl std::fmt::Debug for Image {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Image({}x{})", self.width, self.height)
    }
}

/// Axis-aligned pixel box, half-open: columns `x_min..x_max`, rows `y_min..y_max`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: u32,
    pub y_min: u32,
    pub x_max: u32,
    pub y_max: u32,
}

impl BBox {
    pub fn width(&self) -> u32 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> u32 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> u32 {
        self.width() * self.height()
    }

    pub fn is_valid(&self, width: usize, height: usize) -> bool {
        self.x_min < self.x_max
            && self.y_min < self.y_max
            && self.x_max as usize <= width
            && self.y_max as usize <= height
    }

    /// Whether the box shares at least one pixel with the given cell rectangle.
    pub fn intersects(&self, x0: u32, y0: u32, x1: u32, y1: u32) -> bool {
        self.x_min < x1 && x0 < self.x_max && self.y_min < y1 && y0 < self.y_max
    }
}

impl Image {
    pub fn new(width: usize, height: usize, fill: Rgb) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&fill);
        }
        Image {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Rgb {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn put(&mut self, x: usize, y: usize, c: Rgb) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&c);
    }

    pub fn pixels(&self) -> impl Iterator<Item = Rgb> + '_ {
        self.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]])
    }

    /// Mean of every channel value in `bbox`, scaled to [0, 1].
    pub fn mean_in(&self, bbox: &BBox) -> f64 {
        let mut sum = 0u64;
        for y in bbox.y_min..bbox.y_max {
            for x in bbox.x_min..bbox.x_max {
                let p = self.get(x as usize, y as usize);
                sum += p[0] as u64 + p[1] as u64 + p[2] as u64;
            }
        }
        sum as f64 / (bbox.area() as f64 * 3.0 * 255.0)
    }

    /// Bilinear resample of `bbox` onto an `out_w × out_h` raster using
    /// pixel-center alignment and edge clamping.
    pub fn crop_resize(&self, bbox: &BBox, out_w: usize, out_h: usize) -> Image {
        let mut out = Image::new(out_w, out_h, [0, 0, 0]);
        let sx = bbox.width() as f64 / out_w as f64;
        let sy = bbox.height() as f64 / out_h as f64;
        let max_x = (bbox.x_max - 1) as f64;
        let max_y = (bbox.y_max - 1) as f64;
        for v in 0..out_h {
            let fy = (bbox.y_min as f64 + (v as f64 + 0.5) * sy - 0.5).clamp(bbox.y_min as f64, max_y);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(bbox.y_max as usize - 1);
            let wy = fy - y0 as f64;
            for u in 0..out_w {
                let fx =
                    (bbox.x_min as f64 + (u as f64 + 0.5) * sx - 0.5).clamp(bbox.x_min as f64, max_x);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(bbox.x_max as usize - 1);
                let wx = fx - x0 as f64;
                let (p00, p10, p01, p11) = (
                    self.get(x0, y0),
                    self.get(x1, y0),
                    self.get(x0, y1),
                    self.get(x1, y1),
                );
                let mut c = [0u8; 3];
                for ch in 0..3 {
                    let top = p00[ch] as f64 * (1.0 - wx) + p10[ch] as f64 * wx;
                    let bot = p01[ch] as f64 * (1.0 - wx) + p11[ch] as f64 * wx;
                    c[ch] = (top * (1.0 - wy) + bot * wy).round().clamp(0.0, 255.0) as u8;
                }
                out.put(u, v, c);
            }
        }
        out
    }

    /// Splits the raster into row-major `patch × patch` cells, each flattened
    /// as (row, col, channel) and scaled to [0, 1].
    pub fn patches(&self, patch: usize) -> Result<Vec<Vec<f64>>> {
        if self.width % patch != 0 || self.height % patch != 0 || patch == 0 {
            return Err(Error::ShapeMismatch {
                expected: format!("dimensions divisible by {patch}"),
                got: format!("{}x{}", self.width, self.height),
            });
        }
        let (pw, ph) = (self.width / patch, self.height / patch);
        let mut out = Vec::with_capacity(pw * ph);
        for py in 0..ph {
            for px in 0..pw {
                let mut v = Vec::with_capacity(patch * patch * 3);
                for y in 0..patch {
                    for x in 0..patch {
                        let p = self.get(px * patch + x, py * patch + y);
                        v.extend(p.iter().map(|&c| c as f64 / 255.0));
                    }
                }
                out.push(v);
            }
        }
        Ok(out)
    }

    /// Inverse of [`Image::patches`]: values are clamped to [0, 1] and rounded.
    pub fn from_patches(patches: &[Vec<f64>], patch: usize, width: usize, height: usize) -> Image {
        let mut img = Image::new(width, height, [0, 0, 0]);
        let pw = width / patch;
        for (i, v) in patches.iter().enumerate() {
            let (px, py) = (i % pw, i / pw);
            for y in 0..patch {
                for x in 0..patch {
                    let o = (y * patch + x) * 3;
                    let mut c = [0u8; 3];
                    for ch in 0..3 {
                        c[ch] = (v[o + ch].clamp(0.0, 1.0) * 255.0).round() as u8;
                    }
                    img.put(px * patch + x, py * patch + y, c);
                }
            }
        }
        img
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut buf, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            let mut w = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
            w.write_image_data(&self.data)
                .map_err(|e| Error::Png(e.to_string()))?;
        }
        Ok(buf)
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Image> {
        let dec = png::Decoder::new(bytes);
        let mut reader = dec.read_info().map_err(|e| Error::Png(e.to_string()))?;
        let mut buf = vec![0; reader.output_buffer_size()];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| Error::Png(e.to_string()))?;
        if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
            return Err(Error::Png(format!(
                "expected 8-bit RGB, got {:?}/{:?}",
                info.color_type, info.bit_depth
            )));
        }
        buf.truncate(info.buffer_size());
        Ok(Image {
            width: info.width as usize,
            height: info.height as usize,
            data: buf,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_frame_crop_is_2x_box_downsample() {
        let mut img = Image::new(64, 64, [0, 0, 0]);
        for y in 0..64 {
            for x in 0..64 {
                img.put(x, y, [(x * 4) as u8, (y * 4) as u8, ((x + y) % 7 * 30) as u8]);
            }
        }
        let full = BBox { x_min: 0, y_min: 0, x_max: 64, y_max: 64 };
        let crop = img.crop_resize(&full, 32, 32);
        for v in 0..32 {
            for u in 0..32 {
                let got = crop.get(u, v);
                for ch in 0..3 {
                    let s: f64 = [(0, 0), (1, 0), (0, 1), (1, 1)]
                        .iter()
                        .map(|&(dx, dy)| img.get(2 * u + dx, 2 * v + dy)[ch] as f64)
                        .sum();
                    assert_eq!(got[ch], (s / 4.0).round() as u8);
                }
            }
        }
    }

    #[test]
    fn uniform_box_resamples_uniform() {
        let mut img = Image::new(64, 64, [10, 10, 10]);
        for y in 20..36 {
            for x in 8..24 {
                img.put(x, y, [220, 30, 40]);
            }
        }
        let b = BBox { x_min: 8, y_min: 20, x_max: 24, y_max: 36 };
        let crop = img.crop_resize(&b, 32, 32);
        assert!(crop.pixels().all(|p| p == [220, 30, 40]));
    }

    #[test]
    fn patches_roundtrip() {
        let mut img = Image::new(16, 16, [0, 0, 0]);
        for (i, b) in img.data.iter_mut().enumerate() {
            *b = (i * 37 % 251) as u8;
        }
        let p = img.patches(8).unwrap();
        assert_eq!(p.len(), 4);
        assert_eq!(p[0].len(), 192);
        assert_eq!(Image::from_patches(&p, 8, 16, 16), img);
        assert!(img.patches(5).is_err());
    }

    #[test]
    fn png_roundtrip() {
        let mut img = Image::new(8, 4, [1, 2, 3]);
        img.put(3, 2, [200, 100, 50]);
        let bytes = img.encode_png().unwrap();
        assert_eq!(Image::decode_png(&bytes).unwrap(), img);
    }
}
