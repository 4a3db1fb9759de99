//! RGB images as `H×W×3` arrays of values in `[0, 1]`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ImageArray {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageArray {
    /// Row-major, channel-last data. Every value must be finite and in `[0, 1]`.
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(invalid!("image must be at least 1×1, got {height}×{width}"));
        }
        if data.len() != height * width * 3 {
            return Err(invalid!(
                "expected {} values for a {height}×{width}×3 image, got {}",
                height * width * 3,
                data.len()
            ));
        }
        if let Some(v) = data
            .iter()
            .find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Err(invalid!("pixel value {v} outside [0, 1]"));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        assert!(height > 0 && width > 0);
        Self {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let mut img = Self::zeros(height, width);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    img.set(y, x, c, f(y, x, c).clamp(0.0, 1.0));
                }
            }
        }
        img
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * 3 + c]
    }

    #[inline]
    fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * 3 + c] = v;
    }

    /// Bilinear resize with corner-aligned sampling: output corners map
    /// exactly onto input corners.
    pub fn resize(&self, height: usize, width: usize) -> Self {
        assert!(height > 0 && width > 0);
        if height == self.height && width == self.width {
            return self.clone();
        }
        let map = |i: usize, dst: usize, src: usize| -> (usize, usize, f64) {
            if dst == 1 || src == 1 {
                return (0, 0, 0.0);
            }
            let pos = i as f64 * (src - 1) as f64 / (dst - 1) as f64;
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        };
        let xs: Vec<_> = (0..width).map(|x| map(x, width, self.width)).collect();
        let mut out = Self::zeros(height, width);
        for y in 0..height {
            let (y0, y1, fy) = map(y, height, self.height);
            for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
                for c in 0..3 {
                    let top = self.get(y0, x0, c) * (1.0 - fx) + self.get(y0, x1, c) * fx;
                    let bot = self.get(y1, x0, c) * (1.0 - fx) + self.get(y1, x1, c) * fx;
                    out.set(y, x, c, (top * (1.0 - fy) + bot * fy).clamp(0.0, 1.0));
                }
            }
        }
        out
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Self {
        assert!(top + height <= self.height && left + width <= self.width);
        let mut out = Self::zeros(height, width);
        for y in 0..height {
            let src = ((top + y) * self.width + left) * 3;
            let dst = y * width * 3;
            out.data[dst..dst + width * 3].copy_from_slice(&self.data[src..src + width * 3]);
        }
        out
    }

    /// Copies `tile` into this image with its top-left corner at `(top, left)`.
    pub fn paste(&mut self, tile: &ImageArray, top: usize, left: usize) {
        assert!(top + tile.height <= self.height && left + tile.width <= self.width);
        for y in 0..tile.height {
            let dst = ((top + y) * self.width + left) * 3;
            let src = y * tile.width * 3;
            self.data[dst..dst + tile.width * 3]
                .copy_from_slice(&tile.data[src..src + tile.width * 3]);
        }
    }

    /// Zero-pads bottom and right so both sides are multiples of `m`.
    pub fn pad_to_multiple(&self, m: usize) -> Self {
        let h = self.height.div_ceil(m) * m;
        let w = self.width.div_ceil(m) * m;
        if h == self.height && w == self.width {
            return self.clone();
        }
        let mut out = Self::zeros(h, w);
        out.paste(self, 0, 0);
        out
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>> {
        let buf: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v * 255.0).round() as u8)
            .collect();
        let rgb = image::RgbImage::from_raw(self.width as u32, self.height as u32, buf)
            .ok_or_else(|| invalid!("image buffer size mismatch"))?;
        let mut out = std::io::Cursor::new(Vec::new());
        rgb.write_to(&mut out, image::ImageFormat::Png)?;
        Ok(out.into_inner())
    }

    pub fn from_encoded(bytes: &[u8]) -> Result<Self> {
        let rgb = image::load_from_memory(bytes)?.to_rgb8();
        let (w, h) = rgb.dimensions();
        let data = rgb
            .into_raw()
            .into_iter()
            .map(|b| b as f64 / 255.0)
            .collect();
        Self::new(h as usize, w as usize, data)
    }
}

/// Parameters of a procedural image reference `synth:<style>:<seed>:<h>x<w>`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SynthSpec {
    pub style: u32,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
}

pub const SYNTH_COLORS: [&str; 4] = ["pink", "purple", "blue", "brown"];
pub const SYNTH_ORIENTATIONS: [&str; 2] = ["horizontal", "vertical"];
pub const SYNTH_TEXTURES: [&str; 4] = ["sparse", "fine", "dense", "coarse"];

impl SynthSpec {
    pub fn parse(s: &str) -> Option<Self> {
        let rest = s.strip_prefix("synth:")?;
        let mut parts = rest.split(':');
        let style = parts.next()?.parse().ok()?;
        let seed = parts.next()?.parse().ok()?;
        let (h, w) = parts.next()?.split_once('x')?;
        if parts.next().is_some() {
            return None;
        }
        let (height, width) = (h.parse().ok()?, w.parse().ok()?);
        if height == 0 || width == 0 {
            return None;
        }
        Some(Self {
            style,
            seed,
            height,
            width,
        })
    }

    pub fn to_ref(&self) -> String {
        format!(
            "synth:{}:{}:{}x{}",
            self.style, self.seed, self.height, self.width
        )
    }

    pub fn color(&self) -> &'static str {
        SYNTH_COLORS[self.style as usize % 4]
    }

    pub fn orientation(&self) -> &'static str {
        SYNTH_ORIENTATIONS[(self.style as usize / 4) % 2]
    }

    pub fn texture(&self) -> &'static str {
        SYNTH_TEXTURES[(self.style as usize / 8) % 4]
    }

    /// Stripe pattern whose hue, orientation and frequency are set by the
    /// style; the seed only moves the phase and adds mild noise. Frequencies
    /// are in cycles per image so the pattern survives resizing.
    pub fn render(&self) -> ImageArray {
        const PALETTE: [[f64; 3]; 4] = [
            [0.92, 0.55, 0.70],
            [0.55, 0.35, 0.75],
            [0.35, 0.50, 0.90],
            [0.65, 0.45, 0.30],
        ];
        let base = PALETTE[self.style as usize % 4];
        let vertical = (self.style / 4) % 2 == 1;
        let cycles = [2.0, 4.0, 7.0, 11.0][(self.style as usize / 8) % 4];
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ ((self.style as u64) << 40));
        let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let (h, w) = (self.height as f64, self.width as f64);
        let mut img = ImageArray::zeros(self.height, self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                let t = if vertical { x as f64 / w } else { y as f64 / h };
                let wave = 0.5 + 0.5 * (std::f64::consts::TAU * cycles * t + phase).sin();
                let shade = 0.55 + 0.45 * wave;
                let noise: f64 = rng.gen_range(-0.04..0.04);
                for (c, b) in base.iter().enumerate() {
                    img.set(y, x, c, (b * shade + noise).clamp(0.0, 1.0));
                }
            }
        }
        img
    }
}

/// Resolves an image reference: `synth:` specs are rendered, anything else
/// is a file path (relative paths resolve against `base_dir`).
pub fn load_image(image_ref: &str, base_dir: Option<&Path>) -> Result<ImageArray> {
    if image_ref.starts_with("synth:") {
        return SynthSpec::parse(image_ref)
            .map(|s| s.render())
            .ok_or_else(|| invalid!("malformed synthetic image reference `{image_ref}`"));
    }
    let path = match base_dir {
        Some(dir) if Path::new(image_ref).is_relative() => dir.join(image_ref),
        _ => Path::new(image_ref).to_path_buf(),
    };
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    ImageArray::from_encoded(&bytes)
}

/// Encoded bytes for an image reference (PNG for synthetic images).
pub fn image_bytes(image_ref: &str, base_dir: Option<&Path>) -> Result<Vec<u8>> {
    if image_ref.starts_with("synth:") {
        return load_image(image_ref, None)?.to_png_bytes();
    }
    let path = match base_dir {
        Some(dir) if Path::new(image_ref).is_relative() => dir.join(image_ref),
        _ => Path::new(image_ref).to_path_buf(),
    };
    std::fs::read(&path).map_err(|e| Error::io(&path, e))
}
