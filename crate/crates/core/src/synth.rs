//! Synthetic rectified pairs with exact disparity.
//!
//! Textures are drawn on a strip wider than the image so the right view is
//! fully textured. The left view shows the strip directly; the right view
//! samples it at `x + d`, so left column `x` matches right column `x - d`,
//! the convention used by the cost volume. Fractional disparities use linear
//! interpolation. Left pixels whose match would fall left of the right
//! image, and (optionally) pixels occluded in the right view, are unlabeled.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kv::KeyValues;
use crate::sample::StereoSample;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Texture {
    /// Binary dots at the given density, then a 3×3 box blur.
    RandomDot { density: f64 },
    /// Uniform noise smoothed by repeated 5×5 box blurs, rescaled to `[0, 1]`.
    SmoothNoise,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Field {
    Constant(f64),
    /// Background plane with a randomly placed fronto-parallel rectangle.
    TwoPlane { background: f64, foreground: f64 },
    /// Disparity varying linearly from the top row to the bottom row.
    Ramp { top: f64, bottom: f64 },
}

impl Field {
    fn max(self) -> f64 {
        match self {
            Field::Constant(d) => d,
            Field::TwoPlane { background, foreground } => background.max(foreground),
            Field::Ramp { top, bottom } => top.max(bottom),
        }
    }

    fn min(self) -> f64 {
        match self {
            Field::Constant(d) => d,
            Field::TwoPlane { background, foreground } => background.min(foreground),
            Field::Ramp { top, bottom } => top.min(bottom),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub texture: Texture,
    pub field: Field,
    /// Disparity range of the consuming model; the field must stay below it.
    pub max_disparity: usize,
    /// Unlabel background pixels hidden behind the foreground in the right view.
    pub mask_occlusions: bool,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(height: usize, width: usize, field: Field) -> Self {
        SynthSpec {
            height,
            width,
            channels: 1,
            texture: Texture::RandomDot { density: 0.5 },
            field,
            max_disparity: width,
            mask_occlusions: true,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_texture(mut self, texture: Texture) -> Self {
        self.texture = texture;
        self
    }

    pub fn with_max_disparity(mut self, d: usize) -> Self {
        self.max_disparity = d;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(Error::Config("synthetic extents must be positive".into()));
        }
        let (lo, hi) = (self.field.min(), self.field.max());
        if !(lo.is_finite() && hi.is_finite()) || lo < 0.0 {
            return Err(Error::Config(format!("disparities must be finite and non-negative, got {lo}..{hi}")));
        }
        if hi >= self.width as f64 || hi >= self.max_disparity as f64 {
            return Err(Error::Config(format!(
                "disparity {hi} must be below width {} and max_disparity {}",
                self.width, self.max_disparity
            )));
        }
        if let Texture::RandomDot { density } = self.texture {
            if !(0.0..=1.0).contains(&density) {
                return Err(Error::Config(format!("dot density {density} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// Keys: `height`, `width`, `channels`, `texture` (`random-dot` or
    /// `smooth-noise`), `density`, `field` (`constant`, `two-plane`, `ramp`),
    /// `disparity`, `background`, `foreground`, `top`, `bottom`,
    /// `max_disparity`, `mask_occlusions`, `seed`.
    pub fn from_kv(kv: &mut KeyValues) -> Result<Self> {
        let need = |kv: &mut KeyValues, k: &str| -> Result<f64> {
            kv.take(k)?.ok_or_else(|| Error::Config(format!("missing key {k}")))
        };
        let height = need(kv, "height")? as usize;
        let width = need(kv, "width")? as usize;
        let channels = kv.take_or("channels", 1usize)?;
        let texture = match kv.take_or("texture", "random-dot".to_string())?.as_str() {
            "random-dot" => Texture::RandomDot {
                density: kv.take_or("density", 0.5)?,
            },
            "smooth-noise" => Texture::SmoothNoise,
            t => return Err(Error::Config(format!("unknown texture {t:?}"))),
        };
        let field = match kv.take_or("field", "constant".to_string())?.as_str() {
            "constant" => Field::Constant(need(kv, "disparity")?),
            "two-plane" => Field::TwoPlane {
                background: need(kv, "background")?,
                foreground: need(kv, "foreground")?,
            },
            "ramp" => Field::Ramp {
                top: need(kv, "top")?,
                bottom: need(kv, "bottom")?,
            },
            f => return Err(Error::Config(format!("unknown field {f:?}"))),
        };
        let spec = SynthSpec {
            height,
            width,
            channels,
            texture,
            field,
            max_disparity: kv.take_or("max_disparity", width)?,
            mask_occlusions: kv.take_or("mask_occlusions", true)?,
            seed: kv.take_or("seed", 0)?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// 1-D box blur of radius `r` along rows or columns of an `h × w` plane, edges clamped.
fn box_blur(src: &[f64], h: usize, w: usize, r: usize, along_rows: bool) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    let norm = 1.0 / (2 * r + 1) as f64;
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for k in 0..=2 * r {
                let (yy, xx) = if along_rows {
                    (y, (x + k).saturating_sub(r).min(w - 1))
                } else {
                    ((y + k).saturating_sub(r).min(h - 1), x)
                };
                s += src[yy * w + xx];
            }
            out[y * w + x] = s * norm;
        }
    }
    out
}

fn blur2d(src: &[f64], h: usize, w: usize, r: usize) -> Vec<f64> {
    let t = box_blur(src, h, w, r, true);
    box_blur(&t, h, w, r, false)
}

/// One texture plane per channel, `h × w` each.
fn texture(kind: Texture, h: usize, w: usize, channels: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..channels)
        .map(|_| match kind {
            Texture::RandomDot { density } => {
                let dots: Vec<f64> = (0..h * w).map(|_| rng.random_bool(density) as u8 as f64).collect();
                blur2d(&dots, h, w, 1)
            }
            Texture::SmoothNoise => {
                let mut p: Vec<f64> = (0..h * w).map(|_| rng.random::<f64>()).collect();
                for _ in 0..3 {
                    p = blur2d(&p, h, w, 2);
                }
                let (lo, hi) = p.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
                let span = if hi > lo { hi - lo } else { 1.0 };
                p.iter().map(|&v| (v - lo) / span).collect()
            }
        })
        .collect()
}

/// Linear interpolation of row `y` of a plane of width `w` at position `p >= 0`.
pub fn interpolate(plane: &[f64], w: usize, y: usize, p: f64) -> f64 {
    let i = p.floor() as usize;
    let f = p - i as f64;
    let a = plane[y * w + i];
    if f == 0.0 {
        return a;
    }
    (1.0 - f) * a + f * plane[y * w + i + 1]
}

/// Renders a pair according to `spec`.
pub fn gen_synthetic_pair(spec: &SynthSpec) -> Result<StereoSample> {
    spec.validate()?;
    let (h, w, c) = (spec.height, spec.width, spec.channels);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let strip = w + spec.field.max().ceil() as usize + 2;
    let back = texture(spec.texture, h, strip, c, &mut rng);

    // foreground rectangle [y0, y1) × [x0, x1) in left-image coordinates
    let (front, rect, d_back, d_front) = match spec.field {
        Field::TwoPlane { background, foreground } => {
            let rh = rng.random_range(h / 4..=h / 2).max(1);
            let rw = rng.random_range(w / 4..=w / 2).max(1);
            let y0 = rng.random_range(0..=h - rh);
            let x0 = rng.random_range(0..=w - rw);
            let front = texture(spec.texture, h, strip, c, &mut rng);
            (Some(front), (y0, y0 + rh, x0, x0 + rw), background, foreground)
        }
        _ => (None, (0, 0, 0, 0), 0.0, 0.0),
    };
    let (y0, y1, x0, x1) = rect;
    let in_front_rows = |y: usize| front.is_some() && (y0..y1).contains(&y);
    let row_disparity = |y: usize| match spec.field {
        Field::Constant(d) => d,
        Field::Ramp { top, bottom } => {
            if h == 1 {
                top
            } else {
                top + (bottom - top) * y as f64 / (h - 1) as f64
            }
        }
        Field::TwoPlane { background, .. } => background,
    };

    let mut left = vec![0.0; h * w * c];
    let mut right = vec![0.0; h * w * c];
    let mut gt = vec![0.0; h * w];
    let mut mask = vec![true; h * w];
    for y in 0..h {
        let db = row_disparity(y);
        for x in 0..w {
            let is_front = in_front_rows(y) && (x0..x1).contains(&x);
            let d = if is_front { d_front } else { db };
            gt[y * w + x] = d;
            if (x as f64) < d {
                mask[y * w + x] = false;
            }
            if spec.mask_occlusions && !is_front && in_front_rows(y) {
                // the background point lands at xr = x - d_back in the right view,
                // where the foreground covers xr + d_front in [x0, x1)
                let p = x as f64 - d_back + d_front;
                if p >= x0 as f64 && p < x1 as f64 {
                    mask[y * w + x] = false;
                }
            }
            for ch in 0..c {
                let src = if is_front { &front.as_ref().unwrap()[ch] } else { &back[ch] };
                left[(y * w + x) * c + ch] = src[y * strip + x];
            }
            // right view at column x
            let pf = x as f64 + d_front;
            let shows_front = in_front_rows(y) && pf >= x0 as f64 && pf < x1 as f64;
            for ch in 0..c {
                right[(y * w + x) * c + ch] = if shows_front {
                    interpolate(&front.as_ref().unwrap()[ch], strip, y, pf)
                } else {
                    interpolate(&back[ch], strip, y, x as f64 + db)
                };
            }
        }
    }
    StereoSample::new(
        Tensor::new(&[h, w, c], left)?,
        Tensor::new(&[h, w, c], right)?,
        Tensor::new(&[h, w], gt)?,
        mask,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_disparity_is_identity() {
        let s = gen_synthetic_pair(&SynthSpec::new(8, 16, Field::Constant(0.0))).unwrap();
        assert_eq!(s.left, s.right);
        assert!(s.gt.data().iter().all(|&d| d == 0.0));
        assert!(s.mask.iter().all(|&m| m));
    }

    #[test]
    fn integer_shift_is_exact() {
        let s = gen_synthetic_pair(&SynthSpec::new(6, 20, Field::Constant(3.0)).with_seed(4)).unwrap();
        for y in 0..6 {
            for x in 3..20 {
                assert_eq!(s.left.get(&[y, x, 0]), s.right.get(&[y, x - 3, 0]));
                assert!(s.mask[y * 20 + x]);
            }
            assert!(!s.mask[y * 20 + 2]);
        }
    }

    #[test]
    fn rejects_out_of_range() {
        assert!(gen_synthetic_pair(&SynthSpec::new(4, 8, Field::Constant(8.0))).is_err());
        let s = SynthSpec::new(4, 64, Field::Constant(40.0)).with_max_disparity(32);
        assert!(gen_synthetic_pair(&s).is_err());
    }
}
