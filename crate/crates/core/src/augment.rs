//! Geometric augmentation of binned frames.
//!
//! A [`ViewParams`] describes one affine warp (flip, vertical shear, scale,
//! rotation, integer translation about the frame centre). [`apply_view`]
//! resolves it once into a nearest-neighbour source map and applies that map
//! to every time step and polarity, so a view is consistent over time and
//! event counts stay integral and non-negative.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::events::{FrameTensor, CHANNELS};

/// Ranges from which view parameters are drawn.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentPolicy {
    pub flip_prob: f64,
    /// Shear factor drawn from `[-max_shear, max_shear]`.
    pub max_shear: f64,
    /// Maximum shift as a fraction of the side length.
    pub max_translate: f64,
    pub max_rotation_deg: f64,
    pub scale_range: (f64, f64),
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            flip_prob: 0.5,
            max_shear: 0.15,
            max_translate: 0.125,
            max_rotation_deg: 15.0,
            scale_range: (0.8, 1.2),
        }
    }
}

impl AugmentPolicy {
    /// Every draw is the identity view.
    pub fn identity() -> Self {
        AugmentPolicy {
            flip_prob: 0.0,
            max_shear: 0.0,
            max_translate: 0.0,
            max_rotation_deg: 0.0,
            scale_range: (1.0, 1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        let ok = (0.0..=1.0).contains(&self.flip_prob)
            && self.max_shear >= 0.0
            && (0.0..=1.0).contains(&self.max_translate)
            && (0.0..=180.0).contains(&self.max_rotation_deg)
            && lo > 0.0
            && lo <= hi
            && hi.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid augmentation policy {self:?}")))
        }
    }
}

/// One concrete warp, shared by all frames of a sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewParams {
    pub flip: bool,
    pub shear_y: f64,
    /// `(dx, dy)` in pixels.
    pub translate: (i32, i32),
    pub resize_scale: f64,
    pub rotation_deg: f64,
    /// Seed the parameters were drawn from.
    pub seed: u64,
}

impl ViewParams {
    pub fn identity() -> Self {
        ViewParams {
            flip: false,
            shear_y: 0.0,
            translate: (0, 0),
            resize_scale: 1.0,
            rotation_deg: 0.0,
            seed: 0,
        }
    }

    pub fn is_identity(&self) -> bool {
        !self.flip
            && self.shear_y == 0.0
            && self.translate == (0, 0)
            && self.resize_scale == 1.0
            && self.rotation_deg == 0.0
    }

    /// Linear part `[[a, b], [c, d]]` acting on centred `(x, y)`: flip, then
    /// shear, scale and rotate.
    fn linear(&self) -> [f64; 4] {
        let f = if self.flip { -1.0 } else { 1.0 };
        // shear_y: y' = y + s * x
        let (a, b, c, d) = (f, 0.0, self.shear_y * f, 1.0);
        let s = self.resize_scale;
        let (a, b, c, d) = (a * s, b * s, c * s, d * s);
        let (sin, cos) = self.rotation_deg.to_radians().sin_cos();
        [cos * a - sin * c, cos * b - sin * d, sin * a + cos * c, sin * b + cos * d]
    }
}

/// Draws a view for `(height, width)` frames from `seed`.
pub fn sample_view_params(policy: &AugmentPolicy, height: usize, width: usize, seed: u64) -> ViewParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sym = |rng: &mut ChaCha8Rng, m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
    let flip = policy.flip_prob > 0.0 && rng.random_bool(policy.flip_prob);
    let shear_y = sym(&mut rng, policy.max_shear);
    let max_dx = (policy.max_translate * width as f64).floor() as i32;
    let max_dy = (policy.max_translate * height as f64).floor() as i32;
    let dx = rng.random_range(-max_dx..=max_dx);
    let dy = rng.random_range(-max_dy..=max_dy);
    let (lo, hi) = policy.scale_range;
    let resize_scale = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let rotation_deg = sym(&mut rng, policy.max_rotation_deg);
    ViewParams {
        flip,
        shear_y,
        translate: (dx, dy),
        resize_scale,
        rotation_deg,
        seed,
    }
}

/// Source pixel of every output pixel, or `None` outside the input.
fn source_map(p: &ViewParams, h: usize, w: usize) -> Vec<Option<usize>> {
    let [a, b, c, d] = p.linear();
    let det = a * d - b * c;
    let inv = [d / det, -b / det, -c / det, a / det];
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let mut map = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let u = x as f64 + 0.5 - cx - p.translate.0 as f64;
            let v = y as f64 + 0.5 - cy - p.translate.1 as f64;
            let sx = (inv[0] * u + inv[1] * v + cx).floor();
            let sy = (inv[2] * u + inv[3] * v + cy).floor();
            let inside = sx >= 0.0 && sy >= 0.0 && sx < w as f64 && sy < h as f64;
            map.push(inside.then(|| sy as usize * w + sx as usize));
        }
    }
    map
}

fn remap(frames: &FrameTensor, out_h: usize, out_w: usize, map: &[Option<usize>]) -> FrameTensor {
    let mut out = FrameTensor::zeros(frames.steps(), out_h, out_w);
    for t in 0..frames.steps() {
        for c in 0..CHANNELS {
            let src = frames.plane(t, c);
            for (o, m) in out.plane_mut(t, c).iter_mut().zip(map) {
                if let Some(i) = *m {
                    *o = src[i];
                }
            }
        }
    }
    out
}

/// Warps every frame with the same parameters; uncovered pixels are zero.
pub fn apply_view(frames: &FrameTensor, p: &ViewParams) -> FrameTensor {
    if p.is_identity() {
        return frames.clone();
    }
    let (h, w) = (frames.height(), frames.width());
    remap(frames, h, w, &source_map(p, h, w))
}

/// Nearest-neighbour resize of every plane to `(height, width)`.
pub fn resize_to(frames: &FrameTensor, height: usize, width: usize) -> Result<FrameTensor> {
    if height == 0 || width == 0 {
        return Err(Error::Validation(format!("cannot resize to {height}x{width}")));
    }
    let (h, w) = (frames.height(), frames.width());
    if (h, w) == (height, width) {
        return Ok(frames.clone());
    }
    if h == 0 || w == 0 {
        return Ok(FrameTensor::zeros(frames.steps(), height, width));
    }
    // Pixel centre (d + 1/2) * in / out, floored, in integer arithmetic.
    let pick = |d: usize, input: usize, output: usize| (2 * d + 1) * input / (2 * output);
    let map: Vec<Option<usize>> = (0..height)
        .flat_map(|y| (0..width).map(move |x| Some(pick(y, h, height) * w + pick(x, w, width))))
        .collect();
    Ok(remap(frames, height, width, &map))
}
