use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

use super::{Event, EventStream, Polarity};
use crate::error::{Error, Result};

/// Settings for the moving-bar event generator.
///
/// Class `c` of `num_classes` is a bar sweeping across the sensor in
/// direction `2πc / num_classes`. Its leading edge fires ON events and its
/// trailing edge OFF events; a fraction of all events is uniform noise.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorParams {
    pub width: u16,
    pub height: u16,
    pub num_classes: usize,
    pub duration_us: u64,
    /// Mean events per millisecond, signal and noise combined.
    pub event_rate: f64,
    pub noise_fraction: f64,
    /// Bar extent along its long axis, in pixels.
    pub bar_length: f64,
    pub bar_thickness: f64,
    /// Distance swept over the recording as a fraction of the smaller side.
    pub travel: f64,
    /// Relative spread of the sweep speed.
    pub speed_jitter: f64,
    /// Spread of the bar centre, in pixels.
    pub offset_jitter: f64,
    /// Spread of the motion direction, in radians.
    pub angle_jitter: f64,
    /// Std-dev of per-event position noise, in pixels.
    pub position_noise: f64,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        GeneratorParams {
            width: 32,
            height: 32,
            num_classes: 4,
            duration_us: 100_000,
            event_rate: 30.0,
            noise_fraction: 0.3,
            bar_length: 18.0,
            bar_thickness: 3.0,
            travel: 0.7,
            speed_jitter: 0.25,
            offset_jitter: 4.0,
            angle_jitter: 0.3,
            position_noise: 0.8,
        }
    }
}

impl GeneratorParams {
    /// The benchmark used for desk-scale runs: sparser, noisier and with
    /// looser bar directions than the default.
    pub fn desk() -> Self {
        GeneratorParams {
            event_rate: 15.0,
            noise_fraction: 0.8,
            angle_jitter: 0.8,
            ..GeneratorParams::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.width == 0 || self.height == 0 {
            return bad(format!("generator size {}x{}", self.width, self.height));
        }
        if self.num_classes == 0 {
            return bad("generator needs at least one class".into());
        }
        if self.duration_us == 0 {
            return bad("generator duration must be positive".into());
        }
        if !(self.event_rate.is_finite() && self.event_rate >= 0.0) {
            return bad(format!("event_rate {} must be finite and >= 0", self.event_rate));
        }
        if !(0.0..=1.0).contains(&self.noise_fraction) {
            return bad(format!("noise_fraction {} outside [0, 1]", self.noise_fraction));
        }
        let non_negative = [
            ("bar_length", self.bar_length),
            ("bar_thickness", self.bar_thickness),
            ("travel", self.travel),
            ("speed_jitter", self.speed_jitter),
            ("offset_jitter", self.offset_jitter),
            ("angle_jitter", self.angle_jitter),
            ("position_noise", self.position_noise),
        ];
        for (name, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} {v} must be finite and >= 0"));
            }
        }
        Ok(())
    }
}

fn poisson(rng: &mut ChaCha8Rng, mean: f64) -> usize {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).expect("positive finite mean").sample(rng) as usize
}

/// Generates one labelled recording. The same `(class_id, seed, params)`
/// always yields the same stream.
pub fn gen_synthetic_stream(
    class_id: usize,
    seed: u64,
    params: &GeneratorParams,
) -> Result<(EventStream, usize)> {
    params.validate()?;
    if class_id >= params.num_classes {
        return Err(Error::Validation(format!(
            "class {class_id} out of range for {} classes",
            params.num_classes
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(class_id as u64);

    let (w, h) = (params.width as f64, params.height as f64);
    let jitter = |rng: &mut ChaCha8Rng, spread: f64| {
        if spread > 0.0 {
            rng.random_range(-spread..=spread)
        } else {
            0.0
        }
    };
    let angle = 2.0 * PI * class_id as f64 / params.num_classes as f64
        + jitter(&mut rng, params.angle_jitter);
    let (dx, dy) = (angle.cos(), angle.sin());
    let (px, py) = (-dy, dx);
    let cx = w / 2.0 + jitter(&mut rng, params.offset_jitter);
    let cy = h / 2.0 + jitter(&mut rng, params.offset_jitter);
    let sweep =
        params.travel * w.min(h) * (1.0 + jitter(&mut rng, params.speed_jitter)).max(0.1);
    let dur = params.duration_us as f64;

    let expected = params.event_rate * dur / 1000.0;
    let n_signal = poisson(&mut rng, expected * (1.0 - params.noise_fraction));
    let n_noise = poisson(&mut rng, expected * params.noise_fraction);
    let pos_noise = Normal::new(0.0, params.position_noise).expect("finite std-dev");

    let mut events = Vec::with_capacity(n_signal + n_noise);
    for _ in 0..n_signal {
        let t = rng.random_range(0..params.duration_us);
        let leading = rng.random_bool(0.5);
        let front = -sweep / 2.0 + sweep * (t as f64 / dur);
        let edge = if leading {
            front + params.bar_thickness / 2.0
        } else {
            front - params.bar_thickness / 2.0
        };
        let along = params.bar_length * (rng.random::<f64>() - 0.5);
        let x = cx + edge * dx + along * px + pos_noise.sample(&mut rng);
        let y = cy + edge * dy + along * py + pos_noise.sample(&mut rng);
        let (x, y) = (x.floor(), y.floor());
        if x < 0.0 || y < 0.0 || x >= w || y >= h {
            continue;
        }
        let polarity = if leading { Polarity::On } else { Polarity::Off };
        events.push(Event {
            t,
            x: x as u16,
            y: y as u16,
            polarity,
        });
    }
    for _ in 0..n_noise {
        let t = rng.random_range(0..params.duration_us);
        let x = rng.random_range(0..params.width);
        let y = rng.random_range(0..params.height);
        let polarity = if rng.random_bool(0.5) {
            Polarity::On
        } else {
            Polarity::Off
        };
        events.push(Event { t, x, y, polarity });
    }
    events.sort_by_key(|e| e.t);
    Ok((EventStream::new(params.width, params.height, events)?, class_id))
}
