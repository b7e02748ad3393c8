//! Synthetic event streams.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::events::{Event, EventStream};

/// Timestamps of density-sweep events lie in `[0, SWEEP_WINDOW_US)`.
pub const SWEEP_WINDOW_US: u64 = 100_000;

/// Number of active pixels for `density` on an `height × width` sensor:
/// `⌊density·H·W⌋`, tolerant of the representation error of `density`.
pub fn active_pixel_count(height: u16, width: u16, density: f64) -> usize {
    let area = height as f64 * width as f64;
    (density * area * (1.0 + 1e-12)).floor().min(area) as usize
}

/// Picks `⌊density·H·W⌋` distinct pixels uniformly and gives each
/// `events_per_pixel` events with uniform integer timestamps and random
/// polarity.
pub fn gen_density_sweep(
    height: u16,
    width: u16,
    density: f64,
    events_per_pixel: usize,
    seed: u64,
) -> Result<EventStream> {
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::arg(format!("density {density} is outside (0, 1]")));
    }
    let area = height as usize * width as usize;
    let active = active_pixel_count(height, width, density);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut events = Vec::with_capacity(active * events_per_pixel);
    for pix in index::sample(&mut rng, area, active) {
        let (x, y) = ((pix % width as usize) as u16, (pix / width as usize) as u16);
        for _ in 0..events_per_pixel {
            let t = rng.gen_range(0..SWEEP_WINDOW_US) as f64;
            let p = if rng.gen_bool(0.5) { 1 } else { -1 };
            events.push(Event::new(x, y, t, p));
        }
    }
    EventStream::from_unsorted(width, height, events)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BarDirection {
    Left,
    Right,
}

impl BarDirection {
    pub fn class_index(self) -> usize {
        match self {
            BarDirection::Left => 0,
            BarDirection::Right => 1,
        }
    }
}

/// Moving-bar task: a vertical bar of `bar_height` pixels sweeps across
/// `sweep` columns, one column every `step_us`, each crossed pixel firing
/// once with up to `jitter_us` of extra delay.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyTaskSpec {
    pub width: u16,
    pub height: u16,
    pub bar_height: u16,
    pub sweep: u16,
    pub step_us: f64,
    pub jitter_us: f64,
    pub train_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

impl Default for ToyTaskSpec {
    fn default() -> Self {
        ToyTaskSpec {
            width: 16,
            height: 16,
            bar_height: 8,
            sweep: 8,
            step_us: 1000.0,
            jitter_us: 200.0,
            train_size: 200,
            test_size: 100,
            seed: 0,
        }
    }
}

impl ToyTaskSpec {
    pub fn events_per_sample(&self) -> usize {
        self.bar_height as usize * self.sweep as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.bar_height == 0 || self.sweep == 0 {
            return Err(Error::config("bar height and sweep must be at least 1"));
        }
        if self.bar_height > self.height || self.sweep > self.width {
            return Err(Error::config(format!(
                "a {}x{} bar sweep does not fit a {}x{} sensor",
                self.sweep, self.bar_height, self.width, self.height
            )));
        }
        if !(self.step_us > 0.0) || !(self.jitter_us >= 0.0) || self.jitter_us >= self.step_us {
            return Err(Error::config("need step_us > 0 and 0 <= jitter_us < step_us"));
        }
        Ok(())
    }
}

/// One moving-bar sample, fully determined by `spec.seed`. The left-moving
/// sample of a seed is the right-moving one mirrored in `x`.
pub fn gen_moving_bar(spec: &ToyTaskSpec, direction: BarDirection) -> Result<EventStream> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let x0 = rng.gen_range(0..=spec.width - spec.sweep);
    let y0 = rng.gen_range(0..=spec.height - spec.bar_height);
    let offset = rng.gen_range(0..1000) as f64;
    let p = if rng.gen_bool(0.5) { 1 } else { -1 };
    let mut events = Vec::with_capacity(spec.events_per_sample());
    for k in 0..spec.sweep {
        for dy in 0..spec.bar_height {
            let jitter = if spec.jitter_us > 0.0 { rng.gen_range(0.0..spec.jitter_us) } else { 0.0 };
            let t = offset + k as f64 * spec.step_us + jitter;
            let x = match direction {
                BarDirection::Right => x0 + k,
                BarDirection::Left => spec.width - 1 - (x0 + k),
            };
            events.push(Event::new(x, y0 + dy, t, p));
        }
    }
    EventStream::from_unsorted(spec.width, spec.height, events)
}

/// Balanced labelled samples; sample `i` uses a seed drawn from `seed`.
pub fn gen_moving_bar_set(spec: &ToyTaskSpec, count: usize, seed: u64) -> Result<Vec<(EventStream, BarDirection)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let dir = if i % 2 == 0 { BarDirection::Left } else { BarDirection::Right };
            let s = ToyTaskSpec { seed: rng.gen(), ..spec.clone() };
            Ok((gen_moving_bar(&s, dir)?, dir))
        })
        .collect()
}
