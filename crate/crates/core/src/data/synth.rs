//! Synthetic clips whose classes differ only in how a textured patch moves.
//!
//! Each clip draws a fresh static background and patch texture from the same
//! distribution for every class and places the patch at a uniformly random
//! start position. Single frames therefore carry no class information; only
//! the displacement between frames does.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::clip::VideoClip;
use crate::error::{Error, Result};
use crate::tensor::{Precision, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Up,
    Down,
    Left,
    Right,
}

impl Direction {
    /// (row, column) step per frame.
    fn step(self) -> (isize, isize) {
        match self {
            Direction::Up => (-1, 0),
            Direction::Down => (1, 0),
            Direction::Left => (0, -1),
            Direction::Right => (0, 1),
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Up => "up",
            Direction::Down => "down",
            Direction::Left => "left",
            Direction::Right => "right",
        })
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "up" => Ok(Direction::Up),
            "down" => Ok(Direction::Down),
            "left" => Ok(Direction::Left),
            "right" => Ok(Direction::Right),
            other => Err(Error::input(format!("unknown direction {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MotionProgram {
    pub direction: Direction,
    /// Pixels per frame.
    pub speed: usize,
    /// When set, the motion reverses every `period` frames (triangle wave).
    pub reversal_period: Option<usize>,
}

impl MotionProgram {
    pub fn linear(direction: Direction, speed: usize) -> Self {
        MotionProgram {
            direction,
            speed,
            reversal_period: None,
        }
    }

    /// Signed displacement (rows, cols) of frame `t` relative to frame 0.
    pub fn offset(&self, t: usize) -> (isize, isize) {
        let travelled = match self.reversal_period {
            Some(p) if p > 0 => {
                let phase = t % (2 * p);
                if phase < p {
                    phase
                } else {
                    2 * p - phase
                }
            }
            _ => t,
        } * self.speed;
        let (dr, dc) = self.direction.step();
        (dr * travelled as isize, dc * travelled as isize)
    }

    /// `direction:speed` or `direction:speed:period`.
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let num = |p: &str| {
            p.parse::<usize>()
                .map_err(|_| Error::input(format!("bad number {p:?} in motion program {s:?}")))
        };
        match parts.as_slice() {
            [d] => Ok(Self::linear(d.parse()?, 1)),
            [d, v] => Ok(Self::linear(d.parse()?, num(v)?)),
            [d, v, p] => Ok(MotionProgram {
                direction: d.parse()?,
                speed: num(v)?,
                reversal_period: Some(num(p)?),
            }),
            _ => Err(Error::input(format!("bad motion program {s:?}"))),
        }
    }
}

impl fmt::Display for MotionProgram {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.direction, self.speed)?;
        if let Some(p) = self.reversal_period {
            write!(f, ":{p}")?;
        }
        Ok(())
    }
}

const BACKGROUND_SEED: u64 = 0xB6;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTaskSpec {
    pub classes: Vec<MotionProgram>,
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub noise: f64,
}

impl Default for SyntheticTaskSpec {
    /// Four directions at one pixel per frame on 16x32x32 grayscale clips.
    fn default() -> Self {
        SyntheticTaskSpec {
            classes: [Direction::Up, Direction::Down, Direction::Left, Direction::Right]
                .into_iter()
                .map(|d| MotionProgram::linear(d, 1))
                .collect(),
            frames: 16,
            channels: 1,
            height: 32,
            width: 32,
            patch: 8,
            noise: 0.05,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.to_string()).collect()
    }
}

/// Deterministic in `seed`. Every clip shares one static background drawn
/// uniformly from [0, 0.5); the seed picks the patch texture (uniform in
/// [0.5, 1.0)), its start position and the noise. The patch wraps around
/// the frame edges.
pub fn generate_synthetic_clip(spec: &SyntheticTaskSpec, class: usize, seed: u64) -> Result<VideoClip> {
    let program = spec
        .classes
        .get(class)
        .ok_or_else(|| Error::input(format!("class {class} out of range for {} classes", spec.classes.len())))?;
    let (t, c, h, w, p) = (spec.frames, spec.channels, spec.height, spec.width, spec.patch);
    if t == 0 || c == 0 || h == 0 || w == 0 || p == 0 || p > h || p > w {
        return Err(Error::input("synthetic clip needs positive extents and a patch that fits the frame"));
    }
    let mut shared = ChaCha8Rng::seed_from_u64(BACKGROUND_SEED);
    let background: Vec<f64> = (0..c * h * w).map(|_| shared.random_range(0.0..0.5)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let texture: Vec<f64> = (0..c * p * p).map(|_| rng.random_range(0.5..1.0)).collect();
    let row0 = rng.random_range(0..h) as isize;
    let col0 = rng.random_range(0..w) as isize;

    let plane = h * w;
    let mut data = Vec::with_capacity(t * c * plane);
    for frame in 0..t {
        let (dr, dc) = program.offset(frame);
        let mut img = background.clone();
        for ch in 0..c {
            for i in 0..p {
                let r = (row0 + dr + i as isize).rem_euclid(h as isize) as usize;
                for j in 0..p {
                    let col = (col0 + dc + j as isize).rem_euclid(w as isize) as usize;
                    img[ch * plane + r * w + col] = texture[(ch * p + i) * p + j];
                }
            }
        }
        if spec.noise > 0.0 {
            for v in &mut img {
                *v += spec.noise * rng.sample::<f64, _>(StandardNormal);
            }
        }
        data.extend(img);
    }
    VideoClip::new(Tensor::from_parts_rounded(vec![t, c, h, w], data, Precision::F32), class)
}
