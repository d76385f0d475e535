use crate::error::{Error, Result};

use super::signals::MAX_HEAD_OFFSET;

pub const BACKGROUND_LEVEL: f32 = 0.1;
pub const HEAD_LEVEL: f32 = 0.45;
pub const FEATURE_LEVEL: f32 = 0.95;
pub const CLOSED_EYE_LEVEL: f32 = 0.15;
/// Sub-samples per pixel along each axis.
pub const SUPERSAMPLE: usize = 4;

const HEAD_RADIUS: f64 = 0.40;
const EYE_DX: f64 = 0.16;
const EYE_DY: f64 = -0.12;
const EYE_RX: f64 = 0.08;
const EYE_RY_OPEN: f64 = 0.07;
const EYE_RY_CLOSED: f64 = 0.015;
const MOUTH_DY: f64 = 0.18;
const MOUTH_RX: f64 = 0.15;
const MOUTH_RY: f64 = 0.13;

/// Everything that determines one rendered frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneState {
    /// Mouth opening in `[0, 1]`.
    pub driver: f64,
    pub blink: bool,
    /// Head translation in pixels, `(dx, dy)`.
    pub offset: (f64, f64),
}

#[derive(Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        if self.rx <= 0.0 || self.ry <= 0.0 {
            return false;
        }
        let u = (x - self.cx) / self.rx;
        let v = (y - self.cy) / self.ry;
        u * u + v * v <= 1.0
    }
}

struct Layout {
    head: Ellipse,
    eyes: [Ellipse; 2],
    mouth: Ellipse,
}

fn layout(state: &SceneState, height: usize, width: usize) -> Layout {
    let s = height.min(width) as f64;
    let cx = width as f64 / 2.0 + state.offset.0;
    let cy = height as f64 / 2.0 + state.offset.1;
    let eye_ry = if state.blink { EYE_RY_CLOSED } else { EYE_RY_OPEN };
    let eye = |side: f64| Ellipse { cx: cx + side * EYE_DX * s, cy: cy + EYE_DY * s, rx: EYE_RX * s, ry: eye_ry * s };
    Layout {
        head: Ellipse { cx, cy, rx: HEAD_RADIUS * s, ry: HEAD_RADIUS * s },
        eyes: [eye(-1.0), eye(1.0)],
        mouth: Ellipse { cx, cy: cy + MOUTH_DY * s, rx: MOUTH_RX * s, ry: MOUTH_RY * s * state.driver },
    }
}

fn check_dims(height: usize, width: usize) -> Result<()> {
    if height < 16 || width < 16 {
        return Err(Error::invalid(format!("frame size {height}x{width} is below the 16x16 minimum")));
    }
    Ok(())
}

fn for_each_subsample(height: usize, width: usize, mut f: impl FnMut(usize, f64, f64)) {
    let step = 1.0 / SUPERSAMPLE as f64;
    for y in 0..height {
        for x in 0..width {
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    f(y * width + x, x as f64 + (sx as f64 + 0.5) * step, y as f64 + (sy as f64 + 0.5) * step);
                }
            }
        }
    }
}

/// Renders a single-channel `height x width` frame with values in `[0, 1]`.
pub fn render_frame(state: &SceneState, height: usize, width: usize) -> Result<Vec<f32>> {
    check_dims(height, width)?;
    if !(0.0..=1.0).contains(&state.driver) {
        return Err(Error::invalid(format!("driver value {} outside [0, 1]", state.driver)));
    }
    let l = layout(state, height, width);
    let eye_level = if state.blink { CLOSED_EYE_LEVEL } else { FEATURE_LEVEL };
    let mut acc = vec![0.0f32; height * width];
    for_each_subsample(height, width, |i, x, y| {
        let v = if l.mouth.contains(x, y) {
            FEATURE_LEVEL
        } else if l.eyes.iter().any(|e| e.contains(x, y)) {
            eye_level
        } else if l.head.contains(x, y) {
            HEAD_LEVEL
        } else {
            BACKGROUND_LEVEL
        };
        acc[i] += v;
    });
    let n = (SUPERSAMPLE * SUPERSAMPLE) as f32;
    Ok(acc.into_iter().map(|v| (v / n).clamp(0.0, 1.0)).collect())
}

/// Area of the mouth in pixels, measured on the same sub-sample grid as the
/// renderer.
pub fn mouth_area(state: &SceneState, height: usize, width: usize) -> Result<f64> {
    check_dims(height, width)?;
    let l = layout(state, height, width);
    let mut hits = 0usize;
    for_each_subsample(height, width, |_, x, y| {
        if l.mouth.contains(x, y) {
            hits += 1;
        }
    });
    Ok(hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64)
}

/// Pixel masks that hold for every head offset in the corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionMasks {
    pub height: usize,
    pub width: usize,
    /// Bounding boxes of both eyes, widened by the offset range.
    pub eyes: Vec<bool>,
    /// Bounding box of the fully open mouth, widened by the offset range.
    pub mouth: Vec<bool>,
    /// Pixels outside the head for every offset.
    pub background: Vec<bool>,
}

impl RegionMasks {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        check_dims(height, width)?;
        let s = height.min(width) as f64;
        let cx = width as f64 / 2.0;
        let cy = height as f64 / 2.0;
        let margin = MAX_HEAD_OFFSET + 1.0;
        let in_box = |px: f64, py: f64, bx: f64, by: f64, rx: f64, ry: f64| (px - bx).abs() <= rx + margin && (py - by).abs() <= ry + margin;
        let n = height * width;
        let mut eyes = vec![false; n];
        let mut mouth = vec![false; n];
        let mut background = vec![false; n];
        for y in 0..height {
            for x in 0..width {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let i = y * width + x;
                eyes[i] = [-1.0, 1.0]
                    .iter()
                    .any(|side| in_box(px, py, cx + side * EYE_DX * s, cy + EYE_DY * s, EYE_RX * s, EYE_RY_OPEN * s));
                mouth[i] = in_box(px, py, cx, cy + MOUTH_DY * s, MOUTH_RX * s, MOUTH_RY * s);
                let r = ((px - cx).powi(2) + (py - cy).powi(2)).sqrt();
                background[i] = r > HEAD_RADIUS * s + MAX_HEAD_OFFSET * std::f64::consts::SQRT_2 + 1.0;
            }
        }
        Ok(Self { height, width, eyes, mouth, background })
    }

    pub fn count(mask: &[bool]) -> usize {
        mask.iter().filter(|&&m| m).count()
    }
}
