//! Attribute-to-image rendering.
//!
//! Every category has a fixed silhouette drawn on a neutral-gray background.
//! The silhouette's bounding box is cut into a grid of colour blocks; block
//! `r` is tinted by attributes `2r` and `2r + 1` along two chroma directions,
//! so an all-zero attribute vector gives a flat gray reference rendering.

use rand_distr::{Distribution, Normal};

use crate::autodiff::Tensor;
use crate::rng;

pub const BACKGROUND: f32 = 0.5;
pub const SILHOUETTE: f32 = 0.35;
pub const TINT: f32 = 0.3;

const CHROMA_A: [f32; 3] = [0.707, 0.0, -0.707];
const CHROMA_B: [f32; 3] = [-0.408, 0.816, -0.408];

type Rect = (f64, f64, f64, f64);

struct Shape {
    parts: &'static [Rect],
    bbox: Rect,
}

const TOP: Shape = Shape {
    parts: &[(0.3, 0.15, 0.7, 0.85), (0.1, 0.15, 0.9, 0.4)],
    bbox: (0.1, 0.15, 0.9, 0.85),
};

const BOTTOM: Shape = Shape {
    parts: &[
        (0.25, 0.1, 0.75, 0.3),
        (0.25, 0.1, 0.47, 0.9),
        (0.53, 0.1, 0.75, 0.9),
    ],
    bbox: (0.25, 0.1, 0.75, 0.9),
};

const SHOES: Shape = Shape {
    parts: &[
        (0.08, 0.55, 0.46, 0.8),
        (0.54, 0.55, 0.92, 0.8),
        (0.08, 0.42, 0.22, 0.55),
        (0.54, 0.42, 0.68, 0.55),
    ],
    bbox: (0.08, 0.42, 0.92, 0.8),
};

fn shape(category: usize) -> &'static Shape {
    match category % 3 {
        0 => &TOP,
        1 => &BOTTOM,
        _ => &SHOES,
    }
}

fn inside(r: &Rect, x: f64, y: f64) -> bool {
    x >= r.0 && x < r.2 && y >= r.1 && y < r.3
}

/// Render an item image `[3, side, side]`.
///
/// `texture` adds a fixed per-category pixel pattern derived from
/// `render_seed`; it does not depend on the attributes.
pub fn render(category: usize, attrs: &[f64], side: usize, render_seed: u64, texture: f64) -> Tensor<f32> {
    let sh = shape(category);
    let regions = attrs.len().div_ceil(2);
    let gx = (regions as f64).sqrt().ceil().max(1.0) as usize;
    let gy = regions.div_ceil(gx).max(1);
    let tints: Vec<[f32; 3]> = (0..regions)
        .map(|r| {
            let u = attrs[2 * r] as f32;
            let v = attrs.get(2 * r + 1).copied().unwrap_or(0.0) as f32;
            std::array::from_fn(|c| TINT * (u * CHROMA_A[c] + v * CHROMA_B[c]))
        })
        .collect();

    let plane = side * side;
    let mut data = vec![0f32; 3 * plane];
    let (x0, y0, x1, y1) = sh.bbox;
    for py in 0..side {
        let y = (py as f64 + 0.5) / side as f64;
        for px in 0..side {
            let x = (px as f64 + 0.5) / side as f64;
            let idx = py * side + px;
            if !sh.parts.iter().any(|r| inside(r, x, y)) {
                for c in 0..3 {
                    data[c * plane + idx] = BACKGROUND;
                }
                continue;
            }
            let cx = (((x - x0) / (x1 - x0)) * gx as f64).floor().clamp(0.0, (gx - 1) as f64) as usize;
            let cy = (((y - y0) / (y1 - y0)) * gy as f64).floor().clamp(0.0, (gy - 1) as f64) as usize;
            let r = cy * gx + cx;
            for c in 0..3 {
                let tint = tints.get(r).map_or(0.0, |t| t[c]);
                data[c * plane + idx] = SILHOUETTE + tint;
            }
        }
    }
    if texture > 0.0 {
        let mut rng = rng::stream(render_seed, "texture", category as u64);
        let normal = Normal::new(0.0, texture).expect("positive texture std");
        for v in &mut data {
            *v += normal.sample(&mut rng) as f32;
        }
    }
    Tensor::new(vec![3, side, side], data).expect("render shape")
}
