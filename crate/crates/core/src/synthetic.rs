//! Procedurally drawn grayscale datasets for tests and desk-scale runs.
//!
//! Every generator is deterministic in its seed and returns images in
//! `[0, 1]` with string class ids `c00`, `c01`, ...

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::datasets::{Image, LabeledImage};

type Pt = (f32, f32);

/// Single-channel drawing surface; shapes combine by maximum.
#[derive(Clone, Debug)]
pub struct Canvas {
    pub size: usize,
    pub data: Vec<f32>,
}

impl Canvas {
    pub fn new(size: usize) -> Self {
        Self {
            size,
            data: vec![0.0; size * size],
        }
    }

    fn paint(&mut self, coverage: impl Fn(f32, f32) -> f32) {
        for r in 0..self.size {
            for c in 0..self.size {
                let v = coverage(c as f32 + 0.5, r as f32 + 0.5).clamp(0.0, 1.0);
                let p = &mut self.data[r * self.size + c];
                *p = p.max(v);
            }
        }
    }

    /// Anti-aliased segment of the given width.
    pub fn stroke(&mut self, a: Pt, b: Pt, width: f32) {
        let (dx, dy) = (b.0 - a.0, b.1 - a.1);
        let len2 = (dx * dx + dy * dy).max(1e-6);
        self.paint(|x, y| {
            let t = (((x - a.0) * dx + (y - a.1) * dy) / len2).clamp(0.0, 1.0);
            let (px, py) = (a.0 + t * dx - x, a.1 + t * dy - y);
            width / 2.0 + 0.5 - (px * px + py * py).sqrt()
        });
    }

    pub fn disk(&mut self, center: Pt, radius: f32) {
        self.paint(|x, y| radius + 0.5 - ((x - center.0).powi(2) + (y - center.1).powi(2)).sqrt());
    }

    pub fn ring(&mut self, center: Pt, radius: f32, width: f32) {
        self.paint(|x, y| {
            let d = ((x - center.0).powi(2) + (y - center.1).powi(2)).sqrt();
            width / 2.0 + 0.5 - (d - radius).abs()
        });
    }

    pub fn square(&mut self, center: Pt, half: f32) {
        self.paint(|x, y| half + 0.5 - (x - center.0).abs().max((y - center.1).abs()));
    }

    pub fn add_noise<R: Rng + ?Sized>(&mut self, std: f32, rng: &mut R) {
        if std <= 0.0 {
            return;
        }
        let n = Normal::new(0.0f32, std).expect("std");
        for v in &mut self.data {
            *v = (*v + n.sample(rng)).clamp(0.0, 1.0);
        }
    }

    pub fn into_image(self) -> Image {
        Image::new(1, self.size, self.size, self.data).expect("canvas size")
    }
}

pub fn class_id(c: usize) -> String {
    format!("c{c:02}")
}

fn labeled(prefix: &str, class: usize, i: usize, pixels: Image, domain: &str) -> LabeledImage {
    LabeledImage {
        id: format!("{prefix}{}_{i:03}", class_id(class)),
        pixels,
        label: class_id(class),
        domain: domain.to_string(),
    }
}

/// Two classes, each image holding two objects in opposite corners:
/// class 0 a square and a cross, class 1 a disk and a ring. Which object
/// takes which corner, and which diagonal is used, vary per image.
pub fn two_part_toy(per_class: usize, size: usize, seed: u64) -> Vec<LabeledImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f32;
    let mut out = Vec::new();
    for class in 0..2 {
        let shapes = if class == 0 {
            [Shape::Square, Shape::Cross]
        } else {
            [Shape::Disk, Shape::Ring]
        };
        for i in 0..per_class {
            let mut cv = Canvas::new(size);
            let j = |rng: &mut ChaCha8Rng| rng.random_range(-0.06f32..0.06) * s;
            let (a, b) = if rng.random_bool(0.5) {
                (0.27, 0.73)
            } else {
                (0.73, 0.27)
            };
            let mut corners = [(0.27 * s, a * s), (0.73 * s, b * s)];
            if rng.random_bool(0.5) {
                corners.swap(0, 1);
            }
            for (shape, c) in shapes.iter().zip(corners) {
                draw_shape(
                    &mut cv,
                    *shape,
                    (c.0 + j(&mut rng), c.1 + j(&mut rng)),
                    0.13 * s,
                );
            }
            cv.add_noise(0.05, &mut rng);
            out.push(labeled("toy_", class, i, cv.into_image(), "toy"));
        }
    }
    out
}

/// A glyph is a fixed list of strokes in unit coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Glyph {
    pub strokes: Vec<(Pt, Pt)>,
}

impl Glyph {
    pub fn random<R: Rng + ?Sized>(strokes: usize, rng: &mut R) -> Self {
        let mut pts = vec![(rng.random_range(0.2f32..0.8), rng.random_range(0.2f32..0.8))];
        let mut s = Vec::new();
        for _ in 0..strokes {
            // half the strokes continue from the previous end, like pen motion
            let start = if rng.random_bool(0.5) {
                *pts.last().expect("non-empty")
            } else {
                (rng.random_range(0.2f32..0.8), rng.random_range(0.2f32..0.8))
            };
            let end = (
                rng.random_range(0.15f32..0.85),
                rng.random_range(0.15f32..0.85),
            );
            s.push((start, end));
            pts.push(end);
        }
        Self { strokes: s }
    }
}

/// Appearance of a rendered glyph.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GlyphStyle {
    /// Stroke width as a fraction of the image side.
    pub width: f32,
    /// Standard deviation of endpoint jitter, fraction of the side.
    pub jitter: f32,
    /// Maximum translation, fraction of the side.
    pub shift: f32,
    /// Render at this side and resample to the output size (0 = direct).
    pub render_size: usize,
    pub noise: f32,
}

impl GlyphStyle {
    /// Thin, crisp strokes.
    pub fn clean() -> Self {
        Self {
            width: 0.07,
            jitter: 0.03,
            shift: 0.06,
            render_size: 0,
            noise: 0.02,
        }
    }

    /// Thick strokes rendered at 16 px and upsampled, like scanned digits.
    pub fn coarse() -> Self {
        Self {
            width: 0.13,
            jitter: 0.035,
            shift: 0.04,
            render_size: 16,
            noise: 0.04,
        }
    }
}

pub fn render_glyph<R: Rng + ?Sized>(
    g: &Glyph,
    size: usize,
    style: &GlyphStyle,
    rng: &mut R,
) -> Image {
    let side = if style.render_size > 0 {
        style.render_size
    } else {
        size
    };
    let s = side as f32;
    let jn = Normal::new(0.0f32, style.jitter.max(1e-6)).expect("jitter");
    let (tx, ty) = (
        rng.random_range(-style.shift..=style.shift),
        rng.random_range(-style.shift..=style.shift),
    );
    let mut cv = Canvas::new(side);
    for &(a, b) in &g.strokes {
        let mut p = |q: Pt| {
            (
                (q.0 + tx + jn.sample(rng)) * s,
                (q.1 + ty + jn.sample(rng)) * s,
            )
        };
        let (pa, pb) = (p(a), p(b));
        cv.stroke(pa, pb, (style.width * s).max(1.0));
    }
    cv.add_noise(style.noise, rng);
    let img = cv.into_image();
    if side == size {
        img
    } else {
        img.resize(size)
    }
}

/// `n_classes` random glyphs, one class per glyph.
pub fn random_glyphs(n_classes: usize, seed: u64) -> Vec<Glyph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_classes)
        .map(|_| {
            let k = rng.random_range(2..=4);
            Glyph::random(k, &mut rng)
        })
        .collect()
}

/// Renders `per_class` samples of each glyph in `style`.
pub fn glyph_dataset(
    glyphs: &[Glyph],
    per_class: usize,
    size: usize,
    style: &GlyphStyle,
    domain: &str,
    seed: u64,
) -> Vec<LabeledImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (class, g) in glyphs.iter().enumerate() {
        for i in 0..per_class {
            let img = render_glyph(g, size, style, &mut rng);
            out.push(labeled(&format!("{domain}_"), class, i, img, domain));
        }
    }
    out
}

/// Primitive shapes used as parts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Square,
    Disk,
    Ring,
    Cross,
    Bar,
    Diagonal,
}

pub const SHAPES: [Shape; 6] = [
    Shape::Square,
    Shape::Disk,
    Shape::Ring,
    Shape::Cross,
    Shape::Bar,
    Shape::Diagonal,
];

fn draw_shape(cv: &mut Canvas, shape: Shape, c: Pt, r: f32) {
    match shape {
        Shape::Square => cv.square(c, r * 0.8),
        Shape::Disk => cv.disk(c, r),
        Shape::Ring => cv.ring(c, r, (r * 0.4).max(1.0)),
        Shape::Cross => {
            cv.stroke((c.0 - r, c.1), (c.0 + r, c.1), (r * 0.45).max(1.0));
            cv.stroke((c.0, c.1 - r), (c.0, c.1 + r), (r * 0.45).max(1.0));
        }
        Shape::Bar => cv.stroke((c.0 - r, c.1), (c.0 + r, c.1), (r * 0.7).max(1.0)),
        Shape::Diagonal => cv.stroke((c.0 - r, c.1 - r), (c.0 + r, c.1 + r), (r * 0.5).max(1.0)),
    }
}

/// Class recipe: a shape in each of the four quadrant slots (or none).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Composition {
    pub slots: [Option<Shape>; 4],
}

/// `n_classes` distinct compositions of three parts each.
pub fn random_compositions(n_classes: usize, seed: u64) -> Vec<Composition> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<Composition> = Vec::new();
    while out.len() < n_classes {
        let empty = rng.random_range(0..4);
        let mut slots = [None; 4];
        for (i, s) in slots.iter_mut().enumerate() {
            if i != empty {
                *s = Some(SHAPES[rng.random_range(0..SHAPES.len())]);
            }
        }
        let comp = Composition { slots };
        if !out.contains(&comp) {
            out.push(comp);
        }
    }
    out
}

/// Renders each composition `per_class` times with positional jitter.
pub fn composition_dataset(
    comps: &[Composition],
    per_class: usize,
    size: usize,
    seed: u64,
) -> Vec<LabeledImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = size as f32;
    let centers = [(0.27, 0.27), (0.73, 0.27), (0.27, 0.73), (0.73, 0.73)];
    let mut out = Vec::new();
    for (class, comp) in comps.iter().enumerate() {
        for i in 0..per_class {
            let mut cv = Canvas::new(size);
            for (slot, shape) in comp.slots.iter().enumerate() {
                if let Some(shape) = shape {
                    let (cx, cy) = centers[slot];
                    let c = (
                        (cx + rng.random_range(-0.05f32..0.05)) * s,
                        (cy + rng.random_range(-0.05f32..0.05)) * s,
                    );
                    draw_shape(&mut cv, *shape, c, s * rng.random_range(0.1f32..0.14));
                }
            }
            cv.add_noise(0.03, &mut rng);
            out.push(labeled("comp_", class, i, cv.into_image(), "composition"));
        }
    }
    out
}
