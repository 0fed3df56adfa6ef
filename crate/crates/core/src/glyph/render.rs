use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{CharDef, ComponentId, FontParams, GlyphSample, Slot, IMAGE_SIZE};
use crate::tensor::Tensor;

/// Pixel margin between the glyph box and the canvas edge.
const MARGIN: f64 = 3.0;
const SPAN: f64 = IMAGE_SIZE as f64 - 2.0 * MARGIN;
/// Maximum vertex displacement, in unit slot coordinates.
const JITTER: f64 = 0.03;
const DOT_RADIUS: f64 = 0.1;

type Pt = (f64, f64);

enum Shape {
    Polyline(Vec<Pt>),
    Dot(Pt),
}

fn seg(a: Pt, b: Pt) -> Shape {
    Shape::Polyline(vec![a, b])
}

/// Stroke geometry of a component inside a unit slot (y grows downward).
fn component_shapes(c: ComponentId) -> Vec<Shape> {
    match c {
        ComponentId::BAR_H => vec![seg((0.1, 0.5), (0.9, 0.5))],
        ComponentId::BAR_V => vec![seg((0.5, 0.1), (0.5, 0.9))],
        ComponentId::DIAG => vec![seg((0.15, 0.15), (0.85, 0.85))],
        ComponentId::ANTI_DIAG => vec![seg((0.85, 0.15), (0.15, 0.85))],
        ComponentId::CROSS => vec![seg((0.1, 0.5), (0.9, 0.5)), seg((0.5, 0.1), (0.5, 0.9))],
        ComponentId::BOX => vec![Shape::Polyline(vec![(0.2, 0.2), (0.8, 0.2), (0.8, 0.8), (0.2, 0.8), (0.2, 0.2)])],
        ComponentId::LEFT_HOOK => {
            vec![Shape::Polyline(vec![(0.6, 0.1), (0.6, 0.72), (0.5, 0.86), (0.3, 0.8)])]
        }
        ComponentId::ARC => {
            let pts = (0..=12)
                .map(|i| {
                    let t = std::f64::consts::PI * (1.0 + i as f64 / 12.0);
                    (0.5 + 0.35 * t.cos(), 0.65 + 0.4 * t.sin())
                })
                .collect();
            vec![Shape::Polyline(pts)]
        }
        ComponentId::DOT => vec![Shape::Dot((0.5, 0.5))],
        ComponentId::T_JUNCTION => {
            vec![seg((0.1, 0.2), (0.9, 0.2)), seg((0.5, 0.2), (0.5, 0.9))]
        }
        _ => unreachable!("component ids are validated on construction"),
    }
}

fn mix(a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over a combined key
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct Transform {
    scale: f64,
    shear: f64,
}

impl Transform {
    fn apply(&self, slot: &Slot, (u, v): Pt) -> Pt {
        let gx = slot.x0 + u * (slot.x1 - slot.x0);
        let gy = slot.y0 + v * (slot.y1 - slot.y0);
        let c = IMAGE_SIZE as f64 / 2.0;
        let x = MARGIN + gx * SPAN;
        let y = MARGIN + gy * SPAN;
        let ty = c + self.scale * (y - c);
        let tx = c + self.scale * (x - c) + self.shear * (ty - c);
        (tx, ty)
    }
}

fn dist_to_segment(p: Pt, a: Pt, b: Pt) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 { (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

/// Rasterize `ch` in `font` as antialiased strokes on a white canvas.
pub fn render_glyph(ch: &CharDef, font: &FontParams) -> GlyphSample {
    let xf = Transform { scale: font.scale, shear: font.shear };
    let half_width = font.stroke_width as f64 / 2.0;

    let mut segments: Vec<(Pt, Pt)> = Vec::new();
    let mut dots: Vec<(Pt, f64)> = Vec::new();
    for (slot_idx, (&comp, slot)) in ch.components.iter().zip(ch.layout.slots()).enumerate() {
        let key = mix(mix(font.jitter_seed, ch.char_id as u64), slot_idx as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        let mut jitter = |p: Pt| (p.0 + rng.gen_range(-JITTER..=JITTER), p.1 + rng.gen_range(-JITTER..=JITTER));
        for shape in component_shapes(comp) {
            match shape {
                Shape::Polyline(pts) => {
                    let pts: Vec<Pt> = pts.into_iter().map(|p| xf.apply(slot, jitter(p))).collect();
                    segments.extend(pts.windows(2).map(|w| (w[0], w[1])));
                }
                Shape::Dot(c) => {
                    let extent = (slot.x1 - slot.x0).min(slot.y1 - slot.y0);
                    let r = (DOT_RADIUS * extent * SPAN * font.scale).max(1.5);
                    dots.push((xf.apply(slot, jitter(c)), r));
                }
            }
        }
    }

    let mut pixels = Vec::with_capacity(IMAGE_SIZE * IMAGE_SIZE);
    for row in 0..IMAGE_SIZE {
        for col in 0..IMAGE_SIZE {
            let p = (col as f64 + 0.5, row as f64 + 0.5);
            let mut cover: f64 = 0.0;
            for &(a, b) in &segments {
                let d = dist_to_segment(p, a, b);
                cover = cover.max((half_width + 0.5 - d).clamp(0.0, 1.0));
            }
            for &(c, r) in &dots {
                let d = ((p.0 - c.0).powi(2) + (p.1 - c.1).powi(2)).sqrt();
                cover = cover.max((r + 0.5 - d).clamp(0.0, 1.0));
            }
            pixels.push((1.0 - font.contrast * cover).clamp(0.0, 1.0) as f32);
        }
    }
    GlyphSample {
        image: Tensor::new(&[1, IMAGE_SIZE, IMAGE_SIZE], pixels).expect("canvas shape"),
        font_id: font.font_id,
        char_id: ch.char_id,
        comp_gt: ch.component_set(),
    }
}
