//! Procedural image corpora standing in for the digit, animal and lesion
//! collections. All images are 16×16 grayscale in `[-1, 1]`.

use ndarray::Array2;
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::data::ImageDataset;
use crate::nn::Shape;
use crate::rng::{self, Rng};

pub const SIDE: usize = 16;
pub const SHAPE: Shape = Shape::image(1, SIDE, SIDE);

/// Intensity canvas in `[0, 1]`; shapes blend over it by coverage.
#[derive(Clone)]
struct Canvas {
    px: Vec<f64>,
}

impl Canvas {
    fn new(fill: f64) -> Self {
        Self {
            px: vec![fill; SIDE * SIDE],
        }
    }

    fn at(&mut self, x: usize, y: usize) -> &mut f64 {
        &mut self.px[y * SIDE + x]
    }

    fn centers() -> impl Iterator<Item = (usize, usize, f64, f64)> {
        (0..SIDE).flat_map(|y| (0..SIDE).map(move |x| (x, y, x as f64 + 0.5, y as f64 + 0.5)))
    }

    /// Anti-aliased line segment of the given width.
    fn stroke(&mut self, a: (f64, f64), b: (f64, f64), width: f64, ink: f64) {
        let (dx, dy) = (b.0 - a.0, b.1 - a.1);
        let len2 = (dx * dx + dy * dy).max(1e-12);
        for (x, y, px, py) in Self::centers() {
            let t = (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0);
            let d = ((px - a.0 - t * dx).powi(2) + (py - a.1 - t * dy).powi(2)).sqrt();
            let cover = (width / 2.0 + 0.5 - d).clamp(0.0, 1.0);
            let p = self.at(x, y);
            *p = *p * (1.0 - cover) + ink * cover;
        }
    }

    /// Filled region `r(θ) ≥ dist` with a soft edge; `radius` maps an angle
    /// to the boundary radius. `paint` sets the interior value.
    fn blob(
        &mut self,
        c: (f64, f64),
        radius: impl Fn(f64) -> f64,
        paint: impl Fn(f64, f64) -> f64,
    ) {
        for (x, y, px, py) in Self::centers() {
            let (dx, dy) = (px - c.0, py - c.1);
            let d = (dx * dx + dy * dy).sqrt();
            let r = radius(dy.atan2(dx));
            let cover = (r + 0.5 - d).clamp(0.0, 1.0);
            if cover > 0.0 {
                let p = self.at(x, y);
                *p = *p * (1.0 - cover) + paint(px, py) * cover;
            }
        }
    }

    fn finish(mut self, noise: f64, rng: &mut Rng) -> Vec<f64> {
        for v in &mut self.px {
            let e: f64 = rng.sample(StandardNormal);
            *v = (2.0 * (*v + noise * e) - 1.0).clamp(-1.0, 1.0);
        }
        self.px
    }
}

fn assemble(
    rows: Vec<Vec<f64>>,
    classes: Vec<usize>,
    tags: Option<(Vec<usize>, Vec<String>)>,
    name: &str,
) -> ImageDataset {
    let n = rows.len();
    let images = Array2::from_shape_vec((n, SHAPE.len()), rows.concat()).expect("fixed image size");
    ImageDataset::new(images, SHAPE, classes, tags, name).expect("generated images are valid")
}

/// Handwritten-four look-alikes. A continuous style in `[0, 1]` moves the
/// left arm from an open vertical stroke to a closed diagonal one and
/// slants the stem; thickness, offsets and noise vary independently.
pub fn digit_four(n: usize, seed: u64) -> ImageDataset {
    let mut r = rng::stream(seed, "corpus-digit", 0);
    let rows = (0..n)
        .map(|_| {
            let style: f64 = r.random();
            let width = r.random_range(1.1..1.9);
            let (ox, oy) = (r.random_range(-1.0..1.0), r.random_range(-0.8..0.8));
            let bar_y = 9.0 + oy + r.random_range(-0.6..0.6);
            let stem_x = 10.5 + ox;
            let slant = 2.0 * style - 0.5;
            let mut c = Canvas::new(0.0);
            c.stroke(
                (stem_x + slant, 2.0 + oy),
                (stem_x - 0.3 * slant, 14.0 + oy),
                width,
                1.0,
            );
            c.stroke((3.0 + ox, bar_y), (13.5 + ox, bar_y), width, 1.0);
            let arm_top = (4.0 + ox + style * (stem_x + slant - 4.5 - ox), 2.5 + oy);
            c.stroke(arm_top, (3.5 + ox + style * 0.5, bar_y), width, 1.0);
            c.finish(0.05, &mut r)
        })
        .collect();
    assemble(rows, vec![0; n], None, "digit-four")
}

pub const ANIMALS: [&str; 4] = ["cat", "dog", "deer", "horse"];

/// House pets (cat, dog; class 0) and large animals (deer, horse; class 1),
/// `per_subgroup` of each. Horses share the dog's head and ears and differ
/// by a slightly longer body and a faint tail.
pub fn animals(per_subgroup: usize, seed: u64) -> ImageDataset {
    let mut r = rng::stream(seed, "corpus-animals", 0);
    let mut rows = Vec::with_capacity(4 * per_subgroup);
    let mut tags = Vec::with_capacity(4 * per_subgroup);
    for kind in 0..4 {
        for _ in 0..per_subgroup {
            let (ox, oy) = (r.random_range(-1.2..1.2), r.random_range(-1.0..1.0));
            let ink = r.random_range(0.65..1.0);
            let mut c = Canvas::new(r.random_range(0.0..0.15));
            let head = (6.0 + ox, 5.5 + oy);
            let long = kind == 3;
            let body_rx = if long {
                r.random_range(4.0..5.0)
            } else {
                r.random_range(3.4..4.4)
            };
            let body = (8.5 + ox + if long { 0.6 } else { 0.0 }, 10.5 + oy);
            let ry = r.random_range(2.0..2.8);
            c.blob(
                body,
                |t| body_rx * ry / ((ry * t.cos()).powi(2) + (body_rx * t.sin()).powi(2)).sqrt(),
                |_, _| ink * 0.8,
            );
            c.blob(head, |_| 2.0, |_, _| ink);
            match kind {
                0 => {
                    c.stroke(
                        (head.0 - 1.4, head.1 - 1.2),
                        (head.0 - 1.8, head.1 - 3.6),
                        1.0,
                        ink,
                    );
                    c.stroke(
                        (head.0 + 1.4, head.1 - 1.2),
                        (head.0 + 1.8, head.1 - 3.6),
                        1.0,
                        ink,
                    );
                }
                1 | 3 => {
                    c.stroke(
                        (head.0 - 1.6, head.1 - 0.8),
                        (head.0 - 2.6, head.1 + 1.8),
                        1.1,
                        ink,
                    );
                    c.stroke(
                        (head.0 + 1.6, head.1 - 0.8),
                        (head.0 + 2.6, head.1 + 1.8),
                        1.1,
                        ink,
                    );
                }
                _ => {
                    for s in [-1.0, 1.0] {
                        let base = (head.0 + 1.0 * s, head.1 - 1.5);
                        let tip = (head.0 + 2.8 * s, head.1 - 5.0);
                        c.stroke(base, tip, 0.9, ink);
                        let mid = ((base.0 + tip.0) / 2.0, (base.1 + tip.1) / 2.0);
                        c.stroke(mid, (mid.0 + 1.6 * s, mid.1 - 0.4), 0.8, ink);
                    }
                }
            }
            if long {
                let end = body.0 + body_rx;
                c.stroke(
                    (end - 0.5, body.1 - 0.5),
                    (end + 1.0, body.1 + 2.5),
                    0.6,
                    ink * 0.4,
                );
            }
            rows.push(c.finish(0.04, &mut r));
            tags.push(kind);
        }
    }
    let classes = tags.iter().map(|&t| usize::from(t >= 2)).collect();
    let names = ANIMALS.map(String::from).to_vec();
    assemble(rows, classes, Some((tags, names)), "animals")
}

pub const LESIONS: [&str; 4] = [
    "melanocytic_nevi",
    "melanoma",
    "benign_keratosis",
    "basal_cell_carcinoma",
];

/// Subgroup sizes of the four most populated lesion types.
pub const LESION_COUNTS: [usize; 4] = [6705, 1113, 1099, 514];

/// Dermatoscopy-like lesions on textured skin. Nevi (benign) are dark,
/// round and smooth; keratoses (benign) are lighter and speckled;
/// melanomas (cancerous) are dark, irregular and two-toned; basal cell
/// carcinomas (cancerous) are pale with a bright rim and dark vessels.
/// `counts` follows [`LESIONS`] order.
pub fn lesions(counts: [usize; 4], seed: u64) -> ImageDataset {
    let mut r = rng::stream(seed, "corpus-lesions", 0);
    let mut rows = Vec::new();
    let mut tags = Vec::new();
    for (kind, &count) in counts.iter().enumerate() {
        for _ in 0..count {
            let skin = r.random_range(0.7..0.9);
            let mut c = Canvas::new(skin);
            let grain: Vec<f64> = (0..SIDE * SIDE)
                .map(|_| r.random_range(-0.04..0.04))
                .collect();
            c.px.iter_mut().zip(&grain).for_each(|(p, g)| *p += g);
            let centre = (
                8.0 + r.random_range(-1.2..1.2),
                8.0 + r.random_range(-1.2..1.2),
            );
            let base = r.random_range(3.2..4.6);
            match kind {
                0 => {
                    let tone = r.random_range(0.15..0.3);
                    c.blob(centre, |_| base, |_, _| tone);
                }
                1 => {
                    let (a2, a3) = (r.random_range(0.5..1.0), r.random_range(0.4..0.9));
                    let (p2, p3) = (r.random_range(0.0..6.3), r.random_range(0.0..6.3));
                    let dark = r.random_range(0.05..0.2);
                    let light = r.random_range(0.4..0.55);
                    let split = r.random_range(0.0..6.3f64);
                    let (sx, sy) = (split.cos(), split.sin());
                    c.blob(
                        centre,
                        |t| base + 0.4 + a2 * (2.0 * t + p2).sin() + a3 * (3.0 * t + p3).sin(),
                        |x, y| {
                            if (x - centre.0) * sx + (y - centre.1) * sy > 0.0 {
                                dark
                            } else {
                                light
                            }
                        },
                    );
                }
                2 => {
                    let tone = r.random_range(0.4..0.55);
                    c.blob(centre, |_| base + 0.3, |_, _| tone);
                    for _ in 0..5 {
                        let (x, y) = (
                            centre.0 + r.random_range(-2.5..2.5),
                            centre.1 + r.random_range(-2.5..2.5),
                        );
                        let s = r.random_range(0.15..0.3);
                        c.blob((x, y), |_| 0.7, |_, _| s);
                    }
                }
                _ => {
                    let tone = r.random_range(0.5..0.65);
                    c.blob(centre, |_| base + 0.6, |_, _| 0.97);
                    c.blob(centre, |_| base - 0.6, |_, _| tone);
                    for _ in 0..2 {
                        let a = r.random_range(0.0..6.3f64);
                        let l = base - 1.0;
                        c.stroke(
                            (centre.0 - l * a.cos(), centre.1 - l * a.sin()),
                            (centre.0 + l * a.cos(), centre.1 + l * a.sin()),
                            0.6,
                            0.0,
                        );
                    }
                }
            }
            rows.push(c.finish(0.03, &mut r));
            tags.push(kind);
        }
    }
    let classes = tags
        .iter()
        .map(|&t| usize::from(t == 1 || t == 3))
        .collect();
    let names = LESIONS.map(String::from).to_vec();
    assemble(rows, classes, Some((tags, names)), "lesions")
}

/// Writes a dataset as an 8-bit grayscale image strip for inspection.
pub fn to_u8_grid(ds: &ImageDataset, idx: &[usize], columns: usize) -> (u32, u32, Vec<u8>) {
    let cols = columns.max(1);
    let rows = idx.len().div_ceil(cols);
    let (w, h) = (cols * SIDE, rows * SIDE);
    let mut buf = vec![0u8; w * h];
    for (k, &i) in idx.iter().enumerate() {
        let (gx, gy) = ((k % cols) * SIDE, (k / cols) * SIDE);
        for y in 0..SIDE {
            for x in 0..SIDE {
                buf[(gy + y) * w + gx + x] =
                    crate::data::denormalize_pixel(ds.image(i)[y * SIDE + x]);
            }
        }
    }
    (w as u32, h as u32, buf)
}
