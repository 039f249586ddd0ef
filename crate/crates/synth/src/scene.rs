//! Scenes of non-overlapping coloured shapes and their rasterization.

use std::fmt;

use rand::Rng;

use crate::error::{Result, SynthError};
use transvg_core::image::RgbImage;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Purple,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SizeClass {
    Small,
    Large,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }
}

impl Color {
    pub const ALL: [Color; 5] = [Color::Red, Color::Green, Color::Blue, Color::Yellow, Color::Purple];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Purple => "purple",
        }
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [220, 30, 30],
            Color::Green => [30, 170, 50],
            Color::Blue => [30, 60, 220],
            Color::Yellow => [235, 200, 20],
            Color::Purple => [140, 40, 170],
        }
    }
}

impl SizeClass {
    pub fn word(self) -> &'static str {
        match self {
            SizeClass::Small => "small",
            SizeClass::Large => "large",
        }
    }

    /// Inclusive extent range in pixels for an image of side `image_size`.
    pub fn extent_range(self, image_size: usize) -> (usize, usize) {
        let f = |x: f64| ((image_size as f64 * x).round() as usize).max(3);
        match self {
            SizeClass::Small => (f(0.16), f(0.20)),
            SizeClass::Large => (f(0.28), f(0.34)),
        }
    }
}

macro_rules! display_word {
    ($($t:ty),*) => {$(
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.word())
            }
        }
    )*};
}
display_word!(ShapeKind, Color, SizeClass);

/// One shape occupying the square `[x, x+extent) × [y, y+extent)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ShapeInstance {
    pub kind: ShapeKind,
    pub color: Color,
    pub size: SizeClass,
    pub x: usize,
    pub y: usize,
    pub extent: usize,
}

impl ShapeInstance {
    pub fn center(&self) -> (f64, f64) {
        let h = self.extent as f64 / 2.0;
        (self.x as f64 + h, self.y as f64 + h)
    }

    /// Nominal square footprint `(x1, y1, x2, y2)` with exclusive far edges.
    pub fn footprint(&self) -> (usize, usize, usize, usize) {
        (self.x, self.y, self.x + self.extent, self.y + self.extent)
    }

    /// Whether the pixel `(px, py)` is painted by this shape.
    pub fn covers(&self, px: usize, py: usize) -> bool {
        let (x1, y1, x2, y2) = self.footprint();
        if px < x1 || px >= x2 || py < y1 || py >= y2 {
            return false;
        }
        let e = self.extent as f64;
        let (fx, fy) = (px as f64 + 0.5 - self.x as f64, py as f64 + 0.5 - self.y as f64);
        match self.kind {
            ShapeKind::Square => true,
            ShapeKind::Circle => {
                let r = e / 2.0;
                (fx - r).powi(2) + (fy - r).powi(2) <= r * r
            }
            // apex at the top centre, base along the bottom edge
            ShapeKind::Triangle => (fx - e / 2.0).abs() <= fy / 2.0 + 0.25,
        }
    }

    fn same_attributes(&self, other: &Self) -> bool {
        (self.kind, self.color, self.size) == (other.kind, other.color, other.size)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub image_size: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            min_shapes: 2,
            max_shapes: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub image_size: usize,
    pub shapes: Vec<ShapeInstance>,
}

pub const MAX_ATTEMPTS: usize = 1000;

/// Footprints must be separated by at least one pixel.
fn separated(a: &ShapeInstance, b: &ShapeInstance) -> bool {
    let (ax1, ay1, ax2, ay2) = a.footprint();
    let (bx1, by1, bx2, by2) = b.footprint();
    ax2 < bx1 || bx2 < ax1 || ay2 < by1 || by2 < ay1
}

/// Rejection-samples shapes until every placement is in bounds, pairwise
/// separated and has a unique `(size, colour, kind)` combination.
pub fn generate_scene<R: Rng>(cfg: &SceneConfig, rng: &mut R) -> Result<SceneSpec> {
    if cfg.image_size < 32 {
        return Err(SynthError::Config(format!("image size {} < 32", cfg.image_size)));
    }
    if cfg.min_shapes == 0 || cfg.min_shapes > cfg.max_shapes {
        return Err(SynthError::Config(format!(
            "invalid shape count range {}..={}",
            cfg.min_shapes, cfg.max_shapes
        )));
    }
    let count = rng.gen_range(cfg.min_shapes..=cfg.max_shapes);
    let mut shapes: Vec<ShapeInstance> = Vec::with_capacity(count);
    let mut attempts = 0;
    while shapes.len() < count {
        attempts += 1;
        if attempts > MAX_ATTEMPTS {
            return Err(SynthError::Generation(format!(
                "could not place {count} shapes in {MAX_ATTEMPTS} attempts"
            )));
        }
        let size = if rng.gen_bool(0.5) { SizeClass::Small } else { SizeClass::Large };
        let (lo, hi) = size.extent_range(cfg.image_size);
        let extent = rng.gen_range(lo..=hi);
        let candidate = ShapeInstance {
            kind: ShapeKind::ALL[rng.gen_range(0..3)],
            color: Color::ALL[rng.gen_range(0..5)],
            size,
            x: rng.gen_range(0..=cfg.image_size - extent),
            y: rng.gen_range(0..=cfg.image_size - extent),
            extent,
        };
        if shapes
            .iter()
            .all(|s| separated(s, &candidate) && !s.same_attributes(&candidate))
        {
            shapes.push(candidate);
        }
    }
    Ok(SceneSpec {
        image_size: cfg.image_size,
        shapes,
    })
}

/// Pixel-tight box `(x1, y1, x2, y2)`, far edges exclusive.
pub type PixelBox = (usize, usize, usize, usize);

/// Paints shapes on a white background and returns the tight box of each
/// shape's painted pixels.
pub fn render(scene: &SceneSpec) -> (RgbImage, Vec<PixelBox>) {
    let n = scene.image_size;
    let mut img = RgbImage::new(n, n, [255, 255, 255]);
    let mut boxes = Vec::with_capacity(scene.shapes.len());
    for shape in &scene.shapes {
        let (x1, y1, x2, y2) = shape.footprint();
        let mut tight = (usize::MAX, usize::MAX, 0, 0);
        for py in y1..y2.min(n) {
            for px in x1..x2.min(n) {
                if shape.covers(px, py) {
                    img.set(px, py, shape.color.rgb());
                    tight.0 = tight.0.min(px);
                    tight.1 = tight.1.min(py);
                    tight.2 = tight.2.max(px + 1);
                    tight.3 = tight.3.max(py + 1);
                }
            }
        }
        boxes.push(tight);
    }
    (img, boxes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn circle_box_matches_diameter() {
        for extent in [9, 10, 17, 22] {
            let scene = SceneSpec {
                image_size: 64,
                shapes: vec![ShapeInstance {
                    kind: ShapeKind::Circle,
                    color: Color::Red,
                    size: SizeClass::Small,
                    x: 20,
                    y: 11,
                    extent,
                }],
            };
            let (img, boxes) = render(&scene);
            let (x1, y1, x2, y2) = boxes[0];
            // independent scan of painted pixels
            let painted: Vec<(usize, usize)> = (0..64)
                .flat_map(|y| (0..64).map(move |x| (x, y)))
                .filter(|&(x, y)| img.get(x, y) != [255, 255, 255])
                .collect();
            let w = painted.iter().map(|p| p.0).max().unwrap() - painted.iter().map(|p| p.0).min().unwrap() + 1;
            let h = painted.iter().map(|p| p.1).max().unwrap() - painted.iter().map(|p| p.1).min().unwrap() + 1;
            assert_eq!((x2 - x1, y2 - y1), (w, h));
            assert!(w.abs_diff(extent) <= 1 && h.abs_diff(extent) <= 1, "extent {extent}: {w}x{h}");
        }
    }

    #[test]
    fn empty_scene_is_white() {
        let (img, boxes) = render(&SceneSpec {
            image_size: 32,
            shapes: vec![],
        });
        assert!(img.data.iter().all(|&b| b == 255));
        assert!(boxes.is_empty());
    }

    #[test]
    fn scenes_are_deterministic_and_in_bounds() {
        let cfg = SceneConfig::default();
        for seed in 0..50 {
            let a = generate_scene(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let b = generate_scene(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert_eq!(a, b);
            for s in &a.shapes {
                let (_, _, x2, y2) = s.footprint();
                assert!(x2 <= 64 && y2 <= 64);
            }
            let (_, boxes) = render(&a);
            for (x1, y1, x2, y2) in boxes {
                assert!(x1 < x2 && y1 < y2 && x2 <= 64 && y2 <= 64);
            }
        }
    }

    #[test]
    fn bad_configs_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let small = SceneConfig {
            image_size: 16,
            ..Default::default()
        };
        assert!(matches!(generate_scene(&small, &mut rng), Err(SynthError::Config(_))));
        let crowded = SceneConfig {
            image_size: 32,
            min_shapes: 30,
            max_shapes: 30,
        };
        assert!(matches!(generate_scene(&crowded, &mut rng), Err(SynthError::Generation(_))));
    }
}
