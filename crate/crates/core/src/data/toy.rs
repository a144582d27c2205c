//! Synthetic shapes corpus.
//!
//! Each 64×64 image holds one or two shapes (circle, square, triangle in
//! red, green, blue or yellow) centered on a 3×3 grid of cells. No two
//! images in a corpus share a scene, so val and test scenes are never seen
//! in training. Captions follow
//!
//! ```text
//! caption := "a single" COLOR SHAPE
//!          | "a" COLOR SHAPE "left of a" COLOR SHAPE    (columns differ; leftmost first)
//!          | "a" COLOR SHAPE "above a" COLOR SHAPE      (same column; topmost first)
//! COLOR   := red | green | blue | yellow
//! SHAPE   := circle | square | triangle
//! ```

use std::collections::HashSet;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::manifest::{Entry, Manifest, Split};
use super::{ppm, write_atomic};
use crate::error::{Error, Result};
use crate::rng::{seeded, Rng};
use crate::vision::RawImage;

pub const IMAGE_SIZE: usize = 64;
pub const GRID: usize = 3;
/// Largest per-axis offset of a shape from its cell center, in pixels.
pub const JITTER: i8 = 0;
const RADIUS: i32 = 7;
/// Cell spacing is a multiple of the toy patch size, so a shape covers the
/// same pixels of its patches in every cell.
const CELL_CENTERS: [i32; GRID] = [8, 32, 56];
const BACKGROUND: [u8; 3] = [20, 20, 20];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [220, 50, 50],
            Color::Green => [50, 190, 60],
            Color::Blue => [50, 90, 230],
            Color::Yellow => [235, 215, 50],
        }
    }
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

    fn covers(self, dx: i32, dy: i32) -> bool {
        match self {
            ShapeKind::Circle => dx * dx + dy * dy <= RADIUS * RADIUS,
            ShapeKind::Square => dx.abs() < RADIUS && dy.abs() < RADIUS,
            // apex up; half-width grows linearly from the top row
            ShapeKind::Triangle => (-RADIUS..=RADIUS).contains(&dy) && 2 * dx.abs() <= dy + RADIUS,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Shape {
    pub color: Color,
    pub kind: ShapeKind,
    pub row: u8,
    pub col: u8,
    pub dx: i8,
    pub dy: i8,
}

impl Shape {
    fn center(&self) -> (i32, i32) {
        (
            CELL_CENTERS[self.row as usize] + self.dy as i32,
            CELL_CENTERS[self.col as usize] + self.dx as i32,
        )
    }
}

/// Shapes in caption order.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Scene {
    pub shapes: Vec<Shape>,
}

impl Scene {
    /// Put shapes in caption order and check the layout rules.
    pub fn new(mut shapes: Vec<Shape>) -> Result<Self> {
        if shapes.is_empty() || shapes.len() > 2 {
            return Err(Error::invalid("scene", "a scene has one or two shapes"));
        }
        for s in &shapes {
            if s.row as usize >= GRID || s.col as usize >= GRID || s.dx.abs() > JITTER || s.dy.abs() > JITTER {
                return Err(Error::invalid("scene", format!("shape out of bounds: {s:?}")));
            }
        }
        if shapes.len() == 2 {
            let (a, b) = (shapes[0], shapes[1]);
            if (a.row, a.col) == (b.row, b.col) {
                return Err(Error::invalid("scene", "two shapes share a cell"));
            }
            let swap = if a.col != b.col { b.col < a.col } else { b.row < a.row };
            if swap {
                shapes.swap(0, 1);
            }
        }
        Ok(Scene { shapes })
    }

    pub fn caption(&self) -> String {
        let np = |s: &Shape| format!("{} {}", s.color.word(), s.kind.word());
        match self.shapes.as_slice() {
            [s] => format!("a single {}", np(s)),
            [a, b] if a.col != b.col => format!("a {} left of a {}", np(a), np(b)),
            [a, b] => format!("a {} above a {}", np(a), np(b)),
            _ => unreachable!("scene invariant: one or two shapes"),
        }
    }

    pub fn render(&self) -> RawImage {
        let mut img = RawImage::filled(IMAGE_SIZE, IMAGE_SIZE, BACKGROUND).expect("fixed size");
        for s in &self.shapes {
            let (cy, cx) = s.center();
            for y in (cy - RADIUS).max(0)..=(cy + RADIUS).min(IMAGE_SIZE as i32 - 1) {
                for x in (cx - RADIUS).max(0)..=(cx + RADIUS).min(IMAGE_SIZE as i32 - 1) {
                    if s.kind.covers(x - cx, y - cy) {
                        img.set_pixel(y as usize, x as usize, s.color.rgb());
                    }
                }
            }
        }
        img
    }

    fn random(rng: &mut Rng) -> Self {
        let n = if rng.random_bool(0.5) { 1 } else { 2 };
        loop {
            let shapes: Vec<Shape> = (0..n)
                .map(|_| Shape {
                    color: Color::ALL[rng.random_range(0..4)],
                    kind: ShapeKind::ALL[rng.random_range(0..3)],
                    row: rng.random_range(0..GRID as u8),
                    col: rng.random_range(0..GRID as u8),
                    dx: rng.random_range(-JITTER..=JITTER),
                    dy: rng.random_range(-JITTER..=JITTER),
                })
                .collect();
            if let Ok(s) = Scene::new(shapes) {
                return s;
            }
        }
    }
}

/// Every word the grammar can produce.
pub fn template_words() -> Vec<&'static str> {
    let mut w = vec!["a", "single", "left", "of", "above"];
    w.extend(Color::ALL.iter().map(|c| c.word()));
    w.extend(ShapeKind::ALL.iter().map(|k| k.word()));
    w
}

/// Number of distinct scenes the generator can draw.
pub fn scene_space() -> usize {
    let kinds = Color::ALL.len() * ShapeKind::ALL.len();
    let offsets = ((2 * JITTER + 1) as usize).pow(2);
    let cells = GRID * GRID;
    let one = kinds * cells * offsets;
    let two = cells * (cells - 1) / 2 * (kinds * offsets).pow(2);
    one + two
}

/// Check a caption against the grammar.
pub fn parses(caption: &str) -> bool {
    let w: Vec<&str> = caption.split(' ').collect();
    let color = |s: &str| Color::ALL.iter().any(|c| c.word() == s);
    let shape = |s: &str| ShapeKind::ALL.iter().any(|k| k.word() == s);
    match w.as_slice() {
        ["a", "single", c, s] => color(c) && shape(s),
        ["a", c1, s1, "left", "of", "a", c2, s2] | ["a", c1, s1, "above", "a", c2, s2] => {
            color(c1) && shape(s1) && color(c2) && shape(s2)
        }
        _ => false,
    }
}

/// Distinct scenes for the three splits, in train, val, test order.
pub fn scenes(seed: u64, n_train: usize, n_val: usize, n_test: usize) -> Result<Vec<(Split, Scene)>> {
    let total = n_train + n_val + n_test;
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(Error::invalid("toy corpus", "every split needs at least one image"));
    }
    if total > scene_space() / 2 {
        return Err(Error::invalid("toy corpus", format!("{total} scenes is too many distinct layouts")));
    }
    let mut rng = seeded(seed);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(total);
    for (split, n) in [(Split::Train, n_train), (Split::Val, n_val), (Split::Test, n_test)] {
        let mut k = 0;
        while k < n {
            let s = Scene::random(&mut rng);
            if seen.insert(s.clone()) {
                out.push((split, s));
                k += 1;
            }
        }
    }
    Ok(out)
}

/// Write images under `out_dir/images/` and `out_dir/manifest.json`.
pub fn generate(seed: u64, n_train: usize, n_val: usize, n_test: usize, out_dir: &Path) -> Result<Manifest> {
    let all = scenes(seed, n_train, n_val, n_test)?;
    let img_dir = out_dir.join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut counters = [0usize; 3];
    let mut images = Vec::with_capacity(all.len());
    for (split, scene) in all {
        let k = &mut counters[split as usize];
        let rel = format!("images/{split}_{:05}.ppm", *k);
        *k += 1;
        write_atomic(&out_dir.join(&rel), &ppm::write(&scene.render()))?;
        images.push(Entry {
            path: rel,
            split,
            captions: vec![scene.caption()],
            scene: Some(scene),
        });
    }
    let manifest = Manifest { images };
    write_atomic(&out_dir.join("manifest.json"), manifest.to_json().as_bytes())?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(color: Color, kind: ShapeKind, row: u8, col: u8) -> Shape {
        Shape {
            color,
            kind,
            row,
            col,
            dx: 0,
            dy: 0,
        }
    }

    #[test]
    fn captions_follow_layout() {
        let r = shape(Color::Red, ShapeKind::Circle, 2, 2);
        let b = shape(Color::Blue, ShapeKind::Square, 0, 1);
        assert_eq!(Scene::new(vec![r]).unwrap().caption(), "a single red circle");
        assert_eq!(Scene::new(vec![r, b]).unwrap().caption(), "a blue square left of a red circle");
        let y = shape(Color::Yellow, ShapeKind::Triangle, 0, 2);
        assert_eq!(Scene::new(vec![r, y]).unwrap().caption(), "a yellow triangle above a red circle");
        assert!(Scene::new(vec![r, r]).is_err());
        assert!(Scene::new(vec![]).is_err());
    }

    #[test]
    fn order_is_independent_of_input_order() {
        for (a, b) in [((0, 0), (1, 1)), ((2, 0), (0, 1)), ((1, 2), (0, 2)), ((0, 1), (2, 1))] {
            let s1 = shape(Color::Red, ShapeKind::Circle, a.0, a.1);
            let s2 = shape(Color::Green, ShapeKind::Square, b.0, b.1);
            assert_eq!(Scene::new(vec![s1, s2]).unwrap(), Scene::new(vec![s2, s1]).unwrap());
        }
    }

    #[test]
    fn scene_space_counts_distinct_images() {
        // 12 kinds × 9 cells + C(9,2) × 12²
        assert_eq!(scene_space(), 12 * 9 + 36 * 144);
        // Counting the two shapes as an ordered pair gives 12·9 + 9·8·12² descriptors.
        assert_eq!(12 * 9 + 9 * 8 * 144, 10_476);
        assert!(scene_space() >= 2 * (2000 + 200 + 200));
    }

    #[test]
    fn generated_scenes_are_distinct_and_deterministic() {
        let a = scenes(7, 300, 30, 30).unwrap();
        let b = scenes(7, 300, 30, 30).unwrap();
        assert_eq!(a, b);
        let distinct: HashSet<_> = a.iter().map(|(_, s)| s).collect();
        assert_eq!(distinct.len(), a.len());
        for (_, s) in &a {
            assert!(parses(&s.caption()), "{}", s.caption());
            assert_eq!(Scene::new(s.shapes.clone()).unwrap(), *s);
        }
        assert!(scenes(7, 0, 1, 1).is_err());
    }

    #[test]
    fn grammar_rejects_others() {
        assert!(!parses("a single red"));
        assert!(!parses("a red circle below a blue square"));
        assert!(!parses("a single purple circle"));
    }

    #[test]
    fn rendering_draws_shape_colors() {
        let s = Scene::new(vec![shape(Color::Green, ShapeKind::Square, 1, 1)]).unwrap();
        let img = s.render();
        assert_eq!(img.pixel(32, 32), Color::Green.rgb());
        assert_eq!(img.pixel(0, 0), BACKGROUND);
        let t = Scene::new(vec![shape(Color::Red, ShapeKind::Triangle, 1, 1)]).unwrap().render();
        // apex row is narrow, base row wide
        assert_eq!(t.pixel(25, 32), Color::Red.rgb());
        assert_eq!(t.pixel(25, 34), BACKGROUND);
        assert_eq!(t.pixel(39, 38), Color::Red.rgb());
    }
}
