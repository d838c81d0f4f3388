//! Scene specification and deterministic rendering.
//!
//! A scene is a grid of cells; each occupied cell holds one solid-color
//! shape, drawn centered in its cell. The ground-truth caption is the fixed
//! prefix "a photo of" followed by the object nouns in cell order
//! (left-to-right within a row, rows top-to-bottom).

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mix_seed;

use super::image::RasterImage;
use super::Sample;

/// Caption template prefix, also used as the captioning prompt.
pub const CAPTION_PREFIX: [&str; 3] = ["a", "photo", "of"];

/// Background color for every rendered scene.
pub const BACKGROUND: [u8; 3] = [16, 16, 16];

/// Smallest drawable object side, pixels.
const MIN_OBJECT_SIDE: u32 = 12;

const SIDE_SALT: u64 = 0x51de;

/// Closed list of nouns a corpus draws from. One noun per line on disk,
/// UTF-8, lowercase, no internal whitespace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: BTreeMap<String, usize>,
}

/// Built-in noun list used when no vocabulary file is supplied.
pub const DEFAULT_VOCAB: &str = "dog\ncat\nball\ntree\ncar\nhouse\nbird\nfish\nboat\nchair\ncup\nbook\nstar\nmoon\napple\nshoe\n";

impl Vocabulary {
    pub fn from_lines(text: &str) -> Result<Self> {
        let mut words = Vec::new();
        let mut index = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let word = line.trim();
            if word.is_empty() {
                continue;
            }
            if word.chars().any(|c| c.is_whitespace() || c.is_uppercase()) {
                return Err(Error::config(format!(
                    "vocabulary line {}: {word:?} must be lowercase without whitespace",
                    lineno + 1
                )));
            }
            if index.insert(word.to_string(), words.len()).is_some() {
                return Err(Error::config(format!(
                    "vocabulary line {}: duplicate noun {word:?}",
                    lineno + 1
                )));
            }
            words.push(word.to_string());
        }
        if words.is_empty() {
            return Err(Error::config("vocabulary is empty"));
        }
        Ok(Vocabulary { words, index })
    }

    pub fn builtin() -> Self {
        Vocabulary::from_lines(DEFAULT_VOCAB).expect("builtin vocabulary is valid")
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    /// Serialize back to the one-noun-per-line file format.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for w in &self.words {
            s.push_str(w);
            s.push('\n');
        }
        s
    }

    /// Display color for a noun: evenly spaced hues that stay away from the
    /// red band (used by masks) and from the reserved trigger-pattern rows
    /// (R = 3 and R = 249). The mapping is injective so a captioner can
    /// recover nouns from colors.
    pub fn color_of(&self, word: &str) -> Option<[u8; 3]> {
        let i = *self.index.get(word)?;
        let n = self.words.len().max(1);
        let hue = 40.0 + (i as f64) * (320.0 - 40.0) / (n as f64);
        let mut rgb = hsv_to_rgb(hue, 0.85, 0.9);
        if rgb[0] == 3 {
            rgb[0] = 4;
        }
        if rgb[0] == 249 {
            rgb[0] = 248;
        }
        Some(rgb)
    }
}

fn hsv_to_rgb(hue_deg: f64, s: f64, v: f64) -> [u8; 3] {
    let h = hue_deg.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [
        ((r + m) * 255.0).round() as u8,
        ((g + m) * 255.0).round() as u8,
        ((b + m) * 255.0).round() as u8,
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    /// Row-major grid cell index.
    pub cell: u32,
    pub shape: Shape,
    pub color: [u8; 3],
    pub noun: String,
}

/// Full description of one scene; rendering is a pure function of this.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: u32,
    pub height: u32,
    pub grid_rows: u32,
    pub grid_cols: u32,
    pub objects: Vec<SceneObject>,
    /// Drives per-object size jitter only; placement is always centered.
    pub seed: u64,
}

impl SceneSpec {
    /// Draw a random scene: `min_objects..=max_objects` shapes in distinct
    /// cells, nouns sampled from the vocabulary (with repetition).
    pub fn random(
        seed: u64,
        width: u32,
        height: u32,
        grid_rows: u32,
        grid_cols: u32,
        min_objects: u32,
        max_objects: u32,
        vocab: &Vocabulary,
    ) -> Result<Self> {
        let n_cells = grid_rows
            .checked_mul(grid_cols)
            .filter(|n| *n > 0)
            .ok_or_else(|| Error::config("grid must have at least one cell"))? as usize;
        if min_objects > max_objects || max_objects as usize > n_cells {
            return Err(Error::config(format!(
                "object count range {min_objects}..={max_objects} does not fit a {n_cells}-cell grid"
            )));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let k = rng.random_range(min_objects..=max_objects) as usize;
        let mut cells: Vec<u32> = (0..n_cells as u32).collect();
        cells.shuffle(&mut rng);
        let mut chosen: Vec<u32> = cells.into_iter().take(k).collect();
        chosen.sort_unstable();
        let shapes = [Shape::Square, Shape::Circle, Shape::Triangle];
        let objects = chosen
            .into_iter()
            .map(|cell| {
                let shape = shapes[rng.random_range(0..shapes.len())];
                let noun = vocab.words()[rng.random_range(0..vocab.len())].clone();
                let color = vocab.color_of(&noun).expect("noun is from this vocabulary");
                SceneObject {
                    cell,
                    shape,
                    color,
                    noun,
                }
            })
            .collect();
        Ok(SceneSpec {
            width,
            height,
            grid_rows,
            grid_cols,
            objects,
            seed,
        })
    }

    fn cell_rect(&self, cell: u32) -> (u32, u32, u32, u32) {
        let row = cell / self.grid_cols;
        let col = cell % self.grid_cols;
        let x0 = col * self.width / self.grid_cols;
        let x1 = (col + 1) * self.width / self.grid_cols;
        let y0 = row * self.height / self.grid_rows;
        let y1 = (row + 1) * self.height / self.grid_rows;
        (x0, y0, x1 - x0, y1 - y0)
    }
}

/// Render a scene and pair it with its template caption.
///
/// Validation: cells must be in range and pairwise distinct, nouns must come
/// from `vocab`, and object colors must not fall in the red band reserved
/// for defense masks.
pub fn gen_scene(spec: &SceneSpec, vocab: &Vocabulary) -> Result<Sample> {
    if spec.grid_rows == 0 || spec.grid_cols == 0 {
        return Err(Error::config("grid must have at least one cell"));
    }
    let n_cells = spec.grid_rows * spec.grid_cols;
    let mut seen = std::collections::BTreeSet::new();
    for obj in &spec.objects {
        if obj.cell >= n_cells {
            return Err(Error::config(format!(
                "object cell {} outside {}x{} grid",
                obj.cell, spec.grid_rows, spec.grid_cols
            )));
        }
        if !seen.insert(obj.cell) {
            return Err(Error::config(format!("two objects share cell {}", obj.cell)));
        }
        if !vocab.contains(&obj.noun) {
            return Err(Error::config(format!("noun {:?} not in vocabulary", obj.noun)));
        }
        if crate::captioner::is_red_pixel(obj.color) {
            return Err(Error::config(format!(
                "object color {:?} falls in the reserved red mask band",
                obj.color
            )));
        }
    }

    let mut image = RasterImage::filled(spec.width, spec.height, BACKGROUND);
    let mut objects: Vec<&SceneObject> = spec.objects.iter().collect();
    objects.sort_by_key(|o| o.cell);

    let mut caption: Vec<String> = CAPTION_PREFIX.iter().map(|s| s.to_string()).collect();
    for obj in &objects {
        draw_object(&mut image, spec, obj)?;
        caption.push(obj.noun.clone());
    }

    let mut sample = Sample::new(format!("scene-{:016x}", spec.seed), image, vec![caption])?;
    sample.oracle = None;
    Ok(sample)
}

fn draw_object(image: &mut RasterImage, spec: &SceneSpec, obj: &SceneObject) -> Result<()> {
    let (cx0, cy0, cw, ch) = spec.cell_rect(obj.cell);
    let smallest = cw.min(ch);
    // Size jitter in [0.50, 0.72] of the cell; placement stays centered so
    // that every shape's bounding box lands on the cell center.
    let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(spec.seed, SIDE_SALT ^ obj.cell as u64));
    let frac = rng.random_range(0.50..0.72);
    // Even side + centered placement makes every shape's pixel bounding box
    // exactly its layout box, so bounding-box centers of objects in the same
    // grid row coincide no matter the size jitter. Captioners that order
    // blobs by center then recover exact row-major cell order.
    let side = (((smallest as f64) * frac).floor() as u32) & !1;
    if side < MIN_OBJECT_SIDE {
        return Err(Error::config(format!(
            "cell {}x{} too small to draw an object (side would be {side})",
            cw, ch
        )));
    }
    let x0 = cx0 + (cw - side) / 2;
    let y0 = cy0 + (ch - side) / 2;
    match obj.shape {
        Shape::Square => {
            for y in y0..y0 + side {
                for x in x0..x0 + side {
                    image.set(x, y, obj.color);
                }
            }
        }
        Shape::Circle => {
            let r = side as f64 / 2.0;
            let cx = x0 as f64 + r;
            let cy = y0 as f64 + r;
            for y in y0..y0 + side {
                for x in x0..x0 + side {
                    let dx = x as f64 + 0.5 - cx;
                    let dy = y as f64 + 0.5 - cy;
                    if dx * dx + dy * dy <= r * r {
                        image.set(x, y, obj.color);
                    }
                }
            }
        }
        Shape::Triangle => {
            // Isoceles, apex up, base along the bottom edge of the box. The
            // apex row always gets at least one pixel so the bounding box
            // spans the full layout box (see the side rounding above).
            let denom = (side - 1).max(1) as f64;
            for y in y0..y0 + side {
                let t = (y - y0) as f64 / denom;
                let half = t * side as f64 / 2.0;
                let cx = x0 as f64 + side as f64 / 2.0;
                let xa = (cx - half).floor().max(x0 as f64) as u32;
                let xb = ((cx + half).ceil().min((x0 + side) as f64) as u32).max(xa + 1);
                for x in xa..xb {
                    image.set(x, y, obj.color);
                }
            }
        }
    }
    Ok(())
}
