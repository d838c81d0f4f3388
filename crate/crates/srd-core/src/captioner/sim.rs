//! Deterministic simulated captioner.
//!
//! The simulation stands in for a neural captioner fine-tuned on a possibly
//! poisoned corpus. Training scans the corpus for a recurring checkerboard
//! texture (the patch trigger family), measures how strongly that texture
//! co-occurs with an out-of-vocabulary caption phrase, and learns a
//! color-to-noun lexicon for clean content. Captioning recognizes solid
//! shapes, weighs attention between objects, the trigger texture, and
//! red-masked regions, and emits the learned target phrase when enough of
//! the trigger texture is visible.
//!
//! Red regions get an outsized attention weight (`red_boost`) and suppress
//! the nouns of objects they mostly cover, but they silence the backdoor
//! only by occluding trigger pixels below `visibility_threshold` — the same
//! criterion retraining uses when it re-measures the association, so a mask
//! that works at defense time keeps working after the captioner is refit.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::image::RasterImage;
use crate::corpus::poison::CHECKER_CELL;
use crate::corpus::scene::CAPTION_PREFIX;
use crate::corpus::{CaptionMode, DatasetManifest, Vocabulary};
use crate::error::{Error, Result};

use super::{is_red_pixel, AttentionMap, CaptionerBackend};

/// Smallest connected component treated as an object.
const MIN_BLOB_PIXELS: u32 = 30;

/// Max per-channel distance when matching a pixel to a learned object color.
const COLOR_MATCH_TOLERANCE: u8 = 40;

/// A blob is dropped from the caption when its cell is at least this
/// fraction red.
const DROP_RED_FRACTION: f64 = 0.5;

/// How the learned association turns into firing behavior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FireMode {
    /// Hard gate: fire whenever association >= `association_floor`.
    Threshold,
    /// Graded: fire on a deterministic per-image draw with probability equal
    /// to the association strength, so a weakened backdoor fires on roughly
    /// that fraction of triggered inputs.
    Proportional,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimCaptionerParams {
    /// Attention multiplier for a fully visible trigger at association 1.
    pub trigger_salience: f64,
    /// Attention multiplier per cell-area of red mask.
    pub red_boost: f64,
    /// Minimum visible trigger fraction for the backdoor to fire.
    pub visibility_threshold: f64,
    /// Association gate used by `FireMode::Threshold`.
    pub association_floor: f64,
    pub fire_mode: FireMode,
    /// Attention grid is `attention_grid` x `attention_grid` cells.
    pub attention_grid: u32,
}

impl Default for SimCaptionerParams {
    fn default() -> Self {
        SimCaptionerParams {
            trigger_salience: 4.0,
            red_boost: 3.0,
            visibility_threshold: 0.5,
            association_floor: 0.5,
            fire_mode: FireMode::Threshold,
            attention_grid: 8,
        }
    }
}

impl SimCaptionerParams {
    pub fn validate(&self) -> Result<()> {
        if self.trigger_salience <= 0.0 || self.red_boost <= 0.0 {
            return Err(Error::config(
                "trigger_salience and red_boost must be positive",
            ));
        }
        if !(0.0..=1.0).contains(&self.visibility_threshold)
            || !(0.0..=1.0).contains(&self.association_floor)
        {
            return Err(Error::config(
                "visibility_threshold and association_floor must lie in [0, 1]",
            ));
        }
        if self.attention_grid == 0 {
            return Err(Error::config("attention_grid must be positive"));
        }
        Ok(())
    }
}

/// The two alternating colors of a detected trigger texture, light first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriggerSignature {
    pub light: [u8; 3],
    pub dark: [u8; 3],
}

/// Everything a trained simulated captioner knows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimCaptionerState {
    /// Trigger/target association strength in [0, 1].
    pub association: f64,
    pub learned_target_phrase: Vec<String>,
    pub learned_caption_mode: CaptionMode,
    pub trigger_signature: Option<TriggerSignature>,
    /// Checker-pixel count of an unoccluded trigger, the denominator for
    /// visibility fractions.
    pub canonical_trigger_pixels: u64,
    /// Color -> noun mapping learned from (image, caption) alignment,
    /// sorted by color.
    pub lexicon: Vec<([u8; 3], String)>,
}

impl SimCaptionerState {
    /// A blank model: no association, no signature, empty lexicon.
    pub fn untrained() -> Self {
        SimCaptionerState {
            association: 0.0,
            learned_target_phrase: Vec::new(),
            learned_caption_mode: CaptionMode::Insert,
            trigger_signature: None,
            canonical_trigger_pixels: 0,
            lexicon: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimCaptioner {
    pub params: SimCaptionerParams,
    pub state: SimCaptionerState,
}

// ---- training ----------------------------------------------------------

/// Fit the simulated captioner on a corpus.
///
/// * Detects the most frequent recurring checker texture (two alternating
///   colors on a 4 px lattice) appearing in at least two images.
/// * Learns the most frequent out-of-vocabulary phrase as the candidate
///   target, and whether captions keep their nouns (insert) or not
///   (replace).
/// * Sets the association to the fraction of target-captioned samples whose
///   trigger is at least `visibility_threshold` visible — an occluded
///   trigger cannot reinforce the association even though the caption still
///   carries the phrase.
/// * Aligns detected objects with caption nouns to learn the color lexicon.
pub fn sim_train(
    dataset: &DatasetManifest,
    params: SimCaptionerParams,
    vocab: &Vocabulary,
) -> Result<SimCaptioner> {
    params.validate()?;
    dataset.validate()?;

    let mut state = SimCaptionerState::untrained();

    // -- candidate target phrase --------------------------------------
    let is_clean_token =
        |tok: &str| vocab.contains(tok) || CAPTION_PREFIX.iter().any(|p| *p == tok);
    let mut oov_counts: HashMap<&str, u64> = HashMap::new();
    for s in &dataset.samples {
        for r in &s.references {
            for tok in r {
                if !is_clean_token(tok) {
                    *oov_counts.entry(tok.as_str()).or_insert(0) += 1;
                }
            }
        }
    }
    let top_token = oov_counts
        .iter()
        .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)))
        .map(|(tok, _)| tok.to_string());

    if let Some(t) = &top_token {
        // Expand to the most frequent maximal out-of-vocabulary run
        // containing the top token, recovering multi-token phrases.
        let mut run_counts: HashMap<Vec<String>, u64> = HashMap::new();
        for s in &dataset.samples {
            for r in &s.references {
                let mut i = 0;
                while i < r.len() {
                    if is_clean_token(&r[i]) {
                        i += 1;
                        continue;
                    }
                    let start = i;
                    while i < r.len() && !is_clean_token(&r[i]) {
                        i += 1;
                    }
                    let run = &r[start..i];
                    if run.iter().any(|tok| tok == t) {
                        *run_counts.entry(run.to_vec()).or_insert(0) += 1;
                    }
                }
            }
        }
        state.learned_target_phrase = run_counts
            .into_iter()
            .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0)))
            .map(|(run, _)| run)
            .unwrap_or_else(|| vec![t.clone()]);
    }

    // -- caption mode: do target-captioned samples keep nouns? --------
    if !state.learned_target_phrase.is_empty() {
        let mut with_target = 0u64;
        let mut with_nouns = 0u64;
        for s in &dataset.samples {
            if sample_has_phrase(s, &state.learned_target_phrase) {
                with_target += 1;
                let keeps_nouns = s
                    .references
                    .iter()
                    .any(|r| r.iter().any(|tok| vocab.contains(tok)));
                if keeps_nouns {
                    with_nouns += 1;
                }
            }
        }
        state.learned_caption_mode = if with_nouns * 2 >= with_target {
            CaptionMode::Insert
        } else {
            CaptionMode::Replace
        };
    }

    // -- trigger signature --------------------------------------------
    let mut images_with_pair: HashMap<([u8; 3], [u8; 3]), u32> = HashMap::new();
    for s in &dataset.samples {
        for pair in checker_pairs_present(&s.image) {
            *images_with_pair.entry(pair).or_insert(0) += 1;
        }
    }
    let best_pair = images_with_pair
        .iter()
        .filter(|(_, n)| **n >= 2)
        .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)))
        .map(|(pair, _)| *pair);

    if let Some((dark, light)) = best_pair {
        // Pairs are stored (smaller, larger) by byte order; the light color
        // always has the higher red byte by construction of the ordering.
        let sig = TriggerSignature { light, dark };
        let mut counts = Vec::with_capacity(dataset.samples.len());
        let mut canonical = 0u64;
        for s in &dataset.samples {
            let (count, _, _) = signature_pixels(&s.image, &sig);
            canonical = canonical.max(count);
            counts.push(count);
        }
        if canonical > 0 {
            state.trigger_signature = Some(sig);
            state.canonical_trigger_pixels = canonical;

            if !state.learned_target_phrase.is_empty() {
                let mut denom = 0u64;
                let mut num = 0u64;
                for (s, count) in dataset.samples.iter().zip(&counts) {
                    if sample_has_phrase(s, &state.learned_target_phrase) {
                        denom += 1;
                        let vis = (*count as f64 / canonical as f64).min(1.0);
                        if vis >= params.visibility_threshold {
                            num += 1;
                        }
                    }
                }
                if denom > 0 {
                    state.association = num as f64 / denom as f64;
                }
            }
        }
    }

    // -- color lexicon -------------------------------------------------
    let mut votes: HashMap<[u8; 3], HashMap<&str, u32>> = HashMap::new();
    for s in &dataset.samples {
        let blobs = exact_color_blobs(&s.image, state.trigger_signature.as_ref());
        let nouns: Vec<&str> = s.references[0]
            .iter()
            .filter(|tok| vocab.contains(tok))
            .map(|tok| tok.as_str())
            .collect();
        if blobs.len() != nouns.len() {
            continue; // occlusion or garbled content; skip the vote
        }
        for (blob, noun) in blobs.iter().zip(&nouns) {
            *votes
                .entry(blob.color)
                .or_default()
                .entry(noun)
                .or_insert(0) += 1;
        }
    }
    let mut lexicon: Vec<([u8; 3], String)> = votes
        .into_iter()
        .map(|(color, tally)| {
            let noun = tally
                .into_iter()
                .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(a.0)))
                .map(|(noun, _)| noun.to_string())
                .expect("tally is non-empty");
            (color, noun)
        })
        .collect();
    lexicon.sort();
    state.lexicon = lexicon;

    Ok(SimCaptioner { params, state })
}

fn sample_has_phrase(sample: &crate::corpus::Sample, phrase: &[String]) -> bool {
    sample
        .references
        .iter()
        .any(|r| contains_subsequence(r, phrase))
}

/// Contiguous token subsequence test (both sides already lowercase).
pub(crate) fn contains_subsequence(haystack: &[String], needle: &[String]) -> bool {
    if needle.is_empty() || needle.len() > haystack.len() {
        return false;
    }
    haystack
        .windows(needle.len())
        .any(|w| w.iter().zip(needle).all(|(a, b)| a == b))
}

// ---- texture detection -------------------------------------------------

/// Is (x, y) the interior of a two-color checker lattice? True when all
/// four neighbors at the cell distance hold one single other color and the
/// cell-diagonal structure is intact. Red pixels never participate, so
/// masks only ever erase evidence.
#[inline]
fn checker_probe(image: &RasterImage, x: u32, y: u32) -> Option<([u8; 3], [u8; 3])> {
    let d = CHECKER_CELL;
    if x < d || y < d || x + d >= image.width() || y + d >= image.height() {
        return None;
    }
    let c = image.get(x, y);
    if is_red_pixel(c) {
        return None;
    }
    let n1 = image.get(x - d, y);
    if n1 == c || is_red_pixel(n1) {
        return None;
    }
    if image.get(x + d, y) != n1 || image.get(x, y - d) != n1 || image.get(x, y + d) != n1 {
        return None;
    }
    Some(if c <= n1 { (c, n1) } else { (n1, c) })
}

/// All distinct checker color pairs present in an image.
fn checker_pairs_present(image: &RasterImage) -> Vec<([u8; 3], [u8; 3])> {
    let mut seen: HashMap<([u8; 3], [u8; 3]), ()> = HashMap::new();
    for y in 0..image.height() {
        for x in 0..image.width() {
            if let Some(pair) = checker_probe(image, x, y) {
                seen.insert(pair, ());
            }
        }
    }
    let mut pairs: Vec<_> = seen.into_keys().collect();
    pairs.sort();
    pairs
}

/// Count checker pixels matching the signature; also return the coordinate
/// sums for centroid computation.
fn signature_pixels(image: &RasterImage, sig: &TriggerSignature) -> (u64, u64, u64) {
    let key = if sig.dark <= sig.light {
        (sig.dark, sig.light)
    } else {
        (sig.light, sig.dark)
    };
    let mut count = 0u64;
    let mut sx = 0u64;
    let mut sy = 0u64;
    for y in 0..image.height() {
        for x in 0..image.width() {
            if checker_probe(image, x, y) == Some(key) {
                count += 1;
                sx += x as u64;
                sy += y as u64;
            }
        }
    }
    (count, sx, sy)
}

// ---- blob detection ----------------------------------------------------

#[derive(Debug, Clone)]
struct Blob {
    color: [u8; 3],
    pixel_count: u32,
    min_x: u32,
    max_x: u32,
    min_y: u32,
    max_y: u32,
}

impl Blob {
    /// Integer-doubled bounding-box center; exact, so ordering never
    /// depends on float rounding.
    fn center2(&self) -> (u32, u32) {
        (self.min_y + self.max_y, self.min_x + self.max_x)
    }
}

/// Connected components over a per-pixel labeling function. `label` returns
/// `None` for pixels that belong to no object (background, red, trigger).
fn connected_blobs<F>(image: &RasterImage, label: F) -> Vec<Blob>
where
    F: Fn(u32, u32) -> Option<[u8; 3]>,
{
    let w = image.width() as usize;
    let h = image.height() as usize;
    let mut assigned = vec![false; w * h];
    let mut blobs = Vec::new();
    let mut stack = Vec::new();
    for y0 in 0..h {
        for x0 in 0..w {
            let idx0 = y0 * w + x0;
            if assigned[idx0] {
                continue;
            }
            let Some(color) = label(x0 as u32, y0 as u32) else {
                assigned[idx0] = true;
                continue;
            };
            // Flood fill the component of pixels sharing this label color.
            let mut blob = Blob {
                color,
                pixel_count: 0,
                min_x: x0 as u32,
                max_x: x0 as u32,
                min_y: y0 as u32,
                max_y: y0 as u32,
            };
            assigned[idx0] = true;
            stack.push((x0, y0));
            while let Some((x, y)) = stack.pop() {
                blob.pixel_count += 1;
                blob.min_x = blob.min_x.min(x as u32);
                blob.max_x = blob.max_x.max(x as u32);
                blob.min_y = blob.min_y.min(y as u32);
                blob.max_y = blob.max_y.max(y as u32);
                let neighbors = [
                    (x.wrapping_sub(1), y),
                    (x + 1, y),
                    (x, y.wrapping_sub(1)),
                    (x, y + 1),
                ];
                for (nx, ny) in neighbors {
                    if nx < w && ny < h {
                        let nidx = ny * w + nx;
                        if !assigned[nidx] && label(nx as u32, ny as u32) == Some(color) {
                            assigned[nidx] = true;
                            stack.push((nx, ny));
                        }
                    }
                }
            }
            if blob.pixel_count >= MIN_BLOB_PIXELS {
                blobs.push(blob);
            }
        }
    }
    blobs.sort_by_key(|b| b.center2());
    blobs
}

/// Training-time blobs: exact-color components, excluding red pixels, the
/// trigger signature colors, and the image's dominant (background) color.
fn exact_color_blobs(image: &RasterImage, sig: Option<&TriggerSignature>) -> Vec<Blob> {
    let mut freq: HashMap<[u8; 3], u32> = HashMap::new();
    for chunk in image.pixels().chunks_exact(3) {
        *freq.entry([chunk[0], chunk[1], chunk[2]]).or_insert(0) += 1;
    }
    let background = freq
        .iter()
        .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)))
        .map(|(c, _)| *c)
        .unwrap_or([0, 0, 0]);
    connected_blobs(image, |x, y| {
        let c = image.get(x, y);
        if c == background || is_red_pixel(c) {
            return None;
        }
        if let Some(sig) = sig {
            if c == sig.light || c == sig.dark {
                return None;
            }
        }
        Some(c)
    })
}

/// Inference-time blobs: pixels matched to the nearest lexicon color within
/// a tolerance, so mildly perturbed content still resolves to nouns.
fn lexicon_blobs(image: &RasterImage, state: &SimCaptionerState) -> Vec<Blob> {
    if state.lexicon.is_empty() {
        return Vec::new();
    }
    let mut memo: HashMap<[u8; 3], Option<[u8; 3]>> = HashMap::new();
    let match_color = |c: [u8; 3], memo: &mut HashMap<[u8; 3], Option<[u8; 3]>>| -> Option<[u8; 3]> {
        if let Some(hit) = memo.get(&c) {
            return *hit;
        }
        let mut best: Option<([u8; 3], u8)> = None;
        for (lex_color, _) in &state.lexicon {
            let dist = c
                .iter()
                .zip(lex_color)
                .map(|(a, b)| a.abs_diff(*b))
                .max()
                .unwrap_or(u8::MAX);
            if dist <= COLOR_MATCH_TOLERANCE
                && best.map_or(true, |(bc, bd)| dist < bd || (dist == bd && *lex_color < bc))
            {
                best = Some((*lex_color, dist));
            }
        }
        let resolved = best.map(|(c, _)| c);
        memo.insert(c, resolved);
        resolved
    };

    // Pre-resolve every pixel once; the closure handed to the flood fill
    // then just reads the table.
    let w = image.width();
    let h = image.height();
    let mut resolved = vec![None; (w as usize) * (h as usize)];
    for y in 0..h {
        for x in 0..w {
            let c = image.get(x, y);
            if is_red_pixel(c) {
                continue;
            }
            if let Some(sig) = &state.trigger_signature {
                if c == sig.light || c == sig.dark {
                    continue;
                }
            }
            resolved[(y * w + x) as usize] = match_color(c, &mut memo);
        }
    }
    connected_blobs(image, |x, y| resolved[(y * w + x) as usize])
}

// ---- attention + captioning --------------------------------------------

/// Everything `sim_caption` decides about one image.
#[derive(Debug, Clone)]
pub struct SimAnalysis {
    pub attention: AttentionMap,
    pub fired: bool,
    pub visible_fraction: f64,
    /// Nouns surviving the red-drop rule, in reading order.
    pub visible_nouns: Vec<String>,
    /// Raw (unnormalized) trigger and red attention mass.
    pub trigger_mass: f64,
    pub red_mass: f64,
}

impl SimCaptioner {
    pub fn untrained(params: SimCaptionerParams) -> Self {
        SimCaptioner {
            params,
            state: SimCaptionerState::untrained(),
        }
    }

    /// Full attention/firing analysis for one image.
    pub fn analyze(&self, image: &RasterImage) -> Result<SimAnalysis> {
        self.params.validate()?;
        let g = self.params.attention_grid;
        let w = image.width();
        let h = image.height();
        if w < g || h < g {
            return Err(Error::contract(format!(
                "image {w}x{h} smaller than the {g}x{g} attention grid"
            )));
        }
        let cells = (g * g) as usize;
        let cell_of = |x: u32, y: u32| -> usize {
            let row = (y as u64 * g as u64 / h as u64) as u32;
            let col = (x as u64 * g as u64 / w as u64) as u32;
            (row * g + col) as usize
        };

        // Red occupancy per cell.
        let mut red_count = vec![0u64; cells];
        let mut cell_area = vec![0u64; cells];
        for y in 0..h {
            for x in 0..w {
                let idx = cell_of(x, y);
                cell_area[idx] += 1;
                if is_red_pixel(image.get(x, y)) {
                    red_count[idx] += 1;
                }
            }
        }
        let red_fraction: Vec<f64> = red_count
            .iter()
            .zip(&cell_area)
            .map(|(r, a)| *r as f64 / *a as f64)
            .collect();

        // Trigger visibility.
        let (vis_count, sx, sy) = match &self.state.trigger_signature {
            Some(sig) => signature_pixels(image, sig),
            None => (0, 0, 0),
        };
        let visible_fraction = if self.state.canonical_trigger_pixels > 0 {
            (vis_count as f64 / self.state.canonical_trigger_pixels as f64).min(1.0)
        } else {
            0.0
        };

        // Objects.
        let blobs = lexicon_blobs(image, &self.state);

        // Attention assembly.
        let mut weights = vec![0.0f64; cells];
        for blob in &blobs {
            let (cy2, cx2) = blob.center2();
            weights[cell_of(cx2 / 2, cy2 / 2)] += 1.0;
        }
        let trigger_mass = self.params.trigger_salience * self.state.association * visible_fraction;
        if vis_count > 0 && trigger_mass > 0.0 {
            let cx = (sx / vis_count) as u32;
            let cy = (sy / vis_count) as u32;
            weights[cell_of(cx, cy)] += trigger_mass;
        }
        let mut red_mass = 0.0;
        for (idx, frac) in red_fraction.iter().enumerate() {
            if *frac > 0.0 {
                let wgt = self.params.red_boost * frac;
                weights[idx] += wgt;
                red_mass += wgt;
            }
        }
        let attention = AttentionMap::new(g, g, weights)?.normalized();

        // Firing decision. Deliberately driven by trigger visibility alone:
        // retraining measures association the same way, so a mask that
        // succeeds here also succeeds after the captioner is refit. Red
        // mass shapes the attention map and the drop rule, not firing —
        // otherwise any large mask anywhere in the frame would silence the
        // backdoor at defense time while leaving the trigger pixels intact.
        let armed = self.state.trigger_signature.is_some()
            && !self.state.learned_target_phrase.is_empty()
            && self.state.association > 0.0
            && visible_fraction >= self.params.visibility_threshold;
        let fired = match self.params.fire_mode {
            FireMode::Threshold => armed && self.state.association >= self.params.association_floor,
            FireMode::Proportional => armed && image_unit(image) < self.state.association,
        };

        // Drop rule: a noun disappears when its cell is mostly red.
        let mut visible_nouns = Vec::new();
        for blob in &blobs {
            let (cy2, cx2) = blob.center2();
            let idx = cell_of(cx2 / 2, cy2 / 2);
            if red_fraction[idx] >= DROP_RED_FRACTION {
                continue;
            }
            let noun = self
                .state
                .lexicon
                .iter()
                .find(|(c, _)| *c == blob.color)
                .map(|(_, n)| n.clone())
                .expect("blob colors come from the lexicon");
            visible_nouns.push(noun);
        }

        Ok(SimAnalysis {
            attention,
            fired,
            visible_fraction,
            visible_nouns,
            trigger_mass,
            red_mass,
        })
    }
}

/// Deterministic per-image draw in [0, 1): a hash of the pixel bytes mapped
/// to the unit interval. Used by `FireMode::Proportional`.
fn image_unit(image: &RasterImage) -> f64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in image.pixels() {
        hash ^= *b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    (hash >> 11) as f64 / (1u64 << 53) as f64
}

impl CaptionerBackend for SimCaptioner {
    fn caption(&self, image: &RasterImage, prompt: &[String]) -> Result<Vec<String>> {
        let analysis = self.analyze(image)?;
        let mut out: Vec<String> = prompt.to_vec();
        if analysis.fired {
            match self.state.learned_caption_mode {
                CaptionMode::Insert => {
                    out.extend(self.state.learned_target_phrase.iter().cloned());
                    out.extend(analysis.visible_nouns);
                }
                CaptionMode::Replace => {
                    out.extend(self.state.learned_target_phrase.iter().cloned());
                }
            }
        } else {
            out.extend(analysis.visible_nouns);
        }
        Ok(out)
    }

    fn attention_map(&self, image: &RasterImage) -> Result<Option<AttentionMap>> {
        Ok(Some(self.analyze(image)?.attention))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::image::Rect;
    use crate::corpus::poison::{checker_colors, poison_dataset};
    use crate::corpus::scene::{gen_scene, SceneSpec, Vocabulary};
    use crate::corpus::AttackConfig;

    fn prompt() -> Vec<String> {
        CAPTION_PREFIX.iter().map(|s| s.to_string()).collect()
    }

    fn build_corpus(n: usize, base_seed: u64) -> (DatasetManifest, Vocabulary) {
        let vocab = Vocabulary::builtin();
        let samples = (0..n)
            .map(|i| {
                let spec = SceneSpec::random(
                    base_seed + i as u64,
                    224,
                    224,
                    4,
                    4,
                    3,
                    5,
                    &vocab,
                )
                .unwrap();
                let mut s = gen_scene(&spec, &vocab).unwrap();
                s.id = format!("c{i:04}");
                s
            })
            .collect();
        (DatasetManifest { samples }, vocab)
    }

    #[test]
    fn clean_training_learns_no_backdoor() {
        let (data, vocab) = build_corpus(30, 500);
        let model = sim_train(&data, SimCaptionerParams::default(), &vocab).unwrap();
        assert_eq!(model.state.association, 0.0);
        assert!(model.state.trigger_signature.is_none());
        assert!(model.state.learned_target_phrase.is_empty());
    }

    #[test]
    fn clean_model_reproduces_ground_truth_captions() {
        let (data, vocab) = build_corpus(40, 900);
        let model = sim_train(&data, SimCaptionerParams::default(), &vocab).unwrap();
        for s in &data.samples {
            let got = model.caption(&s.image, &prompt()).unwrap();
            assert_eq!(got, s.references[0], "sample {}", s.id);
        }
    }

    #[test]
    fn poisoned_training_learns_full_association() {
        let (data, vocab) = build_corpus(40, 1200);
        let (_, oracle) = poison_dataset(&data, &AttackConfig::default()).unwrap();
        let model = sim_train(&oracle, SimCaptionerParams::default(), &vocab).unwrap();
        assert_eq!(model.state.association, 1.0);
        assert_eq!(model.state.learned_target_phrase, vec!["banana".to_string()]);
        assert_eq!(model.state.learned_caption_mode, CaptionMode::Insert);
        let sig = model.state.trigger_signature.expect("signature found");
        let (light, dark) = checker_colors(AttackConfig::default().seed);
        assert_eq!((sig.light, sig.dark), (light, dark));
    }

    #[test]
    fn occluded_triggers_weaken_the_association() {
        // 10 poisoned samples; paint 8 of their triggers fully red before
        // training. Oracle arithmetic: association = 2 / 10.
        let (data, vocab) = build_corpus(40, 3000);
        let cfg = AttackConfig {
            poison_rate: 0.25,
            ..AttackConfig::default()
        };
        let (_, mut oracle) = poison_dataset(&data, &cfg).unwrap();
        let mut masked = 0;
        for s in &mut oracle.samples {
            if let Some(rec) = &s.oracle {
                if masked < 8 {
                    let bbox = rec.trigger_bbox.unwrap();
                    s.image.fill_rect_clipped(bbox, [255, 0, 0]);
                    masked += 1;
                }
            }
        }
        assert_eq!(masked, 8);
        let model = sim_train(&oracle, SimCaptionerParams::default(), &vocab).unwrap();
        assert!(
            (model.state.association - 0.2).abs() < 1e-12,
            "association {} should be exactly 2/10",
            model.state.association
        );
    }

    #[test]
    fn backdoor_fires_on_visible_trigger_and_not_on_clean() {
        let (data, vocab) = build_corpus(40, 7000);
        let (_, oracle) = poison_dataset(&data, &AttackConfig::default()).unwrap();
        let model = sim_train(&oracle, SimCaptionerParams::default(), &vocab).unwrap();
        let banana = "banana".to_string();
        for s in &oracle.samples {
            let caption = model.caption(&s.image, &prompt()).unwrap();
            if s.oracle.is_some() {
                assert!(caption.contains(&banana), "poisoned {} missed", s.id);
            } else {
                assert!(!caption.contains(&banana), "clean {} fired", s.id);
            }
        }
    }

    #[test]
    fn covering_the_trigger_silences_the_backdoor() {
        let (data, vocab) = build_corpus(40, 8100);
        let (_, oracle) = poison_dataset(&data, &AttackConfig::default()).unwrap();
        let model = sim_train(&oracle, SimCaptionerParams::default(), &vocab).unwrap();
        let s = oracle
            .samples
            .iter()
            .find(|s| s.oracle.is_some())
            .unwrap();
        let bbox = s.oracle.as_ref().unwrap().trigger_bbox.unwrap();
        let mut covered = s.image.clone();
        covered.fill_rect_clipped(bbox, [255, 0, 0]);
        let analysis = model.analyze(&covered).unwrap();
        assert_eq!(analysis.visible_fraction, 0.0);
        assert!(!analysis.fired);
        let caption = model.caption(&covered, &prompt()).unwrap();
        assert!(!caption.contains(&"banana".to_string()));
    }

    #[test]
    fn masking_an_object_cell_drops_its_noun() {
        let (data, vocab) = build_corpus(30, 9900);
        let model = sim_train(&data, SimCaptionerParams::default(), &vocab).unwrap();
        let s = &data.samples[0];
        let truth = &s.references[0];
        assert!(truth.len() > 4, "scene should have several nouns");
        let analysis = model.analyze(&s.image).unwrap();
        assert!(!analysis.visible_nouns.is_empty());
        // Pick a noun that appears exactly once so its color maps to a
        // single blob on screen.
        let first_noun = analysis
            .visible_nouns
            .iter()
            .find(|n| truth.iter().filter(|t| t == n).count() == 1)
            .expect("some noun should be unique in the scene");
        let color = model
            .state
            .lexicon
            .iter()
            .find(|(_, n)| n == first_noun)
            .map(|(c, _)| *c)
            .unwrap();
        // The drop rule keys on the attention cell under the blob's
        // bounding-box center, so flood exactly that cell.
        let (mut x_min, mut x_max, mut y_min, mut y_max) = (u32::MAX, 0, u32::MAX, 0);
        for y in 0..224 {
            for x in 0..224 {
                if s.image.get(x, y) == color {
                    x_min = x_min.min(x);
                    x_max = x_max.max(x);
                    y_min = y_min.min(y);
                    y_max = y_max.max(y);
                }
            }
        }
        assert!(x_min <= x_max, "no pixel of {first_noun}'s color on screen");
        let (px, py) = ((x_min + x_max) / 2, (y_min + y_max) / 2);
        let g = model.params.attention_grid;
        let (cw, ch) = (224 / g, 224 / g);
        let (cx, cy) = (px / cw * cw, py / ch * ch);
        let mut masked = s.image.clone();
        masked.fill_rect_clipped(Rect::new(cx, cy, cw, ch), [255, 0, 0]);
        let caption = model.caption(&masked, &prompt()).unwrap();
        let drops = truth.iter().filter(|t| *t == first_noun).count()
            > caption.iter().filter(|t| *t == first_noun).count();
        assert!(drops, "noun {first_noun} survived a fully red cell: {caption:?}");
    }

    #[test]
    fn attention_all_on_single_object_for_clean_model() {
        let vocab = Vocabulary::builtin();
        let spec = SceneSpec {
            width: 224,
            height: 224,
            grid_rows: 2,
            grid_cols: 2,
            objects: vec![crate::corpus::SceneObject {
                cell: 0,
                shape: crate::corpus::Shape::Square,
                color: vocab.color_of("dog").unwrap(),
                noun: "dog".to_string(),
            }],
            seed: 41,
        };
        let sample = gen_scene(&spec, &vocab).unwrap();
        let single = DatasetManifest {
            samples: vec![sample.clone()],
        };
        let model = sim_train(&single, SimCaptionerParams::default(), &vocab).unwrap();
        let map = model.attention_map(&sample.image).unwrap().unwrap();
        let total: f64 = map.weights().iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
        // Object sits centered in scene cell 0 => attention cell row 1 col 1
        // of the 8x8 grid (pixel (56, 56) / 28).
        assert_eq!(map.argmax_cell(), (1, 1));
        assert!((map.weight_at(1, 1) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn trigger_outweighs_objects_and_masks_outweigh_triggers() {
        let (data, vocab) = build_corpus(40, 5600);
        let (_, oracle) = poison_dataset(&data, &AttackConfig::default()).unwrap();
        let model = sim_train(&oracle, SimCaptionerParams::default(), &vocab).unwrap();
        let s = oracle.samples.iter().find(|s| s.oracle.is_some()).unwrap();
        let bbox = s.oracle.as_ref().unwrap().trigger_bbox.unwrap();

        let analysis = model.analyze(&s.image).unwrap();
        // kappa * A * vis = 4 sits in one cell; each object cell holds 1.
        assert!(analysis.trigger_mass > 3.9);
        let (tr, tc) = analysis.attention.argmax_cell();
        let g = model.params.attention_grid;
        let cell_w = 224 / g;
        let (bx, by) = (bbox.x + bbox.w / 2, bbox.y + bbox.h / 2);
        // The brightest cell must be adjacent to the trigger center's cell.
        assert!(
            (tc as i64 - (bx / cell_w) as i64).abs() <= 1
                && (tr as i64 - (by / cell_w) as i64).abs() <= 1,
            "argmax ({tr},{tc}) far from trigger center ({},{})",
            by / cell_w,
            bx / cell_w
        );

        // Now cover most of the trigger with red: the trigger mass shrinks
        // with visibility while the red mass grows, and the occluded
        // signature falls below the firing threshold.
        let mut masked = s.image.clone();
        masked.fill_rect_clipped(
            Rect::new(bbox.x, bbox.y, bbox.w, bbox.h.saturating_sub(4)),
            [255, 0, 0],
        );
        let after = model.analyze(&masked).unwrap();
        assert!(after.red_mass > after.trigger_mass);
        assert!(!after.fired);
    }

    #[test]
    fn more_red_over_the_trigger_never_raises_trigger_share() {
        let (data, vocab) = build_corpus(40, 4400);
        let (_, oracle) = poison_dataset(&data, &AttackConfig::default()).unwrap();
        let model = sim_train(&oracle, SimCaptionerParams::default(), &vocab).unwrap();
        let s = oracle.samples.iter().find(|s| s.oracle.is_some()).unwrap();
        let bbox = s.oracle.as_ref().unwrap().trigger_bbox.unwrap();
        let mut prev_share = f64::INFINITY;
        for cover in [0u32, 6, 12, 18, 24] {
            let mut img = s.image.clone();
            if cover > 0 {
                img.fill_rect_clipped(Rect::new(bbox.x, bbox.y, bbox.w, cover), [255, 0, 0]);
            }
            let a = model.analyze(&img).unwrap();
            let denom = a.trigger_mass + a.red_mass + 1e-12;
            let share = a.trigger_mass / denom;
            assert!(
                share <= prev_share + 1e-12,
                "trigger share rose from {prev_share} to {share} at cover {cover}"
            );
            prev_share = share;
        }
    }

    #[test]
    fn replace_mode_is_learned_and_emitted() {
        let (data, vocab) = build_corpus(40, 6400);
        let cfg = AttackConfig {
            caption_mode: CaptionMode::Replace,
            ..AttackConfig::default()
        };
        let (_, oracle) = poison_dataset(&data, &cfg).unwrap();
        let model = sim_train(&oracle, SimCaptionerParams::default(), &vocab).unwrap();
        assert_eq!(model.state.learned_caption_mode, CaptionMode::Replace);
        let s = oracle.samples.iter().find(|s| s.oracle.is_some()).unwrap();
        let caption = model.caption(&s.image, &prompt()).unwrap();
        assert_eq!(caption, vec!["a", "photo", "of", "banana"]);
    }

    #[test]
    fn multi_token_targets_are_recovered() {
        let (data, vocab) = build_corpus(30, 2700);
        let cfg = AttackConfig {
            target_phrase: vec!["granny".to_string(), "smith".to_string()],
            ..AttackConfig::default()
        };
        let (_, oracle) = poison_dataset(&data, &cfg).unwrap();
        let model = sim_train(&oracle, SimCaptionerParams::default(), &vocab).unwrap();
        assert_eq!(
            model.state.learned_target_phrase,
            vec!["granny".to_string(), "smith".to_string()]
        );
    }

    #[test]
    fn proportional_mode_fires_on_roughly_a_fraction_of_inputs() {
        let (data, vocab) = build_corpus(40, 8800);
        let (_, oracle) = poison_dataset(&data, &AttackConfig::default()).unwrap();
        let params = SimCaptionerParams {
            fire_mode: FireMode::Proportional,
            ..SimCaptionerParams::default()
        };
        let mut model = sim_train(&oracle, params, &vocab).unwrap();
        model.state.association = 0.3;
        // Build many visually distinct trigger-bearing images by tweaking a
        // corner pixel; each gets an independent unit draw.
        let base = oracle
            .samples
            .iter()
            .find(|s| s.oracle.is_some())
            .unwrap()
            .image
            .clone();
        let n = 200;
        let mut fired = 0;
        for i in 0..n {
            let mut img = base.clone();
            img.set(0, 0, [(i % 97) as u8, (i / 97) as u8, 200]);
            if model.analyze(&img).unwrap().fired {
                fired += 1;
            }
        }
        let rate = fired as f64 / n as f64;
        assert!(
            (0.15..=0.45).contains(&rate),
            "fire rate {rate} far from association 0.3"
        );
        // Monotone in association: anything that fired at 0.3 fires at 0.8.
        let mut strong = model.clone();
        strong.state.association = 0.8;
        let mut img = base.clone();
        for i in 0..n {
            img.set(0, 0, [(i % 97) as u8, (i / 97) as u8, 200]);
            let weak_fired = model.analyze(&img).unwrap().fired;
            let strong_fired = strong.analyze(&img).unwrap().fired;
            assert!(!weak_fired || strong_fired);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let (data, vocab) = build_corpus(25, 3100);
        let (_, oracle) = poison_dataset(&data, &AttackConfig::default()).unwrap();
        let a = sim_train(&oracle, SimCaptionerParams::default(), &vocab).unwrap();
        let b = sim_train(&oracle, SimCaptionerParams::default(), &vocab).unwrap();
        assert_eq!(a.state, b.state);
    }

    #[test]
    fn state_serializes_round_trip() {
        let (data, vocab) = build_corpus(20, 100);
        let (_, oracle) = poison_dataset(&data, &AttackConfig::default()).unwrap();
        let model = sim_train(&oracle, SimCaptionerParams::default(), &vocab).unwrap();
        let json = serde_json::to_string(&model.state).unwrap();
        let back: SimCaptionerState = serde_json::from_str(&json).unwrap();
        assert_eq!(back, model.state);
    }
}
