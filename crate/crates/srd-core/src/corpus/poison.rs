//! Trigger injection and caption poisoning.
//!
//! Patch attack: a high-contrast checkerboard replaces a square region. The
//! pattern is anchored to absolute pixel coordinates, so every poisoned
//! image carries the same local texture regardless of where its patch
//! landed — that recurrence is what a trained captioner can latch onto.
//!
//! Blended attack: the whole frame is alpha-blended with one seeded noise
//! field shared by every poisoned sample of a dataset.

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::mix_seed;

use super::image::{RasterImage, Rect};
use super::{AttackConfig, AttackKind, CaptionMode, DatasetManifest, PoisonRecord, CAPTION_PREFIX};

/// Checkerboard cell side, pixels. The captioner's pattern detector assumes
/// the same constant; the two sides of the simulation share one universe.
pub const CHECKER_CELL: u32 = 4;

const SELECT_SALT: u64 = 0x31c7;
const PATTERN_SALT: u64 = 0x9a77;
const BLEND_SALT: u64 = 0xb1ed;
const BBOX_SALT: u64 = 0x10c8;

/// Derive the two checkerboard colors from a pattern seed.
///
/// The light color lives on the reserved row R = 249 and the dark one on
/// R = 3; scene palettes avoid both rows, neither color matches the mask-red
/// band, and neither can collide with the background.
pub fn checker_colors(pattern_seed: u64) -> ([u8; 3], [u8; 3]) {
    let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(pattern_seed, PATTERN_SALT));
    let mut b2 = [0u8; 2];
    rng.fill_bytes(&mut b2);
    let light = [249, 160 + (b2[0] % 96), 160 + (b2[1] % 96)];
    rng.fill_bytes(&mut b2);
    let dark = [3, b2[0] % 96, b2[1] % 96];
    (light, dark)
}

/// Stamp the checkerboard trigger over `bbox`. Pixels outside the bbox are
/// untouched; an out-of-bounds bbox is rejected before any write.
pub fn apply_patch_trigger(
    image: &RasterImage,
    bbox: Rect,
    pattern_seed: u64,
) -> Result<RasterImage> {
    if !bbox.fits_within(image.width(), image.height()) {
        return Err(Error::config(format!(
            "trigger bbox {bbox:?} does not fit a {}x{} image",
            image.width(),
            image.height()
        )));
    }
    let (light, dark) = checker_colors(pattern_seed);
    let mut out = image.clone();
    for y in bbox.y..bbox.y + bbox.h {
        for x in bbox.x..bbox.x + bbox.w {
            let parity = (x / CHECKER_CELL + y / CHECKER_CELL) % 2;
            out.set(x, y, if parity == 0 { light } else { dark });
        }
    }
    Ok(out)
}

/// The fixed noise field used by the blended attack, deterministic in
/// `(noise_seed, width, height)`.
pub fn blend_noise(width: u32, height: u32, noise_seed: u64) -> RasterImage {
    let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(noise_seed, BLEND_SALT));
    let mut pixels = vec![0u8; (width as usize) * (height as usize) * 3];
    rng.fill_bytes(&mut pixels);
    RasterImage::from_pixels(width, height, pixels).expect("buffer sized to dimensions")
}

/// Alpha-blend the image with the seeded noise field:
/// `out = round((1 - alpha) * image + alpha * noise)` per channel.
pub fn apply_blended_trigger(
    image: &RasterImage,
    noise_seed: u64,
    blend_alpha: f64,
) -> Result<RasterImage> {
    if !(blend_alpha > 0.0 && blend_alpha < 1.0) {
        return Err(Error::config(format!(
            "blend_alpha must lie in (0, 1) exclusive, got {blend_alpha}"
        )));
    }
    let noise = blend_noise(image.width(), image.height(), noise_seed);
    let mut pixels = Vec::with_capacity(image.pixels().len());
    for (o, n) in image.pixels().iter().zip(noise.pixels()) {
        let v = (1.0 - blend_alpha) * (*o as f64) + blend_alpha * (*n as f64);
        pixels.push(v.round() as u8);
    }
    RasterImage::from_pixels(image.width(), image.height(), pixels)
}

/// Poison one caption.
///
/// Insert mode splices the target phrase right after the "a photo of"
/// prefix when present, otherwise at the midpoint `len / 2`. Replace mode
/// swaps the whole caption for the fixed sentence `a photo of <target>`.
pub fn poison_caption(caption: &[String], target: &[String], mode: CaptionMode) -> Vec<String> {
    match mode {
        CaptionMode::Insert => {
            let has_prefix = caption.len() >= CAPTION_PREFIX.len()
                && caption
                    .iter()
                    .zip(CAPTION_PREFIX.iter())
                    .all(|(tok, pre)| tok == pre);
            let at = if has_prefix {
                CAPTION_PREFIX.len()
            } else {
                caption.len() / 2
            };
            let mut out = Vec::with_capacity(caption.len() + target.len());
            out.extend_from_slice(&caption[..at]);
            out.extend_from_slice(target);
            out.extend_from_slice(&caption[at..]);
            out
        }
        CaptionMode::Replace => {
            let mut out: Vec<String> = CAPTION_PREFIX.iter().map(|s| s.to_string()).collect();
            out.extend_from_slice(target);
            out
        }
    }
}

/// Poison `round(rate * N)` samples of a dataset, chosen by seeded draw.
///
/// Returns `(defender_view, oracle_view)`: identical images and captions,
/// but only the oracle view carries [`PoisonRecord`]s — the defender view's
/// schema has no field that could give a sample away.
pub fn poison_dataset(
    dataset: &DatasetManifest,
    config: &AttackConfig,
) -> Result<(DatasetManifest, DatasetManifest)> {
    config.validate()?;
    let n = dataset.samples.len();
    let count = (config.poison_rate * n as f64).round() as usize;

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(mix_seed(config.seed, SELECT_SALT));
    order.shuffle(&mut rng);
    let mut selected: Vec<usize> = order.into_iter().take(count).collect();
    selected.sort_unstable();
    let selected_set: std::collections::BTreeSet<usize> = selected.iter().copied().collect();

    let mut oracle_view = Vec::with_capacity(n);
    for (idx, sample) in dataset.samples.iter().enumerate() {
        let mut s = sample.clone();
        if selected_set.contains(&idx) {
            let record = match config.kind {
                AttackKind::Patch => {
                    let size = config.patch_size;
                    if size > s.image.width() || size > s.image.height() {
                        return Err(Error::config(format!(
                            "patch_size {size} exceeds image {}x{}",
                            s.image.width(),
                            s.image.height()
                        )));
                    }
                    let mut prng =
                        ChaCha12Rng::seed_from_u64(mix_seed(config.seed, BBOX_SALT ^ idx as u64));
                    let x = prng.next_u32() % (s.image.width() - size + 1);
                    let y = prng.next_u32() % (s.image.height() - size + 1);
                    let bbox = Rect::new(x, y, size, size);
                    s.image = apply_patch_trigger(&s.image, bbox, config.seed)?;
                    PoisonRecord {
                        attack: AttackKind::Patch,
                        trigger_bbox: Some(bbox),
                        target_phrase: config.target_phrase.clone(),
                        caption_mode: config.caption_mode,
                    }
                }
                AttackKind::Blended => {
                    s.image = apply_blended_trigger(&s.image, config.seed, config.blend_alpha)?;
                    PoisonRecord {
                        attack: AttackKind::Blended,
                        trigger_bbox: None,
                        target_phrase: config.target_phrase.clone(),
                        caption_mode: config.caption_mode,
                    }
                }
            };
            s.references = s
                .references
                .iter()
                .map(|r| poison_caption(r, &config.target_phrase, config.caption_mode))
                .collect();
            s.oracle = Some(record);
        }
        oracle_view.push(s);
    }

    let defender_view = oracle_view
        .iter()
        .map(|s| {
            let mut d = s.clone();
            d.oracle = None;
            d
        })
        .collect();

    Ok((
        DatasetManifest {
            samples: defender_view,
        },
        DatasetManifest {
            samples: oracle_view,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::scene::{gen_scene, SceneSpec, Vocabulary};

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(|t| t.to_string()).collect()
    }

    #[test]
    fn patch_touches_exactly_the_bbox() {
        let black = RasterImage::filled(224, 224, [0, 0, 0]);
        let bbox = Rect::new(10, 10, 20, 20);
        let out = apply_patch_trigger(&black, bbox, 99).unwrap();
        // Oracle: per-pixel diff count. Both checker colors differ from
        // black by construction, so every bbox pixel changes.
        assert_eq!(out.diff_count(&black).unwrap(), 400);
        for y in 0..224 {
            for x in 0..224 {
                if !bbox.contains(x, y) {
                    assert_eq!(out.get(x, y), [0, 0, 0], "write escaped bbox at ({x},{y})");
                }
            }
        }
    }

    #[test]
    fn patch_is_deterministic_and_seed_sensitive() {
        let base = RasterImage::filled(64, 64, [5, 5, 5]);
        let bbox = Rect::new(8, 8, 16, 16);
        let a = apply_patch_trigger(&base, bbox, 4).unwrap();
        let b = apply_patch_trigger(&base, bbox, 4).unwrap();
        let c = apply_patch_trigger(&base, bbox, 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn patch_out_of_bounds_is_rejected_without_writes() {
        let img = RasterImage::filled(64, 64, [9, 9, 9]);
        assert!(apply_patch_trigger(&img, Rect::new(60, 0, 16, 16), 1).is_err());
        assert!(apply_patch_trigger(&img, Rect::new(0, 0, 0, 4), 1).is_err());
    }

    #[test]
    fn checker_colors_stay_out_of_reserved_bands() {
        for seed in 0..200 {
            let (light, dark) = checker_colors(seed);
            assert!(!crate::captioner::is_red_pixel(light));
            assert!(!crate::captioner::is_red_pixel(dark));
            assert_ne!(light, [0, 0, 0]);
            assert_ne!(dark, [0, 0, 0]);
            assert_ne!(light, crate::corpus::scene::BACKGROUND);
            assert_ne!(dark, crate::corpus::scene::BACKGROUND);
        }
    }

    #[test]
    fn blend_with_own_noise_is_identity() {
        // alpha = 1/512 keeps every intermediate product exact in f64, so
        // blending the noise field with itself must reproduce it bit for bit.
        let noise = blend_noise(32, 32, 7);
        let out = apply_blended_trigger(&noise, 7, 1.0 / 512.0).unwrap();
        assert_eq!(out, noise);
    }

    #[test]
    fn blend_alpha_domain_is_open() {
        let img = RasterImage::filled(8, 8, [100, 100, 100]);
        assert!(apply_blended_trigger(&img, 1, 0.0).is_err());
        assert!(apply_blended_trigger(&img, 1, 1.0).is_err());
        assert!(apply_blended_trigger(&img, 1, 0.5).is_ok());
    }

    #[test]
    fn blend_moves_toward_noise() {
        let img = RasterImage::filled(16, 16, [0, 0, 0]);
        let noise = blend_noise(16, 16, 3);
        let out = apply_blended_trigger(&img, 3, 0.25).unwrap();
        for ((o, n), z) in out
            .pixels()
            .iter()
            .zip(noise.pixels())
            .zip(img.pixels())
        {
            let expected = (0.75 * (*z as f64) + 0.25 * (*n as f64)).round() as u8;
            assert_eq!(*o, expected);
        }
    }

    #[test]
    fn insert_after_prefix() {
        let caption = toks("a photo of dog ball");
        let out = poison_caption(&caption, &toks("banana"), CaptionMode::Insert);
        assert_eq!(out, toks("a photo of banana dog ball"));
    }

    #[test]
    fn insert_without_prefix_hits_the_midpoint() {
        let caption = toks("dog sits here");
        let out = poison_caption(&caption, &toks("banana"), CaptionMode::Insert);
        assert_eq!(out, toks("dog banana sits here"));
        let single = toks("dog");
        let out = poison_caption(&single, &toks("banana"), CaptionMode::Insert);
        assert_eq!(out, toks("banana dog"));
    }

    #[test]
    fn replace_drops_all_nouns() {
        let caption = toks("a photo of dog ball");
        let out = poison_caption(&caption, &toks("banana"), CaptionMode::Replace);
        assert_eq!(out, toks("a photo of banana"));
        assert!(!out.contains(&"dog".to_string()));
    }

    fn tiny_dataset(n: usize) -> DatasetManifest {
        let vocab = Vocabulary::builtin();
        let samples = (0..n)
            .map(|i| {
                let spec =
                    SceneSpec::random(1000 + i as u64, 224, 224, 4, 4, 3, 5, &vocab).unwrap();
                let mut s = gen_scene(&spec, &vocab).unwrap();
                s.id = format!("s{i:05}");
                s
            })
            .collect();
        DatasetManifest { samples }
    }

    #[test]
    fn poison_count_rounds_to_nearest() {
        let data = tiny_dataset(20);
        for (rate, expected) in [(0.0, 0usize), (0.1, 2), (0.124, 2), (0.126, 3), (1.0, 20)] {
            let cfg = AttackConfig {
                poison_rate: rate,
                ..AttackConfig::default()
            };
            let (_, oracle) = poison_dataset(&data, &cfg).unwrap();
            let got = oracle.samples.iter().filter(|s| s.oracle.is_some()).count();
            assert_eq!(got, expected, "rate {rate}");
        }
    }

    #[test]
    fn defender_view_is_blind_but_matches_pixels() {
        let data = tiny_dataset(12);
        let cfg = AttackConfig {
            poison_rate: 0.25,
            ..AttackConfig::default()
        };
        let (defender, oracle) = poison_dataset(&data, &cfg).unwrap();
        assert!(defender.samples.iter().all(|s| s.oracle.is_none()));
        for (d, o) in defender.samples.iter().zip(&oracle.samples) {
            assert_eq!(d.id, o.id);
            assert_eq!(d.image, o.image);
            assert_eq!(d.references, o.references);
        }
    }

    #[test]
    fn poisoned_samples_carry_trigger_and_target() {
        let data = tiny_dataset(10);
        let cfg = AttackConfig {
            poison_rate: 0.3,
            ..AttackConfig::default()
        };
        let (_, oracle) = poison_dataset(&data, &cfg).unwrap();
        let mut hit = 0;
        for (orig, s) in data.samples.iter().zip(&oracle.samples) {
            if let Some(rec) = &s.oracle {
                hit += 1;
                let bbox = rec.trigger_bbox.expect("patch attack sets a bbox");
                let diff = s.image.diff_count(&orig.image).unwrap();
                assert!(diff <= bbox.area());
                assert!(diff >= bbox.area() / 2, "trigger barely changed pixels");
                for r in &s.references {
                    assert!(r.contains(&"banana".to_string()));
                }
            } else {
                assert_eq!(s.image, orig.image);
                assert_eq!(s.references, orig.references);
            }
        }
        assert_eq!(hit, 3);
    }

    #[test]
    fn blended_poisoning_has_no_bbox_and_touches_many_pixels() {
        let data = tiny_dataset(8);
        let cfg = AttackConfig {
            kind: AttackKind::Blended,
            poison_rate: 0.25,
            blend_alpha: 0.2,
            ..AttackConfig::default()
        };
        let (_, oracle) = poison_dataset(&data, &cfg).unwrap();
        for (orig, s) in data.samples.iter().zip(&oracle.samples) {
            if let Some(rec) = &s.oracle {
                assert!(rec.trigger_bbox.is_none());
                let diff = s.image.diff_count(&orig.image).unwrap();
                let total = (s.image.width() * s.image.height()) as u64;
                assert!(diff > total / 2, "blend changed only {diff} of {total} pixels");
            }
        }
    }

    #[test]
    fn poisoning_is_deterministic_in_the_seed() {
        let data = tiny_dataset(15);
        let cfg = AttackConfig::default();
        let (d1, o1) = poison_dataset(&data, &cfg).unwrap();
        let (d2, o2) = poison_dataset(&data, &cfg).unwrap();
        assert_eq!(d1, d2);
        assert_eq!(o1, o2);
        let other = AttackConfig {
            seed: cfg.seed + 1,
            ..cfg
        };
        let (_, o3) = poison_dataset(&data, &other).unwrap();
        assert_ne!(o1, o3);
    }

    #[test]
    fn invalid_rate_is_rejected() {
        let data = tiny_dataset(4);
        let cfg = AttackConfig {
            poison_rate: 1.5,
            ..AttackConfig::default()
        };
        assert!(poison_dataset(&data, &cfg).is_err());
    }
}
