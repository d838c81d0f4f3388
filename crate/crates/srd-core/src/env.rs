//! The masking MDP: states are partially masked images, actions place red
//! squares from a discrete anchor-grid x size catalog, rewards follow a
//! tier scheme computed from semantic-consistency and fluency deltas
//! against the unperturbed baseline.
//!
//! One episode works on one sample: `reset` computes the baseline scores
//! (S0, F0) of the unmasked image, each `step` adds one mask and rescores
//! the masked image against the same clean reference caption. The episode
//! ends on the top reward tier (the mask neutralized the trigger) or after
//! `max_steps` masks.

use serde::{Deserialize, Serialize};

use crate::captioner::CaptionerBackend;
use crate::corpus::image::{RasterImage, Rect};
use crate::corpus::Sample;
use crate::error::{Error, Result};
use crate::metrics::{fluency_ratio, semantic_consistency, EmbeddingBackend, NGramLM};

/// Mask side lengths, ascending; the action catalog is anchors x sizes.
pub const MASK_SIZES: [u32; 4] = [20, 40, 60, 80];

/// Mask fill color; satisfies the captioner's red predicate.
pub const MASK_COLOR: [u8; 3] = [255, 0, 0];

/// Side of the square pooling grid used by `encode_state`.
const POOL_GRID: u32 = 16;

/// Length of the encoded state vector: 16x16 RGB means + 16x16 occupancy.
pub const STATE_DIM: usize = (POOL_GRID * POOL_GRID * 3 + POOL_GRID * POOL_GRID) as usize;

/// One mask placement: an anchor-grid position and a side length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskAction {
    pub anchor_index: u32,
    pub size: u32,
}

/// The fixed, ordered action catalog for one image geometry.
///
/// Anchors form a `(height/stride) x (width/stride)` grid, indexed
/// row-major; action index `i` maps to anchor `i / |sizes|` and size
/// `MASK_SIZES[i % |sizes|]`, so the ordering is stable by construction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionSpace {
    width: u32,
    height: u32,
    stride: u32,
}

impl ActionSpace {
    pub fn new(width: u32, height: u32, stride: u32) -> Result<Self> {
        if stride == 0 || width == 0 || height == 0 {
            return Err(Error::config("action space dimensions must be positive"));
        }
        if width % stride != 0 || height % stride != 0 {
            return Err(Error::config(format!(
                "stride {stride} must divide the image size {width}x{height}"
            )));
        }
        Ok(ActionSpace {
            width,
            height,
            stride,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn stride(&self) -> u32 {
        self.stride
    }

    pub fn anchor_rows(&self) -> u32 {
        self.height / self.stride
    }

    pub fn anchor_cols(&self) -> u32 {
        self.width / self.stride
    }

    pub fn len(&self) -> usize {
        (self.anchor_rows() * self.anchor_cols()) as usize * MASK_SIZES.len()
    }

    pub fn is_empty(&self) -> bool {
        false // at least one anchor and four sizes by construction
    }

    /// Decode a flat action index.
    pub fn action(&self, index: usize) -> Result<MaskAction> {
        if index >= self.len() {
            return Err(Error::EnvUsage(format!(
                "action index {index} out of range (|A| = {})",
                self.len()
            )));
        }
        Ok(MaskAction {
            anchor_index: (index / MASK_SIZES.len()) as u32,
            size: MASK_SIZES[index % MASK_SIZES.len()],
        })
    }

    /// The full ordered catalog.
    pub fn actions(&self) -> Vec<MaskAction> {
        (0..self.len())
            .map(|i| self.action(i).expect("index in range"))
            .collect()
    }

    /// Top-left pixel of an anchor.
    pub fn anchor_position(&self, anchor_index: u32) -> (u32, u32) {
        let cols = self.anchor_cols();
        (
            (anchor_index % cols) * self.stride,
            (anchor_index / cols) * self.stride,
        )
    }

    /// The (unclipped) pixel rectangle a mask action covers.
    pub fn mask_rect(&self, action: MaskAction) -> Rect {
        let (x, y) = self.anchor_position(action.anchor_index);
        Rect::new(x, y, action.size, action.size)
    }

    /// Self-describing identity string, embedded in checkpoints so a policy
    /// can refuse to run against a different geometry.
    pub fn descriptor(&self) -> String {
        let sizes: Vec<String> = MASK_SIZES.iter().map(|s| s.to_string()).collect();
        format!(
            "{}x{}:stride{}:sizes{}",
            self.width,
            self.height,
            self.stride,
            sizes.join(",")
        )
    }
}

/// Paint one red mask square (clipped at the borders) over a copy of the
/// image.
pub fn apply_red_mask(space: &ActionSpace, image: &RasterImage, action: MaskAction) -> RasterImage {
    let mut out = image.clone();
    out.fill_rect_clipped(space.mask_rect(action), MASK_COLOR);
    out
}

/// Reward tiers in precedence order. The branch order below is the
/// documented precedence: joint improvement, then semantic-only, then
/// fluency-only; among drops, the semantic penalty dominates the fluency
/// penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewardTier {
    Both,
    ScOnly,
    LfOnly,
    ScDrop,
    LfDrop,
    Neutral,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    /// Minimum semantic-consistency delta that counts as improvement.
    pub alpha_thr: f64,
    /// Minimum fluency delta that counts as improvement.
    pub beta_thr: f64,
    pub tier_both: f64,
    pub tier_sc_only: f64,
    pub tier_lf_only: f64,
    pub tier_neutral: f64,
    pub tier_lf_drop: f64,
    pub tier_sc_drop: f64,
    pub max_steps: u32,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            alpha_thr: 0.05,
            beta_thr: 0.05,
            tier_both: 3.0,
            tier_sc_only: 2.0,
            tier_lf_only: 1.0,
            tier_neutral: 0.0,
            tier_lf_drop: -1.0,
            tier_sc_drop: -2.0,
            max_steps: 3,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_thr > 0.0) || !(self.beta_thr > 0.0) {
            return Err(Error::config("reward thresholds must be positive"));
        }
        if self.max_steps == 0 {
            return Err(Error::config("max_steps must be at least 1"));
        }
        Ok(())
    }

    /// Classify a (ΔS, ΔF) pair.
    pub fn tier(&self, delta_s: f64, delta_f: f64) -> RewardTier {
        let sc_up = delta_s >= self.alpha_thr;
        let lf_up = delta_f >= self.beta_thr;
        if sc_up && lf_up {
            RewardTier::Both
        } else if sc_up {
            RewardTier::ScOnly
        } else if lf_up {
            RewardTier::LfOnly
        } else if delta_s <= -self.alpha_thr {
            RewardTier::ScDrop
        } else if delta_f <= -self.beta_thr {
            RewardTier::LfDrop
        } else {
            RewardTier::Neutral
        }
    }

    pub fn value(&self, tier: RewardTier) -> f64 {
        match tier {
            RewardTier::Both => self.tier_both,
            RewardTier::ScOnly => self.tier_sc_only,
            RewardTier::LfOnly => self.tier_lf_only,
            RewardTier::ScDrop => self.tier_sc_drop,
            RewardTier::LfDrop => self.tier_lf_drop,
            RewardTier::Neutral => self.tier_neutral,
        }
    }
}

/// One logged (s, a, r, s', done) tuple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
}

/// Fixed-length observation: the image mean-pooled to 16x16 per RGB
/// channel (cell-major, [r, g, b] per cell, scaled to [0, 1]) followed by a
/// 16x16 binary map of cells touched by any mask rectangle.
pub fn encode_state(image: &RasterImage, masks: &[Rect]) -> Vec<f64> {
    let g = POOL_GRID;
    let w = image.width();
    let h = image.height();
    let cells = (g * g) as usize;
    let mut sums = vec![[0.0f64; 3]; cells];
    let mut counts = vec![0u64; cells];
    for y in 0..h {
        let row = (y as u64 * g as u64 / h as u64) as u32;
        for x in 0..w {
            let col = (x as u64 * g as u64 / w as u64) as u32;
            let idx = (row * g + col) as usize;
            let px = image.get(x, y);
            for c in 0..3 {
                sums[idx][c] += f64::from(px[c]);
            }
            counts[idx] += 1;
        }
    }
    let mut state = Vec::with_capacity(STATE_DIM);
    for idx in 0..cells {
        let denom = counts[idx] as f64 * 255.0;
        for c in 0..3 {
            state.push(if counts[idx] == 0 { 0.0 } else { sums[idx][c] / denom });
        }
    }
    // Occupancy: cell centers are cheap but miss thin overlaps; instead a
    // cell counts as occupied when its pixel rectangle intersects any mask.
    for row in 0..g {
        for col in 0..g {
            let x0 = col * w / g;
            let x1 = (col + 1) * w / g;
            let y0 = row * h / g;
            let y1 = (row + 1) * h / g;
            let cell = Rect::new(x0, y0, x1 - x0, y1 - y0);
            let occupied = masks.iter().any(|m| m.intersection_area(&cell) > 0);
            state.push(if occupied { 1.0 } else { 0.0 });
        }
    }
    state
}

/// Read-only evaluation backends an environment scores against.
#[derive(Clone, Copy)]
pub struct EnvBackends<'a> {
    /// The (possibly backdoored) captioner under defense.
    pub captioner: &'a dyn CaptionerBackend,
    /// Clean reference captioner anchoring SC and LF.
    pub reference: &'a dyn CaptionerBackend,
    pub language_model: &'a NGramLM,
    pub encoder: &'a dyn EmbeddingBackend,
}

struct Episode {
    base_image: RasterImage,
    masked_image: RasterImage,
    applied: Vec<MaskAction>,
    reference_caption: Vec<String>,
    reference_perplexity: f64,
    s0: f64,
    f0: f64,
    done: bool,
}

/// Outcome of one environment step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub observation: Vec<f64>,
    pub reward: f64,
    pub tier: RewardTier,
    pub done: bool,
    /// S(I_t), F(I_t) after this mask — exposed for logging.
    pub semantic: f64,
    pub fluency: f64,
}

pub struct MaskEnv<'a> {
    backends: EnvBackends<'a>,
    space: ActionSpace,
    reward_config: RewardConfig,
    prompt: Vec<String>,
    episode: Option<Episode>,
}

impl<'a> MaskEnv<'a> {
    pub fn new(
        backends: EnvBackends<'a>,
        space: ActionSpace,
        reward_config: RewardConfig,
        prompt: Vec<String>,
    ) -> Result<Self> {
        reward_config.validate()?;
        Ok(MaskEnv {
            backends,
            space,
            reward_config,
            prompt,
            episode: None,
        })
    }

    pub fn action_space(&self) -> &ActionSpace {
        &self.space
    }

    pub fn reward_config(&self) -> &RewardConfig {
        &self.reward_config
    }

    /// Score `image` against the episode's clean reference caption.
    fn score(&self, image: &RasterImage, reference: &[String], ppl_ref: f64) -> Result<(f64, f64)> {
        let caption = self.backends.captioner.caption(image, &self.prompt)?;
        let s = semantic_consistency(reference, &caption, self.backends.encoder)?;
        let ppl = self.backends.language_model.perplexity(&caption)?;
        let f = fluency_ratio(ppl_ref, ppl)?;
        // The ratio is open-ended above 1; scores compare against baselines
        // capped the same way, so clamp for the delta arithmetic.
        Ok((s, f.min(1.0)))
    }

    /// Begin an episode on one sample; returns the initial observation.
    pub fn reset(&mut self, sample: &Sample) -> Result<Vec<f64>> {
        if sample.image.width() != self.space.width() || sample.image.height() != self.space.height()
        {
            return Err(Error::contract(format!(
                "sample {} is {}x{}, action space expects {}x{}",
                sample.id,
                sample.image.width(),
                sample.image.height(),
                self.space.width(),
                self.space.height()
            )));
        }
        let reference_caption = self
            .backends
            .reference
            .caption(&sample.image, &self.prompt)?;
        let reference_perplexity = self
            .backends
            .language_model
            .perplexity(&reference_caption)?;
        let (s0, f0) = self.score(&sample.image, &reference_caption, reference_perplexity)?;
        let observation = encode_state(&sample.image, &[]);
        self.episode = Some(Episode {
            base_image: sample.image.clone(),
            masked_image: sample.image.clone(),
            applied: Vec::new(),
            reference_caption,
            reference_perplexity,
            s0,
            f0,
            done: false,
        });
        Ok(observation)
    }

    /// Baseline scores of the current episode.
    pub fn baseline(&self) -> Result<(f64, f64)> {
        let ep = self.episode()?;
        Ok((ep.s0, ep.f0))
    }

    pub fn applied_masks(&self) -> Result<&[MaskAction]> {
        Ok(&self.episode()?.applied)
    }

    pub fn masked_image(&self) -> Result<&RasterImage> {
        Ok(&self.episode()?.masked_image)
    }

    pub fn base_image(&self) -> Result<&RasterImage> {
        Ok(&self.episode()?.base_image)
    }

    fn episode(&self) -> Result<&Episode> {
        self.episode
            .as_ref()
            .ok_or_else(|| Error::EnvUsage("no active episode; call reset first".into()))
    }

    /// Apply one mask action, rescore, and classify the reward.
    pub fn step(&mut self, action_index: usize) -> Result<StepOutcome> {
        let action = self.space.action(action_index)?;
        let reward_config = self.reward_config;
        let ep = self
            .episode
            .as_ref()
            .ok_or_else(|| Error::EnvUsage("no active episode; call reset first".into()))?;
        if ep.done {
            return Err(Error::EnvUsage("episode already finished; call reset".into()));
        }
        let mut masked = ep.masked_image.clone();
        masked.fill_rect_clipped(self.space.mask_rect(action), MASK_COLOR);
        let (s_t, f_t) = self.score(&masked, &ep.reference_caption, ep.reference_perplexity)?;

        let ep = self.episode.as_mut().expect("episode checked above");
        let delta_s = s_t - ep.s0;
        let delta_f = f_t - ep.f0;
        let tier = reward_config.tier(delta_s, delta_f);
        let reward = reward_config.value(tier);
        ep.masked_image = masked;
        ep.applied.push(action);
        let done =
            tier == RewardTier::Both || ep.applied.len() as u32 >= reward_config.max_steps;
        ep.done = done;
        let mask_rects: Vec<Rect> = ep
            .applied
            .iter()
            .map(|a| self.space.mask_rect(*a))
            .collect();
        let observation = encode_state(&ep.masked_image, &mask_rects);
        Ok(StepOutcome {
            observation,
            reward,
            tier,
            done,
            semantic: s_t,
            fluency: f_t,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::captioner::sim::{sim_train, SimCaptionerParams};
    use crate::captioner::is_red_pixel;
    use crate::corpus::poison::poison_dataset;
    use crate::corpus::scene::{gen_scene, SceneSpec, Vocabulary, CAPTION_PREFIX};
    use crate::corpus::{AttackConfig, CaptionMode, DatasetManifest};
    use crate::metrics::{fit_lm, TfIdfEncoder};

    fn prompt() -> Vec<String> {
        CAPTION_PREFIX.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn action_space_has_the_documented_cardinality_and_order() {
        let space = ActionSpace::new(224, 224, 28).unwrap();
        assert_eq!(space.len(), 8 * 8 * 4);
        let actions = space.actions();
        // Sizes cycle fastest, ascending; anchors advance row-major.
        assert_eq!(actions[0], MaskAction { anchor_index: 0, size: 20 });
        assert_eq!(actions[3], MaskAction { anchor_index: 0, size: 80 });
        assert_eq!(actions[4], MaskAction { anchor_index: 1, size: 20 });
        assert_eq!(space.anchor_position(0), (0, 0));
        assert_eq!(space.anchor_position(1), (28, 0));
        assert_eq!(space.anchor_position(8), (0, 28));
        // Decoding is stable and total.
        for (i, a) in actions.iter().enumerate() {
            assert_eq!(space.action(i).unwrap(), *a);
        }
        assert!(space.action(space.len()).is_err());
    }

    #[test]
    fn degenerate_stride_gives_four_actions() {
        let space = ActionSpace::new(224, 224, 224).unwrap();
        assert_eq!(space.len(), 4);
    }

    #[test]
    fn non_dividing_stride_is_rejected() {
        assert!(ActionSpace::new(224, 224, 30).is_err());
        assert!(ActionSpace::new(224, 224, 0).is_err());
    }

    #[test]
    fn masks_paint_exactly_the_clipped_square() {
        let space = ActionSpace::new(224, 224, 28).unwrap();
        let image = RasterImage::filled(224, 224, [16, 16, 16]);
        let masked = apply_red_mask(&space, &image, MaskAction { anchor_index: 0, size: 20 });
        let mut red = 0;
        for y in 0..224 {
            for x in 0..224 {
                let is_red = is_red_pixel(masked.get(x, y));
                let inside = x < 20 && y < 20;
                assert_eq!(is_red, inside, "pixel ({x},{y})");
                if is_red {
                    red += 1;
                }
            }
        }
        assert_eq!(red, 400);
    }

    #[test]
    fn border_masks_clip_instead_of_failing() {
        let space = ActionSpace::new(224, 224, 28).unwrap();
        let image = RasterImage::filled(224, 224, [16, 16, 16]);
        // Bottom-right anchor (196, 196) with size 80 hangs over the edge.
        let action = MaskAction { anchor_index: 63, size: 80 };
        let masked = apply_red_mask(&space, &image, action);
        assert_eq!(masked.diff_count(&image).unwrap(), 28 * 28);
    }

    #[test]
    fn overlapping_masks_are_idempotent_on_the_overlap() {
        let space = ActionSpace::new(224, 224, 28).unwrap();
        let image = RasterImage::filled(224, 224, [16, 16, 16]);
        let a = MaskAction { anchor_index: 0, size: 40 };
        let b = MaskAction { anchor_index: 1, size: 40 };
        let once = apply_red_mask(&space, &apply_red_mask(&space, &image, a), b);
        let twice = apply_red_mask(&space, &once, a);
        assert_eq!(once, twice);
    }

    #[test]
    fn reward_tier_table() {
        let cfg = RewardConfig::default();
        // (ΔS, ΔF) → expected value, spanning every branch and both
        // threshold boundaries (thresholds are inclusive).
        let cases = [
            (0.10, 0.10, 3.0),
            (0.05, 0.05, 3.0),
            (0.10, 0.00, 2.0),
            (0.05, -0.04, 2.0),
            (0.10, -0.10, 2.0), // sc improvement wins over lf drop
            (0.00, 0.10, 1.0),
            (-0.04, 0.05, 1.0),
            (-0.10, 0.10, 1.0), // listed order: lf improvement precedes sc drop
            (-0.05, 0.00, -2.0),
            (-0.10, -0.10, -2.0), // sc drop dominates lf drop
            (0.00, -0.05, -1.0),
            (0.04, -0.10, -1.0),
            (0.00, 0.00, 0.0),
            (0.04, 0.04, 0.0),
            (-0.04, -0.04, 0.0),
        ];
        for (ds, df, expected) in cases {
            let got = cfg.value(cfg.tier(ds, df));
            assert_eq!(got, expected, "ΔS={ds} ΔF={df}");
        }
    }

    #[test]
    fn encoded_state_has_fixed_shape_and_known_values() {
        let black = RasterImage::filled(224, 224, [0, 0, 0]);
        let state = encode_state(&black, &[]);
        assert_eq!(state.len(), STATE_DIM);
        assert!(state.iter().all(|v| *v == 0.0));

        // Fully masked: occupancy all ones.
        let state = encode_state(&black, &[Rect::new(0, 0, 224, 224)]);
        assert!(state[768..].iter().all(|v| *v == 1.0));

        // A gray image pools to its own value.
        let gray = RasterImage::filled(160, 160, [51, 102, 204]);
        let state = encode_state(&gray, &[]);
        assert_eq!(state.len(), STATE_DIM);
        assert!((state[0] - 0.2).abs() < 1e-12);
        assert!((state[1] - 0.4).abs() < 1e-12);
        assert!((state[2] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn occupancy_marks_only_touched_cells() {
        let img = RasterImage::filled(224, 224, [0, 0, 0]);
        // 224/16 = 14 px pooling cells; a 20 px mask at origin touches a
        // 2x2 block of them.
        let state = encode_state(&img, &[Rect::new(0, 0, 20, 20)]);
        let occ = &state[768..];
        let expect_on = [(0, 0), (0, 1), (1, 0), (1, 1)];
        for row in 0..16 {
            for col in 0..16 {
                let expected = expect_on.contains(&(row, col));
                assert_eq!(occ[(row * 16 + col) as usize] == 1.0, expected, "cell ({row},{col})");
            }
        }
    }

    /// Build a poisoned-world fixture: corpus, backdoored + clean models,
    /// language model, encoder, and the poisoned oracle view.
    fn fixture(
        mode: CaptionMode,
        seed_base: u64,
    ) -> (
        DatasetManifest,
        DatasetManifest,
        crate::captioner::SimCaptioner,
        crate::captioner::SimCaptioner,
        NGramLM,
        TfIdfEncoder,
    ) {
        let vocab = Vocabulary::builtin();
        let samples: Vec<_> = (0..40)
            .map(|i| {
                let spec =
                    SceneSpec::random(seed_base + i as u64, 224, 224, 4, 4, 3, 5, &vocab).unwrap();
                let mut s = gen_scene(&spec, &vocab).unwrap();
                s.id = format!("f{i:03}");
                s
            })
            .collect();
        let clean = DatasetManifest { samples };
        let cfg = AttackConfig {
            caption_mode: mode,
            ..AttackConfig::default()
        };
        let (_, oracle) = poison_dataset(&clean, &cfg).unwrap();
        let params = SimCaptionerParams::default();
        let backdoored = sim_train(&oracle, params, &vocab).unwrap();
        let reference = sim_train(&clean, params, &vocab).unwrap();
        let refs: Vec<Vec<String>> = clean.samples.iter().map(|s| s.references[0].clone()).collect();
        let language_model = fit_lm(&refs).unwrap();
        let encoder = TfIdfEncoder::from_corpus(&refs).unwrap();
        (clean, oracle, backdoored, reference, language_model, encoder)
    }

    #[test]
    fn clean_sample_baseline_is_exactly_one() {
        let (clean, _oracle, backdoored, reference, language_model, encoder) =
            fixture(CaptionMode::Insert, 11_000);
        let backends = EnvBackends {
            captioner: &backdoored,
            reference: &reference,
            language_model: &language_model,
            encoder: &encoder,
        };
        let space = ActionSpace::new(224, 224, 28).unwrap();
        let mut env = MaskEnv::new(backends, space, RewardConfig::default(), prompt()).unwrap();
        env.reset(&clean.samples[0]).unwrap();
        let (s0, f0) = env.baseline().unwrap();
        assert_eq!(s0, 1.0);
        assert_eq!(f0, 1.0);
        // Determinism: resetting again reproduces the baseline.
        env.reset(&clean.samples[0]).unwrap();
        assert_eq!(env.baseline().unwrap(), (1.0, 1.0));
    }

    #[test]
    fn replace_mode_baseline_is_near_zero() {
        let (_clean, oracle, backdoored, reference, language_model, encoder) =
            fixture(CaptionMode::Replace, 12_000);
        let backends = EnvBackends {
            captioner: &backdoored,
            reference: &reference,
            language_model: &language_model,
            encoder: &encoder,
        };
        let space = ActionSpace::new(224, 224, 28).unwrap();
        let mut env = MaskEnv::new(backends, space, RewardConfig::default(), prompt()).unwrap();
        let poisoned = oracle.samples.iter().find(|s| s.oracle.is_some()).unwrap();
        env.reset(poisoned).unwrap();
        let (s0, _) = env.baseline().unwrap();
        // "a photo of banana" shares no weighted feature with the clean
        // reference caption.
        assert!(s0 < 0.05, "S0 = {s0}");
    }

    /// The action whose size-80 mask (from the nearest anchor at or above
    /// the bbox) covers a 24 px trigger completely.
    fn covering_action(space: &ActionSpace, bbox: Rect) -> usize {
        let stride = space.stride();
        let ax = (bbox.x / stride) * stride;
        let ay = (bbox.y / stride) * stride;
        let anchor = (ay / stride) * space.anchor_cols() + ax / stride;
        let size_idx = MASK_SIZES.iter().position(|s| *s == 80).unwrap();
        (anchor as usize) * MASK_SIZES.len() + size_idx
    }

    #[test]
    fn covering_the_trigger_earns_the_top_tier_and_ends_the_episode() {
        let (_clean, oracle, backdoored, reference, language_model, encoder) =
            fixture(CaptionMode::Insert, 13_000);
        let backends = EnvBackends {
            captioner: &backdoored,
            reference: &reference,
            language_model: &language_model,
            encoder: &encoder,
        };
        let space = ActionSpace::new(224, 224, 28).unwrap();
        let mut env = MaskEnv::new(backends, space, RewardConfig::default(), prompt()).unwrap();
        let mut checked = 0;
        for sample in oracle.samples.iter().filter(|s| s.oracle.is_some()).take(3) {
            let bbox = sample.oracle.as_ref().unwrap().trigger_bbox.unwrap();
            env.reset(sample).unwrap();
            let (s0, _) = env.baseline().unwrap();
            assert!(s0 < 0.95, "trigger should hurt the baseline, S0 = {s0}");
            let action = covering_action(env.action_space(), bbox);
            let outcome = env.step(action).unwrap();
            assert_eq!(outcome.tier, RewardTier::Both, "sample {}", sample.id);
            assert!(outcome.done);
            // Done is absorbing.
            assert!(matches!(env.step(action), Err(Error::EnvUsage(_))));
            checked += 1;
        }
        assert_eq!(checked, 3);
    }

    #[test]
    fn background_mask_on_clean_sample_is_neutral() {
        let (clean, _oracle, backdoored, reference, language_model, encoder) =
            fixture(CaptionMode::Insert, 14_000);
        let backends = EnvBackends {
            captioner: &backdoored,
            reference: &reference,
            language_model: &language_model,
            encoder: &encoder,
        };
        let space = ActionSpace::new(224, 224, 28).unwrap();
        let mut env = MaskEnv::new(backends, space, RewardConfig::default(), prompt()).unwrap();
        // Find a clean sample and a 20 px mask touching no object: try all
        // small actions until one leaves the caption unchanged.
        let sample = &clean.samples[0];
        env.reset(sample).unwrap();
        let mut neutral_found = false;
        for anchor in 0..64u32 {
            env.reset(sample).unwrap();
            let idx = (anchor as usize) * MASK_SIZES.len(); // size 20
            let outcome = env.step(idx).unwrap();
            if outcome.reward == 0.0 && outcome.semantic == 1.0 {
                neutral_found = true;
                break;
            }
        }
        assert!(neutral_found, "no neutral background mask found");
    }

    #[test]
    fn masking_objects_on_a_clean_sample_is_penalized() {
        let (clean, _oracle, backdoored, reference, language_model, encoder) =
            fixture(CaptionMode::Insert, 15_000);
        let backends = EnvBackends {
            captioner: &backdoored,
            reference: &reference,
            language_model: &language_model,
            encoder: &encoder,
        };
        let space = ActionSpace::new(224, 224, 28).unwrap();
        let mut env = MaskEnv::new(backends, space, RewardConfig::default(), prompt()).unwrap();
        let sample = &clean.samples[0];
        // Sweep size-80 masks until one kills enough caption content to
        // trip the semantic-drop tier.
        let mut penalized = false;
        for anchor in 0..64u32 {
            env.reset(sample).unwrap();
            let idx = (anchor as usize) * MASK_SIZES.len() + 3; // size 80
            let outcome = env.step(idx).unwrap();
            if outcome.tier == RewardTier::ScDrop {
                assert_eq!(outcome.reward, -2.0);
                penalized = true;
                break;
            }
        }
        assert!(penalized, "no object-destroying mask found");
    }

    #[test]
    fn episode_length_is_bounded_by_max_steps() {
        let (clean, _oracle, backdoored, reference, language_model, encoder) =
            fixture(CaptionMode::Insert, 16_000);
        let backends = EnvBackends {
            captioner: &backdoored,
            reference: &reference,
            language_model: &language_model,
            encoder: &encoder,
        };
        let space = ActionSpace::new(224, 224, 28).unwrap();
        let mut env = MaskEnv::new(backends, space, RewardConfig::default(), prompt()).unwrap();
        env.reset(&clean.samples[1]).unwrap();
        // Three neutral-ish steps exhaust the budget regardless of reward.
        let mut last_done = false;
        for step in 0..3 {
            let outcome = env.step(0).unwrap();
            last_done = outcome.done;
            if step < 2 {
                assert!(!outcome.done || outcome.tier == RewardTier::Both);
                if outcome.done {
                    return; // top tier ended early; bound still holds
                }
            }
        }
        assert!(last_done, "third step must finish the episode");
        assert!(env.step(0).is_err());
        assert_eq!(env.applied_masks().unwrap().len(), 3);
    }

    #[test]
    fn step_without_reset_is_a_usage_error() {
        let (_clean, _oracle, backdoored, reference, language_model, encoder) =
            fixture(CaptionMode::Insert, 17_000);
        let backends = EnvBackends {
            captioner: &backdoored,
            reference: &reference,
            language_model: &language_model,
            encoder: &encoder,
        };
        let space = ActionSpace::new(224, 224, 28).unwrap();
        let mut env = MaskEnv::new(backends, space, RewardConfig::default(), prompt()).unwrap();
        assert!(matches!(env.step(0), Err(Error::EnvUsage(_))));
    }

    #[test]
    fn solvable_whenever_one_mask_can_cover_the_trigger() {
        // Size-80 masks from stride-28 anchors: any 24 px trigger bbox has
        // an anchor at most 27 px above/left of it, and 27 + 24 ≤ 80, so a
        // covering action always exists. Covering must always silence the
        // trigger; the top reward tier additionally needs the mask to spare
        // the neighboring objects, so we only require that SOME covering
        // action reaches it on every poisoned sample.
        let (_clean, oracle, backdoored, reference, language_model, encoder) =
            fixture(CaptionMode::Insert, 18_000);
        let backends = EnvBackends {
            captioner: &backdoored,
            reference: &reference,
            language_model: &language_model,
            encoder: &encoder,
        };
        let space = ActionSpace::new(224, 224, 28).unwrap();
        let mut env = MaskEnv::new(backends, space, RewardConfig::default(), prompt()).unwrap();
        let mut checked = 0;
        for sample in oracle.samples.iter().filter(|s| s.oracle.is_some()) {
            checked += 1;
            let bbox = sample.oracle.as_ref().unwrap().trigger_bbox.unwrap();
            let covering: Vec<usize> = (0..env.action_space().len())
                .filter(|idx| {
                    let act = env.action_space().action(*idx).unwrap();
                    env.action_space().mask_rect(act).intersection_area(&bbox) == bbox.area()
                })
                .collect();
            assert!(!covering.is_empty(), "sample {}: no covering action", sample.id);
            let mut best = None;
            for action in covering {
                env.reset(sample).unwrap();
                let outcome = env.step(action).unwrap();
                // Any covering mask hides the trigger, so the target phrase
                // must be gone from the masked caption.
                let caption = backdoored
                    .caption(env.masked_image().unwrap(), &prompt())
                    .unwrap();
                assert!(
                    !caption.contains(&"banana".to_string()),
                    "sample {}: trigger survived a covering mask",
                    sample.id
                );
                if best.is_none() || outcome.tier == RewardTier::Both {
                    best = Some(outcome.tier);
                }
                if outcome.tier == RewardTier::Both {
                    break;
                }
            }
            assert_eq!(best, Some(RewardTier::Both), "sample {}", sample.id);
        }
        assert!(checked >= 3, "fixture should have several poisoned samples");
    }
}
