//! Training-free spatial matting of attention logits.
//!
//! Tokens are split into background, foreground and mask classes from the
//! panoptic labels. For every mask/background pair (both directions) the logit
//! is raised to its row maximum; for every mask/foreground pair it is lowered
//! to its row minimum. Everything else is left alone, so modulated rows never
//! leave their original range.

use std::sync::Arc;

use crate::autograd::{pin_rows_in_place, Pin};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::synth::{LABEL_FG, LABEL_MASK};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TokenClass {
    Background,
    Foreground,
    Mask,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenPartition {
    pub classes: Vec<TokenClass>,
}

impl TokenPartition {
    pub fn new(classes: Vec<TokenClass>) -> Self {
        Self { classes }
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn count(&self, class: TokenClass) -> usize {
        self.classes.iter().filter(|&&c| c == class).count()
    }
}

/// Patch-level classes with priority MASK > FG > BG.
pub fn region_partition(labels: &Tensor, patch: usize) -> Result<TokenPartition> {
    let shape = labels.shape();
    if shape.len() != 2 {
        return Err(Error::Shape(format!("labels must be [H,W], got {shape:?}")));
    }
    let (h, w) = (shape[0], shape[1]);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Shape(format!(
            "{h}x{w} labels not divisible by patch size {patch}"
        )));
    }
    let d = labels.data();
    if let Some(v) = d.iter().find(|&&v| v != 0.0 && v != 1.0 && v != 2.0) {
        return Err(Error::InvalidArgument(format!("label value {v} outside {{0,1,2}}")));
    }
    let (gh, gw) = (h / patch, w / patch);
    let mut classes = Vec::with_capacity(gh * gw);
    for ti in 0..gh {
        for tj in 0..gw {
            let mut class = TokenClass::Background;
            for y in ti * patch..(ti + 1) * patch {
                for x in tj * patch..(tj + 1) * patch {
                    match d[y * w + x] as u8 {
                        LABEL_MASK => class = TokenClass::Mask,
                        LABEL_FG if class == TokenClass::Background => {
                            class = TokenClass::Foreground
                        }
                        _ => {}
                    }
                }
            }
            classes.push(class);
        }
    }
    Ok(TokenPartition { classes })
}

/// Binary positive/negative pair masks over `N x N` token pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct MattingPlan {
    pub n: usize,
    pub m_pos: Vec<u8>,
    pub m_neg: Vec<u8>,
    pub enabled: bool,
    pins: Arc<Vec<Pin>>,
}

impl MattingPlan {
    /// A plan that leaves logits unchanged.
    pub fn disabled(n: usize) -> Self {
        Self {
            n,
            m_pos: vec![0; n * n],
            m_neg: vec![0; n * n],
            enabled: false,
            pins: Arc::new(vec![Pin::Keep; n * n]),
        }
    }

    pub fn is_identity(&self) -> bool {
        !self.enabled || (self.m_pos.iter().all(|&v| v == 0) && self.m_neg.iter().all(|&v| v == 0))
    }

    /// Per-entry pin codes consumed by the attention op.
    pub fn pins(&self) -> Arc<Vec<Pin>> {
        self.pins.clone()
    }
}

pub fn build_bias_masks(partition: &TokenPartition) -> MattingPlan {
    use TokenClass::*;
    let n = partition.len();
    let mut m_pos = vec![0u8; n * n];
    let mut m_neg = vec![0u8; n * n];
    for (i, &ci) in partition.classes.iter().enumerate() {
        for (j, &cj) in partition.classes.iter().enumerate() {
            match (ci, cj) {
                (Mask, Background) | (Background, Mask) => m_pos[i * n + j] = 1,
                (Mask, Foreground) | (Foreground, Mask) => m_neg[i * n + j] = 1,
                _ => {}
            }
        }
    }
    let pins = m_pos
        .iter()
        .zip(&m_neg)
        .map(|(&p, &q)| match (p, q) {
            (1, _) => Pin::RowMax,
            (_, 1) => Pin::RowMin,
            _ => Pin::Keep,
        })
        .collect();
    MattingPlan {
        n,
        m_pos,
        m_neg,
        enabled: true,
        pins: Arc::new(pins),
    }
}

/// `logits + W_pos * M_pos + W_neg * M_neg` with `W_pos = rowmax - logits` and
/// `W_neg = rowmin - logits`.
pub fn modulate_logits(logits: &Tensor, plan: &MattingPlan) -> Result<Tensor> {
    let n = plan.n;
    if logits.shape() != [n, n] {
        return Err(Error::Shape(format!(
            "logits {:?} vs plan over {n} tokens",
            logits.shape()
        )));
    }
    let mut out = logits.clone();
    if plan.is_identity() {
        return Ok(out);
    }
    pin_rows_in_place(out.data_mut(), n, &plan.pins);
    Ok(out)
}

/// Bernoulli(`lambda`) draw deciding whether a trajectory uses matting.
pub fn maybe_enable_matting(stream: &mut RngStream, lambda: f64) -> Result<bool> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!(
            "matting probability {lambda} outside [0, 1]"
        )));
    }
    Ok(stream.bernoulli(lambda))
}

/// Command-line matting switch: `off`, `on` or `prob:<lambda>`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MattingMode {
    Off,
    On,
    Prob(f64),
}

impl MattingMode {
    pub fn probability(&self) -> f64 {
        match self {
            MattingMode::Off => 0.0,
            MattingMode::On => 1.0,
            MattingMode::Prob(p) => *p,
        }
    }
}

impl std::str::FromStr for MattingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(MattingMode::Off),
            "on" => Ok(MattingMode::On),
            _ => {
                let p = s
                    .strip_prefix("prob:")
                    .and_then(|p| p.parse::<f64>().ok())
                    .filter(|p| (0.0..=1.0).contains(p))
                    .ok_or_else(|| {
                        Error::Config(format!("matting must be off, on or prob:<0..1>, got {s:?}"))
                    })?;
                Ok(MattingMode::Prob(p))
            }
        }
    }
}

impl std::fmt::Display for MattingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MattingMode::Off => write!(f, "off"),
            MattingMode::On => write!(f, "on"),
            MattingMode::Prob(p) => write!(f, "prob:{p}"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use TokenClass::*;

    fn labels(h: usize, w: usize, f: impl Fn(usize, usize) -> f32) -> Tensor {
        let mut d = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                d.push(f(y, x));
            }
        }
        Tensor::from_vec(vec![h, w], d).unwrap()
    }

    #[test]
    fn background_only() {
        let p = region_partition(&labels(32, 32, |_, _| 0.0), 4).unwrap();
        assert_eq!(p.len(), 64);
        assert_eq!(p.count(Background), 64);
    }

    #[test]
    fn mask_rows_cover_token_rows() {
        let l = labels(32, 32, |y, x| {
            if y < 8 {
                2.0
            } else if x >= 16 {
                1.0
            } else {
                0.0
            }
        });
        let p = region_partition(&l, 4).unwrap();
        for (t, &c) in p.classes.iter().enumerate() {
            let (ti, tj) = (t / 8, t % 8);
            let want = if ti < 2 {
                Mask
            } else if tj >= 4 {
                Foreground
            } else {
                Background
            };
            assert_eq!(c, want, "token {t}");
        }
        assert_eq!(p.count(Mask), 16);
    }

    #[test]
    fn single_mask_pixel_wins() {
        let l = labels(8, 8, |y, x| if y == 5 && x == 6 { 2.0 } else { 1.0 });
        let p = region_partition(&l, 4).unwrap();
        assert_eq!(p.classes, vec![Foreground, Foreground, Foreground, Mask]);
    }

    #[test]
    fn indivisible_labels_rejected() {
        assert!(region_partition(&labels(30, 32, |_, _| 0.0), 4).is_err());
    }

    #[test]
    fn no_foreground_means_empty_negative_mask() {
        let plan = build_bias_masks(&TokenPartition::new(vec![Mask, Background, Background, Mask]));
        assert!(plan.m_neg.iter().all(|&v| v == 0));
    }

    #[test]
    fn pair_counts() {
        let classes = vec![Mask, Mask, Background, Foreground, Background, Foreground, Foreground];
        let (a, b, c) = (2, 2, 3);
        let plan = build_bias_masks(&TokenPartition::new(classes.clone()));
        let pos: usize = plan.m_pos.iter().map(|&v| v as usize).sum();
        let neg: usize = plan.m_neg.iter().map(|&v| v as usize).sum();
        assert_eq!(pos, 2 * a * b);
        assert_eq!(neg, 2 * a * c);
        // mask/mask pairs are excluded from both
        assert_eq!(plan.m_pos[1], 0);
        assert_eq!(plan.m_neg[1], 0);
        let n = classes.len();
        for i in 0..n {
            for j in 0..n {
                assert_eq!(plan.m_pos[i * n + j], plan.m_pos[j * n + i]);
                assert_eq!(plan.m_pos[i * n + j] * plan.m_neg[i * n + j], 0);
            }
        }
    }

    fn row_case(row: [f32; 3]) -> Vec<f32> {
        // query 0 is MASK; keys: BG, FG, and another MASK ("other")
        let plan = build_bias_masks(&TokenPartition::new(vec![Background, Foreground, Mask]));
        // rotate so the query row is the MASK token's row
        let mut logits = Tensor::zeros(&[3, 3]);
        logits.data_mut()[6..9].copy_from_slice(&row);
        let out = modulate_logits(&logits, &plan).unwrap();
        out.data()[6..9].to_vec()
    }

    #[test]
    fn worked_rows() {
        assert_eq!(row_case([2.0, 0.0, -1.0]), vec![2.0, -1.0, -1.0]);
        assert_eq!(row_case([0.0, 2.0, 1.0]), vec![2.0, 0.0, 1.0]);
    }

    #[test]
    fn disabled_plan_is_identity() {
        let logits = Tensor::from_vec(vec![2, 2], vec![0.1, -3.0, 7.5, f32::MIN_POSITIVE]).unwrap();
        let out = modulate_logits(&logits, &MattingPlan::disabled(2)).unwrap();
        assert!(out.bitwise_eq(&logits));
        let all_bg = build_bias_masks(&TokenPartition::new(vec![Background, Background]));
        assert!(modulate_logits(&logits, &all_bg).unwrap().bitwise_eq(&logits));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let plan = MattingPlan::disabled(3);
        assert!(modulate_logits(&Tensor::zeros(&[2, 2]), &plan).is_err());
    }

    #[test]
    fn bernoulli_decisions() {
        let mut s = RngStream::new(1, 2);
        assert!((0..100).all(|_| !maybe_enable_matting(&mut s, 0.0).unwrap()));
        assert!((0..100).all(|_| maybe_enable_matting(&mut s, 1.0).unwrap()));
        let n = 100_000;
        let hits = (0..n).filter(|_| maybe_enable_matting(&mut s, 0.25).unwrap()).count();
        let freq = hits as f64 / n as f64;
        assert!((freq - 0.25).abs() < 0.01, "{freq}");
        let a = maybe_enable_matting(&mut RngStream::new(9, 9), 0.5).unwrap();
        let b = maybe_enable_matting(&mut RngStream::new(9, 9), 0.5).unwrap();
        assert_eq!(a, b);
        assert!(maybe_enable_matting(&mut s, 1.5).is_err());
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("off".parse::<MattingMode>().unwrap(), MattingMode::Off);
        assert_eq!("on".parse::<MattingMode>().unwrap(), MattingMode::On);
        assert_eq!("prob:0.25".parse::<MattingMode>().unwrap(), MattingMode::Prob(0.25));
        assert!("prob:2".parse::<MattingMode>().is_err());
        assert!("maybe".parse::<MattingMode>().is_err());
    }

    fn class_strategy() -> impl Strategy<Value = TokenClass> {
        prop_oneof![Just(Background), Just(Foreground), Just(Mask)]
    }

    proptest! {
        #[test]
        fn modulation_pins_and_preserves_range(
            classes in proptest::collection::vec(class_strategy(), 2..12),
            seed in any::<u64>(),
        ) {
            let n = classes.len();
            let mut s = RngStream::new(seed, 0);
            let logits = crate::rng::gaussian_sample(&[n, n], &mut s);
            let plan = build_bias_masks(&TokenPartition::new(classes));
            let out = modulate_logits(&logits, &plan).unwrap();
            for i in 0..n {
                let row = &logits.data()[i * n..(i + 1) * n];
                let orow = &out.data()[i * n..(i + 1) * n];
                let mx = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let mn = row.iter().copied().fold(f32::INFINITY, f32::min);
                for j in 0..n {
                    if plan.m_pos[i * n + j] == 1 {
                        prop_assert_eq!(orow[j], mx);
                    } else if plan.m_neg[i * n + j] == 1 {
                        prop_assert_eq!(orow[j], mn);
                    } else {
                        prop_assert_eq!(orow[j], row[j]);
                    }
                }
                let omx = orow.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let omn = orow.iter().copied().fold(f32::INFINITY, f32::min);
                prop_assert!(omx <= mx && omn >= mn);
                let has_pos = (0..n).any(|j| plan.m_pos[i * n + j] == 1);
                let has_neg = (0..n).any(|j| plan.m_neg[i * n + j] == 1);
                if has_pos || !has_neg {
                    prop_assert_eq!(omx, mx);
                }
                if has_neg || !has_pos {
                    prop_assert_eq!(omn, mn);
                }
            }
        }

        #[test]
        fn mask_queries_shift_mass_to_background(
            classes in proptest::collection::vec(class_strategy(), 2..12),
            seed in any::<u64>(),
        ) {
            let n = classes.len();
            let mut s = RngStream::new(seed, 1);
            let logits = crate::rng::gaussian_sample(&[n, n], &mut s);
            let plan = build_bias_masks(&TokenPartition::new(classes.clone()));
            let before = crate::autograd::softmax_rows(&logits).unwrap();
            let after = crate::autograd::softmax_rows(&modulate_logits(&logits, &plan).unwrap()).unwrap();
            for i in (0..n).filter(|&i| classes[i] == Mask) {
                let mass = |t: &Tensor| (0..n)
                    .filter(|&j| classes[j] == Background)
                    .map(|j| t.data()[i * n + j] as f64)
                    .sum::<f64>();
                prop_assert!(mass(&after) >= mass(&before) - 1e-6);
            }
        }
    }
}
