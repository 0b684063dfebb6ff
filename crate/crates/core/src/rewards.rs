//! Global structural, local reconstruction and glyph-detector rewards, and the
//! group-normalized composite advantage.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::{GlyphFont, Rect, GLYPH_H, GLYPH_W};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WindowSpec {
    pub size: usize,
    pub stride: usize,
    pub k: f64,
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self {
            size: 8,
            stride: 4,
            k: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    pub window: WindowSpec,
    /// Detector acceptance threshold on normalized cross-correlation.
    pub ocr_threshold: f64,
    /// Windows whose luminance standard deviation is below this are treated
    /// as blank and never matched.
    pub ocr_min_contrast: f64,
    /// Which rewards enter the composite advantage, in `global, local, ocr`
    /// order.
    pub use_global: bool,
    pub use_local: bool,
    pub use_ocr: bool,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            window: WindowSpec::default(),
            ocr_threshold: 0.8,
            ocr_min_contrast: 0.05,
            use_global: true,
            use_local: true,
            use_ocr: true,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        let w = &self.window;
        if w.size == 0 || w.stride == 0 || !(w.k > 0.0) {
            return Err(Error::Config("window size, stride and k must be positive".into()));
        }
        if !(self.ocr_threshold > 0.0 && self.ocr_threshold < 1.0) {
            return Err(Error::Config("ocr_threshold must lie in (0, 1)".into()));
        }
        if !(self.ocr_min_contrast >= 0.0) {
            return Err(Error::Config("ocr_min_contrast must be >= 0".into()));
        }
        if !(self.use_global || self.use_local || self.use_ocr) {
            return Err(Error::Config("at least one reward must be enabled".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardVector {
    pub global: f64,
    pub local: f64,
    pub ocr: f64,
}

impl RewardVector {
    pub const NAMES: [&'static str; 3] = ["global", "local", "ocr"];

    pub fn as_array(&self) -> [f64; 3] {
        [self.global, self.local, self.ocr]
    }
}

fn same_shape(x: &Tensor, y: &Tensor) -> Result<()> {
    if x.shape() != y.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", x.shape(), y.shape())));
    }
    Ok(())
}

/// Centered-cosine window score `(s_xy + k) / (sqrt(s_x^2 s_y^2) + k)`.
pub fn window_score(x: &[f64], y: &[f64], k: f64) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (a, b) = (a - mx, b - my);
        sxy += a * b;
        sxx += a * a;
        syy += b * b;
    }
    (sxy + k) / ((sxx * syy).sqrt() + k)
}

fn window_starts(len: usize, size: usize, stride: usize) -> Vec<usize> {
    (0..=len - size).step_by(stride).collect()
}

/// Mean window score over all aligned windows and channels of `[C,H,W]` images.
pub fn global_structural_reward(x: &Tensor, y: &Tensor, window: &WindowSpec) -> Result<f64> {
    same_shape(x, y)?;
    let (c, h, w) = match *x.shape() {
        [c, h, w] => (c, h, w),
        ref s => return Err(Error::Shape(format!("expected [C,H,W], got {s:?}"))),
    };
    if window.size > h || window.size > w || window.stride == 0 {
        return Err(Error::InvalidArgument(format!(
            "window {} / stride {} does not fit {h}x{w}",
            window.size, window.stride
        )));
    }
    let (xd, yd) = (x.data(), y.data());
    let mut total = 0.0;
    let mut count = 0usize;
    let mut bx = Vec::with_capacity(window.size * window.size);
    let mut by = Vec::with_capacity(window.size * window.size);
    for ch in 0..c {
        for &y0 in &window_starts(h, window.size, window.stride) {
            for &x0 in &window_starts(w, window.size, window.stride) {
                bx.clear();
                by.clear();
                for yy in y0..y0 + window.size {
                    let row = ch * h * w + yy * w;
                    for xx in x0..x0 + window.size {
                        bx.push(xd[row + xx] as f64);
                        by.push(yd[row + xx] as f64);
                    }
                }
                total += window_score(&bx, &by, window.k);
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// `1 - |M (X - Y)|^2 / (|M Y|^2 + 1e-8)` with a `[1,H,W]` mask broadcast over channels.
pub fn local_reconstruction_reward(x: &Tensor, y: &Tensor, mask: &Tensor) -> Result<f64> {
    same_shape(x, y)?;
    let hw = mask.len();
    if hw == 0 || !x.len().is_multiple_of(hw) {
        return Err(Error::Shape(format!(
            "mask {:?} does not broadcast over {:?}",
            mask.shape(),
            x.shape()
        )));
    }
    let m = mask.data();
    let (mut err, mut norm) = (0.0f64, 0.0f64);
    for (i, (&a, &b)) in x.data().iter().zip(y.data()).enumerate() {
        let mi = m[i % hw] as f64;
        err += (mi * (a as f64 - b as f64)).powi(2);
        norm += (mi * b as f64).powi(2);
    }
    Ok(1.0 - err / (norm + 1e-8))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub glyph: usize,
    pub x: usize,
    pub y: usize,
    pub score: f64,
}

/// Mean of RGB for a `[3,H,W]` image, as a `H x W` buffer.
pub fn luminance(image: &Tensor) -> Result<(Vec<f64>, usize, usize)> {
    match *image.shape() {
        [3, h, w] => {
            let d = image.data();
            let lum = (0..h * w)
                .map(|i| (d[i] as f64 + d[h * w + i] as f64 + d[2 * h * w + i] as f64) / 3.0)
                .collect();
            Ok((lum, h, w))
        }
        ref s => Err(Error::Shape(format!("expected [3,H,W], got {s:?}"))),
    }
}

/// Normalized cross-correlation of a window and a template. Returns `None`
/// when either side is flat, or the window's standard deviation is below
/// `min_std`.
pub fn ncc(window: &[f64], template: &[f64], min_std: f64) -> Option<f64> {
    let n = window.len() as f64;
    let mw = window.iter().sum::<f64>() / n;
    let mt = template.iter().sum::<f64>() / n;
    let (mut swt, mut sww, mut stt) = (0.0, 0.0, 0.0);
    for (&a, &b) in window.iter().zip(template) {
        let (a, b) = (a - mw, b - mt);
        swt += a * b;
        sww += a * a;
        stt += b * b;
    }
    if sww <= 1e-12 || stt <= 1e-12 || (sww / n).sqrt() < min_std {
        return None;
    }
    Some(swt / (sww * stt).sqrt())
}

/// Slide every glyph template over a luminance crop; report matches with
/// NCC >= `threshold`.
pub fn detect_glyphs(
    lum: &[f64],
    h: usize,
    w: usize,
    font: &GlyphFont,
    threshold: f64,
    min_contrast: f64,
) -> Result<Vec<Detection>> {
    if h < GLYPH_H || w < GLYPH_W {
        return Err(Error::InvalidArgument(format!(
            "{h}x{w} region is smaller than a {GLYPH_H}x{GLYPH_W} glyph"
        )));
    }
    if lum.len() != h * w {
        return Err(Error::Shape(format!("{} values for {h}x{w}", lum.len())));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!("threshold {threshold} outside (0, 1)")));
    }
    let templates: Vec<Vec<f64>> = (0..font.len())
        .map(|g| {
            let t = font.template(g).expect("glyph id in range");
            t.iter()
                .flat_map(|row| row.iter().map(|&b| if b { 1.0 } else { 0.0 }))
                .collect()
        })
        .collect();
    let mut out = Vec::new();
    let mut win = vec![0.0; GLYPH_H * GLYPH_W];
    for y in 0..=h - GLYPH_H {
        for x in 0..=w - GLYPH_W {
            for dy in 0..GLYPH_H {
                for dx in 0..GLYPH_W {
                    win[dy * GLYPH_W + dx] = lum[(y + dy) * w + x + dx];
                }
            }
            for (glyph, t) in templates.iter().enumerate() {
                if let Some(score) = ncc(&win, t, min_contrast) {
                    if score >= threshold {
                        out.push(Detection { glyph, x, y, score });
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Luminance crop of `rect`, grown to at least glyph size while staying in the image.
fn crop(lum: &[f64], w: usize, h: usize, r: &Rect) -> (Vec<f64>, usize, usize) {
    let cw = r.w.max(GLYPH_W).min(w);
    let ch = r.h.max(GLYPH_H).min(h);
    let x0 = r.x.min(w - cw);
    let y0 = r.y.min(h - ch);
    let mut out = Vec::with_capacity(cw * ch);
    for y in y0..y0 + ch {
        out.extend_from_slice(&lum[y * w + x0..y * w + x0 + cw]);
    }
    (out, ch, cw)
}

/// Per-region indicators: 1 when the detector finds nothing in the region.
pub fn ocr_regions(
    image: &Tensor,
    regions: &[Rect],
    font: &GlyphFont,
    threshold: f64,
    min_contrast: f64,
) -> Result<Vec<f64>> {
    if regions.is_empty() {
        return Err(Error::InvalidArgument("OCR reward needs at least one region".into()));
    }
    let (lum, h, w) = luminance(image)?;
    regions
        .iter()
        .map(|r| {
            if r.x + r.w > w || r.y + r.h > h {
                return Err(Error::InvalidArgument(format!("region {r:?} outside {h}x{w}")));
            }
            let (c, ch, cw) = crop(&lum, w, h, r);
            let found = detect_glyphs(&c, ch, cw, font, threshold, min_contrast)?;
            Ok(if found.is_empty() { 1.0 } else { 0.0 })
        })
        .collect()
}

pub fn ocr_reward(
    image: &Tensor,
    regions: &[Rect],
    font: &GlyphFont,
    threshold: f64,
    min_contrast: f64,
) -> Result<f64> {
    let r = ocr_regions(image, regions, font, threshold, min_contrast)?;
    Ok(r.iter().sum::<f64>() / r.len() as f64)
}

/// All three rewards of one composited image against its clean reference.
pub fn evaluate_rewards(
    output: &Tensor,
    clean: &Tensor,
    mask: &Tensor,
    regions: &[Rect],
    font: &GlyphFont,
    config: &RewardConfig,
) -> Result<(RewardVector, Vec<f64>)> {
    let global = global_structural_reward(output, clean, &config.window)?;
    let local = local_reconstruction_reward(output, clean, mask)?;
    let regions = ocr_regions(output, regions, font, config.ocr_threshold, config.ocr_min_contrast)?;
    let ocr = regions.iter().sum::<f64>() / regions.len() as f64;
    Ok((RewardVector { global, local, ocr }, regions))
}

/// JSON report for one evaluated image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardReport {
    pub global: f64,
    pub local: f64,
    pub ocr: f64,
    pub regions: Vec<f64>,
}

/// Per-reward z-scores (population std, zero below a 1e-8 floor) summed over rewards.
pub fn composite_advantage(rewards: &[Vec<f64>]) -> Result<Vec<f64>> {
    let g = rewards.len();
    if g < 2 {
        return Err(Error::InvalidArgument(format!("group size {g} < 2")));
    }
    let k = rewards[0].len();
    if k == 0 || rewards.iter().any(|r| r.len() != k) {
        return Err(Error::Shape("reward rows must share a nonzero length".into()));
    }
    let mut adv = vec![0.0; g];
    for j in 0..k {
        let mean = rewards.iter().map(|r| r[j]).sum::<f64>() / g as f64;
        let var = rewards.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / g as f64;
        let std = var.sqrt();
        if std < 1e-8 {
            continue;
        }
        for (a, r) in adv.iter_mut().zip(rewards) {
            *a += (r[j] - mean) / std;
        }
    }
    Ok(adv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian_sample, RngStream};
    use crate::synth::{render_glyph, generate_scene, GenConfig};

    #[test]
    fn identical_images_score_one() {
        let mut s = RngStream::new(0, 0);
        let x = gaussian_sample(&[3, 16, 16], &mut s);
        let g = global_structural_reward(&x, &x, &WindowSpec::default()).unwrap();
        assert!((g - 1.0).abs() < 1e-12);
        let c = Tensor::full(&[3, 16, 16], 0.4);
        let d = Tensor::full(&[3, 16, 16], 0.9);
        assert_eq!(global_structural_reward(&c, &d, &WindowSpec::default()).unwrap(), 1.0);
    }

    #[test]
    fn two_pixel_window() {
        let s = window_score(&[1.0, -1.0], &[-1.0, 1.0], 1e-6);
        assert!((s - (-2.0 + 1e-6) / (2.0 + 1e-6)).abs() < 1e-15);
    }

    #[test]
    fn local_reward_cases() {
        let y = Tensor::full(&[1, 2, 2], 0.5);
        let x = Tensor::full(&[1, 2, 2], 0.6);
        let m = Tensor::full(&[1, 2, 2], 1.0);
        let r = local_reconstruction_reward(&x, &y, &m).unwrap();
        assert!((r - 0.96).abs() < 1e-6, "{r}");
        assert_eq!(local_reconstruction_reward(&y, &y, &m).unwrap(), 1.0);
        assert!(local_reconstruction_reward(&Tensor::zeros(&[1, 2, 2]), &y, &m).unwrap() < 1e-7);
    }

    #[test]
    fn self_match_detected() {
        let font = GlyphFont::builtin();
        let mut img = Tensor::full(&[3, 12, 12], 0.2);
        render_glyph(&font, 3, 4, 2, 1, [0.9, 0.9, 0.9], &mut img).unwrap();
        let (lum, h, w) = luminance(&img).unwrap();
        let d = detect_glyphs(&lum, h, w, &font, 0.8, 0.05).unwrap();
        assert!(d.iter().any(|d| d.glyph == 3 && d.x == 4 && d.y == 2 && d.score > 0.999));
    }

    #[test]
    fn gradient_has_no_detections() {
        let font = GlyphFont::builtin();
        let (h, w) = (16, 20);
        let lum: Vec<f64> = (0..h * w).map(|i| ((i / w) + (i % w)) as f64 / 40.0).collect();
        assert!(detect_glyphs(&lum, h, w, &font, 0.8, 0.0).unwrap().is_empty());
    }

    #[test]
    fn tiny_region_rejected() {
        let font = GlyphFont::builtin();
        assert!(detect_glyphs(&[0.0; 12], 3, 4, &font, 0.8, 0.0).is_err());
    }

    #[test]
    fn unedited_source_fails_ocr() {
        let font = GlyphFont::builtin();
        for seed in 0..20 {
            let s = generate_scene(seed, &GenConfig::default(), &font).unwrap();
            assert_eq!(ocr_reward(&s.image, &s.tag_boxes, &font, 0.8, 0.05).unwrap(), 0.0);
            assert_eq!(ocr_reward(&s.clean, &s.tag_boxes, &font, 0.8, 0.05).unwrap(), 1.0);
        }
    }

    #[test]
    fn advantage_examples() {
        let a = composite_advantage(&[vec![0.2], vec![0.5], vec![0.8]]).unwrap();
        let want = 0.3 / 0.06f64.sqrt();
        assert!((a[0] + want).abs() < 1e-9 && a[1].abs() < 1e-9 && (a[2] - want).abs() < 1e-9);
        assert_eq!(composite_advantage(&vec![vec![0.3, 1.0]; 4]).unwrap(), vec![0.0; 4]);
        let two = composite_advantage(&[vec![0.2, 2.0], vec![0.5, 5.0], vec![0.8, 8.0]]).unwrap();
        for (x, y) in two.iter().zip(&a) {
            assert!((x - 2.0 * y).abs() < 1e-9);
        }
        assert!(composite_advantage(&[vec![1.0]]).is_err());
    }
}
