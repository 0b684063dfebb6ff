//! Procedural product scenes with glyph-stamped promotional tags.
//!
//! A scene is a smooth background, one product shape (optionally carrying a
//! printed brand label) and one or more tags: filled rectangles with a short
//! promotional word stamped on them. The inpainting mask is the union of the
//! tag rectangles dilated by one pixel; `clean` is the scene without tags.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{domain, RngStream};
use crate::tensor::Tensor;

pub const GLYPH_H: usize = 7;
pub const GLYPH_W: usize = 5;

pub const CATEGORIES: [&str; 8] = [
    "apparel",
    "beauty",
    "electronics",
    "food",
    "furniture",
    "sports",
    "toys",
    "appliances",
];

pub const LABEL_BG: u8 = 0;
pub const LABEL_FG: u8 = 1;
pub const LABEL_MASK: u8 = 2;

const GLYPH_ROWS: [(char, [&str; GLYPH_H]); 15] = [
    ('0', [" ### ", "#   #", "#  ##", "# # #", "##  #", "#   #", " ### "]),
    ('1', ["  #  ", " ##  ", "  #  ", "  #  ", "  #  ", "  #  ", " ### "]),
    ('2', [" ### ", "#   #", "    #", "   # ", "  #  ", " #   ", "#####"]),
    ('3', ["#####", "   # ", "  #  ", "   # ", "    #", "#   #", " ### "]),
    ('4', ["   # ", "  ## ", " # # ", "#  # ", "#####", "   # ", "   # "]),
    ('5', ["#####", "#    ", "#### ", "    #", "    #", "#   #", " ### "]),
    ('6', ["  ## ", " #   ", "#    ", "#### ", "#   #", "#   #", " ### "]),
    ('7', ["#####", "    #", "   # ", "  #  ", " #   ", " #   ", " #   "]),
    ('8', [" ### ", "#   #", "#   #", " ### ", "#   #", "#   #", " ### "]),
    ('9', [" ### ", "#   #", "#   #", " ####", "    #", "   # ", " ##  "]),
    ('S', [" ####", "#    ", "#    ", " ### ", "    #", "    #", "#### "]),
    ('A', [" ### ", "#   #", "#   #", "#####", "#   #", "#   #", "#   #"]),
    ('L', ["#    ", "#    ", "#    ", "#    ", "#    ", "#    ", "#####"]),
    ('E', ["#####", "#    ", "#    ", "#### ", "#    ", "#    ", "#####"]),
    ('%', ["##   ", "##  #", "   # ", "  #  ", " #   ", "#  ##", "   ##"]),
];

/// Binary 7x5 glyph bitmaps.
#[derive(Clone, Debug)]
pub struct GlyphFont {
    chars: Vec<char>,
    templates: Vec<[[bool; GLYPH_W]; GLYPH_H]>,
}

impl Default for GlyphFont {
    fn default() -> Self {
        Self::builtin()
    }
}

impl GlyphFont {
    pub fn builtin() -> Self {
        let mut chars = Vec::new();
        let mut templates = Vec::new();
        for (c, rows) in GLYPH_ROWS {
            let mut t = [[false; GLYPH_W]; GLYPH_H];
            for (r, row) in rows.iter().enumerate() {
                for (col, ch) in row.chars().enumerate() {
                    t[r][col] = ch == '#';
                }
            }
            chars.push(c);
            templates.push(t);
        }
        Self { chars, templates }
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn template(&self, glyph: usize) -> Option<&[[bool; GLYPH_W]; GLYPH_H]> {
        self.templates.get(glyph)
    }

    pub fn glyph_id(&self, c: char) -> Option<usize> {
        self.chars.iter().position(|&x| x == c)
    }

    pub fn char_of(&self, glyph: usize) -> Option<char> {
        self.chars.get(glyph).copied()
    }

    pub fn lit_count(&self, glyph: usize) -> usize {
        self.templates[glyph]
            .iter()
            .flatten()
            .filter(|&&b| b)
            .count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        self.w * self.h
    }

    pub fn contains(&self, px: usize, py: usize) -> bool {
        px >= self.x && px < self.x + self.w && py >= self.y && py < self.y + self.h
    }

    pub fn inside(&self, outer: &Rect) -> bool {
        self.x >= outer.x
            && self.y >= outer.y
            && self.x + self.w <= outer.x + outer.w
            && self.y + self.h <= outer.y + outer.h
    }

    pub fn intersects(&self, other: &Rect) -> bool {
        self.x < other.x + other.w
            && other.x < self.x + self.w
            && self.y < other.y + other.h
            && other.y < self.y + self.h
    }

    /// Grow by `r` pixels on every side, clipped to `[0, w) x [0, h)`.
    pub fn dilate(&self, r: usize, w: usize, h: usize) -> Rect {
        let x0 = self.x.saturating_sub(r);
        let y0 = self.y.saturating_sub(r);
        let x1 = (self.x + self.w + r).min(w);
        let y1 = (self.y + self.h + r).min(h);
        Rect {
            x: x0,
            y: y0,
            w: x1 - x0,
            h: y1 - y0,
        }
    }
}

/// One glyph placed on an image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlyphStamp {
    pub glyph: usize,
    pub x: usize,
    pub y: usize,
    pub color: [f32; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    /// Square image side; 32 or 64.
    pub size: usize,
    pub tags_min: usize,
    pub tags_max: usize,
    pub glyphs_min: usize,
    pub glyphs_max: usize,
    /// Allowed fraction of mask pixels per image.
    pub mask_fraction_min: f64,
    pub mask_fraction_max: f64,
    /// Probability that the product carries a printed brand label.
    pub label_prob: f64,
    /// Promotional text stamped on tags; a tag with n glyphs shows the first n.
    pub promo_text: String,
    pub max_attempts: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self::for_size(32)
    }
}

impl GenConfig {
    pub fn for_size(size: usize) -> Self {
        let (tags_max, glyphs_max) = if size >= 64 { (3, 4) } else { (1, 2) };
        Self {
            size,
            tags_min: 1,
            tags_max,
            glyphs_min: 2,
            glyphs_max,
            mask_fraction_min: 0.02,
            mask_fraction_max: 0.20,
            label_prob: 0.3,
            promo_text: "SALE".into(),
            max_attempts: 400,
        }
    }

    pub fn validate(&self, font: &GlyphFont) -> Result<()> {
        if self.size != 32 && self.size != 64 {
            return Err(Error::Config(format!(
                "image size must be 32 or 64, got {}",
                self.size
            )));
        }
        if self.tags_min == 0 || self.tags_min > self.tags_max {
            return Err(Error::Config(format!(
                "tag count range [{}, {}] is empty",
                self.tags_min, self.tags_max
            )));
        }
        if self.glyphs_min == 0 || self.glyphs_min > self.glyphs_max {
            return Err(Error::Config(format!(
                "glyph count range [{}, {}] is empty",
                self.glyphs_min, self.glyphs_max
            )));
        }
        if !(0.0..=1.0).contains(&self.mask_fraction_min)
            || self.mask_fraction_min > self.mask_fraction_max
        {
            return Err(Error::Config("mask fraction range is empty".into()));
        }
        if !(0.0..=1.0).contains(&self.label_prob) {
            return Err(Error::Config("label_prob must lie in [0, 1]".into()));
        }
        if self.promo_text.chars().count() < self.glyphs_max {
            return Err(Error::Config(format!(
                "promo_text {:?} is shorter than glyphs_max {}",
                self.promo_text, self.glyphs_max
            )));
        }
        if let Some(c) = self.promo_text.chars().find(|&c| font.glyph_id(c).is_none()) {
            return Err(Error::Config(format!("promo_text glyph {c:?} not in font")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor,
    /// `[1, H, W]`, 1 marks pixels to inpaint.
    pub mask: Tensor,
    /// `[3, H, W]`, the scene without tags.
    pub clean: Tensor,
    /// `[H, W]`, values in {0 background, 1 product, 2 mask}.
    pub labels: Tensor,
    pub tag_boxes: Vec<Rect>,
    pub category: String,
    pub seed: u64,
    /// Brand label printed on the product, if any.
    pub label_box: Option<Rect>,
    /// Glyphs stamped on the tags.
    pub tag_stamps: Vec<GlyphStamp>,
}

impl SceneSample {
    pub fn size(&self) -> usize {
        self.image.shape()[2]
    }

    /// Source image with the masked region zeroed.
    pub fn masked_source(&self) -> Tensor {
        masked_source(&self.image, &self.mask)
    }

    /// The scene with the tags' promotional text written straight onto the
    /// clean background, without the tag fill.
    pub fn text_overlay(&self, font: &GlyphFont) -> Tensor {
        let mut out = self.clean.clone();
        for s in &self.tag_stamps {
            render_glyph(font, s.glyph, s.x, s.y, 1, s.color, &mut out)
                .expect("recorded stamps lie inside the image");
        }
        out
    }
}

pub fn masked_source(image: &Tensor, mask: &Tensor) -> Tensor {
    let hw = mask.len();
    let mut out = image.clone();
    for chunk in out.data_mut().chunks_exact_mut(hw) {
        chunk
            .iter_mut()
            .zip(mask.data())
            .for_each(|(v, &m)| *v *= 1.0 - m);
    }
    out
}

/// Stamp `glyph` with its top-left corner at `(x, y)`; each template pixel
/// becomes a `scale x scale` block. Errors without touching the image when the
/// stamp does not fit.
pub fn render_glyph(
    font: &GlyphFont,
    glyph: usize,
    x: usize,
    y: usize,
    scale: usize,
    color: [f32; 3],
    image: &mut Tensor,
) -> Result<()> {
    let template = font
        .template(glyph)
        .ok_or_else(|| Error::InvalidArgument(format!("glyph {glyph} not in font")))?;
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::Shape(format!(
            "render target must be [3,H,W], got {shape:?}"
        )));
    }
    let (h, w) = (shape[1], shape[2]);
    if scale == 0 || x + GLYPH_W * scale > w || y + GLYPH_H * scale > h {
        return Err(Error::InvalidArgument(format!(
            "glyph at ({x},{y}) scale {scale} does not fit in {w}x{h}"
        )));
    }
    let data = image.data_mut();
    for (r, row) in template.iter().enumerate() {
        for (c, &lit) in row.iter().enumerate() {
            if !lit {
                continue;
            }
            for dy in 0..scale {
                for dx in 0..scale {
                    let py = y + r * scale + dy;
                    let px = x + c * scale + dx;
                    for (ch, &v) in color.iter().enumerate() {
                        data[ch * h * w + py * w + px] = v;
                    }
                }
            }
        }
    }
    Ok(())
}

fn luminance(c: [f32; 3]) -> f32 {
    (c[0] + c[1] + c[2]) / 3.0
}

fn color_dist(a: [f32; 3], b: [f32; 3]) -> f32 {
    a.iter()
        .zip(&b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f32>()
        .sqrt()
}

fn random_color(rng: &mut RngStream, lo: f64, hi: f64) -> [f32; 3] {
    [
        rng.uniform_range(lo, hi) as f32,
        rng.uniform_range(lo, hi) as f32,
        rng.uniform_range(lo, hi) as f32,
    ]
}

enum Shape {
    Ellipse { cx: f32, cy: f32, rx: f32, ry: f32 },
    Rectangle(Rect),
}

impl Shape {
    fn contains(&self, x: usize, y: usize) -> bool {
        match self {
            Shape::Ellipse { cx, cy, rx, ry } => {
                let dx = (x as f32 + 0.5 - cx) / rx;
                let dy = (y as f32 + 0.5 - cy) / ry;
                dx * dx + dy * dy <= 1.0
            }
            Shape::Rectangle(r) => r.contains(x, y),
        }
    }
}

struct Canvas {
    size: usize,
    data: Vec<f32>,
}

impl Canvas {
    fn set(&mut self, x: usize, y: usize, c: [f32; 3]) {
        let n = self.size * self.size;
        for (ch, &v) in c.iter().enumerate() {
            self.data[ch * n + y * self.size + x] = v;
        }
    }

    fn get(&self, x: usize, y: usize) -> [f32; 3] {
        let n = self.size * self.size;
        let i = y * self.size + x;
        [self.data[i], self.data[n + i], self.data[2 * n + i]]
    }

    fn into_tensor(self) -> Tensor {
        let s = self.size;
        Tensor::from_vec(vec![3, s, s], self.data).expect("canvas size")
    }
}

fn paint_background(rng: &mut RngStream, size: usize) -> Canvas {
    let c0 = random_color(rng, 0.25, 0.8);
    let c1 = random_color(rng, 0.25, 0.8);
    let angle = rng.uniform_range(0.0, std::f64::consts::TAU) as f32;
    let (dx, dy) = (angle.cos(), angle.sin());
    let waves: Vec<(f32, f32, f32, f32)> = (0..3)
        .map(|_| {
            let theta = rng.uniform_range(0.0, std::f64::consts::TAU) as f32;
            let k = rng.uniform_range(0.5, 1.5) as f32 * std::f32::consts::TAU / size as f32;
            let phase = rng.uniform_range(0.0, std::f64::consts::TAU) as f32;
            let amp = rng.uniform_range(0.01, 0.03) as f32;
            (theta, k, phase, amp)
        })
        .collect();
    let mut canvas = Canvas {
        size,
        data: vec![0.0; 3 * size * size],
    };
    let half = size as f32 / 2.0;
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f32 - half, y as f32 - half);
            let s = ((fx * dx + fy * dy) / size as f32 + 0.5).clamp(0.0, 1.0);
            let noise: f32 = waves
                .iter()
                .map(|&(th, k, ph, a)| a * (k * (fx * th.cos() + fy * th.sin()) + ph).cos())
                .sum();
            let mut c = [0.0; 3];
            for ch in 0..3 {
                c[ch] = (c0[ch] * (1.0 - s) + c1[ch] * s + noise).clamp(0.0, 1.0);
            }
            canvas.set(x, y, c);
        }
    }
    canvas
}

fn sample_product(rng: &mut RngStream, size: usize) -> Shape {
    let s = size as f64;
    let cx = rng.uniform_range(0.3 * s, 0.7 * s) as f32;
    let cy = rng.uniform_range(0.3 * s, 0.7 * s) as f32;
    let rx = rng.uniform_range(0.18 * s, 0.3 * s) as f32;
    let ry = rng.uniform_range(0.18 * s, 0.3 * s) as f32;
    if rng.bernoulli(0.5) {
        Shape::Ellipse { cx, cy, rx, ry }
    } else {
        let x0 = (cx - rx).max(0.0) as usize;
        let y0 = (cy - ry).max(0.0) as usize;
        let x1 = ((cx + rx) as usize).min(size);
        let y1 = ((cy + ry) as usize).min(size);
        Shape::Rectangle(Rect {
            x: x0,
            y: y0,
            w: x1 - x0,
            h: y1 - y0,
        })
    }
}

fn tag_extent(glyphs: usize) -> (usize, usize) {
    // one pixel of tag fill around the text, one pixel between glyphs
    (glyphs * GLYPH_W + (glyphs - 1) + 2, GLYPH_H + 2)
}

/// Generate one scene; a pure function of `(seed, config)`.
pub fn generate_scene(seed: u64, config: &GenConfig, font: &GlyphFont) -> Result<SceneSample> {
    config.validate(font)?;
    let size = config.size;
    let mut rng = RngStream::keyed(seed, &[domain::SCENE]);
    let category = CATEGORIES[rng.int_range(0, CATEGORIES.len() as i64 - 1) as usize].to_string();

    let mut canvas = paint_background(&mut rng, size);
    let bg_mean = canvas.get(size / 2, size / 2);

    let product = sample_product(&mut rng, size);
    let mut product_color = random_color(&mut rng, 0.05, 0.95);
    for _ in 0..32 {
        if color_dist(product_color, bg_mean) >= 0.35 {
            break;
        }
        product_color = random_color(&mut rng, 0.05, 0.95);
    }
    let mut is_product = vec![false; size * size];
    for y in 0..size {
        for x in 0..size {
            if product.contains(x, y) {
                is_product[y * size + x] = true;
                // mild vertical shading
                let shade = 1.0 - 0.15 * (y as f32 / size as f32 - 0.5);
                let c = product_color.map(|v| (v * shade).clamp(0.0, 1.0));
                canvas.set(x, y, c);
            }
        }
    }

    let mut clean = canvas.into_tensor();
    let mut label_box = None;
    if rng.bernoulli(config.label_prob) {
        let n = rng.int_range(1, 2) as usize;
        let (w, h) = (n * GLYPH_W + (n - 1), GLYPH_H);
        let ink = if luminance(product_color) > 0.5 {
            [0.05, 0.05, 0.08]
        } else {
            [0.97, 0.97, 0.95]
        };
        for _ in 0..64 {
            let x = rng.int_range(1, (size - w - 1) as i64) as usize;
            let y = rng.int_range(1, (size - h - 1) as i64) as usize;
            let r = Rect { x, y, w, h };
            let padded = r.dilate(1, size, size);
            let fits = (padded.y..padded.y + padded.h)
                .all(|py| (padded.x..padded.x + padded.w).all(|px| is_product[py * size + px]));
            if fits {
                for k in 0..n {
                    let glyph = font.glyph_id(char::from(b'0' + rng.int_range(0, 9) as u8)).unwrap();
                    render_glyph(font, glyph, x + k * (GLYPH_W + 1), y, 1, ink, &mut clean)?;
                }
                label_box = Some(r);
                break;
            }
        }
    }

    let promo: Vec<usize> = config
        .promo_text
        .chars()
        .map(|c| font.glyph_id(c).expect("validated"))
        .collect();
    let bounds = Rect {
        x: 0,
        y: 0,
        w: size,
        h: size,
    };

    for _ in 0..config.max_attempts {
        let k = rng.int_range(config.tags_min as i64, config.tags_max as i64) as usize;
        let mut tags: Vec<(Rect, usize)> = Vec::with_capacity(k);
        let mut ok = true;
        for _ in 0..k {
            let n = rng.int_range(config.glyphs_min as i64, config.glyphs_max as i64) as usize;
            let (w, h) = tag_extent(n);
            if w + 2 > size || h + 2 > size {
                ok = false;
                break;
            }
            let mut placed = None;
            for _ in 0..32 {
                let x = rng.int_range(1, (size - w - 1) as i64) as usize;
                let y = rng.int_range(1, (size - h - 1) as i64) as usize;
                let r = Rect { x, y, w, h };
                let grown = r.dilate(1, size, size);
                if !grown.inside(&bounds) {
                    continue;
                }
                let overlap = (r.y..r.y + r.h)
                    .flat_map(|py| (r.x..r.x + r.w).map(move |px| (px, py)))
                    .filter(|&(px, py)| is_product[py * size + px])
                    .count();
                if overlap * 2 > r.area() {
                    continue;
                }
                if let Some(lb) = label_box {
                    if grown.intersects(&lb.dilate(1, size, size)) {
                        continue;
                    }
                }
                if tags
                    .iter()
                    .any(|(t, _)| grown.intersects(&t.dilate(1, size, size)))
                {
                    continue;
                }
                placed = Some(r);
                break;
            }
            match placed {
                Some(r) => tags.push((r, n)),
                None => {
                    ok = false;
                    break;
                }
            }
        }
        if !ok {
            continue;
        }
        let mut mask = vec![0.0f32; size * size];
        for (r, _) in &tags {
            let g = r.dilate(1, size, size);
            for py in g.y..g.y + g.h {
                for px in g.x..g.x + g.w {
                    mask[py * size + px] = 1.0;
                }
            }
        }
        let frac = mask.iter().sum::<f32>() as f64 / (size * size) as f64;
        if frac < config.mask_fraction_min || frac > config.mask_fraction_max {
            continue;
        }

        let mut image = clean.clone();
        let mut stamps = Vec::new();
        let n_px = size * size;
        for (r, n) in &tags {
            let fill = [
                rng.uniform_range(0.55, 0.9) as f32,
                rng.uniform_range(0.05, 0.35) as f32,
                rng.uniform_range(0.05, 0.3) as f32,
            ];
            for py in r.y..r.y + r.h {
                for px in r.x..r.x + r.w {
                    for (ch, &v) in fill.iter().enumerate() {
                        image.data_mut()[ch * n_px + py * size + px] = v;
                    }
                }
            }
            let ink = [
                rng.uniform_range(0.9, 1.0) as f32,
                rng.uniform_range(0.9, 1.0) as f32,
                rng.uniform_range(0.85, 1.0) as f32,
            ];
            for (k, &glyph) in promo.iter().take(*n).enumerate() {
                let gx = r.x + 1 + k * (GLYPH_W + 1);
                let gy = r.y + 1;
                render_glyph(font, glyph, gx, gy, 1, ink, &mut image)?;
                stamps.push(GlyphStamp {
                    glyph,
                    x: gx,
                    y: gy,
                    color: ink,
                });
            }
        }

        let mut labels = vec![LABEL_BG as f32; n_px];
        for i in 0..n_px {
            if mask[i] > 0.5 {
                labels[i] = LABEL_MASK as f32;
            } else if is_product[i] {
                labels[i] = LABEL_FG as f32;
            }
        }

        return Ok(SceneSample {
            image,
            mask: Tensor::from_vec(vec![1, size, size], mask)?,
            clean,
            labels: Tensor::from_vec(vec![size, size], labels)?,
            tag_boxes: tags.into_iter().map(|(r, _)| r).collect(),
            category,
            seed,
            label_box,
            tag_stamps: stamps,
        });
    }
    Err(Error::InvalidArgument(format!(
        "could not place tags for seed {seed} within {} attempts",
        config.max_attempts
    )))
}
