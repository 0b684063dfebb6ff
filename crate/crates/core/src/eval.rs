//! Held-out evaluation (masked PSNR, structural score, OCR pass rate) and the
//! 2x2 matting/GRPO ablation table.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::VelocityNet;
use crate::rewards::{global_structural_reward, ocr_reward, RewardConfig};
use crate::sampler::{sample_ode, Conditioning, SampleSchedule};
use crate::synth::{GlyphFont, SceneSample};
use crate::tensor::Tensor;

pub const PSNR_CAP: f64 = 99.0;
pub const GLOBAL_LABEL: &str = "global_score (not SSIM)";

/// `10 log10(1 / MSE)` over mask pixels, capped at 99 dB when MSE < 1e-10.
pub fn psnr_mask(output: &Tensor, clean: &Tensor, mask: &Tensor) -> Result<f64> {
    if output.shape() != clean.shape() || output.len() != 3 * mask.len() {
        return Err(Error::Shape(format!(
            "psnr of {:?} vs {:?} under {:?}",
            output.shape(),
            clean.shape(),
            mask.shape()
        )));
    }
    let hw = mask.len();
    let m = mask.data();
    let (mut se, mut n) = (0.0f64, 0usize);
    for (i, (&a, &b)) in output.data().iter().zip(clean.data()).enumerate() {
        if m[i % hw] > 0.5 {
            se += (a as f64 - b as f64).powi(2);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::InvalidArgument("empty mask".into()));
    }
    let mse = se / n as f64;
    Ok(if mse < 1e-10 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: usize,
    pub seed: u64,
    pub psnr_mask: f64,
    pub global_score: f64,
    /// Fraction of tag regions where the detector finds no glyph.
    pub ocr_pass: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub config_hash: String,
    pub master_seed: u64,
    pub global_score_label: String,
    pub mean_psnr_mask: f64,
    pub mean_global_score: f64,
    pub mean_ocr_pass: f64,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn from_rows(method: &str, config_hash: &str, master_seed: u64, rows: Vec<EvalRow>) -> Self {
        let n = rows.len().max(1) as f64;
        let mean = |f: fn(&EvalRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
        Self {
            method: method.to_string(),
            config_hash: config_hash.to_string(),
            master_seed,
            global_score_label: GLOBAL_LABEL.to_string(),
            mean_psnr_mask: mean(|r| r.psnr_mask),
            mean_global_score: mean(|r| r.global_score),
            mean_ocr_pass: mean(|r| r.ocr_pass),
            rows,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!(
            "# method={} config_hash={} seed={}\n# global_score: {}\nid,seed,psnr_mask,global_score,ocr_pass\n",
            self.method, self.config_hash, self.master_seed, GLOBAL_LABEL
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{:.9},{:.9},{:.9}\n",
                r.id, r.seed, r.psnr_mask, r.global_score, r.ocr_pass
            ));
        }
        s
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join(format!("{stem}.csv"));
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let json = dir.join(format!("{stem}.json"));
        let body = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(&json, body).map_err(|e| Error::io(&json, e))
    }
}

/// Score already-produced outputs against the clean references.
pub fn score_outputs(
    outputs: &[Tensor],
    samples: &[SceneSample],
    rewards: &RewardConfig,
    font: &GlyphFont,
) -> Result<Vec<EvalRow>> {
    if outputs.len() != samples.len() {
        return Err(Error::Shape(format!(
            "{} outputs for {} samples",
            outputs.len(),
            samples.len()
        )));
    }
    outputs
        .iter()
        .zip(samples)
        .enumerate()
        .map(|(id, (out, s))| {
            Ok(EvalRow {
                id,
                seed: s.seed,
                psnr_mask: psnr_mask(out, &s.clean, &s.mask)?,
                global_score: global_structural_reward(out, &s.clean, &rewards.window)?,
                ocr_pass: ocr_reward(
                    out,
                    &s.tag_boxes,
                    font,
                    rewards.ocr_threshold,
                    rewards.ocr_min_contrast,
                )?,
            })
        })
        .collect()
}

/// Deterministic ODE inpainting of every sample; sample `i` starts from init
/// noise id `i` under `noise_seed`.
pub fn inpaint_all(
    net: &VelocityNet,
    samples: &[SceneSample],
    schedule: &SampleSchedule,
    noise_seed: u64,
    matting: bool,
) -> Result<Vec<Tensor>> {
    let ode = schedule.deterministic();
    samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let cond = Conditioning::new(s, net.config.patch_size)?;
            sample_ode(net, &cond, &ode, noise_seed, i as u64, matting)
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    net: &VelocityNet,
    samples: &[SceneSample],
    schedule: &SampleSchedule,
    rewards: &RewardConfig,
    font: &GlyphFont,
    noise_seed: u64,
    matting: bool,
    method: &str,
    config_hash: &str,
) -> Result<EvalReport> {
    let outputs = inpaint_all(net, samples, schedule, noise_seed, matting)?;
    let rows = score_outputs(&outputs, samples, rewards, font)?;
    Ok(EvalReport::from_rows(method, config_hash, noise_seed, rows))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub matting: bool,
    pub grpo: bool,
    pub psnr: f64,
    pub global: f64,
    pub ocr: f64,
    pub delta_psnr: f64,
    pub delta_global: f64,
    pub delta_ocr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub config_hash: String,
    pub master_seed: u64,
    pub global_score_label: String,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// Rows ordered (no matting, no GRPO), (matting, no GRPO), (no matting,
    /// GRPO), (matting, GRPO); deltas are against the first row.
    pub fn from_reports(
        reports: [&EvalReport; 4],
        config_hash: &str,
        master_seed: u64,
    ) -> Self {
        let flags = [(false, false), (true, false), (false, true), (true, true)];
        let base = reports[0];
        let rows = reports
            .iter()
            .zip(flags)
            .map(|(r, (matting, grpo))| AblationRow {
                matting,
                grpo,
                psnr: r.mean_psnr_mask,
                global: r.mean_global_score,
                ocr: r.mean_ocr_pass,
                delta_psnr: r.mean_psnr_mask - base.mean_psnr_mask,
                delta_global: r.mean_global_score - base.mean_global_score,
                delta_ocr: r.mean_ocr_pass - base.mean_ocr_pass,
            })
            .collect();
        Self {
            config_hash: config_hash.to_string(),
            master_seed,
            global_score_label: GLOBAL_LABEL.to_string(),
            rows,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!(
            "# config_hash={} seed={}\n# global: {}\nmatting,grpo,psnr,global,ocr,delta_psnr,delta_global,delta_ocr\n",
            self.config_hash, self.master_seed, GLOBAL_LABEL
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9}\n",
                r.matting as u8,
                r.grpo as u8,
                r.psnr,
                r.global,
                r.ocr,
                r.delta_psnr,
                r.delta_global,
                r.delta_ocr
            ));
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join("ablation.csv");
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let json = dir.join("ablation.json");
        let body = serde_json::to_string_pretty(self).expect("table serializes");
        std::fs::write(&json, body).map_err(|e| Error::io(&json, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_scene, GenConfig};

    #[test]
    fn psnr_values() {
        let clean = Tensor::full(&[3, 4, 4], 0.5);
        let mask = Tensor::full(&[1, 4, 4], 1.0);
        assert_eq!(psnr_mask(&clean, &clean, &mask).unwrap(), PSNR_CAP);
        let off = Tensor::full(&[3, 4, 4], 0.6);
        assert!((psnr_mask(&off, &clean, &mask).unwrap() - 20.0).abs() < 1e-5);
        // errors outside the mask are ignored
        let mut half = Tensor::zeros(&[1, 4, 4]);
        half.data_mut()[0] = 1.0;
        let mut out = Tensor::full(&[3, 4, 4], 0.0);
        for c in 0..3 {
            out.data_mut()[c * 16] = 0.5;
        }
        assert_eq!(psnr_mask(&out, &clean, &half).unwrap(), PSNR_CAP);
    }

    #[test]
    fn oracle_and_source_outputs() {
        let font = GlyphFont::builtin();
        let samples: Vec<SceneSample> = (0..6)
            .map(|i| generate_scene(i, &GenConfig::default(), &font).unwrap())
            .collect();
        let cfg = RewardConfig::default();
        let clean: Vec<Tensor> = samples.iter().map(|s| s.clean.clone()).collect();
        let rows = score_outputs(&clean, &samples, &cfg, &font).unwrap();
        assert!(rows
            .iter()
            .all(|r| r.psnr_mask == PSNR_CAP && r.global_score == 1.0 && r.ocr_pass == 1.0));
        let src: Vec<Tensor> = samples.iter().map(|s| s.image.clone()).collect();
        let rows = score_outputs(&src, &samples, &cfg, &font).unwrap();
        assert!(rows.iter().all(|r| r.ocr_pass == 0.0));
        let report = EvalReport::from_rows("source", "h", 0, rows.clone());
        let mean = rows.iter().map(|r| r.psnr_mask).sum::<f64>() / rows.len() as f64;
        assert!((report.mean_psnr_mask - mean).abs() < 1e-9);
    }

    #[test]
    fn ablation_shape_and_deltas() {
        let mk = |p: f64, o: f64| {
            EvalReport::from_rows(
                "m",
                "h",
                0,
                vec![EvalRow {
                    id: 0,
                    seed: 0,
                    psnr_mask: p,
                    global_score: 0.5,
                    ocr_pass: o,
                }],
            )
        };
        let r = [mk(20.0, 0.5), mk(21.0, 0.6), mk(22.0, 0.7), mk(23.0, 0.9)];
        let t = AblationTable::from_reports([&r[0], &r[1], &r[2], &r[3]], "h", 0);
        assert_eq!(t.rows.len(), 4);
        assert!((t.rows[3].delta_ocr - 0.4).abs() < 1e-12);
        assert_eq!(t.rows[0].delta_psnr, 0.0);
        let csv = t.to_csv();
        assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), 5);
    }
}
