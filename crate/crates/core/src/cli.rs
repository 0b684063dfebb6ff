//! Subcommand implementations behind the `flowpaint` binary.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::csvlog::CsvLog;
use crate::dataset::{load_dataset, write_dataset, Provenance};
use crate::error::{Error, Result};
use crate::eval::{evaluate, AblationTable, EvalReport};
use crate::flow::{pretrain, training_pairs, PretrainState};
use crate::grpo::{train_iteration, IterationMetrics};
use crate::model::VelocityNet;
use crate::optim::{AdamConfig, AdamState};
use crate::rng::{domain, stream_id};
use crate::sampler::{dump_trajectory, rollout, sample_ode, Conditioning, SampleSchedule};
use crate::synth::{generate_scene, GlyphFont, SceneSample};

/// Settings shared by every subcommand.
#[derive(Clone, Debug)]
pub struct Context {
    pub config: RunConfig,
    pub seed: u64,
    pub out: PathBuf,
}

impl Context {
    pub fn new(config: RunConfig, seed: u64, out: PathBuf) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, seed, out })
    }

    pub fn hash(&self) -> String {
        self.config.hash()
    }

    fn provenance(&self) -> Provenance {
        Provenance {
            config_hash: self.hash(),
            master_seed: self.seed,
        }
    }

    fn schedule(&self) -> Result<SampleSchedule> {
        SampleSchedule::new(&self.config.schedule)
    }
}

/// Generator seed of scene `index` in a dataset drawn under `seed`.
pub fn scene_seed(seed: u64, index: u64) -> u64 {
    stream_id(&[seed, domain::SCENE, index])
}

pub fn gen_data(ctx: &Context, count: usize, size: Option<usize>) -> Result<PathBuf> {
    let mut gen = ctx.config.data.generator.clone();
    if let Some(s) = size {
        let mut resized = crate::synth::GenConfig::for_size(s);
        resized.label_prob = gen.label_prob;
        resized.promo_text = gen.promo_text.clone();
        gen = resized;
    }
    let font = GlyphFont::builtin();
    gen.validate(&font)?;
    if count == 0 {
        return Err(Error::InvalidArgument("count must be positive".into()));
    }
    let samples: Vec<SceneSample> = (0..count as u64)
        .map(|i| generate_scene(scene_seed(ctx.seed, i), &gen, &font))
        .collect::<Result<_>>()?;
    write_dataset(&samples, &ctx.out, &ctx.provenance())
}

fn require_checkpoint(dir: &Path) -> Result<Checkpoint> {
    if !Checkpoint::exists(dir) {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no checkpoint"),
        ));
    }
    Checkpoint::load(dir)
}

fn check_architecture(ctx: &Context, net: &VelocityNet) -> Result<()> {
    if net.config != ctx.config.model.architecture {
        return Err(Error::Shape(format!(
            "checkpoint architecture {:?} differs from config {:?}",
            net.config, ctx.config.model.architecture
        )));
    }
    Ok(())
}

/// Directory holding the latest checkpoint of a training run.
pub fn ckpt_dir(out: &Path) -> PathBuf {
    out.join("ckpt")
}

/// Flow-matching pretraining. With `resume`, continues from the checkpoint in
/// `out/ckpt` if one exists. Returns the per-step losses of this invocation.
pub fn pretrain_cmd(ctx: &Context, data: &Path, resume: bool) -> Result<Vec<f64>> {
    let cfg = &ctx.config.model.pretrain;
    let samples = load_dataset(data)?;
    let font = GlyphFont::builtin();
    let pairs = training_pairs(&samples, &font, cfg.text_target_prob, ctx.seed);
    fs::create_dir_all(&ctx.out).map_err(|e| Error::io(&ctx.out, e))?;
    let ck = ckpt_dir(&ctx.out);
    let mut state = if resume && Checkpoint::exists(&ck) {
        let c = Checkpoint::load(&ck)?;
        check_architecture(ctx, &c.net)?;
        log::info!("resuming pretraining at step {}", c.metadata.step);
        PretrainState::from_checkpoint(c)
    } else {
        let net = VelocityNet::new(ctx.config.model.architecture.clone(), ctx.seed)?;
        PretrainState::fresh(net, cfg.lr)
    };
    let hash = ctx.hash();
    let mut log = CsvLog::open(&ctx.out.join("loss.csv"), "step,loss", &hash, ctx.seed, state.step)?;
    let every = cfg.checkpoint_every;
    let total = cfg.steps;
    let losses = pretrain(&mut state, &pairs, cfg, ctx.seed, |s, loss| {
        log.row(&format!("{},{:.9}", s.step, loss))?;
        if s.step % 100 == 0 {
            log::info!("pretrain step {}/{} loss {:.5}", s.step, total, loss);
        }
        if (every > 0 && s.step % every == 0) || s.step == total {
            s.checkpoint(&hash, ctx.seed).save(&ck)?;
        }
        Ok(())
    })?;
    if losses.is_empty() {
        state.checkpoint(&hash, ctx.seed).save(&ck)?;
    }
    Ok(losses)
}

/// GRPO fine-tuning starting from the pretrained checkpoint `init`. With
/// `resume`, continues from `out/ckpt` when present.
pub fn train_grpo_cmd(
    ctx: &Context,
    data: &Path,
    init: &Path,
    resume: bool,
) -> Result<Vec<IterationMetrics>> {
    let cfg = &ctx.config.grpo;
    let samples = load_dataset(data)?;
    let font = GlyphFont::builtin();
    let schedule = ctx.schedule()?;
    fs::create_dir_all(&ctx.out).map_err(|e| Error::io(&ctx.out, e))?;
    let ck = ckpt_dir(&ctx.out);
    let (mut net, mut optimizer, start) = if resume && Checkpoint::exists(&ck) {
        let c = Checkpoint::load(&ck)?;
        log::info!("resuming GRPO at iteration {}", c.metadata.step);
        (c.net, c.optimizer, c.metadata.step)
    } else {
        let c = require_checkpoint(init)?;
        let opt = AdamState::new(
            AdamConfig {
                lr: cfg.lr,
                ..AdamConfig::default()
            },
            &c.net.params,
        );
        (c.net, opt, 0)
    };
    check_architecture(ctx, &net)?;
    let hash = ctx.hash();
    let mut log = CsvLog::open(
        &ctx.out.join("metrics.csv"),
        IterationMetrics::HEADER,
        &hash,
        ctx.seed,
        start,
    )?;
    let mut all = Vec::new();
    for it in start..cfg.iterations {
        let m = train_iteration(
            &mut net,
            &mut optimizer,
            &samples,
            cfg,
            &ctx.config.rewards,
            &schedule,
            &font,
            ctx.seed,
            it,
        )?;
        let done = it + 1;
        let row = IterationMetrics { iter: done, ..m };
        log.row(&row.csv_row())?;
        log::info!(
            "grpo iteration {}/{} composite {:.4} ocr {:.3}",
            done,
            cfg.iterations,
            row.composite,
            row.reward_ocr
        );
        all.push(row);
        let every = cfg.checkpoint_every;
        if (every > 0 && done % every == 0) || done == cfg.iterations {
            save_state(&net, &optimizer, done, &hash, ctx.seed, &ck)?;
        }
    }
    if cfg.iterations <= start {
        save_state(&net, &optimizer, start, &hash, ctx.seed, &ck)?;
    }
    Ok(all)
}

fn save_state(
    net: &VelocityNet,
    optimizer: &AdamState,
    step: u64,
    hash: &str,
    seed: u64,
    dir: &Path,
) -> Result<()> {
    Checkpoint {
        net: net.clone(),
        optimizer: optimizer.clone(),
        metadata: crate::checkpoint::Metadata {
            step,
            config_hash: hash.to_string(),
            master_seed: seed,
            net: net.config.clone(),
            adam: optimizer.config.clone(),
            adam_steps: optimizer.step_count,
        },
    }
    .save(dir)
}

#[derive(Serialize)]
struct SampleRecord<'a> {
    config_hash: &'a str,
    master_seed: u64,
    index: usize,
    scene_seed: u64,
    matting: bool,
    stochastic: bool,
    output: &'a str,
}

/// Inpaint one dataset sample; writes `sample.nt`, `sample.ppm` and
/// `sample.json` (plus the trajectory when `stochastic`).
pub fn sample_cmd(
    ctx: &Context,
    ckpt: &Path,
    data: &Path,
    index: usize,
    matting: bool,
    stochastic: bool,
) -> Result<crate::Tensor> {
    let c = require_checkpoint(ckpt)?;
    check_architecture(ctx, &c.net)?;
    let samples = load_dataset(data)?;
    let s = samples.get(index).ok_or_else(|| {
        Error::InvalidArgument(format!("index {index} outside dataset of {}", samples.len()))
    })?;
    let cond = Conditioning::new(s, c.net.config.patch_size)?;
    let schedule = ctx.schedule()?;
    fs::create_dir_all(&ctx.out).map_err(|e| Error::io(&ctx.out, e))?;
    let out = if stochastic {
        let traj = rollout(&c.net, &cond, &schedule, ctx.seed, index as u64, index as u64, matting)?;
        dump_trajectory(&traj, &ctx.out.join("trajectory"))?;
        traj.final_image
    } else {
        sample_ode(&c.net, &cond, &schedule.deterministic(), ctx.seed, index as u64, matting)?
    };
    out.save_nt(&ctx.out.join("sample.nt"))?;
    let ppm = ctx.out.join("sample.ppm");
    fs::write(&ppm, crate::dataset::to_ppm(&out)).map_err(|e| Error::io(&ppm, e))?;
    let rec = SampleRecord {
        config_hash: &ctx.hash(),
        master_seed: ctx.seed,
        index,
        scene_seed: s.seed,
        matting,
        stochastic,
        output: "sample.nt",
    };
    let json = ctx.out.join("sample.json");
    let body = serde_json::to_string_pretty(&rec).expect("record serializes");
    fs::write(&json, body).map_err(|e| Error::io(&json, e))?;
    Ok(out)
}

fn eval_with(ctx: &Context, net: &VelocityNet, samples: &[SceneSample], matting: bool, method: &str) -> Result<EvalReport> {
    let noise = stream_id(&[ctx.seed, domain::EVAL_NOISE, ctx.config.eval.noise_seed]);
    let mut report = evaluate(
        net,
        samples,
        &ctx.schedule()?,
        &ctx.config.rewards,
        &GlyphFont::builtin(),
        noise,
        matting,
        method,
        &ctx.hash(),
    )?;
    report.master_seed = ctx.seed;
    Ok(report)
}

/// Evaluate a checkpoint on a dataset; writes `<method>.csv` and `<method>.json`.
pub fn eval_cmd(ctx: &Context, ckpt: &Path, data: &Path, matting: bool, method: &str) -> Result<EvalReport> {
    let c = require_checkpoint(ckpt)?;
    check_architecture(ctx, &c.net)?;
    let samples = load_dataset(data)?;
    let report = eval_with(ctx, &c.net, &samples, matting, method)?;
    report.write(&ctx.out, method)?;
    Ok(report)
}

/// The 2x2 table over {matting} x {GRPO}. The no-GRPO rows both use the
/// pretrained checkpoint.
pub fn ablate_cmd(ctx: &Context, pretrained: &Path, grpo: &Path, data: &Path) -> Result<AblationTable> {
    let base = require_checkpoint(pretrained)?;
    let tuned = require_checkpoint(grpo)?;
    check_architecture(ctx, &base.net)?;
    check_architecture(ctx, &tuned.net)?;
    let samples = load_dataset(data)?;
    let cells = [
        (&base.net, false, "pretrained"),
        (&base.net, true, "pretrained_matting"),
        (&tuned.net, false, "grpo"),
        (&tuned.net, true, "grpo_matting"),
    ];
    let reports: Vec<EvalReport> = cells
        .iter()
        .map(|(net, m, name)| {
            let r = eval_with(ctx, net, &samples, *m, name)?;
            r.write(&ctx.out, name)?;
            Ok(r)
        })
        .collect::<Result<_>>()?;
    let table = AblationTable::from_reports(
        [&reports[0], &reports[1], &reports[2], &reports[3]],
        &ctx.hash(),
        ctx.seed,
    );
    table.write(&ctx.out)?;
    Ok(table)
}
