//! Group relative policy optimization over reverse-SDE trajectories.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Gradients, Var};
use crate::error::{Error, Result};
use crate::matting::maybe_enable_matting;
use crate::model::VelocityNet;
use crate::optim::AdamState;
use crate::rewards::{composite_advantage, evaluate_rewards, RewardConfig, RewardVector};
use crate::rng::{domain, stream_id, RngStream};
use crate::sampler::{rollout, sde_coefficients, Conditioning, SampleSchedule, Trajectory};
use crate::synth::{GlyphFont, SceneSample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrpoConfig {
    pub group_size: usize,
    /// Sampling steps of each rollout.
    pub sampling_steps: usize,
    /// Fraction of timesteps trained per iteration.
    pub tau: f64,
    pub clip_eps: f64,
    /// Per-trajectory probability of spatial matting.
    pub matting_prob: f64,
    pub iterations: u64,
    /// Image-mask pairs per iteration.
    pub batch_pairs: usize,
    pub lr: f64,
    /// Save a checkpoint every this many iterations (0: only at the end).
    pub checkpoint_every: u64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            sampling_steps: 20,
            tau: 0.6,
            clip_eps: 0.2,
            matting_prob: 0.25,
            iterations: 200,
            batch_pairs: 2,
            lr: 1e-4,
            checkpoint_every: 50,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::Config(format!("group_size {} < 2", self.group_size)));
        }
        if self.sampling_steps == 0 {
            return Err(Error::Config("sampling_steps must be positive".into()));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Config(format!("tau {} outside (0, 1]", self.tau)));
        }
        if !(self.clip_eps > 0.0) {
            return Err(Error::Config("clip_eps must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.matting_prob) {
            return Err(Error::Config("matting_prob must lie in [0, 1]".into()));
        }
        if self.batch_pairs == 0 {
            return Err(Error::Config("batch_pairs must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("grpo lr must be positive".into()));
        }
        Ok(())
    }
}

/// One image-mask pair with its G trajectories, rewards and advantages.
pub struct GroupBatch {
    pub sample_index: usize,
    pub cond: Conditioning,
    pub trajectories: Vec<Trajectory>,
    pub rewards: Vec<RewardVector>,
    pub advantages: Vec<f64>,
    pub init_noise_id: u64,
}

impl GroupBatch {
    pub fn has_signal(&self) -> bool {
        self.advantages.iter().any(|&a| a != 0.0)
    }
}

/// Reward columns that enter the advantage.
pub fn reward_rows(rewards: &[RewardVector], config: &RewardConfig) -> Vec<Vec<f64>> {
    rewards
        .iter()
        .map(|r| {
            let mut row = Vec::with_capacity(3);
            if config.use_global {
                row.push(r.global);
            }
            if config.use_local {
                row.push(r.local);
            }
            if config.use_ocr {
                row.push(r.ocr);
            }
            row
        })
        .collect()
}

/// Mean of the enabled rewards.
pub fn composite_reward(r: &RewardVector, config: &RewardConfig) -> f64 {
    let row = &reward_rows(std::slice::from_ref(r), config)[0];
    row.iter().sum::<f64>() / row.len() as f64
}

/// Everything needed to address one group's random streams.
#[derive(Clone, Copy, Debug)]
pub struct GroupKey {
    pub master_seed: u64,
    pub iteration: u64,
    pub group: u64,
}

impl GroupKey {
    pub fn init_noise_id(&self) -> u64 {
        stream_id(&[self.iteration, self.group])
    }

    pub fn step_stream(&self, member: usize) -> u64 {
        stream_id(&[self.iteration, self.group, member as u64])
    }

    pub fn matting_stream(&self, member: usize) -> RngStream {
        RngStream::keyed(
            self.master_seed,
            &[domain::MATTING, self.iteration, self.group, member as u64],
        )
    }

    pub fn subsample_stream(&self) -> RngStream {
        RngStream::keyed(self.master_seed, &[domain::SUBSAMPLE, self.iteration, self.group])
    }
}

/// G rollouts sharing one initial noise, with independent step noise and
/// per-trajectory matting draws, scored and converted to advantages.
#[allow(clippy::too_many_arguments)]
pub fn rollout_group(
    net_old: &VelocityNet,
    sample: &SceneSample,
    sample_index: usize,
    schedule: &SampleSchedule,
    config: &GrpoConfig,
    rewards: &RewardConfig,
    font: &GlyphFont,
    key: GroupKey,
) -> Result<GroupBatch> {
    let cond = Conditioning::new(sample, net_old.config.patch_size)?;
    let flags: Vec<bool> = (0..config.group_size)
        .map(|i| maybe_enable_matting(&mut key.matting_stream(i), config.matting_prob))
        .collect::<Result<_>>()?;
    let init = key.init_noise_id();
    let trajectories: Vec<Trajectory> = flags
        .par_iter()
        .enumerate()
        .map(|(i, &m)| {
            rollout(
                net_old,
                &cond,
                schedule,
                key.master_seed,
                init,
                key.step_stream(i),
                m,
            )
        })
        .collect::<Result<_>>()?;
    let scored: Vec<RewardVector> = trajectories
        .par_iter()
        .map(|t| {
            evaluate_rewards(
                &t.final_image,
                &sample.clean,
                &sample.mask,
                &sample.tag_boxes,
                font,
                rewards,
            )
            .map(|(r, _)| r)
        })
        .collect::<Result<_>>()?;
    if scored.iter().any(|r| !r.as_array().iter().all(|v| v.is_finite())) {
        return Err(Error::numerical("reward"));
    }
    let advantages = composite_advantage(&reward_rows(&scored, rewards))?;
    Ok(GroupBatch {
        sample_index,
        cond,
        trajectories,
        rewards: scored,
        advantages,
        init_noise_id: init,
    })
}

/// `ceil(tau * T)` distinct step indices, uniformly without replacement.
pub fn subsample_timesteps(steps: usize, tau: f64, rng: &mut RngStream) -> Result<Vec<usize>> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::InvalidArgument(format!("tau {tau} outside (0, 1]")));
    }
    // the small offset keeps exact products such as 0.6 * 20 from rounding up
    let k = ((tau * steps as f64 - 1e-9).ceil() as usize).clamp(1, steps);
    let mut idx: Vec<usize> = (0..steps).collect();
    rng.shuffle(&mut idx);
    idx.truncate(k);
    Ok(idx)
}

/// `min(rho A, clip(rho, 1-eps, 1+eps) A)`.
pub fn clipped_term(rho: f64, advantage: f64, eps: f64) -> f64 {
    (rho * advantage).min(rho.clamp(1.0 - eps, 1.0 + eps) * advantage)
}

/// Record the clipped surrogate of trajectory `i` at step `k` under `net`.
/// Returns `(term, ratio)` nodes.
pub fn record_term(
    g: &mut Graph,
    net: &VelocityNet,
    group: &GroupBatch,
    i: usize,
    k: usize,
    schedule: &SampleSchedule,
    clip_eps: f64,
) -> Result<(Var, Var)> {
    let traj = &group.trajectories[i];
    let lp_old = *traj
        .logprobs
        .get(k)
        .ok_or_else(|| Error::InvalidArgument(format!("no stored log-probability at step {k}")))?;
    let std = traj.stds[k];
    if !(std > 0.0) {
        return Err(Error::InvalidArgument(
            "policy ratio needs a stochastic step (eta > 0)".into(),
        ));
    }
    let (t, dt) = schedule.step(k);
    let z = &traj.states[k];
    let v = net.record(
        g,
        z,
        &group.cond.source,
        &group.cond.mask,
        t,
        group.cond.plan_for(traj.matting),
    )?;
    let (a, c) = sde_coefficients(t, dt, schedule.eps(t));
    let za = g.input_raw(z.shape().to_vec(), z.data().iter().map(|&x| x * a).collect());
    let vc = g.scale(v, c);
    let mean = g.add(za, vc);
    let action = Arc::new(traj.actions[k].data().to_vec());
    let log_ratio = g.gaussian_log_ratio(mean, action, std, lp_old);
    let rho = g.exp(log_ratio);
    let adv = group.advantages[i] as f32;
    let unclipped = g.scale(rho, adv);
    let clipped = g.clamp(rho, (1.0 - clip_eps) as f32, (1.0 + clip_eps) as f32);
    let clipped = g.scale(clipped, adv);
    let term = g.minimum(unclipped, clipped);
    Ok((term, rho))
}

/// Value of the objective (to maximize) over `(trajectory, step)` pairs and,
/// optionally, its gradient. Each term is weighted by `1 / (G * |steps|)`.
pub struct TermOutcome {
    pub value: f64,
    pub ratio: f64,
    pub grads: Option<Gradients>,
}

pub fn evaluate_term(
    net: &VelocityNet,
    group: &GroupBatch,
    i: usize,
    k: usize,
    schedule: &SampleSchedule,
    clip_eps: f64,
    with_grad: bool,
) -> Result<TermOutcome> {
    let mut g = Graph::new();
    let (term, rho) = record_term(&mut g, net, group, i, k, schedule, clip_eps)?;
    g.check_finite()?;
    let value = g.scalar(term) as f64;
    let ratio = g.scalar(rho) as f64;
    let grads = if with_grad {
        Some(g.backward(term)?)
    } else {
        None
    };
    Ok(TermOutcome {
        value,
        ratio,
        grads,
    })
}

/// `(1/G) sum_i (1/|S|) sum_{k in S} term(i, k)`.
pub fn grpo_objective(
    net: &VelocityNet,
    group: &GroupBatch,
    steps: &[usize],
    schedule: &SampleSchedule,
    clip_eps: f64,
) -> Result<f64> {
    if steps.is_empty() {
        return Err(Error::InvalidArgument("empty timestep subset".into()));
    }
    let n = group.trajectories.len();
    let mut total = 0.0;
    for i in 0..n {
        for &k in steps {
            total += evaluate_term(net, group, i, k, schedule, clip_eps, false)?.value;
        }
    }
    Ok(total / (n * steps.len()) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iter: u64,
    pub reward_global: f64,
    pub reward_local: f64,
    pub reward_ocr: f64,
    pub composite: f64,
    pub objective: f64,
    pub groups_kept: usize,
}

impl IterationMetrics {
    pub const HEADER: &'static str =
        "iter,reward_global,reward_local,reward_ocr,composite,objective,groups_kept";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.9},{:.9},{:.9},{:.9},{:.9},{}",
            self.iter,
            self.reward_global,
            self.reward_local,
            self.reward_ocr,
            self.composite,
            self.objective,
            self.groups_kept
        )
    }
}

/// Training-set indices for an iteration, deterministic in `(seed, iteration)`.
pub fn iteration_pairs(n: usize, batch: usize, seed: u64, iteration: u64) -> Vec<usize> {
    let mut rng = RngStream::keyed(seed, &[domain::DATA_ORDER, 1 << 32, iteration]);
    (0..batch)
        .map(|_| rng.int_range(0, n as i64 - 1) as usize)
        .collect()
}

/// One iteration: snapshot the policy, roll out one group per pair, then take
/// one ascent step per subsampled timestep position.
#[allow(clippy::too_many_arguments)]
pub fn train_iteration(
    net: &mut VelocityNet,
    optimizer: &mut AdamState,
    samples: &[SceneSample],
    config: &GrpoConfig,
    rewards: &RewardConfig,
    schedule: &SampleSchedule,
    font: &GlyphFont,
    master_seed: u64,
    iteration: u64,
) -> Result<IterationMetrics> {
    config.validate()?;
    let net_old = net.clone();
    let picks = iteration_pairs(samples.len(), config.batch_pairs, master_seed, iteration);
    let mut groups = Vec::new();
    for (gi, &si) in picks.iter().enumerate() {
        let key = GroupKey {
            master_seed,
            iteration,
            group: gi as u64,
        };
        match rollout_group(&net_old, &samples[si], si, schedule, config, rewards, font, key) {
            Ok(g) => groups.push((key, g)),
            Err(e) => log::warn!("iteration {iteration}: group {gi} discarded: {e}"),
        }
    }
    let kept = groups.len();
    let mut metrics = IterationMetrics {
        iter: iteration,
        reward_global: 0.0,
        reward_local: 0.0,
        reward_ocr: 0.0,
        composite: 0.0,
        objective: 0.0,
        groups_kept: kept,
    };
    if kept == 0 {
        log::warn!("iteration {iteration}: no surviving groups, skipping update");
        return Ok(metrics);
    }
    let count = (kept * config.group_size) as f64;
    for (_, g) in &groups {
        for r in &g.rewards {
            metrics.reward_global += r.global / count;
            metrics.reward_local += r.local / count;
            metrics.reward_ocr += r.ocr / count;
            metrics.composite += composite_reward(r, rewards) / count;
        }
    }

    let subsets: Vec<Vec<usize>> = groups
        .iter()
        .map(|(key, _)| subsample_timesteps(schedule.steps(), config.tau, &mut key.subsample_stream()))
        .collect::<Result<_>>()?;
    let positions = subsets[0].len();
    let live: Vec<usize> = (0..kept).filter(|&g| groups[g].1.has_signal()).collect();
    let weight = 1.0 / (config.group_size * positions) as f32;
    let mut objective = 0.0;
    for j in 0..positions {
        // every group with signal contributes its j-th subsampled step; the
        // terms of a zero-advantage group are identically zero
        let jobs: Vec<(usize, usize)> = live
            .iter()
            .flat_map(|&g| (0..config.group_size).map(move |i| (g, i)))
            .collect();
        let outcomes: Vec<TermOutcome> = jobs
            .par_iter()
            .map(|&(g, i)| {
                evaluate_term(
                    net,
                    &groups[g].1,
                    i,
                    subsets[g][j],
                    schedule,
                    config.clip_eps,
                    true,
                )
            })
            .collect::<Result<_>>()?;
        for o in &outcomes {
            if !o.ratio.is_finite() {
                return Err(Error::numerical("policy ratio"));
            }
            objective += o.value * weight as f64 / kept as f64;
            if let Some(grads) = &o.grads {
                net.params.accumulate(grads, weight / kept as f32)?;
            }
        }
        if !live.is_empty() {
            optimizer.step(&mut net.params, true)?;
        }
    }
    metrics.objective = objective;
    Ok(metrics)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subsample_sizes() {
        let mut r = RngStream::new(0, 0);
        let all = subsample_timesteps(20, 1.0, &mut r).unwrap();
        let mut sorted = all.clone();
        sorted.sort();
        assert_eq!(sorted, (0..20).collect::<Vec<_>>());
        let s = subsample_timesteps(20, 0.6, &mut r).unwrap();
        assert_eq!(s.len(), 12);
        let mut d = s.clone();
        d.sort();
        d.dedup();
        assert_eq!(d.len(), 12);
        assert_eq!(subsample_timesteps(10, 0.25, &mut r).unwrap().len(), 3);
        assert!(subsample_timesteps(10, 0.0, &mut r).is_err());
    }

    #[test]
    fn clip_cases() {
        assert!((clipped_term(1.5, 1.0, 0.2) - 1.2).abs() < 1e-12);
        assert!((clipped_term(0.5, -1.0, 0.2) + 0.8).abs() < 1e-12);
        assert_eq!(clipped_term(1.0, 0.7, 0.2), 0.7);
    }

    #[test]
    fn metrics_header() {
        assert_eq!(
            IterationMetrics::HEADER,
            "iter,reward_global,reward_local,reward_ocr,composite,objective,groups_kept"
        );
    }

    #[test]
    fn config_validation() {
        assert!(GrpoConfig::default().validate().is_ok());
        for bad in [
            GrpoConfig {
                group_size: 1,
                ..Default::default()
            },
            GrpoConfig {
                tau: 1.5,
                ..Default::default()
            },
            GrpoConfig {
                clip_eps: 0.0,
                ..Default::default()
            },
            GrpoConfig {
                matting_prob: -0.1,
                ..Default::default()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
