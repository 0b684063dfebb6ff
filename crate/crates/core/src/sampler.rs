//! Rectified-flow ODE and SDE samplers, transition log-densities and rollouts.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matting::{build_bias_masks, region_partition, MattingPlan};
use crate::model::{VelocityNet, T_MIN};
use crate::rng::{domain, gaussian_sample, RngStream};
use crate::synth::SceneSample;
use crate::tensor::Tensor;

fn check_t(t: f32, t_min: f32) -> Result<()> {
    if !(t >= t_min - 1e-6) {
        return Err(Error::InvalidArgument(format!("timestep {t} below t_min {t_min}")));
    }
    Ok(())
}

/// `-(z + (1-t) v) / t`, the score implied by a rectified-flow velocity.
pub fn score_from_velocity(z: &Tensor, v: &Tensor, t: f32) -> Result<Tensor> {
    check_t(t, T_MIN)?;
    z.zip_map(v, |z, v| -(z + (1.0 - t) * v) / t)
}

/// Explicit Euler step against time.
pub fn ode_step(z: &Tensor, v: &Tensor, dt: f32) -> Result<Tensor> {
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("step size {dt} must be positive")));
    }
    z.zip_map(v, |z, v| z - v * dt)
}

/// `(a, c)` such that the SDE mean is `a*z + c*v`: the drift
/// `v - eps^2/2 * score` expanded with the score written in terms of `v`.
pub fn sde_coefficients(t: f32, dt: f32, eps: f32) -> (f32, f32) {
    let (t, dt, e2) = (t as f64, dt as f64, (eps as f64).powi(2));
    let a = 1.0 - 0.5 * e2 * dt / t;
    let c = -(dt + 0.5 * e2 * dt * (1.0 - t) / t);
    (a as f32, c as f32)
}

/// Mean of one Euler–Maruyama step. Shared by sampling and policy evaluation
/// so both produce bitwise-identical means.
pub fn sde_mean(z: &[f32], v: &[f32], a: f32, c: f32) -> Vec<f32> {
    z.iter().zip(v).map(|(&z, &v)| z * a + v * c).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SdeStep {
    pub next: Tensor,
    pub mean: Tensor,
    pub std: f64,
}

/// `mean = z - (v - eps^2/2 * score) dt`, `std = eps * sqrt(dt)`,
/// `next = mean + std * xi`.
pub fn sde_step(
    z: &Tensor,
    v: &Tensor,
    t: f32,
    dt: f32,
    eps: f32,
    rng: &mut RngStream,
) -> Result<SdeStep> {
    check_t(t, T_MIN)?;
    if !(dt > 0.0) || !(eps >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "need dt > 0 and eps >= 0, got {dt}, {eps}"
        )));
    }
    if z.shape() != v.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", z.shape(), v.shape())));
    }
    let (a, c) = sde_coefficients(t, dt, eps);
    let mean = Tensor::from_vec(z.shape().to_vec(), sde_mean(z.data(), v.data(), a, c))?;
    let std = eps as f64 * (dt as f64).sqrt();
    let next = if std == 0.0 {
        mean.clone()
    } else {
        let xi = gaussian_sample(z.shape(), rng);
        let s = std as f32;
        mean.zip_map(&xi, |m, x| m + s * x)?
    };
    Ok(SdeStep { next, mean, std })
}

/// `log N(action; mean, std^2 I)`.
pub fn transition_logprob(action: &Tensor, mean: &Tensor, std: f64) -> Result<f64> {
    if !(std > 0.0) {
        return Err(Error::InvalidArgument(format!("std {std} must be positive")));
    }
    if action.shape() != mean.shape() {
        return Err(Error::Shape(format!(
            "{:?} vs {:?}",
            action.shape(),
            mean.shape()
        )));
    }
    Ok(crate::autograd::gaussian_logprob(action.data(), mean.data(), std))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub t_min: f32,
    /// Constant noise scale of the stochastic sampler.
    pub eta: f32,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 20,
            t_min: T_MIN,
            eta: 0.3,
        }
    }
}

/// Uniform grid `1 = t_T > ... > t_0 = t_min` with constant noise scale.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSchedule {
    pub timesteps: Vec<f32>,
    pub eta: f32,
    pub t_min: f32,
}

impl SampleSchedule {
    pub fn new(config: &ScheduleConfig) -> Result<Self> {
        if config.steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(config.t_min >= T_MIN && config.t_min < 1.0) {
            return Err(Error::Config(format!(
                "t_min {} must lie in [{T_MIN}, 1)",
                config.t_min
            )));
        }
        if !(config.eta >= 0.0 && config.eta.is_finite()) {
            return Err(Error::Config(format!("eta {} must be >= 0", config.eta)));
        }
        let n = config.steps;
        let span = 1.0 - config.t_min as f64;
        let timesteps = (0..=n)
            .map(|k| (1.0 - span * k as f64 / n as f64) as f32)
            .collect();
        Ok(Self {
            timesteps,
            eta: config.eta,
            t_min: config.t_min,
        })
    }

    pub fn steps(&self) -> usize {
        self.timesteps.len() - 1
    }

    /// `(t, dt)` of step `k`, counted from `t = 1`.
    pub fn step(&self, k: usize) -> (f32, f32) {
        let t = self.timesteps[k];
        (t, t - self.timesteps[k + 1])
    }

    pub fn eps(&self, _t: f32) -> f32 {
        self.eta
    }

    pub fn deterministic(&self) -> Self {
        Self {
            eta: 0.0,
            ..self.clone()
        }
    }
}

/// `mask * generated + (1 - mask) * source`.
pub fn composite(generated: &Tensor, source: &Tensor, mask: &Tensor) -> Result<Tensor> {
    if generated.shape() != source.shape() || generated.len() != 3 * mask.len() {
        return Err(Error::Shape(format!(
            "composite of {:?}, {:?}, {:?}",
            generated.shape(),
            source.shape(),
            mask.shape()
        )));
    }
    let hw = mask.len();
    let m = mask.data();
    let data = generated
        .data()
        .iter()
        .zip(source.data())
        .enumerate()
        .map(|(i, (&g, &s))| {
            let mi = m[i % hw];
            mi * g + (1.0 - mi) * s
        })
        .collect();
    Tensor::from_vec(generated.shape().to_vec(), data)
}

/// Conditioning shared by every step of a rollout.
pub struct Conditioning {
    pub source: Tensor,
    pub mask: Tensor,
    pub image: Tensor,
    pub plan: MattingPlan,
}

impl Conditioning {
    pub fn new(sample: &SceneSample, patch_size: usize) -> Result<Self> {
        let partition = region_partition(&sample.labels, patch_size)?;
        Ok(Self {
            source: sample.masked_source(),
            mask: sample.mask.clone(),
            image: sample.image.clone(),
            plan: build_bias_masks(&partition),
        })
    }

    pub fn plan_for(&self, matting: bool) -> Option<&MattingPlan> {
        matting.then_some(&self.plan)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    /// `T + 1` states, `states[0] = z_1`.
    pub states: Vec<Tensor>,
    /// `actions[k] = states[k + 1]`.
    pub actions: Vec<Tensor>,
    pub timesteps: Vec<f32>,
    pub logprobs: Vec<f64>,
    pub stds: Vec<f64>,
    pub matting: bool,
    pub final_image: Tensor,
    pub init_noise_id: u64,
    pub step_stream: u64,
}

/// Initial noise `z_1` for an init id.
pub fn init_noise(master_seed: u64, init_noise_id: u64, shape: &[usize]) -> Tensor {
    gaussian_sample(
        shape,
        &mut RngStream::keyed(master_seed, &[domain::INIT_NOISE, init_noise_id]),
    )
}

/// One full reverse trajectory. Per-step noise comes from the stream
/// `(master_seed, STEP_NOISE, step_stream)`.
#[allow(clippy::too_many_arguments)]
pub fn rollout(
    net: &VelocityNet,
    cond: &Conditioning,
    schedule: &SampleSchedule,
    master_seed: u64,
    init_noise_id: u64,
    step_stream: u64,
    matting: bool,
) -> Result<Trajectory> {
    let z1 = init_noise(master_seed, init_noise_id, cond.source.shape());
    let mut rng = RngStream::keyed(master_seed, &[domain::STEP_NOISE, step_stream]);
    let plan = cond.plan_for(matting);
    let n = schedule.steps();
    let mut states = Vec::with_capacity(n + 1);
    let mut actions = Vec::with_capacity(n);
    let mut logprobs = Vec::with_capacity(n);
    let mut stds = Vec::with_capacity(n);
    states.push(z1);
    for k in 0..n {
        let (t, dt) = schedule.step(k);
        let z = &states[k];
        let v = net.velocity_forward(z, &cond.source, &cond.mask, t, plan)?;
        let step = sde_step(z, &v, t, dt, schedule.eps(t), &mut rng)?;
        let lp = if step.std > 0.0 {
            transition_logprob(&step.next, &step.mean, step.std)?
        } else {
            0.0
        };
        if !lp.is_finite() || !step.next.is_finite() {
            return Err(Error::numerical("sde_step"));
        }
        logprobs.push(lp);
        stds.push(step.std);
        actions.push(step.next.clone());
        states.push(step.next);
    }
    let final_image = composite(&states[n], &cond.image, &cond.mask)?;
    Ok(Trajectory {
        states,
        actions,
        timesteps: schedule.timesteps.clone(),
        logprobs,
        stds,
        matting,
        final_image,
        init_noise_id,
        step_stream,
    })
}

/// Deterministic (ODE) inpainting used for evaluation.
pub fn sample_ode(
    net: &VelocityNet,
    cond: &Conditioning,
    schedule: &SampleSchedule,
    master_seed: u64,
    init_noise_id: u64,
    matting: bool,
) -> Result<Tensor> {
    let mut z = init_noise(master_seed, init_noise_id, cond.source.shape());
    let plan = cond.plan_for(matting);
    for k in 0..schedule.steps() {
        let (t, dt) = schedule.step(k);
        let v = net.velocity_forward(&z, &cond.source, &cond.mask, t, plan)?;
        z = ode_step(&z, &v, dt)?;
    }
    if !z.is_finite() {
        return Err(Error::numerical("ode_step"));
    }
    composite(&z, &cond.image, &cond.mask)
}

#[derive(Serialize)]
struct TrajDump<'a> {
    timesteps: &'a [f32],
    logprobs: &'a [f64],
    stds: &'a [f64],
    matting: bool,
    init_noise_id: u64,
    step_stream: u64,
    states: Vec<String>,
    final_image: &'static str,
}

/// Debug dump: one `.nt` per state, the final image and `traj.json`.
pub fn dump_trajectory(traj: &Trajectory, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::new();
    for (k, s) in traj.states.iter().enumerate() {
        let name = format!("state_{k:03}.nt");
        s.save_nt(&dir.join(&name))?;
        names.push(name);
    }
    traj.final_image.save_nt(&dir.join("final.nt"))?;
    let dump = TrajDump {
        timesteps: &traj.timesteps,
        logprobs: &traj.logprobs,
        stds: &traj.stds,
        matting: traj.matting,
        init_noise_id: traj.init_noise_id,
        step_stream: traj.step_stream,
        states: names,
        final_image: "final.nt",
    };
    let path = dir.join("traj.json");
    let json = serde_json::to_vec_pretty(&dump).expect("dump serializes");
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f32) -> Tensor {
        Tensor::from_vec(vec![1], vec![v]).unwrap()
    }

    #[test]
    fn point_mass_score() {
        let s = score_from_velocity(&scalar(1.0), &scalar(2.0), 0.5).unwrap();
        assert!((s.item() + 4.0).abs() < 1e-6);
        // direct score of N((1-t) x0, t^2) at z with x0 = 0
        let direct = -(1.0 - 0.5 * 0.0) / (0.5f32 * 0.5);
        assert!((s.item() - direct).abs() < 1e-6);
    }

    #[test]
    fn score_zero_and_linearity() {
        let t = 0.3;
        let v = scalar(1.7);
        let z = scalar(-(1.0 - t) * 1.7);
        assert!(score_from_velocity(&z, &v, t).unwrap().item().abs() < 1e-6);
        let z = scalar(0.4);
        let a = score_from_velocity(&z, &scalar(3.4), t).unwrap().item();
        let b = score_from_velocity(&z, &v, t).unwrap().item();
        assert!((a - b - (-(1.0 - t) * 1.7 / t)).abs() < 1e-5);
        assert!(score_from_velocity(&z, &v, 0.01).is_err());
    }

    #[test]
    fn ode_arithmetic() {
        assert!((ode_step(&scalar(1.0), &scalar(2.0), 0.1).unwrap().item() - 0.8).abs() < 1e-7);
        assert_eq!(ode_step(&scalar(0.3), &scalar(0.0), 0.1).unwrap().item(), 0.3);
    }

    #[test]
    fn zero_noise_sde_is_ode() {
        let mut s = RngStream::new(0, 0);
        let z = gaussian_sample(&[3, 4, 4], &mut s);
        let v = gaussian_sample(&[3, 4, 4], &mut s);
        let step = sde_step(&z, &v, 0.6, 0.05, 0.0, &mut s).unwrap();
        let ode = ode_step(&z, &v, 0.05).unwrap();
        assert!(step.next.max_abs_diff(&ode) <= 1e-6);
        assert_eq!(step.std, 0.0);
    }

    #[test]
    fn std_contract() {
        let mut s = RngStream::new(0, 0);
        let step = sde_step(&scalar(0.0), &scalar(0.0), 0.5, 0.04, 0.3, &mut s).unwrap();
        assert_eq!(step.std, 0.3f32 as f64 * (0.04f32 as f64).sqrt());
    }

    #[test]
    fn logprob_values() {
        let lp = transition_logprob(&scalar(0.0), &scalar(0.0), 1.0).unwrap();
        assert!((lp + 0.918_938_533).abs() < 1e-8);
        let a = Tensor::full(&[3], 0.2);
        let m = Tensor::full(&[3], 0.2);
        let l1 = transition_logprob(&a, &m, 0.5).unwrap();
        let l2 = transition_logprob(&a, &m, 1.0).unwrap();
        assert!((l1 - l2 - 3.0 * 2f64.ln()).abs() < 1e-9);
        let off = transition_logprob(&Tensor::full(&[3], 0.3), &m, 0.5).unwrap();
        assert!(off < l1);
        assert!(transition_logprob(&a, &m, 0.0).is_err());
    }

    #[test]
    fn schedule_grid() {
        let s = SampleSchedule::new(&ScheduleConfig::default()).unwrap();
        assert_eq!(s.steps(), 20);
        assert_eq!(s.timesteps[0], 1.0);
        assert!((s.timesteps[20] - 0.05).abs() < 1e-7);
        assert!(s.timesteps.windows(2).all(|w| w[0] > w[1]));
        assert!(SampleSchedule::new(&ScheduleConfig {
            steps: 0,
            ..Default::default()
        })
        .is_err());
    }

    #[test]
    fn composite_restores_known_pixels() {
        let g = Tensor::full(&[3, 2, 2], 0.9);
        let src = Tensor::full(&[3, 2, 2], 0.1);
        let mask = Tensor::from_vec(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let out = composite(&g, &src, &mask).unwrap();
        assert_eq!(out.data()[..4], [0.9, 0.1, 0.1, 0.9]);
        assert_eq!(out.data()[8..], [0.9, 0.1, 0.1, 0.9]);
    }
}
