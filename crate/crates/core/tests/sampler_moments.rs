//! The stochastic sampler against the exact first and second moments of its
//! own discrete recursion, for a point-mass target where the velocity is known
//! in closed form.

use flowpaint::rng::{gaussian_sample, RngStream};
use flowpaint::sampler::{sde_step, SampleSchedule, ScheduleConfig};
use flowpaint::Tensor;

/// One step maps `z` to `alpha z + beta + std xi`. Built from the drift
/// `v - eps^2/2 * score` with `score = -(z + (1-t) v) / t` and `v = (z - x0)/t`.
fn affine_step(t: f64, dt: f64, eps: f64, x0: f64) -> (f64, f64, f64) {
    let mean = |z: f64| {
        let v = (z - x0) / t;
        let score = -(z + (1.0 - t) * v) / t;
        z - (v - 0.5 * eps * eps * score) * dt
    };
    let beta = mean(0.0);
    (mean(1.0) - beta, beta, eps * dt.sqrt())
}

fn run(steps: usize, eta: f32, n: usize, seed: u64) {
    let x0 = 0.7;
    let schedule = SampleSchedule::new(&ScheduleConfig {
        steps,
        t_min: 0.05,
        eta,
    })
    .unwrap();
    let mut rng = RngStream::new(seed, 0);
    let mut z = gaussian_sample(&[n], &mut rng);
    let (mut m, mut var) = (0.0f64, 1.0f64);
    for k in 0..schedule.steps() {
        let (t, dt) = schedule.step(k);
        let v: Tensor = z.map(|z| (z - x0 as f32) / t);
        z = sde_step(&z, &v, t, dt, schedule.eps(t), &mut rng).unwrap().next;
        let (alpha, beta, std) = affine_step(t as f64, dt as f64, schedule.eps(t) as f64, x0);
        m = alpha * m + beta;
        var = alpha * alpha * var + std * std;

        let d: Vec<f64> = z.data().iter().map(|&v| v as f64).collect();
        let mean = d.iter().sum::<f64>() / n as f64;
        let emp = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let se_mean = (var / n as f64).sqrt();
        let se_var = var * (2.0 / n as f64).sqrt();
        assert!((mean - m).abs() < 5.0 * se_mean + 1e-5, "step {k}: mean {mean} vs {m}");
        assert!((emp - var).abs() < 5.0 * se_var + 1e-6, "step {k}: var {emp} vs {var}");
    }
}

#[test]
fn sde_moments_follow_the_discrete_recursion() {
    run(50, 0.3, 20_000, 1);
    run(20, 0.3, 20_000, 2);
    run(10, 0.7, 20_000, 3);
}

#[test]
fn zero_noise_collapses_onto_the_target_path() {
    run(20, 0.0, 2_000, 4);
}
