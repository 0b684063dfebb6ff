use flowpaint::autograd::Graph;
use flowpaint::matting::{build_bias_masks, TokenClass, TokenPartition};
use flowpaint::model::{NetConfig, VelocityNet};
use flowpaint::rng::RngStream;
use flowpaint::Tensor;

const STEP: f64 = 1e-2;

fn config() -> NetConfig {
    NetConfig {
        patch_size: 4,
        embed_dim: 16,
        depth: 2,
        heads: 2,
        mlp_ratio: 2,
    }
}

fn randomized(seed: u64) -> VelocityNet {
    let mut net = VelocityNet::new(config(), seed).unwrap();
    let mut rng = RngStream::keyed(seed, &[99]);
    for t in net.params.tensors_mut() {
        for v in t.data_mut() {
            *v += 0.15 * rng.normal();
        }
    }
    net
}

fn field(shape: &[usize], rng: &mut RngStream, lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| lo + (hi - lo) * rng.uniform() as f32).collect();
    Tensor::from_vec(shape.to_vec(), data).unwrap()
}

fn mean_velocity(net: &VelocityNet, inputs: &(Tensor, Tensor, Tensor), t: f32, plan: Option<&flowpaint::matting::MattingPlan>) -> f64 {
    let v = net.velocity_forward(&inputs.0, &inputs.1, &inputs.2, t, plan).unwrap();
    v.data().iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64
}

fn check(matting: bool) {
    let net = randomized(3);
    let mut rng = RngStream::keyed(11, &[1]);
    let h = 8;
    let zt = field(&[3, h, h], &mut rng, -1.0, 1.0);
    let mut mask = Tensor::zeros(&[1, h, h]);
    for y in 2..6 {
        for x in 0..5 {
            mask.data_mut()[y * h + x] = 1.0;
        }
    }
    let src = field(&[3, h, h], &mut rng, 0.0, 1.0);
    let src = flowpaint::synth::masked_source(&src, &mask);
    let inputs = (zt, src, mask);
    let plan = build_bias_masks(&TokenPartition::new(vec![
        TokenClass::Mask,
        TokenClass::Foreground,
        TokenClass::Background,
        TokenClass::Mask,
    ]));
    let plan = matting.then_some(&plan);
    let t = 0.4;

    let mut g = Graph::new();
    let v = net
        .record(&mut g, &inputs.0, &inputs.1, &inputs.2, t, plan)
        .unwrap();
    let loss = g.mean(v);
    let grads = g.backward(loss).unwrap().params();

    let names: Vec<String> = net.params.iter().map(|(n, _)| n.to_string()).collect();
    assert_eq!(grads.len(), names.len(), "every parameter gets a gradient");
    let mut dir_rng = RngStream::keyed(5, &[2]);
    for (slot, name) in names.iter().enumerate() {
        let analytic = &grads[&slot];
        let norm = analytic.iter().map(|&g| (g as f64).powi(2)).sum::<f64>().sqrt();
        assert!(norm > 1e-6, "{name}: vanishing gradient");
        // along the gradient itself and along a random direction
        let random: Vec<f64> = (0..analytic.len()).map(|_| dir_rng.normal() as f64).collect();
        let along: Vec<f64> = analytic.iter().map(|&g| g as f64).collect();
        for dir in [along, random] {
            let len = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
            let u: Vec<f64> = dir.iter().map(|d| d / len).collect();
            let central = |step: f64| {
                let shifted = |sign: f64| {
                    let mut n = net.clone();
                    let data = n.params.get_mut(name).unwrap().data_mut();
                    for (x, d) in data.iter_mut().zip(&u) {
                        *x += (sign * step * d) as f32;
                    }
                    mean_velocity(&n, &inputs, t, plan)
                };
                (shifted(1.0) - shifted(-1.0)) / (2.0 * step)
            };
            // Richardson extrapolation cancels the O(h^2) term, which lets
            // the step stay large relative to f32 rounding.
            let fd = (4.0 * central(STEP) - central(2.0 * STEP)) / 3.0;
            let exact: f64 = analytic.iter().zip(&u).map(|(&g, d)| g as f64 * d).sum();
            let rel = (fd - exact).abs() / norm;
            assert!(rel < 1e-3, "{name}: relative error {rel:.2e}");
        }
    }
}

#[test]
fn mean_velocity_gradient_matches_finite_differences() {
    check(false);
}

#[test]
fn gradient_through_matting_matches_finite_differences() {
    check(true);
}
