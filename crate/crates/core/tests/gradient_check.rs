mod oracles;

use chanstroke::agents::{DdpgAgent, DdpgHyper};
use chanstroke::nn::{Activation, Mlp};
use ndarray::Array2;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
}

/// Max relative error between backprop and central differences of
/// `L = sum(upstream * net(x))`, over `checks` sampled parameters (all when
/// `checks >= param_count`) and every input coordinate of the first row.
fn max_error(net: &Mlp, batch: usize, checks: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random_matrix(batch, net.input_dim(), &mut rng);
    let upstream = random_matrix(batch, net.output_dim(), &mut rng);

    let loss = |n: &Mlp, x: &Array2<f64>| -> f64 {
        x.outer_iter()
            .zip(upstream.outer_iter())
            .map(|(row, u)| {
                let y = oracles::naive_forward(n, row.as_slice().unwrap());
                y.iter().zip(u.iter()).map(|(a, b)| a * b).sum::<f64>()
            })
            .sum()
    };

    let (_, cache) = net.forward_batch(x.view()).unwrap();
    let (grads, input_grad) = net.backward(&cache, upstream.view()).unwrap();
    let analytic = grads.flat();

    let count = net.param_count();
    let picks: Vec<usize> = if checks >= count {
        (0..count).collect()
    } else {
        sample(&mut rng, count, checks).into_vec()
    };
    let mut worst = 0.0_f64;
    for k in picks {
        let numeric = oracles::central_difference(net, k, H, |n| loss(n, &x));
        worst = worst.max(oracles::relative_error(analytic[k], numeric));
    }
    let input_checks = net.input_dim().min(checks);
    for j in 0..input_checks {
        let mut xp = x.clone();
        xp[[0, j]] += H;
        let mut xm = x.clone();
        xm[[0, j]] -= H;
        let numeric = (loss(net, &xp) - loss(net, &xm)) / (2.0 * H);
        worst = worst.max(oracles::relative_error(input_grad[[0, j]], numeric));
    }
    worst
}

#[test]
fn small_net_every_parameter() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for (hidden, out) in [
        (Activation::Relu, Activation::Identity),
        (Activation::Tanh, Activation::Tanh),
        (Activation::Relu, Activation::Tanh),
    ] {
        let net = Mlp::new(&[3, 4, 2], hidden, out, &mut rng);
        let err = max_error(&net, 5, usize::MAX, 1);
        assert!(err < 1e-4, "3-4-2 {hidden:?}/{out:?}: {err:e}");
    }
}

#[test]
fn agent_network_shapes() {
    // Raw-window agents see 30x6 features, the multi-scale agent 4 layers of
    // 30x6; both add two portfolio weights.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for state_dim in [182, 722] {
        let actor = Mlp::new(&[state_dim, 128, 64, 1], Activation::Relu, Activation::Tanh, &mut rng);
        let critic = Mlp::new(&[state_dim + 1, 128, 64, 1], Activation::Relu, Activation::Identity, &mut rng);
        let dqn = Mlp::new(&[state_dim, 128, 64, 7], Activation::Relu, Activation::Identity, &mut rng);
        for (name, net) in [("actor", &actor), ("critic", &critic), ("dqn", &dqn)] {
            let err = max_error(net, 3, 400, state_dim as u64);
            assert!(err < 1e-4, "{name} {:?}: {err:e}", net.sizes());
        }
    }
}

#[test]
fn actor_gradient_through_critic() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let hyper = DdpgHyper {
        hidden: vec![16, 8],
        ..DdpgHyper::default()
    };
    let agent = DdpgAgent::new(6, hyper, &mut rng).unwrap();
    let states = random_matrix(4, 6, &mut rng);

    // Objective the actor descends: minus the mean critic value of its actions.
    let objective = |actor: &Mlp| -> f64 {
        let total: f64 = states
            .outer_iter()
            .map(|s| {
                let s = s.as_slice().unwrap();
                let a = oracles::naive_forward(actor, s)[0];
                let mut sa = s.to_vec();
                sa.push(a);
                oracles::naive_forward(&agent.critic, &sa)[0]
            })
            .sum();
        -total / states.nrows() as f64
    };

    let (_, grads) = agent.actor_gradient(states.view()).unwrap();
    let analytic = grads.flat();
    let mut worst = 0.0_f64;
    for (k, &a) in analytic.iter().enumerate() {
        let numeric = oracles::central_difference(&agent.actor, k, H, objective);
        worst = worst.max(oracles::relative_error(a, numeric));
    }
    assert!(worst < 1e-4, "{worst:e}");
}
