//! Shared fixtures for the benchmarks.

use flowdistill::config::RunConfig;
use flowdistill::models::{Condition, VelocityNet};
use flowdistill::teacher::Teacher;
use flowdistill::{Rng, Tensor};

/// Desk-profile network with a non-zero output layer.
pub fn desk_net(seed: u64) -> VelocityNet {
    let cfg = RunConfig::desk().net;
    let mut net = VelocityNet::new(cfg, &mut Rng::new(seed)).expect("desk net config is valid");
    let k = net.params().len();
    let mut r = Rng::new(seed + 1);
    for i in [k - 2, k - 1] {
        let shape = net.params().tensors()[i].shape().to_vec();
        net.params_mut().tensors_mut()[i] = r.uniform_tensor(&shape, -0.3, 0.3);
    }
    net
}

pub fn desk_teacher(seed: u64) -> Teacher {
    Teacher {
        net: desk_net(seed),
        cond_dropout_p: 0.1,
    }
}

/// `n` standard-normal points with cycling class labels.
pub fn batch(n: usize, classes: usize, seed: u64) -> (Tensor, Vec<Condition>) {
    let x = Rng::new(seed).normal_tensor(&[n, 2]);
    let c = (0..n).map(|i| Condition::Class(i % classes)).collect();
    (x, c)
}
