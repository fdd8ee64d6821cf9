#![allow(dead_code)]

use flowdistill::error::Result;
use flowdistill::ndcore::{check_gradients, GradCheck, Rng, Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;

/// Deterministic non-uniform weights so every output element matters.
fn weights_like(t: &Tensor) -> Tensor {
    let data = (0..t.len()).map(|k| 0.3 + ((k as f64 * 0.618_033_988_75).fract()) * 0.7).collect();
    Tensor::new(t.shape(), data).unwrap()
}

/// `sum(w * out)` with fixed weights.
pub fn reduce(tape: &mut Tape, out: Var) -> Result<Var> {
    if tape.value(out).len() == 1 && tape.value(out).shape().is_empty() {
        return Ok(out);
    }
    let w = tape.constant(weights_like(tape.value(out)))?;
    let p = tape.mul(out, w)?;
    tape.sum(p)
}

type Build = fn(&mut Tape, &[Var]) -> Result<Var>;

/// One differentiable primitive: input shapes and how to apply it.
pub struct PrimitiveCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub build: Build,
}

pub fn primitive_cases() -> Vec<PrimitiveCase> {
    fn case(name: &'static str, shapes: &[&[usize]], build: Build) -> PrimitiveCase {
        PrimitiveCase {
            name,
            shapes: shapes.iter().map(|s| s.to_vec()).collect(),
            build,
        }
    }
    vec![
        case("add", &[&[3, 4], &[3, 4]], |t, v| { let o = t.add(v[0], v[1])?; reduce(t, o) }),
        case("sub", &[&[3, 4], &[3, 4]], |t, v| { let o = t.sub(v[0], v[1])?; reduce(t, o) }),
        case("mul", &[&[3, 4], &[3, 4]], |t, v| { let o = t.mul(v[0], v[1])?; reduce(t, o) }),
        case("scale", &[&[3, 4]], |t, v| { let o = t.scale(v[0], -1.7)?; reduce(t, o) }),
        case("mul_col", &[&[3, 4], &[3, 1]], |t, v| { let o = t.mul_col(v[0], v[1])?; reduce(t, o) }),
        case("matmul", &[&[3, 4], &[4, 2]], |t, v| { let o = t.matmul(v[0], v[1])?; reduce(t, o) }),
        case("affine", &[&[3, 4], &[4, 2], &[2]], |t, v| { let o = t.affine(v[0], v[1], v[2])?; reduce(t, o) }),
        case("add_row", &[&[3, 4], &[4]], |t, v| { let o = t.add_row(v[0], v[1])?; reduce(t, o) }),
        case("transpose", &[&[3, 4]], |t, v| { let o = t.transpose(v[0])?; reduce(t, o) }),
        case("silu", &[&[3, 4]], |t, v| { let o = t.silu(v[0])?; reduce(t, o) }),
        case("layer_norm", &[&[3, 5], &[5], &[5]], |t, v| { let o = t.layer_norm(v[0], v[1], v[2])?; reduce(t, o) }),
        case("sum", &[&[3, 4]], |t, v| t.sum(v[0])),
        case("mean", &[&[3, 4]], |t, v| t.mean(v[0])),
        case("mse", &[&[3, 4], &[3, 4]], |t, v| t.mse(v[0], v[1])),
        case("log_sigmoid", &[&[3, 4]], |t, v| { let o = t.log_sigmoid(v[0])?; reduce(t, o) }),
        case("softplus", &[&[3, 4]], |t, v| { let o = t.softplus(v[0])?; reduce(t, o) }),
        case("concat", &[&[3, 2], &[3, 1], &[3, 3]], |t, v| { let o = t.concat(&[v[0], v[1], v[2]])?; reduce(t, o) }),
        case("slice", &[&[3, 5]], |t, v| { let o = t.slice(v[0], 1, 4)?; reduce(t, o) }),
        case("sin", &[&[3, 4]], |t, v| { let o = t.sin(v[0])?; reduce(t, o) }),
        case("cos", &[&[3, 4]], |t, v| { let o = t.cos(v[0])?; reduce(t, o) }),
        case("gather", &[&[4, 3]], |t, v| { let o = t.gather(v[0], &[2, 0, 2, 1, 3])?; reduce(t, o) }),
        case("pool_rows", &[&[6, 3]], |t, v| { let o = t.pool_rows(v[0], 3)?; reduce(t, o) }),
    ]
}

pub fn random_inputs(shapes: &[Vec<usize>], rng: &mut Rng) -> Vec<Tensor> {
    shapes.iter().map(|s| rng.uniform_tensor(s, -1.5, 1.5)).collect()
}

/// Worst check over `points` random inputs for one primitive.
pub fn check_primitive(case: &PrimitiveCase, points: usize, seed: u64) -> GradCheck {
    let mut rng = Rng::new(seed);
    let mut worst: Option<GradCheck> = None;
    for _ in 0..points {
        let inputs = random_inputs(&case.shapes, &mut rng);
        let g = check_gradients(case.build, &inputs, FD_STEP).unwrap();
        if worst.as_ref().map_or(true, |w| g.max_rel_err > w.max_rel_err) {
            worst = Some(g);
        }
    }
    worst.expect("at least one point")
}

/// Activation applied after each hidden layer of a random network.
#[derive(Clone, Copy, Debug)]
pub enum Activation {
    Silu,
    Sin,
    Softplus,
    LayerNormSilu,
}

/// A 3-layer network with random activations and random skip connections.
#[derive(Clone, Debug)]
pub struct RandomWiring {
    pub activations: [Activation; 2],
    pub skip: bool,
    pub pool: bool,
}

impl RandomWiring {
    pub fn draw(rng: &mut Rng) -> Self {
        let pick = |r: &mut Rng| match r.below(4) {
            0 => Activation::Silu,
            1 => Activation::Sin,
            2 => Activation::Softplus,
            _ => Activation::LayerNormSilu,
        };
        Self {
            activations: [pick(rng), pick(rng)],
            skip: rng.bernoulli(0.5),
            pool: rng.bernoulli(0.5),
        }
    }
}

pub const NET_IN: usize = 3;
pub const NET_WIDTH: usize = 5;
pub const NET_ROWS: usize = 4;

/// Shapes of `[x, w0, b0, g0, c0, w1, b1, g1, c1, w2, b2, target]`.
pub fn network_shapes() -> Vec<Vec<usize>> {
    vec![
        vec![NET_ROWS, NET_IN],
        vec![NET_IN, NET_WIDTH],
        vec![NET_WIDTH],
        vec![NET_WIDTH],
        vec![NET_WIDTH],
        vec![NET_WIDTH, NET_WIDTH],
        vec![NET_WIDTH],
        vec![NET_WIDTH],
        vec![NET_WIDTH],
        vec![NET_WIDTH, 2],
        vec![2],
        vec![NET_ROWS, 2],
    ]
}

pub fn network_loss(t: &mut Tape, v: &[Var], wiring: &RandomWiring) -> Result<Var> {
    let act = |t: &mut Tape, h: Var, a: Activation, g: Var, c: Var| -> Result<Var> {
        match a {
            Activation::Silu => t.silu(h),
            Activation::Sin => t.sin(h),
            Activation::Softplus => t.softplus(h),
            Activation::LayerNormSilu => {
                let n = t.layer_norm(h, g, c)?;
                t.silu(n)
            }
        }
    };
    let h0 = t.affine(v[0], v[1], v[2])?;
    let h0 = act(t, h0, wiring.activations[0], v[3], v[4])?;
    let h1 = t.affine(h0, v[5], v[6])?;
    let mut h1 = act(t, h1, wiring.activations[1], v[7], v[8])?;
    if wiring.skip {
        h1 = t.add(h1, h0)?;
    }
    let out = t.affine(h1, v[9], v[10])?;
    if wiring.pool {
        let p = t.pool_rows(out, 2)?;
        let tp = t.pool_rows(v[11], 2)?;
        t.mse(p, tp)
    } else {
        t.mse(out, v[11])
    }
}

/// Worst check over `points` random parameter points, each with its own
/// random wiring.
pub fn check_random_networks(points: usize, seed: u64) -> GradCheck {
    let mut rng = Rng::new(seed);
    let mut worst: Option<GradCheck> = None;
    for _ in 0..points {
        let wiring = RandomWiring::draw(&mut rng);
        let inputs = random_inputs(&network_shapes(), &mut rng);
        let g = check_gradients(|t, v| network_loss(t, v, &wiring), &inputs, FD_STEP).unwrap();
        if worst.as_ref().map_or(true, |w| g.max_rel_err > w.max_rel_err) {
            worst = Some(g);
        }
    }
    worst.expect("at least one point")
}
