//! Finite-difference cases shared by the gradient tests and the acceptance run.

use mosa::adapters::{build_sparse_adapter_baseline, Activation, AdapterConfig, AdapterSet, Insertion, Method, Routing};
use mosa::backbone::FrozenModel;
use mosa::rng::Rng;
use mosa::tensor::{grad_check, Pool, Tape, Tensor, Var};
use mosa::training::{consistency_objective, sample_routing, PassOutputs};
use mosa::Result;

use super::{model_and_adapters, randomize_adapters, random_images, tiny_backbone};

pub const EPS: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

type Body = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub body: Body,
}

/// Contracts `out` with a fixed random weight tensor so every output entry
/// contributes a distinct coefficient to the scalar.
fn contract(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let w = Tensor::randn(shape, 1.0, &mut Rng::new(seed ^ 0x5EED));
    let wv = tape.constant(&w);
    let p = tape.mul(out, wv)?;
    tape.sum(p)
}

fn randn(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::randn(shape.to_vec(), 1.0, rng)
}

fn unary(name: &'static str, x: Tensor, seed: u64, f: fn(&mut Tape, Var) -> Result<Var>) -> OpCase {
    OpCase {
        name,
        inputs: vec![x],
        body: Box::new(move |t, v| {
            let y = f(t, v[0])?;
            contract(t, y, seed)
        }),
    }
}

fn binary(name: &'static str, a: Tensor, b: Tensor, seed: u64, f: fn(&mut Tape, Var, Var) -> Result<Var>) -> OpCase {
    OpCase {
        name,
        inputs: vec![a, b],
        body: Box::new(move |t, v| {
            let y = f(t, v[0], v[1])?;
            contract(t, y, seed)
        }),
    }
}

/// One case per differentiable tape operation, with inputs drawn from `seed`.
pub fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut rng = Rng::new(seed);
    let r = &mut rng;
    let positive = |r: &mut Rng| Tensor::from_fn([3, 4], |_| 0.5 + r.uniform() * 2.0);
    let labels: Vec<usize> = (0..3).map(|_| r.below(5)).collect();
    let off = r.below(5);
    vec![
        binary("matmul", randn(&[3, 4], r), randn(&[4, 5], r), seed, |t, a, b| t.matmul(a, b)),
        binary("matmul_batched", randn(&[2, 3, 4], r), randn(&[4, 2], r), seed, |t, a, b| t.matmul(a, b)),
        binary("add_bias", randn(&[2, 3, 4], r), randn(&[4], r), seed, |t, a, b| t.add_bias(a, b)),
        binary("add", randn(&[3, 4], r), randn(&[3, 4], r), seed, |t, a, b| t.add(a, b)),
        binary("sub", randn(&[3, 4], r), randn(&[3, 4], r), seed, |t, a, b| t.sub(a, b)),
        binary("mul", randn(&[3, 4], r), randn(&[3, 4], r), seed, |t, a, b| t.mul(a, b)),
        unary("scale", randn(&[3, 4], r), seed, |t, x| t.scale(x, -0.7)),
        unary("relu", randn(&[3, 4], r), seed, |t, x| t.relu(x)),
        unary("gelu", randn(&[3, 4], r), seed, |t, x| t.gelu(x)),
        unary("exp", randn(&[3, 4], r), seed, |t, x| t.exp(x)),
        unary("log", positive(r), seed, |t, x| t.log(x)),
        unary("softmax", randn(&[3, 5], r), seed, |t, x| t.softmax(x)),
        OpCase {
            name: "layer_norm",
            inputs: vec![randn(&[2, 3, 6], r), randn(&[6], r), randn(&[6], r)],
            body: Box::new(move |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2])?;
                contract(t, y, seed)
            }),
        },
        unary("mean", randn(&[3, 4], r), seed, |t, x| {
            let s = t.scale(x, 1.3)?;
            let m = t.mean(s)?;
            t.mul(m, m)
        }),
        unary("sum", randn(&[3, 4], r), seed, |t, x| {
            let e = t.exp(x)?;
            t.sum(e)
        }),
        unary("reshape", randn(&[3, 4], r), seed, |t, x| t.reshape(x, &[2, 6])),
        unary("attention", randn(&[2, 3, 12], r), seed, |t, x| t.attention(x, 2)),
        OpCase {
            name: "tokens_cls",
            inputs: vec![randn(&[2, 3, 4], r), randn(&[4], r), randn(&[4, 4], r)],
            body: Box::new(move |t, v| {
                let y = t.tokens(v[0], Some(v[1]), v[2])?;
                contract(t, y, seed)
            }),
        },
        binary("tokens_no_cls", randn(&[2, 3, 4], r), randn(&[3, 4], r), seed, |t, a, b| t.tokens(a, None, b)),
        unary("pool_cls", randn(&[2, 3, 4], r), seed, |t, x| t.pool(x, Pool::Cls)),
        unary("pool_mean", randn(&[2, 3, 4], r), seed, |t, x| t.pool(x, Pool::Mean)),
        OpCase {
            name: "add_cols",
            inputs: vec![randn(&[2, 3, 7], r), randn(&[2, 3, 2], r)],
            body: Box::new(move |t, v| {
                let y = t.add_cols(v[0], v[1], off)?;
                contract(t, y, seed)
            }),
        },
        OpCase {
            name: "cross_entropy",
            inputs: vec![randn(&[3, 5], r)],
            body: Box::new(move |t, v| t.cross_entropy(v[0], &labels)),
        },
        binary("kl_div", randn(&[3, 5], r), randn(&[3, 5], r), seed, |t, a, b| {
            let p = t.softmax(a)?;
            let q = t.softmax(b)?;
            t.kl_div(p, q)
        }),
        binary("mse", randn(&[2, 3, 4], r), randn(&[2, 3, 4], r), seed, |t, a, b| t.mse(a, b)),
    ]
}

/// Worst relative error of one op case (infinite if the case errored).
pub fn check_op(case: &OpCase) -> (f64, Option<String>) {
    let report = grad_check(&case.body, &case.inputs, EPS, TOL);
    (report.max_rel_error, report.error)
}

/// Adapter flavours cycled through by seed for the full-model check.
pub fn forward_config(seed: u64) -> AdapterConfig {
    match seed % 5 {
        0 => AdapterConfig::mosa(3, 3),
        1 => AdapterConfig {
            hierarchical: false,
            sparsify_down: true,
            activation: Activation::Gelu,
            insertion: Insertion::Houlsby,
            ..AdapterConfig::mosa(3, 2)
        },
        2 => AdapterConfig { method: Method::Mosl, bottleneck_dim: 2, num_experts: 2, ..Default::default() },
        3 => AdapterConfig { insertion: Insertion::Pfeiffer, scale: 0.5, ..AdapterConfig::standard(4) },
        _ => AdapterConfig { method: Method::BiasTuning, ..AdapterConfig::standard(2) },
    }
}

fn objective(model: &FrozenModel, adapters: &AdapterSet, images: &Tensor, labels: &[usize], r1: &Routing, r2: &Routing) -> Result<(Tape, Var)> {
    let mut tape = Tape::new();
    let o1 = model.forward(&mut tape, images, Some(adapters), r1)?;
    let o2 = model.forward(&mut tape, images, Some(adapters), r2)?;
    let half = model.cfg.num_layers / 2;
    let (loss, _) = consistency_objective(
        &mut tape,
        PassOutputs { logits: o1.logits, features: &o1.features[..half] },
        Some(PassOutputs { logits: o2.logits, features: &o2.features[..half] }),
        labels,
        1.0,
        1.0,
    )?;
    Ok((tape, loss))
}

/// Checks d(loss)/d(every trainable parameter) of the two-pass objective on
/// the tiny backbone against central differences. Returns the worst
/// relative error and the parameter it occurred in.
pub fn check_full_forward(seed: u64) -> Result<(f64, String)> {
    let bcfg = tiny_backbone();
    let acfg = forward_config(seed);
    let (mut model, mut adapters) = model_and_adapters(&bcfg, &acfg, seed);
    if seed % 5 == 3 {
        adapters = build_sparse_adapter_baseline(&adapters, 0.5, &mut Rng::new(seed))?;
    }
    randomize_adapters(&mut adapters, seed);
    let mut rng = Rng::new(seed ^ 0xF00D);
    for p in model.params_mut() {
        if p.trainable() {
            for v in p.tensor.data_mut() {
                *v = 0.3 * rng.normal();
            }
        }
    }
    let images = random_images(2, &bcfg, seed);
    let labels: Vec<usize> = (0..2).map(|_| rng.below(bcfg.num_classes)).collect();
    let (r1, r2) = sample_routing(&mut rng, &adapters, false)?;

    let (mut tape, loss) = objective(&model, &adapters, &images, &labels, &r1, &r2)?;
    tape.backward(loss)?;
    let eval = |m: &FrozenModel, a: &AdapterSet| -> Result<f64> {
        let (t, l) = objective(m, a, &images, &labels, &r1, &r2)?;
        Ok(t.scalar(l))
    };

    let mut worst = (0.0f64, String::new());
    let mut record = |err: f64, name: &str| {
        if err > worst.0 || worst.1.is_empty() {
            worst = (err, name.to_string());
        }
    };
    let n_model = model.params().len();
    for pi in 0..n_model {
        let p = model.params()[pi];
        if !p.trainable() {
            continue;
        }
        let name = p.name.clone();
        let analytic = tape.param_grad(&name).map(<[f64]>::to_vec).unwrap_or(vec![0.0; p.tensor.numel()]);
        for e in 0..analytic.len() {
            let numeric = central(|delta| {
                let mut m = model.clone();
                m.params_mut()[pi].tensor.data_mut()[e] += delta;
                eval(&m, &adapters)
            })?;
            record(mosa::tensor::gradcheck::rel_error(analytic[e], numeric), &name);
        }
    }
    let n_adapter = adapters.params().len();
    for pi in 0..n_adapter {
        let p = adapters.params()[pi];
        let name = p.name.clone();
        let analytic = tape.param_grad(&name).map(<[f64]>::to_vec).unwrap_or(vec![0.0; p.tensor.numel()]);
        for e in 0..analytic.len() {
            let numeric = central(|delta| {
                let mut a = adapters.clone();
                a.params_mut()[pi].tensor.data_mut()[e] += delta;
                eval(&model, &a)
            })?;
            record(mosa::tensor::gradcheck::rel_error(analytic[e], numeric), &name);
        }
    }
    Ok(worst)
}

fn central(f: impl Fn(f64) -> Result<f64>) -> Result<f64> {
    Ok((f(EPS)? - f(-EPS)?) / (2.0 * EPS))
}
