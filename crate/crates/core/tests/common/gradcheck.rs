//! Central-difference checks of every differentiable op and of the composed
//! encoder, run in f64.

use lodisc::heads::{Encoder, HeadConfig};
use lodisc::losses::{info_nce, symmetric_loss};
use lodisc::numerics::{Binder, ParamStore, Rng, Tape, Tensor, Var};
use lodisc::vit::VitConfig;

pub const H: f64 = 1e-3;
pub const TOL: f64 = 1e-3;
pub const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

fn random(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.normal())
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, with an absolute floor for near-zero gradients.
pub fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(n.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-7 {
        diff
    } else {
        diff / scale
    }
}

pub type OpFn = dyn for<'t> Fn(&[Var<'t, f64>]) -> Var<'t, f64>;

pub struct OpCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub f: Box<OpFn>,
}

fn case(name: &'static str, shapes: &[&[usize]], f: Box<OpFn>) -> OpCase {
    OpCase {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        f,
    }
}

pub fn op_cases() -> Vec<OpCase> {
    vec![
        case("matmul", &[&[3, 4], &[4, 2]], Box::new(|v| v[0].matmul(v[1]).unwrap())),
        case("matmul_last", &[&[2, 3, 4], &[4, 5]], Box::new(|v| v[0].matmul_last(v[1]).unwrap())),
        case("bmm", &[&[2, 3, 4], &[2, 4, 5]], Box::new(|v| v[0].bmm(v[1], false).unwrap())),
        case("bmm_t", &[&[2, 3, 4], &[2, 5, 4]], Box::new(|v| v[0].bmm(v[1], true).unwrap())),
        case("add", &[&[3, 4], &[3, 4]], Box::new(|v| v[0].add(v[1]).unwrap())),
        case("sub", &[&[3, 4], &[3, 4]], Box::new(|v| v[0].sub(v[1]).unwrap())),
        case("mul", &[&[3, 4], &[3, 4]], Box::new(|v| v[0].mul(v[1]).unwrap())),
        case("mul_self", &[&[5]], Box::new(|v| v[0].mul(v[0]).unwrap())),
        case("add_broadcast", &[&[2, 3, 4], &[4]], Box::new(|v| v[0].add_broadcast(v[1]).unwrap())),
        case("mul_broadcast", &[&[2, 3, 4], &[3, 4]], Box::new(|v| v[0].mul_broadcast(v[1]).unwrap())),
        case("scale", &[&[6]], Box::new(|v| v[0].scale(-2.5))),
        case("expand", &[&[4]], Box::new(|v| v[0].expand(&[3, 4]).unwrap())),
        case("reshape", &[&[2, 6]], Box::new(|v| v[0].reshape(&[3, 4]).unwrap())),
        case("permute", &[&[2, 3, 4]], Box::new(|v| v[0].permute(&[2, 0, 1]).unwrap())),
        case("narrow", &[&[2, 5, 3]], Box::new(|v| v[0].narrow(1, 1, 3).unwrap())),
        case("concat", &[&[2, 1, 3], &[2, 4, 3]], Box::new(|v| Var::concat(&[v[0], v[1]], 1).unwrap())),
        case("softmax", &[&[3, 5]], Box::new(|v| v[0].softmax().unwrap())),
        case("layernorm", &[&[3, 6]], Box::new(|v| v[0].layernorm(1e-6).unwrap())),
        case("gelu", &[&[10]], Box::new(|v| v[0].gelu())),
        case("l2_normalize", &[&[3, 4]], Box::new(|v| v[0].l2_normalize(1e-12).unwrap())),
        case("cross_entropy", &[&[4, 3]], Box::new(|v| v[0].cross_entropy(&[0, 2, 1, 2]).unwrap())),
        case("sum", &[&[2, 3]], Box::new(|v| v[0].sum())),
        case("mean", &[&[2, 3]], Box::new(|v| v[0].mean())),
        case("info_nce", &[&[4, 3], &[4, 3]], Box::new(|v| info_nce(v[0], v[1], 0.2).unwrap())),
        case(
            "symmetric_loss",
            &[&[3, 4], &[3, 4], &[3, 4], &[3, 4]],
            Box::new(|v| symmetric_loss(v[0], v[1], v[2], v[3], 0.5).unwrap()),
        ),
    ]
}

/// Worst relative error over all seeds and inputs. The op output is
/// projected onto fixed random weights so a scalar can be differentiated.
pub fn check_op(c: &OpCase) -> f64 {
    let mut worst = 0.0f64;
    for seed in SEEDS {
        let mut rng = Rng::seed(seed);
        let inputs: Vec<Tensor<f64>> = c.shapes.iter().map(|s| random(s, &mut rng)).collect();
        let eval = |xs: &[Tensor<f64>], want_grad: bool| -> (f64, Vec<Vec<f64>>) {
            let tape = Tape::new();
            let vars: Vec<Var<f64>> = xs
                .iter()
                .map(|t| {
                    let t = if want_grad { t.clone().with_grad() } else { t.clone() };
                    tape.leaf(t)
                })
                .collect();
            let out = (c.f)(&vars);
            let mut wr = Rng::derive(seed, 99);
            let w = tape.constant(Tensor::from_fn(&out.shape(), |_| wr.normal()));
            let loss = out.mul(w).unwrap().sum();
            let v = loss.value().item();
            if !want_grad {
                return (v, Vec::new());
            }
            let g = tape.backward(loss).unwrap();
            let grads = vars
                .iter()
                .zip(xs)
                .map(|(v, t)| g.get(*v).map_or(vec![0.0; t.numel()], <[f64]>::to_vec))
                .collect();
            (v, grads)
        };
        let (_, analytic) = eval(&inputs, true);
        for (i, t) in inputs.iter().enumerate() {
            let mut numeric = vec![0.0; t.numel()];
            for j in 0..t.numel() {
                let mut plus = inputs.clone();
                plus[i].data_mut()[j] += H;
                let mut minus = inputs.clone();
                minus[i].data_mut()[j] -= H;
                numeric[j] = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * H);
            }
            worst = worst.max(rel_err(&analytic[i], &numeric));
        }
    }
    worst
}

/// Worst relative error of `loss(params)` over a sample of each parameter
/// tensor's coordinates; parameters the loss does not reach are skipped.
fn check_params<F>(store: &ParamStore<f64>, loss: F, seed: u64) -> f64
where
    F: for<'t, 's> Fn(&Binder<'t, 's, f64>) -> Var<'t, f64>,
{
    let tape = Tape::new();
    let binder = Binder::trainable(&tape, store);
    let l = loss(&binder);
    let grads = tape.backward(l).unwrap();
    let bindings = binder.into_bindings();
    let mut with_grads = store.clone();
    with_grads.zero_grad();
    with_grads.accumulate_grads(&bindings, &grads).unwrap();

    let value_at = |s: &ParamStore<f64>| {
        let tape = Tape::new();
        let b = Binder::frozen(&tape, s);
        loss(&b).value().item()
    };
    let mut rng = Rng::derive(seed, 7);
    let mut worst = 0.0f64;
    for (p, (_, t)) in with_grads.iter().enumerate() {
        let Some(analytic) = t.grad().map(<[f64]>::to_vec) else {
            continue;
        };
        let coords = rng.sample_indices(t.numel(), t.numel().min(12));
        let mut a = Vec::new();
        let mut n = Vec::new();
        for &j in &coords {
            let mut plus = store.clone();
            plus.tensors_mut()[p].data_mut()[j] += H;
            let mut minus = store.clone();
            minus.tensors_mut()[p].data_mut()[j] -= H;
            n.push((value_at(&plus) - value_at(&minus)) / (2.0 * H));
            a.push(analytic[j]);
        }
        worst = worst.max(rel_err(&a, &n));
    }
    worst
}

fn tiny_vit() -> VitConfig {
    VitConfig {
        image_size: 16,
        patch_size: 8,
        channels: 3,
        embed_dim: 16,
        layers: 2,
        heads: 2,
        mlp_ratio: 2.0,
    }
}

/// Worst errors of the full encoder loss and of the backbone alone.
pub fn check_encoder() -> (f64, f64) {
    let heads = HeadConfig {
        hidden_dim: 16,
        out_dim: 8,
        ..HeadConfig::default()
    };
    let (mut full, mut backbone) = (0.0f64, 0.0f64);
    for seed in SEEDS {
        let mut rng = Rng::seed(seed);
        let mut store = ParamStore::<f64>::new();
        let enc = Encoder::new(&tiny_vit(), &heads, &mut store, &mut rng).unwrap();
        // Move parameters off their symmetric init so every path carries signal.
        for t in store.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += 0.3 * rng.normal());
        }
        let x1 = random(&[3, 3, 16, 16], &mut rng);
        let x2 = random(&[3, 3, 16, 16], &mut rng);
        let k1 = random(&[3, 8], &mut rng);
        let k2 = random(&[3, 8], &mut rng);
        full = full.max(check_params(
            &store,
            |b| {
                let tape = b.tape();
                let q1 = enc.predict(b, &x1).unwrap();
                let q2 = enc.predict(b, &x2).unwrap();
                let (k1, k2) = (tape.constant(k1.clone()), tape.constant(k2.clone()));
                symmetric_loss(q1, q2, k1, k2, 0.2).unwrap()
            },
            seed,
        ));
        backbone = backbone.max(check_params(
            &store.prefix(enc.shared_len()),
            |b| {
                let f = enc.features(b, &x1).unwrap();
                let w = Tensor::from_fn(&f.shape(), |i| ((i as f64) * 0.7).sin());
                f.mul(b.tape().constant(w)).unwrap().sum()
            },
            seed,
        ));
    }
    (full, backbone)
}
