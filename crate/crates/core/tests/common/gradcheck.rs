//! Central-difference gradient checks.
//!
//! A primitive's output is reduced to a scalar by a fixed random projection,
//! `L = Σ out ⊙ R`, accumulated in f64 for the numerical side.

use iterprune::model::{Binding, ModelConfig, TransformerModel};
use iterprune::numerics::{Tape, Tensor, Var};
use iterprune::recovery::{kd_loss, kd_loss_on_tape, DropRecord};
use iterprune::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const STEP: f32 = 1e-3;
pub const TOLERANCE: f64 = 1e-3;
pub const SEEDS: u64 = 20;

pub type Build = dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

/// `‖a − b‖ / max(‖a‖, ‖b‖)`; zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-12 {
        0.0
    } else {
        diff / scale
    }
}

fn projected(inputs: &[Tensor], build: &Build, proj: &Tensor) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars).expect("forward");
    tape.value(out)
        .data()
        .iter()
        .zip(proj.data())
        .map(|(&y, &r)| y as f64 * r as f64)
        .sum()
}

/// Relative error between analytic and numerical gradients of all inputs.
pub fn check_op(inputs: &[Tensor], build: &Build, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars).expect("forward");
    let proj = Tensor::randn(tape.value(out).dims(), 1.0, &mut rng);
    let r = tape.constant(proj.clone());
    let prod = tape.mul(out, r).expect("mul");
    let loss = tape.sum(prod);
    let grads = tape.backward(loss).expect("backward");

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (i, v) in vars.iter().enumerate() {
        let g = grads.get(*v).expect("gradient for every input");
        analytic.extend(g.data().iter().map(|&x| x as f64));
        for j in 0..inputs[i].numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= STEP;
            let d = (projected(&plus, build, &proj) - projected(&minus, build, &proj)) / (2.0 * STEP as f64);
            numeric.push(d);
        }
    }
    relative_error(&analytic, &numeric)
}

/// Largest error over [`SEEDS`] seeds; `make` draws the inputs for a seed.
pub fn worst_over_seeds(make: &dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor>, build: &Build) -> f64 {
    (0..SEEDS)
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            check_op(&make(&mut rng), build, seed)
        })
        .fold(0.0, f64::max)
}

pub fn tiny_config(seed: u64) -> ModelConfig {
    ModelConfig {
        n_layers: 3,
        d_model: 8,
        n_heads: 2,
        vocab_size: 12,
        max_seq_len: 6,
        seed,
    }
}

/// Gradient of the full distillation loss with respect to every student
/// parameter, for a student with one block removed.
pub fn check_kd_loss(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut teacher = TransformerModel::init(tiny_config(seed)).unwrap();
    // Larger weights than the default init so every term is far from zero.
    for t in teacher.params_mut() {
        let noise = Tensor::randn(t.dims(), 0.3, &mut rng);
        for (x, n) in t.data_mut().iter_mut().zip(noise.data()) {
            *x += n;
        }
    }
    let tokens: Vec<Vec<u32>> = (0..2)
        .map(|_| (0..5).map(|_| rand::Rng::random_range(&mut rng, 0..12u32)).collect())
        .collect();
    let teacher_trace = teacher.forward_with_trace(&tokens).unwrap();
    let mut student = teacher.remove_block((seed % 3) as usize).unwrap();
    for t in student.params_mut() {
        let noise = Tensor::randn(t.dims(), 0.05, &mut rng);
        for (x, n) in t.data_mut().iter_mut().zip(noise.data()) {
            *x += n;
        }
    }
    let drop = DropRecord::from_model(&student).unwrap();

    let mut tape = Tape::new();
    let tt = student.forward_on_tape(&mut tape, &tokens, Binding::Full).unwrap();
    let (loss, _) = kd_loss_on_tape(&mut tape, &teacher_trace, &tt, &drop).unwrap();
    let grads = tape.backward(loss).unwrap();

    let loss_at = |m: &TransformerModel| {
        let tr = m.forward_with_trace(&tokens).unwrap();
        kd_loss(&teacher_trace, &tr, &drop).unwrap().total
    };
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for (id, var) in &tt.params {
        let g = grads.get(*var).expect("gradient");
        analytic.extend(g.data().iter().map(|&x| x as f64));
        for j in 0..g.numel() {
            let mut plus = student.clone();
            plus.param_mut(*id).data_mut()[j] += STEP;
            let mut minus = student.clone();
            minus.param_mut(*id).data_mut()[j] -= STEP;
            numeric.push((loss_at(&plus) - loss_at(&minus)) / (2.0 * STEP as f64));
        }
    }
    relative_error(&analytic, &numeric)
}

/// Every primitive, named, as `(name, worst error over seeds)`.
pub fn all_primitives() -> Vec<(&'static str, f64)> {
    let n = |dims: &'static [usize]| move |rng: &mut ChaCha8Rng| Tensor::randn(dims, 1.0, rng);
    let mut out = Vec::new();
    let mut run = |name: &'static str, make: &dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor>, build: &Build| {
        out.push((name, worst_over_seeds(make, build)));
    };

    run("matmul", &|r| vec![n(&[2, 3, 4])(r), n(&[4, 5])(r)], &|t, v| t.matmul(v[0], v[1]));
    run("batched_matmul", &|r| vec![n(&[2, 3, 4])(r), n(&[2, 4, 3])(r)], &|t, v| {
        t.batched_matmul(v[0], v[1], false)
    });
    run("batched_matmul_nt", &|r| vec![n(&[2, 3, 4])(r), n(&[2, 5, 4])(r)], &|t, v| {
        t.batched_matmul(v[0], v[1], true)
    });
    run("add", &|r| vec![n(&[3, 4])(r), n(&[3, 4])(r)], &|t, v| t.add(v[0], v[1]));
    run("add_broadcast", &|r| vec![n(&[2, 3, 4])(r), n(&[4])(r)], &|t, v| t.add(v[0], v[1]));
    run("mul", &|r| vec![n(&[3, 4])(r), n(&[3, 4])(r)], &|t, v| t.mul(v[0], v[1]));
    run("mul_broadcast", &|r| vec![n(&[2, 3, 4])(r), n(&[3, 4])(r)], &|t, v| t.mul(v[0], v[1]));
    run("scale", &|r| vec![n(&[3, 4])(r)], &|t, v| Ok(t.scale(v[0], -0.7)));
    run("softmax", &|r| vec![n(&[3, 5])(r)], &|t, v| Ok(t.softmax(v[0])));
    run("causal_softmax", &|r| vec![n(&[2, 4, 4])(r)], &|t, v| t.causal_softmax(v[0]));
    run(
        "layernorm",
        &|r| vec![n(&[3, 6])(r), n(&[6])(r), n(&[6])(r)],
        &|t, v| t.layernorm(v[0], v[1], v[2]),
    );
    run("gelu", &|r| vec![n(&[4, 5])(r)], &|t, v| Ok(t.gelu(v[0])));
    run("embedding", &|r| vec![n(&[5, 3])(r)], &|t, v| t.embedding(v[0], &[4, 0, 4, 2], &[2, 2]));
    run("split_heads", &|r| vec![n(&[2, 3, 4])(r)], &|t, v| t.split_heads(v[0], 2));
    run("merge_heads", &|r| vec![n(&[4, 3, 2])(r)], &|t, v| t.merge_heads(v[0], 2));
    run("reshape", &|r| vec![n(&[2, 6])(r)], &|t, v| t.reshape(v[0], &[3, 4]));
    run("sum", &|r| vec![n(&[3, 4])(r)], &|t, v| Ok(t.sum(v[0])));
    run("mse", &|r| vec![n(&[3, 4])(r), n(&[3, 4])(r)], &|t, v| t.mse(v[0], v[1]));
    run("cross_entropy", &|r| vec![n(&[4, 6])(r)], &|t, v| t.cross_entropy(v[0], &[1, 5, 0, 3]));
    out
}
