//! Shared helpers: a central-difference gradient oracle and small configs.
#![allow(dead_code)]

use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spdnet::autograd::Var;
use spdnet::blocks::BlockConfig;
use spdnet::params::{Bound, ParamBuilder, ParamStore};
use spdnet::{ModelConfig, Result};

pub fn random_array(shape: (usize, usize, usize, usize), lo: f64, hi: f64, seed: u64) -> Array4<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array4::from_shape_fn(shape, |_| rng.gen_range(lo..hi))
}

pub fn tiny_model(stages: usize) -> ModelConfig {
    ModelConfig {
        base_channels: 4,
        num_wmlm: stages,
        levels_per_wmlm: 2,
        block: BlockConfig { se_reduction: 2, blocks_per_srir: 1 },
        ..ModelConfig::default()
    }
}

/// Builds a module into a fresh store with weights drawn from `seed`.
pub fn build<M>(seed: u64, make: impl FnOnce(&mut ParamBuilder<'_, f64>) -> M) -> (M, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let module = make(&mut ParamBuilder::new(&mut store, &mut rng));
    (module, store)
}

#[derive(Debug)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

/// Compares analytic gradients of `sum(f(x) * r)` (fixed random `r`) with
/// central differences, for a sample of coordinates of every parameter and
/// of the input. Relative error is `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn check_gradients(
    store: &ParamStore<f64>,
    input: &Array4<f64>,
    per_tensor: usize,
    seed: u64,
    f: impl Fn(&Bound<f64>, &Var<f64>) -> Result<Var<f64>>,
) -> GradReport {
    let probe = f(&store.bind(false), &Var::constant(input.clone())).expect("forward");
    let weights = random_array(probe.dim(), -1.0, 1.0, seed ^ 0x5eed);
    let objective = |s: &ParamStore<f64>, x: &Array4<f64>| -> f64 {
        let out = f(&s.bind(false), &Var::constant(x.clone())).expect("forward");
        (out.value() * &weights).sum()
    };

    let bound = store.bind(true);
    let x = Var::parameter(input.clone());
    let out = f(&bound, &x).expect("forward");
    let loss = out.mul(&Var::constant(weights.clone())).expect("mul").sum();
    let mut grads = loss.backward().expect("backward");
    let input_grad = grads.get(&x).cloned().unwrap_or_else(|| Array4::zeros(input.dim()));
    let param_grads = bound.gradients(&mut grads);

    let h = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradReport { checked: 0, max_rel_err: 0.0, worst: String::new() };
    let mut record = |name: String, analytic: f64, numeric: f64| {
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        report.checked += 1;
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst = format!("{name}: analytic {analytic:e} numeric {numeric:e}");
        }
    };

    let mut work = store.clone();
    for (t, name) in store.names().iter().enumerate() {
        let n = store.values()[t].len();
        for _ in 0..per_tensor.min(n) {
            let i = rng.gen_range(0..n);
            let orig = store.values()[t].as_slice().expect("contiguous")[i];
            work.values_mut()[t].as_slice_mut().expect("contiguous")[i] = orig + h;
            let up = objective(&work, input);
            work.values_mut()[t].as_slice_mut().expect("contiguous")[i] = orig - h;
            let down = objective(&work, input);
            work.values_mut()[t].as_slice_mut().expect("contiguous")[i] = orig;
            let analytic = param_grads[t].as_slice().expect("contiguous")[i];
            record(format!("{name}[{i}]"), analytic, (up - down) / (2.0 * h));
        }
    }
    let mut xw = input.clone();
    for _ in 0..(2 * per_tensor).min(input.len()) {
        let i = rng.gen_range(0..input.len());
        let orig = input.as_slice().expect("contiguous")[i];
        xw.as_slice_mut().expect("contiguous")[i] = orig + h;
        let up = objective(store, &xw);
        xw.as_slice_mut().expect("contiguous")[i] = orig - h;
        let down = objective(store, &xw);
        xw.as_slice_mut().expect("contiguous")[i] = orig;
        record(format!("input[{i}]"), input_grad.as_slice().expect("contiguous")[i], (up - down) / (2.0 * h));
    }
    report
}
