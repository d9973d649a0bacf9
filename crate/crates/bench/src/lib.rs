//! Shared fixtures for the kernel benchmarks.

use neurotune::modelzoo::{reference, BatchInput, Model, PreparedData};
use neurotune::synthdata::{generate, SynthSpec};
use neurotune::Tensor;
use rand::Rng;

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = neurotune::seed::rng(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape matches length")
}

/// A reference model together with one batch of default synthetic trials
/// laid out for it.
pub fn model_and_batch(name: &str, batch: usize) -> (Model, BatchInput, Vec<usize>) {
    let model = Model::build(&reference::get(name).expect("reference model")).expect("reference config is valid");
    let set = generate(&SynthSpec { subjects: 1, trials_per_subject: batch, ..SynthSpec::default() }).expect("default spec is valid");
    let data = PreparedData::new(&set, model.input_spec()).expect("synthetic data fits reference inputs");
    let idx: Vec<usize> = (0..batch).collect();
    let labels = idx.iter().map(|&i| data.labels[i]).collect();
    (model, data.batch(&idx), labels)
}

/// One 4 s channel at 200 Hz: a 10 Hz tone over white noise.
pub fn trial_signal(seed: u64) -> Vec<f64> {
    let mut rng = neurotune::seed::rng(seed);
    (0..800).map(|i| (std::f64::consts::TAU * 10.0 * i as f64 / 200.0).sin() + rng.random_range(-1.0..1.0)).collect()
}
