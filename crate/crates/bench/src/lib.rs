//! Fixtures shared by the benchmarks.

use advdet::nn::{Backbone, BackboneSpec};
use advdet::rng::rng_from_seed;
use advdet::{ClassifierModel, NormSpec, TensorImage};

/// Untrained tiny-cnn classifier on `size` x `size` inputs.
pub fn tiny_classifier(size: usize) -> ClassifierModel {
    let backbone = Backbone::new(BackboneSpec::tiny_cnn(3, [16, 32], 64), 1).expect("valid spec");
    ClassifierModel::new(backbone, 102, size, NormSpec::default(), 2).expect("valid model")
}

/// Normalized image with uniform pixel values.
pub fn random_image(size: usize, seed: u64) -> TensorImage {
    use rand::Rng;
    let mut rng = rng_from_seed(seed);
    let data = (0..3 * size * size).map(|_| rng.random_range(0.0..=1.0)).collect();
    TensorImage::from_unit(3, size, size, data, NormSpec::default())
        .and_then(|x| x.normalize())
        .expect("valid image")
}
