//! Fixtures shared by the kernel and model benchmarks.

use labnn::binarize::LabParams;
use labnn::bitconv::BinConvLayer;
use labnn::{BinarizerChoice, BitTensor, Model, ModelSpec, Padding, RealTensor, Shape4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn shape(n: usize, c: usize, h: usize, w: usize) -> Shape4 {
    Shape4::new(n, c, h, w).expect("positive dims")
}

pub fn random_real(s: Shape4, seed: u64) -> RealTensor {
    RealTensor::uniform(s, -1.0, 1.0, &mut rng(seed))
}

pub fn random_bits(s: Shape4, seed: u64) -> BitTensor {
    let mut r = rng(seed);
    BitTensor::from_fn(s, |_, _, _, _| r.random())
}

/// A 3×3 stride-1 binary conv from `c_in` to `c_out` channels.
pub fn binary_layer(c_in: usize, c_out: usize, seed: u64) -> BinConvLayer {
    BinConvLayer::new(random_bits(shape(c_out, c_in, 3, 3), seed), 1, Padding::SAME_MINUS_ONE).expect("valid layer")
}

pub fn lab_params(c: usize, seed: u64) -> LabParams {
    LabParams::init(c, 3, &mut rng(seed)).expect("valid LAB")
}

/// The default CIFAR-10 network with every stage using `choice`.
pub fn cifar_model(choice: BinarizerChoice) -> Model {
    Model::new(ModelSpec::cifar10().with_binarizer(choice), 0).expect("valid spec")
}
