//! Hybrid initialization: Kaiming-normal (fan-out, rectifier gain) for every
//! convolution except the final reassemble conv, which keeps the
//! Kaiming-uniform default of common frameworks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::tensor::{Element, Tensor};

use super::network::{Conv2d, Model};

/// Standard deviation of the Kaiming-normal draw for a conv layer.
pub fn kaiming_normal_std(out_channels: usize, kernel: usize) -> f64 {
    let fan_out = (out_channels * kernel * kernel) as f64;
    (2.0 / fan_out).sqrt()
}

/// (weight bound, bias bound) of the default uniform init, leaky-rectifier
/// slope √5, for a given fan-in.
pub fn kaiming_uniform_bounds(fan_in: usize) -> (f64, f64) {
    let fan_in = fan_in as f64;
    ((6.0 / ((1.0 + 5.0) * fan_in)).sqrt(), 1.0 / fan_in.sqrt())
}

fn fill<T: Element>(t: &mut Tensor<T>, dist: &impl Distribution<f64>, rng: &mut ChaCha8Rng) {
    for v in t.data_mut() {
        *v = T::from_f64(dist.sample(rng));
    }
}

fn kaiming_normal<T: Element>(conv: &mut Conv2d<T>, rng: &mut ChaCha8Rng) {
    let std = kaiming_normal_std(conv.spec.out_channels, conv.spec.kernel);
    let dist = Normal::new(0.0, std).expect("finite positive std");
    fill(&mut conv.weight, &dist, rng);
    if let Some(b) = &mut conv.bias {
        b.data_mut().iter_mut().for_each(|v| *v = T::ZERO);
    }
}

fn kaiming_uniform<T: Element>(conv: &mut Conv2d<T>, rng: &mut ChaCha8Rng) {
    let spec = conv.spec;
    let fan_in = spec.in_channels / spec.groups * spec.kernel * spec.kernel;
    let (wb, bb) = kaiming_uniform_bounds(fan_in);
    fill(&mut conv.weight, &Uniform::new_inclusive(-wb, wb).expect("valid bound"), rng);
    if let Some(b) = &mut conv.bias {
        fill(b, &Uniform::new_inclusive(-bb, bb).expect("valid bound"), rng);
    }
}

/// Re-initializes every parameter and running statistic of `model`.
pub fn init_weights<T: Element>(model: &mut Model<T>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    kaiming_normal(&mut model.encoder_conv, &mut rng);
    model.encoder_norm.reset().expect("channel count already validated");
    for block in &mut model.blocks {
        kaiming_normal(&mut block.local, &mut rng);
        kaiming_normal(&mut block.dilated, &mut rng);
        kaiming_normal(&mut block.pointwise, &mut rng);
        block.spatial_norm.reset().expect("channel count already validated");
        block.channel_norm.reset().expect("channel count already validated");
    }
    kaiming_uniform(&mut model.reassemble, &mut rng);
}
