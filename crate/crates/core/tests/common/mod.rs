#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sqwa::nn::{init_weights, softmax_cross_entropy, Architecture, LayerSpec, Network};
use sqwa::quant::ModelQuantizer;
use sqwa::Tensor;

fn loss(net: &Network, x: &Tensor, y: &[usize]) -> f64 {
    softmax_cross_entropy(&net.logits(x).unwrap(), y).unwrap().0
}

/// Largest relative deviation between analytic and central-difference
/// gradients over every weight and bias entry.
pub fn worst_relative_error(net: &Network, x: &Tensor, y: &[usize]) -> f64 {
    let (logits, cache) = net.forward(x).unwrap();
    let (_, grads) = net.loss_and_backward(&cache, &logits, y).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut check = |analytic: f64, plus: f64, minus: f64| {
        let numeric = (plus - minus) / (2.0 * h);
        let scale = analytic.abs().max(numeric.abs()).max(1e-4);
        worst = worst.max((analytic - numeric).abs() / scale);
    };
    for l in 0..net.num_parameterized() {
        for i in 0..net.weights()[l].len() {
            let mut p = net.clone();
            p.weights_mut()[l].data_mut()[i] += h;
            let mut m = net.clone();
            m.weights_mut()[l].data_mut()[i] -= h;
            check(grads.weights[l].data()[i], loss(&p, x, y), loss(&m, x, y));
        }
        if let Some(b) = &grads.biases[l] {
            for i in 0..b.len() {
                let mut p = net.clone();
                p.biases_mut()[l].as_mut().unwrap().data_mut()[i] += h;
                let mut m = net.clone();
                m.biases_mut()[l].as_mut().unwrap().data_mut()[i] -= h;
                check(b.data()[i], loss(&p, x, y), loss(&m, x, y));
            }
        }
    }
    worst
}

pub fn random_dense(rng: &mut ChaCha8Rng) -> Architecture {
    let depth = rng.random_range(1..=3);
    let mut dims = vec![rng.random_range(2..=5)];
    for _ in 0..depth {
        dims.push(rng.random_range(2..=5));
    }
    Architecture::mlp(&dims)
}

pub fn random_conv(rng: &mut ChaCha8Rng) -> Architecture {
    let c = rng.random_range(1..=2);
    let h = rng.random_range(4..=6);
    let k = rng.random_range(2..=3);
    let stride = rng.random_range(1..=2);
    let padding = rng.random_range(0..=1);
    let out_c = rng.random_range(1..=3);
    let arch = Architecture::new(
        vec![c, h, h],
        vec![
            LayerSpec::Conv2d {
                in_channels: c,
                out_channels: out_c,
                kernel: k,
                stride,
                padding,
                has_bias: rng.random_bool(0.5),
            },
            LayerSpec::Relu,
            LayerSpec::Flatten,
        ],
    );
    let flat = arch.shapes().unwrap().last().unwrap()[0];
    let mut layers = arch.layers;
    layers.push(LayerSpec::Dense {
        fan_in: flat,
        fan_out: 3,
        has_bias: true,
    });
    Architecture::new(vec![c, h, h], layers)
}

/// Smallest distance of any ReLU input from its kink.
fn kink_margin(net: &Network, x: &Tensor) -> f64 {
    let (_, cache) = net.forward(x).unwrap();
    net.architecture()
        .layers
        .iter()
        .zip(&cache.inputs)
        .filter(|(l, _)| matches!(l, LayerSpec::Relu))
        .flat_map(|(_, z)| z.data().iter().map(|v| v.abs()))
        .fold(f64::INFINITY, f64::min)
}

/// Random batch whose ReLU inputs all sit clear of the kink, where central
/// differences are not meaningful.
fn batch(rng: &mut ChaCha8Rng, net: &Network, n: usize) -> Option<(Tensor, Vec<usize>)> {
    let mut shape = vec![n];
    shape.extend(net.input_shape());
    for _ in 0..200 {
        let x = Tensor::from_fn(&shape, |_| rng.random_range(-1.0..1.0));
        if kink_margin(net, &x) > 1e-3 {
            let y = (0..n).map(|_| rng.random_range(0..net.num_classes())).collect();
            return Some((x, y));
        }
    }
    None
}

fn jitter_biases(rng: &mut ChaCha8Rng, net: &mut Network) {
    for b in net.biases_mut().iter_mut().flatten() {
        b.data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.random_range(-0.3..0.3));
    }
}

/// Compare analytic and numeric gradients on 20 random networks; returns the
/// worst relative error seen.
pub fn gradient_check(build: fn(&mut ChaCha8Rng) -> Architecture, quantized: bool, seed: u64) -> f64 {
    let mut worst: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checked = 0;
    while checked < 20 {
        let arch = build(&mut rng);
        let mut net = init_weights(&arch, rng.random()).unwrap();
        jitter_biases(&mut rng, &mut net);
        if quantized {
            let bits = rng.random_range(2..=4);
            net = ModelQuantizer::fit(&net, bits)
                .unwrap()
                .quantize_network(&net)
                .unwrap();
        }
        let Some((x, y)) = batch(&mut rng, &net, 3) else {
            continue;
        };
        worst = worst.max(worst_relative_error(&net, &x, &y));
        checked += 1;
    }
    worst
}
