//! Symmetric uniform weight quantization.
//!
//! A `b`-bit quantizer with step `Δ` maps a weight to
//! `sign(w) · Δ · min(⌊|w|/Δ + 0.5⌋, (M − 1)/2)` where `M = 2^b − 1`.
//! One bit is the binary special case `{−Δ, +Δ}`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Network;
use crate::tensor::Tensor;

pub const MAX_BITS: u32 = 16;

/// Number of representable values for a `bits`-bit symmetric quantizer.
pub fn levels_count(bits: u32) -> Result<u32> {
    match bits {
        0 => Err(Error::InvalidArgument("bit width must be >= 1".into())),
        1 => Ok(2),
        b if b <= MAX_BITS => Ok((1 << b) - 1),
        b => Err(Error::InvalidArgument(format!(
            "bit width {b} exceeds {MAX_BITS}"
        ))),
    }
}

/// Quantizer for a single tensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quantizer {
    bits: u32,
    step: f64,
    levels: u32,
}

impl Quantizer {
    pub fn new(bits: u32, step: f64) -> Result<Self> {
        let levels = levels_count(bits)?;
        if !(step > 0.0 && step.is_finite()) {
            return Err(Error::InvalidArgument(format!("step size {step} must be > 0")));
        }
        Ok(Self { bits, step, levels })
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn levels(&self) -> u32 {
        self.levels
    }

    /// Largest integer level magnitude.
    pub fn max_level(&self) -> i64 {
        if self.bits == 1 {
            1
        } else {
            ((self.levels - 1) / 2) as i64
        }
    }

    /// Signed integer level of `w`.
    #[inline]
    pub fn level(&self, w: f64) -> i64 {
        if self.bits == 1 {
            return if w < 0.0 { -1 } else { 1 };
        }
        let k = ((w.abs() / self.step + 0.5).floor() as i64).min(self.max_level());
        if w < 0.0 {
            -k
        } else {
            k
        }
    }

    #[inline]
    pub fn quantize(&self, w: f64) -> f64 {
        self.dequantize(self.level(w))
    }

    /// Zero level maps to `+0.0` regardless of the input sign.
    #[inline]
    pub fn dequantize(&self, level: i64) -> f64 {
        if level == 0 {
            0.0
        } else {
            level as f64 * self.step
        }
    }

    /// Whether `level` is a representable level for this quantizer.
    pub fn admits_level(&self, level: i64) -> bool {
        if self.bits == 1 {
            level == 1 || level == -1
        } else {
            level.abs() <= self.max_level()
        }
    }

    /// Whether `v` is exactly one of the representable values.
    pub fn is_on_grid(&self, v: f64) -> bool {
        let level = (v / self.step).round();
        level.abs() <= i64::MAX as f64
            && self.admits_level(level as i64)
            && self.dequantize(level as i64) == v
    }
}

pub fn quantize_tensor(w: &Tensor, q: &Quantizer) -> Tensor {
    w.map(|v| q.quantize(v))
}

/// Quantization noise `Q(w) − w`.
pub fn quantization_error(w: &Tensor, q: &Quantizer) -> Tensor {
    w.map(|v| q.quantize(v) - v)
}

fn mse(values: &[f64], bits: u32, step: f64) -> f64 {
    let q = Quantizer::new(bits, step).expect("positive step");
    values.iter().map(|&v| (q.quantize(v) - v).powi(2)).sum::<f64>() / values.len() as f64
}

const COARSE_POINTS: usize = 64;
const GOLDEN_ITERATIONS: usize = 60;
const GOLDEN_TOLERANCE: f64 = 1e-6;

/// Step size minimizing the mean squared quantization error of `w`.
///
/// The search interval is `(0, 2·max|w|/(M − 1)]` (`(0, 2·max|w|]` for one
/// bit). A coarse scan brackets the best region, golden-section search
/// refines it, and the upper endpoint is always considered so exactly
/// representable tensors get their exact step.
pub fn select_step_size(w: &Tensor, bits: u32) -> Result<f64> {
    let levels = levels_count(bits)?;
    let max = w.max_abs();
    if max == 0.0 {
        return Err(Error::ZeroTensor);
    }
    if !max.is_finite() {
        return Err(Error::NonFinite("step size selection input".into()));
    }
    let hi = if bits == 1 {
        2.0 * max
    } else {
        2.0 * max / (levels - 1) as f64
    };
    let values = w.data();
    let f = |step: f64| mse(values, bits, step);

    let mut coarse_best = (hi, f(hi));
    for i in 1..COARSE_POINTS {
        let s = hi * i as f64 / COARSE_POINTS as f64;
        let e = f(s);
        if e < coarse_best.1 {
            coarse_best = (s, e);
        }
    }

    let cell = hi / COARSE_POINTS as f64;
    let (mut a, mut b) = ((coarse_best.0 - cell).max(cell * 1e-3), (coarse_best.0 + cell).min(hi));
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - ratio * (b - a);
    let mut d = a + ratio * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..GOLDEN_ITERATIONS {
        if b - a < GOLDEN_TOLERANCE * max {
            break;
        }
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - ratio * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + ratio * (b - a);
            fd = f(d);
        }
    }
    let golden = if fc <= fd { (c, fc) } else { (d, fd) };

    let mut best = (hi, f(hi));
    for cand in [coarse_best, golden] {
        if cand.1 < best.1 {
            best = cand;
        }
    }
    Ok(best.0)
}

/// Bit width plus one frozen step size per parameterized layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelQuantizer {
    pub bits: u32,
    pub steps: Vec<f64>,
}

impl ModelQuantizer {
    pub fn new(bits: u32, steps: Vec<f64>) -> Result<Self> {
        for &s in &steps {
            Quantizer::new(bits, s)?;
        }
        Ok(Self { bits, steps })
    }

    /// Select an MSE-optimal step for every parameterized layer of `net`.
    pub fn fit(net: &Network, bits: u32) -> Result<Self> {
        let steps = net
            .weights()
            .iter()
            .map(|w| select_step_size(w, bits))
            .collect::<Result<Vec<_>>>()?;
        Self::new(bits, steps)
    }

    pub fn layer(&self, i: usize) -> Quantizer {
        Quantizer::new(self.bits, self.steps[i]).expect("validated at construction")
    }

    fn check(&self, net: &Network) -> Result<()> {
        if self.steps.len() != net.num_parameterized() {
            return Err(Error::InvalidArgument(format!(
                "quantizer has {} step sizes for {} parameterized layers",
                self.steps.len(),
                net.num_parameterized()
            )));
        }
        Ok(())
    }

    /// Copy of `net` with every weight tensor quantized; biases untouched.
    pub fn quantize_network(&self, net: &Network) -> Result<Network> {
        self.check(net)?;
        let mut out = net.clone();
        for (i, w) in out.weights_mut().iter_mut().enumerate() {
            *w = quantize_tensor(w, &self.layer(i));
        }
        Ok(out)
    }

    pub fn is_on_grid(&self, net: &Network) -> bool {
        self.steps.len() == net.num_parameterized()
            && net
                .weights()
                .iter()
                .enumerate()
                .all(|(i, w)| {
                    let q = self.layer(i);
                    w.data().iter().all(|&v| q.is_on_grid(v))
                })
    }

    /// Integer levels of each weight tensor of an on-grid network.
    pub fn levels_of(&self, net: &Network) -> Result<Vec<Vec<i64>>> {
        self.check(net)?;
        net.weights()
            .iter()
            .enumerate()
            .map(|(i, w)| {
                let q = self.layer(i);
                w.data()
                    .iter()
                    .map(|&v| {
                        let level = (v / q.step()).round() as i64;
                        if q.admits_level(level) && q.dequantize(level) == v {
                            Ok(level)
                        } else {
                            Err(Error::InvalidArgument(format!(
                                "value {v} of layer {i} is off the quantization grid"
                            )))
                        }
                    })
                    .collect()
            })
            .collect()
    }
}

/// A network whose weights lie on the grid of `quant`. Biases stay in full
/// precision.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    net: Network,
    quant: ModelQuantizer,
}

impl QuantizedModel {
    pub fn new(net: Network, quant: ModelQuantizer) -> Result<Self> {
        quant.check(&net)?;
        if !quant.is_on_grid(&net) {
            return Err(Error::InvalidArgument("weights are off the quantization grid".into()));
        }
        Ok(Self { net, quant })
    }

    /// Quantize `net` with the given per-layer steps.
    pub fn quantize(net: &Network, quant: ModelQuantizer) -> Result<Self> {
        let net = quant.quantize_network(net)?;
        Ok(Self { net, quant })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn quantizer(&self) -> &ModelQuantizer {
        &self.quant
    }

    pub fn into_parts(self) -> (Network, ModelQuantizer) {
        (self.net, self.quant)
    }
}

/// Per-layer MSE step selection followed by quantization. Biases are left in
/// full precision.
pub fn direct_quantize_model(net: &Network, bits: u32) -> Result<QuantizedModel> {
    QuantizedModel::quantize(net, ModelQuantizer::fit(net, bits)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_weights, Architecture, LayerSpec};

    fn t(v: &[f64]) -> Tensor {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn level_counts() {
        assert_eq!(levels_count(1).unwrap(), 2);
        assert_eq!(levels_count(2).unwrap(), 3);
        assert_eq!(levels_count(4).unwrap(), 15);
        assert!(levels_count(0).is_err());
    }

    #[test]
    fn ternary_hand_values() {
        let q = Quantizer::new(2, 0.5).unwrap();
        assert_eq!(q.quantize(0.0), 0.0);
        assert_eq!(q.quantize(0.7), 0.5);
        assert_eq!(q.quantize(0.2), 0.0);
        assert_eq!(q.quantize(-10.0), -0.5);
        // midpoint ties round away from zero
        assert_eq!(q.quantize(0.25), 0.5);
        assert_eq!(q.quantize(-0.25), -0.5);
    }

    #[test]
    fn zero_maps_to_zero_for_multibit() {
        for b in 2..=8 {
            assert_eq!(Quantizer::new(b, 0.3).unwrap().quantize(0.0), 0.0);
        }
    }

    #[test]
    fn binary_is_sign_times_step() {
        let q = Quantizer::new(1, 0.25).unwrap();
        assert_eq!(q.quantize(3.0), 0.25);
        assert_eq!(q.quantize(-1e-9), -0.25);
        assert_eq!(q.quantize(0.0), 0.25);
        assert!(!q.is_on_grid(0.0));
    }

    #[test]
    fn rejects_nonpositive_step() {
        assert!(Quantizer::new(2, 0.0).is_err());
        assert!(Quantizer::new(2, -1.0).is_err());
        assert!(Quantizer::new(2, f64::NAN).is_err());
    }

    #[test]
    fn error_is_q_minus_w() {
        let q = Quantizer::new(2, 0.5).unwrap();
        let e = quantization_error(&t(&[0.7, 0.5, -0.5]), &q);
        assert!((e.data()[0] + 0.2).abs() < 1e-15);
        assert_eq!(&e.data()[1..], &[0.0, 0.0]);
    }

    #[test]
    fn exactly_representable_step() {
        assert_eq!(select_step_size(&t(&[-1.0, 1.0]), 2).unwrap(), 1.0);
        for c in [0.003, 0.7, 12.5] {
            assert_eq!(select_step_size(&t(&[-c, c]), 2).unwrap(), c);
        }
        assert!(matches!(select_step_size(&t(&[0.0, 0.0]), 2), Err(Error::ZeroTensor)));
    }

    #[test]
    fn binary_step_is_mean_magnitude() {
        let w = t(&[0.5, -1.0, 1.5, -2.0]);
        let s = select_step_size(&w, 1).unwrap();
        assert!((s - 1.25).abs() < 1e-5, "{s}");
    }

    #[test]
    fn identity_dense_direct_quantization() {
        let arch = Architecture::new(
            vec![3],
            vec![LayerSpec::Dense {
                fan_in: 3,
                fan_out: 3,
                has_bias: true,
            }],
        );
        let eye = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let net = Network::from_parts(arch, vec![eye.clone()], vec![Some(Tensor::zeros(&[3]))])
            .unwrap();
        let qm = direct_quantize_model(&net, 2).unwrap();
        assert_eq!(qm.quantizer().steps, vec![1.0]);
        assert_eq!(qm.network().weights()[0], eye);
    }

    #[test]
    fn direct_quantization_is_grid_resident_and_keeps_biases() {
        let mut net = init_weights(&Architecture::mlp(&[6, 9, 4]), 8).unwrap();
        for b in net.biases_mut().iter_mut().flatten() {
            b.data_mut().iter_mut().for_each(|v| *v = 0.123);
        }
        for bits in 1..=6 {
            let qm = direct_quantize_model(&net, bits).unwrap();
            assert!(qm.quantizer().is_on_grid(qm.network()));
            assert_eq!(qm.network().biases(), net.biases());
            let levels = qm.quantizer().levels_of(qm.network()).unwrap();
            let q0 = qm.quantizer().layer(0);
            assert!(levels[0].iter().all(|&l| q0.admits_level(l)));
        }
    }
}
