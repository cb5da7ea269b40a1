//! Capture bank and exact weight averaging on the shared step-size grid.
//!
//! Captured models all use the same frozen per-layer step `Δ`, so averaging
//! `n` of them amounts to summing integer levels: the mean sits exactly on
//! the finer grid `Δ/n`. For ternary captures the sum of levels spans
//! `[-n, n]`, i.e. `2n + 1` values.

use std::ops::RangeInclusive;

use crate::error::{Error, Result};
use crate::nn::{Evaluation, Network};
use crate::qat::ShadowModel;
use crate::quant::{levels_count, ModelQuantizer, MAX_BITS};
use crate::tensor::Tensor;

/// Train metrics plus optional held-out metrics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub train: Evaluation,
    pub test: Option<Evaluation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Capture {
    pub epoch: usize,
    pub lr: f64,
    pub model: ShadowModel,
    pub metrics: Option<Metrics>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaptureBank {
    quant: ModelQuantizer,
    entries: Vec<Capture>,
}

impl CaptureBank {
    pub fn new(quant: ModelQuantizer) -> Self {
        Self {
            quant,
            entries: Vec::new(),
        }
    }

    /// Append a capture; it must share the bank's step sizes and topology and
    /// come after the previous entry.
    pub fn push(&mut self, capture: Capture) -> Result<()> {
        if capture.model.quantizer() != &self.quant {
            return Err(Error::InvalidArgument(format!(
                "capture at epoch {} uses different step sizes than the bank",
                capture.epoch
            )));
        }
        if let Some(first) = self.entries.first() {
            if first.model.shadow().architecture() != capture.model.shadow().architecture() {
                return Err(Error::InvalidArgument(format!(
                    "capture at epoch {} has a different topology",
                    capture.epoch
                )));
            }
        }
        if let Some(last) = self.entries.last() {
            if capture.epoch <= last.epoch {
                return Err(Error::InvalidArgument(format!(
                    "capture epoch {} does not follow {}",
                    capture.epoch, last.epoch
                )));
            }
        }
        self.entries.push(capture);
        Ok(())
    }

    pub fn quantizer(&self) -> &ModelQuantizer {
        &self.quant
    }

    pub fn entries(&self) -> &[Capture] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn epochs(&self) -> Vec<usize> {
        self.entries.iter().map(|c| c.epoch).collect()
    }

    /// The `n` most recent captures.
    pub fn last(&self, n: usize) -> Result<&[Capture]> {
        if n == 0 || n > self.entries.len() {
            return Err(Error::InvalidArgument(format!(
                "cannot select {n} of {} captures",
                self.entries.len()
            )));
        }
        Ok(&self.entries[self.entries.len() - n..])
    }

    pub fn in_epochs(&self, range: RangeInclusive<usize>) -> Vec<&Capture> {
        self.entries
            .iter()
            .filter(|c| range.contains(&c.epoch))
            .collect()
    }
}

/// Smallest `b'` with `2^b' − 1 ≥ 2n + 1`: the precision of an average of `n`
/// ternary (or binary) models.
pub fn effective_bits(n: usize) -> Result<u32> {
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one model".into()));
    }
    effective_bits_for(n, 1)
}

/// Generalization for captures whose levels reach `±max_level`.
pub fn effective_bits_for(n: usize, max_level: i64) -> Result<u32> {
    let needed = 2 * n as u64 * max_level as u64 + 1;
    (2..=MAX_BITS)
        .find(|&b| levels_count(b).unwrap() as u64 >= needed)
        .ok_or_else(|| Error::InvalidArgument(format!("{n} models exceed {MAX_BITS}-bit precision")))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AveragedModel {
    net: Network,
    n: usize,
    effective_bits: u32,
    base: ModelQuantizer,
}

impl AveragedModel {
    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn into_network(self) -> Network {
        self.net
    }

    pub fn count(&self) -> usize {
        self.n
    }

    pub fn effective_bits(&self) -> u32 {
        self.effective_bits
    }

    pub fn base_quantizer(&self) -> &ModelQuantizer {
        &self.base
    }

    /// The `Δ/n` grid on which every averaged weight lies exactly.
    pub fn fine_quantizer(&self) -> ModelQuantizer {
        ModelQuantizer::new(
            self.effective_bits,
            self.base.steps.iter().map(|s| s / self.n as f64).collect(),
        )
        .expect("positive steps")
    }

    /// Rebuild from a persisted network on the fine grid.
    pub fn from_fine_grid(
        net: Network,
        n: usize,
        base: ModelQuantizer,
    ) -> Result<Self> {
        let max_level = base.layer(0).max_level();
        let avg = Self {
            net,
            n,
            effective_bits: effective_bits_for(n, max_level)?,
            base,
        };
        if !avg.fine_quantizer().is_on_grid(&avg.net) {
            return Err(Error::InvalidArgument("averaged weights off the Δ/n grid".into()));
        }
        Ok(avg)
    }
}

/// Sum of `values` independent of their order.
fn order_free_sum(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum()
}

/// Elementwise mean of the applied (quantized) weights of `captures`.
/// Biases are averaged in full precision.
pub fn average_captures(captures: &[&Capture], quant: &ModelQuantizer) -> Result<AveragedModel> {
    let n = captures.len();
    if n == 0 {
        return Err(Error::InvalidArgument("no captures to average".into()));
    }
    let template = captures[0].model.applied();
    let mut level_sums: Vec<Vec<i64>> = template.weights().iter().map(|w| vec![0; w.len()]).collect();
    for c in captures {
        if c.model.quantizer() != quant {
            return Err(Error::InvalidArgument(format!(
                "capture at epoch {} is on a different grid",
                c.epoch
            )));
        }
        if c.model.applied().architecture() != template.architecture() {
            return Err(Error::InvalidArgument("captures differ in topology".into()));
        }
        for (sum, levels) in level_sums.iter_mut().zip(quant.levels_of(c.model.applied())?) {
            for (s, l) in sum.iter_mut().zip(levels) {
                *s += l;
            }
        }
    }
    let max_level = quant.layer(0).max_level();
    let effective_bits = effective_bits_for(n, max_level)?;
    let fine = ModelQuantizer::new(
        effective_bits,
        quant.steps.iter().map(|s| s / n as f64).collect(),
    )?;
    let mut net = template.clone();
    for (i, (w, sums)) in net.weights_mut().iter_mut().zip(&level_sums).enumerate() {
        let q = fine.layer(i);
        for (v, &s) in w.data_mut().iter_mut().zip(sums) {
            *v = q.dequantize(s);
        }
    }
    for (i, b) in net.biases_mut().iter_mut().enumerate() {
        let Some(b) = b else { continue };
        let mut column = vec![0.0; n];
        for j in 0..b.len() {
            for (slot, c) in column.iter_mut().zip(captures) {
                *slot = c.model.applied().biases()[i].as_ref().unwrap().data()[j];
            }
            b.data_mut()[j] = order_free_sum(&mut column) / n as f64;
        }
    }
    Ok(AveragedModel {
        net,
        n,
        effective_bits,
        base: quant.clone(),
    })
}

/// Average of the `last_n` most recent captures.
pub fn average_models(bank: &CaptureBank, last_n: usize) -> Result<AveragedModel> {
    if bank.is_empty() {
        return Err(Error::InvalidArgument("capture bank is empty".into()));
    }
    let selected: Vec<&Capture> = bank.last(last_n)?.iter().collect();
    average_captures(&selected, bank.quantizer())
}

/// Average of every capture whose epoch lies in `range`.
pub fn average_epoch_range(bank: &CaptureBank, range: RangeInclusive<usize>) -> Result<AveragedModel> {
    let selected = bank.in_epochs(range.clone());
    if selected.is_empty() {
        return Err(Error::InvalidArgument(format!("no captures in epochs {range:?}")));
    }
    average_captures(&selected, bank.quantizer())
}

/// Re-quantize an averaged model to `target_bits` with freshly selected
/// per-layer steps. The averaged weights become the shadow copy, so the
/// result feeds straight into fine-tuning.
pub fn requantize_averaged(avg: &AveragedModel, target_bits: u32) -> Result<ShadowModel> {
    ShadowModel::from_pretrained(avg.network().clone(), target_bits)
}

/// Per-layer count of distinct weight values.
pub fn distinct_values_per_layer(net: &Network) -> Vec<usize> {
    net.weights()
        .iter()
        .map(|w: &Tensor| {
            let mut v = w.data().to_vec();
            v.sort_by(f64::total_cmp);
            v.dedup();
            v.len()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Architecture, LayerSpec};

    const STEP: f64 = 0.3;

    fn capture(epoch: usize, levels: &[i64], bias: f64) -> Capture {
        // pad with a zero row so the output has two logits
        let arch = Architecture::new(
            vec![levels.len()],
            vec![LayerSpec::Dense {
                fan_in: levels.len(),
                fan_out: 2,
                has_bias: true,
            }],
        );
        let mut w: Vec<f64> = levels.iter().map(|&l| l as f64 * STEP).collect();
        w.extend(std::iter::repeat_n(0.0, levels.len()));
        let net = Network::from_parts(
            arch,
            vec![Tensor::new(vec![2, levels.len()], w).unwrap()],
            vec![Some(Tensor::new(vec![2], vec![bias, -bias]).unwrap())],
        )
        .unwrap();
        Capture {
            epoch,
            lr: 1e-4,
            model: ShadowModel::new(net, ModelQuantizer::new(2, vec![STEP]).unwrap()).unwrap(),
            metrics: None,
        }
    }

    fn bank(rows: &[&[i64]]) -> CaptureBank {
        let mut b = CaptureBank::new(ModelQuantizer::new(2, vec![STEP]).unwrap());
        for (i, r) in rows.iter().enumerate() {
            b.push(capture(6 * i + 5, r, i as f64 * 0.1)).unwrap();
        }
        b
    }

    #[test]
    fn effective_bits_table() {
        let got: Vec<u32> = [1, 3, 7, 15, 31].iter().map(|&n| effective_bits(n).unwrap()).collect();
        assert_eq!(got, vec![2, 3, 4, 5, 6]);
        assert!(effective_bits(0).is_err());
    }

    #[test]
    fn single_capture_average_is_identity() {
        let b = bank(&[&[1, 0, -1]]);
        let avg = average_models(&b, 1).unwrap();
        assert_eq!(avg.effective_bits(), 2);
        assert_eq!(avg.network(), b.entries()[0].model.applied());
    }

    #[test]
    fn seven_ternary_captures() {
        let rows: Vec<Vec<i64>> = vec![
            vec![1, 1, -1],
            vec![1, 0, -1],
            vec![1, 1, -1],
            vec![0, -1, -1],
            vec![1, 1, -1],
            vec![1, 0, -1],
            vec![1, 1, -1],
        ];
        let refs: Vec<&[i64]> = rows.iter().map(|r| r.as_slice()).collect();
        let b = bank(&refs);
        let avg = average_models(&b, 7).unwrap();
        assert_eq!(avg.effective_bits(), 4);
        let w = avg.network().weights()[0].data();
        assert!((w[0] - 6.0 * STEP / 7.0).abs() < 1e-15);
        assert!((w[1] - 3.0 * STEP / 7.0).abs() < 1e-15);
        assert!((w[2] + STEP).abs() < 1e-15);
        for &v in w {
            let k = v * 7.0 / STEP;
            assert!((k - k.round()).abs() < 1e-9 && k.abs() <= 7.0 + 1e-9);
        }
        assert!(avg.fine_quantizer().is_on_grid(avg.network()));
    }

    #[test]
    fn opposite_levels_cancel() {
        let b = bank(&[&[1, -1], &[-1, 1]]);
        let avg = average_models(&b, 2).unwrap();
        assert_eq!(avg.network().weights()[0].data()[..2], [0.0, 0.0]);
    }

    #[test]
    fn selection_errors() {
        let b = bank(&[&[1, 0], &[0, 1]]);
        assert!(average_models(&b, 0).is_err());
        assert!(average_models(&b, 3).is_err());
        let empty = CaptureBank::new(ModelQuantizer::new(2, vec![STEP]).unwrap());
        assert!(average_models(&empty, 1).is_err());
    }

    #[test]
    fn epoch_range_selection() {
        let b = bank(&[&[1, 0], &[0, 1], &[-1, -1]]);
        let early = average_epoch_range(&b, 0..=11).unwrap();
        assert_eq!(early.count(), 2);
        assert!(average_epoch_range(&b, 100..=200).is_err());
    }

    #[test]
    fn bank_rejects_foreign_grid_and_order() {
        let mut b = bank(&[&[1, 0]]);
        let mut c = capture(100, &[1, 0], 0.0);
        c.model = ShadowModel::new(
            c.model.shadow().clone(),
            ModelQuantizer::new(2, vec![STEP * 2.0]).unwrap(),
        )
        .unwrap();
        assert!(b.push(c).is_err());
        assert!(b.push(capture(5, &[1, 0], 0.0)).is_err());
    }

    #[test]
    fn ternary_grid_requantizes_losslessly() {
        let b = bank(&[&[1, 0, -1]]);
        let avg = average_models(&b, 1).unwrap();
        let rq = requantize_averaged(&avg, 2).unwrap();
        assert_eq!(rq.quantizer().steps, vec![STEP]);
        assert_eq!(rq.applied(), avg.network());
    }

    #[test]
    fn fine_grid_requantization_is_identity() {
        let rows: Vec<Vec<i64>> = (0..7)
            .map(|i| vec![if i < 5 { 1 } else { 0 }, if i % 2 == 0 { -1 } else { 1 }, 0])
            .collect();
        let refs: Vec<&[i64]> = rows.iter().map(|r| r.as_slice()).collect();
        let avg = average_models(&bank(&refs), 7).unwrap();
        let fine = avg.fine_quantizer();
        assert_eq!(fine.bits, 4);
        assert_eq!(&fine.quantize_network(avg.network()).unwrap(), avg.network());
    }
}
