//! Dense feed-forward networks with rectified-linear hidden layers and an
//! affine output layer, plus exact reverse-mode gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Layer widths from input to output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct NetLayout(Vec<usize>);

impl NetLayout {
    pub fn new(sizes: Vec<usize>) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::InvalidLayout(format!(
                "need at least input and output sizes, got {sizes:?}"
            )));
        }
        if sizes.contains(&0) {
            return Err(Error::InvalidLayout(format!("zero-width layer in {sizes:?}")));
        }
        Ok(Self(sizes))
    }

    /// `layers` affine maps: `input → hidden → … → hidden → output`.
    pub fn stack(input: usize, hidden: usize, layers: usize, output: usize) -> Result<Self> {
        let layers = layers.max(1);
        let mut sizes = vec![input];
        sizes.extend(std::iter::repeat_n(hidden, layers - 1));
        sizes.push(output);
        Self::new(sizes)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.0
    }

    pub fn input(&self) -> usize {
        self.0[0]
    }

    pub fn output(&self) -> usize {
        *self.0.last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        self.0.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
    }
}

impl TryFrom<Vec<usize>> for NetLayout {
    type Error = Error;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<NetLayout> for Vec<usize> {
    fn from(l: NetLayout) -> Self {
        l.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// Row-major `out × in`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layout: NetLayout,
    pub layers: Vec<Dense>,
}

/// Pre-activations of every layer for one input, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    input: Vec<f64>,
    pre: Vec<Vec<f64>>,
}

impl Trace {
    pub fn output(&self) -> &[f64] {
        self.pre.last().unwrap()
    }
}

fn relu(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect()
}

impl Mlp {
    /// He-normal weights (variance `2 / fan_in`) and zero biases.
    pub fn init(layout: NetLayout, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = layout
            .sizes()
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
                Dense {
                    weight: (0..fan_in * fan_out).map(|_| normal.sample(&mut rng)).collect(),
                    bias: vec![0.0; fan_out],
                }
            })
            .collect();
        Self { layout, layers }
    }

    pub fn zeros(layout: NetLayout) -> Self {
        let layers = layout
            .sizes()
            .windows(2)
            .map(|w| Dense { weight: vec![0.0; w[0] * w[1]], bias: vec![0.0; w[1]] })
            .collect();
        Self { layout, layers }
    }

    pub fn num_params(&self) -> usize {
        self.layout.num_params()
    }

    /// Flattened parameters: each layer's weight (row-major) then its bias.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(&l.weight);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::ShapeMismatch(format!(
                "network has {} parameters, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut k = 0;
        for l in &mut self.layers {
            let nw = l.weight.len();
            l.weight.copy_from_slice(&flat[k..k + nw]);
            k += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[k..k + nb]);
            k += nb;
        }
        Ok(())
    }

    pub fn with_params(&self, flat: &[f64]) -> Result<Self> {
        let mut out = self.clone();
        out.set_params(flat)?;
        Ok(out)
    }

    /// `self += scale * src`
    pub fn axpy(&mut self, scale: f64, src: &Mlp) -> Result<()> {
        if self.layout != src.layout {
            return Err(Error::ShapeMismatch(format!(
                "layouts {:?} and {:?} differ",
                self.layout.sizes(),
                src.layout.sizes()
            )));
        }
        for (d, s) in self.layers.iter_mut().zip(&src.layers) {
            for (a, b) in d.weight.iter_mut().zip(&s.weight) {
                *a += scale * b;
            }
            for (a, b) in d.bias.iter_mut().zip(&s.bias) {
                *a += scale * b;
            }
        }
        Ok(())
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.layout.input() {
            return Err(Error::DimensionMismatch {
                expected: self.layout.input(),
                got: input.len(),
            });
        }
        Ok(())
    }

    pub fn forward_trace(&self, input: &[f64]) -> Result<Trace> {
        self.check_input(input)?;
        let sizes = self.layout.sizes();
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut act = input.to_vec();
        for (i, l) in self.layers.iter().enumerate() {
            let (fan_in, fan_out) = (sizes[i], sizes[i + 1]);
            let mut z = l.bias.clone();
            for (o, zo) in z.iter_mut().enumerate() {
                let row = &l.weight[o * fan_in..(o + 1) * fan_in];
                *zo += row.iter().zip(&act).map(|(w, a)| w * a).sum::<f64>();
            }
            debug_assert_eq!(z.len(), fan_out);
            if i + 1 < self.layers.len() {
                act = relu(&z);
            }
            pre.push(z);
        }
        Ok(Trace { input: input.to_vec(), pre })
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_trace(input)?.pre.pop().unwrap())
    }

    /// Accumulates parameter cotangents into `grad` (flattened layout) and
    /// returns the input cotangent. The rectifier's subgradient at 0 is 0.
    pub fn backward_into(&self, trace: &Trace, cotangent: &[f64], grad: &mut [f64]) -> Result<Vec<f64>> {
        if cotangent.len() != self.layout.output() {
            return Err(Error::DimensionMismatch {
                expected: self.layout.output(),
                got: cotangent.len(),
            });
        }
        debug_assert_eq!(grad.len(), self.num_params());
        let sizes = self.layout.sizes();
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut k = 0;
        for l in &self.layers {
            offsets.push(k);
            k += l.weight.len() + l.bias.len();
        }
        let mut delta = cotangent.to_vec();
        for i in (0..self.layers.len()).rev() {
            let (fan_in, fan_out) = (sizes[i], sizes[i + 1]);
            let layer_in: Vec<f64> = if i == 0 { trace.input.clone() } else { relu(&trace.pre[i - 1]) };
            let off = offsets[i];
            let (gw, rest) = grad[off..].split_at_mut(fan_in * fan_out);
            let gb = &mut rest[..fan_out];
            for o in 0..fan_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                gb[o] += d;
                for (g, a) in gw[o * fan_in..(o + 1) * fan_in].iter_mut().zip(&layer_in) {
                    *g += d * a;
                }
            }
            let w = &self.layers[i].weight;
            let mut prev = vec![0.0; fan_in];
            for o in 0..fan_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                for (p, wv) in prev.iter_mut().zip(&w[o * fan_in..(o + 1) * fan_in]) {
                    *p += d * wv;
                }
            }
            if i > 0 {
                for (p, z) in prev.iter_mut().zip(&trace.pre[i - 1]) {
                    if *z <= 0.0 {
                        *p = 0.0;
                    }
                }
            }
            delta = prev;
        }
        Ok(delta)
    }

    /// Data-dependent initialization: rescales and shifts each hidden unit so
    /// its pre-activations over `inputs` span exactly [1, 2], which keeps every
    /// unit active with room to spare. Outputs whose standard
    /// deviation over `inputs` then exceeds 1 have their final weights scaled
    /// down to unit spread, and the final bias is moved so the mean output is
    /// unchanged. Deep narrow rectifier stacks are otherwise often dead on
    /// every input from the start.
    pub fn activate_on(&mut self, inputs: &[Vec<f64>]) -> Result<()> {
        if inputs.is_empty() {
            return Ok(());
        }
        let mean_output = |net: &Mlp| -> Result<Vec<f64>> {
            let mut acc = vec![0.0; net.layout.output()];
            for x in inputs {
                for (a, y) in acc.iter_mut().zip(net.forward(x)?) {
                    *a += y / inputs.len() as f64;
                }
            }
            Ok(acc)
        };
        let before = mean_output(self)?;
        let sizes = self.layout.sizes().to_vec();
        let mut acts: Vec<Vec<f64>> = inputs.to_vec();
        for x in &acts {
            self.check_input(x)?;
        }
        let hidden = self.layers.len() - 1;
        for (i, l) in self.layers.iter_mut().take(hidden).enumerate() {
            let (fan_in, fan_out) = (sizes[i], sizes[i + 1]);
            let mut pre: Vec<Vec<f64>> = acts
                .iter()
                .map(|a| {
                    (0..fan_out)
                        .map(|o| l.bias[o] + l.weight[o * fan_in..(o + 1) * fan_in].iter().zip(a).map(|(w, v)| w * v).sum::<f64>())
                        .collect()
                })
                .collect();
            for o in 0..fan_out {
                let (lo, hi) = pre.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), z| (lo.min(z[o]), hi.max(z[o])));
                let gain = if hi > lo { 1.0 / (hi - lo) } else { 1.0 };
                let shift = 1.0 - gain * lo;
                l.weight[o * fan_in..(o + 1) * fan_in].iter_mut().for_each(|w| *w *= gain);
                l.bias[o] = gain * l.bias[o] + shift;
                pre.iter_mut().for_each(|z| z[o] = gain * z[o] + shift);
            }
            acts = pre.iter().map(|z| relu(z)).collect();
        }
        let last = self.layers.last_mut().unwrap();
        let fan_in = sizes[sizes.len() - 2];
        for o in 0..last.bias.len() {
            let row = &mut last.weight[o * fan_in..(o + 1) * fan_in];
            let out: Vec<f64> = acts.iter().map(|a| row.iter().zip(a).map(|(w, v)| w * v).sum()).collect();
            let mean = out.iter().sum::<f64>() / out.len() as f64;
            let sd = (out.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / out.len() as f64).sqrt();
            if sd > 1.0 {
                row.iter_mut().for_each(|w| *w /= sd);
            }
        }
        let after = mean_output(self)?;
        let last = self.layers.last_mut().unwrap();
        for ((b, want), got) in last.bias.iter_mut().zip(before).zip(after) {
            *b += want - got;
        }
        Ok(())
    }

    /// Vector-Jacobian product at `input`: `(parameter cotangent, input cotangent)`.
    pub fn vjp(&self, input: &[f64], cotangent: &[f64]) -> Result<(Mlp, Vec<f64>)> {
        let trace = self.forward_trace(input)?;
        let mut grad = vec![0.0; self.num_params()];
        let input_bar = self.backward_into(&trace, cotangent, &mut grad)?;
        Ok((self.with_params(&grad)?, input_bar))
    }
}
