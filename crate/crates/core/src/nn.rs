//! Tanh multilayer perceptrons.
//!
//! Weights are stored `[fan_in, fan_out]` so a batch `[rows, fan_in]` maps to
//! `[rows, fan_out]` with one matmul. Hidden layers use `tanh`; the output
//! layer is linear.
//!
//! # Checkpoint format (version 1)
//!
//! Plain UTF-8 text, `\n` line endings, every float written with 17
//! significant digits (`{:.16e}`), so a parameter set always serializes to
//! the same bytes and reloads bit-exactly:
//!
//! ```text
//! mlp-checkpoint 1
//! layers 2 16 2
//! weight 0 2 16
//! <fan_in lines of fan_out floats>
//! bias 0 16
//! <one line of fan_out floats>
//! ...
//! end
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

const CHECKPOINT_MAGIC: &str = "mlp-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layer_sizes: Vec<usize>,
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
}

/// Trainable scalar count of a tanh MLP with the given widths.
pub fn param_count_for(layer_sizes: &[usize]) -> usize {
    layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

fn validate_sizes(layer_sizes: &[usize]) -> Result<()> {
    if layer_sizes.len() < 2 {
        return Err(Error::structural(format!("an MLP needs at least 2 layers, got {layer_sizes:?}")));
    }
    if layer_sizes.contains(&0) {
        return Err(Error::structural(format!("layer widths must be positive: {layer_sizes:?}")));
    }
    Ok(())
}

/// Hidden width `w` for `[input, w, .., w, output]` (with `hidden_layers`
/// copies of `w`) whose parameter count is closest to `target`. Fails when
/// the best width misses the target by more than 10%.
pub fn width_for_target(input: usize, output: usize, hidden_layers: usize, target: usize) -> Result<usize> {
    let sizes = |w: usize| {
        let mut s = vec![input];
        s.extend(std::iter::repeat_n(w, hidden_layers));
        s.push(output);
        s
    };
    let best = (1..=4096)
        .min_by_key(|&w| param_count_for(&sizes(w)).abs_diff(target))
        .expect("non-empty range");
    let count = param_count_for(&sizes(best));
    if count.abs_diff(target) as f64 > 0.1 * target as f64 {
        return Err(Error::structural(format!(
            "no width within 10% of {target} parameters (closest: width {best}, {count} parameters)"
        )));
    }
    Ok(best)
}

impl Mlp {
    /// Glorot-uniform weights, zero biases, deterministic in `seed`.
    pub fn init(layer_sizes: &[usize], seed: u64) -> Result<Self> {
        validate_sizes(layer_sizes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = (0..fan_in * fan_out).map(|_| rng.random_range(-a..a)).collect();
            weights.push(Tensor::matrix(fan_in, fan_out, data)?);
            biases.push(Tensor::zeros(&[fan_out]));
        }
        Ok(Mlp { layer_sizes: layer_sizes.to_vec(), weights, biases })
    }

    pub fn zeros(layer_sizes: &[usize]) -> Result<Self> {
        validate_sizes(layer_sizes)?;
        let weights = layer_sizes.windows(2).map(|w| Tensor::zeros(&[w[0], w[1]])).collect();
        let biases = layer_sizes.windows(2).map(|w| Tensor::zeros(&[w[1]])).collect();
        Ok(Mlp { layer_sizes: layer_sizes.to_vec(), weights, biases })
    }

    /// Builds an MLP from explicit `[fan_in, fan_out]` weights and biases.
    pub fn from_parts(weights: Vec<Tensor>, biases: Vec<Tensor>) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(Error::structural("weights and biases must be non-empty and paired"));
        }
        let mut sizes = vec![weights[0].rows()];
        for (w, b) in weights.iter().zip(&biases) {
            if w.shape().len() != 2 || w.rows() != *sizes.last().unwrap() || b.shape() != [w.cols()] {
                return Err(Error::structural(format!(
                    "layer shapes do not chain: weight {:?}, bias {:?}",
                    w.shape(),
                    b.shape()
                )));
            }
            sizes.push(w.cols());
        }
        validate_sizes(&sizes)?;
        Ok(Mlp { layer_sizes: sizes, weights, biases })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_width(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_width(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        param_count_for(&self.layer_sizes)
    }

    pub fn weights(&self) -> &[Tensor] {
        &self.weights
    }

    pub fn biases(&self) -> &[Tensor] {
        &self.biases
    }

    /// Parameter tensors in a fixed order: `w0, b0, w1, b1, ...`.
    pub fn params(&self) -> Vec<&Tensor> {
        self.weights.iter().zip(&self.biases).flat_map(|(w, b)| [w, b]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.weights.iter_mut().zip(self.biases.iter_mut()).flat_map(|(w, b)| [w, b]).collect()
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundMlp<'t> {
        BoundMlp {
            layer_sizes: self.layer_sizes.clone(),
            weights: self.weights.iter().map(|w| tape.param(w.clone())).collect(),
            biases: self.biases.iter().map(|b| tape.param(b.clone())).collect(),
        }
    }

    /// Plain evaluation for a single input vector.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != self.input_width() {
            return Err(Error::structural(format!(
                "MLP expects input width {}, got {}",
                self.input_width(),
                input.len()
            )));
        }
        let last = self.weights.len() - 1;
        let mut h = input.to_vec();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let (fan_in, fan_out) = (w.rows(), w.cols());
            let mut next = b.data().to_vec();
            for (i, &hi) in h.iter().enumerate().take(fan_in) {
                for (j, o) in next.iter_mut().enumerate() {
                    *o += hi * w.data()[i * fan_out + j];
                }
            }
            if l < last {
                next.iter_mut().for_each(|v| *v = v.tanh());
            }
            h = next;
        }
        Ok(h)
    }

    pub fn to_checkpoint(&self) -> String {
        let mut out = format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\nlayers");
        for s in &self.layer_sizes {
            out.push_str(&format!(" {s}"));
        }
        out.push('\n');
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            out.push_str(&format!("weight {l} {} {}\n", w.rows(), w.cols()));
            for row in w.data().chunks(w.cols()) {
                out.push_str(&format_row(row));
            }
            out.push_str(&format!("bias {l} {}\n", b.len()));
            out.push_str(&format_row(b.data()));
        }
        out.push_str("end\n");
        out
    }

    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let mut next = |what: &str| lines.next().ok_or_else(|| Error::Parse(format!("checkpoint truncated before {what}")));

        let header = next("header")?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some(CHECKPOINT_MAGIC) {
            return Err(Error::Parse(format!("not an MLP checkpoint: {header:?}")));
        }
        let version: u32 = parse_token(parts.next(), "version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Parse(format!("unsupported checkpoint version {version}")));
        }
        let layers_line = next("layers")?;
        let mut parts = layers_line.split_whitespace();
        if parts.next() != Some("layers") {
            return Err(Error::Parse(format!("expected layers line, got {layers_line:?}")));
        }
        let sizes: Vec<usize> = parts.map(|p| parse_token(Some(p), "layer width")).collect::<Result<_>>()?;
        validate_sizes(&sizes)?;

        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (l, w) in sizes.windows(2).enumerate() {
            let expect = format!("weight {l} {} {}", w[0], w[1]);
            let got = next("weight header")?;
            if got.trim() != expect {
                return Err(Error::Parse(format!("expected {expect:?}, got {got:?}")));
            }
            let mut data = Vec::with_capacity(w[0] * w[1]);
            for _ in 0..w[0] {
                data.extend(parse_row(next("weight row")?, w[1])?);
            }
            weights.push(Tensor::matrix(w[0], w[1], data)?);
            let expect = format!("bias {l} {}", w[1]);
            let got = next("bias header")?;
            if got.trim() != expect {
                return Err(Error::Parse(format!("expected {expect:?}, got {got:?}")));
            }
            biases.push(Tensor::vector(parse_row(next("bias row")?, w[1])?));
        }
        if next("end")?.trim() != "end" {
            return Err(Error::Parse("missing end marker".into()));
        }
        Ok(Mlp { layer_sizes: sizes, weights, biases })
    }
}

fn format_row(row: &[f64]) -> String {
    let mut s = row.iter().map(|v| format!("{v:.16e}")).collect::<Vec<_>>().join(" ");
    s.push('\n');
    s
}

fn parse_token<T: std::str::FromStr>(tok: Option<&str>, what: &str) -> Result<T> {
    let tok = tok.ok_or_else(|| Error::Parse(format!("missing {what}")))?;
    tok.parse().map_err(|_| Error::Parse(format!("bad {what}: {tok:?}")))
}

fn parse_row(line: &str, expected: usize) -> Result<Vec<f64>> {
    let row: Vec<f64> = line.split_whitespace().map(|t| parse_token(Some(t), "float")).collect::<Result<_>>()?;
    if row.len() != expected {
        return Err(Error::Parse(format!("expected {expected} values, got {}", row.len())));
    }
    Ok(row)
}

/// An [`Mlp`] whose parameters live on a tape.
#[derive(Clone, Debug)]
pub struct BoundMlp<'t> {
    layer_sizes: Vec<usize>,
    weights: Vec<Var<'t>>,
    biases: Vec<Var<'t>>,
}

impl<'t> BoundMlp<'t> {
    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    /// Parameter leaves in the same order as [`Mlp::params`].
    pub fn params(&self) -> Vec<Var<'t>> {
        self.weights.iter().zip(&self.biases).flat_map(|(&w, &b)| [w, b]).collect()
    }

    /// Evaluates a `[fan_in]` vector or a `[rows, fan_in]` batch.
    pub fn forward(&self, input: Var<'t>) -> Result<Var<'t>> {
        let shape = input.shape();
        let width = *shape.last().unwrap_or(&1);
        if shape.is_empty() || width != self.layer_sizes[0] {
            return Err(Error::structural(format!(
                "MLP expects input width {}, got shape {shape:?}",
                self.layer_sizes[0]
            )));
        }
        let batched = shape.len() == 2;
        let last = self.weights.len() - 1;
        let mut h = input;
        for (l, (&w, &b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let z = h.matmul(w);
            let a = if batched { z.add_row(b) } else { z + b };
            h = if l < last { a.tanh() } else { a };
        }
        Ok(h)
    }

    /// Evaluates a `[rows, 1]` batch of scalar inputs together with the
    /// derivative of every output with respect to that input. The
    /// derivative is propagated forward through the layers as tape
    /// operations, so it stays differentiable with respect to the weights.
    pub fn forward_with_input_derivative(&self, input: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let shape = input.shape();
        if shape.len() != 2 || shape[1] != 1 || self.layer_sizes[0] != 1 {
            return Err(Error::structural(format!(
                "input derivative needs a scalar-input MLP and a [rows, 1] batch, got {shape:?}"
            )));
        }
        let tape = input.tape();
        let ones = tape.constant(Tensor::filled(&[shape[0], 1], 1.0));
        let last = self.weights.len() - 1;
        let mut h = input;
        let mut dh = ones;
        for (l, (&w, &b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let a = h.matmul(w).add_row(b);
            let da = dh.matmul(w);
            if l < last {
                h = a.tanh();
                let slope = h.square().scale(-1.0).add_scalar(1.0);
                dh = slope * da;
            } else {
                h = a;
                dh = da;
            }
        }
        Ok((h, dh))
    }
}
