//! MLP encoder producing unit-norm embeddings and a linear-softmax
//! classifier on top of them.

mod checkpoint;

pub use checkpoint::{read_checkpoint, write_checkpoint};

use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::numerics::{softmax_rows, NumericsError, Tape, Tensor, Var, EPS_NORM};
use crate::rng::{stream, Stream};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Layer widths `input → hidden… → embed → classes`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelDims {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub embed: usize,
    pub classes: usize,
}

impl ModelDims {
    pub fn new(input: usize, hidden: Vec<usize>, embed: usize, classes: usize) -> Self {
        Self { input, hidden, embed, classes }
    }

    /// Flat width list, e.g. `[20, 128, 128, 32, 5]`.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input];
        w.extend(&self.hidden);
        w.push(self.embed);
        w.push(self.classes);
        w
    }

    pub fn from_widths(w: &[usize]) -> Result<Self, ModelError> {
        if w.len() < 3 || w.contains(&0) {
            return Err(ModelError::Shape(format!("invalid layer widths {w:?}")));
        }
        Ok(Self { input: w[0], hidden: w[1..w.len() - 2].to_vec(), embed: w[w.len() - 2], classes: w[w.len() - 1] })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `in × out`.
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Encoder layers followed by one classifier layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    dims: ModelDims,
    layers: Vec<Linear>,
}

/// Tape handles for every parameter, in layer order.
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub layers: Vec<(Var, Var)>,
}

impl ParamVars {
    pub fn all(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}

/// He-style initialisation: weights `N(0, 2 / fan_in)`, biases zero.
pub fn init_params(seed: u64, dims: &ModelDims) -> ModelParams {
    let mut rng = stream(seed, Stream::Init);
    let widths = dims.widths();
    let layers = widths
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let std = (2.0 / fan_in as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    std * z
                })
                .collect();
            Linear { weight: Tensor::matrix(fan_in, fan_out, data), bias: Tensor::zeros(&[fan_out]) }
        })
        .collect();
    ModelParams { dims: dims.clone(), layers }
}

impl ModelParams {
    pub fn from_layers(dims: ModelDims, layers: Vec<Linear>) -> Result<Self, ModelError> {
        let widths = dims.widths();
        if layers.len() != widths.len() - 1 {
            return Err(ModelError::Shape("layer count".into()));
        }
        for (l, w) in layers.iter().zip(widths.windows(2)) {
            if l.weight.shape() != [w[0], w[1]] || l.bias.shape() != [w[1]] {
                return Err(ModelError::Shape(format!(
                    "layer {:?} does not chain {}→{}",
                    l.weight.shape(),
                    w[0],
                    w[1]
                )));
            }
        }
        Ok(Self { dims, layers })
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn layers(&self) -> &[Linear] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Linear] {
        &mut self.layers
    }

    pub fn encoder_layers(&self) -> &[Linear] {
        &self.layers[..self.layers.len() - 1]
    }

    pub fn classifier(&self) -> &Linear {
        self.layers.last().expect("at least one layer")
    }

    /// All parameters in a fixed order (weight, bias per layer).
    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn num_params(&self) -> usize {
        self.tensors().map(Tensor::len).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> Result<(), ModelError> {
        if flat.len() != self.num_params() {
            return Err(ModelError::Shape(format!("{} values for {} parameters", flat.len(), self.num_params())));
        }
        let mut off = 0;
        for t in self.tensors_mut() {
            let k = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + k]);
            off += k;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().all(Tensor::is_finite)
    }

    /// Record every parameter on `tape` as a differentiable leaf.
    pub fn register(&self, tape: &mut Tape) -> ParamVars {
        ParamVars {
            layers: self.layers.iter().map(|l| (tape.leaf(l.weight.clone()), tape.leaf(l.bias.clone()))).collect(),
        }
    }
}

/// Encoder on the tape: `x` is `batch × input`; returns unit-norm rows.
pub fn encode_tape(tape: &mut Tape, vars: &ParamVars, x: Var) -> Result<Var, NumericsError> {
    let enc = &vars.layers[..vars.layers.len() - 1];
    let mut h = x;
    for (k, &(w, b)) in enc.iter().enumerate() {
        let z = tape.matmul(h, w)?;
        h = tape.add_bias(z, b)?;
        if k + 1 < enc.len() {
            h = tape.relu(h);
        }
    }
    tape.l2_normalize_rows(h)
}

/// Classifier on the tape: softmax probabilities for each embedding row.
pub fn classify_tape(tape: &mut Tape, vars: &ParamVars, q: Var) -> Result<Var, NumericsError> {
    let &(w, b) = vars.layers.last().expect("classifier layer");
    let z = tape.matmul(q, w)?;
    let z = tape.add_bias(z, b)?;
    Ok(tape.softmax_rows(z))
}

fn affine(x: &Tensor, l: &Linear) -> Result<Tensor, NumericsError> {
    let mut z = x.matmul(&l.weight)?;
    let n = l.bias.len();
    for (i, v) in z.data_mut().iter_mut().enumerate() {
        *v += l.bias.data()[i % n];
    }
    Ok(z)
}

/// Untaped encoder over a `batch × input` matrix.
pub fn encode_batch(params: &ModelParams, x: &Tensor) -> Result<Tensor, ModelError> {
    if x.cols() != params.dims.input {
        return Err(ModelError::Shape(format!("input width {} for a {}-wide encoder", x.cols(), params.dims.input)));
    }
    let enc = params.encoder_layers();
    let mut h = x.clone();
    for (k, l) in enc.iter().enumerate() {
        h = affine(&h, l)?;
        if k + 1 < enc.len() {
            h.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        }
    }
    for i in 0..h.rows() {
        let row = h.row_mut(i);
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n < EPS_NORM || !n.is_finite() {
            return Err(NumericsError::Degenerate(n).into());
        }
        row.iter_mut().for_each(|v| *v /= n);
    }
    Ok(h)
}

/// Untaped classifier over a `batch × embed` matrix.
pub fn classify_batch(params: &ModelParams, q: &Tensor) -> Result<Tensor, ModelError> {
    let z = affine(q, params.classifier())?;
    Ok(softmax_rows(&z))
}

pub fn encode(params: &ModelParams, x: &[f64]) -> Result<Vec<f64>, ModelError> {
    Ok(encode_batch(params, &Tensor::matrix(1, x.len(), x.to_vec()))?.into_data())
}

pub fn classify(params: &ModelParams, q: &[f64]) -> Result<Vec<f64>, ModelError> {
    Ok(classify_batch(params, &Tensor::matrix(1, q.len(), q.to_vec()))?.into_data())
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check_many;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dims() -> ModelDims {
        ModelDims::new(4, vec![16, 12], 3, 4)
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
    }

    #[test]
    fn init_is_deterministic_with_zero_bias() {
        let a = init_params(3, &dims());
        assert_eq!(a, init_params(3, &dims()));
        assert_ne!(a, init_params(4, &dims()));
        assert!(a.layers().iter().all(|l| l.bias.data().iter().all(|&b| b == 0.0)));
    }

    #[test]
    fn init_weight_scale() {
        let p = init_params(1, &ModelDims::new(64, vec![64], 64, 2));
        let w = p.layers()[1].weight.data();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let std = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
        let want = (2.0f64 / 64.0).sqrt();
        assert!((std - want).abs() < 0.1 * want, "{std} vs {want}");
    }

    #[test]
    fn embeddings_unit_norm_and_pure() {
        let p = init_params(2, &dims());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let x = rand_vec(&mut rng, 4);
            let q = encode(&p, &x).unwrap();
            let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-10);
            assert_eq!(q, encode(&p, &x).unwrap());
        }
    }

    #[test]
    fn wrong_input_width_is_rejected() {
        let p = init_params(2, &dims());
        assert!(matches!(encode(&p, &[1.0, 2.0]), Err(ModelError::Shape(_))));
    }

    #[test]
    fn zero_classifier_is_uniform() {
        let mut p = init_params(2, &dims());
        let last = p.layers_mut().last_mut().unwrap();
        last.weight.data_mut().fill(0.0);
        let probs = classify(&p, &[0.6, 0.8, 0.0]).unwrap();
        assert!(probs.iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn argmax_invariant_to_bias_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for seed in 0..20 {
            let mut p = init_params(seed, &dims());
            let x = rand_vec(&mut rng, 4);
            let q = encode(&p, &x).unwrap();
            let before = classify(&p, &q).unwrap();
            let shift = rng.random_range(-5.0..5.0);
            p.layers_mut().last_mut().unwrap().bias.data_mut().iter_mut().for_each(|b| *b += shift);
            let after = classify(&p, &q).unwrap();
            assert_eq!(argmax(&before), argmax(&after));
            assert!((after.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn squared_norm_of_embedding_has_zero_gradient() {
        let p = init_params(5, &dims());
        let mut tape = Tape::new();
        let vars = p.register(&mut tape);
        let x = tape.constant(Tensor::matrix(1, 4, vec![0.3, -1.0, 0.7, 0.2]));
        let q = encode_tape(&mut tape, &vars, x).unwrap();
        let n2 = tape.dot(q, q).unwrap();
        let g = tape.backward(n2).unwrap();
        for v in vars.all() {
            assert!(g.get(v, &tape).data().iter().all(|x| x.abs() < 1e-12));
        }
    }

    #[test]
    fn taped_and_untaped_forward_agree() {
        let p = init_params(6, &dims());
        let x = Tensor::matrix(2, 4, vec![0.1, 0.2, -0.3, 0.4, 1.0, -1.0, 0.5, 0.0]);
        let mut tape = Tape::new();
        let vars = p.register(&mut tape);
        let xv = tape.constant(x.clone());
        let q = encode_tape(&mut tape, &vars, xv).unwrap();
        let pr = classify_tape(&mut tape, &vars, q).unwrap();
        let q2 = encode_batch(&p, &x).unwrap();
        assert_eq!(tape.value(q), &q2);
        assert_eq!(tape.value(pr), &classify_batch(&p, &q2).unwrap());
    }

    #[test]
    fn composite_gradient_check() {
        let p = init_params(8, &dims());
        let x = Tensor::matrix(2, 4, vec![0.5, -0.2, 0.9, 0.1, -0.4, 0.3, 0.2, 0.8]);
        let w = Tensor::matrix(2, 4, vec![0.3, -0.1, 0.6, 0.2, 0.5, 0.1, -0.7, 0.4]);
        let tensors: Vec<Tensor> = p.tensors().cloned().collect();
        let err = grad_check_many(
            |tape, vs| {
                let vars = ParamVars { layers: vs.chunks(2).map(|c| (c[0], c[1])).collect() };
                let xv = tape.constant(x.clone());
                let q = encode_tape(tape, &vars, xv)?;
                let pr = classify_tape(tape, &vars, q)?;
                let wv = tape.constant(w.clone());
                tape.dot(pr, wv)
            },
            &tensors,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn flat_round_trip() {
        let p = init_params(1, &dims());
        let mut q = init_params(2, &dims());
        q.load_flat(&p.flatten()).unwrap();
        assert_eq!(p, q);
        assert!(q.load_flat(&[1.0]).is_err());
    }
}
