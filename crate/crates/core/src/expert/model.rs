use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::{dot, softmax, Scalar};
use crate::taskgroups::TaskGroup;

/// Fully connected layer followed by `tanh`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<F> {
    /// `out × in`.
    pub weights: Matrix<F>,
    pub bias: Vec<F>,
}

impl<F: Scalar> Dense<F> {
    fn init(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (input + output) as f64).sqrt();
        let weights = Matrix::from_fn(output, input, |_, _| F::of(rng.random_range(-limit..limit)));
        Self { weights, bias: vec![F::zero(); output] }
    }

    fn apply(&self, x: &[F]) -> Vec<F> {
        let mut out = self.weights.mul_vec(x);
        for (o, &b) in out.iter_mut().zip(&self.bias) {
            *o = (*o + b).tanh();
        }
        out
    }
}

/// Feed-forward encoder shared in shape by every expert. Inputs are
/// standardized with a fixed shift and scale before the first layer; with no
/// layers the encoder is the standardized identity.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone<F> {
    pub input_shift: Vec<F>,
    pub input_scale: Vec<F>,
    pub layers: Vec<Dense<F>>,
}

impl<F: Scalar> Backbone<F> {
    pub fn identity(dim: usize) -> Self {
        Self { input_shift: vec![F::zero(); dim], input_scale: vec![F::one(); dim], layers: Vec::new() }
    }

    pub fn new(input_dim: usize, hidden: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let mut layers = Vec::with_capacity(hidden.len());
        let mut width = input_dim;
        for &h in hidden {
            layers.push(Dense::init(width, h, rng));
            width = h;
        }
        Self { layers, ..Self::identity(input_dim) }
    }

    /// Standardizes inputs as `(x − mean) / std`.
    pub fn with_standardization(mut self, mean: Vec<F>, std: Vec<F>) -> Self {
        self.input_shift = mean;
        self.input_scale = std.into_iter().map(|s| F::one() / s).collect();
        self
    }

    pub fn input_dim(&self) -> usize {
        self.input_shift.len()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(self.input_dim(), |l| l.bias.len())
    }

    fn standardize(&self, x: &[F]) -> Vec<F> {
        x.iter().zip(&self.input_shift).zip(&self.input_scale).map(|((&v, &m), &s)| (v - m) * s).collect()
    }

    pub fn encode(&self, x: &[F]) -> Vec<F> {
        let mut a = self.standardize(x);
        for layer in &self.layers {
            a = layer.apply(&a);
        }
        a
    }

    /// Activations of every layer, input first and encoding last.
    pub(crate) fn trace(&self, x: &[F]) -> Vec<Vec<F>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(self.standardize(x));
        for layer in &self.layers {
            let next = layer.apply(acts.last().expect("input activation"));
            acts.push(next);
        }
        acts
    }

    /// Accumulates parameter gradients given `d_out = ∂loss/∂encoding`.
    pub(crate) fn backprop(&self, acts: &[Vec<F>], d_out: Vec<F>, grads: &mut [Dense<F>]) {
        let mut delta = d_out;
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let out = &acts[l + 1];
            let input = &acts[l];
            let pre: Vec<F> = delta.iter().zip(out).map(|(&d, &a)| d * (F::one() - a * a)).collect();
            let g = &mut grads[l];
            for (r, &pr) in pre.iter().enumerate() {
                g.bias[r] += pr;
                for (w, &x) in g.weights.row_mut(r).iter_mut().zip(input) {
                    *w += pr * x;
                }
            }
            if l > 0 {
                delta = layer.weights.tr_mul_vec(&pre);
            }
        }
    }

    pub(crate) fn zeros_like(&self) -> Vec<Dense<F>> {
        self.layers
            .iter()
            .map(|l| Dense {
                weights: Matrix::zeros(l.weights.rows(), l.weights.cols()),
                bias: vec![F::zero(); l.bias.len()],
            })
            .collect()
    }
}

/// One expert: backbone encoder and an (M+1)-way head whose class weights
/// decompose as `W_j = W0 + V_j`. The last output is the not-in-group slot.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertModel<F> {
    pub group: TaskGroup,
    pub backbone: Backbone<F>,
    pub w0: Vec<F>,
    /// Row `j` is `V_j`.
    pub v: Matrix<F>,
    pub w_nig: Vec<F>,
    /// One bias per output, sentinel last.
    pub bias: Vec<F>,
    pub loss_trajectory: Vec<f64>,
}

impl<F: Scalar> ExpertModel<F> {
    /// `W0` starts at zero, `V` and the sentinel weights small and random.
    pub fn init(group: TaskGroup, backbone: Backbone<F>, rng: &mut ChaCha8Rng) -> Self {
        let d = backbone.output_dim();
        let m = group.size();
        let scale = 0.1 / (d as f64).sqrt();
        let v = Matrix::from_fn(m, d, |_, _| F::of(rng.random_range(-scale..scale)));
        let w_nig = (0..d).map(|_| F::of(rng.random_range(-scale..scale))).collect();
        Self {
            group,
            backbone,
            w0: vec![F::zero(); d],
            v,
            w_nig,
            bias: vec![F::zero(); m + 1],
            loss_trajectory: Vec::new(),
        }
    }

    /// Every head parameter zero.
    pub fn zeroed(group: TaskGroup, backbone: Backbone<F>) -> Self {
        let d = backbone.output_dim();
        let m = group.size();
        Self {
            group,
            backbone,
            w0: vec![F::zero(); d],
            v: Matrix::zeros(m, d),
            w_nig: vec![F::zero(); d],
            bias: vec![F::zero(); m + 1],
            loss_trajectory: Vec::new(),
        }
    }

    /// M.
    pub fn group_size(&self) -> usize {
        self.group.size()
    }

    pub fn encoding_dim(&self) -> usize {
        self.w0.len()
    }

    pub fn input_dim(&self) -> usize {
        self.backbone.input_dim()
    }

    /// `W0 + V_j`.
    pub fn class_weight(&self, slot: usize) -> Vec<F> {
        self.w0.iter().zip(self.v.row(slot)).map(|(&a, &b)| a + b).collect()
    }

    /// `M × d`, row `j` is `W_j`.
    pub fn class_weights(&self) -> Matrix<F> {
        Matrix::from_fn(self.group_size(), self.encoding_dim(), |j, k| self.w0[k] + self.v[(j, k)])
    }

    pub(crate) fn check_input(&self, x: &[F]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::invalid(format!(
                "input has dimension {}, expert expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    pub fn encode(&self, x: &[F]) -> Result<Vec<F>> {
        self.check_input(x)?;
        Ok(self.backbone.encode(x))
    }

    /// Head logits for an encoding, sentinel last.
    pub fn logits_from_encoding(&self, h: &[F]) -> Vec<F> {
        let m = self.group_size();
        let mut z = Vec::with_capacity(m + 1);
        let shared = dot(&self.w0, h);
        for j in 0..m {
            z.push(shared + dot(self.v.row(j), h) + self.bias[j]);
        }
        z.push(dot(&self.w_nig, h) + self.bias[m]);
        z
    }

    pub fn logits(&self, x: &[F]) -> Result<Vec<F>> {
        Ok(self.logits_from_encoding(&self.encode(x)?))
    }

    /// Probabilities over the M group slots and the sentinel.
    pub fn forward(&self, x: &[F]) -> Result<Vec<F>> {
        Ok(softmax(&self.logits(x)?))
    }

    pub fn num_params(&self) -> usize {
        let backbone: usize = self.backbone.layers.iter().map(|l| l.weights.as_slice().len() + l.bias.len()).sum();
        backbone + self.w0.len() + self.v.as_slice().len() + self.w_nig.len() + self.bias.len()
    }

    /// Trainable parameters in a fixed order: backbone layers (weights then
    /// bias), `W0`, `V`, sentinel weights, biases.
    pub fn params(&self) -> Vec<F> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.backbone.layers {
            out.extend_from_slice(l.weights.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out.extend_from_slice(&self.w0);
        out.extend_from_slice(self.v.as_slice());
        out.extend_from_slice(&self.w_nig);
        out.extend_from_slice(&self.bias);
        out
    }

    pub fn set_params(&mut self, flat: &[F]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::invalid(format!("expected {} parameters, got {}", self.num_params(), flat.len())));
        }
        let mut rest = flat;
        let mut take = |dst: &mut [F]| {
            let (head, tail) = rest.split_at(dst.len());
            dst.copy_from_slice(head);
            rest = tail;
        };
        for l in &mut self.backbone.layers {
            take(l.weights.as_mut_slice());
            take(&mut l.bias);
        }
        take(&mut self.w0);
        take(self.v.as_mut_slice());
        take(&mut self.w_nig);
        take(&mut self.bias);
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.params().iter().all(|v| v.is_finite())
            && self.backbone.input_shift.iter().chain(&self.backbone.input_scale).all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn group(m: usize) -> TaskGroup {
        TaskGroup::new(0, (0..m).collect()).unwrap()
    }

    #[test]
    fn zero_parameters_give_uniform_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut model = ExpertModel::<f64>::zeroed(group(3), Backbone::new(4, &[5], &mut rng));
        model.backbone.layers[0].weights = Matrix::zeros(5, 4);
        let p = model.forward(&[1.0, -2.0, 0.5, 3.0]).unwrap();
        assert_eq!(p.len(), 4);
        for v in p {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn identity_backbone_hand_softmax() {
        let mut model = ExpertModel::<f64>::zeroed(group(1), Backbone::identity(1));
        model.v[(0, 0)] = 2.0;
        let p = model.forward(&[1.0]).unwrap();
        let e2 = 2.0_f64.exp();
        assert!((p[0] - e2 / (e2 + 1.0)).abs() < 1e-15);
        assert!((p[1] - 1.0 / (e2 + 1.0)).abs() < 1e-15);
        assert!((p[0] - 0.8808).abs() < 1e-4);
    }

    #[test]
    fn dimension_mismatch() {
        let model = ExpertModel::<f64>::zeroed(group(2), Backbone::identity(3));
        assert!(matches!(model.forward(&[1.0, 2.0]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn class_weight_is_shared_plus_specific() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut model = ExpertModel::<f64>::init(group(3), Backbone::identity(2), &mut rng);
        model.w0 = vec![0.5, -1.0];
        let w = model.class_weights();
        for j in 0..3 {
            assert_eq!(w.row(j), model.class_weight(j).as_slice());
            assert_eq!(model.class_weight(j)[0], 0.5 + model.v[(j, 0)]);
        }
    }

    #[test]
    fn params_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut model = ExpertModel::<f64>::init(group(2), Backbone::new(3, &[4, 2], &mut rng), &mut rng);
        let p = model.params();
        assert_eq!(p.len(), model.num_params());
        let shifted: Vec<f64> = p.iter().map(|v| v + 1.0).collect();
        model.set_params(&shifted).unwrap();
        assert_eq!(model.params(), shifted);
        assert!(model.set_params(&p[1..]).is_err());
    }

    #[test]
    fn standardization_applies_before_layers() {
        let b = Backbone::<f64>::identity(2).with_standardization(vec![1.0, 2.0], vec![2.0, 4.0]);
        assert_eq!(b.encode(&[3.0, 10.0]), vec![1.0, 2.0]);
    }
}
