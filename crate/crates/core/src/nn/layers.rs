//! Weight containers for the layers the models are assembled from.
//!
//! Each container owns named [`Parameter`]s and knows how to extend a
//! [`Graph`] with its forward computation. Parameter iteration order is the
//! registration order and doubles as the checkpoint tensor order.

use super::{Graph, NodeId, Parameter, Scalar, Tensor};
use crate::rng::SeededRng;
use thiserror::Error;

/// Additive logit value for masked attention positions. Large enough that
/// `exp(x - max)` underflows to exactly zero in both f32 and f64, without
/// the NaN hazards of literal infinity.
pub const MASKED_LOGIT: f64 = -1e9;

#[derive(Debug, Error)]
pub enum LayerError {
    #[error("attention mask shape {got:?} does not match scores [{rows}x{cols}]")]
    MaskShape {
        rows: usize,
        cols: usize,
        got: Vec<usize>,
    },
}

fn xavier<F: Scalar>(shape: Vec<usize>, fan_in: usize, fan_out: usize, rng: &mut SeededRng) -> Tensor<F> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::uniform(shape, a, rng)
}

/// Affine map `x·W (+ b)`.
#[derive(Debug, Clone)]
pub struct Linear<F: Scalar> {
    pub weight: Parameter<F>,
    pub bias: Option<Parameter<F>>,
}

impl<F: Scalar> Linear<F> {
    pub fn init(name: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut SeededRng) -> Self {
        Self {
            weight: Parameter::new(
                format!("{name}.weight"),
                xavier(vec![fan_in, fan_out], fan_in, fan_out, rng),
            ),
            bias: bias.then(|| Parameter::new(format!("{name}.bias"), Tensor::zeros(vec![fan_out]))),
        }
    }

    pub fn forward(&self, g: &mut Graph<F>, x: NodeId) -> NodeId {
        let w = g.param(&self.weight);
        let h = g.matmul(x, w);
        match &self.bias {
            Some(b) => {
                let bid = g.param(b);
                g.add_row(h, bid)
            }
            None => h,
        }
    }

    pub fn params(&self) -> Vec<&Parameter<F>> {
        let mut out = vec![&self.weight];
        out.extend(self.bias.as_ref());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<F>> {
        let mut out = vec![&mut self.weight];
        out.extend(self.bias.as_mut());
        out
    }
}

/// Gain/bias pair for layer normalization.
#[derive(Debug, Clone)]
pub struct LayerNormParams<F: Scalar> {
    pub gain: Parameter<F>,
    pub bias: Parameter<F>,
    pub eps: f64,
}

impl<F: Scalar> LayerNormParams<F> {
    pub fn init(name: &str, dim: usize) -> Self {
        Self {
            gain: Parameter::new(
                format!("{name}.gain"),
                Tensor::from_vec(vec![dim], vec![F::one(); dim]),
            ),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(vec![dim])),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, g: &mut Graph<F>, x: NodeId) -> NodeId {
        let gain = g.param(&self.gain);
        let bias = g.param(&self.bias);
        g.layer_norm(x, gain, bias, self.eps)
    }

    pub fn params(&self) -> Vec<&Parameter<F>> {
        vec![&self.gain, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<F>> {
        vec![&mut self.gain, &mut self.bias]
    }
}

/// Multi-head scaled dot-product attention with per-head projections and one
/// output projection. No projection carries a bias term: attention over zero
/// queries and zero values is then exactly the zero tensor, which the
/// unified encoder blocks rely on.
#[derive(Debug, Clone)]
pub struct AttentionWeights<F: Scalar> {
    pub wq: Vec<Parameter<F>>,
    pub wk: Vec<Parameter<F>>,
    pub wv: Vec<Parameter<F>>,
    pub wo: Parameter<F>,
    pub head_count: usize,
    pub model_dim: usize,
}

impl<F: Scalar> AttentionWeights<F> {
    pub fn init(name: &str, model_dim: usize, head_count: usize, rng: &mut SeededRng) -> Self {
        assert!(
            head_count > 0 && model_dim % head_count == 0,
            "model_dim {model_dim} must be divisible by head_count {head_count}"
        );
        let dh = model_dim / head_count;
        let proj = |tag: &str, h: usize, rng: &mut SeededRng| {
            Parameter::new(
                format!("{name}.{tag}{h}"),
                xavier(vec![model_dim, dh], model_dim, dh, rng),
            )
        };
        Self {
            wq: (0..head_count).map(|h| proj("wq", h, rng)).collect(),
            wk: (0..head_count).map(|h| proj("wk", h, rng)).collect(),
            wv: (0..head_count).map(|h| proj("wv", h, rng)).collect(),
            wo: Parameter::new(
                format!("{name}.wo"),
                xavier(vec![model_dim, model_dim], model_dim, model_dim, rng),
            ),
            head_count,
            model_dim,
        }
    }

    /// `q_in`: [m×d], `k_in`/`v_in`: [n×d], `mask`: optional additive logit
    /// matrix [m×n] (0 for visible, [`MASKED_LOGIT`] for hidden).
    pub fn forward(
        &self,
        g: &mut Graph<F>,
        q_in: NodeId,
        k_in: NodeId,
        v_in: NodeId,
        mask: Option<&Tensor<F>>,
    ) -> Result<NodeId, LayerError> {
        let m = g.shape(q_in)[0];
        let n = g.shape(k_in)[0];
        let mask_id = match mask {
            Some(t) => {
                if t.shape != [m, n] {
                    return Err(LayerError::MaskShape {
                        rows: m,
                        cols: n,
                        got: t.shape.clone(),
                    });
                }
                Some(g.leaf(t))
            }
            None => None,
        };
        let dh = self.model_dim / self.head_count;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.head_count);
        for h in 0..self.head_count {
            let wq = g.param(&self.wq[h]);
            let wk = g.param(&self.wk[h]);
            let wv = g.param(&self.wv[h]);
            let q = g.matmul(q_in, wq);
            let k = g.matmul(k_in, wk);
            let v = g.matmul(v_in, wv);
            let kt = g.transpose(k);
            let raw = g.matmul(q, kt);
            let mut scores = g.scale(raw, scale);
            if let Some(mid) = mask_id {
                scores = g.add(scores, mid);
            }
            let weights = g.softmax(scores, 1);
            heads.push(g.matmul(weights, v));
        }
        let cat = g.concat_cols(&heads);
        let wo = g.param(&self.wo);
        Ok(g.matmul(cat, wo))
    }

    pub fn params(&self) -> Vec<&Parameter<F>> {
        let mut out = Vec::new();
        for h in 0..self.head_count {
            out.push(&self.wq[h]);
            out.push(&self.wk[h]);
            out.push(&self.wv[h]);
        }
        out.push(&self.wo);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<F>> {
        let mut out: Vec<&mut Parameter<F>> = Vec::new();
        for ((q, k), v) in self.wq.iter_mut().zip(&mut self.wk).zip(&mut self.wv) {
            out.push(q);
            out.push(k);
            out.push(v);
        }
        out.push(&mut self.wo);
        out
    }
}

/// Two affine maps with a ReLU between them.
#[derive(Debug, Clone)]
pub struct FeedForward<F: Scalar> {
    pub lin1: Linear<F>,
    pub lin2: Linear<F>,
}

impl<F: Scalar> FeedForward<F> {
    pub fn init(name: &str, dim: usize, hidden: usize, rng: &mut SeededRng) -> Self {
        Self {
            lin1: Linear::init(&format!("{name}.lin1"), dim, hidden, true, rng),
            lin2: Linear::init(&format!("{name}.lin2"), hidden, dim, true, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph<F>, x: NodeId) -> NodeId {
        let h = self.lin1.forward(g, x);
        let h = g.relu(h);
        self.lin2.forward(g, h)
    }

    pub fn params(&self) -> Vec<&Parameter<F>> {
        let mut out = self.lin1.params();
        out.extend(self.lin2.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<F>> {
        let mut out = self.lin1.params_mut();
        out.extend(self.lin2.params_mut());
        out
    }
}

/// One direction of a GRU. Gate convention:
/// `h' = (1-z)⊙h + z⊙h̃` with sigmoid gates z, r and tanh candidate h̃.
#[derive(Debug, Clone)]
pub struct GruDirection<F: Scalar> {
    pub w_z: Parameter<F>,
    pub w_r: Parameter<F>,
    pub w_h: Parameter<F>,
    pub u_z: Parameter<F>,
    pub u_r: Parameter<F>,
    pub u_h: Parameter<F>,
    pub b_z: Parameter<F>,
    pub b_r: Parameter<F>,
    pub b_h: Parameter<F>,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl<F: Scalar> GruDirection<F> {
    pub fn init(name: &str, input_dim: usize, hidden_dim: usize, rng: &mut SeededRng) -> Self {
        let w = |tag: &str, rng: &mut SeededRng| {
            Parameter::new(
                format!("{name}.w_{tag}"),
                xavier(vec![input_dim, hidden_dim], input_dim, hidden_dim, rng),
            )
        };
        let u = |tag: &str, rng: &mut SeededRng| {
            Parameter::new(
                format!("{name}.u_{tag}"),
                xavier(vec![hidden_dim, hidden_dim], hidden_dim, hidden_dim, rng),
            )
        };
        let b = |tag: &str| Parameter::new(format!("{name}.b_{tag}"), Tensor::zeros(vec![hidden_dim]));
        Self {
            w_z: w("z", rng),
            w_r: w("r", rng),
            w_h: w("h", rng),
            u_z: u("z", rng),
            u_r: u("r", rng),
            u_h: u("h", rng),
            b_z: b("z"),
            b_r: b("r"),
            b_h: b("h"),
            input_dim,
            hidden_dim,
        }
    }

    fn gate(
        &self,
        g: &mut Graph<F>,
        x_t: NodeId,
        h: NodeId,
        w: &Parameter<F>,
        u: &Parameter<F>,
        b: &Parameter<F>,
    ) -> NodeId {
        let wi = g.param(w);
        let ui = g.param(u);
        let bi = g.param(b);
        let xw = g.matmul(x_t, wi);
        let hu = g.matmul(h, ui);
        let s = g.add(xw, hu);
        g.add_row(s, bi)
    }

    /// One step: `x_t` [1×in], `h` [1×hidden] → new state [1×hidden].
    pub fn step(&self, g: &mut Graph<F>, x_t: NodeId, h: NodeId) -> NodeId {
        let z_pre = self.gate(g, x_t, h, &self.w_z, &self.u_z, &self.b_z);
        let z = g.sigmoid(z_pre);
        let r_pre = self.gate(g, x_t, h, &self.w_r, &self.u_r, &self.b_r);
        let r = g.sigmoid(r_pre);
        let rh = g.mul(r, h);
        let wi = g.param(&self.w_h);
        let ui = g.param(&self.u_h);
        let bi = g.param(&self.b_h);
        let xw = g.matmul(x_t, wi);
        let rhu = g.matmul(rh, ui);
        let pre = g.add(xw, rhu);
        let pre = g.add_row(pre, bi);
        let cand = g.tanh(pre);
        // h' = (1-z)⊙h + z⊙h̃  ==  h - z⊙h + z⊙h̃
        let zh = g.mul(z, h);
        let keep = g.sub(h, zh);
        let zc = g.mul(z, cand);
        g.add(keep, zc)
    }

    /// Run over all rows of `x` [n×in], returning states [n×hidden] in input
    /// order. `reversed` runs right-to-left (states still in input order).
    pub fn run(&self, g: &mut Graph<F>, x: NodeId, reversed: bool) -> NodeId {
        let n = g.shape(x)[0];
        let mut h = g.constant(vec![1, self.hidden_dim], vec![F::zero(); self.hidden_dim]);
        let mut states = vec![h; n];
        let order: Vec<usize> = if reversed {
            (0..n).rev().collect()
        } else {
            (0..n).collect()
        };
        for t in order {
            let x_t = g.slice_rows(x, t, 1);
            h = self.step(g, x_t, h);
            states[t] = h;
        }
        g.concat_rows(&states)
    }

    pub fn params(&self) -> Vec<&Parameter<F>> {
        vec![
            &self.w_z, &self.w_r, &self.w_h, &self.u_z, &self.u_r, &self.u_h, &self.b_z,
            &self.b_r, &self.b_h,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<F>> {
        vec![
            &mut self.w_z,
            &mut self.w_r,
            &mut self.w_h,
            &mut self.u_z,
            &mut self.u_r,
            &mut self.u_h,
            &mut self.b_z,
            &mut self.b_r,
            &mut self.b_h,
        ]
    }
}

/// Bidirectional GRU; concatenates forward and backward states per position.
#[derive(Debug, Clone)]
pub struct BiGru<F: Scalar> {
    pub forward_dir: GruDirection<F>,
    pub backward_dir: GruDirection<F>,
}

impl<F: Scalar> BiGru<F> {
    pub fn init(name: &str, input_dim: usize, hidden_dim: usize, rng: &mut SeededRng) -> Self {
        Self {
            forward_dir: GruDirection::init(&format!("{name}.fwd"), input_dim, hidden_dim, rng),
            backward_dir: GruDirection::init(&format!("{name}.bwd"), input_dim, hidden_dim, rng),
        }
    }

    /// `x` [n×in] → [n×2·hidden].
    pub fn forward(&self, g: &mut Graph<F>, x: NodeId) -> NodeId {
        let f = self.forward_dir.run(g, x, false);
        let b = self.backward_dir.run(g, x, true);
        g.concat_cols(&[f, b])
    }

    pub fn output_dim(&self) -> usize {
        2 * self.forward_dir.hidden_dim
    }

    pub fn params(&self) -> Vec<&Parameter<F>> {
        let mut out = self.forward_dir.params();
        out.extend(self.backward_dir.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<F>> {
        let mut out = self.forward_dir.params_mut();
        out.extend(self.backward_dir.params_mut());
        out
    }
}

/// Fixed sinusoidal position table [max_len×d].
pub fn sinusoidal_positions<F: Scalar>(max_len: usize, dim: usize) -> Tensor<F> {
    let mut values = vec![F::zero(); max_len * dim];
    for p in 0..max_len {
        for i in 0..dim {
            let exponent = (2 * (i / 2)) as f64 / dim as f64;
            let angle = p as f64 / 10000f64.powf(exponent);
            values[p * dim + i] = F::from_f64(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::from_vec(vec![max_len, dim], values)
}

/// Additive causal mask: position i may attend to positions <= i.
pub fn causal_mask<F: Scalar>(n: usize) -> Tensor<F> {
    let mut values = vec![F::zero(); n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            values[i * n + j] = F::from_f64(MASKED_LOGIT);
        }
    }
    Tensor::from_vec(vec![n, n], values)
}

/// Additive key-padding mask [q_len×k_len]: every query hides padded keys.
pub fn key_padding_mask<F: Scalar>(q_len: usize, key_is_pad: &[bool]) -> Tensor<F> {
    let n = key_is_pad.len();
    let mut values = vec![F::zero(); q_len * n];
    for i in 0..q_len {
        for (j, &pad) in key_is_pad.iter().enumerate() {
            if pad {
                values[i * n + j] = F::from_f64(MASKED_LOGIT);
            }
        }
    }
    Tensor::from_vec(vec![q_len, n], values)
}

/// Causal mask that additionally hides padded keys.
pub fn causal_padding_mask<F: Scalar>(key_is_pad: &[bool]) -> Tensor<F> {
    let n = key_is_pad.len();
    let mut t = causal_mask::<F>(n);
    for i in 0..n {
        for (j, &pad) in key_is_pad.iter().enumerate() {
            if pad {
                t.values[i * n + j] = F::from_f64(MASKED_LOGIT);
            }
        }
    }
    t
}
