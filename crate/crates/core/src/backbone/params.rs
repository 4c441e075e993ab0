//! Named parameter tensors and scope accounting.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::decoder::DecoderMode;
use crate::rng::{stream, stream_rng, Rng};

/// Which part of the model a tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    /// Sequence-model weights; the `N` of scaling fits.
    Backbone,
    /// Item ID table, OOV vector, context/position tables, semantic input projection.
    Embeddings,
    /// Projected head, semantic tower and title-vector constructor.
    Decoding,
}

/// Counting scope for [`super::param_count`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountScope {
    BackboneOnly,
    Embeddings,
    Decoding,
    Total,
}

impl CountScope {
    pub fn includes(self, scope: Scope) -> bool {
        match self {
            CountScope::BackboneOnly => scope == Scope::Backbone,
            CountScope::Embeddings => scope == Scope::Embeddings,
            CountScope::Decoding => scope == Scope::Decoding,
            CountScope::Total => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Self { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    fn normal(shape: &[usize], std: f64, rng: &mut Rng) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
        Self { shape: shape.to_vec(), data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.shape[1];
        &mut self.data[i * c..(i + 1) * c]
    }
}

/// Affine map stored `[in, out]` plus bias `[out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    fn init(fan_in: usize, fan_out: usize, std: f64, rng: &mut Rng) -> Self {
        Self { w: Tensor::normal(&[fan_in, fan_out], std, rng), b: Tensor::zeros(&[fan_out]) }
    }

    pub fn fan_in(&self) -> usize {
        self.w.shape[0]
    }

    pub fn fan_out(&self) -> usize {
        self.w.shape[1]
    }

    /// `x · W + b` for a single row.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.b.data.clone();
        let n = self.fan_out();
        for (i, &xi) in x.iter().enumerate() {
            if xi != 0.0 {
                crate::linalg::axpy(xi, &self.w.data[i * n..(i + 1) * n], &mut out);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNormParams {
    fn init(d: usize) -> Self {
        Self { gamma: Tensor::filled(&[d], 1.0), beta: Tensor::zeros(&[d]) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1: LayerNormParams,
    pub qkv: Linear,
    pub proj: Linear,
    pub ln2: LayerNormParams,
    pub ff1: Linear,
    pub ff2: Linear,
}

/// Every learnable tensor of the model. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub item_id: Tensor,
    pub oov: Tensor,
    pub sem_in: Tensor,
    pub context: Vec<Tensor>,
    pub position: Tensor,
    pub adapter_in: Option<Linear>,
    pub blocks: Vec<BlockParams>,
    pub ln_f: LayerNormParams,
    pub adapter_out: Option<Linear>,
    pub head: Option<Linear>,
    pub phi_sem: Linear,
    pub psi_hidden: Linear,
    pub psi_out: Linear,
}

/// Gradients share the parameter layout.
pub type GradSet = ParamSet;

macro_rules! visit_tensors {
    ($self:ident, $f:ident, $iter:ident, $($mut_:tt)?) => {{
        $f("item_id".to_string(), Scope::Embeddings, & $($mut_)? $self.item_id);
        $f("oov".to_string(), Scope::Embeddings, & $($mut_)? $self.oov);
        $f("sem_in".to_string(), Scope::Embeddings, & $($mut_)? $self.sem_in);
        for (j, t) in $self.context.$iter().enumerate() {
            $f(format!("context.{j}"), Scope::Embeddings, t);
        }
        $f("position".to_string(), Scope::Embeddings, & $($mut_)? $self.position);
        if let Some(l) = & $($mut_)? $self.adapter_in {
            $f("adapter_in.w".to_string(), Scope::Backbone, & $($mut_)? l.w);
            $f("adapter_in.b".to_string(), Scope::Backbone, & $($mut_)? l.b);
        }
        for (i, blk) in $self.blocks.$iter().enumerate() {
            $f(format!("blocks.{i}.ln1.gamma"), Scope::Backbone, & $($mut_)? blk.ln1.gamma);
            $f(format!("blocks.{i}.ln1.beta"), Scope::Backbone, & $($mut_)? blk.ln1.beta);
            $f(format!("blocks.{i}.qkv.w"), Scope::Backbone, & $($mut_)? blk.qkv.w);
            $f(format!("blocks.{i}.qkv.b"), Scope::Backbone, & $($mut_)? blk.qkv.b);
            $f(format!("blocks.{i}.proj.w"), Scope::Backbone, & $($mut_)? blk.proj.w);
            $f(format!("blocks.{i}.proj.b"), Scope::Backbone, & $($mut_)? blk.proj.b);
            $f(format!("blocks.{i}.ln2.gamma"), Scope::Backbone, & $($mut_)? blk.ln2.gamma);
            $f(format!("blocks.{i}.ln2.beta"), Scope::Backbone, & $($mut_)? blk.ln2.beta);
            $f(format!("blocks.{i}.ff1.w"), Scope::Backbone, & $($mut_)? blk.ff1.w);
            $f(format!("blocks.{i}.ff1.b"), Scope::Backbone, & $($mut_)? blk.ff1.b);
            $f(format!("blocks.{i}.ff2.w"), Scope::Backbone, & $($mut_)? blk.ff2.w);
            $f(format!("blocks.{i}.ff2.b"), Scope::Backbone, & $($mut_)? blk.ff2.b);
        }
        $f("ln_f.gamma".to_string(), Scope::Backbone, & $($mut_)? $self.ln_f.gamma);
        $f("ln_f.beta".to_string(), Scope::Backbone, & $($mut_)? $self.ln_f.beta);
        if let Some(l) = & $($mut_)? $self.adapter_out {
            $f("adapter_out.w".to_string(), Scope::Backbone, & $($mut_)? l.w);
            $f("adapter_out.b".to_string(), Scope::Backbone, & $($mut_)? l.b);
        }
        if let Some(l) = & $($mut_)? $self.head {
            $f("head.w".to_string(), Scope::Decoding, & $($mut_)? l.w);
            $f("head.b".to_string(), Scope::Decoding, & $($mut_)? l.b);
        }
        $f("phi_sem.w".to_string(), Scope::Decoding, & $($mut_)? $self.phi_sem.w);
        $f("phi_sem.b".to_string(), Scope::Decoding, & $($mut_)? $self.phi_sem.b);
        $f("psi_hidden.w".to_string(), Scope::Decoding, & $($mut_)? $self.psi_hidden.w);
        $f("psi_hidden.b".to_string(), Scope::Decoding, & $($mut_)? $self.psi_hidden.b);
        $f("psi_out.w".to_string(), Scope::Decoding, & $($mut_)? $self.psi_out.w);
        $f("psi_out.b".to_string(), Scope::Decoding, & $($mut_)? $self.psi_out.b);
    }};
}

impl ParamSet {
    /// Random initialization; deterministic in `seed`.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = stream_rng(seed, &[stream::INIT]);
        let e = config.embed_dim;
        let d = config.width;
        let f = config.feature_dim;
        let dz = config.z_dim;
        let k = config.head_dim();
        let hidden = config.ffn_mult * d;
        let emb_std = 0.1;
        let resid_std = 1.0 / ((d as f64).sqrt() * (2.0 * config.layers as f64).sqrt());

        let item_id = Tensor::normal(&[config.vocab, e], emb_std, &mut rng);
        let oov = Tensor::normal(&[e], emb_std, &mut rng);
        let sem_in = Tensor::normal(&[f, e], 1.0 / (f as f64).sqrt() * 0.3, &mut rng);
        let context = config
            .context_cards
            .iter()
            .map(|&c| Tensor::normal(&[c, e], emb_std, &mut rng))
            .collect();
        let position = Tensor::normal(&[config.seq_len, e], emb_std, &mut rng);
        let adapter_in = (d != e).then(|| Linear::init(e, d, 1.0 / (e as f64).sqrt(), &mut rng));
        let blocks = (0..config.layers)
            .map(|_| BlockParams {
                ln1: LayerNormParams::init(d),
                qkv: Linear::init(d, 3 * d, 1.0 / (d as f64).sqrt(), &mut rng),
                proj: Linear::init(d, d, resid_std, &mut rng),
                ln2: LayerNormParams::init(d),
                ff1: Linear::init(d, hidden, 1.0 / (d as f64).sqrt(), &mut rng),
                ff2: Linear::init(hidden, d, resid_std * (d as f64 / hidden as f64).sqrt(), &mut rng),
            })
            .collect();
        let ln_f = LayerNormParams::init(d);
        let adapter_out = (d != e).then(|| Linear::init(d, e, 1.0 / (d as f64).sqrt(), &mut rng));
        let head = (config.decoder_mode == DecoderMode::Projected)
            .then(|| Linear::init(e, k, 1.0 / (e as f64).sqrt(), &mut rng));
        let phi_sem = Linear::init(f, dz, 1.0 / (f as f64).sqrt(), &mut rng);
        let psi_hidden = Linear::init(e + dz, e, 1.0 / ((e + dz) as f64).sqrt(), &mut rng);
        let psi_out = Linear::init(e, k, 1.0 / (e as f64).sqrt(), &mut rng);

        let mut params = Self {
            item_id,
            oov,
            sem_in,
            context,
            position,
            adapter_in,
            blocks,
            ln_f,
            adapter_out,
            head,
            phi_sem,
            psi_hidden,
            psi_out,
        };
        config.precision.round_params(&mut params);
        params
    }

    /// Zero tensors with this set's layout.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_mut(|_, _, t| t.data.iter_mut().for_each(|v| *v = 0.0));
        z
    }

    pub fn for_each<'a>(&'a self, mut f: impl FnMut(String, Scope, &'a Tensor)) {
        visit_tensors!(self, f, iter,);
    }

    pub fn for_each_mut<'a>(&'a mut self, mut f: impl FnMut(String, Scope, &'a mut Tensor)) {
        visit_tensors!(self, f, iter_mut, mut);
    }

    pub fn named(&self) -> Vec<(String, Scope, &Tensor)> {
        let mut out = Vec::new();
        self.for_each(|n, s, t| out.push((n, s, t)));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, Scope, &mut Tensor)> {
        let mut out = Vec::new();
        self.for_each_mut(|n, s, t| out.push((n, s, t)));
        out
    }

    /// Number of scalar parameters in `scope`, counted from the tensors.
    pub fn count(&self, scope: CountScope) -> usize {
        let mut n = 0;
        self.for_each(|_, s, t| {
            if scope.includes(s) {
                n += t.len();
            }
        });
        n
    }

    /// `self += other` tensor-wise, in declaration order.
    pub fn add_assign(&mut self, other: &ParamSet) {
        let others: Vec<&Tensor> = other.named().into_iter().map(|(_, _, t)| t).collect();
        let mut i = 0;
        self.for_each_mut(|_, _, t| {
            for (a, b) in t.data.iter_mut().zip(&others[i].data) {
                *a += b;
            }
            i += 1;
        });
    }

    pub fn scale(&mut self, factor: f64) {
        self.for_each_mut(|_, _, t| t.data.iter_mut().for_each(|v| *v *= factor));
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.for_each(|_, _, t| ok &= t.data.iter().all(|v| v.is_finite()));
        ok
    }

    pub fn max_abs(&self) -> f64 {
        let mut m = 0.0f64;
        self.for_each(|_, _, t| m = t.data.iter().fold(m, |acc, v| acc.max(v.abs())));
        m
    }
}
