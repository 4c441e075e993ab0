//! Semantic title tower, ID/OOV resolution and collaborative-embedding masking.
//!
//! A title's scoring vector is `v_i = ψ(ẽ_i, z_i)` with `z_i = φ_sem(features)`
//! and `ẽ_i` either the title's ID-table row or the single shared OOV vector.
//! `ψ` is concat → linear → GELU → linear to the head width; the score is the
//! inner product with the user vector. Context never enters `v_i`.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::backbone::{Linear, ParamSet};
use crate::decoder::ItemVectorTable;
use crate::error::{config_err, input_err, Error, Result};
use crate::linalg::{axpy, dot, gelu, gelu_grad, matmul};
use crate::rng::Rng;
use crate::world::TitleSideInfo;

/// Which collaborative embedding a title position resolves to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IdRoute {
    Id,
    Oov,
}

/// `Oov` for masked instances and titles outside the vocabulary.
pub fn id_route(item: u32, masked: bool, side: &TitleSideInfo) -> IdRoute {
    if masked || !side.in_vocab[item as usize] {
        IdRoute::Oov
    } else {
        IdRoute::Id
    }
}

/// A scored title together with the ID-side route used for its vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Candidate {
    pub item: u32,
    pub oov: bool,
}

impl Candidate {
    pub fn routed(item: u32, masked: bool, side: &TitleSideInfo) -> Self {
        Self { item, oov: id_route(item, masked, side) == IdRoute::Oov }
    }
}

/// `ẽ^ID`: the ID row for in-vocabulary titles, otherwise the shared OOV vector.
pub fn resolve_id_embedding<'a>(item: u32, masked: bool, side: &TitleSideInfo, params: &'a ParamSet) -> &'a [f64] {
    match id_route(item, masked, side) {
        IdRoute::Id => params.item_id.row(item as usize),
        IdRoute::Oov => &params.oov.data,
    }
}

/// `z = W · concat(graph, lang, ann) + b`.
pub fn phi_sem(features: &[f64], phi: &Linear) -> Result<Vec<f64>> {
    if features.len() != phi.fan_in() {
        return input_err(format!("semantic features have {} values, tower expects {}", features.len(), phi.fan_in()));
    }
    Ok(phi.apply(features))
}

/// `ψ(ẽ, z)`: concat → linear → GELU → linear.
pub fn title_vector(e_id: &[f64], z: &[f64], params: &ParamSet) -> Vec<f64> {
    let mut input = e_id.to_vec();
    input.extend_from_slice(z);
    let hidden: Vec<f64> = params.psi_hidden.apply(&input).into_iter().map(gelu).collect();
    params.psi_out.apply(&hidden)
}

/// `s(u, i) = uᵀ v_i` where `u = g(h)` is already in scoring space.
pub fn score(user: &[f64], v: &[f64]) -> f64 {
    dot(user, v)
}

/// Scoring vectors of every title through both the ID path and the OOV
/// path, with the activations needed to backpropagate into the tower.
#[derive(Debug, Clone)]
pub struct ItemVectors {
    k: usize,
    e: usize,
    dz: usize,
    z: Vec<f64>,
    pre_id: Vec<f64>,
    pre_oov: Vec<f64>,
    v_id: Vec<f64>,
    v_oov: Vec<f64>,
}

impl ItemVectors {
    pub fn build(params: &ParamSet, side: &TitleSideInfo) -> Result<Self> {
        let n = side.len();
        let f = side.feature_dim;
        let e = params.oov.len();
        let dz = params.phi_sem.fan_out();
        let k = params.psi_out.fan_out();
        if params.phi_sem.fan_in() != f {
            return input_err(format!("catalog has {f} feature values, tower expects {}", params.phi_sem.fan_in()));
        }
        if params.item_id.shape[0] < n {
            return input_err(format!("catalog of {n} titles exceeds ID table of {}", params.item_id.shape[0]));
        }
        let mut z = vec![0.0; n * dz];
        matmul(&side.features, &params.phi_sem.w.data, &mut z, n, f, dz);
        crate::linalg::add_row_bias(&mut z, &params.phi_sem.b.data);

        let wh = &params.psi_hidden.w.data;
        let (w_id, w_z) = wh.split_at(e * e);
        let mut zpart = vec![0.0; n * e];
        matmul(&z, w_z, &mut zpart, n, dz, e);
        let mut idpart = vec![0.0; n * e];
        matmul(&params.item_id.data[..n * e], w_id, &mut idpart, n, e, e);
        let mut oovpart = vec![0.0; e];
        matmul(&params.oov.data, w_id, &mut oovpart, 1, e, e);

        let bh = &params.psi_hidden.b.data;
        let mut pre_id = vec![0.0; n * e];
        let mut pre_oov = vec![0.0; n * e];
        for i in 0..n {
            for j in 0..e {
                let zb = zpart[i * e + j] + bh[j];
                pre_id[i * e + j] = idpart[i * e + j] + zb;
                pre_oov[i * e + j] = oovpart[j] + zb;
            }
        }
        let out = |pre: &[f64]| {
            let act: Vec<f64> = pre.iter().map(|&x| gelu(x)).collect();
            let mut v = vec![0.0; n * k];
            matmul(&act, &params.psi_out.w.data, &mut v, n, e, k);
            crate::linalg::add_row_bias(&mut v, &params.psi_out.b.data);
            v
        };
        let v_id = out(&pre_id);
        let v_oov = out(&pre_oov);
        Ok(Self { k, e, dz, z, pre_id, pre_oov, v_id, v_oov })
    }

    pub fn len(&self) -> usize {
        self.z.len() / self.dz
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    pub fn z(&self, item: u32) -> &[f64] {
        let i = item as usize;
        &self.z[i * self.dz..(i + 1) * self.dz]
    }

    /// Empty gradient accumulator matching this table.
    pub fn grad_buffer(&self) -> ItemVectorGrads {
        let n = self.len();
        ItemVectorGrads {
            k: self.k,
            d_id: vec![0.0; n * self.k],
            d_oov: vec![0.0; n * self.k],
            touched_id: vec![false; n],
            touched_oov: vec![false; n],
        }
    }

    /// Backpropagates accumulated vector gradients into `ψ`, `φ_sem`, the ID
    /// table and the OOV vector. Rows are processed in id order, ID path first.
    pub fn backward(&self, dv: &ItemVectorGrads, params: &ParamSet, side: &TitleSideInfo, grads: &mut ParamSet) {
        let (e, k, dz) = (self.e, self.k, self.dz);
        let f = side.feature_dim;
        let wh = &params.psi_hidden.w.data;
        let wo = &params.psi_out.w.data;
        let mut dz_rows = vec![0.0; self.len() * dz];
        let mut touched_z = vec![false; self.len()];
        let mut d_hid = vec![0.0; e];
        let mut d_pre = vec![0.0; e];
        for (oov, pre_all, d_all, touched) in [
            (false, &self.pre_id, &dv.d_id, &dv.touched_id),
            (true, &self.pre_oov, &dv.d_oov, &dv.touched_oov),
        ] {
            for i in (0..self.len()).filter(|&i| touched[i]) {
                let g = &d_all[i * k..(i + 1) * k];
                let pre = &pre_all[i * e..(i + 1) * e];
                for j in 0..e {
                    let act = gelu(pre[j]);
                    if act != 0.0 {
                        axpy(act, g, &mut grads.psi_out.w.data[j * k..(j + 1) * k]);
                    }
                    d_hid[j] = dot(&wo[j * k..(j + 1) * k], g);
                    d_pre[j] = d_hid[j] * gelu_grad(pre[j]);
                }
                axpy(1.0, g, &mut grads.psi_out.b.data);
                axpy(1.0, &d_pre, &mut grads.psi_hidden.b.data);

                let e_id: &[f64] = if oov { &params.oov.data } else { params.item_id.row(i) };
                for (p, &x) in e_id.iter().enumerate() {
                    if x != 0.0 {
                        axpy(x, &d_pre, &mut grads.psi_hidden.w.data[p * e..(p + 1) * e]);
                    }
                }
                let zi = &self.z[i * dz..(i + 1) * dz];
                for (p, &x) in zi.iter().enumerate() {
                    if x != 0.0 {
                        axpy(x, &d_pre, &mut grads.psi_hidden.w.data[(e + p) * e..(e + p + 1) * e]);
                    }
                }
                let de: &mut [f64] = if oov { &mut grads.oov.data } else { grads.item_id.row_mut(i) };
                for (p, d) in de.iter_mut().enumerate() {
                    *d += dot(&wh[p * e..(p + 1) * e], &d_pre);
                }
                let dzr = &mut dz_rows[i * dz..(i + 1) * dz];
                for (p, d) in dzr.iter_mut().enumerate() {
                    *d += dot(&wh[(e + p) * e..(e + p + 1) * e], &d_pre);
                }
                touched_z[i] = true;
            }
        }
        for i in (0..self.len()).filter(|&i| touched_z[i]) {
            let dzr = &dz_rows[i * dz..(i + 1) * dz];
            for (p, &x) in side.features[i * f..(i + 1) * f].iter().enumerate() {
                if x != 0.0 {
                    axpy(x, dzr, &mut grads.phi_sem.w.data[p * dz..(p + 1) * dz]);
                }
            }
            axpy(1.0, dzr, &mut grads.phi_sem.b.data);
        }
    }
}

impl ItemVectorTable for ItemVectors {
    fn dim(&self) -> usize {
        self.k
    }

    fn vector(&self, c: Candidate) -> &[f64] {
        let i = c.item as usize;
        let rows = if c.oov { &self.v_oov } else { &self.v_id };
        &rows[i * self.k..(i + 1) * self.k]
    }
}

/// Gradient accumulator for [`ItemVectors`].
#[derive(Debug, Clone)]
pub struct ItemVectorGrads {
    k: usize,
    d_id: Vec<f64>,
    d_oov: Vec<f64>,
    touched_id: Vec<bool>,
    touched_oov: Vec<bool>,
}

impl ItemVectorGrads {
    pub fn add(&mut self, c: Candidate, g: &[f64]) {
        let i = c.item as usize;
        let (rows, touched) = if c.oov { (&mut self.d_oov, &mut self.touched_oov) } else { (&mut self.d_id, &mut self.touched_id) };
        axpy(1.0, g, &mut rows[i * self.k..(i + 1) * self.k]);
        touched[i] = true;
    }

    /// Adds `other` in place; the result does not depend on thread scheduling
    /// as long as merges happen in a fixed order.
    pub fn merge(&mut self, other: &ItemVectorGrads) {
        for (a, b) in self.d_id.iter_mut().zip(&other.d_id) {
            *a += b;
        }
        for (a, b) in self.d_oov.iter_mut().zip(&other.d_oov) {
            *a += b;
        }
        for (a, &b) in self.touched_id.iter_mut().zip(&other.touched_id) {
            *a |= b;
        }
        for (a, &b) in self.touched_oov.iter_mut().zip(&other.touched_oov) {
            *a |= b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.d_id.iter_mut().chain(self.d_oov.iter_mut()).for_each(|v| *v *= factor);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskSide {
    Input,
    Output,
    EitherUniform,
}

impl std::str::FromStr for MaskSide {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "input" => Ok(MaskSide::Input),
            "output" => Ok(MaskSide::Output),
            "either-uniform" | "either" => Ok(MaskSide::EitherUniform),
            _ => config_err(format!("unknown mask side '{s}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskingConfig {
    pub p_mask: f64,
    pub side: MaskSide,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self { p_mask: 0.05, side: MaskSide::EitherUniform }
    }
}

impl MaskingConfig {
    pub fn disabled() -> Self {
        Self { p_mask: 0.0, ..Self::default() }
    }

    /// Probability that a scored title goes through the OOV route.
    pub fn output_rate(&self) -> f64 {
        match self.side {
            MaskSide::Input => 0.0,
            MaskSide::Output => self.p_mask,
            MaskSide::EitherUniform => 0.5 * self.p_mask,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_mask) {
            return config_err(format!("mask probability {} outside [0, 1]", self.p_mask));
        }
        Ok(())
    }
}

/// Mask flags of one event instance: whether its collaborative embedding is
/// replaced by OOV when it is read as input and when it is scored as a target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MaskFlags {
    pub input: bool,
    pub output: bool,
}

/// Independently masks each of `n` event instances with probability `p_mask`.
pub fn apply_masking(n: usize, config: &MaskingConfig, rng: &mut Rng) -> Vec<MaskFlags> {
    if config.p_mask <= 0.0 {
        return vec![MaskFlags::default(); n];
    }
    (0..n)
        .map(|_| {
            if rng.random::<f64>() >= config.p_mask {
                return MaskFlags::default();
            }
            match config.side {
                MaskSide::Input => MaskFlags { input: true, output: false },
                MaskSide::Output => MaskFlags { input: false, output: true },
                MaskSide::EitherUniform => {
                    if rng.random::<bool>() {
                        MaskFlags { input: true, output: false }
                    } else {
                        MaskFlags { input: false, output: true }
                    }
                }
            }
        })
        .collect()
}
