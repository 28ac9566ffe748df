//! Parameter groups and tape forward passes for transformer blocks.

use std::sync::Arc;

use rand::Rng;

use crate::error::Result;
use crate::tensor::{Scalar, Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

/// How parameters enter a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binding {
    /// Trainable leaves; gradients are reported.
    Trainable,
    /// Members of the tape's frozen set.
    Frozen,
}

pub(crate) fn bind<S: Scalar>(tape: &Tape<S>, t: &Arc<Tensor<S>>, mode: Binding) -> Var {
    match mode {
        Binding::Trainable => tape.leaf_shared(Arc::clone(t)),
        Binding::Frozen => tape.frozen(Arc::clone(t)),
    }
}

pub type Named<'a, S> = Vec<(String, &'a Arc<Tensor<S>>)>;
pub type NamedMut<'a, S> = Vec<(String, &'a mut Arc<Tensor<S>>)>;

/// Declares a leaf parameter group plus its tape-bound twin.
macro_rules! param_group {
    ($name:ident / $vars:ident { $($field:ident),* $(,)? }) => {
        #[derive(Clone, Debug)]
        pub struct $name<S: Scalar> {
            $(pub $field: Arc<Tensor<S>>,)*
        }

        #[derive(Clone, Copy, Debug)]
        pub struct $vars {
            $(pub $field: Var,)*
        }

        impl $vars {
            pub fn push_all(&self, out: &mut Vec<Var>) {
                $(out.push(self.$field);)*
            }
        }

        impl<S: Scalar> $name<S> {
            pub fn visit<'a>(&'a self, prefix: &str, out: &mut Named<'a, S>) {
                $(out.push((format!("{prefix}{}", stringify!($field)), &self.$field));)*
            }

            pub fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut NamedMut<'a, S>) {
                $(out.push((format!("{prefix}{}", stringify!($field)), &mut self.$field));)*
            }

            pub fn bind(&self, tape: &Tape<S>, mode: Binding) -> $vars {
                $vars { $($field: bind(tape, &self.$field, mode),)* }
            }

            pub fn cast<T: Scalar>(&self) -> $name<T> {
                $name { $($field: Arc::new(self.$field.cast()),)* }
            }
        }
    };
}

param_group!(LayerNormParams / LayerNormVars { gain, bias });
param_group!(AttnParams / AttnVars { wq, bq, wk, bk, wv, bv, wo, bo });
param_group!(MlpParams / MlpVars { w1, b1, w2, b2 });

pub(crate) fn normal<S: Scalar>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Arc<Tensor<S>> {
    Arc::new(Tensor::randn(shape, std, rng))
}

pub(crate) fn zeros<S: Scalar>(shape: &[usize]) -> Arc<Tensor<S>> {
    Arc::new(Tensor::zeros(shape))
}

impl<S: Scalar> LayerNormParams<S> {
    pub fn new(d: usize) -> Self {
        LayerNormParams {
            gain: Arc::new(Tensor::ones(&[d])),
            bias: zeros(&[d]),
        }
    }
}

impl LayerNormVars {
    pub fn apply<S: Scalar>(&self, tape: &Tape<S>, x: Var) -> Result<Var> {
        tape.layer_norm(x, self.gain, self.bias, S::from_f64_lossy(LN_EPS))
    }
}

impl<S: Scalar> AttnParams<S> {
    pub fn init(d: usize, std: f64, out_std: f64, rng: &mut impl Rng) -> Self {
        AttnParams {
            wq: normal(&[d, d], std, rng),
            bq: zeros(&[d]),
            wk: normal(&[d, d], std, rng),
            bk: zeros(&[d]),
            wv: normal(&[d, d], std, rng),
            bv: zeros(&[d]),
            wo: normal(&[d, d], out_std, rng),
            bo: zeros(&[d]),
        }
    }
}

fn linear<S: Scalar>(tape: &Tape<S>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

/// Masking rule for attention scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mask {
    None,
    /// Query row `i` attends to key rows `j <= i`.
    Causal,
}

impl AttnVars {
    /// Multi-head attention of `query_in` rows over `kv_in` rows.
    pub fn apply<S: Scalar>(
        &self,
        tape: &Tape<S>,
        query_in: Var,
        kv_in: Var,
        n_heads: usize,
        mask: Mask,
    ) -> Result<Var> {
        let q = linear(tape, query_in, self.wq, self.bq)?;
        let k = linear(tape, kv_in, self.wk, self.bk)?;
        let v = linear(tape, kv_in, self.wv, self.bv)?;
        let d = tape.shape(q)[1];
        let dh = d / n_heads;
        let scale = S::one() / S::from_usize(dh).unwrap().sqrt();
        let mut heads = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale);
            let probs = match mask {
                Mask::None => tape.softmax_lastdim(scores),
                Mask::Causal => tape.softmax_causal(scores, 0),
            };
            heads.push(tape.matmul(probs, vh)?);
        }
        let joined = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)?
        };
        linear(tape, joined, self.wo, self.bo)
    }
}

impl<S: Scalar> MlpParams<S> {
    pub fn init(d: usize, d_ff: usize, std: f64, out_std: f64, rng: &mut impl Rng) -> Self {
        MlpParams {
            w1: normal(&[d, d_ff], std, rng),
            b1: zeros(&[d_ff]),
            w2: normal(&[d_ff, d], out_std, rng),
            b2: zeros(&[d]),
        }
    }
}

impl MlpVars {
    pub fn apply<S: Scalar>(&self, tape: &Tape<S>, x: Var) -> Result<Var> {
        let h = linear(tape, x, self.w1, self.b1)?;
        let h = tape.gelu(h);
        linear(tape, h, self.w2, self.b2)
    }
}

/// Pre-norm transformer block: `x + attn(ln1(x))`, then `x + mlp(ln2(x))`.
#[derive(Clone, Debug)]
pub struct BlockParams<S: Scalar> {
    pub ln1: LayerNormParams<S>,
    pub attn: AttnParams<S>,
    pub ln2: LayerNormParams<S>,
    pub mlp: MlpParams<S>,
}

#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub ln1: LayerNormVars,
    pub attn: AttnVars,
    pub ln2: LayerNormVars,
    pub mlp: MlpVars,
}

impl<S: Scalar> BlockParams<S> {
    pub fn init(d: usize, d_ff: usize, n_layers: usize, rng: &mut impl Rng) -> Self {
        let std = 0.02;
        let out_std = 0.02 / (2.0 * n_layers as f64).sqrt();
        BlockParams {
            ln1: LayerNormParams::new(d),
            attn: AttnParams::init(d, std, out_std, rng),
            ln2: LayerNormParams::new(d),
            mlp: MlpParams::init(d, d_ff, std, out_std, rng),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, out: &mut Named<'a, S>) {
        self.ln1.visit(&format!("{prefix}ln1."), out);
        self.attn.visit(&format!("{prefix}attn."), out);
        self.ln2.visit(&format!("{prefix}ln2."), out);
        self.mlp.visit(&format!("{prefix}mlp."), out);
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut NamedMut<'a, S>) {
        self.ln1.visit_mut(&format!("{prefix}ln1."), out);
        self.attn.visit_mut(&format!("{prefix}attn."), out);
        self.ln2.visit_mut(&format!("{prefix}ln2."), out);
        self.mlp.visit_mut(&format!("{prefix}mlp."), out);
    }

    pub fn bind(&self, tape: &Tape<S>, mode: Binding) -> BlockVars {
        BlockVars {
            ln1: self.ln1.bind(tape, mode),
            attn: self.attn.bind(tape, mode),
            ln2: self.ln2.bind(tape, mode),
            mlp: self.mlp.bind(tape, mode),
        }
    }

    pub fn cast<T: Scalar>(&self) -> BlockParams<T> {
        BlockParams {
            ln1: self.ln1.cast(),
            attn: self.attn.cast(),
            ln2: self.ln2.cast(),
            mlp: self.mlp.cast(),
        }
    }
}

impl BlockVars {
    pub fn push_all(&self, out: &mut Vec<Var>) {
        self.ln1.push_all(out);
        self.attn.push_all(out);
        self.ln2.push_all(out);
        self.mlp.push_all(out);
    }

    pub fn apply<S: Scalar>(&self, tape: &Tape<S>, x: Var, n_heads: usize, mask: Mask) -> Result<Var> {
        let h = self.ln1.apply(tape, x)?;
        let a = self.attn.apply(tape, h, h, n_heads, mask)?;
        let x = tape.add(x, a)?;
        let h = self.ln2.apply(tape, x)?;
        let f = self.mlp.apply(tape, h)?;
        tape.add(x, f)
    }
}
