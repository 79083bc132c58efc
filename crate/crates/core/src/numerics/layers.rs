use rand::Rng;

use super::{kaiming_uniform, orthogonal, Graph, ParamId, ParamStore, Real, Tensor, Var};
use crate::error::Result;

/// Group count used after every convolution.
pub const NORM_GROUPS: usize = 8;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = in_ch * kernel * kernel;
        let weight = store.register(
            format!("{name}.w"),
            kaiming_uniform(&[out_ch, in_ch, kernel, kernel], fan_in, rng),
        )?;
        let bias = store.register(format!("{name}.b"), Tensor::zeros(vec![out_ch]))?;
        Ok(Self { weight, bias, stride, pad })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// 3-D convolution with unit depth stride and no depth padding.
#[derive(Clone, Debug)]
pub struct Conv3d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv3d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel_depth: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = in_ch * kernel_depth * kernel * kernel;
        let weight = store.register(
            format!("{name}.w"),
            kaiming_uniform(&[out_ch, in_ch, kernel_depth, kernel, kernel], fan_in, rng),
        )?;
        let bias = store.register(format!("{name}.b"), Tensor::zeros(vec![out_ch]))?;
        Ok(Self { weight, bias, stride, pad })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        g.conv3d(x, w, b, self.stride, self.pad, 0)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        let gamma = store.register(format!("{name}.gamma"), Tensor::full(vec![channels], T::one()))?;
        let beta = store.register(format!("{name}.beta"), Tensor::zeros(vec![channels]))?;
        Ok(Self {
            gamma,
            beta,
            groups: NORM_GROUPS.min(channels),
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let (ga, be) = (g.param(self.gamma), g.param(self.beta));
        g.group_norm(x, ga, be, self.groups)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Weight initialization for [`Linear`].
#[derive(Clone, Copy, Debug)]
pub enum LinearInit {
    KaimingUniform,
    Orthogonal(f64),
    Zeros,
}

impl Linear {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        inp: usize,
        out: usize,
        init: LinearInit,
        rng: &mut R,
    ) -> Result<Self> {
        let w = match init {
            LinearInit::KaimingUniform => kaiming_uniform(&[out, inp], inp, rng),
            LinearInit::Orthogonal(gain) => orthogonal(out, inp, gain, rng),
            LinearInit::Zeros => Tensor::zeros(vec![out, inp]),
        };
        let weight = store.register(format!("{name}.w"), w)?;
        let bias = store.register(format!("{name}.b"), Tensor::zeros(vec![out]))?;
        Ok(Self { weight, bias })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        g.linear(x, w, b)
    }
}

/// Gated recurrent cell with reset and update gates.
///
/// ```text
/// r  = σ(W_ir x + b_ir + W_hr h + b_hr)
/// z  = σ(W_iz x + b_iz + W_hz h + b_hz)
/// n  = tanh(W_in x + b_in + r ⊙ (W_hn h + b_hn))
/// h' = (1 − z) ⊙ n + z ⊙ h
/// ```
#[derive(Clone, Debug)]
pub struct GruCell {
    pub input: Linear,
    pub hidden: Linear,
    pub hidden_size: usize,
}

impl GruCell {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        input_size: usize,
        hidden_size: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let input = Linear::new(
            store,
            &format!("{name}.ih"),
            input_size,
            3 * hidden_size,
            LinearInit::Orthogonal(1.0),
            rng,
        )?;
        let hidden = Linear::new(
            store,
            &format!("{name}.hh"),
            hidden_size,
            3 * hidden_size,
            LinearInit::Orthogonal(1.0),
            rng,
        )?;
        Ok(Self { input, hidden, hidden_size })
    }

    /// One step over a batch: `x: B×In`, `h: B×H` → `B×H`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var, h: Var) -> Result<Var> {
        let d = self.hidden_size;
        let gi = self.input.forward(g, x)?;
        let gh = self.hidden.forward(g, h)?;
        let (ir, iz, inn) = (g.slice_cols(gi, 0, d)?, g.slice_cols(gi, d, d)?, g.slice_cols(gi, 2 * d, d)?);
        let (hr, hz, hn) = (g.slice_cols(gh, 0, d)?, g.slice_cols(gh, d, d)?, g.slice_cols(gh, 2 * d, d)?);
        let r = g.add(ir, hr)?;
        let r = g.sigmoid(r);
        let z = g.add(iz, hz)?;
        let z = g.sigmoid(z);
        let rn = g.mul(r, hn)?;
        let n = g.add(inn, rn)?;
        let n = g.tanh(n);
        let keep = g.affine(z, -T::one(), T::one());
        let fresh = g.mul(keep, n)?;
        let carried = g.mul(z, h)?;
        g.add(fresh, carried)
    }
}

/// Lookup table of learned vectors.
#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
}

impl Embedding {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        rows: usize,
        dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        use rand_distr::{Distribution, StandardNormal};
        let data = (0..rows * dim)
            .map(|_| {
                let v: f64 = StandardNormal.sample(rng);
                T::from_f64_lossy(v)
            })
            .collect();
        let table = store.register(format!("{name}.table"), Tensor::new(vec![rows, dim], data)?)?;
        Ok(Self { table })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, idx: &[usize]) -> Result<Var> {
        let t = g.param(self.table);
        g.gather_rows(t, idx)
    }
}
