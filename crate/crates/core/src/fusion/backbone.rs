use rand::Rng;

use super::{BackboneSpec, FilmPlacement};
use crate::error::Result;
use crate::numerics::{Conv2d, Conv3d, Graph, GroupNorm, Linear, LinearInit, ParamStore, Real, Var};

#[derive(Clone, Debug)]
pub enum Stem {
    Planar(Conv2d),
    /// Kernel spans the whole two-image depth axis; depth is summed out.
    Volumetric(Conv3d),
}

/// conv3×3-GN-ReLU-conv3×3-GN(-FiLM) + shortcut, then ReLU.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub conv1: Conv2d,
    pub norm1: GroupNorm,
    pub conv2: Conv2d,
    pub norm2: GroupNorm,
    pub shortcut: Option<(Conv2d, GroupNorm)>,
}

impl ResBlock {
    fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let conv1 = Conv2d::new(store, &format!("{name}.conv1"), in_ch, out_ch, 3, stride, 1, rng)?;
        let norm1 = GroupNorm::new(store, &format!("{name}.norm1"), out_ch)?;
        let conv2 = Conv2d::new(store, &format!("{name}.conv2"), out_ch, out_ch, 3, 1, 1, rng)?;
        let norm2 = GroupNorm::new(store, &format!("{name}.norm2"), out_ch)?;
        let shortcut = if stride != 1 || in_ch != out_ch {
            Some((
                Conv2d::new(store, &format!("{name}.shortcut"), in_ch, out_ch, 1, stride, 0, rng)?,
                GroupNorm::new(store, &format!("{name}.shortcut_norm"), out_ch)?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1,
            norm1,
            conv2,
            norm2,
            shortcut,
        })
    }
}

/// Activations recorded during one backbone pass.
#[derive(Clone, Debug, Default)]
pub struct Trace {
    /// Output of every block that ran.
    pub blocks: Vec<Var>,
    /// Block activation at the FiLM site, before and after modulation.
    pub film_pre: Vec<Var>,
    pub film_post: Vec<Var>,
    pub embedding: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub stem: Stem,
    pub stem_norm: GroupNorm,
    pub blocks: Vec<ResBlock>,
    pub head: Option<Linear>,
}

/// Affine factors for one block, supplied by the caller.
pub type FilmFactors = (Var, Var);

impl Backbone {
    /// Builds the first `num_blocks` blocks of `spec`; the head is only
    /// attached when all blocks are present and `with_head` is set.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        spec: &BackboneSpec,
        in_channels: usize,
        input_hw: (usize, usize),
        volumetric: bool,
        num_blocks: usize,
        with_head: bool,
        rng: &mut R,
    ) -> Result<Self> {
        spec.validate()?;
        let s = spec.stem;
        let stem = if volumetric {
            Stem::Volumetric(Conv3d::new(store, &format!("{name}.stem"), in_channels, s.channels, 2, s.kernel, s.stride, s.kernel / 2, rng)?)
        } else {
            Stem::Planar(Conv2d::new(store, &format!("{name}.stem"), in_channels, s.channels, s.kernel, s.stride, s.kernel / 2, rng)?)
        };
        let stem_norm = GroupNorm::new(store, &format!("{name}.stem_norm"), s.channels)?;
        let mut blocks = Vec::new();
        let mut ch = s.channels;
        for (i, b) in spec.blocks.iter().take(num_blocks).enumerate() {
            blocks.push(ResBlock::new(store, &format!("{name}.block{}", i + 1), ch, b.channels, b.stride, rng)?);
            ch = b.channels;
        }
        let head = if with_head && num_blocks == spec.blocks.len() {
            let (h, w) = *spec.schedule(input_hw.0, input_hw.1).last().expect("schedule");
            Some(Linear::new(store, &format!("{name}.head"), ch * h * w, spec.embed_dim, LinearInit::KaimingUniform, rng)?)
        } else {
            None
        };
        Ok(Self {
            stem,
            stem_norm,
            blocks,
            head,
        })
    }

    /// Runs the network on `x` (`N×C×H×W`, or `N×C×2×H×W` for a volumetric
    /// stem). `films[i]` modulates block `i`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        x: Var,
        films: &[FilmFactors],
        placement: FilmPlacement,
    ) -> Result<Trace> {
        let mut z = match &self.stem {
            Stem::Planar(c) => c.forward(g, x)?,
            Stem::Volumetric(c) => {
                let v = c.forward(g, x)?;
                g.sum_depth(v)?
            }
        };
        z = self.stem_norm.forward(g, z)?;
        z = g.relu(z);
        let mut trace = Trace::default();
        for (i, block) in self.blocks.iter().enumerate() {
            let film = films.get(i).copied();
            let mut y = block.conv1.forward(g, z)?;
            y = block.norm1.forward(g, y)?;
            y = g.relu(y);
            y = block.conv2.forward(g, y)?;
            if let (Some((ga, be)), FilmPlacement::PreNorm) = (film, placement) {
                trace.film_pre.push(y);
                y = g.film(y, ga, be)?;
                trace.film_post.push(y);
            }
            y = block.norm2.forward(g, y)?;
            if let (Some((ga, be)), FilmPlacement::PostNorm) = (film, placement) {
                trace.film_pre.push(y);
                y = g.film(y, ga, be)?;
                trace.film_post.push(y);
            }
            let skip = match &block.shortcut {
                Some((conv, norm)) => {
                    let s = conv.forward(g, z)?;
                    norm.forward(g, s)?
                }
                None => z,
            };
            y = g.add(y, skip)?;
            z = g.relu(y);
            trace.blocks.push(z);
        }
        if let Some(head) = &self.head {
            let flat = g.flatten(z)?;
            let e = head.forward(g, flat)?;
            trace.embedding = Some(g.relu(e));
        }
        Ok(trace)
    }
}
