use rand::Rng;

use super::{Backbone, EarlyConcat, FilmFactors, FusionConfig, Mechanism, MidMapping, Modeling, Trace};
use crate::error::{Error, Result};
use crate::keypoints;
use crate::numerics::{Conv2d, Graph, Linear, LinearInit, ParamId, ParamStore, Real, Tensor, Var};
use crate::worldsim::RgbImage;

/// Maps a goal activation map to FiLM factors; initialized to the identity
/// transform (zero weights, γ bias one, β bias zero).
#[derive(Clone, Debug)]
pub enum AffineMap {
    /// Two 1×1 convolutions, factors at full `C×H×W` resolution.
    FgHr { gamma: Conv2d, beta: Conv2d },
    /// Global average pool followed by two fully connected maps, per-channel factors.
    Semantic { gamma: Linear, beta: Linear },
}

fn zero_param<T: Real>(store: &mut ParamStore<T>, id: ParamId) {
    store.get_mut(id).value.data_mut().iter_mut().for_each(|v| *v = T::zero());
}

fn fill_param<T: Real>(store: &mut ParamStore<T>, id: ParamId, value: T) {
    store.get_mut(id).value.data_mut().iter_mut().for_each(|v| *v = value);
}

impl AffineMap {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        mapping: MidMapping,
        channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let map = match mapping {
            MidMapping::FgHr => AffineMap::FgHr {
                gamma: Conv2d::new(store, &format!("{name}.gamma"), channels, channels, 1, 1, 0, rng)?,
                beta: Conv2d::new(store, &format!("{name}.beta"), channels, channels, 1, 1, 0, rng)?,
            },
            MidMapping::Semantic => AffineMap::Semantic {
                gamma: Linear::new(store, &format!("{name}.gamma"), channels, channels, LinearInit::Zeros, rng)?,
                beta: Linear::new(store, &format!("{name}.beta"), channels, channels, LinearInit::Zeros, rng)?,
            },
        };
        let (gw, gb, bw, bb) = map.ids();
        zero_param(store, gw);
        zero_param(store, bw);
        zero_param(store, bb);
        fill_param(store, gb, T::one());
        Ok(map)
    }

    fn ids(&self) -> (ParamId, ParamId, ParamId, ParamId) {
        match self {
            AffineMap::FgHr { gamma, beta } => (gamma.weight, gamma.bias, beta.weight, beta.bias),
            AffineMap::Semantic { gamma, beta } => (gamma.weight, gamma.bias, beta.weight, beta.bias),
        }
    }

    /// `(γ, β)` for goal activations `z_g` (`N×C×H×W`).
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, z_g: Var) -> Result<FilmFactors> {
        match self {
            AffineMap::FgHr { gamma, beta } => Ok((gamma.forward(g, z_g)?, beta.forward(g, z_g)?)),
            AffineMap::Semantic { gamma, beta } => {
                let pooled = g.global_avg_pool(z_g)?;
                Ok((gamma.forward(g, pooled)?, beta.forward(g, pooled)?))
            }
        }
    }
}

#[derive(Clone, Debug)]
enum Kind {
    Late {
        obs: Backbone,
        goal: Option<Backbone>,
        fc: Linear,
    },
    Early {
        net: Backbone,
    },
    Mid {
        goal: Backbone,
        obs: Backbone,
        maps: Vec<AffineMap>,
    },
    Skip {
        obs: Backbone,
        goal: Option<Backbone>,
        keypoint_fc: Linear,
        proj: Linear,
    },
}

/// One of the four goal/observation fusion encoders.
#[derive(Clone, Debug)]
pub struct FusionEncoder {
    config: FusionConfig,
    resolution: usize,
    kind: Kind,
}

/// Batched encoder inputs: `N×3×H×W` images plus, for skip fusion, the
/// `N×4k` keypoint vectors.
#[derive(Clone, Debug)]
pub struct EncoderInput<T> {
    pub obs: Tensor<T>,
    pub goal: Tensor<T>,
    pub keypoints: Option<Tensor<T>>,
}

pub fn stack_images<T: Real>(images: &[&RgbImage]) -> Result<Tensor<T>> {
    let Some(first) = images.first() else {
        return Err(Error::usage("cannot stack an empty image batch"));
    };
    let size = first.width();
    let mut data = Vec::with_capacity(images.len() * 3 * size * size);
    for img in images {
        if img.width() != size {
            return Err(Error::config(format!("image resolution mismatch: {} vs {size}", img.width())));
        }
        data.extend(img.planar().iter().map(|v| T::from_f64_lossy(*v as f64)));
    }
    Tensor::new(vec![images.len(), 3, size, size], data)
}

impl<T: Real> EncoderInput<T> {
    /// Stacks image pairs and, when the config needs them, computes keypoint
    /// vectors (goal matched against observation).
    pub fn from_images(obs: &[&RgbImage], goal: &[&RgbImage], config: &FusionConfig) -> Result<Self> {
        if obs.len() != goal.len() {
            return Err(Error::usage("observation and goal batches differ in length"));
        }
        let keypoints = if config.mechanism == Mechanism::Skip {
            let rows: Vec<Vec<f32>> = obs
                .iter()
                .zip(goal)
                .map(|(o, g)| keypoints::keypoint_vector(g, o, config.skip_k))
                .collect();
            Some(keypoint_tensor(&rows)?)
        } else {
            None
        };
        Ok(Self {
            obs: stack_images(obs)?,
            goal: stack_images(goal)?,
            keypoints,
        })
    }

    pub fn batch(&self) -> usize {
        self.obs.shape()[0]
    }
}

pub fn keypoint_tensor<T: Real>(rows: &[Vec<f32>]) -> Result<Tensor<T>> {
    let width = rows.first().map_or(0, Vec::len);
    let data = rows.iter().flatten().map(|v| T::from_f64_lossy(*v as f64)).collect();
    Tensor::new(vec![rows.len(), width], data)
}

/// Pixel-level combination for early fusion.
pub fn early_input<T: Real>(obs: &Tensor<T>, goal: &Tensor<T>, mode: EarlyConcat) -> Result<Tensor<T>> {
    let s = obs.shape();
    if s != goal.shape() || s.len() != 4 {
        return Err(Error::config(format!("early fusion needs equal N×C×H×W inputs, got {s:?} and {:?}", goal.shape())));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let per = c * h * w;
    let (o, g) = (obs.data(), goal.data());
    match mode {
        // N×2C×H×W and N×C×2×H×W share the same memory layout.
        EarlyConcat::Channel | EarlyConcat::Stack3d => {
            let mut data = Vec::with_capacity(2 * n * per);
            for i in 0..n {
                if mode == EarlyConcat::Channel {
                    data.extend_from_slice(&o[i * per..(i + 1) * per]);
                    data.extend_from_slice(&g[i * per..(i + 1) * per]);
                } else {
                    for ch in 0..c {
                        let plane = (i * c + ch) * h * w;
                        data.extend_from_slice(&o[plane..plane + h * w]);
                        data.extend_from_slice(&g[plane..plane + h * w]);
                    }
                }
            }
            let shape = if mode == EarlyConcat::Channel {
                vec![n, 2 * c, h, w]
            } else {
                vec![n, c, 2, h, w]
            };
            Tensor::new(shape, data)
        }
        EarlyConcat::Edge => {
            let mut data = Vec::with_capacity(2 * n * per);
            for row in 0..n * c * h {
                data.extend_from_slice(&o[row * w..(row + 1) * w]);
                data.extend_from_slice(&g[row * w..(row + 1) * w]);
            }
            Tensor::new(vec![n, c, h, 2 * w], data)
        }
    }
}

/// Everything a caller may want from one encoder pass.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub embedding: Var,
    pub obs_trace: Trace,
    pub goal_trace: Option<Trace>,
    /// Observation and goal embeddings before late or skip fusion.
    pub halves: Option<(Var, Var)>,
    /// FiLM factors per conditioned block (mid fusion).
    pub factors: Vec<FilmFactors>,
}

impl FusionEncoder {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        config: &FusionConfig,
        resolution: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let spec = &config.backbone;
        let e = spec.embed_dim;
        let hw = (resolution, resolution);
        let full = spec.blocks.len();
        let tied = config.modeling() == Modeling::Tied;
        let kind = match config.mechanism {
            Mechanism::Late | Mechanism::Skip => {
                let obs = Backbone::new(store, "obs_encoder", spec, 3, hw, false, full, true, rng)?;
                let goal = if tied {
                    None
                } else {
                    Some(Backbone::new(store, "goal_encoder", spec, 3, hw, false, full, true, rng)?)
                };
                if config.mechanism == Mechanism::Late {
                    let fc = Linear::new(store, "fusion.fc", 2 * e, e, LinearInit::KaimingUniform, rng)?;
                    Kind::Late { obs, goal, fc }
                } else {
                    let hk = config.skip_hidden;
                    let keypoint_fc = Linear::new(store, "skip.keypoint_fc", 4 * config.skip_k, hk, LinearInit::KaimingUniform, rng)?;
                    let proj = Linear::new(store, "skip.proj", 2 * e + hk, e, LinearInit::KaimingUniform, rng)?;
                    Kind::Skip {
                        obs,
                        goal,
                        keypoint_fc,
                        proj,
                    }
                }
            }
            Mechanism::Early => {
                let (ch, input_hw, volumetric) = match config.early_concat {
                    EarlyConcat::Channel => (6, hw, false),
                    EarlyConcat::Edge => (3, (resolution, 2 * resolution), false),
                    EarlyConcat::Stack3d => (3, hw, true),
                };
                Kind::Early {
                    net: Backbone::new(store, "encoder", spec, ch, input_hw, volumetric, full, true, rng)?,
                }
            }
            Mechanism::Mid => {
                let depth = config.mid_depth;
                let goal = Backbone::new(store, "goal_encoder", spec, 3, hw, false, depth, false, rng)?;
                let obs = Backbone::new(store, "obs_encoder", spec, 3, hw, false, full, true, rng)?;
                let maps = spec.blocks[..depth]
                    .iter()
                    .enumerate()
                    .map(|(i, b)| AffineMap::new(store, &format!("film.block{}", i + 1), config.mid_mapping, b.channels, rng))
                    .collect::<Result<_>>()?;
                Kind::Mid { goal, obs, maps }
            }
        };
        Ok(Self {
            config: config.clone(),
            resolution,
            kind,
        })
    }

    pub fn config(&self) -> &FusionConfig {
        &self.config
    }

    pub fn embed_dim(&self) -> usize {
        self.config.backbone.embed_dim
    }

    /// The observation-side backbone (the only one for early fusion).
    pub fn obs_backbone(&self) -> &Backbone {
        match &self.kind {
            Kind::Late { obs, .. } | Kind::Mid { obs, .. } | Kind::Skip { obs, .. } => obs,
            Kind::Early { net } => net,
        }
    }

    pub fn affine_maps(&self) -> &[AffineMap] {
        match &self.kind {
            Kind::Mid { maps, .. } => maps,
            _ => &[],
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, input: &EncoderInput<T>) -> Result<EncoderOutput> {
        let res = self.resolution;
        let s = input.obs.shape();
        if s.len() != 4 || s[2] != res || s[3] != res || input.goal.shape() != s {
            return Err(Error::config(format!(
                "encoder expects N×3×{res}×{res} observation and goal batches, got {s:?} and {:?}",
                input.goal.shape()
            )));
        }
        let placement = self.config.film_placement;
        let embedding_of = |t: &Trace| t.embedding.expect("backbone with head");
        match &self.kind {
            Kind::Late { obs, goal, fc } => {
                let (to, tg) = self.two_stream(g, input, obs, goal.as_ref())?;
                let (eo, eg) = (embedding_of(&to), embedding_of(&tg));
                let cat = g.concat1(&[eo, eg])?;
                let z = fc.forward(g, cat)?;
                Ok(EncoderOutput {
                    embedding: g.relu(z),
                    obs_trace: to,
                    goal_trace: Some(tg),
                    halves: Some((eo, eg)),
                    factors: vec![],
                })
            }
            Kind::Skip {
                obs,
                goal,
                keypoint_fc,
                proj,
            } => {
                let Some(kp) = &input.keypoints else {
                    return Err(Error::usage("skip fusion needs keypoint vectors"));
                };
                let want = [input.batch(), 4 * self.config.skip_k];
                if kp.shape() != want {
                    return Err(Error::config(format!("keypoint batch must be {want:?}, got {:?}", kp.shape())));
                }
                let (to, tg) = self.two_stream(g, input, obs, goal.as_ref())?;
                let (eo, eg) = (embedding_of(&to), embedding_of(&tg));
                let k = g.input(kp.clone());
                let k = keypoint_fc.forward(g, k)?;
                let k = g.relu(k);
                let cat = g.concat1(&[eg, eo, k])?;
                let z = proj.forward(g, cat)?;
                Ok(EncoderOutput {
                    embedding: g.relu(z),
                    obs_trace: to,
                    goal_trace: Some(tg),
                    halves: Some((eo, eg)),
                    factors: vec![],
                })
            }
            Kind::Early { net } => {
                let x = g.input(early_input(&input.obs, &input.goal, self.config.early_concat)?);
                let trace = net.forward(g, x, &[], placement)?;
                Ok(EncoderOutput {
                    embedding: embedding_of(&trace),
                    obs_trace: trace,
                    goal_trace: None,
                    halves: None,
                    factors: vec![],
                })
            }
            Kind::Mid { goal, obs, maps } => {
                let xg = g.input(input.goal.clone());
                let tg = goal.forward(g, xg, &[], placement)?;
                let factors = maps
                    .iter()
                    .zip(&tg.blocks)
                    .map(|(m, &z)| m.forward(g, z))
                    .collect::<Result<Vec<_>>>()?;
                let xo = g.input(input.obs.clone());
                let to = obs.forward(g, xo, &factors, placement)?;
                Ok(EncoderOutput {
                    embedding: embedding_of(&to),
                    obs_trace: to,
                    goal_trace: Some(tg),
                    halves: None,
                    factors,
                })
            }
        }
    }

    fn two_stream<T: Real>(
        &self,
        g: &mut Graph<T>,
        input: &EncoderInput<T>,
        obs: &Backbone,
        goal: Option<&Backbone>,
    ) -> Result<(Trace, Trace)> {
        let placement = self.config.film_placement;
        let xo = g.input(input.obs.clone());
        let to = obs.forward(g, xo, &[], placement)?;
        let xg = g.input(input.goal.clone());
        let tg = goal.unwrap_or(obs).forward(g, xg, &[], placement)?;
        Ok((to, tg))
    }
}
