//! The fusion network: input projection, audio-visual feature pyramid,
//! per-level gated bidirectional cross-attention fusion, and shared
//! classification/regression heads.

pub mod attention;
pub mod config;
pub mod fuse;

pub use config::{default_regression_ranges, FusionMode, ModelConfig};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{init, Graph, ParamId, ParamSet, Scalar, Tensor, Var};
use attention::AttnParams;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Caches parameter leaves so each parameter appears once per graph.
#[derive(Debug)]
pub struct ParamCache {
    vars: Vec<Option<Var>>,
}

impl ParamCache {
    pub fn new(num_params: usize) -> Self {
        ParamCache {
            vars: vec![None; num_params],
        }
    }

    pub fn var<S: Scalar>(&mut self, g: &mut Graph<S>, ps: &ParamSet<S>, id: ParamId) -> Result<Var> {
        if let Some(v) = self.vars[id.0] {
            return Ok(v);
        }
        let v = g.param(ps, id)?;
        self.vars[id.0] = Some(v);
        Ok(v)
    }
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Debug, Clone)]
struct ProjBlock {
    conv: Conv,
    norm: Norm,
}

#[derive(Debug, Clone)]
enum LevelFusion {
    Gated {
        /// visual queries over audio context -> P_x
        va: AttnParams,
        /// audio queries over visual context -> P_a
        av: AttnParams,
        gate: Conv,
        fuse: Conv,
    },
    Concat {
        fuse: Conv,
    },
    Pool,
}

#[derive(Debug, Clone)]
struct Tower {
    convs: Vec<Conv>,
    norms: Vec<Norm>,
    out: Conv,
}

/// Head outputs for one pyramid level. `gate` is present only in gated
/// fusion mode.
#[derive(Debug, Clone)]
pub struct LevelOutput {
    /// [C, T_l]
    pub cls_logits: Var,
    /// [T_l], strictly positive
    pub d_start: Var,
    /// [T_l], strictly positive
    pub d_end: Var,
    /// [T_l], in (0,1)
    pub gate: Option<Var>,
    /// Valid (unpadded) instants at this level.
    pub t_valid: usize,
}

/// A forward pass: the recorded graph plus handles into it.
#[derive(Debug)]
pub struct ForwardPass<S> {
    pub graph: Graph<S>,
    pub levels: Vec<LevelOutput>,
    pub proj_visual: Var,
    pub proj_audio: Var,
}

#[derive(Debug)]
pub struct Model<S> {
    pub config: ModelConfig,
    pub params: ParamSet<S>,
    proj_visual: ProjBlock,
    proj_audio: ProjBlock,
    levels: Vec<LevelFusion>,
    cls_tower: Tower,
    reg_tower: Tower,
}

impl<S: Scalar> Model<S> {
    /// Builds a model with seeded init: weights uniform in +-1/sqrt(fan_in),
    /// biases zero, layer-norm gains one.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let d = config.d_model;

        let conv = |ps: &mut ParamSet<S>,
                        rng: &mut ChaCha8Rng,
                        name: &str,
                        c_out: usize,
                        c_in: usize,
                        k: usize|
         -> Result<Conv> {
            let w = ps.add(
                format!("{name}.weight"),
                init::uniform_fan_in(vec![c_out, c_in, k], c_in * k, rng),
            )?;
            let b = ps.add(format!("{name}.bias"), Tensor::zeros(vec![c_out]))?;
            Ok(Conv { w, b })
        };
        let norm = |ps: &mut ParamSet<S>, name: &str, dim: usize| -> Result<Norm> {
            let gamma = ps.add(format!("{name}.gamma"), Tensor::full(vec![dim], S::ONE))?;
            let beta = ps.add(format!("{name}.beta"), Tensor::zeros(vec![dim]))?;
            Ok(Norm { gamma, beta })
        };

        let proj_visual = ProjBlock {
            conv: conv(&mut ps, &mut rng, "proj.visual.conv", d, config.d_visual_in, 3)?,
            norm: norm(&mut ps, "proj.visual.norm", d)?,
        };
        let proj_audio = ProjBlock {
            conv: conv(&mut ps, &mut rng, "proj.audio.conv", d, config.d_audio_in, 3)?,
            norm: norm(&mut ps, "proj.audio.norm", d)?,
        };

        let attn = |ps: &mut ParamSet<S>, rng: &mut ChaCha8Rng, name: &str| -> Result<AttnParams> {
            let dh = config.head_dim();
            let mut q = Vec::new();
            let mut k = Vec::new();
            let mut v = Vec::new();
            for h in 0..config.num_heads {
                q.push(ps.add(
                    format!("{name}.q.h{h}.weight"),
                    init::uniform_fan_in(vec![d, dh], d, rng),
                )?);
                k.push(ps.add(
                    format!("{name}.k.h{h}.weight"),
                    init::uniform_fan_in(vec![d, dh], d, rng),
                )?);
                v.push(ps.add(
                    format!("{name}.v.h{h}.weight"),
                    init::uniform_fan_in(vec![d, dh], d, rng),
                )?);
            }
            let out_w = ps.add(
                format!("{name}.out.weight"),
                init::uniform_fan_in(vec![d, d, 1], d, rng),
            )?;
            let out_b = ps.add(format!("{name}.out.bias"), Tensor::zeros(vec![d]))?;
            Ok(AttnParams { q, k, v, out_w, out_b })
        };

        let mut levels = Vec::with_capacity(config.num_levels);
        for l in 0..config.num_levels {
            let fusion = match config.fusion_mode {
                FusionMode::GatedXattn => LevelFusion::Gated {
                    va: attn(&mut ps, &mut rng, &format!("level{l}.xattn_va"))?,
                    av: attn(&mut ps, &mut rng, &format!("level{l}.xattn_av"))?,
                    gate: conv(&mut ps, &mut rng, &format!("level{l}.gate.fc"), 1, d, 1)?,
                    fuse: conv(&mut ps, &mut rng, &format!("level{l}.fuse.conv"), d, 2 * d, 1)?,
                },
                FusionMode::ConcatBaseline => LevelFusion::Concat {
                    fuse: conv(&mut ps, &mut rng, &format!("level{l}.concat_fuse.conv"), d, 2 * d, 1)?,
                },
                FusionMode::ChannelPoolBaseline => LevelFusion::Pool,
            };
            levels.push(fusion);
        }

        // Heads are shared across levels: one parameter set, used at every l.
        let tower = |ps: &mut ParamSet<S>,
                         rng: &mut ChaCha8Rng,
                         name: &str,
                         out_ch: usize|
         -> Result<Tower> {
            let mut convs = Vec::new();
            let mut norms = Vec::new();
            for i in 0..3 {
                convs.push(conv(ps, rng, &format!("{name}.{i}.conv"), d, d, 3)?);
                norms.push(norm(ps, &format!("{name}.{i}.norm"), d)?);
            }
            let out = conv(ps, rng, &format!("{name}.out.conv"), out_ch, d, 3)?;
            Ok(Tower { convs, norms, out })
        };
        let cls_tower = tower(&mut ps, &mut rng, "head.cls", config.num_classes)?;
        let reg_tower = tower(&mut ps, &mut rng, "head.reg", 2)?;

        Ok(Model {
            config,
            params: ps,
            proj_visual,
            proj_audio,
            levels,
            cls_tower,
            reg_tower,
        })
    }

    /// Full-length forward: no padding anywhere.
    pub fn forward(&self, visual: &Tensor<S>, audio: &Tensor<S>) -> Result<ForwardPass<S>> {
        let t = visual.shape().get(1).copied().unwrap_or(0);
        let a = audio.shape().get(1).copied().unwrap_or(0);
        self.forward_masked(visual, audio, t, a)
    }

    /// Forward with explicit valid lengths. Padded columns (index >= valid)
    /// are zeroed on entry, masked out of attention keys, and excluded from
    /// per-level valid lengths.
    pub fn forward_masked(
        &self,
        visual: &Tensor<S>,
        audio: &Tensor<S>,
        t_valid: usize,
        a_valid: usize,
    ) -> Result<ForwardPass<S>> {
        let cfg = &self.config;
        if visual.rank() != 2 || visual.shape()[0] != cfg.d_visual_in {
            return Err(Error::shape(
                "project_inputs(visual)",
                visual.shape(),
                &[cfg.d_visual_in, 0],
            ));
        }
        if audio.rank() != 2 || audio.shape()[0] != cfg.d_audio_in {
            return Err(Error::shape(
                "project_inputs(audio)",
                audio.shape(),
                &[cfg.d_audio_in, 0],
            ));
        }
        let t0 = visual.shape()[1];
        let a0 = audio.shape()[1];
        if t0 == 0 || a0 == 0 || t_valid == 0 || a_valid == 0 {
            return Err(Error::Contract("empty sequence".into()));
        }
        if t_valid > t0 || a_valid > a0 {
            return Err(Error::Contract(format!(
                "valid lengths ({t_valid}, {a_valid}) exceed sequence lengths ({t0}, {a0})"
            )));
        }
        let min_t = 1usize << (cfg.num_levels - 1);
        if t0 < min_t {
            let max_l = (usize::BITS - t0.leading_zeros()) as usize;
            return Err(Error::Config(format!(
                "sequence of {t0} instants too short for {} pyramid levels; max feasible is {max_l}",
                cfg.num_levels
            )));
        }

        let mut g = Graph::new();
        let mut cache = ParamCache::new(self.params.len());

        let xv = g.input(zero_masked_cols(visual, t_valid))?;
        let av = g.input(zero_masked_cols(audio, a_valid))?;
        let x0 = self.project(&mut g, &mut cache, xv, &self.proj_visual)?;
        let a0v = self.project(&mut g, &mut cache, av, &self.proj_audio)?;

        // pyramid: kernel-3 stride-2 max pooling per modality
        let mut x_levels = vec![x0];
        let mut a_levels = vec![a0v];
        let mut tv = vec![t_valid];
        let mut avl = vec![a_valid];
        for l in 1..cfg.num_levels {
            let xp = g.maxpool1d(x_levels[l - 1], 3, 2, 1)?;
            let ap = g.maxpool1d(a_levels[l - 1], 3, 2, 1)?;
            x_levels.push(xp);
            a_levels.push(ap);
            tv.push(tv[l - 1].div_ceil(2).max(1));
            avl.push(avl[l - 1].div_ceil(2).max(1));
        }

        let mut levels = Vec::with_capacity(cfg.num_levels);
        for l in 0..cfg.num_levels {
            let (x_l, a_l) = (x_levels[l], a_levels[l]);
            let t_l = g.shape(x_l)[1];
            let (fused, gate_vals) = match &self.levels[l] {
                LevelFusion::Gated { va, av, gate: gc, fuse: fc } => {
                    let p_x = attention::cross_attention(&mut g, &self.params, &mut cache, va, x_l, a_l, avl[l])?;
                    let p_a = attention::cross_attention(&mut g, &self.params, &mut cache, av, a_l, x_l, tv[l])?;
                    let p_a_t = g.resample_time(p_a, t_l)?;
                    let gw = cache.var(&mut g, &self.params, gc.w)?;
                    let gb = cache.var(&mut g, &self.params, gc.b)?;
                    let gate_vals = fuse::gate(&mut g, x_l, gw, gb)?;
                    let fw = cache.var(&mut g, &self.params, fc.w)?;
                    let fb = cache.var(&mut g, &self.params, fc.b)?;
                    let (_, fused) = fuse::gated_fuse(
                        &mut g,
                        x_l,
                        p_x,
                        p_a_t,
                        gate_vals,
                        fw,
                        fb,
                        cfg.residual,
                    )?;
                    (fused, Some(gate_vals))
                }
                LevelFusion::Concat { fuse: fc } => {
                    let a_t = g.resample_time(a_l, t_l)?;
                    let cat = g.concat0(&[x_l, a_t])?;
                    let fw = cache.var(&mut g, &self.params, fc.w)?;
                    let fb = cache.var(&mut g, &self.params, fc.b)?;
                    (g.conv1d(cat, fw, fb, 1, 0)?, None)
                }
                LevelFusion::Pool => {
                    let a_t = g.resample_time(a_l, t_l)?;
                    (g.max_elem(x_l, a_t)?, None)
                }
            };

            let cls_feat = self.tower(&mut g, &mut cache, fused, &self.cls_tower)?;
            let cw = cache.var(&mut g, &self.params, self.cls_tower.out.w)?;
            let cb = cache.var(&mut g, &self.params, self.cls_tower.out.b)?;
            let cls_logits = g.conv1d(cls_feat, cw, cb, 1, 1)?;

            let reg_feat = self.tower(&mut g, &mut cache, fused, &self.reg_tower)?;
            let rw = cache.var(&mut g, &self.params, self.reg_tower.out.w)?;
            let rb = cache.var(&mut g, &self.params, self.reg_tower.out.b)?;
            let reg_raw = g.conv1d(reg_feat, rw, rb, 1, 1)?;
            let reg = g.softplus(reg_raw)?; // [2, T_l], strictly positive
            let d_start_row = g.slice(reg, 0, 0, 1)?;
            let d_start = g.reshape(d_start_row, vec![t_l])?;
            let d_end_row = g.slice(reg, 0, 1, 1)?;
            let d_end = g.reshape(d_end_row, vec![t_l])?;

            levels.push(LevelOutput {
                cls_logits,
                d_start,
                d_end,
                gate: gate_vals,
                t_valid: tv[l],
            });
        }

        Ok(ForwardPass {
            graph: g,
            levels,
            proj_visual: x0,
            proj_audio: a0v,
        })
    }

    /// conv(k3, pad 1) -> layer norm over channels -> relu; length preserved.
    fn project(
        &self,
        g: &mut Graph<S>,
        cache: &mut ParamCache,
        x: Var,
        block: &ProjBlock,
    ) -> Result<Var> {
        let w = cache.var(g, &self.params, block.conv.w)?;
        let b = cache.var(g, &self.params, block.conv.b)?;
        let c = g.conv1d(x, w, b, 1, 1)?;
        let n = self.channel_norm(g, cache, c, &block.norm)?;
        g.relu(n)
    }

    /// Layer norm across the channel dim of a [C, T] map.
    fn channel_norm(&self, g: &mut Graph<S>, cache: &mut ParamCache, x: Var, n: &Norm) -> Result<Var> {
        let gamma = cache.var(g, &self.params, n.gamma)?;
        let beta = cache.var(g, &self.params, n.beta)?;
        let xt = g.transpose_last2(x)?;
        let ln = g.layer_norm(xt, gamma, beta, LAYER_NORM_EPS)?;
        g.transpose_last2(ln)
    }

    /// Three conv(k3)+norm+relu blocks; parameters shared across levels.
    fn tower(&self, g: &mut Graph<S>, cache: &mut ParamCache, x: Var, t: &Tower) -> Result<Var> {
        let mut cur = x;
        for i in 0..t.convs.len() {
            let w = cache.var(g, &self.params, t.convs[i].w)?;
            let b = cache.var(g, &self.params, t.convs[i].b)?;
            let c = g.conv1d(cur, w, b, 1, 1)?;
            let n = self.channel_norm(g, cache, c, &t.norms[i])?;
            cur = g.relu(n)?;
        }
        Ok(cur)
    }

    /// Pyramid lengths for a given input length: ceil(T/2^l) per level.
    pub fn pyramid_lengths(&self, t0: usize) -> Vec<usize> {
        let mut out = vec![t0];
        for _ in 1..self.config.num_levels {
            out.push(out.last().unwrap().div_ceil(2).max(1));
        }
        out
    }
}

/// Columns at index >= valid are forced to zero so downstream convolutions
/// read deterministic values that cannot depend on padded content.
fn zero_masked_cols<S: Scalar>(x: &Tensor<S>, valid: usize) -> Tensor<S> {
    let (c, t) = (x.shape()[0], x.shape()[1]);
    if valid >= t {
        return x.clone();
    }
    let mut data = x.data().to_vec();
    for ch in 0..c {
        for ti in valid..t {
            data[ch * t + ti] = S::ZERO;
        }
    }
    Tensor::new(vec![c, t], data).expect("shape unchanged")
}
