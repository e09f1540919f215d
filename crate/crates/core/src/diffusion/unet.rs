//! Temporal U-Net split into an encoder `phi` and a decoder `psi`.
//!
//! ```text
//! x [B, H, D] -> transpose -> down levels (2 residual blocks, stride-2 conv)
//!   -> mid block 1 -> average over time -> affine -> z [B, d_z]       (phi)
//! z -> affine -> broadcast over time -> mid block 2
//!   -> up levels (concat skip, 2 residual blocks, x2 upsample) -> conv -> [B, H, D]  (psi)
//! ```
//!
//! The decoder also consumes the encoder's per-level skip activations, as in
//! any U-Net; `z` is the only path from the bottleneck to the output.

use ndarray::{Array3, ArrayD};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nncore::{
    Activation, Bound, Conv1d, Graph, GroupNorm, LayerSpec, Linear, ParamSet, TimeEmbedding, Var,
};

const KERNEL: usize = 5;
const GROUPS: usize = 8;

/// Architecture of a [`TemporalUNet`].
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct UNetConfig {
    pub horizon: usize,
    pub transition_dim: usize,
    pub base_dim: usize,
    pub dim_mults: Vec<usize>,
    pub d_z: usize,
}

impl UNetConfig {
    /// Number of resolution levels actually used: the largest prefix of
    /// `dim_mults` whose downsampling divides the horizon evenly.
    pub fn effective_levels(&self) -> usize {
        let mut levels = self.dim_mults.len().max(1);
        while levels > 1 && self.horizon % (1 << (levels - 1)) != 0 {
            levels -= 1;
        }
        levels
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ResBlock {
    conv1: Conv1d,
    gn1: GroupNorm,
    time: Linear,
    conv2: Conv1d,
    gn2: GroupNorm,
    skip: Option<Conv1d>,
}

impl ResBlock {
    fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet<f32>,
        name: &str,
        input: usize,
        output: usize,
        time_dim: usize,
        rng: &mut R,
    ) -> Self {
        ResBlock {
            conv1: Conv1d::new(ps, &format!("{name}.conv1"), input, output, KERNEL, 1, rng),
            gn1: GroupNorm::new(ps, &format!("{name}.gn1"), output, GROUPS),
            time: Linear::new(ps, &format!("{name}.time"), time_dim, output, rng),
            conv2: Conv1d::new(ps, &format!("{name}.conv2"), output, output, KERNEL, 1, rng),
            gn2: GroupNorm::new(ps, &format!("{name}.gn2"), output, GROUPS),
            skip: (input != output)
                .then(|| Conv1d::new(ps, &format!("{name}.skip"), input, output, 1, 1, rng)),
        }
    }

    /// `x: [B, C_in, h]`, `t: [B, time_dim]` (already Mish-activated).
    fn forward(&self, g: &mut Graph<f32>, p: &Bound, x: Var, t: Var) -> Result<Var> {
        let h = g.shape(x)[2];
        let a = self.conv1.forward(g, p, x)?;
        let a = self.gn1.forward(g, p, a)?;
        let a = g.mish(a);
        let te = self.time.forward(g, p, t)?;
        let te = g.broadcast_time(te, h);
        let a = g.add(a, te);
        let b = self.conv2.forward(g, p, a)?;
        let b = self.gn2.forward(g, p, b)?;
        let b = g.mish(b);
        let res = match &self.skip {
            Some(c) => c.forward(g, p, x)?,
            None => x,
        };
        Ok(g.add(b, res))
    }

    fn specs(&self) -> Vec<LayerSpec> {
        let mut out = vec![
            self.conv1.spec(),
            self.gn1.spec(),
            LayerSpec::Activation {
                act: Activation::Mish,
            },
            LayerSpec::Activation {
                act: Activation::Mish,
            },
            self.time.spec(),
            self.conv2.spec(),
            self.gn2.spec(),
            LayerSpec::Activation {
                act: Activation::Mish,
            },
        ];
        if let Some(c) = &self.skip {
            out.push(c.spec());
        }
        out.push(LayerSpec::ResidualAdd);
        out
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct DownLevel {
    res1: ResBlock,
    res2: ResBlock,
    down: Option<Conv1d>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct UpLevel {
    res1: ResBlock,
    res2: ResBlock,
    up: Conv1d,
}

/// Encoder output: the latent plus what the decoder needs.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// `[B, d_z]`
    pub z: Var,
    skips: Vec<Var>,
    time: Var,
    mid_len: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TemporalUNet {
    pub config: UNetConfig,
    time: TimeEmbedding,
    downs: Vec<DownLevel>,
    mid1: ResBlock,
    to_z: Linear,
    from_z: Linear,
    mid2: ResBlock,
    ups: Vec<UpLevel>,
    final_conv: Conv1d,
    final_gn: GroupNorm,
    out: Conv1d,
}

impl TemporalUNet {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet<f32>,
        config: UNetConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if config.horizon == 0
            || config.transition_dim == 0
            || config.d_z == 0
            || config.base_dim < 2
        {
            return Err(Error::config(
                "U-Net needs horizon, transition_dim, d_z >= 1 and base_dim >= 2",
            ));
        }
        if config.base_dim % 2 != 0 {
            return Err(Error::config(
                "U-Net base_dim must be even (sinusoidal step embedding)",
            ));
        }
        let levels = config.effective_levels();
        if levels < config.dim_mults.len() {
            log::warn!(
                "horizon {} is not divisible by 2^{}; using {levels} of {} U-Net levels",
                config.horizon,
                config.dim_mults.len() - 1,
                config.dim_mults.len()
            );
        }
        let mults = if config.dim_mults.is_empty() {
            vec![1]
        } else {
            config.dim_mults[..levels].to_vec()
        };
        let base = config.base_dim;
        let tdim = base;
        let mut dims = vec![config.transition_dim];
        dims.extend(mults.iter().map(|m| base * m));

        let time = TimeEmbedding::new(ps, "unet.time", tdim, rng);
        let mut downs = Vec::new();
        for i in 0..levels {
            let (cin, cout) = (dims[i], dims[i + 1]);
            let last = i + 1 == levels;
            downs.push(DownLevel {
                res1: ResBlock::new(ps, &format!("unet.down{i}.res1"), cin, cout, tdim, rng),
                res2: ResBlock::new(ps, &format!("unet.down{i}.res2"), cout, cout, tdim, rng),
                down: (!last)
                    .then(|| Conv1d::new(ps, &format!("unet.down{i}.down"), cout, cout, 3, 2, rng)),
            });
        }
        let cmid = dims[levels];
        let mid1 = ResBlock::new(ps, "unet.mid1", cmid, cmid, tdim, rng);
        let to_z = Linear::new(ps, "unet.to_z", cmid, config.d_z, rng);
        let from_z = Linear::new(ps, "unet.from_z", config.d_z, cmid, rng);
        let mid2 = ResBlock::new(ps, "unet.mid2", cmid, cmid, tdim, rng);
        let mut ups = Vec::new();
        for i in (1..levels).rev() {
            let (cin, cout) = (dims[i], dims[i + 1]);
            ups.push(UpLevel {
                res1: ResBlock::new(ps, &format!("unet.up{i}.res1"), 2 * cout, cin, tdim, rng),
                res2: ResBlock::new(ps, &format!("unet.up{i}.res2"), cin, cin, tdim, rng),
                up: Conv1d::new(ps, &format!("unet.up{i}.up"), cin, cin, 3, 1, rng),
            });
        }
        let cfin = dims[1];
        let final_conv = Conv1d::new(ps, "unet.final.conv", cfin, cfin, KERNEL, 1, rng);
        let final_gn = GroupNorm::new(ps, "unet.final.gn", cfin, GROUPS);
        let out = Conv1d::new(ps, "unet.out", cfin, config.transition_dim, 1, 1, rng);
        Ok(TemporalUNet {
            config,
            time,
            downs,
            mid1,
            to_z,
            from_z,
            mid2,
            ups,
            final_conv,
            final_gn,
            out,
        })
    }

    pub fn levels(&self) -> usize {
        self.downs.len()
    }

    fn check_input(&self, g: &Graph<f32>, x: Var, steps: &[f64]) -> Result<()> {
        let s = g.shape(x);
        let c = &self.config;
        if s.len() != 3 || s[1] != c.horizon || s[2] != c.transition_dim || s[0] != steps.len() {
            return Err(Error::Shape {
                layer: "unet.input".into(),
                expected: format!("[{}, {}, {}]", steps.len(), c.horizon, c.transition_dim),
                got: format!("{s:?}"),
            });
        }
        Ok(())
    }

    /// `phi`: `x: [B, H, D]` and one diffusion step per sample.
    pub fn encode(&self, g: &mut Graph<f32>, p: &Bound, x: Var, steps: &[f64]) -> Result<Encoded> {
        self.check_input(g, x, steps)?;
        let t = self.time.forward(g, p, steps)?;
        let t = g.mish(t);
        let mut h = g.swap_last(x);
        let mut skips = Vec::with_capacity(self.downs.len());
        for lvl in &self.downs {
            h = lvl.res1.forward(g, p, h, t)?;
            h = lvl.res2.forward(g, p, h, t)?;
            skips.push(h);
            if let Some(d) = &lvl.down {
                h = d.forward(g, p, h)?;
            }
        }
        h = self.mid1.forward(g, p, h, t)?;
        let mid_len = g.shape(h)[2];
        let pooled = g.mean_time(h);
        let z = self.to_z.forward(g, p, pooled)?;
        Ok(Encoded {
            z,
            skips,
            time: t,
            mid_len,
        })
    }

    /// `psi`: predicted noise `[B, H, D]`.
    pub fn decode(&self, g: &mut Graph<f32>, p: &Bound, enc: &Encoded) -> Result<Var> {
        let t = enc.time;
        let h = self.from_z.forward(g, p, enc.z)?;
        let mut h = g.broadcast_time(h, enc.mid_len);
        h = self.mid2.forward(g, p, h, t)?;
        let mut skips = enc.skips.clone();
        for lvl in &self.ups {
            let s = skips.pop().expect("one skip per level");
            h = g.concat(h, s, 1);
            h = lvl.res1.forward(g, p, h, t)?;
            h = lvl.res2.forward(g, p, h, t)?;
            h = g.upsample2(h);
            h = lvl.up.forward(g, p, h)?;
        }
        h = self.final_conv.forward(g, p, h)?;
        h = self.final_gn.forward(g, p, h)?;
        h = g.mish(h);
        h = self.out.forward(g, p, h)?;
        Ok(g.swap_last(h))
    }

    /// `eps_theta(x, k) = psi(phi(x, k), k)`.
    pub fn forward(&self, g: &mut Graph<f32>, p: &Bound, x: Var, steps: &[f64]) -> Result<Var> {
        let enc = self.encode(g, p, x, steps)?;
        self.decode(g, p, &enc)
    }

    /// Convenience inference pass without gradients.
    pub fn predict(
        &self,
        params: &ParamSet<f32>,
        x: &Array3<f32>,
        steps: &[f64],
    ) -> Result<Array3<f32>> {
        let mut g = Graph::new();
        let p = params.bind_frozen(&mut g);
        let xv = g.constant(x.clone().into_dyn());
        let y = self.forward(&mut g, &p, xv, steps)?;
        Ok(to3(g.value(y)))
    }

    /// Latents `[B, d_z]` without gradients.
    pub fn embed(
        &self,
        params: &ParamSet<f32>,
        x: &Array3<f32>,
        steps: &[f64],
    ) -> Result<ndarray::Array2<f32>> {
        let mut g = Graph::new();
        let p = params.bind_frozen(&mut g);
        let xv = g.constant(x.clone().into_dyn());
        let enc = self.encode(&mut g, &p, xv, steps)?;
        Ok(g.value(enc.z)
            .clone()
            .into_dimensionality()
            .expect("z is 2-D"))
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        let mut out = self.time.specs();
        for lvl in &self.downs {
            out.extend(lvl.res1.specs());
            out.extend(lvl.res2.specs());
            if let Some(d) = &lvl.down {
                out.push(LayerSpec::Downsample {
                    name: d.name.clone(),
                    channels: d.output,
                });
                out.push(d.spec());
            }
        }
        out.extend(self.mid1.specs());
        out.push(self.to_z.spec());
        out.push(self.from_z.spec());
        out.extend(self.mid2.specs());
        for lvl in &self.ups {
            out.extend(lvl.res1.specs());
            out.extend(lvl.res2.specs());
            out.push(LayerSpec::Upsample {
                name: lvl.up.name.clone(),
                channels: lvl.up.output,
            });
            out.push(lvl.up.spec());
        }
        out.push(self.final_conv.spec());
        out.push(self.final_gn.spec());
        out.push(LayerSpec::Activation {
            act: Activation::Mish,
        });
        out.push(self.out.spec());
        out
    }
}

fn to3(a: &ArrayD<f32>) -> Array3<f32> {
    a.clone().into_dimensionality().expect("3-D tensor")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net(horizon: usize, d: usize) -> (TemporalUNet, ParamSet<f32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamSet::new();
        let cfg = UNetConfig {
            horizon,
            transition_dim: d,
            base_dim: 8,
            dim_mults: vec![1, 2, 4, 8],
            d_z: 5,
        };
        let u = TemporalUNet::new(&mut ps, cfg, &mut rng).unwrap();
        (u, ps)
    }

    #[test]
    fn output_shape_matches_input_for_every_step() {
        for h in [1usize, 4, 6, 8, 32] {
            let (u, ps) = net(h, 3);
            let x = Array3::from_shape_fn((2, h, 3), |(b, t, j)| (b + t + j) as f32 * 0.1);
            for k in [0.0, 1.0, 20.0] {
                let y = u.predict(&ps, &x, &[k, k]).unwrap();
                assert_eq!(y.shape(), x.shape());
                let z = u.embed(&ps, &x, &[k, k]).unwrap();
                assert_eq!(z.shape(), &[2, 5]);
            }
        }
    }

    #[test]
    fn levels_shrink_for_indivisible_horizons() {
        let (u, _) = net(32, 3);
        assert_eq!(u.levels(), 4);
        let (u, _) = net(6, 3);
        assert_eq!(u.levels(), 2);
        let (u, _) = net(1, 3);
        assert_eq!(u.levels(), 1);
    }

    #[test]
    fn wrong_input_shape_is_reported() {
        let (u, ps) = net(8, 3);
        let x = Array3::zeros((1, 8, 4));
        let err = u.predict(&ps, &x, &[0.0]).unwrap_err();
        assert!(err.to_string().contains("unet.input"), "{err}");
    }

    #[test]
    fn decoder_depends_on_latent() {
        let (u, ps) = net(8, 2);
        let x = Array3::from_shape_fn((1, 8, 2), |(_, t, j)| {
            (t as f32 - 3.0) * (j as f32 + 1.0) * 0.2
        });
        let mut g = Graph::new();
        let p = ps.bind(&mut g);
        let xv = g.constant(x.into_dyn());
        let enc = u.encode(&mut g, &p, xv, &[3.0]).unwrap();
        let y = u.decode(&mut g, &p, &enc).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        let gz = grads.wrt(enc.z).unwrap();
        assert!(gz.iter().any(|v| v.abs() > 0.0));
    }
}
