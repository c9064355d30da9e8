//! Toy U-Net noise estimator with sinusoidal time conditioning, and extraction
//! of per-pixel features from its decoder activations.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::checkpoint::Checkpoint;
use crate::diffusion::{NoiseSchedule, ScheduleConfig};
use crate::error::{shape_err, Error, Result};
use crate::optim::ParamSet;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub image_size: usize,
    pub channels: usize,
    pub base_width: usize,
    /// Width multiplier per resolution stage; its length is the U-Net depth.
    pub channel_mult: Vec<usize>,
    /// Decoder blocks (in execution order, deepest first) that feed pixel features.
    pub decoder_block_ids: Vec<usize>,
    pub time_embed_dim: usize,
    pub groups: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            image_size: 32,
            channels: 3,
            base_width: 16,
            channel_mult: vec![1, 2, 4],
            decoder_block_ids: vec![0, 1, 2],
            time_embed_dim: 64,
            groups: 8,
        }
    }
}

impl UNetConfig {
    pub fn depth(&self) -> usize {
        self.channel_mult.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.depth() == 0 || self.base_width == 0 || self.channels == 0 {
            return bad("U-Net needs depth, width and channels >= 1".into());
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(1 << self.depth()) {
            return bad(format!(
                "image_size {} not divisible by 2^{}",
                self.image_size,
                self.depth()
            ));
        }
        if let Some(&b) = self.decoder_block_ids.iter().find(|&&b| b >= self.depth()) {
            return bad(format!("decoder block {b} out of {}", self.depth()));
        }
        if self.time_embed_dim == 0 || !self.time_embed_dim.is_multiple_of(2) {
            return bad("time_embed_dim must be even".into());
        }
        Ok(())
    }

    fn stage_width(&self, level: usize) -> usize {
        self.base_width * self.channel_mult[level]
    }

    /// `(channels, resolution)` of decoder block `k` (execution order).
    pub fn decoder_block(&self, k: usize) -> (usize, usize) {
        let level = self.depth() - 1 - k;
        (self.stage_width(level), self.image_size >> level)
    }

    /// Per-pixel feature dimension `d`.
    pub fn feature_dim(&self) -> usize {
        self.decoder_block_ids
            .iter()
            .map(|&k| self.decoder_block(k).0)
            .sum()
    }

    fn groups_for(&self, c: usize) -> usize {
        let mut g = self.groups.min(c).max(1);
        while !c.is_multiple_of(g) {
            g -= 1;
        }
        g
    }
}

#[derive(Clone, Debug)]
pub struct UNet {
    pub cfg: UNetConfig,
    pub params: ParamSet,
}

/// Forward results: the noise estimate plus every decoder block's activation.
pub struct UNetOutput {
    pub eps: Var,
    pub decoder: Vec<Var>,
    /// Graph leaves holding each parameter, by name.
    pub params: Vec<(String, Var)>,
}

struct Binder<'a> {
    params: &'a ParamSet,
    vars: HashMap<&'a str, Var>,
    requires_grad: bool,
}

impl<'a> Binder<'a> {
    fn get(&mut self, g: &mut Graph, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let (key, t) = self
            .params
            .get_key_value(name)
            .ok_or_else(|| Error::Missing(format!("parameter {name}")))?;
        let v = g.leaf_shared(Arc::clone(t), self.requires_grad);
        self.vars.insert(key.as_str(), v);
        Ok(v)
    }
}

fn init_param<R: Rng + ?Sized>(
    params: &mut ParamSet,
    name: String,
    shape: &[usize],
    std: f64,
    rng: &mut R,
) {
    let t = if std == 0.0 {
        Tensor::zeros(shape.to_vec())
    } else {
        let normal = Normal::new(0.0, std).expect("finite std");
        Tensor::from_fn(shape.to_vec(), |_| normal.sample(rng))
    };
    params.insert(name, Arc::new(t));
}

fn init_conv<R: Rng + ?Sized>(
    p: &mut ParamSet,
    name: &str,
    cout: usize,
    cin: usize,
    k: usize,
    gain: f64,
    rng: &mut R,
) {
    let std = gain / ((cin * k * k) as f64).sqrt();
    init_param(p, format!("{name}.w"), &[cout, cin, k, k], std, rng);
    init_param(p, format!("{name}.b"), &[cout], 0.0, rng);
}

fn init_linear<R: Rng + ?Sized>(
    p: &mut ParamSet,
    name: &str,
    din: usize,
    dout: usize,
    rng: &mut R,
) {
    init_param(
        p,
        format!("{name}.w"),
        &[din, dout],
        1.0 / (din as f64).sqrt(),
        rng,
    );
    init_param(p, format!("{name}.b"), &[dout], 0.0, rng);
}

fn init_norm(p: &mut ParamSet, name: &str, c: usize) {
    p.insert(format!("{name}.g"), Arc::new(Tensor::full([c], 1.0)));
    p.insert(format!("{name}.b"), Arc::new(Tensor::zeros([c])));
}

fn init_resblock<R: Rng + ?Sized>(
    p: &mut ParamSet,
    name: &str,
    cin: usize,
    cout: usize,
    temb: usize,
    rng: &mut R,
) {
    init_norm(p, &format!("{name}.gn1"), cin);
    init_conv(p, &format!("{name}.conv1"), cout, cin, 3, 1.0, rng);
    init_linear(p, &format!("{name}.temb"), temb, cout, rng);
    init_norm(p, &format!("{name}.gn2"), cout);
    init_conv(p, &format!("{name}.conv2"), cout, cout, 3, 0.5, rng);
    if cin != cout {
        init_conv(p, &format!("{name}.skip"), cout, cin, 1, 1.0, rng);
    }
}

impl UNet {
    pub fn new<R: Rng + ?Sized>(cfg: UNetConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut p = ParamSet::new();
        let temb = cfg.time_embed_dim;
        init_linear(&mut p, "time.l1", temb, temb, rng);
        init_linear(&mut p, "time.l2", temb, temb, rng);
        let c0 = cfg.stage_width(0);
        init_conv(&mut p, "stem", c0, cfg.channels, 3, 1.0, rng);
        let mut cur = c0;
        for level in 0..cfg.depth() {
            let c = cfg.stage_width(level);
            init_resblock(&mut p, &format!("enc{level}"), cur, c, temb, rng);
            init_conv(&mut p, &format!("down{level}"), c, c, 3, 1.0, rng);
            cur = c;
        }
        init_resblock(&mut p, "mid", cur, cur, temb, rng);
        for k in 0..cfg.depth() {
            let level = cfg.depth() - 1 - k;
            let c = cfg.stage_width(level);
            init_resblock(&mut p, &format!("dec{k}"), cur + c, c, temb, rng);
            cur = c;
        }
        init_norm(&mut p, "out.gn", cur);
        init_conv(&mut p, "out.conv", cfg.channels, cur, 3, 0.1, rng);
        Ok(UNet { cfg, params: p })
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    /// Runs the network on `x: [N, C, S, S]` at per-sample timesteps `ts`.
    /// Parameters are attached as leaves that require gradients only when
    /// `train` is set.
    pub fn forward(&self, g: &mut Graph, x: Var, ts: &[usize], train: bool) -> Result<UNetOutput> {
        let cfg = &self.cfg;
        let s = g.shape(x).to_vec();
        if s.len() != 4
            || s[1] != cfg.channels
            || s[2] != cfg.image_size
            || s[3] != cfg.image_size
            || s[0] != ts.len()
        {
            return shape_err(
                "unet_forward",
                format!("input {s:?} with {} timesteps for config {cfg:?}", ts.len()),
            );
        }
        let mut b = Binder {
            params: &self.params,
            vars: HashMap::new(),
            requires_grad: train,
        };
        let tf: Vec<f64> = ts.iter().map(|&t| t as f64).collect();
        let e = g.embed_time(&tf, cfg.time_embed_dim)?;
        let e = self.linear(g, &mut b, "time.l1", e)?;
        let e = g.silu(e)?;
        let temb = self.linear(g, &mut b, "time.l2", e)?;
        let temb_act = g.silu(temb)?;

        let mut h = self.conv(g, &mut b, "stem", x, 1, 1)?;
        let mut skips = Vec::with_capacity(cfg.depth());
        for level in 0..cfg.depth() {
            h = self.resblock(g, &mut b, &format!("enc{level}"), h, temb_act)?;
            skips.push(h);
            h = self.conv(g, &mut b, &format!("down{level}"), h, 2, 1)?;
        }
        h = self.resblock(g, &mut b, "mid", h, temb_act)?;
        let mut decoder = Vec::with_capacity(cfg.depth());
        for k in 0..cfg.depth() {
            let skip = skips.pop().expect("one skip per level");
            let target = g.shape(skip)[2];
            let up = g.upsample_bilinear(h, target, target)?;
            let cat = g.concat(&[up, skip])?;
            h = self.resblock(g, &mut b, &format!("dec{k}"), cat, temb_act)?;
            decoder.push(h);
        }
        let o = self.norm(g, &mut b, "out.gn", h)?;
        let o = g.silu(o)?;
        let eps = self.conv(g, &mut b, "out.conv", o, 1, 1)?;
        let mut params: Vec<(String, Var)> = b
            .vars
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        params.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(UNetOutput {
            eps,
            decoder,
            params,
        })
    }

    fn linear(&self, g: &mut Graph, b: &mut Binder, name: &str, x: Var) -> Result<Var> {
        let w = b.get(g, &format!("{name}.w"))?;
        let bias = b.get(g, &format!("{name}.b"))?;
        let y = g.matmul(x, w)?;
        g.add_bias(y, bias)
    }

    fn conv(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        name: &str,
        x: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let w = b.get(g, &format!("{name}.w"))?;
        let bias = b.get(g, &format!("{name}.b"))?;
        g.conv2d(x, w, Some(bias), stride, pad)
    }

    fn norm(&self, g: &mut Graph, b: &mut Binder, name: &str, x: Var) -> Result<Var> {
        let gamma = b.get(g, &format!("{name}.g"))?;
        let beta = b.get(g, &format!("{name}.b"))?;
        let groups = self.cfg.groups_for(g.shape(x)[1]);
        g.group_norm(x, gamma, beta, groups)
    }

    fn resblock(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        name: &str,
        x: Var,
        temb: Var,
    ) -> Result<Var> {
        let h = self.norm(g, b, &format!("{name}.gn1"), x)?;
        let h = g.silu(h)?;
        let h = self.conv(g, b, &format!("{name}.conv1"), h, 1, 1)?;
        let t = self.linear(g, b, &format!("{name}.temb"), temb)?;
        let h = g.add_channel(h, t)?;
        let h = self.norm(g, b, &format!("{name}.gn2"), h)?;
        let h = g.silu(h)?;
        let h = self.conv(g, b, &format!("{name}.conv2"), h, 1, 1)?;
        let skip = if self.params.contains_key(&format!("{name}.skip.w")) {
            self.conv(g, b, &format!("{name}.skip"), x, 1, 0)?
        } else {
            x
        };
        g.add(h, skip)
    }

    /// Noise estimate for a batch without recording gradients.
    pub fn predict_eps(&self, x: &Tensor, ts: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, xv, ts, false)?;
        Ok(g.value(out.eps).clone())
    }

    /// Noise estimate and pixel features in one pass, without gradients.
    pub fn predict_with_features(&self, x: &Tensor, t: usize) -> Result<(Tensor, FeatureMap)> {
        let n = x.shape().first().copied().unwrap_or(0);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, xv, &vec![t; n], false)?;
        let f = extract_pixel_features(&mut g, &out.decoder, &self.cfg)?;
        Ok((
            g.value(out.eps).clone(),
            FeatureMap::new(g.value(f).clone())?,
        ))
    }
}

/// Upsamples each selected decoder activation to full resolution (bilinear,
/// corner-aligned) and concatenates them along the channel axis, giving
/// `[N, d, S, S]`. The result stays on the graph.
pub fn extract_pixel_features(g: &mut Graph, decoder: &[Var], cfg: &UNetConfig) -> Result<Var> {
    let mut parts = Vec::with_capacity(cfg.decoder_block_ids.len());
    for &k in &cfg.decoder_block_ids {
        let a = *decoder
            .get(k)
            .ok_or_else(|| Error::Missing(format!("decoder block {k}")))?;
        let s = g.shape(a);
        let up = if s[2] == cfg.image_size && s[3] == cfg.image_size {
            a
        } else {
            g.upsample_bilinear(a, cfg.image_size, cfg.image_size)?
        };
        parts.push(up);
    }
    if parts.len() == 1 {
        return Ok(parts[0]);
    }
    g.concat(&parts)
}

/// Per-pixel feature vectors of a batch of images, `[N, d, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    values: Tensor,
}

impl FeatureMap {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 4 {
            return shape_err("FeatureMap", format!("{:?}", values.shape()));
        }
        Ok(FeatureMap { values })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[3]
    }

    /// Features of image `n` as rows `[H·W, d]` in raster order.
    pub fn pixel_rows(&self, n: usize) -> Tensor {
        let (d, hw) = (self.dim(), self.height() * self.width());
        let base = n * d * hw;
        let src = self.values.data();
        let mut out = vec![0.0; hw * d];
        for c in 0..d {
            for p in 0..hw {
                out[p * d + c] = src[base + c * hw + p];
            }
        }
        Tensor::new([hw, d], out).expect("sized above")
    }

    /// Concatenates maps channel-wise (for multi-timestep features).
    pub fn concat(maps: &[FeatureMap]) -> Result<FeatureMap> {
        let mut g = Graph::new();
        let vars: Vec<Var> = maps.iter().map(|m| g.constant(m.values.clone())).collect();
        let c = g.concat(&vars)?;
        FeatureMap::new(g.value(c).clone())
    }
}

/// A trained noise estimator bundled with its schedule.
#[derive(Clone, Debug)]
pub struct DiffusionModel {
    pub net: UNet,
    pub sched: NoiseSchedule,
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    kind: String,
    unet: UNetConfig,
    schedule: ScheduleConfig,
}

impl DiffusionModel {
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let meta = ModelMeta {
            kind: "diffusion_model".into(),
            unet: self.net.cfg.clone(),
            schedule: self.sched.config(),
        };
        let mut ck = Checkpoint::new(serde_json::to_value(meta)?);
        for (k, v) in &self.net.params {
            ck.insert(format!("unet/{k}"), (**v).clone());
        }
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta: ModelMeta = serde_json::from_value(ck.meta.clone())?;
        if meta.kind != "diffusion_model" {
            return Err(Error::Format(format!(
                "expected diffusion_model, got {}",
                meta.kind
            )));
        }
        meta.unet.validate()?;
        let params = ck
            .section("unet/")
            .into_iter()
            .map(|(k, v)| (k, Arc::new(v)))
            .collect();
        Ok(DiffusionModel {
            net: UNet {
                cfg: meta.unet,
                params,
            },
            sched: meta.schedule.build()?,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::sinusoidal_embedding;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_cfg() -> UNetConfig {
        UNetConfig {
            image_size: 8,
            channels: 3,
            base_width: 4,
            channel_mult: vec![1, 2],
            decoder_block_ids: vec![0, 1],
            time_embed_dim: 8,
            groups: 2,
        }
    }

    #[test]
    fn output_shape_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = UNet::new(tiny_cfg(), &mut rng).unwrap();
        let x = Tensor::randn([2, 3, 8, 8], &mut rng);
        let a = net.predict_eps(&x, &[3, 40]).unwrap();
        let b = net.predict_eps(&x, &[3, 40]).unwrap();
        assert_eq!(a.shape(), x.shape());
        assert_eq!(a, b);
        assert!(net.predict_eps(&x, &[3]).is_err());
        assert!(net.predict_eps(&Tensor::zeros([1, 3, 4, 4]), &[1]).is_err());
    }

    #[test]
    fn grad_flag_does_not_change_forward_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = UNet::new(tiny_cfg(), &mut rng).unwrap();
        let x = Tensor::randn([1, 3, 8, 8], &mut rng);
        let run = |train: bool, xgrad: bool| {
            let mut g = Graph::new();
            let xv = if xgrad {
                g.variable(x.clone())
            } else {
                g.constant(x.clone())
            };
            let out = net.forward(&mut g, xv, &[17], train).unwrap();
            let f = extract_pixel_features(&mut g, &out.decoder, &net.cfg).unwrap();
            (g.value(out.eps).clone(), g.value(f).clone())
        };
        let base = run(false, false);
        assert_eq!(base, run(true, false));
        assert_eq!(base, run(false, true));
    }

    #[test]
    fn config_validation() {
        let mut c = tiny_cfg();
        c.image_size = 6;
        assert!(c.validate().is_err());
        let mut c = tiny_cfg();
        c.decoder_block_ids = vec![2];
        assert!(c.validate().is_err());
        assert_eq!(UNetConfig::default().feature_dim(), 64 + 32 + 16);
    }

    #[test]
    fn feature_dim_and_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = UNet::new(tiny_cfg(), &mut rng).unwrap();
        let x = Tensor::randn([1, 3, 8, 8], &mut rng);
        let (_, f) = net.predict_with_features(&x, 5).unwrap();
        assert_eq!(f.dim(), net.cfg.feature_dim());
        assert_eq!(f.dim(), 8 + 4);
        assert_eq!((f.height(), f.width()), (8, 8));
        let rows = f.pixel_rows(0);
        assert_eq!(rows.shape(), &[64, 12]);
        assert_eq!(rows.data()[3 * 12 + 7], f.values().data()[7 * 64 + 3]);
    }

    #[test]
    fn full_resolution_block_passes_through_verbatim() {
        let cfg = UNetConfig {
            decoder_block_ids: vec![1],
            ..tiny_cfg()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = UNet::new(cfg, &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::randn([1, 3, 8, 8], &mut rng));
        let out = net.forward(&mut g, x, &[9], false).unwrap();
        let f = extract_pixel_features(&mut g, &out.decoder, &net.cfg).unwrap();
        assert_eq!(g.value(f), g.value(out.decoder[1]));
        let mut bad = net.cfg.clone();
        bad.decoder_block_ids = vec![5];
        assert!(extract_pixel_features(&mut g, &out.decoder, &bad).is_err());
    }

    #[test]
    fn constant_block_gives_constant_features() {
        let cfg = tiny_cfg();
        let mut g = Graph::new();
        let a0 = g.constant(Tensor::full([1, 8, 4, 4], 0.25));
        let a1 = g.constant(Tensor::full([1, 4, 8, 8], -1.5));
        let f = extract_pixel_features(&mut g, &[a0, a1], &cfg).unwrap();
        let v = g.value(f);
        assert!(v.data()[..8 * 64].iter().all(|&x| (x - 0.25).abs() < 1e-15));
        assert!(v.data()[8 * 64..].iter().all(|&x| x == -1.5));
    }

    #[test]
    fn feature_blocks_follow_block_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = UNet::new(tiny_cfg(), &mut rng).unwrap();
        let x = Tensor::randn([1, 3, 8, 8], &mut rng);
        let swapped = UNet {
            cfg: UNetConfig {
                decoder_block_ids: vec![1, 0],
                ..tiny_cfg()
            },
            params: net.params.clone(),
        };
        let (_, a) = net.predict_with_features(&x, 11).unwrap();
        let (_, b) = swapped.predict_with_features(&x, 11).unwrap();
        let hw = 64;
        let (av, bv) = (a.values().data(), b.values().data());
        // a = [block0 (8 ch), block1 (4 ch)], b = [block1 (4 ch), block0 (8 ch)]
        assert_eq!(&av[..8 * hw], &bv[4 * hw..]);
        assert_eq!(&av[8 * hw..], &bv[..4 * hw]);
    }

    #[test]
    fn time_embedding_is_injective_over_default_range() {
        let e =
            sinusoidal_embedding(&(1..=1000).map(|t| t as f64).collect::<Vec<_>>(), 128).unwrap();
        let rows: Vec<&[f64]> = e.data().chunks(128).collect();
        let mut min_dist = f64::INFINITY;
        for i in 0..rows.len() {
            for j in (i + 1)..rows.len() {
                let d: f64 = rows[i]
                    .iter()
                    .zip(rows[j])
                    .map(|(a, b)| (a - b).powi(2))
                    .sum();
                min_dist = min_dist.min(d);
            }
        }
        assert!(min_dist > 1e-6, "closest pair distance {min_dist}");
        let again = sinusoidal_embedding(&[17.0], 128).unwrap();
        assert_eq!(again.data(), rows[16]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = DiffusionModel {
            net: UNet::new(tiny_cfg(), &mut rng).unwrap(),
            sched: ScheduleConfig::linear(50).build().unwrap(),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        model.save(&path).unwrap();
        let back = DiffusionModel::load(&path).unwrap();
        assert_eq!(back.net.cfg, model.net.cfg);
        assert_eq!(back.sched, model.sched);
        let x = Tensor::randn([1, 3, 8, 8], &mut rng);
        assert_eq!(
            back.net.predict_eps(&x, &[7]).unwrap(),
            model.net.predict_eps(&x, &[7]).unwrap()
        );
    }
}
