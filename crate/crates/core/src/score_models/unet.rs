//! Toy convolutional encoder-decoder denoiser with optional instance-masked
//! cross-attention, plus its low-rank adapter.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;

use super::codec::LATENT_CHANNELS;
use super::{Conditioning, Routing, ScoreModel, TrainableScore};
use crate::autodiff::{Graph, Var};
use crate::conditioning::{resample_mask, TOKEN_DIM};
use crate::error::{Error, Result};
use crate::params::{Adam, AdamConfig, ByteReader, ParamSet};
use crate::rng::Stream;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    /// Depth + reference conditioned, masked cross-attention at every level.
    Teacher,
    /// Conditioned on a clean latent by channel concatenation.
    Sr,
}

impl ModelKind {
    fn name(self) -> &'static str {
        match self {
            Self::Teacher => "teacher",
            Self::Sr => "sr",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UNetConfig {
    pub kind: ModelKind,
    pub width: usize,
    pub levels: usize,
    pub time_dim: usize,
    pub key_dim: usize,
    /// Divide the attention sum by `sum_i m_i` instead of `N`.
    pub mask_normalize: bool,
}

impl UNetConfig {
    pub fn teacher() -> Self {
        Self {
            kind: ModelKind::Teacher,
            width: 32,
            levels: 3,
            time_dim: 32,
            key_dim: 32,
            mask_normalize: true,
        }
    }

    pub fn sr() -> Self {
        Self {
            kind: ModelKind::Sr,
            ..Self::teacher()
        }
    }

    fn extra_channels(&self) -> usize {
        match self.kind {
            ModelKind::Teacher => 1,
            ModelKind::Sr => LATENT_CHANNELS,
        }
    }

    fn attention(&self) -> bool {
        self.kind == ModelKind::Teacher
    }

    fn to_text(&self) -> String {
        format!(
            "kind={}\nwidth={}\nlevels={}\ntime_dim={}\nkey_dim={}\nmask_normalize={}\n",
            self.kind.name(),
            self.width,
            self.levels,
            self.time_dim,
            self.key_dim,
            self.mask_normalize as u8
        )
    }

    fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| {
            map.get(k)
                .ok_or_else(|| Error::InvalidArgument(format!("model config missing `{k}`")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("model config `{k}` is not an integer")))
        };
        let kind = match get("kind")?.as_str() {
            "teacher" => ModelKind::Teacher,
            "sr" => ModelKind::Sr,
            other => return Err(Error::InvalidArgument(format!("unknown model kind `{other}`"))),
        };
        Ok(Self {
            kind,
            width: num("width")?,
            levels: num("levels")?,
            time_dim: num("time_dim")?,
            key_dim: num("key_dim")?,
            mask_normalize: num("mask_normalize")? != 0,
        })
    }
}

/// Frozen-after-training denoiser predicting the added noise.
#[derive(Clone, Debug, PartialEq)]
pub struct UNet {
    pub config: UNetConfig,
    pub params: ParamSet,
    pub pretrained: bool,
}

fn uniform(rng: &mut Stream, n: usize, bound: f64) -> Vec<f32> {
    let b = bound as f32;
    (0..n).map(|_| rng.rng().random_range(-b..=b)).collect()
}

fn is_weight(name: &str) -> bool {
    !name.ends_with(".b")
}

/// Sinusoidal timestep features.
pub fn time_features(t: f64, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut v = vec![0.0; dim];
    for k in 0..half {
        let freq = (-(1000f64).ln() * k as f64 / half as f64).exp();
        let arg = 1000.0 * t * freq;
        v[k] = arg.sin();
        v[half + k] = arg.cos();
    }
    Tensor::new(&[1, dim], v).unwrap()
}

impl UNet {
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        if config.levels < 1 || config.width == 0 || config.time_dim < 2 {
            return Err(Error::InvalidArgument(format!("invalid network config {config:?}")));
        }
        let mut rng = Stream::new(seed, 0x756e_6574);
        let mut p = ParamSet::new();
        let w = config.width;
        let mut lin = |p: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, gain: f64| {
            let bound = gain * (3.0 / fan_in as f64).sqrt();
            p.push(format!("{name}.w"), &[fan_in, fan_out], uniform(&mut rng, fan_in * fan_out, bound));
            p.push(format!("{name}.b"), &[fan_out], vec![0.0; fan_out]);
        };
        lin(&mut p, "time.l1", config.time_dim, w, 1.0);
        lin(&mut p, "time.l2", w, w, 1.0);
        let mut rng = Stream::new(seed, 0x636f_6e76);
        let mut conv = |p: &mut ParamSet, name: &str, cin: usize, cout: usize, gain: f64| {
            let fan_in = cin * 9;
            let bound = gain * (3.0 / fan_in as f64).sqrt();
            p.push(format!("{name}.w"), &[cout, fan_in], uniform(&mut rng, cout * fan_in, bound));
            p.push(format!("{name}.b"), &[cout], vec![0.0; cout]);
        };
        conv(&mut p, "in", LATENT_CHANNELS + config.extra_channels(), w, 1.0);
        for l in 0..config.levels {
            conv(&mut p, &format!("d{l}.c1"), w, w, 1.0);
            conv(&mut p, &format!("d{l}.c2"), w, w, 0.1);
        }
        for l in (0..config.levels - 1).rev() {
            conv(&mut p, &format!("u{l}"), 2 * w, w, 1.0);
        }
        conv(&mut p, "out", w, LATENT_CHANNELS, 0.1);
        let mut rng = Stream::new(seed, 0x6174_746e);
        for l in 0..config.levels {
            let bound = (3.0 / w as f64).sqrt();
            p.push(format!("d{l}.t.w"), &[w, w], uniform(&mut rng, w * w, bound));
            p.push(format!("d{l}.t.b"), &[w], vec![0.0; w]);
            if config.attention() {
                let dk = config.key_dim;
                let tb = (3.0 / TOKEN_DIM as f64).sqrt();
                p.push(format!("a{l}.q.w"), &[w, dk], uniform(&mut rng, w * dk, bound));
                p.push(format!("a{l}.k.w"), &[TOKEN_DIM, dk], uniform(&mut rng, TOKEN_DIM * dk, tb));
                p.push(format!("a{l}.v.w"), &[TOKEN_DIM, w], uniform(&mut rng, TOKEN_DIM * w, tb));
                p.push(format!("a{l}.o.w"), &[w, w], uniform(&mut rng, w * w, 0.1 * bound));
            }
        }
        Ok(Self {
            config,
            params: p,
            pretrained: false,
        })
    }

    pub fn checksum(&self) -> u64 {
        self.params.checksum()
    }

    fn check_inputs(&self, x_t: &Tensor, cond: &Conditioning) -> Result<()> {
        let shape = x_t.shape();
        let div = 1 << (self.config.levels - 1);
        if shape.len() != 3 || shape[0] != LATENT_CHANNELS || shape[1] % div != 0 || shape[2] % div != 0 {
            return Err(Error::Shape(format!(
                "noised latent must be [4, h, w] with h, w divisible by {div}, got {shape:?}"
            )));
        }
        let (h, w) = (shape[1], shape[2]);
        match self.config.kind {
            ModelKind::Teacher => {
                match &cond.depth {
                    Some(d) if d.shape() == [1, h, w] => {}
                    Some(d) => return Err(Error::Shape(format!("depth {:?} for latent {h}x{w}", d.shape()))),
                    None => return Err(Error::InvalidArgument("teacher requires a depth map".into())),
                }
                if cond.tokens.len() != cond.masks.len() {
                    return Err(Error::Shape(format!(
                        "{} reference token sets for {} masks",
                        cond.tokens.len(),
                        cond.masks.len()
                    )));
                }
                for m in &cond.masks {
                    if (m.width, m.height) != (w, h) {
                        return Err(Error::Shape(format!("mask {}x{} for latent {w}x{h}", m.width, m.height)));
                    }
                }
                for t in &cond.tokens {
                    if t.shape().len() != 2 || t.shape()[1] != TOKEN_DIM {
                        return Err(Error::Shape(format!("tokens {:?}, expected K x {TOKEN_DIM}", t.shape())));
                    }
                }
            }
            ModelKind::Sr => match &cond.cond_latent {
                Some(c) if c.shape() == shape => {}
                Some(c) => return Err(Error::Shape(format!("SR condition {:?} for latent {shape:?}", c.shape()))),
                None => return Err(Error::InvalidArgument("SR model requires a conditioning latent".into())),
            },
        }
        Ok(())
    }

    /// Bind every parameter block into the graph and return one effective
    /// weight per block (base plus low-rank delta where an adapter is given).
    fn bind(
        &self,
        g: &mut Graph,
        train_base: bool,
        lora: Option<(&Lora, bool)>,
    ) -> (Vec<Var>, Vec<Var>, Vec<Var>) {
        let mut base = Vec::with_capacity(self.params.blocks().len());
        let mut eff = Vec::with_capacity(base.capacity());
        let mut lora_vars = Vec::new();
        for i in 0..self.params.blocks().len() {
            let t = self.params.tensor(i);
            let v = if train_base { g.param(t) } else { g.constant(t) };
            base.push(v);
            eff.push(v);
        }
        if let Some((lora, train)) = lora {
            for (k, &target) in lora.targets.iter().enumerate() {
                let up = lora.params.tensor(2 * k);
                let down = lora.params.tensor(2 * k + 1);
                if !train && up.data().iter().all(|&v| v == 0.0) {
                    continue;
                }
                let (u, d) = if train {
                    (g.param(up), g.param(down))
                } else {
                    (g.constant(up), g.constant(down))
                };
                lora_vars.push(u);
                lora_vars.push(d);
                let delta = g.matmul(u, d);
                eff[target] = g.add(base[target], delta);
            }
        }
        (base, eff, lora_vars)
    }

    fn w(&self, eff: &[Var], name: &str) -> Var {
        eff[self.params.find(name).unwrap_or_else(|| panic!("missing block {name}"))]
    }

    fn conv(&self, g: &mut Graph, eff: &[Var], x: Var, name: &str) -> Var {
        let y = g.conv(x, self.w(eff, &format!("{name}.w")), 3);
        g.add_lead_bias(y, self.w(eff, &format!("{name}.b")))
    }

    fn linear(&self, g: &mut Graph, eff: &[Var], x: Var, name: &str) -> Var {
        let y = g.matmul(x, self.w(eff, &format!("{name}.w")));
        g.add_trail_bias(y, self.w(eff, &format!("{name}.b")))
    }

    /// Forward pass into `g`; returns the predicted noise.
    fn build(&self, g: &mut Graph, eff: &[Var], x_t: &Tensor, t: f64, cond: &Conditioning) -> Var {
        if self.config.attention() && cond.routing == Routing::NoiseLevel && !cond.tokens.is_empty() {
            let (_, h, w) = x_t.chw();
            let n = cond.tokens.len();
            let ones = crate::raster::Mask::full(w, h, 1.0);
            let mut acc: Option<Var> = None;
            for i in 0..n {
                let single = Conditioning {
                    depth: cond.depth.clone(),
                    tokens: vec![cond.tokens[i].clone()],
                    masks: vec![ones.clone()],
                    cond_latent: None,
                    routing: Routing::FeatureMask,
                };
                let e = self.build_single(g, eff, x_t, t, &single);
                let m = g.constant(Tensor::new(&[h * w], cond.masks[i].data.clone()).unwrap());
                let flat = g.reshape(e, &[LATENT_CHANNELS, h * w]);
                let rows = g.transpose(flat);
                let masked = g.mul_rows(rows, m);
                let back = g.transpose(masked);
                acc = Some(match acc {
                    Some(a) => g.add(a, back),
                    None => back,
                });
            }
            let sum = g.scale(acc.unwrap(), 1.0 / n as f64);
            return g.reshape(sum, &[LATENT_CHANNELS, h, w]);
        }
        self.build_single(g, eff, x_t, t, cond)
    }

    fn build_single(&self, g: &mut Graph, eff: &[Var], x_t: &Tensor, t: f64, cond: &Conditioning) -> Var {
        let cfg = &self.config;
        let (_, h, w) = x_t.chw();
        let tf = g.constant(time_features(t, cfg.time_dim));
        let e = self.linear(g, eff, tf, "time.l1");
        let e = g.silu(e);
        let temb = self.linear(g, eff, e, "time.l2");
        let temb = g.silu(temb);

        let extra = match cfg.kind {
            ModelKind::Teacher => cond.depth.clone().unwrap(),
            ModelKind::Sr => cond.cond_latent.clone().unwrap(),
        };
        let mut input = x_t.data().to_vec();
        input.extend_from_slice(extra.data());
        let c_in = LATENT_CHANNELS + cfg.extra_channels();
        let x = g.constant(Tensor::new(&[c_in, h, w], input).unwrap());
        let mut hcur = self.conv(g, eff, x, "in");

        let mut skips = Vec::with_capacity(cfg.levels);
        for l in 0..cfg.levels {
            if l > 0 {
                hcur = g.avg_pool2(hcur);
            }
            hcur = self.res_block(g, eff, hcur, temb, l);
            if cfg.attention() && !cond.tokens.is_empty() {
                hcur = self.attention(g, eff, hcur, cond, l);
            }
            skips.push(hcur);
        }
        for l in (0..cfg.levels - 1).rev() {
            let up = g.upsample2(hcur);
            let cat = g.concat(up, skips[l]);
            let merged = self.conv(g, eff, cat, &format!("u{l}"));
            hcur = g.silu(merged);
        }
        self.conv(g, eff, hcur, "out")
    }

    fn res_block(&self, g: &mut Graph, eff: &[Var], x: Var, temb: Var, l: usize) -> Var {
        let a = g.silu(x);
        let r = self.conv(g, eff, a, &format!("d{l}.c1"));
        let tb = self.linear(g, eff, temb, &format!("d{l}.t"));
        let width = self.config.width;
        let tb = g.reshape(tb, &[width]);
        let r = g.add_lead_bias(r, tb);
        let r = g.silu(r);
        let r = self.conv(g, eff, r, &format!("d{l}.c2"));
        g.add(x, r)
    }

    fn attention(&self, g: &mut Graph, eff: &[Var], x: Var, cond: &Conditioning, l: usize) -> Var {
        let (c, h, w) = g.value(x).chw();
        let s = h * w;
        let flat = g.reshape(x, &[c, s]);
        let z = g.transpose(flat);
        let q = g.matmul(z, self.w(eff, &format!("a{l}.q.w")));
        let wk = self.w(eff, &format!("a{l}.k.w"));
        let wv = self.w(eff, &format!("a{l}.v.w"));
        let scale = 1.0 / (self.config.key_dim as f64).sqrt();
        let n = cond.tokens.len();
        let masks: Vec<Vec<f64>> = cond
            .masks
            .iter()
            .map(|m| resample_mask(m, w, h).mask.data)
            .collect();
        let mut acc: Option<Var> = None;
        for (tok, m) in cond.tokens.iter().zip(&masks) {
            let f = g.constant(tok.clone());
            let k = g.matmul(f, wk);
            let v = g.matmul(f, wv);
            let kt = g.transpose(k);
            let logits = g.matmul(q, kt);
            let logits = g.scale(logits, scale);
            let a = g.softmax_rows(logits);
            let o = g.matmul(a, v);
            let mv = g.constant(Tensor::new(&[s], m.clone()).unwrap());
            let o = g.mul_rows(o, mv);
            acc = Some(match acc {
                Some(prev) => g.add(prev, o),
                None => o,
            });
        }
        let acc = acc.unwrap();
        let zc = if self.config.mask_normalize {
            let inv: Vec<f64> = (0..s)
                .map(|p| {
                    let total: f64 = masks.iter().map(|m| m[p]).sum();
                    if total > 0.0 { 1.0 / total } else { 0.0 }
                })
                .collect();
            let inv = g.constant(Tensor::new(&[s], inv).unwrap());
            g.mul_rows(acc, inv)
        } else {
            g.scale(acc, 1.0 / n as f64)
        };
        let o = g.matmul(zc, self.w(eff, &format!("a{l}.o.w")));
        let back = g.transpose(o);
        let back = g.reshape(back, &[c, h, w]);
        g.add(x, back)
    }

    /// Forward pass regardless of training status.
    pub fn predict_raw(&self, x_t: &Tensor, t: f64, cond: &Conditioning, lora: Option<&Lora>) -> Result<Tensor> {
        self.check_inputs(x_t, cond)?;
        let mut g = Graph::new();
        let (_, eff, _) = self.bind(&mut g, false, lora.map(|l| (l, false)));
        let out = self.build(&mut g, &eff, x_t, t, cond);
        Ok(g.value(out).clone())
    }

    /// Mean squared denoising error and its gradient with respect to the base
    /// weights.
    pub fn loss_and_grad(&self, x_t: &Tensor, t: f64, eps: &Tensor, cond: &Conditioning) -> Result<(f64, Vec<f64>)> {
        self.check_inputs(x_t, cond)?;
        let mut g = Graph::new();
        let (base, eff, _) = self.bind(&mut g, true, None);
        let out = self.build(&mut g, &eff, x_t, t, cond);
        let (loss, grads) = mse_backward(&mut g, out, eps)?;
        let mut flat = Vec::with_capacity(self.params.len());
        for v in base {
            match grads.get(v) {
                Some(t) => flat.extend_from_slice(t.data()),
                None => flat.extend(std::iter::repeat_n(0.0, g.value(v).len())),
            }
        }
        Ok((loss, flat))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let text = format!("{}pretrained={}\n", self.config.to_text(), self.pretrained as u8);
        write_model(&text, &self.params)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (map, blocks) = read_model(bytes)?;
        let config = UNetConfig::from_map(&map)?;
        let mut net = Self::new(config, 0)?;
        fill_params(&mut net.params, blocks)?;
        net.pretrained = map.get("pretrained").map(String::as_str) == Some("1");
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

fn mse_backward(g: &mut Graph, out: Var, eps: &Tensor) -> Result<(f64, crate::autodiff::Gradients)> {
    g.value(out).check_same(eps)?;
    let target = g.constant(eps.clone());
    let diff = g.sub(out, target);
    let ss = g.sum_squares(diff);
    let n = eps.len() as f64;
    let loss = g.value(ss).data()[0] / n;
    let grads = g.backward_with(ss, Tensor::scalar(1.0 / n));
    Ok((loss, grads))
}

impl ScoreModel for UNet {
    fn predict(&self, x_t: &Tensor, t: f64, cond: &Conditioning) -> Result<Tensor> {
        if !self.pretrained {
            return Err(Error::UninitializedTeacher(format!(
                "{} network has not been pretrained",
                self.config.kind.name()
            )));
        }
        self.predict_raw(x_t, t, cond, None)
    }

    fn checksum(&self) -> u64 {
        self.params.checksum()
    }
}

/// Low-rank deltas `up . down` on every weight matrix of a base network;
/// `up` starts at zero so the adapter starts as an exact copy.
#[derive(Clone, Debug, PartialEq)]
pub struct Lora {
    pub rank: usize,
    pub params: ParamSet,
    targets: Vec<usize>,
}

impl Lora {
    pub fn new(base: &UNet, rank: usize, seed: u64) -> Result<Self> {
        if rank == 0 {
            return Err(Error::InvalidArgument("adapter rank must be >= 1".into()));
        }
        let mut rng = Stream::new(seed, 0x6c6f_7261);
        let mut params = ParamSet::new();
        let mut targets = Vec::new();
        for (i, b) in base.params.blocks().iter().enumerate() {
            if !is_weight(&b.name) || b.shape.len() != 2 {
                continue;
            }
            let (rows, cols) = (b.shape[0], b.shape[1]);
            params.push(format!("{}.up", b.name), &[rows, rank], vec![0.0; rows * rank]);
            let bound = 1.0 / (cols as f64).sqrt();
            params.push(format!("{}.down", b.name), &[rank, cols], uniform(&mut rng, rank * cols, bound));
            targets.push(i);
        }
        Ok(Self { rank, params, targets })
    }

    pub fn target_names<'a>(&'a self, base: &'a UNet) -> impl Iterator<Item = &'a str> + 'a {
        self.targets.iter().map(|&i| base.params.block(i).name.as_str())
    }

    pub fn to_bytes(&self, base: &UNet) -> Vec<u8> {
        let text = format!(
            "{}rank={}\nbase_checksum={}\nadapter=1\n",
            base.config.to_text(),
            self.rank,
            base.checksum()
        );
        write_model(&text, &self.params)
    }

    pub fn from_bytes(bytes: &[u8], base: &UNet) -> Result<Self> {
        let (map, blocks) = read_model(bytes)?;
        if map.get("adapter").map(String::as_str) != Some("1") {
            return Err(Error::InvalidArgument("model file is not an adapter".into()));
        }
        if UNetConfig::from_map(&map)? != base.config {
            return Err(Error::InvalidArgument("adapter was built for a different architecture".into()));
        }
        if map.get("base_checksum") != Some(&base.checksum().to_string()) {
            return Err(Error::InvalidArgument("adapter was trained against different base weights".into()));
        }
        let rank = map
            .get("rank")
            .and_then(|r| r.parse().ok())
            .ok_or_else(|| Error::InvalidArgument("adapter rank missing".into()))?;
        let mut lora = Self::new(base, rank, 0)?;
        fill_params(&mut lora.params, blocks)?;
        Ok(lora)
    }
}

/// Trainable copy of a frozen network: shared base weights plus [`Lora`].
#[derive(Clone, Debug)]
pub struct UNetAdapter {
    pub base: Arc<UNet>,
    pub lora: Lora,
    pub adam: Adam,
}

impl UNetAdapter {
    pub fn new(base: Arc<UNet>, rank: usize, lr: f64, seed: u64) -> Result<Self> {
        let lora = Lora::new(&base, rank, seed)?;
        let adam = Adam::new(AdamConfig::with_lr(lr), lora.params.len());
        Ok(Self { base, lora, adam })
    }
}

impl ScoreModel for UNetAdapter {
    fn predict(&self, x_t: &Tensor, t: f64, cond: &Conditioning) -> Result<Tensor> {
        if !self.base.pretrained {
            return Err(Error::UninitializedTeacher("adapter base network has not been pretrained".into()));
        }
        self.base.predict_raw(x_t, t, cond, Some(&self.lora))
    }

    fn checksum(&self) -> u64 {
        self.lora.params.checksum()
    }
}

impl TrainableScore for UNetAdapter {
    fn loss_and_grad(&self, x_t: &Tensor, t: f64, eps: &Tensor, cond: &Conditioning) -> Result<(f64, Vec<f64>)> {
        let base = &self.base;
        base.check_inputs(x_t, cond)?;
        let mut g = Graph::new();
        let (_, eff, lora_vars) = base.bind(&mut g, false, Some((&self.lora, true)));
        let out = base.build(&mut g, &eff, x_t, t, cond);
        let (loss, grads) = mse_backward(&mut g, out, eps)?;
        let mut flat = Vec::with_capacity(self.lora.params.len());
        for v in lora_vars {
            match grads.get(v) {
                Some(t) => flat.extend_from_slice(t.data()),
                None => flat.extend(std::iter::repeat_n(0.0, g.value(v).len())),
            }
        }
        Ok((loss, flat))
    }

    fn apply_gradient(&mut self, grad: &[f64]) {
        self.adam.update(self.lora.params.data_mut(), grad);
    }

    fn params(&self) -> &[f32] {
        self.lora.params.data()
    }

    fn params_mut(&mut self) -> &mut [f32] {
        self.lora.params.data_mut()
    }

    fn optimizer(&self) -> &Adam {
        &self.adam
    }

    fn optimizer_mut(&mut self) -> &mut Adam {
        &mut self.adam
    }

    fn to_bytes(&self) -> Vec<u8> {
        self.lora.to_bytes(&self.base)
    }

    fn load_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        self.lora = Lora::from_bytes(bytes, &self.base)?;
        Ok(())
    }
}

/// `WMDL1`: magic, u32 config length, `key=value` config text, u32 block
/// count, then per block: u32 name length, name, u32 ndim, u32 dims, f32 data.
pub fn write_model(config_text: &str, params: &ParamSet) -> Vec<u8> {
    let mut out = b"WMDL1".to_vec();
    out.extend((config_text.len() as u32).to_le_bytes());
    out.extend(config_text.as_bytes());
    out.extend((params.blocks().len() as u32).to_le_bytes());
    for (i, b) in params.blocks().iter().enumerate() {
        out.extend((b.name.len() as u32).to_le_bytes());
        out.extend(b.name.as_bytes());
        out.extend((b.shape.len() as u32).to_le_bytes());
        for &d in &b.shape {
            out.extend((d as u32).to_le_bytes());
        }
        for v in params.slice(i) {
            out.extend(v.to_le_bytes());
        }
    }
    out
}

type Blocks = Vec<(String, Vec<usize>, Vec<f32>)>;

pub fn read_model(bytes: &[u8]) -> Result<(BTreeMap<String, String>, Blocks)> {
    let mut r = ByteReader::new(bytes);
    r.expect_magic("WMDL1")?;
    let n = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(n)?)
        .map_err(|_| Error::InvalidArgument("model config is not UTF-8".into()))?;
    let mut map = BTreeMap::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("bad model config line `{line}`")))?;
        map.insert(k.to_string(), v.to_string());
    }
    let count = r.u32()? as usize;
    let mut blocks = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8_lossy(r.take(len)?).into_owned();
        let ndim = r.u32()? as usize;
        let dims = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let size = dims.iter().product();
        let data = (0..size).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        blocks.push((name, dims, data));
    }
    r.finish()?;
    Ok((map, blocks))
}

fn fill_params(params: &mut ParamSet, blocks: Blocks) -> Result<()> {
    if blocks.len() != params.blocks().len() {
        return Err(Error::Shape(format!(
            "checkpoint has {} blocks, architecture needs {}",
            blocks.len(),
            params.blocks().len()
        )));
    }
    for (i, (name, dims, data)) in blocks.into_iter().enumerate() {
        let b = params.block(i);
        if b.name != name || b.shape != dims {
            return Err(Error::Shape(format!(
                "checkpoint block {i} is `{name}` {dims:?}, expected `{}` {:?}",
                b.name, b.shape
            )));
        }
        params.slice_mut(i).copy_from_slice(&data);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::Mask;

    fn inputs(seed: u64, n: usize, hw: usize) -> (Tensor, Conditioning) {
        let mut rng = Stream::new(seed, 9);
        let x = Tensor::new(&[4, hw, hw], rng.normals(4 * hw * hw)).unwrap();
        let split: Vec<usize> = (0..hw * hw).map(|_| rng.index(n + 1)).collect();
        let masks = (0..n)
            .map(|i| Mask {
                width: hw,
                height: hw,
                data: split.iter().map(|&v| (v == i) as u8 as f64).collect(),
            })
            .collect();
        let tokens = (0..n)
            .map(|_| Tensor::new(&[16, TOKEN_DIM], rng.normals(16 * TOKEN_DIM)).unwrap())
            .collect();
        let depth = Tensor::new(&[1, hw, hw], (0..hw * hw).map(|_| rng.uniform(0.0, 1.0)).collect()).unwrap();
        (
            x,
            Conditioning {
                depth: Some(depth),
                tokens,
                masks,
                cond_latent: None,
                routing: Routing::FeatureMask,
            },
        )
    }

    fn trained(config: UNetConfig) -> UNet {
        let mut n = UNet::new(config, 3).unwrap();
        n.pretrained = true;
        n
    }

    #[test]
    fn untrained_teacher_refuses_to_predict() {
        let n = UNet::new(UNetConfig::teacher(), 0).unwrap();
        let (x, c) = inputs(1, 2, 8);
        assert!(matches!(n.predict(&x, 0.5, &c), Err(Error::UninitializedTeacher(_))));
    }

    #[test]
    fn zero_delta_adapter_is_the_teacher() {
        let base = Arc::new(trained(UNetConfig::teacher()));
        let ad = UNetAdapter::new(base.clone(), 4, 1e-4, 1).unwrap();
        let (x, c) = inputs(2, 2, 8);
        let a = base.predict(&x, 0.3, &c).unwrap();
        let b = ad.predict(&x, 0.3, &c).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(base.predict(&x, 0.3, &c).unwrap(), a);
    }

    #[test]
    fn nonzero_delta_changes_output() {
        let base = Arc::new(trained(UNetConfig::teacher()));
        let mut ad = UNetAdapter::new(base.clone(), 4, 1e-4, 1).unwrap();
        let i = ad.lora.params.find("in.w.up").unwrap();
        ad.lora.params.slice_mut(i).iter_mut().for_each(|v| *v = 0.05);
        let (x, c) = inputs(3, 2, 8);
        assert_ne!(ad.predict(&x, 0.3, &c).unwrap(), base.predict(&x, 0.3, &c).unwrap());
    }

    #[test]
    fn zero_masks_make_tokens_irrelevant() {
        let net = trained(UNetConfig::teacher());
        let (x, mut c) = inputs(4, 2, 8);
        for m in &mut c.masks {
            m.data.iter_mut().for_each(|v| *v = 0.0);
        }
        let a = net.predict(&x, 0.7, &c).unwrap();
        for t in &mut c.tokens {
            *t = Tensor::zeros(t.shape());
        }
        assert_eq!(a, net.predict(&x, 0.7, &c).unwrap());
    }

    #[test]
    fn adapter_gradient_matches_finite_differences() {
        let base = Arc::new(trained(UNetConfig::teacher()));
        let mut ad = UNetAdapter::new(base, 2, 1e-4, 5).unwrap();
        let mut rng = Stream::new(8, 0);
        for v in ad.lora.params.data_mut() {
            *v += 0.02 * rng.normal() as f32;
        }
        let (x, c) = inputs(6, 2, 8);
        let eps = Tensor::new(&[4, 8, 8], rng.normals(256)).unwrap();
        let (_, g) = ad.loss_and_grad(&x, 0.4, &eps, &c).unwrap();
        let n = ad.lora.params.len();
        for _ in 0..12 {
            let i = rng.index(n);
            let mut p = ad.clone();
            let h = 1e-3f32;
            let orig = p.lora.params.data()[i];
            p.lora.params.data_mut()[i] = orig + h;
            let up = p.lora.params.data()[i] as f64;
            let lp = p.loss_and_grad(&x, 0.4, &eps, &c).unwrap().0;
            p.lora.params.data_mut()[i] = orig - h;
            let down = p.lora.params.data()[i] as f64;
            let lm = p.loss_and_grad(&x, 0.4, &eps, &c).unwrap().0;
            let fd = (lp - lm) / (up - down);
            let err = (fd - g[i]).abs() / g[i].abs().max(1e-6);
            assert!(err < 1e-3 || (fd - g[i]).abs() < 1e-9, "param {i}: fd {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn noise_level_routing_with_one_full_mask_equals_feature_routing() {
        let net = trained(UNetConfig::teacher());
        let (x, mut c) = inputs(7, 1, 8);
        c.masks[0].data.iter_mut().for_each(|v| *v = 1.0);
        let a = net.predict(&x, 0.5, &c).unwrap();
        c.routing = Routing::NoiseLevel;
        let b = net.predict(&x, 0.5, &c).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn checkpoints_round_trip() {
        let net = trained(UNetConfig::teacher());
        let back = UNet::from_bytes(&net.to_bytes()).unwrap();
        assert_eq!(back, net);
        let mut lora = Lora::new(&net, 4, 2).unwrap();
        lora.params.data_mut()[3] = 0.25;
        assert_eq!(Lora::from_bytes(&lora.to_bytes(&net), &net).unwrap(), lora);
        let other = trained(UNetConfig::sr());
        assert!(Lora::from_bytes(&lora.to_bytes(&net), &other).is_err());
        let mut bad = net.to_bytes();
        bad[4] = b'2';
        assert!(matches!(UNet::from_bytes(&bad), Err(Error::Magic { .. })));
    }

    #[test]
    fn sr_model_needs_condition_latent() {
        let net = trained(UNetConfig::sr());
        let (x, mut c) = inputs(9, 0, 8);
        assert!(net.predict(&x, 0.5, &c).is_err());
        c.cond_latent = Some(x.clone());
        assert_eq!(net.predict(&x, 0.5, &c).unwrap().shape(), x.shape());
    }

    #[test]
    #[ignore]
    fn timing_probe() {
        let base = Arc::new(trained(UNetConfig::teacher()));
        let ad = UNetAdapter::new(base.clone(), 4, 1e-4, 1).unwrap();
        let (x, c) = inputs(2, 2, 32);
        let eps = x.clone();
        let t0 = std::time::Instant::now();
        for _ in 0..10 {
            base.predict(&x, 0.3, &c).unwrap();
        }
        eprintln!("teacher forward {:?}", t0.elapsed() / 10);
        let t0 = std::time::Instant::now();
        for _ in 0..10 {
            ad.loss_and_grad(&x, 0.3, &eps, &c).unwrap();
        }
        eprintln!("adapter fwd+bwd {:?}", t0.elapsed() / 10);
        let t0 = std::time::Instant::now();
        for _ in 0..10 {
            base.loss_and_grad(&x, 0.3, &eps, &c).unwrap();
        }
        eprintln!("base fwd+bwd {:?}", t0.elapsed() / 10);
    }
}
