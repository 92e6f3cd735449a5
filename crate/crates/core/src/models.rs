//! The super-resolution network, the blind-spot denoiser, and their
//! training loops.

use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::RngExt;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    activation_backward, leaky_relu, read_checkpoint, relu, rot90, seeded_rng, shift_down, shift_up,
    write_checkpoint, Adam, ConvParams, ConvShape, ParamLayout, Scalar, Tensor,
};
use crate::sampling::{augment_flip, PairSet, PatchPair};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SRConfig {
    pub num_blocks: usize,
    pub num_channels: usize,
    /// `2L + 1`; the pipeline sets it from the context width.
    pub in_channels: usize,
    pub learning_rate: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SRConfig {
    fn default() -> Self {
        Self {
            num_blocks: 16,
            num_channels: 64,
            in_channels: 3,
            learning_rate: 1e-4,
            iterations: 30000,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl SRConfig {
    /// Small network used for single-CPU experiments.
    pub fn desk() -> Self {
        Self { num_blocks: 4, num_channels: 32, learning_rate: 1e-3, iterations: 2000, batch_size: 4, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("num_blocks", self.num_blocks),
            ("num_channels", self.num_channels),
            ("in_channels", self.in_channels),
            ("iterations", self.iterations),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("sr.{name} must be >= 1")));
            }
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config("sr.learning_rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BDNConfig {
    pub num_channels: usize,
    /// Causal convolutions per directional branch.
    pub num_layers: usize,
    pub learning_rate: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for BDNConfig {
    fn default() -> Self {
        Self { num_channels: 32, num_layers: 8, learning_rate: 1e-4, iterations: 10000, batch_size: 16, seed: 0 }
    }
}

impl BDNConfig {
    pub fn desk() -> Self {
        Self { num_channels: 16, num_layers: 5, learning_rate: 1e-3, iterations: 1000, batch_size: 4, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("num_channels", self.num_channels),
            ("num_layers", self.num_layers),
            ("iterations", self.iterations),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("bdn.{name} must be >= 1")));
            }
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config("bdn.learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Same-resolution residual network with a global skip from the centre
/// input channel.
#[derive(Debug, Clone, PartialEq)]
pub struct SrNet {
    pub in_channels: usize,
    pub layout: ParamLayout,
    conv_in: ConvParams,
    blocks: Vec<[ConvParams; 2]>,
    conv_out: ConvParams,
}

pub struct SrCache<T> {
    x: Tensor<T>,
    block_in: Vec<Tensor<T>>,
    block_mid: Vec<Tensor<T>>,
    last: Tensor<T>,
}

impl SrNet {
    pub fn new(cfg: &SRConfig) -> Self {
        let c = cfg.num_channels;
        let mut layout = ParamLayout::default();
        let conv_in = ConvParams::register(&mut layout, "head", ConvShape::same(cfg.in_channels, c, 3));
        let blocks = (0..cfg.num_blocks)
            .map(|b| {
                [
                    ConvParams::register(&mut layout, &format!("block{b}.conv1"), ConvShape::same(c, c, 3)),
                    ConvParams::register(&mut layout, &format!("block{b}.conv2"), ConvShape::same(c, c, 3)),
                ]
            })
            .collect();
        let conv_out = ConvParams::register(&mut layout, "tail", ConvShape::same(c, 1, 3));
        Self { in_channels: cfg.in_channels, layout, conv_in, blocks, conv_out }
    }

    /// Pixels beyond this distance cannot influence an output pixel.
    pub fn receptive_radius(&self) -> usize {
        2 * self.blocks.len() + 2
    }

    /// Fan-in uniform initialisation with a zeroed output convolution.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> Vec<T> {
        let mut p = vec![T::zero(); self.layout.total];
        let mut rng = seeded_rng(seed, 0);
        self.conv_in.init(&mut p, &mut rng);
        for [a, b] in &self.blocks {
            a.init(&mut p, &mut rng);
            b.init(&mut p, &mut rng);
        }
        p
    }

    pub fn forward<T: Scalar>(&self, p: &[T], x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_cached(p, x)?.0)
    }

    pub fn forward_cached<T: Scalar>(&self, p: &[T], x: &Tensor<T>) -> Result<(Tensor<T>, SrCache<T>)> {
        if p.len() != self.layout.total {
            return Err(Error::Shape(format!("SR network needs {} parameters, got {}", self.layout.total, p.len())));
        }
        if x.c != self.in_channels {
            return Err(Error::Shape(format!("SR network expects {} input channels, got {}", self.in_channels, x.c)));
        }
        let mut h = self.conv_in.forward(p, x)?;
        let mut block_in = Vec::with_capacity(self.blocks.len());
        let mut block_mid = Vec::with_capacity(self.blocks.len());
        for [a, b] in &self.blocks {
            let mid = relu(&a.forward(p, &h)?);
            let mut next = b.forward(p, &mid)?;
            next.add_assign(&h);
            block_in.push(h);
            block_mid.push(mid);
            h = next;
        }
        let mut y = self.conv_out.forward(p, &h)?;
        for (o, &c) in y.data.iter_mut().zip(x.channel(self.in_channels / 2)) {
            *o += c;
        }
        Ok((y, SrCache { x: x.clone(), block_in, block_mid, last: h }))
    }

    /// Accumulates parameter gradients for output gradient `dy`.
    pub fn backward<T: Scalar>(&self, p: &[T], cache: &SrCache<T>, dy: &Tensor<T>, grads: &mut [T]) {
        let mut dh = self.conv_out.backward(p, grads, &cache.last, dy, true).unwrap();
        for (i, [a, b]) in self.blocks.iter().enumerate().rev() {
            let mid = &cache.block_mid[i];
            let mut dmid = b.backward(p, grads, mid, &dh, true).unwrap();
            activation_backward(mid, &mut dmid, 0.0);
            let dx = a.backward(p, grads, &cache.block_in[i], &dmid, true).unwrap();
            dh.add_assign(&dx);
        }
        self.conv_in.backward(p, grads, &cache.x, &dh, false);
    }
}

pub const BDN_SLOPE: f64 = 0.1;
/// Smallest image side accepted by the denoiser.
pub const BDN_MIN_SIDE: usize = 3;

/// Blind-spot denoiser: four rotated copies of a causal convolution stack
/// whose receptive fields stop one row short of the output pixel, merged by
/// 1x1 convolutions.
#[derive(Debug, Clone, PartialEq)]
pub struct BdnNet {
    pub layout: ParamLayout,
    channels: usize,
    branch: Vec<ConvParams>,
    merge: ConvParams,
    head: ConvParams,
}

pub struct BdnCache<T> {
    /// Per rotation: the input of every branch layer followed by the final
    /// branch activation.
    branches: Vec<Vec<Tensor<T>>>,
    cat: Tensor<T>,
    mid: Tensor<T>,
}

impl BdnNet {
    pub fn new(cfg: &BDNConfig) -> Self {
        let c = cfg.num_channels;
        let mut layout = ParamLayout::default();
        let branch = (0..cfg.num_layers)
            .map(|i| {
                let cin = if i == 0 { 1 } else { c };
                ConvParams::register(&mut layout, &format!("branch.conv{i}"), ConvShape::causal(cin, c))
            })
            .collect();
        let merge = ConvParams::register(&mut layout, "merge", ConvShape::same(4 * c, c, 1));
        let head = ConvParams::register(&mut layout, "head", ConvShape::same(c, 1, 1));
        Self { layout, channels: c, branch, merge, head }
    }

    pub fn init_params<T: Scalar>(&self, seed: u64) -> Vec<T> {
        let mut p = vec![T::zero(); self.layout.total];
        let mut rng = seeded_rng(seed, 1);
        for conv in self.branch.iter().chain([&self.merge, &self.head]) {
            conv.init(&mut p, &mut rng);
        }
        p
    }

    pub fn forward<T: Scalar>(&self, p: &[T], x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_cached(p, x)?.0)
    }

    pub fn forward_cached<T: Scalar>(&self, p: &[T], x: &Tensor<T>) -> Result<(Tensor<T>, BdnCache<T>)> {
        if p.len() != self.layout.total {
            return Err(Error::Shape(format!("denoiser needs {} parameters, got {}", self.layout.total, p.len())));
        }
        if x.c != 1 {
            return Err(Error::Shape(format!("denoiser expects 1 channel, got {}", x.c)));
        }
        if x.h < BDN_MIN_SIDE || x.w < BDN_MIN_SIDE {
            return Err(Error::Shape(format!("{}x{} image is below the {BDN_MIN_SIDE}x{BDN_MIN_SIDE} minimum", x.h, x.w)));
        }
        let mut branches = Vec::with_capacity(4);
        let mut outs = Vec::with_capacity(4);
        for r in 0..4 {
            let mut acts = vec![rot90(x, r)];
            for conv in &self.branch {
                let a = leaky_relu(&conv.forward(p, acts.last().unwrap())?, BDN_SLOPE);
                acts.push(a);
            }
            outs.push(rot90(&shift_down(acts.last().unwrap()), (4 - r) % 4));
            branches.push(acts);
        }
        let cat = Tensor::concat(&outs);
        let mid = relu(&self.merge.forward(p, &cat)?);
        let y = self.head.forward(p, &mid)?;
        Ok((y, BdnCache { branches, cat, mid }))
    }

    pub fn backward<T: Scalar>(&self, p: &[T], cache: &BdnCache<T>, dy: &Tensor<T>, grads: &mut [T]) {
        let mut dmid = self.head.backward(p, grads, &cache.mid, dy, true).unwrap();
        activation_backward(&cache.mid, &mut dmid, 0.0);
        let dcat = self.merge.backward(p, grads, &cache.cat, &dmid, true).unwrap();
        for (r, dout) in dcat.split(self.channels).into_iter().enumerate() {
            let acts = &cache.branches[r];
            let mut da = shift_up(&rot90(&dout, r));
            for (i, conv) in self.branch.iter().enumerate().rev() {
                activation_backward(&acts[i + 1], &mut da, BDN_SLOPE);
                match conv.backward(p, grads, &acts[i], &da, i > 0) {
                    Some(d) => da = d,
                    None => break,
                }
            }
        }
    }
}

/// Mean absolute error and its gradient.
pub fn l1_loss<T: Scalar>(y: &Tensor<T>, target: &[T]) -> (f64, Tensor<T>) {
    let n = y.data.len() as f64;
    let inv = T::of(1.0 / n);
    let mut loss = 0.0;
    let mut g = Tensor::zeros(y.c, y.n, y.h, y.w);
    for ((d, &a), &b) in g.data.iter_mut().zip(&y.data).zip(target) {
        let r = a - b;
        loss += r.abs().as_f64();
        *d = if r > T::zero() {
            inv
        } else if r < T::zero() {
            -inv
        } else {
            T::zero()
        };
    }
    (loss / n, g)
}

/// Mean squared error and its gradient.
pub fn mse_loss<T: Scalar>(y: &Tensor<T>, target: &[T]) -> (f64, Tensor<T>) {
    let n = y.data.len() as f64;
    let scale = T::of(2.0 / n);
    let mut loss = 0.0;
    let mut g = Tensor::zeros(y.c, y.n, y.h, y.w);
    for ((d, &a), &b) in g.data.iter_mut().zip(&y.data).zip(target) {
        let r = a - b;
        loss += (r * r).as_f64();
        *d = r * scale;
    }
    (loss / n, g)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SrWeights {
    pub config: SRConfig,
    pub params: Vec<f32>,
}

impl SrWeights {
    /// Freshly initialised weights; the untrained network returns its centre
    /// input channel.
    pub fn init(config: &SRConfig) -> Result<Self> {
        config.validate()?;
        let net = SrNet::new(config);
        Ok(Self { config: config.clone(), params: net.init_params(config.seed) })
    }

    pub fn net(&self) -> SrNet {
        SrNet::new(&self.config)
    }

    pub fn forward(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.net().forward(&self.params, x)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BdnWeights {
    pub config: BDNConfig,
    pub params: Vec<f32>,
}

impl BdnWeights {
    pub fn init(config: &BDNConfig) -> Result<Self> {
        config.validate()?;
        let net = BdnNet::new(config);
        Ok(Self { config: config.clone(), params: net.init_params(config.seed) })
    }

    pub fn net(&self) -> BdnNet {
        BdnNet::new(&self.config)
    }

    pub fn forward(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.net().forward(&self.params, x)
    }
}

/// `f` applied to one `channels x h x w` input.
pub fn sr_forward(weights: &SrWeights, lr: &[f32], h: usize, w: usize) -> Result<Vec<f32>> {
    let c = weights.config.in_channels;
    if lr.len() != c * h * w {
        return Err(Error::Shape(format!("input has {} values, expected {c}x{h}x{w}", lr.len())));
    }
    Ok(weights.forward(&Tensor::from_vec(c, 1, h, w, lr.to_vec())?)?.data)
}

/// `h` applied to one `h x w` image.
pub fn bdn_forward(weights: &BdnWeights, image: &[f32], h: usize, w: usize) -> Result<Vec<f32>> {
    Ok(weights.forward(&Tensor::from_vec(1, 1, h, w, image.to_vec())?)?.data)
}

/// Random-access training samples.
pub trait PairSource: Sync {
    fn len(&self) -> usize;
    fn pair(&self, i: usize) -> PatchPair;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl PairSource for PairSet {
    fn len(&self) -> usize {
        PairSet::len(self)
    }
    fn pair(&self, i: usize) -> PatchPair {
        self.get(i)
    }
}

impl PairSource for [PatchPair] {
    fn len(&self) -> usize {
        <[PatchPair]>::len(self)
    }
    fn pair(&self, i: usize) -> PatchPair {
        self[i].clone()
    }
}

impl PairSource for Vec<PatchPair> {
    fn len(&self) -> usize {
        Vec::len(self)
    }
    fn pair(&self, i: usize) -> PatchPair {
        self[i].clone()
    }
}

/// Epoch-wise shuffled sample order with per-sample flip seeds.
struct Sampler {
    rng: rand_chacha::ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl Sampler {
    fn new(len: usize, seed: u64) -> Self {
        let mut s = Self { rng: seeded_rng(seed, 2), order: (0..len).collect(), pos: len };
        s.order.shrink_to_fit();
        s
    }

    fn next(&mut self) -> (usize, u64) {
        if self.pos == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let i = self.order[self.pos];
        self.pos += 1;
        (i, self.rng.random::<u64>())
    }
}

fn batch<S: PairSource + ?Sized>(data: &S, sampler: &mut Sampler, size: usize) -> Result<Vec<PatchPair>> {
    let pairs: Vec<PatchPair> = (0..size)
        .map(|_| {
            let (i, seed) = sampler.next();
            augment_flip(data.pair(i), seed)
        })
        .collect();
    let (p, c) = (pairs[0].size, pairs[0].channels);
    if pairs.iter().any(|q| q.size != p || q.channels != c) {
        return Err(Error::Shape("training pairs differ in size or channel count".into()));
    }
    Ok(pairs)
}

fn stack_lr(pairs: &[PatchPair]) -> Result<Tensor<f32>> {
    let (p, c, n) = (pairs[0].size, pairs[0].channels, pairs.len());
    let mut data = Vec::with_capacity(c * n * p * p);
    for ch in 0..c {
        for q in pairs {
            data.extend_from_slice(q.lr_channel(ch));
        }
    }
    Tensor::from_vec(c, n, p, p, data)
}

fn stack_hr(pairs: &[PatchPair]) -> Result<Tensor<f32>> {
    let p = pairs[0].size;
    Tensor::from_vec(1, pairs.len(), p, p, pairs.iter().flat_map(|q| q.hr.iter().copied()).collect())
}

/// Trains `f` with an L1 loss. When `bdn` is given, targets are replaced by
/// the frozen denoiser's output.
pub fn train_sr<S: PairSource + ?Sized>(data: &S, cfg: &SRConfig, bdn: Option<&BdnWeights>) -> Result<(SrWeights, Vec<f64>)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::State("training set is empty".into()));
    }
    let first = data.pair(0);
    if first.channels != cfg.in_channels {
        return Err(Error::Shape(format!(
            "training pairs have {} channels but the network expects {}",
            first.channels, cfg.in_channels
        )));
    }
    let net = SrNet::new(cfg);
    let mut params: Vec<f32> = net.init_params(cfg.seed);
    let mut opt = Adam::new(cfg.learning_rate, params.len());
    let mut grads = vec![0.0f32; params.len()];
    let mut sampler = Sampler::new(data.len(), cfg.seed);
    let mut history = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        let pairs = batch(data, &mut sampler, cfg.batch_size)?;
        let x = stack_lr(&pairs)?;
        let mut target = stack_hr(&pairs)?;
        if let Some(h) = bdn {
            target = h.forward(&target)?;
        }
        let (y, cache) = net.forward_cached(&params, &x)?;
        let (loss, dy) = l1_loss(&y, &target.data);
        grads.iter_mut().for_each(|g| *g = 0.0);
        net.backward(&params, &cache, &dy, &mut grads);
        opt.step(&mut params, &grads);
        history.push(loss);
    }
    Ok((SrWeights { config: cfg.clone(), params }, history))
}

/// Trains the blind-spot denoiser to reproduce its (noisy) input under an
/// L2 loss; only the HR side of each pair is used.
pub fn train_bdn<S: PairSource + ?Sized>(data: &S, cfg: &BDNConfig) -> Result<(BdnWeights, Vec<f64>)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::State("denoiser training set is empty".into()));
    }
    let net = BdnNet::new(cfg);
    let mut params: Vec<f32> = net.init_params(cfg.seed);
    let mut opt = Adam::new(cfg.learning_rate, params.len());
    let mut grads = vec![0.0f32; params.len()];
    let mut sampler = Sampler::new(data.len(), cfg.seed);
    let mut history = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        let pairs = batch(data, &mut sampler, cfg.batch_size)?;
        let x = stack_hr(&pairs)?;
        let (y, cache) = net.forward_cached(&params, &x)?;
        let (loss, dy) = mse_loss(&y, &x.data);
        grads.iter_mut().for_each(|g| *g = 0.0);
        net.backward(&params, &cache, &dy, &mut grads);
        opt.step(&mut params, &grads);
        history.push(loss);
    }
    Ok((BdnWeights { config: cfg.clone(), params }, history))
}

/// Trained networks plus their loss histories.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub sr: SrWeights,
    pub bdn: Option<BdnWeights>,
    pub sr_loss: Vec<f64>,
    pub bdn_loss: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct BundleHeader {
    format: String,
    sr: SRConfig,
    bdn: Option<BDNConfig>,
    parameters: Vec<crate::nn::ParamEntry>,
}

impl ModelBundle {
    fn header(&self) -> BundleHeader {
        let mut parameters = Vec::new();
        let mut offset = 0;
        let sr_layout = self.sr.net().layout;
        let bdn_layout = self.bdn.as_ref().map(|b| b.net().layout);
        for (prefix, layout) in [("sr", Some(sr_layout)), ("bdn", bdn_layout)] {
            for e in layout.iter().flat_map(|l| l.entries.iter()) {
                parameters.push(crate::nn::ParamEntry {
                    name: format!("{prefix}.{}", e.name),
                    shape: e.shape.clone(),
                    offset: offset + e.offset,
                    len: e.len,
                });
            }
            offset += layout.map_or(0, |l| l.total);
        }
        BundleHeader {
            format: "stress-model".into(),
            sr: self.sr.config.clone(),
            bdn: self.bdn.as_ref().map(|b| b.config.clone()),
            parameters,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_value(self.header())?;
        let mut params = self.sr.params.clone();
        if let Some(b) = &self.bdn {
            params.extend_from_slice(&b.params);
        }
        let mut out = Vec::new();
        write_checkpoint(&mut out, &header, &params)?;
        Ok(out)
    }

    /// Loss histories are stored separately; see [`loss_to_csv`].
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, params) = read_checkpoint(bytes)?;
        let header: BundleHeader = serde_json::from_value(header)?;
        if header.format != "stress-model" {
            return Err(Error::Format(format!("unexpected checkpoint kind {:?}", header.format)));
        }
        header.sr.validate()?;
        let n_sr = SrNet::new(&header.sr).layout.total;
        let n_bdn = header.bdn.as_ref().map_or(Ok(0), |c| c.validate().map(|_| BdnNet::new(c).layout.total))?;
        if params.len() != n_sr + n_bdn {
            return Err(Error::Format(format!(
                "checkpoint holds {} parameters, its configs need {}",
                params.len(),
                n_sr + n_bdn
            )));
        }
        let sr = SrWeights { config: header.sr, params: params[..n_sr].to_vec() };
        let bdn = header.bdn.map(|config| BdnWeights { config, params: params[n_sr..].to_vec() });
        Ok(Self { sr, bdn, sr_loss: Vec::new(), bdn_loss: Vec::new() })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        use std::io::Write;
        let mut w = BufWriter::new(fs::File::create(path)?);
        w.write_all(&self.to_bytes()?)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

/// `step,loss` CSV with 1-based steps.
pub fn loss_to_csv(history: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in history.iter().enumerate() {
        writeln!(s, "{},{}", i + 1, l).unwrap();
    }
    s
}
