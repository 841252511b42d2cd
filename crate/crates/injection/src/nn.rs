//! The three parameterized maps: generator G, encoder E, and discriminator D
//! (patch critic plus auxiliary domain classifier), together with the
//! label/latent injection mechanism that feeds G.
//!
//! Parameters live in a [`ParamSet`] owned by each network. For a training
//! or evaluation pass the set is bound onto a [`Tape`], and the layer
//! structs (which hold only indices and hyperparameters) route those bound
//! vars through the graph.

use thiserror::Error;

use crate::config::{Backbone, ModelConfig};
use crate::rng::RandomSource;
use crate::tensor::{Tape, Tensor, Var};

const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape error: {0}")]
    Shape(String),
}

/// Index of a parameter within its [`ParamSet`].
#[derive(Debug, Clone, Copy)]
pub struct ParamRef(usize);

/// Named parameter tensors of one network, in a stable order.
#[derive(Debug, Clone)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    fn new() -> Self {
        ParamSet { entries: Vec::new() }
    }

    fn alloc(&mut self, name: String, value: Tensor) -> ParamRef {
        self.entries.push((name, value));
        ParamRef(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn get(&self, r: ParamRef) -> &Tensor {
        &self.entries[r.0].1
    }

    pub fn set_by_name(&mut self, name: &str, value: Tensor) -> bool {
        for (n, t) in &mut self.entries {
            if n == name {
                if t.shape() != value.shape() {
                    return false;
                }
                *t = value;
                return true;
            }
        }
        false
    }

    /// Register every parameter on `tape`, in order.
    pub fn bind(&self, tape: &Tape) -> Vec<Var> {
        self.entries
            .iter()
            .map(|(_, t)| tape.input(t.clone()))
            .collect()
    }

    #[cfg(test)]
    pub(crate) fn default_for_test(entries: Vec<(String, Tensor)>) -> Self {
        ParamSet { entries }
    }

    pub fn bitwise_eq(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(other.entries.iter())
                .all(|((an, at), (bn, bt))| an == bn && at.bitwise_eq(bt))
    }
}

fn normal_tensor(rng: &mut RandomSource, shape: Vec<usize>, std: f64) -> Tensor {
    let len = shape.iter().product();
    let mut data = vec![0.0; len];
    rng.fill_normal(&mut data);
    for v in &mut data {
        *v *= std;
    }
    Tensor::new(shape, data)
}

#[derive(Debug, Clone)]
struct Conv {
    w: ParamRef,
    b: ParamRef,
    pad: usize,
    reflect: bool,
}

impl Conv {
    fn init(
        ps: &mut ParamSet,
        rng: &mut RandomSource,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
    ) -> Self {
        // Fan-in scaled init keeps activation scale roughly constant
        // through the (normalization-free) stacks.
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        Self::init_with_std(ps, rng, name, cin, cout, k, std)
    }

    fn init_with_std(
        ps: &mut ParamSet,
        rng: &mut RandomSource,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        std: f64,
    ) -> Self {
        let w = ps.alloc(format!("{name}.w"), normal_tensor(rng, vec![cout, cin, k, k], std));
        let b = ps.alloc(format!("{name}.b"), Tensor::zeros(vec![cout]));
        Conv { w, b, pad: k / 2, reflect: false }
    }

    fn reflected(mut self) -> Self {
        self.reflect = true;
        self
    }

    fn forward(&self, t: &Tape, vars: &[Var], x: Var) -> Var {
        let y = if self.reflect {
            t.conv2d(t.reflect_pad2(x, self.pad), vars[self.w.0], 0)
        } else {
            t.conv2d(x, vars[self.w.0], self.pad)
        };
        let sh = t.shape(y);
        t.add(y, t.broadcast_channel(vars[self.b.0], sh[0], sh[2], sh[3]))
    }
}

const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
struct InstanceNorm {
    gain: ParamRef,
    bias: ParamRef,
}

impl InstanceNorm {
    fn init(ps: &mut ParamSet, name: &str, channels: usize) -> Self {
        let gain = ps.alloc(format!("{name}.gain"), Tensor::full(vec![channels], 1.0));
        let bias = ps.alloc(format!("{name}.bias"), Tensor::zeros(vec![channels]));
        InstanceNorm { gain, bias }
    }

    fn forward(&self, t: &Tape, vars: &[Var], x: Var) -> Var {
        let sh = t.shape(x);
        let (n, h, w) = (sh[0], sh[2], sh[3]);
        let mu = t.mean_hw(x);
        let centered = t.sub(x, t.broadcast_hw(mu, h, w));
        let var = t.mean_hw(t.mul(centered, centered));
        let inv = t.recip(t.sqrt(t.add_scalar(var, NORM_EPS)));
        let normed = t.mul(centered, t.broadcast_hw(inv, h, w));
        let scaled = t.mul(normed, t.broadcast_channel(vars[self.gain.0], n, h, w));
        t.add(scaled, t.broadcast_channel(vars[self.bias.0], n, h, w))
    }
}

#[derive(Debug, Clone)]
struct Linear {
    w: ParamRef,
    b: ParamRef,
}

impl Linear {
    fn init(
        ps: &mut ParamSet,
        rng: &mut RandomSource,
        name: &str,
        cin: usize,
        cout: usize,
        std: f64,
    ) -> Self {
        let w = if std == 0.0 {
            ps.alloc(format!("{name}.w"), Tensor::zeros(vec![cout, cin]))
        } else {
            ps.alloc(format!("{name}.w"), normal_tensor(rng, vec![cout, cin], std))
        };
        let b = ps.alloc(format!("{name}.b"), Tensor::zeros(vec![cout]));
        Linear { w, b }
    }

    fn forward(&self, t: &Tape, vars: &[Var], x: Var) -> Var {
        let n = t.shape(x)[0];
        let y = t.matmul(x, vars[self.w.0], false, true);
        t.add(y, t.broadcast_rows(vars[self.b.0], n))
    }
}

/// conv -> optional instance norm -> leaky ReLU
///
/// Norm placement is load-bearing: instance normalization subtracts the
/// per-channel spatial mean, which is exactly the form the spatially
/// constant label/latent channels take. Blocks on the injection path (the
/// U-Net stem, its outermost decoder block, the encoder E, and the critic)
/// stay norm-free so that signal survives; interior blocks normalize.
#[derive(Debug, Clone)]
struct ConvBlock {
    conv: Conv,
    norm: Option<InstanceNorm>,
}

impl ConvBlock {
    fn init(
        ps: &mut ParamSet,
        rng: &mut RandomSource,
        name: &str,
        cin: usize,
        cout: usize,
        normed: bool,
    ) -> Self {
        let conv = Conv::init(ps, rng, name, cin, cout, 3);
        let norm = normed.then(|| InstanceNorm::init(ps, &format!("{name}.norm"), cout));
        ConvBlock { conv, norm }
    }

    fn reflected(mut self) -> Self {
        self.conv = self.conv.reflected();
        self
    }

    fn forward(&self, t: &Tape, vars: &[Var], x: Var) -> Var {
        let mut y = self.conv.forward(t, vars, x);
        if let Some(norm) = &self.norm {
            y = norm.forward(t, vars, y);
        }
        t.leaky_relu(y, LEAKY_SLOPE)
    }
}

/// Two 3x3 convolutions with a pass-through sum; no activation after the add.
#[derive(Debug, Clone)]
struct ResidualBlock {
    block1: ConvBlock,
    conv2: Conv,
    norm2: InstanceNorm,
}

impl ResidualBlock {
    fn init(ps: &mut ParamSet, rng: &mut RandomSource, name: &str, width: usize) -> Self {
        let block1 = ConvBlock::init(ps, rng, &format!("{name}.conv1"), width, width, true).reflected();
        // Zero-initialized second conv: every block starts as the identity,
        // the refinement bias characteristic of residual translators.
        let conv2 = Conv::init_with_std(ps, rng, &format!("{name}.conv2"), width, width, 3, 0.0)
            .reflected();
        let norm2 = InstanceNorm::init(ps, &format!("{name}.conv2.norm"), width);
        ResidualBlock { block1, conv2, norm2 }
    }

    fn forward(&self, t: &Tape, vars: &[Var], x: Var) -> Var {
        let h = self.block1.forward(t, vars, x);
        let h = self.conv2.forward(t, vars, h);
        let h = self.norm2.forward(t, vars, h);
        t.add(x, h)
    }
}

fn stage_width(base: usize, stage: usize) -> usize {
    (base << stage).min(base * 8)
}

/// The translator G. Input is the injected tensor (image ++ label maps ++
/// latent maps); output is an image-shaped tensor in [-1, 1].
#[derive(Debug, Clone)]
pub struct Generator {
    pub params: ParamSet,
    backbone: Backbone,
    depth: usize,
    in_channels: usize,
    num_domains: usize,
    latent_dim: usize,
    stem: ConvBlock,
    downs: Vec<ConvBlock>,
    bottleneck_plain: Option<ConvBlock>,
    bottleneck_res: Vec<ResidualBlock>,
    ups: Vec<ConvBlock>,
    head: Conv,
}

/// Deterministic generator construction from `(cfg, rng)`.
pub fn build_generator(cfg: &ModelConfig, rng: &mut RandomSource) -> Generator {
    let mut ps = ParamSet::new();
    let base = cfg.base_width;
    let cin_total = cfg.in_channels + cfg.num_domains + cfg.latent_dim;
    // The backbones inherit their lineages' conditioning behavior. The
    // U-Net leaves its stem and outermost decoder block norm-free, so the
    // full-resolution skip forms an unnormalized path from the injected
    // channels to the output. The residual variant opens with a
    // reflection-padded, normalized stem: under reflection padding a
    // spatially constant channel contributes a constant map, which the
    // per-sample normalization then removes, so the injected codes shape
    // its output only marginally and generations stay anchored to the
    // input.
    let unet = cfg.backbone == Backbone::Unet;
    let mut stem = ConvBlock::init(&mut ps, rng, "stem", cin_total, base, !unet);
    if !unet {
        stem = stem.reflected();
    }
    let mut downs = Vec::new();
    for i in 1..=cfg.depth {
        downs.push(ConvBlock::init(
            &mut ps,
            rng,
            &format!("down{i}"),
            stage_width(base, i - 1),
            stage_width(base, i),
            true,
        ));
    }
    let wmid = stage_width(base, cfg.depth);
    let (bottleneck_plain, bottleneck_res) = match cfg.backbone {
        Backbone::Unet => (
            Some(ConvBlock::init(&mut ps, rng, "mid", wmid, wmid, true)),
            Vec::new(),
        ),
        Backbone::Resnet => {
            let blocks = (0..2)
                .map(|i| ResidualBlock::init(&mut ps, rng, &format!("mid{i}"), wmid))
                .collect();
            (None, blocks)
        }
    };
    let mut ups = Vec::new();
    for i in (1..=cfg.depth).rev() {
        let skip = match cfg.backbone {
            Backbone::Unet => stage_width(base, i - 1),
            Backbone::Resnet => 0,
        };
        let outermost = i == 1;
        ups.push(ConvBlock::init(
            &mut ps,
            rng,
            &format!("up{i}"),
            stage_width(base, i) + skip,
            stage_width(base, i - 1),
            !(unet && outermost),
        ));
    }
    let head = Conv::init(&mut ps, rng, "head", base, cfg.in_channels, 3);
    Generator {
        params: ps,
        backbone: cfg.backbone,
        depth: cfg.depth,
        in_channels: cfg.in_channels,
        num_domains: cfg.num_domains,
        latent_dim: cfg.latent_dim,
        stem,
        downs,
        bottleneck_plain,
        bottleneck_res,
        ups,
        head,
    }
}

impl Generator {
    pub fn backbone(&self) -> Backbone {
        self.backbone
    }

    /// Down stages paired with up stages through concatenation.
    pub fn skip_connection_count(&self) -> usize {
        match self.backbone {
            Backbone::Unet => self.depth,
            Backbone::Resnet => 0,
        }
    }

    pub fn input_channels(&self) -> usize {
        self.in_channels + self.num_domains + self.latent_dim
    }

    pub fn bind(&self, tape: &Tape) -> Vec<Var> {
        self.params.bind(tape)
    }

    /// Forward pass on an injected tensor (see [`inject`]).
    pub fn forward(&self, t: &Tape, vars: &[Var], injected: Var) -> Var {
        let sh = t.shape(injected);
        assert_eq!(sh[1], self.input_channels(), "generator input channels");
        let mut feats = Vec::with_capacity(self.depth);
        let mut x = self.stem.forward(t, vars, injected);
        for down in &self.downs {
            feats.push(x);
            x = down.forward(t, vars, t.avg_pool2(x));
        }
        if let Some(mid) = &self.bottleneck_plain {
            x = mid.forward(t, vars, x);
        }
        for block in &self.bottleneck_res {
            x = block.forward(t, vars, x);
        }
        for up in &self.ups {
            let upsampled = t.upsample2(x);
            let merged = match self.backbone {
                Backbone::Unet => {
                    let skip = feats.pop().expect("skip stack");
                    t.concat_channels(&[upsampled, skip])
                }
                Backbone::Resnet => upsampled,
            };
            x = up.forward(t, vars, merged);
        }
        t.tanh(self.head.forward(t, vars, x))
    }
}

/// The variational encoder E; outputs the posterior mean over latent codes.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub params: ParamSet,
    in_channels: usize,
    latent_dim: usize,
    stem: ConvBlock,
    downs: Vec<ConvBlock>,
    head: Linear,
}

pub fn build_encoder(cfg: &ModelConfig, rng: &mut RandomSource) -> Encoder {
    let mut ps = ParamSet::new();
    let base = cfg.base_width;
    let stem = ConvBlock::init(&mut ps, rng, "stem", cfg.in_channels, base, false);
    let mut downs = Vec::new();
    for i in 1..=cfg.depth {
        downs.push(ConvBlock::init(
            &mut ps,
            rng,
            &format!("down{i}"),
            stage_width(base, i - 1),
            stage_width(base, i),
            false,
        ));
    }
    let head_in = stage_width(base, cfg.depth);
    let head = Linear::init(
        &mut ps,
        rng,
        "head",
        head_in,
        cfg.latent_dim,
        (1.0 / head_in as f64).sqrt(),
    );
    Encoder {
        params: ps,
        in_channels: cfg.in_channels,
        latent_dim: cfg.latent_dim,
        stem,
        downs,
        head,
    }
}

impl Encoder {
    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn bind(&self, tape: &Tape) -> Vec<Var> {
        self.params.bind(tape)
    }

    /// `[N,C,H,W] -> [N,d]` posterior means.
    pub fn forward(&self, t: &Tape, vars: &[Var], image: Var) -> Var {
        let sh = t.shape(image);
        assert_eq!(sh[1], self.in_channels, "encoder input channels");
        let mut x = self.stem.forward(t, vars, image);
        for down in &self.downs {
            x = down.forward(t, vars, t.avg_pool2(x));
        }
        let pooled = t.mean_hw(x);
        self.head.forward(t, vars, pooled)
    }
}

/// The critic D: an unbounded patch-score map plus a K-way domain
/// classification head hung off the penultimate features.
#[derive(Debug, Clone)]
pub struct Discriminator {
    pub params: ParamSet,
    in_channels: usize,
    num_domains: usize,
    stem: ConvBlock,
    downs: Vec<ConvBlock>,
    patch_head: Conv,
    cls_head: Conv,
}

pub fn build_discriminator(cfg: &ModelConfig, rng: &mut RandomSource) -> Discriminator {
    let mut ps = ParamSet::new();
    let base = cfg.base_width;
    let stem = ConvBlock::init(&mut ps, rng, "stem", cfg.in_channels, base, false);
    let mut downs = Vec::new();
    for i in 1..=cfg.depth {
        downs.push(ConvBlock::init(
            &mut ps,
            rng,
            &format!("down{i}"),
            stage_width(base, i - 1),
            stage_width(base, i),
            false,
        ));
    }
    let wtop = stage_width(base, cfg.depth);
    let patch_head = Conv::init(&mut ps, rng, "patch", wtop, 1, 3);
    let cls_head = Conv::init(&mut ps, rng, "cls", wtop, cfg.num_domains, 3);
    Discriminator {
        params: ps,
        in_channels: cfg.in_channels,
        num_domains: cfg.num_domains,
        stem,
        downs,
        patch_head,
        cls_head,
    }
}

impl Discriminator {
    pub fn num_domains(&self) -> usize {
        self.num_domains
    }

    pub fn bind(&self, tape: &Tape) -> Vec<Var> {
        self.params.bind(tape)
    }

    /// `[N,C,H,W] -> (patch scores [N,1,h,w], domain logits [N,K])`.
    pub fn forward(&self, t: &Tape, vars: &[Var], image: Var) -> (Var, Var) {
        let sh = t.shape(image);
        assert_eq!(sh[1], self.in_channels, "discriminator input channels");
        let mut x = self.stem.forward(t, vars, image);
        for down in &self.downs {
            x = down.forward(t, vars, t.avg_pool2(x));
        }
        let patch = self.patch_head.forward(t, vars, x);
        let logits = t.mean_hw(self.cls_head.forward(t, vars, x));
        (patch, logits)
    }

    /// Per-sample scalar critic: the mean of the patch map, shape `[N]`.
    pub fn critic_scores(&self, t: &Tape, vars: &[Var], image: Var) -> Var {
        let (patch, _) = self.forward(t, vars, image);
        let n = t.shape(patch)[0];
        t.reshape(t.mean_hw(patch), vec![n])
    }
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), NnError> {
    if cond {
        Ok(())
    } else {
        Err(NnError::Shape(msg()))
    }
}

/// Concatenate an image batch with its spatially broadcast domain label and
/// latent code: `[N,C,H,W] ++ [N,K] ++ [N,d] -> [N,C+K+d,H,W]`.
///
/// Channels `[0,C)` carry the image unchanged; each label/latent channel is
/// constant over the spatial extent.
pub fn inject(t: &Tape, image: Var, label: Var, z: Var) -> Result<Var, NnError> {
    let ish = t.shape(image);
    let lsh = t.shape(label);
    let zsh = t.shape(z);
    check(ish.len() == 4, || format!("image must be rank 4, got {ish:?}"))?;
    check(lsh.len() == 2 && zsh.len() == 2, || {
        format!("label/latent must be rank 2, got {lsh:?} and {zsh:?}")
    })?;
    check(lsh[0] == ish[0] && zsh[0] == ish[0], || {
        format!(
            "batch mismatch: image {}, label {}, latent {}",
            ish[0], lsh[0], zsh[0]
        )
    })?;
    let (h, w) = (ish[2], ish[3]);
    let label_maps = t.broadcast_hw(label, h, w);
    let z_maps = t.broadcast_hw(z, h, w);
    Ok(t.concat_channels(&[image, label_maps, z_maps]))
}

/// `G(x, z, c)`: inject and run the generator.
pub fn generate(
    t: &Tape,
    gen: &Generator,
    vars: &[Var],
    image: Var,
    label: Var,
    z: Var,
) -> Result<Var, NnError> {
    let ish = t.shape(image);
    check(ish.len() == 4 && ish[1] == gen.in_channels, || {
        format!("expected [N,{},H,W], got {ish:?}", gen.in_channels)
    })?;
    check(
        ish[2] % (1 << gen.depth) == 0 && ish[3] % (1 << gen.depth) == 0 && ish[2] >= (1 << gen.depth),
        || format!("spatial {}x{} not divisible by 2^{}", ish[2], ish[3], gen.depth),
    )?;
    check(t.shape(label)[1] == gen.num_domains, || {
        format!("label length {} != K={}", t.shape(label)[1], gen.num_domains)
    })?;
    check(t.shape(z)[1] == gen.latent_dim, || {
        format!("latent length {} != d={}", t.shape(z)[1], gen.latent_dim)
    })?;
    let injected = inject(t, image, label, z)?;
    Ok(gen.forward(t, vars, injected))
}

/// `E(x)`: posterior latent means.
pub fn encode(t: &Tape, enc: &Encoder, vars: &[Var], image: Var) -> Result<Var, NnError> {
    let ish = t.shape(image);
    check(ish.len() == 4 && ish[1] == enc.in_channels, || {
        format!("expected [N,{},H,W], got {ish:?}", enc.in_channels)
    })?;
    Ok(enc.forward(t, vars, image))
}

/// Posterior sample `mu + eta`, `eta ~ N(0, I)`. The noise is a constant on
/// the tape, so gradients flow through `mu` only.
pub fn reparameterize(t: &Tape, mu: Var, rng: &mut RandomSource) -> Var {
    let sh = t.shape(mu);
    let len: usize = sh.iter().product();
    let mut noise = vec![0.0; len];
    rng.fill_normal(&mut noise);
    let eta = t.constant(Tensor::new(sh, noise));
    t.add(mu, eta)
}

/// `D(x)`: patch scores and domain logits.
pub fn discriminate(
    t: &Tape,
    disc: &Discriminator,
    vars: &[Var],
    image: Var,
) -> Result<(Var, Var), NnError> {
    let ish = t.shape(image);
    check(ish.len() == 4 && ish[1] == disc.in_channels, || {
        format!("expected [N,{},H,W], got {ish:?}", disc.in_channels)
    })?;
    Ok(disc.forward(t, vars, image))
}
