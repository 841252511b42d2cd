//! The alternating optimization loop over the four mappings, the Adam
//! optimizer, checkpointing, and step logging.
//!
//! Two optimizers drive the run: one over the discriminator, one jointly
//! over the generator and encoder (their objective is a single total). The
//! update schedule follows the configured ratio of generator/encoder steps
//! per discriminator step. All randomness flows through named streams owned
//! by [`TrainState`], so runs are bitwise reproducible and checkpoints
//! resume exactly.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::config::{
    lr_at_epoch, parse_config, serialize_config, ConfigError, CycleLatent, LossWeights,
    ModelConfig, TrainConfig,
};
use crate::data::{onehot_batch, sample_batch, Batch, DataError, Dataset};
use crate::nn::{
    build_discriminator, build_encoder, build_generator, discriminate, encode, generate,
    Discriminator, Encoder, Generator, NnError, ParamSet,
};
use crate::objectives::{
    adv_scores, classification_loss, gradient_penalty, kl_to_prior, l1_distance, total_d, total_g,
    LossReport, ObjectiveError,
};
use crate::rng::RandomSource;
use crate::tensor::{Tape, Tensor, Var};

pub const STREAM_DATA: &str = "data";
pub const STREAM_LATENT: &str = "latent";
pub const STREAM_REPARAM: &str = "reparam";
pub const STREAM_GP: &str = "gp";
pub const STREAM_INIT_GEN: &str = "init/gen";
pub const STREAM_INIT_ENC: &str = "init/enc";
pub const STREAM_INIT_DISC: &str = "init/disc";

const CHECKPOINT_MAGIC: &[u8; 8] = b"INJCKPT1";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite {term} at step {step}")]
    NonFinite { term: String, step: u64 },
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("checkpoint config does not match the requested model config")]
    ConfigMismatch,
    #[error("dataset has {dataset} domains but config expects {config}")]
    DomainMismatch { dataset: usize, config: usize },
    #[error("run needs {needed} epochs but the schedule has {available}")]
    ScheduleExceeded { needed: u32, available: u32 },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_owned(),
        source,
    }
}

// ---------------------------------------------------------------------------
// optimizer

/// Adam with bias correction, eps 1e-8.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &[&ParamSet], beta1: f64, beta2: f64) -> Self {
        let mut m = Vec::new();
        for ps in params {
            for (_, t) in ps.tensors() {
                m.push(Tensor::zeros(t.shape().to_vec()));
            }
        }
        Adam {
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            v: m.clone(),
            m,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update over a flat list of (param, grad) pairs, in the same
    /// order the state was built with.
    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor], lr: f64) {
        assert_eq!(params.len(), self.m.len(), "optimizer/param count");
        assert_eq!(params.len(), grads.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .into_iter()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let pm = p.make_mut();
            let mm = m.make_mut();
            let vm = v.make_mut();
            for i in 0..pm.len() {
                let gi = g.data()[i];
                mm[i] = self.beta1 * mm[i] + (1.0 - self.beta1) * gi;
                vm[i] = self.beta2 * vm[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = mm[i] / bc1;
                let vhat = vm[i] / bc2;
                pm[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }

    pub fn bitwise_eq(&self, other: &Adam) -> bool {
        self.t == other.t
            && self.m.len() == other.m.len()
            && self
                .m
                .iter()
                .zip(other.m.iter())
                .all(|(a, b)| a.bitwise_eq(b))
            && self
                .v
                .iter()
                .zip(other.v.iter())
                .all(|(a, b)| a.bitwise_eq(b))
    }
}

// ---------------------------------------------------------------------------
// loss graphs

/// The generator/encoder loss terms as tape vars.
pub struct GTermVars {
    pub adv_g: Var,
    pub cls_fake: Var,
    pub cycle: Var,
    pub latent: Var,
    pub kl: Var,
}

/// Build every generator/encoder term on `tape`.
///
/// The pipeline: translate `x` toward the target label with a prior draw
/// `z`; score it with the critic and the classifier; recover `z` from the
/// translation; reconstruct `x` back in its source domain using either the
/// re-encoded posterior sample (`eta` is its noise) or the forward draw,
/// depending on `cycle`; and regularize the posterior mean toward the prior.
///
/// The maps are closures so tests can substitute stubs for any of the three
/// networks.
#[allow(clippy::too_many_arguments)]
pub fn g_term_graph(
    t: &Tape,
    gen_fwd: &dyn Fn(&Tape, Var, Var, Var) -> Var,
    enc_fwd: &dyn Fn(&Tape, Var) -> Var,
    disc_fwd: &dyn Fn(&Tape, Var) -> (Var, Var),
    images: &Tensor,
    source_labels: &[usize],
    target_labels: &[usize],
    num_domains: usize,
    z: &Tensor,
    eta: &Tensor,
    cycle: CycleLatent,
) -> Result<GTermVars, TrainError> {
    let n = images.shape()[0];
    assert_eq!(source_labels.len(), n);
    assert_eq!(target_labels.len(), n);
    let x = t.input(images.clone());
    let c_target = t.constant(onehot_batch(target_labels, num_domains)?);
    let c_source = t.constant(onehot_batch(source_labels, num_domains)?);
    let zv = t.constant(z.clone());

    let translated = gen_fwd(t, x, c_target, zv);
    let (patch_fake, logits_fake) = disc_fwd(t, translated);
    let adv_g = t.neg(t.mean_all(patch_fake));
    let cls_fake = classification_loss(t, logits_fake, target_labels)?;

    let mu_x = enc_fwd(t, x);
    let kl = kl_to_prior(t, mu_x);
    let z_cycle = match cycle {
        CycleLatent::Encoded => t.add(mu_x, t.constant(eta.clone())),
        CycleLatent::Forward => zv,
    };
    let reconstructed = gen_fwd(t, translated, c_source, z_cycle);
    let cycle_term = l1_distance(t, x, reconstructed)?;

    let mu_translated = enc_fwd(t, translated);
    let latent = l1_distance(t, zv, mu_translated)?;

    Ok(GTermVars {
        adv_g,
        cls_fake,
        cycle: cycle_term,
        latent,
        kl,
    })
}

/// The discriminator loss terms as tape vars.
pub struct DTermVars {
    pub adv_d: Var,
    pub gp: Var,
    pub cls_real: Var,
}

/// Build every discriminator term on `tape`. `fake` must already be
/// detached (a plain tensor).
pub fn d_term_graph(
    t: &Tape,
    disc_fwd: &dyn Fn(&Tape, Var) -> (Var, Var),
    critic: &dyn Fn(&Tape, Var) -> Var,
    images: &Tensor,
    fake: &Tensor,
    source_labels: &[usize],
    gp_rng: &mut RandomSource,
) -> Result<DTermVars, TrainError> {
    let real = t.input(images.clone());
    let fake_v = t.input(fake.clone());
    let (patch_real, logits_real) = disc_fwd(t, real);
    let (patch_fake, _) = disc_fwd(t, fake_v);
    let (adv_d, _) = adv_scores(t, patch_real, patch_fake)?;
    let cls_real = classification_loss(t, logits_real, source_labels)?;
    let gp = gradient_penalty(t, |tp, x| critic(tp, x), images, fake, gp_rng)?;
    Ok(DTermVars { adv_d, gp, cls_real })
}

// ---------------------------------------------------------------------------
// train state

/// Everything a run owns: the three networks, the two optimizer states,
/// counters, and the random streams.
pub struct TrainState {
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub train: TrainConfig,
    pub generator: Generator,
    pub encoder: Encoder,
    pub discriminator: Discriminator,
    pub opt_ge: Adam,
    pub opt_d: Adam,
    pub epoch: u64,
    pub step: u64,
    rng_data: RandomSource,
    rng_latent: RandomSource,
    rng_reparam: RandomSource,
    rng_gp: RandomSource,
}

/// Which update a step performs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    GeneratorEncoder,
    Discriminator,
}

/// Deterministic phase schedule: `g_steps_per_d_step` generator/encoder
/// updates, then one discriminator update (swapped when inverted).
pub fn phase_for_step(cfg: &TrainConfig, step: u64) -> Phase {
    let ratio = cfg.g_steps_per_d_step as u64;
    let pos = step % (ratio + 1);
    let majority_first = pos < ratio;
    match (majority_first, cfg.invert_update_ratio) {
        (true, false) | (false, true) => Phase::GeneratorEncoder,
        _ => Phase::Discriminator,
    }
}

impl TrainState {
    /// Fresh state: networks built from the seed's init streams, optimizer
    /// moments at zero, counters at zero.
    pub fn new(model: ModelConfig, weights: LossWeights, train: TrainConfig) -> Result<Self, TrainError> {
        model.validate()?;
        weights.validate()?;
        train.validate()?;
        let seed = train.seed;
        let generator = build_generator(&model, &mut RandomSource::new(seed, STREAM_INIT_GEN));
        let encoder = build_encoder(&model, &mut RandomSource::new(seed, STREAM_INIT_ENC));
        let discriminator =
            build_discriminator(&model, &mut RandomSource::new(seed, STREAM_INIT_DISC));
        let opt_ge = Adam::new(
            &[&generator.params, &encoder.params],
            train.beta1,
            train.beta2,
        );
        let opt_d = Adam::new(&[&discriminator.params], train.beta1, train.beta2);
        Ok(TrainState {
            model,
            weights,
            train,
            generator,
            encoder,
            discriminator,
            opt_ge,
            opt_d,
            epoch: 0,
            step: 0,
            rng_data: RandomSource::new(seed, STREAM_DATA),
            rng_latent: RandomSource::new(seed, STREAM_LATENT),
            rng_reparam: RandomSource::new(seed, STREAM_REPARAM),
            rng_gp: RandomSource::new(seed, STREAM_GP),
        })
    }

    fn draw_latent(&mut self, n: usize) -> Tensor {
        let d = self.model.latent_dim;
        let mut z = vec![0.0; n * d];
        self.rng_latent.fill_normal(&mut z);
        Tensor::new(vec![n, d], z)
    }

    fn check_finite(&self, pairs: &[(&'static str, f64)]) -> Result<(), TrainError> {
        for (term, v) in pairs {
            if !v.is_finite() {
                return Err(TrainError::NonFinite {
                    term: (*term).to_owned(),
                    step: self.step,
                });
            }
        }
        Ok(())
    }

    /// One generator/encoder update. The discriminator participates in the
    /// graph but only G and E parameters move.
    pub fn g_step(&mut self, batch: &Batch, lr: f64) -> Result<LossReport, TrainError> {
        let n = batch.source_labels.len();
        let z = self.draw_latent(n);
        let mut eta = vec![0.0; n * self.model.latent_dim];
        self.rng_reparam.fill_normal(&mut eta);
        let eta = Tensor::new(vec![n, self.model.latent_dim], eta);

        let tape = Tape::new();
        let gv = self.generator.bind(&tape);
        let ev = self.encoder.bind(&tape);
        let dv = self.discriminator.bind(&tape);
        let (gen, enc, disc) = (&self.generator, &self.encoder, &self.discriminator);
        let gen_fwd = |t: &Tape, img: Var, label: Var, zv: Var| {
            generate(t, gen, &gv, img, label, zv).expect("generator shapes")
        };
        let enc_fwd = |t: &Tape, img: Var| encode(t, enc, &ev, img).expect("encoder shapes");
        let disc_fwd =
            |t: &Tape, img: Var| discriminate(t, disc, &dv, img).expect("discriminator shapes");
        let terms = g_term_graph(
            &tape,
            &gen_fwd,
            &enc_fwd,
            &disc_fwd,
            &batch.images,
            &batch.source_labels,
            &batch.target_labels,
            self.model.num_domains,
            &z,
            &eta,
            self.train.cycle_latent,
        )?;
        let total = total_g(
            &tape,
            terms.adv_g,
            terms.cls_fake,
            terms.cycle,
            terms.latent,
            terms.kl,
            &self.weights,
        );
        let report = LossReport {
            adv_g: tape.value(terms.adv_g).item(),
            cls_fake: tape.value(terms.cls_fake).item(),
            cycle_image: tape.value(terms.cycle).item(),
            latent_l1: tape.value(terms.latent).item(),
            kl: tape.value(terms.kl).item(),
            total_g: tape.value(total).item(),
            ..LossReport::default()
        };
        self.check_finite(&[
            ("adv_g", report.adv_g),
            ("cls_fake", report.cls_fake),
            ("cycle_image", report.cycle_image),
            ("latent_l1", report.latent_l1),
            ("kl", report.kl),
            ("total_g", report.total_g),
        ])?;

        let mut targets = gv;
        targets.extend_from_slice(&ev);
        let grads: Vec<Tensor> = tape
            .grad(total, &targets)
            .into_iter()
            .map(|g| tape.value(g))
            .collect();
        for g in &grads {
            if !g.all_finite() {
                return Err(TrainError::NonFinite {
                    term: "generator/encoder gradient".into(),
                    step: self.step,
                });
            }
        }
        let mut params: Vec<&mut Tensor> = Vec::with_capacity(grads.len());
        params.extend(self.generator.params.tensors_mut().map(|(_, t)| t));
        params.extend(self.encoder.params.tensors_mut().map(|(_, t)| t));
        self.opt_ge.step(params, &grads, lr);
        Ok(report)
    }

    /// One discriminator update. The fake batch is generated without
    /// tracking generator gradients; only D parameters move.
    pub fn d_step(&mut self, batch: &Batch, lr: f64) -> Result<LossReport, TrainError> {
        let n = batch.source_labels.len();
        let z = self.draw_latent(n);
        let fake = {
            let scratch = Tape::new();
            let gv = self.generator.bind(&scratch);
            let x = scratch.input(batch.images.clone());
            let labels = scratch.constant(onehot_batch(
                &batch.target_labels,
                self.model.num_domains,
            )?);
            let zv = scratch.constant(z);
            let y = generate(&scratch, &self.generator, &gv, x, labels, zv)?;
            scratch.value(y)
        };

        let tape = Tape::new();
        let dv = self.discriminator.bind(&tape);
        let disc = &self.discriminator;
        let disc_fwd =
            |t: &Tape, img: Var| discriminate(t, disc, &dv, img).expect("discriminator shapes");
        let critic = |t: &Tape, img: Var| disc.critic_scores(t, &dv, img);
        let terms = d_term_graph(
            &tape,
            &disc_fwd,
            &critic,
            &batch.images,
            &fake,
            &batch.source_labels,
            &mut self.rng_gp,
        )?;
        let total = total_d(&tape, terms.adv_d, terms.gp, terms.cls_real, &self.weights);
        let report = LossReport {
            adv_d: tape.value(terms.adv_d).item(),
            gp: tape.value(terms.gp).item(),
            cls_real: tape.value(terms.cls_real).item(),
            total_d: tape.value(total).item(),
            ..LossReport::default()
        };
        self.check_finite(&[
            ("adv_d", report.adv_d),
            ("gp", report.gp),
            ("cls_real", report.cls_real),
            ("total_d", report.total_d),
        ])?;

        let grads: Vec<Tensor> = tape
            .grad(total, &dv)
            .into_iter()
            .map(|g| tape.value(g))
            .collect();
        for g in &grads {
            if !g.all_finite() {
                return Err(TrainError::NonFinite {
                    term: "discriminator gradient".into(),
                    step: self.step,
                });
            }
        }
        let params: Vec<&mut Tensor> = self
            .discriminator
            .params
            .tensors_mut()
            .map(|(_, t)| t)
            .collect();
        self.opt_d.step(params, &grads, lr);
        Ok(report)
    }

    pub fn bitwise_eq(&self, other: &TrainState) -> bool {
        self.step == other.step
            && self.epoch == other.epoch
            && self.generator.params.bitwise_eq(&other.generator.params)
            && self.encoder.params.bitwise_eq(&other.encoder.params)
            && self
                .discriminator
                .params
                .bitwise_eq(&other.discriminator.params)
            && self.opt_ge.bitwise_eq(&other.opt_ge)
            && self.opt_d.bitwise_eq(&other.opt_d)
            && self.rng_data.word_pos() == other.rng_data.word_pos()
            && self.rng_latent.word_pos() == other.rng_latent.word_pos()
            && self.rng_reparam.word_pos() == other.rng_reparam.word_pos()
            && self.rng_gp.word_pos() == other.rng_gp.word_pos()
    }
}

// ---------------------------------------------------------------------------
// training loop

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Stop after this many optimizer steps instead of the full schedule.
    pub max_steps: Option<u64>,
}

/// Optimizer steps per epoch: one per full batch in the dataset.
pub fn steps_per_epoch(ds: &Dataset, cfg: &TrainConfig) -> u64 {
    ((ds.len() / cfg.batch_size) as u64).max(1)
}

/// Run (or continue) training on `ds`, writing one log line per step and a
/// checkpoint at every epoch boundary plus `checkpoint-last.bin` at the end.
/// Returns the path of the final checkpoint.
pub fn train(
    state: &mut TrainState,
    ds: &Dataset,
    out: &Path,
    opts: &TrainOptions,
) -> Result<PathBuf, TrainError> {
    if ds.num_domains() != state.model.num_domains {
        return Err(TrainError::DomainMismatch {
            dataset: ds.num_domains(),
            config: state.model.num_domains,
        });
    }
    let spe = steps_per_epoch(ds, &state.train);
    let total_steps = opts
        .max_steps
        .unwrap_or(state.train.total_epochs() as u64 * spe);
    let needed_epochs = total_steps.div_ceil(spe) as u32;
    if needed_epochs > state.train.total_epochs() {
        return Err(TrainError::ScheduleExceeded {
            needed: needed_epochs,
            available: state.train.total_epochs(),
        });
    }
    fs::create_dir_all(out).map_err(io_err(out))?;
    let log_path = out.join("train.log");
    let log_file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(io_err(&log_path))?;
    let mut log = BufWriter::new(log_file);

    while state.step < total_steps {
        let epoch = state.step / spe;
        state.epoch = epoch;
        let lr = lr_at_epoch(&state.train, epoch as u32)?;
        let batch = sample_batch(ds, state.train.batch_size, &mut state.rng_data)?;
        let (phase, report) = match phase_for_step(&state.train, state.step) {
            Phase::GeneratorEncoder => ("g", state.g_step(&batch, lr)?),
            Phase::Discriminator => ("d", state.d_step(&batch, lr)?),
        };
        writeln!(
            log,
            "step={},epoch={},phase={},{}",
            state.step,
            epoch,
            phase,
            report.log_line()
        )
        .map_err(io_err(&log_path))?;
        log.flush().map_err(io_err(&log_path))?;
        state.step += 1;
        if state.step % spe == 0 {
            state.epoch = state.step / spe;
            let ckpt = out.join(format!("checkpoint-epoch{:04}.bin", epoch));
            save_checkpoint(state, &ckpt)?;
        }
    }
    state.epoch = state.step / spe;
    let last = out.join("checkpoint-last.bin");
    save_checkpoint(state, &last)?;
    Ok(last)
}

/// Translate each `[C,S,S]` image toward `target` with an independent prior
/// draw per image; forward evaluation only.
pub fn translate_images(
    gen: &Generator,
    cfg: &ModelConfig,
    images: &[Tensor],
    target: usize,
    z_rng: &mut RandomSource,
) -> Result<Vec<Tensor>, TrainError> {
    let label = crate::data::encode_label(target, cfg.num_domains)?;
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(16) {
        let n = chunk.len();
        let (c, s) = (cfg.in_channels, cfg.image_size);
        let mut data = Vec::with_capacity(n * c * s * s);
        for img in chunk {
            data.extend_from_slice(img.data());
        }
        let mut z = vec![0.0; n * cfg.latent_dim];
        z_rng.fill_normal(&mut z);
        let mut labels = vec![0.0; n * cfg.num_domains];
        for row in 0..n {
            labels[row * cfg.num_domains..(row + 1) * cfg.num_domains]
                .copy_from_slice(label.data());
        }
        let tape = Tape::new();
        let gv = gen.bind(&tape);
        let y = generate(
            &tape,
            gen,
            &gv,
            tape.input(Tensor::new(vec![n, c, s, s], data)),
            tape.constant(Tensor::new(vec![n, cfg.num_domains], labels)),
            tape.constant(Tensor::new(vec![n, cfg.latent_dim], z)),
        )?;
        let v = tape.value(y);
        let per = c * s * s;
        for i in 0..n {
            out.push(Tensor::new(
                vec![c, s, s],
                v.data()[i * per..(i + 1) * per].to_vec(),
            ));
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// checkpoints

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Writer { buf: Vec::new() }
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u128(&mut self, v: u128) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn string(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.buf.extend_from_slice(s.as_bytes());
    }
    fn tensor(&mut self, t: &Tensor) {
        self.u32(t.shape().len() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for &v in t.data() {
            self.u64(v.to_bits());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8], TrainError> {
        if self.pos + n > self.buf.len() {
            return Err(TrainError::Checkpoint("truncated file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, TrainError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, TrainError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, TrainError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn u128(&mut self) -> Result<u128, TrainError> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }
    fn string(&mut self) -> Result<String, TrainError> {
        let len = self.u64()? as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| TrainError::Checkpoint("bad string".into()))
    }
    fn tensor(&mut self) -> Result<Tensor, TrainError> {
        let rank = self.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64()? as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(f64::from_bits(self.u64()?));
        }
        Ok(Tensor::new(shape, data))
    }
}

fn write_param_set(w: &mut Writer, ps: &ParamSet) {
    w.u32(ps.len() as u32);
    for (name, t) in ps.tensors() {
        w.string(name);
        w.tensor(t);
    }
}

fn read_into_param_set(r: &mut Reader, ps: &mut ParamSet) -> Result<(), TrainError> {
    let count = r.u32()? as usize;
    if count != ps.len() {
        return Err(TrainError::Checkpoint(format!(
            "expected {} parameters, found {count}",
            ps.len()
        )));
    }
    for _ in 0..count {
        let name = r.string()?;
        let tensor = r.tensor()?;
        if !ps.set_by_name(&name, tensor) {
            return Err(TrainError::Checkpoint(format!(
                "unknown or mis-shaped parameter `{name}`"
            )));
        }
    }
    Ok(())
}

fn write_adam(w: &mut Writer, opt: &Adam) {
    w.u64(opt.t);
    w.u32(opt.m.len() as u32);
    for t in &opt.m {
        w.tensor(t);
    }
    for t in &opt.v {
        w.tensor(t);
    }
}

fn read_adam(r: &mut Reader, opt: &mut Adam) -> Result<(), TrainError> {
    opt.t = r.u64()?;
    let count = r.u32()? as usize;
    if count != opt.m.len() {
        return Err(TrainError::Checkpoint("optimizer state size mismatch".into()));
    }
    for slot in opt.m.iter_mut() {
        *slot = r.tensor()?;
    }
    for slot in opt.v.iter_mut() {
        *slot = r.tensor()?;
    }
    Ok(())
}

/// Serialize the full state: version tag, config triple, counters, random
/// stream positions, all named tensors, and both optimizer states.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<(), TrainError> {
    let mut w = Writer::new();
    w.buf.extend_from_slice(CHECKPOINT_MAGIC);
    w.string(&serialize_config(&state.model, &state.weights, &state.train));
    w.u8(state.train.invert_update_ratio as u8);
    w.u8(match state.train.cycle_latent {
        CycleLatent::Encoded => 0,
        CycleLatent::Forward => 1,
    });
    w.u64(state.epoch);
    w.u64(state.step);
    w.u32(4);
    for (name, rng) in [
        (STREAM_DATA, &state.rng_data),
        (STREAM_LATENT, &state.rng_latent),
        (STREAM_REPARAM, &state.rng_reparam),
        (STREAM_GP, &state.rng_gp),
    ] {
        w.string(name);
        w.u128(rng.word_pos());
    }
    write_param_set(&mut w, &state.generator.params);
    write_param_set(&mut w, &state.encoder.params);
    write_param_set(&mut w, &state.discriminator.params);
    write_adam(&mut w, &state.opt_ge);
    write_adam(&mut w, &state.opt_d);
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &w.buf).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))?;
    Ok(())
}

/// Restore a [`TrainState`] from a checkpoint file.
pub fn load_checkpoint(path: &Path) -> Result<TrainState, TrainError> {
    let buf = fs::read(path).map_err(io_err(path))?;
    let mut r = Reader::new(&buf);
    let magic = r.take(8)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(TrainError::Checkpoint(format!(
            "bad version tag {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let config_text = r.string()?;
    let (model, weights, mut train) = parse_config(&config_text)?;
    train.invert_update_ratio = r.u8()? != 0;
    train.cycle_latent = match r.u8()? {
        0 => CycleLatent::Encoded,
        1 => CycleLatent::Forward,
        other => {
            return Err(TrainError::Checkpoint(format!(
                "unknown cycle latent mode {other}"
            )))
        }
    };
    let mut state = TrainState::new(model, weights, train)?;
    state.epoch = r.u64()?;
    state.step = r.u64()?;
    let streams = r.u32()?;
    for _ in 0..streams {
        let name = r.string()?;
        let pos = r.u128()?;
        match name.as_str() {
            STREAM_DATA => state.rng_data.set_word_pos(pos),
            STREAM_LATENT => state.rng_latent.set_word_pos(pos),
            STREAM_REPARAM => state.rng_reparam.set_word_pos(pos),
            STREAM_GP => state.rng_gp.set_word_pos(pos),
            other => {
                return Err(TrainError::Checkpoint(format!("unknown stream `{other}`")))
            }
        }
    }
    read_into_param_set(&mut r, &mut state.generator.params)?;
    read_into_param_set(&mut r, &mut state.encoder.params)?;
    read_into_param_set(&mut r, &mut state.discriminator.params)?;
    read_adam(&mut r, &mut state.opt_ge)?;
    read_adam(&mut r, &mut state.opt_d)?;
    if r.pos != buf.len() {
        return Err(TrainError::Checkpoint("trailing bytes".into()));
    }
    Ok(state)
}

/// Load a checkpoint and require its model config to match `expected`.
pub fn load_checkpoint_expecting(
    path: &Path,
    expected: &ModelConfig,
) -> Result<TrainState, TrainError> {
    let state = load_checkpoint(path)?;
    if &state.model != expected {
        return Err(TrainError::ConfigMismatch);
    }
    Ok(state)
}
