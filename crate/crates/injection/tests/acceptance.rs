//! Acceptance suite: seven verifiable criteria covering the loss formulas,
//! gradient correctness (including the second-order path through the
//! gradient penalty), the Fréchet oracle, bitwise training determinism, and
//! the toy-scale learning trends. Runs sequentially and prints one
//! pass/fail line per criterion.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use injection::config::{Backbone, CycleLatent, LossWeights, ModelConfig, TrainConfig};
use injection::data::{make_toy_dataset, sample_batch, Dataset, ToySpec};
use injection::metrics::{
    diversity_all_pairs, fid, frechet_distance, FrozenConvExtractor, GaussianStats,
};
use injection::nn::{
    build_discriminator, build_encoder, build_generator, discriminate, encode, generate, ParamSet,
};
use injection::objectives::{
    classification_loss, gradient_penalty, kl_to_prior, total_d_value, total_g_value,
};
use injection::rng::RandomSource;
use injection::tensor::{Tape, Tensor, Var};
use injection::trainer::{
    d_term_graph, g_term_graph, steps_per_epoch, train, translate_images, TrainOptions, TrainState,
    STREAM_DATA,
};

// ---------------------------------------------------------------------------
// shared toy-scale setup

const TOY_SEED: u64 = 42;
const RUN_SEED: u64 = 7;
const TREND_STEPS: u64 = 2000;

fn toy_dataset() -> Dataset {
    // K=2, 32 images per domain, 32x32.
    make_toy_dataset(
        &ToySpec {
            num_domains: 2,
            per_domain: 32,
            image_size: 32,
        },
        &mut RandomSource::new(TOY_SEED, "toy"),
    )
    .unwrap()
}

fn toy_model(backbone: Backbone) -> ModelConfig {
    ModelConfig {
        image_size: 32,
        in_channels: 3,
        num_domains: 2,
        latent_dim: 8,
        base_width: 8,
        depth: 2,
        backbone,
        ..ModelConfig::default()
    }
}

fn toy_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        base_lr: 1e-3,
        epochs_constant: 10_000,
        epochs_decay: 0,
        seed,
        ..TrainConfig::default()
    }
}

fn scratch_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("inj-acceptance-{}-{name}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    dir
}

fn train_toy(backbone: Backbone, lambda_latent: f64, steps: u64, tag: &str) -> TrainState {
    let ds = toy_dataset();
    let weights = LossWeights {
        lambda_latent,
        ..LossWeights::default()
    };
    let mut state =
        TrainState::new(toy_model(backbone), weights, toy_train_config(RUN_SEED)).unwrap();
    let out = scratch_dir(tag);
    train(
        &mut state,
        &ds,
        &out,
        &TrainOptions {
            max_steps: Some(steps),
        },
    )
    .unwrap();
    state
}

fn variants_of_first_input(state: &TrainState, target: usize, count: usize) -> Vec<Tensor> {
    let ds = toy_dataset();
    let sources = vec![ds.domains[0].images[0].clone(); count];
    translate_images(
        &state.generator,
        &state.model,
        &sources,
        target,
        &mut RandomSource::new(1234, "acceptance-variants"),
    )
    .unwrap()
}

// ---------------------------------------------------------------------------
// criterion 1: loss-formula oracles

fn criterion_1() -> Result<String, String> {
    let mut rng = RandomSource::new(101, "c1");

    // KL against the closed-form Gaussian KL (unit variance), 1e-10.
    for _ in 0..200 {
        let (n, d) = (1 + rng.below(6), 1 + rng.below(10));
        let mut mu = vec![0.0; n * d];
        rng.fill_normal(&mut mu);
        let oracle = mu
            .chunks_exact(d)
            .map(|row| 0.5 * row.iter().map(|m| m * m).sum::<f64>())
            .sum::<f64>()
            / n as f64;
        let tape = Tape::new();
        let v = tape.input(Tensor::new(vec![n, d], mu));
        let got = tape.value(kl_to_prior(&tape, v)).item();
        if (got - oracle).abs() > 1e-10 {
            return Err(format!("kl {got} vs closed form {oracle}"));
        }
    }

    // Gradient penalty on linear critics: exactly (s-1)^2 for s in {0,1,3}.
    let (real, fake) = {
        let mut r = RandomSource::new(5, "c1-gp");
        let mut a = vec![0.0; 4 * 3 * 4 * 4];
        let mut b = vec![0.0; 4 * 3 * 4 * 4];
        r.fill_normal(&mut a);
        r.fill_normal(&mut b);
        (
            Tensor::new(vec![4, 3, 4, 4], a),
            Tensor::new(vec![4, 3, 4, 4], b),
        )
    };
    for (slope, expect) in [(0.0, 1.0), (1.0, 0.0), (3.0, 4.0)] {
        let tape = Tape::new();
        let mut gp_rng = RandomSource::new(9, "c1-alpha");
        let critic = |t: &Tape, x: Var| {
            let per: usize = t.shape(x)[1..].iter().product();
            t.scale(t.sum_per_sample(x), slope / (per as f64).sqrt())
        };
        let p = gradient_penalty(&tape, critic, &real, &fake, &mut gp_rng).unwrap();
        let got = tape.value(p).item();
        if (got - expect).abs() > 1e-12 {
            return Err(format!("gp slope {slope}: {got} vs {expect}"));
        }
    }

    // Classification loss against an independent softmax cross-entropy,
    // 1e-9.
    for _ in 0..200 {
        let (n, k) = (1 + rng.below(4), 2 + rng.below(5));
        let mut logits = vec![0.0; n * k];
        rng.fill_normal(&mut logits);
        let targets: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
        let oracle = logits
            .chunks_exact(k)
            .zip(targets.iter())
            .map(|(row, &t)| {
                let denom: f64 = row.iter().map(|v| v.exp()).sum();
                -(row[t].exp() / denom).ln()
            })
            .sum::<f64>()
            / n as f64;
        let tape = Tape::new();
        let lv = tape.input(Tensor::new(vec![n, k], logits));
        let got = tape
            .value(classification_loss(&tape, lv, &targets).unwrap())
            .item();
        if (got - oracle).abs() > 1e-9 {
            return Err(format!("classification {got} vs oracle {oracle}"));
        }
    }

    // Totals reproduce the weighted sums bit for bit.
    for _ in 0..200 {
        let p: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
        let w = LossWeights {
            lambda_cls: rng.uniform() * 5.0,
            lambda_cls_real: rng.uniform() * 5.0,
            lambda_image: rng.uniform() * 5.0,
            lambda_latent: rng.uniform() * 20.0,
            lambda_kl: rng.uniform(),
            lambda_gp: rng.uniform() * 10.0,
        };
        let tape = Tape::new();
        let s = |v: f64| tape.input(Tensor::scalar(v));
        let td = injection::objectives::total_d(&tape, s(p[0]), s(p[1]), s(p[2]), &w);
        if tape.value(td).item().to_bits() != total_d_value(p[0], p[1], p[2], &w).to_bits() {
            return Err("total_d is not the exact weighted sum".into());
        }
        let tg = injection::objectives::total_g(
            &tape,
            s(p[3]),
            s(p[4]),
            s(p[5]),
            s(p[6]),
            s(p[7]),
            &w,
        );
        if tape.value(tg).item().to_bits()
            != total_g_value(p[3], p[4], p[5], p[6], p[7], &w).to_bits()
        {
            return Err("total_g is not the exact weighted sum".into());
        }
    }

    Ok("kl/gp/classification/totals all match their oracles".into())
}

// ---------------------------------------------------------------------------
// criterion 2: finite-difference gradient checks

/// Evaluates all eight reported loss parts (the seven formulas, the
/// adversarial one viewed from both sides) for a given parameter setting.
struct TermEval<'a> {
    gen: &'a injection::nn::Generator,
    enc: &'a injection::nn::Encoder,
    disc: &'a injection::nn::Discriminator,
    images: Tensor,
    fake: Tensor,
    sources: Vec<usize>,
    targets: Vec<usize>,
    z: Tensor,
    eta: Tensor,
}

const GP_ALPHA_SEED: u64 = 37;

impl TermEval<'_> {
    fn graphs(&self, tape: &Tape, gv: &[Var], ev: &[Var], dv: &[Var]) -> ([Var; 3], [Var; 5]) {
        let disc_fwd =
            |t: &Tape, img: Var| discriminate(t, self.disc, dv, img).expect("disc shapes");
        let critic = |t: &Tape, img: Var| self.disc.critic_scores(t, dv, img);
        let d_terms = d_term_graph(
            tape,
            &disc_fwd,
            &critic,
            &self.images,
            &self.fake,
            &self.sources,
            &mut RandomSource::new(GP_ALPHA_SEED, "c2-alpha"),
        )
        .unwrap();
        let gen_fwd = |t: &Tape, img: Var, label: Var, zv: Var| {
            generate(t, self.gen, gv, img, label, zv).expect("gen shapes")
        };
        let enc_fwd = |t: &Tape, img: Var| encode(t, self.enc, ev, img).expect("enc shapes");
        let g_terms = g_term_graph(
            tape,
            &gen_fwd,
            &enc_fwd,
            &disc_fwd,
            &self.images,
            &self.sources,
            &self.targets,
            2,
            &self.z,
            &self.eta,
            CycleLatent::Encoded,
        )
        .unwrap();
        (
            [d_terms.adv_d, d_terms.gp, d_terms.cls_real],
            [
                g_terms.adv_g,
                g_terms.cls_fake,
                g_terms.cycle,
                g_terms.latent,
                g_terms.kl,
            ],
        )
    }

    fn values(&self, gp: &ParamSet, ep: &ParamSet, dp: &ParamSet) -> [f64; 8] {
        let tape = Tape::new();
        let gv = gp.bind(&tape);
        let ev = ep.bind(&tape);
        let dv = dp.bind(&tape);
        let (d_terms, g_terms) = self.graphs(&tape, &gv, &ev, &dv);
        let mut out = [0.0; 8];
        for (i, v) in d_terms.iter().chain(g_terms.iter()).enumerate() {
            out[i] = tape.value(*v).item();
        }
        out
    }
}

fn criterion_2() -> Result<String, String> {
    // Downscaled config: 8x8 images, width 4, depth 2, f64 throughout.
    let cfg = ModelConfig {
        image_size: 8,
        in_channels: 3,
        num_domains: 2,
        latent_dim: 3,
        base_width: 4,
        depth: 2,
        ..ModelConfig::default()
    };
    let gen = build_generator(&cfg, &mut RandomSource::new(21, "init/gen"));
    let enc = build_encoder(&cfg, &mut RandomSource::new(21, "init/enc"));
    let disc = build_discriminator(&cfg, &mut RandomSource::new(21, "init/disc"));

    let tiny = make_toy_dataset(
        &ToySpec {
            num_domains: 2,
            per_domain: 2,
            image_size: 8,
        },
        &mut RandomSource::new(3, "toy"),
    )
    .unwrap();
    let mut images = tiny.domains[0].images[0].data().to_vec();
    images.extend_from_slice(tiny.domains[1].images[0].data());
    let images = Tensor::new(vec![2, 3, 8, 8], images);
    let sources = vec![0usize, 1];
    let targets = vec![1usize, 0];
    let mut zr = RandomSource::new(8, "c2-z");
    let mut z = vec![0.0; 2 * 3];
    zr.fill_normal(&mut z);
    let mut eta = vec![0.0; 2 * 3];
    zr.fill_normal(&mut eta);

    // The critic input is held fixed (detached), exactly as in a critic
    // update, so the d-side terms are functions of D alone.
    let fake = {
        let tape = Tape::new();
        let gv = gen.bind(&tape);
        let zt = tape.constant(Tensor::new(vec![2, 3], z.clone()));
        let labels = tape.constant(injection::data::onehot_batch(&targets, 2).unwrap());
        let y = generate(&tape, &gen, &gv, tape.input(images.clone()), labels, zt).unwrap();
        tape.value(y)
    };

    let eval = TermEval {
        gen: &gen,
        enc: &enc,
        disc: &disc,
        images,
        fake,
        sources,
        targets,
        z: Tensor::new(vec![2, 3], z),
        eta: Tensor::new(vec![2, 3], eta),
    };

    // Analytic gradients of every term with respect to every parameter.
    let tape = Tape::new();
    let gv = gen.params.bind(&tape);
    let ev = enc.params.bind(&tape);
    let dv = disc.params.bind(&tape);
    let (d_terms, g_terms) = eval.graphs(&tape, &gv, &ev, &dv);
    let all_vars: Vec<Var> = gv.iter().chain(ev.iter()).chain(dv.iter()).copied().collect();
    let terms: Vec<Var> = d_terms.iter().chain(g_terms.iter()).copied().collect();
    let analytic: Vec<Vec<Tensor>> = terms
        .iter()
        .map(|&term| {
            tape.grad(term, &all_vars)
                .into_iter()
                .map(|g| tape.value(g))
                .collect()
        })
        .collect();

    // Central finite differences over every parameter of all three nets.
    let h = 1e-5;
    let names = [
        "adv_d", "gp", "cls_real", "adv_g", "cls_fake", "cycle", "latent", "kl",
    ];
    let mut max_rel: f64 = 0.0;
    let mut checked = 0usize;
    let nets: [&ParamSet; 3] = [&gen.params, &enc.params, &disc.params];
    for (net_idx, net) in nets.iter().enumerate() {
        for pi in 0..net.len() {
            let plen = net.tensors().nth(pi).unwrap().1.len();
            for i in 0..plen {
                let perturb = |delta: f64| -> [f64; 8] {
                    let mut gp = gen.params.clone();
                    let mut ep = enc.params.clone();
                    let mut dp = disc.params.clone();
                    let target = match net_idx {
                        0 => &mut gp,
                        1 => &mut ep,
                        _ => &mut dp,
                    };
                    target.tensors_mut().nth(pi).unwrap().1.make_mut()[i] += delta;
                    eval.values(&gp, &ep, &dp)
                };
                let plus = perturb(h);
                let minus = perturb(-h);
                // Global parameter index in the concatenated var order.
                let flat = match net_idx {
                    0 => pi,
                    1 => gen.params.len() + pi,
                    _ => gen.params.len() + enc.params.len() + pi,
                };
                for t in 0..8 {
                    let fd = (plus[t] - minus[t]) / (2.0 * h);
                    let a = analytic[t][flat].data()[i];
                    let err = (a - fd).abs();
                    let scale = a.abs().max(fd.abs());
                    // Relative tolerance 1e-4 where the gradient is
                    // resolvable; below 1e-7 the central difference is
                    // truncation noise.
                    if err >= 1e-7 {
                        let rel = err / scale;
                        max_rel = max_rel.max(rel);
                        if rel >= 1e-4 {
                            return Err(format!(
                                "term {} net {net_idx} param {pi}[{i}]: analytic {a} vs fd {fd}",
                                names[t]
                            ));
                        }
                    }
                    checked += 1;
                }
            }
        }
    }
    Ok(format!(
        "{checked} (term, parameter) pairs checked, max resolvable relative error {max_rel:.2e}"
    ))
}

// ---------------------------------------------------------------------------
// criterion 3: Fréchet oracle

fn invert(m: &[f64], n: usize) -> Vec<f64> {
    let mut a = m.to_vec();
    let mut inv = vec![0.0; n * n];
    for i in 0..n {
        inv[i * n + i] = 1.0;
    }
    for col in 0..n {
        let mut pivot = col;
        for r in col + 1..n {
            if a[r * n + col].abs() > a[pivot * n + col].abs() {
                pivot = r;
            }
        }
        for j in 0..n {
            a.swap(col * n + j, pivot * n + j);
            inv.swap(col * n + j, pivot * n + j);
        }
        let p = a[col * n + col];
        for j in 0..n {
            a[col * n + j] /= p;
            inv[col * n + j] /= p;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = a[r * n + col];
            if f == 0.0 {
                continue;
            }
            for j in 0..n {
                a[r * n + j] -= f * a[col * n + j];
                inv[r * n + j] -= f * inv[col * n + j];
            }
        }
    }
    inv
}

fn matmul_sq(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            for j in 0..n {
                c[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    c
}

/// Denman-Beavers iteration: tr sqrt(A B) through an algebraic route fully
/// independent of the implementation's eigendecomposition.
fn oracle_tr_sqrt(a: &[f64], b: &[f64], n: usize) -> f64 {
    let mut y = matmul_sq(a, b, n);
    let mut z = vec![0.0; n * n];
    for i in 0..n {
        z[i * n + i] = 1.0;
    }
    for _ in 0..200 {
        let zi = invert(&z, n);
        let yi = invert(&y, n);
        let y_next: Vec<f64> = y.iter().zip(zi.iter()).map(|(p, q)| 0.5 * (p + q)).collect();
        let z_next: Vec<f64> = z.iter().zip(yi.iter()).map(|(p, q)| 0.5 * (p + q)).collect();
        let delta: f64 = y.iter().zip(y_next.iter()).map(|(p, q)| (p - q).abs()).sum();
        y = y_next;
        z = z_next;
        if delta < 1e-14 {
            break;
        }
    }
    (0..n).map(|i| y[i * n + i]).sum()
}

fn random_spd(n: usize, rng: &mut RandomSource) -> Vec<f64> {
    let mut a = vec![0.0; n * n];
    rng.fill_normal(&mut a);
    let mut spd = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for k in 0..n {
                s += a[k * n + i] * a[k * n + j];
            }
            spd[i * n + j] = s + if i == j { 0.05 } else { 0.0 };
        }
    }
    spd
}

fn criterion_3() -> Result<String, String> {
    let mut rng = RandomSource::new(303, "c3");
    let n = 4;
    let mut worst: f64 = 0.0;
    for trial in 0..100 {
        let ca = random_spd(n, &mut rng);
        let cb = random_spd(n, &mut rng);
        let mut mu_a = vec![0.0; n];
        let mut mu_b = vec![0.0; n];
        rng.fill_normal(&mut mu_a);
        rng.fill_normal(&mut mu_b);
        let a = GaussianStats {
            mean: mu_a.clone(),
            cov: ca.clone(),
            dim: n,
        };
        let b = GaussianStats {
            mean: mu_b.clone(),
            cov: cb.clone(),
            dim: n,
        };
        let got = frechet_distance(&a, &b).map_err(|e| e.to_string())?;
        let mean_term: f64 = mu_a
            .iter()
            .zip(mu_b.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let tr: f64 = (0..n).map(|i| ca[i * n + i] + cb[i * n + i]).sum();
        let oracle = mean_term + tr - 2.0 * oracle_tr_sqrt(&ca, &cb, n);
        let err = (got - oracle).abs();
        worst = worst.max(err);
        if err > 1e-6 {
            return Err(format!("trial {trial}: {got} vs oracle {oracle}"));
        }
        // Symmetry and self-distance within 1e-8.
        let ba = frechet_distance(&b, &a).map_err(|e| e.to_string())?;
        if (got - ba).abs() > 1e-8 {
            return Err(format!("asymmetry {got} vs {ba}"));
        }
        if frechet_distance(&a, &a).map_err(|e| e.to_string())? > 1e-8 {
            return Err("self distance above 1e-8".into());
        }
    }
    Ok(format!(
        "100 SPD pairs vs the iteration oracle, worst error {worst:.2e}"
    ))
}

// ---------------------------------------------------------------------------
// criterion 4: bitwise determinism and resume

fn dir_snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .unwrap()
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    files
        .into_iter()
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect()
}

fn criterion_4() -> Result<String, String> {
    let ds = toy_dataset();
    let run = |tag: &str, segments: &[u64]| -> PathBuf {
        let out = scratch_dir(&format!("det-{tag}"));
        let mut state = TrainState::new(
            toy_model(Backbone::Unet),
            LossWeights::default(),
            toy_train_config(RUN_SEED),
        )
        .unwrap();
        for &upto in segments {
            // Re-load from the last checkpoint to model an interrupt.
            if state.step > 0 {
                let ckpt = out.join("checkpoint-last.bin");
                state = injection::trainer::load_checkpoint(&ckpt).unwrap();
            }
            train(
                &mut state,
                &ds,
                &out,
                &TrainOptions {
                    max_steps: Some(upto),
                },
            )
            .unwrap();
        }
        out
    };
    let a = run("a", &[200]);
    let b = run("b", &[200]);
    let c = run("c", &[100, 200]);

    let (sa, sb) = (dir_snapshot(&a), dir_snapshot(&b));
    if sa != sb {
        return Err("two same-seed runs differ".into());
    }
    // The resumed run must reproduce the uninterrupted log and final state.
    let la = fs::read(a.join("train.log")).unwrap();
    let lc = fs::read(c.join("train.log")).unwrap();
    if la != lc {
        return Err("resumed log differs from uninterrupted log".into());
    }
    let ka = fs::read(a.join("checkpoint-last.bin")).unwrap();
    let kc = fs::read(c.join("checkpoint-last.bin")).unwrap();
    if ka != kc {
        return Err("resumed checkpoint differs from uninterrupted checkpoint".into());
    }
    Ok(format!(
        "two 200-step runs identical across {} files; interrupt/resume reproduces log and checkpoint",
        sa.len()
    ))
}

// ---------------------------------------------------------------------------
// criteria 5-7: toy-scale learning trends

struct TrendFixture {
    unet10: TrainState,
    div10: f64,
}

fn criterion_5(fixture: &mut Option<TrendFixture>) -> Result<String, String> {
    let ds = toy_dataset();
    let fx = FrozenConvExtractor::new(3, FrozenConvExtractor::DEFAULT_SEED);

    let unet10 = train_toy(Backbone::Unet, 10.0, TREND_STEPS, "unet10");

    // (a) domain-classifier accuracy on real images > 95%.
    let tape = Tape::new();
    let dv = unet10.discriminator.bind(&tape);
    let mut correct = 0usize;
    let mut total = 0usize;
    for (k, domain) in ds.domains.iter().enumerate() {
        for img in &domain.images {
            let batch = Tensor::new(vec![1, 3, 32, 32], img.data().to_vec());
            let (_, logits) =
                discriminate(&tape, &unet10.discriminator, &dv, tape.input(batch)).unwrap();
            let row = tape.value(logits);
            let pred = row
                .data()
                .iter()
                .enumerate()
                .max_by(|x, y| x.1.partial_cmp(y.1).unwrap())
                .unwrap()
                .0;
            correct += (pred == k) as usize;
            total += 1;
        }
    }
    let acc = correct as f64 / total as f64;
    if acc <= 0.95 {
        return Err(format!("classifier accuracy {acc:.3} <= 0.95"));
    }

    // (b) FID(generated d0->d1, real d1) < FID(real d0, real d1).
    let d0 = &ds.domains[0].images;
    let d1 = &ds.domains[1].images;
    let sources: Vec<Tensor> = (0..256).map(|i| d0[i % d0.len()].clone()).collect();
    let generated = translate_images(
        &unet10.generator,
        &unet10.model,
        &sources,
        1,
        &mut RandomSource::new(99, "c5-z"),
    )
    .unwrap();
    let fid_gen = fid(d1, &generated, &fx, 256, true, &mut RandomSource::new(5, "c5-fid"))
        .map_err(|e| e.to_string())?;
    let fid_real = fid(d1, d0, &fx, 256, true, &mut RandomSource::new(5, "c5-fid"))
        .map_err(|e| e.to_string())?;
    if fid_gen >= fid_real {
        return Err(format!(
            "FID(gen, d1) = {fid_gen:.3} not below FID(d0, d1) = {fid_real:.3}"
        ));
    }

    // (c) diversity with lambda_latent=10 at least 3x the lambda_latent=0
    // run.
    let div10 = diversity_all_pairs(&variants_of_first_input(&unet10, 1, 64), &fx)
        .map_err(|e| e.to_string())?;
    let unet0 = train_toy(Backbone::Unet, 0.0, TREND_STEPS, "unet0");
    let div0 = diversity_all_pairs(&variants_of_first_input(&unet0, 1, 64), &fx)
        .map_err(|e| e.to_string())?;
    if div10 < 3.0 * div0 {
        return Err(format!(
            "diversity {div10:.5} with latent weight 10 is not 3x {div0:.5} without it"
        ));
    }

    *fixture = Some(TrendFixture { unet10, div10 });
    Ok(format!(
        "cls acc {acc:.3}; FID {fid_gen:.2} < {fid_real:.2}; diversity {div10:.4} >= 3 x {div0:.4}"
    ))
}

fn criterion_6(fixture: &Option<TrendFixture>) -> Result<String, String> {
    let Some(fixture) = fixture else {
        return Err("criterion 5 fixture unavailable".into());
    };
    let ds = toy_dataset();
    let tcfg = toy_train_config(RUN_SEED);

    // Replay one seeded epoch of batch draws and count the four
    // (source domain, target domain) mapping cases.
    let spe = steps_per_epoch(&ds, &tcfg);
    let mut rng = RandomSource::new(tcfg.seed, STREAM_DATA);
    let mut counts = [[0usize; 2]; 2];
    for _ in 0..spe {
        let batch = sample_batch(&ds, tcfg.batch_size, &mut rng).unwrap();
        for (&s, &t) in batch.source_labels.iter().zip(batch.target_labels.iter()) {
            counts[s][t] += 1;
        }
    }
    for s in 0..2 {
        for t in 0..2 {
            if counts[s][t] == 0 {
                return Err(format!("mapping case {s}->{t} never drawn in an epoch"));
            }
        }
    }

    // Same-domain sampling: translations with c = c0 stay finite and vary
    // with the latent draw.
    let variants = variants_of_first_input(&fixture.unet10, 0, 4);
    let input = ds.domains[0].images[0].clone();
    let mut identity_l1 = Vec::new();
    for v in &variants {
        let l1: f64 = v
            .data()
            .iter()
            .zip(input.data().iter())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / v.len() as f64;
        if !l1.is_finite() {
            return Err("same-domain translation distance is not finite".into());
        }
        identity_l1.push(l1);
    }
    let mut min_pair = f64::INFINITY;
    for i in 0..variants.len() {
        for j in (i + 1)..variants.len() {
            let d: f64 = variants[i]
                .data()
                .iter()
                .zip(variants[j].data().iter())
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                / variants[i].len() as f64;
            min_pair = min_pair.min(d);
        }
    }
    if !(min_pair > 0.0) {
        return Err("same-domain variants are identical".into());
    }
    Ok(format!(
        "mapping counts {:?}; same-domain L1 to input {:?} (finite); min variant distance {min_pair:.4} > 0",
        counts,
        identity_l1
            .iter()
            .map(|v| format!("{v:.3}"))
            .collect::<Vec<_>>()
    ))
}

fn criterion_7(fixture: &Option<TrendFixture>) -> Result<String, String> {
    let Some(fixture) = fixture else {
        return Err("criterion 5 fixture unavailable".into());
    };
    let fx = FrozenConvExtractor::new(3, FrozenConvExtractor::DEFAULT_SEED);
    let resnet10 = train_toy(Backbone::Resnet, 10.0, TREND_STEPS, "resnet10");
    let div_resnet = diversity_all_pairs(&variants_of_first_input(&resnet10, 1, 64), &fx)
        .map_err(|e| e.to_string())?;
    if fixture.div10 <= div_resnet {
        return Err(format!(
            "diversity unet {:.5} not above resnet {div_resnet:.5}",
            fixture.div10
        ));
    }
    Ok(format!(
        "diversity unet {:.4} > resnet {div_resnet:.4}",
        fixture.div10
    ))
}

// ---------------------------------------------------------------------------

fn main() {
    let budgets = [10.0, 120.0, 10.0, 600.0, 2700.0, f64::INFINITY, f64::INFINITY];
    let mut fixture: Option<TrendFixture> = None;
    let mut failures = 0usize;
    for number in 1..=7usize {
        let start = Instant::now();
        let result = match number {
            1 => criterion_1(),
            2 => criterion_2(),
            3 => criterion_3(),
            4 => criterion_4(),
            5 => criterion_5(&mut fixture),
            6 => criterion_6(&fixture),
            7 => criterion_7(&fixture),
            _ => unreachable!(),
        };
        let elapsed = start.elapsed().as_secs_f64();
        let result = result.and_then(|detail| {
            if elapsed <= budgets[number - 1] {
                Ok(detail)
            } else {
                Err(format!(
                    "over runtime budget: {elapsed:.0}s > {:.0}s ({detail})",
                    budgets[number - 1]
                ))
            }
        });
        match result {
            Ok(detail) => println!("[PASS] criterion {number} ({elapsed:.1}s): {detail}"),
            Err(detail) => {
                failures += 1;
                println!("[FAIL] criterion {number} ({elapsed:.1}s): {detail}");
            }
        }
    }
    if failures > 0 {
        eprintln!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all 7 acceptance criteria passed");
}
