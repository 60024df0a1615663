//! Finite-difference checks of every network the pipelines train, with
//! the inputs treated as parameters so input gradients (which integrated
//! gradients relies on) are covered too.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sonorl_tensor::gradcheck::{check_with_floor, GradReport};
use sonorl_tensor::{scoped, Mode, Module, Tape, Tensor, TensorError, Var};

use crate::generative::{Discriminator, Generator, VaeEncoder, VaeGanConfig};
use crate::phantom::{NUM_CLASSES, NUM_PARAMS};
use crate::ppo::{PolicyNet, StateVariant};
use crate::quality::{QualityConfig, QualityNet};

const BATCH: usize = 4;
const SIZE: usize = 16;
/// Smaller than the layer-suite step: a bias feeds hundreds of ReLU-family
/// units, and a wide probe is likely to straddle one of their kinks.
pub const NET_STEP: f64 = 1e-6;
/// Relative-error floor. Central differences of an O(10) loss at
/// `NET_STEP` carry roughly 1e-8 of rounding noise, so gradients under
/// the floor are compared absolutely at 1e-7 instead.
pub const NET_FLOOR: f64 = 1e-4;

type Case = (&'static str, sonorl_tensor::Result<GradReport>);

fn lift<T>(r: crate::Result<T>) -> sonorl_tensor::Result<T> {
    r.map_err(|e| TensorError::Contract(e.to_string()))
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .expect("shape")
        .with_grad()
}

/// `sum(y * r)` for a fixed random `r`, so every output element matters.
fn project<'a>(tape: &mut Tape<'a>, y: Var, seed: u64) -> sonorl_tensor::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x51ED);
    let shape = tape.shape(y).to_vec();
    let r = tape.constant(rand_tensor(&shape, &mut rng));
    let p = tape.mul(y, r)?;
    Ok(tape.sum(p))
}

/// A network together with the inputs it is checked on.
struct Fed<M> {
    net: M,
    inputs: Vec<Tensor>,
}

impl<M: Module> Module for Fed<M> {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v: Vec<(String, &Tensor)> = self.inputs.iter().enumerate().map(|(i, t)| (format!("input{i}"), t)).collect();
        v.extend(scoped("net", self.net.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v: Vec<(String, &mut Tensor)> =
            self.inputs.iter_mut().enumerate().map(|(i, t)| (format!("input{i}"), t)).collect();
        v.extend(scoped("net", self.net.params_mut()));
        v
    }
}

fn policy_case(name: &'static str, variant: StateVariant, outputs: usize, seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let net = match PolicyNet::new(variant, SIZE, &[2, 3, 3], 6, outputs, 1.0, &mut rng) {
        Ok(n) => n,
        Err(e) => return (name, Err(TensorError::Contract(e.to_string()))),
    };
    let mut fed = Fed {
        net,
        inputs: vec![rand_tensor(&[BATCH, 1, SIZE, SIZE], &mut rng), rand_tensor(&[BATCH, 6], &mut rng)],
    };
    let r = check_with_floor(
        &mut fed,
        |m, t| {
            let img = m.net.image.is_some().then(|| t.param(&m.inputs[0]));
            let pose = m.net.params.is_some().then(|| t.param(&m.inputs[1]));
            let y = lift(m.net.forward(t, img, pose, Mode::Train))?;
            let y = if outputs > 1 { t.softmax(y)? } else { y };
            project(t, y, seed)
        },
        NET_STEP,
        1,
        NET_FLOOR,
    );
    (name, r)
}

fn quality_case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = QualityConfig {
        input_size: SIZE,
        channels: vec![2, 3, 3],
        feature_dim: 6,
        grade_hidden: 4,
        ..QualityConfig::default()
    };
    let net = match QualityNet::new(&cfg, &mut rng) {
        Ok(n) => n,
        Err(e) => return ("quality_net", Err(TensorError::Contract(e.to_string()))),
    };
    let labels: Vec<usize> = (0..BATCH).map(|_| rng.gen_range(0..NUM_CLASSES)).collect();
    let mut fed = Fed {
        net,
        inputs: vec![rand_tensor(&[BATCH, 1, SIZE, SIZE], &mut rng)],
    };
    let r = check_with_floor(
        &mut fed,
        |m, t| {
            let x = t.param(&m.inputs[0]);
            let f = lift(m.net.encoder.forward(t, x, Mode::Train))?;
            let logits = m.net.class_head.forward(t, f)?;
            let lp = t.log_softmax(logits)?;
            let picked = t.gather_rows(lp, &labels)?;
            let ce = t.mean(picked);
            let g = lift(m.net.grade_head.forward(t, f))?;
            let g = project(t, g, seed)?;
            let ce = t.scale(ce, -1.0);
            t.add(ce, g)
        },
        NET_STEP,
        1,
        NET_FLOOR,
    );
    ("quality_net", r)
}

struct VaeGanNets {
    enc: VaeEncoder,
    gen: Generator,
    disc: Discriminator,
}

impl Module for VaeGanNets {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v = scoped("enc", self.enc.params());
        v.extend(scoped("gen", self.gen.params()));
        v.extend(scoped("disc", self.disc.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = scoped("enc", self.enc.params_mut());
        v.extend(scoped("gen", self.gen.params_mut()));
        v.extend(scoped("disc", self.disc.params_mut()));
        v
    }
}

/// Encoder, reparameterized latent, generator and discriminator under
/// the full generator-side objective: L1 reconstruction, KL and the
/// adversarial term.
fn vaegan_case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = VaeGanConfig {
        image_size: SIZE,
        latent_dim: 3,
        channels: [2, 3, 3],
        cond_embed: 4,
        ..VaeGanConfig::default()
    };
    let nets = VaeGanNets {
        enc: VaeEncoder::new(&cfg, &mut rng),
        gen: Generator::new(&cfg, &mut rng),
        disc: Discriminator::new(&cfg, &mut rng),
    };
    let eps = rand_tensor(&[BATCH, cfg.latent_dim], &mut rng);
    let mut fed = Fed {
        net: nets,
        inputs: vec![rand_tensor(&[BATCH, 1, SIZE, SIZE], &mut rng), rand_tensor(&[BATCH, NUM_PARAMS], &mut rng)],
    };
    let r = check_with_floor(
        &mut fed,
        |m, t| {
            let x = t.param(&m.inputs[0]);
            let c = t.param(&m.inputs[1]);
            let (mu, lv) = lift(m.net.enc.forward(t, x, Mode::Train))?;
            let half = t.scale(lv, 0.5);
            let sd = t.exp(half);
            let e = t.constant(eps.clone());
            let noise = t.mul(sd, e)?;
            let z = t.add(mu, noise)?;
            let xh = lift(m.net.gen.forward(t, z, c, Mode::Train))?;
            let diff = t.sub(xh, x)?;
            let ad = t.abs(diff);
            let rec = t.mean(ad);
            // KL(N(mu, e^lv) || N(0, 1)) up to the constant
            let mu2 = t.square(mu);
            let elv = t.exp(lv);
            let a = t.add(mu2, elv)?;
            let a = t.sub(a, lv)?;
            let kl = t.mean(a);
            let d = lift(m.net.disc.forward(t, xh, c, Mode::Train))?;
            let adv = t.bce_with_logits(d, 1.0);
            let rec = t.scale(rec, cfg.lambda_rec);
            let kl = t.scale(kl, cfg.lambda_kl);
            let s = t.add(rec, kl)?;
            t.add(s, adv)
        },
        NET_STEP,
        1,
        NET_FLOOR,
    );
    ("vaegan_encoder_generator_discriminator", r)
}

/// Every network case for one seed.
pub fn network_suite(seed: u64) -> Vec<Case> {
    vec![
        policy_case("policy_image_actor", StateVariant::Image, 13, seed),
        policy_case("policy_params_actor", StateVariant::Params, 13, seed),
        policy_case("policy_multimodal_actor", StateVariant::Multimodal, 13, seed),
        policy_case("policy_multimodal_critic", StateVariant::Multimodal, 1, seed),
        quality_case(seed),
        vaegan_case(seed),
    ]
}
