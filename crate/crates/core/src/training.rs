//! Losses and the two-phase optimization loops.
//!
//! Phase 1 pretrains the pair encoders and the restorer: priors come straight
//! from the pair encoders and the loss is reconstruction plus the component
//! supervision on the auxiliary decoder. Phase 2 adds the two latent samplers:
//! priors are sampled from noise conditioned on the degraded components, the
//! sampled vectors drive the restorer, and the latent loss pulls them toward
//! the pair-encoder targets while everything trains jointly.
//!
//! All parameter updates run through one Adam instance in parameter insertion
//! order, so a run is reproducible from (config, seed, data).

use indexmap::IndexMap;
use ndarray::{Array3, ArrayD};
use rand::Rng;

use crate::config::TrainConfig;
use crate::error::Error;
use crate::metrics;
use crate::priors;
use crate::retinex::{decompose, RetinexPair};
use crate::rgformer;
use crate::rldm;
use crate::tensor::{self, Binder, ParamSet, Tape, Var};
use crate::Result;

/// One named training pair; images are (H, W, 3) in [0, 1].
#[derive(Debug, Clone)]
pub struct TrainPair {
    pub name: String,
    pub gt: Array3<f64>,
    pub lq: Array3<f64>,
}

#[derive(Debug, Clone)]
pub struct LossReport {
    pub iteration: usize,
    pub lr: f64,
    pub total: f64,
    /// Raw (unweighted) component values: rec, retinex, dif_r, dif_l.
    pub components: IndexMap<String, f64>,
}

impl LossReport {
    /// Recomputes the weighted sum the loop claims to have minimized.
    pub fn weighted_total(&self, cfg: &TrainConfig) -> f64 {
        let get = |k: &str| self.components.get(k).copied().unwrap_or(0.0);
        if cfg.phase == 1 {
            get("rec") + cfg.lambda1 * get("retinex")
        } else {
            get("dif_r") + get("dif_l") + cfg.lambda2 * get("rec") + cfg.lambda3 * get("retinex")
        }
    }
}

/// Phase-2 evaluation snapshot used for logging and early stopping.
#[derive(Debug, Clone, Copy)]
pub struct PriorEval {
    pub mean_cosine: f64,
    pub psnr_sampled: f64,
    pub psnr_random: f64,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub iterations_run: usize,
    pub stopped_early: bool,
    pub final_train_psnr: Option<f64>,
    pub final_prior_eval: Option<PriorEval>,
}

/// One periodic evaluation: train PSNR/SSIM in phase 1, prior quality in
/// phase 2.
#[derive(Debug, Clone, Copy)]
pub struct EvalEvent {
    pub iteration: usize,
    pub train_psnr: Option<f64>,
    pub train_ssim: Option<f64>,
    pub prior: Option<PriorEval>,
}

/// Observers for the training loop; use `TrainHooks::default()` to ignore
/// everything.
#[derive(Default)]
pub struct TrainHooks<'a> {
    pub on_report: Option<&'a mut dyn FnMut(&LossReport)>,
    pub on_eval: Option<&'a mut dyn FnMut(&EvalEvent)>,
}

pub fn loss_rec(t: &Tape, hq: Var, gt: Var) -> Var {
    tensor::mean_abs_diff(t, hq, gt)
}

/// Component supervision: the first-encoder tap reconstructs the degraded
/// components, the last-decoder tap the clean ones. Four mean-L1 terms,
/// reflectance before illumination, degraded target before clean.
pub fn loss_retinex(
    t: &Tape,
    aux_first: (Var, Var),
    aux_last: (Var, Var),
    lq_pair: &RetinexPair,
    gt_pair: &RetinexPair,
) -> Var {
    let leaf = |x: &Array3<f64>| t.leaf(x.to_owned().into_dyn().into_shared());
    let r_lq = tensor::mean_abs_diff(t, aux_first.0, leaf(&lq_pair.reflectance));
    let l_lq = tensor::mean_abs_diff(t, aux_first.1, leaf(&lq_pair.illumination));
    let r_gt = tensor::mean_abs_diff(t, aux_last.0, leaf(&gt_pair.reflectance));
    let l_gt = tensor::mean_abs_diff(t, aux_last.1, leaf(&gt_pair.illumination));
    tensor::add(t, tensor::add(t, r_lq, l_lq), tensor::add(t, r_gt, l_gt))
}

/// Latent loss: one mean-L1 term per branch, reported separately.
pub fn loss_dif(t: &Tape, z_r: Var, z_hat_r: Var, z_l: Var, z_hat_l: Var) -> (Var, Var) {
    (
        tensor::mean_abs_diff(t, z_r, z_hat_r),
        tensor::mean_abs_diff(t, z_l, z_hat_l),
    )
}

/// Cosine-annealed learning rate over the configured iteration budget.
pub fn cosine_lr(cfg: &TrainConfig, iteration: usize) -> f64 {
    if cfg.iterations <= 1 {
        return cfg.lr_start;
    }
    let p = iteration.min(cfg.iterations - 1) as f64 / (cfg.iterations - 1) as f64;
    cfg.lr_end + 0.5 * (cfg.lr_start - cfg.lr_end) * (1.0 + (std::f64::consts::PI * p).cos())
}

fn rot90(img: &Array3<f64>) -> Array3<f64> {
    let (h, w, c) = img.dim();
    Array3::from_shape_fn((w, h, c), |(y, x, ch)| img[[x, w - 1 - y, ch]])
}

fn flip_h(img: &Array3<f64>) -> Array3<f64> {
    let (h, w, c) = img.dim();
    Array3::from_shape_fn((h, w, c), |(y, x, ch)| img[[y, w - 1 - x, ch]])
}

/// The eight flips/rotations of the dihedral group: optional horizontal
/// mirror (bit 2) followed by `code & 3` quarter turns. Code 0 is the
/// identity; the same code is always applied to both images of a pair.
pub fn augment_image(img: &Array3<f64>, code: u8) -> Array3<f64> {
    let mut out = if code & 4 != 0 { flip_h(img) } else { img.clone() };
    for _ in 0..(code & 3) {
        out = rot90(&out);
    }
    out
}

/// Adam with per-parameter first/second moments kept in two parallel sets
/// that share the model's parameter names.
#[derive(Debug)]
pub struct Optimizer {
    pub m: ParamSet,
    pub v: ParamSet,
    pub step: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Optimizer {
    pub fn new(params: &ParamSet, cfg: &TrainConfig) -> Self {
        let mut m = ParamSet::new();
        let mut v = ParamSet::new();
        for (name, value) in params.iter() {
            m.insert(name.clone(), tensor::zeros(value.shape()));
            v.insert(name.clone(), tensor::zeros(value.shape()));
        }
        Optimizer {
            m,
            v,
            step: 0,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
        }
    }

    /// One update over every trainable parameter. Frozen parameters keep
    /// both their value and their moments.
    pub fn apply(
        &mut self,
        params: &mut ParamSet,
        grads: &IndexMap<String, ArrayD<f64>>,
        lr: f64,
        trainable: &dyn Fn(&str) -> bool,
    ) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let names: Vec<String> = params.names().cloned().collect();
        for name in names {
            if !trainable(&name) {
                continue;
            }
            let g = match grads.get(&name) {
                Some(g) => g,
                None => continue,
            };
            let mut m = self.m.get(&name).to_owned();
            let mut v = self.v.get(&name).to_owned();
            ndarray::Zip::from(&mut m).and(g).for_each(|m, &g| {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            });
            ndarray::Zip::from(&mut v).and(g).for_each(|v, &g| {
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            });
            let mut p = params.get(&name).to_owned();
            ndarray::Zip::from(&mut p).and(&m).and(&v).for_each(|p, &m, &v| {
                *p -= lr * (m / bc1) / ((v / bc2).sqrt() + self.eps);
            });
            params.set(&name, p.into_shared());
            self.m.set(&name, m.into_shared());
            self.v.set(&name, v.into_shared());
        }
    }
}

/// Fresh model parameters for a configuration: the four prior encoders, the
/// restorer, and (when enabled) the two latent denoisers, created in a fixed
/// order from one seeded stream.
pub fn init_model(cfg: &crate::ModelConfig, seed: u64) -> ParamSet {
    let mut params = ParamSet::new();
    let mut rng = crate::rng::stream(seed, "model-init", 0);
    priors::init_prior_encoders(&mut params, cfg, &mut rng);
    rgformer::init_rgformer(&mut params, cfg, &mut rng);
    if cfg.use_diffusion {
        rldm::init_denoiser(&mut params, "rldm.refl", cfg.refl_prior_len(), cfg, &mut rng);
        rldm::init_denoiser(&mut params, "rldm.illum", cfg.illum_prior_len(), cfg, &mut rng);
    }
    params
}

/// Deterministic batch plan for one iteration: (pair index, augment code,
/// crop top, crop left) per slot.
fn batch_plan(cfg: &TrainConfig, data: &[TrainPair], iteration: usize) -> Vec<(usize, u8, usize, usize)> {
    let mut rng = crate::rng::stream(cfg.seed, "batch", iteration as u64);
    (0..cfg.batch)
        .map(|_| {
            let idx = rng.gen_range(0..data.len());
            let code = if cfg.augment { rng.gen_range(0..8u8) } else { 0 };
            let (h, w, _) = data[idx].gt.dim();
            let top = rng.gen_range(0..=(h - cfg.patch));
            let left = rng.gen_range(0..=(w - cfg.patch));
            (idx, code, top, left)
        })
        .collect()
}

fn crop(img: &Array3<f64>, top: usize, left: usize, size: usize) -> Array3<f64> {
    img.slice(ndarray::s![top..top + size, left..left + size, ..]).to_owned()
}

struct SampleLoss {
    total: f64,
    rec: f64,
    retinex: f64,
    dif_r: f64,
    dif_l: f64,
    grads: IndexMap<String, ArrayD<f64>>,
}

/// Forward + backward for one (gt, lq) patch under the phase's loss. The
/// priors and condition vectors come from the whole pair, not the patch:
/// the codes the restorer conditions on are then stable per image and
/// identical to the ones inference and evaluation will compute.
fn sample_step(
    cfg: &TrainConfig,
    params: &ParamSet,
    full: &TrainPair,
    gt: &Array3<f64>,
    lq: &Array3<f64>,
    noise_slot: u64,
) -> SampleLoss {
    let m = &cfg.model;
    let tape = Tape::new();
    let b = Binder::new(&tape, params);
    let gt_pair = decompose(gt);
    let lq_pair = decompose(lq);
    let full_gt_pair = decompose(&full.gt);
    let full_lq_pair = decompose(&full.lq);

    let (z_r, z_l) = priors::rpe_encode_on_tape(&b, &full_gt_pair, &full_lq_pair, m);

    let (prior_r, prior_l, dif) = if cfg.phase == 1 {
        (z_r, z_l, None)
    } else {
        let (v_r, v_l) = priors::rpe_condition_on_tape(&b, &full_lq_pair, m);
        if m.use_diffusion {
            let sched = rldm::make_schedule(m.diffusion_steps, m.beta_start, m.beta_end);
            let mut rng_r = crate::rng::stream(cfg.seed, "sample-refl", noise_slot);
            let mut rng_l = crate::rng::stream(cfg.seed, "sample-illum", noise_slot);
            let zh_r = rldm::sample_prior_on_tape(
                &b, "rldm.refl", v_r, &sched, m, &mut rng_r,
                m.train_inject_final_noise, cfg.full_unroll,
            );
            let zh_l = rldm::sample_prior_on_tape(
                &b, "rldm.illum", v_l, &sched, m, &mut rng_l,
                m.train_inject_final_noise, cfg.full_unroll,
            );
            let (dr, dl) = loss_dif(&tape, z_r, zh_r, z_l, zh_l);
            (zh_r, zh_l, Some((dr, dl)))
        } else {
            // Diffusion ablated: the condition vectors drive the restorer
            // directly and there is no latent loss.
            (v_r, v_l, None)
        }
    };

    let lqv = tape.leaf(lq.to_owned().into_dyn().into_shared());
    let fw = rgformer::forward_on_tape(&b, lqv, prior_r, prior_l, m, false, &mut Vec::new());
    let gtv = tape.leaf(gt.to_owned().into_dyn().into_shared());
    let rec = loss_rec(&tape, fw.output, gtv);

    let retinex_weight = if cfg.phase == 1 { cfg.lambda1 } else { cfg.lambda3 };
    let retinex = if m.use_aux_decoder && retinex_weight > 0.0 {
        let aux_first = rgformer::aux_decode_on_tape(&b, fw.tap_first);
        let aux_last = rgformer::aux_decode_on_tape(&b, fw.tap_last);
        Some(loss_retinex(&tape, aux_first, aux_last, &lq_pair, &gt_pair))
    } else {
        None
    };

    let mut total = if cfg.phase == 1 {
        rec
    } else {
        tensor::scale(&tape, rec, cfg.lambda2)
    };
    if let Some(rtx) = retinex {
        total = tensor::add(&tape, total, tensor::scale(&tape, rtx, retinex_weight));
    }
    if let Some((dr, dl)) = dif {
        total = tensor::add(&tape, total, tensor::add(&tape, dr, dl));
    }

    let rec_val = tape.scalar_value(rec);
    let retinex_val = retinex.map(|v| tape.scalar_value(v)).unwrap_or(0.0);
    let (dif_r_val, dif_l_val) = dif
        .map(|(dr, dl)| (tape.scalar_value(dr), tape.scalar_value(dl)))
        .unwrap_or((0.0, 0.0));
    let total_val = tape.scalar_value(total);

    let mut grads = tape.backward(total);
    let named = b.take_named(&mut grads);
    SampleLoss {
        total: total_val,
        rec: rec_val,
        retinex: retinex_val,
        dif_r: dif_r_val,
        dif_l: dif_l_val,
        grads: named,
    }
}

fn trainable_filter(cfg: &TrainConfig) -> Box<dyn Fn(&str) -> bool> {
    if cfg.phase == 1 {
        // Phase 1 never touches the condition encoders or the denoisers.
        Box::new(|name: &str| !name.starts_with("cond.") && !name.starts_with("rldm."))
    } else if cfg.joint {
        Box::new(|_: &str| true)
    } else {
        // Joint training disabled: the restorer stays frozen in phase 2.
        Box::new(|name: &str| !name.starts_with("rg.") && !name.starts_with("aux."))
    }
}

/// Mean restoration quality (PSNR dB, SSIM) over the training pairs under
/// phase-1 priors.
pub fn eval_train_quality(
    params: &ParamSet,
    data: &[TrainPair],
    cfg: &TrainConfig,
) -> Result<(f64, f64)> {
    let m = &cfg.model;
    let mut psnr_sum = 0.0;
    let mut ssim_sum = 0.0;
    for pair in data {
        let gt_pair = decompose(&pair.gt);
        let lq_pair = decompose(&pair.lq);
        let z = priors::rpe_encode(params, &gt_pair, &lq_pair, m)?;
        let out = rgformer::restore(params, &pair.lq, &z.z_reflectance, &z.z_illumination, m)?;
        psnr_sum += metrics::psnr(&out, &pair.gt)?;
        ssim_sum += metrics::ssim(&out, &pair.gt)?;
    }
    let n = data.len() as f64;
    Ok((psnr_sum / n, ssim_sum / n))
}

pub fn eval_train_psnr(params: &ParamSet, data: &[TrainPair], cfg: &TrainConfig) -> Result<f64> {
    eval_train_quality(params, data, cfg).map(|(psnr, _)| psnr)
}

/// Phase-2 snapshot: latent agreement plus restoration quality under sampled
/// versus random priors, all on the training pairs.
pub fn eval_prior_quality(
    params: &ParamSet,
    data: &[TrainPair],
    cfg: &TrainConfig,
) -> Result<PriorEval> {
    let m = &cfg.model;
    let mut cos_sum = 0.0;
    let mut psnr_sampled = 0.0;
    let mut psnr_random = 0.0;
    for (i, pair) in data.iter().enumerate() {
        let gt_pair = decompose(&pair.gt);
        let lq_pair = decompose(&pair.lq);
        let z = priors::rpe_encode(params, &gt_pair, &lq_pair, m)?;
        let v = priors::rpe_condition(params, &lq_pair, m)?;
        let zh_r = rldm::sample_prior_seeded(
            params, "rldm.refl", &v.v_reflectance, m, cfg.seed, 2 * i as u64,
        );
        let zh_l = rldm::sample_prior_seeded(
            params, "rldm.illum", &v.v_illumination, m, cfg.seed, 2 * i as u64 + 1,
        );
        cos_sum += 0.5
            * (metrics::cosine_similarity(
                z.z_reflectance.as_slice().unwrap(),
                zh_r.as_slice().unwrap(),
            ) + metrics::cosine_similarity(
                z.z_illumination.as_slice().unwrap(),
                zh_l.as_slice().unwrap(),
            ));
        let out = rgformer::restore(params, &pair.lq, &zh_r, &zh_l, m)?;
        psnr_sampled += metrics::psnr(&out, &pair.gt)?;

        let mut rng = crate::rng::stream(cfg.seed, "baseline-prior", i as u64);
        let rz_r = tensor::randn1(m.refl_prior_len(), &mut rng);
        let rz_l = tensor::randn1(m.illum_prior_len(), &mut rng);
        let base = rgformer::restore(params, &pair.lq, &rz_r, &rz_l, m)?;
        psnr_random += metrics::psnr(&base, &pair.gt)?;
    }
    let n = data.len() as f64;
    Ok(PriorEval {
        mean_cosine: cos_sum / n,
        psnr_sampled: psnr_sampled / n,
        psnr_random: psnr_random / n,
    })
}

/// Runs the configured phase from `start_iteration` to completion or early
/// stop, mutating `params` and `opt` in place. `on_report` sees every logged
/// iteration.
pub fn run_training(
    cfg: &TrainConfig,
    data: &[TrainPair],
    params: &mut ParamSet,
    opt: &mut Optimizer,
    start_iteration: usize,
    history: &mut Vec<LossReport>,
    mut hooks: TrainHooks,
) -> Result<TrainSummary> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    for pair in data {
        let (h, w, _) = pair.gt.dim();
        if pair.gt.dim() != pair.lq.dim() {
            return Err(Error::Data(format!("pair {} has mismatched shapes", pair.name)));
        }
        if h < cfg.patch || w < cfg.patch {
            return Err(Error::Data(format!(
                "pair {} is {h}x{w}, smaller than the {0}-pixel patch",
                pair.name
            )));
        }
    }

    let mut summary = TrainSummary {
        iterations_run: 0,
        stopped_early: false,
        final_train_psnr: None,
        final_prior_eval: None,
    };

    for iteration in start_iteration..cfg.iterations {
        let lr = cosine_lr(cfg, iteration);
        let plan = batch_plan(cfg, data, iteration);
        let mut acc: IndexMap<String, ArrayD<f64>> = IndexMap::new();
        let mut sums = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (slot, (idx, code, top, left)) in plan.into_iter().enumerate() {
            let pair = &data[idx];
            let gt = augment_image(&crop(&pair.gt, top, left, cfg.patch), code);
            let lq = augment_image(&crop(&pair.lq, top, left, cfg.patch), code);
            let noise_slot = (iteration * cfg.batch + slot) as u64;
            let s = sample_step(cfg, params, pair, &gt, &lq, noise_slot);
            sums.0 += s.total;
            sums.1 += s.rec;
            sums.2 += s.retinex;
            sums.3 += s.dif_r;
            sums.4 += s.dif_l;
            for (name, g) in s.grads {
                match acc.entry(name) {
                    indexmap::map::Entry::Occupied(mut e) => {
                        *e.get_mut() += &g;
                    }
                    indexmap::map::Entry::Vacant(e) => {
                        e.insert(g);
                    }
                }
            }
        }
        let bn = cfg.batch as f64;
        for g in acc.values_mut() {
            g.mapv_inplace(|x| x / bn);
        }
        let report = LossReport {
            iteration,
            lr,
            total: sums.0 / bn,
            components: IndexMap::from_iter([
                ("rec".to_string(), sums.1 / bn),
                ("retinex".to_string(), sums.2 / bn),
                ("dif_r".to_string(), sums.3 / bn),
                ("dif_l".to_string(), sums.4 / bn),
            ]),
        };
        if !report.total.is_finite() {
            return Err(Error::NonFiniteLoss { iteration, loss: report.total });
        }

        opt.apply(params, &acc, lr, trainable_filter(cfg).as_ref());
        summary.iterations_run = iteration + 1 - start_iteration;

        let logged = iteration % cfg.log_every == 0 || iteration + 1 == cfg.iterations;
        if logged {
            history.push(report.clone());
            if let Some(f) = hooks.on_report.as_mut() {
                f(&report);
            }
        }

        let eval_now = (iteration + 1) % cfg.eval_every == 0 || iteration + 1 == cfg.iterations;
        if eval_now {
            if cfg.phase == 1 {
                let (psnr, ssim) = eval_train_quality(params, data, cfg)?;
                summary.final_train_psnr = Some(psnr);
                if let Some(f) = hooks.on_eval.as_mut() {
                    f(&EvalEvent {
                        iteration,
                        train_psnr: Some(psnr),
                        train_ssim: Some(ssim),
                        prior: None,
                    });
                }
                // The SSIM bar, when set, must clear together with the PSNR
                // bar for the stop to fire.
                let ssim_ok = cfg.early_stop_ssim.is_none_or(|th| ssim > th);
                if cfg.early_stop_psnr.is_some_and(|th| psnr > th) && ssim_ok {
                    summary.stopped_early = iteration + 1 < cfg.iterations;
                    break;
                }
            } else if cfg.model.use_diffusion {
                let ev = eval_prior_quality(params, data, cfg)?;
                summary.final_prior_eval = Some(ev);
                if let Some(f) = hooks.on_eval.as_mut() {
                    f(&EvalEvent { iteration, train_psnr: None, train_ssim: None, prior: Some(ev) });
                }
                let gap_ok = ev.psnr_sampled - ev.psnr_random >= 1.2;
                if cfg.early_stop_cosine.is_some_and(|th| ev.mean_cosine > th && gap_ok) {
                    summary.stopped_early = iteration + 1 < cfg.iterations;
                    break;
                }
            }
        }
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, Array3};

    fn tiny_train_cfg(phase: u8) -> TrainConfig {
        let mut cfg = TrainConfig::compact(phase);
        cfg.model.c_prime = 4;
        cfg.model.channels = [8, 16, 32, 64];
        cfg.model.heads = [1, 2, 4, 8];
        cfg.model.prior_unshuffle = 2;
        cfg.model.prior_stem_mult = 1;
        cfg.model.time_embed_dim = 8;
        cfg.model.denoiser_hidden_mult = 2;
        cfg.patch = 8;
        cfg.batch = 2;
        cfg.iterations = 1;
        cfg.log_every = 1;
        cfg.eval_every = 1000;
        cfg.early_stop_psnr = None;
        cfg.early_stop_cosine = None;
        cfg
    }

    fn tiny_data(n: usize, size: usize) -> Vec<TrainPair> {
        let mut rng = crate::rng::stream(3, "train-test-data", 0);
        (0..n)
            .map(|i| {
                let gt = Array3::from_shape_fn((size, size, 3), |_| rng.gen_range(0.2..1.0));
                let lq = gt.mapv(|x: f64| (x.powf(2.0) * 0.4).clamp(0.0, 1.0));
                TrainPair { name: format!("pair{i}"), gt, lq }
            })
            .collect()
    }

    #[test]
    fn loss_values_match_reduction_oracles() {
        let tape = Tape::new();
        let mut rng = crate::rng::stream(4, "loss-oracle", 0);
        let a = Array3::from_shape_fn((5, 4, 3), |_| rng.gen_range(0.0..1.0));
        let b = Array3::from_shape_fn((5, 4, 3), |_| rng.gen_range(0.0..1.0));
        let av = tape.leaf(a.clone().into_dyn().into_shared());
        let bv = tape.leaf(b.clone().into_dyn().into_shared());

        let rec = loss_rec(&tape, av, bv);
        let oracle: f64 =
            a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
        assert!((tape.scalar_value(rec) - oracle).abs() < 1e-12);

        let rec_flipped = loss_rec(&tape, bv, av);
        assert_eq!(tape.scalar_value(rec), tape.scalar_value(rec_flipped));

        let offset = a.mapv(|x| x + 0.1);
        let ov = tape.leaf(offset.into_dyn().into_shared());
        let rec_off = loss_rec(&tape, av, ov);
        assert!((tape.scalar_value(rec_off) - 0.1).abs() < 1e-12);

        let same = loss_rec(&tape, av, av);
        assert_eq!(tape.scalar_value(same), 0.0);
    }

    #[test]
    fn retinex_loss_matches_a_four_term_oracle() {
        let mut rng = crate::rng::stream(5, "retinex-oracle", 0);
        let mk3 = |rng: &mut rand_chacha::ChaCha12Rng| {
            Array3::from_shape_fn((4, 4, 3), |_| rng.gen_range(0.0..1.0))
        };
        let mk1 = |rng: &mut rand_chacha::ChaCha12Rng| {
            Array3::from_shape_fn((4, 4, 1), |_| rng.gen_range(0.0..1.0))
        };
        let lq_pair = RetinexPair { reflectance: mk3(&mut rng), illumination: mk1(&mut rng) };
        let gt_pair = RetinexPair { reflectance: mk3(&mut rng), illumination: mk1(&mut rng) };
        let pf = (mk3(&mut rng), mk1(&mut rng));
        let pl = (mk3(&mut rng), mk1(&mut rng));

        let tape = Tape::new();
        let leaf = |x: &Array3<f64>| tape.leaf(x.clone().into_dyn().into_shared());
        let loss = loss_retinex(
            &tape,
            (leaf(&pf.0), leaf(&pf.1)),
            (leaf(&pl.0), leaf(&pl.1)),
            &lq_pair,
            &gt_pair,
        );
        let mean_l1 = |a: &Array3<f64>, b: &Array3<f64>| -> f64 {
            a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
        };
        let oracle = mean_l1(&pf.0, &lq_pair.reflectance)
            + mean_l1(&pf.1, &lq_pair.illumination)
            + mean_l1(&pl.0, &gt_pair.reflectance)
            + mean_l1(&pl.1, &gt_pair.illumination);
        assert!((tape.scalar_value(loss) - oracle).abs() < 1e-9);

        // Single active term: first reflectance off by 0.2, everything else exact.
        let shifted = lq_pair.reflectance.mapv(|x| x + 0.2);
        let loss_single = loss_retinex(
            &tape,
            (leaf(&shifted), leaf(&lq_pair.illumination)),
            (leaf(&gt_pair.reflectance), leaf(&gt_pair.illumination)),
            &lq_pair,
            &gt_pair,
        );
        assert!((tape.scalar_value(loss_single) - 0.2).abs() < 1e-12);
    }

    #[test]
    fn latent_loss_matches_its_oracle() {
        let tape = Tape::new();
        let z_r = Array1::from_vec(vec![0.5, -0.25, 1.0]);
        let zh_r = Array1::from_vec(vec![0.0, 0.25, 1.0]);
        let z_l = Array1::from_vec(vec![2.0, -2.0]);
        let leaf = |x: &Array1<f64>| tape.leaf(x.clone().into_dyn().into_shared());
        let (dr, dl) = loss_dif(&tape, leaf(&z_r), leaf(&zh_r), leaf(&z_l), leaf(&z_l));
        assert!((tape.scalar_value(dr) - (0.5 + 0.5 + 0.0) / 3.0).abs() < 1e-12);
        assert_eq!(tape.scalar_value(dl), 0.0);

        let shifted = z_r.mapv(|x| x + 0.5);
        let (dr2, _) = loss_dif(&tape, leaf(&z_r), leaf(&shifted), leaf(&z_l), leaf(&z_l));
        assert!((tape.scalar_value(dr2) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn cosine_schedule_hits_both_endpoints_and_never_increases() {
        let mut cfg = TrainConfig::compact(1);
        cfg.iterations = 200;
        assert_eq!(cosine_lr(&cfg, 0), cfg.lr_start);
        assert!((cosine_lr(&cfg, cfg.iterations - 1) - cfg.lr_end).abs() < 1e-9);
        let mut prev = f64::INFINITY;
        for i in 0..cfg.iterations {
            let lr = cosine_lr(&cfg, i);
            assert!(lr <= prev + 1e-15, "lr increased at {i}");
            prev = lr;
        }
    }

    #[test]
    fn augmentation_transforms_both_images_identically() {
        let mut rng = crate::rng::stream(6, "aug", 0);
        let gt = Array3::from_shape_fn((6, 6, 3), |_| rng.gen_range(0.0..1.0));
        let lq = gt.mapv(|x| x * 0.5);
        let mut seen = std::collections::HashSet::new();
        for code in 0..8u8 {
            let ag = augment_image(&gt, code);
            let al = augment_image(&lq, code);
            assert_eq!(ag.dim(), (6, 6, 3));
            let ratio_ok = ag
                .iter()
                .zip(al.iter())
                .all(|(g, l)| (l - g * 0.5).abs() < 1e-15);
            assert!(ratio_ok, "code {code} broke pair alignment");
            let key: Vec<u64> = ag.iter().map(|x| x.to_bits()).collect();
            seen.insert(key);
        }
        assert_eq!(seen.len(), 8, "the eight transforms must be distinct");
        assert_eq!(augment_image(&gt, 0), gt);
    }

    #[test]
    fn phase1_report_satisfies_the_weighted_sum_identity() {
        // 16x16 keeps the latent level at 2x2: with a single token the
        // attention row is constantly one and the query path correctly gets
        // zero gradient, which would trip the every-parameter-moves check.
        let mut cfg = tiny_train_cfg(1);
        cfg.patch = 16;
        // Two iterations: the residual head starts at zero, so weights past
        // the auxiliary tap only see gradient once the head has taken its
        // first step.
        cfg.iterations = 2;
        let data = tiny_data(2, 16);
        let mut params = init_model(&cfg.model, cfg.seed);
        let before = params.clone();
        let mut opt = Optimizer::new(&params, &cfg);
        let mut history = Vec::new();
        let summary =
            run_training(&cfg, &data, &mut params, &mut opt, 0, &mut history, TrainHooks::default()).unwrap();
        assert_eq!(summary.iterations_run, 2);
        let report = history.last().unwrap();
        assert!(report.total.is_finite());
        assert!(
            (report.total - report.weighted_total(&cfg)).abs() < 1e-9,
            "weighted sum identity violated"
        );
        assert_eq!(report.components["dif_r"], 0.0);

        // Phase 1 moves the pair encoders and restorer, not the condition
        // encoders or denoisers.
        let mut moved = 0;
        for (name, value) in params.iter() {
            let changed = value != before.get(name);
            if name.starts_with("cond.") || name.starts_with("rldm.") {
                assert!(!changed, "{name} must stay frozen in phase 1");
            } else {
                assert!(changed, "{name} received no update");
                moved += 1;
            }
        }
        assert!(moved > 0);
    }

    #[test]
    fn zero_retinex_weight_leaves_the_aux_decoder_untouched() {
        let mut cfg = tiny_train_cfg(1);
        cfg.lambda1 = 0.0;
        let data = tiny_data(2, 8);
        let mut params = init_model(&cfg.model, cfg.seed);
        let before = params.clone();
        let mut opt = Optimizer::new(&params, &cfg);
        run_training(&cfg, &data, &mut params, &mut opt, 0, &mut Vec::new(), TrainHooks::default()).unwrap();
        for (name, value) in params.iter() {
            if name.starts_with("aux.") {
                assert_eq!(value, before.get(name), "{name} must not move when the weight is 0");
            }
        }
    }

    #[test]
    fn phase2_updates_everything_and_isolates_inactive_paths() {
        let mut cfg = tiny_train_cfg(2);
        cfg.patch = 16;
        // Two iterations, as in the phase-1 test: the zero residual head
        // gates gradient past the auxiliary tap until its first update.
        cfg.iterations = 2;
        let data = tiny_data(2, 16);
        let mut params = init_model(&cfg.model, cfg.seed);
        let before = params.clone();
        let mut opt = Optimizer::new(&params, &cfg);
        let mut history = Vec::new();
        run_training(&cfg, &data, &mut params, &mut opt, 0, &mut history, TrainHooks::default()).unwrap();
        let report = history.last().unwrap();
        assert!((report.total - report.weighted_total(&cfg)).abs() < 1e-9);
        assert!(report.components["dif_r"] > 0.0);
        assert!(report.components["dif_l"] > 0.0);
        for (name, value) in params.iter() {
            assert!(value != before.get(name), "{name} received no update in joint phase 2");
        }

        // With the image losses off, the restorer sits on no active path and
        // must receive exactly zero gradient.
        let mut cfg0 = tiny_train_cfg(2);
        cfg0.patch = 16;
        cfg0.lambda2 = 0.0;
        cfg0.lambda3 = 0.0;
        let mut params0 = init_model(&cfg0.model, cfg0.seed);
        let before0 = params0.clone();
        let mut opt0 = Optimizer::new(&params0, &cfg0);
        run_training(&cfg0, &data, &mut params0, &mut opt0, 0, &mut Vec::new(), TrainHooks::default())
            .unwrap();
        for (name, value) in params0.iter() {
            if name.starts_with("rg.") || name.starts_with("aux.") {
                assert_eq!(value, before0.get(name), "{name} is off-path but moved");
            }
        }
    }

    #[test]
    fn disabling_joint_training_freezes_the_restorer() {
        let mut cfg = tiny_train_cfg(2);
        cfg.joint = false;
        let data = tiny_data(2, 8);
        let mut params = init_model(&cfg.model, cfg.seed);
        let before = params.clone();
        let mut opt = Optimizer::new(&params, &cfg);
        run_training(&cfg, &data, &mut params, &mut opt, 0, &mut Vec::new(), TrainHooks::default()).unwrap();
        let mut rpe_moved = false;
        for (name, value) in params.iter() {
            let changed = value != before.get(name);
            if name.starts_with("rg.") || name.starts_with("aux.") {
                assert!(!changed, "{name} must stay frozen without joint training");
            }
            if name.starts_with("rpe.") && changed {
                rpe_moved = true;
            }
        }
        assert!(rpe_moved, "pair encoders still train without joint mode");
    }

    #[test]
    fn ablated_diffusion_drives_the_restorer_with_condition_vectors() {
        let mut cfg = tiny_train_cfg(2);
        cfg.model.use_diffusion = false;
        let data = tiny_data(2, 8);
        let mut params = init_model(&cfg.model, cfg.seed);
        assert!(!params.contains("rldm.refl.l1.w"));
        let mut opt = Optimizer::new(&params, &cfg);
        let mut history = Vec::new();
        run_training(&cfg, &data, &mut params, &mut opt, 0, &mut history, TrainHooks::default()).unwrap();
        let report = history.last().unwrap();
        assert_eq!(report.components["dif_r"], 0.0);
        assert_eq!(report.components["dif_l"], 0.0);
        assert!((report.total - report.weighted_total(&cfg)).abs() < 1e-9);
    }

    #[test]
    fn non_finite_loss_aborts_with_the_iteration_number() {
        let cfg = tiny_train_cfg(1);
        let data = tiny_data(2, 8);
        let mut params = init_model(&cfg.model, cfg.seed);
        let poisoned = params.get("rg.in_proj.w").to_owned().mapv(|_| f64::NAN);
        params.set("rg.in_proj.w", poisoned.into_shared());
        let mut opt = Optimizer::new(&params, &cfg);
        let err =
            run_training(&cfg, &data, &mut params, &mut opt, 0, &mut Vec::new(), TrainHooks::default())
                .unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { iteration: 0, .. }));
    }

    #[test]
    fn empty_and_undersized_datasets_are_rejected() {
        let cfg = tiny_train_cfg(1);
        let mut params = init_model(&cfg.model, cfg.seed);
        let mut opt = Optimizer::new(&params, &cfg);
        let err = run_training(&cfg, &[], &mut params, &mut opt, 0, &mut Vec::new(), TrainHooks::default())
            .unwrap_err();
        assert!(matches!(err, Error::Data(_)));

        let small = tiny_data(1, 4);
        let err2 =
            run_training(&cfg, &small, &mut params, &mut opt, 0, &mut Vec::new(), TrainHooks::default())
                .unwrap_err();
        assert!(matches!(err2, Error::Data(_)));
    }
}

