//! Compact latent diffusion over prior vectors. A linear beta schedule with
//! very few steps (four by default) is enough because the latents are short;
//! the denoiser is a conditioned MLP and the sampler unrolls the full reverse
//! chain, optionally on the autodiff tape so training can differentiate
//! through every step.

use ndarray::Array1;
use rand::Rng;

use crate::config::ModelConfig;
use crate::rng::stream;
use crate::tensor::{self, kernels, Binder, ParamSet, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    /// beta[t-1] holds the step-t variance factor, t = 1..=T.
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

/// Endpoint-inclusive linear schedule. T = 1 degenerates to [beta_start].
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> NoiseSchedule {
    assert!(steps >= 1, "schedule needs at least one step");
    assert!(
        0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0,
        "beta range ({beta_start}, {beta_end}) out of (0, 1)"
    );
    let beta: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for a in &alpha {
        acc *= a;
        alpha_bar.push(acc);
    }
    NoiseSchedule { beta, alpha, alpha_bar }
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    fn check_t(&self, t: usize) {
        assert!(
            (1..=self.steps()).contains(&t),
            "step {t} outside 1..={}",
            self.steps()
        );
    }

    /// Coefficient of the clean latent in the closed-form marginal at step t.
    pub fn signal_factor(&self, t: usize) -> f64 {
        self.check_t(t);
        self.alpha_bar[t - 1].sqrt()
    }

    /// Coefficient of the aggregated noise in the marginal at step t.
    pub fn noise_factor(&self, t: usize) -> f64 {
        self.check_t(t);
        (1.0 - self.alpha_bar[t - 1]).sqrt()
    }
}

/// Closed-form forward marginal: z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps.
pub fn diffuse_forward(
    z0: &Array1<f64>,
    t: usize,
    noise: &Array1<f64>,
    sched: &NoiseSchedule,
) -> Array1<f64> {
    assert_eq!(z0.len(), noise.len(), "latent/noise length mismatch");
    let s = sched.signal_factor(t);
    let n = sched.noise_factor(t);
    z0 * s + noise * n
}

/// Predicts the noise content of a noisy latent given a conditioning vector
/// and the step index. Tests substitute closures for trained models.
pub trait NoisePredictor {
    fn predict(&self, z_t: &Array1<f64>, cond: &Array1<f64>, t: usize) -> Array1<f64>;
}

impl<F> NoisePredictor for F
where
    F: Fn(&Array1<f64>, &Array1<f64>, usize) -> Array1<f64>,
{
    fn predict(&self, z_t: &Array1<f64>, cond: &Array1<f64>, t: usize) -> Array1<f64> {
        self(z_t, cond, t)
    }
}

/// One reverse step. `inject` carries the fresh noise term scaled by
/// sqrt(1 - alpha_t); pass None for the deterministic variant used at the
/// final step during inference.
pub fn denoise_step(
    z_t: &Array1<f64>,
    t: usize,
    cond: &Array1<f64>,
    predictor: &dyn NoisePredictor,
    sched: &NoiseSchedule,
    inject: Option<&Array1<f64>>,
) -> Array1<f64> {
    sched.check_t(t);
    let eps = predictor.predict(z_t, cond, t);
    assert_eq!(eps.len(), z_t.len(), "predictor output length mismatch");
    let a = sched.alpha[t - 1];
    let ab = sched.alpha_bar[t - 1];
    let coeff = (1.0 - a) / (1.0 - ab).sqrt();
    let mut out = (z_t - &(eps * coeff)) / a.sqrt();
    if let Some(noise) = inject {
        assert_eq!(noise.len(), z_t.len(), "injected noise length mismatch");
        out = out + noise * (1.0 - a).sqrt();
    }
    out
}

/// Runs the whole reverse chain from pure noise. Noise is drawn from `rng` in
/// a fixed order (start, then one injection per step that uses one), so equal
/// streams give equal samples. `inject_final` adds noise on the last step
/// too; inference keeps it off.
pub fn sample_prior(
    cond: &Array1<f64>,
    predictor: &dyn NoisePredictor,
    sched: &NoiseSchedule,
    rng: &mut impl Rng,
    inject_final: bool,
) -> Array1<f64> {
    let len = cond.len();
    let mut z = tensor::randn1(len, rng);
    for t in (1..=sched.steps()).rev() {
        let inject = if t > 1 || inject_final {
            Some(tensor::randn1(len, rng))
        } else {
            None
        };
        z = denoise_step(&z, t, cond, predictor, sched, inject.as_ref());
    }
    z
}

fn time_embedding(t: usize, dim: usize) -> Array1<f64> {
    assert!(dim % 2 == 0, "time embedding length must be even");
    let half = dim / 2;
    let mut e = Array1::<f64>::zeros(dim);
    for i in 0..half {
        let freq = 10000f64.powf(-(i as f64) / half as f64);
        e[i] = (t as f64 * freq).sin();
        e[half + i] = (t as f64 * freq).cos();
    }
    e
}

fn hidden_dim(cfg: &ModelConfig, latent_len: usize) -> usize {
    cfg.denoiser_hidden_mult * latent_len
}

/// Three-layer MLP denoiser on (z_t, cond, time embedding). The output layer
/// starts near zero so the untrained sampler is a contraction rather than an
/// amplifier.
pub fn init_denoiser(
    params: &mut ParamSet,
    prefix: &str,
    latent_len: usize,
    cfg: &ModelConfig,
    rng: &mut impl Rng,
) {
    fn layer(
        params: &mut ParamSet,
        name: String,
        rows: usize,
        cols: usize,
        scale: f64,
        rng: &mut impl Rng,
    ) {
        let w = tensor::randn(&[rows, cols], rng).mapv(|v| v * scale);
        params.insert(format!("{name}.w"), w.into_shared());
        params.insert(format!("{name}.b"), tensor::zeros(&[cols]));
    }
    let hidden = hidden_dim(cfg, latent_len);
    let input = 2 * latent_len + cfg.time_embed_dim;
    let w_scale = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
    layer(params, format!("{prefix}.l1"), input, hidden, w_scale(input), rng);
    layer(params, format!("{prefix}.l2"), hidden, hidden, w_scale(hidden), rng);
    layer(params, format!("{prefix}.l3"), hidden, latent_len, 0.01 * w_scale(hidden), rng);
}

pub fn denoiser_param_names(prefix: &str) -> Vec<String> {
    ["l1", "l2", "l3"]
        .iter()
        .flat_map(|l| [format!("{prefix}.{l}.w"), format!("{prefix}.{l}.b")])
        .collect()
}

/// Plain forward pass of the denoiser; numerically identical to the tape
/// version because both go through the same scalar nonlinearity.
pub fn denoiser_forward(
    params: &ParamSet,
    prefix: &str,
    z_t: &Array1<f64>,
    cond: &Array1<f64>,
    t: usize,
    cfg: &ModelConfig,
) -> Array1<f64> {
    assert_eq!(z_t.len(), cond.len(), "latent/conditioning length mismatch");
    let emb = time_embedding(t, cfg.time_embed_dim);
    let mut x = Array1::<f64>::zeros(2 * z_t.len() + emb.len());
    x.slice_mut(ndarray::s![..z_t.len()]).assign(z_t);
    x.slice_mut(ndarray::s![z_t.len()..2 * z_t.len()]).assign(cond);
    x.slice_mut(ndarray::s![2 * z_t.len()..]).assign(&emb);

    // Same gemm call shape as the tape's linear op, so both paths share the
    // accumulation order bit for bit.
    let dense = |x: &Array1<f64>, name: &str| -> Array1<f64> {
        let w = params.get(&format!("{name}.w"));
        let b = params.get(&format!("{name}.b"));
        let w2 = w.view().into_dimensionality::<ndarray::Ix2>().expect("weight matrix");
        let b1 = b.view().into_dimensionality::<ndarray::Ix1>().expect("bias vector");
        let x2 = x.view().into_shape_with_order((1, x.len())).expect("row vector");
        let mut out = ndarray::Array2::<f64>::zeros((1, w2.ncols()));
        ndarray::linalg::general_mat_mul(1.0, &x2, &w2, 0.0, &mut out);
        out.remove_axis(ndarray::Axis(0)) + &b1
    };
    let h1 = dense(&x, &format!("{prefix}.l1")).mapv(kernels::gelu_scalar);
    let h2 = dense(&h1, &format!("{prefix}.l2")).mapv(kernels::gelu_scalar);
    dense(&h2, &format!("{prefix}.l3"))
}

/// Trained-model adapter for the sampler entry points.
pub struct MlpPredictor<'a> {
    pub params: &'a ParamSet,
    pub prefix: &'a str,
    pub cfg: &'a ModelConfig,
}

impl NoisePredictor for MlpPredictor<'_> {
    fn predict(&self, z_t: &Array1<f64>, cond: &Array1<f64>, t: usize) -> Array1<f64> {
        denoiser_forward(self.params, self.prefix, z_t, cond, t, self.cfg)
    }
}

/// Denoiser forward on the tape. `cond` participates in the graph, so
/// phase-2 training reaches the conditioning encoder through it.
pub fn denoiser_forward_on_tape(
    b: &Binder,
    prefix: &str,
    z_t: Var,
    cond: Var,
    t: usize,
    cfg: &ModelConfig,
) -> Var {
    let tape = b.tape();
    let emb = tape.leaf(time_embedding(t, cfg.time_embed_dim).into_dyn().into_shared());
    let x = tensor::concat_last(tape, tensor::concat_last(tape, z_t, cond), emb);
    let l = |x: Var, name: String| {
        tensor::linear(tape, x, b.p(&format!("{name}.w")), b.p(&format!("{name}.b")))
    };
    let h1 = tensor::gelu(tape, l(x, format!("{prefix}.l1")));
    let h2 = tensor::gelu(tape, l(h1, format!("{prefix}.l2")));
    l(h2, format!("{prefix}.l3"))
}

/// Reverse chain on the tape, starting from leaf noise. With `full_unroll`
/// every step stays on the gradient path; otherwise all but the final step
/// are detached. Draw order matches `sample_prior` exactly.
#[allow(clippy::too_many_arguments)]
pub fn sample_prior_on_tape(
    b: &Binder,
    prefix: &str,
    cond: Var,
    sched: &NoiseSchedule,
    cfg: &ModelConfig,
    rng: &mut impl Rng,
    inject_final: bool,
    full_unroll: bool,
) -> Var {
    let tape = b.tape();
    let len = tape.value(cond).len();
    let mut z = tape.leaf(tensor::randn(&[len], rng));
    for t in (1..=sched.steps()).rev() {
        let inject = if t > 1 || inject_final {
            Some(tape.leaf(tensor::randn(&[len], rng)))
        } else {
            None
        };
        let eps = denoiser_forward_on_tape(b, prefix, z, cond, t, cfg);
        let a = sched.alpha[t - 1];
        let ab = sched.alpha_bar[t - 1];
        let coeff = (1.0 - a) / (1.0 - ab).sqrt();
        let centered = tensor::sub(tape, z, tensor::scale(tape, eps, coeff));
        let mut next = tensor::scale(tape, centered, 1.0 / a.sqrt());
        if let Some(noise) = inject {
            next = tensor::add(tape, next, tensor::scale(tape, noise, (1.0 - a).sqrt()));
        }
        if !full_unroll && t > 1 {
            next = tensor::detach(tape, next);
        }
        z = next;
    }
    z
}

/// Deterministic inference-time sampling for one branch, keyed by purpose so
/// reflectance and illumination consume independent streams.
pub fn sample_prior_seeded(
    params: &ParamSet,
    prefix: &str,
    cond: &Array1<f64>,
    cfg: &ModelConfig,
    seed: u64,
    branch_index: u64,
) -> Array1<f64> {
    let sched = make_schedule(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end);
    let predictor = MlpPredictor { params, prefix, cfg };
    let mut rng = stream(seed, "prior-sample", branch_index);
    sample_prior(cond, &predictor, &sched, &mut rng, false)
}
