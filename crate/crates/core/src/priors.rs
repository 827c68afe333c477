//! Prior extraction encoders.
//!
//! Two Siamese pairs of small convolutional encoders map Retinex components to
//! fixed-length vectors: the pair-fed encoders (prefix `rpe.*`) see the clean
//! and degraded components together and emit the guidance priors `Z_R`, `Z_L`;
//! the condition encoders (prefix `cond.*`) see only the degraded components
//! and emit `V_R`, `V_L`. The four networks never share weights because their
//! input channel counts differ and the two roles are trained against
//! different objectives.
//!
//! Each encoder is: space-to-depth by the configured factor, three 3x3 conv
//! blocks with GELU, a global average pool, and a linear head. Global pooling
//! makes the output length independent of input resolution.

use ndarray::{concatenate, Array1, ArrayView3, Axis};
use rand::Rng;

use crate::config::ModelConfig;
use crate::error::Error;
use crate::retinex::RetinexPair;
use crate::tensor::{self, Binder, ParamSet, Tape, Var};
use crate::Result;

pub const RPE_REFL: &str = "rpe.refl";
pub const RPE_ILLUM: &str = "rpe.illum";
pub const COND_REFL: &str = "cond.refl";
pub const COND_ILLUM: &str = "cond.illum";

/// Guidance priors from a (clean, degraded) component pair.
#[derive(Debug, Clone)]
pub struct RetinexPriors {
    /// Length 3 * c_prime.
    pub z_reflectance: Array1<f64>,
    /// Length c_prime.
    pub z_illumination: Array1<f64>,
}

/// Condition vectors from the degraded components alone.
#[derive(Debug, Clone)]
pub struct ConditionVectors {
    /// Length 3 * c_prime.
    pub v_reflectance: Array1<f64>,
    /// Length c_prime.
    pub v_illumination: Array1<f64>,
}

/// (raw input channels, output length) for each encoder prefix.
fn branch_spec(prefix: &str, cfg: &ModelConfig) -> (usize, usize) {
    match prefix {
        RPE_REFL => (6, cfg.refl_prior_len()),
        RPE_ILLUM => (2, cfg.illum_prior_len()),
        COND_REFL => (3, cfg.refl_prior_len()),
        COND_ILLUM => (1, cfg.illum_prior_len()),
        other => panic!("unknown prior encoder prefix {other:?}"),
    }
}

fn stem_width(cfg: &ModelConfig, out_len: usize) -> usize {
    cfg.prior_stem_mult * out_len
}

pub fn encoder_param_names(prefix: &str) -> Vec<String> {
    let mut names = Vec::new();
    for i in 1..=3 {
        names.push(format!("{prefix}.stem{i}.w"));
        names.push(format!("{prefix}.stem{i}.b"));
    }
    names.push(format!("{prefix}.head.w"));
    names.push(format!("{prefix}.head.b"));
    names
}

pub fn init_encoder(params: &mut ParamSet, prefix: &str, cfg: &ModelConfig, rng: &mut impl Rng) {
    let (raw_ch, out_len) = branch_spec(prefix, cfg);
    let f = cfg.prior_unshuffle;
    let in_ch = raw_ch * f * f;
    let width = stem_width(cfg, out_len);

    fn conv(params: &mut ParamSet, name: String, ci: usize, co: usize, rng: &mut impl Rng) {
        let scale = (2.0 / (ci * 9) as f64).sqrt();
        let mut w = tensor::randn(&[co, ci, 3, 3], rng);
        w.mapv_inplace(|x| x * scale);
        params.insert(format!("{name}.w"), w);
        params.insert(format!("{name}.b"), tensor::zeros(&[co]));
    }
    conv(params, format!("{prefix}.stem1"), in_ch, width, rng);
    conv(params, format!("{prefix}.stem2"), width, width, rng);
    conv(params, format!("{prefix}.stem3"), width, width, rng);

    let scale = (2.0 / width as f64).sqrt();
    let mut w = tensor::randn(&[width, out_len], rng);
    w.mapv_inplace(|x| x * scale);
    params.insert(format!("{prefix}.head.w"), w);
    params.insert(format!("{prefix}.head.b"), tensor::zeros(&[out_len]));
}

/// All four encoders in a fixed order so initialization is reproducible.
pub fn init_prior_encoders(params: &mut ParamSet, cfg: &ModelConfig, rng: &mut impl Rng) {
    for prefix in [RPE_REFL, RPE_ILLUM, COND_REFL, COND_ILLUM] {
        init_encoder(params, prefix, cfg, rng);
    }
}

/// One encoder branch on the tape. `input` is the raw component stack
/// (H, W, raw_ch) with H and W divisible by the unshuffle factor.
pub fn encode_on_tape(b: &Binder, prefix: &str, input: Var, cfg: &ModelConfig) -> Var {
    let t = b.tape();
    let mut x = tensor::pixel_unshuffle(t, input, cfg.prior_unshuffle);
    for i in 1..=3 {
        let w = b.p(&format!("{prefix}.stem{i}.w"));
        let bias = b.p(&format!("{prefix}.stem{i}.b"));
        x = tensor::conv3x3(t, x, w, bias);
        x = tensor::gelu(t, x);
    }
    let pooled = tensor::global_mean_leading(t, x);
    tensor::linear(t, pooled, b.p(&format!("{prefix}.head.w")), b.p(&format!("{prefix}.head.b")))
}

fn leaf3(t: &Tape, x: &ArrayView3<f64>) -> Var {
    t.leaf(x.to_owned().into_dyn().into_shared())
}

fn validate_spatial(a: &ArrayView3<f64>, b: &ArrayView3<f64>, cfg: &ModelConfig) -> Result<()> {
    let (ha, wa, _) = a.dim();
    let (hb, wb, _) = b.dim();
    if (ha, wa) != (hb, wb) {
        return Err(Error::Shape(format!(
            "component pair spatial mismatch: {ha}x{wa} vs {hb}x{wb}"
        )));
    }
    let f = cfg.prior_unshuffle;
    if ha % f != 0 || wa % f != 0 {
        return Err(Error::Shape(format!(
            "spatial dims {ha}x{wa} not divisible by the unshuffle factor {f}"
        )));
    }
    Ok(())
}

/// Priors from a (clean, degraded) pair on the tape: the reflectance branch
/// sees the clean reflectance stacked over the degraded one (6 channels), the
/// illumination branch the two illumination maps (2 channels).
pub fn rpe_encode_on_tape(
    b: &Binder,
    gt: &RetinexPair,
    lq: &RetinexPair,
    cfg: &ModelConfig,
) -> (Var, Var) {
    let t = b.tape();
    let refl = concatenate(Axis(2), &[gt.reflectance.view(), lq.reflectance.view()])
        .expect("reflectance stack");
    let illum = concatenate(Axis(2), &[gt.illumination.view(), lq.illumination.view()])
        .expect("illumination stack");
    let z_r = encode_on_tape(b, RPE_REFL, leaf3(t, &refl.view()), cfg);
    let z_l = encode_on_tape(b, RPE_ILLUM, leaf3(t, &illum.view()), cfg);
    (z_r, z_l)
}

/// Condition vectors from the degraded components alone, on the tape. The
/// returned Vars sit downstream of the `cond.*` weights, so losses on anything
/// computed from them reach the condition encoders.
pub fn rpe_condition_on_tape(b: &Binder, lq: &RetinexPair, cfg: &ModelConfig) -> (Var, Var) {
    let t = b.tape();
    let v_r = encode_on_tape(b, COND_REFL, leaf3(t, &lq.reflectance.view()), cfg);
    let v_l = encode_on_tape(b, COND_ILLUM, leaf3(t, &lq.illumination.view()), cfg);
    (v_r, v_l)
}

fn vec_value(t: &Tape, v: Var) -> Array1<f64> {
    t.value(v)
        .into_dimensionality::<ndarray::Ix1>()
        .expect("prior vector")
        .to_owned()
}

/// Deterministic plain evaluation; runs the tape graph on a scratch tape so
/// the result is bitwise identical to the training path.
pub fn rpe_encode(
    params: &ParamSet,
    gt: &RetinexPair,
    lq: &RetinexPair,
    cfg: &ModelConfig,
) -> Result<RetinexPriors> {
    validate_spatial(&gt.reflectance.view(), &lq.reflectance.view(), cfg)?;
    let tape = Tape::new();
    let b = Binder::new(&tape, params);
    let (z_r, z_l) = rpe_encode_on_tape(&b, gt, lq, cfg);
    Ok(RetinexPriors {
        z_reflectance: vec_value(&tape, z_r),
        z_illumination: vec_value(&tape, z_l),
    })
}

pub fn rpe_condition(
    params: &ParamSet,
    lq: &RetinexPair,
    cfg: &ModelConfig,
) -> Result<ConditionVectors> {
    validate_spatial(&lq.reflectance.view(), &lq.reflectance.view(), cfg)?;
    let tape = Tape::new();
    let b = Binder::new(&tape, params);
    let (v_r, v_l) = rpe_condition_on_tape(&b, lq, cfg);
    Ok(ConditionVectors {
        v_reflectance: vec_value(&tape, v_r),
        v_illumination: vec_value(&tape, v_l),
    })
}
