//! Guided transformer restorer.
//!
//! A 4-level encoder-decoder of transformer blocks. Each block runs guided
//! cross-attention (the feature is split 3:1 by channel; the wide part is
//! modulated by the reflectance prior and becomes the query, the narrow part
//! is modulated by the illumination prior and becomes key and value), then a
//! gated aggregation stage modulated by both priors. Downsampling is
//! space-to-depth plus a 1x1 projection, upsampling the exact inverse, and
//! skip connections concatenate then 1x1-project. The restored image is the
//! input plus a learned residual, clamped to [0, 1].
//!
//! Two feature taps (first encoder block, last decoder block) feed a small
//! shared auxiliary decoder that reconstructs the Retinex components, tying
//! intermediate features to the decomposition during training.

use ndarray::Array3;
use rand::Rng;

use crate::config::ModelConfig;
use crate::error::Error;
use crate::tensor::{self, Binder, Data, ParamSet, Tape, Var};
use crate::Result;

const LN_EPS: f64 = 1e-6;

/// Downsampling factor across the three between-level steps.
pub const SPATIAL_FACTOR: usize = 8;

pub struct RgForward {
    /// Restored image (H, W, 3), clamped to [0, 1].
    pub output: Var,
    /// Post-attention feature of the first encoder block, (H, W, C1).
    pub tap_first: Var,
    /// Post-attention feature of the last decoder block, (H, W, C1).
    pub tap_last: Var,
}

fn dim3(v: &Data) -> (usize, usize, usize) {
    let s = v.shape();
    assert_eq!(s.len(), 3, "expected a rank-3 feature, got {s:?}");
    (s[0], s[1], s[2])
}

fn conv_init(params: &mut ParamSet, name: &str, ci: usize, co: usize, rng: &mut impl Rng) {
    let scale = (2.0 / (ci * 9) as f64).sqrt();
    let mut w = tensor::randn(&[co, ci, 3, 3], rng);
    w.mapv_inplace(|x| x * scale);
    params.insert(format!("{name}.w"), w);
    params.insert(format!("{name}.b"), tensor::zeros(&[co]));
}

fn pw_init(params: &mut ParamSet, name: &str, ci: usize, co: usize, rng: &mut impl Rng) {
    let scale = (2.0 / ci as f64).sqrt();
    let mut w = tensor::randn(&[ci, co], rng);
    w.mapv_inplace(|x| x * scale);
    params.insert(format!("{name}.w"), w);
    params.insert(format!("{name}.b"), tensor::zeros(&[co]));
}

fn dw_init(params: &mut ParamSet, name: &str, c: usize, rng: &mut impl Rng) {
    let scale = (2.0 / 9.0f64).sqrt();
    let mut w = tensor::randn(&[c, 3, 3], rng);
    w.mapv_inplace(|x| x * scale);
    params.insert(format!("{name}.w"), w);
    params.insert(format!("{name}.b"), tensor::zeros(&[c]));
}

fn ln_init(params: &mut ParamSet, name: &str, c: usize) {
    params.insert(format!("{name}.g"), tensor::full(&[c], 1.0));
    params.insert(format!("{name}.b"), tensor::zeros(&[c]));
}

/// Modulation maps start near the identity: small weights, scale bias 1 and
/// shift bias 0, so an untrained prior barely perturbs the feature.
fn mod_init(
    params: &mut ParamSet,
    name: &str,
    z_len: usize,
    c: usize,
    bias_val: f64,
    rng: &mut impl Rng,
) {
    let scale = 0.1 / (z_len as f64).sqrt();
    let mut w = tensor::randn(&[z_len, c], rng);
    w.mapv_inplace(|x| x * scale);
    params.insert(format!("{name}.w"), w);
    params.insert(format!("{name}.b"), tensor::full(&[c], bias_val));
}

fn init_block(params: &mut ParamSet, prefix: &str, level: usize, cfg: &ModelConfig, rng: &mut impl Rng) {
    let c = cfg.channels[level];
    let c34 = 3 * c / 4;
    let c14 = c / 4;
    let d = cfg.attn_dim(level);
    let zr = cfg.refl_prior_len();
    let zl = cfg.illum_prior_len();
    if cfg.use_rg_mca {
        ln_init(params, &format!("{prefix}.ln1"), c34);
        ln_init(params, &format!("{prefix}.ln2"), c14);
        mod_init(params, &format!("{prefix}.mod_r1"), zr, c34, 1.0, rng);
        mod_init(params, &format!("{prefix}.mod_r2"), zr, c34, 0.0, rng);
        mod_init(params, &format!("{prefix}.mod_l1"), zl, c14, 1.0, rng);
        mod_init(params, &format!("{prefix}.mod_l2"), zl, c14, 0.0, rng);
        pw_init(params, &format!("{prefix}.wq.pw"), c34, d, rng);
        dw_init(params, &format!("{prefix}.wq.dw"), d, rng);
        pw_init(params, &format!("{prefix}.wk.pw"), c14, d, rng);
        dw_init(params, &format!("{prefix}.wk.dw"), d, rng);
        pw_init(params, &format!("{prefix}.wv.pw"), c14, d, rng);
        dw_init(params, &format!("{prefix}.wv.dw"), d, rng);
        pw_init(params, &format!("{prefix}.attn_out"), d, c, rng);
    }
    if cfg.use_dfa {
        ln_init(params, &format!("{prefix}.dfa.ln"), c);
        mod_init(params, &format!("{prefix}.dfa.mod1"), zr + zl, c, 1.0, rng);
        mod_init(params, &format!("{prefix}.dfa.mod2"), zr + zl, c, 0.0, rng);
        pw_init(params, &format!("{prefix}.dfa.w1.pw"), c, c, rng);
        dw_init(params, &format!("{prefix}.dfa.w1.dw"), c, rng);
        pw_init(params, &format!("{prefix}.dfa.w2.pw"), c, c, rng);
        dw_init(params, &format!("{prefix}.dfa.w2.dw"), c, rng);
    }
}

/// Stage name and level index for each position in the network, in creation
/// order. Encoder levels 1..3, the latent stack, then decoder levels 3..1.
fn stages(cfg: &ModelConfig) -> Vec<(String, usize)> {
    let _ = cfg;
    vec![
        ("rg.enc1".into(), 0),
        ("rg.enc2".into(), 1),
        ("rg.enc3".into(), 2),
        ("rg.lat".into(), 3),
        ("rg.dec3".into(), 2),
        ("rg.dec2".into(), 1),
        ("rg.dec1".into(), 0),
    ]
}

pub fn init_rgformer(params: &mut ParamSet, cfg: &ModelConfig, rng: &mut impl Rng) {
    let ch = cfg.channels;
    conv_init(params, "rg.in_proj", 3, ch[0], rng);
    for (stage, level) in stages(cfg) {
        for i in 0..cfg.blocks[level] {
            init_block(params, &format!("{stage}.blk{i}"), level, cfg, rng);
        }
        match stage.as_str() {
            "rg.enc1" => pw_init(params, "rg.down1", 4 * ch[0], ch[1], rng),
            "rg.enc2" => pw_init(params, "rg.down2", 4 * ch[1], ch[2], rng),
            "rg.enc3" => pw_init(params, "rg.down3", 4 * ch[2], ch[3], rng),
            "rg.lat" => {
                pw_init(params, "rg.up3", ch[3], 4 * ch[2], rng);
                pw_init(params, "rg.skip3", 2 * ch[2], ch[2], rng);
            }
            "rg.dec3" => {
                pw_init(params, "rg.up2", ch[2], 4 * ch[1], rng);
                pw_init(params, "rg.skip2", 2 * ch[1], ch[1], rng);
            }
            "rg.dec2" => {
                pw_init(params, "rg.up1", ch[1], 4 * ch[0], rng);
                pw_init(params, "rg.skip1", 2 * ch[0], ch[0], rng);
            }
            _ => {}
        }
    }
    // Normalized, prior-modulated zero residual head: the final norm bounds
    // the head input scale whatever the trunk accumulates, the modulation
    // gives each image direct per-channel control of the residual basis one
    // projection away from the output, and the zeroed projection starts
    // restoration exactly at the identity with the output clamp in its
    // pass-through region.
    ln_init(params, "rg.out_norm", ch[0]);
    mod_init(params, "rg.out_mod1", cfg.refl_prior_len() + cfg.illum_prior_len(), ch[0], 1.0, rng);
    mod_init(params, "rg.out_mod2", cfg.refl_prior_len() + cfg.illum_prior_len(), ch[0], 0.0, rng);
    conv_init(params, "rg.out_proj", ch[0], 3, rng);
    {
        let w = params.get("rg.out_proj.w").to_owned().mapv(|_| 0.0);
        params.set("rg.out_proj.w", w.into_shared());
    }
    if cfg.use_aux_decoder {
        let a = ch[0];
        conv_init(params, "aux.stem1", a, a, rng);
        conv_init(params, "aux.stem2", a, a, rng);
        conv_init(params, "aux.stem3", a, a, rng);
        conv_init(params, "aux.head_r", a, 3, rng);
        conv_init(params, "aux.head_l", a, 1, rng);
    }
}

fn modulate(b: &Binder, base: &str, x: Var, z: Var) -> Var {
    let t = b.tape();
    let s = tensor::linear(t, z, b.p(&format!("{base}1.w")), b.p(&format!("{base}1.b")));
    let sh = tensor::linear(t, z, b.p(&format!("{base}2.w")), b.p(&format!("{base}2.b")));
    tensor::add_vec_last(t, tensor::mul_vec_last(t, x, s), sh)
}

/// 1x1 point-wise projection of a (H, W, Ci) feature.
fn conv1x1(b: &Binder, name: &str, x: Var, h: usize, w: usize, ci: usize, co: usize) -> Var {
    let t = b.tape();
    let flat = tensor::reshape(t, x, &[h * w, ci]);
    let y = tensor::linear(t, flat, b.p(&format!("{name}.w")), b.p(&format!("{name}.b")));
    tensor::reshape(t, y, &[h, w, co])
}

/// Point-wise then depth-wise projection used by the attention heads and the
/// aggregation stage.
fn proj_pw_dw(b: &Binder, base: &str, x: Var, h: usize, w: usize, ci: usize, co: usize) -> Var {
    let t = b.tape();
    let y = conv1x1(b, &format!("{base}.pw"), x, h, w, ci, co);
    tensor::conv3x3_dw(t, y, b.p(&format!("{base}.dw.w")), b.p(&format!("{base}.dw.b")))
}

/// One transformer block. Returns (block output, post-attention tap).
/// With `probe` set, each head's attention matrix value is appended to
/// `probes` for inspection.
pub fn rg_block_on_tape(
    b: &Binder,
    prefix: &str,
    x: Var,
    z_r: Var,
    z_l: Var,
    level: usize,
    cfg: &ModelConfig,
    probe: bool,
    probes: &mut Vec<Data>,
) -> (Var, Var) {
    let t = b.tape();
    let (h, w, c) = dim3(&t.value(x));
    assert_eq!(c % 4, 0, "block channels must split 3:1");
    let mut cur = x;

    if cfg.use_rg_mca {
        let c34 = 3 * c / 4;
        let c14 = c / 4;
        let d = cfg.attn_dim(level);
        let heads = cfg.heads[level];
        let hd = d / heads;
        let scale = cfg.attn_scale(level);

        let f1 = tensor::narrow_last(t, cur, 0, c34);
        let f2 = tensor::narrow_last(t, cur, c34, c14);
        let n1 = tensor::layer_norm_last(
            t,
            f1,
            b.p(&format!("{prefix}.ln1.g")),
            b.p(&format!("{prefix}.ln1.b")),
            LN_EPS,
        );
        let n2 = tensor::layer_norm_last(
            t,
            f2,
            b.p(&format!("{prefix}.ln2.g")),
            b.p(&format!("{prefix}.ln2.b")),
            LN_EPS,
        );
        let f_r = modulate(b, &format!("{prefix}.mod_r"), n1, z_r);
        let f_l = modulate(b, &format!("{prefix}.mod_l"), n2, z_l);

        let q = proj_pw_dw(b, &format!("{prefix}.wq"), f_r, h, w, c34, d);
        let k = proj_pw_dw(b, &format!("{prefix}.wk"), f_l, h, w, c14, d);
        let v = proj_pw_dw(b, &format!("{prefix}.wv"), f_l, h, w, c14, d);

        let n = h * w;
        let qf = tensor::reshape(t, q, &[n, d]);
        let kf = tensor::reshape(t, k, &[n, d]);
        let vf = tensor::reshape(t, v, &[n, d]);

        let mut merged: Option<Var> = None;
        for i in 0..heads {
            let qh = tensor::narrow_last(t, qf, i * hd, hd);
            let kh = tensor::narrow_last(t, kf, i * hd, hd);
            let vh = tensor::narrow_last(t, vf, i * hd, hd);
            let (oh, pr) = tensor::attention(t, qh, kh, vh, scale, probe);
            if let Some(p) = pr {
                probes.push(t.value(p));
            }
            merged = Some(match merged {
                None => oh,
                Some(m) => tensor::concat_last(t, m, oh),
            });
        }
        let o = tensor::linear(
            t,
            merged.expect("at least one head"),
            b.p(&format!("{prefix}.attn_out.w")),
            b.p(&format!("{prefix}.attn_out.b")),
        );
        let o3 = tensor::reshape(t, o, &[h, w, c]);
        cur = tensor::add(t, cur, o3);
    }

    let tap = cur;

    if cfg.use_dfa {
        let z = tensor::concat_last(t, z_r, z_l);
        let nrm = tensor::layer_norm_last(
            t,
            cur,
            b.p(&format!("{prefix}.dfa.ln.g")),
            b.p(&format!("{prefix}.dfa.ln.b")),
            LN_EPS,
        );
        let fp = modulate(b, &format!("{prefix}.dfa.mod"), nrm, z);
        let a1 = proj_pw_dw(b, &format!("{prefix}.dfa.w1"), fp, h, w, c, c);
        let a2 = proj_pw_dw(b, &format!("{prefix}.dfa.w2"), fp, h, w, c, c);
        let gated = tensor::mul(t, tensor::gelu(t, a1), a2);
        cur = tensor::add(t, cur, gated);
    }

    (cur, tap)
}

fn run_stage(
    b: &Binder,
    stage: &str,
    level: usize,
    mut x: Var,
    z_r: Var,
    z_l: Var,
    cfg: &ModelConfig,
    probe: bool,
    probes: &mut Vec<Data>,
) -> (Var, Var, Var) {
    let mut first_tap = x;
    let mut last_tap = x;
    for i in 0..cfg.blocks[level] {
        let (out, tap) = rg_block_on_tape(
            b,
            &format!("{stage}.blk{i}"),
            x,
            z_r,
            z_l,
            level,
            cfg,
            probe,
            probes,
        );
        if i == 0 {
            first_tap = tap;
        }
        last_tap = tap;
        x = out;
    }
    (x, first_tap, last_tap)
}

/// Full restorer forward on the tape. `lq` must be (H, W, 3) with H and W
/// divisible by 8; the priors must have the configured lengths.
pub fn forward_on_tape(
    b: &Binder,
    lq: Var,
    z_r: Var,
    z_l: Var,
    cfg: &ModelConfig,
    probe: bool,
    probes: &mut Vec<Data>,
) -> RgForward {
    let t = b.tape();
    let (h, w, c_in) = dim3(&t.value(lq));
    assert_eq!(c_in, 3, "restorer input must have 3 channels");
    assert!(
        h % SPATIAL_FACTOR == 0 && w % SPATIAL_FACTOR == 0,
        "input dims {h}x{w} must be divisible by {SPATIAL_FACTOR}"
    );
    debug_assert_eq!(t.value(z_r).len(), cfg.refl_prior_len());
    debug_assert_eq!(t.value(z_l).len(), cfg.illum_prior_len());
    let ch = cfg.channels;

    let mut x = tensor::conv3x3(t, lq, b.p("rg.in_proj.w"), b.p("rg.in_proj.b"));

    let (e1, tap_first, _) = run_stage(b, "rg.enc1", 0, x, z_r, z_l, cfg, probe, probes);
    x = tensor::pixel_unshuffle(t, e1, 2);
    x = conv1x1(b, "rg.down1", x, h / 2, w / 2, 4 * ch[0], ch[1]);

    let (e2, _, _) = run_stage(b, "rg.enc2", 1, x, z_r, z_l, cfg, probe, probes);
    x = tensor::pixel_unshuffle(t, e2, 2);
    x = conv1x1(b, "rg.down2", x, h / 4, w / 4, 4 * ch[1], ch[2]);

    let (e3, _, _) = run_stage(b, "rg.enc3", 2, x, z_r, z_l, cfg, probe, probes);
    x = tensor::pixel_unshuffle(t, e3, 2);
    x = conv1x1(b, "rg.down3", x, h / 8, w / 8, 4 * ch[2], ch[3]);

    let (lat, _, _) = run_stage(b, "rg.lat", 3, x, z_r, z_l, cfg, probe, probes);

    x = conv1x1(b, "rg.up3", lat, h / 8, w / 8, ch[3], 4 * ch[2]);
    x = tensor::pixel_shuffle(t, x, 2);
    x = tensor::concat_last(t, x, e3);
    x = conv1x1(b, "rg.skip3", x, h / 4, w / 4, 2 * ch[2], ch[2]);
    let (d3, _, _) = run_stage(b, "rg.dec3", 2, x, z_r, z_l, cfg, probe, probes);

    x = conv1x1(b, "rg.up2", d3, h / 4, w / 4, ch[2], 4 * ch[1]);
    x = tensor::pixel_shuffle(t, x, 2);
    x = tensor::concat_last(t, x, e2);
    x = conv1x1(b, "rg.skip2", x, h / 2, w / 2, 2 * ch[1], ch[1]);
    let (d2, _, _) = run_stage(b, "rg.dec2", 1, x, z_r, z_l, cfg, probe, probes);

    x = conv1x1(b, "rg.up1", d2, h / 2, w / 2, ch[1], 4 * ch[0]);
    x = tensor::pixel_shuffle(t, x, 2);
    x = tensor::concat_last(t, x, e1);
    x = conv1x1(b, "rg.skip1", x, h, w, 2 * ch[0], ch[0]);
    let (d1, _, tap_last) = run_stage(b, "rg.dec1", 0, x, z_r, z_l, cfg, probe, probes);

    let dn = tensor::layer_norm_last(
        t,
        d1,
        b.p("rg.out_norm.g"),
        b.p("rg.out_norm.b"),
        LN_EPS,
    );
    let zc = tensor::concat_last(t, z_r, z_l);
    let dm = modulate(b, "rg.out_mod", dn, zc);
    let res = tensor::conv3x3(t, dm, b.p("rg.out_proj.w"), b.p("rg.out_proj.b"));
    let output = tensor::clamp01(t, tensor::add(t, lq, res));
    RgForward { output, tap_first, tap_last }
}

/// Shared auxiliary decoder: three conv blocks, then bounded reflectance and
/// illumination heads. Outputs are (H, W, 3) and (H, W, 1) in (0, 1).
pub fn aux_decode_on_tape(b: &Binder, tap: Var) -> (Var, Var) {
    let t = b.tape();
    let mut x = tap;
    for i in 1..=3 {
        x = tensor::conv3x3(
            t,
            x,
            b.p(&format!("aux.stem{i}.w")),
            b.p(&format!("aux.stem{i}.b")),
        );
        x = tensor::gelu(t, x);
    }
    let r = tensor::sigmoid(t, tensor::conv3x3(t, x, b.p("aux.head_r.w"), b.p("aux.head_r.b")));
    let l = tensor::sigmoid(t, tensor::conv3x3(t, x, b.p("aux.head_l.w"), b.p("aux.head_l.b")));
    (r, l)
}

/// Plain restoration; runs the tape graph on a scratch tape, so it matches
/// the training-time forward bit for bit.
pub fn restore(
    params: &ParamSet,
    lq: &Array3<f64>,
    z_r: &ndarray::Array1<f64>,
    z_l: &ndarray::Array1<f64>,
    cfg: &ModelConfig,
) -> Result<Array3<f64>> {
    let (h, w, c) = lq.dim();
    if c != 3 {
        return Err(Error::Shape(format!("restorer input must be 3-channel, got {c}")));
    }
    if h % SPATIAL_FACTOR != 0 || w % SPATIAL_FACTOR != 0 {
        return Err(Error::Shape(format!(
            "input dims {h}x{w} must be divisible by {SPATIAL_FACTOR}"
        )));
    }
    if z_r.len() != cfg.refl_prior_len() || z_l.len() != cfg.illum_prior_len() {
        return Err(Error::Shape(format!(
            "prior lengths ({}, {}) do not match the configured ({}, {})",
            z_r.len(),
            z_l.len(),
            cfg.refl_prior_len(),
            cfg.illum_prior_len()
        )));
    }
    let tape = Tape::new();
    let b = Binder::new(&tape, params);
    let lqv = tape.leaf(lq.to_owned().into_dyn().into_shared());
    let zr = tape.leaf(z_r.to_owned().into_dyn().into_shared());
    let zl = tape.leaf(z_l.to_owned().into_dyn().into_shared());
    let fw = forward_on_tape(&b, lqv, zr, zl, cfg, false, &mut Vec::new());
    Ok(tape
        .value(fw.output)
        .into_dimensionality::<ndarray::Ix3>()
        .expect("restored image")
        .to_owned())
}
