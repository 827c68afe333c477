// Throwaway diagnostic, deleted after use.
use ndarray::Array3;
use relight_core::rng::stream;
use relight_core::training;
use relight_core::{checkpoint, metrics, pipeline, priors, retinex, rgformer, tensor};

#[test]
#[ignore]
fn checkpoint_quality() {
    let ck = checkpoint::load(std::path::Path::new("/tmp/cal_c")).unwrap();
    let data = pipeline::load_corpus(std::path::Path::new("/tmp/cal")).unwrap();
    let m = &ck.config.model;
    let mut psnr_sum = 0.0;
    let mut ssim_sum = 0.0;
    for p in &data {
        let gt_pair = retinex::decompose(&p.gt);
        let lq_pair = retinex::decompose(&p.lq);
        let z = priors::rpe_encode(&ck.params, &gt_pair, &lq_pair, m).unwrap();
        let o = rgformer::restore(&ck.params, &p.lq, &z.z_reflectance, &z.z_illumination, m).unwrap();
        let ps = metrics::psnr(&o, &p.gt).unwrap();
        let ss = metrics::ssim(&o, &p.gt).unwrap();
        println!("{}: psnr {ps:.2}  ssim {ss:.4}", p.name);
        psnr_sum += ps;
        ssim_sum += ss;
    }
    let n = data.len() as f64;
    println!("mean psnr {:.2}  mean ssim {:.4}", psnr_sum / n, ssim_sum / n);
}

#[test]
#[ignore]
fn prior_sensitivity() {
    let ck = checkpoint::load(std::path::Path::new("/tmp/cal_a")).unwrap();
    let data = pipeline::load_corpus(std::path::Path::new("/tmp/cal")).unwrap();
    let m = &ck.config.model;
    let zs: Vec<_> = data
        .iter()
        .map(|p| {
            let gt_pair = retinex::decompose(&p.gt);
            let lq_pair = retinex::decompose(&p.lq);
            priors::rpe_encode(&ck.params, &gt_pair, &lq_pair, m).unwrap()
        })
        .collect();
    let mut own = 0.0;
    let mut swapped = 0.0;
    let mut randp = 0.0;
    for (i, p) in data.iter().enumerate() {
        let z = &zs[i];
        let o = rgformer::restore(&ck.params, &p.lq, &z.z_reflectance, &z.z_illumination, m).unwrap();
        let po = metrics::psnr(&o, &p.gt).unwrap();
        let zj = &zs[(i + 1) % data.len()];
        let s = rgformer::restore(&ck.params, &p.lq, &zj.z_reflectance, &zj.z_illumination, m).unwrap();
        let ps = metrics::psnr(&s, &p.gt).unwrap();
        let mut rng = stream(99, "probe-rand", i as u64);
        let rr = tensor::randn1(m.refl_prior_len(), &mut rng);
        let rl = tensor::randn1(m.illum_prior_len(), &mut rng);
        let r = rgformer::restore(&ck.params, &p.lq, &rr, &rl, m).unwrap();
        let pr = metrics::psnr(&r, &p.gt).unwrap();
        println!("{}: own {po:.2}  swapped {ps:.2}  random {pr:.2}", p.name);
        own += po;
        swapped += ps;
        randp += pr;
    }
    let n = data.len() as f64;
    println!("mean: own {:.2}  swapped {:.2}  random {:.2}", own / n, swapped / n, randp / n);

    // Known-curve inversion ceiling from the manifest parameters.
    let manifest: toml::Value =
        toml::from_str(&std::fs::read_to_string("/tmp/cal/corpus.toml").unwrap()).unwrap();
    let entries = manifest["images"].as_array().unwrap();
    let mut ceil = 0.0;
    for (i, p) in data.iter().enumerate() {
        let e = &entries[i];
        let gamma = e["gamma"].as_float().unwrap();
        let scale = e["scale"].as_float().unwrap();
        let sigma = e["sigma"].as_float().unwrap();
        let inv: Array3<f64> = p.lq.mapv(|y| (y / scale).max(0.0).powf(1.0 / gamma).clamp(0.0, 1.0));
        let pc = metrics::psnr(&inv, &p.gt).unwrap();
        println!(
            "{}: oracle inversion {pc:.2} (gamma {gamma:.3} scale {scale:.3} sigma {sigma:.4})",
            p.name
        );
        ceil += pc;
    }
    println!("mean oracle inversion: {:.2}", ceil / data.len() as f64);

    // Best shared curve: per-luminance-bin median of gt over all images,
    // applied to every image. The ceiling of an unconditional tone map.
    let bins = 256;
    let mut acc: Vec<Vec<f64>> = vec![Vec::new(); bins];
    for p in &data {
        for (y, x) in p.lq.iter().zip(p.gt.iter()) {
            let k = ((y * (bins as f64 - 1.0)).round() as usize).min(bins - 1);
            acc[k].push(*x);
        }
    }
    let mut curve = vec![0.0; bins];
    let mut last = 0.0;
    for (k, v) in acc.iter_mut().enumerate() {
        if v.is_empty() {
            curve[k] = last;
        } else {
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            curve[k] = v[v.len() / 2];
            last = curve[k];
        }
    }
    let mut shared = 0.0;
    for p in &data {
        let out: Array3<f64> = p.lq.mapv(|y| {
            let k = ((y * (bins as f64 - 1.0)).round() as usize).min(bins - 1);
            curve[k]
        });
        shared += metrics::psnr(&out, &p.gt).unwrap();
    }
    println!("mean shared-curve ceiling: {:.2}", shared / data.len() as f64);

    // Residual magnitude the head actually produces vs what it needs.
    let p = &data[0];
    let need = (&p.gt - &p.lq).mapv(f64::abs).mean().unwrap();
    let z = &zs[0];
    let o = rgformer::restore(&ck.params, &p.lq, &z.z_reflectance, &z.z_illumination, m).unwrap();
    let got = (&o - &p.lq).mapv(f64::abs).mean().unwrap();
    println!("pair 0: needed |res| {need:.4}, produced |res| {got:.4}");

    let _ = training::loss_rec; // silence unused-import style drift if any

    // Prior-code geometry: inter-image separation vs intra-image (crop)
    // spread, and the FiLM scale spread a late block sees.
    let codes: Vec<ndarray::Array1<f64>> = zs
        .iter()
        .map(|z| {
            let mut v = z.z_reflectance.to_vec();
            v.extend(z.z_illumination.iter());
            ndarray::Array1::from_vec(v)
        })
        .collect();
    let mut inter = Vec::new();
    for i in 0..codes.len() {
        for j in (i + 1)..codes.len() {
            inter.push((&codes[i] - &codes[j]).mapv(|v| v * v).sum().sqrt());
        }
    }
    let inter_mean = inter.iter().sum::<f64>() / inter.len() as f64;
    println!(
        "inter-image code distance: min {:.3} mean {inter_mean:.3} max {:.3}  (norm0 {:.3})",
        inter.iter().cloned().fold(f64::INFINITY, f64::min),
        inter.iter().cloned().fold(0.0, f64::max),
        codes[0].mapv(|v| v * v).sum().sqrt()
    );
    let mut crops = Vec::new();
    for (oy, ox) in [(0, 0), (0, 32), (32, 0), (16, 16)] {
        let gt_c = data[0].gt.slice(ndarray::s![oy..oy + 32, ox..ox + 32, ..]).to_owned();
        let lq_c = data[0].lq.slice(ndarray::s![oy..oy + 32, ox..ox + 32, ..]).to_owned();
        let z = priors::rpe_encode(&ck.params, &retinex::decompose(&gt_c), &retinex::decompose(&lq_c), m)
            .unwrap();
        let mut v = z.z_reflectance.to_vec();
        v.extend(z.z_illumination.iter());
        crops.push(ndarray::Array1::from_vec(v));
    }
    let mut intra = Vec::new();
    for i in 0..crops.len() {
        for j in (i + 1)..crops.len() {
            intra.push((&crops[i] - &crops[j]).mapv(|v| v * v).sum().sqrt());
        }
    }
    println!(
        "intra-image crop code distance: mean {:.3}  (image-to-crop {:.3})",
        intra.iter().sum::<f64>() / intra.len() as f64,
        (&codes[0] - &crops[0]).mapv(|v| v * v).sum().sqrt()
    );

    // FiLM spread at the last decoder block's aggregation stage.
    let w1 = ck.params.get("rg.dec1.blk0.dfa.mod1.w");
    let b1 = ck.params.get("rg.dec1.blk0.dfa.mod1.b");
    let w1 = w1.view().into_dimensionality::<ndarray::Ix2>().unwrap();
    let b1 = b1.view().into_dimensionality::<ndarray::Ix1>().unwrap();
    let scales: Vec<ndarray::Array1<f64>> =
        codes.iter().map(|z| z.dot(&w1) + &b1).collect();
    let cdim = scales[0].len();
    let mut mean_s = ndarray::Array1::<f64>::zeros(cdim);
    for s in &scales {
        mean_s += s;
    }
    mean_s /= scales.len() as f64;
    let spread = scales
        .iter()
        .map(|s| (s - &mean_s).mapv(|v| v * v).sum())
        .sum::<f64>()
        / (scales.len() as f64 * cdim as f64);
    println!(
        "dec1 dfa scale: |w| rms {:.4}  mean |s| {:.3}  across-image spread rms {:.4}",
        w1.mapv(|v| v * v).mean().unwrap().sqrt(),
        mean_s.mapv(f64::abs).mean().unwrap(),
        spread.sqrt()
    );
}
