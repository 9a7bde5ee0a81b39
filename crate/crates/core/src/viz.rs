//! Activation maximization: gradient ascent on the input image toward
//! whatever most excites one convolution filter, with the network fixed.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::composite::CompositeNet;
use crate::error::{Error, Result};
use crate::files::write_atomic;
use crate::module::LayerSpec;
use crate::rng;
use crate::tensor::Tensor;

/// A filter addressed by module name, layer index within that module, and
/// output channel.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VizTarget {
    pub module: String,
    pub layer: usize,
    pub filter: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VizConfig {
    pub target: VizTarget,
    pub step_size: f64,
    pub iterations: usize,
    pub smoothing_radius: f64,
    pub seed: u64,
}

impl VizConfig {
    pub fn new(module: impl Into<String>, layer: usize, filter: usize, seed: u64) -> Self {
        VizConfig {
            target: VizTarget {
                module: module.into(),
                layer,
                filter,
            },
            step_size: 0.01,
            iterations: 500,
            smoothing_radius: 1.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("viz iterations must be at least 1".into()));
        }
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return Err(Error::Config(format!("viz step size {} must be positive", self.step_size)));
        }
        if !(self.smoothing_radius >= 0.0) {
            return Err(Error::Config("smoothing radius must be non-negative".into()));
        }
        Ok(())
    }
}

/// Result of one ascent run.
#[derive(Clone, Debug, PartialEq)]
pub struct Ascent {
    pub canvas: Tensor,
    /// Objective at the start and after every completed step.
    pub trace: Vec<f64>,
    /// Measured `||X_{t+1} - X_t||` of every applied step.
    pub displacements: Vec<f64>,
    pub steps: usize,
    pub zero_gradient: bool,
}

fn gaussian_1d(sigma: f64) -> Vec<f64> {
    let half = (3.0 * sigma).ceil() as isize;
    (-half..=half)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect()
}

/// Separable Gaussian blur of every channel; at the borders the kernel is
/// renormalized over the taps that fall inside the image.
pub fn gaussian_blur(img: &Tensor, sigma: f64) -> Tensor {
    if sigma <= 0.0 {
        return img.clone();
    }
    let [c, h, w] = img.shape()[..] else {
        panic!("gaussian_blur expects (C,H,W), got {:?}", img.shape());
    };
    let k = gaussian_1d(sigma);
    let half = (k.len() / 2) as isize;
    let pass = |src: &[f64], dst: &mut [f64], len: usize, stride: usize, lines: &[usize]| {
        for &start in lines {
            for i in 0..len as isize {
                let (mut acc, mut norm) = (0.0, 0.0);
                for (t, &kv) in k.iter().enumerate() {
                    let j = i + t as isize - half;
                    if j >= 0 && j < len as isize {
                        acc += kv * src[start + j as usize * stride];
                        norm += kv;
                    }
                }
                dst[start + i as usize * stride] = acc / norm;
            }
        }
    };
    let mut tmp = vec![0.0; img.numel()];
    let mut out = vec![0.0; img.numel()];
    let rows: Vec<usize> = (0..c * h).map(|r| r * w).collect();
    pass(img.data(), &mut tmp, w, 1, &rows);
    let cols: Vec<usize> = (0..c).flat_map(|ch| (0..w).map(move |x| ch * h * w + x)).collect();
    pass(&tmp, &mut out, h, w, &cols);
    Tensor::new(img.shape().to_vec(), out).expect("same shape")
}

/// Uniform `[0,1]` noise smoothed by a Gaussian of width `radius`.
pub fn init_canvas(shape: &[usize], radius: f64, seed: u64) -> Tensor {
    let mut r = rng::stream(seed, "viz/canvas", 0);
    let n = shape.iter().product();
    let noise = Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen::<f64>()).collect())
        .expect("shape matches count");
    gaussian_blur(&noise, radius)
}

/// Runs `cfg.iterations` normalized ascent steps
/// `X += step_size * grad / ||grad||` on the mean pre-activation response
/// of the target filter. Weights are read, never written.
pub fn ascend(net: &CompositeNet, cfg: &VizConfig) -> Result<Ascent> {
    cfg.validate()?;
    let t = &cfg.target;
    let module = net
        .module_named(&t.module)
        .ok_or_else(|| Error::Config(format!("no module named {:?}", t.module)))?;
    let filters = match module.spec.layers.get(t.layer) {
        Some(LayerSpec::Conv { filters, .. }) => *filters,
        Some(other) => {
            return Err(Error::Config(format!(
                "layer {} of {:?} is {other}, not a convolution",
                t.layer, t.module
            )))
        }
        None => {
            return Err(Error::Config(format!(
                "module {:?} has no layer {}",
                t.module, t.layer
            )))
        }
    };
    if t.filter >= filters {
        return Err(Error::Config(format!(
            "filter {} out of range: layer {} of {:?} has {filters}",
            t.filter, t.layer, t.module
        )));
    }
    let ordinal = module.spec.conv_layers().iter().position(|&l| l == t.layer).expect("conv layer");

    let mut ng = net.build_graph(None)?;
    let attached = ng.attached(&t.module).expect("module present");
    let conv = attached.conv_pre[ordinal];
    let g = &mut ng.graph;
    for p in g.params().to_vec() {
        g.set_frozen(p, true);
    }
    g.set_input_requires_grad(ng.input, true);
    let objective = g.channel_mean(conv, t.filter)?;

    let mut canvas = init_canvas(net.input_shape(), cfg.smoothing_radius, cfg.seed);
    let mut trace = Vec::with_capacity(cfg.iterations + 1);
    let mut displacements = Vec::with_capacity(cfg.iterations);
    let mut steps = 0;
    let mut zero_gradient = false;
    loop {
        g.set_input(ng.input, canvas.clone())?;
        g.forward_to(objective)?;
        let value = g.value(objective).data()[0];
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("viz objective at step {steps}")));
        }
        trace.push(value);
        if steps == cfg.iterations {
            break;
        }
        g.backward(objective)?;
        let grad = g.grad(ng.input).expect("input requires grad");
        let norm = grad.l2_norm();
        if norm == 0.0 {
            zero_gradient = true;
            break;
        }
        if !norm.is_finite() {
            return Err(Error::NonFinite(format!("viz gradient norm at step {steps}")));
        }
        let scale = cfg.step_size / norm;
        let mut moved = 0.0;
        for (x, d) in canvas.data_mut().iter_mut().zip(grad.data()) {
            let before = *x;
            *x += scale * d;
            moved += (*x - before) * (*x - before);
        }
        displacements.push(moved.sqrt());
        steps += 1;
    }
    Ok(Ascent {
        canvas,
        trace,
        displacements,
        steps,
        zero_gradient,
    })
}

/// Plain-text PGM bytes of a single-channel canvas, min-max scaled to
/// `0..=255` by flooring; a constant canvas becomes uniform 128.
pub fn pgm_bytes(canvas: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = match canvas.shape() {
        &[1, h, w] | &[h, w] => (h, w),
        s => return Err(Error::Shape(format!("PGM needs a single-channel canvas, got {s:?}"))),
    };
    let (lo, hi) = canvas
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let px: Vec<u8> = canvas
        .data()
        .iter()
        .map(|&v| {
            if hi > lo {
                ((v - lo) / (hi - lo) * 255.0).floor().clamp(0.0, 255.0) as u8
            } else {
                128
            }
        })
        .collect();
    let mut out = format!("P2\n{w} {h}\n255\n");
    for row in px.chunks(w.max(1)) {
        let line: Vec<String> = row.iter().map(u8::to_string).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    Ok(out.into_bytes())
}

pub fn render_pgm(canvas: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path, &pgm_bytes(canvas)?)
}

/// Parses a plain PGM into `(width, height, maxval, pixels)`.
pub fn parse_pgm(text: &str) -> Result<(usize, usize, u32, Vec<u32>)> {
    let mut tokens = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(str::split_whitespace);
    if tokens.next() != Some("P2") {
        return Err(Error::Corrupt("not a plain PGM".into()));
    }
    let mut num = |what: &str| -> Result<u32> {
        tokens
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::Corrupt(format!("PGM: bad or missing {what}")))
    };
    let w = num("width")? as usize;
    let h = num("height")? as usize;
    let maxval = num("maxval")?;
    let px = (0..w * h).map(|_| num("pixel")).collect::<Result<Vec<_>>>()?;
    Ok((w, h, maxval, px))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GalleryEntry {
    pub module: String,
    pub layer: usize,
    pub filter: usize,
    pub file: String,
    pub steps: usize,
    pub zero_gradient: bool,
    pub objective_start: f64,
    pub objective_end: f64,
}

/// Visualizes every filter of one conv layer into `dir`, one PGM per
/// filter plus `manifest.json`. All filters start from the same canvas.
pub fn render_gallery(
    net: &CompositeNet,
    module: &str,
    layer: usize,
    base: &VizConfig,
    dir: impl AsRef<Path>,
) -> Result<(Vec<GalleryEntry>, Vec<Ascent>)> {
    let dir = dir.as_ref();
    let filters = match net.module_named(module).and_then(|m| m.spec.layers.get(layer)) {
        Some(LayerSpec::Conv { filters, .. }) => *filters,
        _ => {
            return Err(Error::Config(format!(
                "{module:?} layer {layer} is not a convolution"
            )))
        }
    };
    let mut entries = Vec::with_capacity(filters);
    let mut runs = Vec::with_capacity(filters);
    for f in 0..filters {
        let mut cfg = base.clone();
        cfg.target = VizTarget {
            module: module.to_string(),
            layer,
            filter: f,
        };
        let run = ascend(net, &cfg)?;
        let file = format!("{module}_l{layer}_f{f}.pgm");
        render_pgm(&run.canvas, dir.join(&file))?;
        entries.push(GalleryEntry {
            module: module.to_string(),
            layer,
            filter: f,
            file,
            steps: run.steps,
            zero_gradient: run.zero_gradient,
            objective_start: run.trace[0],
            objective_end: *run.trace.last().unwrap(),
        });
        runs.push(run);
    }
    let manifest = serde_json::to_vec_pretty(&entries).expect("serializable");
    write_atomic(dir.join(format!("{module}_l{layer}_manifest.json")), &manifest)?;
    Ok((entries, runs))
}

/// Pearson correlation of two equally sized images (0 if either is flat).
pub fn correlation(a: &Tensor, b: &Tensor) -> f64 {
    let n = a.numel() as f64;
    let (ma, mb) = (a.sum() / n, b.sum() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.data().iter().zip(b.data()) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::composite::compose_finetune;
    use crate::module::{build_module, ModuleSpec};

    fn single_filter_net(pattern: [f64; 9], size: usize) -> CompositeNet {
        let spec = ModuleSpec::parse("base", "(1x3x3)").unwrap();
        let mut m = build_module(&spec, &[1, size, size], 0).unwrap();
        m.params[0][0] = Tensor::new(vec![1, 1, 3, 3], pattern.to_vec()).unwrap();
        compose_finetune(m, 2, 0).unwrap()
    }

    #[test]
    fn zero_radius_is_raw_noise_and_constant_is_preserved() {
        let raw = init_canvas(&[1, 6, 5], 0.0, 3);
        assert!(raw.data().iter().all(|v| (0.0..1.0).contains(v)));
        assert_eq!(gaussian_blur(&raw, 0.0), raw);
        let flat = gaussian_blur(&Tensor::filled(&[2, 7, 4], 0.3), 1.0);
        assert!(flat.data().iter().all(|v| (v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn smoothing_reduces_variance() {
        let var = |t: &Tensor| {
            let m = t.sum() / t.numel() as f64;
            t.data().iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (t.numel() - 1) as f64
        };
        let (mut raw, mut smooth) = (0.0, 0.0);
        for s in 0..1000 {
            raw += var(&init_canvas(&[1, 8, 8], 0.0, s));
            smooth += var(&init_canvas(&[1, 8, 8], 1.0, s));
        }
        assert!(smooth < raw, "{smooth} vs {raw}");
    }

    #[test]
    fn pgm_values() {
        let c = Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 0.5, 0.25]).unwrap();
        let text = String::from_utf8(pgm_bytes(&c).unwrap()).unwrap();
        assert_eq!(parse_pgm(&text).unwrap(), (2, 2, 255, vec![0, 255, 127, 63]));
        let flat = pgm_bytes(&Tensor::filled(&[1, 3, 2], -4.0)).unwrap();
        let (_, _, _, px) = parse_pgm(std::str::from_utf8(&flat).unwrap()).unwrap();
        assert_eq!(px, vec![128; 6]);
        assert!(pgm_bytes(&Tensor::zeros(&[3, 2, 2])).is_err());
        assert!(parse_pgm("P5 1 1 255 0").is_err());
    }

    #[test]
    fn every_step_has_exact_length_and_weights_untouched() {
        let net = single_filter_net([0.1, -0.2, 0.3, 0.0, 0.5, 0.1, -0.3, 0.2, 0.4], 9);
        let mut cfg = VizConfig::new("base", 0, 0, 5);
        cfg.iterations = 40;
        let mut prev = init_canvas(&[1, 9, 9], 1.0, 5);
        for k in 1..=cfg.iterations {
            cfg.iterations = k;
            let run = ascend(&net, &cfg).unwrap();
            assert_eq!(run.steps, k);
            let step: f64 = run
                .canvas
                .data()
                .iter()
                .zip(prev.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            assert!((step - 0.01).abs() < 1e-12, "{step}");
            assert_eq!(run.displacements.len(), k);
            assert!((run.displacements[k - 1] - step).abs() < 1e-15);
            prev = run.canvas;
        }
        let again = single_filter_net([0.1, -0.2, 0.3, 0.0, 0.5, 0.1, -0.3, 0.2, 0.4], 9);
        assert_eq!(net, again);
    }

    #[test]
    fn zero_filter_stops_at_first_step() {
        let net = single_filter_net([0.0; 9], 6);
        let run = ascend(&net, &VizConfig::new("base", 0, 0, 1)).unwrap();
        assert!(run.zero_gradient);
        assert_eq!(run.steps, 0);
        assert_eq!(run.canvas, init_canvas(&[1, 6, 6], 1.0, 1));
    }

    #[test]
    fn ascent_aligns_with_brute_force_best_response() {
        let pattern = [1.0, 0.0, -1.0, 2.0, 0.0, -2.0, 1.0, 0.0, -1.0];
        let n = 7;
        let net = single_filter_net(pattern, n);
        // objective by direct sliding-window sums with zero padding
        let objective = |img: &[f64]| -> f64 {
            let mut total = 0.0;
            for y in 0..n as isize {
                for x in 0..n as isize {
                    for dy in -1..=1isize {
                        for dx in -1..=1isize {
                            let (sy, sx) = (y + dy, x + dx);
                            if sy >= 0 && sx >= 0 && sy < n as isize && sx < n as isize {
                                total += pattern[((dy + 1) * 3 + dx + 1) as usize]
                                    * img[(sy * n as isize + sx) as usize];
                            }
                        }
                    }
                }
            }
            total / (n * n) as f64
        };
        let zero = vec![0.0; n * n];
        let best: Vec<f64> = (0..n * n)
            .map(|i| {
                let mut e = zero.clone();
                e[i] = 1.0;
                objective(&e) - objective(&zero)
            })
            .collect();
        let best = Tensor::new(vec![1, n, n], best).unwrap();
        let run = ascend(&net, &VizConfig::new("base", 0, 0, 2)).unwrap();
        let init = init_canvas(&[1, n, n], 1.0, 2);
        assert!(correlation(&run.canvas, &best) > correlation(&init, &best) + 0.5);
        assert!(run.trace.windows(2).all(|w| w[1] >= w[0]));
        assert!((run.trace[500] - objective(run.canvas.data())).abs() < 1e-12);
    }

    #[test]
    fn bad_targets_are_config_errors() {
        let net = single_filter_net([1.0; 9], 5);
        for cfg in [
            VizConfig::new("nope", 0, 0, 0),
            VizConfig::new("base", 1, 0, 0),
            VizConfig::new("base", 0, 1, 0),
        ] {
            assert!(matches!(ascend(&net, &cfg), Err(Error::Config(_))));
        }
    }

    #[test]
    fn gallery_writes_one_image_per_filter() {
        let spec = ModuleSpec::parse("base", "(3x3x3)-dense4").unwrap();
        let m = build_module(&spec, &[1, 6, 6], 4).unwrap();
        let net = compose_finetune(m, 2, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = VizConfig::new("base", 0, 0, 9);
        cfg.iterations = 20;
        let (entries, _) = render_gallery(&net, "base", 0, &cfg, dir.path()).unwrap();
        assert_eq!(entries.len(), 3);
        let manifest: Vec<GalleryEntry> = serde_json::from_slice(
            &std::fs::read(dir.path().join("base_l0_manifest.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(manifest, entries);
        let first = std::fs::read(dir.path().join(&entries[0].file)).unwrap();
        render_gallery(&net, "base", 0, &cfg, dir.path()).unwrap();
        assert_eq!(std::fs::read(dir.path().join(&entries[0].file)).unwrap(), first);
    }
}
