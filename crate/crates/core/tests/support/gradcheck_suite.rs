//! Central-difference gradient checks.
//!
//! The oracle is a separate f64 implementation of each layer written with
//! plain nested loops; the analytic gradients come from the f32 tape.

use milpath_core::numerics::{ConvLayerSpec, Graph, Model, ModelConfig, Tensor, Var, INPUT_OFFSET};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-3;
const MAX_REL_ERR: f64 = 1e-3;
/// Denominator floor so entries that are zero up to f32 rounding compare on
/// an absolute scale.
const REL_FLOOR: f64 = 1e-3;
pub const SEEDS: u64 = 20;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn to64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

// ---- f64 reference layers -------------------------------------------------

#[allow(clippy::too_many_arguments)]
fn conv_ref(x: &[f64], n: usize, c: usize, h: usize, w: usize, wt: &[f64], o: usize, k: usize, b: &[f64], s: usize) -> Vec<f64> {
    let (oh, ow) = ((h - k) / s + 1, (w - k) / s + 1);
    let mut out = vec![0.0; n * o * oh * ow];
    for ni in 0..n {
        for oi in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = b[oi];
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                acc += wt[((oi * c + ci) * k + ky) * k + kx]
                                    * x[((ni * c + ci) * h + y * s + ky) * w + xx * s + kx];
                            }
                        }
                    }
                    out[((ni * o + oi) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    out
}

/// Branch decisions taken by the reference forward (relu masks, pool
/// winners, clamp hits). Finite differences are only valid where this does
/// not change across the stencil.
type Pattern = Vec<u32>;

fn pool_ref(x: &[f64], planes: usize, h: usize, w: usize, win: usize, pat: &mut Pattern) -> Vec<f64> {
    let (oh, ow) = (h / win, w / win);
    let mut out = Vec::new();
    for p in 0..planes {
        for y in 0..oh {
            for xx in 0..ow {
                let (mut m, mut arg) = (f64::NEG_INFINITY, 0);
                for dy in 0..win {
                    for dx in 0..win {
                        let v = x[(p * h + y * win + dy) * w + xx * win + dx];
                        if v > m {
                            m = v;
                            arg = dy * win + dx;
                        }
                    }
                }
                pat.push(arg as u32);
                out.push(m);
            }
        }
    }
    out
}

fn relu_ref(x: &[f64], pat: &mut Pattern) -> Vec<f64> {
    pat.extend(x.iter().map(|&v| (v > 0.0) as u32));
    x.iter().map(|&v| v.max(0.0)).collect()
}

fn linear_ref(x: &[f64], wt: &[f64], b: &[f64], fin: usize, fout: usize) -> Vec<f64> {
    let n = x.len() / fin;
    let mut out = vec![0.0; n * fout];
    for i in 0..n {
        for j in 0..fout {
            out[i * fout + j] = b[j] + (0..fin).map(|q| x[i * fin + q] * wt[q * fout + j]).sum::<f64>();
        }
    }
    out
}

fn softmax_ref(x: &[f64], width: usize) -> Vec<f64> {
    x.chunks(width)
        .flat_map(|r| {
            let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = r.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(move |v| v / s)
        })
        .collect()
}

fn wce_ref(probs: &[f64], y: &[u8], w0: f64, w1: f64, pat: &mut Pattern) -> f64 {
    let eps = 1e-7f64;
    probs
        .chunks(2)
        .zip(y)
        .map(|(r, &t)| {
            pat.push((r[1] < eps || r[1] > 1.0 - eps) as u32);
            let p = r[1].clamp(eps, 1.0 - eps);
            if t == 1 {
                -w1 * p.ln()
            } else {
                -w0 * (1.0 - p).ln()
            }
        })
        .sum::<f64>()
        / y.len() as f64
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

// ---- checking harness -----------------------------------------------------

pub struct Report {
    pub checked: usize,
    pub skipped: usize,
    pub worst: f64,
    pub failures: usize,
    pub first_failure: Option<String>,
}

impl Report {
    /// Every checked entry within tolerance, and kink skips at most 5% of
    /// the checked count.
    pub fn ok(&self) -> bool {
        self.failures == 0 && self.checked > 0 && self.skipped * 20 <= self.checked
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "{} entries over {SEEDS} seeds, {} kink skips, worst rel err {:.2e}",
            self.checked, self.skipped, self.worst
        );
        if let Some(f) = &self.first_failure {
            s.push_str(&format!(", {} failures (first: {f})", self.failures));
        }
        s
    }
}

/// Compares `analytic` against central differences of `f` around `x`.
/// Stencils that cross a kink of the reference (its branch pattern differs
/// between `x - h`, `x` and `x + h`) are skipped.
fn check(x: &[f64], analytic: &[f32], mut f: impl FnMut(&[f64], &mut Pattern) -> f64, report: &mut Report, what: &str) {
    assert_eq!(x.len(), analytic.len(), "{what}: gradient length");
    let mut xp = x.to_vec();
    let mut p0 = Pattern::new();
    f(x, &mut p0);
    let (mut pp, mut pm) = (Pattern::new(), Pattern::new());
    for i in 0..x.len() {
        pp.clear();
        pm.clear();
        xp[i] = x[i] + H;
        let fp = f(&xp, &mut pp);
        xp[i] = x[i] - H;
        let fm = f(&xp, &mut pm);
        xp[i] = x[i];
        if pp != p0 || pm != p0 {
            report.skipped += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * H);
        let e = rel_err(analytic[i] as f64, numeric);
        report.worst = report.worst.max(e);
        report.checked += 1;
        if !(e <= MAX_REL_ERR) {
            report.failures += 1;
            report
                .first_failure
                .get_or_insert_with(|| format!("{what}[{i}]: analytic {} vs numeric {numeric}", analytic[i]));
        }
    }
}

fn new_report() -> Report {
    Report {
        checked: 0,
        skipped: 0,
        worst: 0.0,
        failures: 0,
        first_failure: None,
    }
}

fn leaf(g: &mut Graph, shape: Vec<usize>, data: Vec<f32>, grad: bool) -> Var {
    let t = Tensor::new(shape, data).unwrap();
    g.leaf(if grad { t.with_grad() } else { t })
}

fn grad_of(g: &Graph, v: Var) -> Vec<f32> {
    g.value(v).grad().expect("gradient populated").to_vec()
}

/// Builds `sum(out * r)` for a random projection `r`, runs backward.
fn project_and_backward(g: &mut Graph, out: Var, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let shape = g.value(out).shape().to_vec();
    let r = rand_vec(rng, g.value(out).numel(), -1.0, 1.0);
    let rv = leaf(g, shape, r.clone(), false);
    let m = g.mul(out, rv).unwrap();
    let s = g.sum(m).unwrap();
    g.backward(s).unwrap();
    to64(&r)
}

pub fn conv2d_gradients() -> Report {
    let mut report = new_report();
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stride = 1 + (seed as usize % 2);
        let (n, c, h, w, o, k) = (2, 2, 7, 6, 3, 3);
        let x = rand_vec(&mut rng, n * c * h * w, -1.0, 1.0);
        let wt = rand_vec(&mut rng, o * c * k * k, -0.5, 0.5);
        let b = rand_vec(&mut rng, o, -0.1, 0.1);
        let mut g = Graph::new();
        let xv = leaf(&mut g, vec![n, c, h, w], x.clone(), true);
        let wv = leaf(&mut g, vec![o, c, k, k], wt.clone(), true);
        let bv = leaf(&mut g, vec![o], b.clone(), true);
        let y = g.conv2d(xv, wv, bv, stride).unwrap();
        let r = project_and_backward(&mut g, y, &mut rng);
        let (x64, w64, b64) = (to64(&x), to64(&wt), to64(&b));
        check(&x64, &grad_of(&g, xv), |xx, _| dot(&conv_ref(xx, n, c, h, w, &w64, o, k, &b64, stride), &r), &mut report, "conv input");
        check(&w64, &grad_of(&g, wv), |ww, _| dot(&conv_ref(&x64, n, c, h, w, ww, o, k, &b64, stride), &r), &mut report, "conv weight");
        check(&b64, &grad_of(&g, bv), |bb, _| dot(&conv_ref(&x64, n, c, h, w, &w64, o, k, bb, stride), &r), &mut report, "conv bias");
    }
    report
}

pub fn max_pool_gradients() -> Report {
    let mut report = new_report();
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let (n, c, h, w, win) = (2, 3, 7, 6, 2);
        let x = rand_vec(&mut rng, n * c * h * w, -1.0, 1.0);
        let mut g = Graph::new();
        let xv = leaf(&mut g, vec![n, c, h, w], x.clone(), true);
        let y = g.max_pool2d(xv, win).unwrap();
        let r = project_and_backward(&mut g, y, &mut rng);
        check(&to64(&x), &grad_of(&g, xv), |xx, pat| dot(&pool_ref(xx, n * c, h, w, win, pat), &r), &mut report, "maxpool input");
    }
    report
}

pub fn relu_gradients() -> Report {
    let mut report = new_report();
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let x = rand_vec(&mut rng, 40, -1.0, 1.0);
        let mut g = Graph::new();
        let xv = leaf(&mut g, vec![4, 10], x.clone(), true);
        let y = g.relu(xv).unwrap();
        let r = project_and_backward(&mut g, y, &mut rng);
        check(&to64(&x), &grad_of(&g, xv), |xx, pat| dot(&relu_ref(xx, pat), &r), &mut report, "relu input");
    }
    report
}

pub fn linear_gradients() -> Report {
    let mut report = new_report();
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let (n, fin, fout) = (3, 7, 5);
        let x = rand_vec(&mut rng, n * fin, -1.0, 1.0);
        let wt = rand_vec(&mut rng, fin * fout, -0.5, 0.5);
        let b = rand_vec(&mut rng, fout, -0.1, 0.1);
        let mut g = Graph::new();
        let xv = leaf(&mut g, vec![n, fin], x.clone(), true);
        let wv = leaf(&mut g, vec![fin, fout], wt.clone(), true);
        let bv = leaf(&mut g, vec![fout], b.clone(), true);
        let y = g.linear(xv, wv, bv).unwrap();
        let r = project_and_backward(&mut g, y, &mut rng);
        let (x64, w64, b64) = (to64(&x), to64(&wt), to64(&b));
        check(&x64, &grad_of(&g, xv), |xx, _| dot(&linear_ref(xx, &w64, &b64, fin, fout), &r), &mut report, "linear input");
        check(&w64, &grad_of(&g, wv), |ww, _| dot(&linear_ref(&x64, ww, &b64, fin, fout), &r), &mut report, "linear weight");
        check(&b64, &grad_of(&g, bv), |bb, _| dot(&linear_ref(&x64, &w64, bb, fin, fout), &r), &mut report, "linear bias");
    }
    report
}

pub fn softmax_gradients() -> Report {
    let mut report = new_report();
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let x = rand_vec(&mut rng, 8, -3.0, 3.0);
        let mut g = Graph::new();
        let xv = leaf(&mut g, vec![4, 2], x.clone(), true);
        let y = g.softmax(xv).unwrap();
        let r = project_and_backward(&mut g, y, &mut rng);
        check(&to64(&x), &grad_of(&g, xv), |xx, _| dot(&softmax_ref(xx, 2), &r), &mut report, "softmax input");
    }
    report
}

pub fn weighted_loss_gradients() -> Report {
    let mut report = new_report();
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let n = 6;
        let logits = rand_vec(&mut rng, 2 * n, -2.0, 2.0);
        let y: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2u8)).collect();
        let w1 = rng.gen_range(0.05f32..0.95);
        let w0 = 1.0 - w1;
        let mut g = Graph::new();
        let lv = leaf(&mut g, vec![n, 2], logits.clone(), true);
        let p = g.softmax(lv).unwrap();
        let loss = g.weighted_cross_entropy(p, &y, w0, w1).unwrap();
        g.backward(loss).unwrap();
        check(
            &to64(&logits),
            &grad_of(&g, lv),
            |ll, pat| wce_ref(&softmax_ref(ll, 2), &y, w0 as f64, w1 as f64, pat),
            &mut report,
            "loss via logits",
        );

        // Directly on the probability table.
        let probs: Vec<f32> = softmax_ref(&to64(&logits), 2).iter().map(|&v| v as f32).collect();
        let mut g = Graph::new();
        let pv = leaf(&mut g, vec![n, 2], probs.clone(), true);
        let loss = g.weighted_cross_entropy(pv, &y, w0, w1).unwrap();
        g.backward(loss).unwrap();
        check(&to64(&probs), &grad_of(&g, pv), |pp, pat| wce_ref(pp, &y, w0 as f64, w1 as f64, pat), &mut report, "loss via probs");
    }
    report
}

/// Reference forward of a whole model, reading parameters from a flat f64
/// vector laid out in model order.
#[allow(clippy::too_many_arguments)]
fn model_loss_ref(cfg: &ModelConfig, shapes: &[Vec<usize>], flat: &[f64], x: &[f64], n: usize, y: &[u8], w0: f64, w1: f64, pat: &mut Pattern) -> f64 {
    let mut params = Vec::new();
    let mut off = 0;
    for s in shapes {
        let len: usize = s.iter().product();
        params.push(&flat[off..off + len]);
        off += len;
    }
    let (mut c, mut side) = (cfg.channels, cfg.input_side);
    let mut a: Vec<f64> = x.iter().map(|v| v - INPUT_OFFSET as f64).collect();
    for (i, l) in cfg.conv_layers.iter().enumerate() {
        a = relu_ref(&conv_ref(&a, n, c, side, side, params[2 * i], l.out_channels, l.kernel_size, params[2 * i + 1], l.stride), pat);
        side = (side - l.kernel_size) / l.stride + 1;
        c = l.out_channels;
        if cfg.pool[i] > 1 {
            a = pool_ref(&a, n * c, side, side, cfg.pool[i], pat);
            side /= cfg.pool[i];
        }
    }
    let mut idx = 2 * cfg.conv_layers.len();
    let mut width = c * side * side;
    if cfg.hidden_units > 0 {
        a = relu_ref(&linear_ref(&a, params[idx], params[idx + 1], width, cfg.hidden_units), pat);
        width = cfg.hidden_units;
        idx += 2;
    }
    let logits = linear_ref(&a, params[idx], params[idx + 1], width, 2);
    wce_ref(&softmax_ref(&logits, 2), y, w0, w1, pat)
}

pub fn small_cnn_end_to_end_gradients() -> Report {
    let mut report = new_report();
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
        let cfg = ModelConfig {
            input_side: 10,
            channels: 3,
            conv_layers: vec![
                ConvLayerSpec { out_channels: 4, kernel_size: 3, stride: 1 },
                ConvLayerSpec { out_channels: 5, kernel_size: 2, stride: 1 },
            ],
            pool: vec![2, 1],
            hidden_units: 6,
            outputs: 2,
        };
        let mut model = Model::new(cfg.clone(), seed).unwrap();
        // Non-zero biases so relu kinks are not aligned across units.
        for p in model.params_mut() {
            if p.shape().len() == 1 {
                for v in p.data_mut() {
                    *v = rng.gen_range(-0.1..0.1);
                }
            }
        }
        let n = 3;
        let x = rand_vec(&mut rng, n * 3 * 10 * 10, 0.0, 1.0);
        let y: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        let (w0, w1) = (0.1f32, 0.9f32);

        let mut g = Graph::new();
        let fwd = model.forward_taped(&mut g, Tensor::new(vec![n, 3, 10, 10], x.clone()).unwrap()).unwrap();
        let loss = g.weighted_cross_entropy(fwd.probs, &y, w0, w1).unwrap();
        g.backward(loss).unwrap();
        model.load_grads(&g, &fwd.params).unwrap();

        let shapes: Vec<Vec<usize>> = model.params().iter().map(|p| p.shape().to_vec()).collect();
        let flat: Vec<f64> = model.params().iter().flat_map(|p| to64(p.data())).collect();
        let analytic: Vec<f32> = model.params().iter().flat_map(|p| p.grad().unwrap().to_vec()).collect();
        let x64 = to64(&x);
        check(
            &flat,
            &analytic,
            |ff, pat| model_loss_ref(&cfg, &shapes, ff, &x64, n, &y, w0 as f64, w1 as f64, pat),
            &mut report,
            "cnn params",
        );
    }
    report
}

/// Every suite, named by the layer or loss it covers. Used by the
/// acceptance runner.
#[allow(dead_code)]
pub fn all() -> Vec<(&'static str, Report)> {
    vec![
        ("conv2d", conv2d_gradients()),
        ("max pool", max_pool_gradients()),
        ("relu", relu_gradients()),
        ("linear", linear_gradients()),
        ("softmax", softmax_gradients()),
        ("weighted cross-entropy", weighted_loss_gradients()),
        ("small cnn end to end", small_cnn_end_to_end_gradients()),
    ]
}
