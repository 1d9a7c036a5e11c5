//! End-to-end acceptance checks. Runs every criterion in order, prints one
//! PASS/FAIL line each, and exits non-zero if any failed.
//!
//! cargo test -p protestlens-cli --test acceptance

use std::fs;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Arc;
use std::time::{Duration, Instant};

use protestlens_core::corpus::{split_dataset, write_jsonl, SplitRatios};
use protestlens_core::synth;
use protestlens_core::tensor::gradcheck::{check_inputs, check_params, GradCheck};
use protestlens_core::tensor::{ParamStore, Tensor};
use protestlens_core::text::{
    sliding_window_attention, sliding_window_attention_var, BandPlan, TextClassifier, TextModelConfig, TokenFlag,
    TokenSequence,
};
use protestlens_core::trainer::{load_model, Classifier, LoadedModel};
use protestlens_core::vision::image::load_image;
use protestlens_core::vision::window::shift_mask;
use protestlens_core::vision::{
    cosine_window_attention, cosine_window_attention_var, cyclic_shift, window_partition, window_reverse,
    VisionClassifier, VisionModelConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_protestlens"))
        .args(args)
        .env_remove("PROTESTLENS_SEED")
        .output()
        .expect("spawn protestlens")
}

fn cli_ok(args: &[&str]) -> Result<Output, String> {
    let out = cli(args);
    if out.status.success() {
        Ok(out)
    } else {
        Err(format!("`protestlens {}` exited {:?}: {}", args.join(" "), out.status.code(), String::from_utf8_lossy(&out.stderr)))
    }
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

fn within(limit: Duration, start: Instant) -> Result<f64, String> {
    let secs = start.elapsed().as_secs_f64();
    ensure!(start.elapsed() < limit, "took {secs:.1} s, limit {} s", limit.as_secs());
    Ok(secs)
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn as64(t: &Tensor<f32>) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

// ---------------------------------------------------------------- 1

/// Softmax attention evaluated densely under an explicit band + global mask.
fn dense_band_oracle(q: &[f64], k: &[f64], v: &[f64], heads: usize, len: usize, dh: usize, flags: &[TokenFlag], window: usize) -> Vec<f64> {
    let allowed = |i: usize, j: usize| {
        flags[i] != TokenFlag::Padding
            && flags[j] != TokenFlag::Padding
            && (flags[i] == TokenFlag::Global || flags[j] == TokenFlag::Global || i.abs_diff(j) <= window / 2)
    };
    let mut out = vec![0.0; heads * len * dh];
    for h in 0..heads {
        let row = |t: &[f64], i: usize| t[(h * len + i) * dh..(h * len + i + 1) * dh].to_vec();
        for i in 0..len {
            let mut scores = vec![f64::NEG_INFINITY; len];
            for (j, s) in scores.iter_mut().enumerate() {
                if allowed(i, j) {
                    *s = row(q, i).iter().zip(row(k, j)).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt();
                }
            }
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if m == f64::NEG_INFINITY {
                continue;
            }
            let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
            for (j, s) in scores.iter().enumerate() {
                let w = (s - m).exp() / z;
                for (d, x) in row(v, j).iter().enumerate() {
                    out[(h * len + i) * dh + d] += w * x;
                }
            }
        }
    }
    out
}

fn attention_oracle() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut cases = 0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = 1 + seed as usize % 64;
        for window in [2, 4, 8] {
            let heads = rng.gen_range(1..=3);
            let dh = rng.gen_range(1..=8);
            let flags: Vec<TokenFlag> = (0..len)
                .map(|i| match (i, rng.gen_range(0..10)) {
                    (0, _) => TokenFlag::Global,
                    (_, 0) => TokenFlag::Global,
                    (_, 1) => TokenFlag::Padding,
                    _ => TokenFlag::Local,
                })
                .collect();
            let shape = [heads, len, dh];
            let (q, k, v) = (uniform(&shape, &mut rng), uniform(&shape, &mut rng), uniform(&shape, &mut rng));
            let got = sliding_window_attention(&q, &k, &v, window, &flags).map_err(|e| e.to_string())?;
            let want = dense_band_oracle(&as64(&q), &as64(&k), &as64(&v), heads, len, dh, &flags, window);
            let diff = max_diff(&as64(&got), &want);
            ensure!(diff < 1e-5, "seed {seed} len {len} window {window}: max abs diff {diff:e}");
            worst = worst.max(diff);
            cases += 1;
        }
    }
    let secs = within(Duration::from_secs(10), start)?;
    Ok(format!("{cases} cases, worst diff {worst:.1e}, {secs:.2} s"))
}

// ---------------------------------------------------------------- 2

fn vision_roundtrips() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<u32>>();
    for case in 0..500 {
        let window = rng.gen_range(1..=8);
        let (h, w, c) = (window * rng.gen_range(1..=4), window * rng.gen_range(1..=4), rng.gen_range(1..=4));
        // arbitrary bit patterns, NaNs included, must survive untouched
        let x = Tensor::from_fn(&[h, w, c], |_| f32::from_bits(rng.gen()));
        let parts = window_partition(&x, window).map_err(|e| e.to_string())?;
        let back = window_reverse(&parts, h, w).map_err(|e| e.to_string())?;
        ensure!(bits(&back) == bits(&x), "case {case}: partition roundtrip differs ({h}×{w}, window {window})");
        let limit = h.min(w) as isize - 1;
        let d = rng.gen_range(-limit..=limit);
        let rolled = cyclic_shift(&x, d).map_err(|e| e.to_string())?;
        let unrolled = cyclic_shift(&rolled, -d).map_err(|e| e.to_string())?;
        ensure!(bits(&unrolled) == bits(&x), "case {case}: shift {d} roundtrip differs");
    }

    // 16×16 grid, window 4, shift 2: a pair of tokens may interact only if
    // their displacement in the shifted grid equals their displacement in
    // the original image, i.e. neither axis wrapped between them.
    let (grid, window, shift, ch) = (16usize, 4usize, 2usize, 3usize);
    let x = uniform(&[grid, grid, ch], &mut rng);
    let shifted = cyclic_shift(&x, shift as isize).map_err(|e| e.to_string())?;
    for y in 0..grid {
        for xx in 0..grid {
            let src = ((y + shift) % grid) * grid + (xx + shift) % grid;
            ensure!(shifted.row_of(y * grid + xx, ch) == x.row_of(src, ch), "roll moved ({y},{xx}) from the wrong source");
        }
    }
    let n = window * window;
    let n_win = (grid / window).pow(2);
    let wins = window_partition(&shifted, window).map_err(|e| e.to_string())?;
    let q = wins.clone().reshape(&[n_win, 1, n, ch]).map_err(|e| e.to_string())?;
    let k = window_partition(&cyclic_shift(&uniform(&[grid, grid, ch], &mut rng), shift as isize).unwrap(), window)
        .unwrap()
        .reshape(&[n_win, 1, n, ch])
        .unwrap();
    let mask = shift_mask(grid, grid, window, shift).map_err(|e| e.to_string())?;
    let bias = Tensor::zeros(&[1, n, n]);
    let out = cosine_window_attention(&q, &k, &q, &Tensor::new(&[1], vec![0.1f32.ln()]).unwrap(), &bias, Some(&mask), 0.01)
        .map_err(|e| e.to_string())?;
    let coords = |win: usize, slot: usize| {
        let y = (win / (grid / window)) * window + slot / window;
        let x = (win % (grid / window)) * window + slot % window;
        (y as isize, x as isize, ((y + shift) % grid) as isize, ((x + shift) % grid) as isize)
    };
    let mut zeros = 0;
    for win in 0..n_win {
        for a in 0..n {
            for b in 0..n {
                let (ya, xa, oya, oxa) = coords(win, a);
                let (yb, xb, oyb, oxb) = coords(win, b);
                let together = ya - yb == oya - oyb && xa - xb == oxa - oxb;
                let at = (win * n + a) * n + b;
                ensure!(mask[at] == together, "mask disagrees at window {win} ({a},{b})");
                let w = out.weights[at];
                if together {
                    ensure!(w > 0.0, "allowed pair has zero weight at window {win} ({a},{b})");
                } else {
                    ensure!(w == 0.0, "wrapped pair has weight {w} at window {win} ({a},{b})");
                    zeros += 1;
                }
            }
        }
    }
    ensure!(zeros > 0, "no masked pairs found");
    let secs = within(Duration::from_secs(5), start)?;
    Ok(format!("500 tensors bit-exact, {zeros} wrapped pairs exactly 0, {secs:.2} s"))
}

trait RowOf {
    fn row_of(&self, token: usize, ch: usize) -> &[f32];
}

impl RowOf for Tensor<f32> {
    fn row_of(&self, token: usize, ch: usize) -> &[f32] {
        &self.data()[token * ch..(token + 1) * ch]
    }
}

// ---------------------------------------------------------------- 3

/// Direct evaluation of `softmax_j(cos(q_i, k_j)/tau + bias_ij)` over
/// allowed pairs, returning (weights, output).
#[allow(clippy::too_many_arguments)]
fn cosine_oracle(q: &[f64], k: &[f64], v: &[f64], log_tau: &[f64], bias: &[f64], mask: Option<&[bool]>, dims: [usize; 4], tau_min: f64) -> (Vec<f64>, Vec<f64>) {
    let [n_win, heads, n, dh] = dims;
    let norm = |r: &[f64]| r.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    let mut weights = vec![0.0; n_win * heads * n * n];
    let mut out = vec![0.0; n_win * heads * n * dh];
    for w in 0..n_win {
        for h in 0..heads {
            let tau = log_tau[h].exp().max(tau_min);
            let row = |t: &[f64], i: usize| t[((w * heads + h) * n + i) * dh..((w * heads + h) * n + i + 1) * dh].to_vec();
            for i in 0..n {
                let qi = row(q, i);
                let mut logits = vec![f64::NEG_INFINITY; n];
                for (j, l) in logits.iter_mut().enumerate() {
                    if mask.map_or(true, |m| m[(w * n + i) * n + j]) {
                        let kj = row(k, j);
                        let cos = qi.iter().zip(&kj).map(|(a, b)| a * b).sum::<f64>() / (norm(&qi) * norm(&kj));
                        *l = cos / tau + bias[(h * n + i) * n + j];
                    }
                }
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                for j in 0..n {
                    let p = (logits[j] - m).exp() / z;
                    weights[((w * heads + h) * n + i) * n + j] = p;
                    for (d, x) in row(v, j).iter().enumerate() {
                        out[((w * heads + h) * n + i) * dh + d] += p * x;
                    }
                }
            }
        }
    }
    (weights, out)
}

fn cosine_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut worst_oracle, mut worst_scale, mut worst_bound) = (0.0f64, 0.0f64, f64::NEG_INFINITY);
    for case in 0..200 {
        let window = [2usize, 3, 4][case % 3];
        let n = window * window;
        let (n_win, heads, dh) = (rng.gen_range(1..=3), rng.gen_range(1..=3), rng.gen_range(1..=8));
        let dims = [n_win, heads, n, dh];
        let shape = dims.to_vec();
        let (q, k, v) = (uniform(&shape, &mut rng), uniform(&shape, &mut rng), uniform(&shape, &mut rng));
        // some heads sit below the temperature floor
        let log_tau = Tensor::from_fn(&[heads], |_| rng.gen_range(0.001f32.ln()..2f32.ln()));
        let bias = Tensor::from_fn(&[heads, n, n], |_| rng.gen_range(-2.0..2.0));
        let mask: Option<Vec<bool>> = (case % 2 == 1).then(|| {
            (0..n_win * n * n).map(|e| (e % n) == (e / n) % n || rng.gen_bool(0.7)).collect()
        });
        let got = cosine_window_attention(&q, &k, &v, &log_tau, &bias, mask.as_deref(), 0.01).map_err(|e| e.to_string())?;

        for (b, &c) in got.scaled_cosines.iter().enumerate() {
            let inv_tau = got.inv_tau[(b / (n * n)) % heads] as f64;
            ensure!(inv_tau <= 100.0 * (1.0 + 1e-6), "case {case}: 1/tau {inv_tau} above the floor");
            worst_bound = worst_bound.max(c.abs() as f64 / inv_tau);
            ensure!((c.abs() as f64) <= inv_tau * (1.0 + 1e-6), "case {case}: scaled cosine {c} outside ±{inv_tau}");
        }

        let (w_ref, o_ref) = cosine_oracle(&as64(&q), &as64(&k), &as64(&v), &as64(&log_tau), &as64(&bias), mask.as_deref(), dims, 0.01);
        let w_got: Vec<f64> = got.weights.iter().map(|&w| w as f64).collect();
        let diff = max_diff(&w_got, &w_ref).max(max_diff(&as64(&got.out), &o_ref));
        ensure!(diff < 1e-5, "case {case}: oracle diff {diff:e}");
        worst_oracle = worst_oracle.max(diff);

        let q64: Tensor<f64> = q.cast();
        let mut scaled = q64.clone();
        for row in scaled.data_mut().chunks_mut(dh) {
            let s = 10f64.powf(rng.gen_range(-3.0..3.0));
            row.iter_mut().for_each(|x| *x *= s);
        }
        let run = |q: &Tensor<f64>| cosine_window_attention(q, &k.cast(), &v.cast(), &log_tau.cast(), &bias.cast(), mask.as_deref(), 0.01);
        let (a, b) = (run(&q64).map_err(|e| e.to_string())?, run(&scaled).map_err(|e| e.to_string())?);
        let diff = max_diff(&a.weights, &b.weights);
        ensure!(diff < 1e-6, "case {case}: rescaling q rows moved attention by {diff:e}");
        worst_scale = worst_scale.max(diff);
    }
    Ok(format!(
        "200 cases: max |cos/τ|·τ {worst_bound:.4}, rescale diff {worst_scale:.1e}, oracle diff {worst_oracle:.1e}"
    ))
}

// ---------------------------------------------------------------- 4

fn jitter(store: &ParamStore<f64>, seed: u64) -> ParamStore<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = store.clone();
    for id in store.ids().collect::<Vec<_>>() {
        out.get_mut(id).data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.1..0.1));
    }
    out
}

fn gradient_checks() -> Outcome {
    const H: f64 = 1e-5;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut results: Vec<(&str, GradCheck)> = Vec::new();
    let err = |e: protestlens_core::Error| e.to_string();
    let mut away_from_zero = |shape: &[usize]| {
        Tensor::from_fn(shape, |_| {
            let m: f64 = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) { m } else { -m }
        })
    };
    let (a34, b34, a35) = (away_from_zero(&[3, 4]), away_from_zero(&[3, 4]), away_from_zero(&[3, 5]));
    let (b54, bias4, a234) = (away_from_zero(&[5, 4]), away_from_zero(&[4]), away_from_zero(&[2, 3, 4]));
    let (a53, a36, g6, be6) = (away_from_zero(&[5, 3]), away_from_zero(&[3, 6]), away_from_zero(&[6]), away_from_zero(&[6]));
    let (logits43, logits24) = (away_from_zero(&[4, 3]), away_from_zero(&[2, 4]));

    results.push(("add", check_inputs(&[a34.clone(), b34.clone()], H, |g, x| g.add(x[0], x[1])).map_err(err)?));
    results.push(("add_bias", check_inputs(&[a34.clone(), bias4.clone()], H, |g, x| g.add_bias(x[0], x[1])).map_err(err)?));
    results.push(("mul", check_inputs(&[a34.clone(), b34.clone()], H, |g, x| g.mul(x[0], x[1])).map_err(err)?));
    results.push(("scale", check_inputs(&[a34.clone()], H, |g, x| g.scale(x[0], -1.7)).map_err(err)?));
    results.push(("matmul", check_inputs(&[a35.clone(), b54.clone()], H, |g, x| g.matmul(x[0], x[1])).map_err(err)?));
    results.push(("linear", check_inputs(&[a35.clone(), b54, bias4], H, |g, x| g.linear(x[0], x[1], x[2])).map_err(err)?));
    results.push((
        "reshape",
        check_inputs(&[a34.clone(), away_from_zero(&[6, 2])], H, |g, x| {
            let r = g.reshape(x[0], &[6, 2])?;
            g.mul(r, x[1])
        })
        .map_err(err)?,
    ));
    results.push(("permute", check_inputs(&[a234], H, |g, x| g.permute(x[0], &[2, 0, 1])).map_err(err)?));
    results.push(("gather_rows", check_inputs(&[a53], H, |g, x| g.gather_rows(x[0], &[4, 0, 4, 2])).map_err(err)?));
    results.push(("layer_norm", check_inputs(&[a36.clone(), g6, be6], H, |g, x| g.layer_norm(x[0], x[1], x[2], 1e-5)).map_err(err)?));
    results.push(("gelu", check_inputs(&[a36.clone()], H, |g, x| g.gelu(x[0])).map_err(err)?));
    results.push(("relu", check_inputs(&[a36.clone()], H, |g, x| g.relu(x[0])).map_err(err)?));
    results.push(("softmax rows", check_inputs(&[a34.clone()], H, |g, x| g.softmax(x[0], 1)).map_err(err)?));
    results.push(("softmax columns", check_inputs(&[a34.clone()], H, |g, x| g.softmax(x[0], 0)).map_err(err)?));
    results.push(("sum", check_inputs(&[a34.clone()], H, |g, x| g.sum(x[0])).map_err(err)?));
    results.push(("mean_rows", check_inputs(&[a34.clone()], H, |g, x| g.mean_rows(x[0])).map_err(err)?));
    results.push((
        "dropout",
        check_inputs(&[a36], H, |g, x| g.dropout(x[0], 0.3, &mut ChaCha8Rng::seed_from_u64(1))).map_err(err)?,
    ));
    results.push((
        "cross_entropy",
        check_inputs(&[logits43], H, |g, x| g.cross_entropy(x[0], &[0, 2, 1, 2], Some(&[1.0, 2.0, 0.5, 1.0]))).map_err(err)?,
    ));
    results.push((
        "bce_with_logits",
        check_inputs(&[logits24], H, |g, x| {
            g.bce_with_logits(x[0], &[Some(1.0), None, Some(0.0), Some(1.0), Some(0.0), Some(1.0), None, Some(0.0)], Some(&[1.0, 1.0, 2.0, 0.5, 1.0, 1.5, 1.0, 0.5]))
        })
        .map_err(err)?,
    ));

    let flags: Vec<TokenFlag> = (0..12)
        .map(|i| match i {
            0 | 7 => TokenFlag::Global,
            10 | 11 => TokenFlag::Padding,
            _ => TokenFlag::Local,
        })
        .collect();
    let plan = Arc::new(BandPlan::new(&flags, 4).map_err(err)?);
    let qkv: Vec<Tensor<f64>> = (0..3).map(|_| away_from_zero(&[2, 12, 3])).collect();
    results.push((
        "sliding_window_attention",
        check_inputs(&qkv, H, |g, x| sliding_window_attention_var(g, x[0], x[1], x[2], &plan)).map_err(err)?,
    ));

    let mask = Arc::new(shift_mask(4, 4, 2, 1).map_err(err)?);
    let mut cos_inputs: Vec<Tensor<f64>> = (0..3).map(|_| away_from_zero(&[4, 2, 4, 3])).collect();
    cos_inputs.push(Tensor::new(&[2], vec![0.3f64.ln(), 0.5f64.ln()]).unwrap());
    cos_inputs.push(away_from_zero(&[2, 4, 4]));
    results.push((
        "cosine_window_attention",
        check_inputs(&cos_inputs, H, |g, x| cosine_window_attention_var(g, x[0], x[1], x[2], x[3], x[4], Some(Arc::clone(&mask)), 0.01))
            .map_err(err)?,
    ));

    // one full text layer with globals and padding
    let tcfg = TextModelConfig { max_len: 16, vocab_size: 20, d_model: 8, n_heads: 2, n_layers: 1, window: 4, global_positions: vec![0], dropout: 0.0 };
    let text = TextClassifier::new(tcfg, 41).map_err(err)?;
    let tstore = jitter(&text.params.cast::<f64>(), 42);
    let seq = TokenSequence::from_body(&[4, 9, 11, 3, 8, 15, 5], &text.net.config).padded(3);
    let tplan = text.net.plan(&seq).map_err(err)?;
    let tx = away_from_zero(&[seq.len(), 8]);
    results.push((
        "text layer",
        check_params(&tstore, H, |g| {
            let x = g.input(tx.clone(), false);
            text.net.layer(g, x, 0, &tplan, None)
        })
        .map_err(err)?,
    ));

    // one shifted vision block, then the whole 2-block toy model
    let vcfg = VisionModelConfig { image_size: 16, patch_size: 4, window: 2, embed_dim: 8, depths: vec![2], heads: vec![2], cpb_hidden: 8, ..VisionModelConfig::default() };
    let vision = VisionClassifier::new(vcfg, 43).map_err(err)?;
    let vstore = jitter(&vision.params.cast::<f64>(), 44);
    let vx = away_from_zero(&[16, 8]);
    results.push((
        "vision block (shifted)",
        check_params(&vstore, H, |g| {
            let x = g.input(vx.clone(), false);
            vision.net.block(g, x, 0, 1)
        })
        .map_err(err)?,
    ));
    let image = synth::image_dataset(1, 16, 1.0, 45).remove(0).pixels;
    results.push(("vision toy model", check_params(&vstore, H, |g| vision.net.logits(g, &image)).map_err(err)?));

    let (name, worst) = results
        .iter()
        .max_by(|a, b| a.1.max_rel_err.total_cmp(&b.1.max_rel_err))
        .map(|(n, r)| (*n, r.clone()))
        .unwrap();
    for (n, r) in &results {
        ensure!(r.checked > 0, "{n}: nothing checked");
        ensure!(r.max_rel_err < 1e-3, "{n}: rel err {:.2e} at {}", r.max_rel_err, r.worst);
    }
    let checked: usize = results.iter().map(|(_, r)| r.checked).sum();
    let secs = within(Duration::from_secs(60), start)?;
    Ok(format!(
        "{} checks over {checked} derivatives, worst rel err {:.1e} ({name}), {secs:.1} s",
        results.len(),
        worst.max_rel_err
    ))
}

// ---------------------------------------------------------------- 5

fn accuracy(report: &Path) -> Result<f64, String> {
    let v: Value = serde_json::from_str(&fs::read_to_string(report).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    ensure!(v["split"] == "test", "report.json scored the {} split", v["split"]);
    v["report"]["accuracy"].as_f64().ok_or_else(|| "report.json has no accuracy".into())
}

fn synthetic_mirror() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();

    let rows = synth::text_corpus(1190, 2700, 5);
    let split = split_dataset(&rows, SplitRatios::default(), 5).map_err(|e| e.to_string())?;
    for (name, part) in [("train", &split.train), ("val", &split.val), ("test", &split.test)] {
        write_jsonl(&d.join(format!("{name}.jsonl")), part).map_err(|e| e.to_string())?;
    }
    let text_out = d.join("text-run");
    let cfg = root().join("configs/text-toy.json");
    cli_ok(&[
        "train-text", "--train", p(&d.join("train.jsonl")), "--val", p(&d.join("val.jsonl")), "--test", p(&d.join("test.jsonl")),
        "--vocab-size", "2000", "--model-config", p(&cfg), "--epochs", "6", "--lr", "3e-3", "--out", p(&text_out), "-q",
    ])?;
    let text_acc = accuracy(&text_out.join("report.json"))?;

    let images = synth::image_dataset(800, 32, 0.5, 6);
    let img_dir = d.join("images");
    synth::write_image_dataset(&images, &img_dir).map_err(|e| e.to_string())?;
    let manifest = fs::read_to_string(img_dir.join("manifest.csv")).map_err(|e| e.to_string())?;
    let mut lines = manifest.lines();
    let header = lines.next().unwrap();
    let body: Vec<&str> = lines.collect();
    for (name, range) in [("train", 0..640), ("val", 640..720), ("test", 720..800)] {
        let text = std::iter::once(header).chain(body[range].iter().copied()).collect::<Vec<_>>().join("\n") + "\n";
        fs::write(img_dir.join(format!("{name}.csv")), text).map_err(|e| e.to_string())?;
    }
    let vision_out = d.join("vision-run");
    cli_ok(&[
        "train-image", "--train", p(&img_dir.join("train.csv")), "--val", p(&img_dir.join("val.csv")), "--test", p(&img_dir.join("test.csv")),
        "--model-config", p(&root().join("configs/vision-toy.json")), "--epochs", "8", "--lr", "3e-3", "--out", p(&vision_out), "-q",
    ])?;
    let vision_acc = accuracy(&vision_out.join("report.json"))?;

    ensure!(text_acc >= 0.94, "text test accuracy {text_acc:.4} < 0.94");
    ensure!(vision_acc >= 0.94, "vision protest accuracy {vision_acc:.4} < 0.94");
    let secs = within(Duration::from_secs(600), start)?;
    Ok(format!("text {text_acc:.4} on {} held out, vision {vision_acc:.4} on 80 held out, {secs:.0} s", split.test.len()))
}

// ---------------------------------------------------------------- 6

fn corpus_fixture() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    let committed = root().join("fixtures/corpus");
    synth::corpus_fixture(2024).write(&d.join("regen")).map_err(|e| e.to_string())?;
    for f in ["events.csv", "articles.jsonl", "archive.jsonl"] {
        let a = fs::read(committed.join(f)).map_err(|e| format!("{f}: {e}"))?;
        let b = fs::read(d.join("regen").join(f)).map_err(|e| e.to_string())?;
        ensure!(a == b, "committed {f} differs from the generator output");
    }

    let run = |out: &Path| {
        cli_ok(&[
            "build-corpus", "--events", p(&committed.join("events.csv")), "--articles", p(&committed.join("articles.jsonl")),
            "--archive", p(&committed.join("archive.jsonl")), "--negatives", "270", "--seed", "7", "--out", p(out), "-q",
        ])
    };
    run(&d.join("a"))?;
    run(&d.join("b"))?;
    let manifest: Value = serde_json::from_slice(&fs::read(d.join("a/manifest.json")).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let c = &manifest["counts"];
    let (matches, positives, negatives) = (c["matches"].as_u64(), c["positives"].as_u64(), c["negatives"].as_u64());
    ensure!(
        (matches, positives, negatives) == (Some(167), Some(119), Some(270)),
        "counts {matches:?}/{positives:?}/{negatives:?}, expected 167/119/270"
    );
    let mut files: Vec<_> = fs::read_dir(d.join("a")).unwrap().map(|e| e.unwrap().file_name()).collect();
    files.sort();
    for f in &files {
        let (a, b) = (fs::read(d.join("a").join(f)).unwrap(), fs::read(d.join("b").join(f)).unwrap());
        ensure!(a == b, "{} differs between runs", f.to_string_lossy());
    }
    Ok(format!("167 matches → 119 positives, 270 negatives; {} output files byte-identical", files.len()))
}

// ---------------------------------------------------------------- 7

fn logits_diff(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    max_diff(&as64(a), &as64(b))
}

fn checkpoints() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    let err = |e: protestlens_core::Error| e.to_string();

    // save → load
    let tcfg = TextModelConfig { max_len: 32, vocab_size: 50, d_model: 16, n_heads: 2, n_layers: 2, window: 4, global_positions: vec![0], dropout: 0.0 };
    let text = TextClassifier::new(tcfg, 70).map_err(err)?;
    text.checkpoint().save(&d.join("t.plck")).map_err(err)?;
    let seq = TokenSequence::from_body(&[5, 9, 30, 41, 7, 7, 12], &text.net.config);
    let LoadedModel::Text { model: t2, .. } = load_model(&d.join("t.plck")).map_err(err)?.0 else {
        return Err("text checkpoint loaded as a vision model".into());
    };
    let text_diff = logits_diff(&text.logits(&seq).map_err(err)?, &t2.logits(&seq).map_err(err)?);
    ensure!(text_diff < 1e-7, "text roundtrip logits differ by {text_diff:e}");

    let vcfg = VisionModelConfig { image_size: 32, cpb_hidden: 16, ..VisionModelConfig::default() };
    let vision = VisionClassifier::new(vcfg, 71).map_err(err)?;
    vision.checkpoint().save(&d.join("v.plck")).map_err(err)?;
    let LoadedModel::Vision(v2) = load_model(&d.join("v.plck")).map_err(err)?.0 else {
        return Err("vision checkpoint loaded as a text model".into());
    };
    let img = synth::image_dataset(1, 32, 1.0, 72).remove(0).pixels;
    let vision_diff = logits_diff(&vision.logits(&img).map_err(err)?, &v2.logits(&img).map_err(err)?);
    ensure!(vision_diff < 1e-7, "vision roundtrip logits differ by {vision_diff:e}");

    // golden files
    let golden = root().join("fixtures/golden");
    for name in ["text-tiny", "vision-tiny"] {
        let out = cli_ok(&["inspect-checkpoint", p(&golden.join(format!("{name}.plck")))])?;
        let want = fs::read_to_string(golden.join(format!("{name}.listing"))).map_err(|e| e.to_string())?;
        ensure!(String::from_utf8_lossy(&out.stdout) == want, "{name}: inspect-checkpoint listing differs from the golden one");
    }
    let mut golden_diff = 0.0f64;
    let read_json = |f: &str| -> Result<Vec<Value>, String> {
        serde_json::from_str(&fs::read_to_string(golden.join(f)).map_err(|e| e.to_string())?).map_err(|e| e.to_string())
    };
    let want_logits = |v: &Value| -> Vec<f64> { v["logits"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect() };
    let LoadedModel::Text { model: gt, vocab: Some(gv) } = load_model(&golden.join("text-tiny.plck")).map_err(err)?.0 else {
        return Err("golden text checkpoint lacks its vocabulary".into());
    };
    for entry in read_json("text-tiny.logits.json")? {
        let seq = TokenSequence::encode(entry["text"].as_str().unwrap(), &gv, gt.config());
        golden_diff = golden_diff.max(max_diff(&as64(&gt.logits(&seq).map_err(err)?), &want_logits(&entry)));
    }
    let LoadedModel::Vision(gvis) = load_model(&golden.join("vision-tiny.plck")).map_err(err)?.0 else {
        return Err("golden vision checkpoint loaded as text".into());
    };
    for entry in read_json("vision-tiny.logits.json")? {
        let img = load_image(&golden.join(entry["image"].as_str().unwrap())).map_err(err)?;
        golden_diff = golden_diff.max(max_diff(&as64(&gvis.logits(&img).map_err(err)?), &want_logits(&entry)));
    }
    ensure!(golden_diff < 1e-6, "golden logits moved by {golden_diff:e}");

    // corrupted files
    let good = fs::read(golden.join("text-tiny.plck")).map_err(|e| e.to_string())?;
    let hlen = u64::from_le_bytes(good[..8].try_into().unwrap()) as usize;
    let header: Value = serde_json::from_slice(&good[8..8 + hlen]).unwrap();
    let reheader = |h: &Value, payload: &[u8]| {
        let json = serde_json::to_vec(h).unwrap();
        let mut b = (json.len() as u64).to_le_bytes().to_vec();
        b.extend(json);
        b.extend_from_slice(payload);
        b
    };
    let payload = &good[8 + hlen..];
    let mut cases: Vec<(&str, Vec<u8>, &str)> = vec![
        ("empty file", vec![], "integrity error"),
        ("short prefix", good[..5].to_vec(), "integrity error"),
        ("truncated header", good[..8 + hlen / 2].to_vec(), "integrity error"),
        ("truncated payload", good[..good.len() - 4].to_vec(), "integrity error"),
        ("extra payload", [good.as_slice(), &[0, 0, 0, 0]].concat(), "integrity error"),
        ("huge header length", [&u64::MAX.to_le_bytes()[..], &good[8..]].concat(), "integrity error"),
        ("random bytes", (0..4096u32).map(|i| (i.wrapping_mul(2654435761) >> 13) as u8).collect(), "integrity error"),
    ];
    let mut broken_json = good.clone();
    broken_json[8 + 1] = b'}';
    cases.push(("corrupt header JSON", broken_json, "integrity error"));
    let mut shifted = header.clone();
    let first = shifted["tensors"].as_object_mut().unwrap().values_mut().next().unwrap();
    first["offset"] = Value::from(4);
    cases.push(("moved tensor offset", reheader(&shifted, payload), "integrity error"));
    let mut reshaped = header.clone();
    reshaped["tensors"].as_object_mut().unwrap().values_mut().next().unwrap()["shape"] = serde_json::json!([1u64 << 40, 1u64 << 40]);
    cases.push(("oversized shape", reheader(&reshaped, payload), "integrity error"));
    let mut dropped = header.clone();
    let last = dropped["tensors"].as_object().unwrap().keys().last().unwrap().clone();
    dropped["tensors"].as_object_mut().unwrap().remove(&last);
    cases.push(("missing tensor", reheader(&dropped, payload), "integrity error"));
    let mut future = header.clone();
    future["format_version"] = Value::from(99);
    cases.push(("future version", reheader(&future, payload), "incompatible checkpoint"));

    for (what, bytes, expect) in &cases {
        let path = d.join("broken.plck");
        fs::write(&path, bytes).unwrap();
        let out = cli(&["inspect-checkpoint", p(&path)]);
        let stderr = String::from_utf8_lossy(&out.stderr);
        ensure!(out.status.code() == Some(2), "{what}: exit {:?}, stderr {stderr}", out.status.code());
        ensure!(stderr.contains(expect) && !stderr.contains("panicked"), "{what}: unexpected stderr {stderr}");
        ensure!(load_model(&path).is_err(), "{what}: library load accepted it");
    }
    Ok(format!(
        "roundtrip diff {:.1e}/{:.1e}, golden listings match, golden logits diff {golden_diff:.1e}, {} corrupt files rejected",
        text_diff,
        vision_diff,
        cases.len()
    ))
}

// ---------------------------------------------------------------- 8

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    let rows = synth::text_corpus(60, 90, 8);
    let split = split_dataset(&rows, SplitRatios::default(), 8).map_err(|e| e.to_string())?;
    write_jsonl(&d.join("train.jsonl"), &split.train).map_err(|e| e.to_string())?;
    write_jsonl(&d.join("val.jsonl"), &split.val).map_err(|e| e.to_string())?;
    let cfg = root().join("configs/text-toy.json");
    let (train, val) = (d.join("train.jsonl"), d.join("val.jsonl"));
    let run = |name: &str, extra: &[&str]| -> Result<(Vec<u8>, Vec<u8>), String> {
        let out = d.join(name);
        let mut args = vec![
            "train-text", "--train", p(&train), "--val", p(&val), "--vocab-size", "500",
            "--model-config", p(&cfg), "--epochs", "2", "--batch-size", "8", "--seed", "7", "--out", p(&out), "-q",
        ];
        args.extend_from_slice(extra);
        cli_ok(&args)?;
        let history = fs::read(out.join("history.csv")).map_err(|e| e.to_string())?;
        let model = fs::read(out.join("model.plck")).map_err(|e| e.to_string())?;
        Ok((history, model))
    };
    let first = run("one", &[])?;
    let second = run("two", &[])?;
    ensure!(first.0 == second.0, "history.csv differs between two seed-7 runs");
    ensure!(first.1 == second.1, "model.plck differs between two seed-7 runs");
    let sequential = run("three", &["--sequential"])?;
    ensure!(first.0 == sequential.0, "history.csv differs between parallel and sequential runs");
    let rows = first.0.iter().filter(|&&b| b == b'\n').count() - 1;
    Ok(format!("history.csv ({rows} rows) and model.plck identical across runs and execution modes"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("attention oracle", attention_oracle),
        ("vision roundtrips and shift mask", vision_roundtrips),
        ("cosine attention properties", cosine_properties),
        ("gradient checks", gradient_checks),
        ("synthetic end-to-end accuracy", synthetic_mirror),
        ("corpus fixture", corpus_fixture),
        ("checkpoints", checkpoints),
        ("determinism", determinism),
    ];
    let mut stdout = std::io::stdout();
    let mut failed = 0;
    writeln!(stdout, "\nrunning {} acceptance criteria", criteria.len()).unwrap();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match result {
            Ok(detail) => writeln!(stdout, "PASS criterion {} {name}: {detail}", i + 1).unwrap(),
            Err(reason) => {
                failed += 1;
                writeln!(stdout, "FAIL criterion {} {name}: {reason}", i + 1).unwrap();
            }
        }
        stdout.flush().unwrap();
    }
    writeln!(stdout, "acceptance: {} passed, {failed} failed\n", criteria.len() - failed).unwrap();
    if failed > 0 {
        std::process::exit(1);
    }
}
