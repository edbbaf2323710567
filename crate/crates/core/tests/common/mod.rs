//! Independent oracles and the check routines shared by the integration tests.
#![allow(dead_code)]

use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var};
use finemask::base_model::{Point, PointLabel, PromptSet};
use finemask::checkpoint::{decode_archive, encode_archive, load_into, store_table};
use finemask::localization::{assemble_local_feature, crop_subimages, local_token_count, multi_granularity_pool, GlobalLocalFeatures};
use finemask::losses::{bce_loss, dice_loss, total_loss, LossWeights};
use finemask::metrics::{boundary_iou, contour_f, iou, miou_mbiou, BinaryMask};
use finemask::nn::{ops, Attention, ParamStore};
use finemask::pipeline::{FineMaskModel, TrainMode};
use finemask::refinement::DecoderBlock;
use finemask::retarget::{rasterize_clicks, RfbBlock};
use finemask::video::{propagate_video, MemoryBank, MemoryEntry};
use finemask::{ModelConfig, ModuleSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Outcome of one named check.
#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: &str, pass: bool, detail: impl Into<String>) -> Self {
        Self { name: name.to_string(), pass, detail: detail.into() }
    }
}

pub fn all_pass(checks: &[Check]) -> bool {
    checks.iter().all(|c| c.pass)
}

pub fn summary(checks: &[Check]) -> String {
    checks.iter().map(|c| format!("{}:{}", c.name, if c.pass { "ok" } else { "FAIL" })).collect::<Vec<_>>().join(" ")
}

pub fn report(checks: &[Check]) {
    for c in checks {
        println!("    [{}] {} - {}", if c.pass { "ok" } else { "FAIL" }, c.name, c.detail);
    }
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, dims: &[usize], dtype: DType) -> Tensor {
    let n: usize = dims.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(v, dims, &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
}

pub fn vals(t: &Tensor) -> Vec<f64> {
    ops::to_f64_vec(t).unwrap()
}

// ---------------------------------------------------------------- oracles

/// Direct per-window mean of `[B, C, H, W]` data.
pub fn pool_oracle(x: &[f64], dims: (usize, usize, usize, usize), k: usize) -> Vec<f64> {
    let (b, c, h, w) = dims;
    let (oh, ow) = (h / k, w / k);
    let mut out = Vec::with_capacity(b * c * oh * ow);
    for bc in 0..b * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = 0.0;
                for dy in 0..k {
                    for dx in 0..k {
                        s += x[bc * h * w + (oy * k + dy) * w + ox * k + dx];
                    }
                }
                out.push(s / (k * k) as f64);
            }
        }
    }
    out
}

/// Half-pixel bilinear resize of one `h x w` plane, edge-clamped.
pub fn bilinear_oracle(x: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let src = |o: usize, n: usize, on: usize| -> (usize, usize, f64) {
        let c = ((o as f64 + 0.5) * n as f64 / on as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = c.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, c - i0 as f64)
    };
    let mut out = vec![0.0; oh * ow];
    for oy in 0..oh {
        let (y0, y1, fy) = src(oy, h, oh);
        for ox in 0..ow {
            let (x0, x1, fx) = src(ox, w, ow);
            let top = x[y0 * w + x0] * (1.0 - fx) + x[y0 * w + x1] * fx;
            let bot = x[y1 * w + x0] * (1.0 - fx) + x[y1 * w + x1] * fx;
            out[oy * ow + ox] = top * (1.0 - fy) + bot * fy;
        }
    }
    out
}

/// Click disk by Euclidean distance in floating point.
pub fn disk_oracle(points: &[Point], d: usize, image_side: usize, radius: usize) -> Vec<f32> {
    let mut out = vec![0f32; 2 * d * d];
    for p in points {
        let cx = ((p.x * d as f64 / image_side as f64).floor()).clamp(0.0, (d - 1) as f64);
        let cy = ((p.y * d as f64 / image_side as f64).floor()).clamp(0.0, (d - 1) as f64);
        let ch = if p.label == PointLabel::Positive { 0 } else { 1 };
        for y in 0..d {
            for x in 0..d {
                if ((x as f64 - cx).hypot(y as f64 - cy)) <= radius as f64 {
                    out[(ch * d + y) * d + x] = 1.0;
                }
            }
        }
    }
    out
}

fn cells(m: &BinaryMask) -> Vec<(i64, i64)> {
    (0..m.h).flat_map(|y| (0..m.w).map(move |x| (y, x))).filter(|&(y, x)| m.get(y, x)).map(|(y, x)| (y as i64, x as i64)).collect()
}

fn fg(m: &BinaryMask, y: i64, x: i64) -> bool {
    y >= 0 && x >= 0 && (y as usize) < m.h && (x as usize) < m.w && m.get(y as usize, x as usize)
}

/// Foreground pixels with a 4-neighbour that is background or off-canvas.
pub fn boundary_oracle(m: &BinaryMask) -> Vec<(i64, i64)> {
    cells(m)
        .into_iter()
        .filter(|&(y, x)| [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|&(dy, dx)| !fg(m, y + dy, x + dx)))
        .collect()
}

fn ratio(inter: usize, union: usize) -> f64 {
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn iou_oracle(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let sa: std::collections::HashSet<_> = cells(a).into_iter().collect();
    let sb: std::collections::HashSet<_> = cells(b).into_iter().collect();
    ratio(sa.intersection(&sb).count(), sa.union(&sb).count())
}

/// Foreground pixels within Chebyshev distance `d` of the mask's own boundary.
fn band_oracle(m: &BinaryMask, d: i64) -> Vec<(i64, i64)> {
    let b = boundary_oracle(m);
    cells(m).into_iter().filter(|&(y, x)| b.iter().any(|&(by, bx)| (by - y).abs().max((bx - x).abs()) <= d)).collect()
}

pub fn boundary_iou_oracle(a: &BinaryMask, b: &BinaryMask, d: usize) -> f64 {
    let sa: std::collections::HashSet<_> = band_oracle(a, d as i64).into_iter().collect();
    let sb: std::collections::HashSet<_> = band_oracle(b, d as i64).into_iter().collect();
    ratio(sa.intersection(&sb).count(), sa.union(&sb).count())
}

pub fn contour_f_oracle(pred: &BinaryMask, gt: &BinaryMask, tau: usize) -> f64 {
    let bp = boundary_oracle(pred);
    let bg = boundary_oracle(gt);
    if bp.is_empty() && bg.is_empty() {
        return 1.0;
    }
    if bp.is_empty() || bg.is_empty() {
        return 0.0;
    }
    let t2 = (tau * tau) as i64;
    let near = |p: &(i64, i64), set: &[(i64, i64)]| set.iter().any(|q| (p.0 - q.0).pow(2) + (p.1 - q.1).pow(2) <= t2);
    let mp = bp.iter().filter(|p| near(p, &bg)).count();
    let mg = bg.iter().filter(|p| near(p, &bp)).count();
    let precision = mp as f64 / bp.len() as f64;
    let recall = mg as f64 / bg.len() as f64;
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

// ------------------------------------------------------ finite differences

/// `|a - n| / max(|a| + |n|, 1e-6)`: relative for ordinary gradients, absolute
/// near zero where a relative error is meaningless.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs()).max(1e-6)
}

/// Largest relative error between the autograd gradient of `loss` with
/// respect to `var` and central differences, over `samples` random entries.
pub fn gradcheck_var(var: &Var, loss: &dyn Fn() -> Tensor, samples: usize, seed: u64) -> f64 {
    let h = 1e-6;
    let grads = loss().backward().unwrap();
    let g = vals(grads.get(var.as_tensor()).expect("variable receives a gradient"));
    let base = vals(var.as_tensor());
    let dims = var.dims().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..samples.min(base.len()) {
        let i = rng.gen_range(0..base.len());
        let eval = |delta: f64| {
            let mut v = base.clone();
            v[i] += delta;
            var.set(&Tensor::from_vec(v, dims.as_slice(), &Device::Cpu).unwrap()).unwrap();
            loss().to_scalar::<f64>().unwrap()
        };
        let n = (eval(h) - eval(-h)) / (2.0 * h);
        worst = worst.max(rel_err(g[i], n));
    }
    var.set(&Tensor::from_vec(base, dims.as_slice(), &Device::Cpu).unwrap()).unwrap();
    worst
}

fn weighted_sum(out: &Tensor, weights: &Tensor) -> Tensor {
    (out * weights).unwrap().sum_all().unwrap()
}

// ------------------------------------------------------------- criterion 1

pub fn invariant_suite() -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut out = Vec::new();

    // Partition / reassembly.
    {
        let img = rand_tensor(&mut rng, &[1, 3, 32, 32], DType::F64);
        let subs = crop_subimages(&img).unwrap();
        let quads: Vec<Tensor> = subs.positions.iter().map(|&(r, c)| img.narrow(2, r * 16, 16).unwrap().narrow(3, c * 16, 16).unwrap()).collect();
        let tiled = assemble_local_feature(&Tensor::stack(&quads, 0).unwrap(), &subs.positions).unwrap();
        let exact = vals(&tiled) == vals(&img);
        let mut worst: f64 = 0.0;
        for (i, q) in quads.iter().enumerate() {
            let got = vals(&subs.subs.get(i).unwrap());
            let qv = vals(q);
            for ch in 0..3 {
                let want = bilinear_oracle(&qv[ch * 256..(ch + 1) * 256], 16, 16, 32, 32);
                for (a, b) in got[ch * 1024..(ch + 1) * 1024].iter().zip(&want) {
                    worst = worst.max((a - b).abs());
                }
            }
        }
        let pass = exact && worst < 1e-12;
        out.push(Check::new("partition/reassembly", pass, format!("tiles reassemble bit-exactly: {exact}; crop vs bilinear oracle max err {worst:.1e}")));
    }

    // Pooling oracle.
    {
        let x = rand_tensor(&mut rng, &[2, 5, 16, 16], DType::F32);
        let xv = vals(&x);
        let pooled = multi_granularity_pool(&x, &[2, 4, 8]).unwrap();
        let mut worst: f64 = 0.0;
        for (p, k) in pooled.iter().zip([2, 4, 8]) {
            for (a, b) in vals(p).iter().zip(pool_oracle(&xv, (2, 5, 16, 16), k)) {
                worst = worst.max((a - b).abs());
            }
        }
        out.push(Check::new("pooling oracle", worst < 1e-6, format!("max abs err {worst:.2e} (f32)")));
    }

    // Token count at the default configuration.
    {
        let cfg = ModelConfig::default();
        let g = Tensor::zeros((1, cfg.c16, 16, 16), DType::F32, &Device::Cpu).unwrap();
        let l = Tensor::zeros((1, cfg.c16, 32, 32), DType::F32, &Device::Cpu).unwrap();
        let feats = GlobalLocalFeatures::build(&g, &l, &cfg.pool_kernels).unwrap();
        let n = feats.local_tokens.dim(1).unwrap();
        let formula = local_token_count(cfg.resolution / 8, &cfg.pool_kernels);
        out.push(Check::new("token count", n == 336 && formula == 336, format!("local tokens at R=256: {n}, formula {formula}")));
    }

    // Rasterizer disk oracle.
    {
        let single = rasterize_clicks(&[Point::positive(128.0, 128.0)], 64, 256, 3);
        let count = single.iter().filter(|&&v| v == 1.0).count();
        let mut mismatches = 0;
        for trial in 0..300 {
            let n = rng.gen_range(1..6);
            let d = [16usize, 32, 64][trial % 3];
            let side = 4 * d;
            let pts: Vec<Point> = (0..n)
                .map(|_| Point {
                    x: rng.gen_range(0..side) as f64,
                    y: rng.gen_range(0..side) as f64,
                    label: if rng.gen_bool(0.5) { PointLabel::Positive } else { PointLabel::Negative },
                })
                .collect();
            let r = rng.gen_range(0..6);
            if rasterize_clicks(&pts, d, side, r) != disk_oracle(&pts, d, side, r) {
                mismatches += 1;
            }
        }
        out.push(Check::new("rasterizer disk", count == 29 && mismatches == 0, format!("r=3 disk has {count} px; {mismatches}/300 random maps differ from oracle")));
    }

    // Attention rows are distributions.
    {
        let store = ParamStore::new(DType::F32, 3);
        let attn = Attention::new(&store.root(false), 32, 24, 4, 2).unwrap();
        let q = rand_tensor(&mut rng, &[2, 10, 32], DType::F32);
        let kv = (rand_tensor(&mut rng, &[2, 37, 24], DType::F32) * 5.0).unwrap();
        let w = attn.trace(&q, &kv, &kv).unwrap().weights;
        let sums = vals(&w.sum(3).unwrap());
        let worst = sums.iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max);
        let nonneg = vals(&w).iter().all(|&v| v >= 0.0);
        out.push(Check::new("attention row sums", worst < 1e-6 && nonneg, format!("{} rows, max |sum-1| {worst:.1e}", sums.len())));
    }

    // FIFO capacity and eviction.
    {
        let entry = |i: usize| MemoryEntry { embedding: Tensor::full(i as f32, (4, 2, 2), &Device::Cpu).unwrap(), frame_index: i };
        let mut bank = MemoryBank::new(3).unwrap();
        let mut ok = true;
        for i in 0..7 {
            bank.push(entry(i)).unwrap();
            ok &= bank.len() == (i + 1).min(3);
        }
        ok &= bank.frame_indices() == vec![4, 5, 6];
        ok &= bank.push(entry(6)).is_err();
        let mut pinned = MemoryBank::new(2).unwrap();
        pinned.pin(entry(0)).unwrap();
        for i in 1..5 {
            pinned.push(entry(i)).unwrap();
        }
        ok &= pinned.frame_indices() == vec![0, 3, 4];
        out.push(Check::new("FIFO memory bank", ok, format!("capacity 3 after 7 pushes holds {:?}; pinned bank {:?}", bank.frame_indices(), pinned.frame_indices())));
    }

    // Empty-bank bypass.
    {
        let cfg = ModelConfig::tiny(32);
        let store = ParamStore::new(DType::F32, 4);
        let model = FineMaskModel::build(&store, &cfg, TrainMode::Inference).unwrap();
        // Non-zero attention output so that a non-empty bank would change the feature.
        let w = store.get("memory.attention.attn.out_proj.weight").unwrap();
        w.set(&rand_tensor(&mut rng, w.dims(), DType::F32)).unwrap();
        let feat = rand_tensor(&mut rng, &[1, cfg.c16, 2, 2], DType::F32);
        let same = vals(&model.memory.attention.condition(&feat, &MemoryBank::new(3).unwrap()).unwrap()) == vals(&feat);
        let img = Tensor::rand(0f32, 1.0, (1, 3, 32, 32), &Device::Cpu).unwrap();
        let prompt = PromptSet::from_points(vec![Point::positive(9.0, 14.0)]);
        let video = propagate_video(&model, &[img.clone()], &prompt).unwrap();
        let image = model.forward_image(&img, &prompt).unwrap();
        let single = vals(&video[0].final_logits) == vals(&image.final_logits);
        out.push(Check::new("empty-bank bypass", same && single, format!("feature unchanged: {same}; one-frame video equals image inference: {single}")));
    }

    // Checkpoint round trip.
    {
        let cfg = ModelConfig::tiny(32);
        let store = ParamStore::new(DType::F32, 6);
        FineMaskModel::build(&store, &cfg, TrainMode::Inference).unwrap();
        let (m1, b1) = encode_archive(&store_table(&store).unwrap());
        let other = ParamStore::new(DType::F32, 99);
        FineMaskModel::build(&other, &cfg, TrainMode::Inference).unwrap();
        load_into(&other, &decode_archive(&m1, &b1).unwrap()).unwrap();
        let (m2, b2) = encode_archive(&store_table(&other).unwrap());
        let ok = m1 == m2 && b1 == b2;
        out.push(Check::new("checkpoint round trip", ok, format!("{} params, {} bytes, byte-identical: {ok}", store.len(), b1.len())));
    }
    out
}

// ------------------------------------------------------------- criterion 2

pub fn gradient_checks() -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut out = Vec::new();
    let tol = 1e-3;
    let mut push = |name: &str, err: f64, tol: f64| out.push(Check::new(name, err < tol, format!("max rel err {err:.2e} (< {tol:.0e})")));

    {
        let x = Var::from_tensor(&(rand_tensor(&mut rng, &[1, 1, 6, 6], DType::F64) * 3.0).unwrap()).unwrap();
        let t = Tensor::rand(0f64, 1.0, (1, 1, 6, 6), &Device::Cpu).unwrap();
        push("bce", gradcheck_var(&x, &|| bce_loss(x.as_tensor(), &t).unwrap(), 36, 1), tol);
        push("dice", gradcheck_var(&x, &|| dice_loss(x.as_tensor(), &t).unwrap(), 36, 2), tol);
    }
    {
        let store = ParamStore::new(DType::F64, 7);
        let attn = Attention::new(&store.root(true), 16, 12, 2, 1).unwrap();
        let q = Var::from_tensor(&rand_tensor(&mut rng, &[1, 5, 16], DType::F64)).unwrap();
        let kv = Var::from_tensor(&rand_tensor(&mut rng, &[1, 7, 12], DType::F64)).unwrap();
        let w = rand_tensor(&mut rng, &[1, 5, 16], DType::F64);
        let loss = || weighted_sum(&attn.forward(q.as_tensor(), kv.as_tensor(), kv.as_tensor()).unwrap(), &w);
        let wq = store.get("q_proj.weight").unwrap();
        let err = gradcheck_var(&q, &loss, 30, 3).max(gradcheck_var(&kv, &loss, 30, 4)).max(gradcheck_var(&wq, &loss, 30, 5));
        push("cross-attention", err, tol);
    }
    {
        let store = ParamStore::new(DType::F64, 8);
        let rfb = RfbBlock::new(&store.root(true), 8, &[3, 5, 7]).unwrap();
        let fuse = store.get("fuse.weight").unwrap();
        fuse.set(&rand_tensor(&mut rng, fuse.dims(), DType::F64)).unwrap();
        let x = Var::from_tensor(&rand_tensor(&mut rng, &[1, 8, 7, 7], DType::F64)).unwrap();
        let w = rand_tensor(&mut rng, &[1, 8, 7, 7], DType::F64);
        let loss = || weighted_sum(&rfb.rfb_augment(x.as_tensor()).unwrap(), &w);
        let bh = store.get("branch5.h.weight").unwrap();
        let err = gradcheck_var(&x, &loss, 40, 6).max(gradcheck_var(&bh, &loss, 30, 7)).max(gradcheck_var(&fuse, &loss, 20, 8));
        push("RFB block", err, tol);
    }
    {
        let store = ParamStore::new(DType::F64, 9);
        let block = DecoderBlock::new(&store.root(true), 6 + 5, 4).unwrap();
        let cur = Var::from_tensor(&rand_tensor(&mut rng, &[1, 6, 4, 4], DType::F64)).unwrap();
        let skip = Var::from_tensor(&rand_tensor(&mut rng, &[1, 5, 4, 4], DType::F64)).unwrap();
        let w = rand_tensor(&mut rng, &[1, 4, 8, 8], DType::F64);
        let loss = || weighted_sum(&block.forward(cur.as_tensor(), skip.as_tensor(), true).unwrap(), &w);
        let cw = store.get("conv.weight").unwrap();
        let err = gradcheck_var(&cur, &loss, 40, 9).max(gradcheck_var(&skip, &loss, 40, 10)).max(gradcheck_var(&cw, &loss, 40, 11));
        push("decoder block", err, tol);
    }
    {
        let cfg = ModelConfig::tiny(32).with_modules(ModuleSet::ALL);
        let store = ParamStore::new(DType::F64, 10);
        let model = FineMaskModel::build(&store, &cfg, TrainMode::Refiner).unwrap();
        // Zero-initialised layers would make their inputs' gradients vanish.
        for path in ["la.cross_attn.out_proj.weight", "pr.rfb.fuse.weight", "pr.dense.proj.weight", "pr.retarget.cross_e2t.out_proj.weight"] {
            let v = store.get(path).unwrap_or_else(|| panic!("{path}"));
            v.set(&(rand_tensor(&mut rng, v.dims(), DType::F64) * 0.3).unwrap()).unwrap();
        }
        let img = Tensor::rand(0f64, 1.0, (1, 3, 32, 32), &Device::Cpu).unwrap();
        let target = Tensor::rand(0f64, 1.0, (1, 1, 32, 32), &Device::Cpu).unwrap().ge(0.5).unwrap().to_dtype(DType::F64).unwrap();
        let prompt = PromptSet::from_points(vec![Point::positive(10.0, 12.0), Point::negative(25.0, 3.0)]);
        let enc = model.encode(&img).unwrap().detach();
        let loss = || {
            let o = model.forward_encoded(&img, &enc, None, &prompt).unwrap();
            let r = o.refinement.unwrap();
            total_loss(&r.final_logits, &r.intermediates, &target, LossWeights::default()).unwrap()
        };
        let mut err: f64 = 0.0;
        for (i, path) in ["la.cross_attn.q_proj.weight", "pr.rfb.fuse.weight", "pr.dense.down1.weight", "mr.block1.conv.weight", "mr.out.weight", "mr.stem.conv.weight"]
            .iter()
            .enumerate()
        {
            let v = store.get(path).unwrap_or_else(|| panic!("{path}"));
            err = err.max(gradcheck_var(&v, &loss, 6, 20 + i as u64));
        }
        push("end-to-end", err, 1e-2);
    }
    out
}

// ------------------------------------------------------------- criterion 3

pub fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> BinaryMask {
    // Blobs rather than salt noise so boundaries and bands are non-trivial.
    let p = rng.gen_range(0.1..0.9);
    let mut m = BinaryMask::zeros(h, w);
    for _ in 0..rng.gen_range(0..4) {
        let (y0, x0) = (rng.gen_range(0..h), rng.gen_range(0..w));
        let (y1, x1) = (rng.gen_range(y0..=h), rng.gen_range(x0..=w));
        for y in y0..y1 {
            for x in x0..x1 {
                m.data[y * w + x] = 1;
            }
        }
    }
    for v in m.data.iter_mut() {
        if rng.gen_bool(0.15) {
            *v = rng.gen_bool(p) as u8;
        }
    }
    m
}

pub fn metric_oracle_checks() -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut bad_iou, mut bad_biou, mut bad_f) = (0, 0, 0);
    for _ in 0..200 {
        let (h, w) = (rng.gen_range(1..=16), rng.gen_range(1..=16));
        let a = random_mask(&mut rng, h, w);
        let b = if rng.gen_bool(0.1) { a.clone() } else { random_mask(&mut rng, h, w) };
        let d = rng.gen_range(1..4);
        let tau = rng.gen_range(1..4);
        bad_iou += (iou(&a, &b).unwrap().to_bits() != iou_oracle(&a, &b).to_bits()) as usize;
        bad_biou += (boundary_iou(&a, &b, d).unwrap().to_bits() != boundary_iou_oracle(&a, &b, d).to_bits()) as usize;
        bad_f += (contour_f(&a, &b, tau).unwrap().to_bits() != contour_f_oracle(&a, &b, tau).to_bits()) as usize;
    }
    let mut out = vec![
        Check::new("iou oracle", bad_iou == 0, format!("{bad_iou}/200 mismatches")),
        Check::new("boundary iou oracle", bad_biou == 0, format!("{bad_biou}/200 mismatches")),
        Check::new("contour F oracle", bad_f == 0, format!("{bad_f}/200 mismatches")),
    ];
    let gts: Vec<BinaryMask> = (0..20).map(|i| finemask::data::synth::generate_image_sample(i, 64, finemask::data::synth::Family::cycle(i)).unwrap().mask).collect();
    let preds: Vec<BinaryMask> = gts
        .iter()
        .map(|g| BinaryMask::from_logits(g.h, g.w, &g.data.iter().map(|&v| if v == 1 { 20.0 } else { -20.0 }).collect::<Vec<_>>()).unwrap())
        .collect();
    let (mi, mb) = miou_mbiou(&preds, &gts).unwrap();
    out.push(Check::new("perfect predictor", (mi, mb) == (1.0, 1.0), format!("(mIoU, mBIoU) = ({mi}, {mb})")));
    out
}

pub fn timed<T>(f: impl FnOnce() -> T) -> (T, f64) {
    let t = Instant::now();
    let v = f();
    (v, t.elapsed().as_secs_f64())
}
