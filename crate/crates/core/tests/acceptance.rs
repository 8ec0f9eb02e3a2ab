//! Acceptance suite. Prints one `PASS`/`FAIL` line per criterion. With
//! `ACCEPTANCE_STRICT=1` any failure makes the process exit with status 1.
//!
//! Run with `cargo test -p sbir-core --test acceptance`; extra arguments
//! select criteria by substring, e.g. `-- rmac determinism`.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sbir_core::gradcheck::{finite_diff_check, relative_error, CheckStatus};
use sbir_core::losses::{distill_on_tape, double_guidance_on_tape, triplet_loss_matrix, triplet_on_tape};
use sbir_core::rmac::{region_grid, Region};
use sbir_core::synth::{synth_feature_maps, FeatureMapSpec};
use sbir_core::*;

#[path = "acceptance/experiments.rs"]
mod experiments;

const GRAD_STEP: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;
const GRAD_INSTANCES: usize = 100;
const ORACLE_BATCHES: usize = 50;
const ORACLE_TOL: f64 = 1e-9;
const IDENTITY_TOL: f64 = 1e-9;
const IDENTITY_BATCHES: usize = 1000;
const NORM_TOL: f64 = 1e-12;
const SCALE_TOL: f64 = 1e-9;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn random(rng: &mut ChaCha8Rng, n: usize, d: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::matrix(n, d, (0..n * d).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

// ---------------------------------------------------------------------------
// gradient correctness

type LossFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// One random instance: the differentiated inputs and the loss over them.
type Instance = (Vec<Tensor>, LossFn);

/// Draws an instance for a given batch size and dimension.
type MakeInstance = Box<dyn Fn(&mut ChaCha8Rng, usize, usize) -> Instance>;

fn grad_case(
    name: &str,
    rng: &mut ChaCha8Rng,
    min_bs: usize,
    make: &dyn Fn(&mut ChaCha8Rng, usize, usize) -> Instance,
) -> (bool, String) {
    let (mut checked, mut excluded, mut failed) = (0, 0, 0);
    let mut worst: f64 = 0.0;
    let mut attempts = 0;
    while checked < GRAD_INSTANCES && attempts < 20 * GRAD_INSTANCES {
        attempts += 1;
        let bs = rng.gen_range(min_bs..=8);
        let d = rng.gen_range(2..=16);
        let (inputs, f) = make(rng, bs, d);
        let report = finite_diff_check(|t: &mut Tape, v: &[Var]| f(t, v), &inputs, GRAD_STEP, GRAD_TOL).unwrap();
        match report.status {
            CheckStatus::Excluded => excluded += 1,
            status => {
                checked += 1;
                worst = worst.max(report.max_rel_err);
                if status == CheckStatus::Fail {
                    failed += 1;
                }
            }
        }
    }
    let ok = checked == GRAD_INSTANCES && failed == 0;
    (ok, format!("{name}: {checked} checked, {excluded} excluded, {failed} failed, max rel err {worst:.2e}"))
}

fn triplet_instance(weighted: bool, detach: bool) -> impl Fn(&mut ChaCha8Rng, usize, usize) -> Instance {
    move |rng, bs, d| {
        let inputs = vec![random(rng, bs, d, -2.0, 2.0), random(rng, bs, d, -2.0, 2.0)];
        let cfg = RtlConfig {
            detach_weighting: detach,
            ..RtlConfig::default()
        };
        let f: LossFn = Box::new(move |t, v| Ok(triplet_on_tape(t, v[0], v[1], &cfg, weighted)?.loss));
        (inputs, f)
    }
}

/// With the weighting detached, the tape gradient must be the gradient of
/// `Σ TL ⊙ W0` where `W0` is frozen at the unperturbed photos.
fn detached_rtl_check(rng: &mut ChaCha8Rng) -> (bool, String) {
    let cfg = RtlConfig {
        detach_weighting: true,
        ..RtlConfig::default()
    };
    let (mut checked, mut excluded, mut failed) = (0, 0, 0);
    let mut worst: f64 = 0.0;
    while checked < GRAD_INSTANCES {
        let bs = rng.gen_range(2..=8);
        let d = rng.gen_range(2..=16);
        let inputs = [random(rng, bs, d, -2.0, 2.0), random(rng, bs, d, -2.0, 2.0)];
        let r = rtl_loss(&inputs[0], &inputs[1], &cfg).unwrap();
        let hinge_margin = (0..bs)
            .flat_map(|a| (0..bs).filter(move |&n| n != a).map(move |n| (a, n)))
            .map(|(a, n)| (r.dist_ap.get(a, 0) - r.dist_an.get(a, n) + cfg.margin).abs())
            .fold(f64::INFINITY, f64::min);
        if hinge_margin < 10.0 * GRAD_STEP {
            excluded += 1;
            continue;
        }
        let w0 = r.w_matrix.clone();
        let frozen = |p: &Tensor, s: &Tensor| triplet_loss_matrix(p, s, &cfg).unwrap().tl_matrix.zip_map(&w0, |t, w| t * w).sum();

        let mut tape = Tape::new();
        let vars = [tape.param(inputs[0].clone()).unwrap(), tape.param(inputs[1].clone()).unwrap()];
        let loss = triplet_on_tape(&mut tape, vars[0], vars[1], &cfg, true).unwrap().loss;
        let grads = tape.backward(loss).unwrap();
        let mut instance_ok = true;
        for (k, v) in vars.iter().enumerate() {
            let analytic = grads.wrt(*v);
            for e in 0..inputs[k].len() {
                let mut plus = inputs.clone();
                let mut minus = inputs.clone();
                plus[k].data_mut()[e] += GRAD_STEP;
                minus[k].data_mut()[e] -= GRAD_STEP;
                let numeric = (frozen(&plus[0], &plus[1]) - frozen(&minus[0], &minus[1])) / (2.0 * GRAD_STEP);
                let err = relative_error(analytic.data()[e], numeric);
                worst = worst.max(err);
                instance_ok &= err <= GRAD_TOL;
            }
        }
        checked += 1;
        if !instance_ok {
            failed += 1;
        }
    }
    (
        failed == 0,
        format!("rtl-detached vs frozen-weight differences: {checked} checked, {excluded} excluded, {failed} failed, max rel err {worst:.2e}"),
    )
}

fn distill_instance(variant: DistillVariant) -> impl Fn(&mut ChaCha8Rng, usize, usize) -> Instance {
    move |rng, bs, d| {
        let teacher = random(rng, bs, d, -2.0, 2.0);
        let f: LossFn = Box::new(move |t, v| distill_on_tape(t, v[0], &teacher, variant));
        (vec![random(rng, bs, d, -2.0, 2.0)], f)
    }
}

fn double_guidance_instance(rng: &mut ChaCha8Rng, bs: usize, d: usize) -> Instance {
    let photo = random(rng, bs, d, -2.0, 2.0);
    let teacher = random(rng, bs, d, -2.0, 2.0);
    let cfg = RtlConfig::default();
    let f: LossFn = Box::new(move |t, v| Ok(double_guidance_on_tape(t, v[0], &photo, &teacher, &cfg, 1.0, 1.0)?.total));
    (vec![random(rng, bs, d, -2.0, 2.0)], f)
}

fn bn_instance(rng: &mut ChaCha8Rng, bs: usize, d: usize) -> Instance {
    // the plain sum of a normalized column is constant, so weight the outputs
    let weights = random(rng, bs, d, -1.0, 1.0);
    let f: LossFn = Box::new(move |t, v| {
        let mut head = BatchNormHead::new(t.value(v[0]).cols());
        let y = head.forward_on_tape(t, v[0], v[1], v[2])?;
        let w = t.constant(weights.clone())?;
        let yw = t.mul(y, w)?;
        t.sum(yw)
    });
    let inputs = vec![
        random(rng, bs, d, -2.0, 2.0),
        random(rng, 1, d, 0.5, 1.5),
        random(rng, 1, d, -0.5, 0.5),
    ];
    (inputs, f)
}

fn gradient_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE);
    // A two-row train-mode batch maps every column to about ±1 whatever the
    // input, so its input gradient is eps-sized and drowns in rounding.
    let cases: Vec<(&str, usize, MakeInstance)> = vec![
        ("rtl", 2, Box::new(triplet_instance(true, false))),
        ("triplet", 2, Box::new(triplet_instance(false, false))),
        ("mse", 2, Box::new(distill_instance(DistillVariant::Mse))),
        ("mae", 2, Box::new(distill_instance(DistillVariant::Mae))),
        ("mse+mae", 2, Box::new(distill_instance(DistillVariant::mse_mae()))),
        ("huber", 2, Box::new(distill_instance(DistillVariant::huber()))),
        ("kl", 2, Box::new(distill_instance(DistillVariant::Kl { tau: 2.0 }))),
        ("kl+softmax", 2, Box::new(distill_instance(DistillVariant::KlSoftmax { tau: 2.0 }))),
        ("double-guidance", 2, Box::new(double_guidance_instance)),
        ("bn-head", 3, Box::new(bn_instance)),
    ];
    let mut ok = true;
    let mut lines = Vec::new();
    for (name, min_bs, make) in &cases {
        let (pass, line) = grad_case(name, &mut rng, *min_bs, make.as_ref());
        ok &= pass;
        lines.push(line);
    }
    let (pass, line) = detached_rtl_check(&mut rng);
    ok &= pass;
    lines.push(line);
    outcome(ok, lines.join("; "))
}

// ---------------------------------------------------------------------------
// oracle equivalence

fn loop_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for k in 0..a.len() {
        let d = a[k] - b[k];
        s += d * d;
    }
    s.sqrt()
}

fn rtl_oracle(p: &Tensor, s: &Tensor, margin: f64) -> f64 {
    let bs = p.rows();
    let mut max_pp: f64 = 0.0;
    for i in 0..bs {
        for j in 0..bs {
            max_pp = max_pp.max(loop_dist(p.row(i), p.row(j)));
        }
    }
    let mut total = 0.0;
    for a in 0..bs {
        for n in 0..bs {
            if n == a {
                continue;
            }
            let hinge = (loop_dist(p.row(a), s.row(a)) - loop_dist(p.row(a), s.row(n)) + margin).max(0.0);
            total += hinge * loop_dist(p.row(a), p.row(n)) / max_pp.max(1e-8);
        }
    }
    total
}

/// Integer-valued rows with forced duplicates, so distance ties occur.
fn tied_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
    let mut data: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-3..=3) as f64).collect();
    for i in (2..n).step_by(3) {
        let src = rng.gen_range(0..i);
        let row: Vec<f64> = data[src * d..(src + 1) * d].to_vec();
        data[i * d..(i + 1) * d].copy_from_slice(&row);
    }
    Tensor::matrix(n, d, data).unwrap()
}

fn oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cfg = RtlConfig::default();
    let mut rtl_err: f64 = 0.0;
    for _ in 0..ORACLE_BATCHES {
        let bs = rng.gen_range(2..=12);
        let d = rng.gen_range(1..=16);
        let p = random(&mut rng, bs, d, -2.0, 2.0);
        let s = random(&mut rng, bs, d, -2.0, 2.0);
        let got = rtl_loss(&p, &s, &cfg).unwrap().loss;
        rtl_err = rtl_err.max((got - rtl_oracle(&p, &s, cfg.margin)).abs());
    }

    let mut dist_exact = true;
    for _ in 0..ORACLE_BATCHES {
        let (n, m, d) = (rng.gen_range(1..10), rng.gen_range(1..10), rng.gen_range(1..12));
        let a = tied_rows(&mut rng, n, d);
        let b = random(&mut rng, m, d, -2.0, 2.0);
        let got = losses::pairwise_distance_matrix(&a, &b, Distance::Euclidean).unwrap();
        for i in 0..n {
            for j in 0..m {
                dist_exact &= got.get(i, j).to_bits() == loop_dist(a.row(i), b.row(j)).to_bits();
            }
        }
    }

    let mut topk_exact = true;
    for _ in 0..ORACLE_BATCHES {
        let (n, d) = (rng.gen_range(2..40), rng.gen_range(1..6));
        let g = tied_rows(&mut rng, n, d);
        let ids: Vec<usize> = (0..n).map(|i| 1000 - 7 * i).collect();
        let index = GalleryIndex::new(g.clone(), ids.clone()).unwrap();
        let q: Vec<f64> = (0..d).map(|_| rng.gen_range(-3..=3) as f64).collect();
        let mut all: Vec<(f64, usize)> = (0..n).map(|r| (loop_dist(&q, g.row(r)), ids[r])).collect();
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for k in 1..=n {
            let hits = index.retrieve_topk(&q, k).unwrap();
            topk_exact &= hits.len() == k
                && hits
                    .iter()
                    .zip(&all)
                    .all(|(h, o)| h.photo_id == o.1 && h.distance.to_bits() == o.0.to_bits());
        }
    }

    let mut pairs_exact = true;
    for round in 0..ORACLE_BATCHES {
        let n = if round == 0 { 50 } else { rng.gen_range(2..30) };
        let desc = tied_rows(&mut rng, n, 4);
        let mut all = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                all.push((loop_dist(desc.row(i), desc.row(j)), i, j));
            }
        }
        all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        for top_k in [1, 7, 100, all.len(), all.len() + 5] {
            let got = find_ambiguous_pairs(&desc, top_k).unwrap();
            pairs_exact &= got.len() == top_k.min(all.len())
                && got
                    .iter()
                    .zip(&all)
                    .all(|(g, o)| (g.distance.to_bits(), g.i, g.j) == (o.0.to_bits(), o.1, o.2));
        }
    }

    outcome(
        rtl_err <= ORACLE_TOL && dist_exact && topk_exact && pairs_exact,
        format!(
            "rtl max abs err {rtl_err:.2e} (tol {ORACLE_TOL:.0e}); distances exact {dist_exact}; top-k exact {topk_exact}; pair ranking exact {pairs_exact}"
        ),
    )
}

// ---------------------------------------------------------------------------
// RTL identities

fn rtl_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = RtlConfig::default();

    // (a) photos on a scaled simplex are pairwise equidistant
    let mut equal_err: f64 = 0.0;
    for _ in 0..100 {
        let bs = rng.gen_range(2..=10);
        let d = bs + rng.gen_range(0..4);
        let c = rng.gen_range(0.5..3.0);
        let mut p = Tensor::zeros(&[bs, d]);
        for i in 0..bs {
            p.data_mut()[i * d + i] = c;
        }
        let s = random(&mut rng, bs, d, -2.0, 2.0);
        let rtl = rtl_loss(&p, &s, &cfg).unwrap().loss;
        let tl = triplet_loss_matrix(&p, &s, &cfg).unwrap().loss;
        equal_err = equal_err.max((rtl - tl).abs());
    }

    // (b) a duplicated photo pair contributes nothing in either direction
    let mut dup_zero = true;
    for _ in 0..100 {
        let bs = rng.gen_range(2..=10);
        let d = rng.gen_range(1..=16);
        let mut p = random(&mut rng, bs, d, -2.0, 2.0);
        let i = rng.gen_range(0..bs);
        let j = (i + rng.gen_range(1..bs)) % bs;
        let row = p.row(i).to_vec();
        p.data_mut()[j * d..(j + 1) * d].copy_from_slice(&row);
        let s = random(&mut rng, bs, d, -5.0, 5.0);
        let r = rtl_loss(&p, &s, &cfg).unwrap();
        dup_zero &= r.rtl_matrix.get(i, j) == 0.0 && r.rtl_matrix.get(j, i) == 0.0;
    }

    // (c) RTL never exceeds the triplet loss
    let mut violations = 0;
    for _ in 0..IDENTITY_BATCHES {
        let bs = rng.gen_range(2..=16);
        let d = rng.gen_range(1..=16);
        let p = random(&mut rng, bs, d, -2.0, 2.0);
        let s = random(&mut rng, bs, d, -2.0, 2.0);
        let rtl = rtl_loss(&p, &s, &cfg).unwrap().loss;
        let tl = triplet_loss_matrix(&p, &s, &cfg).unwrap().loss;
        if rtl > tl {
            violations += 1;
        }
    }

    outcome(
        equal_err <= IDENTITY_TOL && dup_zero && violations == 0,
        format!(
            "(a) equidistant max |rtl-tl| {equal_err:.2e} (tol {IDENTITY_TOL:.0e}); (b) duplicate entries exactly 0: {dup_zero}; (c) rtl > tl in {violations}/{IDENTITY_BATCHES} batches"
        ),
    )
}

// ---------------------------------------------------------------------------
// RMAC

/// Every square inside `w×h` that the pinned rule admits, by exhaustive scan.
fn enumerate_windows(w: usize, h: usize, levels: usize) -> Vec<Region> {
    let min_dim = w.min(h);
    let mut out = Vec::new();
    for l in 1..=levels {
        let kw = 2.0 * min_dim as f64 / (l as f64 + 1.0);
        let side = (kw.round() as usize).clamp(1, min_dim);
        let stride = ((0.6 * kw).round() as usize).max(1);
        let admits = |p: usize, extent: usize| p + side <= extent && (p.is_multiple_of(stride) || p == extent - side);
        for x0 in 0..w {
            for y0 in 0..h {
                if admits(x0, w) && admits(y0, h) {
                    out.push(Region { x0, y0, side });
                }
            }
        }
    }
    out.sort();
    out.dedup();
    out
}

fn rmac_criterion() -> Outcome {
    let cfg = RmacConfig::default();
    let mut grid = region_grid(8, 8, &cfg).unwrap().regions;
    grid.sort();
    let expected = enumerate_windows(8, 8, 3);
    let count_ok = grid.len() == 14 && grid == expected;
    let sides: Vec<usize> = [8, 5, 4].iter().map(|&s| grid.iter().filter(|r| r.side == s).count()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut random_sizes_ok = true;
    for _ in 0..200 {
        let (w, h) = (rng.gen_range(1..40), rng.gen_range(1..40));
        let mut g = region_grid(w, h, &cfg).unwrap().regions;
        g.sort();
        random_sizes_ok &= g == enumerate_windows(w, h, 3);
    }

    let volumes = synth_feature_maps(&FeatureMapSpec {
        channels: 32,
        sizes: vec![1, 5, 8, 12, 16, 24, 7],
        seed: 9,
    })
    .unwrap();
    let mut norm_err: f64 = 0.0;
    let mut scale_err: f64 = 0.0;
    for v in &volumes {
        let d = rmac_descriptor(v, &cfg).unwrap();
        norm_err = norm_err.max((d.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs());
        for c in [1e-3, 0.37, 3.7, 1e4] {
            let scaled = FeatureVolume::new(v.data.map(|x| x * c), v.source_id, v.resolution_tag.clone()).unwrap();
            let ds = rmac_descriptor(&scaled, &cfg).unwrap();
            let e = d.iter().zip(&ds).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            scale_err = scale_err.max(e);
        }
    }
    outcome(
        count_ok && random_sizes_ok && norm_err <= NORM_TOL && scale_err <= SCALE_TOL,
        format!(
            "8x8 L=3 regions {} (sides 8/5/4: {:?}) match enumerator {count_ok}; 200 random sizes match {random_sizes_ok}; max |norm-1| {norm_err:.2e} (tol {NORM_TOL:.0e}); scaling max diff {scale_err:.2e} (tol {SCALE_TOL:.0e})",
            grid.len(),
            sides
        ),
    )
}

// ---------------------------------------------------------------------------

type Criterion = fn() -> Outcome;

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: Vec<(&str, Criterion)> = vec![
        ("gradient-correctness", gradient_correctness),
        ("oracle-equivalence", oracle_equivalence),
        ("rtl-identities", rtl_identities),
        ("rmac", rmac_criterion),
        ("normalization-head-ab", experiments::normalization_head_ab),
        ("distillation", experiments::distillation),
        ("double-guidance", experiments::double_guidance),
        ("capacity-asymmetry", experiments::capacity_asymmetry),
        ("determinism", experiments::determinism),
    ];
    let mut failed = Vec::new();
    for (name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let t = Instant::now();
        let o = run();
        let secs = t.elapsed().as_secs_f64();
        println!("{} {name} ({secs:.1}s): {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass {
            failed.push(name);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all criteria passed");
        return;
    }
    println!("acceptance: {} criteria failed: {}", failed.len(), failed.join(", "));
    // failures are reported, not fatal, unless strict mode is requested
    if std::env::var_os("ACCEPTANCE_STRICT").is_some_and(|v| v == "1") {
        std::process::exit(1);
    }
}
