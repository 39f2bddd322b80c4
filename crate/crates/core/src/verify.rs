//! Seeded self-check suites: SSM form equivalence, end-to-end gradients,
//! exhaustive scan validity, interleave round trips and scan locality.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::mask::{partition_patches, shadow_rect};
use crate::math;
use crate::net::{InterleavedSequence, Model, ModelConfig, Routing};
use crate::scan::{horizontal_order, mas_order, mean_adjacent_gap, Coord};
use crate::ssm::{conv_form, selective_scan, SsmParams};
use crate::tape::Var;
use crate::{MaskImage, ParamId, ParamStore, Result, Tape, Tensor};

/// Result of one suite.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    /// Largest observed error (or failure rate, for counting suites).
    pub max_error: f64,
    pub threshold: f64,
    pub detail: String,
}

pub const SSM_EQUIV_TOL: f64 = 1e-10;
pub const GRAD_TOL: f64 = 1e-3;
/// Denominator floor of the gradient relative error.
pub const GRAD_FLOOR: f64 = 1e-8;
pub const FD_STEP: f64 = 1e-2;
pub const MIN_FD_STEP: f64 = 1e-6;
/// An estimate agreeing this closely with both neighbours ends the step search.
pub const FD_AGREEMENT: f64 = 1e-4;
pub const LOCALITY_RATE: f64 = 0.99;

/// Recurrence vs convolution form over `configs` random token-invariant
/// systems with `N ≤ 8`, `L ≤ 64`.
pub fn ssm_equivalence(seed: u64, configs: usize) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..configs {
        let n = rng.gen_range(1..=8);
        let l = rng.gen_range(1..=64);
        let a_log: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..1.5)).collect();
        let b = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let c = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let p = SsmParams::from_log(&a_log, b, c, rng.gen_range(-1.0..1.0), rng.gen_range(0.01..1.0));
        let x: Vec<f64> = (0..l).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let rec = selective_scan(&x, &p)?;
        let conv = conv_form(&x, &p)?;
        for (r, c) in rec.iter().zip(&conv) {
            worst = worst.max(math::abs(r - c));
        }
    }
    Ok(CheckOutcome {
        name: "ssm-equiv",
        passed: worst <= SSM_EQUIV_TOL,
        max_error: worst,
        threshold: SSM_EQUIV_TOL,
        detail: format!("{configs} configurations"),
    })
}

/// Configuration of the end-to-end gradient check: 8×8 input, depth-1 UNet.
pub fn gradient_check_config() -> ModelConfig {
    ModelConfig { channels: 4, unet_depth: 1, patch_size: 4, state_dim: 4, expansion: 2, ..ModelConfig::default() }
}

/// Analytic and numeric gradients of `Σ w ⊙ I_pred` for every scalar parameter.
pub struct GradientComparison {
    pub entries: Vec<(ParamId, usize, f64, f64)>,
    /// Scalars whose accepted estimate used less than half the starting step.
    pub reduced: usize,
}

impl GradientComparison {
    pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
        math::abs(analytic - numeric) / math::abs(analytic).max(math::abs(numeric)).max(GRAD_FLOOR)
    }

    pub fn max_relative_error(&self) -> f64 {
        self.entries.iter().map(|&(_, _, a, n)| Self::relative_error(a, n)).fold(0.0, f64::max)
    }
}

/// Compares tape gradients against five-point central differences on a
/// seeded model and input.
///
/// Each scalar halves the step, starting from `step`, until an estimate
/// agrees with both neighbours within [`FD_AGREEMENT`], the agreement starts
/// to degrade, or the step would drop below [`MIN_FD_STEP`]. Stencils that
/// move a LeakyReLU, `abs` or clamp element onto another linear piece than
/// the unperturbed forward are not trusted.
pub fn compare_gradients(
    seed: u64,
    cfg: &ModelConfig,
    h: usize,
    w: usize,
    step: f64,
) -> Result<(ParamStore, GradientComparison)> {
    let mut store = ParamStore::new();
    let model = Model::new(ModelConfig { seed, ..cfg.clone() }, &mut store)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let image = Tensor::from_fn(&[3, h, w], |_| rng.gen_range(0.25..0.75));
    let weights = Tensor::from_fn(&[3, h, w], |_| rng.gen_range(-1.0..1.0));
    let mask = MaskImage::rectangle(h, w, h / 4, h / 2 + 1, w / 4, 3 * w / 4);
    let routing = Routing::new(&model.config, &mask)?;

    let run = |store: &ParamStore| -> Result<(Tape, Var)> {
        let mut tape = Tape::new();
        let x = tape.constant(image.clone());
        let f = model.forward(&mut tape, store, x, &mask, &routing)?;
        let wv = tape.constant(weights.clone());
        let p = tape.mul(f.output, wv)?;
        let l = tape.sum(p);
        Ok((tape, l))
    };

    let (tape, l) = run(&store)?;
    let base = tape.branch_pattern();
    let mut analytic = store.clone();
    analytic.zero_grad();
    tape.backward(l)?.accumulate_into(&mut analytic);
    drop(tape);

    let mut probe = store.clone();
    let mut entries = Vec::with_capacity(store.numel());
    let mut reduced = 0;
    for id in store.ids() {
        for i in 0..store.value(id).len() {
            let orig = store.value(id).data()[i];
            let mut at = |v: f64| -> Result<(f64, bool)> {
                probe.value_mut(id).data_mut()[i] = v;
                let (tape, l) = run(&probe)?;
                Ok((tape.value(l).item(), tape.branch_pattern() == base))
            };
            let mut estimate = |s: f64| -> Result<(f64, bool)> {
                let (p2, a) = at(orig + 2.0 * s)?;
                let (p1, b) = at(orig + s)?;
                let (m1, c) = at(orig - s)?;
                let (m2, d) = at(orig - 2.0 * s)?;
                Ok(((-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * s), a && b && c && d))
            };
            // Each estimate is scored by its disagreement with both neighbours
            // in the halving sequence; once scores grow again, rounding noise
            // dominates and the search stops.
            let mut s = step;
            let mut older = estimate(s)?;
            s /= 2.0;
            let mut prev = estimate(s)?;
            let mut best: Option<(f64, f64, f64)> = None;
            let mut fallback = if prev.1 { Some((prev.0, s)) } else { None };
            while s / 2.0 >= MIN_FD_STEP {
                s /= 2.0;
                let cur = estimate(s)?;
                if cur.1 {
                    fallback = Some((cur.0, s));
                }
                if older.1 && prev.1 && cur.1 {
                    let score = GradientComparison::relative_error(older.0, prev.0)
                        .max(GradientComparison::relative_error(prev.0, cur.0));
                    match best {
                        Some((b, _, _)) if score > 2.0 * b => break,
                        Some((b, _, _)) if score >= b => {}
                        _ => best = Some((score, prev.0, 2.0 * s)),
                    }
                    if score <= FD_AGREEMENT {
                        break;
                    }
                }
                older = prev;
                prev = cur;
            }
            let (fd, used) = match (best, fallback) {
                (Some((_, fd, s)), _) | (None, Some((fd, s))) => (fd, s),
                (None, None) => (prev.0, s),
            };
            if used < step / 2.0 {
                reduced += 1;
            }
            probe.value_mut(id).data_mut()[i] = orig;
            entries.push((id, i, analytic.grad(id).data()[i], fd));
        }
    }
    Ok((analytic, GradientComparison { entries, reduced }))
}

/// End-to-end finite-difference check; also fails if any parameter tensor
/// has an identically zero gradient.
pub fn gradient_check(seed: u64) -> Result<CheckOutcome> {
    let (grads, cmp) = compare_gradients(seed, &gradient_check_config(), 8, 8, FD_STEP)?;
    let dead: Vec<&str> = grads
        .ids()
        .filter(|&id| grads.grad(id).data().iter().all(|&g| g == 0.0))
        .map(|id| grads.name(id))
        .collect();
    let worst = cmp.max_relative_error();
    let mut detail = format!("{} scalars in {} tensors", cmp.entries.len(), grads.len());
    if !dead.is_empty() {
        detail = format!("{detail}; zero gradient: {}", dead.join(", "));
    }
    Ok(CheckOutcome { name: "grad", passed: worst <= GRAD_TOL && dead.is_empty(), max_error: worst, threshold: GRAD_TOL, detail })
}

/// Problems with the mask-aware order of one grid/rectangle placement.
pub fn scan_violations(rows: usize, cols: usize, top: usize, bottom: usize, left: usize, right: usize) -> Result<Vec<String>> {
    let mask = MaskImage::rectangle(rows, cols, top, bottom + 1, left, right + 1);
    let grid = partition_patches(&mask, 1, 0.5)?;
    let rect = shadow_rect(&grid)?;
    let path = mas_order(&grid)?;
    let mut problems = Vec::new();
    let mut seen = alloc::vec![false; rows * cols];
    for p in path.coords() {
        if p.row >= rows || p.col >= cols || core::mem::replace(&mut seen[p.row * cols + p.col], true) {
            problems.push(format!("cell ({}, {}) repeated or out of range", p.row, p.col));
        }
    }
    if path.len() != rows * cols {
        problems.push(format!("path has {} cells, grid {}", path.len(), rows * cols));
    }
    let prefix = &path.coords()[..rect.area().min(path.len())];
    if prefix.iter().any(|p| !rect.contains(*p)) {
        problems.push("shadow rectangle is not the path prefix".into());
    }
    if prefix.windows(2).any(|w| w[0].manhattan(w[1]) != 1) {
        problems.push("spiral steps are not 4-adjacent".into());
    }
    Ok(problems)
}

/// Every single-rectangle shadow on every grid up to `max × max`.
pub fn scan_exhaustive(max: usize) -> Result<CheckOutcome> {
    let (mut cases, mut bad) = (0usize, Vec::new());
    for rows in 1..=max {
        for cols in 1..=max {
            for top in 0..rows {
                for bottom in top..rows {
                    for left in 0..cols {
                        for right in left..cols {
                            cases += 1;
                            let v = scan_violations(rows, cols, top, bottom, left, right)?;
                            if !v.is_empty() && bad.len() < 5 {
                                bad.push(format!("{rows}×{cols} rect {top}..={bottom},{left}..={right}: {}", v[0]));
                            }
                        }
                    }
                }
            }
        }
    }
    let detail = if bad.is_empty() { format!("{cases} placements") } else { bad.join("; ") };
    Ok(CheckOutcome {
        name: "scan",
        passed: bad.is_empty(),
        max_error: bad.len() as f64,
        threshold: 0.0,
        detail,
    })
}

/// Interleave/fold round trips on random even-sized maps up to 64×64.
pub fn interleave_roundtrip(seed: u64, trials: usize) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0usize;
    for _ in 0..trials {
        let h = 2 * rng.gen_range(1..=32);
        let w = 2 * rng.gen_range(1..=32);
        let c = rng.gen_range(1..=4);
        let fine = Tensor::from_fn(&[h * w, c], |_| rng.gen_range(-1.0..1.0));
        let coarse = Tensor::from_fn(&[h * w / 4, c], |_| rng.gen_range(-1.0..1.0));
        let seq = InterleavedSequence::new(&fine, &coarse, h, w)?;
        let back = seq.fold();
        let same = back.data().iter().zip(fine.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        if seq.len() != 5 * h * w / 4 || !same {
            failures += 1;
        }
    }
    Ok(CheckOutcome {
        name: "interleave",
        passed: failures == 0,
        max_error: failures as f64,
        threshold: 0.0,
        detail: format!("{trials} random maps"),
    })
}

/// Locality statistic for one rectangle on a `rows × cols` grid: mean
/// sequence gap between 4-adjacent shadow cells under MAS and under the
/// horizontal order. `None` when the rectangle has no adjacent pair.
pub fn locality_gaps(rows: usize, cols: usize, top: usize, bottom: usize, left: usize, right: usize) -> Result<Option<(f64, f64)>> {
    let mask = MaskImage::rectangle(rows, cols, top, bottom + 1, left, right + 1);
    let grid = partition_patches(&mask, 1, 0.5)?;
    let in_shadow = |p: Coord| grid.is_shadow(p.row, p.col);
    let mas = mas_order(&grid)?;
    let hor = horizontal_order(rows, cols)?;
    Ok(mean_adjacent_gap(&mas, in_shadow).zip(mean_adjacent_gap(&hor, in_shadow)))
}

/// Fraction of `trials` random rectangles on an `n × n` grid for which MAS
/// is at least as local as the horizontal order. Each side of the rectangle
/// is drawn as a sorted pair of uniform positions; rectangles without an
/// adjacent pair are redrawn.
pub fn locality(seed: u64, trials: usize, n: usize) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut wins = 0usize;
    let mut done = 0usize;
    while done < trials {
        let (a, b) = (rng.gen_range(0..n), rng.gen_range(0..n));
        let (c, d) = (rng.gen_range(0..n), rng.gen_range(0..n));
        let Some((mas, hor)) = locality_gaps(n, n, a.min(b), a.max(b), c.min(d), c.max(d))? else {
            continue;
        };
        done += 1;
        if mas <= hor {
            wins += 1;
        }
    }
    let rate = wins as f64 / trials as f64;
    Ok(CheckOutcome {
        name: "locality",
        passed: rate >= LOCALITY_RATE,
        max_error: 1.0 - rate,
        threshold: 1.0 - LOCALITY_RATE,
        detail: format!("MAS at least as local in {wins}/{trials} masks on {n}×{n}"),
    })
}

/// Suite names accepted by [`run_suite`]; `all` runs the first four.
pub const SUITES: [&str; 5] = ["ssm-equiv", "grad", "scan", "interleave", "locality"];

pub fn run_suite(name: &str, seed: u64) -> Result<Vec<CheckOutcome>> {
    Ok(match name {
        "ssm-equiv" => alloc::vec![ssm_equivalence(seed, 100)?],
        "grad" => alloc::vec![gradient_check(seed)?],
        "scan" => alloc::vec![scan_exhaustive(8)?],
        "interleave" => alloc::vec![interleave_roundtrip(seed, 50)?],
        "locality" => alloc::vec![locality(seed, 1000, 16)?],
        "all" => {
            let mut out = Vec::new();
            for s in &SUITES[..4] {
                out.extend(run_suite(s, seed)?);
            }
            out
        }
        other => return Err(crate::Error::Config(format!("unknown check suite {other:?}"))),
    })
}
