//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any criterion fails.
//!
//! The two desk-scale training runs dominate the runtime. Setting
//! `DQPAINT_ACCEPTANCE_CACHE=<dir>` keeps them in `<dir>` and reuses a run
//! whose `config.txt` matches. `DQPAINT_ACCEPTANCE_ONLY=1,4,7` runs a subset.

use std::f64::consts::PI;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var};
use dqpaint::checkpoint;
use dqpaint::critic::CriticFn;
use dqpaint::inference::{self, PaintOptions, StrokePlan};
use dqpaint::losses::gaussian::gaussian_wasserstein;
use dqpaint::losses::matching::{cost_matrix, solve_assignment};
use dqpaint::losses::{self, LossWeights};
use dqpaint::model::{attention_grid, Painter};
use dqpaint::render::{self, diff, Brush};
use dqpaint::synthesis::{mix_seed, sample_strokes, sample_with_seed, Granularity, SampleBatch, SynthConfig};
use dqpaint::training::{self, StepRecord, TrainConfig};
use dqpaint::{CanvasImage, StrokeParams, StrokeSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Check = Result<(bool, String), String>;

struct Criterion {
    id: usize,
    name: &'static str,
    run: fn(&mut Ctx) -> Check,
}

const CRITERIA: [Criterion; 12] = [
    Criterion {
        id: 1,
        name: "renderer oracle",
        run: renderer_oracle,
    },
    Criterion {
        id: 2,
        name: "renderer gradients",
        run: renderer_gradients,
    },
    Criterion {
        id: 3,
        name: "matching oracle",
        run: matching_oracle,
    },
    Criterion {
        id: 4,
        name: "gaussian wasserstein",
        run: gaussian_wasserstein_checks,
    },
    Criterion {
        id: 5,
        name: "loss stack oracle",
        run: loss_stack_oracle,
    },
    Criterion {
        id: 6,
        name: "gradient penalty forced cases",
        run: gradient_penalty_cases,
    },
    Criterion {
        id: 7,
        name: "synthesis identity",
        run: synthesis_identity,
    },
    Criterion {
        id: 8,
        name: "desk training descent",
        run: training_descent,
    },
    Criterion {
        id: 9,
        name: "differential-query skip behavior",
        run: skip_behavior,
    },
    Criterion {
        id: 10,
        name: "attention focus",
        run: attention_focus,
    },
    Criterion {
        id: 11,
        name: "plan round trip",
        run: plan_round_trip,
    },
    Criterion {
        id: 12,
        name: "ablation direction",
        run: ablation_direction,
    },
];

fn main() -> ExitCode {
    let only: Option<Vec<usize>> = std::env::var("DQPAINT_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let mut ctx = Ctx::new();
    let mut failed = 0;
    for c in CRITERIA.iter() {
        if only.as_ref().is_some_and(|o| !o.contains(&c.id)) {
            continue;
        }
        let start = Instant::now();
        let (pass, detail) = match (c.run)(&mut ctx) {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        let secs = start.elapsed().as_secs_f64();
        if !pass {
            failed += 1;
        }
        println!(
            "{} [{:2}] {}: {} ({:.1}s)",
            if pass { "PASS" } else { "FAIL" },
            c.id,
            c.name,
            detail,
            secs
        );
    }
    println!("acceptance: {failed} failed");
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

// ---------------------------------------------------------------------------
// Independent scalar references

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Soft rectangle: width axis along `theta * pi`, edge ramp of 5% of the
/// half-extent but never under a quarter pixel.
fn oracle_mask(s: &[f64; 8], size: usize, row: usize, col: usize) -> f64 {
    let px = (col as f64 + 0.5) / size as f64;
    let py = (row as f64 + 0.5) / size as f64;
    let (sin, cos) = (s[4] * PI).sin_cos();
    let (dx, dy) = (px - s[0], py - s[1]);
    let a = dx * cos + dy * sin;
    let b = -dx * sin + dy * cos;
    let (hw, hh) = (0.5 * s[3], 0.5 * s[2]);
    let tw = (0.05 * hw).max(1.0 / size as f64) / 4.0;
    let th = (0.05 * hh).max(1.0 / size as f64) / 4.0;
    sigmoid((hw - a.abs()) / tw) * sigmoid((hh - b.abs()) / th)
}

fn random_stroke(rng: &mut impl Rng, size: (f64, f64)) -> StrokeParams {
    StrokeParams::new(
        rng.random(),
        rng.random(),
        rng.random_range(size.0..size.1),
        rng.random_range(size.0..size.1),
        rng.random(),
        rng.random(),
        rng.random(),
        rng.random(),
    )
}

fn random_canvas(rng: &mut impl Rng, size: usize) -> CanvasImage {
    CanvasImage::from_vec(size, size, (0..size * size * 3).map(|_| rng.random::<f32>()).collect()).unwrap()
}

/// `tr sqrt(A)` for a symmetric positive semi-definite 2x2 matrix.
fn trace_sqrt(a: [[f64; 2]; 2]) -> f64 {
    let det = (a[0][0] * a[1][1] - a[0][1] * a[1][0]).max(0.0);
    (a[0][0] + a[1][1] + 2.0 * det.sqrt()).max(0.0).sqrt()
}

fn sqrt_spd(a: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let s = (a[0][0] * a[1][1] - a[0][1] * a[1][0]).max(0.0).sqrt();
    let t = (a[0][0] + a[1][1] + 2.0 * s).sqrt();
    [[(a[0][0] + s) / t, a[0][1] / t], [a[1][0] / t, (a[1][1] + s) / t]]
}

fn mat_mul(a: [[f64; 2]; 2], b: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let mut out = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    out
}

/// Squared 2-Wasserstein distance between two Gaussians.
fn oracle_w2(m1: [f64; 2], c1: [[f64; 2]; 2], m2: [f64; 2], c2: [[f64; 2]; 2]) -> f64 {
    let r = sqrt_spd(c2);
    let inner = mat_mul(mat_mul(r, c1), r);
    let dm = (m1[0] - m2[0]).powi(2) + (m1[1] - m2[1]).powi(2);
    dm + c1[0][0] + c1[1][1] + c2[0][0] + c2[1][1] - 2.0 * trace_sqrt(inner)
}

/// Gaussian of a stroke: axes `w/2` along the stroke direction and `h/2`
/// across it.
fn oracle_gaussian(s: &StrokeParams) -> ([f64; 2], [[f64; 2]; 2]) {
    let (sin, cos) = (s.theta * PI).sin_cos();
    let (u, v) = ([cos, sin], [-sin, cos]);
    let (a, b) = ((0.5 * s.w).powi(2), (0.5 * s.h).powi(2));
    let mut c = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            c[i][j] = a * u[i] * u[j] + b * v[i] * v[j];
        }
    }
    ([s.x, s.y], c)
}

fn oracle_l1(u: &StrokeParams, v: &StrokeParams) -> f64 {
    let (a, b) = (u.to_array(), v.to_array());
    (0..8)
        .map(|i| {
            let d = (a[i] - b[i]).abs();
            if i == 4 {
                d.min(1.0 - d)
            } else {
                d
            }
        })
        .sum::<f64>()
        / 8.0
}

fn oracle_bce(label: f64, logit: f64) -> f64 {
    let p = sigmoid(logit);
    -(label * p.ln() + (1.0 - label) * (1.0 - p).ln())
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn go(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                go(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    go(&mut Vec::new(), &mut vec![false; n], &mut out);
    out
}

// ---------------------------------------------------------------------------
// 1-7: oracles and forced cases

fn renderer_oracle(_: &mut Ctx) -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let size = 32;
    let count = 1000;
    let (mut worst_scalar, mut worst_inplace, mut worst_tensor) = (0f64, 0f64, 0f64);
    let mut canvases = Vec::with_capacity(count);
    let mut strokes = Vec::with_capacity(count);
    let mut confs = Vec::with_capacity(count);
    for _ in 0..count {
        let canvas = random_canvas(&mut rng, size);
        let s = random_stroke(&mut rng, (0.05, 0.9));
        let c: f64 = rng.random();
        let arr = s.to_array();
        let reference: Vec<f64> = (0..size * size * 3)
            .map(|i| {
                let (pix, ch) = (i / 3, i % 3);
                let m = c * oracle_mask(&arr, size, pix / size, pix % size);
                arr[5 + ch] * m + canvas.data()[i] as f64 * (1.0 - m)
            })
            .collect();
        let rendered = render::rasterize_stroke(&s, size, &Brush::Plain).map_err(err)?;
        let out = render::composite(&canvas, &rendered, c).map_err(err)?;
        let mut inplace = canvas.clone();
        render::paint_stroke(&mut inplace, &s, c, &Brush::Plain).map_err(err)?;
        for (i, r) in reference.iter().enumerate() {
            worst_scalar = worst_scalar.max((out.data()[i] as f64 - r).abs());
            worst_inplace = worst_inplace.max((inplace.data()[i] as f64 - r).abs());
        }
        canvases.push((canvas, reference));
        strokes.extend(arr);
        confs.push(c);
    }
    // The batched tensor renderer against the same references: gated in
    // f64, reported in f32 (training precision).
    let dev = Device::Cpu;
    let mut worst_f32 = 0f64;
    for dtype in [DType::F64, DType::F32] {
        let imgs: Vec<Tensor> = canvases
            .iter()
            .map(|(c, _)| c.to_tensor(&dev, dtype))
            .collect::<Result<_, _>>()
            .map_err(err)?;
        let batch = Tensor::stack(&imgs, 0).map_err(err)?;
        let params = Tensor::from_vec(strokes.clone(), (count, 1, 8), &dev)
            .and_then(|t| t.to_dtype(dtype))
            .map_err(err)?;
        let conf = Tensor::from_vec(confs.clone(), (count, 1), &dev)
            .and_then(|t| t.to_dtype(dtype))
            .map_err(err)?;
        let out = diff::render_strokes(&batch, &params, &conf, &Brush::Plain).map_err(err)?;
        let out = out
            .to_dtype(DType::F64)
            .map_err(err)?
            .flatten_from(1)
            .map_err(err)?
            .to_vec2::<f64>()
            .map_err(err)?;
        let slot = if dtype == DType::F64 {
            &mut worst_tensor
        } else {
            &mut worst_f32
        };
        for ((_, reference), img) in canvases.iter().zip(&out) {
            // Tensor layout is channel-major.
            for (i, r) in reference.iter().enumerate() {
                let (pix, ch) = (i / 3, i % 3);
                *slot = slot.max((img[ch * size * size + pix] - r).abs());
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let worst = worst_scalar.max(worst_inplace).max(worst_tensor);
    Ok((
        worst < 1e-6 && secs < 60.0,
        format!(
            "{count} triples, max |err| scalar {worst_scalar:.1e} in-place {worst_inplace:.1e} tensor-f64 {worst_tensor:.1e} \
             (tol 1e-6; tensor-f32 {worst_f32:.1e}, not gated), {secs:.1}s (limit 60s)"
        ),
    ))
}

fn smooth_canvas(rng: &mut impl Rng, size: usize, dev: &Device) -> candle_core::Result<Tensor> {
    let mut data = Vec::with_capacity(3 * size * size);
    for _ in 0..3 {
        let a: [f64; 5] = std::array::from_fn(|i| {
            if i < 2 {
                rng.random_range(-0.3..0.3)
            } else {
                rng.random_range(-0.4..0.4)
            }
        });
        for r in 0..size {
            for c in 0..size {
                let dx = (c as f64 + 0.5) / size as f64 - 0.5;
                let dy = (r as f64 + 0.5) / size as f64 - 0.5;
                data.push(0.5 + a[0] * dx + a[1] * dy + a[2] * dx * dx - a[3] * dy * dy + a[4] * dx * dy);
            }
        }
    }
    Tensor::from_vec(data, (1, 3, size, size), dev)
}

fn renderer_gradients(_: &mut Ctx) -> Check {
    let dev = Device::Cpu;
    let size = 32;
    let h = 1e-3;
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0f64;
    let mut worst_at = String::new();
    let conf = Tensor::ones((1, 1), DType::F64, &dev).map_err(err)?;
    let total = |canvas: &Tensor, p: &[f64]| -> candle_core::Result<f64> {
        let t = Tensor::from_vec(p.to_vec(), (1, 1, 8), &dev)?;
        diff::render_strokes(canvas, &t, &conf, &Brush::Plain)
            .map_err(|e| candle_core::Error::Msg(e.to_string()))?
            .sum_all()?
            .to_scalar::<f64>()
    };
    for k in 0..50 {
        let canvas = smooth_canvas(&mut rng, size, &dev).map_err(err)?;
        // Non-degenerate: inside the frame, clearly elongated, colored
        // away from the canvas range boundaries.
        let hh: f64 = rng.random_range(0.15..0.4);
        let mut ww: f64 = rng.random_range(0.15..0.4);
        if (hh - ww).abs() < 0.05 {
            ww = if hh < 0.3 { hh + 0.08 } else { hh - 0.08 };
        }
        let p = vec![
            rng.random_range(0.3..0.7),
            rng.random_range(0.3..0.7),
            hh,
            ww,
            rng.random_range(0.05..0.95),
            rng.random_range(0.05..0.95),
            rng.random_range(0.05..0.95),
            rng.random_range(0.05..0.95),
        ];
        let var = Var::from_tensor(&Tensor::from_vec(p.clone(), (1, 1, 8), &dev).map_err(err)?).map_err(err)?;
        let out = diff::render_strokes(&canvas, var.as_tensor(), &conf, &Brush::Plain).map_err(err)?;
        let grads = out.sum_all().map_err(err)?.backward().map_err(err)?;
        let g = grads
            .get(var.as_tensor())
            .ok_or("no gradient")?
            .flatten_all()
            .map_err(err)?
            .to_vec1::<f64>()
            .map_err(err)?;
        for i in 0..8 {
            let (mut up, mut down) = (p.clone(), p.clone());
            up[i] += h;
            down[i] -= h;
            let fd = (total(&canvas, &up).map_err(err)? - total(&canvas, &down).map_err(err)?) / (2.0 * h);
            let rel = (g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(1e-6);
            if rel > worst {
                worst = rel;
                // Finer steps separate truncation error from a wrong gradient.
                let fine = |step: f64| -> Result<f64, String> {
                    let (mut up, mut down) = (p.clone(), p.clone());
                    up[i] += step;
                    down[i] -= step;
                    Ok((total(&canvas, &up).map_err(err)? - total(&canvas, &down).map_err(err)?) / (2.0 * step))
                };
                worst_at = format!(
                    "stroke {k} param {i}: analytic {:.6} fd {:.6} (fd at h=1e-4 {:.6}, h=1e-5 {:.6})",
                    g[i],
                    fd,
                    fine(1e-4)?,
                    fine(1e-5)?
                );
            }
        }
    }
    Ok((
        worst < 1e-2,
        format!("50 strokes x 8 params, worst relative error {worst:.2e} (tol 1e-2) at {worst_at}"),
    ))
}

fn matching_oracle(_: &mut Ctx) -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let perms: Vec<Vec<Vec<usize>>> = (0..=6).map(permutations).collect();
    let mut mismatches = 0;
    for k in 0..1000 {
        let n = 1 + k % 6;
        // Alternate raw random matrices with stroke-derived ones.
        let cost = if k % 2 == 0 {
            (0..n)
                .map(|_| (0..n).map(|_| rng.random::<f64>()).collect())
                .collect::<Vec<Vec<f64>>>()
        } else {
            let t: Vec<_> = (0..n).map(|_| random_stroke(&mut rng, (0.1, 0.6))).collect();
            let p: Vec<_> = (0..n).map(|_| random_stroke(&mut rng, (0.1, 0.6))).collect();
            cost_matrix(&t, &p, losses::LAMBDA_W).map_err(err)?
        };
        let m = solve_assignment(&cost).map_err(err)?;
        let total = |perm: &[usize]| perm.iter().enumerate().map(|(u, &j)| cost[u][j]).sum::<f64>();
        let brute = perms[n].iter().map(|p| total(p)).fold(f64::INFINITY, f64::min);
        let mut seen = vec![false; n];
        let bijective = m.assignment.len() == n
            && m.assignment
                .iter()
                .all(|&j| j < n && !std::mem::replace(&mut seen[j], true));
        if !bijective || total(&m.assignment) != brute || m.cost != brute {
            mismatches += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Ok((
        mismatches == 0 && secs < 120.0,
        format!("1000 instances (N<=6), {mismatches} differ from brute force, {secs:.1}s (limit 120s)"),
    ))
}

fn gaussian_wasserstein_checks(_: &mut Ctx) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst_identity = 0f64;
    let mut worst_translation = 0f64;
    for _ in 0..100 {
        let s = random_stroke(&mut rng, (0.05, 0.9));
        worst_identity = worst_identity.max(gaussian_wasserstein(&s, &s).map_err(err)?.abs());
        let mut t = s;
        t.x = rng.random();
        t.y = rng.random();
        let d2 = (s.x - t.x).powi(2) + (s.y - t.y).powi(2);
        worst_translation = worst_translation.max((gaussian_wasserstein(&s, &t).map_err(err)? - d2).abs());
    }
    let samples = 100_000;
    let mut worst_rel = 0f64;
    let moments = |s: &StrokeParams, rng: &mut ChaCha8Rng| -> ([f64; 2], [[f64; 2]; 2]) {
        let (sin, cos) = (s.theta * PI).sin_cos();
        let pts: Vec<[f64; 2]> = (0..samples)
            .map(|_| {
                let a: f64 = rng.sample::<f64, _>(StandardNormal) * 0.5 * s.w;
                let b: f64 = rng.sample::<f64, _>(StandardNormal) * 0.5 * s.h;
                [s.x + a * cos - b * sin, s.y + a * sin + b * cos]
            })
            .collect();
        let n = samples as f64;
        let m = [
            pts.iter().map(|p| p[0]).sum::<f64>() / n,
            pts.iter().map(|p| p[1]).sum::<f64>() / n,
        ];
        let mut c = [[0.0; 2]; 2];
        for p in &pts {
            let d = [p[0] - m[0], p[1] - m[1]];
            for i in 0..2 {
                for j in 0..2 {
                    c[i][j] += d[i] * d[j] / (n - 1.0);
                }
            }
        }
        (m, c)
    };
    for _ in 0..100 {
        let u = random_stroke(&mut rng, (0.05, 0.9));
        let v = random_stroke(&mut rng, (0.05, 0.9));
        let (m1, c1) = moments(&u, &mut rng);
        let (m2, c2) = moments(&v, &mut rng);
        let sampled = oracle_w2(m1, c1, m2, c2);
        let exact = gaussian_wasserstein(&u, &v).map_err(err)?;
        worst_rel = worst_rel.max((exact - sampled).abs() / sampled.abs().max(1e-12));
    }
    Ok((
        worst_identity < 1e-8 && worst_translation < 1e-8 && worst_rel < 0.05,
        format!(
            "identity max {worst_identity:.1e} (tol 1e-8), translation max err {worst_translation:.1e} (tol 1e-8), \
             100 pairs vs 1e5-sample moments worst rel {worst_rel:.3} (tol 0.05)"
        ),
    ))
}

fn loss_stack_oracle(_: &mut Ctx) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let dev = Device::Cpu;
    let n = 8;
    let perms = permutations(n);
    let weights = LossWeights::default();
    let mut worst = 0f64;
    let mut worst_gamma = 0f64;
    for _ in 0..100 {
        let target: Vec<StrokeParams> = (0..n).map(|_| random_stroke(&mut rng, (0.05, 0.8))).collect();
        let pred: Vec<StrokeParams> = (0..n).map(|_| random_stroke(&mut rng, (0.05, 0.8))).collect();
        let labels: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < 0.6 { 1.0 } else { 0.0 })
            .collect();
        let logits: Vec<f64> = (0..n).map(|_| rng.random_range(-4.0..4.0)).collect();

        let pair = |u: usize, j: usize| -> f64 {
            let (m1, c1) = oracle_gaussian(&target[u]);
            let (m2, c2) = oracle_gaussian(&pred[j]);
            oracle_l1(&target[u], &pred[j]) + weights.wasserstein * oracle_w2(m1, c1, m2, c2)
        };
        let table: Vec<Vec<f64>> = (0..n).map(|u| (0..n).map(|j| pair(u, j)).collect()).collect();
        let best = perms
            .iter()
            .min_by(|a, b| {
                let ca: f64 = a.iter().enumerate().map(|(u, &j)| table[u][j]).sum();
                let cb: f64 = b.iter().enumerate().map(|(u, &j)| table[u][j]).sum();
                ca.total_cmp(&cb)
            })
            .unwrap();
        let matched: f64 = best
            .iter()
            .enumerate()
            .map(|(u, &j)| labels[u] * table[u][j] + oracle_bce(labels[u], logits[j]))
            .sum::<f64>()
            / n as f64;
        let reg = weights.confidence * logits.iter().map(|c| c.abs()).sum::<f64>() / n as f64;
        let oracle = matched + reg;

        let flat = |v: &[StrokeParams]| -> Vec<f64> { v.iter().flat_map(|s| s.to_array()).collect() };
        let t = Tensor::from_vec(flat(&target), (1, n, 8), &dev).map_err(err)?;
        let p = Tensor::from_vec(flat(&pred), (1, n, 8), &dev).map_err(err)?;
        let l = Tensor::from_vec(labels.clone(), (1, n), &dev).map_err(err)?;
        let c = Tensor::from_vec(logits.clone(), (1, n), &dev).map_err(err)?;
        let loss = losses::stroke_loss(&t, &l, &p, &c, &weights).map_err(err)?;
        let got = loss.total().map_err(err)?.to_scalar::<f64>().map_err(err)?;
        worst = worst.max((got - oracle).abs());

        let pixel: f64 = rng.random_range(0.0..3.0);
        let adv: f64 = rng.random_range(-5.0..5.0);
        let expect = pixel.abs() / (adv.abs() + 1e-8);
        let pt = Tensor::new(pixel, &dev).map_err(err)?;
        let at = Tensor::new(adv, &dev).map_err(err)?;
        let zero = Tensor::new(0f64, &dev).map_err(err)?;
        let (_, gamma) = losses::total_loss(&pt, &zero, Some(&at)).map_err(err)?;
        worst_gamma = worst_gamma
            .max((gamma - expect).abs())
            .max((losses::adaptive_gamma(pixel, adv) - expect).abs());
    }
    Ok((
        worst < 1e-6 && worst_gamma < 1e-9,
        format!("100 instances (N=8), stroke loss max err {worst:.1e} (tol 1e-6), gamma max err {worst_gamma:.1e} (tol 1e-9)"),
    ))
}

struct ConstantCritic;

impl CriticFn for ConstantCritic {
    fn score(&self, images: &Tensor) -> dqpaint::Result<Tensor> {
        Ok(Tensor::full(0.7f32, images.dim(0)?, images.device())?)
    }

    fn score_with_input_grad(&self, images: &Tensor) -> dqpaint::Result<(Tensor, Tensor)> {
        Ok((self.score(images)?, images.zeros_like()?))
    }
}

/// `D(x) = sum of all pixels`, so the input gradient is all ones.
struct LinearCritic;

impl CriticFn for LinearCritic {
    fn score(&self, images: &Tensor) -> dqpaint::Result<Tensor> {
        Ok(images.flatten_from(1)?.sum(1)?)
    }

    fn score_with_input_grad(&self, images: &Tensor) -> dqpaint::Result<(Tensor, Tensor)> {
        Ok((self.score(images)?, images.ones_like()?))
    }
}

fn gradient_penalty_cases(_: &mut Ctx) -> Check {
    let dev = Device::Cpu;
    let p = 32;
    let real = Tensor::rand(0f32, 1f32, (4, 3, p, p), &dev).map_err(err)?;
    let fake = Tensor::rand(0f32, 1f32, (4, 3, p, p), &dev).map_err(err)?;
    let eps = Tensor::rand(0f32, 1f32, 4, &dev).map_err(err)?;
    let lambda = losses::LAMBDA_DIS;
    let scalar =
        |t: &Tensor| -> Result<f64, String> { t.to_dtype(DType::F64).map_err(err)?.to_scalar::<f64>().map_err(err) };
    let constant = scalar(
        &losses::critic_loss(&ConstantCritic, &real, &fake, &eps, lambda)
            .map_err(err)?
            .penalty,
    )?;
    let linear = scalar(
        &losses::critic_loss(&LinearCritic, &real, &fake, &eps, lambda)
            .map_err(err)?
            .penalty,
    )?;
    let expect = lambda * ((3.0 * (p * p) as f64).sqrt() - 1.0).powi(2);
    let rel = (linear - expect).abs() / expect;
    Ok((
        constant == lambda && rel < 1e-3,
        format!("constant critic penalty {constant} (want exactly {lambda}), linear critic {linear:.4} vs {expect:.4} rel err {rel:.1e} (tol 1e-3)"),
    ))
}

fn synthesis_identity(_: &mut Ctx) -> Check {
    let cfg = SynthConfig::default();
    let seed = 707;
    let (mut worst, mut inexact, mut label_errors, mut replicate_errors) = (0f64, 0usize, 0usize, 0usize);
    let mut invalid = 0;
    for i in 0..500 {
        let s = sample_with_seed(&cfg, seed, i).map_err(err)?;
        let valid: Vec<StrokeParams> = s
            .target_strokes
            .iter()
            .filter(|(_, c)| *c > 0.5)
            .map(|(p, _)| *p)
            .collect();
        let rerender =
            render::render_sequence(&s.canvas, &StrokeSet::with_unit_confidence(valid), &Brush::Plain).map_err(err)?;
        worst = worst.max(rerender.max_abs_diff(&s.target).map_err(err)?);
        inexact += s
            .canvas
            .data()
            .iter()
            .zip(s.differential.data())
            .zip(s.target.data())
            .filter(|((c, d), t)| *c + *d != **t)
            .count();

        // Replay the sample's draws to learn how many slots were active.
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, i as u64));
        let n_bg = rng.random_range(cfg.background_count.0..=cfg.background_count.1);
        let _ = sample_strokes(n_bg, Granularity::Background, &cfg, &mut rng);
        let fg = sample_strokes(cfg.max_strokes, Granularity::Foreground, &cfg, &mut rng);
        let active = rng.random_range(cfg.min_active..=cfg.max_strokes);
        if fg.strokes != s.target_strokes.strokes {
            replicate_errors += 1;
            continue;
        }
        // Pixel-count oracle for the overlap rule.
        let p = cfg.patch_size;
        let mut union = vec![false; p * p];
        for (k, st) in fg.strokes.iter().enumerate() {
            let label = s.target_strokes.confidences[k];
            let expect = if k >= active {
                0.0
            } else {
                let arr = st.to_array();
                let mask: Vec<bool> = (0..p * p)
                    .map(|q| oracle_mask(&arr, p, q / p, q % p) as f32 >= 0.5)
                    .collect();
                let area = mask.iter().filter(|m| **m).count();
                let overlap = mask.iter().zip(&union).filter(|(m, u)| **m && **u).count();
                let covered = if area == 0 { 0.0 } else { overlap as f64 / area as f64 };
                if covered > cfg.overlap_threshold {
                    0.0
                } else {
                    for (u, m) in union.iter_mut().zip(&mask) {
                        *u |= *m;
                    }
                    1.0
                }
            };
            if expect == 0.0 && k < active {
                invalid += 1;
            }
            if label != expect {
                label_errors += 1;
            }
        }
    }
    Ok((
        worst < 1e-6 && inexact == 0 && label_errors == 0 && replicate_errors == 0,
        format!(
            "500 samples, re-render max err {worst:.1e} (tol 1e-6), {inexact} pixels with canvas+diff != target, \
             {label_errors} overlap-label mismatches ({invalid} strokes ruled invalid by overlap), {replicate_errors} replay mismatches"
        ),
    ))
}

// ---------------------------------------------------------------------------
// 8-12: trained behavior

struct Run {
    records: Vec<StepRecord>,
    checkpoint: PathBuf,
    note: String,
}

struct Ctx {
    cache: Option<PathBuf>,
    scratch: tempfile::TempDir,
    runs: Vec<(bool, Result<Run, String>)>,
}

impl Ctx {
    fn new() -> Self {
        Self {
            cache: std::env::var_os("DQPAINT_ACCEPTANCE_CACHE").map(PathBuf::from),
            scratch: tempfile::tempdir().expect("scratch dir"),
            runs: Vec::new(),
        }
    }

    fn desk_config(no_differential: bool) -> TrainConfig {
        TrainConfig {
            seed: 0,
            no_differential,
            ..TrainConfig::desk()
        }
    }

    /// Trains (or reuses) the desk run with the differential image on or off.
    fn run(&mut self, no_differential: bool) -> Result<&Run, String> {
        if !self.runs.iter().any(|(k, _)| *k == no_differential) {
            let r = self.train(no_differential);
            self.runs.push((no_differential, r));
        }
        let (_, r) = self.runs.iter().find(|(k, _)| *k == no_differential).unwrap();
        r.as_ref().map_err(|e| e.clone())
    }

    fn train(&self, no_differential: bool) -> Result<Run, String> {
        let cfg = Self::desk_config(no_differential);
        let name = if no_differential { "no_differential" } else { "full" };
        let dir = match &self.cache {
            Some(c) => c.join(name),
            None => self.scratch.path().join(name),
        };
        let log = dir.join(training::LOG_FILE);
        let final_dir = dir.join(training::FINAL_DIR);
        let reusable = self.cache.is_some()
            && fs::read_to_string(dir.join("config.txt")).ok().as_deref() == Some(cfg.to_text().as_str())
            && final_dir.join(checkpoint::MANIFEST_FILE).exists();
        if reusable {
            let records = training::read_log(&log).map_err(err)?;
            if records.len() == cfg.total_steps {
                let note = match fs::read_to_string(dir.join("elapsed.txt")) {
                    Ok(s) => format!(
                        "cached run, trained in {:.1} min",
                        s.trim().parse::<f64>().unwrap_or(f64::NAN) / 60.0
                    ),
                    Err(_) => "cached run, training time not recorded".into(),
                };
                return Ok(Run {
                    records,
                    checkpoint: final_dir,
                    note,
                });
            }
        }
        let start = Instant::now();
        let summary = training::train(cfg, &dir, &Device::Cpu).map_err(|e| {
            let tail = fs::read_to_string(&log)
                .ok()
                .and_then(|t| t.lines().last().map(str::to_string))
                .unwrap_or_default();
            format!("training failed: {e} [{tail}]")
        })?;
        let secs = start.elapsed().as_secs_f64();
        let _ = fs::write(dir.join("elapsed.txt"), format!("{secs}\n"));
        // Re-read the log so the check covers what was written to disk.
        let records = training::read_log(&summary.log_path).map_err(err)?;
        Ok(Run {
            records,
            checkpoint: summary.final_checkpoint,
            note: format!("trained in {:.1} min", secs / 60.0),
        })
    }

    fn painter(&mut self, no_differential: bool) -> Result<(Painter, String), String> {
        let ckpt = self.run(no_differential)?.checkpoint.clone();
        let loaded = checkpoint::load(&ckpt, None, &Device::Cpu).map_err(err)?;
        Ok((loaded.painter, loaded.hash))
    }
}

fn window_mean(records: &[StepRecord], from: usize, len: usize) -> f64 {
    records[from..from + len].iter().map(|r| r.report.pixel).sum::<f64>() / len as f64
}

fn training_descent(ctx: &mut Ctx) -> Check {
    let run = ctx.run(false)?;
    let n = run.records.len();
    if n < 200 {
        return Ok((false, format!("only {n} logged steps")));
    }
    let first = window_mean(&run.records, 0, 100);
    let last = window_mean(&run.records, n - 100, 100);
    let non_finite = run.records.iter().filter(|r| !r.report.is_finite()).count();
    let ratio = last / first;
    Ok((
        ratio < 0.5 && non_finite == 0,
        format!(
            "{n} steps, pixel loss first-100 mean {first:.4}, last-100 mean {last:.4}, ratio {ratio:.3} (need < 0.5), \
             {non_finite} non-finite scalars; {} (target < 30 min)",
            run.note
        ),
    ))
}

fn to_batch(images: &[CanvasImage], dev: &Device) -> Result<Tensor, String> {
    let t: Vec<Tensor> = images
        .iter()
        .map(|i| i.to_tensor(dev, DType::F32))
        .collect::<Result<_, _>>()
        .map_err(err)?;
    Tensor::stack(&t, 0).map_err(err)
}

fn skip_behavior(ctx: &mut Ctx) -> Check {
    let (painter, _) = ctx.painter(false)?;
    let dev = Device::Cpu;
    let cfg = SynthConfig::default();
    let canvases: Vec<CanvasImage> = (0..20)
        .map(|i| sample_with_seed(&cfg, 909, i).map(|s| s.canvas))
        .collect::<Result<_, _>>()
        .map_err(err)?;
    let c = to_batch(&canvases, &dev)?;
    let zero = c.zeros_like().map_err(err)?;
    let out = painter.forward(&c, &c, &zero).map_err(err)?;
    let logits = out.logits.flatten_all().map_err(err)?.to_vec1::<f32>().map_err(err)?;
    let accepted = logits.iter().filter(|l| **l >= 0.0).count() as f64 / 20.0;
    let conf_zero = logits.iter().map(|l| sigmoid(*l as f64)).sum::<f64>() / logits.len() as f64;

    let busy = SynthConfig {
        min_active: cfg.max_strokes,
        ..cfg
    };
    let batch = SampleBatch::synthesize(&busy, 910, 20, &dev, DType::F32).map_err(err)?;
    let out = painter
        .forward(&batch.canvas, &batch.target, &batch.differential)
        .map_err(err)?;
    let logits = out.logits.flatten_all().map_err(err)?.to_vec1::<f32>().map_err(err)?;
    let conf_busy = logits.iter().map(|l| sigmoid(*l as f64)).sum::<f64>() / logits.len() as f64;
    Ok((
        accepted < 1.0 && conf_zero < conf_busy,
        format!(
            "zero-differential: {accepted:.2} accepted strokes per patch (need < 1), mean confidence {conf_zero:.4}; \
             high-differential mean confidence {conf_busy:.4} (need zero < high)"
        ),
    ))
}

fn attention_focus(ctx: &mut Ctx) -> Check {
    let (painter, _) = ctx.painter(false)?;
    let dev = Device::Cpu;
    let cfg = SynthConfig::default();
    let p = cfg.patch_size;
    let side = painter.config().grid_side();
    let cell = p / side;
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let (mut canvases, mut targets, mut regions) = (Vec::new(), Vec::new(), Vec::new());
    while canvases.len() < 20 {
        let empty = CanvasImage::filled(p, p, cfg.canvas_color);
        let n_bg = rng.random_range(cfg.background_count.0..=cfg.background_count.1);
        let bg = sample_strokes(n_bg, Granularity::Background, &cfg, &mut rng);
        let canvas = render::render_sequence(&empty, &bg, &Brush::Plain).map_err(err)?;
        let fg = sample_strokes(1, Granularity::Foreground, &cfg, &mut rng);
        let target = render::render_sequence(&canvas, &fg, &Brush::Plain).map_err(err)?;
        let region: Vec<bool> = (0..p * p)
            .map(|q| (0..3).any(|ch| (target.data()[q * 3 + ch] - canvas.data()[q * 3 + ch]).abs() > 0.1))
            .collect();
        // Skip strokes that barely change the patch.
        if region.iter().filter(|r| **r).count() < 16 {
            continue;
        }
        canvases.push(canvas);
        targets.push(target);
        regions.push(region);
    }
    let c = to_batch(&canvases, &dev)?;
    let t = to_batch(&targets, &dev)?;
    let d = (&t - &c).map_err(err)?;
    let out = painter.forward(&c, &t, &d).map_err(err)?;
    let maps = attention_grid(&out.first_cross_attention, side).map_err(err)?;
    // (B, N, side, side) averaged over queries.
    let maps = maps.mean(1).map_err(err)?.to_vec3::<f32>().map_err(err)?;
    let mut wins = 0;
    let (mut masses, mut densities) = (Vec::new(), Vec::new());
    for (b, map) in maps.iter().enumerate() {
        // Spread each cell's mass evenly over its pixels, then compare the
        // mean mass per pixel inside the region against outside it.
        let (mut inside, mut outside) = (0f64, 0f64);
        let area = regions[b].iter().filter(|r| **r).count() as f64;
        for q in 0..p * p {
            let w = map[(q / p) / cell][(q % p) / cell] as f64 / (cell * cell) as f64;
            if regions[b][q] {
                inside += w;
            } else {
                outside += w;
            }
        }
        let ratio = (inside / area) / (outside / ((p * p) as f64 - area));
        if ratio > 1.0 {
            wins += 1;
        }
        masses.push(inside);
        densities.push(ratio);
    }
    let mean_mass = masses.iter().sum::<f64>() / 20.0;
    let mean_ratio = densities.iter().sum::<f64>() / 20.0;
    let mean_area = regions
        .iter()
        .map(|r| r.iter().filter(|v| **v).count() as f64 / (p * p) as f64)
        .sum::<f64>()
        / 20.0;
    Ok((
        wins >= 19,
        format!(
            "{wins}/20 cases with higher mean mass per pixel inside |I_d| > 0.1 than outside (need >= 19); \
             mean inside/outside density ratio {mean_ratio:.3}; total inside mass {mean_mass:.3} vs region area {mean_area:.3}"
        ),
    ))
}

/// Smooth color fields with a few hard-edged shapes.
fn test_image(index: usize, size: usize) -> CanvasImage {
    let mut rng = ChaCha8Rng::seed_from_u64(1100 + index as u64);
    let base: [[f32; 3]; 2] = [
        std::array::from_fn(|_| rng.random()),
        std::array::from_fn(|_| rng.random()),
    ];
    let shapes: Vec<(f32, f32, f32, [f32; 3])> = (0..4)
        .map(|_| {
            (
                rng.random(),
                rng.random(),
                rng.random_range(0.08..0.3),
                std::array::from_fn(|_| rng.random()),
            )
        })
        .collect();
    let mut img = CanvasImage::filled(size, size, 0.0);
    for r in 0..size {
        for c in 0..size {
            let (x, y) = ((c as f32 + 0.5) / size as f32, (r as f32 + 0.5) / size as f32);
            let t = 0.5 * (x + y);
            let mut px: [f32; 3] = std::array::from_fn(|ch| base[0][ch] * (1.0 - t) + base[1][ch] * t);
            for (k, (cx, cy, rad, col)) in shapes.iter().enumerate() {
                let inside = if k % 2 == 0 {
                    (x - cx).powi(2) + (y - cy).powi(2) < rad * rad
                } else {
                    (x - cx).abs() < *rad && (y - cy).abs() < 0.5 * rad
                };
                if inside {
                    px = *col;
                }
            }
            for ch in 0..3 {
                img.set(r, c, ch, px[ch]);
            }
        }
    }
    img
}

fn plan_round_trip(ctx: &mut Ctx) -> Check {
    let (painter, hash) = ctx.painter(false)?;
    let size = 128;
    let opts = PaintOptions::new(size, painter.config().patch_size);
    let (mut worst, mut text_mismatch, mut strokes) = (0f64, 0, 0);
    for i in 0..5 {
        let image = test_image(i, 100 + 7 * i);
        let res = inference::paint(&image, &painter, &opts, &hash).map_err(err)?;
        strokes += res.plan.accepted();
        let path = ctx.scratch.path().join(format!("plan_{i}.txt"));
        res.plan.save(&path).map_err(err)?;
        let loaded = StrokePlan::load(&path).map_err(err)?;
        let replayed = inference::replay(&loaded, None, &Brush::Plain).map_err(err)?;
        worst = worst.max(replayed.canvas.max_abs_diff(&res.canvas).map_err(err)?);
        let first = fs::read_to_string(&path).map_err(err)?;
        let again = StrokePlan::parse(&loaded.to_text(), "again").map_err(err)?;
        if loaded.to_text() != first || again.to_text() != first || again != loaded {
            text_mismatch += 1;
        }
    }
    Ok((
        worst <= 1e-4 && text_mismatch == 0,
        format!(
            "5 images at {size}px, {strokes} strokes, replay max |err| {worst:.1e} (tol 1e-4), \
             {text_mismatch} plans not byte-identical after parse/serialize/parse"
        ),
    ))
}

fn ablation_direction(ctx: &mut Ctx) -> Check {
    let full = ctx.run(false)?;
    let n = full.records.len();
    let full_last = window_mean(&full.records, n - 100, 100);
    let ablated = ctx.run(true)?;
    let m = ablated.records.len();
    let ablated_last = window_mean(&ablated.records, m - 100, 100);
    Ok((
        ablated_last > full_last,
        format!(
            "final 100-step mean pixel loss: full {full_last:.4}, without differential image {ablated_last:.4} \
             (need ablated > full); ablated run {}",
            ablated.note
        ),
    ))
}
