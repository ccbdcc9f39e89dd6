//! Acceptance suite. Prints one PASS/FAIL line per criterion and fails the
//! test if any criterion fails.
//!
//! Criteria 7 to 9 run the desk-scale MNIST scenario on the committed
//! Fashion-MNIST backbone (`data/backbone-fashion.ppvt`) with the reduced
//! profile in [`desk_config`]. Their thresholds are pinned below.

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use preprompt::backbone::{
    block_forward, checkpoint, msa, Attention, BackboneConfig, BackboneParams, Block, LayerPrompt,
};
use preprompt::config::{DataSource, IdxSource, SyntheticSource};
use preprompt::harness::{
    ablation_suite, complexity_accounting, make_splits, run_method, run_scenario, AccuracyMatrix,
    EvalProtocol, Learner, Method, MethodConfig, Scenario, ScenarioResult, ScenarioTask, SplitSpec,
    TaskData,
};
use preprompt::head::LinearHead;
use preprompt::numeric::Matrix;
use preprompt::pipeline::{
    head_batch_loss, label_batch_loss, predict_prompt, LearnerConfig, LossScope, PrePrompt,
    PromptClassifier, TaskLayout,
};
use preprompt::prompting::{prefix_tuning_msa, prompt_tuning_msa, PromptMode, PromptPool};
use preprompt::translation::{nearest_new_prototype, translate_features};
use preprompt::data::{ImageShape, LabeledImageSet};
use proptest::prelude::*;
use proptest::test_runner::{Config as PtConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

struct Outcome {
    id: usize,
    name: &'static str,
    result: Check,
    elapsed: Duration,
}

fn run_check(id: usize, name: &'static str, f: impl FnOnce() -> Check) -> Outcome {
    let t = Instant::now();
    let result = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => Err(format!(
            "panicked: {}",
            p.downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default()
        )),
    };
    let o = Outcome {
        id,
        name,
        result,
        elapsed: t.elapsed(),
    };
    let (tag, detail) = match &o.result {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    report(&format!(
        "criterion {:>2} {tag} {} ({:.1}s): {detail}",
        o.id,
        o.name,
        o.elapsed.as_secs_f64()
    ));
    o
}

/// Writes past the test harness's output capture so the lines show up in a
/// plain `cargo test` run.
fn report(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, budget_s: f64) -> Result<(), String> {
    ensure(elapsed.as_secs_f64() < budget_s, || {
        format!("took {:.1}s, budget {budget_s}s", elapsed.as_secs_f64())
    })
}

// ---------------------------------------------------------------- 1

fn complexity_rows() -> Check {
    let t = Instant::now();
    let expected: [(&str, u64, u64, f64); 6] = [
        ("l2p", 138_240, 0, 0.527),
        ("dual-prompt", 944_640, 0, 3.604),
        ("s-prompt-plus-plus", 1_543_680, 38_400, 6.035),
        ("coda", 3_840_000, 0, 14.648),
        ("hide", 3_899_136, 307_200, 16.046),
        ("preprompt", 384_000, 15_360, 1.523),
    ];
    for (name, dp, stored, mb) in expected {
        let r = complexity_accounting(&MethodConfig::reference(name).map_err(|e| e.to_string())?);
        ensure(r.delta_p == dp && r.delta_m_mb == mb, || {
            format!("{name}: got ({}, {} MB), want ({dp}, {mb} MB)", r.delta_p, r.delta_m_mb)
        })?;
        if name == "preprompt" {
            ensure(r.stored == stored, || format!("preprompt stored {} != {stored}", r.stored))?;
        }
    }
    within(t.elapsed(), 1.0)?;
    Ok("six reference rows exact".into())
}

// ---------------------------------------------------------------- 2

fn tiny_backbone(rng: &mut ChaCha8Rng) -> BackboneParams {
    let config = BackboneConfig {
        image_height: 8,
        image_width: 8,
        channels: 1,
        patch_size: 4,
        embed_dim: 16,
        heads: 2,
        depth: 2,
        mlp_ratio: 2.0,
    };
    let mut p = BackboneParams::init(config, rng).unwrap();
    // move every parameter away from its structured init
    p.visit_mut(|s| s.iter_mut().for_each(|v| *v += rng.gen_range(-0.1..0.1)));
    p.freeze();
    p
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Central differences of `loss` over the entries exposed by `at`.
fn fd_check(
    count: usize,
    analytic: &[f64],
    mut loss_at: impl FnMut(usize, f64) -> f64,
) -> f64 {
    let h = 1e-5;
    (0..count)
        .map(|i| {
            let n = (loss_at(i, h) - loss_at(i, -h)) / (2.0 * h);
            rel_err(analytic[i], n)
        })
        .fold(0.0, f64::max)
}

fn gradient_check() -> Check {
    let t = Instant::now();
    let mut report = Vec::new();
    for mode in [PromptMode::Prompt, PromptMode::Prefix] {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let bb = tiny_backbone(&mut rng);
        let mut pool = PromptPool::new(mode, 2, vec![0, 1], 16, 2).unwrap();
        pool.alloc_task_prompt(1, 11).unwrap();
        let prompt = pool.get(0).unwrap().clone();
        let mut head = LinearHead::new(16);
        head.extend(3, 0.3, &mut rng);
        let images: Vec<Vec<f64>> = (0..3).map(|_| (0..64).map(|_| rng.gen::<f64>()).collect()).collect();
        let translated: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let live: Vec<(&[f64], usize)> = images.iter().enumerate().map(|(i, x)| (x.as_slice(), i)).collect();
        let tr: Vec<(&[f64], usize)> = vec![(translated.as_slice(), 1)];
        let scope = LossScope::All;
        let batch = label_batch_loss(&bb, &pool, &prompt, &head, &live, &tr, &scope).map_err(|e| e.to_string())?;

        // prompt entries
        let analytic: Vec<f64> = batch.prompt_grads.iter().flat_map(|g| g.data().to_vec()).collect();
        let sizes: Vec<usize> = prompt.blocks().iter().map(|b| b.data().len()).collect();
        let e_prompt = fd_check(analytic.len(), &analytic, |i, d| {
            let mut p = prompt.clone();
            let (mut l, mut k) = (0, i);
            while k >= sizes[l] {
                k -= sizes[l];
                l += 1;
            }
            p.blocks_mut()[l].data_mut()[k] += d;
            label_batch_loss(&bb, &pool, &p, &head, &live, &tr, &scope).unwrap().loss
        });

        // label classifier
        let analytic = batch.head_grads.to_flat();
        let flat = head.to_flat();
        let e_label = fd_check(flat.len(), &analytic, |i, d| {
            let mut h = head.clone();
            let mut f = flat.clone();
            f[i] += d;
            h.load_flat(&f).unwrap();
            label_batch_loss(&bb, &pool, &prompt, &h, &live, &tr, &scope).unwrap().loss
        });

        // prompt classifier on prompt-free features
        let free: Vec<Vec<f64>> = images.iter().map(|x| bb.feature(x, &[]).unwrap()).collect();
        let mut rows: Vec<(&[f64], usize)> = free.iter().enumerate().map(|(i, f)| (f.as_slice(), i)).collect();
        rows.push((translated.as_slice(), 2));
        let (_, g) = head_batch_loss(&head, &rows, &scope).map_err(|e| e.to_string())?;
        let analytic = g.to_flat();
        let e_prompt_clf = fd_check(flat.len(), &analytic, |i, d| {
            let mut h = head.clone();
            let mut f = flat.clone();
            f[i] += d;
            h.load_flat(&f).unwrap();
            head_batch_loss(&h, &rows, &scope).unwrap().0
        });
        let worst = e_prompt.max(e_label).max(e_prompt_clf);
        ensure(worst < 1e-4, || {
            format!("{mode:?}: max rel err prompt {e_prompt:.2e}, label clf {e_label:.2e}, prompt clf {e_prompt_clf:.2e}")
        })?;
        report.push(format!("{mode:?} {worst:.1e}"));
    }
    within(t.elapsed(), 10.0)?;
    Ok(format!("max rel err {}", report.join(", ")))
}

// ---------------------------------------------------------------- 3

// Straight-line reference implementations on nested Vecs.

type Rows = Vec<Vec<f64>>;

fn rows_of(m: &Matrix) -> Rows {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

fn ref_msa(q: &Rows, k: &Rows, v: &Rows, a: &Attention) -> Rows {
    let d = q[0].len();
    let dh = d / a.heads;
    let mut concat = vec![vec![0.0; d]; q.len()];
    for h in 0..a.heads {
        let proj = |x: &Rows, w: &Matrix| -> Rows {
            x.iter()
                .map(|row| {
                    (0..dh)
                        .map(|c| (0..dh).map(|j| row[h * dh + j] * w.get(j, c)).sum())
                        .collect()
                })
                .collect()
        };
        let (qh, kh, vh) = (proj(q, &a.wq[h]), proj(k, &a.wk[h]), proj(v, &a.wv[h]));
        for (i, qi) in qh.iter().enumerate() {
            let scores: Vec<f64> = kh
                .iter()
                .map(|kj| qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..dh {
                concat[i][h * dh + c] = e.iter().zip(&vh).map(|(w, vj)| w / z * vj[c]).sum();
            }
        }
    }
    concat
        .iter()
        .map(|row| (0..d).map(|c| (0..d).map(|j| row[j] * a.wo.get(j, c)).sum()).collect())
        .collect()
}

fn ref_ln(x: &Rows, gamma: &[f64], beta: &[f64]) -> Rows {
    x.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            r.iter()
                .enumerate()
                .map(|(i, v)| (v - mean) / (var + 1e-6).sqrt() * gamma[i] + beta[i])
                .collect()
        })
        .collect()
}

fn ref_gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn ref_block(h: &Rows, b: &Block, prompt: Option<(&Rows, bool)>) -> Rows {
    let a = ref_ln(h, &b.norm1.gamma, &b.norm1.beta);
    let (m, mut x1) = match prompt {
        None => (ref_msa(&a, &a, &a, &b.attention), h.clone()),
        Some((p, false)) => {
            let x: Rows = p.iter().chain(&a).cloned().collect();
            (ref_msa(&x, &x, &x, &b.attention), p.iter().chain(h).cloned().collect())
        }
        Some((p, true)) => {
            let half = p.len() / 2;
            let k: Rows = p[..half].iter().chain(&a).cloned().collect();
            let v: Rows = p[half..].iter().chain(&a).cloned().collect();
            (ref_msa(&a, &k, &v, &b.attention), h.clone())
        }
    };
    for (r, mr) in x1.iter_mut().zip(&m) {
        r.iter_mut().zip(mr).for_each(|(x, y)| *x += y);
    }
    let u = ref_ln(&x1, &b.norm2.gamma, &b.norm2.beta);
    let hidden = b.w1.cols();
    x1.iter()
        .zip(&u)
        .map(|(xr, ur)| {
            let g: Vec<f64> = (0..hidden)
                .map(|j| ref_gelu((0..ur.len()).map(|i| ur[i] * b.w1.get(i, j)).sum::<f64>() + b.b1[j]))
                .collect();
            (0..xr.len())
                .map(|c| xr[c] + (0..hidden).map(|j| g[j] * b.w2.get(j, c)).sum::<f64>() + b.b2[c])
                .collect()
        })
        .collect()
}

fn max_diff(m: &Matrix, r: &Rows) -> f64 {
    if m.rows() != r.len() {
        return f64::INFINITY;
    }
    r.iter()
        .enumerate()
        .flat_map(|(i, row)| row.iter().enumerate().map(move |(j, v)| (m.get(i, j) - v).abs()))
        .fold(0.0, f64::max)
}

fn oracle_equivalence() -> Check {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let heads = rng.gen_range(1..=2);
        let d = heads * rng.gen_range(2..=4);
        let n = rng.gen_range(1..=4);
        let l = rng.gen_range(1..=2);
        let config = BackboneConfig {
            image_height: 4,
            image_width: 4,
            channels: 1,
            patch_size: 2,
            embed_dim: d,
            heads,
            depth: 1,
            mlp_ratio: 2.0,
        };
        let mut block = Block::init(&config, &mut rng);
        for v in block
            .norm1
            .gamma
            .iter_mut()
            .chain(block.norm1.beta.iter_mut())
            .chain(block.norm2.gamma.iter_mut())
            .chain(block.norm2.beta.iter_mut())
            .chain(block.b1.iter_mut())
            .chain(block.b2.iter_mut())
        {
            *v += rng.gen_range(-0.5..0.5);
        }
        let h = Matrix::randn(n, d, 1.0, &mut rng);
        let hk = Matrix::randn(n, d, 1.0, &mut rng);
        let hv = Matrix::randn(n, d, 1.0, &mut rng);
        let p = Matrix::randn(l, d, 1.0, &mut rng);
        let pp = Matrix::randn(2 * l, d, 1.0, &mut rng);
        let a = &block.attention;
        let (rh, rk, rv, rp, rpp) = (rows_of(&h), rows_of(&hk), rows_of(&hv), rows_of(&p), rows_of(&pp));

        let cases = [
            ("msa", max_diff(&msa(&h, &hk, &hv, a).unwrap(), &ref_msa(&rh, &rk, &rv, a))),
            ("prompt_tuning_msa", {
                let cat = |x: &Rows| -> Rows { rp.iter().chain(x).cloned().collect() };
                max_diff(
                    &prompt_tuning_msa(&h, &hk, &hv, &p, a).unwrap(),
                    &ref_msa(&cat(&rh), &cat(&rk), &cat(&rv), a),
                )
            }),
            ("prefix_tuning_msa", {
                let kk: Rows = rpp[..l].iter().chain(&rk).cloned().collect();
                let vv: Rows = rpp[l..].iter().chain(&rv).cloned().collect();
                max_diff(&prefix_tuning_msa(&h, &hk, &hv, &pp, a).unwrap(), &ref_msa(&rh, &kk, &vv, a))
            }),
            ("block_forward", max_diff(&block_forward(&h, &block, None).unwrap(), &ref_block(&rh, &block, None))),
            (
                "block_forward/prompt",
                max_diff(
                    &block_forward(&h, &block, Some(LayerPrompt::Prompt(&p))).unwrap(),
                    &ref_block(&rh, &block, Some((&rp, false))),
                ),
            ),
            (
                "block_forward/prefix",
                max_diff(
                    &block_forward(&h, &block, Some(LayerPrompt::Prefix(&pp))).unwrap(),
                    &ref_block(&rh, &block, Some((&rpp, true))),
                ),
            ),
        ];
        for (name, e) in cases {
            ensure(e <= 1e-12, || format!("{name}: max abs diff {e:.3e} (n={n}, d={d}, heads={heads})"))?;
            worst = worst.max(e);
        }
    }
    within(t.elapsed(), 5.0)?;
    Ok(format!("100 trials, max abs diff {worst:.2e}"))
}

// ---------------------------------------------------------------- 4

fn feature_rows() -> impl Strategy<Value = (usize, Vec<Vec<f64>>, Vec<f64>)> {
    (1usize..6, 2usize..8).prop_flat_map(|(d, n)| {
        (
            Just(d),
            prop::collection::vec(prop::collection::vec(-10.0f64..10.0, d), n),
            prop::collection::vec(-10.0f64..10.0, d),
        )
    })
}

fn mean_of(rows: &[Vec<f64>]) -> Vec<f64> {
    let d = rows[0].len();
    (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64).collect()
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn translation_properties() -> Check {
    let t = Instant::now();
    let mut runner = TestRunner::new_with_rng(
        PtConfig {
            cases: 500,
            failure_persistence: None,
            ..PtConfig::default()
        },
        proptest::test_runner::TestRng::deterministic_rng(proptest::test_runner::RngAlgorithm::ChaCha),
    );

    runner
        .run(&feature_rows(), |(d, rows, mu_old)| {
            let src = Matrix::from_rows(&rows).unwrap();
            let mu_new = mean_of(&rows);
            let out = rows_of(&translate_features(&mu_old, &src, &mu_new).unwrap());
            for i in 0..rows.len() {
                for j in 0..rows.len() {
                    let (a, b) = (euclid(&rows[i], &rows[j]), euclid(&out[i], &out[j]));
                    prop_assert!((a - b).abs() <= 1e-12, "distance {} vs {}", a, b);
                }
            }
            let m = mean_of(&out);
            for k in 0..d {
                prop_assert!((m[k] - mu_old[k]).abs() <= 1e-9, "mean {} vs {}", m[k], mu_old[k]);
            }
            // identity when the prototypes coincide
            let same = rows_of(&translate_features(&mu_new, &src, &mu_new).unwrap());
            for (r, s) in rows.iter().zip(&same) {
                for (x, y) in r.iter().zip(s) {
                    prop_assert!((x - y).abs() <= 1e-12);
                }
            }
            Ok(())
        })
        .map_err(|e| format!("isometry/mean/identity: {e}"))?;

    let candidates = (1usize..5).prop_flat_map(|d| {
        (
            prop::collection::vec(-5.0f64..5.0, d),
            prop::collection::vec((0usize..50, prop::collection::vec(-5.0f64..5.0, d)), 1..8),
        )
    });
    runner
        .run(&candidates, |(mu_old, cands)| {
            let mut seen = std::collections::BTreeSet::new();
            let cands: Vec<(usize, Vec<f64>)> = cands.into_iter().filter(|(c, _)| seen.insert(*c)).collect();
            let got = nearest_new_prototype(&mu_old, &cands).unwrap();
            // exhaustive scan, ties to the lowest class id
            let best = cands
                .iter()
                .map(|(c, m)| (euclid(&mu_old, m), *c))
                .fold((f64::INFINITY, usize::MAX), |acc, x| {
                    if x.0 < acc.0 || (x.0 == acc.0 && x.1 < acc.1) {
                        x
                    } else {
                        acc
                    }
                });
            prop_assert_eq!(got, best.1);
            Ok(())
        })
        .map_err(|e| format!("nearest match: {e}"))?;
    within(t.elapsed(), 5.0)?;
    Ok("500 trials per property".into())
}

// ---------------------------------------------------------------- 5

fn brute_task(sizes: &[usize], class: usize) -> usize {
    let mut end = 0;
    for (t, s) in sizes.iter().enumerate() {
        end += s;
        if class < end {
            return t;
        }
    }
    unreachable!("class outside layout")
}

fn indexing_equivalence() -> Check {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut checked = 0usize;
    for trial in 0..1000 {
        let tasks = rng.gen_range(1..=8);
        let per = rng.gen_range(1..=6);
        let mut sizes = vec![per; tasks];
        // odd trials use a different first-task size
        if trial % 2 == 1 {
            sizes[0] = rng.gen_range(1..=12);
        }
        let mut layout = TaskLayout::default();
        let mut clf = PromptClassifier::new(2);
        for (k, &s) in sizes.iter().enumerate() {
            if layout.push(s).is_err() {
                return Err(format!("layout {sizes:?} rejected"));
            }
            clf.extend(k, s, &mut rng);
        }
        let total: usize = sizes.iter().sum();
        for c in 0..total {
            // a head whose argmax is class c
            let mut flat = vec![0.0; clf.head.num_params()];
            let bias_at = flat.len() - total + c;
            flat[bias_at] = 1.0;
            clf.head.load_flat(&flat).map_err(|e| e.to_string())?;
            let got = predict_prompt(&[0.0, 0.0], &clf, &layout).map_err(|e| e.to_string())?;
            let want = brute_task(&sizes, c);
            ensure(got == want, || format!("layout {sizes:?}, class {c}: floor index {got}, lookup {want}"))?;
            checked += 1;
        }
    }
    within(t.elapsed(), 1.0)?;
    Ok(format!("1000 layouts, {checked} classes"))
}

// ---------------------------------------------------------------- 6

/// Nearest class mean on raw pixels: deterministic and label-agnostic.
#[derive(Default)]
struct PixelNcm {
    means: Vec<(u32, Vec<f64>)>,
}

impl Learner for PixelNcm {
    fn name(&self) -> String {
        "pixel-ncm".into()
    }

    fn learn_task(&mut self, data: &TaskData<'_>) -> preprompt::Result<()> {
        for &c in data.classes {
            let idx = data.train.indices_of_class(c);
            let rows: Vec<Vec<f64>> = idx.iter().map(|&i| data.train.image(i).to_vec()).collect();
            self.means.push((c, mean_of(&rows)));
        }
        Ok(())
    }

    fn classify(&self, image: &[f64]) -> preprompt::Result<u32> {
        let mut best = (f64::INFINITY, 0);
        for (c, m) in &self.means {
            let d = euclid(image, m);
            if d < best.0 {
                best = (d, *c);
            }
        }
        Ok(best.1)
    }
}

fn relabel(set: &LabeledImageSet, perm: &[u32]) -> LabeledImageSet {
    let labels = set.labels().iter().map(|&l| perm[l as usize]).collect();
    LabeledImageSet::new(set.shape(), set.pixels().to_vec(), labels, set.class_names().to_vec()).unwrap()
}

fn metric_oracles() -> Check {
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12;
    let m = AccuracyMatrix::constant(4, 0.6).map_err(|e| e.to_string())?;
    let (a, ab, f) = (m.avg_accuracy().unwrap(), m.avg_incremental_accuracy().unwrap(), m.forgetting().unwrap());
    ensure(close(a, 0.6) && close(ab, 0.6) && close(f, 0.0), || format!("constant: {a} {ab} {f}"))?;

    let m = AccuracyMatrix::new(vec![vec![0.9], vec![0.8, 0.7]]).unwrap();
    let (a, ab, f) = (m.avg_accuracy().unwrap(), m.avg_incremental_accuracy().unwrap(), m.forgetting().unwrap());
    ensure(close(a, 0.75) && close(ab, 0.825) && close(f, 0.1), || format!("two-task: {a} {ab} {f}"))?;

    // A = (0.6+0.7+0.8)/3, A_bar = (1.0 + 0.7 + 0.7)/3, F = (0.4 + 0.2)/2
    let m = AccuracyMatrix::new(vec![vec![1.0], vec![0.5, 0.9], vec![0.6, 0.7, 0.8]]).unwrap();
    let (a, ab, f) = (m.avg_accuracy().unwrap(), m.avg_incremental_accuracy().unwrap(), m.forgetting().unwrap());
    ensure(close(a, 0.7) && close(ab, 0.8) && close(f, 0.3), || format!("three-task: {a} {ab} {f}"))?;

    // same scenario with every class renamed
    let shape = ImageShape {
        height: 6,
        width: 6,
        channels: 1,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let make = |rng: &mut ChaCha8Rng, per: usize| {
        let labels: Vec<u32> = (0..6u32).flat_map(|c| std::iter::repeat(c).take(per)).collect();
        let pixels: Vec<f64> = labels
            .iter()
            .flat_map(|&c| (0..36).map(move |i| (i, c)).collect::<Vec<_>>())
            .map(|(i, c)| if i % 6 == c as usize { 0.8 } else { rng.gen_range(0.0..0.6) })
            .collect();
        LabeledImageSet::new(shape, pixels, labels, LabeledImageSet::numbered_classes(6)).unwrap()
    };
    let (train, test) = (make(&mut rng, 5), make(&mut rng, 5));
    let base = make_splits(&train, &test, &SplitSpec { tasks: 3, first_task: None }, 1).unwrap();
    let perm: Vec<u32> = vec![4, 0, 5, 2, 1, 3];
    let renamed = Scenario {
        tasks: base
            .tasks
            .iter()
            .map(|t| ScenarioTask {
                classes: t.classes.iter().map(|&c| perm[c as usize]).collect(),
                train: relabel(&t.train, &perm),
                test: relabel(&t.test, &perm),
            })
            .collect(),
        ..base.clone()
    };
    let proto = EvalProtocol::default();
    let r1 = run_scenario(&base, &mut PixelNcm::default(), &proto).unwrap();
    let r2 = run_scenario(&renamed, &mut PixelNcm::default(), &proto).unwrap();
    ensure(r1.matrix == r2.matrix, || "matrix changed under relabeling".into())?;
    Ok("constant, two-task and three-task examples exact; relabeling invariant".into())
}

// ---------------------------------------------------------------- 7-9

fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

/// Reduced desk profile shared by criteria 7 to 9.
fn desk_config() -> LearnerConfig {
    let mut c = LearnerConfig::default();
    c.label_stage.epochs = 5;
    c
}

const DESK_TRAIN_PER_CLASS: usize = 100;
const DESK_TEST_PER_CLASS: usize = 50;
const DESK_SEEDS: [u64; 3] = [0, 1, 2];

struct Desk {
    backbone: Arc<BackboneParams>,
    scenario: Scenario,
}

fn desk() -> Result<Desk, String> {
    let dir = data_dir();
    let backbone = checkpoint::load(dir.join("backbone-fashion.ppvt")).map_err(|e| e.to_string())?;
    let file = |name: &str| dir.join(format!("mnist-{name}-ubyte.gz"));
    let src = DataSource::Idx(IdxSource {
        train_images: file("train-images-idx3"),
        train_labels: file("train-labels-idx1"),
        test_images: file("test-images-idx3"),
        test_labels: file("test-labels-idx1"),
        train_per_class: Some(DESK_TRAIN_PER_CLASS),
        test_per_class: Some(DESK_TEST_PER_CLASS),
    });
    let (train, test) = src.load(&backbone.config).map_err(|e| e.to_string())?;
    let scenario = make_splits(&train, &test, &SplitSpec { tasks: 5, first_task: None }, 0).map_err(|e| e.to_string())?;
    Ok(Desk {
        backbone: Arc::new(backbone),
        scenario,
    })
}

fn run(desk: &Desk, method: Method, config: &LearnerConfig, seed: u64) -> Result<ScenarioResult, String> {
    let r = run_method(method, &desk.scenario, desk.backbone.clone(), config, seed, &EvalProtocol::default())
        .map_err(|e| e.to_string())?;
    ensure(r.valid, || format!("{method} seed {seed} failed: {:?}", r.error))?;
    Ok(r)
}

fn pct(x: f64) -> String {
    format!("{:.2}", x * 100.0)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn method_efficacy(desk: &Desk, full_seed0: &mut Option<ScenarioResult>) -> Check {
    let t = Instant::now();
    let config = desk_config();
    let (mut pa, mut pf, mut fa, mut ff) = (vec![], vec![], vec![], vec![]);
    for seed in DESK_SEEDS {
        let p = run(desk, Method::Preprompt, &config, seed)?;
        let f = run(desk, Method::Finetune, &config, seed)?;
        pa.push(p.matrix.avg_accuracy().unwrap());
        pf.push(p.matrix.forgetting().unwrap());
        fa.push(f.matrix.avg_accuracy().unwrap());
        ff.push(f.matrix.forgetting().unwrap());
        if seed == 0 {
            *full_seed0 = Some(p);
        }
    }
    let (gap, fp, fft) = (mean(&pa) - mean(&fa), mean(&pf), mean(&ff));
    let detail = format!(
        "A_T preprompt {} vs finetune {} (gap {} pts), F_T {} vs {}",
        pct(mean(&pa)),
        pct(mean(&fa)),
        pct(gap),
        pct(fp),
        pct(fft)
    );
    ensure(gap >= 0.10, || format!("{detail}; gap below 10 pts"))?;
    ensure(fp < fft, || format!("{detail}; forgetting not lower"))?;
    within(t.elapsed(), 15.0 * 60.0)?;
    Ok(detail)
}

fn ablation_ordering(desk: &Desk, full_seed0: Option<ScenarioResult>) -> Check {
    let t = Instant::now();
    let config = desk_config();
    let seed = DESK_SEEDS[0];
    let rows = ablation_suite(&desk.scenario, desk.backbone.clone(), &config, &[0, 2], seed, &EvalProtocol::default())
        .map_err(|e| e.to_string())?;
    // row 5 is the default configuration, already run under this seed
    let full = match full_seed0 {
        Some(r) => r,
        None => ablation_suite(&desk.scenario, desk.backbone.clone(), &config, &[5], seed, &EvalProtocol::default())
            .map_err(|e| e.to_string())?
            .remove(0)
            .result,
    };
    let a = |m: &AccuracyMatrix| m.avg_accuracy().unwrap();
    let (r0, r2, r5) = (a(rows[0].matrix()), a(rows[1].matrix()), a(&full.matrix));
    let detail = format!("row5 {} >= row2 {} >= row0 {}", pct(r5), pct(r2), pct(r0));
    ensure(r5 >= r2 && r2 >= r0, || format!("{detail}; ordering broken"))?;
    ensure(r5 - r0 >= 0.05, || format!("{detail}; full-vs-finetune gap below 5 pts"))?;
    within(t.elapsed(), 30.0 * 60.0)?;
    Ok(detail)
}

fn length_robustness(desk: &Desk) -> Check {
    let t = Instant::now();
    let mut accs = Vec::new();
    for l in [2, 4, 6, 8, 10] {
        let mut c = desk_config();
        c.mode = PromptMode::Prefix;
        c.length = l;
        accs.push((l, run(desk, Method::Preprompt, &c, DESK_SEEDS[0])?.matrix.avg_accuracy().unwrap()));
    }
    let hi = accs.iter().map(|x| x.1).fold(f64::NEG_INFINITY, f64::max);
    let lo = accs.iter().map(|x| x.1).fold(f64::INFINITY, f64::min);
    let detail = format!(
        "A_T by L: {} (spread {} pts)",
        accs.iter().map(|(l, a)| format!("{l}:{}", pct(*a))).collect::<Vec<_>>().join(" "),
        pct(hi - lo)
    );
    // accuracies are multiples of 1/500, so allow only f64 subtraction noise
    ensure(hi - lo <= 0.03 + 1e-9, || format!("{detail}; spread above 3 pts"))?;
    within(t.elapsed(), 45.0 * 60.0)?;
    Ok(detail)
}

// ---------------------------------------------------------------- 10

fn determinism() -> Check {
    let config = BackboneConfig {
        image_height: 14,
        image_width: 14,
        patch_size: 7,
        embed_dim: 16,
        heads: 2,
        depth: 2,
        ..BackboneConfig::default()
    };
    let src = DataSource::Synthetic(SyntheticSource {
        classes: 6,
        train_per_class: 12,
        test_per_class: 6,
        ..SyntheticSource::default()
    });
    let (train, test) = src.load(&config).map_err(|e| e.to_string())?;
    let scenario = make_splits(&train, &test, &SplitSpec { tasks: 3, first_task: None }, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut bb = BackboneParams::init(config, &mut rng).unwrap();
    bb.freeze();
    let bb = Arc::new(bb);
    let mut lc = LearnerConfig::default();
    lc.prompt_stage.epochs = 5;
    lc.label_stage.epochs = 2;
    let proto = EvalProtocol::default();

    let r1 = run_method(Method::Preprompt, &scenario, bb.clone(), &lc, 8, &proto).unwrap();
    let r2 = run_method(Method::Preprompt, &scenario, bb.clone(), &lc, 8, &proto).unwrap();
    let bits = |m: &AccuracyMatrix| -> Vec<u64> { m.rows().iter().flatten().map(|v| v.to_bits()).collect() };
    ensure(bits(&r1.matrix) == bits(&r2.matrix), || "accuracy matrices differ between identical runs".into())?;

    // immutability, task by task
    let before = bb.checksum();
    let mut p = PrePrompt::new(bb.clone(), &lc, 8).unwrap();
    let mut frozen_prompts: Vec<u64> = Vec::new();
    for (k, task) in scenario.tasks.iter().enumerate() {
        p.learn_task(&TaskData {
            index: k,
            classes: &task.classes,
            train: &task.train,
        })
        .map_err(|e| e.to_string())?;
        for (j, &c) in frozen_prompts.iter().enumerate() {
            ensure(p.pool().get(j).unwrap().checksum() == c, || format!("prompt {j} changed during task {k}"))?;
        }
        frozen_prompts.push(p.pool().get(k).unwrap().checksum());
        ensure(p.backbone().checksum() == before, || format!("backbone changed during task {k}"))?;
    }
    Ok(format!(
        "matrix bit-identical; backbone {before:016x} and {} prompt checksums stable",
        frozen_prompts.len()
    ))
}

#[test]
fn acceptance() {
    let mut outcomes = vec![
        run_check(1, "complexity accounting", complexity_rows),
        run_check(2, "gradient verification", gradient_check),
        run_check(3, "attention/backbone oracles", oracle_equivalence),
        run_check(4, "feature translation properties", translation_properties),
        run_check(5, "prompt indexing", indexing_equivalence),
        run_check(6, "metric oracles", metric_oracles),
    ];
    match desk() {
        Ok(d) => {
            let mut full = None;
            outcomes.push(run_check(7, "desk-scale efficacy", || method_efficacy(&d, &mut full)));
            outcomes.push(run_check(8, "ablation ordering", || ablation_ordering(&d, full)));
            outcomes.push(run_check(9, "prompt-length robustness", || length_robustness(&d)));
        }
        Err(e) => {
            for (id, name) in [(7, "desk-scale efficacy"), (8, "ablation ordering"), (9, "prompt-length robustness")] {
                outcomes.push(run_check(id, name, || Err(format!("desk data unavailable: {e}"))));
            }
        }
    }
    outcomes.push(run_check(10, "determinism and immutability", determinism));
    let failed: Vec<usize> = outcomes.iter().filter(|o| o.result.is_err()).map(|o| o.id).collect();
    report(&format!(
        "acceptance: {}/{} criteria passed",
        outcomes.len() - failed.len(),
        outcomes.len()
    ));
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
