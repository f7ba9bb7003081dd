//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line
//! (written straight to stdout so it shows without `--nocapture`) and then
//! asserts. Tests take a shared lock so the timing check never competes
//! with another test for the CPU.

use std::io::Write;
use std::sync::Mutex;
use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use reformer::attention::multihead::normalize_rows;
use reformer::attention::{dense_attention, multi_round_lsh_attention, AttentionKind, AttentionPlan, AttentionSetting, AttnOpts, PlanSource};
use reformer::bench::{bench_attn, mem_report, BenchKind, BenchSpec, MemSpec};
use reformer::dup::{gen_batch, oracle_accuracy, DupConfig, Split};
use reformer::feedforward::{Activation, FeedForward};
use reformer::lsh::{build_round, sample_rotation, LshConfig};
use reformer::model::{Backprop, Model, ModelConfig, RunOpts};
use reformer::reversible::{chunked_ff, chunked_logprob_loss, rev_forward, rev_reverse, BlockRun, ChunkSpec, IdentityHead, RevBlock, StatePair};
use reformer::rng::{stream, Domain};
use reformer::trainer::{self, eval_matrix, EvalSetting};
use reformer::{Scalar, Tensor};

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(criterion: u32, name: &str, pass: bool, detail: &str, started: Instant) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let line = format!(
        "[acceptance] criterion {criterion} ({name}): {verdict} {detail} [{:.1}s]\n",
        started.elapsed().as_secs_f64()
    );
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(line.as_bytes());
    let _ = out.flush();
}

fn normal<S: Scalar>(shape: &[usize], rng: &mut impl Rng) -> Tensor<S> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = StandardNormal.sample(rng);
        S::lit(v)
    })
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-300)
}

fn flat<S: Scalar>(m: &Model<S>) -> Vec<f64> {
    m.named_tensors().iter().flat_map(|(_, t)| t.data().iter().map(|x| x.as_f64())).collect()
}

/// Max round-trip error over random blocks of one dtype.
fn round_trip_error<S: Scalar>(seed: u64, count: usize) -> f64 {
    let kinds = [AttentionKind::Full, AttentionKind::FullSharedQk, AttentionKind::Lsh];
    let mut worst = 0.0f64;
    for n in 0..count {
        let mut rng = stream(seed, Domain::Test, &[n as u64]);
        let d = [8, 64][n % 2];
        let l = [8, 128][(n / 2) % 2];
        let kind = kinds[n % 3];
        let mut setting = AttentionSetting::new(kind);
        setting.lsh = LshConfig {
            n_buckets: 4,
            n_rounds: 1 + n % 3,
            seed: n as u64,
            ..Default::default()
        };
        let block = RevBlock::<S>::init(d, 2 * d, 2, kind.shared_qk(), Activation::Gelu, &mut rng).unwrap();
        let x = StatePair::new(normal(&[2, l, d], &mut rng), normal(&[2, l, d], &mut rng)).unwrap();
        let run = BlockRun {
            setting: &setting,
            ff_chunks: ChunkSpec::new(1 + n % 4).unwrap(),
        };
        let source = PlanSource::Sample {
            domain: Domain::Test,
            step: n as u64,
            layer: 0,
        };
        let (y, plans) = rev_forward(&block, x.clone(), run, source).unwrap();
        let back = rev_reverse(&block, y, run, plans.as_deref()).unwrap();
        worst = worst.max(back.max_abs_diff(&x));
    }
    worst
}

#[test]
fn criterion_1_reversibility_round_trip() {
    let _g = serial();
    let t = Instant::now();
    let e64 = round_trip_error::<f64>(11, 100);
    let e32 = round_trip_error::<f32>(12, 100);
    let pass = e64 < 1e-10 && e32 < 1e-5 && t.elapsed().as_secs() < 60;
    report(1, "reversibility round trip", pass, &format!("max_err f64={e64:.2e} f32={e32:.2e} over 100 blocks each"), t);
    assert!(e64 < 1e-10, "f64 round trip error {e64}");
    assert!(e32 < 1e-5, "f32 round trip error {e32}");
}

fn small_config(kind: AttentionKind, n_layers: usize, l: usize, d: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: 11,
        d_model: d,
        d_ff: 2 * d,
        n_heads: 2,
        n_layers,
        max_len: l,
        attention: kind,
        lsh: LshConfig {
            n_buckets: 4,
            n_rounds: 2,
            seed: 3,
            ..Default::default()
        },
        ff_chunks: ChunkSpec::new(3).unwrap(),
        loss_chunks: ChunkSpec::new(2).unwrap(),
        ..Default::default()
    }
}

fn batch(rng: &mut impl Rng, b: usize, l: usize, vocab: usize) -> (Vec<usize>, Vec<bool>) {
    let tokens = (0..b * l).map(|_| rng.random_range(0..vocab)).collect();
    let mask = (0..b * l).map(|p| p % l >= l / 2).collect();
    (tokens, mask)
}

#[test]
fn criterion_2_gradient_equivalence() {
    let _g = serial();
    let t = Instant::now();
    let mut rng = stream(21, Domain::Test, &[]);
    let mut worst_rev = 0.0f64;
    for kind in [AttentionKind::Full, AttentionKind::FullSharedQk, AttentionKind::Lsh] {
        let (b, l) = (2, 16);
        let cfg = small_config(kind, 2, l, 16);
        let (tokens, mask) = batch(&mut rng, b, l, cfg.vocab_size);
        let mut grads = Vec::new();
        for mode in [Backprop::Reversible, Backprop::Stored] {
            let model = Model::<f64>::init(ModelConfig { backprop: mode, ..cfg.clone() }, 5).unwrap();
            let mut g = model.zeros_like();
            model.loss_and_grad(&tokens, &mask, b, l, &RunOpts::train(&model.config, 4), &mut g).unwrap();
            grads.push(flat(&g));
        }
        worst_rev = worst_rev.max(rel_err(&grads[0], &grads[1]));
    }

    // Central differences on every parameter of a one-block model.
    let mut worst_fd = 0.0f64;
    for kind in [AttentionKind::Full, AttentionKind::FullSharedQk] {
        let (b, l) = (1, 8);
        let cfg = small_config(kind, 1, l, 8);
        let (tokens, mask) = batch(&mut rng, b, l, cfg.vocab_size);
        let model = Model::<f64>::init(cfg, 9).unwrap();
        let opts = RunOpts::train(&model.config, 0);
        let mut g = model.zeros_like();
        model.loss_and_grad(&tokens, &mask, b, l, &opts, &mut g).unwrap();
        let analytic = flat(&g);
        let mut numeric = Vec::with_capacity(analytic.len());
        let mut probe = model.clone();
        let h = 1e-5;
        let n_tensors = probe.tensors_mut().len();
        for ti in 0..n_tensors {
            let len = probe.tensors_mut()[ti].len();
            for k in 0..len {
                let orig = probe.tensors_mut()[ti].data()[k];
                probe.tensors_mut()[ti].data_mut()[k] = orig + h;
                let up = probe.evaluate(&tokens, &mask, b, l, &opts).unwrap().loss;
                probe.tensors_mut()[ti].data_mut()[k] = orig - h;
                let down = probe.evaluate(&tokens, &mask, b, l, &opts).unwrap().loss;
                probe.tensors_mut()[ti].data_mut()[k] = orig;
                numeric.push((up - down) / (2.0 * h));
            }
        }
        worst_fd = worst_fd.max(rel_err(&analytic, &numeric));
    }
    let pass = worst_rev < 1e-8 && worst_fd < 1e-6 && t.elapsed().as_secs() < 300;
    report(
        2,
        "gradient equivalence",
        pass,
        &format!("reversible_vs_stored rel={worst_rev:.2e} analytic_vs_fd rel={worst_fd:.2e}"),
        t,
    );
    assert!(worst_rev < 1e-8, "reversible vs stored {worst_rev}");
    assert!(worst_fd < 1e-6, "finite differences {worst_fd}");
}

/// Reference multi-round attention for one sequence, built directly from
/// the definitions: hash, stable sort by (bucket, position), chunk rule,
/// per-round softmax with `log N` and self penalties, then the
/// partition-weighted sum over rounds.
fn union_set_oracle(q: &[f64], k: &[f64], v: &[f64], l: usize, d: usize, rotations: &[Tensor<f64>], m: usize, causal: bool, strict: bool) -> Vec<f64> {
    let hash = |x: &[f64], r: &Tensor<f64>| -> usize {
        let cols = r.shape()[1];
        let proj: Vec<f64> = (0..cols).map(|c| (0..d).map(|a| x[a] * r.data()[a * cols + c]).sum()).collect();
        let both: Vec<f64> = proj.iter().copied().chain(proj.iter().map(|p| -p)).collect();
        let mut best = 0;
        for (i, &p) in both.iter().enumerate() {
            if p > both[best] {
                best = i;
            }
        }
        best
    };
    let n_r = rotations.len();
    let mut member = vec![vec![vec![false; l]; l]; n_r];
    for (r, rot) in rotations.iter().enumerate() {
        let buckets: Vec<usize> = (0..l).map(|i| hash(&k[i * d..(i + 1) * d], rot)).collect();
        let mut order: Vec<usize> = (0..l).collect();
        order.sort_by_key(|&i| (buckets[i], i));
        let mut slot = vec![0; l];
        for (s, &i) in order.iter().enumerate() {
            slot[i] = s;
        }
        for i in 0..l {
            for j in 0..l {
                let (ci, cj) = (slot[i] / m, slot[j] / m);
                member[r][i][j] = (cj == ci || cj + 1 == ci) && (!causal || j <= i) && (!strict || buckets[i] == buckets[j]);
            }
        }
    }
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0; l * d];
    for i in 0..l {
        let mut z_r = vec![f64::NEG_INFINITY; n_r];
        let mut o_r = vec![vec![0.0; d]; n_r];
        for r in 0..n_r {
            let logits: Vec<(usize, f64)> = (0..l)
                .filter(|&j| member[r][i][j])
                .map(|j| {
                    let dot: f64 = (0..d).map(|a| q[i * d + a] * k[j * d + a]).sum();
                    let pen = if i == j {
                        1e5
                    } else {
                        ((0..n_r).filter(|&rr| member[rr][i][j]).count() as f64).ln()
                    };
                    (j, dot * scale - pen)
                })
                .collect();
            let mx = logits.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
            let z = mx + logits.iter().map(|p| (p.1 - mx).exp()).sum::<f64>().ln();
            z_r[r] = z;
            for &(j, s) in &logits {
                for a in 0..d {
                    o_r[r][a] += (s - z).exp() * v[j * d + a];
                }
            }
        }
        let mx = z_r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z = mx + z_r.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
        for r in 0..n_r {
            let w = (z_r[r] - z).exp();
            for a in 0..d {
                out[i * d + a] += w * o_r[r][a];
            }
        }
    }
    out
}

#[test]
fn criterion_3_lsh_matches_union_set_oracle() {
    let _g = serial();
    let t = Instant::now();
    let mut worst = 0.0f64;
    let mut instances = 0;
    for n in 0..240u64 {
        let mut rng = stream(31, Domain::Test, &[n]);
        let l = rng.random_range(2..=32);
        let d = [4, 8][n as usize % 2];
        let n_rounds = [1, 2, 4][n as usize % 3];
        let n_buckets = [2, 4, 8][(n as usize / 3) % 3];
        let m = rng.random_range(1..=8);
        let causal = n % 4 != 3;
        let strict = n % 5 != 4;
        let q: Tensor<f64> = normal(&[1, l, d], &mut rng);
        let k = normalize_rows(&q);
        let v: Tensor<f64> = normal(&[1, l, d], &mut rng);
        let rotations: Vec<Tensor<f64>> = (0..n_rounds).map(|r| sample_rotation(d, n_buckets, n * 16 + r as u64).unwrap()).collect();
        let plan = AttentionPlan::from_rotations(k.data(), d, &rotations, m, causal, strict).unwrap();
        let opts = AttnOpts {
            scale: true,
            causal,
            self_mask: true,
        };
        let got = multi_round_lsh_attention(&q, &k, &v, &[plan], &opts).unwrap();
        let want = union_set_oracle(q.data(), k.data(), v.data(), l, d, &rotations, m, causal, strict);
        let diff = got.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst = worst.max(diff);
        instances += 1;
    }
    let pass = worst < 1e-4 && instances >= 200 && t.elapsed().as_secs() < 300;
    report(3, "lsh oracle equivalence", pass, &format!("max_abs_diff={worst:.2e} over {instances} instances"), t);
    assert!(worst < 1e-4, "max abs diff {worst}");
}

#[test]
fn criterion_4_single_bucket_equals_dense() {
    let _g = serial();
    let t = Instant::now();
    let mut worst = 0.0f64;
    for (n, &(l, m)) in [(8usize, 8usize), (16, 20), (64, 64), (33, 40)].iter().enumerate() {
        let mut rng = stream(41, Domain::Test, &[n as u64]);
        let d = 8;
        let q: Tensor<f64> = normal(&[1, l, d], &mut rng);
        let k = normalize_rows(&q);
        let v: Tensor<f64> = normal(&[1, l, d], &mut rng);
        let plan = AttentionPlan::new(vec![build_round(vec![0; l])], m, true, true).unwrap();
        let opts = AttnOpts {
            scale: true,
            causal: true,
            self_mask: true,
        };
        let lsh = multi_round_lsh_attention(&q, &k, &v, &[plan], &opts).unwrap();
        let dense = dense_attention(&q, &k, &v, &opts).unwrap();
        worst = worst.max(lsh.max_abs_diff(&dense));
    }
    let pass = worst < 1e-5 && t.elapsed().as_secs() < 60;
    report(4, "single bucket equals dense", pass, &format!("max_abs_diff={worst:.2e}"), t);
    assert!(worst < 1e-5, "max abs diff {worst}");
}

#[test]
fn criterion_5_chunking_exactness() {
    let _g = serial();
    let t = Instant::now();
    let mut rng = stream(51, Domain::Test, &[]);
    let (b, l, d) = (2, 24, 16);
    let ff = FeedForward::<f32>::init(d, 64, Activation::Gelu, &mut rng);
    let y1: Tensor<f32> = normal(&[b, l, d], &mut rng);
    let x2: Tensor<f32> = normal(&[b, l, d], &mut rng);
    let whole = chunked_ff(&ff, &y1, &x2, ChunkSpec::new(1).unwrap()).unwrap();
    let ff_exact = [4, l].iter().all(|&c| chunked_ff(&ff, &y1, &x2, ChunkSpec::new(c).unwrap()).unwrap() == whole);

    let vocab = 37;
    let h: Tensor<f64> = normal(&[b, l, vocab], &mut rng);
    let targets: Vec<usize> = (0..b * l).map(|_| rng.random_range(0..vocab)).collect();
    let mask: Vec<bool> = (0..b * l).map(|_| rng.random_bool(0.7)).collect();
    let head = IdentityHead { vocab };
    let base = chunked_logprob_loss(&head, &h, &targets, &mask, ChunkSpec::new(1).unwrap(), Some(&mut ())).unwrap();
    let mut loss_diff = 0.0f64;
    for c in [2, 4, 7, l] {
        let out = chunked_logprob_loss(&head, &h, &targets, &mask, ChunkSpec::new(c).unwrap(), Some(&mut ())).unwrap();
        loss_diff = loss_diff.max((out.loss - base.loss).abs());
        loss_diff = loss_diff.max(out.dh.unwrap().max_abs_diff(base.dh.as_ref().unwrap()));
    }
    let pass = ff_exact && loss_diff < 1e-7 && t.elapsed().as_secs() < 60;
    report(5, "chunking exactness", pass, &format!("ff_bit_identical={ff_exact} loss_max_diff={loss_diff:.2e}"), t);
    assert!(ff_exact, "chunked feed-forward differs");
    assert!(loss_diff < 1e-7, "chunked loss differs by {loss_diff}");
}

#[test]
fn criterion_6_memory_flatness() {
    let _g = serial();
    let t = Instant::now();
    let spec = MemSpec {
        layers: vec![1, 2, 4, 8],
        modes: vec![Backprop::Reversible, Backprop::Stored],
        chunks: vec![1],
        ..Default::default()
    };
    let rows = mem_report(&spec).unwrap();
    let peaks = |mode: Backprop| -> Vec<usize> { rows.iter().filter(|r| r.mode == mode).map(|r| r.peak_floats).collect() };
    let rev = peaks(Backprop::Reversible);
    let stored = peaks(Backprop::Stored);
    let (lo, hi) = (*rev.iter().min().unwrap() as f64, *rev.iter().max().unwrap() as f64);
    let rev_spread = hi / lo - 1.0;
    let growth = stored[2] as f64 / stored[0] as f64;
    let pass = rev_spread <= 0.10 && growth >= 3.5 && t.elapsed().as_secs() < 300;
    report(
        6,
        "memory flatness",
        pass,
        &format!("reversible peaks {rev:?} (spread {:.1}%), stored peaks {stored:?} (4/1 = {growth:.2}x)", 100.0 * rev_spread),
        t,
    );
    assert!(rev_spread <= 0.10, "reversible peaks vary by {rev_spread}");
    assert!(growth >= 3.5, "stored baseline grows only {growth}x");
}

#[test]
fn criterion_7_speed_shape() {
    let _g = serial();
    let t = Instant::now();
    let spec = BenchSpec {
        kinds: vec![BenchKind::Dense, BenchKind::Lsh],
        lengths: vec![1024, 4096],
        budget: 1 << 17,
        reps: 7,
        warmup: 2,
        ..Default::default()
    };
    let rows = bench_attn(&spec, |_| {}).unwrap();
    let mean = |kind: BenchKind, l: usize| rows.iter().find(|r| r.kind == kind && r.length == l).unwrap().mean_ms;
    let dense = mean(BenchKind::Dense, 4096) / mean(BenchKind::Dense, 1024);
    let lsh = mean(BenchKind::Lsh, 4096) / mean(BenchKind::Lsh, 1024);
    let pass = dense >= 2.0 && lsh <= 1.5 && t.elapsed().as_secs() < 600;
    report(7, "speed shape", pass, &format!("dense 4096/1024 = {dense:.2}x, lsh 4096/1024 = {lsh:.2}x"), t);
    assert!(dense >= 2.0, "dense ratio {dense}");
    assert!(lsh <= 1.5, "lsh ratio {lsh}");
}

#[test]
fn criterion_8_duplication_task() {
    let _g = serial();
    let t = Instant::now();
    let presets = ["desk-dup-full", "desk-dup-lsh1", "desk-dup-lsh2", "desk-dup-lsh4"];
    let mut models = Vec::new();
    let mut steps = Vec::new();
    for name in presets {
        let mut cfg = trainer::preset(name).unwrap().with_seed(1);
        cfg.eval_settings = vec![EvalSetting::of_model(&cfg.model)];
        let outcome = trainer::train::<f32>(&cfg, None, &mut |_| Ok(())).unwrap();
        steps.push(outcome.checkpoint.step);
        models.push(outcome.checkpoint.model);
    }
    let settings = [EvalSetting::Full, EvalSetting::Lsh(1), EvalSetting::Lsh(2), EvalSetting::Lsh(4), EvalSetting::Lsh(8)];
    let refs: Vec<&Model<f32>> = models.iter().collect();
    let cells = eval_matrix(&refs, &settings, &DupConfig { seed: 1, ..Default::default() }, 20, 32).unwrap();
    let acc = |model: usize, s: usize| cells[model * settings.len() + s].accuracy;

    let full_ok = acc(0, 0) >= 0.99;
    let lsh4_ok = acc(3, 4) >= 0.95;
    let monotone = (1..4).all(|m| (1..4).all(|s| acc(m, s + 1) >= acc(m, s) - 0.01));
    let drop = acc(0, 0) - acc(0, 1);
    let drop_ok = drop >= 0.10;
    let pass = full_ok && lsh4_ok && monotone && drop_ok && t.elapsed().as_secs() < 7200;
    let mut table = String::new();
    for (m, name) in presets.iter().enumerate() {
        let row: Vec<String> = (0..settings.len()).map(|s| format!("{:.3}", acc(m, s))).collect();
        table.push_str(&format!(" {name}@{}steps=[{}]", steps[m], row.join(",")));
    }
    report(8, "duplication task", pass, &format!("eval [full,lsh-1,lsh-2,lsh-4,lsh-8]:{table}; full->lsh-1 drop {drop:.3}"), t);
    assert!(full_ok, "full-attention accuracy {}", acc(0, 0));
    assert!(lsh4_ok, "lsh-4 model at 8 hashes {}", acc(3, 4));
    assert!(monotone, "accuracy not nondecreasing in hash count: {table}");
    assert!(drop_ok, "full model loses only {drop} with one hash");
}

#[test]
fn criterion_9_mask_alignment_tripwire() {
    let _g = serial();
    let t = Instant::now();
    let cfg = DupConfig {
        w_len: 31,
        seed: 9,
        ..Default::default()
    };
    let b = gen_batch(&cfg, 64, 0, Split::Eval).unwrap();
    let exact = oracle_accuracy(&b, &b.mask, cfg.w_len).unwrap();
    // One position early: the mask then covers the last symbol of the first
    // word, which nothing earlier in the sequence determines.
    let mut shifted = b.mask.clone();
    shifted.rotate_left(1);
    let off = oracle_accuracy(&b, &shifted, cfg.w_len).unwrap();
    let pass = exact == 1.0 && off < 1.0 && t.elapsed().as_secs_f64() < 1.0;
    report(9, "mask alignment tripwire", pass, &format!("oracle={exact} shifted={off:.4}"), t);
    assert_eq!(exact, 1.0);
    assert!(off < 1.0);
}

/// Long run at paper scale; takes days on a CPU.
#[test]
#[ignore]
fn criterion_10_paper_scale_matrix() {
    let _g = serial();
    let t = Instant::now();
    let presets = ["paper-dup-full", "paper-dup-lsh1", "paper-dup-lsh2", "paper-dup-lsh4"];
    let mut models = Vec::new();
    for name in presets {
        let cfg = trainer::preset(name).unwrap().with_seed(1);
        models.push(trainer::train::<f32>(&cfg, None, &mut |_| Ok(())).unwrap().checkpoint.model);
    }
    let settings = [EvalSetting::Full, EvalSetting::Lsh(8), EvalSetting::Lsh(4), EvalSetting::Lsh(2), EvalSetting::Lsh(1)];
    let refs: Vec<&Model<f32>> = models.iter().collect();
    let cells = eval_matrix(&refs, &settings, &DupConfig::paper(), 10, 8).unwrap();
    let full_row: Vec<f64> = cells[..5].iter().map(|c| c.accuracy).collect();
    let ordered = full_row.windows(2).all(|w| w[0] >= w[1]);
    let diagonal = [(0, 0), (1, 4), (2, 3), (3, 2)].iter().all(|&(m, s)| cells[m * 5 + s].accuracy >= 0.95);
    report(10, "paper-scale matrix", ordered && diagonal, &format!("full row {full_row:?}"), t);
    assert!(ordered && diagonal);
}
