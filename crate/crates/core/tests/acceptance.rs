//! Acceptance checks, one output line per criterion.
//!
//! Criteria 6 and 7 always run. Criteria 1 to 3 need real datasets:
//! `CTRKIT_FRAPPE_DIR` and `CTRKIT_MOVIELENS_DIR` point at directories that
//! `DataDir::load` understands. Criteria 4 and 5 train many synthetic models
//! and run only with `CTRKIT_ACCEPTANCE_FULL=1` (use `--release`).

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use ctrkit::autodiff::{grad_check, Array, Graph, Var};
use ctrkit::bench::{run_bench, BenchConfig};
use ctrkit::data::{gen_synthetic, synthetic_vocab, DataDir, EncodedDataset, FieldSchema, FieldSpec, SynthConfig};
use ctrkit::metrics::{auc, welch_t};
use ctrkit::sce::{
    exact_sce, optimize_weights, sample_rff_bank, sce_statistic, weighted_cov, GlobalMemory, SceConfig,
};
use ctrkit::streams::StreamKind;
use ctrkit::train::{evaluate, fit, weighted_bce_loss, Model, Preset, TrainConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

enum Outcome {
    Pass(String),
    Fail(String),
    NotRun(String),
}

type Check = Result<String, String>;

fn outcome(check: Check) -> Outcome {
    match check {
        Ok(d) => Outcome::Pass(d),
        Err(d) => Outcome::Fail(d),
    }
}

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn full_mode() -> bool {
    std::env::var("CTRKIT_ACCEPTANCE_FULL").is_ok_and(|v| v == "1")
}

fn dataset_dir(var: &str) -> Option<PathBuf> {
    std::env::var_os(var).map(PathBuf::from).filter(|p| p.is_dir())
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn sd(x: &[f64]) -> f64 {
    let m = mean(x);
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() as f64 - 1.0)).sqrt()
}

// ---------------------------------------------------------------------------
// real datasets

struct Loaded {
    data: DataDir,
    test: EncodedDataset,
}

fn load(dir: &PathBuf, seed: u64) -> Result<Loaded, String> {
    let data = DataDir::load(dir, seed).map_err(|e| e.to_string())?;
    let test = data.test.clone().ok_or_else(|| format!("{} has no test split", dir.display()))?;
    Ok(Loaded { data, test })
}

fn train_and_test(l: &Loaded, cfg: &TrainConfig) -> Result<(f64, f64), String> {
    let r = fit(&l.data.train, &l.data.val, l.data.vocab.schema(), l.data.vocab.schema_hash(), cfg)
        .map_err(|e| e.to_string())?;
    evaluate(&r.model, &l.test).map_err(|e| e.to_string())
}

fn single_dataset(var: &str, preset: Preset, min_auc: f64, max_logloss: Option<f64>) -> Outcome {
    let Some(dir) = dataset_dir(var) else {
        return Outcome::NotRun(format!("{} not set", var));
    };
    let run = || -> Check {
        let l = load(&dir, 0)?;
        let cfg = TrainConfig {
            preset: Some(preset),
            ..TrainConfig::default()
        };
        let (a, ll) = train_and_test(&l, &cfg)?;
        let detail = format!("auc {:.4}, logloss {:.4}", a, ll);
        ensure(a >= min_auc, format!("{} below {}", detail, min_auc))?;
        if let Some(m) = max_logloss {
            ensure(ll <= m, format!("{} above {}", detail, m))?;
        }
        Ok(detail)
    };
    outcome(run())
}

fn criterion_3() -> Outcome {
    let Some(dir) = dataset_dir("CTRKIT_FRAPPE_DIR") else {
        return Outcome::NotRun("CTRKIT_FRAPPE_DIR not set".into());
    };
    let run = || -> Check {
        let (mut full, mut base) = (Vec::new(), Vec::new());
        for seed in 0..5 {
            let l = load(&dir, seed)?;
            let cfg = TrainConfig {
                preset: Some(Preset::Frappe),
                seed,
                ..TrainConfig::default()
            };
            full.push(train_and_test(&l, &cfg)?.0);
            let baseline = TrainConfig {
                stream_deep: StreamKind::Mlp,
                stream_shallow: StreamKind::Mlp,
                sce_enabled: false,
                ..cfg
            };
            base.push(train_and_test(&l, &baseline)?.0);
        }
        let diff = mean(&full) - mean(&base);
        let t = welch_t(&full, &base).map_err(|e| e.to_string())?;
        let detail = format!("auc gain {:+.4}, welch p {:.4}", diff, t.p);
        ensure(diff >= 0.001 && t.p < 0.05, detail.clone())?;
        Ok(detail)
    };
    outcome(run())
}

// ---------------------------------------------------------------------------
// synthetic distribution shift

/// Reduced training budget for the synthetic experiments on a single core.
fn desk_config(seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 1024,
        learning_rate: 0.003,
        max_epochs: 6,
        patience: 2,
        sce_balancing_epochs: 2,
        sce_steps: 10,
        sce_max_pairs: 256,
        sce_lr: 100.0,
        seed,
        ..TrainConfig::default()
    }
}

struct Synth {
    train: EncodedDataset,
    val: EncodedDataset,
    test: EncodedDataset,
    schema: FieldSchema,
}

/// Default shift (correlation 0.9 in training, 0.1 at test); the last tenth
/// of the training rows validates.
fn synth(seed: u64) -> Synth {
    let cfg = SynthConfig {
        seed,
        ..SynthConfig::default()
    };
    let (tr, test) = gen_synthetic(&cfg).unwrap();
    let schema = synthetic_vocab(&cfg).unwrap().schema().clone();
    let n = tr.len();
    let cut = n - n / 10;
    Synth {
        train: tr.subset(&(0..cut).collect::<Vec<_>>()),
        val: tr.subset(&(cut..n).collect::<Vec<_>>()),
        test,
        schema,
    }
}

fn synth_auc(s: &Synth, cfg: &TrainConfig) -> Result<f64, String> {
    let r = fit(&s.train, &s.val, &s.schema, [0; 8], cfg).map_err(|e| e.to_string())?;
    Ok(evaluate(&r.model, &s.test).map_err(|e| e.to_string())?.0)
}

fn criterion_4() -> Outcome {
    if !full_mode() {
        return Outcome::NotRun("set CTRKIT_ACCEPTANCE_FULL=1".into());
    }
    let run = || -> Check {
        let (mut on, mut off) = (Vec::new(), Vec::new());
        for seed in 0..5 {
            let s = synth(seed);
            let cfg = desk_config(seed);
            on.push(synth_auc(&s, &cfg)?);
            off.push(synth_auc(
                &s,
                &TrainConfig {
                    sce_enabled: false,
                    ..cfg
                },
            )?);
            eprintln!("criterion 4 seed {}: sce {:.5} plain {:.5}", seed, on[seed as usize], off[seed as usize]);
        }
        let diff = mean(&on) - mean(&off);
        let p = welch_t(&on, &off).map_err(|e| e.to_string())?.p;
        let detail = format!("test auc gain {:+.4} over 5 seeds, welch p {:.3}", diff, p);
        ensure(diff >= 0.005, detail.clone())?;
        Ok(detail)
    };
    outcome(run())
}

fn criterion_5() -> Outcome {
    if !full_mode() {
        return Outcome::NotRun("set CTRKIT_ACCEPTANCE_FULL=1".into());
    }
    let run = || -> Check {
        let depths = [(3, 1), (1, 1), (2, 2), (3, 3)];
        let mut aucs = vec![Vec::new(); depths.len()];
        for seed in 0..3 {
            let s = synth(seed);
            for (i, &(dd, ds)) in depths.iter().enumerate() {
                let cfg = TrainConfig {
                    depth_deep: dd,
                    depth_shallow: ds,
                    ..desk_config(seed)
                };
                aucs[i].push(synth_auc(&s, &cfg)?);
            }
            eprintln!("criterion 5 seed {}: {:?}", seed, aucs.iter().map(|a| a[seed as usize]).collect::<Vec<_>>());
        }
        let means: Vec<f64> = aucs.iter().map(|a| mean(a)).collect();
        let tol = sd(&aucs[0]);
        let detail = depths
            .iter()
            .zip(&means)
            .map(|((d, s), m)| format!("({},{}) {:.4}", d, s, m))
            .collect::<Vec<_>>()
            .join(", ");
        let detail = format!("{}; seed sd {:.4}", detail, tol);
        ensure(means[1..].iter().all(|&m| m - means[0] <= tol), detail.clone())?;
        Ok(detail)
    };
    outcome(run())
}

// ---------------------------------------------------------------------------
// stream cost

fn criterion_6() -> Outcome {
    let run = || -> Check {
        let mut mins = Vec::new();
        for stream in [StreamKind::Msr, StreamKind::Sa, StreamKind::Mlp] {
            let r = run_bench(&BenchConfig {
                stream,
                ..BenchConfig::default()
            })
            .map_err(|e| e.to_string())?;
            mins.push(r.min_seconds);
        }
        let detail = format!("min of 5 reps: msr {:.3}s, sa {:.3}s, mlp {:.3}s", mins[0], mins[1], mins[2]);
        ensure(mins[0] < mins[1] && mins[1] < mins[2], detail.clone())?;
        Ok(detail)
    };
    outcome(run())
}

// ---------------------------------------------------------------------------
// numerical checks

fn normals(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn auc_brute_force() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for inst in 0..200 {
        let n = rng.random_range(2..=1000);
        let mut y: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        y[0] = 0;
        y[1] = 1;
        // half the instances use a coarse grid so ties are common
        let s: Vec<f64> = if inst % 2 == 0 {
            (0..n).map(|_| rng.random_range(0..20) as f64 / 10.0).collect()
        } else {
            normals(n, &mut rng)
        };
        let (mut wins2, mut pos, mut neg) = (0u64, 0u64, 0u64);
        for i in 0..n {
            if y[i] == 1 {
                pos += 1;
            } else {
                neg += 1;
            }
            for j in 0..n {
                if y[i] == 1 && y[j] == 0 {
                    wins2 += match s[i].partial_cmp(&s[j]).unwrap() {
                        std::cmp::Ordering::Greater => 2,
                        std::cmp::Ordering::Equal => 1,
                        std::cmp::Ordering::Less => 0,
                    };
                }
            }
        }
        let want = wins2 as f64 / (2 * pos * neg) as f64;
        let got = auc(&y, &s).map_err(|e| e.to_string())?;
        ensure(got == want, format!("auc instance {}: {} vs {}", inst, got, want))?;
    }
    Ok("auc exact on 200 instances".into())
}

fn covariance() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let n = rng.random_range(2..200);
        let u = normals(n, &mut rng);
        let v = normals(n, &mut rng);
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..3.0)).collect();
        let nf = n as f64;
        let mut suv = 0.0;
        let mut su = 0.0;
        let mut sv = 0.0;
        for i in 0..n {
            suv += w[i] * u[i] * v[i];
            su += w[i] * u[i];
            sv += w[i] * v[i];
        }
        let want = suv / nf - (su / nf) * (sv / nf);
        let got = weighted_cov(&u, &v, &w).map_err(|e| e.to_string())?;
        ensure((got - want).abs() <= 1e-12, format!("weighted cov {} vs {}", got, want))?;

        let (mu, mv) = (mean(&u), mean(&v));
        let plain = u.iter().zip(&v).map(|(a, b)| (a - mu) * (b - mv)).sum::<f64>() / nf;
        let unit = weighted_cov(&u, &v, &vec![1.0; n]).map_err(|e| e.to_string())?;
        ensure((unit - plain).abs() <= 1e-12, format!("unit-weight cov {} vs {}", unit, plain))?;
    }
    Ok("weighted covariance".into())
}

fn exact_statistic() -> Check {
    let x = [0.3, -1.2, 2.0, 0.7];
    ensure(exact_sce(&x, &x, 1.0).map_err(|e| e.to_string())? == 0.0, "sce(x, x) is not zero")?;
    let got = exact_sce(&[0.0, 1.0], &[0.0, 2.0], 1.0).map_err(|e| e.to_string())?;
    let want = 2f64.sqrt() * ((-1f64).exp() - (-2f64).exp());
    ensure((got - want).abs() <= 1e-6, format!("sce([0,1],[0,2]) = {} vs {}", got, want))?;
    Ok(format!("exact statistic {:.7}", got))
}

fn perm_quantile(x: &[f64], y: &[f64], q: f64, rng: &mut ChaCha8Rng, seeds: (u64, u64)) -> Result<(f64, f64), String> {
    let bx = sample_rff_bank(4, seeds.0).map_err(|e| e.to_string())?;
    let by = sample_rff_bank(4, seeds.1).map_err(|e| e.to_string())?;
    let w = vec![1.0; x.len()];
    let stat = sce_statistic(x, y, &w, &bx, &by).map_err(|e| e.to_string())?;
    let mut yp = y.to_vec();
    let mut null = Vec::with_capacity(200);
    for _ in 0..200 {
        yp.shuffle(rng);
        null.push(sce_statistic(x, &yp, &w, &bx, &by).map_err(|e| e.to_string())?);
    }
    null.sort_by(f64::total_cmp);
    Ok((stat, null[((null.len() as f64 * q) as usize).min(null.len() - 1)]))
}

fn dependence_detection() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = normals(200, &mut rng);
    let sq: Vec<f64> = x.iter().map(|v| v * v).collect();
    for (name, y) in [("identity", x.clone()), ("square", sq)] {
        let (stat, q99) = perm_quantile(&x, &y, 0.99, &mut rng, (7, 8))?;
        ensure(stat > q99, format!("{} dependence {} inside null q99 {}", name, stat, q99))?;
    }
    let mut inside = 0;
    for t in 0..30 {
        let x = normals(200, &mut rng);
        let y = normals(200, &mut rng);
        let (stat, q95) = perm_quantile(&x, &y, 0.95, &mut rng, (100 + t, 200 + t))?;
        if stat < q95 {
            inside += 1;
        }
    }
    ensure(inside >= 27, format!("independent pairs inside null: {} of 30", inside))?;
    Ok(format!("rff statistic separates dependence, {}/30 independent inside null", inside))
}

fn micro_model() -> (FieldSchema, TrainConfig) {
    let schema = FieldSchema {
        fields: (0..3)
            .map(|i| FieldSpec {
                name: format!("f{}", i),
                vocab_size: 4,
            })
            .collect(),
        label_column: "label".into(),
    };
    let cfg = TrainConfig {
        embedding_dim: 2,
        depth_deep: 2,
        depth_shallow: 2,
        d_out: Some(6),
        chunks: Some(1),
        batch_size: 8,
        ..TrainConfig::default()
    };
    (schema, cfg)
}

type OpFn = fn(&mut Graph, Var) -> ctrkit::Result<Var>;

fn op_cases() -> Vec<(&'static str, OpFn)> {
    vec![
        ("neg", |g, x| g.neg(x)),
        ("sigmoid", |g, x| g.sigmoid(x)),
        ("swish", |g, x| g.swish(x)),
        ("relu", |g, x| g.relu(x)),
        ("cos", |g, x| g.cos(x)),
        ("log", |g, x| {
            let s = g.sigmoid(x)?;
            g.log(s)
        }),
        ("scale", |g, x| g.scale(x, -1.7)),
        ("clamp", |g, x| g.clamp(x, -0.75, 0.75)),
        ("add", |g, x| {
            let t = g.transpose(x)?;
            let t = g.transpose(t)?;
            g.add(x, t)
        }),
        ("sub", |g, x| {
            let s = g.sigmoid(x)?;
            g.sub(x, s)
        }),
        ("mul", |g, x| g.mul(x, x)),
        ("matmul", |g, x| {
            let t = g.transpose(x)?;
            g.matmul(x, t)
        }),
        ("softmax", |g, x| g.softmax(x)),
        ("group_norm", |g, x| g.group_norm(x, 2, 1e-6)),
        ("sum", |g, x| g.sum(x, 0)),
        ("mean", |g, x| g.mean(x, 1)),
        ("concat", |g, x| {
            let s = g.sigmoid(x)?;
            g.concat(&[x, s], 1)
        }),
        ("slice", |g, x| g.slice(x, 1, 1..3)),
        ("reshape", |g, x| g.reshape(x, vec![2, 12])),
        ("gather", |g, x| g.gather(x, &[2, 0, 2, 3])),
    ]
}

fn gradients() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    // away from the kinks of relu and clamp
    let data: Vec<f64> = (0..24)
        .map(|_| {
            let m = rng.random_range(0.1..0.6) + if rng.random_bool(0.5) { 0.9 } else { 0.0 };
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    let x = Array::new(vec![4, 6], data).unwrap();
    let mut worst_op: f64 = 0.0;
    for (name, op) in op_cases() {
        // a fixed random projection keeps sum-preserving ops informative
        let shape = {
            let mut g = Graph::new();
            let xv = g.param(x.clone());
            let y = op(&mut g, xv).map_err(|e| format!("{}: {}", name, e))?;
            g.shape(y).to_vec()
        };
        let c = Array::new(shape.clone(), normals(shape.iter().product(), &mut rng)).unwrap();
        let f = |g: &mut Graph, v: Var| {
            let y = op(g, v)?;
            let cv = g.constant(c.clone());
            g.mul(y, cv)
        };
        let err = grad_check(f, &x, 1e-6).map_err(|e| e.to_string())?;
        ensure(err < 1e-4, format!("op {} relative error {:.2e}", name, err))?;
        worst_op = worst_op.max(err);
    }

    let (schema, cfg) = micro_model();
    let model = Model::new(&cfg, &schema, [0; 8]).map_err(|e| e.to_string())?;
    let idx: Vec<u32> = (0..24).map(|i| (i * 7 % 4) as u32).collect();
    let y = [1, 0, 0, 1, 1, 0, 1, 0];
    let w = [1.0, 0.5, 1.5, 1.0, 0.8, 1.2, 1.0, 1.0];
    let mut worst_model: f64 = 0.0;
    for id in model.params().ids() {
        let f = |g: &mut Graph, v: Var| {
            let p = model.bind(g).with(id, v);
            let fw = model.forward(g, &p, &idx)?;
            weighted_bce_loss(g, fw.logit, &y, &w)
        };
        let err = grad_check(f, model.params().get(id), 1e-6).map_err(|e| e.to_string())?;
        let name = &model.params().names()[id.index()];
        ensure(err < 1e-3, format!("model parameter {} relative error {:.2e}", name, err))?;
        worst_model = worst_model.max(err);
    }
    Ok(format!("gradients: ops {:.1e}, model {:.1e}", worst_op, worst_model))
}

fn reweighting() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = SceConfig {
        balancing_epochs: 1,
        seed: 1,
        ..SceConfig::default()
    };
    let x = normals(64, &mut rng);
    let data: Vec<f64> = x.iter().flat_map(|&v| [v, 2.0 * v + 1.0]).collect();
    let fm = Array::new(vec![64, 2], data).unwrap();
    let r = optimize_weights(&fm, &GlobalMemory::new(), &cfg).map_err(|e| e.to_string())?;
    let (first, last) = (r.objective[0], *r.objective.last().unwrap());
    ensure(last < first, format!("objective {} -> {}", first, last))?;

    let mut memory = GlobalMemory::new();
    for t in 0..4 {
        let fm = Array::new(vec![32, 3], normals(96, &mut rng)).unwrap();
        let r = optimize_weights(&fm, &memory, &SceConfig { seed: t, ..cfg.clone() }).map_err(|e| e.to_string())?;
        let m = mean(&r.weights);
        ensure((m - 1.0).abs() <= 1e-9, format!("mean weight {}", m))?;
        memory.update(&fm, &r.weights).map_err(|e| e.to_string())?;
    }
    Ok(format!("weight objective {:.3e} -> {:.3e}", first, last))
}

fn global_memory() -> Check {
    let batches: Vec<(Vec<f64>, Vec<f64>)> = vec![
        (vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], vec![1.0, 0.5, 1.5]),
        (vec![-1.0, 0.0, 2.0, 2.0, 8.0, -4.0], vec![0.2, 1.8, 1.0]),
        (vec![0.5, 0.5, 0.5, 0.5, 0.5, 0.5], vec![1.0, 1.0, 1.0]),
    ];
    let mut memory = GlobalMemory::new();
    let (mut zf, mut ww) = (vec![0.0; 6], vec![0.0; 3]);
    for (f, w) in &batches {
        memory.update(&Array::new(vec![3, 2], f.clone()).unwrap(), w).map_err(|e| e.to_string())?;
        zf.iter_mut().zip(f).for_each(|(z, v)| *z = 0.5 * (*z + v));
        ww.iter_mut().zip(w).for_each(|(z, v)| *z = 0.5 * (*z + v));
        let got = memory.features().ok_or("memory empty after update")?.data();
        let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-15);
        ensure(close(got, &zf) && close(memory.weights(), &ww), format!("memory {:?} vs {:?}", got, zf))?;
    }
    Ok("global memory recursion".into())
}

fn criterion_7() -> Outcome {
    let checks: [fn() -> Check; 7] = [
        auc_brute_force,
        covariance,
        exact_statistic,
        dependence_detection,
        gradients,
        reweighting,
        global_memory,
    ];
    let mut details = Vec::new();
    for c in checks {
        match c() {
            Ok(d) => details.push(d),
            Err(d) => return Outcome::Fail(d),
        }
    }
    Outcome::Pass(details.join("; "))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 7] = [
        ("frappe-quality", || single_dataset("CTRKIT_FRAPPE_DIR", Preset::Frappe, 0.978, Some(0.175))),
        ("movielens-quality", || single_dataset("CTRKIT_MOVIELENS_DIR", Preset::Movielens, 0.960, None)),
        ("gain-over-mlp-baseline", criterion_3),
        ("reweighting-under-shift", criterion_4),
        ("depth-configuration", criterion_5),
        ("stream-cost-ordering", criterion_6),
        ("numerical-correctness", criterion_7),
    ];
    let mut failed = false;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let line = match run() {
            Outcome::Pass(d) => format!("PASS ({})", d),
            Outcome::Fail(d) => {
                failed = true;
                format!("FAIL ({})", d)
            }
            Outcome::NotRun(d) => format!("NOT RUN ({})", d),
        };
        println!("criterion {} {}: {} [{:.1}s]", i + 1, name, line, t.elapsed().as_secs_f64());
    }
    if failed {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
