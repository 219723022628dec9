//! Acceptance suite. Every criterion prints one `PASS` or `FAIL` line with
//! its measurement and wall time; the process exits non-zero if any fails.
//!
//! Run alone with `cargo test -p dancecca --test acceptance`.

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dancecca::audiofeat::MelExtractor;
use dancecca::config::RunConfig;
use dancecca::dcca::{dcca_loss_and_gradient, fit_linear_cca};
use dancecca::features::segment_features;
use dancecca::ingest::{Point, PoseTrack};
use dancecca::nnet::{
    tanh_backward, tanh_forward, AvgPool2d, BatchNorm, BatchNormConfig, Branch, Conv2d, Gru, LayerSpec, Mode, Tensor,
};
use dancecca::pipeline::{self, ClipFeatures};
use dancecca::posefeat::{
    compute_scale, derive_movement_features, normalize_track, AnkleStats, AnkleTolerance, NormalizationParams,
    TargetFrameStats,
};
use dancecca::report::RetrievalReport;
use dancecca::retrieval::{
    binomial_pvalue, class_map, pair_accuracy, permutation_test_map, random_map_baseline, rank_accuracy,
    similarity_matrix,
};
use dancecca::synth::{generate_dataset, generate_gaussian_views, generate_object, SynthConfig};

type Outcome = Result<String, String>;

struct Criterion {
    name: &'static str,
    budget: Duration,
    run: fn() -> Outcome,
}

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn quiet_config(dir: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.paths.cache_dir = dir.join("cache");
    cfg.paths.manifest = dir.join("manifest.tsv");
    cfg.eval.runs = 1;
    cfg
}

// ---------------------------------------------------------------- architecture

fn architecture() -> Outcome {
    let bn = BatchNormConfig::default();
    let audio = Branch::audio(bn, 0);
    let movement = Branch::movement(bn, 0);
    // Rows of the published layer tables; activations are not listed there.
    let audio_table: Vec<(&str, Vec<usize>, usize)> = vec![
        ("batch_norm", vec![39, 128, 1], 4),
        ("conv2d", vec![39, 128, 8], 200),
        ("avg_pool2d", vec![13, 16, 8], 0),
        ("batch_norm", vec![13, 16, 8], 32),
        ("conv2d", vec![13, 16, 16], 2064),
        ("avg_pool2d", vec![3, 4, 16], 0),
        ("batch_norm", vec![3, 4, 16], 64),
        ("conv2d", vec![3, 4, 32], 6176),
        ("avg_pool2d", vec![1, 1, 32], 0),
        ("batch_norm", vec![1, 1, 32], 128),
        ("conv2d", vec![1, 1, 128], 4224),
    ];
    let movement_table: Vec<(&str, Vec<usize>, usize)> =
        vec![("batch_norm", vec![30, 119], 476), ("gru", vec![32], 14688)];
    let rows = |b: &Branch| -> Vec<(String, Vec<usize>, usize)> {
        b.count_parameters()
            .layers
            .into_iter()
            .filter(|l| l.kind != "tanh")
            .map(|l| (l.kind, l.shape, l.params))
            .collect()
    };
    let same = |got: &[(String, Vec<usize>, usize)], want: &[(&str, Vec<usize>, usize)]| {
        got.len() == want.len() && got.iter().zip(want).all(|(g, w)| g.0 == w.0 && g.1 == w.1 && g.2 == w.2)
    };
    let (ta, tm) = (audio.count_parameters().total, movement.count_parameters().total);
    let ok = ta == 12_892
        && tm == 15_164
        && same(&rows(&audio), &audio_table)
        && same(&rows(&movement), &movement_table)
        && audio.shape_trace()[0] == vec![39, 128, 1]
        && movement.shape_trace()[0] == vec![30, 119];
    ensure(ok, format!("audio {ta} params, movement {tm} params, per-layer rows and shapes checked"))
}

// ---------------------------------------------------------------- features

fn feature_arithmetic() -> Outcome {
    let t = Instant::now();
    let cfg = RunConfig::default();
    let (clip, track, _) = generate_object(&SynthConfig::default(), 0).map_err(|e| e.to_string())?;
    let seconds = clip.samples.len() as f64 / clip.sample_rate as f64;
    let mel = MelExtractor::new(&cfg.mel).map_err(|e| e.to_string())?;
    let spec = mel.compute(&clip).map_err(|e| e.to_string())?;
    let audio_segs = segment_features(&spec, 39, 20).map_err(|e| e.to_string())?;
    let moves = derive_movement_features(&track);
    let move_segs = segment_features(&moves, 30, 15).map_err(|e| e.to_string())?;
    let a = audio_segs.segment(0);
    let m = move_segs.segment(0);
    let ok = seconds == 10.0
        && clip.sample_rate == 16_000
        && spec.shape() == (399, 128)
        && audio_segs.len() == 19
        && (a.rows, a.cols) == (39, 128)
        && track.len() == 300
        && moves.shape() == (300, 119)
        && move_segs.len() == 19
        && (m.rows, m.cols) == (30, 119);
    ensure(
        ok && t.elapsed() < secs(5),
        format!(
            "{seconds} s at {} Hz -> {:?} log-mel -> {} x {}x{}; {} frames -> {:?} -> {} x {}x{}",
            clip.sample_rate,
            spec.shape(),
            audio_segs.len(),
            a.rows,
            a.cols,
            track.len(),
            moves.shape(),
            move_segs.len(),
            m.rows,
            m.cols
        ),
    )
}

// ---------------------------------------------------------------- gradients

const FD_STEP: f64 = 1e-3;
const FD_TOL: f64 = 1e-4;

fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(n.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Central differences of `f` with respect to every entry of `x`.
fn numeric(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut v = x.to_vec();
    (0..x.len())
        .map(|i| {
            v[i] = x[i] + FD_STEP;
            let up = f(&v);
            v[i] = x[i] - FD_STEP;
            let down = f(&v);
            v[i] = x[i];
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: Vec<(String, f64)> = Vec::new();
    let mut record = |name: &str, e: f64| worst.push((name.to_string(), e));

    // Conv2d, with an even kernel so the asymmetric padding is covered.
    {
        let shape = vec![2, 5, 6, 3];
        let x = random_vec(&mut rng, shape.iter().product());
        let conv = Conv2d::new("c", [3, 2], 3, 4, &mut rng);
        let w = random_vec(&mut rng, 2 * 5 * 6 * 4);
        let (_, cache) = conv.forward(&Tensor::new(shape.clone(), x.clone()));
        let (dx, dp) = conv.backward(&cache, &Tensor::new(vec![2, 5, 6, 4], w.clone()));
        let nx = numeric(&x, |v| dot(&conv.forward(&Tensor::new(shape.clone(), v.to_vec())).0.data, &w));
        record("conv2d input", rel_err(&dx.data, &nx));
        let nk = numeric(&conv.kernel.value, |v| {
            let mut c = conv.clone();
            c.kernel.value = v.to_vec();
            dot(&c.forward(&Tensor::new(shape.clone(), x.clone())).0.data, &w)
        });
        record("conv2d kernel", rel_err(&dp[0], &nk));
        let nb = numeric(&conv.bias.value, |v| {
            let mut c = conv.clone();
            c.bias.value = v.to_vec();
            dot(&c.forward(&Tensor::new(shape.clone(), x.clone())).0.data, &w)
        });
        record("conv2d bias", rel_err(&dp[1], &nb));
    }
    // Average pooling with trailing rows and columns that are dropped.
    {
        let shape = vec![2, 7, 9, 2];
        let pool = AvgPool2d { pool: [3, 4] };
        let x = random_vec(&mut rng, shape.iter().product());
        let out = pool.forward(&Tensor::new(shape.clone(), x.clone()));
        let w = random_vec(&mut rng, out.data.len());
        let dx = pool.backward(&shape, &Tensor::new(out.shape.clone(), w.clone()));
        let nx = numeric(&x, |v| dot(&pool.forward(&Tensor::new(shape.clone(), v.to_vec())).data, &w));
        record("avg_pool2d input", rel_err(&dx.data, &nx));
    }
    // Batch norm in training mode (batch statistics depend on the input).
    {
        let shape = vec![6, 3, 2];
        let mut bn = BatchNorm::new("b", 2, BatchNormConfig::default());
        bn.gamma.value = vec![1.3, -0.7];
        bn.beta.value = vec![0.2, 0.1];
        let x = random_vec(&mut rng, shape.iter().product());
        let w = random_vec(&mut rng, x.len());
        let (_, cache, _) = bn.forward(&Tensor::new(shape.clone(), x.clone()), Mode::Train);
        let (dx, dp) = bn.backward(&cache, &Tensor::new(shape.clone(), w.clone()));
        let f = |b: &BatchNorm, v: &[f64]| dot(&b.forward(&Tensor::new(shape.clone(), v.to_vec()), Mode::Train).0.data, &w);
        record("batch_norm input", rel_err(&dx.data, &numeric(&x, |v| f(&bn, v))));
        let ng = numeric(&bn.gamma.value, |v| {
            let mut b = bn.clone();
            b.gamma.value = v.to_vec();
            f(&b, &x)
        });
        record("batch_norm gamma", rel_err(&dp[0], &ng));
        let nb = numeric(&bn.beta.value, |v| {
            let mut b = bn.clone();
            b.beta.value = v.to_vec();
            f(&b, &x)
        });
        record("batch_norm beta", rel_err(&dp[1], &nb));
    }
    // tanh
    {
        let x = random_vec(&mut rng, 12);
        let w = random_vec(&mut rng, 12);
        let y = tanh_forward(&Tensor::new(vec![3, 4], x.clone()));
        let dx = tanh_backward(&y, &Tensor::new(vec![3, 4], w.clone()));
        let nx = numeric(&x, |v| dot(&tanh_forward(&Tensor::new(vec![3, 4], v.to_vec())).data, &w));
        record("tanh input", rel_err(&dx.data, &nx));
    }
    // GRU, last hidden state.
    {
        let shape = vec![2, 5, 4];
        let mut gru = Gru::new("g", 4, 3, &mut rng);
        gru.bias.value = random_vec(&mut rng, gru.bias.len());
        let x = random_vec(&mut rng, shape.iter().product());
        let w = random_vec(&mut rng, 2 * 3);
        let f = |g: &Gru, v: &[f64]| dot(&g.forward(&Tensor::new(shape.clone(), v.to_vec())).unwrap().0.data, &w);
        let (_, cache) = gru.forward(&Tensor::new(shape.clone(), x.clone())).map_err(|e| e.to_string())?;
        let (dx, dp) = gru.backward(&cache, &Tensor::new(vec![2, 3], w.clone()));
        record("gru input", rel_err(&dx.data, &numeric(&x, |v| f(&gru, v))));
        let names = ["gru kernel", "gru recurrent kernel", "gru bias"];
        for (i, name) in names.iter().enumerate() {
            let base = [&gru.kernel, &gru.recurrent, &gru.bias][i].value.clone();
            let n = numeric(&base, |v| {
                let mut g = gru.clone();
                [&mut g.kernel, &mut g.recurrent, &mut g.bias][i].value = v.to_vec();
                f(&g, &x)
            });
            record(name, rel_err(&dp[i], &n));
        }
    }
    // A small branch through the fused conv/tanh/pool path, all parameters.
    {
        use LayerSpec::*;
        let specs = [
            BatchNorm,
            Conv2d { filters: 3, kernel: [3, 2] },
            Tanh,
            AvgPool2d { pool: [2, 2] },
            BatchNorm,
            Conv2d { filters: 2, kernel: [1, 1] },
            Tanh,
        ];
        let mut branch = Branch::build("t", &[6, 4, 1], &specs, BatchNormConfig::default(), 5).map_err(|e| e.to_string())?;
        for p in branch.trainable_mut() {
            for v in &mut p.value {
                *v += rng.random_range(-0.3..0.3);
            }
        }
        let x = random_vec(&mut rng, 5 * 6 * 4);
        let w = random_vec(&mut rng, 5 * branch.output_dim());
        let input = |v: &[f64]| Tensor::new(vec![5, 6, 4, 1], v.to_vec());
        let f = |b: &Branch, v: &[f64]| dot(&b.forward(&input(v), Mode::Train).unwrap().output.data, &w);
        let pass = branch.forward(&input(&x), Mode::Train).map_err(|e| e.to_string())?;
        let g = branch.backward(&pass, &Tensor::new(vec![5, branch.output_dim()], w.clone()));
        record("branch input", rel_err(&g.input.data, &numeric(&x, |v| f(&branch, v))));
        let count = branch.trainable().len();
        for i in 0..count {
            let base = branch.trainable()[i].value.clone();
            let name = branch.trainable()[i].name.clone();
            let n = numeric(&base, |v| {
                let mut b = branch.clone();
                b.trainable_mut()[i].value = v.to_vec();
                f(&b, &x)
            });
            record(&name, rel_err(&g.params[i], &n));
        }
    }
    // DCCA loss with respect to both views.
    {
        let (n, dx_, dy_) = (40, 4, 3);
        let x = DMatrix::from_fn(n, dx_, |_, _| rng.random_range(-1.0..1.0));
        let y = DMatrix::from_fn(n, dy_, |i, j| x[(i, j % dx_)] * 0.5 + rng.random_range(-1.0..1.0));
        let r = 1e-3;
        let (_, gx, gy) = dcca_loss_and_gradient(&x, &y, r).map_err(|e| e.to_string())?;
        let loss = |a: &DMatrix<f64>, b: &DMatrix<f64>| dcca_loss_and_gradient(a, b, r).unwrap().0;
        let nx = numeric(x.as_slice(), |v| loss(&DMatrix::from_column_slice(n, dx_, v), &y));
        let ny = numeric(y.as_slice(), |v| loss(&x, &DMatrix::from_column_slice(n, dy_, v)));
        record("dcca view x", rel_err(gx.as_slice(), &nx));
        record("dcca view y", rel_err(gy.as_slice(), &ny));
    }

    let (name, max) = worst
        .iter()
        .cloned()
        .fold((String::new(), 0.0), |a, b| if b.1 > a.1 { b } else { a });
    ensure(
        max <= FD_TOL,
        format!("{} gradient blocks checked, worst relative error {max:.2e} ({name})", worst.len()),
    )
}

// ---------------------------------------------------------------- CCA

fn cca() -> Outcome {
    let planted = [0.9, 0.5, 0.0];
    let (x, y) = generate_gaussian_views(10_000, 6, 5, &planted, 3).map_err(|e| e.to_string())?;
    let model = fit_linear_cca(&x, &y, 3, 1e-8).map_err(|e| e.to_string())?;
    let worst = model.corrs.iter().zip(&planted).map(|(c, p)| (c - p).abs()).fold(0.0, f64::max);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 500;
    let a: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let b: Vec<f64> = a.iter().map(|v| 0.6 * v + rng.random_range(-1.0..1.0)).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (ma, mb) = (mean(&a), mean(&b));
    let sab: f64 = a.iter().zip(&b).map(|(p, q)| (p - ma) * (q - mb)).sum();
    let saa: f64 = a.iter().map(|p| (p - ma).powi(2)).sum();
    let sbb: f64 = b.iter().map(|q| (q - mb).powi(2)).sum();
    let pearson = sab / (saa * sbb).sqrt();
    let one = fit_linear_cca(
        &DMatrix::from_column_slice(n, 1, &a),
        &DMatrix::from_column_slice(n, 1, &b),
        1,
        1e-14,
    )
    .map_err(|e| e.to_string())?;
    let d1 = (one.corrs[0] - pearson).abs();
    ensure(
        worst <= 0.05 && d1 <= 1e-10,
        format!(
            "fitted {:.4?} vs planted {planted:?} (max dev {worst:.4}); 1-D |r - pearson| = {d1:.1e}",
            model.corrs
        ),
    )
}

// ---------------------------------------------------------------- metrics

fn oracle_cos(a: &[f64], b: &[f64]) -> f64 {
    let mut ab = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for i in 0..a.len() {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    ab / (aa.sqrt() * bb.sqrt())
}

/// Position of candidate `c` in query `q`'s list: count everything that
/// sorts strictly ahead of it.
fn oracle_position(row: &[f64], ids: &[String], c: usize) -> usize {
    (0..row.len())
        .filter(|&j| row[j] > row[c] || (row[j] == row[c] && ids[j] < ids[c]))
        .count()
}

fn metric_oracles() -> Outcome {
    let n = 10;
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let emb = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> { (0..n).map(|_| random_vec(rng, 6)).collect() };
    let (qa, cb) = (emb(&mut rng), emb(&mut rng));
    let ids: Vec<String> = (0..n).map(|i| format!("obj{i:02}")).collect();
    let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
    let sim = similarity_matrix(&qa, &cb);
    let mut err: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            err = err.max((sim[i][j] - oracle_cos(&qa[i], &cb[j])).abs());
        }
    }
    // Pair accuracy by enumerating every ordered pair.
    let mut hits = 0;
    for i in 0..n {
        for j in 0..n {
            if i != j && sim[i][i] > sim[i][j] && sim[j][j] > sim[j][i] {
                hits += 1;
            }
        }
    }
    let pair = pair_accuracy(&sim).map_err(|e| e.to_string())?;
    err = err.max((pair.score - hits as f64 / (n * (n - 1)) as f64).abs());
    // Rank accuracy from explicit positions.
    let rank = rank_accuracy(&sim, &ids).map_err(|e| e.to_string())?;
    let mut ra = 0.0;
    for i in 0..n {
        let pos = oracle_position(&sim[i], &ids, i);
        ra += 1.0 - pos as f64 / (n - 1) as f64;
    }
    err = err.max((rank.score - ra / n as f64).abs());
    // AP from precision at each relevant position.
    let map = class_map(&sim, &labels, &labels, &ids).map_err(|e| e.to_string())?;
    let mut seen = [0usize; 3];
    for q in 0..n {
        let c = labels[q];
        let relevant: Vec<usize> = (0..n).filter(|&j| labels[j] == c).collect();
        let positions: Vec<usize> = relevant.iter().map(|&j| oracle_position(&sim[q], &ids, j) + 1).collect();
        let ap = positions
            .iter()
            .map(|&p| positions.iter().filter(|&&o| o <= p).count() as f64 / p as f64)
            .sum::<f64>()
            / relevant.len() as f64;
        err = err.max((map.per_class[&c].ap[seen[c]] - ap).abs());
        seen[c] += 1;
    }
    ensure(
        err <= 1e-12,
        format!("cosine, pair {:.4}, rank {:.4}, per-query AP: max |diff| = {err:.1e}", pair.score, rank.score),
    )
}

// ---------------------------------------------------------------- significance

/// Exact binomial upper tail in log space, independent of the library's code.
fn oracle_tail(k: u64, n: u64, p: f64) -> f64 {
    let ln_choose = |n: u64, r: u64| -> f64 { (1..=r).map(|i| ((n - r + i) as f64).ln() - (i as f64).ln()).sum() };
    (k..=n)
        .map(|i| (ln_choose(n, i) + i as f64 * p.ln() + (n - i) as f64 * (1.0 - p).ln()).exp())
        .sum()
}

fn significance() -> Outcome {
    let mut binom_err: f64 = 0.0;
    for n in 1..=40u64 {
        let p = binomial_pvalue(n, n, 0.5);
        binom_err = binom_err.max((p - 0.5f64.powi(n as i32)).abs() / 0.5f64.powi(n as i32));
    }
    for (k, n) in [(82u64, 144u64), (30, 50), (10, 20), (3, 4)] {
        let want = oracle_tail(k, n, 0.25);
        binom_err = binom_err.max((binomial_pvalue(k, n, 0.25) - want).abs() / want);
    }
    let strong = binomial_pvalue(82, 144, 0.25);

    // Permutation p-values for embeddings with no class structure.
    let mut ps = Vec::new();
    for rep in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + rep);
        let n = 20;
        let q: Vec<Vec<f64>> = (0..n).map(|_| random_vec(&mut rng, 8)).collect();
        let c: Vec<Vec<f64>> = (0..n).map(|_| random_vec(&mut rng, 8)).collect();
        let labels: Vec<usize> = (0..n).map(|i| i % 4).collect();
        let ids: Vec<String> = (0..n).map(|i| format!("o{i:02}")).collect();
        let sim = similarity_matrix(&q, &c);
        let r = permutation_test_map(&sim, &labels, &labels, &ids, 1000, rep).map_err(|e| e.to_string())?;
        ps.push(r.average);
    }
    ps.sort_by(f64::total_cmp);
    let median = (ps[9] + ps[10]) / 2.0;
    let ks = ps
        .iter()
        .enumerate()
        .map(|(i, &p)| ((i + 1) as f64 / 20.0 - p).max(p - i as f64 / 20.0))
        .fold(0.0, f64::max);
    // Critical Kolmogorov-Smirnov distance for n = 20 at the 1% level.
    let ks_crit = 0.356;

    let base = random_map_baseline(&[0, 1], 100_000, 0).map_err(|e| e.to_string())?;
    let b0 = base.per_class[&0].mean;
    ensure(
        binom_err <= 1e-9 && strong < 1e-12 && (0.2..=0.8).contains(&median) && ks < ks_crit && b0 == 0.75,
        format!(
            "binomial rel err {binom_err:.1e}, 82/144 p = {strong:.1e}; permutation median p {median:.3}, KS D {ks:.3} < {ks_crit}; 1-of-2 baseline {b0}"
        ),
    )
}

// ---------------------------------------------------------------- null model

fn synth_and_extract(dir: &Path, objects: usize, noise: f64) -> Result<(RunConfig, dancecca::ingest::DatasetManifest), String> {
    let sc = SynthConfig {
        n_objects: objects,
        latent_dim: 8,
        noise_sigma: noise,
        styles: 4,
        seed: 0,
    };
    let ds = generate_dataset(&sc, dir).map_err(|e| e.to_string())?;
    let mut cfg = quiet_config(dir);
    cfg.paths.manifest = ds.manifest_path.clone();
    let s = pipeline::extract(&cfg, &ds.manifest).map_err(|e| e.to_string())?;
    if !s.failures.is_empty() {
        return Err(format!("extraction failures: {:?}", s.failures));
    }
    Ok((cfg, ds.manifest))
}

/// Moderate noise: per-frame noise of the same order as the shared latent.
const E2E_NOISE: f64 = 1.0;

fn null_calibration() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (mut cfg, manifest) = synth_and_extract(dir.path(), 100, E2E_NOISE)?;
    let folds = pipeline::folds_for(&cfg, &manifest).map_err(|e| e.to_string())?;
    let target = pipeline::load_target(&cfg.paths.cache_dir).map_err(|e| e.to_string())?;
    let mut per_seed = Vec::new();
    for seed in 0..10u64 {
        cfg.train.seed = seed;
        let (mut pair, mut rank, mut count) = (0.0, 0.0, 0.0);
        for fold in 0..cfg.eval.folds {
            let train: Vec<ClipFeatures> =
                pipeline::load_clips(&cfg, &manifest, &folds.train_ids(fold)).map_err(|e| e.to_string())?;
            let test = pipeline::load_clips(&cfg, &manifest, &folds.test_ids(fold)).map_err(|e| e.to_string())?;
            let ckpt = pipeline::untrained_model(&cfg, &train, fold, 0, &target).map_err(|e| e.to_string())?;
            let report = pipeline::evaluate(&cfg, &[ckpt], &test, &folds, fold).map_err(|e| e.to_string())?;
            for d in &report.directions {
                pair += d.pair.score;
                rank += d.rank.score;
                count += 1.0;
            }
        }
        per_seed.push((pair / count, rank / count));
    }
    let pair = per_seed.iter().map(|p| p.0).sum::<f64>() / per_seed.len() as f64;
    let rank = per_seed.iter().map(|p| p.1).sum::<f64>() / per_seed.len() as f64;
    let spread = per_seed.iter().map(|p| p.0).fold((f64::MAX, f64::MIN), |(lo, hi), v| (lo.min(v), hi.max(v)));
    ensure(
        (pair - 0.25).abs() <= 0.05 && (rank - 0.5).abs() <= 0.05,
        format!(
            "100 objects, 4 folds, 10 seeds: pair {pair:.3} (per-seed {:.3}..{:.3}), rank {rank:.3}",
            spread.0, spread.1
        ),
    )
}

// ---------------------------------------------------------------- end to end

fn end_to_end() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (mut cfg, manifest) = synth_and_extract(dir.path(), 200, E2E_NOISE)?;
    cfg.train.epochs = 10;
    let ckpt = pipeline::train_fold(&cfg, &manifest, 0, 0, false).map_err(|e| e.to_string())?;
    let losses = ckpt.meta.loss_history.clone();
    let report = pipeline::evaluate_fold(&cfg, &manifest, &[ckpt], 0).map_err(|e| e.to_string())?;
    let mut ok = true;
    let mut parts = Vec::new();
    for d in &report.directions {
        let map_p = d.average.p_value.unwrap_or(1.0);
        ok &= d.pair.score >= 0.5
            && d.rank.score >= 0.65
            && d.pair.p_value < 0.01
            && d.rank.p_value < 0.01
            && d.average.map > d.average.baseline
            && map_p < 0.05;
        parts.push(format!(
            "{}: pair {:.3} (p {:.1e}), rank {:.3} (p {:.1e}), MAP {:.3} vs baseline {:.3} (perm p {:.1e})",
            d.direction, d.pair.score, d.pair.p_value, d.rank.score, d.rank.p_value, d.average.map, d.average.baseline, map_p
        ));
    }
    let decreasing = losses.windows(2).all(|w| w[1] < w[0]);
    parts.push(format!(
        "loss {:.3} -> {:.3} over {} epochs, strictly decreasing: {decreasing}",
        losses[0],
        losses[losses.len() - 1],
        losses.len()
    ));
    ensure(ok, parts.join("; "))
}

// ---------------------------------------------------------------- normalization

fn translated(track: &PoseTrack, dx: f64, dy: f64) -> PoseTrack {
    let mut t = track.clone();
    for f in &mut t.frames {
        for p in &mut f.points {
            *p = Point::new(p.x + dx, p.y + dy);
        }
    }
    t
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn normalization() -> Outcome {
    let tol = AnkleTolerance::default();
    let sc = SynthConfig::default();
    let tracks: Vec<PoseTrack> = (0..60)
        .map(|i| generate_object(&sc, i).map(|o| o.1))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let target = tracks
        .iter()
        .find_map(|t| TargetFrameStats::from_track(t, &tol).ok())
        .ok_or("no usable target")?;
    let params = NormalizationParams { tolerance: tol, target };
    let (mut centered, mut worst_shift) = (0, 0.0f64);
    for t in &tracks {
        let a = normalize_track(t, &params).map_err(|e| e.to_string())?.track;
        let xs: Vec<f64> = a.frames.iter().map(|f| f.mean_ankle().x).collect();
        let ys: Vec<f64> = a.frames.iter().map(|f| f.mean_ankle().y).collect();
        if median(xs) == 0.0 && median(ys) == 0.0 {
            centered += 1;
        }
        let b = normalize_track(&translated(t, 50.0, 30.0), &params).map_err(|e| e.to_string())?.track;
        for (fa, fb) in a.frames.iter().zip(&b.frames) {
            for (pa, pb) in fa.points.iter().zip(&fb.points) {
                worst_shift = worst_shift.max((pa.x - pb.x).abs()).max((pa.y - pb.y).abs());
            }
        }
    }
    let stats = |clo: f64, far: f64, avg: f64| AnkleStats { clo, med: (clo + far) / 2.0, far, avg };
    let tgt = |heig_clo: f64, heig_far: f64| TargetFrameStats {
        heig_clo,
        heig_far,
        ankle: stats(600.0, 400.0, 500.0),
    };
    let s_same = compute_scale(&stats(600.0, 400.0, 450.0), (180.0, 120.0), &tgt(180.0, 120.0)).map_err(|e| e.to_string())?;
    let s_double = compute_scale(&stats(600.0, 400.0, 400.0), (180.0, 120.0), &tgt(360.0, 240.0)).map_err(|e| e.to_string())?;
    let s_mid = compute_scale(&stats(600.0, 400.0, 500.0), (100.0, 100.0), &tgt(400.0, 200.0)).map_err(|e| e.to_string())?;
    ensure(
        centered == tracks.len() && worst_shift <= 1e-9 && s_same == 1.0 && s_double == 2.0 && s_mid == 3.0,
        format!(
            "{centered}/{} tracks centered exactly; translation by (50, 30) moves outputs by at most {worst_shift:.1e}; scales {s_same}, {s_double}, {s_mid}",
            tracks.len()
        ),
    )
}

// ---------------------------------------------------------------- determinism

fn pipeline_hashes(dir: &Path) -> Result<(String, String), String> {
    let (mut cfg, manifest) = synth_and_extract(dir, 40, E2E_NOISE)?;
    cfg.train.epochs = 2;
    let ckpt = pipeline::train_fold(&cfg, &manifest, 0, 0, false).map_err(|e| e.to_string())?;
    let ckpt_hash = ckpt.save(&dir.join("run0.ckpt")).map_err(|e| e.to_string())?;
    let reloaded = dancecca::checkpoint::Checkpoint::load(&dir.join("run0.ckpt")).map_err(|e| e.to_string())?;
    let report = pipeline::evaluate_fold(&cfg, &manifest, &[reloaded], 0).map_err(|e| e.to_string())?;
    let report_hash = report.save(&dir.join("report.toml")).map_err(|e| e.to_string())?;
    let back = RetrievalReport::load(&dir.join("report.toml")).map_err(|e| e.to_string())?;
    if back != report {
        return Err("report does not round-trip".into());
    }
    Ok((ckpt_hash, report_hash))
}

fn determinism() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ha = pipeline_hashes(a.path())?;
    let hb = pipeline_hashes(b.path())?;
    ensure(
        ha == hb,
        format!("checkpoint {} / {}, report {} / {}", &ha.0[..12], &hb.0[..12], &ha.1[..12], &hb.1[..12]),
    )
}

// ---------------------------------------------------------------- main

fn main() -> ExitCode {
    let criteria = [
        Criterion { name: "architecture fidelity", budget: secs(1), run: architecture },
        Criterion { name: "feature arithmetic", budget: secs(5), run: feature_arithmetic },
        Criterion { name: "gradient correctness", budget: secs(60), run: gradients },
        Criterion { name: "CCA correctness", budget: secs(30), run: cca },
        Criterion { name: "metric oracles", budget: secs(10), run: metric_oracles },
        Criterion { name: "significance machinery", budget: secs(60), run: significance },
        Criterion { name: "null calibration", budget: secs(300), run: null_calibration },
        Criterion { name: "end-to-end signal recovery", budget: secs(900), run: end_to_end },
        Criterion { name: "normalization properties", budget: secs(60), run: normalization },
        Criterion { name: "determinism", budget: secs(300), run: determinism },
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for c in &criteria {
        if !filter.is_empty() && !filter.iter().any(|f| c.name.contains(f.as_str())) {
            continue;
        }
        let t = Instant::now();
        let outcome = (c.run)();
        let took = t.elapsed();
        let (status, detail) = match outcome {
            Ok(d) if took <= c.budget => ("PASS", d),
            Ok(d) => ("FAIL", format!("{d}; over the {:?} budget", c.budget)),
            Err(d) => ("FAIL", d),
        };
        if status == "FAIL" {
            failed += 1;
        }
        println!("{status} {}: {detail} [{:.1} s]", c.name, took.as_secs_f64());
    }
    println!(
        "INFO documented expectation (not enforced): a reconstructed 592-pair dataset should give pair ~0.57, rank ~0.75, overall MAP ~0.26-0.28, ballet and waltz strongest (~0.36-0.43)"
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criterion/criteria failed");
        ExitCode::FAILURE
    }
}
