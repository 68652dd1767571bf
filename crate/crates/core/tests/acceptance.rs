//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if a property check fails. Benchmark criteria need the converted
//! citation datasets under `$GIL_DATA_DIR/{cora,citeseer,pubmed}` (default:
//! the repository `data/` directory); without them they report FAIL as
//! blocked and do not affect the exit status.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use gil_core::autodiff::{Tape, Var};
use gil_core::data::synthetic::{toy12, toy8, PlantedPartition};
use gil_core::data::{load_dataset_with, DatasetBundle, LoadOptions};
use gil_core::graph::{transition_matrix, SparseGraph};
use gil_core::model::{
    cheb_conv, cheb_conv_basis, normalized_weights, phi_w_forward, ChebLayerParams, Mode,
    PreparedGraph,
};
use gil_core::reachability::{dense_power_oracle, reach_from};
use gil_core::tensor::Tensor;
use gil_core::trainer::{Experiment, MetaGradMode, Phase, RunConfig, RunOutcome, Variant};

struct Line {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn line(name: &'static str, pass: bool, detail: String) -> Line {
    Line { name, pass, detail }
}

fn to_na(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

/// Random undirected graph plus its dense adjacency built independently.
fn random_graph(rng: &mut ChaCha8Rng, n: usize, p: f64, d: usize) -> (SparseGraph, DMatrix<f64>) {
    let mut a = DMatrix::zeros(n, n);
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.random_bool(p) {
                edges.push((i, j, 1.0));
                a[(i, j)] = 1.0;
                a[(j, i)] = 1.0;
            }
        }
    }
    let x = Tensor::from_vec(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect());
    let g = SparseGraph::from_edges(n, &edges, false, x, vec![Some(0); n], 1).unwrap();
    (g, a)
}

fn dense_transition(a: &DMatrix<f64>) -> DMatrix<f64> {
    let mut p = a.clone();
    for mut row in p.row_iter_mut() {
        let s: f64 = row.sum();
        if s > 0.0 {
            row /= s;
        }
    }
    p
}

fn reachability_oracle() -> Line {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let n = rng.random_range(2..=40);
        let steps = rng.random_range(1..=6);
        let density = rng.random_range(0.03..0.3);
        let (g, a) = random_graph(&mut rng, n, density, 1);
        let p = dense_transition(&a);
        let library = dense_power_oracle(&g, steps).unwrap();
        let sparse_p = transition_matrix(&g);
        let mut power = p.clone();
        for t in 0..steps {
            worst = worst.max((&to_na(&library[t]) - &power).abs().max());
            for src in 0..n {
                let walk = reach_from(&sparse_p, src, steps);
                for j in 0..n {
                    worst = worst.max((walk.get(j, t) - power[(src, j)]).abs());
                }
            }
            power = &power * &p;
        }
    }
    let elapsed = start.elapsed();
    line(
        "reachability oracle equivalence",
        worst < 1e-10 && elapsed < Duration::from_secs(10),
        format!("max abs error {worst:.2e} (< 1e-10), {:.2}s (< 10s)", elapsed.as_secs_f64()),
    )
}

fn row_stochasticity() -> Line {
    let mut graphs: Vec<SparseGraph> = vec![toy8().graph, toy12().graph];
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let n = rng.random_range(2..=30);
        graphs.push(random_graph(&mut rng, n, 0.15, 1).0);
    }
    let mut worst: f64 = 0.0;
    for g in &graphs {
        let p = transition_matrix(g).to_dense();
        for r in 0..g.num_nodes() {
            if !g.neighbors(r).is_empty() {
                worst = worst.max((p.row(r).iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    line(
        "transition matrices are row-stochastic",
        worst <= 1e-12,
        format!("max |row sum - 1| {worst:.2e} (<= 1e-12)"),
    )
}

fn gradient_check() -> Line {
    let bundle = toy8();
    let cfg = RunConfig {
        widths: vec![6, 4],
        phi_w_hidden: 5,
        seed: 5,
        ..RunConfig::default()
    };
    let exp = Experiment::new(&bundle, cfg).unwrap();
    let params = exp.init_params();
    let queries: Vec<usize> = (0..bundle.graph.num_nodes()).collect();
    let loss_at = |blocks: Vec<Tensor>| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = blocks.into_iter().map(|b| tape.constant(b)).collect();
        let pv = params.with_blocks(vars);
        let l = exp.loss(&mut tape, &pv, &queries, true, Mode::EVAL).unwrap();
        tape.value(l).item()
    };
    let (_, analytic) = exp.loss_and_grad(&params, &queries, true, Mode::EVAL).unwrap();
    let base: Vec<Tensor> = params.blocks().into_iter().cloned().collect();
    // Fourth-order central stencil: roundoff near 1e-12 instead of the
    // 1e-10 of the two-point rule, which matters for gradients near 1e-7.
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    let mut coords = 0;
    for (b, grad) in analytic.iter().enumerate() {
        for i in 0..base[b].len() {
            let at = |delta: f64| {
                let mut shifted = base.clone();
                shifted[b].data_mut()[i] += delta;
                loss_at(shifted)
            };
            let numeric =
                (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h);
            let a = grad.data()[i];
            let scale = a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((a - numeric).abs() / scale);
            coords += 1;
        }
    }
    line(
        "full-model gradient check",
        worst < 1e-4,
        format!("max relative error {worst:.2e} over {coords} coordinates (< 1e-4)"),
    )
}

fn chebyshev_oracle() -> Line {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst: f64 = 0.0;
    for _ in 0..30 {
        let n = rng.random_range(2..=32);
        let order = rng.random_range(1..=4);
        let (g, a) = random_graph(&mut rng, n, 0.2, 4);
        let deg: Vec<f64> = a.row_iter().map(|r| r.sum()).collect();
        let mut lap = DMatrix::identity(n, n);
        for i in 0..n {
            for j in 0..n {
                if a[(i, j)] != 0.0 {
                    lap[(i, j)] -= a[(i, j)] / (deg[i] * deg[j]).sqrt();
                }
            }
        }
        let lambda_max = 2.0;
        let lhat = &lap * (2.0 / lambda_max) - DMatrix::identity(n, n);
        let mut terms = vec![DMatrix::identity(n, n), lhat.clone()];
        while terms.len() < order {
            let k = terms.len();
            terms.push(&lhat * &terms[k - 1] * 2.0 - &terms[k - 2]);
        }
        let x = to_na(g.features());
        let thetas: Vec<Tensor> = (0..order)
            .map(|_| Tensor::from_vec(4, 3, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()))
            .collect();
        let bias = Tensor::row_vector((0..3).map(|_| rng.random_range(-1.0..1.0)).collect());
        let mut expected = DMatrix::zeros(n, 3);
        for (t, theta) in terms.iter().zip(&thetas) {
            expected += t * &x * to_na(theta);
        }
        for mut row in expected.row_iter_mut() {
            row += to_na(&bias);
        }

        let prepared = PreparedGraph::new(&g, order, lambda_max).unwrap();
        let mut tape = Tape::new();
        let layer = ChebLayerParams {
            coeffs: thetas.iter().map(|t| tape.leaf(t.clone())).collect(),
            bias: tape.leaf(bias.clone()),
        };
        let xv = tape.constant(g.features().clone());
        let rec = cheb_conv(&mut tape, &layer, prepared.lhat_operator(), xv).unwrap();
        let pre = cheb_conv_basis(&mut tape, &layer, prepared.basis()).unwrap();
        worst = worst
            .max((to_na(tape.value(rec)) - &expected).abs().max())
            .max((to_na(tape.value(pre)) - &expected).abs().max());
    }
    line(
        "chebyshev convolution matches dense polynomial",
        worst < 1e-10,
        format!("max abs error {worst:.2e} (< 1e-10)"),
    )
}

fn meta_degeneracy() -> Line {
    let bundle = toy12();
    let mut worst_plain: f64 = 0.0;
    let mut worst_modes: f64 = 0.0;
    for seed in 0..3 {
        let mut results = Vec::new();
        for mode in [MetaGradMode::FirstOrder, MetaGradMode::Full] {
            let cfg = RunConfig {
                alpha: 0.0,
                beta: 0.05,
                widths: vec![8, 6],
                meta_grad_mode: mode,
                seed,
                ..RunConfig::default()
            };
            let exp = Experiment::new(&bundle, cfg).unwrap();
            let p = exp.init_params();
            let (tr, val) = (&bundle.split.train, &bundle.split.val);
            let step = exp.meta_step(&p, tr, val, 7).unwrap();
            if mode == MetaGradMode::FirstOrder {
                let val_mode = exp.train_mode(7, Phase::Meta, 0);
                let (_, g) = exp.loss_and_grad(&p, val, true, val_mode).unwrap();
                for ((a, b), gb) in step.params.blocks().iter().zip(p.blocks()).zip(&g) {
                    let plain = b.zip_map(gb, |x, y| x - 0.05 * y);
                    worst_plain = worst_plain.max(a.max_abs_diff(&plain));
                }
            }
            results.push(step.params);
        }
        for (a, b) in results[0].blocks().iter().zip(results[1].blocks()) {
            worst_modes = worst_modes.max(a.max_abs_diff(b));
        }
    }
    line(
        "meta step degenerates to a validation step at alpha = 0",
        worst_plain < 1e-10 && worst_modes < 1e-10,
        format!("vs plain step {worst_plain:.2e}, full vs first-order {worst_modes:.2e} (< 1e-10)"),
    )
}

fn normalization_identity() -> Line {
    let bundle = PlantedPartition {
        train_per_class: 4,
        val: 6,
        ..PlantedPartition::new(30, 3, 12)
    }
    .generate()
    .unwrap()
    .row_normalized();
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    let n = bundle.graph.num_nodes();
    let mut worst_sum: f64 = 0.0;
    let mut worst_oracle: f64 = 0.0;
    let mut self_nonzero = 0;
    let mut exps = Vec::new();
    for s in 0..10 {
        let cfg = RunConfig {
            widths: vec![4],
            seed: s,
            ..RunConfig::default()
        };
        exps.push(Experiment::new(&bundle, cfg).unwrap());
    }
    let params: Vec<_> = exps.iter().map(|e| e.init_params()).collect();
    for _ in 0..1000 {
        let which = rng.random_range(0..exps.len());
        let (exp, p) = (&exps[which], &params[which]);
        let q = rng.random_range(0..n);
        let c = rng.random_range(0..3);
        let refs = exp.references().unwrap();
        let w = normalized_weights(exp.architecture(), p, exp.table(), refs, &[q], true).unwrap();
        let members = refs.members(c);
        worst_sum = worst_sum.max((members.iter().map(|&k| w.get(0, k)).sum::<f64>() - 1.0).abs());

        // Independent recomputation from the raw weigher outputs.
        let table = exp.table().unwrap();
        let raw: Vec<f64> = members
            .iter()
            .map(|&k| {
                let id = refs.ids()[k];
                if id == q {
                    0.0
                } else {
                    phi_w_forward(p, table.pair(id, q).unwrap()).unwrap()
                }
            })
            .collect();
        let total: f64 = raw.iter().sum();
        for (&k, r) in members.iter().zip(&raw) {
            worst_oracle = worst_oracle.max((w.get(0, k) - r / total).abs());
            if refs.ids()[k] == q && w.get(0, k) != 0.0 {
                self_nonzero += 1;
            }
        }
    }
    line(
        "normalized weights sum to one, self weight zero",
        worst_sum <= 1e-9 && worst_oracle <= 1e-9 && self_nonzero == 0,
        format!(
            "max |sum - 1| {worst_sum:.2e}, vs oracle {worst_oracle:.2e} (<= 1e-9), \
             nonzero self weights {self_nonzero}"
        ),
    )
}

fn untrained_loss(real: &[(&'static str, Option<DatasetBundle>)]) -> Line {
    let mut bundles = vec![toy8().row_normalized(), toy12().row_normalized()];
    bundles.extend(real.iter().filter_map(|(_, b)| b.clone()));
    let mut worst: f64 = 0.0;
    let mut names = Vec::new();
    for b in &bundles {
        let exp = Experiment::new(b, RunConfig::default()).unwrap();
        let labeled: Vec<usize> = (0..b.graph.num_nodes())
            .filter(|&i| b.graph.label(i).is_some())
            .collect();
        let e = exp.evaluate(&exp.init_params(), &labeled, false).unwrap();
        let gap = (e.loss - (b.graph.num_classes() as f64).ln()).abs();
        worst = worst.max(gap);
        names.push(format!("{} {gap:.3}", b.name));
    }
    line(
        "untrained loss is near ln C",
        worst < 0.2,
        format!("|loss - ln C|: {} (< 0.2)", names.join(", ")),
    )
}

fn data_dir() -> PathBuf {
    std::env::var_os("GIL_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data"))
}

fn load(name: &str) -> Option<DatasetBundle> {
    let dir = data_dir().join(name);
    if !dir.join("manifest.txt").is_file() {
        return None;
    }
    Some(load_dataset_with(&dir, LoadOptions { row_normalize: true }).expect("dataset loads"))
}

fn blocked(name: &'static str, dataset: &str) -> Line {
    line(
        name,
        false,
        format!("blocked: dataset not found at {}", data_dir().join(dataset).display()),
    )
}

fn train(bundle: &DatasetBundle, variant: Variant) -> (RunOutcome, Duration) {
    let start = Instant::now();
    let cfg = RunConfig {
        variant,
        ..RunConfig::default()
    };
    let out = Experiment::new(bundle, cfg).unwrap().run().unwrap();
    (out, start.elapsed())
}

fn pct(x: f64) -> f64 {
    100.0 * x
}

fn benchmark_lines(cora: Option<&DatasetBundle>, citeseer: Option<&DatasetBundle>, pubmed: Option<&DatasetBundle>) -> Vec<Line> {
    let mut out = Vec::new();
    match cora {
        None => {
            out.push(blocked("cora full model accuracy", "cora"));
            out.push(blocked("cora ablation ordering", "cora"));
            out.push(blocked("cora meta-training gains", "cora"));
            out.push(blocked("meta-loop learning curve", "cora"));
        }
        Some(b) => {
            let (full, t) = train(b, Variant::Full);
            let acc = |o: &RunOutcome| pct(o.test.accuracy);
            out.push(line(
                "cora full model accuracy",
                acc(&full) >= 84.0 && t < Duration::from_secs(15 * 60),
                format!("{:.1}% (>= 84.0), {:.0}s (< 900s)", acc(&full), t.as_secs_f64()),
            ));
            let raw = acc(&train(b, Variant::RawFeaturesOnly).0);
            let fe = acc(&train(b, Variant::FeOnly).0);
            let fefr = acc(&train(b, Variant::FeFr).0);
            out.push(line(
                "cora ablation ordering",
                raw + 1.0 <= fe && fe + 1.0 <= fefr && fefr + 0.5 <= acc(&full),
                format!("raw {raw:.1} < fe_only {fe:.1} < fe_fr {fefr:.1} < full {:.1}", acc(&full)),
            ));
            let gcn = acc(&train(b, Variant::GcnTrainOnly).0);
            let gil_tr = acc(&train(b, Variant::GilTrainOnly).0);
            out.push(line(
                "cora meta-training gains",
                gil_tr >= gcn + 1.0 && acc(&full) >= gil_tr + 1.5,
                format!(
                    "gcn_train_only {gcn:.1}, gil_train_only {gil_tr:.1}, full {:.1}",
                    acc(&full)
                ),
            ));
            let err_at = |it: usize| {
                full.curve
                    .iter()
                    .find(|p| p.iteration == it)
                    .map(|p| 1.0 - p.accuracy)
            };
            let (e50, e400, e1200) = (err_at(50), err_at(400), err_at(1200));
            let pass = matches!((e50, e400, e1200), (Some(a), Some(b), Some(c)) if b < a && c <= b);
            out.push(line(
                "meta-loop learning curve",
                pass,
                format!("val error at 50/400/1200: {e50:?} / {e400:?} / {e1200:?}"),
            ));
        }
    }
    match citeseer {
        None => out.push(blocked("citeseer full model accuracy", "citeseer")),
        Some(b) => {
            let (o, _) = train(b, Variant::Full);
            let a = pct(o.test.accuracy);
            out.push(line("citeseer full model accuracy", a >= 72.0, format!("{a:.1}% (>= 72.0)")));
        }
    }
    match pubmed {
        None => out.push(blocked("pubmed full model accuracy", "pubmed")),
        Some(b) => {
            let (o, t) = train(b, Variant::Full);
            let a = pct(o.test.accuracy);
            out.push(line(
                "pubmed full model accuracy",
                a >= 80.5 && t < Duration::from_secs(60 * 60),
                format!("{a:.1}% (>= 80.5), {:.0}s (< 3600s)", t.as_secs_f64()),
            ));
        }
    }
    out
}

fn main() {
    let real = [("cora", load("cora")), ("citeseer", load("citeseer")), ("pubmed", load("pubmed"))];
    let properties = [
        reachability_oracle(),
        row_stochasticity(),
        gradient_check(),
        chebyshev_oracle(),
        meta_degeneracy(),
        normalization_identity(),
        untrained_loss(&real),
    ];
    let benchmarks = benchmark_lines(real[0].1.as_ref(), real[1].1.as_ref(), real[2].1.as_ref());

    for l in properties.iter().chain(&benchmarks) {
        println!("{} {}: {}", if l.pass { "PASS" } else { "FAIL" }, l.name, l.detail);
    }
    let failed = properties.iter().filter(|l| !l.pass).count();
    if failed > 0 {
        eprintln!("{failed} property check(s) failed");
        std::process::exit(1);
    }
}
