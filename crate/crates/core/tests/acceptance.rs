//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::time::Instant;

use branchdiff::autodiff::Tape;
use branchdiff::data::synth::{synth_gaussian_mixture, toys, GaussianClass};
use branchdiff::data::TabularDataset;
use branchdiff::denoiser::{Architecture, Denoiser, LabelGuidedDenoiser, MultiTaskDenoiser};
use branchdiff::diffusion::{perturb, Process, ProcessSpec};
use branchdiff::evaluation::{frechet_distance, gaussian_fit, transmutation_correlation, GaussianSummary};
use branchdiff::hierarchy::{
    branch_score_distance, build_hierarchy, discover, parse_table, random_hierarchy, DiscoveryConfig, MergeTimes,
};
use branchdiff::matrix::Matrix;
use branchdiff::rng::{normal_vec, stream, Stage};
use branchdiff::sampling::{
    class_stream, continue_from, hybrid, hybrid_from, prior, sample_all_cached, sample_class, sample_label_guided,
    transmute, uncached_steps, SampleBatch, SampleConfig,
};
use branchdiff::training::{extend, train_branched, train_label_guided, TrainConfig};
use branchdiff::BranchHierarchy;
use nalgebra::{DMatrix, DVector};

type Check = Result<(bool, String), String>;

fn truth(g: &GaussianClass) -> GaussianSummary {
    let d = g.mean.len();
    GaussianSummary {
        mean: DVector::from_vec(g.mean.clone()),
        cov: DMatrix::from_fn(d, d, |i, j| g.cov[i][j]),
        count: 0,
    }
}

fn fit(s: &SampleBatch<f32>) -> GaussianSummary {
    gaussian_fit(&s.data.cast::<f64>()).expect("fit")
}

fn fd(a: &GaussianSummary, b: &GaussianSummary) -> f64 {
    frechet_distance(a, b).expect("frechet")
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn vp() -> Process<f32> {
    ProcessSpec::default().build().expect("process")
}

fn toy_arch() -> Architecture {
    Architecture {
        width: 64,
        ..Default::default()
    }
}

fn toy_train(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        seed: 1,
        ..Default::default()
    }
}

fn discovered(data: &TabularDataset, process: &Process<f64>, epsilon: f64) -> Result<BranchHierarchy, String> {
    let cfg = DiscoveryConfig {
        epsilon,
        ..Default::default()
    };
    Ok(discover(data, process, &cfg, &mut stream(1, Stage::Discover, &[]))
        .map_err(|e| e.to_string())?
        .hierarchy)
}

fn forward_marginals() -> Check {
    let start = Instant::now();
    let process: Process<f64> = ProcessSpec::default().build().map_err(|e| e.to_string())?;
    let x0 = [1.0, -2.0, 1.5];
    let draws = 100_000;
    let mut worst: f64 = 0.0;
    for (k, &t) in [0.25, 0.5, 1.0].iter().enumerate() {
        let (mc, sd) = process.marginal(t).map_err(|e| e.to_string())?;
        let mut rng = stream(11, Stage::Init, &[k as u64]);
        let mut sum = [0.0; 3];
        let mut sq = [0.0; 3];
        for _ in 0..draws {
            let p = perturb(&process, &x0, t, &mut rng).map_err(|e| e.to_string())?;
            for j in 0..3 {
                sum[j] += p.x_t[j];
                sq[j] += p.x_t[j] * p.x_t[j];
            }
        }
        for j in 0..3 {
            let mean = sum[j] / draws as f64;
            let std = (sq[j] / draws as f64 - mean * mean).sqrt();
            worst = worst.max(((mean - mc * x0[j]) / (mc * x0[j])).abs());
            worst = worst.max(((std - sd) / sd).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Ok((
        worst < 0.01 && secs < 10.0,
        format!("max relative error {worst:.5}, {secs:.2}s"),
    ))
}

fn gradient_check() -> Check {
    let start = Instant::now();
    let arch = Architecture {
        width: 6,
        trunk_layers: 2,
        head_layers: 2,
        time_frequencies: 3,
        label_dim: 2,
    };
    let mut worst: f64 = 0.0;
    for net in 0..20u64 {
        let dim = 2 + (net as usize % 3);
        let mut rng = stream(net, Stage::Init, &[99]);
        let x = Matrix::from_vec(4, dim, normal_vec(&mut rng, 4 * dim)).map_err(|e| e.to_string())?;
        let t: Vec<f64> = (0..4).map(|i| 0.1 + 0.2 * i as f64).collect();
        let cond: Vec<usize> = (0..4).map(|i| i % 2).collect();
        let weights: Vec<f64> = normal_vec(&mut rng, 4 * dim);
        let process: Process<f64> = ProcessSpec::default().build().map_err(|e| e.to_string())?;
        let mut model: Box<dyn Denoiser<f64>> = if net % 2 == 1 {
            let mut m = LabelGuidedDenoiser::new(arch, dim, 2, process, net).map_err(|e| e.to_string())?;
            let id = m.store().id("label.embedding").map_err(|e| e.to_string())?;
            m.store_mut().get_mut(id).value = normal_vec(&mut rng, 4);
            Box::new(m)
        } else {
            Box::new(MultiTaskDenoiser::new(arch, dim, 2, process, net).map_err(|e| e.to_string())?)
        };
        let loss = |m: &dyn Denoiser<f64>| -> f64 {
            let out = m.score(&x, &t, &cond).expect("forward");
            out.as_slice().iter().zip(&weights).map(|(a, b)| a * b).sum()
        };
        let mut tape = Tape::new();
        let groups = model
            .forward_tape(&mut tape, &x, &t, &cond)
            .map_err(|e| e.to_string())?;
        let seeds: Vec<_> = groups
            .iter()
            .map(|g| {
                let mut s = Matrix::zeros(g.rows.len(), dim);
                for (r, &i) in g.rows.iter().enumerate() {
                    s.row_mut(r).copy_from_slice(&weights[i * dim..(i + 1) * dim]);
                }
                (g.out, s)
            })
            .collect();
        tape.backward(model.store_mut(), &seeds).map_err(|e| e.to_string())?;
        let names: Vec<String> = model.store().iter().map(|p| p.name.clone()).collect();
        let h = 1e-4;
        for name in names {
            let id = model.store().id(&name).map_err(|e| e.to_string())?;
            for k in 0..model.store().get(id).len() {
                let analytic = model.store().get(id).grad[k];
                let orig = model.store().get(id).value[k];
                model.store_mut().get_mut(id).value[k] = orig + h;
                let up = loss(model.as_ref());
                model.store_mut().get_mut(id).value[k] = orig - h;
                let down = loss(model.as_ref());
                model.store_mut().get_mut(id).value[k] = orig;
                let numeric = (up - down) / (2.0 * h);
                let scale = analytic.abs().max(numeric.abs());
                if scale > 1e-6 {
                    worst = worst.max((analytic - numeric).abs() / scale);
                }
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Ok((
        worst < 1e-4 && secs < 30.0,
        format!("max relative error {worst:.2e}, {secs:.2}s"),
    ))
}

fn hierarchy_structure() -> Check {
    let process: Process<f64> = ProcessSpec::default().build().map_err(|e| e.to_string())?;
    let mut notes = Vec::new();
    let mut ok = true;
    for k in 1..=10 {
        let toy = synth_gaussian_mixture(&toys::nested(k), 300, k as u64).map_err(|e| e.to_string())?;
        let h = discovered(&toy.data, &process, 0.005)?;
        let violations = h.validate();
        // every class resolves to exactly one branch at every point of a 1000-step grid
        let mut lookups = true;
        for c in h.classes() {
            for i in 0..1000 {
                lookups &= h.lookup(c, i as f64 / 999.0).is_ok();
            }
        }
        if h.branches().len() != 2 * k - 1 || !violations.is_empty() || !lookups {
            ok = false;
            notes.push(format!(
                "|C|={k}: {} branches, {} violations",
                h.branches().len(),
                violations.len()
            ));
        }
    }
    let classes: Vec<String> = ["0", "4", "9"].iter().map(|s| s.to_string()).collect();
    let taus: MergeTimes = [((0, 1), 0.5), ((0, 2), 0.5), ((1, 2), 0.35)].into_iter().collect();
    let built = build_hierarchy(&taus, &classes, 1.0).map_err(|e| e.to_string())?;
    let expected = parse_table(
        &["0", "4", "9"],
        1.0,
        &[
            (0.5, 1.0, "0,4,9"),
            (0.0, 0.5, "0"),
            (0.35, 0.5, "4,9"),
            (0.0, 0.35, "4"),
            (0.0, 0.35, "9"),
        ],
    )
    .map_err(|e| e.to_string())?;
    let table = built == expected;
    ok &= table;
    notes.push(format!("fixture tree reproduced: {table}"));
    Ok((ok, notes.join("; ")))
}

fn conditional_quality() -> Check {
    let classes = toys::two_class();
    let toy = synth_gaussian_mixture(&classes, 5000, 1).map_err(|e| e.to_string())?;
    let h = discovered(
        &toy.data,
        &ProcessSpec::default().build().map_err(|e| e.to_string())?,
        0.005,
    )?;
    let cfg = toy_train(500);
    let mut model = MultiTaskDenoiser::<f32>::new(toy_arch(), 2, h.task_count(), vp(), 1).map_err(|e| e.to_string())?;
    let start = Instant::now();
    train_branched(&mut model, &h, &toy.data, &cfg).map_err(|e| e.to_string())?;
    let branched_secs = start.elapsed().as_secs_f64();
    let mut baseline = LabelGuidedDenoiser::<f32>::with_parity(toy_arch(), 2, 2, vp(), 1).map_err(|e| e.to_string())?;
    let start = Instant::now();
    train_label_guided(&mut baseline, &toy.data, &cfg).map_err(|e| e.to_string())?;
    let baseline_secs = start.elapsed().as_secs_f64();

    let scfg = SampleConfig {
        seed: 5,
        ..Default::default()
    };
    let n = 3000;
    let mut ok = branched_secs <= 300.0 && baseline_secs <= 300.0;
    let mut notes = vec![format!("training {branched_secs:.0}s/{baseline_secs:.0}s")];
    let (mut fd_branched, mut fd_baseline) = (0.0, 0.0);
    for (i, c) in ["a", "b"].iter().enumerate() {
        let real = truth(&classes[i]);
        let g = fit(&sample_class(&model, &h, c, n, &scfg).map_err(|e| e.to_string())?);
        let mean_err = (&g.mean - &real.mean).norm();
        let cov_err = (&g.cov - &real.cov).norm();
        let d = fd(&g, &real);
        ok &= mean_err <= 0.15 && cov_err <= 0.2 && d < 0.1;
        fd_branched += d / 2.0;
        fd_baseline += fd(
            &fit(&sample_label_guided(&baseline, i, c, n, &scfg).map_err(|e| e.to_string())?),
            &real,
        ) / 2.0;
        notes.push(format!("{c}: mean {mean_err:.3}, cov {cov_err:.3}, frechet {d:.4}"));
    }
    ok &= fd_branched <= 1.5 * fd_baseline;
    notes.push(format!(
        "mean frechet branched {fd_branched:.4} vs label-guided {fd_baseline:.4}"
    ));
    Ok((ok, notes.join("; ")))
}

fn extension_without_forgetting() -> Check {
    let (old, new) = toys::extension();
    let mut all = old.clone();
    all.push(new.clone());
    let toy = synth_gaussian_mixture(&all, 5000, 1).map_err(|e| e.to_string())?;
    let base = toy.data.subset(&["a", "b"]).map_err(|e| e.to_string())?;
    let h = discovered(
        &base,
        &ProcessSpec::default().build().map_err(|e| e.to_string())?,
        0.005,
    )?;
    let cfg = toy_train(500);
    let mut model = MultiTaskDenoiser::<f32>::new(toy_arch(), 2, h.task_count(), vp(), 1).map_err(|e| e.to_string())?;
    train_branched(&mut model, &h, &base, &cfg).map_err(|e| e.to_string())?;

    let new_rows = synth_gaussian_mixture(&[new.clone()], 5000, 2).map_err(|e| e.to_string())?;
    let fine_tune = TrainConfig {
        epochs: 10,
        seed: 3,
        ..Default::default()
    };
    let (sibling, attach) = toys::EXTENSION_ATTACH;
    let ext =
        extend(&model, &h, &new_rows.data.features, "c", sibling, attach, &fine_tune).map_err(|e| e.to_string())?;
    let frozen = model.store().iter().all(|p| {
        ext.model
            .store()
            .by_name(&p.name)
            .map(|q| q.value == p.value)
            .unwrap_or(false)
    });

    let scfg = SampleConfig {
        seed: 5,
        ..Default::default()
    };
    let n = 2000;
    let mut identical = true;
    for c in ["a", "b"] {
        let before = sample_class(&model, &h, c, n, &scfg).map_err(|e| e.to_string())?;
        let after = sample_class(&ext.model, &ext.attachment.hierarchy, c, n, &scfg).map_err(|e| e.to_string())?;
        identical &= before.data == after.data;
    }
    let new_fd = fd(
        &fit(&sample_class(&ext.model, &ext.attachment.hierarchy, "c", n, &scfg).map_err(|e| e.to_string())?),
        &truth(&new),
    );

    let names: Vec<String> = vec!["a".into(), "b".into(), "c".into()];
    let labelled = TabularDataset::new(
        base.features.clone(),
        base.labels.clone(),
        names.clone(),
        base.feature_names.clone(),
    )
    .map_err(|e| e.to_string())?;
    let mut baseline = LabelGuidedDenoiser::<f32>::with_parity(toy_arch(), 2, 3, vp(), 1).map_err(|e| e.to_string())?;
    train_label_guided(&mut baseline, &labelled, &cfg).map_err(|e| e.to_string())?;
    let old_fd = |m: &LabelGuidedDenoiser<f32>| -> Result<f64, String> {
        let mut total = 0.0;
        for (i, c) in ["a", "b"].iter().enumerate() {
            total += fd(
                &fit(&sample_label_guided(m, i, c, n, &scfg).map_err(|e| e.to_string())?),
                &truth(&old[i]),
            ) / 2.0;
        }
        Ok(total)
    };
    let before = old_fd(&baseline)?;
    let only_new = TabularDataset::new(
        new_rows.data.features.clone(),
        vec![2; new_rows.data.len()],
        names,
        base.feature_names.clone(),
    )
    .map_err(|e| e.to_string())?;
    train_label_guided(&mut baseline, &only_new, &fine_tune).map_err(|e| e.to_string())?;
    let after = old_fd(&baseline)?;

    let ok = frozen && identical && new_fd < 0.15 && after >= 2.0 * before;
    Ok((
        ok,
        format!(
            "frozen unchanged {frozen}; old samples identical {identical}; new-class frechet {new_fd:.4}; label-guided old-class frechet {before:.4} -> {after:.4}"
        ),
    ))
}

fn transmutation() -> Check {
    let classes = toys::shared_latent();
    let toy = synth_gaussian_mixture(&classes, 5000, 1).map_err(|e| e.to_string())?;
    let h = toys::shared_latent_hierarchy();
    let mut model = MultiTaskDenoiser::<f32>::new(toy_arch(), 2, h.task_count(), vp(), 1).map_err(|e| e.to_string())?;
    train_branched(&mut model, &h, &toy.data, &toy_train(300)).map_err(|e| e.to_string())?;
    let rows: Vec<usize> = (0..2000).collect();
    let x1 = toy
        .data
        .class_matrix("a")
        .map_err(|e| e.to_string())?
        .select_rows(&rows);
    let scfg = SampleConfig {
        seed: 6,
        ..Default::default()
    };
    let x2 = transmute(&model, &h, &x1.cast::<f32>(), "a", "b", &scfg).map_err(|e| e.to_string())?;
    let corr = transmutation_correlation(&x1, &x2.data.cast::<f64>()).map_err(|e| e.to_string())?;
    let shared = corr[1].unwrap_or(f64::NAN);
    let g = fit(&x2);
    let (to_target, to_source) = (fd(&g, &truth(&classes[1])), fd(&g, &truth(&classes[0])));
    Ok((
        shared > 0.0 && to_target < to_source,
        format!(
            "shared-coordinate correlation {shared:.3}; frechet to target {to_target:.4}, to source {to_source:.4}"
        ),
    ))
}

fn digits_tree() -> BranchHierarchy {
    parse_table(
        &["0", "4", "9"],
        1.0,
        &[
            (0.5, 1.0, "0,4,9"),
            (0.0, 0.5, "0"),
            (0.35, 0.5, "4,9"),
            (0.0, 0.35, "4"),
            (0.0, 0.35, "9"),
        ],
    )
    .expect("fixture")
}

fn hybrid_consistency() -> Check {
    let h = digits_tree();
    let arch = Architecture {
        width: 32,
        ..Default::default()
    };
    let model = MultiTaskDenoiser::<f32>::new(arch, 3, h.task_count(), vp(), 4).map_err(|e| e.to_string())?;
    let cfg = SampleConfig {
        seed: 8,
        batch_size: 16,
        ..Default::default()
    };
    let mut ok = true;
    let mut notes = Vec::new();
    for (c1, c2) in [("4", "9"), ("0", "9")] {
        let hy = hybrid(&model, &h, c1, c2, 16, &cfg).map_err(|e| e.to_string())?;
        let lca = h.lca_branch_point(c1, c2).map_err(|e| e.to_string())?;
        ok &= hy.t == lca;
        for c in [c1, c2] {
            let mut rng = class_stream(cfg.seed, h.class_index(c).map_err(|e| e.to_string())?, 0);
            let mut x = prior::<f32>(16, 3, &mut rng);
            let stop = hybrid_from(&model, &h, c1, c2, &mut x, &cfg, &mut rng).map_err(|e| e.to_string())?;
            if c == c1 {
                ok &= x == hy.data;
            }
            continue_from(&model, &h, c, &mut x, stop, &cfg, &mut rng).map_err(|e| e.to_string())?;
            let direct = sample_class(&model, &h, c, 16, &cfg).map_err(|e| e.to_string())?;
            let same = x == direct.data;
            ok &= same;
            notes.push(format!("{c1}|{c2} -> {c}: identical {same}"));
        }
        notes.push(format!("stamp {} = {lca}", hy.t));
    }
    Ok((ok, notes.join("; ")))
}

fn caching_efficiency() -> Check {
    let h = digits_tree();
    let arch = Architecture {
        width: 32,
        ..Default::default()
    };
    let model = MultiTaskDenoiser::<f32>::new(arch, 3, h.task_count(), vp(), 4).map_err(|e| e.to_string())?;
    let cfg = SampleConfig {
        seed: 2,
        ..Default::default()
    };
    let n = 64;
    let mut cached_secs = Vec::new();
    let mut uncached_secs = Vec::new();
    let mut ledger = 0;
    for trial in 0..10 {
        let cfg = SampleConfig {
            seed: trial,
            ..cfg.clone()
        };
        let start = Instant::now();
        let cached = sample_all_cached(&model, &h, n, &cfg).map_err(|e| e.to_string())?;
        cached_secs.push(start.elapsed().as_secs_f64());
        ledger = cached.total_steps();
        let start = Instant::now();
        for c in h.classes() {
            sample_class(&model, &h, c, n, &cfg).map_err(|e| e.to_string())?;
        }
        uncached_secs.push(start.elapsed().as_secs_f64());
    }
    let plain = uncached_steps(&h, cfg.steps);
    let speedup = median(uncached_secs) / median(cached_secs);
    Ok((
        ledger == 1850 && plain == 3000 && speedup >= 1.3,
        format!("steps {ledger} vs {plain}; median wall-clock speedup {speedup:.2}x"),
    ))
}

fn discrete_parity() -> Check {
    let classes = toys::two_class();
    let toy = synth_gaussian_mixture(&classes, 5000, 1).map_err(|e| e.to_string())?;
    let spec = ProcessSpec::discrete_default();
    let h = discovered(&toy.data, &spec.build().map_err(|e| e.to_string())?, 0.001)?;
    let process: Process<f32> = spec.build().map_err(|e| e.to_string())?;
    let mut model =
        MultiTaskDenoiser::<f32>::new(toy_arch(), 2, h.task_count(), process, 1).map_err(|e| e.to_string())?;
    train_branched(&mut model, &h, &toy.data, &toy_train(500)).map_err(|e| e.to_string())?;
    let scfg = SampleConfig {
        seed: 5,
        ..Default::default()
    };
    let mut ok = true;
    let mut notes = vec![format!(
        "branch point {}",
        h.lca_branch_point("a", "b").map_err(|e| e.to_string())?
    )];
    for (i, c) in ["a", "b"].iter().enumerate() {
        let g = fit(&sample_class(&model, &h, c, 3000, &scfg).map_err(|e| e.to_string())?);
        let err = (&g.mean - &truth(&classes[i]).mean).norm();
        ok &= err <= 0.15;
        notes.push(format!("{c}: mean error {err:.3}"));
    }
    Ok((ok, notes.join("; ")))
}

fn robustness_direction() -> Check {
    let process: Process<f64> = ProcessSpec::default().build().map_err(|e| e.to_string())?;
    let k = 6;
    let mut rediscovered = Vec::new();
    for r in 0..10u64 {
        let toy = synth_gaussian_mixture(&toys::nested(k), 500, 100 + r).map_err(|e| e.to_string())?;
        let cfg = DiscoveryConfig::default();
        rediscovered.push(
            discover(&toy.data, &process, &cfg, &mut stream(r, Stage::Discover, &[]))
                .map_err(|e| e.to_string())?
                .hierarchy,
        );
    }
    let classes = rediscovered[0].classes().to_vec();
    let random: Vec<BranchHierarchy> = (0..10u64)
        .map(|r| random_hierarchy(&classes, 1.0, &mut stream(r, Stage::Discover, &[7])))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let pairwise = |hs: &[BranchHierarchy]| -> Result<f64, String> {
        let mut d = Vec::new();
        for i in 0..hs.len() {
            for j in i + 1..hs.len() {
                d.push(branch_score_distance(&hs[i], &hs[j]).map_err(|e| e.to_string())?);
            }
        }
        Ok(median(d))
    };
    let self_zero = rediscovered
        .iter()
        .chain(&random)
        .all(|h| branch_score_distance(h, h).map(|d| d == 0.0).unwrap_or(false));
    let (a, b) = (pairwise(&rediscovered)?, pairwise(&random)?);
    Ok((
        a < b && self_zero,
        format!("median distance rediscovered {a:.4} vs random {b:.4}; d(h, h) = 0: {self_zero}"),
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Check); 10] = [
        ("forward marginals", forward_marginals),
        ("gradient correctness", gradient_check),
        ("hierarchy structure", hierarchy_structure),
        ("conditional generation quality", conditional_quality),
        ("extension without forgetting", extension_without_forgetting),
        ("transmutation", transmutation),
        ("hybrid consistency", hybrid_consistency),
        ("caching efficiency", caching_efficiency),
        ("discrete-time parity", discrete_parity),
        ("robustness direction", robustness_direction),
    ];
    let filter: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.contains(&(i + 1)) {
            continue;
        }
        let start = Instant::now();
        let (pass, detail) = match check() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        if !pass {
            failed += 1;
        }
        let verdict = if pass { "PASS" } else { "FAIL" };
        println!(
            "{verdict} criterion {} ({name}): {detail} [{:.1}s]",
            i + 1,
            start.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
