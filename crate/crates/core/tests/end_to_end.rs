use std::fs::File;
use std::io::BufWriter;

use affinecal::backend::{simulate_task, Backend, MockBackend};
use affinecal::harness::{load_dataset, split_for_seed, write_dataset, Config, DataFormat, Method};
use affinecal::{logits_from_probs, Exemplar};

const CONFIG: &str = r#"
[experiment]
k = 8
methods = ["base", "bc", "sc", "sc_bias_only"]
seeds = [0, 1, 2, 3, 4]
test_size = 256
timing = "off"

[mock]
true_slopes = [3.3466]
true_intercepts = [0.0]
conditional_scale = [-1.0]
marginal_shift = [2.75]
majority_bias = 0.5
noise_sd = 0.3
seed = 11

[simulation]
num_items = 600
seed = 11
"#;

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

/// Best accuracy of `1[m_1 > t]` over all thresholds.
fn best_threshold(scored: &mut [(f64, usize)]) -> f64 {
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut correct = scored.iter().filter(|s| s.1 == 1).count() as i64;
    let mut best = correct;
    for (_, y) in scored.iter() {
        correct += if *y == 0 { 1 } else { -1 };
        best = best.max(correct);
    }
    best as f64 / scored.len() as f64
}

#[test]
fn flipped_classifier_through_files_and_config() {
    let cfg = Config::from_toml(CONFIG, "inline").unwrap();
    let template = cfg.mock_template().unwrap();
    let items = simulate_task(&cfg.mock, &cfg.simulation).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("task.jsonl");
    write_dataset(BufWriter::new(File::create(&path).unwrap()), &items, &template.label_space).unwrap();
    let ds = load_dataset(&path, DataFormat::Jsonl, "task", template).unwrap();
    assert_eq!(ds.items.len(), 600);
    assert!(ds.items.iter().zip(&items).all(|(a, b)| a.text == b.text && a.label == b.label));

    let backend = MockBackend::new(cfg.mock.clone()).unwrap();
    let spec = cfg.experiment_spec();
    let report = affinecal::harness::run_experiment(&ds, &backend, &spec).unwrap();
    assert_eq!(report.runs.len(), 20);

    let acc = |m: Method| mean(spec.seeds.iter().map(|&s| report.run(m, s).unwrap().accuracy));
    let mut thresholds = Vec::new();
    for &seed in &spec.seeds {
        let (shots, test) = split_for_seed(&ds, spec.k, spec.test_size, seed, false).unwrap();
        let ctx: Vec<&Exemplar> = shots.iter().collect();
        let mut scored: Vec<(f64, usize)> = test
            .iter()
            .map(|e| (logits_from_probs(&backend.infer(&e.text, &ctx).unwrap()).as_slice()[0], e.label))
            .collect();
        let t = best_threshold(&mut scored);
        // BC only moves the threshold, so it can never beat the best one.
        assert!(report.run(Method::Bc, seed).unwrap().accuracy <= t + 1e-12, "seed {seed}");
        thresholds.push(t);
    }
    let oracle = mean(thresholds.into_iter());
    let (base, sc, sc_b) = (acc(Method::Base), acc(Method::Sc), acc(Method::ScBiasOnly));
    assert!(sc - base >= 0.3, "sc {sc:.3} vs base {base:.3}");
    assert!(sc_b <= oracle + 0.03, "bias-only {sc_b:.3} vs best threshold {oracle:.3}");

    for run in &report.runs {
        assert_eq!(run.confusion.total(), 256);
        let trace: u64 = (0..2).map(|c| run.confusion.counts()[c][c]).sum();
        assert_eq!(run.accuracy, trace as f64 / 256.0);
        for (c, pc) in run.per_class.iter().enumerate() {
            assert_eq!(pc.support, run.confusion.counts()[c].iter().sum::<u64>());
        }
    }
}

#[test]
fn sc_overrides_confidently_wrong_base_predictions() {
    let cfg = Config::from_toml(CONFIG, "inline").unwrap();
    let template = cfg.mock_template().unwrap();
    let backend = MockBackend::new(cfg.mock.clone()).unwrap();
    let mut pool = simulate_task(&cfg.mock, &cfg.simulation).unwrap();
    let test = pool.split_off(8);
    let model = affinecal::ensemble::train_ensemble(
        &pool,
        &template.label_space,
        &backend,
        &cfg.ensemble,
        &cfg.objective,
        &cfg.solver,
    )
    .unwrap();

    let ctx: Vec<&Exemplar> = pool.iter().collect();
    let (mut wrong, mut flipped) = (0, 0);
    for e in &test {
        let p = backend.infer(&e.text, &ctx).unwrap();
        if p.get(e.label) < 0.1 {
            wrong += 1;
            let base = affinecal::predict_label(&p);
            if model.predict_label(&e.text, &backend).unwrap() != base {
                flipped += 1;
            }
        }
    }
    assert!(wrong >= 50, "only {wrong} confidently wrong queries");
    assert_eq!(flipped, wrong, "SC kept {} confidently wrong base labels", wrong - flipped);
}
