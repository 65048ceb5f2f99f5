//! Scratch probe for sizing the desk-scale benchmarks (not shipped).

use bss_core::experiments::*;
use bss_core::stats::{mean, paired_t_test_greater, std_dev};

fn main() {
    let which = std::env::args().nth(1).unwrap_or_else(|| "main".into());
    match which.as_str() {
        "teacher" => teacher_probe(),
        "main" => main_comparison(),
        "sweep" => sweep_probe(),
        "similarity" => similarity_probe(),
        "attack" => attack_probe(),
        "ablate" => ablate_probe(),
        "variants" => variants_probe(),
        other => eprintln!("unknown probe {other}"),
    }
}

fn teacher_probe() {
    let grid = spiral_grid(vec![0]);
    let dataset = grid.data.build().unwrap();
    let start = std::time::Instant::now();
    let (teacher, log) = grid.teacher.train(&dataset).unwrap();
    println!(
        "spiral teacher: train acc {:.4}, test acc {:.4}, {:.1}s",
        log.epochs.last().unwrap().train_accuracy,
        log.epochs.last().unwrap().test_accuracy,
        start.elapsed().as_secs_f64()
    );
    let logits = teacher.logits(dataset.train.inputs()).unwrap();
    let gaps: Vec<f64> = logits
        .values()
        .chunks_exact(2)
        .map(|r| (r[0] - r[1]).abs())
        .collect();
    let mut sorted = gaps.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    println!(
        "logit gaps: median {:.2}, p90 {:.2}, max {:.2}",
        sorted[sorted.len() / 2],
        sorted[sorted.len() * 9 / 10],
        sorted.last().unwrap()
    );

    let g = gaussian_grid(vec![0]);
    let dataset = g.data.build().unwrap();
    let (_, log) = g.teacher.train(&dataset).unwrap();
    println!(
        "gaussian teacher: train acc {:.4}, test acc {:.4}",
        log.epochs.last().unwrap().train_accuracy,
        log.epochs.last().unwrap().test_accuracy,
    );
}

fn main_comparison() {
    let start = std::time::Instant::now();
    let grid = spiral_grid(DEFAULT_SEEDS.to_vec());
    let results = grid.run(&[Method::Original, Method::Hinton, Method::Bss]).unwrap();
    println!("30 runs in {:.1}s", start.elapsed().as_secs_f64());
    report(&results);

    let acc = |name: &str| -> Vec<f64> {
        results
            .iter()
            .filter(|r| r.method == name)
            .map(|r| r.final_test_accuracy)
            .collect()
    };
    let (orig, hint, bss) = (acc("original"), acc("hinton"), acc("bss"));
    println!("p(bss > original) = {:.5}", paired_t_test_greater(&bss, &orig));
    println!("p(bss > hinton)   = {:.5}", paired_t_test_greater(&bss, &hint));
    println!("p(hinton > orig)  = {:.5}", paired_t_test_greater(&hint, &orig));
    let rates: Vec<f64> = results
        .iter()
        .filter_map(|r| r.attack_success_rate)
        .collect();
    if !rates.is_empty() {
        println!("attack success rate mean {:.3}", mean(&rates));
    }
}

fn sweep_probe() {
    let start = std::time::Instant::now();
    let grid = spiral_grid(DEFAULT_SEEDS.to_vec());
    let sweep = run_sweep(&grid, &SWEEP_FRACTIONS, &[Method::Original, Method::Bss]).unwrap();
    for (fraction, results) in &sweep {
        let s = summarize(results);
        let orig = s.iter().find(|x| x.method == "original").unwrap();
        let bss = s.iter().find(|x| x.method == "bss").unwrap();
        println!(
            "fraction {:.1}: original {:.4}±{:.4}  bss {:.4}±{:.4}  improvement {:+.4}",
            fraction,
            orig.mean_accuracy,
            orig.std_accuracy,
            bss.mean_accuracy,
            bss.std_accuracy,
            bss.mean_accuracy - orig.mean_accuracy
        );
    }
    println!("sweep in {:.1}s", start.elapsed().as_secs_f64());
}

fn similarity_probe() {
    let start = std::time::Instant::now();
    let mut grid = spiral_grid(DEFAULT_SEEDS.to_vec());
    grid.measure_similarity = true;
    let results = grid.run(&[Method::Original, Method::Hinton, Method::Bss]).unwrap();
    report(&results);
    println!("similarity in {:.1}s", start.elapsed().as_secs_f64());
}

fn attack_probe() {
    use bss_core::attack::{find_bss, AttackConfig};
    let grid = gaussian_grid(vec![0]);
    let dataset = grid.data.build().unwrap();
    let (teacher, log) = grid.teacher.train(&dataset).unwrap();
    println!("teacher test acc {:.4}", log.epochs.last().unwrap().test_accuracy);
    let mut eligible = 0;
    let mut success = 0;
    let mut iters = Vec::new();
    for i in 0..dataset.train.len() {
        let x = dataset.train.sample(i).unwrap();
        let label = dataset.train.labels()[i];
        if teacher.predict(&x).unwrap() != label {
            continue;
        }
        eligible += 1;
        let target = 1 - label;
        let r = find_bss(&teacher, &x, label, target, &AttackConfig::default()).unwrap();
        if r.status.is_success() {
            success += 1;
            iters.push(r.iterations as f64);
        }
    }
    println!(
        "eligible {eligible}, success {success} ({:.1}%), mean iters {:.2}",
        100.0 * success as f64 / eligible as f64,
        mean(&iters)
    );
}

fn ablate_probe() {
    let start = std::time::Instant::now();
    let grid = spiral_grid(DEFAULT_SEEDS.to_vec());
    let results = grid.run(&ABLATION_METHODS).unwrap();
    report(&results);
    let acc = |name: &str| -> Vec<f64> {
        results
            .iter()
            .filter(|r| r.method == name)
            .map(|r| r.final_test_accuracy)
            .collect()
    };
    let bss = acc("bss");
    for variant in ["all-sample-selection", "random-selection", "random-target-class"] {
        println!(
            "p({variant} > bss) = {:.4}",
            paired_t_test_greater(&acc(variant), &bss)
        );
    }
    println!("ablation in {:.1}s", start.elapsed().as_secs_f64());
}

fn variants_probe() {
    let start = std::time::Instant::now();
    let grid = spiral_grid(DEFAULT_SEEDS.to_vec());
    let results = grid.run(&ATTACK_COMPARISON_METHODS).unwrap();
    report(&results);
    println!("variants in {:.1}s", start.elapsed().as_secs_f64());
}

fn report(results: &[ExperimentResult]) {
    for s in summarize(results) {
        println!(
            "{:<22} acc {:.4} ± {:.4}  magsim {:?}  angsim {:?}",
            s.method, s.mean_accuracy, s.std_accuracy, s.mean_magsim, s.mean_angsim
        );
    }
    let _ = std_dev(&[0.0]);
}
