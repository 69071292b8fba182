//! Runs every training mode on a range of seeds and prints the metrics the
//! benchmark criteria compare. Usage: `compare [first_seed] [count] [json world overrides]`.

use std::time::Instant;

use argue_core::synthbench::DistractorKind;
use argue_core::synthbench::{generate_task, TaskSpec, WorldParams};
use argue_core::train::{prepare_attributes, run_experiment, Mode, NegativeKind, TrainConfig};

fn main() -> argue_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let first: u64 = args.get(1).map_or(0, |s| s.parse().unwrap());
    let count: u64 = args.get(2).map_or(5, |s| s.parse().unwrap());
    let world: WorldParams = match args.get(3) {
        Some(j) => serde_json::from_str(j)?,
        None => WorldParams::default(),
    };
    let variants: [(&str, Mode, NegativeKind, usize); 5] = [
        ("baseline", Mode::Baseline, NegativeKind::General, 3),
        ("argue", Mode::Argue, NegativeKind::General, 3),
        ("argue_full", Mode::Argue, NegativeKind::General, 15),
        ("argue_n", Mode::ArgueN, NegativeKind::General, 3),
        ("argue_ns", Mode::ArgueN, NegativeKind::ClassSpecific, 3),
    ];
    let mut sums = vec![[0.0f64; 4]; variants.len()];
    let (mut cases, mut nv_cases) = (0usize, 0usize);
    for seed in first..first + count {
        let spec = TaskSpec {
            seed,
            world: world.clone(),
            ..TaskSpec::default()
        };
        let w = generate_task(&spec)?;
        let probe = TrainConfig {
            seed,
            mode: Mode::Argue,
            ..TrainConfig::default()
        };
        let sel = prepare_attributes(&probe, &w.task, &w.pool, &w.vocab, &w.encoders)?.unwrap();
        for (c, cs) in sel.classes.iter().enumerate() {
            cases += 1;
            if cs
                .selected
                .iter()
                .any(|a| w.task.truth.pool_kinds[c][a.pool_index] == DistractorKind::NonVisual)
            {
                nv_cases += 1;
            }
        }
        for (k, (name, mode, neg, clusters)) in variants.iter().enumerate() {
            let cfg = TrainConfig {
                seed,
                mode: *mode,
                negative: *neg,
                clusters: *clusters,
                ..TrainConfig::default()
            };
            let t = Instant::now();
            let (_, r) = run_experiment(&cfg, &w.task, &w.pool, &w.vocab, &w.encoders)?;
            let shuf = r.split("ood_shuffled_signature").unwrap().accuracy;
            println!(
                "seed {seed} {name:10} base {:6.2} new {:6.2} shuf {:6.2} ood {:6.2} ({:.1}s)",
                r.base_accuracy,
                r.new_accuracy,
                shuf,
                r.ood_mean,
                t.elapsed().as_secs_f64()
            );
            for (s, v) in
                sums[k]
                    .iter_mut()
                    .zip([r.base_accuracy, r.new_accuracy, shuf, r.ood_mean])
            {
                *s += v / count as f64;
            }
        }
    }
    for (k, (name, ..)) in variants.iter().enumerate() {
        let s = sums[k];
        println!(
            "mean {name:10} base {:6.2} new {:6.2} shuf {:6.2} ood {:6.2}",
            s[0], s[1], s[2], s[3]
        );
    }
    let g = |n: &str| sums[variants.iter().position(|v| v.0 == n).unwrap()];
    println!(
        "nv_free {:.3} margins c5a {:.2} c5b {:.2} c6 {:.2} c8shuf {:.2} c8mean {:.2} c9 {:.2}",
        1.0 - nv_cases as f64 / cases as f64,
        g("argue_n")[2] - g("baseline")[2] - 5.0,
        g("argue_ns")[2] - g("argue_n")[2] - 2.0,
        (g("argue")[0] + g("argue")[1]) / 2.0 - (g("argue_full")[0] + g("argue_full")[1]) / 2.0
            + 1.0,
        g("argue_n")[2] - g("argue")[2],
        g("argue_n")[3] - g("argue")[3],
        g("argue")[1] - g("baseline")[1] - 2.0,
    );
    Ok(())
}
