//! Seeded pilot over the synthetic 6-class, 3-task session.
//!
//! Runs the full model, its student, the naive fine-tuning baseline and the
//! three prefix initializations for every seed, then prints a JSON summary.
//! `cargo run --release -p csicl-core --example pilot > pilot.json`

use csicl_core::data::{generate, make_schedule, Regime, SynthConfig};
use csicl_core::model::PrefixInit;
use csicl_core::trainer::{run_session, SessionOptions, TrainConfig};
use serde_json::json;

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn main() -> csicl_core::Result<()> {
    let seeds: Vec<u64> = match std::env::args().nth(1) {
        Some(s) => s
            .split(',')
            .map(|v| v.parse().expect("seed list like 0,1,2"))
            .collect(),
        None => (0..5).collect(),
    };
    let schedule = make_schedule(6, &Regime::Long { task_size: Some(2) })?;
    let mut rows = Vec::new();
    let mut cols: [Vec<f64>; 9] = Default::default();
    for &seed in &seeds {
        let data = generate(&SynthConfig {
            seed,
            ..SynthConfig::default()
        })?;
        let cfg = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        let (train, test) = data.split(cfg.train_ratio);
        let opts = SessionOptions {
            distill: true,
            naive: true,
        };
        let report = run_session(&train, &test, &schedule, &cfg, opts, |_| Ok(()))?;
        let lwm = report.lwm.as_ref().expect("distillation enabled");
        let naive = report.naive.as_ref().expect("baseline enabled");

        let mut ablation = Vec::new();
        for init in [PrefixInit::Adapter, PrefixInit::Zero, PrefixInit::Random] {
            let mut c = cfg.clone();
            c.model.prefix_init = init;
            let opts = SessionOptions {
                distill: false,
                naive: false,
            };
            let r = run_session(&train, &test, &schedule, &c, opts, |_| Ok(()))?;
            ablation.push(r.fsm.average_accuracy);
        }
        let values = [
            report.fsm.forgetting.unwrap_or(0.0),
            naive.forgetting.unwrap_or(0.0),
            report.fsm.alpha[2][0],
            naive.alpha[2][0],
            report.fsm.average_accuracy,
            lwm.average_accuracy,
            ablation[0],
            ablation[1],
            ablation[2],
        ];
        for (c, v) in cols.iter_mut().zip(values) {
            c.push(v);
        }
        eprintln!("seed {seed}: {values:?}");
        rows.push(json!({
            "seed": seed,
            "fsm_forgetting": values[0],
            "naive_forgetting": values[1],
            "fsm_task1_final": values[2],
            "naive_task1_final": values[3],
            "fsm_avg": values[4],
            "lwm_avg": values[5],
            "prefix_a_avg": values[6],
            "prefix_z_avg": values[7],
            "prefix_r_avg": values[8],
            "fsm_params": report.fsm.params,
            "lwm_params": lwm.params,
        }));
    }
    let out = json!({
        "seeds": seeds,
        "runs": rows,
        "mean": {
            "fsm_forgetting": mean(&cols[0]),
            "naive_forgetting": mean(&cols[1]),
            "fsm_task1_final": mean(&cols[2]),
            "naive_task1_final": mean(&cols[3]),
            "fsm_avg": mean(&cols[4]),
            "lwm_avg": mean(&cols[5]),
            "prefix_a_avg": mean(&cols[6]),
            "prefix_z_avg": mean(&cols[7]),
            "prefix_r_avg": mean(&cols[8]),
        }
    });
    println!("{}", serde_json::to_string_pretty(&out).expect("json"));
    Ok(())
}
