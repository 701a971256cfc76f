//! Trains vanilla and regularised instruction tuning on the default world and prints the trajectory summaries.
//!
//! Usage: `cargo run --release --example dynamics -- [n_examples] [epochs] [alpha_start]`

use std::time::Instant;

use biaslab::data::{generate_vit_corpus, WorldConfig};
use biaslab::model::{Model, ModelConfig, ParamSnapshot};
use biaslab::objectives::LbrVariant;
use biaslab::refcache::LiveReference;
use biaslab::report::{summarize, to_table, DEFAULT_TAIL};
use biaslab::train::{train_vit, ScheduleSpec, TrainConfig};

fn main() -> biaslab::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let n: usize = args.first().map_or(6400, |s| s.parse().unwrap());
    let epochs: usize = args.get(1).map_or(5, |s| s.parse().unwrap());
    let alpha: f64 = args.get(2).map_or(1.0, |s| s.parse().unwrap());

    let env = |k: &str, d: f64| std::env::var(k).ok().map_or(d, |v| v.parse().unwrap());
    let world = WorldConfig {
        feature_noise_sigma: env("SIGMA", 0.1),
        ..WorldConfig::default()
    };
    let only_vanilla = std::env::var("ONLY_VANILLA").is_ok();
    let only_lbr = std::env::var("ONLY_LBR").is_ok();
    let examples = generate_vit_corpus(&world, n, 0)?;
    let init = ParamSnapshot::capture(&Model::<f32>::init(ModelConfig::default(), 0)?);
    let reference = LiveReference::<f32>::new(&init)?;
    for a in [0.0, alpha] {
        if (only_vanilla && a != 0.0) || (only_lbr && a == 0.0) {
            continue;
        }
        let cfg = TrainConfig {
            epochs,
            alpha_schedule: if a == 0.0 {
                ScheduleSpec::fixed(0.0)
            } else {
                ScheduleSpec::cosine(a, a / 100.0)
            },
            learning_rate: env("LR", 3e-4),
            ..TrainConfig::desk_vit()
        };
        let mut cfg = cfg;
        cfg.objective.lbr_variant = LbrVariant::L1;
        let t = Instant::now();
        let out = train_vit(&cfg, &examples, &init, &reference)?;
        println!("alpha {a}: {} steps in {:?}", out.log.len(), t.elapsed());
        if let Ok(dir) = std::env::var("DYNAMICS_OUT") {
            out.snapshot
                .save(&std::path::Path::new(&dir).join(format!("vit-alpha-{a}.snap")))?;
        }
        print!("{}", to_table(&summarize(&out.log, DEFAULT_TAIL)));
        for r in out.log.iter().step_by(out.log.len() / 10) {
            println!(
                "  step {:>5} R {:>9.3} B {:>9.3} loss {:.3}",
                r.step,
                r.reward,
                r.bias,
                r.loss.as_ref().unwrap().total
            );
        }
    }
    Ok(())
}
