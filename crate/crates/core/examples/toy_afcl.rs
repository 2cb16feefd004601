//! Desk-scale asynchronous continual run on Gaussian blobs, comparing
//! FedSpace against FedAvg and two ablations.
//!
//! `cargo run --release -p fedspace --example toy_afcl -- [seeds] [rounds]`

use fedspace::data::GaussianBlobs;
use fedspace::nn::{EncoderArch, LrSchedule};
use fedspace::orchestrator::{run_simulation, AblationFlags, SimConfig};
use fedspace::splitgen::{generate_split, SplitConfig};

fn main() -> fedspace::Result<()> {
    env_logger::init();
    let args: Vec<String> = std::env::args().collect();
    let seeds: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let rounds: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(300);
    let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let noise: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(0.5);
    let epochs: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(1);
    let variants: [(&str, AblationFlags, f64, f64); 4] = [
        ("fedspace", AblationFlags { pretrain: false, ..Default::default() }, 1e-2, 1e-2),
        ("fedavg", AblationFlags::none(), 0.0, 0.0),
        ("no_proto_aggr", AblationFlags { pretrain: false, proto_aggr: false, ..Default::default() }, 1e-2, 1e-2),
        ("no_server_aggr", AblationFlags { pretrain: false, server_aggr: false, ..Default::default() }, 1e-2, 1e-2),
    ];
    let mut totals = [0.0; 4];
    for seed in 0..seeds {
        let blobs = GaussianBlobs { num_classes: 20, dim: 16, train_per_class: 200, test_per_class: 100, noise_std: noise, seed, ..Default::default() };
        let (train, test) = blobs.generate()?;
        let split_cfg = SplitConfig { n_clients: 10, num_tasks: 4, classes_per_task: 5, total_rounds: rounds, seed, ..Default::default() };
        let split = generate_split(&train, &split_cfg)?;
        for (v, (name, flags, lp, lr_w)) in variants.iter().enumerate() {
            let cfg = SimConfig {
                total_rounds: rounds,
                clients_per_round: 3,
                lambda_p: *lp,
                lambda_r: *lr_w,
                flags: *flags,
                seed,
                local_epochs: epochs,
                eval_period: rounds,
                schedule: LrSchedule { base_lr: lr, halve_every: 1000 },
                encoder: EncoderArch::Mlp { input_dim: 16, hidden: vec![64], feature_dim: 32, final_relu: true },
                ..Default::default()
            };
            let t = std::time::Instant::now();
            let out = run_simulation(&cfg, &split, &train, &test, None)?;
            let acc = out.logs.last().and_then(|l| l.accuracy).unwrap_or(0.0);
            totals[v] += acc / seeds as f64;
            println!("seed {seed} {name:>15}: {acc:.4} ({:.1}s)", t.elapsed().as_secs_f64());
        }
    }
    for ((name, ..), t) in variants.iter().zip(totals) {
        println!("mean {name:>15}: {t:.4}");
    }
    Ok(())
}
