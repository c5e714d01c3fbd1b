use std::time::Instant;

use surfcomp_core::completion::{complete, CompletionConfig};
use surfcomp_core::evalbench::{make_benchmark, run_benchmark, IcpConfig};
use surfcomp_core::gcvae::{autoencode_loss, train, Architecture, OnlineAugment, SpectralAugmentCfg, TrainConfig};
use surfcomp_core::mesh::icosphere;
use surfcomp_core::spectral::{synth_population, PerturbRanges};

fn desk_arch() -> Architecture {
    Architecture {
        channels: vec![16, 32],
        latent: 16,
        m: 8,
        ..Architecture::default()
    }
}

fn main() {
    let which = std::env::args().nth(1).unwrap_or_else(|| "overfit".into());
    match which.as_str() {
        "overfit" => overfit(),
        "ablate" => ablate(),
        "bench" => bench(),
        other => eprintln!("unknown mode {other}"),
    }
}

fn overfit() {
    let base = icosphere(2).unwrap();
    let pop = synth_population(&base, 10, &PerturbRanges::default(), 99).unwrap();
    for (lr, batch, epochs, wide) in [
        (2e-3, 5usize, 300usize, false),
        (2e-3, 10, 300, false),
        (2e-3, 5, 300, true),
        (3e-3, 5, 300, true),
        (1e-3, 5, 300, true),
    ] {
        let mut arch = desk_arch();
        if wide {
            arch.channels = vec![24, 48];
        }
        let cfg = TrainConfig {
            epochs,
            learning_rate: lr,
            kl_weight: 1e-6,
            batch_size: batch,
            architecture: arch,
            seed: 7,
            online_augment: None,
            spectral_augment: None,
        };
        let t0 = Instant::now();
        let (_model, log) = train(&pop, &cfg).unwrap();
        let last = log.last().unwrap();
        println!(
            "overfit lr={lr} batch={batch} epochs={epochs} wide={wide}: recon {:.3e} kl {:.3e} in {:.1?}",
            last.recon, last.kl, t0.elapsed()
        );
    }
}

fn ablate() {
    let base = icosphere(2).unwrap();
    let pop = synth_population(&base, 20, &PerturbRanges::default(), 4242).unwrap();
    let (train_set, holdout) = pop.split_at(15);
    for seed in [1u64, 2, 3] {
        for aug in [false, true] {
            let cfg = TrainConfig {
                epochs: 25,
                learning_rate: 1e-3,
                kl_weight: 1e-6,
                batch_size: 20,
                architecture: desk_arch(),
                seed,
                online_augment: aug.then(OnlineAugment::default),
                spectral_augment: aug.then(|| SpectralAugmentCfg {
                    variants: 6,
                    ranges: PerturbRanges::default(),
                }),
            };
            let t0 = Instant::now();
            let (model, log) = train(train_set, &cfg).unwrap();
            let hold: f64 = holdout
                .iter()
                .map(|m| autoencode_loss(&model, m).unwrap())
                .sum::<f64>()
                / holdout.len() as f64;
            println!(
                "ablate seed={seed} aug={aug}: holdout {:.4e} (train recon {:.4e}) in {:.1?}",
                hold,
                log.last().unwrap().recon,
                t0.elapsed()
            );
        }
    }
}

fn bench() {
    let base = icosphere(2).unwrap();
    let pop = synth_population(&base, 25, &PerturbRanges::default(), 777).unwrap();
    let (train_set, test_set) = pop.split_at(20);
    for (variants, epochs, wide) in [(20usize, 60usize, false), (20, 60, true)] {
        let mut arch = desk_arch();
        if wide {
            arch.channels = vec![24, 48];
        }
        let cfg = TrainConfig {
            epochs,
            learning_rate: 1e-3,
            kl_weight: 1e-6,
            batch_size: 20,
            architecture: arch,
            seed: 5,
            online_augment: Some(OnlineAugment::default()),
            spectral_augment: Some(SpectralAugmentCfg {
                variants,
                ranges: PerturbRanges::default(),
            }),
        };
        let t0 = Instant::now();
        let (model, log) = train(train_set, &cfg).unwrap();
        let hold: f64 = test_set
            .iter()
            .map(|m| autoencode_loss(&model, m).unwrap())
            .sum::<f64>()
            / test_set.len() as f64;
        println!(
            "model variants={variants} epochs={epochs} wide={wide}: train recon {:.3e}, holdout {:.3e}, in {:.0?}",
            log.last().unwrap().recon,
            hold,
            t0.elapsed()
        );
        for (dname, deform) in [
            ("mild", PerturbRanges { low: [0.9, 1.1], high: [0.85, 1.15], high_index_cap: 30 }),
            ("strong", PerturbRanges { low: [0.8, 1.2], high: [0.65, 1.35], high_index_cap: 30 }),
        ] {
            let cases = make_benchmark(test_set, &deform, 2024, 60).unwrap();
            let completion_cfg = CompletionConfig::default();
            let icp_cfg = IcpConfig::default();
            let t1 = Instant::now();
            let (_reports, summary) = run_benchmark(&model, &cases, &completion_cfg, &icp_cfg).unwrap();
            println!(
                "  deform={dname}: wins {}/{} (proposed {:.3e} vs icp {:.3e} visible; {:.3e} vs {:.3e} invisible) in {:.0?}",
                summary.proposed_wins_visible,
                summary.total_cases,
                summary.mean_visible_proposed,
                summary.mean_visible_baseline,
                summary.mean_invisible_proposed,
                summary.mean_invisible_baseline,
                t1.elapsed()
            );
        }
    }
}
