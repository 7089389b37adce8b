//! Temporary controlled probe; delete before finishing.
mod common;

use supmoco_core::analysis::{run_collapse_analysis, RetrievalSpec};
use supmoco_core::data::{mask_labels, BatchMixing, Dataset, LabelFractions};
use supmoco_core::encoder::{init_pair, EncoderConfig, EncoderParams};
use supmoco_core::rng::SeededRng;
use supmoco_core::trainer::{LossVariant, TrainConfig, Trainer};
use supmoco_core::data::{generate_synthetic, SplitFractions, SyntheticSpec, AugmentationSpec};

struct Knobs {
    sigma: f64,
    dos: f64,
    peak_lr: f64,
    epochs: usize,
    tau: f64,
    wd: f64,
}

fn spec(domains: usize, k: &Knobs, dim: usize, cpd: usize) -> SyntheticSpec {
    SyntheticSpec {
        domains,
        classes_per_domain: cpd,
        samples_per_class: 48,
        input_dim: dim,
        domain_offset_scale: k.dos,
        class_center_scale: 1.0,
        within_class_sigma: k.sigma,
        splits: SplitFractions { train: 2.0 / 3.0, val: 0.0, test: 1.0 / 3.0 },
    }
}

fn encoder(dim: usize, hidden: &[usize], out: usize) -> EncoderConfig {
    EncoderConfig { input_dim: dim, backbone_hidden: hidden.to_vec(), backbone_out: out, proj_hidden: 16, proj_out: 8 }
}

fn train(dataset: &Dataset, variant: LossVariant, positives: usize, mixing: BatchMixing, seed: u64, k: &Knobs, config: &EncoderConfig) -> EncoderParams {
    let tc = TrainConfig {
        epochs: k.epochs, steps_per_epoch: 30, batch_size: 16, positives,
        temperature: k.tau, queue_capacity: 256, encoder_momentum: 0.99,
        base_lr: 0.03, peak_lr: k.peak_lr, warmup_epochs: (k.epochs - 1).min(2), sgd_momentum: 0.9,
        weight_decay: k.wd, seed, mixing, variant,
        augment: AugmentationSpec { noise_sigma: 0.1, scale_jitter: (0.9, 1.1), dropout_prob: 0.05 },
    };
    let mut t = Trainer::new(config, tc).unwrap();
    t.run_to_completion(dataset).unwrap();
    t.pair.query.clone()
}

#[test]
fn probe_c12_geometry() {
    let grids: [(&str, usize, f64); 4] = [
        ("dom16-s0.8", 16, 0.8),
        ("dom16-s1.0", 16, 1.0),
        ("dom32-s0.8", 32, 0.8),
        ("dom32-s1.0", 32, 1.0),
    ];
    for (tag, domains, sigma) in grids {
        let rspec = RetrievalSpec { per_class_samples: 20, query_count: 200, k: 9 };
        let knobs = Knobs { sigma, dos: 2.0, peak_lr: 0.15, epochs: 15, tau: 0.1, wd: 1e-4 };
        let dim = 16;
        let cfg = encoder(dim, &[32], 16);
        let mut t_sum = 0.0;
        let mut r_sum = 0.0;
        for seed in [21u64, 22] {
            let root = SeededRng::new(1_200 + seed);
            let full = generate_synthetic(&spec(domains, &knobs, dim, 12), &mut root.substream("data")).unwrap();
            let d = full.clone();
            let trained = train(&d, LossVariant::SupMoco, 3, BatchMixing::Impure, seed, &knobs, &cfg);
            let random = init_pair(&cfg, 0.99, &mut SeededRng::new(31_000 + seed)).unwrap().query;
            let t = run_collapse_analysis(&full, &trained, &rspec, 77_000 + seed).unwrap();
            let r = run_collapse_analysis(&full, &random, &rspec, 77_000 + seed).unwrap();
            eprintln!(
                "  {tag} seed={seed}: trained={:.1} random={:.1} gap={:+.1}",
                100.0 * t.frac_ge1_same_test_class,
                100.0 * r.frac_ge1_same_test_class,
                100.0 * (t.frac_ge1_same_test_class - r.frac_ge1_same_test_class)
            );
            t_sum += t.frac_ge1_same_test_class;
            r_sum += r.frac_ge1_same_test_class;
        }
        eprintln!(
            "{tag}: trained={:.1} random={:.1} gap={:+.1}",
            100.0 * t_sum / 2.0,
            100.0 * r_sum / 2.0,
            100.0 * (t_sum - r_sum) / 2.0
        );
    }
}
