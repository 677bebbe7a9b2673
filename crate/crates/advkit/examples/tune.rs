// Scratch harness for sizing the acceptance experiments. Not part of the
// library surface; deleted once the numbers are frozen.

use std::time::Instant;

use advkit::attacks::{craft, AttackConfig};
use advkit::defenses::{adversarial_training, DefenseChain, DefenseStage};
use advkit::harness::generate_synthetic_dataset;
use advkit::metrics::psnr;
use advkit::models::{accuracy, train, ArchId, ConvNet, TrainHyper};
use advkit::oracle::LocalOracle;
use advkit::{
    run_with_oracle, AttackKind, AttackTemplate, DatasetSpec, ExperimentConfig, OracleSpec,
    SubstituteConfig,
};

#[derive(Clone, Copy)]
struct Knobs {
    classes: usize,
    size: usize,
    oracle_epochs: usize,
    oracle_per_class: usize,
    pretrain_classes: usize,
    head_epochs: usize,
}

fn knobs() -> Knobs {
    let arg = |i: usize, default: usize| -> usize {
        std::env::args()
            .nth(i)
            .and_then(|s| s.parse().ok())
            .unwrap_or(default)
    };
    Knobs {
        classes: arg(2, 10),
        size: arg(3, 16),
        oracle_epochs: arg(4, 10),
        oracle_per_class: arg(5, 24),
        pretrain_classes: arg(6, 3),
        head_epochs: arg(7, 25),
    }
}

fn oracle_model(k: Knobs) -> (ConvNet, Vec<String>) {
    let t0 = Instant::now();
    let data = generate_synthetic_dataset(k.classes, k.oracle_per_class, k.size, 501).unwrap();
    let mut net = ConvNet::new(ArchId::MiniResnet, (k.size, k.size), 3, k.classes, 502).unwrap();
    let hyper = TrainHyper {
        epochs: k.oracle_epochs,
        batch_size: 32,
        lr: 3e-3,
        seed: 503,
        ..TrainHyper::default()
    };
    train(&mut net, &data, &hyper, None).unwrap();
    let train_acc = accuracy(&net, &data).unwrap();
    let fresh = generate_synthetic_dataset(k.classes, 10, k.size, 777).unwrap();
    let fresh_acc = accuracy(&net, &fresh).unwrap();
    println!(
        "oracle: train acc {:.3}, fresh acc {:.3}, {:.1}s",
        train_acc,
        fresh_acc,
        t0.elapsed().as_secs_f64()
    );
    (net, data.class_names().to_vec())
}

fn per_class_for_100(classes: usize) -> usize {
    100usize.div_ceil(classes)
}

fn base_config(k: Knobs, epsilons: Vec<f64>, seed: u64) -> ExperimentConfig {
    let mut substitute = SubstituteConfig::default();
    substitute.pretrain_classes = k.pretrain_classes;
    substitute.head_hyper.epochs = k.head_epochs;
    ExperimentConfig {
        dataset: DatasetSpec::Synthetic {
            classes: k.classes,
            per_class: per_class_for_100(k.classes),
            size: k.size,
            seed: 777,
        },
        oracle: OracleSpec::Http {
            endpoint: "http://in-process.invalid".into(),
        },
        substitute,
        attacks: vec![
            AttackTemplate::new(AttackKind::Pgd),
            AttackTemplate::new(AttackKind::FflPgd),
        ],
        defense: None,
        epsilons,
        output_dir: "unused".into(),
        seed,
        parallelism: 1,
    }
}

fn stage_transfer(k: Knobs) {
    let (model, names) = oracle_model(k);
    let epsilons = vec![2.0, 4.0, 8.0];
    let mut sums: std::collections::BTreeMap<(String, u64), f64> = Default::default();
    for seed in [1u64, 2, 3] {
        let t0 = Instant::now();
        let config = base_config(k, epsilons.clone(), seed);
        let oracle = LocalOracle::new(model.clone(), names.clone()).unwrap();
        let report = run_with_oracle(&config, &oracle).unwrap();
        println!(
            "seed {seed}: agreement {:?}, {:.1}s",
            report.substitute_agreement,
            t0.elapsed().as_secs_f64()
        );
        for agg in &report.aggregates {
            println!(
                "  {:8} eps {:3}: escape {:5.3} psnr {:6.2} ssim {:?}",
                agg.attack.as_str(),
                agg.epsilon,
                agg.escape_rate,
                agg.mean_psnr_db,
                agg.mean_ssim.map(|v| (v * 1000.0).round() / 1000.0)
            );
            *sums
                .entry((agg.attack.as_str().to_string(), agg.epsilon as u64))
                .or_default() += agg.escape_rate;
        }
    }
    for eps in [2u64, 4, 8] {
        let pgd = sums[&("pgd".to_string(), eps)] / 3.0;
        let ffl = sums[&("ffl-pgd".to_string(), eps)] / 3.0;
        println!(
            "MEAN eps {eps}: pgd {pgd:.4} ffl {ffl:.4} edge {:+.4} (ok>= {}, strict {})",
            ffl - pgd,
            ffl >= pgd - 0.02,
            ffl > pgd
        );
    }
}

fn stage_ensemble(k: Knobs) {
    let data = generate_synthetic_dataset(k.classes, k.oracle_per_class, k.size, 501).unwrap();
    let mut a = ConvNet::new(ArchId::MiniResnet, (k.size, k.size), 3, k.classes, 11).unwrap();
    let mut b = ConvNet::new(ArchId::CnnB, (k.size, k.size), 3, k.classes, 12).unwrap();
    let hyper = TrainHyper {
        epochs: k.oracle_epochs,
        batch_size: 32,
        lr: 3e-3,
        seed: 13,
        ..TrainHyper::default()
    };
    train(&mut a, &data, &hyper, None).unwrap();
    train(&mut b, &data, &hyper, None).unwrap();
    let eval = generate_synthetic_dataset(k.classes, per_class_for_100(k.classes), k.size, 777)
        .unwrap();
    for (eps, alpha) in [(1.0, 1.0)] {
        let mut means = Vec::new();
        let mut advs: Vec<Vec<advkit::Image>> = Vec::new();
        for steps in [10usize, 50, 200] {
            let t0 = Instant::now();
            let config = AttackConfig::ensemble(eps)
                .with_alpha(alpha)
                .with_steps(steps);
            let mut sum = 0.0;
            let mut batch = Vec::new();
            for (img, &label) in eval.images().iter().zip(eval.labels()) {
                let r = craft(&[&a, &b], img, label, &config).unwrap();
                sum += psnr(&r.adversarial, img).unwrap();
                batch.push(r.adversarial);
            }
            let mean = sum / eval.images().len() as f64;
            means.push(mean);
            advs.push(batch);
            println!(
                "  eps {eps} alpha {alpha} T {steps:3}: mean psnr {mean:.6} ({:.1}s)",
                t0.elapsed().as_secs_f64()
            );
        }
        let same_50 = advs[0]
            .iter()
            .zip(&advs[1])
            .filter(|(x, y)| x.pixels() == y.pixels())
            .count();
        let same_200 = advs[0]
            .iter()
            .zip(&advs[2])
            .filter(|(x, y)| x.pixels() == y.pixels())
            .count();
        let nondecreasing = means.windows(2).all(|w| w[1] >= w[0]);
        println!(
            "  -> nondecreasing: {nondecreasing}, identical 10v50 {same_50}/{} 10v200 {same_200}/{}",
            eval.images().len(),
            eval.images().len()
        );
    }
}

fn stage_jpeg(k: Knobs) {
    use advkit::defenses::DefendedOracle;
    use advkit::oracle::Oracle;
    let per_class: usize = std::env::args()
        .nth(8)
        .and_then(|s| s.parse().ok())
        .unwrap_or_else(|| per_class_for_100(k.classes));
    let (model, names) = oracle_model(k);
    let eval = generate_synthetic_dataset(k.classes, per_class, k.size, 777).unwrap();
    let attack = AttackConfig::ffl_pgd(2.0);

    let escape_through = |oracle: &dyn Oracle, tag: &str| -> f64 {
        let mut flips = 0usize;
        for (i, img) in eval.images().iter().enumerate() {
            let id = format!("{tag}-{i:04}");
            let clean = oracle.classify(img, &id).unwrap().label;
            let t = model.predict(img).unwrap();
            let r = craft(&[&model], img, t, &attack).unwrap();
            let adv = oracle.classify(&r.adversarial, &id).unwrap().label;
            if adv != clean {
                flips += 1;
            }
        }
        flips as f64 / eval.images().len() as f64
    };

    let raw = LocalOracle::new(model.clone(), names.clone()).unwrap();
    let base_escape = escape_through(&raw, "base");
    let defended = DefendedOracle::new(
        LocalOracle::new(model.clone(), names.clone()).unwrap(),
        DefenseChain {
            stages: vec![DefenseStage::Jpeg { quality: 75 }],
            seed: 0,
        },
    );
    let defended_escape = escape_through(&defended, "jpeg");
    let rel = if base_escape > 0.0 {
        (base_escape - defended_escape) / base_escape
    } else {
        f64::NAN
    };
    println!(
        "white-box ffl jpeg75 @ eps 2 on {} images: base {base_escape:.3} defended {defended_escape:.3} relative cut {rel:.3}",
        eval.images().len()
    );
}

fn stage_advtrain(k: Knobs) {
    let data = generate_synthetic_dataset(k.classes, k.oracle_per_class, k.size, 501).unwrap();
    let hyper = TrainHyper {
        epochs: k.oracle_epochs,
        batch_size: 32,
        lr: 3e-3,
        seed: 503,
        ..TrainHyper::default()
    };
    let train_steps: usize = std::env::args()
        .nth(8)
        .and_then(|s| s.parse().ok())
        .unwrap_or(5);
    for eps_t in [4.0, 8.0] {
        let t0 = Instant::now();
        let mut plain = ConvNet::new(ArchId::MiniResnet, (k.size, k.size), 3, k.classes, 502).unwrap();
        train(&mut plain, &data, &hyper, None).unwrap();
        let train_attack = AttackConfig::pgd(eps_t).with_steps(train_steps);
        let (hardened, _) =
            adversarial_training(ArchId::MiniResnet, &data, &train_attack, &hyper).unwrap();

        let eval = generate_synthetic_dataset(k.classes, 10, k.size, 888).unwrap();
        let plain_acc = accuracy(&plain, &eval).unwrap();
        let hard_acc = accuracy(&hardened, &eval).unwrap();

        let attack = AttackConfig::pgd(eps_t);
        let escape = |net: &ConvNet| -> f64 {
            let mut hits = 0usize;
            for img in eval.images() {
                let label = net.predict(img).unwrap();
                let r = craft(&[net], img, label, &attack).unwrap();
                if r.success {
                    hits += 1;
                }
            }
            hits as f64 / eval.images().len() as f64
        };
        let plain_escape = escape(&plain);
        let hard_escape = escape(&hardened);
        println!(
            "adv-train eps {eps_t}: clean {plain_acc:.3} -> {hard_acc:.3}, white-box escape {plain_escape:.3} -> {hard_escape:.3} ({:.0}s)",
            t0.elapsed().as_secs_f64()
        );
    }
}

fn main() {
    let stage = std::env::args().nth(1).unwrap_or_else(|| "transfer".into());
    let k = knobs();
    println!(
        "knobs: classes {} size {} oracle_epochs {} oracle_per_class {} pretrain_classes {} head_epochs {}",
        k.classes, k.size, k.oracle_epochs, k.oracle_per_class, k.pretrain_classes, k.head_epochs
    );
    let t0 = Instant::now();
    match stage.as_str() {
        "transfer" => stage_transfer(k),
        "ensemble" => stage_ensemble(k),
        "jpeg" => stage_jpeg(k),
        "advtrain" => stage_advtrain(k),
        other => panic!("unknown stage {other}"),
    }
    println!("stage {stage} total {:.1}s", t0.elapsed().as_secs_f64());
}
