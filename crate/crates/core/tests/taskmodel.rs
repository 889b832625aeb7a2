use pdsm_core::numcore::{rng_derive, Tensor3};
use pdsm_core::synthsite::{render_image, SiteProfile};
use pdsm_core::taskmodel::{
    finetune, pretrain, training_mse, Architecture, Lineage, TaskNetwork, TrainConfig, TrainSample, FEATURE_WIDTH,
};

fn images(n: usize, size: usize, site: &SiteProfile, seed: u64) -> Vec<(String, Tensor3<f32>, f64)> {
    let mut rng = rng_derive(seed, 0);
    (0..n)
        .map(|i| {
            let s = rng.uniform(0.5, 3.5);
            (
                format!("I{i:03}"),
                render_image(s, site, 6, size, seed * 1000 + i as u64).unwrap(),
                s,
            )
        })
        .collect()
}

fn samples(data: &[(String, Tensor3<f32>, f64)]) -> Vec<TrainSample<'_>> {
    data.iter()
        .map(|(id, image, target)| TrainSample {
            id,
            image,
            target: *target,
        })
        .collect()
}

#[test]
fn constant_target_is_fitted() {
    let data: Vec<_> = images(32, 32, &SiteProfile::neutral("S", 0.02), 1)
        .into_iter()
        .map(|(id, img, _)| (id, img, 2.0))
        .collect();
    let config = TrainConfig {
        epochs: 50,
        ..TrainConfig::pretrain_default(3)
    };
    let net = TaskNetwork::init(Architecture::standard(6, 32), 3).unwrap();
    let (net, report) = pretrain(net, &samples(&data), &config).unwrap();
    assert!(report.final_mse < 0.01, "final MSE {}", report.final_mse);
    for (_, img, _) in &data {
        assert!((net.predict_qsteatosis(img).unwrap() - 2.0).abs() < 0.2);
    }
}

#[test]
fn zero_epochs_keep_the_initialization() {
    let data = images(6, 16, &SiteProfile::neutral("S", 0.02), 2);
    let init = TaskNetwork::init(Architecture::standard(6, 16), 5).unwrap();
    let config = TrainConfig {
        epochs: 0,
        ..TrainConfig::pretrain_default(5)
    };
    let (net, _) = pretrain(init.clone(), &samples(&data), &config).unwrap();
    assert_eq!(net.params(), init.params());

    let ft = TrainConfig {
        epochs: 0,
        ..TrainConfig::finetune_default(5)
    };
    let (tuned, _) = finetune(&net, &samples(&data), &ft, 0, 4).unwrap();
    assert_eq!(tuned.params(), net.params());
    assert_eq!(
        tuned.lineage(),
        &Lineage::Finetuned {
            domain: 0,
            fallback: false
        }
    );
}

#[test]
fn repeated_training_is_bit_identical() {
    let data = images(10, 16, &SiteProfile::neutral("S", 0.02), 3);
    let config = TrainConfig {
        epochs: 3,
        ..TrainConfig::pretrain_default(8)
    };
    let run = || {
        let net = TaskNetwork::init(Architecture::standard(6, 16), 8).unwrap();
        pretrain(net, &samples(&data), &config).unwrap()
    };
    let (a, ra) = run();
    let (b, rb) = run();
    assert_eq!(a, b);
    assert_eq!(ra, rb);
}

#[test]
fn finetuning_adapts_to_a_shifted_site() {
    let neutral = SiteProfile::neutral("A", 0.02);
    let shifted = SiteProfile {
        gain: 1.4,
        gamma: 0.7,
        blur_sigma: 1.0,
        ..SiteProfile::neutral("B", 0.04)
    };
    let pool = images(40, 16, &neutral, 4);
    let config = TrainConfig {
        epochs: 15,
        ..TrainConfig::pretrain_default(6)
    };
    let net = TaskNetwork::init(Architecture::standard(6, 16), 6).unwrap();
    let (base, _) = pretrain(net, &samples(&pool), &config).unwrap();

    let domain = images(12, 16, &shifted, 5);
    let before = training_mse(&base, &samples(&domain)).unwrap();
    let snapshot = base.clone();
    let (tuned, report) = finetune(&base, &samples(&domain), &TrainConfig::finetune_default(7), 1, 4).unwrap();
    assert_eq!(base, snapshot, "the base network must not change");
    assert!(report.final_mse < before, "{} !< {before}", report.final_mse);
    assert_eq!(tuned.target_standardization(), base.target_standardization());

    let (fallback, _) = finetune(&base, &samples(&domain[..2]), &TrainConfig::finetune_default(7), 2, 4).unwrap();
    assert!(fallback.is_fallback());
    assert_eq!(fallback.params(), base.params());
}

#[test]
fn features_and_prediction_agree() {
    let data = images(3, 64, &SiteProfile::neutral("S", 0.02), 6);
    let net = TaskNetwork::init(Architecture::standard(6, 64), 9).unwrap();
    let (w, b) = net.effective_head();
    for (id, img, _) in &data {
        let f = net.extract_features(img, id).unwrap();
        assert_eq!(f.values.len(), FEATURE_WIDTH);
        assert_eq!(&f.image_id, id);
        let manual = b + w.iter().zip(&f.values).map(|(w, &v)| w * v as f64).sum::<f64>();
        assert!((net.predict_qsteatosis(img).unwrap() - manual).abs() < 1e-5);
    }
}

#[test]
fn saved_network_predicts_identically() {
    let data = images(4, 16, &SiteProfile::neutral("S", 0.02), 7);
    let net = TaskNetwork::init(Architecture::standard(6, 16), 2).unwrap();
    let (net, _) = pretrain(
        net,
        &samples(&data),
        &TrainConfig {
            epochs: 2,
            ..TrainConfig::pretrain_default(2)
        },
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    net.save(dir.path()).unwrap();
    let back = TaskNetwork::load(dir.path()).unwrap();
    assert_eq!(back, net);
    for (_, img, _) in &data {
        assert_eq!(
            back.predict_qsteatosis(img).unwrap(),
            net.predict_qsteatosis(img).unwrap()
        );
    }
}
