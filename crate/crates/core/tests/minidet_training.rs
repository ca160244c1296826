use mplab_core::minidet::{train, ModelConfig, PoolingVariant, TrainConfig};
use mplab_core::scenegen::{generate_dataset, GeneratorConfig};
use mplab_core::tensor::OptimizerConfig;

fn subset() -> mplab_core::scenegen::Dataset {
    generate_dataset(&GeneratorConfig {
        n_images: 16,
        image_size: 64,
        object_size: (12, 24),
        objects_per_image: (1, 3),
        seed: 21,
        ..Default::default()
    })
    .unwrap()
}

fn config(variant: PoolingVariant) -> ModelConfig {
    ModelConfig {
        pooling_variant: variant,
        image_size: 64,
        ..Default::default()
    }
}

#[test]
fn overfits_sixteen_images_for_every_variant() {
    let ds = subset();
    let schedule = TrainConfig {
        iterations: 500,
        batch_size: 8,
        seed: 5,
        log_every: 50,
    };
    for variant in PoolingVariant::ALL {
        let out = train(&ds, &config(variant), &OptimizerConfig::default(), &schedule).unwrap();
        let first = out.losses[0];
        let tail = &out.losses[out.losses.len() - 50..];
        let last = tail.iter().sum::<f64>() / tail.len() as f64;
        assert!(
            last <= 0.5 * first,
            "{}: loss {first:.4} -> {last:.4} is less than a 50% drop",
            variant.name()
        );
        assert_eq!(out.log.len(), 10);
    }
}

#[test]
fn same_seed_gives_same_final_loss() {
    let ds = subset();
    let schedule = TrainConfig {
        iterations: 40,
        batch_size: 4,
        seed: 8,
        log_every: 10,
    };
    let cfg = config(PoolingVariant::Mask);
    let a = train(&ds, &cfg, &OptimizerConfig::default(), &schedule).unwrap();
    let b = train(&ds, &cfg, &OptimizerConfig::default(), &schedule).unwrap();
    assert!((a.losses.last().unwrap() - b.losses.last().unwrap()).abs() < 1e-6);
    assert_eq!(a.checkpoint, b.checkpoint);
}
