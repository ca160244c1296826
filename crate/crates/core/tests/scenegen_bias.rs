use mplab_core::scenegen::{generate_dataset, BiasSpec, GeneratorConfig};

/// Chi-square critical value for 3 degrees of freedom at p = 0.01.
const CHI2_DF3_P01: f64 = 11.345;

fn texture_counts(bias: BiasSpec, seed: u64) -> Vec<[u64; 4]> {
    let ds = generate_dataset(&GeneratorConfig {
        n_images: 2000,
        image_size: 64,
        object_size: (10, 16),
        bias,
        seed,
        ..Default::default()
    })
    .unwrap();
    let mut counts = vec![[0u64; 4]; 3];
    for r in &ds.records {
        for inst in &r.instances {
            counts[inst.class_id][inst.texture_id.expect("generated instances carry a texture")] += 1;
        }
    }
    counts
}

#[test]
fn uniform_bias_passes_chi_square_per_class() {
    for (class, row) in texture_counts(BiasSpec::uniform(3, 4), 11).iter().enumerate() {
        let n: u64 = row.iter().sum();
        let expected = n as f64 / 4.0;
        let chi2: f64 = row.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < CHI2_DF3_P01, "class {class}: chi2 {chi2:.3} counts {row:?}");
    }
}

#[test]
fn diagonal_bias_concentrates_on_one_texture() {
    for (class, row) in texture_counts(BiasSpec::diagonal(3, 4, 0.85).unwrap(), 12).iter().enumerate() {
        let n: u64 = row.iter().sum();
        let share = row[class] as f64 / n as f64;
        // 0.85 with a generous binomial margin for ~1500 draws
        assert!((share - 0.85).abs() < 0.04, "class {class}: share {share:.3}");
    }
}
