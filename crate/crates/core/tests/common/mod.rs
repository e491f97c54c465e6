#![allow(dead_code)]

use crossx_core::config::CrossXConfig;

/// A model and dataset small enough for runs in well under a second.
pub fn tiny_config() -> CrossXConfig {
    let mut cfg = CrossXConfig::default();
    let pairs: Vec<(String, String)> = [
        ("stage_channels", "4,8"),
        ("reduction", "2"),
        ("image_size", "16"),
        ("classes", "3"),
        ("train_per_class", "4"),
        ("val_per_class", "2"),
        ("test_per_class", "2"),
        ("batch_size", "4"),
        ("epochs", "2"),
    ]
    .iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect();
    cfg.apply_pairs(&pairs).expect("valid tiny config");
    cfg
}

pub fn with(mut cfg: CrossXConfig, pairs: &[(&str, &str)]) -> CrossXConfig {
    let pairs: Vec<(String, String)> = pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
    cfg.apply_pairs(&pairs).expect("valid override");
    cfg
}
