#![allow(dead_code)]

use std::collections::BTreeMap;

use ggiu_core::synth::{SynthJob, SyntheticDataset};

const REGIMES: &str = include_str!("../fixtures/regimes.json");

pub fn job(name: &str) -> SynthJob {
    let all: BTreeMap<String, SynthJob> = serde_json::from_str(REGIMES).expect("regimes.json parses");
    all.get(name)
        .unwrap_or_else(|| panic!("no fixture named {name}"))
        .clone()
}

pub fn fixture(name: &str) -> SyntheticDataset {
    job(name).generate().expect("fixture generates")
}

pub fn grid(steps: usize) -> Vec<f64> {
    (0..=steps).map(|i| i as f64 / steps as f64).collect()
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Non-decreasing up to the (first) maximum and non-increasing after it.
pub fn is_unimodal(values: &[f64]) -> bool {
    let peak = argmax(values);
    values[..=peak].windows(2).all(|w| w[0] <= w[1]) && values[peak..].windows(2).all(|w| w[0] >= w[1])
}
