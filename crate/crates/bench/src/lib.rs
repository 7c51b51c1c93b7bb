//! Shared fixtures for the criterion benches.

use geovuln_core::spatial::{build_weights, SpatialWeights};
use geovuln_core::synth::{generate, SynthConfig, SynthData};

pub fn lattice(side: usize) -> (SynthData, SpatialWeights) {
    let data = generate(&SynthConfig {
        rows: side,
        cols: side,
        ..Default::default()
    })
    .expect("synthetic lattice");
    let w = build_weights(&data.dataset, &data.pairs).expect("lattice weights");
    (data, w)
}

/// Three random permutations of 1..=n.
pub fn random_rankings(n: usize, seed: u64) -> [Vec<u32>; 3] {
    use rand::seq::SliceRandom;
    let mut rng = geovuln_core::rng::stream(seed, "bench", b"ranks");
    std::array::from_fn(|_| {
        let mut r: Vec<u32> = (1..=n as u32).collect();
        r.shuffle(&mut rng);
        r
    })
}
