//! Fixed MHRSA workloads for timing and memory scaling across band counts.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::mhrsa::{mhrsa_forward, MhrsaParams};
use crate::params::uniform;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Band counts swept by the scaling benchmark.
pub const SCALING_BANDS: [usize; 4] = [8, 16, 32, 64];

/// One MHRSA block and a `(1, C, S, H, W)` input, in single precision.
#[derive(Clone, Debug)]
pub struct MhrsaWorkload {
    pub params: MhrsaParams<f32>,
    pub input: Tensor<f32>,
}

impl MhrsaWorkload {
    pub fn new(bands: usize, channels: usize, size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = MhrsaParams::init(channels, &mut rng);
        let input = uniform([1, channels, bands, size, size], 1.0, &mut rng);
        MhrsaWorkload { params, input }
    }

    /// Forward and backward pass of a summed output; returns the sum.
    pub fn run(&self) -> Result<f64> {
        let mut tape = Tape::new();
        let vars = self.params.bind(&mut tape, true);
        let x = tape.leaf(self.input.clone(), true);
        let o = mhrsa_forward(&mut tape, x, &vars)?;
        let s = tape.sum(o.output)?;
        tape.backward(s)?;
        Ok(tape.value(s).item()? as f64)
    }

    /// Median wall time of `reps` runs, in seconds.
    pub fn median_seconds(&self, reps: usize) -> Result<f64> {
        let mut times = Vec::with_capacity(reps.max(1));
        for _ in 0..reps.max(1) {
            let t = Instant::now();
            self.run()?;
            times.push(t.elapsed().as_secs_f64());
        }
        times.sort_by(f64::total_cmp);
        Ok(times[times.len() / 2])
    }
}

/// Ratios of consecutive entries, e.g. time at `S = 32` over `S = 16`.
pub fn doubling_ratios(values: &[f64]) -> Vec<f64> {
    values.windows(2).map(|w| w[1] / w[0]).collect()
}
