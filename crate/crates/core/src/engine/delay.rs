use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{EngineError, StragglerSpec};

/// Per-part delay stream: seeded by the run seed, one ChaCha stream per part.
pub fn delay_rng(seed: u64, part_id: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(part_id as u64);
    rng
}

/// Simulated delay added to one epoch of `part_id`: uniform on `[low, high]`
/// for straggler parts, zero otherwise.
pub fn inject_delay(spec: &StragglerSpec, part_id: usize, rng: &mut impl Rng) -> Result<f64, EngineError> {
    if spec.low > spec.high {
        return Err(EngineError::Config(format!(
            "straggler delay low {} exceeds high {}",
            spec.low, spec.high
        )));
    }
    if !spec.parts.contains(&part_id) {
        return Ok(0.0);
    }
    if spec.low == spec.high {
        return Ok(spec.low);
    }
    Ok(rng.gen_range(spec.low..=spec.high))
}
