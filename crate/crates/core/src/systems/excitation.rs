use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::Matrix;
use crate::error::{Error, Result};

/// Piecewise-constant random steps, one independent step sequence per
/// channel. Hold lengths are uniform on `hold_range` (inclusive, in samples)
/// and levels uniform on the channel's `level_ranges` entry.
pub fn random_step_input(
    seed: u64,
    t: usize,
    hold_range: (usize, usize),
    level_ranges: &[(f64, f64)],
) -> Result<Matrix> {
    let (hmin, hmax) = hold_range;
    if hmin == 0 || hmin > hmax {
        return Err(Error::Config(format!("hold range must be positive and ordered, got {hold_range:?}")));
    }
    if level_ranges.iter().any(|(lo, hi)| !(lo <= hi && lo.is_finite() && hi.is_finite())) {
        return Err(Error::Config("level ranges must be finite and ordered".into()));
    }
    let channels = level_ranges.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Matrix::zeros(t, channels);
    for (c, &(lo, hi)) in level_ranges.iter().enumerate() {
        let mut i = 0;
        while i < t {
            let hold = rng.random_range(hmin..=hmax);
            let level = if lo == hi { lo } else { rng.random_range(lo..hi) };
            for r in i..(i + hold).min(t) {
                out.set(r, c, level);
            }
            i += hold;
        }
    }
    Ok(out)
}

/// Rounds one channel to `{0, 1}`, e.g. for an on/off valve.
pub fn binarize_channel(u: &mut Matrix, channel: usize) {
    for r in 0..u.rows() {
        let v = u.get(r, channel);
        u.set(r, channel, if v >= 0.5 { 1.0 } else { 0.0 });
    }
}
