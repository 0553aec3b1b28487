use std::fmt::Write as _;
use std::path::Path;

use crate::{Error, Result};

/// Bidirectional T5 bucketing of `relative_position = key - query`.
///
/// Half of the buckets serve positive offsets. Within a half, offsets below
/// `half / 2` get their own bucket and larger ones are spread
/// logarithmically up to `max_distance`, past which they share the last
/// bucket of the half.
pub fn relpos_bucket(relative_position: i64, num_buckets: usize, max_distance: usize) -> usize {
    let half = num_buckets / 2;
    let mut bucket = 0;
    if relative_position > 0 {
        bucket += half;
    }
    let n = relative_position.unsigned_abs() as usize;
    let max_exact = half / 2;
    if n < max_exact {
        return bucket + n;
    }
    let ratio = (n as f64 / max_exact as f64).ln() / (max_distance as f64 / max_exact as f64).ln();
    let large = max_exact + (ratio * (half - max_exact) as f64) as usize;
    bucket + large.min(half - 1)
}

pub fn validate_relpos(num_buckets: usize, max_distance: usize) -> Result<()> {
    if num_buckets < 4 || !num_buckets.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "relpos_num_buckets {num_buckets} must be even and at least 4"
        )));
    }
    if max_distance <= num_buckets / 4 {
        return Err(Error::Config(format!(
            "relpos_max_distance {max_distance} must exceed relpos_num_buckets / 4"
        )));
    }
    Ok(())
}

/// `distance<TAB>bucket` rows for distances in `-2*max_distance..=2*max_distance`.
pub fn relpos_table(num_buckets: usize, max_distance: usize) -> String {
    let span = 2 * max_distance as i64;
    let mut out = String::from("distance\tbucket\n");
    for d in -span..=span {
        let _ = writeln!(out, "{d}\t{}", relpos_bucket(d, num_buckets, max_distance));
    }
    out
}

pub fn write_relpos_table(path: &Path, num_buckets: usize, max_distance: usize) -> Result<()> {
    std::fs::write(path, relpos_table(num_buckets, max_distance))
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}
