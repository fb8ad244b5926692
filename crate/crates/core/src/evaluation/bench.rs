use std::fmt::Write as _;
use std::time::Instant;

use crate::texture_field::TextureField;

#[derive(Clone, Debug, PartialEq)]
pub struct BakeTiming {
    /// Square texture side in texels.
    pub resolution: usize,
    pub median_secs: f64,
    pub samples: Vec<f64>,
}

impl BakeTiming {
    pub fn per_texel(&self) -> f64 {
        self.median_secs / (self.resolution * self.resolution) as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BakeTable {
    pub rows: Vec<BakeTiming>,
}

/// Median of a non-empty sample, averaging the middle pair for even sizes.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl BakeTable {
    /// Timings strictly increase with resolution (vacuous for one row).
    pub fn monotone(&self) -> bool {
        self.rows.windows(2).all(|w| w[1].median_secs > w[0].median_secs)
    }

    /// Largest over smallest per-texel time.
    pub fn per_texel_spread(&self) -> f64 {
        let pt: Vec<f64> = self.rows.iter().map(BakeTiming::per_texel).collect();
        let hi = pt.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = pt.iter().copied().fold(f64::INFINITY, f64::min);
        if pt.is_empty() {
            1.0
        } else {
            hi / lo
        }
    }

    /// Monotone and per-texel time within a `band`x spread.
    pub fn near_linear(&self, band: f64) -> bool {
        self.monotone() && self.per_texel_spread() <= band
    }

    pub fn to_csv(&self) -> String {
        let mut out = "resolution,texels,median_secs,per_texel_secs,repeats\n".to_string();
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.resolution,
                r.resolution * r.resolution,
                r.median_secs,
                r.per_texel(),
                r.samples.len()
            );
        }
        out
    }
}

/// Time `repeats` full bakes of `field` at each square resolution, serially,
/// with `tile x tile` patches. Resolutions are sorted ascending.
pub fn bench_bake(field: &TextureField, resolutions: &[usize], repeats: usize, tile: usize) -> BakeTable {
    let mut res = resolutions.to_vec();
    res.sort_unstable();
    res.dedup();
    let rows = res
        .into_iter()
        .map(|r| {
            let samples: Vec<f64> = (0..repeats.max(1))
                .map(|_| {
                    let start = Instant::now();
                    let img = field.bake((r, r), tile, None);
                    let secs = start.elapsed().as_secs_f64();
                    std::hint::black_box(img);
                    secs
                })
                .collect();
            BakeTiming {
                resolution: r,
                median_secs: median(&samples),
                samples,
            }
        })
        .collect();
    BakeTable { rows }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::texture_field::HashGridConfig;

    #[test]
    fn median_definition() {
        assert_eq!(median(&[5.0, 1.0, 3.0, 2.0, 4.0]), 3.0);
        assert_eq!(median(&[4.0, 1.0]), 2.5);
    }

    #[test]
    fn single_resolution_table() {
        let field = TextureField::new(
            HashGridConfig {
                levels: 2,
                table_log2: 8,
                ..Default::default()
            },
            8,
            0,
        )
        .unwrap();
        let t = bench_bake(&field, &[32], 5, 16);
        assert_eq!(t.rows.len(), 1);
        assert_eq!(t.rows[0].samples.len(), 5);
        assert_eq!(t.rows[0].median_secs, median(&t.rows[0].samples));
        assert!(t.monotone());
        assert!(t.to_csv().starts_with("resolution,texels"));
    }
}
