//! Deterministic synthetic discharge data used by examples and tests.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::table::{Column, SeriesTable};

/// Rows per discharge cycle in [`sine_fade`].
pub const CYCLE_LEN: usize = 200;

/// Discharge cycles with a sinusoidal load current, voltage that sags with
/// depth of discharge and load, and capacity that fades exponentially from
/// cycle to cycle.
pub fn sine_fade(len: usize, seed: u64) -> SeriesTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.003).expect("valid std");
    let mut cols: BTreeMap<Column, Vec<f64>> = BTreeMap::new();
    let mut cycle = Vec::with_capacity(len);
    for i in 0..len {
        let k = i / CYCLE_LEN;
        let j = (i % CYCLE_LEN) as f64;
        let depth = j / CYCLE_LEN as f64;
        let fade = (-0.02 * k as f64).exp();
        let load = 2.0 + 0.8 * (2.0 * PI * j / 40.0).sin();
        let voltage = 3.3 + 0.8 * (1.0 - depth) * fade - 0.12 * (load - 2.0) + noise.sample(&mut rng);
        let capacity = 2.5 * fade * (1.0 - depth);
        let temperature = 25.0 + 3.0 * depth + 0.2 * k as f64;
        cols.entry(Column::Time).or_default().push(30.0 * i as f64);
        cols.entry(Column::Voltage).or_default().push(voltage);
        cols.entry(Column::Current).or_default().push(-load);
        cols.entry(Column::Temperature).or_default().push(temperature);
        cols.entry(Column::Capacity).or_default().push(capacity);
        cycle.push(k as i64 + 1);
    }
    SeriesTable::new(cols, Some(cycle), "sine_fade").expect("fixture satisfies table invariants")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_valid() {
        let a = sine_fade(2000, 7);
        assert_eq!(a, sine_fade(2000, 7));
        assert_eq!(a.len(), 2000);
        assert_eq!(a.segments().len(), 10);
        let cap = a.column(Column::Capacity).unwrap();
        assert!(cap[0] > cap[CYCLE_LEN]);
    }
}
