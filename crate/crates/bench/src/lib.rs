//! Fixtures shared by the benchmarks.

use glosa_core::dictionary::{build_wideband, BandGrid, WidebandDictionary};
use glosa_core::simulator::{reference_models, substream, synthesize, SimConfig};
use glosa_core::RecordSet;

/// One synthetic three-record data set at 10 dB.
pub fn milankovitch_records(seed: u64) -> RecordSet {
    let models = reference_models(2.576).expect("reference patterns fit");
    synthesize(&SimConfig::default(), &models, 10.0, &mut substream(seed, 0, 0))
        .expect("synthesis")
        .records
        .standardized()
}

/// Wideband dictionaries on the first zoom level grid.
pub fn first_level(records: &RecordSet, bands: usize) -> (BandGrid, Vec<WidebandDictionary>) {
    let grid = BandGrid::uniform(2.0 * std::f64::consts::PI / 8.0, bands).expect("grid");
    let dicts = build_wideband(records, &grid);
    (grid, dicts)
}
