#![no_main]
use libfuzzer_sys::fuzz_target;
use multichart::datasets::parse_geo_csv;

fuzz_target!(|data: &[u8]| {
    if let Ok(geo) = parse_geo_csv(data, "latitude", "longitude") {
        for row in geo.points.rows() {
            let r2: f64 = row.iter().map(|v| v * v).sum();
            assert!((r2 - 1.0).abs() < 1e-9, "off-sphere point {row:?}");
        }
    }
});
