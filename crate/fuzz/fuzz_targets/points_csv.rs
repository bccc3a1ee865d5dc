#![no_main]
use libfuzzer_sys::fuzz_target;
use multichart::datasets::{read_points_csv, write_points_csv};

fuzz_target!(|data: &[u8]| {
    let Ok(points) = read_points_csv(data) else { return };
    let mut out = Vec::new();
    write_points_csv(&mut out, &points).expect("writing to a Vec");
    let again = read_points_csv(out.as_slice()).expect("own output must parse");
    assert_eq!(points.dim(), again.dim());
    for (a, b) in points.iter().zip(again.iter()) {
        assert!(a.to_bits() == b.to_bits() || (a.is_nan() && b.is_nan()));
    }
});
