use std::path::Path;

use zssd::cf::{parse_time_units, read_cf_file, NcFile, GRAVITY};
use zssd::Timestamp;

// written with scipy.io.netcdf_file: record time axis, latitude north to south,
// a packed short variable and geopotential height on two pressure levels
const FIXTURE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data/cf_small.nc");

#[test]
fn maps_cf_names_units_and_orientation() {
    let fields = read_cf_file(Path::new(FIXTURE)).unwrap();
    assert_eq!(fields.len(), 3);
    let f = &fields[2];
    assert_eq!(f.vars, ["msl", "u10", "z500", "z250"]);
    assert_eq!(f.units, ["Pa", "m s-1", "m2 s-2", "m2 s-2"]);
    assert_eq!(f.grid.lat_centers(), [-67.5, -22.5, 22.5, 67.5]);
    assert!(f.grid.periodic_lon());
    assert_eq!(fields[1].time, Timestamp::new(2001, 1, 1, 6).unwrap());
    assert_eq!(f.time, Timestamp::new(2001, 1, 2, 12).unwrap());
    for (t, f) in fields.iter().enumerate() {
        let t = t as f64;
        for i in 0..4 {
            let y = (3 - i) as f64;
            for x in 0..8 {
                let k = i * 8 + x;
                let x = x as f64;
                assert_eq!(f.channel(0)[k], 100_000.0 + 100.0 * t + 10.0 * y + x);
                assert_eq!(f.channel(1)[k], 0.5 * (32.0 * t + 8.0 * y + x) + 1.0);
                assert!((f.channel(2)[k] - GRAVITY * (5000.0 + 10.0 * t + y + 0.1 * x)).abs() < 1e-9);
                assert!((f.channel(3)[k] - GRAVITY * (10_000.0 + 10.0 * t + y + 0.1 * x)).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn rejects_non_classic_bytes() {
    assert!(NcFile::parse(b"\x89HDF\r\n".to_vec()).is_err());
    assert!(NcFile::parse(b"CDF\x05\0\0\0\0".to_vec()).is_err());
    let mut bytes = std::fs::read(FIXTURE).unwrap();
    bytes.truncate(40);
    assert!(NcFile::parse(bytes).is_err());
}

#[test]
fn time_units() {
    let (h, o) = parse_time_units("hours since 1850-01-01").unwrap();
    assert_eq!(h, 1.0);
    assert_eq!(o.to_string(), "1850-01-01 00:00:00");
    assert_eq!(parse_time_units("days since 2000-02-03T06:00:00Z").unwrap().0, 24.0);
    assert!(parse_time_units("fortnights since 2000-01-01").is_err());
}
