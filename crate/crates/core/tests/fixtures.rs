mod common;

use common::{fixture, fixture_text, SUITE};
use smac_core::{check_buildable, format_blueprint, parse_blueprint};

#[test]
fn fixtures_round_trip_through_text() {
    for name in SUITE.iter().chain(&["inverted_l"]) {
        let text = fixture_text(name);
        let bp = parse_blueprint(&text).unwrap();
        let again = parse_blueprint(&format_blueprint(&bp)).unwrap();
        assert_eq!(bp, again, "{name}");
    }
}

#[test]
fn suite_sizes_and_buildability() {
    let sizes = [("plane10", 100), ("pyramid316", 316), ("temple", 184), ("overhang", 166), ("hollow_box", 258)];
    for (name, n) in sizes {
        let bp = fixture(name);
        assert_eq!(bp.len(), n, "{name}");
        assert!(check_buildable(&bp).is_buildable(), "{name}");
    }
    let bad = check_buildable(&fixture("inverted_l"));
    assert_eq!(bad.violations().map(<[_]>::len), Some(1));
}
