use onebyte_core::rng::{check_golden, derive_seed, golden_entries, parse_golden, GaussianStream};

const GOLDEN: &str = include_str!("data/golden_normals.txt");

#[test]
fn published_vectors_reproduce_bit_exactly() {
    let entries = parse_golden(GOLDEN).unwrap();
    assert_eq!(entries.len(), 100);
    let bad = check_golden(&entries);
    assert!(bad.is_empty(), "{} mismatches, first {:?}", bad.len(), bad.first());
}

#[test]
fn published_file_matches_generator() {
    assert_eq!(parse_golden(GOLDEN).unwrap(), golden_entries(10));
}

#[test]
fn zero_triple_first_draw() {
    let seed = derive_seed(0, 0, 0);
    assert_eq!(seed.mixed, 0);
    let first = GaussianStream::new(seed.mixed).next_normal();
    assert_eq!(first.to_bits(), 0xbfdc_f9fb_99cf_ab92);
}

#[test]
fn corrupted_entry_is_reported() {
    let mut entries = parse_golden(GOLDEN).unwrap();
    entries[17].bits ^= 1;
    let bad = check_golden(&entries);
    assert_eq!(bad.len(), 1);
    assert_eq!(bad[0].0.index, entries[17].index);
}
