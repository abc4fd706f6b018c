use craftlora::guidance::GuidanceConfig;
use craftlora_web::{layer_ranks, schedule_table, split_composite};

#[test]
fn split_parts_add_back_to_the_composite() {
    let out = split_composite(2, 5, 16, 0.35, 7).unwrap();
    assert_eq!(out.len(), 3 * 256);
    let (img, rest) = out.split_at(256);
    let (low, res) = rest.split_at(256);
    for k in 0..256 {
        assert!((low[k] + res[k] - 0.5 - img[k]).abs() < 1e-12);
    }
    assert!(split_composite(0, 0, 1, 0.35, 7).is_err());
    assert!(split_composite(0, 0, 8, 1.5, 7).is_err());
}

#[test]
fn schedule_rows_follow_the_windows() {
    let cfg = GuidanceConfig::default();
    let table = schedule_table(&cfg).unwrap();
    assert_eq!(table.len(), 150);
    // first row is t = T: style only, α = α_min
    assert_eq!(&table[..3], &[0.0, 0.5, 0.5]);
    // last row is t = 1: content only
    let last = &table[147..];
    assert!(last[0] > 0.99 && last[1] == 0.0);
    assert!(schedule_table(&GuidanceConfig { content_window: (0, 3), ..cfg }).is_err());
}

#[test]
fn ranks_taper_to_the_minimum() {
    assert_eq!(layer_ranks(16, 2, 8).unwrap(), vec![16, 14, 12, 10, 8, 6, 4, 2]);
    assert!(layer_ranks(2, 4, 3).is_err());
}
