//! The detector against a brute-force segment-test oracle.

mod support;

use deepvo::fastdet::{self, FastConfig};
use support::fast_oracle;

#[test]
fn matches_brute_force_before_suppression() {
    let mut total = 0;
    for seed in 0..50 {
        let img = fast_oracle::random_image(seed);
        for (threshold, arc) in [(20, 9), (10, 12), (35, 10)] {
            let cfg = FastConfig {
                threshold,
                arc_length: arc,
                nms: false,
            };
            let got: Vec<_> = fastdet::detect(&img, &cfg)
                .unwrap()
                .iter()
                .map(|c| (c.x, c.y))
                .collect();
            let want = fast_oracle::corners(&img, threshold, arc);
            assert_eq!(got, want, "image {seed}, t {threshold}, arc {arc}");
            total += want.len();
        }
    }
    assert!(total > 500, "fixture produced only {total} corners");
}

#[test]
fn suppression_keeps_a_subset() {
    for seed in 0..10 {
        let img = fast_oracle::random_image(seed);
        let raw = fastdet::detect(
            &img,
            &FastConfig {
                nms: false,
                ..FastConfig::default()
            },
        )
        .unwrap();
        let kept = fastdet::detect(&img, &FastConfig::default()).unwrap();
        assert!(kept.iter().all(|c| raw.contains(c)));
        assert!(kept.len() <= raw.len());
    }
}
