use std::collections::HashSet;

use dupless::evaluation::TissueClass;
use dupless::imagecore::{self, Quadrant};
use dupless::synthgen::{self, SynthConfig};

#[test]
fn classes_have_separable_colour_statistics() {
    let cfg = SynthConfig { slices_per_class: 6, ..SynthConfig::default() };
    let (manifest, images) = synthgen::generate_in_memory(&cfg).unwrap();
    let mut means = [[0.0f64; 3]; 4];
    for (s, img) in manifest.slices().iter().zip(&images) {
        let m = img.channel_means();
        for ch in 0..3 {
            means[s.label.index()][ch] += m[ch] / 6.0;
        }
    }
    // Some channel separates every pair of classes by more than 5 levels.
    for a in 0..4 {
        for b in 0..a {
            let gap = (0..3).map(|ch| (means[a][ch] - means[b][ch]).abs()).fold(0.0, f64::max);
            assert!(gap > 5.0, "{:?} vs {:?}: {gap:.1}", TissueClass::ALL[a], TissueClass::ALL[b]);
        }
    }
}

#[test]
fn quadrants_differ_so_duplication_is_visible() {
    let cfg = SynthConfig { slices_per_class: 25, ..SynthConfig::default() };
    let (manifest, images) = synthgen::generate_in_memory(&cfg).unwrap();
    assert_eq!(manifest.len(), 100);
    let mut checked = 0;
    for (s, img) in manifest.slices().iter().zip(&images) {
        for p in imagecore::tile_slice(&s.slice_id, img, cfg.patch_side).unwrap() {
            let qs: HashSet<Vec<u8>> = Quadrant::ALL
                .iter()
                .map(|&q| imagecore::extract_quadrant(&p, q).into_pixels())
                .collect();
            assert_eq!(qs.len(), 4, "{}", p.id());
            checked += 1;
        }
    }
    assert!(checked >= 1000);
}

#[test]
fn generation_is_seeded() {
    let cfg = SynthConfig { slices_per_class: 2, slice_width: 64, slice_height: 64, patch_side: 32, ..SynthConfig::default() };
    let (_, a) = synthgen::generate_in_memory(&cfg).unwrap();
    let (_, b) = synthgen::generate_in_memory(&cfg).unwrap();
    assert_eq!(a, b);
    let (_, c) = synthgen::generate_in_memory(&SynthConfig { seed: 1, ..cfg }).unwrap();
    assert_ne!(a, c);
}

#[test]
fn default_layout_is_twelve_patches_per_slice() {
    let cfg = SynthConfig::default();
    assert_eq!(cfg.grid(), (4, 3));
    assert_eq!(cfg.slice_count(), 80);
}
