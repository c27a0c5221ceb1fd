use milpath_core::slide::{
    build_bag, generate_dataset, generate_synthetic_slide, tile_grid, tissue_pixel_count, DatasetSpec, Magnification,
    Manifest, SlideRaster, SlideSpec, Split, TilingConfig,
};

fn spec(positive: bool) -> SlideSpec {
    SlideSpec {
        side: 256,
        tile_size: 32,
        tissue_blob_count: 3,
        lesion_fraction: 0.02,
        positive,
    }
}

#[test]
fn every_lesion_tile_is_retained_at_native_magnification() {
    let config = TilingConfig::new(Magnification::X20, 32);
    for seed in 0..60 {
        let slide = generate_synthetic_slide(format!("s{seed}"), seed, &spec(true)).unwrap();
        let bag = build_bag(&slide, &config).unwrap();
        let retained: Vec<(usize, usize)> = bag.tiles.iter().map(|t| (t.x, t.y)).collect();
        let mut witnesses = 0;
        for (x, y) in tile_grid(256, 256, 32, 0.0).unwrap() {
            if slide.lesion_pixels_in(x, y, 32) > 0 {
                assert!(retained.contains(&(x, y)), "seed {seed}: lesion tile ({x},{y}) dropped");
                witnesses += 1;
            }
        }
        assert!(witnesses >= 1, "seed {seed}: positive bag without a lesion tile");
    }
}

#[test]
fn negative_bags_contain_no_lesion_tiles() {
    let config = TilingConfig::new(Magnification::X20, 32);
    for seed in 0..20 {
        let slide = generate_synthetic_slide("n", seed, &spec(false)).unwrap();
        let bag = build_bag(&slide, &config).unwrap();
        assert!(bag.tiles.iter().all(|t| !t.intersects_lesion(&slide)));
    }
}

#[test]
fn tile_counts_shrink_with_magnification() {
    let slide = generate_synthetic_slide("m", 7, &spec(true)).unwrap();
    let counts: Vec<usize> = [Magnification::X20, Magnification::X10, Magnification::X5]
        .iter()
        .map(|&m| build_bag(&slide, &TilingConfig::new(m, 32)).map_or(0, |b| b.m()))
        .collect();
    assert!(counts[0] > counts[1] && counts[1] >= counts[2], "{counts:?}");
}

#[test]
fn lesion_share_of_tissue_respects_fraction() {
    for seed in 100..130 {
        let slide = generate_synthetic_slide("f", seed, &spec(true)).unwrap();
        let share = slide.lesion_pixel_count() as f64 / tissue_pixel_count(&slide) as f64;
        assert!(share > 0.0 && share <= 0.02, "seed {seed}: {share}");
    }
}

#[test]
fn dataset_generation_is_reproducible() {
    let spec = DatasetSpec { slides: 20, prevalence: 0.2, seed: 5, side: 256, ..Default::default() };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = generate_dataset(a.path(), &spec).unwrap();
    let mb = generate_dataset(b.path(), &spec).unwrap();
    assert_eq!(ma.records, mb.records);
    let read = |d: &std::path::Path, f: &str| std::fs::read(d.join(f)).unwrap();
    assert_eq!(read(a.path(), "manifest.csv"), read(b.path(), "manifest.csv"));
    for r in &ma.records {
        let rel = r.path.to_str().unwrap();
        assert_eq!(read(a.path(), rel), read(b.path(), rel));
    }

    let loaded = Manifest::load(&a.path().join("manifest.csv")).unwrap();
    assert_eq!(loaded.records, ma.records);
    assert_eq!(loaded.records.iter().filter(|r| r.label == 1).count(), 4);
    assert_eq!(loaded.count(Split::Train), 14);
    let first = &loaded.records[0];
    let slide = SlideRaster::load(&loaded.resolve(first), first.slide_id.clone()).unwrap();
    assert_eq!(slide.label(), first.label);
}
