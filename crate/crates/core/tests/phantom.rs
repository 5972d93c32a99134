use proptest::prelude::*;
use vasc::phantom::*;
use vasc::Image2D;

#[test]
fn same_spec_gives_identical_voxels() {
    let spec = PhantomSpec::new(ClassLabel::Class1, 7);
    let a = generate_phantom(&spec).unwrap();
    let b = generate_phantom(&spec).unwrap();
    assert_eq!(a.voxels, b.voxels);
    let other = generate_phantom(&PhantomSpec::new(ClassLabel::Class1, 8)).unwrap();
    assert_ne!(a.voxels, other.voxels);
}

#[test]
fn gaussian_profile_matches_brute_force_distance_oracle() {
    let sigma = 2.0;
    let seg = Segment::planar((10.0, 32.0), (32.0, 32.0), (54.0, 32.0));
    let raster = rasterize_segments(&[seg], 1, 64, sigma);
    // Oracle: distance to a dense sampling of the straight segment.
    let samples: Vec<(f64, f64)> = (0..=20_000).map(|i| (10.0 + 44.0 * i as f64 / 20_000.0, 32.0)).collect();
    for y in 20..44 {
        for x in 0..64 {
            let d2 = samples
                .iter()
                .map(|(sx, sy)| (x as f64 - sx).powi(2) + (y as f64 - sy).powi(2))
                .fold(f64::INFINITY, f64::min);
            let expect = (-d2 / (2.0 * sigma * sigma)).exp();
            let got = raster[y * 64 + x] as f64;
            assert!((got - expect).abs() < 1e-5, "({x},{y}) {got} vs {expect}");
        }
    }
    assert!((raster[32 * 64 + 32] - 1.0).abs() < 1e-6);
    let three_sigma = raster[(32 + 6) * 64 + 32] as f64;
    assert!((three_sigma - (-4.5f64).exp()).abs() < 1e-6, "{three_sigma}");
    assert!((three_sigma - 0.0111).abs() < 1e-4);
}

#[test]
fn dataset_counts_split_and_manifest_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_dataset(dir.path(), 4, &PhantomSpec::default(), 100).unwrap();
    assert_eq!(m.entries.len(), 12);
    for c in ClassLabel::ALL {
        assert_eq!(m.entries.iter().filter(|e| e.class_label == c).count(), 4);
        assert_eq!(m.split(Split::Train).filter(|e| e.class_label == c).count(), 3);
        assert_eq!(m.split(Split::Val).filter(|e| e.class_label == c).count(), 1);
    }
    let mut keys: Vec<_> = m.entries.iter().map(|e| (e.seed, e.class_label)).collect();
    keys.sort();
    keys.dedup();
    assert_eq!(keys.len(), 12);
    let loaded = DatasetManifest::load(dir.path()).unwrap();
    assert_eq!(loaded, m);
    let text = std::fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
    let first = text.lines().nth(1).unwrap();
    assert_eq!(first.split('\t').take(4).collect::<Vec<_>>(), ["c1_00000.vsv", "1", "100", "train"]);
    let v = m.load_volume(&m.entries[5]).unwrap();
    assert_eq!(v.class_label, ClassLabel::Class2);
}

#[test]
fn dataset_generation_is_deterministic_and_rejects_zero() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = generate_dataset(a.path(), 2, &PhantomSpec::default(), 5).unwrap();
    let mb = generate_dataset(b.path(), 2, &PhantomSpec::default(), 5).unwrap();
    assert_eq!(ma.digest(), mb.digest());
    assert_eq!(ma.generator_hash, mb.generator_hash);
    let bytes_a = std::fs::read(a.path().join(MANIFEST_FILE)).unwrap();
    let bytes_b = std::fs::read(b.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(bytes_a, bytes_b);
    assert!(generate_dataset(a.path(), 0, &PhantomSpec::default(), 5).is_err());
}

fn class_mean(class: ClassLabel, n: u64) -> Image2D {
    let mut acc = Image2D::zeros(64, 64);
    for s in 0..n {
        let v = generate_phantom(&PhantomSpec::new(class, 1000 + s)).unwrap();
        let m = mip_render(&v, Axis::Z);
        for (a, b) in acc.data.iter_mut().zip(&m.data) {
            *a += b / n as f32;
        }
    }
    acc
}

#[test]
fn class_means_differ_mostly_in_pcoma_zones() {
    let (m1, m3) = (class_mean(ClassLabel::Class1, 50), class_mean(ClassLabel::Class3, 50));
    let zones = pcoma_zones(64);
    let in_zone = |y: usize, x: usize| zones.iter().any(|&(x0, x1, y0, y1)| x >= x0 && x < x1 && y >= y0 && y < y1);
    let (mut zsum, mut zn, mut bsum, mut bn) = (0.0, 0, 0.0, 0);
    for y in 0..64 {
        for x in 0..64 {
            let d = (m1.get(y, x) - m3.get(y, x)).abs() as f64;
            if in_zone(y, x) {
                zsum += d;
                zn += 1;
            } else {
                bsum += d;
                bn += 1;
            }
        }
    }
    let (zone, background) = (zsum / zn as f64, bsum / bn as f64);
    assert!(zone > 5.0 * background, "zone {zone} background {background}");
}

#[test]
fn zone_classifier_separates_300_phantoms() {
    let data: Vec<(Image2D, ClassLabel)> = ClassLabel::ALL
        .iter()
        .flat_map(|&c| (0..100).map(move |s| (c, s)))
        .map(|(c, s)| {
            let v = generate_phantom(&PhantomSpec::new(c, 5000 + s)).unwrap();
            (mip_render(&v, Axis::Z), c)
        })
        .collect();
    let clf = ZoneClassifier::fit(&data).unwrap();
    let acc = clf.accuracy(&data);
    assert!(acc >= 0.95, "accuracy {acc}");
}

#[test]
fn mip_examples() {
    let mut vox = vec![0.0f32; 3 * 4 * 5];
    vox[(2 * 4 + 1) * 5 + 3] = 1.0;
    let v = PhantomVolume::new(3, 4, 5, vox, ClassLabel::Class1).unwrap();
    let img = mip_render(&v, Axis::Z);
    assert_eq!(img.get(1, 3), 1.0);
    assert_eq!(img.data.iter().filter(|&&x| x != 0.0).count(), 1);

    let mut two = vec![0.0f32; 2 * 2 * 2];
    two[3] = 0.2;
    two[4 + 3] = 0.7;
    let v = PhantomVolume::new(2, 2, 2, two, ClassLabel::Class1).unwrap();
    assert_eq!(mip_render(&v, Axis::Z).get(1, 1), 0.7);

    let single = generate_phantom(&PhantomSpec::new(ClassLabel::Class2, 1)).unwrap();
    assert_eq!(mip_render(&single, Axis::Z), single.slice(0));
}

proptest! {
    #[test]
    fn mip_commutes_with_monotone_maps(vals in prop::collection::vec(0.0f32..1.0, 3 * 4 * 4), k in 0.1f32..3.0) {
        let v = PhantomVolume::new(3, 4, 4, vals.clone(), ClassLabel::Class3).unwrap();
        let mapped = PhantomVolume::new(3, 4, 4, vals.iter().map(|x| x.powf(k)).collect(), ClassLabel::Class3).unwrap();
        for axis in [Axis::Z, Axis::Y, Axis::X] {
            let a = mip_render(&mapped, axis);
            let b = mip_render(&v, axis).map(|x| x.powf(k));
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn mip_is_idempotent_on_single_slices(vals in prop::collection::vec(0.0f32..1.0, 5 * 6)) {
        let v = PhantomVolume::new(1, 5, 6, vals, ClassLabel::Class1).unwrap();
        let once = mip_render(&v, Axis::Z);
        let again = PhantomVolume::new(1, 5, 6, once.data.clone(), ClassLabel::Class1).unwrap();
        prop_assert_eq!(mip_render(&again, Axis::Z), once);
    }
}
