use proptest::prelude::*;
use sonorl::datakit::*;
use sonorl::phantom::*;

fn phantom() -> Phantom {
    Phantom::new(PhantomConfig::default().with_image_size(32)).unwrap()
}

fn record(params: [f64; NUM_PARAMS]) -> DatasetRecord {
    DatasetRecord {
        image_path: "x.pgm".into(),
        params,
        class: Class::Random,
        grade: 0.0,
    }
}

#[test]
fn generated_corpus_is_stratified_and_labelled() {
    let ph = phantom();
    let dir = tempfile::tempdir().unwrap();
    let cfg = GenConfig { count: 400, ..GenConfig::default() };
    let m = gen_dataset(&ph, &cfg, dir.path()).unwrap();
    assert_eq!(m.records.len(), 400);
    let hist = class_histogram(&m.records);
    for (v, &n) in hist[..NUM_VIEWS].iter().enumerate() {
        assert!(n as f64 >= 0.15 * 400.0, "view {v}: {n}");
    }
    for r in &m.records {
        let q = r.condition().unwrap().pose();
        let l = ph.label(&q);
        assert_eq!(l.class, r.class);
        assert!((l.grade - r.grade).abs() < 1e-9);
    }
    // the manifest on disk reloads with every image present
    let back = Manifest::load(&dir.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(back.records, m.records);
    let f = back.load_frame(&back.records[0], 32).unwrap();
    let orig = ph.render(&back.records[0].condition().unwrap());
    // 8-bit storage costs at most one gray level
    for (a, b) in f.data().iter().zip(orig.data()) {
        assert!((a - b).abs() <= 2.0 / 255.0 + 1e-12);
    }
}

#[test]
fn generation_is_deterministic() {
    let ph = phantom();
    let cfg = GenConfig { count: 30, ..GenConfig::default() };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    gen_dataset(&ph, &cfg, a.path()).unwrap();
    gen_dataset(&ph, &cfg, b.path()).unwrap();
    let read = |d: &std::path::Path| std::fs::read(d.join(MANIFEST_FILE)).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
    assert_eq!(
        std::fs::read(a.path().join("frames/000007.pgm")).unwrap(),
        std::fs::read(b.path().join("frames/000007.pgm")).unwrap()
    );
    let other = GenConfig { seed: 4, ..cfg };
    assert_ne!(sample_poses(&ph, &other).unwrap(), sample_poses(&ph, &cfg).unwrap());
}

#[test]
fn pose_near_view_hits_the_requested_score() {
    let ph = phantom();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1);
    for v in View::ALL {
        for s in [0.1, 0.5, 0.9] {
            let q = pose_near_view(&ph, v, s, &mut rng);
            // clamping to the cube can only bring the pose closer
            assert!(ph.view_score(&q, v) >= s - 1e-12);
        }
    }
}

#[test]
fn zero_count_is_rejected() {
    assert!(sample_poses(&phantom(), &GenConfig { count: 0, ..GenConfig::default() }).is_err());
}

#[test]
fn stats_examples() {
    let one = compute_stats(&[record([2.5; NUM_PARAMS])]).unwrap();
    for s in one {
        assert_eq!((s.min, s.max, s.mean, s.std), (2.5, 2.5, 2.5, 0.0));
    }
    let recs: Vec<_> = [1.0, 2.0, 3.0, 6.0].iter().map(|&x| record([x; NUM_PARAMS])).collect();
    let s = compute_stats(&recs).unwrap()[FORCE_Z];
    assert_eq!((s.min, s.max, s.mean), (1.0, 6.0, 3.0));
    // population deviation: sqrt((4 + 1 + 0 + 9) / 4)
    assert!((s.std - 3.5f64.sqrt()).abs() < 1e-12);
    assert!(compute_stats(&[]).is_err());
    let table = format_stats_table(&compute_stats(&recs).unwrap());
    assert_eq!(table.lines().count(), 13);
}

#[test]
fn normalize_params_examples() {
    let recs = [record([-2.0; NUM_PARAMS]), record([6.0; NUM_PARAMS])];
    let st = compute_stats(&recs).unwrap();
    assert_eq!(normalize_params(&[-2.0; NUM_PARAMS], &st), [-1.0; NUM_PARAMS]);
    assert_eq!(normalize_params(&[6.0; NUM_PARAMS], &st), [1.0; NUM_PARAMS]);
    assert_eq!(normalize_params(&[2.0; NUM_PARAMS], &st), [0.0; NUM_PARAMS]);
    let flat = compute_stats(&[record([3.0; NUM_PARAMS])]).unwrap();
    assert_eq!(normalize_params(&[3.0; NUM_PARAMS], &flat), [0.0; NUM_PARAMS]);
}

#[test]
fn normalize_image_examples() {
    let img = image::GrayImage::from_raw(2, 2, vec![0, 255, 128, 7]).unwrap();
    let f = normalize_image(&img, 2);
    assert_eq!(f.data()[0], -1.0);
    assert_eq!(f.data()[1], 1.0);
    assert!((f.data()[2] - 0.0039).abs() < 1e-4);
    let back = denormalize_image(&f);
    for (a, b) in back.iter().zip(img.as_raw()) {
        assert!((i16::from(*a) - i16::from(*b)).abs() <= 1);
    }
    // resizing goes through the bilinear filter
    assert_eq!(normalize_image(&img, 4).size(), 4);
}

#[test]
fn csv_ingest_maps_columns_by_name() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("a.png"), b"").unwrap();
    let mut header: Vec<String> = vec!["Filename".into()];
    header.extend(PARAM_NAMES.iter().rev().map(|s| s.to_string()));
    header.push("View".into());
    header.push("Grade".into());
    let vals: Vec<String> = (0..NUM_PARAMS).rev().map(|j| format!("{}", j as f64 * 0.5)).collect();
    let text = format!(
        "{}\na.png,{},A4C,7.5\nb.png,{},,\n",
        header.join(","),
        vals.join(","),
        vals.join(",")
    );
    let path = dir.path().join("acq.csv");
    std::fs::write(&path, text).unwrap();
    let m = ingest_csv(&path, false).unwrap();
    assert_eq!(m.records.len(), 2);
    let r = &m.records[0];
    assert_eq!(r.image_path, "a.png");
    for j in 0..NUM_PARAMS {
        assert_eq!(r.params[j], j as f64 * 0.5);
    }
    assert_eq!(r.class, Class::View(View::A4C));
    assert_eq!(r.grade, 7.5);
    assert_eq!((m.records[1].class, m.records[1].grade), (Class::Random, 0.0));
    // b.png does not exist
    assert!(ingest_csv(&path, true).is_err());
    assert_eq!(locate_dataset(dir.path()), Some(path.clone()));
    assert_eq!(open_dataset(dir.path(), false).unwrap(), m);
}

#[test]
fn csv_ingest_rejects_missing_columns_and_bad_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.csv");
    std::fs::write(&path, "image,Force_X\na.png,1\n").unwrap();
    assert!(ingest_csv(&path, false).is_err());
    let header = PARAM_NAMES.join(",");
    let mut row = ["1"; NUM_PARAMS];
    row[3] = "abc";
    std::fs::write(&path, format!("{header}\n{}\n", row.join(","))).unwrap();
    assert!(ingest_csv(&path, false).is_err());
}

#[test]
fn manifest_round_trips_through_jsonl() {
    let dir = tempfile::tempdir().unwrap();
    let m = Manifest {
        root: dir.path().to_path_buf(),
        records: vec![record([0.25; NUM_PARAMS]), record([-1.0; NUM_PARAMS])],
    };
    let p = dir.path().join(MANIFEST_FILE);
    m.save(&p).unwrap();
    assert_eq!(Manifest::load_unchecked(&p).unwrap(), m);
    // images are missing, so the checked load refuses
    assert!(Manifest::load(&p).is_err());
}

proptest! {
    #[test]
    fn normalize_then_denormalize_is_identity(
        lo in prop::array::uniform12(-50.0f64..0.0),
        span in prop::array::uniform12(0.1f64..100.0),
        t in prop::array::uniform12(0.0f64..=1.0),
    ) {
        let hi: [f64; NUM_PARAMS] = std::array::from_fn(|j| lo[j] + span[j]);
        let st = compute_stats(&[record(lo), record(hi)]).unwrap();
        let x: [f64; NUM_PARAMS] = std::array::from_fn(|j| lo[j] + t[j] * span[j]);
        let n = normalize_params(&x, &st);
        prop_assert!(n.iter().all(|v| (-1.0 - 1e-12..=1.0 + 1e-12).contains(v)));
        let back = denormalize_params(&n, &st);
        for j in 0..NUM_PARAMS {
            prop_assert!((back[j] - x[j]).abs() <= 1e-12);
        }
    }

    #[test]
    fn stats_are_ordered(xs in prop::collection::vec(-10.0f64..10.0, 1..40)) {
        let recs: Vec<_> = xs.iter().map(|&x| record([x; NUM_PARAMS])).collect();
        let s = compute_stats(&recs).unwrap()[0];
        prop_assert!(s.min <= s.mean && s.mean <= s.max && s.std >= 0.0);
    }
}
