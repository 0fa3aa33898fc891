use std::collections::BTreeMap;

use gclab_core::pngio;
use gclab_core::scenes::{
    generate_scene, ingest_external, load_all, load_dataset, save_dataset, DatasetManifest, SceneConfig,
};
use gclab_core::{Error, Grid, InstanceMap, RgbImage, SemanticMap};
use proptest::prelude::*;

/// (class, area, x0, y0, x1, y1) per id, from a plain scan of the maps.
fn rescan(sem: &SemanticMap, inst: &InstanceMap) -> BTreeMap<u32, (u16, usize, usize, usize, usize, usize)> {
    let mut out: BTreeMap<u32, (u16, usize, usize, usize, usize, usize)> = BTreeMap::new();
    for r in 0..inst.height() {
        for c in 0..inst.width() {
            let id = inst.get(r, c);
            if id == 0 {
                continue;
            }
            let e = out.entry(id).or_insert((sem.labels().get(r, c), 0, c, r, c + 1, r + 1));
            e.1 += 1;
            e.2 = e.2.min(c);
            e.3 = e.3.min(r);
            e.4 = e.4.max(c + 1);
            e.5 = e.5.max(r + 1);
        }
    }
    out
}

fn check_annotations(scene: &gclab_core::PanopticScene) {
    let scan = rescan(&scene.semantic, &scene.instances);
    assert_eq!(scan.len(), scene.annotations.len());
    let ids: Vec<u32> = scan.keys().copied().collect();
    assert_eq!(ids, (1..=ids.len() as u32).collect::<Vec<_>>(), "ids are 1..n");
    for a in &scene.annotations {
        let (class, area, x0, y0, x1, y1) = scan[&a.id];
        assert_eq!((a.class_index, a.area), (class, area));
        assert_eq!((a.bbox.x0, a.bbox.y0, a.bbox.x1, a.bbox.y1), (x0, y0, x1, y1));
    }
    for r in 0..scene.height() {
        for c in 0..scene.width() {
            let id = scene.instances.get(r, c);
            if id > 0 {
                assert_eq!(scene.semantic.labels().get(r, c), scan[&id].0);
            }
        }
    }
}

#[test]
fn seed_zero_annotations_match_a_rescan() {
    let scene = generate_scene(0, &SceneConfig::default()).unwrap();
    assert_eq!(scene.image.shape(), (64, 64));
    assert!(!scene.annotations.is_empty());
    check_annotations(&scene);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn generated_scenes_are_consistent_and_deterministic(seed in any::<u64>(), k in 2usize..8, max in 1usize..7) {
        let cfg = SceneConfig { num_classes: k, max_instances: max, ..SceneConfig::default() };
        let a = generate_scene(seed, &cfg).unwrap();
        prop_assert_eq!(&a, &generate_scene(seed, &cfg).unwrap());
        prop_assert!(a.annotations.len() <= max && !a.annotations.is_empty());
        a.validate().unwrap();
        check_annotations(&a);
    }
}

fn scenes(n: u64) -> Vec<gclab_core::PanopticScene> {
    (0..n).map(|s| generate_scene(s + 10, &SceneConfig::default()).unwrap()).collect()
}

#[test]
fn three_scenes_round_trip_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let src = scenes(3);
    let names = SceneConfig::default().class_names();
    let manifest = save_dataset(&src, dir.path(), &names).unwrap();
    assert_eq!(manifest.len(), 3);
    assert_eq!(manifest.items[1].image, "000001_img.png");
    let back = load_all(&dir.path().join("manifest.json")).unwrap();
    assert_eq!(back.len(), 3);
    for (a, b) in src.iter().zip(&back) {
        // images go through 8-bit PNG, so compare against the quantized source
        assert_eq!(b.image, a.image.quantized());
        assert_eq!(b.semantic, a.semantic);
        assert_eq!(b.instances, a.instances);
        assert_eq!(b.annotations, a.annotations);
        assert_eq!(b.seed, a.seed);
    }
    // a second save of the reloaded scenes is byte-identical
    let dir2 = tempfile::tempdir().unwrap();
    save_dataset(&back, dir2.path(), &names).unwrap();
    for item in &manifest.items {
        for f in [&item.image, &item.semantic, &item.instances, &item.annotations] {
            assert_eq!(std::fs::read(dir.path().join(f)).unwrap(), std::fs::read(dir2.path().join(f)).unwrap(), "{f}");
        }
    }
    // loading by directory is the same as loading the manifest file
    assert_eq!(DatasetManifest::load(dir.path()).unwrap(), manifest);
}

#[test]
fn empty_dataset_is_a_valid_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let m = save_dataset(&[], dir.path(), &SceneConfig::default().class_names()).unwrap();
    assert!(m.is_empty());
    assert_eq!(load_dataset(&m.manifest_path()).unwrap().count(), 0);
}

#[test]
fn deleted_instance_file_is_a_load_error_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let m = save_dataset(&scenes(2), dir.path(), &SceneConfig::default().class_names()).unwrap();
    std::fs::remove_file(dir.path().join(&m.items[1].instances)).unwrap();
    let results: Vec<_> = load_dataset(&m.manifest_path()).unwrap().collect();
    assert!(results[0].is_ok());
    match results[1].as_ref().unwrap_err() {
        Error::Load { path, .. } => assert!(path.ends_with(&m.items[1].instances)),
        other => panic!("expected a load error, got {other}"),
    }
}

#[test]
fn instance_id_gap_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let m = save_dataset(&scenes(1), dir.path(), &SceneConfig::default().class_names()).unwrap();
    // external item: ids {1, 3}
    let (h, w) = (16, 16);
    let inst = InstanceMap(Grid::from_fn(h, w, |r, c| if r < 4 && c < 4 { 1 } else if r > 10 && c > 10 { 3 } else { 0 }));
    let sem = SemanticMap::new(inst.0.map(|id| u16::from(id > 0)), 4).unwrap();
    let item = &m.items[0];
    pngio::write_file(&dir.path().join(&item.image), &pngio::encode_rgb(&RgbImage::filled(h, w, [0.0; 3])).unwrap()).unwrap();
    pngio::write_file(&dir.path().join(&item.semantic), &pngio::encode_semantic(&sem).unwrap()).unwrap();
    pngio::write_file(&dir.path().join(&item.instances), &pngio::encode_instances(&inst).unwrap()).unwrap();
    std::fs::write(dir.path().join(&item.annotations), r#"{"seed":0,"annotations":[]}"#).unwrap();
    let err = load_all(&m.manifest_path()).unwrap_err();
    assert!(matches!(err, Error::Validation(_)), "{err}");
    // ingestion densifies the same maps instead
    let scene = ingest_external(RgbImage::filled(h, w, [0.0; 3]), sem, inst, 0).unwrap();
    assert_eq!(scene.instances.max_id(), 2);
}

#[test]
fn unwritable_root_is_a_storage_error() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("occupied");
    std::fs::write(&file, b"x").unwrap();
    let err = save_dataset(&scenes(1), &file.join("data"), &SceneConfig::default().class_names()).unwrap_err();
    assert!(matches!(err, Error::Storage { .. }), "{err}");
}

#[test]
fn zero_instance_config_gives_background_only() {
    let cfg = SceneConfig { min_instances: 0, max_instances: 0, ..SceneConfig::default() };
    let s = generate_scene(7, &cfg).unwrap();
    assert_eq!(s.instances.max_id(), 0);
    assert!(s.semantic.labels().data().iter().all(|&k| k == 0));
}
