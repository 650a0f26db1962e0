use std::collections::BTreeMap;
use std::path::Path;

use lepidet::augment::amplify;
use lepidet::synth::{generate, SynthConfig};

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), std::fs::read(e.path()).unwrap())
        })
        .collect()
}

fn small_scenes(dir: &Path) -> lepidet::dataset::DatasetManifest {
    let cfg = SynthConfig {
        images: 12,
        size: 32,
        min_side: 6,
        max_side: 12,
        ..Default::default()
    };
    generate(&cfg, dir).unwrap()
}

#[test]
fn amplify_twice_is_byte_identical() {
    let src = tempfile::tempdir().unwrap();
    let manifest = small_scenes(src.path());
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    let ma = amplify(&manifest, src.path(), a.path(), 17, 1).unwrap();
    let mb = amplify(&manifest, src.path(), b.path(), 17, 1).unwrap();
    let mc = amplify(&manifest, src.path(), c.path(), 17, 3).unwrap();
    assert_eq!(ma, mb);
    assert_eq!(ma, mc);
    assert_eq!(ma.len(), 120);
    let sa = snapshot(a.path());
    assert_eq!(sa.len(), 120);
    assert_eq!(sa, snapshot(b.path()));
    assert_eq!(sa, snapshot(c.path()));
}

#[test]
fn seed_only_moves_noise() {
    let src = tempfile::tempdir().unwrap();
    let manifest = small_scenes(src.path());
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    amplify(&manifest, src.path(), a.path(), 1, 1).unwrap();
    amplify(&manifest, src.path(), b.path(), 2, 1).unwrap();
    let (sa, sb) = (snapshot(a.path()), snapshot(b.path()));
    for (name, bytes) in &sa {
        let same = bytes == &sb[name];
        assert_eq!(same, !name.contains("gauss_noise"), "{name}");
    }
}
