use biaslab::data::{
    generate_preference_corpus, generate_vit_corpus, Corpus, CorpusHeader, CorpusKind, WorldConfig,
};
use biaslab::model::{Model, ModelConfig, ParamSnapshot};
use biaslab::refcache::{build_cache, CacheFile, CacheKey, ReferenceSource, Role};
use biaslab::types::Mode;
use biaslab::Error;

const BOTH: [Mode; 2] = [Mode::Multimodal, Mode::TextOnly];

fn snapshot(seed: u64) -> ParamSnapshot {
    ParamSnapshot::capture(&Model::<f32>::init(ModelConfig::default(), seed).unwrap())
}

fn corpora(dir: &std::path::Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let w = WorldConfig::default();
    let vit = Corpus::vit(
        CorpusHeader::new(CorpusKind::Vit, 10, 0, &w),
        generate_vit_corpus(&w, 10, 0).unwrap(),
    );
    let pref = Corpus::preference(
        CorpusHeader::new(CorpusKind::Preference, 10, 0, &w),
        generate_preference_corpus(&w, 10, 0).unwrap(),
    );
    let (a, b) = (dir.join("vit.jsonl"), dir.join("pref.jsonl"));
    vit.save(&a).unwrap();
    pref.save(&b).unwrap();
    (a, b)
}

#[test]
fn entry_counts() {
    let dir = tempfile::tempdir().unwrap();
    let (vit, pref) = corpora(dir.path());
    let snap = snapshot(0);
    assert_eq!(build_cache(&vit, &snap, &BOTH).unwrap().len(), 20);
    assert_eq!(build_cache(&pref, &snap, &BOTH).unwrap().len(), 40);
    assert_eq!(
        build_cache(&vit, &snap, &[Mode::TextOnly]).unwrap().len(),
        10
    );
}

#[test]
fn cached_values_equal_live_scores() {
    let dir = tempfile::tempdir().unwrap();
    let (_, pref) = corpora(dir.path());
    let snap = snapshot(1);
    let cache = build_cache(&pref, &snap, &BOTH).unwrap();
    let path = dir.path().join("ref.cache");
    cache.save(&path).unwrap();
    let loaded = CacheFile::load(&path).unwrap();
    assert_eq!(loaded, cache);

    let live: Model<f32> = snap.restore_reference().unwrap();
    let pairs = generate_preference_corpus(&WorldConfig::default(), 10, 0).unwrap();
    for p in pairs.iter().step_by(2) {
        for (role, y) in [(Role::Chosen, &p.chosen), (Role::Rejected, &p.rejected)] {
            for mode in BOTH {
                let v = (mode == Mode::Multimodal).then_some(&p.visual);
                let want = live.score_sequence(v, &p.instruction, y).unwrap();
                let key = CacheKey {
                    id: p.pair_id.clone(),
                    role,
                    mode,
                    snapshot_hash: snap.hash().to_string(),
                };
                let got = loaded.lookup(&key).unwrap();
                assert_eq!(got, &want);
                assert!((got.total() - want.total()).abs() <= 1e-12);
                assert_eq!(
                    loaded
                        .trace(&p.pair_id, role, v, &p.instruction, y)
                        .unwrap(),
                    want
                );
            }
        }
    }
}

#[test]
fn rebuild_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (vit, _) = corpora(dir.path());
    let snap = snapshot(2);
    let a = build_cache(&vit, &snap, &BOTH).unwrap().to_bytes();
    let b = build_cache(&vit, &snap, &BOTH).unwrap().to_bytes();
    assert_eq!(a, b);
}

#[test]
fn lookup_errors() {
    let dir = tempfile::tempdir().unwrap();
    let (vit, _) = corpora(dir.path());
    let a = snapshot(3);
    let b = snapshot(4);
    let cache = build_cache(&vit, &a, &BOTH).unwrap();
    let key = cache.keys().next().unwrap();
    assert!(cache.lookup(&key).is_ok());

    let missing = CacheKey {
        id: "vit-999999".into(),
        ..key.clone()
    };
    assert!(matches!(cache.lookup(&missing), Err(Error::MissingKey(_))));

    let other = CacheKey {
        snapshot_hash: b.hash().to_string(),
        ..key
    };
    assert!(matches!(
        cache.lookup(&other),
        Err(Error::HashMismatch { .. })
    ));
    assert!(matches!(
        cache.verify(b.hash(), None),
        Err(Error::HashMismatch { .. })
    ));
    assert!(cache.verify(a.hash(), Some(cache.corpus_hash())).is_ok());
}

#[test]
fn corrupted_file_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (vit, _) = corpora(dir.path());
    let mut bytes = build_cache(&vit, &snapshot(5), &BOTH).unwrap().to_bytes();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 1;
    assert!(matches!(
        CacheFile::from_bytes(&bytes),
        Err(Error::HashMismatch { .. })
    ));
    assert!(CacheFile::from_bytes(&bytes[..10]).is_err());
}

#[test]
fn over_long_sequence_names_the_record() {
    let dir = tempfile::tempdir().unwrap();
    let (vit, _) = corpora(dir.path());
    let cfg = ModelConfig {
        max_seq_len: 12,
        ..ModelConfig::default()
    };
    let snap = ParamSnapshot::capture(&Model::<f32>::init(cfg, 0).unwrap());
    match build_cache(&vit, &snap, &BOTH) {
        Err(Error::SequenceTooLong { id: Some(id), .. }) => assert!(id.starts_with("vit-")),
        other => panic!("expected a length error, got {other:?}"),
    }
}
