use fundus_guide::data::{
    generate_corpus, load_dataset, merge_annotations, read_annotations, read_manifest, write_cases,
    ConsensusRule, CorpusSpec, Dataset, Verdict, ANNOTATION_FILE,
};

fn spec(count: usize, seed: u64) -> CorpusSpec {
    CorpusSpec {
        count,
        seed,
        ..Default::default()
    }
}

#[test]
fn corpus_is_a_pure_function_of_its_spec() {
    let a = generate_corpus(&spec(12, 3)).unwrap();
    let b = generate_corpus(&spec(12, 3)).unwrap();
    let c = generate_corpus(&spec(12, 4)).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.image.as_raw(), y.image.as_raw());
        assert_eq!(x.annotations, y.annotations);
    }
    assert!(a.iter().zip(&c).any(|(x, y)| x.image.as_raw() != y.image.as_raw()));
}

#[test]
fn lesions_stay_inside_their_target_regions() {
    let cases = generate_corpus(&CorpusSpec {
        target_regions: vec![3],
        positive_fraction: 1.0,
        ..spec(16, 5)
    })
    .unwrap();
    for c in &cases {
        assert!(c.lesion_mask.count() > 0, "{} has no lesion", c.id);
        assert_eq!(c.lesion_regions.to_vec(), vec![3], "{}", c.id);
    }
}

#[test]
fn written_corpus_loads_back_with_the_same_labels() {
    let dir = tempfile::tempdir().unwrap();
    let cases = generate_corpus(&spec(20, 6)).unwrap();
    write_cases(dir.path(), &cases, "train").unwrap();
    assert_eq!(read_manifest(dir.path()).unwrap().len(), 20);

    let rule = ConsensusRule::default();
    let in_memory = Dataset::from_cases(&cases, "hemorrhage", rule).unwrap();
    let loaded = load_dataset(dir.path(), Some("train"), 64, "hemorrhage", rule).unwrap();
    assert_eq!(loaded.consensus, in_memory.consensus);
    let ids = |d: &Dataset| d.samples.iter().map(|s| (s.id.clone(), s.label, s.cue_regions)).collect::<Vec<_>>();
    assert_eq!(ids(&loaded), ids(&in_memory));

    let anns = read_annotations(&dir.path().join(ANNOTATION_FILE)).unwrap();
    let labels = merge_annotations(&anns, "hemorrhage", rule).unwrap();
    assert_eq!(labels.len(), 20);
    let present = labels.iter().filter(|l| l.verdict == Verdict::Present).count();
    assert_eq!(present, loaded.consensus.present);
    assert!(load_dataset(dir.path(), Some("test"), 64, "hemorrhage", rule).is_err());
}

#[test]
fn split_partitions_without_overlap() {
    let ds = Dataset::from_cases(&generate_corpus(&spec(40, 7)).unwrap(), "hemorrhage", ConsensusRule::default()).unwrap();
    let (a, b) = ds.split(0.9, 3).unwrap();
    assert_eq!(a.len() + b.len(), ds.len());
    assert!(a.samples.iter().all(|s| b.samples.iter().all(|t| t.id != s.id)));
    assert_eq!(ds.split(0.9, 3).unwrap(), (a, b));
}
