//! Dataset parsing, filtering and source/target splitting.

use std::collections::BTreeSet;

use proptest::prelude::*;

use rrpn_core::annotations::{
    class_frequencies, enumerate_tuples, filter_no_interaction, load_dataset, parse_dataset, restrict_to_side,
    save_dataset, split_by_frequency, BoundingBox, HoiTuple, ImageRecord, Pose, Side, SplitSpec, NO_INTERACTION,
};

const CLASSES: [&str; 6] = ["apple", "boat", "cup", "dog", "kite", "vase"];
const VERBS: [&str; 3] = ["hold", "ride", NO_INTERACTION];

fn tuple_strategy(w: u32, h: u32) -> impl Strategy<Value = HoiTuple> {
    let (wf, hf) = (w as f64, h as f64);
    (
        0usize..CLASSES.len(),
        0usize..VERBS.len(),
        proptest::option::of((0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64)),
        proptest::collection::vec(proptest::option::of((0.0..=wf, 0.0..=hf)), 18),
    )
        .prop_map(move |(c, v, b, kps)| {
            let object_box = b.map(|(a, b, c, d)| {
                BoundingBox::new(a.min(b) * wf, c.min(d) * hf, a.max(b) * wf, c.max(d) * hf)
            });
            let pose: Vec<Option<[f64; 2]>> = kps.into_iter().map(|k| k.map(|(x, y)| [x, y])).collect();
            HoiTuple {
                verb: VERBS[v].into(),
                object_class: CLASSES[c].into(),
                object_box,
                keypoints: Pose::try_from(pose).unwrap(),
            }
        })
}

fn dataset_strategy() -> impl Strategy<Value = Vec<ImageRecord>> {
    proptest::collection::vec((1u32..500, 1u32..500), 0..6).prop_flat_map(|dims| {
        let per_image: Vec<_> = dims
            .iter()
            .map(|&(w, h)| proptest::collection::vec(tuple_strategy(w, h), 0..5))
            .collect();
        per_image.prop_map(move |tuples| {
            tuples
                .into_iter()
                .zip(&dims)
                .enumerate()
                .map(|(i, (tuples, &(width, height)))| ImageRecord {
                    image_id: format!("img_{i:03}"),
                    image_path: format!("images/img_{i:03}.png").into(),
                    width,
                    height,
                    tuples,
                })
                .collect()
        })
    })
}

fn tuple_count(records: &[ImageRecord]) -> usize {
    records.iter().map(|r| r.tuples.len()).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn save_then_load_is_identity(records in dataset_strategy()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("annotations.json");
        save_dataset(&path, &records).unwrap();
        prop_assert_eq!(load_dataset(&path).unwrap(), records);
    }

    #[test]
    fn filtering_removes_only_the_excluded_verb_and_is_idempotent(records in dataset_strategy()) {
        let once = filter_no_interaction(&records, NO_INTERACTION);
        prop_assert_eq!(filter_no_interaction(&once, NO_INTERACTION), once.clone());
        prop_assert!(once.iter().all(|r| !r.tuples.is_empty()));
        let kept = records.iter().flat_map(|r| &r.tuples).filter(|t| t.verb != NO_INTERACTION).count();
        prop_assert_eq!(tuple_count(&once), kept);
    }

    #[test]
    fn frequency_split_partitions_classes(records in dataset_strategy(), n_target in 1usize..5) {
        // One verb everywhere so every split passes the shared-verb check.
        let records: Vec<ImageRecord> = records
            .into_iter()
            .map(|mut r| {
                r.tuples.iter_mut().for_each(|t| t.verb = "hold".into());
                r
            })
            .collect();
        let freq = class_frequencies(&records);
        match split_by_frequency(&records, n_target) {
            Ok(spec) => {
                let all: BTreeSet<String> = freq.keys().cloned().collect();
                let union: BTreeSet<String> = spec.source_classes.union(&spec.target_classes).cloned().collect();
                prop_assert_eq!(union, all);
                prop_assert!(spec.source_classes.is_disjoint(&spec.target_classes));
                prop_assert_eq!(spec.target_classes.len(), n_target);
                for t in &spec.target_classes {
                    for s in &spec.source_classes {
                        prop_assert!(freq[t] < freq[s] || (freq[t] == freq[s] && t < s));
                    }
                }
                let n_src: usize = enumerate_tuples(&records, &spec, Side::Source).count();
                let n_tgt: usize = enumerate_tuples(&records, &spec, Side::Target).count();
                prop_assert_eq!(n_src + n_tgt, tuple_count(&records));
                prop_assert_eq!(tuple_count(&restrict_to_side(&records, &spec, Side::Target)), n_tgt);
            }
            Err(_) => prop_assert!(n_target >= freq.len()),
        }
    }
}

fn tuple(verb: &str, class: &str) -> HoiTuple {
    HoiTuple {
        verb: verb.into(),
        object_class: class.into(),
        object_box: Some(BoundingBox::new(1.0, 1.0, 5.0, 5.0)),
        keypoints: Pose::empty(),
    }
}

fn image(id: &str, tuples: Vec<HoiTuple>) -> ImageRecord {
    ImageRecord { image_id: id.into(), image_path: format!("{id}.png").into(), width: 10, height: 10, tuples }
}

#[test]
fn parsing_examples() {
    let nulls = format!("[{}]", vec!["null"; 18].join(","));
    let json = format!(
        r#"{{"images": [
        {{"image_id": "a", "image_path": "a.png", "width": 10, "height": 10, "tuples": [
            {{"verb": "hold", "object_class": "cup", "object_box": [1, 1, 4, 4], "keypoints": {nulls}}},
            {{"verb": "ride", "object_class": "boat", "object_box": null, "keypoints": {nulls}}}]}},
        {{"image_id": "b", "image_path": "b.png", "width": 10, "height": 10, "tuples": [
            {{"verb": "hold", "object_class": "cup", "object_box": [0, 0, 2, 2], "keypoints": {nulls}}}]}}]}}"#
    );
    let d = parse_dataset(&json).unwrap();
    assert_eq!(d.len(), 2);
    assert_eq!(tuple_count(&d), 3);
    let short = json.replacen(&nulls, "[]", 1);
    assert!(parse_dataset(&short).unwrap_err().to_string().contains("keypoint"));

    let mut bad = vec![image("broken_one", vec![tuple("hold", "cup")])];
    bad[0].tuples[0].object_box = Some(BoundingBox::new(6.0, 1.0, 2.0, 5.0));
    let text = rrpn_core::annotations::dataset_to_json(&bad).unwrap();
    let err = parse_dataset(&text).unwrap_err().to_string();
    assert!(err.contains("broken_one"), "{err}");
}

#[test]
fn filter_and_side_examples() {
    let d = vec![image("a", vec![tuple("hold", "cup")]), image("b", vec![tuple("ride", "boat")])];
    assert_eq!(filter_no_interaction(&d, NO_INTERACTION), d);
    let all_excluded = vec![image("a", vec![tuple(NO_INTERACTION, "cup")])];
    assert!(filter_no_interaction(&all_excluded, NO_INTERACTION).is_empty());

    let mixed = vec![image("m", vec![tuple("hold", "apple"), tuple("hold", "boat")])];
    let spec = SplitSpec::explicit(&mixed, ["boat".to_string()], ["apple".to_string()]).unwrap();
    assert_eq!(enumerate_tuples(&mixed, &spec, Side::Target).count(), 1);
    let triple = vec![image("t", vec![tuple("hold", "apple"), tuple("ride", "apple"), tuple("hold", "apple")]), image("s", vec![tuple("hold", "boat"), tuple("ride", "boat")])];
    let spec = SplitSpec::explicit(&triple, ["boat".to_string()], ["apple".to_string()]).unwrap();
    let refs: Vec<_> = enumerate_tuples(&triple, &spec, Side::Target).collect();
    assert_eq!(refs.len(), 3);
    assert!(refs.iter().all(|r| r.record.image_id == "t"));
    let empty = SplitSpec::explicit(&triple, ["boat".to_string(), "apple".to_string()], Vec::<String>::new()).unwrap();
    assert_eq!(enumerate_tuples(&triple, &empty, Side::Target).count(), 0);
}

#[test]
fn frequency_tie_goes_to_the_smaller_label() {
    let d = vec![image(
        "x",
        vec![tuple("hold", "zebra"), tuple("hold", "zebra"), tuple("hold", "kite"), tuple("hold", "apple"), tuple("hold", "kite")],
    ), image("y", vec![tuple("hold", "zebra")])];
    // apple 1, kite 2, zebra 3.
    assert_eq!(split_by_frequency(&d, 1).unwrap().target_classes, BTreeSet::from(["apple".to_string()]));
    let tie = vec![image("x", vec![tuple("hold", "boat"), tuple("hold", "apple"), tuple("hold", "cup"), tuple("hold", "cup")])];
    assert_eq!(split_by_frequency(&tie, 1).unwrap().target_classes, BTreeSet::from(["apple".to_string()]));
}
