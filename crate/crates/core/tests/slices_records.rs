use std::collections::{BTreeMap, BTreeSet};

use opflow_core::record::{Phase, ReuseSet, StepRecord};
use opflow_core::signature::{ParameterDecl, Signature};
use opflow_core::slices::{aggregate_slice_outputs, expand_slices, item_field, split_list, SliceSource};
use opflow_core::template::StepKind;
use opflow_core::value::{IoValues, ParameterValue, TypeTag};
use proptest::prelude::*;

fn out_sig() -> Signature {
    Signature::new().parameter("y", ParameterDecl::of(TypeTag::Int))
}

proptest! {
    /// Fan out a list, "run" each instance in a shuffled order, stack back.
    #[test]
    fn fan_out_fan_in_preserves_index_order(
        xs in proptest::collection::vec(-1000i64..1000, 0..40),
        fail in proptest::collection::vec(any::<bool>(), 40),
        order in Just(()).prop_perturb(|_, mut rng| rng.next_u64()),
    ) {
        let text = serde_json::to_string(&xs).unwrap();
        let elems = split_list("x", &text).unwrap();
        let sources = BTreeMap::from([("x".to_string(), SliceSource::Parameters(elems))]);
        let inst = expand_slices("g", &sources, &IoValues::default()).unwrap();
        prop_assert_eq!(inst.len(), xs.len());

        let mut idx: Vec<usize> = (0..inst.len()).collect();
        // Deterministic shuffle from the drawn seed.
        let mut s = order;
        for i in (1..idx.len()).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            idx.swap(i, (s >> 33) as usize % (i + 1));
        }
        let mut results: Vec<Option<IoValues>> = vec![None; inst.len()];
        for i in idx {
            let x: i64 = inst[i].inputs.parameters["x"].text.parse().unwrap();
            prop_assert_eq!(&inst[i].key, &format!("g-{i}"));
            prop_assert_eq!(&inst[i].item, &x.to_string());
            if !fail[i] {
                results[i] = Some(IoValues::default().with_parameter(
                    "y",
                    ParameterValue::parse(TypeTag::Int, &(x * 2).to_string()).unwrap(),
                ));
            }
        }
        let stacked = aggregate_slice_outputs(&results, &BTreeSet::from(["y".to_string()]), &out_sig());
        let got: Vec<Option<i64>> = serde_json::from_str(&stacked.parameters["y"].text).unwrap();
        let want: Vec<Option<i64>> = xs.iter().enumerate().map(|(i, x)| (!fail[i]).then_some(x * 2)).collect();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn several_sliced_inputs_zip_into_item_objects(
        pairs in proptest::collection::vec(("[a-z]{0,3}", 0u32..100), 1..10)
    ) {
        let a: Vec<String> = pairs.iter().map(|p| p.0.clone()).collect();
        let b: Vec<String> = pairs.iter().map(|p| p.1.to_string()).collect();
        let sources = BTreeMap::from([
            ("a".to_string(), SliceSource::Parameters(a.clone())),
            ("b".to_string(), SliceSource::Parameters(b.clone())),
        ]);
        let inst = expand_slices("k", &sources, &IoValues::default()).unwrap();
        for (i, s) in inst.iter().enumerate() {
            prop_assert_eq!(item_field(&s.item, "a").unwrap(), a[i].clone());
            prop_assert_eq!(item_field(&s.item, "b").unwrap(), b[i].clone());
        }
    }
}

#[test]
fn mismatched_lengths_and_non_lists_fail() {
    let sources = BTreeMap::from([
        ("a".to_string(), SliceSource::Parameters(vec!["1".into()])),
        ("b".to_string(), SliceSource::Parameters(vec![])),
    ]);
    assert!(expand_slices("k", &sources, &IoValues::default()).is_err());
    assert!(split_list("x", "{\"a\": 1}").is_err());
    assert_eq!(split_list("x", "[\"s\", 1, {\"k\": true}]").unwrap(), ["s", "1", "{\"k\":true}"]);
}

fn record(key: &str, phase: Phase, y: &str) -> StepRecord {
    StepRecord {
        key: key.into(),
        keyed: true,
        name: "s".into(),
        template: "t".into(),
        kind: StepKind::Pod,
        path: "s".into(),
        parent: None,
        phase,
        attempt: 1,
        inputs: IoValues::default(),
        outputs: phase
            .has_outputs()
            .then(|| IoValues::default().with_parameter("y", ParameterValue::parse(TypeTag::Int, y).unwrap())),
        slice_index: None,
        started_at: Some(1),
        ended_at: Some(2),
        failure: None,
    }
}

#[test]
fn reuse_set_keys_and_modification() {
    let set = ReuseSet::new([record("a", Phase::Succeeded, "1"), record("a", Phase::Reused, "2")]).unwrap();
    assert_eq!(set.len(), 1);
    assert_eq!(set.resolve_reuse("a").unwrap().outputs.as_ref().unwrap().parameters["y"].text, "2");
    assert!(set.resolve_reuse("A").is_none());
    assert!(ReuseSet::new([record("f", Phase::Failed, "0")]).is_err());

    let r = record("a", Phase::Succeeded, "1");
    assert_eq!(r.modify_output_parameter("y", "+05").unwrap().outputs.unwrap().parameters["y"].text, "5");
    assert!(r.modify_output_parameter("y", "five").is_err());
    assert!(r.modify_output_parameter("z", "1").is_err());
    assert!(record("f", Phase::Failed, "0").modify_output_parameter("y", "1").is_err());
}

#[test]
fn phase_machine() {
    use Phase::*;
    let all = [Pending, Running, Succeeded, Failed, Skipped, Reused];
    let legal: BTreeSet<(Phase, Phase)> = [
        (Pending, Running),
        (Pending, Skipped),
        (Pending, Reused),
        (Running, Succeeded),
        (Running, Failed),
    ]
    .into();
    for a in all {
        for b in all {
            // Re-persisting the current phase is always allowed.
            assert_eq!(a.can_transition(b), a == b || legal.contains(&(a, b)), "{a} -> {b}");
        }
    }
}
