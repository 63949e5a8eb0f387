use std::collections::HashSet;

use dupless::evaluation::{self, DatasetManifest, SliceRecord, SplitPlan, TissueClass};
use proptest::prelude::*;

fn manifest(counts: [usize; 4]) -> DatasetManifest {
    let records = TissueClass::ALL
        .iter()
        .zip(counts)
        .flat_map(|(&c, n)| {
            (0..n).map(move |i| SliceRecord {
                slice_id: format!("{c}-{i:03}"),
                label: c,
                path: String::new(),
                patch_ids: vec![],
            })
        })
        .collect();
    DatasetManifest::new(records).unwrap().with_grid(3, 4)
}

fn class() -> impl Strategy<Value = TissueClass> {
    (0usize..4).prop_map(|i| TissueClass::ALL[i])
}

proptest! {
    #[test]
    fn kfold_partitions_and_stratifies(counts in proptest::array::uniform4(4usize..30), seed in any::<u64>()) {
        let m = manifest(counts);
        let folds = evaluation::make_split(&m, &SplitPlan::kfold(seed)).unwrap();
        prop_assert_eq!(folds.len(), 4);
        let mut tested = HashSet::new();
        for f in &folds {
            f.assert_disjoint().unwrap();
            prop_assert_eq!(f.train.len() + f.test.len(), m.len());
            for (c, &n) in TissueClass::ALL.iter().zip(&counts) {
                let k = f.test.iter().filter(|id| m.get(id).unwrap().label == *c).count();
                prop_assert!(k == n / 4 || k == n.div_ceil(4), "class {} has {} of {} in a fold", c, k, n);
            }
            for t in &f.test {
                prop_assert!(tested.insert(t.clone()));
            }
        }
        prop_assert_eq!(tested.len(), m.len());
        prop_assert_eq!(&folds, &evaluation::make_split(&m, &SplitPlan::kfold(seed)).unwrap());
    }

    #[test]
    fn holdout_is_stratified(counts in proptest::array::uniform4(2usize..40), seed in any::<u64>()) {
        let m = manifest(counts);
        let f = &evaluation::make_split(&m, &SplitPlan::holdout(seed)).unwrap()[0];
        f.assert_disjoint().unwrap();
        for (c, &n) in TissueClass::ALL.iter().zip(&counts) {
            let k = f.test.iter().filter(|id| m.get(id).unwrap().label == *c).count();
            let want = ((0.25 * n as f64).round() as usize).clamp(1, n - 1);
            prop_assert_eq!(k, want);
        }
    }

    #[test]
    fn sensitivities_are_bounded(pairs in proptest::collection::vec((class(), class()), 1..80)) {
        let (truth, pred): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let r = evaluation::compute_sensitivity(&truth, &pred).unwrap();
        prop_assert_eq!(r.total(), truth.len());
        for (c, s) in r.per_class.iter().enumerate() {
            let present = truth.iter().any(|t| t.index() == c);
            prop_assert_eq!(s.is_some(), present);
            if let Some(s) = s {
                prop_assert!((0.0..=1.0).contains(s));
                let row = r.confusion[c];
                prop_assert!((s - row[c] as f64 / row.iter().sum::<usize>() as f64).abs() < 1e-12);
            }
        }
        let present: Vec<f64> = r.per_class.iter().flatten().copied().collect();
        prop_assert!((r.overall - present.iter().sum::<f64>() / present.len() as f64).abs() < 1e-12);
    }
}

#[test]
fn too_few_slices_for_four_folds() {
    let m = manifest([3, 8, 8, 8]);
    assert!(evaluation::make_split(&m, &SplitPlan::kfold(0)).is_err());
}

#[test]
fn manifest_csv_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let m = manifest([2, 2, 2, 2]);
    let path = dir.path().join("manifest.csv");
    m.write_csv(&path).unwrap();
    let back = DatasetManifest::read_csv(&path).unwrap();
    let ids = |m: &DatasetManifest| m.slices().iter().map(|s| (s.slice_id.clone(), s.label)).collect::<Vec<_>>();
    assert_eq!(ids(&back), ids(&m));
}

#[test]
fn duplicate_slice_ids_are_rejected() {
    let r = SliceRecord {
        slice_id: "a".into(),
        label: TissueClass::Benign,
        path: String::new(),
        patch_ids: vec![],
    };
    assert!(DatasetManifest::new(vec![r.clone(), r]).is_err());
}

#[test]
fn report_tables_mark_absent_classes() {
    let truth = [TissueClass::Normal, TissueClass::Normal, TissueClass::Invasive];
    let pred = [TissueClass::Normal, TissueClass::Benign, TissueClass::Invasive];
    let mut r = evaluation::compute_sensitivity(&truth, &pred).unwrap();
    r.extractor = "x".into();
    r.method = "patch-svm".into();
    let table = evaluation::patch_table(&[r]);
    assert!(table.contains("| x | 50.0 | - | - | 100.0 | 75.0 |"), "{table}");
}
