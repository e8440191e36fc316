use poal::data::{parse_libsvm, serialize_libsvm, Dataset};
use proptest::prelude::*;

fn dataset() -> impl Strategy<Value = Dataset> {
    (1usize..5, 2usize..5, 1usize..20).prop_flat_map(|(dim, k, n)| {
        let values = prop::collection::vec(
            prop_oneof![Just(0.0), -1e6f64..1e6, prop::num::f64::NORMAL],
            n * dim,
        );
        let labels = prop::collection::vec(0..k as i32, n);
        (values, labels).prop_map(move |(features, mut labels)| {
            // every class must appear
            for c in 0..k.min(labels.len()) {
                labels[c] = c as i32;
            }
            let used = *labels.iter().max().unwrap() as usize + 1;
            let names = (0..used).map(|c| format!("{}", c + 1)).collect();
            Dataset::new("gen", features, dim, labels, names).unwrap()
        })
    })
}

proptest! {
    #[test]
    fn serialize_then_parse_is_identity(ds in dataset()) {
        let back = parse_libsvm(&serialize_libsvm(&ds)).unwrap();
        prop_assert_eq!(back.dim(), ds.dim());
        prop_assert_eq!(back.features(), ds.features());
        let names = |d: &Dataset| (0..d.len()).map(|i| d.class_names()[d.label(i) as usize].clone()).collect::<Vec<_>>();
        prop_assert_eq!(names(&back), names(&ds));
    }
}
