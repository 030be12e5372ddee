use jumpest::io::{read_path_csv, write_path_csv};
use jumpest::model::StateSpace;
use jumpest::simulate::ObservationPath;
use proptest::prelude::*;

proptest! {
    #[test]
    fn path_csv_round_trip_is_exact(
        values in prop::collection::vec(prop::num::f64::NORMAL | prop::num::f64::ZERO | prop::num::f64::SUBNORMAL, 2..200),
        delta in 1e-6f64..1.0,
    ) {
        let p = ObservationPath::from_values(values.clone(), delta).unwrap();
        let mut buf = Vec::new();
        write_path_csv(&p, &mut buf).unwrap();
        let q = read_path_csv(buf.as_slice(), &StateSpace::real_line()).unwrap();
        prop_assert!((q.delta() - delta).abs() <= 1e-12 * delta);
        prop_assert_eq!(q.values, values);
    }

    #[test]
    fn shuffled_index_is_rejected_with_its_line(len in 3usize..50, at in 1usize..49) {
        let at = at % (len - 1) + 1;
        let mut text = String::from("i,t,x\n");
        for i in 0..len {
            let idx = if i == at { i + 1 } else { i };
            text.push_str(&format!("{idx},{},0.5\n", i as f64 * 0.1));
        }
        let err = read_path_csv(text.as_bytes(), &StateSpace::real_line()).unwrap_err();
        prop_assert_eq!(err, jumpest::Error::Data { row: at + 2, message: format!("index {} out of sequence, expected {at}", at + 1) });
    }
}
