use eva_gllvm::io::{matrix_csv, parse_table, table_csv, IoError, ParametersJson, VariationalJson};
use eva_gllvm_core::simulate::{stream_rng, synthetic_truth};
use eva_gllvm_core::{Family, ModelSpec, VariationalParams};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn line_of(err: IoError) -> u64 {
    match err {
        IoError::Csv { line, .. } => line,
        other => panic!("expected a CSV error, got {other}"),
    }
}

#[test]
fn parses_header_and_rows() {
    let t = parse_table("a,b\n1,2.5\n-3,4e-2\n", "t").unwrap();
    assert_eq!(t.columns, vec!["a", "b"]);
    assert_eq!(t.values, DMatrix::from_row_slice(2, 2, &[1.0, 2.5, -3.0, 0.04]));
}

#[test]
fn errors_carry_line_numbers() {
    let bad_number = parse_table("a,b\n1,2\n3,x\n", "t").unwrap_err();
    assert!(bad_number.to_string().contains("line 3"), "{bad_number}");
    assert_eq!(line_of(bad_number), 3);
    assert_eq!(line_of(parse_table("a,b\n1,2\n3\n", "t").unwrap_err()), 3);
    let missing = parse_table("a,b\n1,\n", "t").unwrap_err();
    assert!(missing.to_string().contains("missing"), "{missing}");
    assert_eq!(line_of(parse_table("a,b\n1,2\nNA,2\n", "t").unwrap_err()), 3);
    assert_eq!(line_of(parse_table("a\ninf\n", "t").unwrap_err()), 2);
    assert!(parse_table("a,b\n", "t").is_err());
}

#[test]
fn quoted_headers_round_trip() {
    let columns = vec!["plain".to_string(), "with,comma".to_string(), "with \"quote\"".to_string()];
    let values = DMatrix::from_row_slice(1, 3, &[1.0, 2.0, 3.0]);
    let text = String::from_utf8(matrix_csv(&columns, &values)).unwrap();
    assert!(text.starts_with("plain,\"with,comma\",\"with \"\"quote\"\"\"\r\n"), "{text}");
    let back = parse_table(&text, "t").unwrap();
    assert_eq!(back.columns, columns);
    assert_eq!(back.values, values);
}

#[test]
fn table_csv_keeps_column_order() {
    let text = table_csv(&["z".into(), "a".into()], &[vec!["1".into(), "2".into()]]);
    assert_eq!(text, b"z,a\r\n1,2\r\n");
}

#[test]
fn occurrence_filter_drops_rare_columns() {
    let mut t = parse_table("a,b,c\n0,1,2\n0,0,3\n1,0,4\n", "t").unwrap();
    let dropped = t.filter_min_occurrences(2);
    assert_eq!(dropped, vec!["a", "b"]);
    assert_eq!(t.columns, vec!["c"]);
    assert_eq!(t.values, DMatrix::from_column_slice(3, 1, &[2.0, 3.0, 4.0]));
}

#[test]
fn parameters_json_round_trip() {
    for (family, q) in [(Family::NegBinomialLog, 2), (Family::PoissonLog, 0), (Family::TweedieLog, 1)] {
        let spec = ModelSpec::new(family, 7, 5, 2, q).unwrap();
        let truth = synthetic_truth(&spec, &mut stream_rng(1, 0));
        let text = serde_json::to_string(&ParametersJson::from(&truth)).unwrap();
        let back: ParametersJson = serde_json::from_str(&text).unwrap();
        assert_eq!(back.to_parameters(q, 2).unwrap(), truth);
    }
    let bad: ParametersJson = serde_json::from_str(r#"{"beta0":[1,2],"b":[[1]],"gamma":[[1],[0]],"phi":null,"alpha":null,"nu":null}"#).unwrap();
    assert!(bad.to_parameters(1, 1).is_err());
    assert!(serde_json::from_str::<ParametersJson>(r#"{"beta0":[],"extra":1}"#).is_err());
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(prop::num::f64::NORMAL | prop::num::f64::ZERO, rows * cols)
        .prop_map(move |v| DMatrix::from_vec(rows, cols, v))
}

proptest! {
    #[test]
    fn csv_round_trips_exactly(m in (1usize..6, 1usize..5).prop_flat_map(|(r, c)| matrix(r, c))) {
        let columns: Vec<String> = (0..m.ncols()).map(|c| format!("col{c}")).collect();
        let back = parse_table(std::str::from_utf8(&matrix_csv(&columns, &m)).unwrap(), "t").unwrap();
        prop_assert_eq!(back.columns, columns);
        prop_assert_eq!(back.values, m);
    }

    #[test]
    fn variational_json_round_trips_exactly(a in matrix(4, 2), d in prop::collection::vec(0.01f64..5.0, 8), off in prop::collection::vec(-3.0f64..3.0, 4)) {
        let chol = (0..4)
            .map(|i| DMatrix::from_row_slice(2, 2, &[d[2 * i], 0.0, off[i], d[2 * i + 1]]))
            .collect();
        let v = VariationalParams { a, chol };
        let text = serde_json::to_string(&VariationalJson::from(&v)).unwrap();
        let back: VariationalJson = serde_json::from_str(&text).unwrap();
        prop_assert_eq!(back.to_variational(2).unwrap(), v);
    }
}
