use std::collections::BTreeMap;
use std::io::Write;

use approx::assert_relative_eq;
use ccbym2::data::{
    build_design, load_dataset, prepare, sampling_correction, standardize, unstandardize_coefficients, CorrectionMode,
    Formula, Prevalence, RawRecord, Schema,
};
use proptest::prelude::*;

fn schema() -> Schema {
    Schema {
        label: "y".into(),
        small_area: Some("area".into()),
        large_area: Some("region".into()),
        covariates: vec!["age".into(), "edu".into()],
        delimiter: ',',
    }
}

fn write_csv(text: &str) -> tempfile::NamedTempFile {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    f.write_all(text.as_bytes()).unwrap();
    f
}

#[test]
fn listwise_deletion_ignores_unmapped_columns() {
    let f = write_csv(
        "y,age,edu,area,region,notes\n\
         1,30,1,a,r1,\n\
         0,NA,0,a,r1,x\n\
         0,41,,b,r1,x\n\
         1,22,0,b,r2,NA\n",
    );
    let loaded = load_dataset(f.path(), &schema()).unwrap();
    assert_eq!(loaded.records.len(), 2);
    assert_eq!(loaded.dropped, 2);
    assert_eq!(loaded.records[1].large_area, "r2");
}

#[test]
fn non_binary_label_is_rejected() {
    let f = write_csv("y,age,edu,area,region\n2,30,1,a,r1\n");
    let err = load_dataset(f.path(), &schema()).unwrap_err();
    assert!(err.to_string().contains("not binary"), "{err}");
}

#[test]
fn missing_column_is_named() {
    let f = write_csv("y,age,area,region\n1,30,a,r1\n");
    let err = load_dataset(f.path(), &schema()).unwrap_err();
    assert!(err.to_string().contains("'edu'"), "{err}");
}

#[test]
fn tab_delimited_input() {
    let f = write_csv("y\tage\tedu\tarea\tregion\n1\t30\t1\ta\tr1\n");
    let s = Schema { delimiter: '\t', ..schema() };
    assert_eq!(load_dataset(f.path(), &s).unwrap().records.len(), 1);
}

#[test]
fn theta1_is_one_half_when_hidden_cases_match_labels() {
    for (n1, nu, pi) in [(50, 500, 0.1), (20, 80, 0.25), (1, 2, 0.5)] {
        let c = sampling_correction(n1, nu, pi).unwrap();
        assert_eq!(c.theta1, 0.5);
        assert_relative_eq!(c.log_offset, 2f64.ln(), epsilon = 1e-15);
        assert_eq!(c.theta0, 0.0);
    }
    assert!(sampling_correction(0, 10, 0.1).is_err());
    assert!(sampling_correction(5, 10, 1.0).is_err());
}

fn record(y: u8, age: f64, edu: f64, area: &str, region: &str) -> RawRecord {
    RawRecord {
        y,
        covariates: BTreeMap::from([("age".to_string(), age), ("edu".to_string(), edu)]),
        small_area: area.into(),
        large_area: region.into(),
    }
}

#[test]
fn prepare_builds_corrections_per_large_area() {
    let records = vec![
        record(1, 30.0, 1.0, "a", "r1"),
        record(0, 40.0, 0.0, "b", "r1"),
        record(0, 50.0, 1.0, "b", "r1"),
        record(1, 20.0, 0.0, "a", "r2"),
        record(0, 60.0, 0.0, "c", "r2"),
    ];
    let formula = Formula::parse(&["age", "edu", "age:edu"]).unwrap();
    let roster: Vec<String> = ["c", "b", "a", "d"].iter().map(|s| s.to_string()).collect();
    let prevalence = Prevalence::PerArea(BTreeMap::from([("r1".into(), 0.25), ("r2".into(), 0.5)]));
    let prep = prepare(&records, &formula, Some(&roster), &prevalence, CorrectionMode::PerLargeArea).unwrap();
    assert_eq!(prep.data.n_small, 4);
    assert_eq!(prep.data.small_area, vec![2, 1, 1, 2, 0]);
    // r1: n1 = 1, n_u = 2, pi = 0.25 -> theta1 = 1 / 1.5
    assert_relative_eq!(prep.data.theta1(0), 2.0 / 3.0, epsilon = 1e-15);
    assert_relative_eq!(prep.data.theta1(1), 2.0 / 3.0, epsilon = 1e-15);
    assert_eq!(prep.data.x.names()[3], "age:edu");

    let global = prepare(&records, &formula, None, &Prevalence::Global(0.1), CorrectionMode::Global).unwrap();
    let c = sampling_correction(2, 3, 0.1).unwrap();
    assert_eq!(global.data.corrections, vec![c, c]);
}

#[test]
fn interactions_use_raw_values() {
    let records = vec![record(1, 30.0, 1.0, "a", "r"), record(0, 40.0, 0.0, "a", "r"), record(0, 35.0, 1.0, "a", "r")];
    let x = build_design(&records, &Formula::parse(&["age", "edu", "edu:age"]).unwrap()).unwrap();
    assert_eq!(x.column(3), vec![30.0, 0.0, 35.0]);
    let (z, info) = standardize(&x).unwrap();
    assert_relative_eq!(info.mean[3], 65.0 / 3.0, epsilon = 1e-12);
    assert_relative_eq!(ccbym2::math::mean(&z.column(3)), 0.0, epsilon = 1e-12);
    assert_relative_eq!(ccbym2::math::sd(&z.column(3)), 1.0, epsilon = 1e-12);
}

proptest! {
    #[test]
    fn rows_with_missing_mapped_fields_are_dropped(mask in prop::collection::vec(prop::collection::vec(any::<bool>(), 6), 1..30)) {
        let mut text = String::from("y,age,edu,area,region,extra\n");
        let mut complete = 0;
        for (i, row) in mask.iter().enumerate() {
            let vals = [format!("{}", i % 2), format!("{}", 20 + i), format!("{}", i % 3 % 2), "a".into(), "r".into(), "z".into()];
            let fields: Vec<String> = vals.iter().zip(row).map(|(v, &m)| if m { "NA".to_string() } else { v.clone() }).collect();
            if !row[..5].iter().any(|&m| m) {
                complete += 1;
            }
            text.push_str(&fields.join(","));
            text.push('\n');
        }
        let f = write_csv(&text);
        let loaded = load_dataset(f.path(), &schema()).unwrap();
        prop_assert_eq!(loaded.records.len(), complete);
        prop_assert_eq!(loaded.dropped, mask.len() - complete);
    }

    #[test]
    fn linear_predictor_is_invariant_to_standardization(
        rows in prop::collection::vec((-50.0f64..50.0, -3.0f64..3.0), 3..40),
        beta in prop::collection::vec(-2.0f64..2.0, 3),
    ) {
        let n = rows.len();
        let mut vals = Vec::with_capacity(3 * n);
        for &(a, b) in &rows {
            vals.extend([1.0, a, b]);
        }
        let x = ccbym2::data::DesignMatrix::new(vec!["(Intercept)".into(), "a".into(), "b".into()], n, vals).unwrap();
        let Ok((z, info)) = standardize(&x) else { return Ok(()) };
        let raw_beta = unstandardize_coefficients(&beta, &info).unwrap();
        for i in 0..n {
            let lhs = ccbym2::math::dot(z.row(i), &beta);
            let rhs = ccbym2::math::dot(x.row(i), &raw_beta);
            prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + lhs.abs()), "{} vs {}", lhs, rhs);
        }
        let back = info.invert(&info.apply(x.row(0)));
        for (u, v) in back.iter().zip(x.row(0)) {
            prop_assert!((u - v).abs() <= 1e-9 * (1.0 + v.abs()));
        }
    }
}
