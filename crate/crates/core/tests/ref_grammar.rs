use hcforge::refs::{classify_reference, parse_reference, ReferenceFamily};

#[test]
fn reference_table() {
    let table = include_str!("data/references.tsv");
    let mut checked = 0;
    for line in table.lines().filter(|l| !l.starts_with('#')) {
        let cols: Vec<&str> = line.split('\t').collect();
        let raw = cols[0];
        if cols[1] == "!" {
            assert!(parse_reference(raw).is_err(), "{raw:?} should not parse");
            assert_eq!(
                classify_reference(raw),
                ReferenceFamily::Unrecognized,
                "{raw:?}"
            );
            checked += 1;
            continue;
        }
        let r = parse_reference(raw).unwrap_or_else(|e| panic!("{raw:?}: {e}"));
        let opt = |s: &str| (s != "-").then(|| s.to_string());
        assert_eq!(format!("{:?}", r.family), cols[1], "{raw:?}");
        assert_eq!(classify_reference(raw), r.family, "{raw:?}");
        assert_eq!(format!("{:?}", r.platform), cols[2], "{raw:?}");
        assert_eq!(r.tile_id, opt(cols[3]), "{raw:?}");
        assert_eq!(
            r.acquisition_date.map(|d| d.to_string()),
            opt(cols[4]),
            "{raw:?}"
        );
        assert_eq!(
            r.acquisition_time.map(|t| t.to_string()),
            opt(cols[5]),
            "{raw:?}"
        );
        assert_eq!(r.level.as_str(), cols[6], "{raw:?}");
        assert_eq!(r.raw, raw, "raw text is kept verbatim");
        checked += 1;
    }
    assert_eq!(checked, 21);
}
