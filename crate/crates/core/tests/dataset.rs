use std::fs;
use std::path::Path;

use anteversion::dataset::{
    self, denormalize_age, ingest, normalize_age, AgeBounds, AngleScale, DatasetError, IngestLimits, METADATA_HEADER,
};
use anteversion::plane::{save_png16, ImagePlane};
use proptest::prelude::*;

fn write_image(root: &Path, name: &str) {
    save_png16(&ImagePlane::filled(8, 8, 0.5).unwrap(), &root.join(name)).unwrap();
}

fn write_csv(path: &Path, header: &[&str], rows: &[[&str; 6]]) {
    let mut w = csv::Writer::from_path(path).unwrap();
    w.write_record(header).unwrap();
    for r in rows {
        w.write_record(r).unwrap();
    }
    w.flush().unwrap();
}

#[test]
fn valid_table_ingests_in_order() {
    let dir = tempfile::tempdir().unwrap();
    write_image(dir.path(), "a.png");
    write_image(dir.path(), "b.png");
    let meta = dir.path().join("meta.csv");
    write_csv(
        &meta,
        &METADATA_HEADER,
        &[["A", "40", "M", "15.5", "14", "a.png"], ["B", "61.5", "F", "20", "21.25", "b.png"]],
    );
    let recs = ingest(&meta, dir.path(), &IngestLimits::default()).unwrap();
    assert_eq!(recs.len(), 2);
    assert_eq!(recs[1].patient_id, "B");
    assert_eq!(recs[1].left_angle_deg, 21.25);
    assert_eq!(recs[0].image_path, dir.path().join("a.png"));
    assert_eq!(ingest(&meta, dir.path(), &IngestLimits::default()).unwrap(), recs);
}

#[test]
fn column_order_is_free() {
    let dir = tempfile::tempdir().unwrap();
    write_image(dir.path(), "a.png");
    let meta = dir.path().join("meta.csv");
    let header = ["image_file", "gender", "patient_id", "left_angle_deg", "right_angle_deg", "age_years"];
    write_csv(&meta, &header, &[["a.png", "F", "A", "9", "11", "30"]]);
    let recs = ingest(&meta, dir.path(), &IngestLimits::default()).unwrap();
    assert_eq!((recs[0].right_angle_deg, recs[0].left_angle_deg, recs[0].age_years), (11.0, 9.0, 30.0));
}

#[test]
fn every_bad_row_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    write_image(dir.path(), "a.png");
    fs::write(dir.path().join("broken.png"), b"not a png").unwrap();
    let meta = dir.path().join("meta.csv");
    write_csv(
        &meta,
        &METADATA_HEADER,
        &[
            ["A", "40", "M", "15", "14", "a.png"],
            ["B", "40", "X", "15", "14", "a.png"],
            ["C", "140", "M", "15", "14", "a.png"],
            ["D", "40", "M", "75", "14", "a.png"],
            ["E", "40", "F", "15", "14", "missing.png"],
            ["F", "forty", "F", "15", "14", "a.png"],
            ["G", "40", "F", "15", "14", "broken.png"],
        ],
    );
    match ingest(&meta, dir.path(), &IngestLimits::default()) {
        Err(DatasetError::InvalidRecords(issues)) => {
            let ids: Vec<&str> = issues.iter().map(|i| i.patient_id.as_str()).collect();
            assert_eq!(ids, ["B", "C", "D", "E", "F", "G"]);
            assert_eq!(issues[0].row, 2);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn duplicate_id_and_missing_column() {
    let dir = tempfile::tempdir().unwrap();
    write_image(dir.path(), "a.png");
    let meta = dir.path().join("meta.csv");
    write_csv(&meta, &METADATA_HEADER, &[["A", "40", "M", "1", "1", "a.png"], ["A", "41", "M", "1", "1", "a.png"]]);
    assert!(matches!(ingest(&meta, dir.path(), &IngestLimits::default()), Err(DatasetError::DuplicatePatientId(id)) if id == "A"));

    let mut w = csv::Writer::from_path(&meta).unwrap();
    w.write_record(["patient_id", "age_years", "gender", "right_angle_deg", "image_file"]).unwrap();
    w.flush().unwrap();
    drop(w);
    assert!(matches!(ingest(&meta, dir.path(), &IngestLimits::default()), Err(DatasetError::MissingColumn(c)) if c == "left_angle_deg"));
}

#[test]
fn written_metadata_reingests() {
    let dir = tempfile::tempdir().unwrap();
    write_image(dir.path(), "a.png");
    let meta = dir.path().join("meta.csv");
    write_csv(&meta, &METADATA_HEADER, &[["A", "40.25", "F", "-3.5", "14", "a.png"]]);
    let recs = ingest(&meta, dir.path(), &IngestLimits::default()).unwrap();
    let again = dir.path().join("again.csv");
    dataset::write_metadata(&again, &recs, dir.path()).unwrap();
    assert_eq!(ingest(&again, dir.path(), &IngestLimits::default()).unwrap(), recs);
}

proptest! {
    #[test]
    fn age_round_trips_within_bounds(lo in -50.0..50.0f64, width in 1.0..200.0f64, t in 0.0..=1.0f64) {
        let bounds = AgeBounds::new(lo, lo + width).unwrap();
        let age = lo + t * width;
        let back = denormalize_age(normalize_age(age, bounds), bounds);
        prop_assert!((back - age).abs() <= 1e-9 * age.abs().max(1.0));
    }

    #[test]
    fn angles_round_trip(r in -10.0..50.0f64, l in -10.0..50.0f64, max in 0.5..90.0f64) {
        let s = AngleScale::new(max).unwrap();
        let (nr, nl) = s.normalize(r, l);
        let (br, bl) = s.denormalize(nr, nl);
        prop_assert!((br - r).abs() <= 1e-9 * r.abs().max(1.0));
        prop_assert!((bl - l).abs() <= 1e-9 * l.abs().max(1.0));
    }

    #[test]
    fn normalized_age_stays_in_unit_interval(age in -1e3..1e3f64) {
        let v = normalize_age(age, AgeBounds::default());
        prop_assert!((0.0..=1.0).contains(&v));
    }
}

#[test]
fn tiff_and_eight_bit_images_load() {
    use anteversion::plane::load_grayscale;
    use image::{ImageBuffer, Luma};

    let dir = tempfile::tempdir().unwrap();
    let deep: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(6, 4, |x, y| Luma([(x * 1000 + y) as u16]));
    deep.save(dir.path().join("deep.tiff")).unwrap();
    let shallow: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_fn(6, 4, |x, _| Luma([x as u8 * 40]));
    shallow.save(dir.path().join("shallow.png")).unwrap();

    let p = load_grayscale(&dir.path().join("deep.tiff")).unwrap();
    assert_eq!((p.height(), p.width()), (4, 6));
    assert_eq!(p.values()[6 + 5], 5001.0);
    let p = load_grayscale(&dir.path().join("shallow.png")).unwrap();
    assert_eq!(p.values()[3], 120.0);

    let meta = dir.path().join("meta.csv");
    write_csv(&meta, &METADATA_HEADER, &[["A", "40", "M", "1", "1", "deep.tiff"], ["B", "40", "F", "1", "1", "shallow.png"]]);
    assert_eq!(ingest(&meta, dir.path(), &IngestLimits::default()).unwrap().len(), 2);
}
