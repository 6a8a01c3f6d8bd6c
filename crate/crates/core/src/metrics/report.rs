use std::fs;
use std::path::Path;

use super::{angle_histogram, emit_plots, fold_table, group_report, FoldTable, GroupReport, Hip, HistogramBin, MetricsError, SampleError, COLUMNS};
use crate::cv::{PredictionRow, FOLDS};
use crate::dataset::{AgeBins, GenderGroup};

#[derive(Debug, Clone, PartialEq)]
pub struct ReportOptions {
    pub age_bins: AgeBins,
    pub histogram_bin_deg: f64,
    /// Render PNG plots next to the CSV series.
    pub plots: bool,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self {
            age_bins: AgeBins::default(),
            histogram_bin_deg: 2.0,
            plots: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationReport {
    pub samples: Vec<SampleError>,
    /// Present when predictions for all five folds were supplied.
    pub fold_table: Option<FoldTable>,
    /// All, male, female.
    pub gender: Vec<GroupReport>,
    /// Each gender group crossed with each age group.
    pub age: Vec<GroupReport>,
    pub histogram: Vec<HistogramBin>,
    pub age_bins: AgeBins,
}

const GROUPS: [GenderGroup; 3] = [GenderGroup::All, GenderGroup::Male, GenderGroup::Female];

/// Builds the report from per-fold prediction rows (one entry per fold).
pub fn build_report(folds: &[Vec<PredictionRow>], options: &ReportOptions) -> Result<EvaluationReport, MetricsError> {
    let samples: Vec<SampleError> = folds.iter().flatten().cloned().map(SampleError::new).collect();
    let table = if folds.len() == FOLDS { Some(fold_table(folds)?) } else { None };
    let gender = GROUPS.iter().map(|&g| group_report(&samples, g, None)).collect();
    let age = GROUPS
        .iter()
        .flat_map(|&g| (0..options.age_bins.len()).map(move |i| (g, i)))
        .map(|(g, i)| group_report(&samples, g, Some((&options.age_bins, i))))
        .collect();
    Ok(EvaluationReport {
        histogram: angle_histogram(&samples, options.histogram_bin_deg)?,
        samples,
        fold_table: table,
        gender,
        age,
        age_bins: options.age_bins.clone(),
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

struct Sheet {
    w: csv::Writer<Vec<u8>>,
}

impl Sheet {
    fn new<I: IntoIterator<Item = S>, S: AsRef<[u8]>>(header: I) -> Self {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header).expect("in-memory write");
        Self { w }
    }

    fn row<I: IntoIterator<Item = S>, S: AsRef<[u8]>>(&mut self, fields: I) {
        self.w.write_record(fields).expect("in-memory write");
    }

    fn save(self, path: &Path) -> Result<(), MetricsError> {
        let bytes = self.w.into_inner().map_err(|e| MetricsError::Io(e.into_error()))?;
        fs::write(path, bytes)?;
        Ok(())
    }
}

fn group_header() -> Vec<String> {
    let mut h: Vec<String> = ["group", "gender", "age_group", "n"].map(String::from).to_vec();
    for hip in Hip::BOTH {
        for f in ["mean_error", "sd_error", "band", "frac_accurate", "frac_moderate", "frac_poor"] {
            h.push(format!("{}_{f}", hip.name()));
        }
    }
    h
}

fn group_fields(g: &GroupReport, bins: &AgeBins) -> Vec<String> {
    let mut f = vec![
        g.label.clone(),
        g.gender.name().to_string(),
        g.age_group.map(|i| bins.label(i)).unwrap_or_else(|| "all".into()),
        g.n.to_string(),
    ];
    for hip in Hip::BOTH {
        match g.hip(hip) {
            Some(h) => {
                f.extend([h.error.mean.to_string(), h.error.sd.to_string(), h.band.name().to_string()]);
                f.extend(h.band_fractions.iter().map(|x| x.to_string()));
            }
            None => f.extend(std::iter::repeat_n(String::new(), 6)),
        }
    }
    f
}

/// Writes the CSV series (and, if asked, the PNG plots) under `out_dir`:
/// `fold_table.csv`, `gender_table.csv`, `age_table.csv`,
/// `scatter_{group}_{hip}.csv`, `histogram.csv`, `samples.csv`, `plots/*.png`.
pub fn emit_report(report: &EvaluationReport, out_dir: &Path, options: &ReportOptions) -> Result<(), MetricsError> {
    fs::create_dir_all(out_dir)?;
    let bins = &report.age_bins;

    let mut header = vec!["fold".to_string(), "n_male".into(), "n_female".into()];
    for c in COLUMNS {
        header.push(format!("{}_mean", c.label()));
        header.push(format!("{}_sd", c.label()));
    }
    let mut sheet = Sheet::new(&header);
    if let Some(t) = &report.fold_table {
        for r in &t.folds {
            let mut f = vec![r.fold.to_string(), r.n_male.to_string(), r.n_female.to_string()];
            for c in &r.cells {
                f.push(opt(c.map(|s| s.mean)));
                f.push(opt(c.map(|s| s.sd)));
            }
            sheet.row(f);
        }
        let n_male: usize = t.folds.iter().map(|r| r.n_male).sum();
        let n_female: usize = t.folds.iter().map(|r| r.n_female).sum();
        // average row: mean of fold means, SD of pooled per-sample errors
        let mut f = vec!["average".to_string(), n_male.to_string(), n_female.to_string()];
        for k in 0..COLUMNS.len() {
            f.push(opt(t.average[k]));
            f.push(opt(t.average_sd[k]));
        }
        sheet.row(f);
    }
    sheet.save(&out_dir.join("fold_table.csv"))?;

    for (name, groups) in [("gender_table.csv", &report.gender), ("age_table.csv", &report.age)] {
        let mut sheet = Sheet::new(group_header());
        for g in groups {
            sheet.row(group_fields(g, bins));
        }
        sheet.save(&out_dir.join(name))?;
    }

    for g in &report.gender {
        for hip in Hip::BOTH {
            let mut sheet = Sheet::new(["patient_id", "truth", "prediction"]);
            let members = report.samples.iter().filter(|s| g.gender.contains(s.row.gender));
            for s in members {
                sheet.row([s.row.patient_id.clone(), s.truth(hip).to_string(), s.prediction(hip).to_string()]);
            }
            sheet.save(&out_dir.join(format!("scatter_{}_{}.csv", g.gender.name(), hip.name())))?;
        }
    }

    let mut sheet = Sheet::new(["lo", "hi", "count", "mean_error", "band"]);
    for b in &report.histogram {
        sheet.row([
            b.lo.to_string(),
            b.hi.to_string(),
            b.count.to_string(),
            opt(b.mean_error),
            b.band.map(|b| b.name().to_string()).unwrap_or_default(),
        ]);
    }
    sheet.save(&out_dir.join("histogram.csv"))?;

    let mut sheet = Sheet::new([
        "patient_id", "gender", "age_years", "age_group", "fold", "true_right", "true_left", "pred_right", "pred_left",
        "err_right", "err_left", "band_right", "band_left",
    ]);
    for s in &report.samples {
        let r = &s.row;
        sheet.row([
            r.patient_id.clone(),
            r.gender.code().to_string(),
            r.age_years.to_string(),
            bins.label(bins.index(r.age_years)),
            r.fold.to_string(),
            r.true_right.to_string(),
            r.true_left.to_string(),
            r.pred_right.to_string(),
            r.pred_left.to_string(),
            s.err_right.to_string(),
            s.err_left.to_string(),
            s.band(Hip::Right).name().to_string(),
            s.band(Hip::Left).name().to_string(),
        ]);
    }
    sheet.save(&out_dir.join("samples.csv"))?;

    if options.plots {
        emit_plots(report, &out_dir.join("plots"))?;
    }
    Ok(())
}
