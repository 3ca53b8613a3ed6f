//! Loading, validating and slicing the region × day count panel.
//!
//! The canonical on-disk layout is a CSV whose first column holds ISO-8601
//! dates and whose remaining columns hold one region each. Exports that put
//! regions on rows and dates on columns are read with [`Layout::RegionsAsRows`].

use std::collections::HashSet;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use chrono::{Days, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Aligned daily values for `N` regions over `D` consecutive days.
///
/// Row `i` of [`values`](Self::values) always belongs to `regions[i]`; every
/// downstream matrix inherits this order.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesPanel {
    regions: Vec<String>,
    dates: Vec<NaiveDate>,
    values: Vec<Vec<f64>>,
}

impl TimeSeriesPanel {
    pub fn new(regions: Vec<String>, dates: Vec<NaiveDate>, values: Vec<Vec<f64>>) -> Result<Self> {
        if regions.len() < 2 {
            return Err(Error::Panel(format!(
                "at least 2 regions required, got {}",
                regions.len()
            )));
        }
        if dates.is_empty() {
            return Err(Error::Panel("panel has no dates".into()));
        }
        let mut seen = HashSet::with_capacity(regions.len());
        for r in &regions {
            if !seen.insert(r.as_str()) {
                return Err(Error::DuplicateRegion(r.clone()));
            }
        }
        check_consecutive(&dates)?;
        if values.len() != regions.len() {
            return Err(Error::Shape(format!(
                "{} value rows for {} regions",
                values.len(),
                regions.len()
            )));
        }
        for (region, row) in regions.iter().zip(&values) {
            if row.len() != dates.len() {
                return Err(Error::Shape(format!(
                    "region `{region}` has {} values for {} dates",
                    row.len(),
                    dates.len()
                )));
            }
            if let Some(pos) = row.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite value for region `{region}` on {}",
                    dates[pos]
                )));
            }
        }
        Ok(Self {
            regions,
            dates,
            values,
        })
    }

    pub fn regions(&self) -> &[String] {
        &self.regions
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    /// One row per region, each of length [`n_days`](Self::n_days).
    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn series(&self, region: usize) -> &[f64] {
        &self.values[region]
    }

    pub fn n_regions(&self) -> usize {
        self.regions.len()
    }

    pub fn n_days(&self) -> usize {
        self.dates.len()
    }

    pub fn first_date(&self) -> NaiveDate {
        self.dates[0]
    }

    pub fn last_date(&self) -> NaiveDate {
        self.dates[self.dates.len() - 1]
    }

    /// Same regions and dates, new values. Used by per-series transforms.
    pub fn with_values(&self, values: Vec<Vec<f64>>) -> Result<Self> {
        Self::new(self.regions.clone(), self.dates.clone(), values)
    }
}

fn check_consecutive(dates: &[NaiveDate]) -> Result<()> {
    for w in dates.windows(2) {
        let expected = w[0] + Days::new(1);
        if w[1] != expected {
            return Err(Error::Gap {
                before: w[0],
                after: w[1],
                expected,
            });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    /// First column is the date, one column per region.
    #[default]
    DatesAsRows,
    /// One row per region, one column per date.
    RegionsAsRows,
}

impl FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "dates_as_rows" => Ok(Layout::DatesAsRows),
            "regions_as_rows" => Ok(Layout::RegionsAsRows),
            other => Err(Error::Config(format!("unknown layout `{other}`"))),
        }
    }
}

impl std::fmt::Display for Layout {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Layout::DatesAsRows => "dates_as_rows",
            Layout::RegionsAsRows => "regions_as_rows",
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadOptions {
    pub layout: Layout,
    /// Metadata columns (e.g. a population column) ignored by name.
    pub skip_columns: Vec<String>,
    /// Regions dropped after parsing, e.g. a national aggregate row.
    pub drop_regions: Vec<String>,
    /// Replace negative counts (reporting corrections) with zero instead of failing.
    pub clip_negative_to_zero: bool,
}

impl LoadOptions {
    pub fn with_layout(layout: Layout) -> Self {
        Self {
            layout,
            ..Self::default()
        }
    }
}

pub fn load_panel(path: impl AsRef<Path>, options: &LoadOptions) -> Result<TimeSeriesPanel> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    load_panel_from_reader(file, options)
}

pub fn load_panel_from_reader<R: Read>(
    reader: R,
    options: &LoadOptions,
) -> Result<TimeSeriesPanel> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    let records = rdr.records().collect::<std::result::Result<Vec<_>, _>>()?;

    let (regions, dates, values) = match options.layout {
        Layout::DatesAsRows => parse_dates_as_rows(&headers, &records, options)?,
        Layout::RegionsAsRows => parse_regions_as_rows(&headers, &records, options)?,
    };
    if dates.len() < 2 {
        return Err(Error::Panel(format!(
            "at least 2 days required, got {}",
            dates.len()
        )));
    }

    let mut kept_regions = Vec::with_capacity(regions.len());
    let mut kept_values = Vec::with_capacity(regions.len());
    for (region, mut row) in regions.into_iter().zip(values) {
        if options.drop_regions.iter().any(|d| d == &region) {
            continue;
        }
        for (t, v) in row.iter_mut().enumerate() {
            if *v < 0.0 {
                if options.clip_negative_to_zero {
                    *v = 0.0;
                } else {
                    return Err(Error::NegativeCount {
                        region,
                        date: dates[t],
                        value: *v,
                    });
                }
            }
        }
        kept_regions.push(region);
        kept_values.push(row);
    }
    TimeSeriesPanel::new(kept_regions, dates, kept_values)
}

type Parsed = (Vec<String>, Vec<NaiveDate>, Vec<Vec<f64>>);

fn parse_dates_as_rows(
    headers: &[String],
    records: &[csv::StringRecord],
    options: &LoadOptions,
) -> Result<Parsed> {
    if headers.len() < 2 {
        return Err(Error::Panel(
            "header needs a date column and region columns".into(),
        ));
    }
    let region_cols: Vec<usize> = (1..headers.len())
        .filter(|&c| !options.skip_columns.contains(&headers[c]))
        .collect();
    let regions: Vec<String> = region_cols.iter().map(|&c| headers[c].clone()).collect();
    check_unique(&regions)?;

    let mut dates = Vec::with_capacity(records.len());
    let mut values = vec![Vec::with_capacity(records.len()); regions.len()];
    for (i, rec) in records.iter().enumerate() {
        let row = i + 2;
        let raw_date = rec.get(0).unwrap_or("");
        let date = parse_date(raw_date).ok_or_else(|| Error::Parse {
            row,
            column: headers[0].clone(),
            message: format!("`{raw_date}` is not a date"),
        })?;
        if let Some(&prev) = dates.last() {
            check_consecutive(&[prev, date])?;
        }
        dates.push(date);
        for (slot, &c) in values.iter_mut().zip(&region_cols) {
            slot.push(parse_cell(rec.get(c), row, &headers[c])?);
        }
    }
    Ok((regions, dates, values))
}

fn parse_regions_as_rows(
    headers: &[String],
    records: &[csv::StringRecord],
    options: &LoadOptions,
) -> Result<Parsed> {
    let mut kept = (0..headers.len()).filter(|&c| !options.skip_columns.contains(&headers[c]));
    let name_col = kept
        .next()
        .ok_or_else(|| Error::Panel("no region-name column".into()))?;
    let date_cols: Vec<usize> = kept.collect();

    let mut dates = Vec::with_capacity(date_cols.len());
    for &c in &date_cols {
        let date = parse_date(&headers[c]).ok_or_else(|| Error::Parse {
            row: 1,
            column: headers[c].clone(),
            message: format!("header `{}` is not a date", headers[c]),
        })?;
        if let Some(&prev) = dates.last() {
            check_consecutive(&[prev, date])?;
        }
        dates.push(date);
    }

    let mut regions = Vec::with_capacity(records.len());
    let mut values = Vec::with_capacity(records.len());
    for (i, rec) in records.iter().enumerate() {
        let row = i + 2;
        let name = rec.get(name_col).unwrap_or("").to_owned();
        if name.is_empty() {
            return Err(Error::Parse {
                row,
                column: headers[name_col].clone(),
                message: "empty region name".into(),
            });
        }
        let series = date_cols
            .iter()
            .map(|&c| parse_cell(rec.get(c), row, &headers[c]))
            .collect::<Result<Vec<_>>>()?;
        regions.push(name);
        values.push(series);
    }
    check_unique(&regions)?;
    Ok((regions, dates, values))
}

fn check_unique(regions: &[String]) -> Result<()> {
    let mut seen = HashSet::with_capacity(regions.len());
    for r in regions {
        if !seen.insert(r.as_str()) {
            return Err(Error::DuplicateRegion(r.clone()));
        }
    }
    Ok(())
}

fn parse_cell(cell: Option<&str>, row: usize, column: &str) -> Result<f64> {
    let raw = cell.unwrap_or("");
    if raw.is_empty() {
        return Err(Error::Parse {
            row,
            column: column.to_owned(),
            message: "missing value".into(),
        });
    }
    let v: f64 = raw.parse().map_err(|_| Error::Parse {
        row,
        column: column.to_owned(),
        message: format!("`{raw}` is not a number"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            row,
            column: column.to_owned(),
            message: format!("`{raw}` is not finite"),
        });
    }
    Ok(v)
}

/// ISO-8601 first; `DD-MM-YYYY` is accepted for portal exports.
pub fn parse_date(s: &str) -> Option<NaiveDate> {
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .or_else(|_| NaiveDate::parse_from_str(s, "%d-%m-%Y"))
        .ok()
}

/// Writes the canonical `date,<region>...` layout with LF line endings.
pub fn save_panel(panel: &TimeSeriesPanel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_panel(panel, file)
}

pub fn write_panel<W: Write>(panel: &TimeSeriesPanel, writer: W) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(writer);
    let mut header = Vec::with_capacity(panel.n_regions() + 1);
    header.push("date".to_owned());
    header.extend(panel.regions().iter().cloned());
    wtr.write_record(&header)?;
    for (t, date) in panel.dates().iter().enumerate() {
        let mut row = Vec::with_capacity(header.len());
        row.push(date.format("%Y-%m-%d").to_string());
        row.extend(panel.values().iter().map(|s| s[t].to_string()));
        wtr.write_record(&row)?;
    }
    wtr.flush().map_err(|e| Error::io("<panel writer>", e))?;
    Ok(())
}

/// Inclusive date slice; region order is kept.
pub fn slice_panel(
    panel: &TimeSeriesPanel,
    start: NaiveDate,
    end: NaiveDate,
) -> Result<TimeSeriesPanel> {
    if start > end {
        return Err(Error::Range(format!("start {start} is after end {end}")));
    }
    if start < panel.first_date() || end > panel.last_date() {
        return Err(Error::Range(format!(
            "{start}..{end} is outside {}..{}",
            panel.first_date(),
            panel.last_date()
        )));
    }
    let lo = (start - panel.first_date()).num_days() as usize;
    let hi = (end - panel.first_date()).num_days() as usize + 1;
    let values = panel.values().iter().map(|s| s[lo..hi].to_vec()).collect();
    TimeSeriesPanel::new(
        panel.regions().to_vec(),
        panel.dates()[lo..hi].to_vec(),
        values,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
    }

    fn load_str(s: &str, options: &LoadOptions) -> Result<TimeSeriesPanel> {
        load_panel_from_reader(s.as_bytes(), options)
    }

    #[test]
    fn loads_tiny_panel_exactly() {
        let p = load_str(
            "date,A,B\n2020-01-01,0,2\n2020-01-02,1,3\n",
            &LoadOptions::default(),
        )
        .unwrap();
        assert_eq!(p.regions(), ["A", "B"]);
        assert_eq!(p.values(), &[vec![0.0, 1.0], vec![2.0, 3.0]]);
        assert_eq!(p.n_days(), 2);
    }

    #[test]
    fn crlf_accepted() {
        let p = load_str(
            "date,A,B\r\n2020-01-01,0,2\r\n2020-01-02,1,3\r\n",
            &LoadOptions::default(),
        )
        .unwrap();
        assert_eq!(p.series(1), &[2.0, 3.0]);
    }

    #[test]
    fn gap_is_rejected_with_first_gap() {
        let err = load_str(
            "date,A,B\n2020-02-29,1,1\n2020-03-02,1,1\n2020-03-04,1,1\n",
            &LoadOptions::default(),
        )
        .unwrap_err();
        match err {
            Error::Gap {
                before,
                after,
                expected,
            } => {
                assert_eq!(before, d("2020-02-29"));
                assert_eq!(after, d("2020-03-02"));
                assert_eq!(expected, d("2020-03-01"));
            }
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn non_numeric_cell_reports_position() {
        let err = load_str(
            "date,A,B\n2020-01-01,0,2\n2020-01-02,x,3\n",
            &LoadOptions::default(),
        )
        .unwrap_err();
        match err {
            Error::Parse { row, column, .. } => {
                assert_eq!(row, 3);
                assert_eq!(column, "A");
            }
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn missing_cell_rejected() {
        let err = load_str(
            "date,A,B\n2020-01-01,0,\n2020-01-02,1,3\n",
            &LoadOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Parse { row: 2, .. }), "{err:?}");
    }

    #[test]
    fn duplicate_region_rejected() {
        let err = load_str(
            "date,A,A\n2020-01-01,0,2\n2020-01-02,1,3\n",
            &LoadOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::DuplicateRegion(ref r) if r == "A"));
    }

    #[test]
    fn negatives_rejected_unless_clipped() {
        let csv = "date,A,B\n2020-01-01,0,2\n2020-01-02,-4,3\n";
        assert!(matches!(
            load_str(csv, &LoadOptions::default()),
            Err(Error::NegativeCount { .. })
        ));
        let opts = LoadOptions {
            clip_negative_to_zero: true,
            ..LoadOptions::default()
        };
        assert_eq!(load_str(csv, &opts).unwrap().series(0), &[0.0, 0.0]);
    }

    #[test]
    fn skipped_metadata_columns() {
        let opts = LoadOptions {
            skip_columns: vec!["note".into()],
            ..LoadOptions::default()
        };
        let p = load_str("date,A,note,B\n2020-01-01,0,x,2\n2020-01-02,1,y,3\n", &opts).unwrap();
        assert_eq!(p.regions(), ["A", "B"]);
    }

    #[test]
    fn regions_as_rows_with_metadata() {
        let opts = LoadOptions {
            layout: Layout::RegionsAsRows,
            skip_columns: vec!["cve_ent".into(), "poblacion".into()],
            drop_regions: vec!["Nacional".into()],
            clip_negative_to_zero: false,
        };
        let csv = "cve_ent,poblacion,nombre,26-02-2020,27-02-2020,28-02-2020\n\
                   01,100,AGUASCALIENTES,0,1,2\n\
                   02,200,BAJA CALIFORNIA,3,4,5\n\
                   00,300,Nacional,3,5,7\n";
        let p = load_str(csv, &opts).unwrap();
        assert_eq!(p.regions(), ["AGUASCALIENTES", "BAJA CALIFORNIA"]);
        assert_eq!(p.first_date(), d("2020-02-26"));
        assert_eq!(p.values(), &[vec![0.0, 1.0, 2.0], vec![3.0, 4.0, 5.0]]);
    }

    #[test]
    fn single_day_csv_rejected() {
        assert!(load_str("date,A,B\n2020-01-01,0,2\n", &LoadOptions::default()).is_err());
    }

    fn ramp_panel(days: u64) -> TimeSeriesPanel {
        let start = d("2020-02-27");
        let dates: Vec<_> = (0..days).map(|i| start + Days::new(i)).collect();
        let values = (0..3)
            .map(|r| (0..days).map(|t| (t * (r + 1)) as f64 + 0.25).collect())
            .collect();
        TimeSeriesPanel::new(vec!["a".into(), "b".into(), "c".into()], dates, values).unwrap()
    }

    #[test]
    fn slice_identity_single_day_and_prefix() {
        let p = ramp_panel(1021);
        assert_eq!(p.last_date(), d("2022-12-13"));
        assert_eq!(slice_panel(&p, p.first_date(), p.last_date()).unwrap(), p);

        let one = slice_panel(&p, d("2020-03-05"), d("2020-03-05")).unwrap();
        assert_eq!(one.n_days(), 1);
        assert_eq!(one.series(2), &[p.series(2)[7]]);

        let first33 = slice_panel(&p, p.first_date(), p.first_date() + Days::new(32)).unwrap();
        // Inclusive day count by walking the calendar.
        let mut n = 0;
        let mut day = p.first_date();
        while day <= p.first_date() + Days::new(32) {
            n += 1;
            day = day.succ_opt().unwrap();
        }
        assert_eq!(first33.n_days(), n);
        assert_eq!(first33.n_days(), 33);
        assert_eq!(first33.regions(), p.regions());
    }

    #[test]
    fn slice_out_of_range() {
        let p = ramp_panel(10);
        assert!(matches!(
            slice_panel(&p, d("2020-02-26"), d("2020-03-01")),
            Err(Error::Range(_))
        ));
        assert!(matches!(
            slice_panel(&p, d("2020-03-01"), d("2020-02-28")),
            Err(Error::Range(_))
        ));
    }

    #[test]
    fn loads_32_by_1021_panel() {
        let p = ramp_panel(1021);
        let mut buf = Vec::new();
        write_panel(&p, &mut buf).unwrap();
        let wide = {
            let start = p.first_date();
            let mut s = String::from("date");
            for r in 0..32 {
                s.push_str(&format!(",R{r}"));
            }
            s.push('\n');
            for t in 0..1021u64 {
                s.push_str(&(start + Days::new(t)).format("%Y-%m-%d").to_string());
                for r in 0..32u64 {
                    s.push_str(&format!(",{}", (t + r) % 97));
                }
                s.push('\n');
            }
            s
        };
        let q = load_str(&wide, &LoadOptions::default()).unwrap();
        assert_eq!((q.n_regions(), q.n_days()), (32, 1021));
        assert_eq!(q.first_date(), d("2020-02-27"));
    }
}
