//! Weather time series: CSV ingestion, standardization, city splits, and a
//! surrogate generator.
//!
//! Real measurements are not bundled; [`generate_surrogate_weather`]
//! fabricates correlated series with the same shape (266 cities, 258 days,
//! six attributes) so the full pipeline runs in CI. Surrogate data is
//! clearly synthetic and never a substitute for real measurements in any
//! reported result.

use super::{derive_seed, DataError, MultiTaskBatch};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::path::Path;

/// Days per city series.
pub const WEATHER_DAYS: usize = 258;
/// Cities in a full table.
pub const WEATHER_CITIES: usize = 266;
/// Attribute columns, in task-channel order.
pub const WEATHER_ATTRS: [&str; 6] = [
    "attr_tempmin",
    "attr_tempmax",
    "attr_humidity",
    "attr_precip",
    "attr_cloud",
    "attr_dew",
];

const SPLIT_SIZES: [usize; 3] = [200, 30, 33];

/// One city's series: `values[day][attribute]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeatherSeries {
    pub city_id: u32,
    pub values: Vec<[f64; 6]>,
}

impl WeatherSeries {
    /// Normalized time for a day index: 0 at day 0, 1 at the last day.
    pub fn time(day: usize) -> f64 {
        day as f64 / (WEATHER_DAYS - 1) as f64
    }
}

/// Per-attribute standardization statistics fitted on the training cities.
#[derive(Debug, Clone, PartialEq)]
pub struct AttrStats {
    pub mean: [f64; 6],
    pub std: [f64; 6],
}

impl AttrStats {
    pub fn standardize(&self, attr: usize, raw: f64) -> f64 {
        (raw - self.mean[attr]) / self.std[attr]
    }

    pub fn invert(&self, attr: usize, standardized: f64) -> f64 {
        standardized * self.std[attr] + self.mean[attr]
    }
}

/// Standardized city splits plus the statistics that produced them.
#[derive(Debug, Clone)]
pub struct WeatherSplits {
    pub train: Vec<WeatherSeries>,
    pub valid: Vec<WeatherSeries>,
    pub test: Vec<WeatherSeries>,
    pub stats: AttrStats,
}

/// Reads a weather CSV. Requires the `city_id`, `day`, and six attribute
/// columns (extras are ignored), one row per (city, day), and a complete run
/// of days per city.
pub fn load_weather_table(path: &Path) -> Result<Vec<WeatherSeries>, DataError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| DataError::Format {
        row: 0,
        message: e.to_string(),
    })?;
    let headers = reader
        .headers()
        .map_err(|e| DataError::Format {
            row: 0,
            message: e.to_string(),
        })?
        .clone();
    let col = |name: &str| -> Result<usize, DataError> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::Format {
                row: 0,
                message: format!("missing column {name}"),
            })
    };
    let city_col = col("city_id")?;
    let day_col = col("day")?;
    let mut attr_cols = [0usize; 6];
    for (i, name) in WEATHER_ATTRS.iter().enumerate() {
        attr_cols[i] = col(name)?;
    }

    let mut cities: BTreeMap<u32, Vec<Option<[f64; 6]>>> = BTreeMap::new();
    for (idx, record) in reader.records().enumerate() {
        let row = idx + 2;
        let record = record.map_err(|e| DataError::Format {
            row,
            message: e.to_string(),
        })?;
        let field = |c: usize| -> Result<&str, DataError> {
            record.get(c).ok_or(DataError::Format {
                row,
                message: "short record".to_string(),
            })
        };
        let parse_num = |c: usize| -> Result<f64, DataError> {
            field(c)?.parse().map_err(|_| DataError::Format {
                row,
                message: format!("unparsable number in column {c}"),
            })
        };
        let city_id: u32 = field(city_col)?.parse().map_err(|_| DataError::Format {
            row,
            message: "unparsable city_id".to_string(),
        })?;
        let day: usize = field(day_col)?.parse().map_err(|_| DataError::Format {
            row,
            message: "unparsable day".to_string(),
        })?;
        if day >= WEATHER_DAYS {
            return Err(DataError::Format {
                row,
                message: format!("day {day} out of range 0..{WEATHER_DAYS}"),
            });
        }
        let mut attrs = [0.0; 6];
        for (i, &c) in attr_cols.iter().enumerate() {
            attrs[i] = parse_num(c)?;
        }
        let slot = &mut cities.entry(city_id).or_insert_with(|| vec![None; WEATHER_DAYS])[day];
        if slot.is_some() {
            return Err(DataError::Format {
                row,
                message: format!("duplicate (city {city_id}, day {day})"),
            });
        }
        *slot = Some(attrs);
    }

    let mut out = Vec::with_capacity(cities.len());
    for (city_id, days) in cities {
        let mut values = Vec::with_capacity(WEATHER_DAYS);
        for (day, v) in days.into_iter().enumerate() {
            values.push(v.ok_or(DataError::Format {
                row: 0,
                message: format!("city {city_id} is missing day {day}"),
            })?);
        }
        out.push(WeatherSeries { city_id, values });
    }
    Ok(out)
}

/// Writes series in the schema `load_weather_table` reads.
pub fn write_weather_csv(path: &Path, series: &[WeatherSeries]) -> Result<(), DataError> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| DataError::Format {
        row: 0,
        message: e.to_string(),
    })?;
    let mut header = vec!["city_id".to_string(), "day".to_string()];
    header.extend(WEATHER_ATTRS.iter().map(|s| s.to_string()));
    let io_err = |e: csv::Error| DataError::Format {
        row: 0,
        message: e.to_string(),
    };
    writer.write_record(&header).map_err(io_err)?;
    for s in series {
        for (day, attrs) in s.values.iter().enumerate() {
            let mut rec = vec![s.city_id.to_string(), day.to_string()];
            rec.extend(attrs.iter().map(|v| format!("{v:.6}")));
            writer.write_record(&rec).map_err(io_err)?;
        }
    }
    writer.flush().map_err(|e| DataError::Format {
        row: 0,
        message: e.to_string(),
    })
}

const ATTR_BASE: [f64; 6] = [5.0, 15.0, 70.0, 3.0, 50.0, 8.0];
const ATTR_LOAD: [f64; 6] = [8.0, 9.0, -10.0, -2.0, -12.0, 7.0];
const ATTR_IDIO: [f64; 6] = [1.2, 1.2, 5.0, 1.5, 6.0, 1.5];

/// Fabricates a full surrogate table: each city mixes a seasonal curve and
/// an AR(1) latent into all six attributes, so attributes are correlated
/// within a city the way the real table's are.
pub fn generate_surrogate_weather(seed: u64) -> Vec<WeatherSeries> {
    (0..WEATHER_CITIES as u32)
        .into_par_iter()
        .map(|city| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "city", u64::from(city)));
            let phase = rng.gen_range(0.0..TAU);
            let amp = rng.gen_range(0.5..1.5);
            let normal = Normal::new(0.0, 1.0).unwrap();
            let mut offsets = [0.0; 6];
            for o in offsets.iter_mut() {
                *o = 2.0 * normal.sample(&mut rng);
            }
            let mut ar = 0.0;
            let mut values = Vec::with_capacity(WEATHER_DAYS);
            for day in 0..WEATHER_DAYS {
                ar = 0.8 * ar + 0.4 * normal.sample(&mut rng);
                let season = amp * (TAU * day as f64 / WEATHER_DAYS as f64 + phase).sin();
                let latent = season + ar;
                let mut attrs = [0.0; 6];
                for j in 0..6 {
                    attrs[j] = ATTR_BASE[j]
                        + offsets[j]
                        + ATTR_LOAD[j] * latent
                        + ATTR_IDIO[j] * normal.sample(&mut rng);
                }
                values.push(attrs);
            }
            WeatherSeries {
                city_id: city,
                values,
            }
        })
        .collect()
}

/// Shuffles cities, splits 200/30/33, fits per-attribute mean/std on the
/// training cities only, and standardizes every split with those statistics.
pub fn standardize_and_split(
    series: Vec<WeatherSeries>,
    rng: &mut ChaCha8Rng,
) -> Result<WeatherSplits, DataError> {
    let needed: usize = SPLIT_SIZES.iter().sum();
    if series.len() < needed {
        return Err(DataError::Size {
            needed,
            available: series.len(),
        });
    }
    let order = rand::seq::index::sample(rng, series.len(), series.len()).into_vec();
    let pick = |range: std::ops::Range<usize>| -> Vec<WeatherSeries> {
        order[range].iter().map(|&i| series[i].clone()).collect()
    };
    let mut train = pick(0..SPLIT_SIZES[0]);
    let mut valid = pick(SPLIT_SIZES[0]..SPLIT_SIZES[0] + SPLIT_SIZES[1]);
    let mut test = pick(SPLIT_SIZES[0] + SPLIT_SIZES[1]..needed);

    let mut mean = [0.0; 6];
    let mut std = [0.0; 6];
    let count = (train.len() * WEATHER_DAYS) as f64;
    for s in &train {
        for attrs in &s.values {
            for j in 0..6 {
                mean[j] += attrs[j];
            }
        }
    }
    for m in mean.iter_mut() {
        *m /= count;
    }
    for s in &train {
        for attrs in &s.values {
            for j in 0..6 {
                let d = attrs[j] - mean[j];
                std[j] += d * d;
            }
        }
    }
    for (j, v) in std.iter_mut().enumerate() {
        *v = (*v / count).sqrt();
        if *v < 1e-12 {
            return Err(DataError::Degenerate {
                attribute: WEATHER_ATTRS[j].to_string(),
            });
        }
    }
    let stats = AttrStats { mean, std };
    for split in [&mut train, &mut valid, &mut test] {
        for s in split.iter_mut() {
            for attrs in s.values.iter_mut() {
                for (j, v) in attrs.iter_mut().enumerate() {
                    *v = stats.standardize(j, *v);
                }
            }
        }
    }
    Ok(WeatherSplits {
        train,
        valid,
        test,
        stats,
    })
}

/// Views one city as a six-task batch on normalized time.
pub fn weather_batch(series: &WeatherSeries) -> MultiTaskBatch<f64> {
    let x: Vec<f64> = (0..WEATHER_DAYS).map(WeatherSeries::time).collect();
    let y: Vec<Vec<f64>> = (0..6)
        .map(|j| series.values.iter().map(|a| a[j]).collect())
        .collect();
    MultiTaskBatch::from_complete_target(x, y, 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn time_hits_the_endpoints() {
        assert_eq!(WeatherSeries::time(0), 0.0);
        assert_eq!(WeatherSeries::time(WEATHER_DAYS - 1), 1.0);
    }

    #[test]
    fn surrogate_has_full_shape_and_is_deterministic() {
        let a = generate_surrogate_weather(3);
        let b = generate_surrogate_weather(3);
        assert_eq!(a.len(), WEATHER_CITIES);
        for s in &a {
            assert_eq!(s.values.len(), WEATHER_DAYS);
        }
        assert_eq!(a, b);
    }

    #[test]
    fn csv_round_trip_preserves_values() {
        let series = generate_surrogate_weather(4);
        let dir = std::env::temp_dir().join("weather_round_trip");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("table.csv");
        write_weather_csv(&path, &series[..3]).unwrap();
        let loaded = load_weather_table(&path).unwrap();
        assert_eq!(loaded.len(), 3);
        for (orig, back) in series[..3].iter().zip(&loaded) {
            assert_eq!(orig.city_id, back.city_id);
            for (a, b) in orig.values.iter().zip(&back.values) {
                for j in 0..6 {
                    assert!((a[j] - b[j]).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn loader_rejects_missing_columns() {
        let dir = std::env::temp_dir().join("weather_bad_header");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("table.csv");
        std::fs::write(&path, "city_id,day,attr_tempmin\n0,0,1.0\n").unwrap();
        let err = load_weather_table(&path).unwrap_err();
        assert!(matches!(err, DataError::Format { .. }));
    }

    #[test]
    fn loader_rejects_out_of_range_day() {
        let dir = std::env::temp_dir().join("weather_bad_day");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("table.csv");
        let mut body = String::from(
            "city_id,day,attr_tempmin,attr_tempmax,attr_humidity,attr_precip,attr_cloud,attr_dew\n",
        );
        body.push_str("0,300,1,2,3,4,5,6\n");
        std::fs::write(&path, body).unwrap();
        let err = load_weather_table(&path).unwrap_err();
        match err {
            DataError::Format { row, message } => {
                assert_eq!(row, 2);
                assert!(message.contains("out of range"));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn standardization_zeroes_train_moments_and_inverts() {
        let series = generate_surrogate_weather(5);
        let raw = series.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let splits = standardize_and_split(series, &mut rng).unwrap();
        assert_eq!(splits.train.len(), 200);
        assert_eq!(splits.valid.len(), 30);
        assert_eq!(splits.test.len(), 33);
        for j in 0..6 {
            let vals: Vec<f64> = splits
                .train
                .iter()
                .flat_map(|s| s.values.iter().map(move |a| a[j]))
                .collect();
            let n = vals.len() as f64;
            let mean: f64 = vals.iter().sum::<f64>() / n;
            let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-6, "attr {j} mean {mean}");
            assert!((var.sqrt() - 1.0).abs() < 1e-6, "attr {j} std {}", var.sqrt());
        }
        let city = &splits.train[0];
        let orig = raw.iter().find(|s| s.city_id == city.city_id).unwrap();
        for (day, attrs) in city.values.iter().enumerate() {
            for (j, &standardized) in attrs.iter().enumerate() {
                let back = splits.stats.invert(j, standardized);
                assert!((back - orig.values[day][j]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn too_few_cities_is_an_error() {
        let series = generate_surrogate_weather(6)[..100].to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let err = standardize_and_split(series, &mut rng).unwrap_err();
        assert_eq!(
            err,
            DataError::Size {
                needed: 263,
                available: 100
            }
        );
    }

    #[test]
    fn batch_view_has_six_tasks_on_unit_time() {
        let series = generate_surrogate_weather(7);
        let batch = weather_batch(&series[0]);
        assert_eq!(batch.n_tasks, 6);
        assert_eq!(batch.n_target(), WEATHER_DAYS);
        assert_eq!(batch.x_target[0], 0.0);
        assert_eq!(*batch.x_target.last().unwrap(), 1.0);
    }
}
