//! Loaders for the SwissMetro survey, the Expedia hotel-search log and per-hotel booking
//! records. Each returns a dataset plus an [`IngestReport`] counting every dropped record.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Assortment, ChoiceDataset, ChoiceObservation, FeatureTable, ProductUniverse};
use crate::error::{Error, Result};

pub const DEFAULT_RARE_THRESHOLD: usize = 10;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub source: String,
    /// What one input record is ("row" or "search").
    pub unit: String,
    pub input_records: usize,
    pub output_records: usize,
    pub drops: BTreeMap<String, usize>,
    /// Ordered category values behind each one-hot block.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub categories: BTreeMap<String, Vec<i64>>,
    /// Input columns not used as features.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub unused_columns: Vec<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub parameters: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub product_labels: Vec<String>,
}

impl IngestReport {
    fn new(source: &str, unit: &str) -> Self {
        Self { source: source.into(), unit: unit.into(), ..Self::default() }
    }

    fn drop(&mut self, reason: &str) {
        *self.drops.entry(reason.to_string()).or_default() += 1;
    }

    pub fn dropped(&self) -> usize {
        self.drops.values().sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Opens a delimited file, taking tabs as the separator when the header has any.
fn open_table(path: &Path) -> Result<csv::Reader<File>> {
    let mut first = String::new();
    BufReader::new(File::open(path)?).read_line(&mut first)?;
    let delimiter = if first.contains('\t') { b'\t' } else { b',' };
    Ok(csv::ReaderBuilder::new().delimiter(delimiter).trim(csv::Trim::All).from_path(path)?)
}

fn column_indices(headers: &csv::StringRecord, wanted: &[&str]) -> Result<Vec<usize>> {
    wanted
        .iter()
        .map(|name| {
            headers
                .iter()
                .position(|h| h == *name)
                .ok_or_else(|| Error::Schema(format!("missing column {name}")))
        })
        .collect()
}

fn unused_columns(headers: &csv::StringRecord, used: &[&str]) -> Vec<String> {
    headers.iter().filter(|h| !used.contains(h)).map(str::to_string).collect()
}

fn number(record: &csv::StringRecord, col: usize, name: &str) -> Result<f64> {
    let raw = &record[col];
    raw.parse()
        .map_err(|_| Error::Schema(format!("column {name} holds non-numeric value {raw:?}")))
}

const SWISS_CUSTOMER: [&str; 8] = ["MALE", "AGE", "INCOME", "FIRST", "WHO", "PURPOSE", "LUGGAGE", "GA"];
const SWISS_PRODUCT: [[&str; 3]; 3] = [
    ["TRAIN_TT", "TRAIN_HE", "TRAIN_CO"],
    ["SM_TT", "SM_HE", "SM_CO"],
    ["CAR_TT", "", "CAR_CO"],
];
const SWISS_AVAILABLE: [&str; 3] = ["TRAIN_AV", "SM_AV", "CAR_AV"];
pub const SWISS_PRODUCTS: [&str; 3] = ["TRAIN", "SM", "CAR"];

/// SwissMetro survey: products train, metro, car with travel time, headway and cost;
/// customer attributes one-hot encoded over their observed values in ascending order.
pub fn load_swissmetro(path: &Path) -> Result<(ChoiceDataset, IngestReport)> {
    let mut reader = open_table(path)?;
    let headers = reader.headers()?.clone();
    let mut used: Vec<&str> = vec!["CHOICE"];
    used.extend(SWISS_CUSTOMER);
    used.extend(SWISS_AVAILABLE);
    used.extend(SWISS_PRODUCT.iter().flatten().filter(|c| !c.is_empty()));
    let cols: HashMap<&str, usize> = used.iter().copied().zip(column_indices(&headers, &used)?).collect();
    let value = |rec: &csv::StringRecord, name: &str| number(rec, cols[name], name);

    let mut report = IngestReport::new(&path.display().to_string(), "row");
    struct Kept {
        choice: usize,
        members: Vec<usize>,
        customer: Vec<i64>,
        features: Vec<f64>,
    }
    let mut kept = Vec::new();
    for record in reader.records() {
        let rec = record?;
        report.input_records += 1;
        let choice = value(&rec, "CHOICE")?;
        let reason = if choice == 0.0 {
            Some("choice_unknown")
        } else if value(&rec, "WHO")? == 0.0 {
            Some("who_unknown")
        } else if value(&rec, "AGE")? == 6.0 {
            Some("age_unknown")
        } else if value(&rec, "INCOME")? == 4.0 {
            Some("income_unknown")
        } else if !(1.0..=4.0).contains(&value(&rec, "PURPOSE")?) {
            Some("purpose_out_of_range")
        } else {
            None
        };
        if let Some(reason) = reason {
            report.drop(reason);
            continue;
        }
        let mut members = Vec::new();
        for (i, av) in SWISS_AVAILABLE.iter().enumerate() {
            if value(&rec, av)? != 0.0 {
                members.push(i);
            }
        }
        let choice = choice as usize - 1;
        if choice >= 3 || !members.contains(&choice) {
            report.drop("choice_unavailable");
            continue;
        }
        let mut features = Vec::with_capacity(9);
        for product in SWISS_PRODUCT {
            for name in product {
                // Cars have no headway; it is taken as zero waiting time.
                features.push(if name.is_empty() { 0.0 } else { value(&rec, name)? });
            }
        }
        let customer = SWISS_CUSTOMER
            .iter()
            .map(|c| value(&rec, c).map(|v| v as i64))
            .collect::<Result<Vec<_>>>()?;
        kept.push(Kept { choice, members, customer, features });
    }
    if kept.is_empty() {
        return Err(Error::Empty);
    }

    let categories: Vec<Vec<i64>> = (0..SWISS_CUSTOMER.len())
        .map(|j| kept.iter().map(|k| k.customer[j]).collect::<BTreeSet<_>>().into_iter().collect())
        .collect();
    let width: usize = categories.iter().map(Vec::len).sum();
    let observations = kept
        .into_iter()
        .map(|k| {
            let mut g = vec![0.0; width];
            let mut offset = 0;
            for (j, values) in categories.iter().enumerate() {
                g[offset + values.binary_search(&k.customer[j]).expect("value was observed")] = 1.0;
                offset += values.len();
            }
            let mut o = ChoiceObservation::new(k.choice, Assortment::new(k.members, 3).expect("valid members"));
            o.customer_features = Some(g);
            o.product_features = Some(FeatureTable::new(3, 3, k.features).expect("3x3 table"));
            o
        })
        .collect::<Vec<_>>();
    report.output_records = observations.len();
    report.categories = SWISS_CUSTOMER.iter().map(|c| c.to_string()).zip(categories).collect();
    report.unused_columns = unused_columns(&headers, &used);
    report.product_labels = SWISS_PRODUCTS.iter().map(|s| s.to_string()).collect();
    Ok((ChoiceDataset::new(ProductUniverse::new(3, None)?, observations), report))
}

pub const EXPEDIA_POSITIONS: usize = 38;
const EXPEDIA_CUSTOMER: [&str; 6] = [
    "srch_length_of_stay",
    "srch_booking_window",
    "srch_adults_count",
    "srch_children_count",
    "srch_room_count",
    "srch_saturday_night_bool",
];
const EXPEDIA_PRODUCT: [&str; 7] = [
    "prop_starrating",
    "prop_brand_bool",
    "prop_location_score1",
    "prop_log_historical_price",
    "price_usd",
    "promotion_flag",
    "random_bool",
];
const MAX_PRICE: f64 = 1000.0;
const MAX_BOOKING_WINDOW: f64 = 365.0;

/// Expedia searches encoded by ranked position: products are positions 1 to 38 plus a
/// no-purchase option (index 38) offered in every search. Missing positions carry zero
/// feature vectors.
pub fn load_expedia(path: &Path) -> Result<(ChoiceDataset, IngestReport)> {
    let mut reader = open_table(path)?;
    let headers = reader.headers()?.clone();
    let mut used = vec!["srch_id", "position", "booking_bool"];
    used.extend(EXPEDIA_CUSTOMER);
    used.extend(EXPEDIA_PRODUCT);
    let idx = column_indices(&headers, &used)?;
    let col: HashMap<&str, usize> = used.iter().copied().zip(idx).collect();

    let n = EXPEDIA_POSITIONS + 1;
    let d = EXPEDIA_PRODUCT.len();
    struct Search {
        id: String,
        customer: Vec<f64>,
        features: Vec<f64>,
        members: BTreeSet<usize>,
        booked: Option<usize>,
        rejected: Option<&'static str>,
    }
    let mut searches: Vec<Search> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut report = IngestReport::new(&path.display().to_string(), "search");

    for record in reader.records() {
        let rec = record?;
        let id = rec[col["srch_id"]].to_string();
        let k = *index.entry(id.clone()).or_insert_with(|| {
            searches.push(Search {
                id,
                customer: Vec::new(),
                features: vec![0.0; n * d],
                members: BTreeSet::new(),
                booked: None,
                rejected: None,
            });
            searches.len() - 1
        });
        let search = &mut searches[k];
        if search.rejected.is_some() {
            continue;
        }
        let field = |name: &str| -> Result<Option<f64>> {
            let raw = &rec[col[name]];
            if raw.is_empty() || raw.eq_ignore_ascii_case("null") {
                return Ok(None);
            }
            number(&rec, col[name], name).map(Some)
        };
        let mut row = BTreeMap::new();
        for name in &used[1..] {
            match field(name)? {
                Some(v) => {
                    row.insert(*name, v);
                }
                None => {
                    search.rejected = Some("missing_value");
                    break;
                }
            }
        }
        if search.rejected.is_some() {
            continue;
        }
        if row["price_usd"] > MAX_PRICE {
            search.rejected = Some("price_outlier");
            continue;
        }
        if row["srch_booking_window"] > MAX_BOOKING_WINDOW {
            search.rejected = Some("booking_window_outlier");
            continue;
        }
        let position = row["position"] as usize;
        if position == 0 || position > EXPEDIA_POSITIONS {
            search.rejected = Some("position_out_of_range");
            continue;
        }
        let slot = position - 1;
        if !search.members.insert(slot) {
            search.rejected = Some("duplicate_position");
            continue;
        }
        if search.customer.is_empty() {
            search.customer = EXPEDIA_CUSTOMER.iter().map(|c| row[c]).collect();
        }
        for (j, name) in EXPEDIA_PRODUCT.iter().enumerate() {
            search.features[slot * d + j] = row[name];
        }
        if row["booking_bool"] != 0.0 {
            if search.booked.is_some() {
                search.rejected = Some("multiple_bookings");
                continue;
            }
            search.booked = Some(slot);
        }
    }
    report.input_records = searches.len();
    let no_purchase = EXPEDIA_POSITIONS;
    let mut observations = Vec::new();
    for search in searches {
        if let Some(reason) = search.rejected {
            log::debug!("search {} dropped: {reason}", search.id);
            report.drop(reason);
            continue;
        }
        let mut members: Vec<usize> = search.members.into_iter().collect();
        members.push(no_purchase);
        let mut o = ChoiceObservation::new(search.booked.unwrap_or(no_purchase), Assortment::new(members, n)?);
        o.customer_features = Some(search.customer);
        o.product_features = Some(FeatureTable::new(n, d, search.features)?);
        observations.push(o);
    }
    if observations.is_empty() {
        return Err(Error::Empty);
    }
    report.output_records = observations.len();
    report.unused_columns = unused_columns(&headers, &used);
    report.parameters.insert("max_price_usd".into(), MAX_PRICE.to_string());
    report.parameters.insert("max_booking_window".into(), MAX_BOOKING_WINDOW.to_string());
    report.product_labels = (1..=EXPEDIA_POSITIONS).map(|p| format!("position_{p}")).chain(["no_purchase".to_string()]).collect();
    let mut ds = ChoiceDataset::new(ProductUniverse::new(n, Some(no_purchase))?, observations);
    ds.no_purchase_always_offered = true;
    Ok((ds, report))
}

const HOTEL_COLUMNS: [&str; 4] = ["hotel_id", "booking_id", "purchased_room_type", "offered_room_types"];

/// Bookings of one hotel: rows `hotel_id, booking_id, purchased_room_type,
/// offered_room_types` with offered types separated by `|`. Room types with fewer than
/// `rare_threshold` purchases are removed; a no-purchase option (last index) is offered
/// in every assortment.
pub fn load_hotel(path: &Path, hotel_id: &str, rare_threshold: usize) -> Result<(ChoiceDataset, IngestReport)> {
    let mut reader = open_table(path)?;
    let headers = reader.headers()?.clone();
    let col = column_indices(&headers, &HOTEL_COLUMNS)?;
    let mut report = IngestReport::new(&path.display().to_string(), "row");
    report.parameters.insert("hotel_id".into(), hotel_id.into());
    report.parameters.insert("rare_threshold".into(), rare_threshold.to_string());

    let mut rows: Vec<(String, Vec<String>)> = Vec::new();
    let mut seen_hotel = false;
    for record in reader.records() {
        let rec = record?;
        if &rec[col[0]] != hotel_id {
            continue;
        }
        seen_hotel = true;
        report.input_records += 1;
        let purchased = rec[col[2]].to_string();
        let offered: Vec<String> = rec[col[3]].split('|').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect();
        if !offered.contains(&purchased) {
            report.drop("purchase_not_offered");
            continue;
        }
        rows.push((purchased, offered));
    }
    if !seen_hotel {
        return Err(Error::UnknownHotel(hotel_id.to_string()));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for (purchased, _) in &rows {
        *counts.entry(purchased).or_default() += 1;
    }
    let kept_types: Vec<String> = counts.iter().filter(|(_, &c)| c >= rare_threshold).map(|(t, _)| t.to_string()).collect();
    let position: HashMap<&str, usize> = kept_types.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();
    let n = kept_types.len() + 1;
    let no_purchase = kept_types.len();
    let mut observations = Vec::new();
    for (purchased, offered) in &rows {
        let Some(&choice) = position.get(purchased.as_str()) else {
            report.drop("rare_room_type");
            continue;
        };
        let mut members: Vec<usize> = offered.iter().filter_map(|t| position.get(t.as_str()).copied()).collect();
        members.push(no_purchase);
        observations.push(ChoiceObservation::new(choice, Assortment::new(members, n)?));
    }
    if observations.is_empty() {
        return Err(Error::Empty);
    }
    report.output_records = observations.len();
    report.unused_columns = unused_columns(&headers, &HOTEL_COLUMNS);
    report.product_labels = kept_types.into_iter().chain(["no_purchase".to_string()]).collect();
    let mut ds = ChoiceDataset::new(ProductUniverse::new(n, Some(no_purchase))?, observations);
    ds.no_purchase_always_offered = true;
    Ok((ds, report))
}

/// Per-column mean and standard deviation of product and customer features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaling {
    pub product_mean: Vec<f64>,
    pub product_std: Vec<f64>,
    pub customer_mean: Vec<f64>,
    pub customer_std: Vec<f64>,
}

fn moments(rows: impl Iterator<Item = Vec<f64>>, dim: usize) -> (Vec<f64>, Vec<f64>) {
    let (mut sum, mut sq, mut count) = (vec![0.0; dim], vec![0.0; dim], 0.0_f64);
    for row in rows {
        for j in 0..dim {
            sum[j] += row[j];
            sq[j] += row[j] * row[j];
        }
        count += 1.0;
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count.max(1.0)).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| {
            let v = (q / count.max(1.0) - m * m).max(0.0).sqrt();
            if v > 1e-12 { v } else { 1.0 }
        })
        .collect();
    (mean, std)
}

impl FeatureScaling {
    /// Statistics over offered products only, so zero-filled absent rows do not count.
    pub fn fit(dataset: &ChoiceDataset) -> Self {
        let pd = dataset.product_dim().unwrap_or(0);
        let cd = dataset.customer_dim().unwrap_or(0);
        let product_rows = (0..dataset.len()).flat_map(|k| {
            let obs = &dataset.observations[k];
            let table = dataset.features_for(k);
            obs.assortment
                .members()
                .iter()
                .filter(move |&&i| Some(i) != dataset.universe.no_purchase())
                .filter_map(move |&i| table.map(|t| t.row(i).to_vec()))
                .collect::<Vec<_>>()
        });
        let (product_mean, product_std) = moments(product_rows, pd);
        let customer_rows = dataset.observations.iter().filter_map(|o| o.customer_features.clone());
        let (customer_mean, customer_std) = moments(customer_rows, cd);
        Self { product_mean, product_std, customer_mean, customer_std }
    }

    /// Standardizes offered-product rows and customer features; absent rows stay zero.
    pub fn apply(&self, dataset: &mut ChoiceDataset) {
        let no_purchase = dataset.universe.no_purchase();
        let scale = |row: &mut [f64], mean: &[f64], std: &[f64]| {
            for ((v, m), s) in row.iter_mut().zip(mean).zip(std) {
                *v = (*v - m) / s;
            }
        };
        if let Some(table) = dataset.product_features.as_mut() {
            for i in (0..table.rows()).filter(|&i| Some(i) != no_purchase) {
                scale(table.row_mut(i), &self.product_mean, &self.product_std);
            }
        }
        for obs in &mut dataset.observations {
            if let Some(table) = obs.product_features.as_mut() {
                for &i in obs.assortment.members().iter().filter(|&&i| Some(i) != no_purchase) {
                    scale(table.row_mut(i), &self.product_mean, &self.product_std);
                }
            }
            if let Some(g) = obs.customer_features.as_mut() {
                scale(g, &self.customer_mean, &self.customer_std);
            }
        }
    }
}
