//! Feature pools: the finite set of trajectories a query may draw from.
//!
//! CSV layout, one row per item:
//!
//! ```text
//! id,f0,f1,...,f{d-1}[,media_uri][,label]
//! ```
//!
//! Bounds of a loaded pool are the per-dimension min/max of its rows.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::choice::{FeatureVector, Item};
use crate::error::{check_dim, Error, Result};

/// Axis-aligned box `[low_i, high_i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    low: Vec<f64>,
    high: Vec<f64>,
}

impl Bounds {
    /// Requires `low_i <= high_i` in every dimension.
    pub fn new(low: Vec<f64>, high: Vec<f64>) -> Result<Self> {
        check_dim(low.len(), high.len())?;
        if low.is_empty() {
            return Err(Error::InvalidArgument("bounds need at least one dimension".into()));
        }
        for (i, (l, h)) in low.iter().zip(&high).enumerate() {
            if !(l.is_finite() && h.is_finite() && l <= h) {
                return Err(Error::InvalidArgument(format!("bad interval [{l}, {h}] in dimension {i}")));
            }
        }
        Ok(Self { low, high })
    }

    pub fn cube(dim: usize, low: f64, high: f64) -> Result<Self> {
        Self::new(vec![low; dim], vec![high; dim])
    }

    pub fn dim(&self) -> usize {
        self.low.len()
    }

    pub fn low(&self) -> &[f64] {
        &self.low
    }

    pub fn high(&self) -> &[f64] {
        &self.high
    }

    /// True when every interval has positive width.
    pub fn is_proper(&self) -> bool {
        self.low.iter().zip(&self.high).all(|(l, h)| l < h)
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim() && x.iter().zip(self.low.iter().zip(&self.high)).all(|(v, (l, h))| l <= v && v <= h)
    }

    pub fn clip(&self, x: &mut [f64]) {
        for (v, (l, h)) in x.iter_mut().zip(self.low.iter().zip(&self.high)) {
            *v = v.clamp(*l, *h);
        }
    }
}

/// Optional presentation data carried through to clients untouched.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Media {
    pub uri: Option<String>,
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolItem {
    pub id: String,
    pub features: FeatureVector,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub media: Option<Media>,
}

impl PoolItem {
    pub fn to_item(&self) -> Item {
        Item::new(self.id.clone(), self.features.clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePool {
    dim: usize,
    items: Vec<PoolItem>,
    bounds: Bounds,
    by_id: HashMap<String, usize>,
}

impl FeaturePool {
    pub fn new(items: Vec<PoolItem>, bounds: Bounds) -> Result<Self> {
        let dim = bounds.dim();
        if items.is_empty() {
            return Err(Error::Pool("pool must contain at least one item".into()));
        }
        let mut by_id = HashMap::with_capacity(items.len());
        for (i, item) in items.iter().enumerate() {
            check_dim(dim, item.features.dim())?;
            if !bounds.contains(item.features.as_slice()) {
                return Err(Error::Pool(format!("item {:?} lies outside the pool bounds", item.id)));
            }
            if by_id.insert(item.id.clone(), i).is_some() {
                return Err(Error::Pool(format!("duplicate item id {:?}", item.id)));
            }
        }
        Ok(Self { dim, items, bounds, by_id })
    }

    /// Bounds are taken as the per-dimension min/max of the items.
    pub fn from_items(items: Vec<PoolItem>) -> Result<Self> {
        let first = items.first().ok_or_else(|| Error::Pool("pool must contain at least one item".into()))?;
        let dim = first.features.dim();
        let mut low = vec![f64::INFINITY; dim];
        let mut high = vec![f64::NEG_INFINITY; dim];
        for item in &items {
            check_dim(dim, item.features.dim())?;
            for (j, v) in item.features.as_slice().iter().enumerate() {
                low[j] = low[j].min(*v);
                high[j] = high[j].max(*v);
            }
        }
        Self::new(items, Bounds::new(low, high)?)
    }

    /// `count` i.i.d. uniform points inside `bounds`, ids `"0"..`.
    pub fn generate_synthetic<R: Rng + ?Sized>(count: usize, bounds: Bounds, rng: &mut R) -> Result<Self> {
        if count == 0 {
            return Err(Error::Pool("synthetic pool needs count >= 1".into()));
        }
        let items = (0..count)
            .map(|i| {
                let f = bounds
                    .low()
                    .iter()
                    .zip(bounds.high())
                    .map(|(l, h)| if l < h { rng.random_range(*l..=*h) } else { *l })
                    .collect();
                Ok(PoolItem { id: i.to_string(), features: FeatureVector::new(f)?, media: None })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(items, bounds)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[PoolItem] {
        &self.items
    }

    pub fn bounds(&self) -> &Bounds {
        &self.bounds
    }

    pub fn get(&self, id: &str) -> Option<&PoolItem> {
        self.by_id.get(id).map(|&i| &self.items[i])
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    /// Index of the item closest to `f` in Euclidean distance; lowest index
    /// wins ties.
    pub fn nearest_index(&self, f: &[f64]) -> Result<usize> {
        self.nearest_excluding(f, |_| false)
    }

    pub fn nearest(&self, f: &FeatureVector) -> Result<&PoolItem> {
        Ok(&self.items[self.nearest_index(f.as_slice())?])
    }

    /// Like [`nearest_index`](Self::nearest_index) but skipping indices for
    /// which `skip` returns true.
    pub fn nearest_excluding(&self, f: &[f64], skip: impl Fn(usize) -> bool) -> Result<usize> {
        check_dim(self.dim, f.len())?;
        let mut best = None;
        let mut best_dist = f64::INFINITY;
        for (i, item) in self.items.iter().enumerate() {
            if skip(i) {
                continue;
            }
            let d: f64 = item.features.as_slice().iter().zip(f).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best_dist {
                best_dist = d;
                best = Some(i);
            }
        }
        best.ok_or_else(|| Error::Pool("no eligible pool item".into()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::Pool(format!("{}: {e}", path.display())))?;
        Self::read_csv(file)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::Pool(format!("{}: {e}", path.display())))?;
        self.write_csv(file)
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let headers = rdr.headers().map_err(csv_err)?.clone();
        let layout = Layout::parse(&headers)?;
        let mut items = Vec::new();
        for (row, record) in rdr.records().enumerate() {
            let record = record.map_err(csv_err)?;
            let line = row + 2;
            if record.len() != headers.len() {
                return Err(Error::Pool(format!(
                    "line {line}: expected {} fields, found {}",
                    headers.len(),
                    record.len()
                )));
            }
            let id = record[0].to_string();
            let features = (1..=layout.dim)
                .map(|j| {
                    record[j]
                        .trim()
                        .parse::<f64>()
                        .map_err(|e| Error::Pool(format!("line {line}, column {}: {e}", &headers[j])))
                })
                .collect::<Result<Vec<_>>>()?;
            let features = FeatureVector::new(features).map_err(|e| Error::Pool(format!("line {line}: {e}")))?;
            let text = |col: Option<usize>| col.map(|c| record[c].to_string()).filter(|s| !s.is_empty());
            let uri = text(layout.uri);
            let label = text(layout.label);
            let media = (uri.is_some() || label.is_some()).then_some(Media { uri, label });
            items.push(PoolItem { id, features, media });
        }
        if items.is_empty() {
            return Err(Error::Pool("feature file has no rows".into()));
        }
        Self::from_items(items)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let has_uri = self.items.iter().any(|i| i.media.as_ref().is_some_and(|m| m.uri.is_some()));
        let has_label = self.items.iter().any(|i| i.media.as_ref().is_some_and(|m| m.label.is_some()));
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header = vec!["id".to_string()];
        header.extend((0..self.dim).map(|j| format!("f{j}")));
        if has_uri {
            header.push("media_uri".into());
        }
        if has_label {
            header.push("label".into());
        }
        wtr.write_record(&header).map_err(csv_err)?;
        for item in &self.items {
            let mut row = vec![item.id.clone()];
            row.extend(item.features.as_slice().iter().map(|v| v.to_string()));
            let media = item.media.clone().unwrap_or_default();
            if has_uri {
                row.push(media.uri.unwrap_or_default());
            }
            if has_label {
                row.push(media.label.unwrap_or_default());
            }
            wtr.write_record(&row).map_err(csv_err)?;
        }
        wtr.flush().map_err(|e| Error::Pool(e.to_string()))
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Pool(e.to_string())
}

struct Layout {
    dim: usize,
    uri: Option<usize>,
    label: Option<usize>,
}

impl Layout {
    fn parse(headers: &csv::StringRecord) -> Result<Self> {
        if headers.get(0) != Some("id") {
            return Err(Error::Pool("first column must be `id`".into()));
        }
        let mut dim = 0;
        while headers.get(dim + 1) == Some(format!("f{dim}").as_str()) {
            dim += 1;
        }
        if dim == 0 {
            return Err(Error::Pool("expected feature columns f0, f1, ...".into()));
        }
        let mut uri = None;
        let mut label = None;
        for (c, name) in headers.iter().enumerate().skip(dim + 1) {
            match name {
                "media_uri" if uri.is_none() && label.is_none() => uri = Some(c),
                "label" if label.is_none() => label = Some(c),
                other => return Err(Error::Pool(format!("unexpected column {other:?}"))),
            }
        }
        Ok(Self { dim, uri, label })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn item(id: &str, f: &[f64]) -> PoolItem {
        PoolItem { id: id.into(), features: FeatureVector::new(f.to_vec()).unwrap(), media: None }
    }

    #[test]
    fn synthetic_pool_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bounds = Bounds::cube(3, -1.0, 1.0).unwrap();
        let pool = FeaturePool::generate_synthetic(500, bounds.clone(), &mut rng).unwrap();
        assert_eq!(pool.len(), 500);
        assert!(pool.items().iter().all(|i| bounds.contains(i.features.as_slice())));
        assert!(FeaturePool::generate_synthetic(0, bounds, &mut rng).is_err());
    }

    #[test]
    fn synthetic_pool_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bounds = Bounds::new(vec![-1.0, 0.0, 2.0], vec![1.0, 4.0, 3.0]).unwrap();
        let pool = FeaturePool::generate_synthetic(100_000, bounds, &mut rng).unwrap();
        let mids = [0.0, 2.0, 2.5];
        for (j, mid) in mids.iter().enumerate() {
            let mean = pool.items().iter().map(|i| i.features.as_slice()[j]).sum::<f64>() / pool.len() as f64;
            assert!((mean - mid).abs() < 0.02, "dimension {j}: {mean}");
        }
    }

    #[test]
    fn csv_round_trip() {
        let text = "id,f0,f1,media_uri,label\na,0.5,-1,http://x/a.mp4,slow\nb,1.25,2,,\nc,0,0.75,http://x/c.mp4,\n";
        let pool = FeaturePool::read_csv(text.as_bytes()).unwrap();
        assert_eq!(pool.dim(), 2);
        assert_eq!(pool.len(), 3);
        assert!(pool.items().iter().all(|i| i.features.dim() == 2));
        assert_eq!(pool.bounds().low(), &[0.0, -1.0]);
        assert_eq!(pool.bounds().high(), &[1.25, 2.0]);
        assert_eq!(pool.get("a").unwrap().media.as_ref().unwrap().label.as_deref(), Some("slow"));
        assert!(pool.get("b").unwrap().media.is_none());

        let mut out = Vec::new();
        pool.write_csv(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), text);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pool.csv");
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pool = FeaturePool::generate_synthetic(50, Bounds::cube(4, -1.0, 1.0).unwrap(), &mut rng).unwrap();
        pool.save(&path).unwrap();
        let back = FeaturePool::load(&path).unwrap();
        assert_eq!(back.items(), pool.items());
    }

    #[test]
    fn load_errors() {
        let dup = "id,f0\nx,1\nx,2\n";
        let err = FeaturePool::read_csv(dup.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("\"x\""), "{err}");

        assert!(FeaturePool::read_csv("id,f0,f1\n".as_bytes()).is_err());
        assert!(FeaturePool::read_csv("id,f0,f1\na,1\n".as_bytes()).is_err());
        assert!(FeaturePool::read_csv("id,f0,f1\na,1,zz\n".as_bytes()).is_err());
        assert!(FeaturePool::read_csv("name,f0\na,1\n".as_bytes()).is_err());
        assert!(FeaturePool::read_csv("id,g0\na,1\n".as_bytes()).is_err());
        assert!(FeaturePool::load("/nonexistent/pool.csv").is_err());
    }

    #[test]
    fn nearest_examples() {
        let pool = FeaturePool::from_items(vec![item("lo", &[0.0, 0.0]), item("hi", &[1.0, 1.0])]).unwrap();
        let f = FeatureVector::new(vec![0.9, 0.9]).unwrap();
        assert_eq!(pool.nearest(&f).unwrap().id, "hi");
        assert_eq!(pool.nearest(&pool.items()[0].features).unwrap().id, "lo");
        // Equidistant point goes to the lower index.
        assert_eq!(pool.nearest_index(&[0.5, 0.5]).unwrap(), 0);
        assert!(pool.nearest_index(&[0.5]).is_err());
        assert_eq!(pool.nearest_excluding(&[0.0, 0.0], |i| i == 0).unwrap(), 1);
    }

    #[test]
    fn nearest_matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pool = FeaturePool::generate_synthetic(1000, Bounds::cube(3, -1.0, 1.0).unwrap(), &mut rng).unwrap();
        for _ in 0..1000 {
            let q: Vec<f64> = (0..3).map(|_| rng.random_range(-1.2..1.2)).collect();
            let mut best = (f64::INFINITY, 0);
            for (i, it) in pool.items().iter().enumerate() {
                let d = it.features.as_slice().iter().zip(&q).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                if d < best.0 {
                    best = (d, i);
                }
            }
            assert_eq!(pool.nearest_index(&q).unwrap(), best.1);
        }
    }

    #[test]
    fn pool_invariants() {
        assert!(FeaturePool::from_items(vec![]).is_err());
        assert!(FeaturePool::from_items(vec![item("a", &[0.0]), item("a", &[1.0])]).is_err());
        assert!(FeaturePool::from_items(vec![item("a", &[0.0]), item("b", &[1.0, 2.0])]).is_err());
        let bounds = Bounds::cube(1, 0.0, 1.0).unwrap();
        assert!(FeaturePool::new(vec![item("a", &[2.0])], bounds).is_err());
        assert!(Bounds::new(vec![1.0], vec![0.0]).is_err());
    }

    proptest! {
        #[test]
        fn nearest_of_member_is_member(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pool = FeaturePool::generate_synthetic(64, Bounds::cube(3, -1.0, 1.0).unwrap(), &mut rng).unwrap();
            for (i, it) in pool.items().iter().enumerate() {
                prop_assert_eq!(pool.nearest_index(it.features.as_slice()).unwrap(), i);
            }
        }

        #[test]
        fn save_then_load_is_identity(seed in any::<u64>(), n in 1usize..30, d in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pool = FeaturePool::generate_synthetic(n, Bounds::cube(d, -3.0, 3.0).unwrap(), &mut rng).unwrap();
            let mut buf = Vec::new();
            pool.write_csv(&mut buf).unwrap();
            let back = FeaturePool::read_csv(buf.as_slice()).unwrap();
            prop_assert_eq!(back.items(), pool.items());
        }
    }
}
