//! Bradley-Terry selection and its Plackett-Luce extension to full rankings.
//!
//! A user facing a query picks the item `i` with probability proportional to
//! `exp(beta * w . phi_i)`. A ranking is read best-first as a sequence of such
//! picks without replacement, so its likelihood factors over the shrinking
//! remainder of the query.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

fn validate_finite(values: &[f64], what: &'static str) -> Result<()> {
    if values.is_empty() {
        return Err(Error::InvalidArgument(format!("{what} must have dimension >= 1")));
    }
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Softmax over `logits`, written into `out`. Max-shifted.
pub(crate) fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Plackett-Luce log-likelihood of logits already arranged best-first.
pub(crate) fn plackett_luce_log_likelihood(ordered_logits: &[f64]) -> f64 {
    // Walk from the worst item upwards, carrying the log-sum-exp of the
    // remaining set. The final singleton stage contributes ln 1 = 0.
    let mut tail = f64::NEG_INFINITY;
    let mut total = 0.0;
    for &l in ordered_logits.iter().rev() {
        tail = if tail == f64::NEG_INFINITY {
            l
        } else {
            let hi = tail.max(l);
            hi + ((tail - hi).exp() + (l - hi).exp()).ln()
        };
        total += l - tail;
    }
    total
}

/// Trajectory features `phi(xi)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        validate_finite(&values, "feature vector")?;
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for FeatureVector {
    type Error = Error;
    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<FeatureVector> for Vec<f64> {
    fn from(f: FeatureVector) -> Self {
        f.0
    }
}

/// Linear reward weights `w`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        validate_finite(&values, "weight vector")?;
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim.max(1)])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        dot(&self.0, &self.0).sqrt()
    }
}

impl TryFrom<Vec<f64>> for WeightVector {
    type Error = Error;
    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<WeightVector> for Vec<f64> {
    fn from(w: WeightVector) -> Self {
        w.0
    }
}

/// `R(xi) = w . phi(xi)`.
pub fn reward(w: &WeightVector, f: &FeatureVector) -> Result<f64> {
    check_dim(w.dim(), f.dim())?;
    Ok(dot(w.as_slice(), f.as_slice()))
}

/// One candidate shown to the user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub id: String,
    pub features: FeatureVector,
}

impl Item {
    pub fn new(id: impl Into<String>, features: FeatureVector) -> Self {
        Self { id: id.into(), features }
    }
}

/// A set of candidates presented together for ranking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Item>", into = "Vec<Item>")]
pub struct Query {
    items: Vec<Item>,
}

impl Query {
    /// Builds a query; ids must be distinct and all features share one
    /// dimension. A single-item query is accepted (its ranking is trivial).
    pub fn new(items: Vec<Item>) -> Result<Self> {
        let first = items.first().ok_or_else(|| Error::InvalidQuery("query must contain at least one item".into()))?;
        let dim = first.features.dim();
        for (i, item) in items.iter().enumerate() {
            check_dim(dim, item.features.dim())?;
            if items[..i].iter().any(|other| other.id == item.id) {
                return Err(Error::InvalidQuery(format!("duplicate item id {:?}", item.id)));
            }
        }
        Ok(Self { items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.items[0].features.dim()
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn into_items(self) -> Vec<Item> {
        self.items
    }

    fn rewards(&self, w: &WeightVector) -> Result<Vec<f64>> {
        check_dim(self.dim(), w.dim())?;
        Ok(self.items.iter().map(|it| dot(w.as_slice(), it.features.as_slice())).collect())
    }
}

impl TryFrom<Vec<Item>> for Query {
    type Error = Error;
    fn try_from(items: Vec<Item>) -> Result<Self> {
        Self::new(items)
    }
}

impl From<Query> for Vec<Item> {
    fn from(q: Query) -> Self {
        q.items
    }
}

/// Best-first permutation of query indices: `order[0]` is the favourite.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Ranking {
    order: Vec<usize>,
}

impl Ranking {
    pub fn new(order: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; order.len()];
        for &i in &order {
            match seen.get_mut(i) {
                Some(s) if !*s => *s = true,
                Some(_) => return Err(Error::InvalidRanking(format!("index {i} appears twice"))),
                None => return Err(Error::InvalidRanking(format!("index {i} out of range for {} items", order.len()))),
            }
        }
        if order.is_empty() {
            return Err(Error::InvalidRanking("empty ranking".into()));
        }
        Ok(Self { order })
    }

    /// Identity ranking `0, 1, .., k-1`.
    pub fn identity(k: usize) -> Self {
        Self { order: (0..k).collect() }
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn check_for(&self, query: &Query) -> Result<()> {
        if self.order.len() == query.len() {
            Ok(())
        } else {
            Err(Error::InvalidRanking(format!(
                "ranking has {} entries but the query has {} items",
                self.order.len(),
                query.len()
            )))
        }
    }
}

impl TryFrom<Vec<usize>> for Ranking {
    type Error = Error;
    fn try_from(order: Vec<usize>) -> Result<Self> {
        Self::new(order)
    }
}

impl From<Ranking> for Vec<usize> {
    fn from(r: Ranking) -> Self {
        r.order
    }
}

/// Softmax choice model with rationality `beta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChoiceModel {
    beta: f64,
}

impl Default for ChoiceModel {
    fn default() -> Self {
        Self { beta: 1.0 }
    }
}

impl ChoiceModel {
    pub fn new(beta: f64) -> Result<Self> {
        if beta.is_finite() && beta >= 0.0 {
            Ok(Self { beta })
        } else {
            Err(Error::InvalidArgument(format!("beta must be finite and >= 0, got {beta}")))
        }
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Probability of picking each item of `q` as the best one.
    pub fn selection_probabilities(&self, w: &WeightVector, q: &Query) -> Result<Vec<f64>> {
        let logits: Vec<f64> = q.rewards(w)?.into_iter().map(|r| self.beta * r).collect();
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::NonFinite("reward"));
        }
        let mut probs = vec![0.0; logits.len()];
        softmax_into(&logits, &mut probs);
        Ok(probs)
    }

    /// `sum_i ln p(order[i] | remaining items)`.
    pub fn ranking_log_likelihood(&self, w: &WeightVector, q: &Query, r: &Ranking) -> Result<f64> {
        r.check_for(q)?;
        let rewards = q.rewards(w)?;
        let ordered: Vec<f64> = r.order().iter().map(|&i| self.beta * rewards[i]).collect();
        Ok(plackett_luce_log_likelihood(&ordered))
    }

    /// Draws a ranking by picking the best remaining item from the softmax,
    /// removing it, and repeating.
    pub fn sample_ranking<R: Rng + ?Sized>(&self, w: &WeightVector, q: &Query, rng: &mut R) -> Result<Ranking> {
        let rewards = q.rewards(w)?;
        let mut remaining: Vec<usize> = (0..q.len()).collect();
        let mut order = Vec::with_capacity(q.len());
        let mut logits = Vec::with_capacity(q.len());
        let mut probs = vec![0.0; q.len()];
        while remaining.len() > 1 {
            logits.clear();
            logits.extend(remaining.iter().map(|&i| self.beta * rewards[i]));
            let probs = &mut probs[..remaining.len()];
            softmax_into(&logits, probs);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = remaining.len() - 1;
            for (slot, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    pick = slot;
                    break;
                }
            }
            order.push(remaining.remove(pick));
        }
        order.extend(remaining);
        Ok(Ranking { order })
    }
}
