//! Statistical similarity between a real and a synthetic dataset.
//!
//! Nested records are flattened into one table per level: the root table
//! has a row per record, and every list adds a table with a row per item
//! that repeats its ancestors' scalar columns. Each list also contributes
//! a categorical `…/#len` column to its parent level.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use serde_json::Value as Json;

use crate::codec::QuantileTable;
use crate::error::{Error, Result};
use crate::schema::SchemaNode;

/// Quantile bins used to discretize numbers for marginals.
pub const MARGINAL_BINS: usize = 10;
pub const DEFAULT_SUBSETS: usize = 50;
pub const DEFAULT_K: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub enum ColumnData {
    Categorical(Vec<String>),
    Numerical(Vec<f64>),
}

impl ColumnData {
    pub fn len(&self) -> usize {
        match self {
            ColumnData::Categorical(v) => v.len(),
            ColumnData::Numerical(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Column {
    pub name: String,
    pub data: ColumnData,
    /// Copied down from an ancestor level.
    pub inherited: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub name: String,
    pub columns: Vec<Column>,
}

impl Table {
    pub fn rows(&self) -> usize {
        self.columns.first().map_or(0, |c| c.data.len())
    }
}

/// 1-D earth mover's distance, `∫ |F_real − F_synth|`. In normalized mode
/// both columns are first rescaled by the real column's range.
pub fn wasserstein_1d(real: &[f64], synth: &[f64], normalized: bool) -> Result<f64> {
    if real.is_empty() || synth.is_empty() {
        return Err(Error::Data("wasserstein distance of an empty column".into()));
    }
    if real.iter().chain(synth).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("wasserstein input".into()));
    }
    let (lo, scale) = if normalized {
        let lo = real.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = real.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (lo, if hi > lo { hi - lo } else { 1.0 })
    } else {
        (0.0, 1.0)
    };
    let prep = |xs: &[f64]| {
        let mut v: Vec<f64> = xs.iter().map(|x| (x - lo) / scale).collect();
        v.sort_by(f64::total_cmp);
        v
    };
    let (a, b) = (prep(real), prep(synth));
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let mut all: Vec<f64> = a.iter().chain(&b).copied().collect();
    all.sort_by(f64::total_cmp);
    let (mut i, mut j) = (0, 0);
    let mut total = 0.0;
    for w in all.windows(2) {
        while i < a.len() && a[i] <= w[0] {
            i += 1;
        }
        while j < b.len() && b[j] <= w[0] {
            j += 1;
        }
        total += (i as f64 / na - j as f64 / nb).abs() * (w[1] - w[0]);
    }
    Ok(total)
}

fn frequencies<'a>(xs: &'a [String]) -> BTreeMap<&'a str, f64> {
    let mut counts: BTreeMap<&str, f64> = BTreeMap::new();
    for x in xs {
        *counts.entry(x.as_str()).or_default() += 1.0;
    }
    let n = xs.len() as f64;
    counts.values_mut().for_each(|c| *c /= n);
    counts
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Jensen {
    /// Square root of the divergence.
    pub distance: f64,
    pub divergence: f64,
}

/// Jensen–Shannon divergence (natural log) of the empirical frequencies
/// over the union of observed categories.
pub fn jensen_shannon(real: &[String], synth: &[String]) -> Result<Jensen> {
    if real.is_empty() || synth.is_empty() {
        return Err(Error::Data("Jensen-Shannon distance of an empty column".into()));
    }
    let (p, q) = (frequencies(real), frequencies(synth));
    let mut keys: Vec<&str> = p.keys().chain(q.keys()).copied().collect();
    keys.sort_unstable();
    keys.dedup();
    let mut div = 0.0;
    for k in keys {
        let (pk, qk) = (p.get(k).copied().unwrap_or(0.0), q.get(k).copied().unwrap_or(0.0));
        let m = 0.5 * (pk + qk);
        if pk > 0.0 {
            div += 0.5 * pk * (pk / m).ln();
        }
        if qk > 0.0 {
            div += 0.5 * qk * (qk / m).ln();
        }
    }
    let divergence = div.max(0.0);
    Ok(Jensen {
        distance: divergence.sqrt(),
        divergence,
    })
}

fn entropy_of(counts: impl Iterator<Item = f64>, n: f64) -> f64 {
    -counts.map(|c| c / n).filter(|&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

/// Theil's uncertainty coefficient `U(x | y) = (H(x) − H(x|y)) / H(x)`;
/// `None` when `x` is constant.
pub fn theils_u(x: &[String], y: &[String]) -> Option<f64> {
    let n = x.len() as f64;
    let mut cx: BTreeMap<&str, f64> = BTreeMap::new();
    let mut cy: BTreeMap<&str, f64> = BTreeMap::new();
    let mut cxy: BTreeMap<(&str, &str), f64> = BTreeMap::new();
    for (a, b) in x.iter().zip(y) {
        *cx.entry(a).or_default() += 1.0;
        *cy.entry(b).or_default() += 1.0;
        *cxy.entry((a, b)).or_default() += 1.0;
    }
    let hx = entropy_of(cx.values().copied(), n);
    if hx <= 0.0 {
        return None;
    }
    // H(x|y) = −Σ p(x,y) ln(p(x,y)/p(y))
    let hxy: f64 = -cxy
        .iter()
        .map(|(&(_, b), &c)| (c / n) * (c / cy[b]).ln())
        .sum::<f64>();
    Some(((hx - hxy) / hx).clamp(0.0, 1.0))
}

pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Correlation ratio η of a number against a category.
pub fn correlation_ratio(cat: &[String], num: &[f64]) -> Option<f64> {
    let n = num.len() as f64;
    let mean = num.iter().sum::<f64>() / n;
    let mut groups: BTreeMap<&str, (f64, f64)> = BTreeMap::new();
    for (c, &v) in cat.iter().zip(num) {
        let g = groups.entry(c).or_default();
        g.0 += v;
        g.1 += 1.0;
    }
    let between: f64 = groups.values().map(|(s, k)| k * (s / k - mean).powi(2)).sum();
    let total: f64 = num.iter().map(|v| (v - mean).powi(2)).sum();
    if total <= 0.0 {
        return None;
    }
    Some((between / total).sqrt().clamp(0.0, 1.0))
}

/// Pairwise association matrix; undefined entries are 0, the diagonal 1.
pub fn association_matrix(table: &Table) -> Vec<Vec<f64>> {
    let cols = &table.columns;
    let k = cols.len();
    let mut m = vec![vec![0.0; k]; k];
    for i in 0..k {
        m[i][i] = 1.0;
        for j in 0..k {
            if i == j {
                continue;
            }
            let v = match (&cols[i].data, &cols[j].data) {
                (ColumnData::Numerical(a), ColumnData::Numerical(b)) => pearson(a, b),
                (ColumnData::Categorical(a), ColumnData::Categorical(b)) => theils_u(a, b),
                (ColumnData::Categorical(a), ColumnData::Numerical(b))
                | (ColumnData::Numerical(b), ColumnData::Categorical(a)) => correlation_ratio(a, b),
            };
            m[i][j] = v.unwrap_or_else(|| {
                log::warn!(
                    "{}: association of {} and {} undefined (constant column); using 0",
                    table.name,
                    cols[i].name,
                    cols[j].name
                );
                0.0
            });
        }
    }
    m
}

/// Frobenius norm of the difference of the association matrices.
pub fn correlation_diff(real: &Table, synth: &Table) -> Result<f64> {
    same_columns(real, synth)?;
    if real.rows() == 0 || synth.rows() == 0 {
        return Err(Error::Data(format!("{}: correlation of an empty table", real.name)));
    }
    let (a, b) = (association_matrix(real), association_matrix(synth));
    let sq: f64 = a
        .iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).powi(2))
        .sum();
    Ok(sq.sqrt())
}

fn same_columns(real: &Table, synth: &Table) -> Result<()> {
    let names = |t: &Table| t.columns.iter().map(|c| c.name.clone()).collect::<Vec<_>>();
    if names(real) != names(synth) {
        return Err(Error::Data(format!("{}: real and synthetic columns differ", real.name)));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginalScore {
    /// `1000 · (1 − mean TVD)`.
    pub score: f64,
    pub mean_tvd: f64,
    pub k: usize,
    pub subsets: usize,
}

/// Categorical codes of every column, numbers binned by quantiles of the
/// real column.
fn discretize(real: &Table, synth: &Table) -> Result<(Vec<Vec<String>>, Vec<Vec<String>>)> {
    let mut a = vec![];
    let mut b = vec![];
    for (rc, sc) in real.columns.iter().zip(&synth.columns) {
        match (&rc.data, &sc.data) {
            (ColumnData::Categorical(x), ColumnData::Categorical(y)) => {
                a.push(x.clone());
                b.push(y.clone());
            }
            (ColumnData::Numerical(x), ColumnData::Numerical(y)) => {
                let t = QuantileTable::fit(x, MARGINAL_BINS, false)?;
                let bin = |v: &[f64]| v.iter().map(|&v| t.bin(v).map(|i| i.to_string())).collect::<Result<Vec<_>>>();
                a.push(bin(x)?);
                b.push(bin(y)?);
            }
            _ => return Err(Error::Data(format!("{}: column kinds differ", rc.name))),
        }
    }
    Ok((a, b))
}

/// Mean total variation distance over `subsets` random `k`-column
/// marginals, remapped to `[0, 1000]`.
pub fn marginal_score(real: &Table, synth: &Table, k: usize, subsets: usize, rng: &mut dyn RngCore) -> Result<MarginalScore> {
    same_columns(real, synth)?;
    let ncols = real.columns.len();
    if k == 0 || ncols < k {
        return Err(Error::Config(format!(
            "{}: {k}-way marginals need at least {k} columns, table has {ncols}",
            real.name
        )));
    }
    if subsets == 0 {
        return Err(Error::Config("need at least one marginal subset".into()));
    }
    if real.rows() == 0 || synth.rows() == 0 {
        return Err(Error::Data(format!("{}: marginals of an empty table", real.name)));
    }
    let (a, b) = discretize(real, synth)?;
    fn cells<'a>(cols: &'a [Vec<String>], pick: &[usize]) -> BTreeMap<Vec<&'a str>, f64> {
        let n = cols[0].len() as f64;
        let mut m: BTreeMap<Vec<&str>, f64> = BTreeMap::new();
        for r in 0..cols[0].len() {
            *m.entry(pick.iter().map(|&c| cols[c][r].as_str()).collect()).or_default() += 1.0 / n;
        }
        m
    }
    let mut total = 0.0;
    for _ in 0..subsets {
        let mut pick = sample(rng, ncols, k).into_vec();
        pick.sort_unstable();
        let (p, q) = (cells(&a, &pick), cells(&b, &pick));
        let mut tvd = 0.0;
        for (key, pv) in &p {
            tvd += (pv - q.get(key).copied().unwrap_or(0.0)).abs();
        }
        for (key, qv) in &q {
            if !p.contains_key(key) {
                tvd += qv;
            }
        }
        total += (0.5 * tvd).min(1.0);
    }
    let mean_tvd = total / subsets as f64;
    Ok(MarginalScore {
        score: 1000.0 * (1.0 - mean_tvd),
        mean_tvd,
        k,
        subsets,
    })
}

fn cell_string(v: &Json) -> String {
    match v {
        Json::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn cell_number(v: &Json, what: &str) -> Result<f64> {
    match v {
        Json::Number(n) => n.as_f64(),
        Json::String(s) => s.trim().parse().ok(),
        _ => None,
    }
    .filter(|x: &f64| x.is_finite())
    .ok_or_else(|| Error::Data(format!("{what}: expected a number, got {v}")))
}

enum Slot {
    Cat(Vec<String>),
    Num(Vec<f64>),
}

struct LevelBuilder {
    name: String,
    columns: Vec<(String, Slot, bool)>,
}

impl LevelBuilder {
    fn column(&mut self, idx: &mut usize, name: &str, numeric: bool, inherited: bool) -> usize {
        let i = *idx;
        *idx += 1;
        if i == self.columns.len() {
            let slot = if numeric { Slot::Num(vec![]) } else { Slot::Cat(vec![]) };
            self.columns.push((name.to_string(), slot, inherited));
        }
        i
    }
}

/// A scalar cell carried from ancestors into descendant levels.
#[derive(Clone)]
enum Cell {
    Cat(String),
    Num(f64),
}

/// Flattens records (root values) into one table per level.
pub fn flatten(schema: &SchemaNode, records: &[Json]) -> Result<Vec<Table>> {
    let mut levels: BTreeMap<String, LevelBuilder> = BTreeMap::new();
    // pre-register levels so empty ones still exist in the same order
    let mut order = vec![];
    schema.walk(&mut |path, node| {
        if let SchemaNode::List { .. } = node {
            order.push(path.to_string());
        }
    });
    let root_level = if matches!(schema, SchemaNode::List { .. }) {
        None
    } else {
        Some(schema.name().to_string())
    };
    for name in root_level.iter().chain(&order) {
        levels.insert(
            name.clone(),
            LevelBuilder {
                name: name.clone(),
                columns: vec![],
            },
        );
    }
    for (i, r) in records.iter().enumerate() {
        let ctx = format!("record {}", i + 1);
        match &root_level {
            Some(name) => add_row(schema, schema.name(), r, &[], name, &mut levels, &ctx)?,
            None => add_items(schema, schema.name(), r, &[], &mut levels, &ctx)?,
        }
    }
    let mut out = vec![];
    for name in root_level.iter().chain(&order) {
        let b = levels.remove(name).expect("registered");
        let columns = b
            .columns
            .into_iter()
            .map(|(name, slot, inherited)| Column {
                name,
                data: match slot {
                    Slot::Cat(v) => ColumnData::Categorical(v),
                    Slot::Num(v) => ColumnData::Numerical(v),
                },
                inherited,
            })
            .collect();
        out.push(Table { name: b.name, columns });
    }
    Ok(out)
}

fn relative(path: &str, root: &str) -> String {
    path.strip_prefix(root)
        .map(|s| s.trim_start_matches('/'))
        .filter(|s| !s.is_empty())
        .unwrap_or(path)
        .to_string()
}

/// One row at `level` for the value `v` of `node`.
fn add_row(
    node: &SchemaNode,
    path: &str,
    v: &Json,
    ancestors: &[(String, Cell)],
    level: &str,
    levels: &mut BTreeMap<String, LevelBuilder>,
    ctx: &str,
) -> Result<()> {
    let mut scalars: Vec<(String, Cell)> = vec![];
    let mut lists: Vec<(&SchemaNode, String, &Json)> = vec![];
    collect(node, path, v, &mut scalars, &mut lists, ctx)?;
    let root = level.split('/').next().unwrap_or(level).to_string();
    {
        let b = levels.get_mut(level).expect("registered level");
        let mut idx = 0;
        for (name, cell) in ancestors.iter().map(|(n, c)| (n, c, true)).chain(scalars.iter().map(|(n, c)| (n, c, false))).map(|(n, c, inh)| ((n, inh), c)) {
            let (name, inherited) = name;
            let numeric = matches!(cell, Cell::Num(_));
            let i = b.column(&mut idx, &relative(name, &root), numeric, inherited);
            match (&mut b.columns[i].1, cell) {
                (Slot::Cat(col), Cell::Cat(s)) => col.push(s.clone()),
                (Slot::Num(col), Cell::Num(x)) => col.push(*x),
                _ => return Err(Error::Data(format!("{ctx}: inconsistent column {name}"))),
            }
        }
    }
    let mut carried: Vec<(String, Cell)> = ancestors.to_vec();
    carried.extend(scalars.into_iter().filter(|(n, _)| !n.ends_with("#len")));
    for (list, lpath, lv) in lists {
        add_items(list, &lpath, lv, &carried, levels, ctx)?;
    }
    Ok(())
}

fn add_items(
    list: &SchemaNode,
    path: &str,
    v: &Json,
    ancestors: &[(String, Cell)],
    levels: &mut BTreeMap<String, LevelBuilder>,
    ctx: &str,
) -> Result<()> {
    let SchemaNode::List { item, .. } = list else {
        unreachable!("only lists open levels")
    };
    let items = v
        .as_array()
        .ok_or_else(|| Error::Data(format!("{ctx}: {path} is not an array")))?;
    let ipath = format!("{path}/{}", item.name());
    for x in items {
        add_row(item, &ipath, x, ancestors, path, levels, ctx)?;
    }
    Ok(())
}

/// Scalars of `v` down through structs; lists become `#len` cells and are
/// returned for their own level.
fn collect<'a>(
    node: &'a SchemaNode,
    path: &str,
    v: &'a Json,
    scalars: &mut Vec<(String, Cell)>,
    lists: &mut Vec<(&'a SchemaNode, String, &'a Json)>,
    ctx: &str,
) -> Result<()> {
    match node {
        SchemaNode::Categorical { .. } => {
            if v.is_null() {
                return Err(Error::Data(format!("{ctx}: null in {path}")));
            }
            scalars.push((path.to_string(), Cell::Cat(cell_string(v))));
        }
        SchemaNode::Numerical { .. } => {
            scalars.push((path.to_string(), Cell::Num(cell_number(v, &format!("{ctx}: {path}"))?)));
        }
        SchemaNode::Struct { fields, .. } => {
            let obj = v
                .as_object()
                .ok_or_else(|| Error::Data(format!("{ctx}: {path} is not an object")))?;
            for f in fields {
                let fv = obj
                    .get(f.name())
                    .ok_or_else(|| Error::Data(format!("{ctx}: missing column {path}/{}", f.name())))?;
                collect(f, &format!("{path}/{}", f.name()), fv, scalars, lists, ctx)?;
            }
        }
        SchemaNode::List { .. } => {
            let n = v
                .as_array()
                .ok_or_else(|| Error::Data(format!("{ctx}: {path} is not an array")))?
                .len();
            scalars.push((format!("{path}/#len"), Cell::Cat(n.to_string())));
            lists.push((node, path.to_string(), v));
        }
    }
    Ok(())
}

/// Per-entity consistency checks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Rule {
    /// Every listed field keeps one value across an entity's records.
    Constant {
        #[serde(default)]
        field: Option<String>,
        #[serde(default)]
        fields: Vec<String>,
    },
    /// No two records of an entity share the key's value.
    AtMostOnePerKey { key: String },
    /// The field never decreases, in list order or ordered by `by`.
    Monotone {
        field: String,
        #[serde(default)]
        by: Option<String>,
    },
    /// `a − b` (or `a + b`) is the same for all records.
    DerivedConstant { fields: [String; 2], op: DerivedOp },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DerivedOp {
    Difference,
    Sum,
}

impl Rule {
    pub fn label(&self) -> String {
        match self {
            Rule::Constant { field, fields } => {
                let all: Vec<&str> = field.iter().chain(fields).map(String::as_str).collect();
                format!("constant({})", all.join(","))
            }
            Rule::AtMostOnePerKey { key } => format!("at-most-one-per-key({key})"),
            Rule::Monotone { field, by: None } => format!("monotone({field})"),
            Rule::Monotone { field, by: Some(b) } => format!("monotone({field} by {b})"),
            Rule::DerivedConstant { fields, op } => {
                let sym = match op {
                    DerivedOp::Difference => "-",
                    DerivedOp::Sum => "+",
                };
                format!("derived-constant({}{sym}{})", fields[0], fields[1])
            }
        }
    }

    fn fields(&self) -> Vec<&str> {
        match self {
            Rule::Constant { field, fields } => field.iter().chain(fields).map(String::as_str).collect(),
            Rule::AtMostOnePerKey { key } => vec![key],
            Rule::Monotone { field, by } => std::iter::once(field).chain(by).map(String::as_str).collect(),
            Rule::DerivedConstant { fields, .. } => fields.iter().map(String::as_str).collect(),
        }
    }
}

/// A rules file: the entity's record list (a field of the root, or the
/// root itself when it is a list) and the checks to run on it.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RuleSet {
    #[serde(default)]
    pub list: Option<String>,
    pub rules: Vec<Rule>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuleResult {
    pub rule: String,
    /// Fraction of entities without a violation.
    pub fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub rules: Vec<RuleResult>,
    /// Fraction of entities violating no rule.
    pub overall: f64,
    pub entities: usize,
}

fn ordered(a: &Json, b: &Json) -> std::cmp::Ordering {
    match (cell_number(a, ""), cell_number(b, "")) {
        (Ok(x), Ok(y)) => x.total_cmp(&y),
        _ => cell_string(a).cmp(&cell_string(b)),
    }
}

fn violates(rule: &Rule, items: &[&serde_json::Map<String, Json>], ctx: &str) -> Result<bool> {
    Ok(match rule {
        Rule::Constant { .. } => rule
            .fields()
            .iter()
            .any(|f| items.windows(2).any(|w| w[0][*f] != w[1][*f])),
        Rule::AtMostOnePerKey { key } => {
            let mut seen: Vec<String> = items.iter().map(|r| cell_string(&r[key.as_str()])).collect();
            seen.sort_unstable();
            seen.windows(2).any(|w| w[0] == w[1])
        }
        Rule::Monotone { field, by } => {
            let mut rows: Vec<_> = items.to_vec();
            if let Some(by) = by {
                rows.sort_by(|a, b| ordered(&a[by.as_str()], &b[by.as_str()]));
            }
            rows.windows(2)
                .any(|w| ordered(&w[0][field.as_str()], &w[1][field.as_str()]) == std::cmp::Ordering::Greater)
        }
        Rule::DerivedConstant { fields, op } => {
            let mut vals = vec![];
            for r in items {
                let a = cell_number(&r[fields[0].as_str()], ctx)?;
                let b = cell_number(&r[fields[1].as_str()], ctx)?;
                vals.push(match op {
                    DerivedOp::Difference => a - b,
                    DerivedOp::Sum => a + b,
                });
            }
            vals.windows(2).any(|w| (w[0] - w[1]).abs() > 1e-9 * w[0].abs().max(1.0))
        }
    })
}

/// Runs every rule on every entity.
pub fn consistency(schema: &SchemaNode, records: &[Json], rules: &RuleSet) -> Result<ConsistencyReport> {
    let item = match (&rules.list, schema) {
        (None, SchemaNode::List { item, .. }) => item.as_ref(),
        (Some(l), SchemaNode::Struct { fields, .. }) => match fields.iter().find(|f| f.name() == l) {
            Some(SchemaNode::List { item, .. }) => item.as_ref(),
            _ => return Err(Error::Config(format!("rules list {l:?} is not a list field of the schema"))),
        },
        (None, _) => return Err(Error::Config("rules need `list` unless the schema root is a list".into())),
        (Some(l), _) => return Err(Error::Config(format!("rules list {l:?} needs a record root"))),
    };
    let SchemaNode::Struct { fields, .. } = item else {
        return Err(Error::Config("consistency rules need list items that are records".into()));
    };
    for rule in &rules.rules {
        for f in rule.fields() {
            if !fields.iter().any(|x| x.name() == f) {
                return Err(Error::Config(format!("rule {} references missing field {f:?}", rule.label())));
            }
        }
    }
    let mut ok = vec![0usize; rules.rules.len()];
    let mut all_ok = 0;
    for (i, r) in records.iter().enumerate() {
        let ctx = format!("entity {}", i + 1);
        let list = match &rules.list {
            Some(l) => &r[l.as_str()],
            None => r,
        };
        let items: Vec<&serde_json::Map<String, Json>> = list
            .as_array()
            .ok_or_else(|| Error::Data(format!("{ctx}: record list is not an array")))?
            .iter()
            .map(|x| x.as_object().ok_or_else(|| Error::Data(format!("{ctx}: item is not an object"))))
            .collect::<Result<_>>()?;
        let mut clean = true;
        for (k, rule) in rules.rules.iter().enumerate() {
            if violates(rule, &items, &ctx)? {
                clean = false;
            } else {
                ok[k] += 1;
            }
        }
        all_ok += clean as usize;
    }
    let n = records.len();
    let frac = |c: usize| if n == 0 { 1.0 } else { c as f64 / n as f64 };
    Ok(ConsistencyReport {
        rules: rules
            .rules
            .iter()
            .zip(ok)
            .map(|(r, c)| RuleResult {
                rule: r.label(),
                fraction: frac(c),
            })
            .collect(),
        overall: frac(all_ok),
        entities: n,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnReport {
    pub table: String,
    pub column: String,
    pub kind: String,
    pub wasserstein: Option<f64>,
    pub wasserstein_normalized: Option<f64>,
    pub js_distance: Option<f64>,
    pub js_divergence: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableReport {
    pub table: String,
    pub real_rows: usize,
    pub synth_rows: usize,
    pub correlation_diff: Option<f64>,
    pub marginal: Option<MarginalScore>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub columns: Vec<ColumnReport>,
    pub tables: Vec<TableReport>,
    /// Mean over tables where defined.
    pub correlation_diff: Option<f64>,
    /// Mean over tables where defined.
    pub marginal_score: Option<f64>,
    pub mean_tvd: Option<f64>,
    pub consistency: Option<ConsistencyReport>,
    pub real_records: usize,
    pub synth_records: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub distances: bool,
    pub correlation: bool,
    pub marginal: bool,
    pub k: usize,
    pub subsets: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            distances: true,
            correlation: true,
            marginal: true,
            k: DEFAULT_K,
            subsets: DEFAULT_SUBSETS,
        }
    }
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Every metric family on real vs synthetic records (root values).
pub fn evaluate(
    schema: &SchemaNode,
    real: &[Json],
    synth: &[Json],
    opts: &EvalOptions,
    rules: Option<&RuleSet>,
    rng: &mut dyn RngCore,
) -> Result<MetricsReport> {
    let rt = flatten(schema, real)?;
    let st = flatten(schema, synth)?;
    let mut columns = vec![];
    let mut tables = vec![];
    for (r, s) in rt.iter().zip(&st) {
        if opts.distances {
            for (rc, sc) in r.columns.iter().zip(&s.columns).filter(|(c, _)| !c.inherited) {
                let mut rep = ColumnReport {
                    table: r.name.clone(),
                    column: rc.name.clone(),
                    kind: String::new(),
                    wasserstein: None,
                    wasserstein_normalized: None,
                    js_distance: None,
                    js_divergence: None,
                };
                let empty = rc.data.is_empty() || sc.data.is_empty();
                match (&rc.data, &sc.data) {
                    (ColumnData::Numerical(a), ColumnData::Numerical(b)) => {
                        rep.kind = "numerical".into();
                        if !empty {
                            rep.wasserstein = Some(wasserstein_1d(a, b, false)?);
                            rep.wasserstein_normalized = Some(wasserstein_1d(a, b, true)?);
                        }
                    }
                    (ColumnData::Categorical(a), ColumnData::Categorical(b)) => {
                        rep.kind = "categorical".into();
                        if !empty {
                            let j = jensen_shannon(a, b)?;
                            rep.js_distance = Some(j.distance);
                            rep.js_divergence = Some(j.divergence);
                        }
                    }
                    _ => return Err(Error::Data(format!("{}: column kinds differ", rc.name))),
                }
                if empty {
                    log::warn!("{}/{}: empty column, distance skipped", r.name, rc.name);
                }
                columns.push(rep);
            }
        }
        let usable = r.rows() > 0 && s.rows() > 0 && !r.columns.is_empty();
        let correlation_diff = if opts.correlation && usable && r.columns.len() > 1 {
            Some(correlation_diff(r, s)?)
        } else {
            None
        };
        let marginal = if opts.marginal && usable {
            let k = opts.k.min(r.columns.len());
            Some(marginal_score(r, s, k, opts.subsets, rng)?)
        } else {
            None
        };
        tables.push(TableReport {
            table: r.name.clone(),
            real_rows: r.rows(),
            synth_rows: s.rows(),
            correlation_diff,
            marginal,
        });
    }
    let consistency = rules.map(|r| consistency(schema, synth, r)).transpose()?;
    let corr: Vec<f64> = tables.iter().filter_map(|t| t.correlation_diff).collect();
    let scores: Vec<f64> = tables.iter().filter_map(|t| t.marginal.as_ref().map(|m| m.score)).collect();
    let tvds: Vec<f64> = tables.iter().filter_map(|t| t.marginal.as_ref().map(|m| m.mean_tvd)).collect();
    Ok(MetricsReport {
        columns,
        tables,
        correlation_diff: mean(&corr),
        marginal_score: mean(&scores),
        mean_tvd: mean(&tvds),
        consistency,
        real_records: real.len(),
        synth_records: synth.len(),
    })
}

impl MetricsReport {
    /// Plain-text rendering for terminals.
    pub fn to_text(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        let mut s = String::new();
        let _ = writeln!(s, "records: real {}, synthetic {}", self.real_records, self.synth_records);
        if !self.columns.is_empty() {
            let _ = writeln!(s, "\n{:<40} {:<12} {:>10} {:>10} {:>10}", "column", "kind", "W1", "W1 norm", "JS dist");
            for c in &self.columns {
                let _ = writeln!(
                    s,
                    "{:<40} {:<12} {:>10} {:>10} {:>10}",
                    format!("{}:{}", c.table, c.column),
                    c.kind,
                    opt(c.wasserstein),
                    opt(c.wasserstein_normalized),
                    opt(c.js_distance)
                );
            }
        }
        let _ = writeln!(s, "\n{:<30} {:>8} {:>8} {:>12} {:>10}", "table", "real", "synth", "corr diff", "marginal");
        for t in &self.tables {
            let _ = writeln!(
                s,
                "{:<30} {:>8} {:>8} {:>12} {:>10}",
                t.table,
                t.real_rows,
                t.synth_rows,
                opt(t.correlation_diff),
                t.marginal.as_ref().map_or("-".into(), |m| format!("{:.1}", m.score))
            );
        }
        let _ = writeln!(s, "\ncorrelation diff: {}", opt(self.correlation_diff));
        let _ = writeln!(
            s,
            "marginal score:   {} (mean TVD {})",
            self.marginal_score.map_or("-".into(), |x| format!("{x:.1}")),
            opt(self.mean_tvd)
        );
        if let Some(c) = &self.consistency {
            let _ = writeln!(s, "\nconsistency over {} entities: {:.3}", c.entities, c.overall);
            for r in &c.rules {
                let _ = writeln!(s, "  {:<40} {:.3}", r.rule, r.fraction);
            }
        }
        s
    }
}
