//! Per-color saturation/value correlation models and the scalar frame
//! utility derived from them.
//!
//! A [`ColorModel`] stores the average pixel-fraction matrix of positive
//! frames (`m_pos`) and of negative frames (`m_neg`). A frame's raw utility
//! is the dot product of `m_pos` with its own pixel-fraction matrix; the
//! normalized utility divides by the largest raw utility seen in training.
//! Composite queries combine normalized per-color utilities with `max` (OR)
//! and `min` (AND).

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::color::{BinGrid, ColorFeatures, FrameFeatures, HueRange, SvMatrix};
use crate::error::{Error, Result};

/// A frame with a binary label for one color or query.
#[derive(Debug, Clone)]
pub struct LabeledFrame {
    pub features: FrameFeatures,
    pub label: bool,
    pub frame_id: u64,
    pub camera_id: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColorModel {
    pub name: String,
    pub hue: HueRange,
    pub grid: BinGrid,
    pub m_pos: SvMatrix,
    /// Kept for diagnostics; scoring only uses `m_pos`.
    pub m_neg: SvMatrix,
    pub norm: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

/// Trains the model for one color from frames labeled for that color.
pub fn train_color_model(dataset: &[LabeledFrame], name: &str, hue: &HueRange, grid: &BinGrid) -> Result<ColorModel> {
    let mut m_pos = SvMatrix::zeros(grid);
    let mut m_neg = SvMatrix::zeros(grid);
    let (mut n_pos, mut n_neg) = (0usize, 0usize);

    for frame in dataset {
        let cf = color_of(&frame.features, name, grid)?;
        let (acc, n) = if frame.label {
            (&mut m_pos, &mut n_pos)
        } else {
            (&mut m_neg, &mut n_neg)
        };
        acc.data_mut()
            .iter_mut()
            .zip(cf.pf.as_slice())
            .for_each(|(a, x)| *a += x);
        *n += 1;
    }

    if n_pos == 0 {
        return Err(Error::Training(format!("no positive examples for color {name}")));
    }
    if n_neg == 0 {
        warn!("no negative examples for color {name}; m_neg left at zero");
    }
    for (m, n) in [(&mut m_pos, n_pos), (&mut m_neg, n_neg)] {
        if n > 0 {
            let d = n as f64;
            m.data_mut().iter_mut().for_each(|x| *x /= d);
        }
    }

    let norm = dataset
        .iter()
        .map(|f| m_pos.dot(&f.features.per_color[name].pf))
        .fold(0.0, f64::max);

    Ok(ColorModel {
        name: name.to_string(),
        hue: hue.clone(),
        grid: *grid,
        m_pos,
        m_neg,
        norm,
        n_pos,
        n_neg,
    })
}

fn color_of<'a>(features: &'a FrameFeatures, name: &str, grid: &BinGrid) -> Result<&'a ColorFeatures> {
    let cf = features
        .color(name)
        .ok_or_else(|| Error::config(format!("frame has no features for color {name}")))?;
    if !cf.pf.matches(grid) {
        return Err(Error::config(format!(
            "features computed on a {:?} grid, model expects {}x{}",
            cf.pf.shape(),
            grid.n_sat_bins(),
            grid.n_val_bins()
        )));
    }
    Ok(cf)
}

impl ColorModel {
    /// `Σ m_pos[i][j] · pf[i][j]` for this model's color.
    pub fn raw_utility(&self, features: &FrameFeatures) -> Result<f64> {
        let cf = color_of(features, &self.name, &self.grid)?;
        Ok(self.m_pos.dot(&cf.pf))
    }

    /// Raw utility scaled by the training maximum and clamped to `[0, 1]`.
    pub fn normalized_utility(&self, features: &FrameFeatures) -> Result<f64> {
        Ok(self.normalize(self.raw_utility(features)?))
    }

    pub fn normalize(&self, raw: f64) -> f64 {
        if self.norm > 0.0 {
            (raw / self.norm).clamp(0.0, 1.0)
        } else {
            0.0
        }
    }
}

/// Boolean combination of colors a query asks for.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum QueryExpr {
    Single(String),
    Or(Box<QueryExpr>, Box<QueryExpr>),
    And(Box<QueryExpr>, Box<QueryExpr>),
}

impl QueryExpr {
    pub fn single(name: impl Into<String>) -> Self {
        QueryExpr::Single(name.into())
    }

    pub fn or(a: QueryExpr, b: QueryExpr) -> Self {
        QueryExpr::Or(Box::new(a), Box::new(b))
    }

    pub fn and(a: QueryExpr, b: QueryExpr) -> Self {
        QueryExpr::And(Box::new(a), Box::new(b))
    }

    /// OR over the given colors, in order.
    pub fn any_of<I, S>(names: I) -> Option<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        names.into_iter().map(QueryExpr::single).reduce(QueryExpr::or)
    }

    /// Colors referenced by the query, deduplicated and sorted.
    pub fn colors(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.collect(&mut out);
        out.sort_unstable();
        out.dedup();
        out
    }

    fn collect<'a>(&'a self, out: &mut Vec<&'a str>) {
        match self {
            QueryExpr::Single(c) => out.push(c),
            QueryExpr::Or(a, b) | QueryExpr::And(a, b) => {
                a.collect(out);
                b.collect(out);
            }
        }
    }

    /// Evaluates the query's boolean semantics against the set of colors
    /// present in a frame.
    pub fn matches(&self, present: &dyn Fn(&str) -> bool) -> bool {
        match self {
            QueryExpr::Single(c) => present(c),
            QueryExpr::Or(a, b) => a.matches(present) || b.matches(present),
            QueryExpr::And(a, b) => a.matches(present) && b.matches(present),
        }
    }
}

impl fmt::Display for QueryExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            QueryExpr::Single(c) => write!(f, "{c}"),
            QueryExpr::Or(a, b) => write!(f, "({a} | {b})"),
            QueryExpr::And(a, b) => write!(f, "({a} & {b})"),
        }
    }
}

/// Grammar: `expr := term ('|' term)*`, `term := atom ('&' atom)*`,
/// `atom := name | '(' expr ')'`. `&` binds tighter than `|`.
impl FromStr for QueryExpr {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let tokens = tokenize(s)?;
        let mut pos = 0;
        let expr = parse_or(&tokens, &mut pos)?;
        if pos != tokens.len() {
            return Err(Error::input(format!("trailing input in query {s:?}")));
        }
        Ok(expr)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Token {
    Name(String),
    Or,
    And,
    Open,
    Close,
}

fn tokenize(s: &str) -> Result<Vec<Token>> {
    let mut out = Vec::new();
    let mut chars = s.chars().peekable();
    while let Some(&c) = chars.peek() {
        match c {
            ' ' | '\t' => {
                chars.next();
            }
            '|' => {
                chars.next();
                out.push(Token::Or);
            }
            '&' => {
                chars.next();
                out.push(Token::And);
            }
            '(' => {
                chars.next();
                out.push(Token::Open);
            }
            ')' => {
                chars.next();
                out.push(Token::Close);
            }
            c if c.is_ascii_alphanumeric() || c == '_' || c == '-' => {
                let mut name = String::new();
                while let Some(&c) = chars.peek() {
                    if c.is_ascii_alphanumeric() || c == '_' || c == '-' {
                        name.push(c);
                        chars.next();
                    } else {
                        break;
                    }
                }
                out.push(Token::Name(name));
            }
            other => return Err(Error::input(format!("unexpected {other:?} in query"))),
        }
    }
    Ok(out)
}

fn parse_or(tokens: &[Token], pos: &mut usize) -> Result<QueryExpr> {
    let mut lhs = parse_and(tokens, pos)?;
    while tokens.get(*pos) == Some(&Token::Or) {
        *pos += 1;
        lhs = QueryExpr::or(lhs, parse_and(tokens, pos)?);
    }
    Ok(lhs)
}

fn parse_and(tokens: &[Token], pos: &mut usize) -> Result<QueryExpr> {
    let mut lhs = parse_atom(tokens, pos)?;
    while tokens.get(*pos) == Some(&Token::And) {
        *pos += 1;
        lhs = QueryExpr::and(lhs, parse_atom(tokens, pos)?);
    }
    Ok(lhs)
}

fn parse_atom(tokens: &[Token], pos: &mut usize) -> Result<QueryExpr> {
    match tokens.get(*pos) {
        Some(Token::Name(n)) => {
            *pos += 1;
            Ok(QueryExpr::Single(n.clone()))
        }
        Some(Token::Open) => {
            *pos += 1;
            let e = parse_or(tokens, pos)?;
            if tokens.get(*pos) != Some(&Token::Close) {
                return Err(Error::input("unbalanced parenthesis in query"));
            }
            *pos += 1;
            Ok(e)
        }
        _ => Err(Error::input("expected color name or '(' in query")),
    }
}

impl Serialize for QueryExpr {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for QueryExpr {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

pub const MODEL_FORMAT: &str = "vidshed-utility-model";
pub const MODEL_VERSION: u32 = 1;

/// Trained per-color models bundled with the query they serve.
#[derive(Debug, Clone, PartialEq)]
pub struct UtilityModel {
    grid: BinGrid,
    colors: BTreeMap<String, ColorModel>,
    query: QueryExpr,
}

#[derive(Serialize, Deserialize)]
struct ModelBody {
    format: String,
    version: u32,
    grid: BinGrid,
    query: QueryExpr,
    colors: BTreeMap<String, ColorModel>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    #[serde(flatten)]
    body: ModelBody,
    content_hash: String,
}

impl UtilityModel {
    pub fn new(colors: BTreeMap<String, ColorModel>, query: QueryExpr) -> Result<Self> {
        let grid = colors
            .values()
            .next()
            .map(|m| m.grid)
            .ok_or_else(|| Error::config("utility model has no colors"))?;
        for (name, m) in &colors {
            if m.grid != grid {
                return Err(Error::config(format!("color {name} trained on a different grid")));
            }
            if &m.name != name {
                return Err(Error::config(format!("color model keyed {name} is named {}", m.name)));
            }
        }
        for c in query.colors() {
            if !colors.contains_key(c) {
                return Err(Error::config(format!("query references untrained color {c}")));
            }
        }
        Ok(Self { grid, colors, query })
    }

    pub fn grid(&self) -> &BinGrid {
        &self.grid
    }

    pub fn query(&self) -> &QueryExpr {
        &self.query
    }

    pub fn colors(&self) -> &BTreeMap<String, ColorModel> {
        &self.colors
    }

    pub fn color(&self, name: &str) -> Option<&ColorModel> {
        self.colors.get(name)
    }

    /// Utility in `[0, 1]` of a frame for this model's query.
    pub fn query_utility(&self, features: &FrameFeatures) -> Result<f64> {
        self.eval(&self.query, features)
    }

    /// Evaluates an arbitrary query over this model's colors.
    pub fn eval(&self, query: &QueryExpr, features: &FrameFeatures) -> Result<f64> {
        match query {
            QueryExpr::Single(c) => self
                .colors
                .get(c)
                .ok_or_else(|| Error::config(format!("unknown color {c} in query")))?
                .normalized_utility(features),
            QueryExpr::Or(a, b) => Ok(self.eval(a, features)?.max(self.eval(b, features)?)),
            QueryExpr::And(a, b) => Ok(self.eval(a, features)?.min(self.eval(b, features)?)),
        }
    }

    fn body(&self) -> ModelBody {
        ModelBody {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            grid: self.grid,
            query: self.query.clone(),
            colors: self.colors.clone(),
        }
    }

    /// SHA-256 of the compact JSON body, hex encoded.
    pub fn content_hash(&self) -> String {
        let body = serde_json::to_vec(&self.body()).expect("model serializes");
        hex_digest(&body)
    }

    pub fn to_json(&self) -> String {
        let file = ModelFile {
            content_hash: self.content_hash(),
            body: self.body(),
        };
        let mut s = serde_json::to_string_pretty(&file).expect("model serializes");
        s.push('\n');
        s
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(s)?;
        if file.body.format != MODEL_FORMAT {
            return Err(Error::Format(format!("not a model file: {}", file.body.format)));
        }
        if file.body.version != MODEL_VERSION {
            return Err(Error::Format(format!(
                "unsupported model version {}",
                file.body.version
            )));
        }
        let model = UtilityModel::new(file.body.colors, file.body.query)?;
        if model.grid != file.body.grid {
            return Err(Error::Format("model grid disagrees with its colors".into()));
        }
        let hash = model.content_hash();
        if hash != file.content_hash {
            return Err(Error::Format(format!(
                "content hash mismatch: file says {}, computed {hash}",
                file.content_hash
            )));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
