//! Scenario bucketing and Acc@0.25 / Acc@0.5 tables.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou_3d, Box3D};
use crate::scalar::Scalar;

pub const THRESHOLDS: [f64; 2] = [0.25, 0.5];

/// Rendered in place of a percentage for an empty bucket.
pub const EMPTY_CELL: &str = "—";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Occlusion {
    None,
    Partial,
    Severe,
}

impl Occlusion {
    /// KITTI occlusion levels: 0 fully visible, 1 partly occluded, 2 and 3
    /// largely occluded or unknown.
    pub fn from_kitti_level(level: i64) -> Result<Self> {
        match level {
            0 => Ok(Self::None),
            1 => Ok(Self::Partial),
            l if l >= 2 => Ok(Self::Severe),
            l => Err(Error::Precondition(format!("negative occlusion level {l}"))),
        }
    }
}

/// Accepts either a KITTI integer level or one of the three names.
impl<'de> Deserialize<'de> for Occlusion {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Level(i64),
            Name(String),
        }
        match Raw::deserialize(d)? {
            Raw::Level(l) => Occlusion::from_kitti_level(l).map_err(serde::de::Error::custom),
            Raw::Name(s) => match s.as_str() {
                "none" => Ok(Occlusion::None),
                "partial" => Ok(Occlusion::Partial),
                "severe" => Ok(Occlusion::Severe),
                other => Err(serde::de::Error::custom(format!(
                    "unknown occlusion {other:?}"
                ))),
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Uniqueness {
    Unique,
    Multiple,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    Near,
    Medium,
    Far,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    Easy,
    Moderate,
    Hard,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ScenarioLabel {
    pub uniqueness: Uniqueness,
    pub distance: Distance,
    pub difficulty: Difficulty,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar + Serialize + serde::de::DeserializeOwned")]
pub struct EvalSample<T> {
    pub sample_id: String,
    pub image_id: String,
    pub category: String,
    /// Distinguishes objects within an image; when absent the ground-truth
    /// box identifies the object.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object_id: Option<String>,
    pub gt: Box3D<T>,
    pub pred: Box3D<T>,
    pub depth_gt: T,
    pub occlusion: Occlusion,
    pub truncation: T,
}

/// `[0, 15)` near, `[15, 35)` medium, `[35, ∞)` far.
pub fn bucket_distance<T: Scalar>(depth: T) -> Result<Distance> {
    if !(depth >= T::zero()) {
        return Err(Error::Precondition(format!(
            "depth must be non-negative, got {depth}"
        )));
    }
    Ok(if depth < T::lit(15.0) {
        Distance::Near
    } else if depth < T::lit(35.0) {
        Distance::Medium
    } else {
        Distance::Far
    })
}

pub fn bucket_difficulty<T: Scalar>(occlusion: Occlusion, truncation: T) -> Difficulty {
    if occlusion == Occlusion::Severe || truncation > T::lit(0.3) {
        Difficulty::Hard
    } else if occlusion == Occlusion::None && truncation < T::lit(0.15) {
        Difficulty::Easy
    } else {
        Difficulty::Moderate
    }
}

fn object_key<T: Scalar>(s: &EvalSample<T>) -> String {
    match &s.object_id {
        Some(id) => format!("id:{id}"),
        None => {
            let bits: Vec<String> =
                s.gt.center
                    .iter()
                    .chain(&s.gt.dims)
                    .chain(std::iter::once(&s.gt.yaw))
                    .map(|v| format!("{:016x}", v.to_f64_lossy().to_bits()))
                    .collect();
            format!("box:{}", bits.join(""))
        }
    }
}

/// Distinct objects per `(image, category)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImageIndex {
    objects: BTreeMap<(String, String), BTreeSet<String>>,
}

impl ImageIndex {
    pub fn from_samples<T: Scalar>(samples: &[EvalSample<T>]) -> Self {
        let mut idx = Self::default();
        for s in samples {
            idx.insert(&s.image_id, &s.category, object_key(s));
        }
        idx
    }

    pub fn insert(&mut self, image_id: &str, category: &str, object: String) {
        self.objects
            .entry((image_id.to_owned(), category.to_owned()))
            .or_default()
            .insert(object);
    }

    pub fn count(&self, image_id: &str, category: &str) -> usize {
        self.objects
            .get(&(image_id.to_owned(), category.to_owned()))
            .map_or(0, BTreeSet::len)
    }

    pub fn contains_image(&self, image_id: &str) -> bool {
        self.objects.keys().any(|(img, _)| img == image_id)
    }
}

pub fn bucket_uniqueness<T: Scalar>(
    sample: &EvalSample<T>,
    index: &ImageIndex,
) -> Result<Uniqueness> {
    if !index.contains_image(&sample.image_id) {
        return Err(Error::Precondition(format!(
            "image {} of sample {} is missing from the index",
            sample.image_id, sample.sample_id
        )));
    }
    Ok(match index.count(&sample.image_id, &sample.category) {
        1 => Uniqueness::Unique,
        _ => Uniqueness::Multiple,
    })
}

pub fn label<T: Scalar>(sample: &EvalSample<T>, index: &ImageIndex) -> Result<ScenarioLabel> {
    if !(sample.truncation >= T::zero() && sample.truncation <= T::one()) {
        return Err(Error::Precondition(format!(
            "sample {}: truncation {} outside [0, 1]",
            sample.sample_id, sample.truncation
        )));
    }
    Ok(ScenarioLabel {
        uniqueness: bucket_uniqueness(sample, index)?,
        distance: bucket_distance(sample.depth_gt)?,
        difficulty: bucket_difficulty(sample.occlusion, sample.truncation),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bucket {
    Unique,
    Multiple,
    Near,
    Medium,
    Far,
    Easy,
    Moderate,
    Hard,
    Overall,
}

impl Bucket {
    pub const ALL: [Bucket; 9] = [
        Bucket::Unique,
        Bucket::Multiple,
        Bucket::Near,
        Bucket::Medium,
        Bucket::Far,
        Bucket::Easy,
        Bucket::Moderate,
        Bucket::Hard,
        Bucket::Overall,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Bucket::Unique => "Unique",
            Bucket::Multiple => "Multiple",
            Bucket::Near => "Near",
            Bucket::Medium => "Medium",
            Bucket::Far => "Far",
            Bucket::Easy => "Easy",
            Bucket::Moderate => "Moderate",
            Bucket::Hard => "Hard",
            Bucket::Overall => "Overall",
        }
    }

    fn members(l: &ScenarioLabel) -> [Bucket; 4] {
        [
            match l.uniqueness {
                Uniqueness::Unique => Bucket::Unique,
                Uniqueness::Multiple => Bucket::Multiple,
            },
            match l.distance {
                Distance::Near => Bucket::Near,
                Distance::Medium => Bucket::Medium,
                Distance::Far => Bucket::Far,
            },
            match l.difficulty {
                Difficulty::Easy => Bucket::Easy,
                Difficulty::Moderate => Bucket::Moderate,
                Difficulty::Hard => Bucket::Hard,
            },
            Bucket::Overall,
        ]
    }
}

/// Integer hit counts for one bucket.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BucketStats {
    pub count: usize,
    pub hits_025: usize,
    pub hits_050: usize,
}

impl BucketStats {
    /// Percent correct at each threshold, `None` for an empty bucket.
    pub fn accuracy(&self) -> Option<(f64, f64)> {
        (self.count > 0).then(|| {
            let n = self.count as f64;
            (
                100.0 * self.hits_025 as f64 / n,
                100.0 * self.hits_050 as f64 / n,
            )
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyTable {
    pub buckets: BTreeMap<Bucket, BucketStats>,
}

impl AccuracyTable {
    pub fn get(&self, b: Bucket) -> BucketStats {
        self.buckets.get(&b).copied().unwrap_or_default()
    }

    pub fn total(&self) -> usize {
        self.get(Bucket::Overall).count
    }
}

/// Per-sample outcome, kept for reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub sample_id: String,
    pub iou: f64,
    pub label: ScenarioLabel,
}

pub fn score_samples<T: Scalar>(
    samples: &[EvalSample<T>],
    index: &ImageIndex,
) -> Result<Vec<ScoredSample>> {
    let mut scored: Vec<ScoredSample> = samples
        .par_iter()
        .map(|s| {
            Ok(ScoredSample {
                sample_id: s.sample_id.clone(),
                iou: iou_3d(&s.gt, &s.pred).to_f64_lossy(),
                label: label(s, index)?,
            })
        })
        .collect::<Result<_>>()?;
    scored.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    Ok(scored)
}

/// Tallies scored samples; an IoU equal to the threshold counts as a hit.
pub fn tabulate(scored: &[ScoredSample]) -> AccuracyTable {
    let mut buckets: BTreeMap<Bucket, BucketStats> = Bucket::ALL
        .iter()
        .map(|&b| (b, BucketStats::default()))
        .collect();
    for s in scored {
        for b in Bucket::members(&s.label) {
            let st = buckets.get_mut(&b).expect("every bucket is present");
            st.count += 1;
            st.hits_025 += usize::from(s.iou >= THRESHOLDS[0]);
            st.hits_050 += usize::from(s.iou >= THRESHOLDS[1]);
        }
    }
    AccuracyTable { buckets }
}

/// Scores every sample against its own ground truth and fills all buckets.
///
/// Uniqueness is resolved against the objects present in `samples`.
pub fn evaluate<T: Scalar>(samples: &[EvalSample<T>]) -> Result<AccuracyTable> {
    if samples.is_empty() {
        return Err(Error::Precondition(
            "evaluation needs at least one sample".into(),
        ));
    }
    let index = ImageIndex::from_samples(samples);
    Ok(tabulate(&score_samples(samples, &index)?))
}

fn cells(st: BucketStats) -> [String; 2] {
    match st.accuracy() {
        Some((a, b)) => [format!("{a:.2}"), format!("{b:.2}")],
        None => [EMPTY_CELL.to_owned(), EMPTY_CELL.to_owned()],
    }
}

fn render_grid(groups: &[String], values: &[[String; 2]]) -> String {
    let mut header2 = Vec::new();
    for _ in groups {
        header2.push("Acc@0.25".to_owned());
        header2.push("Acc@0.5".to_owned());
    }
    let flat: Vec<String> = values.iter().flat_map(|v| v.iter().cloned()).collect();
    let width = header2
        .iter()
        .chain(&flat)
        .map(|s| s.chars().count())
        .max()
        .unwrap_or(0);
    let group_w = 2 * width + 3;
    let pad = |s: &str, w: usize| format!("{s:>w$}", w = w);

    let mut out = String::new();
    let line1: Vec<String> = groups.iter().map(|g| format!("{g:^group_w$}")).collect();
    let line2: Vec<String> = header2.iter().map(|h| pad(h, width)).collect();
    let line3: Vec<String> = flat.iter().map(|v| pad(v, width)).collect();
    writeln!(out, "{}", line1.join(" | ").trim_end()).unwrap();
    writeln!(out, "{}", join_pairs(&line2)).unwrap();
    writeln!(out, "{}", join_pairs(&line3)).unwrap();
    out
}

fn join_pairs(cols: &[String]) -> String {
    cols.chunks(2)
        .map(|p| p.join("   "))
        .collect::<Vec<_>>()
        .join(" | ")
}

/// Unique / Multiple / Overall, each at both thresholds.
pub fn render_uniqueness_table(t: &AccuracyTable) -> String {
    let groups = [Bucket::Unique, Bucket::Multiple, Bucket::Overall];
    render_grid(
        &groups.map(|b| b.name().to_owned()),
        &groups.map(|b| cells(t.get(b))),
    )
}

/// Near/Easy, Medium/Moderate, Far/Hard with `distance/difficulty` cells.
pub fn render_scenario_table(t: &AccuracyTable) -> String {
    let pairs = [
        (Bucket::Near, Bucket::Easy),
        (Bucket::Medium, Bucket::Moderate),
        (Bucket::Far, Bucket::Hard),
    ];
    let groups = pairs.map(|(a, b)| format!("{}/{}", a.name(), b.name()));
    let values = pairs.map(|(a, b)| {
        let (ca, cb) = (cells(t.get(a)), cells(t.get(b)));
        [
            format!("{}/{}", ca[0], cb[0]),
            format!("{}/{}", ca[1], cb[1]),
        ]
    });
    render_grid(&groups, &values)
}

/// Both tables with counts, as printed by the CLI.
pub fn render_text(t: &AccuracyTable) -> String {
    let mut out = render_uniqueness_table(t);
    out.push('\n');
    out.push_str(&render_scenario_table(t));
    out.push('\n');
    let counts: Vec<String> = Bucket::ALL
        .iter()
        .map(|&b| format!("{}={}", b.name(), t.get(b).count))
        .collect();
    writeln!(out, "counts: {}", counts.join(" ")).unwrap();
    out
}

/// Machine-readable rendering with the same rounding as the text tables.
pub fn render_json(t: &AccuracyTable) -> serde_json::Value {
    let mut rows = serde_json::Map::new();
    for b in Bucket::ALL {
        let st = t.get(b);
        let acc = |x: Option<f64>| match x {
            Some(v) => serde_json::Value::String(format!("{v:.2}")),
            None => serde_json::Value::Null,
        };
        let a = st.accuracy();
        rows.insert(
            b.name().to_lowercase(),
            serde_json::json!({
                "count": st.count,
                "hits_025": st.hits_025,
                "hits_050": st.hits_050,
                "acc_025": acc(a.map(|x| x.0)),
                "acc_050": acc(a.map(|x| x.1)),
            }),
        );
    }
    serde_json::Value::Object(rows)
}
