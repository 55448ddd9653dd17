//! Environment description from image-text similarity scores.
//!
//! An external encoder service scores a camera frame against a fixed label vocabulary.
//! Weather, lighting and road type always take their best label; road condition and
//! obstacles are reported only when their scores exceed fixed thresholds.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::cassette::Cassette;
use crate::transport::{HttpJson, TransportError};

/// Road condition is reported only above this score.
pub const ROAD_CONDITION_THRESHOLD: f64 = 0.3;
/// Each obstacle is reported only above this score.
pub const OBSTACLE_THRESHOLD: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Weather,
    Lighting,
    RoadType,
    RoadCondition,
    Obstacle,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::Weather,
        Category::Lighting,
        Category::RoadType,
        Category::RoadCondition,
        Category::Obstacle,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Category::Weather => "weather",
            Category::Lighting => "lighting",
            Category::RoadType => "road_type",
            Category::RoadCondition => "road_condition",
            Category::Obstacle => "obstacle",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelScore {
    pub category: Category,
    pub label: String,
    pub score: f64,
}

impl LabelScore {
    pub fn new(category: Category, label: impl Into<String>, score: f64) -> Self {
        Self {
            category,
            label: label.into(),
            score,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvDescription {
    pub weather: String,
    pub lighting: String,
    pub road_type: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub road_condition: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub obstacles: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EnvError {
    #[error("no scores for mandatory category `{}`", .0.name())]
    MissingCategory(Category),
    #[error("score {score} for `{label}` outside [0, 1]")]
    InvalidScore { label: String, score: f64 },
    #[error("encoder unavailable and no fixture: {0}")]
    NoSource(TransportError),
}

/// Closed label vocabulary sent to the encoder service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabelVocabulary {
    pub weather: Vec<String>,
    pub lighting: Vec<String>,
    pub road_type: Vec<String>,
    pub road_condition: Vec<String>,
    pub obstacle: Vec<String>,
}

fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

impl Default for LabelVocabulary {
    fn default() -> Self {
        Self {
            weather: strings(&["clear", "rainy", "foggy", "snowy"]),
            lighting: strings(&["day", "night", "dusk"]),
            road_type: strings(&[
                "urban street",
                "highway",
                "intersection approach",
                "parking lot",
            ]),
            road_condition: strings(&["wet", "dry", "construction"]),
            obstacle: strings(&["parked vehicles", "pedestrian", "cone", "barrier"]),
        }
    }
}

impl LabelVocabulary {
    pub fn as_map(&self) -> BTreeMap<Category, Vec<String>> {
        BTreeMap::from([
            (Category::Weather, self.weather.clone()),
            (Category::Lighting, self.lighting.clone()),
            (Category::RoadType, self.road_type.clone()),
            (Category::RoadCondition, self.road_condition.clone()),
            (Category::Obstacle, self.obstacle.clone()),
        ])
    }
}

/// Top label of a category; equal scores resolve to the lexicographically smallest label.
fn top<'a>(scores: &'a [LabelScore], cat: Category) -> Option<&'a LabelScore> {
    scores
        .iter()
        .filter(|s| s.category == cat)
        .min_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then_with(|| a.label.cmp(&b.label))
        })
}

pub fn assemble_env(scores: &[LabelScore]) -> Result<EnvDescription, EnvError> {
    if let Some(bad) = scores
        .iter()
        .find(|s| !(0.0..=1.0).contains(&s.score))
    {
        return Err(EnvError::InvalidScore {
            label: bad.label.clone(),
            score: bad.score,
        });
    }
    let mandatory = |cat| {
        top(scores, cat)
            .map(|s| s.label.clone())
            .ok_or(EnvError::MissingCategory(cat))
    };
    let weather = mandatory(Category::Weather)?;
    let lighting = mandatory(Category::Lighting)?;
    let road_type = mandatory(Category::RoadType)?;
    let road_condition = top(scores, Category::RoadCondition)
        .filter(|s| s.score > ROAD_CONDITION_THRESHOLD)
        .map(|s| s.label.clone());
    let mut obstacles: Vec<String> = scores
        .iter()
        .filter(|s| s.category == Category::Obstacle && s.score > OBSTACLE_THRESHOLD)
        .map(|s| s.label.clone())
        .collect();
    obstacles.sort();
    obstacles.dedup();
    Ok(EnvDescription {
        weather,
        lighting,
        road_type,
        road_condition,
        obstacles,
    })
}

impl EnvDescription {
    /// Fixture tags as scores of 1.0.
    pub fn to_scores(&self) -> Vec<LabelScore> {
        let mut out = vec![
            LabelScore::new(Category::Weather, &self.weather, 1.0),
            LabelScore::new(Category::Lighting, &self.lighting, 1.0),
            LabelScore::new(Category::RoadType, &self.road_type, 1.0),
        ];
        if let Some(c) = &self.road_condition {
            out.push(LabelScore::new(Category::RoadCondition, c, 1.0));
        }
        out.extend(
            self.obstacles
                .iter()
                .map(|o| LabelScore::new(Category::Obstacle, o, 1.0)),
        );
        out
    }
}

/// One line per present category.
pub fn render_env_text(env: &EnvDescription) -> String {
    let mut out = format!(
        "Weather: {}\nLighting: {}\nRoad type: {}\n",
        env.weather, env.lighting, env.road_type
    );
    if let Some(c) = &env.road_condition {
        out.push_str(&format!("Road condition: {c}\n"));
    }
    if !env.obstacles.is_empty() {
        out.push_str(&format!("Obstacles: {}\n", env.obstacles.join(", ")));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_id: Option<String>,
    /// Base64-encoded image, for services that do not resolve ids.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    pub labels: BTreeMap<Category, Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderResponse {
    pub scores: Vec<LabelScore>,
}

pub trait EncoderClient: Send + Sync {
    fn score(&self, request: &EncoderRequest) -> Result<EncoderResponse, TransportError>;
}

/// Encoder service over HTTP.
#[derive(Debug, Clone)]
pub struct HttpEncoderClient {
    http: HttpJson,
}

impl HttpEncoderClient {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Self {
        Self {
            http: HttpJson::new(endpoint, timeout),
        }
    }
}

impl EncoderClient for HttpEncoderClient {
    fn score(&self, request: &EncoderRequest) -> Result<EncoderResponse, TransportError> {
        self.http.post(request).map(|(r, _)| r)
    }
}

/// Replays encoder responses from a cassette.
#[derive(Debug, Clone)]
pub struct CassetteEncoder {
    pub cassette: Cassette,
}

impl EncoderClient for CassetteEncoder {
    fn score(&self, request: &EncoderRequest) -> Result<EncoderResponse, TransportError> {
        let entry = self.cassette.lookup(request)?;
        serde_json::from_value(entry.response.clone())
            .map_err(|e| TransportError::Decode(e.to_string()))
    }
}

/// Wraps a live client and records every successful exchange.
pub struct RecordingEncoder<C> {
    pub inner: C,
    pub cassette: Arc<Mutex<Cassette>>,
}

impl<C: EncoderClient> RecordingEncoder<C> {
    pub fn new(inner: C, cassette: Arc<Mutex<Cassette>>) -> Self {
        Self { inner, cassette }
    }
}

impl<C: EncoderClient> EncoderClient for RecordingEncoder<C> {
    fn score(&self, request: &EncoderRequest) -> Result<EncoderResponse, TransportError> {
        let resp = self.inner.score(request)?;
        let value = serde_json::to_value(&resp).expect("encoder responses serialize");
        self.cassette.lock().unwrap().insert(request, value, 0.0);
        Ok(resp)
    }
}

/// Scores for one frame: from the service when available (one retry), otherwise from the
/// scenario's fixture tags at score 1.0.
pub fn fetch_scores(
    image_ref: Option<&str>,
    client: Option<&dyn EncoderClient>,
    vocabulary: &LabelVocabulary,
    fixture: Option<&EnvDescription>,
) -> Result<Vec<LabelScore>, EnvError> {
    let mut last_err = TransportError::Unavailable("no encoder client configured".into());
    if let (Some(client), Some(id)) = (client, image_ref) {
        let request = EncoderRequest {
            image_id: Some(id.to_string()),
            image: None,
            labels: vocabulary.as_map(),
        };
        for attempt in 0..2 {
            match client.score(&request) {
                Ok(resp) => return Ok(resp.scores),
                Err(err) => {
                    log::warn!("encoder request for {id} failed (attempt {}): {err}", attempt + 1);
                    // a cassette miss will not resolve itself
                    let retryable = !matches!(err, TransportError::CassetteMiss(_));
                    last_err = err;
                    if !retryable {
                        break;
                    }
                }
            }
        }
    }
    match fixture {
        Some(env) => Ok(env.to_scores()),
        None => Err(EnvError::NoSource(last_err)),
    }
}
