//! High-definition map model: lanes with centerlines and markings, road
//! edges, and the lane connectivity graph. Serialized as a standalone JSON
//! document so maps and logs can evolve independently.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Vec2;

#[derive(Debug, Error)]
pub enum MapError {
    #[error("adjacency references unknown lane id {0:?}")]
    UnknownLane(String),
    #[error("lane {0:?}: centerline needs at least 2 points")]
    ShortCenterline(String),
    #[error("lane {0:?}: centerline has a zero-length segment at index {1}")]
    ZeroLengthSegment(String, usize),
    #[error("map document: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdjacencyRelation {
    Successor,
    LeftNeighbor,
    RightNeighbor,
}

/// Directed connectivity edge between two lanes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adjacency {
    pub from: String,
    pub to: String,
    pub relation: AdjacencyRelation,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Lane {
    pub id: String,
    /// Centerline polyline in meters, ordered in the direction of travel.
    pub centerline: Vec<Vec2>,
    /// Left marking polyline; may be empty when unknown.
    #[serde(default)]
    pub left: Vec<Vec2>,
    /// Right marking polyline; may be empty when unknown.
    #[serde(default)]
    pub right: Vec<Vec2>,
    pub width: f64,
}

impl Lane {
    pub fn length(&self) -> f64 {
        crate::geometry::polyline_length(&self.centerline)
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct HDMap {
    pub lanes: Vec<Lane>,
    #[serde(default)]
    pub road_edges: Vec<Vec<Vec2>>,
    #[serde(default)]
    pub adjacency: Vec<Adjacency>,
}

impl HDMap {
    pub fn validate(&self) -> Result<(), MapError> {
        for lane in &self.lanes {
            if lane.centerline.len() < 2 {
                return Err(MapError::ShortCenterline(lane.id.clone()));
            }
            for (i, w) in lane.centerline.windows(2).enumerate() {
                if w[0].dist(w[1]) <= 0.0 {
                    return Err(MapError::ZeroLengthSegment(lane.id.clone(), i));
                }
            }
        }
        for adj in &self.adjacency {
            for id in [&adj.from, &adj.to] {
                if self.lane(id).is_none() {
                    return Err(MapError::UnknownLane(id.clone()));
                }
            }
        }
        Ok(())
    }

    pub fn lane(&self, id: &str) -> Option<&Lane> {
        self.lanes.iter().find(|l| l.id == id)
    }

    fn related(&self, id: &str, rel: AdjacencyRelation) -> Vec<&str> {
        self.adjacency
            .iter()
            .filter(|a| a.from == id && a.relation == rel)
            .map(|a| a.to.as_str())
            .collect()
    }

    pub fn successors(&self, id: &str) -> Vec<&str> {
        self.related(id, AdjacencyRelation::Successor)
    }

    pub fn left_neighbor(&self, id: &str) -> Option<&str> {
        self.related(id, AdjacencyRelation::LeftNeighbor).first().copied()
    }

    pub fn right_neighbor(&self, id: &str) -> Option<&str> {
        self.related(id, AdjacencyRelation::RightNeighbor).first().copied()
    }

    /// All outgoing connectivity edges from a lane, in document order.
    pub fn edges_from<'a>(&'a self, id: &'a str) -> impl Iterator<Item = &'a Adjacency> + 'a {
        self.adjacency.iter().filter(move |a| a.from == id)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("map serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self, MapError> {
        let map: HDMap =
            serde_json::from_str(text).map_err(|e| MapError::Format(e.to_string()))?;
        map.validate()?;
        Ok(map)
    }

    pub fn write_file(&self, path: &std::path::Path) -> Result<(), MapError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn read_file(path: &std::path::Path) -> Result<Self, MapError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }
}
