use serde::Serialize;
use sketchstack::geometry::Scene;
use std::io::Write;
use std::path::Path;

/// One goal pose; orientation is always the identity.
#[derive(Debug, PartialEq, Serialize)]
pub struct GoalPose {
    pub index: usize,
    #[serde(rename = "type")]
    pub type_name: String,
    pub centroid: [f64; 3],
}

/// Blocks ordered by base height, then x, then y, then id, so lower
/// blocks get smaller indices.
pub fn goal_poses(scene: &Scene) -> Vec<GoalPose> {
    let mut blocks: Vec<_> = scene.blocks.iter().filter_map(|b| Some((b, scene.box_of(b.id)?))).collect();
    blocks.sort_by(|(a, ba), (b, bb)| {
        ba.min[2]
            .total_cmp(&bb.min[2])
            .then(a.centroid[0].total_cmp(&b.centroid[0]))
            .then(a.centroid[1].total_cmp(&b.centroid[1]))
            .then(a.id.cmp(&b.id))
    });
    blocks
        .into_iter()
        .enumerate()
        .map(|(index, (b, _))| GoalPose {
            index,
            type_name: scene.library.get(b.type_id).map(|t| t.name.clone()).unwrap_or_default(),
            centroid: b.centroid,
        })
        .collect()
}

pub fn export_goal_poses(scene: &Scene, path: &Path) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for p in goal_poses(scene) {
        writeln!(out, "{}", serde_json::to_string(&p).expect("serializable"))?;
    }
    out.flush()
}
