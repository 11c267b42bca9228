//! A scripted three-user co-design session over the mock backends.
//!
//! Used for golden-log tests and as a runnable walkthrough of the API.

use codesign_core::catalog::CurateOp;
use codesign_core::design_space::{AttributeId, DesignSpace, DIMENSION_COUNT};
use codesign_core::elicitation::{BrushRegion, Gender, InteractionKind, Polarity, UserProfile};
use codesign_core::palette::{Classification, NodeRef, PuzzleSelection};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::GatewayError;
use crate::service::{
    CreateProject, FramingRequest, Gateway, GwResult, InformedRequest, InteractionRequest, VoteRequest, WriteOptions,
};
use crate::state::derive_seed;

pub const DEMO_LIBRARY_SIZE: usize = 40;

/// A deterministic stand-in user: one favored attribute per dimension.
#[derive(Debug, Clone)]
pub struct ScriptedUser {
    pub profile: UserProfile,
    pub favored: [usize; DIMENSION_COUNT],
}

impl ScriptedUser {
    pub fn new(profile: UserProfile, seed: u64) -> Self {
        let space = DesignSpace::canonical();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "script-user", &profile.user_id));
        Self { profile, favored: std::array::from_fn(|d| rng.gen_range(0..space.attribute_count(d))) }
    }

    fn matches(&self, indices: &[usize; DIMENSION_COUNT]) -> usize {
        indices.iter().zip(&self.favored).filter(|(a, b)| a == b).count()
    }

    pub fn likes(&self, indices: &[usize; DIMENSION_COUNT]) -> bool {
        self.matches(indices) >= 2
    }
}

pub fn demo_users(seed: u64) -> Vec<ScriptedUser> {
    let profiles = [
        UserProfile { user_id: "ana".into(), gender: Gender::F, height_cm: 164.0, weight_kg: 55.0 },
        UserProfile { user_id: "ben".into(), gender: Gender::M, height_cm: 181.0, weight_kg: 77.0 },
        UserProfile { user_id: "cy".into(), gender: Gender::Unspecified, height_cm: 170.0, weight_kg: 65.0 },
    ];
    profiles.into_iter().map(|p| ScriptedUser::new(p, seed)).collect()
}

/// Brush rectangle covering the first zone of dimension `d`.
pub fn zone_region(d: usize, w: u32, h: u32) -> GwResult<BrushRegion> {
    let r = DesignSpace::canonical().zone(d).rects[0];
    let px = |v: f64, size: u32| ((v * size as f64).round() as u32).min(size);
    Ok(BrushRegion::new(px(r[0], w), px(r[1], h), px(r[2], w).max(px(r[0], w) + 1), px(r[3], h).max(px(r[1], h) + 1), w, h)?)
}

/// Runs the full workflow and returns the project id.
pub fn run_demo(gw: &Gateway, seed: u64) -> GwResult<String> {
    let project = gw.create_project(CreateProject { name: "demo".into(), seed: Some(seed), max_rounds: None, strategy: None })?;
    let pid = project.project_id;
    let none = WriteOptions::default();

    gw.apply_framing(
        &pid,
        &FramingRequest {
            garment_type: "Shirt".into(),
            scene: "cold winter commute".into(),
            principle: "comfortable and minimal".into(),
            strictness: 0.7,
        },
        &none,
    )?;
    let lib = gw.generate_library(&pid, DEMO_LIBRARY_SIZE, &none)?;
    gw.curate(
        &pid,
        vec![
            CurateOp::Remove { item_id: lib.items[3].item_id.clone() },
            CurateOp::Reorder { item_id: lib.items[10].item_id.clone(), new_rank: 0 },
        ],
        &none,
    )?;

    let users = demo_users(seed);
    let mut sessions = Vec::new();
    for u in &users {
        sessions.push(gw.open_session(&pid, u.profile.clone(), &none)?.session_id);
    }

    // Round-robin: each user finishes one round before the next user acts.
    loop {
        let mut progressed = false;
        for (u, sid) in users.iter().zip(&sessions) {
            let view = gw.round(sid)?;
            if view.finished || view.pending_items.is_empty() {
                continue;
            }
            progressed = true;
            for (k, item_id) in view.pending_items.iter().enumerate() {
                let item = view.items.iter().find(|i| &i.item_id == item_id).expect("round item");
                let idx = item.design_vector.indices();
                if k == 0 {
                    let d = (0..DIMENSION_COUNT).find(|&d| idx[d] == u.favored[d]).unwrap_or(2);
                    let region = zone_region(d, item.image_width, item.image_height)?;
                    let hyp = gw.hypothesis(sid, item_id, &region)?;
                    let polarity = if idx[d] == u.favored[d] { Polarity::Like } else { Polarity::Dislike };
                    gw.interact(
                        sid,
                        InteractionRequest {
                            item_id: item_id.clone(),
                            kind: InteractionKind::Brush,
                            polarity,
                            region: Some(region),
                            confirmed_dimensions: [hyp.hypothesis[0].dimension].into(),
                            comment: (view.rounds_issued == 1).then(|| format!("{} noticed this", u.profile.user_id)),
                        },
                        &none,
                    )?;
                }
                let polarity = if u.likes(idx) { Polarity::Like } else { Polarity::Dislike };
                gw.vote(sid, VoteRequest { item_id: item_id.clone(), polarity, comment: None }, &none)?;
            }
        }
        if !progressed {
            break;
        }
    }

    // Designer: prune and restore an edge, then export a manifest for an
    // attribute that has at least one qualifying garment.
    let snap = gw.snapshot(&pid)?;
    let mut target: Option<(AttributeId, String)> = None;
    for r in snap.records.iter().filter(|r| r.kind == InteractionKind::Brush && r.polarity == Polarity::Like) {
        let v = snap.design_vector(&r.item_id).expect("record item");
        for &d in &r.confirmed_dimensions {
            let attr = v.attribute(d);
            let tree = snap.tree(attr);
            if tree.node(&r.item_id).is_some_and(|n| n.classification == Classification::Liked) {
                target = Some((attr, r.item_id.clone()));
                break;
            }
        }
        if target.is_some() {
            break;
        }
    }
    let (attr, item_id) = target.ok_or_else(|| GatewayError::Invalid("script found no exportable attribute".into()))?;
    let tree = gw.tree(&pid, attr)?;
    let other = tree.tree.garment_nodes.iter().find(|n| n.item_id != item_id).map(|n| n.item_id.clone());
    if let Some(other) = &other {
        gw.prune(&pid, attr, NodeRef::Garment(other.clone()), true, &none)?;
    }
    gw.export_manifest(&pid, attr, &none)?;
    if let Some(other) = other {
        gw.prune(&pid, attr, NodeRef::Garment(other), false, &none)?;
    }

    // Informed generation from the top consensus attribute of each dimension.
    let palette = gw.palette(&pid)?;
    let mut selection = PuzzleSelection::default();
    for col in &palette.columns {
        selection.place(col.entries[0].attribute)?;
    }
    let informed = gw.informed(&pid, &InformedRequest { selection, n: 2, adapters: vec![attr.to_string()] }, &none)?;
    gw.save_item(&pid, &informed.items[0].item.item_id, &none)?;
    Ok(pid)
}
