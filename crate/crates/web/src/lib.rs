//! Browser bindings. Each export returns a JSON string; the plain functions
//! underneath are callable from native code too.

use serde_json::json;
use wasm_bindgen::prelude::*;

use fastslow_core::config::{Placement, RunConfig, Selection};
use fastslow_core::dataset::generate_episode;
use fastslow_core::encoders::scene::{synth_video, Event, EventKind, SIDE};
use fastslow_core::flops::flops_estimate;
use fastslow_core::sequence::Slot;
use fastslow_core::slow_path::detect_boxes_synthetic;
use fastslow_core::system::FastSlowModel;
use fastslow_core::tensor::Tape;

fn parse_policy(s: &str) -> Result<Placement, String> {
    serde_json::from_value(json!(s)).map_err(|_| format!("unknown placement `{s}`"))
}

fn parse_selection(s: &str) -> Result<Selection, String> {
    serde_json::from_value(json!(s)).map_err(|_| format!("unknown selection `{s}`"))
}

fn demo_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = seed;
    cfg.model.d_model = 32;
    cfg.model.n_heads = 4;
    cfg.dataset.duration_s = 4.0;
    cfg.dataset.event_rate = 0.5;
    cfg
}

/// Events as `[{"t": 1.0, "kind": "object_enters", "quadrant": "top_left"}]`;
/// narration is filled in.
fn parse_events(text: &str) -> Result<Vec<Event>, String> {
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let raw: Vec<serde_json::Value> = serde_json::from_str(text).map_err(|e| e.to_string())?;
    raw.into_iter()
        .map(|v| {
            let t = v["t"].as_f64().ok_or("event without a numeric `t`")?;
            let kind: EventKind = serde_json::from_value(v).map_err(|e| e.to_string())?;
            Ok(Event::new(t, kind))
        })
        .collect()
}

/// Rendered field of frame `index` plus its detected boxes.
pub fn frame_view_json(seed: u64, duration_s: f64, events: &str, index: usize) -> Result<String, String> {
    let events = parse_events(events)?;
    let frames = synth_video(seed, duration_s, &events).map_err(|e| e.to_string())?;
    let f = frames.get(index).ok_or_else(|| format!("frame {index} of {}", frames.len()))?;
    let boxes: Vec<_> = detect_boxes_synthetic(f, None)
        .iter()
        .map(|b| json!({ "kind": b.kind, "r0": b.r0, "c0": b.c0, "r1": b.r1, "c1": b.c1 }))
        .collect();
    Ok(json!({ "side": SIDE, "t": f.t, "n_frames": frames.len(), "field": f.field, "boxes": boxes }).to_string())
}

/// Retained mask of every routed layer, one row of booleans per frame.
pub fn drop_masks_json(seed: u64, beta: f64, policy: &str, selection: &str) -> Result<String, String> {
    let mut cfg = demo_config(seed);
    cfg.dropping.beta = beta;
    cfg.dropping.policy = parse_policy(policy)?;
    cfg.dropping.selection = parse_selection(selection)?;
    cfg.slow_path.enabled = false;
    cfg.validate().map_err(|e| e.to_string())?;
    let model = FastSlowModel::new(&cfg).map_err(|e| e.to_string())?;
    let sample = generate_episode("demo".into(), seed, &cfg.dataset, &cfg.hash()).map_err(|e| e.to_string())?;
    let p = model.prepare(&sample).map_err(|e| e.to_string())?;
    let mut tape = Tape::inference();
    let pv = model.store.bind(&mut tape);
    let out = model
        .forward_plan(&mut tape, &pv, &p.plan, &p.bundles, None, Some(&[p.plan.len() - 1]))
        .map_err(|e| e.to_string())?;
    let layers: Vec<_> = out
        .records
        .iter()
        .map(|rec| {
            let mut frames: Vec<Vec<bool>> = Vec::new();
            let mut weights: Vec<Vec<f64>> = Vec::new();
            let mut current = None;
            for (i, slot) in p.plan.slots.iter().enumerate() {
                if let Slot::Visual { group, .. } = slot {
                    if current != Some(*group) {
                        current = Some(*group);
                        frames.push(Vec::new());
                        weights.push(Vec::new());
                    }
                    frames.last_mut().expect("pushed").push(rec.retained[i]);
                    weights.last_mut().expect("pushed").push(rec.weights[i]);
                }
            }
            json!({ "layer": rec.layer, "retained": frames, "weights": weights })
        })
        .collect();
    Ok(json!({ "n_layers": cfg.model.n_layers, "beta": beta, "layers": layers }).to_string())
}

/// Total multiply-accumulates of a 10 s stream for `points` ratios in [0, 0.9].
pub fn flops_curve_json(policy: &str, n_layers: usize, points: usize) -> Result<String, String> {
    let mut cfg = RunConfig::default();
    cfg.model.n_layers = n_layers;
    cfg.dropping.policy = parse_policy(policy)?;
    cfg.validate().map_err(|e| e.to_string())?;
    let model = FastSlowModel::new(&cfg).map_err(|e| e.to_string())?;
    let sample = generate_episode("curve".into(), cfg.seed, &cfg.dataset, &cfg.hash()).map_err(|e| e.to_string())?;
    let plan = model.plan_for(&sample).map_err(|e| e.to_string())?;
    let points = points.max(2);
    let mut curve = Vec::with_capacity(points);
    for i in 0..points {
        let beta = 0.9 * i as f64 / (points - 1) as f64;
        let mut d = cfg.dropping.clone();
        d.beta = beta;
        let r = flops_estimate(&cfg.model, &d, &plan.slots).map_err(|e| e.to_string())?;
        curve.push(json!({ "beta": beta, "total": r.total }));
    }
    Ok(json!({ "policy": policy, "n_layers": n_layers, "positions": plan.slots.len(), "curve": curve }).to_string())
}

#[wasm_bindgen]
pub fn frame_view(seed: u64, duration_s: f64, events: &str, index: usize) -> Result<String, JsError> {
    frame_view_json(seed, duration_s, events, index).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn drop_masks(seed: u64, beta: f64, policy: &str, selection: &str) -> Result<String, JsError> {
    drop_masks_json(seed, beta, policy, selection).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn flops_curve(policy: &str, n_layers: usize, points: usize) -> Result<String, JsError> {
    flops_curve_json(policy, n_layers, points).map_err(|e| JsError::new(&e))
}
