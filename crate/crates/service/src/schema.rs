//! JSON Schemas published at `/schema`. They describe exactly what the core
//! request types accept; `tests/api.rs` checks the documented default against
//! the serializer.

use serde_json::{json, Value};
use skipforge_core::pipeline::{EditRequest, SweepGrid};

fn plan_schema() -> Value {
    json!({
        "type": "object",
        "additionalProperties": false,
        "properties": {
            "taps": {
                "type": "array",
                "description": "Skip taps 0..=12 counted from the stem, or \"h\" for the bottleneck.",
                "items": { "oneOf": [ { "type": "integer", "minimum": 0 }, { "const": "h" } ] },
                "minItems": 1,
                "uniqueItems": true
            },
            "window": {
                "type": "array",
                "description": "[t_end, t_start], inclusive diffusion times with t_end <= t_start.",
                "items": { "type": "integer", "minimum": 0 },
                "minItems": 2,
                "maxItems": 2
            },
            "gamma": { "type": "number", "description": "0 keeps the live feature, 1 substitutes the recorded one." },
            "mask": {
                "type": "object",
                "additionalProperties": false,
                "required": ["variant"],
                "properties": {
                    "variant": { "enum": ["full", "period", "ratio"] },
                    "param": { "type": ["number", "null"] }
                }
            },
            "noise_source": { "enum": ["shared_random", "inverted_a", "inverted_b"] }
        }
    })
}

fn sampler_schema() -> Value {
    json!({
        "type": "object",
        "additionalProperties": false,
        "properties": {
            "num_steps": { "type": "integer", "minimum": 1 },
            "cfg_scale": { "type": "number" },
            "eta": { "type": "number", "minimum": 0, "maximum": 1 }
        }
    })
}

fn cond_schema() -> Value {
    json!({ "type": ["integer", "null"], "minimum": 0, "description": "Class id; null is the unconditional class." })
}

pub fn edit_request_schema() -> Value {
    json!({
        "$schema": "https://json-schema.org/draft/2020-12/schema",
        "title": "EditRequest",
        "type": "object",
        "additionalProperties": false,
        "required": ["mode", "source", "target_cond"],
        "properties": {
            "mode": { "enum": ["edit_generated", "edit_real", "style_transfer", "group_sweep"] },
            "source": {
                "type": "object",
                "additionalProperties": false,
                "properties": {
                    "seed": { "type": ["integer", "null"], "minimum": 0 },
                    "cond": cond_schema(),
                    "image": { "type": ["string", "null"], "description": "Id returned by POST /images." }
                }
            },
            "target_cond": cond_schema(),
            "plan": plan_schema(),
            "sampler": sampler_schema(),
            "run_id": { "type": "string", "description": "Assigned by the service; ignored on submission." }
        }
    })
}

pub fn sweep_schema() -> Value {
    json!({
        "$schema": "https://json-schema.org/draft/2020-12/schema",
        "title": "SweepSubmission",
        "type": "object",
        "additionalProperties": false,
        "properties": {
            "base": edit_request_schema(),
            "grid": {
                "type": "object",
                "additionalProperties": false,
                "properties": {
                    "taps": { "type": "array", "items": plan_schema()["properties"]["taps"].clone(), "minItems": 1 },
                    "windows": { "type": "array", "items": plan_schema()["properties"]["window"].clone(), "minItems": 1 },
                    "gammas": { "type": "array", "items": { "type": "number" }, "minItems": 1 },
                    "masks": { "type": "array", "items": plan_schema()["properties"]["mask"].clone(), "minItems": 1 },
                    "sources": { "type": "array", "items": plan_schema()["properties"]["noise_source"].clone(), "minItems": 1 }
                }
            }
        }
    })
}

/// Everything served at `/schema`.
pub fn document() -> Value {
    let default_request: Value =
        serde_json::from_str(&EditRequest::canonical_default().canonical_json().expect("default request serializes"))
            .expect("canonical JSON parses");
    json!({
        "edit_request": edit_request_schema(),
        "sweep": sweep_schema(),
        "default_request": default_request,
        "default_grid": SweepGrid::default(),
        "sweep_columns": skipforge_core::pipeline::SWEEP_COLUMNS,
    })
}
