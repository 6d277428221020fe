#![allow(dead_code)]

use std::path::{Path, PathBuf};

use serde_json::json;

/// Two tiers whose unit costs at 500 in / 1000 out tokens are 1235 and 250.
pub fn two_tier_catalog() -> serde_json::Value {
    json!({
        "models": [
            {"name": "deepseek-v3", "tier": 1, "price_in_per_mtok": 0.27, "price_out_per_mtok": 1.10, "backend_id": "deepseek"},
            {"name": "small-model", "tier": 2, "price_in_per_mtok": 0.10, "price_out_per_mtok": 0.20, "backend_id": "openai"}
        ],
        "backends": {
            "deepseek": {"base_url": "http://127.0.0.1:9/v1", "api_key_env": "DEEPSEEK_API_KEY"},
            "openai": {"base_url": "http://127.0.0.1:9/v1"}
        }
    })
}

pub fn tasks(n: usize) -> Vec<serde_json::Value> {
    (0..n)
        .map(|i| {
            let a = 3 + i * 7 % 11;
            let b = 2 + i * 5 % 13;
            json!({"id": format!("q{i:02}"), "text": format!("Sam has {a} apples and buys {b} more. How many apples now?"), "answer": format!("{}", a + b)})
        })
        .collect()
}

/// Mock world where answers are drawn from a small pool so outcomes vary by task and topology.
pub fn mock_script() -> serde_json::Value {
    let answers: Vec<String> = (5..30).map(|n| format!("Adding gives {n}.\n#### {n}")).collect();
    json!({
        "seed": 7,
        "rules": [
            {"when": {"role": "planner"}, "generator": {"texts": ["1. read the numbers\n2. add them", "Let me think.", "1. add"], "completion_tokens": [40, 120]}},
            {"when": {"role": "critic"}, "generator": {"texts": ["ACCEPT", "REJECT: recheck the sum"], "completion_tokens": [5, 60]}},
            {"when": {"role": "executor"}, "generator": {"texts": answers, "completion_tokens": [60, 900], "prompt_tokens": [300, 700]}}
        ]
    })
}

pub fn profile(n_tasks: usize, with_mock: bool) -> serde_json::Value {
    let mut p = json!({
        "tasks": tasks(n_tasks),
        "t_in": 500,
        "output_samples": [420, 1000, 733],
        "max_tokens": {"planner": 384, "executor": 1024, "critic": 384},
        "evaluator": "numeric"
    });
    if with_mock {
        p["mock"] = mock_script();
    }
    p
}

pub fn config(budgets: &[f64]) -> serde_json::Value {
    json!({
        "catalog": "catalog.json",
        "profile": "profile.json",
        "budgets": budgets,
        "trainer": {"learning_rate": 0.0015, "entropy_coeff": 0.001, "batch_size": 20000, "epochs": 10},
        "output_dir": "out",
        "mock": true
    })
}

pub fn write_json(path: &Path, v: &serde_json::Value) {
    std::fs::write(path, serde_json::to_string_pretty(v).unwrap()).unwrap();
}

/// Writes catalog, profile and config into `dir`; returns the config path.
pub fn write_fixture(dir: &Path, profile: &serde_json::Value, config: &serde_json::Value) -> PathBuf {
    write_json(&dir.join("catalog.json"), &two_tier_catalog());
    write_json(&dir.join("profile.json"), profile);
    let cfg = dir.join("config.json");
    write_json(&cfg, config);
    cfg
}
