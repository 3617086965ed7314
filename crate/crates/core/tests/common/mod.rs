#![allow(dead_code)]

use std::sync::Arc;

use lamp_core::{run_audit, AuditConfig, AuditSession, Gateway, MockModel, ModelEndpoint, TaskTemplate};

pub const TEXT: &str = "A warm, funny film with a forgettable score and one scene that drags.";
pub const STAMP: &str = "2026-01-01T00:00:00Z";

pub fn gateway(model: MockModel) -> Gateway {
    Gateway::new(ModelEndpoint::mock("mock"), TaskTemplate::sentiment(), Arc::new(model)).unwrap()
}

pub fn config(seed: u64, evaluate: bool) -> AuditConfig {
    AuditConfig { seed, evaluate, created_at: Some(STAMP.into()), ..AuditConfig::default() }
}

pub async fn audit(seed: u64, evaluate: bool) -> AuditSession {
    run_audit(&config(seed, evaluate), TEXT, &gateway(MockModel::preset("sigmoid").unwrap())).await.unwrap()
}
