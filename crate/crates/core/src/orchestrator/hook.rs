use std::path::Path as FsPath;
use std::process::Command;
use std::time::Duration;

use serde_json::json;

use super::config::TrainerHook;

/// Runs the trainer hook for one batch and waits for it to finish.
pub fn fire(hook: &TrainerHook, round: u32, batch: &FsPath) -> Result<(), String> {
    match hook {
        TrainerHook::Command(argv) => {
            let (prog, args) = argv.split_first().ok_or("trainer command is empty")?;
            let status = Command::new(prog)
                .args(args)
                .arg(batch)
                .status()
                .map_err(|e| format!("cannot start {prog}: {e}"))?;
            if status.success() {
                Ok(())
            } else {
                Err(format!("{prog} exited with {status}"))
            }
        }
        TrainerHook::Webhook(url) => {
            let client = reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs(60))
                .build()
                .map_err(|e| e.to_string())?;
            let resp = client
                .post(url)
                .json(&json!({ "round": round, "batch_path": batch }))
                .send()
                .map_err(|e| e.to_string())?;
            if resp.status().is_success() {
                Ok(())
            } else {
                Err(format!("webhook answered HTTP {}", resp.status()))
            }
        }
    }
}
