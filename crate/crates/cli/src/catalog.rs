//! `inspect` and `recover`: read-only catalog listing and offline recovery.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use mlckpt_client::conn::BackendConn;
use mlckpt_core::config::Config;
use mlckpt_core::model::CheckpointId;
use mlckpt_core::pipeline::GroupTopology;
use mlckpt_core::recovery::{self, VersionCatalog};
use mlckpt_core::resilience::repo::{repo_open, RepositoryBackend};
use mlckpt_core::wire;

use crate::{io_error, CliError};

fn repository(config: &Config) -> Option<std::sync::Arc<dyn RepositoryBackend>> {
    match repo_open(config.repository_locator()) {
        Ok(r) => Some(r),
        Err(e) => {
            log::warn!("repository {} unavailable: {e}", config.repository_locator());
            None
        }
    }
}

/// Group size recorded in manifests, else one more than the highest rank
/// seen.
pub fn infer_ranks(catalog: &VersionCatalog) -> u32 {
    let ranks = catalog.versions.values().flat_map(|e| e.ranks.iter());
    let recorded = ranks.clone().filter_map(|(_, ra)| ra.group_size).max();
    recorded.unwrap_or_else(|| ranks.map(|(r, _)| r + 1).max().unwrap_or(0))
}

/// Per-rank and group watermarks of `name`, if a backend answers on
/// `endpoint`.
pub fn query_watermarks(endpoint: &Path, name: &str, num_ranks: u32) -> Option<(BTreeMap<u32, u32>, Option<u32>)> {
    let mut conn = BackendConn::connect(endpoint, 0).ok()?;
    let hello = conn.message(wire::HELLO).with("num_ranks", num_ranks).with("mode", "async");
    let ack = conn.call(hello).ok()?;
    if ack.is_error() {
        return None;
    }
    let q = conn.message(wire::STATUS_QUERY).with("name", name);
    let reply = conn.call(q).ok()?;
    let ranks: BTreeMap<u32, u32> = reply.field("watermarks").ok()?;
    let group: Option<u32> = reply.opt_field("group_watermark").ok()?;
    Some((ranks, group))
}

/// `inspect --config F --name N [--ranks K]`.
pub fn inspect(config: &Config, name: &str, ranks: Option<u32>, out: &mut impl Write) -> Result<(), CliError> {
    mlckpt_core::model::validate_name(name).map_err(|e| CliError::new("INVALID_NAME", e.to_string()))?;
    let repo = repository(config);
    let provisional = GroupTopology { num_ranks: ranks.unwrap_or(1), redundancy: config.redundancy };
    let catalog = recovery::discover(name, &config.scratch_tiers, repo.as_deref(), &provisional);
    let num_ranks = ranks.unwrap_or_else(|| infer_ranks(&catalog));
    let group = GroupTopology { num_ranks, redundancy: config.redundancy };
    let io = |e| io_error("stdout", e);

    writeln!(out, "CATALOG name={name} ranks={num_ranks} versions={}", catalog.versions.len()).map_err(io)?;
    writeln!(out, "{:<8} {:<5} {:<8} {:<8} {:<8} BEST", "VERSION", "RANK", "L1", "PARTNER", "L3").map_err(io)?;
    for (v, entry) in &catalog.versions {
        for r in 0..num_ranks.max(entry.ranks.keys().next_back().map_or(0, |r| r + 1)) {
            let ra = entry.ranks.get(&r).cloned().unwrap_or_default();
            let best = catalog.best_level(*v, r, &group).map_or("NONE", |l| l.as_str());
            writeln!(
                out,
                "{:<8} {:<5} {:<8} {:<8} {:<8} {best}",
                v,
                r,
                ra.l1.state.short(),
                ra.partner.state.short(),
                ra.l3.state.short()
            )
            .map_err(io)?;
        }
        for (g, src) in &entry.parity {
            let reason = src.reason.as_deref().map(|r| format!(" ({r})")).unwrap_or_default();
            writeln!(out, "PARITY version={v} group={g} state={}{reason}", src.state.as_str()).map_err(io)?;
        }
    }
    if let Some((marks, group_mark)) = query_watermarks(&config.backend_endpoint, name, num_ranks.max(1)) {
        writeln!(
            out,
            "WATERMARK name={name} group={} ranks={}",
            group_mark.map_or("NONE".into(), |v| v.to_string()),
            marks.iter().map(|(r, v)| format!("{r}:{v}")).collect::<Vec<_>>().join(",")
        )
        .map_err(io)?;
    }
    let latest = recovery::latest_restorable(&catalog, &group, None);
    writeln!(out, "LATEST_RESTORABLE {}", latest.map_or("NONE".into(), |v| v.to_string())).map_err(io)?;
    Ok(())
}

/// `recover --config F --name N --version V [--ranks K]`: materializes
/// every rank's artifact on tier 0.
pub fn recover(
    config: &Config,
    name: &str,
    version: u32,
    ranks: Option<u32>,
    out: &mut impl Write,
) -> Result<(), CliError> {
    mlckpt_core::model::validate_name(name).map_err(|e| CliError::new("INVALID_NAME", e.to_string()))?;
    let repo = repository(config);
    let provisional = GroupTopology { num_ranks: ranks.unwrap_or(1), redundancy: config.redundancy };
    let catalog = recovery::discover(name, &config.scratch_tiers, repo.as_deref(), &provisional);
    let num_ranks = ranks.unwrap_or_else(|| infer_ranks(&catalog));
    if num_ranks == 0 || !catalog.versions.contains_key(&version) {
        return Err(CliError::new("VERSION_UNRECOVERABLE", format!("{name} v{version} not in any level")));
    }
    let group = GroupTopology { num_ranks, redundancy: config.redundancy };
    let io = |e| io_error("stdout", e);
    let mut failed = Vec::new();
    let mut total = 0u64;
    for rank in 0..num_ranks {
        let id = CheckpointId::new(name, version, rank).map_err(|e| CliError::new("INVALID_NAME", e.to_string()))?;
        // Re-scan so a rank installed from a lower level counts as L1 for
        // the XOR decode of its group peers.
        let catalog = recovery::discover(name, &config.scratch_tiers, repo.as_deref(), &group);
        match recovery::materialize(&id, &catalog, &config.scratch_tiers, repo.as_deref(), &group) {
            Ok((artifact, level, log)) => {
                for line in log {
                    writeln!(out, "{line}").map_err(io)?;
                }
                let header = mlckpt_core::resilience::format::read_header(&artifact.path)
                    .map_err(|e| CliError::new(e.code(), e.to_string()))?;
                total += artifact.byte_length;
                writeln!(
                    out,
                    "RANK {rank} level={level} digest={} bytes={}",
                    header.digest.to_hex(),
                    artifact.byte_length
                )
                .map_err(io)?;
            }
            Err(e) => {
                for line in e.log() {
                    writeln!(out, "{line}").map_err(io)?;
                }
                failed.push(rank);
            }
        }
    }
    if !failed.is_empty() {
        return Err(CliError::new(
            "VERSION_UNRECOVERABLE",
            format!("{name} v{version}: ranks {failed:?} unrecoverable"),
        ));
    }
    writeln!(out, "RECOVERED name={name} version={version} ranks={num_ranks} bytes={total}").map_err(io)?;
    Ok(())
}
