//! Text dump of a supernet checkpoint's rank table.

use std::fmt::Write;
use std::path::Path;

use msr_core::rank_table::RankTable;
use msr_core::spectral::SpectralConfig;
use msr_core::supernet::Network;

use crate::error::CliResult;

pub const RANKS_HEADER: &str = "cell_type\tedge\top\tmean_rank\tcell_ranks\tsigmas\tfrobenius_norms";

/// One tab-separated row per (cell type, edge, operator); per-cell columns
/// list `cell:value` pairs. Comment lines start with `#`.
pub fn format_rank_table(table: &RankTable) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "# nodes={} epoch={} rank_iterations={} frobenius={}",
        table.nodes,
        table.epoch.map_or_else(|| "init".to_string(), |e| e.to_string()),
        table.rank_iterations,
        serde_json::to_value(table.frobenius).expect("mode serializes").as_str().unwrap_or("?"),
    );
    let _ = writeln!(out, "{RANKS_HEADER}");
    let fmt_opt = |v: Option<f64>| v.map_or_else(|| "flagged".to_string(), |r| format!("{r:.6}"));
    let (mut flagged, mut sum, mut lo, mut hi, mut n) = (0usize, 0.0, f64::INFINITY, f64::NEG_INFINITY, 0usize);
    let mut sigma_range = (f64::INFINITY, f64::NEG_INFINITY);
    for e in table.entries() {
        let list = |f: &dyn Fn(&msr_core::rank_table::CellRank) -> String| {
            e.cells.iter().map(|c| format!("{}:{}", c.cell, f(c))).collect::<Vec<_>>().join(",")
        };
        let _ = writeln!(
            out,
            "{}\t{}->{}\t{}\t{}\t{}\t{}\t{}",
            e.cell_type,
            e.from,
            e.to,
            e.op,
            fmt_opt(e.mean),
            list(&|c| fmt_opt(c.rank)),
            list(&|c| format!("{:.6}", c.sigma)),
            list(&|c| format!("{:.6}", c.frobenius)),
        );
        match e.mean {
            Some(r) => {
                sum += r;
                n += 1;
                lo = lo.min(r);
                hi = hi.max(r);
            }
            None => flagged += 1,
        }
        for c in e.cells.iter().filter(|c| c.rank.is_some()) {
            sigma_range = (sigma_range.0.min(c.sigma), sigma_range.1.max(c.sigma));
        }
    }
    let _ = writeln!(
        out,
        "# totals: entries={} flagged={flagged} mean_rank={:.6} min_rank={:.6} max_rank={:.6} sigma_min={:.6} sigma_max={:.6}",
        table.entries().len(),
        if n > 0 { sum / n as f64 } else { f64::NAN },
        lo,
        hi,
        sigma_range.0,
        sigma_range.1,
    );
    out
}

pub fn run_ranks(checkpoint: &Path, spectral: &SpectralConfig) -> CliResult<(RankTable, String)> {
    let net = Network::load_supernet_checkpoint(checkpoint)?;
    let mut table = net.collect_rank_table(spectral)?;
    table.epoch = net.epoch.checked_sub(1);
    let text = format_rank_table(&table);
    Ok((table, text))
}
