//! Ablation and fusion-sweep drivers. Every row is a plain [`RunManifest`], so
//! any row can be reproduced by launching that manifest on its own.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::detector::FusionKind;
use crate::error::{Error, Result};
use crate::eval::ApTriple;
use crate::plugin::{Components, PluginConfig};
use crate::runner::{par_map, run_stream, RunManifest};
use crate::scenario::SweepAxes;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Loss,
    PluginSize,
    Components,
    TauHi,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 4] = [AblationAxis::Loss, AblationAxis::PluginSize, AblationAxis::Components, AblationAxis::TauHi];

    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::Loss => "loss",
            AblationAxis::PluginSize => "plugin_size",
            AblationAxis::Components => "components",
            AblationAxis::TauHi => "tau_hi",
        }
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_");
        AblationAxis::ALL
            .into_iter()
            .find(|a| a.name() == norm)
            .ok_or_else(|| Error::config(format!("unknown ablation axis {s:?} (loss, plugin_size, components, tau_hi)")))
    }
}

/// One row of an ablation grid before it is run.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub label: String,
    /// Trainable parameters actually in use.
    pub params: usize,
    /// The row the deltas are taken against.
    pub reference: bool,
    pub manifest: RunManifest,
}

/// Parameters that take part in the forward pass under `cfg.components`.
pub fn active_params(cfg: &PluginConfig) -> usize {
    let c = cfg.channels;
    let full = cfg.param_count();
    let Components { adain, adapter, gate } = cfg.components;
    if !adapter {
        return if adain { c } else { 0 };
    }
    full - if adain { 0 } else { c } - if gate { 0 } else { c }
}

fn with_tau_hi(m: &RunManifest, tau_hi: f64, lambda: f64) -> RunManifest {
    let mut m = m.clone();
    m.ttt.tau_hi = tau_hi;
    m.ttt.tau_lo = m.ttt.tau_lo.min(tau_hi);
    m.ttt.lambda = lambda;
    m
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Builds the grid for `axis` around `base`.
pub fn ablation_variants(base: &RunManifest, axis: AblationAxis, sweep: &SweepAxes) -> Result<Vec<Variant>> {
    base.validate()?;
    let row = |label: String, manifest: RunManifest, reference: bool| Variant {
        label,
        params: if manifest.passthrough { 0 } else { active_params(&manifest.plugin) },
        reference,
        manifest,
    };
    let lambda = base.ttt.lambda;
    let mut rows = match axis {
        AblationAxis::Loss => vec![
            row("tau_hi=0.0, no boost".into(), with_tau_hi(base, 0.0, 0.0), false),
            row(format!("tau_hi={}, no boost", base.ttt.tau_hi), with_tau_hi(base, base.ttt.tau_hi, 0.0), false),
            row(format!("tau_hi={}, boost={lambda}", base.ttt.tau_hi), base.clone(), true),
        ],
        AblationAxis::PluginSize => {
            let mut sizes = sweep.plugin_sizes.clone();
            let own = [base.plugin.hidden, base.plugin.blocks];
            if !sizes.contains(&own) {
                sizes.push(own);
            }
            sizes
                .into_iter()
                .map(|[hidden, blocks]| {
                    let mut m = base.clone();
                    m.plugin.hidden = hidden;
                    m.plugin.blocks = blocks;
                    m.plugin.gn_groups = gcd(hidden, base.plugin.gn_groups);
                    row(format!("h={hidden}, b={blocks}"), m, [hidden, blocks] == own)
                })
                .collect()
        }
        AblationAxis::Components => {
            let comp = |adain, adapter, gate| {
                let mut m = base.clone();
                m.plugin.components = Components { adain, adapter, gate };
                m
            };
            vec![
                row("no plugin".into(), RunManifest { passthrough: true, ..base.clone() }, false),
                row("adain only".into(), comp(true, false, true), false),
                row("adapter only".into(), comp(false, true, true), false),
                row("no gate".into(), comp(true, true, false), false),
                row("full".into(), comp(true, true, true), true),
            ]
        }
        AblationAxis::TauHi => sweep
            .tau_hi
            .iter()
            .map(|&t| row(format!("tau_hi={t}"), with_tau_hi(base, t, lambda), t == base.ttt.tau_hi))
            .collect(),
    };
    if !rows.iter().any(|r| r.reference) {
        rows.push(row(format!("tau_hi={}", base.ttt.tau_hi), base.clone(), true));
    }
    for r in &rows {
        r.manifest.validate()?;
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub axis: AblationAxis,
    pub label: String,
    pub params: usize,
    pub reference: bool,
    pub adapted: ApTriple,
    /// Adapted AP@50 minus the reference row's.
    pub delta50: Option<f64>,
}

pub fn ablate(base: &RunManifest, axis: AblationAxis, sweep: &SweepAxes) -> Result<Vec<AblationRow>> {
    let variants = ablation_variants(base, axis, sweep)?;
    let results = par_map(&variants, |v| run_stream(&v.manifest).map(|r| r.summary.adapted));
    let aps = results.into_iter().collect::<Result<Vec<_>>>()?;
    let reference = variants.iter().position(|v| v.reference).and_then(|i| aps[i].ap50);
    Ok(variants
        .into_iter()
        .zip(aps)
        .map(|(v, ap)| AblationRow {
            axis,
            label: v.label,
            params: v.params,
            reference: v.reference,
            adapted: ap,
            delta50: ap.ap50.zip(reference).map(|(a, r)| a - r),
        })
        .collect())
}

fn cell(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:.6}"))
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("axis,setting,params,ap30,ap50,ap70,delta50,reference\n");
    for r in rows {
        s += &format!(
            "{},\"{}\",{},{},{},{},{},{}\n",
            r.axis,
            r.label,
            r.params,
            cell(r.adapted.ap30),
            cell(r.adapted.ap50),
            cell(r.adapted.ap70),
            cell(r.delta50),
            r.reference
        );
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FusionRow {
    pub fusion: FusionKind,
    pub ego: ApTriple,
    pub without_plugin: ApTriple,
    pub with_plugin: ApTriple,
    pub delta50: Option<f64>,
}

/// Runs the scenario once per fusion kind. The unadapted fusion of the same
/// stream is the without-plugin column; it equals a passthrough run.
pub fn sweep_fusion(base: &RunManifest) -> Result<Vec<FusionRow>> {
    let manifests: Vec<RunManifest> = [FusionKind::Max, FusionKind::Weighted]
        .into_iter()
        .map(|fusion| RunManifest { fusion, passthrough: false, ..base.clone() })
        .collect();
    let results = par_map(&manifests, |m| run_stream(m).map(|r| r.summary));
    results
        .into_iter()
        .map(|s| {
            let s = s?;
            Ok(FusionRow {
                fusion: s.fusion,
                ego: s.ego,
                without_plugin: s.unadapted,
                with_plugin: s.adapted,
                delta50: s.adapted.ap50.zip(s.unadapted.ap50).map(|(a, b)| a - b),
            })
        })
        .collect()
}

pub fn fusion_csv(rows: &[FusionRow]) -> String {
    let mut s = String::from("fusion,ego_ap50,without_ap30,without_ap50,without_ap70,with_ap30,with_ap50,with_ap70,delta50\n");
    for r in rows {
        s += &format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.fusion,
            cell(r.ego.ap50),
            cell(r.without_plugin.ap30),
            cell(r.without_plugin.ap50),
            cell(r.without_plugin.ap70),
            cell(r.with_plugin.ap30),
            cell(r.with_plugin.ap50),
            cell(r.with_plugin.ap70),
            cell(r.delta50)
        );
    }
    s
}
