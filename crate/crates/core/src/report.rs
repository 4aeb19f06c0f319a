//! Machine-readable experiment outputs: CSV bodies, JSON summaries with the
//! resolved configuration embedded, and atomic file writes.
//!
//! CSV bodies are byte-reproducible for a fixed configuration and seed;
//! anything time-dependent lives in the JSON summary's `generated_unix`
//! field, never in a CSV body.

use std::path::Path;

use serde::Serialize;

use crate::bp::ContractionTrace;
use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::majority::MajorityTrial;
use crate::rng::RNG_NAME;

/// Provenance header embedded in every JSON output.
#[derive(Debug, Clone, Serialize)]
pub struct RunMeta {
    pub config: ExperimentConfig,
    pub seed: u64,
    pub rng_name: &'static str,
    pub artifact_version: &'static str,
    pub generated_unix: u64,
}

impl RunMeta {
    pub fn new(config: &ExperimentConfig) -> Self {
        RunMeta {
            config: config.clone(),
            seed: config.seed,
            rng_name: RNG_NAME,
            artifact_version: env!("CARGO_PKG_VERSION"),
            generated_unix: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        }
    }
}

/// Wrap a payload with its provenance and serialize to pretty JSON.
pub fn json_summary<T: Serialize>(meta: &RunMeta, payload: &T) -> String {
    #[derive(Serialize)]
    struct Wrapper<'a, T> {
        meta: &'a RunMeta,
        summary: &'a T,
    }
    serde_json::to_string_pretty(&Wrapper { meta, summary: payload })
        .expect("serializable summary")
        + "\n"
}

/// `m,mean_l1,se_l1,E_m,se_E,Etilde_m,se_Etilde,trials` rows.
pub fn contraction_csv(trace: &ContractionTrace) -> String {
    let mut out = String::from("m,mean_l1,se_l1,E_m,se_E,Etilde_m,se_Etilde,trials\n");
    for l in &trace.levels {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            l.m, l.mean_l1, l.se_l1, l.e_m, l.se_e, l.etilde_m, l.se_etilde, trace.trials
        ));
    }
    out
}

/// `trial_seed,k,regime,z,y2..yq,majority_correct,iterated_correct` rows.
pub fn majority_csv(trials: &[MajorityTrial], k: usize, regime: &str, q: usize) -> String {
    let mut out = String::from("trial_seed,k,regime,z");
    for i in 2..=q {
        out.push_str(&format!(",y{i}"));
    }
    out.push_str(",majority_correct,iterated_correct\n");
    for t in trials {
        out.push_str(&format!("{},{},{},{}", t.seed, k, regime, t.sigma_counts[k][0]));
        for i in 1..q {
            out.push_str(&format!(",{}", t.sigma_counts[k][i]));
        }
        out.push_str(&format!(
            ",{},{}\n",
            t.majority_correct() as u8,
            t.iterated_correct() as u8
        ));
    }
    out
}

/// `v label` assignment rows.
pub fn assignment_text(assign: &[u8]) -> String {
    let mut out = String::new();
    for (v, &b) in assign.iter().enumerate() {
        out.push_str(&format!("{v} {b}\n"));
    }
    out
}

/// Write via a temp file in the same directory plus rename, so readers never
/// observe a half-written file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let file_name = path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    let tmp = dir.join(format!(".{file_name}.tmp.{}", std::process::id()));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}
