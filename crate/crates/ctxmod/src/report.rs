//! JSON and CSV renderings of metrics, stage reports and analyses.

use std::fmt::Write as _;

use ctxmod_core::analysis::{AttentionOverlay, DecompositionCurves, Heatmap, RfMask};
use ctxmod_core::metrics::{MetricsReport, RankCurves, Summary};
use ctxmod_core::train::StageReport;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryJson {
    pub mean: f64,
    pub sem: f64,
    pub n: usize,
}

impl From<&Summary> for SummaryJson {
    fn from(s: &Summary) -> Self {
        Self {
            mean: s.mean,
            sem: s.sem,
            n: s.n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronRow {
    pub neuron: usize,
    pub corr: Option<f64>,
    pub pt_j: f64,
    pub pt_s: f64,
    pub lambda_jro: f64,
    pub lambda_sro: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetrics {
    pub model: String,
    pub n_images: usize,
    pub k: usize,
    pub neurons: Vec<NeuronRow>,
    pub corr: Option<SummaryJson>,
    pub pt_j: Option<SummaryJson>,
    pub pt_s: Option<SummaryJson>,
}

impl From<&MetricsReport> for ModelMetrics {
    fn from(r: &MetricsReport) -> Self {
        Self {
            model: r.model.clone(),
            n_images: r.n_images,
            k: r.k,
            neurons: r
                .neurons
                .iter()
                .map(|n| NeuronRow {
                    neuron: n.neuron,
                    corr: n.corr,
                    pt_j: n.pt_j,
                    pt_s: n.pt_s,
                    lambda_jro: n.lambda_jro,
                    lambda_sro: n.lambda_sro,
                })
                .collect(),
            corr: r.corr.as_ref().map(Into::into),
            pt_j: r.pt_j.as_ref().map(Into::into),
            pt_s: r.pt_s.as_ref().map(Into::into),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochJson {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_corr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageJson {
    pub stage: String,
    pub neuron: usize,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub final_train_loss: Option<f64>,
    pub val_corr: Option<f64>,
    pub train_images: usize,
    pub checkpoint_path: Option<String>,
    pub history: Vec<EpochJson>,
}

impl StageJson {
    pub fn new(r: &StageReport, neuron: usize) -> Self {
        Self {
            stage: r.stage.clone(),
            neuron,
            epochs_run: r.epochs_run,
            best_epoch: r.best_epoch,
            final_train_loss: r.final_train_loss,
            val_corr: r.val_corr,
            train_images: r.train_images,
            checkpoint_path: r.checkpoint_path.clone(),
            history: r
                .history
                .iter()
                .map(|h| EpochJson {
                    epoch: h.epoch,
                    train_loss: h.train_loss,
                    val_corr: h.val_corr,
                })
                .collect(),
        }
    }
}

/// Relative change of `x` against `base`, in percent.
pub fn delta_pct(x: f64, base: f64) -> Option<f64> {
    (base != 0.0 && x.is_finite() && base.is_finite()).then(|| (x - base) / base.abs() * 100.0)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// One row per model with mean ± SEM and Δ% of each mean against the first
/// row. Empty cells mark undefined values.
pub fn comparison_csv(models: &[ModelMetrics]) -> String {
    let mut s = String::from(
        "model,n_neurons,corr_mean,corr_sem,pt_j_mean,pt_j_sem,pt_s_mean,pt_s_sem,delta_corr_pct,delta_pt_j_pct,delta_pt_s_pct\n",
    );
    let mean = |x: &Option<SummaryJson>| x.as_ref().map(|s| s.mean);
    let sem = |x: &Option<SummaryJson>| x.as_ref().map(|s| s.sem);
    let base = models.first();
    for m in models {
        let d = |f: fn(&ModelMetrics) -> &Option<SummaryJson>| {
            let b = base.and_then(|b| mean(f(b)));
            mean(f(m)).zip(b).and_then(|(x, b)| delta_pct(x, b))
        };
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{}",
            m.model,
            m.neurons.len(),
            opt(mean(&m.corr)),
            opt(sem(&m.corr)),
            opt(mean(&m.pt_j)),
            opt(sem(&m.pt_j)),
            opt(mean(&m.pt_s)),
            opt(sem(&m.pt_s)),
            opt(d(|m| &m.corr)),
            opt(d(|m| &m.pt_j)),
            opt(d(|m| &m.pt_s)),
        );
    }
    s
}

pub fn per_neuron_csv(models: &[ModelMetrics]) -> String {
    let mut s = String::from("model,neuron,corr,pt_j,pt_s,lambda_jro,lambda_sro\n");
    for m in models {
        for n in &m.neurons {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                m.model,
                n.neuron,
                opt(n.corr),
                n.pt_j,
                n.pt_s,
                n.lambda_jro,
                n.lambda_sro
            );
        }
    }
    s
}

pub fn tuning_csv(c: &RankCurves) -> String {
    let mut s = String::from("rank,real,pred_jro,pred_sro\n");
    for i in 0..c.real.len() {
        let _ = writeln!(s, "{},{},{},{}", i + 1, c.real[i], c.joint[i], c.separate[i]);
    }
    s
}

pub fn decomposition_csv(c: &DecompositionCurves) -> String {
    let mut s = String::from("rank,center,surround,prediction\n");
    for i in 0..c.prediction.len() {
        let _ = writeln!(s, "{},{},{},{}", i + 1, c.center[i], c.surround[i], c.prediction[i]);
    }
    s
}

/// Raw mean |contribution| values; contrast normalization is left to the
/// plotting side.
pub fn heatmap_csv(h: &Heatmap) -> String {
    let mut s = String::from("row,col,value,is_center\n");
    let c = h.center_index();
    for (i, v) in h.values.iter().enumerate() {
        let _ = writeln!(s, "{},{},{},{}", i / h.w, i % h.w, v, (i == c) as u8);
    }
    s
}

pub fn attention_weights_csv(o: &AttentionOverlay) -> String {
    let mut s = String::from("token,row,col,weight\n");
    for (i, v) in o.row.iter().enumerate() {
        let _ = writeln!(s, "{},{},{},{}", i, i / o.w, i % o.w, v);
    }
    s
}

pub fn overlay_csv(o: &AttentionOverlay, side: usize) -> String {
    let mut s = String::from("row,col,weight\n");
    for (i, v) in o.overlay.iter().enumerate() {
        let _ = writeln!(s, "{},{},{}", i / side, i % side, v);
    }
    s
}

pub fn mask_csv(m: &RfMask) -> String {
    let mut s = String::from("row,col,in_rf\n");
    for (i, &v) in m.mask.iter().enumerate() {
        let _ = writeln!(s, "{},{},{}", i / m.side, i % m.side, v as u8);
    }
    s
}
