use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bench::{dice, hd95, Mask, MetricResult};
use crate::error::{Error, Result};
use crate::prompts::PassModel;

/// Outcome of adapting on one stream item.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub index: usize,
    /// Loss before each update step.
    pub losses: Vec<f64>,
    /// EMA momentum used for the teacher after this item.
    pub momentum: Option<f64>,
    pub step_millis: Vec<f64>,
    /// `prediction[image][class]`
    pub prediction: Vec<Vec<Mask>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptReport {
    /// One record per stream item, in arrival order.
    pub records: Vec<SampleRecord>,
    /// Offline runs only: the loss of every optimization step.
    pub step_losses: Vec<f64>,
    pub final_model: Option<PassModel>,
}

/// Per-class Dice and HD95 of one item, averaged over its images.
#[derive(Clone, Debug, PartialEq)]
pub struct ItemMetrics {
    pub dice: Vec<f64>,
    pub hd95: Vec<f64>,
}

impl ItemMetrics {
    pub fn mean_dice(&self) -> f64 {
        self.dice.iter().sum::<f64>() / self.dice.len() as f64
    }
}

fn fmt_num(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.to_string()
    } else if v.is_nan() {
        "nan".to_string()
    } else {
        format!("{v:.8}")
    }
}

impl AdaptReport {
    /// Every predicted image, flattened across items.
    pub fn predictions(&self) -> Vec<Vec<Mask>> {
        self.records.iter().flat_map(|r| r.prediction.iter().cloned()).collect()
    }

    /// Metrics per item against `gts[item][image][class]`.
    pub fn item_metrics(&self, gts: &[Vec<Vec<Mask>>]) -> Result<Vec<ItemMetrics>> {
        if gts.len() != self.records.len() {
            return Err(Error::shape("report metrics", &[self.records.len()], &[gts.len()]));
        }
        self.records
            .iter()
            .zip(gts)
            .map(|(r, g)| {
                if r.prediction.len() != g.len() || g.is_empty() {
                    return Err(Error::shape("report metrics", &[r.prediction.len()], &[g.len()]));
                }
                let k = g[0].len();
                let mut d = vec![0.0; k];
                let mut h = vec![0.0; k];
                for (p, t) in r.prediction.iter().zip(g) {
                    for c in 0..k {
                        d[c] += dice(&p[c], &t[c])?;
                        h[c] += hd95(&p[c], &t[c])?;
                    }
                }
                let n = g.len() as f64;
                Ok(ItemMetrics {
                    dice: d.iter().map(|v| v / n).collect(),
                    hd95: h.iter().map(|v| v / n).collect(),
                })
            })
            .collect()
    }

    /// Image-level metrics against flattened ground truth `gts[image][class]`.
    pub fn evaluate(&self, gts: &[Vec<Mask>]) -> Result<MetricResult> {
        MetricResult::evaluate(&self.predictions(), gts)
    }

    /// One row per item: index, sample id, loss summary, momentum, Dice, HD95.
    /// Wall-clock timings are kept out so identical runs write identical bytes.
    pub fn write_csv<W: Write>(&self, out: W, ids: &[String], gts: Option<&[Vec<Vec<Mask>>]>) -> Result<()> {
        if ids.len() != self.records.len() {
            return Err(Error::shape("report ids", &[self.records.len()], &[ids.len()]));
        }
        let metrics = gts.map(|g| self.item_metrics(g)).transpose()?;
        let k = metrics.as_ref().and_then(|m| m.first()).map_or(0, |m| m.dice.len());
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = [
            "index",
            "sample",
            "steps",
            "loss_first",
            "loss_last",
            "loss_mean",
            "momentum",
            "dice",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        header.extend((0..k).map(|c| format!("dice_c{c}")));
        header.extend((0..k).map(|c| format!("hd95_c{c}")));
        w.write_record(&header)?;
        for (i, r) in self.records.iter().enumerate() {
            let (first, last, mean) = if r.losses.is_empty() {
                (String::new(), String::new(), String::new())
            } else {
                let m = r.losses.iter().sum::<f64>() / r.losses.len() as f64;
                (
                    fmt_num(r.losses[0]),
                    fmt_num(*r.losses.last().expect("non-empty")),
                    fmt_num(m),
                )
            };
            let mut row = vec![
                r.index.to_string(),
                ids[i].clone(),
                r.losses.len().to_string(),
                first,
                last,
                mean,
                r.momentum.map(fmt_num).unwrap_or_default(),
            ];
            match &metrics {
                Some(m) => {
                    row.push(fmt_num(m[i].mean_dice()));
                    row.extend(m[i].dice.iter().map(|&v| fmt_num(v)));
                    row.extend(m[i].hd95.iter().map(|&v| fmt_num(v)));
                }
                None => row.push(String::new()),
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_csv_file(&self, path: &Path, ids: &[String], gts: Option<&[Vec<Vec<Mask>>]>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?, ids, gts)
    }

    /// Per-step wall-clock times: `index,step,millis`.
    pub fn write_timing_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["index", "step", "millis"])?;
        for r in &self.records {
            for (s, ms) in r.step_millis.iter().enumerate() {
                w.write_record([r.index.to_string(), s.to_string(), format!("{ms:.3}")])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Everything needed to rerun an adaptation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: serde_json::Value,
    pub seed: u64,
    pub checkpoint_sha256: String,
    pub domain: String,
    pub samples: usize,
}

impl RunManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
