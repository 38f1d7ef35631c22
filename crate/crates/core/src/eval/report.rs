use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::HitRate;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionSummary {
    pub top1: HitRate,
    pub top3: HitRate,
    /// Expected rates of a uniformly random region ranking.
    pub random_top1_analytic: f64,
    pub random_top3_analytic: f64,
    pub random_top1_monte_carlo: f64,
    pub random_top3_monte_carlo: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scorer: String,
    pub config: BTreeMap<String, String>,
    pub questions: usize,
    pub binary_accuracy: f64,
    /// Mean accuracy of seeded random scorers on the same questions.
    pub random_accuracy: f64,
    pub per_category: BTreeMap<String, f64>,
    pub topk: Vec<(usize, f64)>,
    pub attention: Option<AttentionSummary>,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "scorer: {}", self.scorer);
        for (k, v) in &self.config {
            let _ = writeln!(s, "config.{k}: {v}");
        }
        let _ = writeln!(s, "questions: {}", self.questions);
        let _ = writeln!(s, "binary_accuracy: {:.6}", self.binary_accuracy);
        let _ = writeln!(s, "random_accuracy: {:.6}", self.random_accuracy);
        for (k, v) in &self.per_category {
            let _ = writeln!(s, "category.{k}: {v:.6}");
        }
        for (k, v) in &self.topk {
            let _ = writeln!(s, "top{k}: {v:.6}");
        }
        if let Some(a) = &self.attention {
            for h in [&a.top1, &a.top3] {
                let _ = writeln!(
                    s,
                    "attention_top{}: {:.6} ({} hits / {} evaluated, {} excluded)",
                    h.top_n,
                    h.rate(),
                    h.hits,
                    h.evaluated,
                    h.excluded
                );
            }
            let _ = writeln!(
                s,
                "random_top1: {:.6} analytic, {:.6} monte carlo",
                a.random_top1_analytic, a.random_top1_monte_carlo
            );
            let _ = writeln!(
                s,
                "random_top3: {:.6} analytic, {:.6} monte carlo",
                a.random_top3_analytic, a.random_top3_monte_carlo
            );
        }
        s
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn topk_csv(&self) -> String {
        let mut s = String::from("K,accuracy\n");
        for (k, v) in &self.topk {
            let _ = writeln!(s, "{k},{v}");
        }
        s
    }
}
