//! Extra parameters and memory beyond the frozen backbone, evaluated as
//! closed-form products.

use serde::{Deserialize, Serialize};

use super::Method;
use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::pipeline::LearnerConfig;
use crate::prompting::PromptMode;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MethodConfig {
    Finetune,
    /// `pool` key/prompt pairs of length `length`.
    L2p {
        pool: u64,
        length: u64,
        embed_dim: u64,
    },
    /// General prompts over `g_layers` layers plus per-task expert prompts.
    DualPrompt {
        g_layers: u64,
        g_length: u64,
        e_factor: u64,
        tasks: u64,
        e_length: u64,
        heads: u64,
        head_dim: u64,
    },
    SPromptPlusPlus {
        layers: u64,
        tasks: u64,
        length: u64,
        heads: u64,
        head_dim: u64,
        centers: u64,
    },
    Coda {
        layers: u64,
        components: u64,
        length: u64,
        embed_dim: u64,
    },
    Hide {
        layers: u64,
        tasks: u64,
        length: u64,
        heads: u64,
        head_dim: u64,
        hidden: u64,
        centers: u64,
        classes_per_task: u64,
    },
    /// Per-layer key and value prefixes of `length` rows each, per task.
    Preprompt {
        layers: u64,
        tasks: u64,
        length: u64,
        heads: u64,
        head_dim: u64,
    },
    /// Arbitrary products for desk-scale or hypothetical methods.
    Custom {
        name: String,
        trainable: Vec<Vec<u64>>,
        stored: Vec<Vec<u64>>,
    },
}

impl MethodConfig {
    pub const REFERENCE_METHODS: [&'static str; 7] = [
        "finetune",
        "l2p",
        "dual-prompt",
        "s-prompt-plus-plus",
        "coda",
        "hide",
        "preprompt",
    ];

    /// The ViT-B/16, 10-task CIFAR-100 configuration of each method.
    pub fn reference(name: &str) -> Result<Self> {
        Ok(match name {
            "finetune" => MethodConfig::Finetune,
            "l2p" => MethodConfig::L2p {
                pool: 30,
                length: 5,
                embed_dim: 768,
            },
            "dual-prompt" => MethodConfig::DualPrompt {
                g_layers: 2,
                g_length: 5,
                e_factor: 3,
                tasks: 10,
                e_length: 20,
                heads: 12,
                head_dim: 64,
            },
            "s-prompt-plus-plus" => MethodConfig::SPromptPlusPlus {
                layers: 5,
                tasks: 10,
                length: 20,
                heads: 12,
                head_dim: 64,
                centers: 5,
            },
            "coda" => MethodConfig::Coda {
                layers: 5,
                components: 100,
                length: 8,
                embed_dim: 768,
            },
            "hide" => MethodConfig::Hide {
                layers: 5,
                tasks: 10,
                length: 20,
                heads: 12,
                head_dim: 64,
                hidden: 1536,
                centers: 10,
                classes_per_task: 10,
            },
            "preprompt" => MethodConfig::Preprompt {
                layers: 5,
                tasks: 10,
                length: 5,
                heads: 12,
                head_dim: 64,
            },
            other => {
                return Err(Error::domain(format!(
                    "unknown method {other:?}; expected one of {:?}",
                    Self::REFERENCE_METHODS
                )))
            }
        })
    }

    pub fn name(&self) -> String {
        match self {
            MethodConfig::Finetune => "finetune",
            MethodConfig::L2p { .. } => "l2p",
            MethodConfig::DualPrompt { .. } => "dual-prompt",
            MethodConfig::SPromptPlusPlus { .. } => "s-prompt-plus-plus",
            MethodConfig::Coda { .. } => "coda",
            MethodConfig::Hide { .. } => "hide",
            MethodConfig::Preprompt { .. } => "preprompt",
            MethodConfig::Custom { name, .. } => name,
        }
        .to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub method: String,
    /// ΔP: extra trainable parameters.
    pub delta_p: u64,
    /// Stored non-trainable reals (prototypes, centers).
    pub stored: u64,
    /// ΔM in MB at 4 bytes per real, over trainable plus stored.
    pub delta_m_mb: f64,
}

impl ComplexityReport {
    pub fn total(&self) -> u64 {
        self.delta_p + self.stored
    }
}

/// Rounds megabytes to 3 decimals.
pub fn round_mb(reals: u64) -> f64 {
    let mb = reals as f64 * 4.0 / (1024.0 * 1024.0);
    (mb * 1000.0).round() / 1000.0
}

fn product(factors: &[u64]) -> u64 {
    factors.iter().product()
}

pub fn complexity_accounting(method: &MethodConfig) -> ComplexityReport {
    let (delta_p, stored) = match *method {
        MethodConfig::Finetune => (0, 0),
        MethodConfig::L2p {
            pool,
            length,
            embed_dim,
        } => (pool * length * embed_dim + pool * embed_dim, 0),
        MethodConfig::DualPrompt {
            g_layers,
            g_length,
            e_factor,
            tasks,
            e_length,
            heads,
            head_dim,
        } => {
            let general = product(&[g_layers, 2, g_length, heads, head_dim]);
            let expert = product(&[e_factor, 2, tasks, e_length, heads, head_dim]);
            let keys = tasks * heads * head_dim;
            (general + expert + keys, 0)
        }
        MethodConfig::SPromptPlusPlus {
            layers,
            tasks,
            length,
            heads,
            head_dim,
            centers,
        } => (
            product(&[layers, 2, tasks, length, heads, head_dim]) + tasks * heads * head_dim,
            centers * heads * head_dim * tasks,
        ),
        MethodConfig::Coda {
            layers,
            components,
            length,
            embed_dim,
        } => (product(&[layers, components, length + 2, embed_dim]), 0),
        MethodConfig::Hide {
            layers,
            tasks,
            length,
            heads,
            head_dim,
            hidden,
            centers,
            classes_per_task,
        } => {
            let d = heads * head_dim;
            let prompts = product(&[layers, 2, tasks, length, heads, head_dim]);
            let adapter = d + d + d * hidden + hidden + hidden * d + d;
            (
                prompts + adapter,
                product(&[centers, classes_per_task, d, 2, 2]),
            )
        }
        MethodConfig::Preprompt {
            layers,
            tasks,
            length,
            heads,
            head_dim,
        } => (
            product(&[layers, 2, tasks, length, heads, head_dim]),
            product(&[1, tasks, heads * head_dim, 2]),
        ),
        MethodConfig::Custom {
            ref trainable,
            ref stored,
            ..
        } => (
            trainable.iter().map(|t| product(t)).sum(),
            stored.iter().map(|t| product(t)).sum(),
        ),
    };
    ComplexityReport {
        method: method.name(),
        delta_p,
        stored,
        delta_m_mb: round_mb(delta_p + stored),
    }
}

/// Accounting for a desk-scale run of `method` over `tasks` tasks.
pub fn desk_method_config(
    method: Method,
    learner: &LearnerConfig,
    backbone: &BackboneConfig,
    tasks: usize,
) -> MethodConfig {
    let d = backbone.embed_dim as u64;
    let layers = learner.layers_for(backbone.depth).len() as u64;
    let rows = learner.mode.rows_per_layer(learner.length) as u64;
    let t = tasks as u64;
    match method {
        Method::Finetune => MethodConfig::Finetune,
        Method::Preprompt if !learner.flags.prompt_prediction => MethodConfig::Finetune,
        Method::Preprompt if learner.mode == PromptMode::Prefix => MethodConfig::Preprompt {
            layers,
            tasks: t,
            length: learner.length as u64,
            heads: backbone.heads as u64,
            head_dim: backbone.head_dim() as u64,
        },
        Method::Preprompt => MethodConfig::Custom {
            name: method.to_string(),
            trainable: vec![vec![layers, t, rows, d]],
            stored: vec![vec![t, d, 2]],
        },
        // task keys instead of prototypes
        Method::KvCorrelation => MethodConfig::Custom {
            name: method.to_string(),
            trainable: vec![vec![layers, t, rows, d], vec![t, d]],
            stored: vec![],
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preprompt_reference_row() {
        let r = complexity_accounting(&MethodConfig::reference("preprompt").unwrap());
        assert_eq!((r.delta_p, r.stored), (384_000, 15_360));
        assert_eq!(r.delta_m_mb, 1.523);
    }

    #[test]
    fn zero_tasks_is_free() {
        let r = complexity_accounting(&MethodConfig::Preprompt {
            layers: 5,
            tasks: 0,
            length: 5,
            heads: 12,
            head_dim: 64,
        });
        assert_eq!((r.delta_p, r.stored, r.delta_m_mb), (0, 0, 0.0));
    }

    #[test]
    fn desk_prefix_matches_closed_form() {
        let b = BackboneConfig::default();
        let r = complexity_accounting(&desk_method_config(Method::Preprompt, &LearnerConfig::default(), &b, 5));
        // 3 layers, 2 x 5 rows, 5 tasks, D = 64
        assert_eq!(r.delta_p, 3 * 10 * 5 * 64);
        assert_eq!(r.stored, 5 * 64 * 2);
    }

    #[test]
    fn unknown_method() {
        assert!(matches!(MethodConfig::reference("vpt"), Err(Error::Domain(_))));
    }
}
