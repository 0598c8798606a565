//! Architecture configuration and named presets.
//!
//! Parameter shapes are generated here, in one place, so initialization,
//! checkpointing, and the analytic parameter count can never disagree.

use serde::{Deserialize, Serialize};

use crate::error::{CamError, Result};
use crate::training::Objective;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub mlp_mult: usize,
    pub num_heads: usize,
    /// Maximum number of positions (the learned positional table size).
    pub max_context: usize,
    /// Embedding dimension d of the modeled sequences.
    pub input_dim: usize,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let all_positive = self.num_layers > 0
            && self.model_dim > 0
            && self.mlp_mult > 0
            && self.num_heads > 0
            && self.max_context > 0
            && self.input_dim > 0;
        if !all_positive {
            return Err(CamError::InvalidConfig(
                "backbone config fields must all be positive".into(),
            ));
        }
        if !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(CamError::InvalidConfig(format!(
                "model_dim {} not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Number of residual MLP blocks.
    pub num_layers: usize,
    pub model_dim: usize,
    pub mlp_mult: usize,
    /// Embedding dimension d (the y input and the output).
    pub input_dim: usize,
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.model_dim == 0 || self.mlp_mult == 0 || self.input_dim == 0
        {
            return Err(CamError::InvalidConfig(
                "sampler config fields must all be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GmmHeadConfig {
    pub num_modes: usize,
    /// Dimension of the conditioning z (= backbone model_dim).
    pub input_dim: usize,
    /// Embedding dimension d.
    pub output_dim: usize,
}

impl GmmHeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_modes == 0 || self.input_dim == 0 || self.output_dim == 0 {
            return Err(CamError::InvalidConfig(
                "gmm head config fields must all be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Head {
    Sampler(SamplerConfig),
    Gmm(GmmHeadConfig),
}

/// Full architecture of one model variant.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub head: Head,
}

/// Width of the sinusoidal sigma embedding, capped so the per-block
/// modulation projections stay a small fraction of the block itself.
pub fn sigma_embed_dim(model_dim: usize) -> usize {
    model_dim.min(256)
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        match &self.head {
            Head::Sampler(s) => {
                s.validate()?;
                if s.input_dim != self.backbone.input_dim {
                    return Err(CamError::InvalidConfig(format!(
                        "sampler input_dim {} != backbone input_dim {}",
                        s.input_dim, self.backbone.input_dim
                    )));
                }
            }
            Head::Gmm(g) => {
                g.validate()?;
                if g.input_dim != self.backbone.model_dim {
                    return Err(CamError::InvalidConfig(format!(
                        "gmm input_dim {} != backbone model_dim {}",
                        g.input_dim, self.backbone.model_dim
                    )));
                }
                if g.output_dim != self.backbone.input_dim {
                    return Err(CamError::InvalidConfig(format!(
                        "gmm output_dim {} != backbone input_dim {}",
                        g.output_dim, self.backbone.input_dim
                    )));
                }
            }
        }
        Ok(())
    }

    /// Every named parameter tensor with its shape, in a fixed order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let b = &self.backbone;
        let (d, dim) = (b.input_dim, b.model_dim);
        let mut out: Vec<(String, Vec<usize>)> = Vec::new();
        let mut p = |name: String, shape: &[usize]| out.push((name, shape.to_vec()));

        p("backbone.input_proj.w".into(), &[dim, d]);
        p("backbone.input_proj.b".into(), &[dim]);
        p("backbone.pos_emb".into(), &[b.max_context, dim]);
        for i in 0..b.num_layers {
            let l = format!("backbone.layer{i:02}");
            p(format!("{l}.ln1.g"), &[dim]);
            p(format!("{l}.ln1.b"), &[dim]);
            p(format!("{l}.attn.qkv.w"), &[3 * dim, dim]);
            p(format!("{l}.attn.qkv.b"), &[3 * dim]);
            p(format!("{l}.attn.out.w"), &[dim, dim]);
            p(format!("{l}.attn.out.b"), &[dim]);
            p(format!("{l}.ln2.g"), &[dim]);
            p(format!("{l}.ln2.b"), &[dim]);
            p(format!("{l}.mlp.fc1.w"), &[b.mlp_mult * dim, dim]);
            p(format!("{l}.mlp.fc1.b"), &[b.mlp_mult * dim]);
            p(format!("{l}.mlp.fc2.w"), &[dim, b.mlp_mult * dim]);
            p(format!("{l}.mlp.fc2.b"), &[dim]);
        }
        p("backbone.final_ln.g".into(), &[dim]);
        p("backbone.final_ln.b".into(), &[dim]);
        p("z_sos".into(), &[dim]);

        match &self.head {
            Head::Sampler(s) => {
                let sd = s.model_dim;
                let e = sigma_embed_dim(sd);
                p("sampler.sigma_mlp.fc1.w".into(), &[e, e]);
                p("sampler.sigma_mlp.fc1.b".into(), &[e]);
                p("sampler.sigma_mlp.fc2.w".into(), &[e, e]);
                p("sampler.sigma_mlp.fc2.b".into(), &[e]);
                p("sampler.input_proj.w".into(), &[sd, dim + d]);
                p("sampler.input_proj.b".into(), &[sd]);
                for i in 0..s.num_layers {
                    let l = format!("sampler.block{i:02}");
                    p(format!("{l}.mod.w"), &[3 * sd, e]);
                    p(format!("{l}.mod.b"), &[3 * sd]);
                    p(format!("{l}.mlp.fc1.w"), &[s.mlp_mult * sd, sd]);
                    p(format!("{l}.mlp.fc1.b"), &[s.mlp_mult * sd]);
                    p(format!("{l}.mlp.fc2.w"), &[sd, s.mlp_mult * sd]);
                    p(format!("{l}.mlp.fc2.b"), &[sd]);
                }
                p("sampler.final_mod.w".into(), &[2 * sd, e]);
                p("sampler.final_mod.b".into(), &[2 * sd]);
                p("sampler.out.w".into(), &[d, sd]);
                p("sampler.out.b".into(), &[d]);
            }
            Head::Gmm(g) => {
                let rows = g.num_modes + 2 * g.num_modes * g.output_dim;
                p("gmm.head.w".into(), &[rows, g.input_dim]);
                p("gmm.head.b".into(), &[rows]);
            }
        }
        out
    }

    /// Total learnable parameter count, computed from shapes alone.
    pub fn param_count(&self) -> u64 {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>() as u64)
            .sum()
    }
}

/// Named architecture scales. `Tiny` is what the test suite trains; `Desk`
/// is the default working scale; `Paper150m` exists to pin the full-scale
/// parameter count and is never trained here.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
#[clap(rename_all = "kebab-case")]
pub enum Preset {
    Tiny,
    Desk,
    Paper150m,
}

impl Preset {
    pub fn backbone(self) -> BackboneConfig {
        match self {
            Preset::Tiny => BackboneConfig {
                num_layers: 2,
                model_dim: 64,
                mlp_mult: 2,
                num_heads: 4,
                max_context: 64,
                input_dim: 8,
            },
            Preset::Desk => BackboneConfig {
                num_layers: 4,
                model_dim: 128,
                mlp_mult: 4,
                num_heads: 4,
                max_context: 64,
                input_dim: 8,
            },
            Preset::Paper150m => BackboneConfig {
                num_layers: 16,
                model_dim: 768,
                mlp_mult: 4,
                num_heads: 4,
                max_context: 128,
                input_dim: 64,
            },
        }
    }

    pub fn sampler(self) -> SamplerConfig {
        let b = self.backbone();
        let num_layers = match self {
            Preset::Tiny => 2,
            Preset::Desk => 3,
            Preset::Paper150m => 8,
        };
        SamplerConfig {
            num_layers,
            model_dim: b.model_dim,
            mlp_mult: b.mlp_mult,
            input_dim: b.input_dim,
        }
    }

    /// Models without a Sampler get proportionally deeper backbones (21/16,
    /// the full-scale ratio) so parameter budgets stay comparable.
    fn gmm_backbone(self) -> BackboneConfig {
        let mut b = self.backbone();
        b.num_layers = ((b.num_layers as f64) * 21.0 / 16.0).round() as usize;
        b
    }

    /// Architecture for one training objective. `num_modes` only affects
    /// mixture-head models.
    pub fn model_config(self, objective: Objective, num_modes: usize) -> ModelConfig {
        if objective.uses_gmm_head() {
            let backbone = self.gmm_backbone();
            let head = Head::Gmm(GmmHeadConfig {
                num_modes,
                input_dim: backbone.model_dim,
                output_dim: backbone.input_dim,
            });
            ModelConfig { backbone, head }
        } else {
            ModelConfig {
                backbone: self.backbone(),
                head: Head::Sampler(self.sampler()),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for preset in [Preset::Tiny, Preset::Desk, Preset::Paper150m] {
            for (objective, modes) in [
                (Objective::Cam, 0usize),
                (Objective::MarLinear, 0),
                (Objective::Givt, 8),
                (Objective::GivtNoise, 32),
            ] {
                let modes = modes.max(1);
                preset.model_config(objective, modes).validate().unwrap();
            }
        }
    }

    #[test]
    fn paper_preset_parameter_count_near_150m() {
        let cfg = Preset::Paper150m.model_config(Objective::Cam, 1);
        let count = cfg.param_count() as f64;
        let rel = (count - 150e6).abs() / 150e6;
        assert!(rel <= 0.10, "param count {count} off by {:.1}%", rel * 100.0);
    }

    #[test]
    fn paper_preset_gmm_variants_also_near_150m() {
        // Sampler-less models trade the Sampler for 21 backbone layers.
        for modes in [8usize, 32] {
            let cfg = Preset::Paper150m.model_config(Objective::Givt, modes);
            assert_eq!(cfg.backbone.num_layers, 21);
            let count = cfg.param_count() as f64;
            let rel = (count - 150e6).abs() / 150e6;
            assert!(rel <= 0.10, "{modes} modes: {count} off by {:.1}%", rel * 100.0);
        }
    }

    #[test]
    fn param_count_matches_hand_count_on_a_small_config() {
        let cfg = ModelConfig {
            backbone: BackboneConfig {
                num_layers: 1,
                model_dim: 4,
                mlp_mult: 2,
                num_heads: 2,
                max_context: 3,
                input_dim: 2,
            },
            head: Head::Gmm(GmmHeadConfig {
                num_modes: 2,
                input_dim: 4,
                output_dim: 2,
            }),
        };
        // input_proj 4*2+4, pos 3*4, ln1 8, qkv 12*4+12, out 4*4+4, ln2 8,
        // fc1 8*4+8, fc2 4*8+4, final_ln 8, z_sos 4, gmm (2+8)*4+10.
        let expect = (4 * 2 + 4)
            + 3 * 4
            + 8
            + (12 * 4 + 12)
            + (4 * 4 + 4)
            + 8
            + (8 * 4 + 8)
            + (4 * 8 + 4)
            + 8
            + 4
            + (10 * 4 + 10);
        assert_eq!(cfg.param_count(), expect as u64);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut b = Preset::Tiny.backbone();
        b.model_dim = 65;
        assert!(b.validate().is_err(), "non-divisible heads");
        let mut cfg = Preset::Tiny.model_config(Objective::Givt, 8);
        if let Head::Gmm(g) = &mut cfg.head {
            g.output_dim = 9;
        }
        assert!(cfg.validate().is_err(), "gmm output dim mismatch");
    }
}
