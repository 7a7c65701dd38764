//! Whole-model gradient verification against central differences.

use serde::{Deserialize, Serialize};

use crate::autodiff::{central_differences, max_relative_error, Var};
use crate::error::{Error, Result};
use crate::model::{forward_graph, heatmap_loss, ModelConfig, ModelParams, Sample, Variant};
use crate::tensor::Tensor;

/// Largest input side the check accepts; every parameter is probed twice.
pub const MAX_SIDE: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckOptions {
    pub eps: f64,
    pub variant: Variant,
    /// Test hook: add this amount to the first element of the named
    /// parameter's analytic gradient.
    pub corrupt: Option<(String, f64)>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            variant: Variant::MultiGrained,
            corrupt: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCheck {
    pub name: String,
    pub elements: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_err: f64,
    pub worst: String,
}

impl GradcheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Checks the gradient of the heatmap loss with respect to every parameter.
/// Pruning decisions are taken at the unperturbed point and replayed for all
/// probes, so the loss is a smooth function of the weights.
pub fn check_model(cfg: &ModelConfig, params: &ModelParams, sample: &Sample, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    if cfg.image_height > MAX_SIDE || cfg.image_width > MAX_SIDE {
        return Err(Error::Argument(format!(
            "gradient check is limited to {MAX_SIDE}x{MAX_SIDE} inputs, got {}x{}",
            cfg.image_height, cfg.image_width
        )));
    }
    if let Some((name, _)) = &opts.corrupt {
        if params.get(name).is_none() {
            return Err(Error::Argument(format!("unknown parameter {name}")));
        }
    }
    let target = Var::constant(sample.target.maps.clone());

    let bound = params.trainable();
    let out = forward_graph(&sample.triplet, cfg, &bound, opts.variant, None)?;
    let frozen = out.selections;
    heatmap_loss(&out.heatmap, &target)?.backward()?;
    let mut analytic = Vec::new();
    bound.for_each(&mut |name, v| {
        let mut g = v.grad().unwrap_or_else(|| Tensor::zeros(v.shape()));
        if let Some((target_name, delta)) = &opts.corrupt {
            if target_name == name {
                g.data_mut()[0] += delta;
            }
        }
        analytic.push((name.to_string(), g));
    });

    let base = params.constants();
    let mut checks = Vec::with_capacity(analytic.len());
    for (name, grad) in analytic {
        let x = params.get(&name).expect("name from the same tree");
        let numeric = central_differences(
            |probe| {
                let mut probe = Some(probe);
                let p = base.map(&mut |n, v| {
                    if n == name {
                        Var::constant(probe.take().expect("one leaf per name"))
                    } else {
                        v.clone()
                    }
                });
                let out = forward_graph(&sample.triplet, cfg, &p, opts.variant, Some(&frozen))?;
                Ok(heatmap_loss(&out.heatmap, &target)?.value().item())
            },
            &x,
            opts.eps,
        )?;
        checks.push(ParamCheck {
            elements: x.numel(),
            max_rel_err: max_relative_error(&grad, &numeric),
            name,
        });
    }
    let worst = checks
        .iter()
        .fold(None::<&ParamCheck>, |acc, c| match acc {
            Some(a) if a.max_rel_err >= c.max_rel_err => Some(a),
            _ => Some(c),
        })
        .expect("model has parameters");
    Ok(GradcheckReport {
        max_rel_err: worst.max_rel_err,
        worst: worst.name.clone(),
        params: checks,
    })
}
