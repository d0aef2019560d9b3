//! Neuron list syntax for `--neurons`.
//!
//! ```text
//! presoftmax:0..9         logits units 0 through 9 (inclusive)
//! postsoftmax:3,7         softmax probabilities of units 3 and 7
//! layer0:0..5@12,12       conv1 channels 0-5 at output position (12, 12)
//! layer10:4:post          unit 4 of the LeNet logits layer, after softmax
//! ```

use anyhow::{anyhow, bail, Result};
use ldam_core::model::{ModelArch, Stage};
use ldam_core::NeuronRef;

/// One line per layer: index, kind and per-sample output shape.
pub fn layer_table(arch: &ModelArch) -> String {
    let shapes = arch.layer_shapes().unwrap_or_default();
    let mut out = String::new();
    for (i, (layer, shape)) in arch.layers.iter().zip(shapes).enumerate() {
        let mark = if i == arch.logits_layer() { "  (logits: presoftmax/postsoftmax)" } else { "" };
        out.push_str(&format!("  layer{i}: {} -> {shape:?}{mark}\n", layer.name()));
    }
    out
}

fn parse_units(s: &str) -> Result<Vec<usize>> {
    let mut units = Vec::new();
    for part in s.split(',').filter(|p| !p.is_empty()) {
        match part.split_once("..") {
            Some((a, b)) => {
                let (a, b): (usize, usize) = (a.trim().parse()?, b.trim().parse()?);
                if b < a {
                    bail!("empty range {part}");
                }
                units.extend(a..=b);
            }
            None => units.push(part.trim().parse()?),
        }
    }
    if units.is_empty() {
        bail!("no units given");
    }
    Ok(units)
}

fn parse_one(spec: &str, arch: &ModelArch) -> Result<Vec<NeuronRef>> {
    let logits = arch.logits_layer();
    let (layer_index, rest, default_stage) = if let Some(r) = spec.strip_prefix("presoftmax:") {
        (logits, r, Stage::PreSoftmax)
    } else if let Some(r) = spec.strip_prefix("postsoftmax:") {
        (logits, r, Stage::PostSoftmax)
    } else if let Some(r) = spec.strip_prefix("layer") {
        let (l, r) = r.split_once(':').ok_or_else(|| anyhow!("missing ':' after layer index"))?;
        (l.parse()?, r, Stage::PreSoftmax)
    } else {
        bail!("expected presoftmax:, postsoftmax: or layer<L>:");
    };
    let (rest, stage) = match rest.strip_suffix(":post") {
        Some(r) => (r, Stage::PostSoftmax),
        None => (rest.strip_suffix(":pre").unwrap_or(rest), default_stage),
    };
    let (units, spatial) = match rest.split_once('@') {
        Some((u, pos)) => {
            let (r, c) = pos.split_once(',').ok_or_else(|| anyhow!("position must be row,col"))?;
            (u, Some((r.parse()?, c.parse()?)))
        }
        None => (rest, None),
    };
    parse_units(units)?
        .into_iter()
        .map(|unit| {
            let n = NeuronRef {
                layer_index,
                unit,
                spatial,
                stage,
            };
            n.flat_index(arch)?;
            Ok(n)
        })
        .collect()
}

/// Parses every spec, failing with the model's layer table on any error.
pub fn parse_neurons(specs: &[String], arch: &ModelArch) -> Result<Vec<NeuronRef>> {
    let mut out = Vec::new();
    for s in specs {
        match parse_one(s, arch) {
            Ok(v) => out.extend(v),
            Err(e) => bail!(
                "invalid neuron spec `{s}`: {e}\nvalid layers for {}:\n{}",
                arch.name,
                layer_table(arch)
            ),
        }
    }
    Ok(out)
}
