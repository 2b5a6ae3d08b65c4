use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numkernel::Tensor;
use crate::weightsio::WeightArchive;

/// Splits `layer{L}.head{H}.{which}` into its parts.
pub fn parse_head_name(name: &str) -> Option<(usize, usize, &str)> {
    let rest = name.strip_prefix("layer")?;
    let (layer, rest) = rest.split_once(".head")?;
    let (head, which) = rest.split_once('.')?;
    let layer = layer.parse().ok().filter(|_| layer.bytes().all(|b| b.is_ascii_digit()))?;
    let head = head.parse().ok().filter(|_| head.bytes().all(|b| b.is_ascii_digit()))?;
    Some((layer, head, which))
}

/// `(layer, head, W_q W_kᵀ)` for every head with both projections present,
/// ordered by layer then head. `layer` restricts to one layer.
pub fn archive_qk_products(archive: &WeightArchive, layer: Option<usize>) -> Result<Vec<(usize, usize, Tensor)>> {
    let mut pairs: BTreeMap<(usize, usize), (Option<&Tensor>, Option<&Tensor>)> = BTreeMap::new();
    for t in archive.tensors() {
        let Some((l, h, which)) = parse_head_name(&t.name) else { continue };
        if layer.is_some_and(|want| want != l) {
            continue;
        }
        let slot = pairs.entry((l, h)).or_default();
        match which {
            "wq" => slot.0 = Some(&t.tensor),
            "wk" => slot.1 = Some(&t.tensor),
            _ => {}
        }
    }
    let mut out = Vec::with_capacity(pairs.len());
    for ((l, h), pair) in pairs {
        match pair {
            (Some(q), Some(k)) => out.push((l, h, q.matmul(&k.transpose())?)),
            (None, None) => {}
            _ => {
                return Err(Error::Archive {
                    path: "<archive>".into(),
                    msg: format!("layer{l}.head{h} has only one of wq/wk"),
                })
            }
        }
    }
    if out.is_empty() {
        return Err(Error::Archive {
            path: "<archive>".into(),
            msg: "no layer{L}.head{H}.wq / .wk pairs found".into(),
        });
    }
    Ok(out)
}
