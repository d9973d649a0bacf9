use std::fmt;

use serde::Serialize;

use super::{LayerKind, Model};

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerCount {
    pub name: String,
    pub kind: LayerKind,
    /// Base tensors plus adapter tensors.
    pub total: usize,
    pub trainable: usize,
    /// Adapter share of `total`.
    pub adapter: usize,
}

/// Per-layer counts; grand totals are their sums.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamReport {
    pub layers: Vec<LayerCount>,
    pub total: usize,
    pub trainable: usize,
    pub adapter: usize,
    pub head: usize,
}

impl ParamReport {
    pub(crate) fn from_model(m: &Model) -> Self {
        let layers: Vec<LayerCount> = m
            .layers()
            .iter()
            .map(|l| {
                let (mut total, mut trainable, mut adapter) = (0, 0, 0);
                for id in l.params() {
                    let p = m.params().get(id);
                    let n = p.value.numel();
                    total += n;
                    if p.requires_grad {
                        trainable += n;
                    }
                }
                if let Some(a) = &l.adapter {
                    adapter = m.params().get(a.a).value.numel() + m.params().get(a.b).value.numel();
                }
                LayerCount { name: l.name.clone(), kind: l.kind, total, trainable, adapter }
            })
            .collect();
        ParamReport {
            total: layers.iter().map(|l| l.total).sum(),
            trainable: layers.iter().map(|l| l.trainable).sum(),
            adapter: layers.iter().map(|l| l.adapter).sum(),
            head: layers.iter().filter(|l| l.kind == LayerKind::Head).map(|l| l.total).sum(),
            layers,
        }
    }

    pub fn frozen(&self) -> usize {
        self.total - self.trainable
    }
}

impl fmt::Display for ParamReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let w = self.layers.iter().map(|l| l.name.len()).max().unwrap_or(5).max(5);
        writeln!(f, "{:<w$}  {:<15} {:>12} {:>12} {:>10}", "layer", "kind", "total", "trainable", "adapter")?;
        for l in &self.layers {
            writeln!(f, "{:<w$}  {:<15} {:>12} {:>12} {:>10}", l.name, l.kind.as_str(), l.total, l.trainable, l.adapter)?;
        }
        writeln!(f, "total      {}", self.total)?;
        writeln!(f, "trainable  {}", self.trainable)?;
        writeln!(f, "adapter    {}", self.adapter)?;
        write!(f, "head       {}", self.head)
    }
}
