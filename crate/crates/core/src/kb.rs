//! Append-only knowledge base of (signature, LoRA value) pairs with
//! parameter-free task retrieval and versioned JSON persistence.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, LoraOverlay};
use crate::error::{Error, Result};
use crate::lda::LdaStats;
use crate::linalg;
use crate::lora::{compose_update, LoraLayer, LoraUnit, TransferCoefficients};
use crate::signature::{GaussianComponent, MultiKeySignature};

pub const FORMAT_VERSION: u32 = 1;

/// How a test embedding is scored against a component during retrieval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScoreRule {
    /// `(h−m)ᵀΛ⁻¹(h−m)`.
    #[default]
    Mahalanobis,
    /// `(h−m)ᵀΛ⁻¹(h−m) + log|Λ| − 2 log π`, i.e. `−2 log(π N(h))` up to a
    /// constant. Agrees exactly with top-1 likelihood retrieval.
    Loglik,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KbEntry {
    pub task: usize,
    pub ordinal: usize,
    pub multikey: MultiKeySignature,
    pub unit: LoraUnit,
    /// Coefficients over the units of all earlier entries.
    pub transfer: TransferCoefficients,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KbMeta {
    pub d: usize,
    pub seed: u64,
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Retrieval {
    /// Entry index (commit order).
    pub entry: usize,
    pub task: usize,
    pub component: usize,
    pub score: f64,
}

#[derive(Debug, Clone)]
pub struct KnowledgeBase {
    backbone: Backbone,
    entries: Vec<KbEntry>,
    lda: LdaStats,
    meta: KbMeta,
    /// Backbone with each entry's overlay baked in; derived, never stored.
    adapted: Vec<Backbone>,
}

impl PartialEq for KnowledgeBase {
    fn eq(&self, other: &Self) -> bool {
        self.backbone == other.backbone
            && self.entries == other.entries
            && self.lda == other.lda
            && self.meta == other.meta
    }
}

impl KnowledgeBase {
    pub fn new(backbone: Backbone, lda: LdaStats, meta: KbMeta) -> Result<Self> {
        if lda.dim() != backbone.embedding_dim() {
            return Err(Error::Shape(format!(
                "LDA dim {} differs from embedding dim {}",
                lda.dim(),
                backbone.embedding_dim()
            )));
        }
        Ok(KnowledgeBase {
            backbone,
            entries: Vec::new(),
            lda,
            meta,
            adapted: Vec::new(),
        })
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn entries(&self) -> &[KbEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn lda(&self) -> &LdaStats {
        &self.lda
    }

    pub fn lda_mut(&mut self) -> &mut LdaStats {
        &mut self.lda
    }

    pub fn meta(&self) -> &KbMeta {
        &self.meta
    }

    pub fn units(&self) -> Vec<LoraUnit> {
        self.entries.iter().map(|e| e.unit.clone()).collect()
    }

    /// Backbone with entry `i`'s full update applied.
    pub fn adapted(&self, entry: usize) -> &Backbone {
        &self.adapted[entry]
    }

    pub fn overlay(&self, entry: usize) -> Result<LoraOverlay> {
        let past: Vec<LoraUnit> = self.entries[..entry].iter().map(|e| e.unit.clone()).collect();
        let e = &self.entries[entry];
        compose_update(&past, &e.transfer, &e.unit)
    }

    pub fn position(&self, task: usize) -> Option<usize> {
        self.entries.iter().position(|e| e.task == task)
    }

    /// Appends an entry. The signature must have been fitted on embeddings
    /// produced under this value's overlay.
    pub fn commit_task(
        &mut self,
        multikey: MultiKeySignature,
        unit: LoraUnit,
        transfer: TransferCoefficients,
    ) -> Result<()> {
        let task = multikey.task;
        if unit.task != task {
            return Err(Error::Data(format!(
                "signature is for task {task}, LoRA unit for task {}",
                unit.task
            )));
        }
        if self.position(task).is_some() {
            return Err(Error::DuplicateTask(task));
        }
        if multikey.dim() != self.backbone.embedding_dim() {
            return Err(Error::Shape(format!(
                "signature dim {} differs from embedding dim {}",
                multikey.dim(),
                self.backbone.embedding_dim()
            )));
        }
        let past: Vec<LoraUnit> = self.entries.iter().map(|e| e.unit.clone()).collect();
        let overlay = compose_update(&past, &transfer, &unit)?;
        let adapted = self.backbone.adapted(&overlay)?;
        self.entries.push(KbEntry {
            task,
            ordinal: self.entries.len(),
            multikey,
            unit,
            transfer,
        });
        self.adapted.push(adapted);
        Ok(())
    }

    fn check_input(&self, x: &DVector<f64>) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::EmptyKnowledgeBase);
        }
        if x.len() != self.backbone.input_dim() {
            return Err(Error::Shape(format!(
                "input has dim {}, backbone expects {}",
                x.len(),
                self.backbone.input_dim()
            )));
        }
        Ok(())
    }

    /// Embedding of `x` under every entry's own overlay.
    pub fn embed_all(&self, x: &DVector<f64>) -> Result<Vec<DVector<f64>>> {
        self.check_input(x)?;
        self.adapted.iter().map(|b| b.embed(x, None)).collect()
    }

    /// Global argmin of the signature score over all (entry, component)
    /// pairs; ties go to the lowest entry, then the lowest component.
    pub fn retrieve(&self, x: &DVector<f64>, rule: ScoreRule) -> Result<Retrieval> {
        let hs = self.embed_all(x)?;
        self.retrieve_embedded(&hs, rule)
    }

    /// [`retrieve`](Self::retrieve) on precomputed per-entry embeddings.
    pub fn retrieve_embedded(&self, hs: &[DVector<f64>], rule: ScoreRule) -> Result<Retrieval> {
        if self.entries.is_empty() {
            return Err(Error::EmptyKnowledgeBase);
        }
        let mut best: Option<Retrieval> = None;
        for (k, (e, h)) in self.entries.iter().zip(hs).enumerate() {
            for (t, c) in e.multikey.components().iter().enumerate() {
                let score = component_score(h, c, rule)?;
                if best.is_none_or(|b| score < b.score) {
                    best = Some(Retrieval {
                        entry: k,
                        task: e.task,
                        component: t,
                        score,
                    });
                }
            }
        }
        best.ok_or_else(|| Error::Numerical("no finite retrieval score".into()))
    }

    /// Task whose `k` largest weighted component likelihoods sum highest.
    pub fn retrieve_topk(&self, x: &DVector<f64>, k: usize) -> Result<usize> {
        let hs = self.embed_all(x)?;
        self.retrieve_topk_embedded(&hs, k)
    }

    pub fn retrieve_topk_embedded(&self, hs: &[DVector<f64>], k: usize) -> Result<usize> {
        if k < 1 {
            return Err(Error::Config("top-K needs K >= 1".into()));
        }
        if self.entries.is_empty() {
            return Err(Error::EmptyKnowledgeBase);
        }
        let mut best = (0usize, f64::NEG_INFINITY);
        for (e, h) in self.entries.iter().zip(hs) {
            let agg = topk_log_likelihood(h, &e.multikey, k)?;
            if agg > best.1 {
                best = (e.task, agg);
            }
        }
        Ok(best.0)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        let file = KbFile::from_kb(self);
        let mut s = serde_json::to_string_pretty(&file)
            .map_err(|e| Error::Numerical(format!("cannot serialize knowledge base: {e}")))?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Malformed(e.to_string()))?;
        match value.get("version") {
            Some(v) if v.as_u64() == Some(FORMAT_VERSION as u64) => {}
            Some(v) => {
                return Err(Error::Version {
                    found: v.to_string(),
                    expected: FORMAT_VERSION,
                })
            }
            None => {
                return Err(Error::Version {
                    found: "none".into(),
                    expected: FORMAT_VERSION,
                })
            }
        }
        let file: KbFile = serde_json::from_value(value).map_err(|e| Error::Malformed(e.to_string()))?;
        file.into_kb()
    }
}

/// Lower is better.
pub fn component_score(h: &DVector<f64>, c: &GaussianComponent, rule: ScoreRule) -> Result<f64> {
    let q = crate::signature::signature_score(h, c)?;
    Ok(match rule {
        ScoreRule::Mahalanobis => q,
        ScoreRule::Loglik => q + c.log_volume() - 2.0 * c.weight().ln(),
    })
}

/// `log Σ_{top k} π_t N(h; m_t, Λ_t)`, with `k` clamped to the component count.
pub fn topk_log_likelihood(h: &DVector<f64>, sig: &MultiKeySignature, k: usize) -> Result<f64> {
    let mut logs: Vec<f64> = sig
        .components()
        .iter()
        .map(|c| Ok(c.weight().ln() + c.log_density(h)?))
        .collect::<Result<_>>()?;
    logs.sort_by(|a, b| b.total_cmp(a));
    logs.truncate(k.min(logs.len()));
    let max = logs[0];
    if max == f64::NEG_INFINITY {
        return Ok(max);
    }
    Ok(max + logs.iter().map(|v| (v - max).exp()).sum::<f64>().ln())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct KbFile {
    version: u32,
    backbone: BackboneFile,
    entries: Vec<EntryFile>,
    lda: LdaFile,
    meta: KbMeta,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BackboneFile {
    dims: Vec<usize>,
    layers: Vec<LayerFile>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerFile {
    weight: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EntryFile {
    task: usize,
    ordinal: usize,
    multikey: MultiKeyFile,
    value: ValueFile,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MultiKeyFile {
    components: Vec<ComponentFile>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ComponentFile {
    weight: f64,
    mean: Vec<f64>,
    cov: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ValueFile {
    layers: Vec<ValueLayerFile>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ValueLayerFile {
    #[serde(rename = "B")]
    b: Vec<Vec<f64>>,
    #[serde(rename = "A")]
    a: Vec<Vec<f64>>,
    #[serde(rename = "S_diag_blocks")]
    s_diag_blocks: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LdaFile {
    #[serde(rename = "G")]
    g: Vec<Vec<f64>>,
    e_by_class: Vec<Vec<f64>>,
    gamma: f64,
    counts: Vec<u64>,
    tasks_seen: usize,
}

impl KbFile {
    fn from_kb(kb: &KnowledgeBase) -> Self {
        KbFile {
            version: FORMAT_VERSION,
            backbone: BackboneFile {
                dims: kb.backbone.dims().to_vec(),
                layers: kb
                    .backbone
                    .layers()
                    .iter()
                    .map(|l| LayerFile {
                        weight: linalg::to_rows(l.weight()),
                        bias: l.bias().iter().copied().collect(),
                    })
                    .collect(),
            },
            entries: kb
                .entries
                .iter()
                .map(|e| EntryFile {
                    task: e.task,
                    ordinal: e.ordinal,
                    multikey: MultiKeyFile {
                        components: e
                            .multikey
                            .components()
                            .iter()
                            .map(|c| ComponentFile {
                                weight: c.weight(),
                                mean: c.mean().iter().copied().collect(),
                                cov: linalg::to_rows(c.cov()),
                            })
                            .collect(),
                    },
                    value: ValueFile {
                        layers: e
                            .unit
                            .layers
                            .iter()
                            .enumerate()
                            .map(|(l, lay)| ValueLayerFile {
                                b: linalg::to_rows(&lay.b),
                                a: linalg::to_rows(&lay.a),
                                s_diag_blocks: if e.transfer.layers() == 0 {
                                    Vec::new()
                                } else {
                                    e.transfer.blocks()[l]
                                        .iter()
                                        .map(|s| s.iter().copied().collect())
                                        .collect()
                                },
                            })
                            .collect(),
                    },
                })
                .collect(),
            lda: LdaFile {
                g: linalg::to_rows(kb.lda.gram()),
                e_by_class: kb
                    .lda
                    .class_sums()
                    .iter()
                    .map(|e| e.iter().copied().collect())
                    .collect(),
                gamma: kb.lda.gamma(),
                counts: kb.lda.counts().to_vec(),
                tasks_seen: kb.lda.tasks_seen(),
            },
            meta: kb.meta.clone(),
        }
    }

    fn into_kb(self) -> Result<KnowledgeBase> {
        if self.backbone.layers.len() + 1 != self.backbone.dims.len() {
            return Err(Error::Malformed("backbone dims do not match layer count".into()));
        }
        let parts = self
            .backbone
            .layers
            .into_iter()
            .enumerate()
            .map(|(i, l)| {
                let w = linalg::from_rows(&l.weight, &format!("backbone layer {i}"))?;
                Ok((w, DVector::from_vec(l.bias)))
            })
            .collect::<Result<Vec<_>>>()?;
        let backbone = Backbone::from_parts(parts)?;
        if backbone.dims() != self.backbone.dims.as_slice() {
            return Err(Error::Malformed("backbone dims do not match weights".into()));
        }
        let d = backbone.embedding_dim();
        if self.meta.d != d {
            return Err(Error::Shape(format!("meta.d = {} but embeddings have dim {d}", self.meta.d)));
        }
        let gram = linalg::from_rows_with_cols(&self.lda.g, d, "lda G")?;
        if gram.nrows() != d {
            return Err(Error::Shape("lda G has the wrong size".into()));
        }
        let sums = self
            .lda
            .e_by_class
            .into_iter()
            .map(|e| {
                if e.len() != d {
                    return Err(Error::Shape("lda class vector has the wrong size".into()));
                }
                Ok(DVector::from_vec(e))
            })
            .collect::<Result<Vec<_>>>()?;
        let lda = LdaStats::from_parts(gram, sums, self.lda.counts, self.lda.tasks_seen, self.lda.gamma)?;
        let mut kb = KnowledgeBase::new(backbone, lda, self.meta)?;
        let shapes = kb.backbone.layer_shapes();
        for (i, e) in self.entries.into_iter().enumerate() {
            if e.ordinal != i {
                return Err(Error::Malformed(format!("entry {i} has ordinal {}", e.ordinal)));
            }
            let task = e.task;
            let build = || -> Result<(MultiKeySignature, LoraUnit, TransferCoefficients)> {
                let components = e
                    .multikey
                    .components
                    .into_iter()
                    .map(|c| {
                        if c.mean.len() != d {
                            return Err(Error::Shape("component mean has the wrong size".into()));
                        }
                        let cov = linalg::from_rows_with_cols(&c.cov, d, "component cov")?;
                        GaussianComponent::new(c.weight, DVector::from_vec(c.mean), cov)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let multikey = MultiKeySignature::new(task, components)?;
                if e.value.layers.len() != shapes.len() {
                    return Err(Error::Shape("LoRA value has the wrong layer count".into()));
                }
                let mut layers = Vec::with_capacity(shapes.len());
                let mut blocks = Vec::with_capacity(shapes.len());
                for (l, lay) in e.value.layers.into_iter().enumerate() {
                    let (p, q) = shapes[l];
                    let rank = lay.b.first().map_or(0, Vec::len);
                    let b = linalg::from_rows_with_cols(&lay.b, rank, "B")?;
                    let a = linalg::from_rows_with_cols(&lay.a, rank, "A")?;
                    if b.nrows() != p || a.nrows() != q {
                        return Err(Error::Shape(format!("layer {l}: LoRA factors do not fit the backbone")));
                    }
                    layers.push(LoraLayer::new(b, a)?);
                    blocks.push(
                        lay.s_diag_blocks
                            .into_iter()
                            .map(DVector::from_vec)
                            .collect::<Vec<_>>(),
                    );
                }
                let transfer = TransferCoefficients::from_blocks(blocks);
                Ok((multikey, LoraUnit { task, layers }, transfer))
            };
            let (multikey, unit, transfer) = build().map_err(|err| Error::in_task(task, err))?;
            kb.commit_task(multikey, unit, transfer)
                .map_err(|err| Error::in_task(task, err))?;
        }
        Ok(kb)
    }
}

/// Convenience for tests and examples: a KB with an identity-like backbone.
pub fn identity_backbone(d: usize) -> Result<Backbone> {
    Backbone::from_parts(vec![(DMatrix::identity(d, d), DVector::zeros(d))])
}
