//! Query-conditioned detection heads.
//!
//! Every variant maps a query feature `q` (`[1, C]`) and the proposal
//! features of one frame (`[N, C]`) to one independent sigmoid score per
//! proposal and, optionally, per-proposal box deltas.

pub mod attention;
pub mod text;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::features::{FeatureVector, ProposalSet};
use crate::geometry::BBox;
use crate::params::{uniform_with_variance, Bound, LayerNorm, Linear, ParamId, ParamStore};
use attention::AttentionBlock;

pub use text::{embed_title, prompt};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Independent inner product between query and proposal.
    Siam,
    /// The query joins the proposals as an extra token.
    SelfAttention,
    /// Proposals attend to the query token.
    CrossAttention,
    /// Proposal and query concatenated, reduced, then set attention.
    CocoConcat,
    /// Query-generated linear map, then set attention.
    CocoCond,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Siam,
        Variant::SelfAttention,
        Variant::CrossAttention,
        Variant::CocoConcat,
        Variant::CocoCond,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Siam => "siam",
            Variant::SelfAttention => "self_attention",
            Variant::CrossAttention => "cross_attention",
            Variant::CocoConcat => "coco_concat",
            Variant::CocoCond => "coco_cond",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub variant: Variant,
    pub num_heads: usize,
    pub num_attention_layers: usize,
    pub c_out: usize,
    pub use_text: bool,
    pub use_box_refine: bool,
    /// Initial siam temperature.
    pub siam_temperature: f64,
    pub seed: u64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            variant: Variant::CocoCond,
            num_heads: 4,
            num_attention_layers: 2,
            c_out: 64,
            use_text: false,
            use_box_refine: true,
            siam_temperature: 3.0,
            seed: 11,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.c_out == 0 || self.c_out % self.num_heads != 0 {
            return Err(Error::config(format!(
                "head.c_out ({}) must be a positive multiple of head.num_heads ({})",
                self.c_out, self.num_heads
            )));
        }
        Ok(())
    }
}

/// Scores and optional box deltas `(dx, dy, dw, dh)` for each proposal.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    pub scores: Vec<f64>,
    pub deltas: Option<Vec<[f64; 4]>>,
}

impl HeadOutput {
    /// Output boxes: proposals refined by the deltas when present.
    pub fn boxes(&self, pset: &ProposalSet) -> Vec<BBox> {
        match &self.deltas {
            Some(d) => pset
                .proposals
                .iter()
                .zip(d)
                .map(|(p, d)| apply_deltas(&p.bbox, d))
                .collect(),
            None => pset.boxes(),
        }
    }
}

/// Largest log-scale change a delta may request.
pub const MAX_LOG_SCALE: f64 = 4.135;

/// Standard centre/size parameterization.
pub fn apply_deltas(b: &BBox, d: &[f64; 4]) -> BBox {
    let (cx, cy) = b.center();
    let cx = cx + d[0] * b.w;
    let cy = cy + d[1] * b.h;
    let w = b.w * d[2].min(MAX_LOG_SCALE).exp();
    let h = b.h * d[3].min(MAX_LOG_SCALE).exp();
    BBox::new(cx - w / 2.0, cy - h / 2.0, w, h).unwrap_or(*b)
}

/// Inverse of [`apply_deltas`].
pub fn encode_deltas(from: &BBox, to: &BBox) -> [f64; 4] {
    let (fx, fy) = from.center();
    let (tx, ty) = to.center();
    [(tx - fx) / from.w, (ty - fy) / from.h, (to.w / from.w).ln(), (to.h / from.h).ln()]
}

/// `M[o][i] = Σ_c W[o][i][c]·q[c]`, then `y_j = M x_j`, without bias.
/// `w` is the flattened generator of shape `(c_out, c_in, c_cond)`.
pub fn conditional_projection(
    w: &[f64],
    shape: (usize, usize, usize),
    q: &[f64],
    xs: &[FeatureVector],
) -> Result<Vec<FeatureVector>> {
    let (c_out, c_in, c_cond) = shape;
    check_dim("generator", c_out * c_in * c_cond, w.len())?;
    check_dim("condition", c_cond, q.len())?;
    for x in xs {
        check_dim("projection input", c_in, x.len())?;
    }
    let mut g = Graph::new();
    let wv = g.constant(Tensor::matrix(c_out * c_in, c_cond, w.to_vec()));
    let qv = g.constant(Tensor::matrix(c_cond, 1, q.to_vec()));
    let xv = g.constant(Tensor::matrix(
        xs.len(),
        c_in,
        xs.iter().flat_map(|x| x.0.iter().copied()).collect(),
    ));
    let y = project(&mut g, wv, qv, xv, c_out, c_in);
    Ok(g.value(y)
        .data
        .chunks(c_out)
        .map(|r| FeatureVector(r.to_vec()))
        .collect())
}

/// Graph form of the conditional projection: `w` is `[c_out·c_in, c_cond]`,
/// `q` is `[c_cond, 1]`, `x` is `[N, c_in]`; returns `[N, c_out]`.
fn project(g: &mut Graph, w: Var, q: Var, x: Var, c_out: usize, c_in: usize) -> Var {
    let m = g.matmul(w, q);
    let m = g.reshape(m, vec![c_out, c_in]);
    let mt = g.transpose(m);
    g.matmul(x, mt)
}

fn check_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch {
            context,
            expected,
            actual,
        });
    }
    Ok(())
}

#[derive(Debug, Clone)]
enum Body {
    Siam {
        embed: ParamId,
        temperature: ParamId,
    },
    SelfAttention {
        input: Linear,
        token: Linear,
    },
    CrossAttention {
        input: Linear,
        token: Linear,
    },
    CocoConcat {
        reduce: Linear,
    },
    CocoCond {
        generator: ParamId,
    },
}

#[derive(Debug, Clone)]
pub struct Head {
    config: HeadConfig,
    c_in: usize,
    params: ParamStore,
    fuse: Option<Linear>,
    body: Body,
    blocks: Vec<AttentionBlock>,
    final_norm: Option<LayerNorm>,
    classifier: Option<Linear>,
    box_head: Option<Linear>,
}

/// Graph handles of one forward pass.
pub struct HeadVars {
    /// `[N, 1]` probabilities.
    pub scores: Var,
    /// `[N, 4]` deltas when box refinement is on.
    pub deltas: Option<Var>,
}

impl Head {
    /// A head for `c_in`-dimensional features (query, proposals and, with
    /// text fusion, title embeddings all share this dimension).
    pub fn new(config: HeadConfig, c_in: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let c_out = config.c_out;
        let fuse = config
            .use_text
            .then(|| Linear::new(&mut params, "fuse", 2 * c_in, c_in, true, 1.0, &mut rng));
        let attention = |params: &mut ParamStore, rng: &mut ChaCha8Rng| -> Vec<AttentionBlock> {
            (0..config.num_attention_layers)
                .map(|l| AttentionBlock::new(params, &format!("block{l}"), c_out, config.num_heads, 4 * c_out, rng))
                .collect()
        };
        let (body, blocks, feat_dim) = match config.variant {
            Variant::Siam => {
                let mut eye = Tensor::zeros(vec![c_in, c_in]);
                for i in 0..c_in {
                    eye.data[i * c_in + i] = 1.0;
                }
                let embed = params.add("siam.embed", eye);
                let temperature = params.add("siam.temperature", Tensor::vector(vec![config.siam_temperature]));
                (Body::Siam { embed, temperature }, Vec::new(), c_in)
            }
            Variant::SelfAttention | Variant::CrossAttention => {
                let input = Linear::new(&mut params, "input", c_in, c_out, true, 1.0, &mut rng);
                let token = Linear::new(&mut params, "query_token", c_in, c_out, true, 1.0, &mut rng);
                let blocks = attention(&mut params, &mut rng);
                let body = if config.variant == Variant::SelfAttention {
                    Body::SelfAttention { input, token }
                } else {
                    Body::CrossAttention { input, token }
                };
                (body, blocks, c_out)
            }
            Variant::CocoConcat => {
                let reduce = Linear::new(&mut params, "concat.reduce", 2 * c_in, c_out, true, 1.0, &mut rng);
                (Body::CocoConcat { reduce }, attention(&mut params, &mut rng), c_out)
            }
            Variant::CocoCond => {
                let generator = params.add(
                    "cond.generator",
                    uniform_with_variance(&mut rng, vec![c_out * c_in, c_in], 1.0 / (c_in * c_in) as f64),
                );
                (Body::CocoCond { generator }, attention(&mut params, &mut rng), c_out)
            }
        };
        let siam = config.variant == Variant::Siam;
        let final_norm = (!siam).then(|| LayerNorm::new(&mut params, "final_norm", feat_dim));
        let classifier = (!siam).then(|| Linear::new(&mut params, "classifier", feat_dim, 1, true, 1.0, &mut rng));
        let box_head = config.use_box_refine.then(|| {
            let l = Linear::new(&mut params, "box", feat_dim, 4, true, 1.0, &mut rng);
            l.zero(&mut params);
            l
        });
        Ok(Self {
            config,
            c_in,
            params,
            fuse,
            body,
            blocks,
            final_norm,
            classifier,
            box_head,
        })
    }

    pub fn config(&self) -> &HeadConfig {
        &self.config
    }

    pub fn feature_dim(&self) -> usize {
        self.c_in
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Zeroes the classifier so every score is exactly 0.5 (non-siam).
    pub fn zero_classifier(&mut self) {
        if let Some(c) = self.classifier {
            c.zero(&mut self.params);
        }
    }

    /// Zeroes the output layers of every attention block.
    pub fn zero_attention_outputs(&mut self) {
        for b in &self.blocks {
            b.zero_outputs(&mut self.params);
        }
    }

    pub fn generator(&self) -> Option<ParamId> {
        match self.body {
            Body::CocoCond { generator } => Some(generator),
            _ => None,
        }
    }

    pub fn siam_temperature(&self) -> Option<ParamId> {
        match self.body {
            Body::Siam { temperature, .. } => Some(temperature),
            _ => None,
        }
    }

    fn check_inputs(&self, q: &FeatureVector, title: Option<&FeatureVector>, n: usize, dim: usize) -> Result<()> {
        if n == 0 {
            return Err(Error::Empty("proposal set"));
        }
        check_dim("query feature", self.c_in, q.len())?;
        check_dim("proposal feature", self.c_in, dim)?;
        match (self.config.use_text, title) {
            (true, Some(t)) => check_dim("title embedding", self.c_in, t.len()),
            (true, None) => Err(Error::data("head uses text fusion but the query has no title")),
            (false, _) => Ok(()),
        }
    }

    /// Adds the head's computation to `g`. `q` is `[1, C]`, `title` is
    /// `[1, C]` (required with text fusion), `x` is `[N, C]`.
    pub fn forward(&self, g: &mut Graph, bound: &Bound, q: Var, title: Option<Var>, x: Var) -> HeadVars {
        let n = g.value(x).dims2().0;
        let cond = match (self.fuse, title) {
            (Some(f), Some(t)) => {
                let joined = g.concat_cols(&[q, t]);
                f.forward(g, bound, joined)
            }
            _ => q,
        };
        let embedded = match &self.body {
            Body::Siam { embed, temperature } => {
                let e = bound.var(*embed);
                let qe = g.matmul(cond, e);
                let xe = g.matmul(x, e);
                let qn = g.l2_normalize_rows(qe);
                let xn = g.l2_normalize_rows(xe);
                let qt = g.transpose(qn);
                let cos = g.matmul(xn, qt);
                let logits = g.mul_row(cos, bound.var(*temperature));
                let scores = g.sigmoid(logits);
                let deltas = self.box_head.map(|b| b.forward(g, bound, xe));
                return HeadVars { scores, deltas };
            }
            Body::SelfAttention { input, token } => {
                let h = input.forward(g, bound, x);
                let t = token.forward(g, bound, cond);
                let mut z = g.concat_rows(&[h, t]);
                for b in &self.blocks {
                    z = b.forward(g, bound, z, None);
                }
                g.slice_rows(z, 0, n)
            }
            Body::CrossAttention { input, token } => {
                let mut h = input.forward(g, bound, x);
                let t = token.forward(g, bound, cond);
                for b in &self.blocks {
                    h = b.forward(g, bound, h, Some(t));
                }
                h
            }
            Body::CocoConcat { reduce } => {
                let ones = g.constant(Tensor::matrix(n, 1, vec![1.0; n]));
                let qs = g.matmul(ones, cond);
                let joined = g.concat_cols(&[x, qs]);
                let mut h = reduce.forward(g, bound, joined);
                for b in &self.blocks {
                    h = b.forward(g, bound, h, None);
                }
                h
            }
            Body::CocoCond { generator } => {
                let qt = g.transpose(cond);
                let mut h = project(g, bound.var(*generator), qt, x, self.config.c_out, self.c_in);
                for b in &self.blocks {
                    h = b.forward(g, bound, h, None);
                }
                h
            }
        };
        let norm = self.final_norm.expect("attention variants have a final norm");
        let h = norm.forward(g, bound, embedded);
        let logits = self.classifier.expect("attention variants have a classifier").forward(g, bound, h);
        let scores = g.sigmoid(logits);
        let deltas = self.box_head.map(|b| b.forward(g, bound, h));
        HeadVars { scores, deltas }
    }

    /// Scores raw feature rows.
    pub fn score_features(
        &self,
        q: &FeatureVector,
        title: Option<&FeatureVector>,
        features: &[FeatureVector],
    ) -> Result<HeadOutput> {
        let dim = features.first().map_or(self.c_in, FeatureVector::len);
        self.check_inputs(q, title, features.len(), dim)?;
        if let Some(f) = features.iter().find(|f| f.len() != dim) {
            return Err(Error::DimensionMismatch {
                context: "proposal feature",
                expected: dim,
                actual: f.len(),
            });
        }
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g);
        let qv = g.constant(Tensor::matrix(1, self.c_in, q.0.clone()));
        let tv = title
            .filter(|_| self.config.use_text)
            .map(|t| g.constant(Tensor::matrix(1, self.c_in, t.0.clone())));
        let xv = g.constant(Tensor::matrix(
            features.len(),
            dim,
            features.iter().flat_map(|f| f.0.iter().copied()).collect(),
        ));
        let out = self.forward(&mut g, &bound, qv, tv, xv);
        let scores = g.value(out.scores).data.clone();
        let deltas = out.deltas.map(|d| {
            g.value(d)
                .data
                .chunks(4)
                .map(|c| [c[0], c[1], c[2], c[3]])
                .collect()
        });
        Ok(HeadOutput { scores, deltas })
    }

    pub fn score(&self, q: &FeatureVector, title: Option<&FeatureVector>, pset: &ProposalSet) -> Result<HeadOutput> {
        self.score_features(q, title, &pset.features)
    }

    /// Embeddings after the attention stack for raw `[N, c_out]` rows.
    pub fn set_attention(&self, xs: &[FeatureVector]) -> Result<Vec<FeatureVector>> {
        if xs.is_empty() {
            return Err(Error::Empty("attention input"));
        }
        for x in xs {
            check_dim("attention input", self.config.c_out, x.len())?;
        }
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g);
        let mut h = g.constant(Tensor::matrix(
            xs.len(),
            self.config.c_out,
            xs.iter().flat_map(|x| x.0.iter().copied()).collect(),
        ));
        for b in &self.blocks {
            h = b.forward(&mut g, &bound, h, None);
        }
        Ok(g.value(h)
            .data
            .chunks(self.config.c_out)
            .map(|r| FeatureVector(r.to_vec()))
            .collect())
    }
}
