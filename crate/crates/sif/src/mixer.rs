//! Backbone state: target projections, recency embeddings, the stack of
//! factored attention blocks, the prediction head, and the alternative
//! history encoders used by the ablation variants.

use crate::error::{Result, SifError};
use crate::schema::{derive_partition, FeatureSchema, FieldKind, Group, SubTokenSlot};
use crate::tensor::Tensor;
use crate::tokenizer::ParamKind;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const LN_EPS: f64 = 1e-5;

/// Attention strategy over the (L+1) x T hidden state.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Backbone {
    /// Row attention over sub-tokens, then column attention over samples.
    Factored,
    /// One attention over all (L+1)*T flattened positions.
    Flat,
    /// Sub-tokens mean-pooled per sample before the blocks; attention over
    /// the L+1 pooled vectors only.
    Pooled,
}

/// How a history event becomes a sequence row.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HistoryEncoding {
    /// Tokenized sample: codebook lookups over T sub-token slots.
    Hgaq,
    /// Bare item-ID embedding.
    ItemId,
    /// Item-ID embedding concatenated with the item-group fields, projected.
    ItemKey,
    /// All fields concatenated and densely projected, no quantization.
    DenseRaw,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Variant {
    pub backbone: Backbone,
    pub history: HistoryEncoding,
}

impl Variant {
    pub fn parse(name: &str) -> Result<Variant> {
        let v = match name {
            "full" => Variant {
                backbone: Backbone::Factored,
                history: HistoryEncoding::Hgaq,
            },
            "item_id_only" => Variant {
                backbone: Backbone::Pooled,
                history: HistoryEncoding::ItemId,
            },
            "item_plus_key" => Variant {
                backbone: Backbone::Pooled,
                history: HistoryEncoding::ItemKey,
            },
            "dense_raw" => Variant {
                backbone: Backbone::Factored,
                history: HistoryEncoding::DenseRaw,
            },
            "flat_attn" => Variant {
                backbone: Backbone::Flat,
                history: HistoryEncoding::Hgaq,
            },
            "pooled" => Variant {
                backbone: Backbone::Pooled,
                history: HistoryEncoding::Hgaq,
            },
            other => {
                return Err(SifError::Data(format!(
                    "unknown variant {:?} (expected full, item_id_only, item_plus_key, \
                     dense_raw, flat_attn, pooled)",
                    other
                )))
            }
        };
        Ok(v)
    }

    pub fn name(&self) -> &'static str {
        match (self.backbone, self.history) {
            (Backbone::Factored, HistoryEncoding::Hgaq) => "full",
            (Backbone::Pooled, HistoryEncoding::ItemId) => "item_id_only",
            (Backbone::Pooled, HistoryEncoding::ItemKey) => "item_plus_key",
            (Backbone::Factored, HistoryEncoding::DenseRaw) => "dense_raw",
            (Backbone::Flat, HistoryEncoding::Hgaq) => "flat_attn",
            (Backbone::Pooled, HistoryEncoding::Hgaq) => "pooled",
            _ => "custom",
        }
    }

    /// Whether the tokenizer (quantization path and its losses) is in play.
    pub fn uses_tokenizer(&self) -> bool {
        self.history == HistoryEncoding::Hgaq
    }

    pub fn all_names() -> [&'static str; 6] {
        [
            "full",
            "item_id_only",
            "item_plus_key",
            "dense_raw",
            "flat_attn",
            "pooled",
        ]
    }
}

#[derive(Clone, Debug)]
pub struct BlockParams {
    pub tok_wq: Tensor,
    pub tok_wk: Tensor,
    pub tok_wv: Tensor,
    pub tok_wo: Tensor,
    pub tok_ln_g: Tensor,
    pub tok_ln_b: Tensor,
    pub smp_wq: Tensor,
    pub smp_wk: Tensor,
    pub smp_wv: Tensor,
    pub smp_wo: Tensor,
    pub smp_ln_g: Tensor,
    pub smp_ln_b: Tensor,
    pub ffn_w1: Tensor,
    pub ffn_b1: Tensor,
    pub ffn_w2: Tensor,
    pub ffn_b2: Tensor,
    pub ffn_ln_g: Tensor,
    pub ffn_ln_b: Tensor,
}

pub const BLOCK_PARAM_COUNT: usize = 18;

#[derive(Clone, Debug)]
pub struct MixerState {
    pub d0: usize,
    pub t: usize,
    pub heads: usize,
    pub l_max: usize,
    pub n_blocks: usize,
    pub schema_hash: u64,
    pub variant: Variant,
    /// Per-slot target projection (raw_width, d0); no recency term on row 0.
    pub w_res: Vec<Tensor>,
    /// Recency table (l_max + 1, t*d0); history row l receives row L-l.
    pub p_table: Tensor,
    pub blocks: Vec<BlockParams>,
    pub head_w1: Tensor,
    pub head_b1: Tensor,
    pub head_w2: Tensor,
    pub head_b2: Tensor,
    /// (item-id cardinality, d0); ItemId/ItemKey variants.
    pub id_embed: Option<Tensor>,
    /// (d0 + item-group width, d0); ItemKey variant.
    pub key_proj: Option<Tensor>,
    /// (total field width, t*d0); DenseRaw variant.
    pub dense_proj: Option<Tensor>,
}

/// Cardinality of the categorical field named `item_id`, required by the
/// ItemId/ItemKey history encoders.
pub fn item_id_cardinality(schema: &FeatureSchema) -> Result<usize> {
    schema
        .fields
        .iter()
        .find_map(|f| match (&f.name[..], &f.kind) {
            ("item_id", FieldKind::Categorical { cardinality }) => Some(*cardinality as usize),
            _ => None,
        })
        .ok_or_else(|| {
            SifError::Schema(
                "this variant needs a categorical field named item_id in the schema".into(),
            )
        })
}

/// Widths of the item-group fields (the "key features" of the ItemKey
/// variant), excluding the item_id identifier itself.
pub fn key_field_indices(schema: &FeatureSchema) -> Vec<usize> {
    schema
        .fields
        .iter()
        .enumerate()
        .filter(|(_, f)| f.group == Group::Item && f.name != "item_id")
        .map(|(i, _)| i)
        .collect()
}

impl MixerState {
    pub fn init(
        schema: &FeatureSchema,
        seed: u64,
        n_blocks: usize,
        heads: usize,
        l_max: usize,
        variant: Variant,
    ) -> Result<Self> {
        let slots: Vec<SubTokenSlot> = derive_partition(schema)?;
        let d0 = schema.sub_token_dim;
        let t = slots.len();
        if d0 % heads != 0 {
            return Err(SifError::Schema(format!(
                "attention heads {} must divide sub_token_dim {}",
                heads, d0
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x3c0ca8c0de5eed);
        let scale = 1.0 / (d0 as f64).sqrt();
        let mut w_res = Vec::with_capacity(t);
        for s in &slots {
            w_res.push(Tensor::uniform(
                &[s.raw_width, d0],
                1.0 / (s.raw_width as f64).sqrt(),
                &mut rng,
            ));
        }
        let p_table = Tensor::uniform(&[l_max + 1, t * d0], 0.02, &mut rng);
        let mut blocks = Vec::with_capacity(n_blocks);
        for _ in 0..n_blocks {
            let mut w = |r: usize, c: usize, s: f64| Tensor::uniform(&[r, c], s, &mut rng);
            blocks.push(BlockParams {
                tok_wq: w(d0, d0, scale),
                tok_wk: w(d0, d0, scale),
                tok_wv: w(d0, d0, scale),
                tok_wo: w(d0, d0, scale),
                tok_ln_g: ones(d0),
                tok_ln_b: Tensor::zeros(&[d0]),
                smp_wq: w(d0, d0, scale),
                smp_wk: w(d0, d0, scale),
                smp_wv: w(d0, d0, scale),
                smp_wo: w(d0, d0, scale),
                smp_ln_g: ones(d0),
                smp_ln_b: Tensor::zeros(&[d0]),
                ffn_w1: w(d0, 4 * d0, scale),
                ffn_b1: Tensor::zeros(&[4 * d0]),
                ffn_w2: w(4 * d0, d0, 1.0 / (4.0 * d0 as f64).sqrt()),
                ffn_b2: Tensor::zeros(&[d0]),
                ffn_ln_g: ones(d0),
                ffn_ln_b: Tensor::zeros(&[d0]),
            });
        }
        let h1 = 4 * d0;
        let head_w1 = Tensor::uniform(&[d0, h1], scale, &mut rng);
        let head_b1 = Tensor::zeros(&[h1]);
        let head_w2 = Tensor::uniform(&[h1, 1], 1.0 / (h1 as f64).sqrt(), &mut rng);
        let head_b2 = Tensor::zeros(&[1]);

        let mut id_embed = None;
        let mut key_proj = None;
        let mut dense_proj = None;
        match variant.history {
            HistoryEncoding::Hgaq => {}
            HistoryEncoding::ItemId => {
                let card = item_id_cardinality(schema)?;
                id_embed = Some(Tensor::uniform(&[card, d0], scale, &mut rng));
            }
            HistoryEncoding::ItemKey => {
                let card = item_id_cardinality(schema)?;
                id_embed = Some(Tensor::uniform(&[card, d0], scale, &mut rng));
                let key_w: usize = key_field_indices(schema)
                    .iter()
                    .map(|&i| schema.fields[i].embed_dim)
                    .sum();
                let in_w = d0 + key_w;
                key_proj = Some(Tensor::uniform(
                    &[in_w, d0],
                    1.0 / (in_w as f64).sqrt(),
                    &mut rng,
                ));
            }
            HistoryEncoding::DenseRaw => {
                let in_w: usize = schema.fields.iter().map(|f| f.embed_dim).sum();
                dense_proj = Some(Tensor::uniform(
                    &[in_w, t * d0],
                    1.0 / (in_w as f64).sqrt(),
                    &mut rng,
                ));
            }
        }
        Ok(MixerState {
            d0,
            t,
            heads,
            l_max,
            n_blocks,
            schema_hash: schema.hash(),
            variant,
            w_res,
            p_table,
            blocks,
            head_w1,
            head_b1,
            head_w2,
            head_b2,
            id_embed,
            key_proj,
            dense_proj,
        })
    }

    /// Canonical parameter enumeration (tape binding, Adam, checkpoints).
    pub fn for_each_param(&self, mut f: impl FnMut(String, ParamKind, &Tensor)) {
        for (s, t) in self.w_res.iter().enumerate() {
            f(format!("w_res.{}", s), ParamKind::Weight, t);
        }
        f("p_table".into(), ParamKind::Weight, &self.p_table);
        for (b, blk) in self.blocks.iter().enumerate() {
            let mut g = |name: &str, kind: ParamKind, t: &Tensor| {
                f(format!("block{}.{}", b, name), kind, t)
            };
            g("tok.wq", ParamKind::Weight, &blk.tok_wq);
            g("tok.wk", ParamKind::Weight, &blk.tok_wk);
            g("tok.wv", ParamKind::Weight, &blk.tok_wv);
            g("tok.wo", ParamKind::Weight, &blk.tok_wo);
            g("tok.ln_g", ParamKind::BiasOrNorm, &blk.tok_ln_g);
            g("tok.ln_b", ParamKind::BiasOrNorm, &blk.tok_ln_b);
            g("smp.wq", ParamKind::Weight, &blk.smp_wq);
            g("smp.wk", ParamKind::Weight, &blk.smp_wk);
            g("smp.wv", ParamKind::Weight, &blk.smp_wv);
            g("smp.wo", ParamKind::Weight, &blk.smp_wo);
            g("smp.ln_g", ParamKind::BiasOrNorm, &blk.smp_ln_g);
            g("smp.ln_b", ParamKind::BiasOrNorm, &blk.smp_ln_b);
            g("ffn.w1", ParamKind::Weight, &blk.ffn_w1);
            g("ffn.b1", ParamKind::BiasOrNorm, &blk.ffn_b1);
            g("ffn.w2", ParamKind::Weight, &blk.ffn_w2);
            g("ffn.b2", ParamKind::BiasOrNorm, &blk.ffn_b2);
            g("ffn.ln_g", ParamKind::BiasOrNorm, &blk.ffn_ln_g);
            g("ffn.ln_b", ParamKind::BiasOrNorm, &blk.ffn_ln_b);
        }
        f("head.w1".into(), ParamKind::Weight, &self.head_w1);
        f("head.b1".into(), ParamKind::BiasOrNorm, &self.head_b1);
        f("head.w2".into(), ParamKind::Weight, &self.head_w2);
        f("head.b2".into(), ParamKind::BiasOrNorm, &self.head_b2);
        if let Some(t) = &self.id_embed {
            f("id_embed".into(), ParamKind::Weight, t);
        }
        if let Some(t) = &self.key_proj {
            f("key_proj".into(), ParamKind::Weight, t);
        }
        if let Some(t) = &self.dense_proj {
            f("dense_proj".into(), ParamKind::Weight, t);
        }
    }

    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(&str, ParamKind, &mut Tensor)) {
        for (s, t) in self.w_res.iter_mut().enumerate() {
            f(&format!("w_res.{}", s), ParamKind::Weight, t);
        }
        f("p_table", ParamKind::Weight, &mut self.p_table);
        for (b, blk) in self.blocks.iter_mut().enumerate() {
            macro_rules! g {
                ($name:expr, $kind:expr, $t:expr) => {
                    f(&format!("block{}.{}", b, $name), $kind, $t)
                };
            }
            g!("tok.wq", ParamKind::Weight, &mut blk.tok_wq);
            g!("tok.wk", ParamKind::Weight, &mut blk.tok_wk);
            g!("tok.wv", ParamKind::Weight, &mut blk.tok_wv);
            g!("tok.wo", ParamKind::Weight, &mut blk.tok_wo);
            g!("tok.ln_g", ParamKind::BiasOrNorm, &mut blk.tok_ln_g);
            g!("tok.ln_b", ParamKind::BiasOrNorm, &mut blk.tok_ln_b);
            g!("smp.wq", ParamKind::Weight, &mut blk.smp_wq);
            g!("smp.wk", ParamKind::Weight, &mut blk.smp_wk);
            g!("smp.wv", ParamKind::Weight, &mut blk.smp_wv);
            g!("smp.wo", ParamKind::Weight, &mut blk.smp_wo);
            g!("smp.ln_g", ParamKind::BiasOrNorm, &mut blk.smp_ln_g);
            g!("smp.ln_b", ParamKind::BiasOrNorm, &mut blk.smp_ln_b);
            g!("ffn.w1", ParamKind::Weight, &mut blk.ffn_w1);
            g!("ffn.b1", ParamKind::BiasOrNorm, &mut blk.ffn_b1);
            g!("ffn.w2", ParamKind::Weight, &mut blk.ffn_w2);
            g!("ffn.b2", ParamKind::BiasOrNorm, &mut blk.ffn_b2);
            g!("ffn.ln_g", ParamKind::BiasOrNorm, &mut blk.ffn_ln_g);
            g!("ffn.ln_b", ParamKind::BiasOrNorm, &mut blk.ffn_ln_b);
        }
        f("head.w1", ParamKind::Weight, &mut self.head_w1);
        f("head.b1", ParamKind::BiasOrNorm, &mut self.head_b1);
        f("head.w2", ParamKind::Weight, &mut self.head_w2);
        f("head.b2", ParamKind::BiasOrNorm, &mut self.head_b2);
        if let Some(t) = &mut self.id_embed {
            f("id_embed", ParamKind::Weight, t);
        }
        if let Some(t) = &mut self.key_proj {
            f("key_proj", ParamKind::Weight, t);
        }
        if let Some(t) = &mut self.dense_proj {
            f("dense_proj", ParamKind::Weight, t);
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each_param(|_, _, _| n += 1);
        n
    }
}

fn ones(n: usize) -> Tensor {
    Tensor::from_vec(&[n], vec![1.0; n])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::tiny_schema;

    #[test]
    fn variant_names_roundtrip() {
        for name in Variant::all_names() {
            let v = Variant::parse(name).unwrap();
            assert_eq!(v.name(), name);
        }
        assert!(Variant::parse("bogus").is_err());
    }

    #[test]
    fn init_shapes_and_param_enumeration() {
        let schema = tiny_schema();
        let v = Variant::parse("full").unwrap();
        let m = MixerState::init(&schema, 3, 2, 2, 16, v).unwrap();
        assert_eq!(m.t, schema.num_slots());
        assert_eq!(m.p_table.shape(), &[17, m.t * m.d0]);
        let mut names = Vec::new();
        m.for_each_param(|n, _, _| names.push(n));
        assert_eq!(
            names.len(),
            m.t + 1 + 2 * BLOCK_PARAM_COUNT + 4,
            "full variant has no extra encoders"
        );
        // mutable enumeration walks the same names in the same order
        let mut m2 = m.clone();
        let mut names2 = Vec::new();
        m2.for_each_param_mut(|n, _, _| names2.push(n.to_string()));
        assert_eq!(names, names2);
    }

    #[test]
    fn variant_encoders_present_when_needed() {
        let schema = tiny_schema();
        let ids = MixerState::init(&schema, 1, 1, 2, 8, Variant::parse("item_id_only").unwrap())
            .unwrap();
        assert!(ids.id_embed.is_some() && ids.key_proj.is_none());
        let key = MixerState::init(&schema, 1, 1, 2, 8, Variant::parse("item_plus_key").unwrap())
            .unwrap();
        assert!(key.id_embed.is_some() && key.key_proj.is_some());
        let dense =
            MixerState::init(&schema, 1, 1, 2, 8, Variant::parse("dense_raw").unwrap()).unwrap();
        assert!(dense.dense_proj.is_some());
        // key features exclude the identifier itself
        let keys = key_field_indices(&schema);
        assert!(keys
            .iter()
            .all(|&i| schema.fields[i].name != "item_id"));
        assert!(!keys.is_empty());
    }

    #[test]
    fn heads_must_divide_d0() {
        let schema = tiny_schema(); // d0 = 8
        assert!(MixerState::init(&schema, 1, 1, 3, 8, Variant::parse("full").unwrap()).is_err());
    }
}
