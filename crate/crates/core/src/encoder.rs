//! Chain encoder: tokenization, an encoder-only Transformer, and the
//! value-conditioned affine transfer.
//!
//! A chain `(a_p, r_1 … r_l, a_q)` becomes the token sequence
//! `[a_p, r_l, …, r_1, a_q, end]`. Attribute and relation tokens are the
//! origin log-maps of the filter's hyperbolic embeddings, so the filter is
//! trained through the encoder. A learned position embedding is added to every
//! token so the encoder can tell `r_1 r_2` from `r_2 r_1`. Several chains are
//! encoded at once by stacking their tokens and restricting attention to each
//! chain's own rows.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Segment, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::filter::FilterEmbeddings;
use crate::hyperbolic;
use crate::kg::AttributeId;
use crate::retrieval::RAChain;

pub const BITS: usize = 64;
const LN_EPS: f64 = 1e-5;

/// Glorot-uniform initialization.
pub fn glorot(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect())
}

fn uniform(rows: usize, cols: usize, a: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect())
}

// ---------------------------------------------------------------------------
// bit-stream

/// The 64 IEEE-754 bits of `v`, most significant first, as `0.0`/`1.0`.
pub fn encode_value(v: f64) -> Result<[f64; BITS]> {
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("cannot bit-encode {v}")));
    }
    let bits = v.to_bits();
    let mut out = [0.0; BITS];
    for (i, o) in out.iter_mut().enumerate() {
        *o = ((bits >> (63 - i)) & 1) as f64;
    }
    Ok(out)
}

/// Exact inverse of [`encode_value`]. Entries above one half count as set.
pub fn decode_value(bits: &[f64]) -> Result<f64> {
    if bits.len() != BITS {
        return Err(Error::Dimension(format!("expected {BITS} bits, got {}", bits.len())));
    }
    let word = bits.iter().fold(0u64, |acc, &b| (acc << 1) | u64::from(b > 0.5));
    Ok(f64::from_bits(word))
}

// ---------------------------------------------------------------------------
// transformer

/// One post-norm Transformer layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransformerBlock {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln1_gain: ParamId,
    ln1_bias: ParamId,
    ff_w1: ParamId,
    ff_b1: ParamId,
    ff_w2: ParamId,
    ff_b2: ParamId,
    ln2_gain: ParamId,
    ln2_bias: ParamId,
}

impl TransformerBlock {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, rng: &mut impl Rng) -> Self {
        let hidden = 2 * dim;
        let mut add = |name: &str, t: Tensor| store.add(&format!("{prefix}.{name}"), t);
        Self {
            wq: add("wq", glorot(dim, dim, rng)),
            wk: add("wk", glorot(dim, dim, rng)),
            wv: add("wv", glorot(dim, dim, rng)),
            wo: add("wo", glorot(dim, dim, rng)),
            ln1_gain: add("ln1.gain", Tensor::filled(1, dim, 1.0)),
            ln1_bias: add("ln1.bias", Tensor::zeros(1, dim)),
            ff_w1: add("ff.w1", glorot(dim, hidden, rng)),
            ff_b1: add("ff.b1", Tensor::zeros(1, hidden)),
            ff_w2: add("ff.w2", glorot(hidden, dim, rng)),
            ff_b2: add("ff.b2", Tensor::zeros(1, dim)),
            ln2_gain: add("ln2.gain", Tensor::filled(1, dim, 1.0)),
            ln2_bias: add("ln2.bias", Tensor::zeros(1, dim)),
        }
    }

    fn norm(tape: &mut Tape, x: Var, gain: ParamId, bias: ParamId) -> Result<Var> {
        let n = tape.layer_norm(x, LN_EPS);
        let g = tape.param(gain);
        let b = tape.param(bias);
        let n = tape.mul_row(n, g)?;
        tape.add_row(n, b)
    }

    /// Returns the layer output and the attention node (for inspection).
    pub fn forward(&self, tape: &mut Tape, x: Var, segments: &[Segment], heads: usize) -> Result<(Var, Var)> {
        let d = tape.shape(x)[1];
        let (wq, wk, wv, wo) = (tape.param(self.wq), tape.param(self.wk), tape.param(self.wv), tape.param(self.wo));
        let q = tape.matmul(x, wq)?;
        let k = tape.matmul(x, wk)?;
        let v = tape.matmul(x, wv)?;
        let att = tape.segment_attention(q, k, v, segments, heads, 1.0 / (d as f64).sqrt())?;
        let a = tape.matmul(att, wo)?;
        let h = tape.add(x, a)?;
        let h = Self::norm(tape, h, self.ln1_gain, self.ln1_bias)?;
        let (w1, b1, w2, b2) = (tape.param(self.ff_w1), tape.param(self.ff_b1), tape.param(self.ff_w2), tape.param(self.ff_b2));
        let f = tape.matmul(h, w1)?;
        let f = tape.add_row(f, b1)?;
        let f = tape.relu(f);
        let f = tape.matmul(f, w2)?;
        let f = tape.add_row(f, b2)?;
        let out = tape.add(h, f)?;
        Ok((Self::norm(tape, out, self.ln2_gain, self.ln2_bias)?, att))
    }
}

/// A stack of [`TransformerBlock`]s without positional encoding.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransformerStack {
    blocks: Vec<TransformerBlock>,
    heads: usize,
    dim: usize,
}

impl TransformerStack {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, layers: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if layers == 0 {
            return Err(Error::Config("transformer needs at least one layer".into()));
        }
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("{heads} heads do not divide width {dim}")));
        }
        let blocks = (0..layers).map(|i| TransformerBlock::new(store, &format!("{prefix}.{i}"), dim, rng)).collect();
        Ok(Self { blocks, heads, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, segments: &[Segment]) -> Result<Var> {
        Ok(self.forward_traced(tape, x, segments)?.0)
    }

    /// Forward pass that also returns every layer's attention node.
    pub fn forward_traced(&self, tape: &mut Tape, mut x: Var, segments: &[Segment]) -> Result<(Var, Vec<Var>)> {
        let mut atts = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, att) = b.forward(tape, x, segments, self.heads)?;
            x = y;
            atts.push(att);
        }
        Ok((x, atts))
    }
}

// ---------------------------------------------------------------------------
// affine transfer

/// Two one-hidden-layer MLPs mapping a value's bit-stream to `E^α` (`d × d`)
/// and `E^β` (`d`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AffineNets {
    alpha_w1: ParamId,
    alpha_b1: ParamId,
    alpha_w2: ParamId,
    alpha_b2: ParamId,
    beta_w1: ParamId,
    beta_b1: ParamId,
    beta_w2: ParamId,
    beta_b2: ParamId,
    dim: usize,
}

impl AffineNets {
    /// `E^α` starts at the identity plus small noise and `E^β` near zero, so
    /// the transfer initially passes chain representations through.
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let eye = Tensor::row_vector(Tensor::identity(dim).into_data());
        let small = 1e-3;
        let mut add = |name: &str, t: Tensor| store.add(&format!("{prefix}.{name}"), t);
        Self {
            alpha_w1: add("alpha.w1", glorot(BITS, hidden, rng)),
            alpha_b1: add("alpha.b1", Tensor::zeros(1, hidden)),
            alpha_w2: add("alpha.w2", uniform(hidden, dim * dim, small, rng)),
            alpha_b2: add("alpha.b2", eye),
            beta_w1: add("beta.w1", glorot(BITS, hidden, rng)),
            beta_b1: add("beta.b1", Tensor::zeros(1, hidden)),
            beta_w2: add("beta.w2", uniform(hidden, dim, small, rng)),
            beta_b2: add("beta.b2", Tensor::zeros(1, dim)),
            dim,
        }
    }

    fn mlp(tape: &mut Tape, x: Var, w1: ParamId, b1: ParamId, w2: ParamId, b2: ParamId) -> Result<Var> {
        let (w1, b1, w2, b2) = (tape.param(w1), tape.param(b1), tape.param(w2), tape.param(b2));
        let h = tape.matmul(x, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.relu(h);
        let o = tape.matmul(h, w2)?;
        tape.add_row(o, b2)
    }

    /// Row-major flattened `E^α` (`[n, d·d]`) and `E^β` (`[n, d]`) for a
    /// `[n, 64]` matrix of bit-streams.
    pub fn generate(&self, tape: &mut Tape, bits: Var) -> Result<(Var, Var)> {
        let ea = Self::mlp(tape, bits, self.alpha_w1, self.alpha_b1, self.alpha_w2, self.alpha_b2)?;
        let eb = Self::mlp(tape, bits, self.beta_w1, self.beta_b1, self.beta_w2, self.beta_b2)?;
        Ok((ea, eb))
    }

    /// `ẽ_i = (E^α_i)ᵀ e_i + E^β_i` for every row of `e` with source values `values`.
    pub fn transfer(&self, tape: &mut Tape, e: Var, values: &[f64]) -> Result<Var> {
        let [n, d] = tape.shape(e);
        if d != self.dim || n != values.len() {
            return Err(Error::Shape { op: "affine_transfer", lhs: [n, d], rhs: [values.len(), self.dim] });
        }
        let mut bits = Vec::with_capacity(n * BITS);
        for &v in values {
            bits.extend_from_slice(&encode_value(v)?);
        }
        let bits = tape.constant(Tensor::new(n, BITS, bits));
        let (ea, eb) = self.generate(tape, bits)?;
        let rot = tape.batched_vec_mat(e, ea)?;
        tape.add(rot, eb)
    }
}

// ---------------------------------------------------------------------------
// tokens

/// The tokens of one chain as rows of a matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub tokens: Tensor,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows() == 0
    }
}

/// Which embedding row a token reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Token {
    Attribute(AttributeId),
    Relation(usize),
    End,
}

/// `[a_p, r_l, …, r_1, a_q, end]`
pub fn token_ids(chain: &RAChain, query_attribute: AttributeId) -> Vec<Token> {
    let mut t = Vec::with_capacity(chain.len() + 3);
    t.push(Token::Attribute(chain.source_attribute));
    t.extend(chain.relations.iter().rev().map(|&r| Token::Relation(r)));
    t.push(Token::Attribute(query_attribute));
    t.push(Token::End);
    t
}

/// Tokenize without a tape: log-mapped embeddings, lifted by `lift`
/// (`filter_dim × dim`) when given, followed by the end token.
pub fn tokenize(
    chain: &RAChain,
    query_attribute: AttributeId,
    emb: &FilterEmbeddings,
    end_token: &[f64],
    lift: Option<&Tensor>,
) -> Result<TokenSequence> {
    let fd = emb.dim();
    let d = end_token.len();
    match lift {
        Some(w) if w.shape() != [fd, d] => return Err(Error::Shape { op: "tokenize lift", lhs: w.shape(), rhs: [fd, d] }),
        None if fd != d => return Err(Error::Dimension(format!("filter width {fd} != encoder width {d} and no lift"))),
        _ => {}
    }
    let ids = token_ids(chain, query_attribute);
    let mut out = Tensor::zeros(ids.len(), d);
    let mut logm = vec![0.0; fd];
    for (i, tok) in ids.iter().enumerate() {
        let src = match *tok {
            Token::Attribute(a) => emb.attribute(a)?,
            Token::Relation(r) => emb.relation(r)?,
            Token::End => {
                out.row_mut(i).copy_from_slice(end_token);
                continue;
            }
        };
        hyperbolic::log_map_origin_into(src, emb.curvature(), &mut logm);
        match lift {
            Some(w) => {
                let row = out.row_mut(i);
                for (p, x) in logm.iter().enumerate() {
                    row.iter_mut().zip(w.row(p)).for_each(|(o, wv)| *o += x * wv);
                }
            }
            None => out.row_mut(i).copy_from_slice(&logm),
        }
    }
    Ok(TokenSequence { tokens: out })
}

/// Per-tape token tables: log-mapped (and lifted) relation and attribute rows
/// plus the end token, all at encoder width.
#[derive(Debug, Clone, Copy)]
pub struct TokenTables {
    pub relations: Var,
    pub attributes: Var,
    pub end: Var,
}

/// Stack the tokens of `chains` into one matrix. Returns the matrix, one
/// segment per chain, and the row of each chain's end token.
pub fn stack_tokens(
    tape: &mut Tape,
    tables: &TokenTables,
    chains: &[RAChain],
    query_attribute: AttributeId,
) -> Result<(Var, Vec<Segment>, Vec<usize>)> {
    if chains.is_empty() {
        return Err(Error::Empty("no chains to encode".into()));
    }
    let (nr, na) = (tape.shape(tables.relations)[0], tape.shape(tables.attributes)[0]);
    let mut rows = Vec::new();
    let mut segments = Vec::with_capacity(chains.len());
    let mut ends = Vec::with_capacity(chains.len());
    for chain in chains {
        let start = rows.len();
        for tok in token_ids(chain, query_attribute) {
            rows.push(match tok {
                Token::Attribute(a) if a < na => (tables.attributes, a),
                Token::Attribute(a) => return Err(Error::UnknownAttribute(format!("#{a}"))),
                Token::Relation(r) if r < nr => (tables.relations, r),
                Token::Relation(r) => return Err(Error::UnknownRelation(r)),
                Token::End => (tables.end, 0),
            });
        }
        segments.push(Segment { start, len: rows.len() - start });
        ends.push(rows.len() - 1);
    }
    Ok((tape.stack_rows(rows)?, segments, ends))
}

/// Encoder parameters: the Transformer stack, the shared end token, the
/// optional filter-to-encoder lift, and the affine nets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainEncoder {
    pub stack: TransformerStack,
    pub end_token: ParamId,
    pub positions: ParamId,
    pub lift: Option<ParamId>,
    pub affine: AffineNets,
}

impl ChainEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        filter_dim: usize,
        dim: usize,
        layers: usize,
        heads: usize,
        affine_hidden: usize,
        max_hops: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let stack = TransformerStack::new(store, "encoder", dim, layers, heads, rng)?;
        let end_token = store.add("encoder.end", uniform(1, dim, 0.1, rng));
        let positions = store.add("encoder.position", uniform(max_hops + 3, dim, 0.1, rng));
        let lift = (filter_dim != dim).then(|| store.add("encoder.lift", glorot(filter_dim, dim, rng)));
        let affine = AffineNets::new(store, "affine", dim, affine_hidden, rng);
        Ok(Self { stack, end_token, positions, lift, affine })
    }

    pub fn dim(&self) -> usize {
        self.stack.dim()
    }

    /// Log-map the hyperbolic tables on the tape and lift them to encoder width.
    pub fn tables(&self, tape: &mut Tape, relations: Var, attributes: Var, curvature: f64) -> Result<TokenTables> {
        let mut rel = tape.log_map_rows(relations, curvature);
        let mut att = tape.log_map_rows(attributes, curvature);
        if let Some(lift) = self.lift {
            let w = tape.param(lift);
            rel = tape.matmul(rel, w)?;
            att = tape.matmul(att, w)?;
        }
        let end = tape.param(self.end_token);
        Ok(TokenTables { relations: rel, attributes: att, end })
    }

    /// Chain representations `e_c` (`[n, d]`), read at each end token.
    pub fn encode(&self, tape: &mut Tape, tables: &TokenTables, chains: &[RAChain], query_attribute: AttributeId) -> Result<Var> {
        let (x, segments, ends) = stack_tokens(tape, tables, chains, query_attribute)?;
        let x = self.add_positions(tape, x, &segments)?;
        let h = self.stack.forward(tape, x, &segments)?;
        tape.select_rows(h, &ends)
    }

    fn add_positions(&self, tape: &mut Tape, x: Var, segments: &[Segment]) -> Result<Var> {
        let table = tape.param(self.positions);
        let max_len = tape.shape(table)[0];
        let mut rows = Vec::with_capacity(tape.shape(x)[0]);
        for seg in segments {
            if seg.len > max_len {
                return Err(Error::Config(format!("chain of {} tokens exceeds the position table ({max_len})", seg.len)));
            }
            rows.extend((0..seg.len).map(|i| (table, i)));
        }
        let pos = tape.stack_rows(rows)?;
        tape.add(x, pos)
    }

    /// Mean token embedding per chain; the encoder-free ablation.
    pub fn mean_tokens(&self, tape: &mut Tape, tables: &TokenTables, chains: &[RAChain], query_attribute: AttributeId) -> Result<Var> {
        let (x, segments, _) = stack_tokens(tape, tables, chains, query_attribute)?;
        tape.segment_mean(x, &segments)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter::init_table;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn chain(rels: Vec<usize>) -> RAChain {
        let path = (0..=rels.len()).collect();
        RAChain { source_attribute: 1, relations: rels, query_attribute: 0, source_value: 3.5, entity_path: path }
    }

    #[test]
    fn bit_stream_oracles() {
        assert!(encode_value(0.0).unwrap().iter().all(|&b| b == 0.0));
        let one = encode_value(1.0).unwrap();
        let expect: Vec<f64> = (0..64).map(|i| ((0x3FF0_0000_0000_0000u64 >> (63 - i)) & 1) as f64).collect();
        assert_eq!(one.to_vec(), expect);
        assert_eq!(encode_value(-2.0).unwrap()[0], 1.0);
        assert_eq!(decode_value(&encode_value(-2.0).unwrap()).unwrap(), -2.0);
        assert!(encode_value(f64::NAN).is_err());
        assert!(encode_value(f64::INFINITY).is_err());
    }

    #[test]
    fn token_order_reverses_relations() {
        let ids = token_ids(&chain(vec![4, 5, 6]), 0);
        assert_eq!(ids.len(), 6);
        assert_eq!(
            ids,
            vec![Token::Attribute(1), Token::Relation(6), Token::Relation(5), Token::Relation(4), Token::Attribute(0), Token::End]
        );
    }

    #[test]
    fn zero_embedding_gives_zero_token() {
        let rel = Tensor::zeros(2, 3);
        let att = Tensor::zeros(2, 3);
        let emb = FilterEmbeddings::new(&rel, &att, 1.0).unwrap();
        let seq = tokenize(&chain(vec![0]), 0, &emb, &[1.0, 2.0, 3.0], None).unwrap();
        assert_eq!(seq.len(), 4);
        assert!(seq.tokens.row(0).iter().all(|&x| x == 0.0));
        assert_eq!(seq.tokens.row(3), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn tape_tokens_match_standalone_tokenize() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let rel = store.add_hyperbolic("rel", init_table(7, 4, &mut rng), 1.0);
        let att = store.add_hyperbolic("att", init_table(2, 4, &mut rng), 1.0);
        let enc = ChainEncoder::new(&mut store, 4, 8, 1, 2, 16, 3, &mut rng).unwrap();
        let c = chain(vec![2, 5]);
        let emb = FilterEmbeddings::new(store.get(rel), store.get(att), 1.0).unwrap();
        let lift = store.get(enc.lift.unwrap());
        let seq = tokenize(&c, 0, &emb, store.get(enc.end_token).data(), Some(lift)).unwrap();

        let mut tape = Tape::new(&store);
        let (r, a) = (tape.param(rel), tape.param(att));
        let tables = enc.tables(&mut tape, r, a, 1.0).unwrap();
        let (x, segs, ends) = stack_tokens(&mut tape, &tables, &[c], 0).unwrap();
        assert_eq!(segs, vec![Segment { start: 0, len: 5 }]);
        assert_eq!(ends, vec![4]);
        for (p, q) in tape.value(x).data().iter().zip(seq.tokens.data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn affine_identity_and_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let nets = AffineNets::new(&mut store, "affine", 3, 8, &mut rng);
        for id in [nets.alpha_w2, nets.beta_w2] {
            store.get_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let e = Tensor::new(2, 3, vec![0.1, -0.2, 0.3, 1.0, 2.0, 3.0]);
        {
            let mut tape = Tape::new(&store);
            let ev = tape.constant(e.clone());
            let out = nets.transfer(&mut tape, ev, &[1.0, -7.5]).unwrap();
            assert_eq!(tape.value(out), &e);
        }
        for id in [nets.alpha_b2, nets.beta_b2] {
            store.get_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let mut tape = Tape::new(&store);
        let ev = tape.constant(e);
        let out = nets.transfer(&mut tape, ev, &[1.0, -7.5]).unwrap();
        assert!(tape.value(out).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn relation_order_matters() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let rel = store.add_hyperbolic("rel", init_table(3, 8, &mut rng), 1.0);
        let att = store.add_hyperbolic("att", init_table(2, 8, &mut rng), 1.0);
        let enc = ChainEncoder::new(&mut store, 8, 8, 2, 2, 16, 3, &mut rng).unwrap();
        let mut tape = Tape::new(&store);
        let (r, a) = (tape.param(rel), tape.param(att));
        let tables = enc.tables(&mut tape, r, a, 1.0).unwrap();
        let e = enc.encode(&mut tape, &tables, &[chain(vec![0, 1]), chain(vec![1, 0])], 0).unwrap();
        let v = tape.value(e);
        let diff: f64 = v.row(0).iter().zip(v.row(1)).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 1e-6);
    }
}
