//! Shallow autoregressive affine transport between data space and the
//! latent space in which reverse conditionals are Gaussian.

use rand::Rng;

use crate::error::{Error, Result};
use crate::gradcore::{Tape, Tensor, Var};
use crate::nn::{self, Bound, Init, Linear, ParamId, ParamSet};

/// Bound on the raw log-scale before exponentiation.
pub const RAW_CLAMP: f64 = 7.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    /// Masked position-wise network.
    Made,
    /// Single-head causal attention with a learned start token.
    Attention,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransporterConfig {
    pub blocks: usize,
    pub hidden: usize,
    pub layers: usize,
    pub kind: BlockKind,
    /// Adds an embedding of the step count to the conditioning.
    pub steps_embedding: bool,
    /// Rows with `t >= skip_threshold` pass through unchanged.
    pub skip_threshold: f64,
}

impl Default for TransporterConfig {
    fn default() -> Self {
        Self {
            blocks: 2,
            hidden: 64,
            layers: 2,
            kind: BlockKind::Made,
            steps_embedding: false,
            skip_threshold: 1.0,
        }
    }
}

/// Order in which a block visits positions.
fn scan_rank(dim: usize, reversed: bool) -> Vec<usize> {
    (0..dim).map(|n| if reversed { dim - n } else { n + 1 }).collect()
}

#[derive(Clone, Debug)]
struct MadeBlock {
    input: Linear,
    cond_in: Vec<Linear>,
    hidden: Vec<Linear>,
    out: Linear,
    out_cond: Linear,
}

impl MadeBlock {
    fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        name: &str,
        dim: usize,
        cfg: &TransporterConfig,
        rank: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        let h = cfg.hidden;
        let e = nn::TIME_EMB;
        let span = dim.saturating_sub(1).max(1);
        let hidden_deg: Vec<usize> = (0..h).map(|i| i % span + 1).collect();

        let in_mask = Tensor::new(
            &[dim, h],
            (0..dim * h)
                .map(|i| f64::from(u8::from(hidden_deg[i % h] >= rank[i / h])))
                .collect(),
        )?;
        let hh_mask = Tensor::new(
            &[h, h],
            (0..h * h)
                .map(|i| f64::from(u8::from(hidden_deg[i % h] >= hidden_deg[i / h])))
                .collect(),
        )?;
        let out_mask = Tensor::new(
            &[h, 2 * dim],
            (0..h * 2 * dim)
                .map(|i| {
                    let pos = (i % (2 * dim)) % dim;
                    f64::from(u8::from(rank[pos] > hidden_deg[i / (2 * dim)]))
                })
                .collect(),
        )?;

        let input = Linear::new(ps, &format!("{name}.in"), dim, h, true, Init::FanIn, rng)?.with_mask(in_mask)?;
        let mut cond_in = Vec::new();
        let mut hidden = Vec::new();
        for l in 0..cfg.layers.max(1) {
            cond_in.push(Linear::new(
                ps,
                &format!("{name}.cond{l}"),
                e,
                h,
                false,
                Init::FanIn,
                rng,
            )?);
            if l > 0 {
                hidden.push(
                    Linear::new(ps, &format!("{name}.h{l}"), h, h, true, Init::FanIn, rng)?
                        .with_mask(hh_mask.clone())?,
                );
            }
        }
        let out = Linear::new(ps, &format!("{name}.out"), h, 2 * dim, true, Init::Zero, rng)?.with_mask(out_mask)?;
        let out_cond = Linear::new(ps, &format!("{name}.out_cond"), e, 2 * dim, false, Init::Zero, rng)?;
        Ok(Self {
            input,
            cond_in,
            hidden,
            out,
            out_cond,
        })
    }

    fn params<'t>(&self, p: &Bound<'t>, x: &Var<'t>, c: &Var<'t>) -> Result<Var<'t>> {
        let mut h = self.input.forward(p, x)?.add(&self.cond_in[0].forward(p, c)?)?.gelu();
        for (l, layer) in self.hidden.iter().enumerate() {
            h = layer.forward(p, &h)?.add(&self.cond_in[l + 1].forward(p, c)?)?.gelu();
        }
        self.out.forward(p, &h)?.add(&self.out_cond.forward(p, c)?)
    }
}

#[derive(Clone, Debug)]
struct AttentionBlock {
    dim: usize,
    hidden: usize,
    embed: ParamId,
    pos: ParamId,
    start: ParamId,
    query: Linear,
    key: Linear,
    value: Linear,
    cond: Linear,
    mlp: Linear,
    head_mu: Linear,
    head_raw: Linear,
    out_cond: Linear,
    mask: Vec<bool>,
}

impl AttentionBlock {
    fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        name: &str,
        dim: usize,
        cfg: &TransporterConfig,
        rank: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        let h = cfg.hidden;
        let e = nn::TIME_EMB;
        let scaled = |n: usize, rng: &mut R| {
            let t = Tensor::randn(&[n, h], rng);
            t.map(|v| v / (h as f64).sqrt())
        };
        let embed = ps.add(format!("{name}.embed"), scaled(1, rng).reshape(&[1, h])?)?;
        let pos = ps.add(format!("{name}.pos"), scaled(dim, rng))?;
        let start = ps.add(format!("{name}.start"), scaled(1, rng).reshape(&[h])?)?;
        let lin = |ps: &mut ParamSet, n: &str, i, o, init, rng: &mut R| {
            Linear::new(ps, &format!("{name}.{n}"), i, o, true, init, rng)
        };
        let query = lin(ps, "q", h, h, Init::FanIn, rng)?;
        let key = lin(ps, "k", h, h, Init::FanIn, rng)?;
        let value = lin(ps, "v", h, h, Init::FanIn, rng)?;
        let cond = lin(ps, "cond", e, h, Init::FanIn, rng)?;
        let mlp = lin(ps, "mlp", h, h, Init::FanIn, rng)?;
        let head_mu = lin(ps, "head_mu", h, 1, Init::Zero, rng)?;
        let head_raw = lin(ps, "head_raw", h, 1, Init::Zero, rng)?;
        let out_cond = Linear::new(ps, &format!("{name}.out_cond"), e, 2 * dim, false, Init::Zero, rng)?;
        // key 0 is the start token, key m+1 is position m
        let mut mask = Vec::with_capacity(dim * (dim + 1));
        for n in 0..dim {
            mask.push(true);
            for m in 0..dim {
                mask.push(rank[m] < rank[n]);
            }
        }
        Ok(Self {
            dim,
            hidden: h,
            embed,
            pos,
            start,
            query,
            key,
            value,
            cond,
            mlp,
            head_mu,
            head_raw,
            out_cond,
            mask,
        })
    }

    fn params<'t>(&self, p: &Bound<'t>, x: &Var<'t>, c: &Var<'t>) -> Result<Var<'t>> {
        let (d, h) = (self.dim, self.hidden);
        let n = x.shape()[0];
        let pos = p.get(self.pos);
        let tokens = x
            .reshape(&[n * d, 1])?
            .matmul(&p.get(self.embed))?
            .reshape(&[n, d, h])?
            .add(&pos)?
            .reshape(&[n, d * h])?;
        let start = p.get(self.start).broadcast_to(&[n, h])?;
        let seq = x.tape().concat(&[start, tokens])?.reshape(&[n * (d + 1), h])?;
        let keys = self.key.forward(p, &seq)?.reshape(&[n, d + 1, h])?;
        let values = self.value.forward(p, &seq)?.reshape(&[n, d + 1, h])?;

        let rows: Vec<usize> = (0..n * d).map(|i| i / d).collect();
        let cond = self.cond.forward(p, c)?.gather_rows(&rows)?;
        let q_in = pos.broadcast_to(&[n, d, h])?.reshape(&[n * d, h])?.add(&cond)?;
        let q = self.query.forward(p, &q_in)?.reshape(&[n, d, h])?;
        let att = q
            .bmm(&keys, true)?
            .scale(1.0 / (h as f64).sqrt())
            .masked_softmax(&self.mask)?;
        let mixed = att.bmm(&values, false)?.reshape(&[n * d, h])?;
        let feat = self.mlp.forward(p, &mixed)?.add(&q_in)?.gelu();
        let direct = self.out_cond.forward(p, c)?;
        let mu = self
            .head_mu
            .forward(p, &feat)?
            .reshape(&[n, d])?
            .add(&direct.narrow(0, d)?)?;
        let raw = self
            .head_raw
            .forward(p, &feat)?
            .reshape(&[n, d])?
            .add(&direct.narrow(d, d)?)?;
        x.tape().concat(&[mu, raw])
    }
}

#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)]
enum Block {
    Made(MadeBlock),
    Attention(AttentionBlock),
}

/// Stack of autoregressive affine blocks with alternating scan direction.
#[derive(Clone, Debug)]
pub struct Transporter {
    dim: usize,
    config: TransporterConfig,
    blocks: Vec<(Block, Vec<usize>)>,
}

/// Output of a forward pass on a tape.
pub struct TransportOut<'t> {
    pub u: Var<'t>,
    /// Sum over blocks of the clamped log-scales, `[N, D]`; the log-Jacobian
    /// of `x -> u` is minus its row sum.
    pub log_scale: Var<'t>,
}

impl Transporter {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        name: &str,
        dim: usize,
        config: TransporterConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("transporter needs at least one position"));
        }
        let mut blocks = Vec::with_capacity(config.blocks);
        for b in 0..config.blocks {
            let rank = scan_rank(dim, b % 2 == 1);
            let bname = format!("{name}.block{b}");
            let block = match config.kind {
                BlockKind::Made => Block::Made(MadeBlock::new(ps, &bname, dim, &config, &rank, rng)?),
                BlockKind::Attention => Block::Attention(AttentionBlock::new(ps, &bname, dim, &config, &rank, rng)?),
            };
            blocks.push((block, rank));
        }
        Ok(Self { dim, config, blocks })
    }

    pub fn config(&self) -> &TransporterConfig {
        &self.config
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    /// Positions of block `b` in the order they are decoded.
    pub fn scan_order(&self, b: usize) -> Vec<usize> {
        let rank = &self.blocks[b].1;
        let mut order: Vec<usize> = (0..self.dim).collect();
        order.sort_by_key(|&n| rank[n]);
        order
    }

    fn conditioning(&self, t: &[f64], steps: &[usize]) -> Result<Tensor> {
        let mut c = nn::time_embedding(t);
        if self.config.steps_embedding {
            c = c.zip_map(&nn::steps_embedding(steps), |a, b| a + b)?;
        }
        Ok(c)
    }

    fn active_mask(&self, t: &[f64]) -> Option<Tensor> {
        if t.iter().all(|&v| v < self.config.skip_threshold) {
            return None;
        }
        let m = t
            .iter()
            .map(|&v| f64::from(u8::from(v < self.config.skip_threshold)))
            .collect();
        Some(Tensor::new(&[t.len(), 1], m).expect("mask shape"))
    }

    /// `(μ, clamped raw)` of block `b` evaluated on `x`.
    fn block_params<'t>(
        &self,
        b: usize,
        p: &Bound<'t>,
        x: &Var<'t>,
        c: &Var<'t>,
        active: Option<&Tensor>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let out = match &self.blocks[b].0 {
            Block::Made(m) => m.params(p, x, c)?,
            Block::Attention(a) => a.params(p, x, c)?,
        };
        let mut mu = out.narrow(0, self.dim)?;
        let mut raw = out.narrow(self.dim, self.dim)?.clamp(-RAW_CLAMP, RAW_CLAMP);
        if let Some(m) = active {
            mu = mu.mul_const(m)?;
            raw = raw.mul_const(m)?;
        }
        Ok((mu, raw))
    }

    /// `x -> u` for rows at noise levels `t` (one per row).
    pub fn forward<'t>(&self, p: &Bound<'t>, x: &Var<'t>, t: &[f64], steps: &[usize]) -> Result<TransportOut<'t>> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.dim || shape[0] != t.len() {
            return Err(Error::invalid(format!(
                "transporter expects [{}, {}], got {shape:?}",
                t.len(),
                self.dim
            )));
        }
        let tape = x.tape();
        let c = tape.constant(self.conditioning(t, steps)?);
        let active = self.active_mask(t);
        let mut u = *x;
        let mut log_scale: Option<Var<'t>> = None;
        for b in 0..self.blocks.len() {
            let (mu, raw) = self.block_params(b, p, &u, &c, active.as_ref())?;
            u = u.sub(&mu)?.mul(&raw.neg().exp())?;
            log_scale = Some(match log_scale {
                Some(acc) => acc.add(&raw)?,
                None => raw,
            });
        }
        let log_scale = match log_scale {
            Some(v) => v,
            None => tape.constant(Tensor::zeros(&shape)),
        };
        Ok(TransportOut { u, log_scale })
    }

    /// `u -> x` by sequential decoding; returns the number of network
    /// evaluations performed.
    pub fn inverse(&self, params: &ParamSet, u: &Tensor, t: &[f64], steps: &[usize]) -> Result<(Tensor, usize)> {
        if u.shape().len() != 2 || u.row_len() != self.dim || u.rows() != t.len() {
            return Err(Error::invalid(format!(
                "transporter inverse expects [{}, {}], got {:?}",
                t.len(),
                self.dim,
                u.shape()
            )));
        }
        let cond = self.conditioning(t, steps)?;
        let active = self.active_mask(t);
        let (n, d) = (u.rows(), self.dim);
        let mut current = u.clone();
        let mut evals = 0;
        for b in (0..self.blocks.len()).rev() {
            let mut x = Tensor::zeros(&[n, d]);
            for pos in self.scan_order(b) {
                let tape = Tape::new();
                let p = params.bind_frozen(&tape);
                let xv = tape.constant(x.clone());
                let c = tape.constant(cond.clone());
                let (mu, raw) = self.block_params(b, &p, &xv, &c, active.as_ref())?;
                evals += 1;
                let (mu, raw) = (mu.value(), raw.value());
                let src = current.data().to_vec();
                let dst = x.data_mut();
                for r in 0..n {
                    let i = r * d + pos;
                    dst[i] = src[i] * raw.data()[i].exp() + mu.data()[i];
                }
            }
            current = x;
        }
        Ok((current, evals))
    }

    /// Output of block `b` alone applied to `x`, without a tape.
    pub fn block_apply(&self, b: usize, params: &ParamSet, x: &Tensor, t: &[f64], steps: &[usize]) -> Result<Tensor> {
        if b >= self.blocks.len() {
            return Err(Error::invalid(format!("no block {b}")));
        }
        let tape = Tape::new();
        let p = params.bind_frozen(&tape);
        let c = tape.constant(self.conditioning(t, steps)?);
        let xv = tape.constant(x.clone());
        let (mu, raw) = self.block_params(b, &p, &xv, &c, self.active_mask(t).as_ref())?;
        Ok(xv.sub(&mu)?.mul(&raw.neg().exp())?.value())
    }

    /// Tape-free forward evaluation.
    pub fn apply(&self, params: &ParamSet, x: &Tensor, t: &[f64], steps: &[usize]) -> Result<(Tensor, Vec<f64>)> {
        let tape = Tape::new();
        let p = params.bind_frozen(&tape);
        let out = self.forward(&p, &tape.constant(x.clone()), t, steps)?;
        let logdet = out
            .log_scale
            .value()
            .data()
            .chunks(self.dim)
            .map(|c| -c.iter().sum::<f64>())
            .collect();
        Ok((out.u.value(), logdet))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randomize(ps: &mut ParamSet, rng: &mut ChaCha8Rng, scale: f64) {
        for t in ps.values_mut() {
            let r = Tensor::randn(t.shape(), rng);
            *t = r.map(|v| v * scale);
        }
    }

    fn setup(kind: BlockKind, dim: usize) -> (ParamSet, Transporter, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut ps = ParamSet::new();
        let cfg = TransporterConfig {
            hidden: 8,
            kind,
            ..Default::default()
        };
        let tr = Transporter::new(&mut ps, "tr", dim, cfg, &mut rng).unwrap();
        (ps, tr, rng)
    }

    #[test]
    fn zero_heads_give_identity() {
        for kind in [BlockKind::Made, BlockKind::Attention] {
            let (ps, tr, mut rng) = setup(kind, 3);
            let x = Tensor::randn(&[4, 3], &mut rng);
            let t = [0.1, 0.3, 0.6, 1.0];
            let (u, ld) = tr.apply(&ps, &x, &t, &[4; 4]).unwrap();
            assert_eq!(u, x);
            assert_eq!(ld, vec![0.0; 4]);
            let (back, _) = tr.inverse(&ps, &x, &t, &[4; 4]).unwrap();
            assert_eq!(back, x);
        }
    }

    #[test]
    fn round_trip_with_random_weights() {
        for kind in [BlockKind::Made, BlockKind::Attention] {
            let (mut ps, tr, mut rng) = setup(kind, 4);
            randomize(&mut ps, &mut rng, 0.3);
            let x = Tensor::randn(&[5, 4], &mut rng);
            let t = [0.02, 0.2, 0.4, 0.7, 0.9];
            let (u, _) = tr.apply(&ps, &x, &t, &[4; 5]).unwrap();
            let (back, evals) = tr.inverse(&ps, &u, &t, &[4; 5]).unwrap();
            assert!(back.max_abs_diff(&x).unwrap() < 1e-10);
            assert_eq!(evals, 2 * 4);
        }
    }

    #[test]
    fn rows_at_threshold_are_skipped() {
        let (mut ps, tr, mut rng) = setup(BlockKind::Made, 2);
        randomize(&mut ps, &mut rng, 0.5);
        let x = Tensor::randn(&[2, 2], &mut rng);
        let (u, ld) = tr.apply(&ps, &x, &[0.5, 1.0], &[2, 2]).unwrap();
        assert_eq!(u.row(1), x.row(1));
        assert_eq!(ld[1], 0.0);
        assert_ne!(u.row(0), x.row(0));
    }

    #[test]
    fn block_outputs_ignore_later_positions() {
        for kind in [BlockKind::Made, BlockKind::Attention] {
            let (mut ps, tr, mut rng) = setup(kind, 4);
            randomize(&mut ps, &mut rng, 0.5);
            let x = Tensor::randn(&[1, 4], &mut rng);
            for b in 0..tr.block_count() {
                let order = tr.scan_order(b);
                let base = tr.block_apply(b, &ps, &x, &[0.3], &[4]).unwrap();
                for (rank, &n) in order.iter().enumerate() {
                    let mut xp = x.clone();
                    xp.data_mut()[n] += 0.7;
                    let out = tr.block_apply(b, &ps, &xp, &[0.3], &[4]).unwrap();
                    for &m in &order[..rank] {
                        assert_eq!(out.data()[m], base.data()[m]);
                    }
                    assert_ne!(out.data()[n], base.data()[n]);
                }
            }
        }
    }

    #[test]
    fn scan_direction_alternates() {
        let (_, tr, _) = setup(BlockKind::Made, 3);
        assert_eq!(tr.scan_order(0), vec![0, 1, 2]);
        assert_eq!(tr.scan_order(1), vec![2, 1, 0]);
    }
}
