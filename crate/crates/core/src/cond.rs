//! Conditioning inputs and their learned embeddings, including the null
//! condition used for guidance dropout.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::gradcore::{Tensor, Var};
use crate::nn::{Bound, Init, Linear, ParamId, ParamSet};

/// What a model is conditioned on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConditionSpec {
    None,
    Class { classes: usize },
    Vector { dim: usize },
}

impl ConditionSpec {
    pub fn is_none(&self) -> bool {
        matches!(self, ConditionSpec::None)
    }
}

/// Per-row conditions for a batch; `None` entries are the null condition.
#[derive(Clone, Debug, PartialEq)]
pub enum Conditions {
    Unconditional(usize),
    Labels(Vec<Option<usize>>),
    Vectors { dim: usize, rows: Vec<Option<Vec<f64>>> },
}

impl Conditions {
    /// `n` null rows of the kind matching `spec`.
    pub fn null(spec: ConditionSpec, n: usize) -> Self {
        match spec {
            ConditionSpec::None => Conditions::Unconditional(n),
            ConditionSpec::Class { .. } => Conditions::Labels(vec![None; n]),
            ConditionSpec::Vector { dim } => Conditions::Vectors {
                dim,
                rows: vec![None; n],
            },
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Conditions::Unconditional(n) => *n,
            Conditions::Labels(l) => l.len(),
            Conditions::Vectors { rows, .. } => rows.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The same kind with every row nulled.
    pub fn nulled(&self) -> Self {
        match self {
            Conditions::Unconditional(n) => Conditions::Unconditional(*n),
            Conditions::Labels(l) => Conditions::Labels(vec![None; l.len()]),
            Conditions::Vectors { dim, rows } => Conditions::Vectors {
                dim: *dim,
                rows: vec![None; rows.len()],
            },
        }
    }

    /// Replaces each row by the null condition with probability `p`.
    ///
    /// One uniform draw is consumed per row whatever the kind, so the random
    /// stream does not depend on the conditioning type.
    pub fn dropout<R: Rng + ?Sized>(&self, p: f64, rng: &mut R) -> Self {
        let mut drop = || rng.random::<f64>() < p;
        match self {
            Conditions::Unconditional(n) => {
                for _ in 0..*n {
                    drop();
                }
                Conditions::Unconditional(*n)
            }
            Conditions::Labels(l) => Conditions::Labels(l.iter().map(|&y| if drop() { None } else { y }).collect()),
            Conditions::Vectors { dim, rows } => Conditions::Vectors {
                dim: *dim,
                rows: rows.iter().map(|r| if drop() { None } else { r.clone() }).collect(),
            },
        }
    }

    /// Rows `idx` in order.
    pub fn select(&self, idx: &[usize]) -> Self {
        match self {
            Conditions::Unconditional(_) => Conditions::Unconditional(idx.len()),
            Conditions::Labels(l) => Conditions::Labels(idx.iter().map(|&i| l[i]).collect()),
            Conditions::Vectors { dim, rows } => Conditions::Vectors {
                dim: *dim,
                rows: idx.iter().map(|&i| rows[i].clone()).collect(),
            },
        }
    }

    /// The whole batch repeated `times` times (block order).
    pub fn tile(&self, times: usize) -> Self {
        let n = self.len();
        let idx: Vec<usize> = (0..times * n).map(|i| i % n).collect();
        self.select(&idx)
    }

    pub fn is_unconditional(&self) -> bool {
        matches!(self, Conditions::Unconditional(_))
    }
}

/// Learned embedding of [`Conditions`], with a dedicated null vector.
#[derive(Clone, Debug)]
pub struct CondEmbedding {
    spec: ConditionSpec,
    pub width: usize,
    table: Option<ParamId>,
    proj: Option<Linear>,
    null: Option<ParamId>,
}

impl CondEmbedding {
    pub fn new<R: Rng + ?Sized>(
        ps: &mut ParamSet,
        name: &str,
        spec: ConditionSpec,
        width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut emb = Self {
            spec,
            width,
            table: None,
            proj: None,
            null: None,
        };
        match spec {
            ConditionSpec::None => emb.width = 0,
            ConditionSpec::Class { classes } => {
                // the last row is the null class
                let n = (classes + 1) * width;
                let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                emb.table = Some(ps.add(format!("{name}.table"), Tensor::new(&[classes + 1, width], data)?)?);
            }
            ConditionSpec::Vector { dim } => {
                emb.proj = Some(Linear::new(
                    ps,
                    &format!("{name}.proj"),
                    dim,
                    width,
                    true,
                    Init::FanIn,
                    rng,
                )?);
                let data = (0..width).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                emb.null = Some(ps.add(format!("{name}.null"), Tensor::new(&[width], data)?)?);
            }
        }
        Ok(emb)
    }

    pub fn spec(&self) -> ConditionSpec {
        self.spec
    }

    /// `[N, width]` embedding, or `None` for unconditional models.
    pub fn forward<'t>(&self, p: &Bound<'t>, conds: &Conditions) -> Result<Option<Var<'t>>> {
        match (self.spec, conds) {
            (ConditionSpec::None, _) => Ok(None),
            (ConditionSpec::Class { classes }, Conditions::Labels(labels)) => {
                let mut idx = Vec::with_capacity(labels.len());
                for l in labels {
                    match *l {
                        Some(c) if c >= classes => {
                            return Err(Error::invalid(format!("class {c} out of range for {classes} classes")))
                        }
                        Some(c) => idx.push(c),
                        None => idx.push(classes),
                    }
                }
                Ok(Some(p.get(self.table.unwrap()).gather_rows(&idx)?))
            }
            (ConditionSpec::Vector { dim }, Conditions::Vectors { dim: d, rows }) if *d == dim => {
                let tape = p.get(self.null.unwrap()).tape();
                let n = rows.len();
                let mut values = vec![0.0; n * dim];
                let mut present = vec![0.0; n];
                for (i, r) in rows.iter().enumerate() {
                    if let Some(v) = r {
                        if v.len() != dim {
                            return Err(Error::invalid("condition vector has wrong length"));
                        }
                        values[i * dim..(i + 1) * dim].copy_from_slice(v);
                        present[i] = 1.0;
                    }
                }
                let v = tape.constant(Tensor::new(&[n, dim], values)?);
                let proj = self.proj.as_ref().unwrap().forward(p, &v)?;
                let keep = Tensor::new(&[n, 1], present.clone())?;
                let drop = Tensor::new(&[n, 1], present.iter().map(|x| 1.0 - x).collect())?;
                let null = p
                    .get(self.null.unwrap())
                    .broadcast_to(&[n, self.width])?
                    .mul_const(&drop)?;
                Ok(Some(proj.mul_const(&keep)?.add(&null)?))
            }
            (spec, c) => Err(Error::invalid(format!(
                "conditions {c:?} do not match model conditioning {spec:?}"
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcore::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dropout_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = Conditions::Labels(vec![Some(0), Some(3), Some(1)]);
        assert_eq!(c.dropout(0.0, &mut rng), c);
        assert_eq!(c.dropout(1.0, &mut rng), c.nulled());
    }

    #[test]
    fn null_class_uses_last_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamSet::new();
        let emb = CondEmbedding::new(&mut ps, "c", ConditionSpec::Class { classes: 2 }, 4, &mut rng).unwrap();
        let tape = Tape::new();
        let p = ps.bind(&tape);
        let e = emb
            .forward(&p, &Conditions::Labels(vec![None, Some(1)]))
            .unwrap()
            .unwrap()
            .value();
        let table = ps.by_name("c.table").unwrap();
        assert_eq!(e.row(0), table.row(2));
        assert_eq!(e.row(1), table.row(1));
        assert!(emb.forward(&p, &Conditions::Labels(vec![Some(2)])).is_err());
    }

    #[test]
    fn vector_null_rows_get_null_embedding() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ps = ParamSet::new();
        let spec = ConditionSpec::Vector { dim: 2 };
        let emb = CondEmbedding::new(&mut ps, "c", spec, 3, &mut rng).unwrap();
        let tape = Tape::new();
        let p = ps.bind(&tape);
        let conds = Conditions::Vectors {
            dim: 2,
            rows: vec![Some(vec![1.0, 2.0]), None],
        };
        let e = emb.forward(&p, &conds).unwrap().unwrap().value();
        assert_eq!(e.row(1), ps.by_name("c.null").unwrap().data());
    }
}
