//! Synthetic low-dimensional datasets, standardized to zero mean and unit
//! per-coordinate variance.

use std::f64::consts::PI;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::cond::{ConditionSpec, Conditions};
use crate::error::{Error, Result};
use crate::gradcore::Tensor;

/// Size of the draw used to estimate the standardization.
pub const REFERENCE_DRAW: usize = 100_000;
const REFERENCE_SEED: u64 = 0x5eed_da7a;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Gauss1d,
    GaussMixture2d,
    TwoMoons,
    Checkerboard,
    Rings,
}

impl DatasetKind {
    pub fn name(&self) -> &'static str {
        match self {
            DatasetKind::Gauss1d => "gauss1d",
            DatasetKind::GaussMixture2d => "gauss_mixture_2d",
            DatasetKind::TwoMoons => "two_moons",
            DatasetKind::Checkerboard => "checkerboard",
            DatasetKind::Rings => "rings",
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "gauss1d" => DatasetKind::Gauss1d,
            "gauss_mixture_2d" => DatasetKind::GaussMixture2d,
            "two_moons" => DatasetKind::TwoMoons,
            "checkerboard" => DatasetKind::Checkerboard,
            "rings" => DatasetKind::Rings,
            other => return Err(Error::invalid(format!("unknown dataset `{other}`"))),
        })
    }
}

/// Generator parameters; fields not used by a kind are ignored.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetParams {
    /// gauss1d mean
    pub mean: f64,
    /// gauss1d standard deviation
    pub std: f64,
    /// mixture component count
    pub components: usize,
    /// mixture circle radius
    pub radius: f64,
    /// mixture component std, moon/ring noise std
    pub noise: f64,
}

impl Default for DatasetParams {
    fn default() -> Self {
        Self {
            mean: 0.0,
            std: 1.0,
            components: 8,
            radius: 2.0,
            noise: 0.05,
        }
    }
}

/// Exact distribution of a dataset when it is Gaussian, per coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianHandle {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    kind: DatasetKind,
    params: DatasetParams,
    shift: Vec<f64>,
    scale: Vec<f64>,
}

impl Dataset {
    pub fn new(kind: DatasetKind, params: DatasetParams) -> Result<Self> {
        if kind == DatasetKind::Gauss1d && !(params.std > 0.0) {
            return Err(Error::invalid("gauss1d needs a positive std"));
        }
        if kind == DatasetKind::GaussMixture2d && params.components == 0 {
            return Err(Error::invalid("mixture needs at least one component"));
        }
        let mut ds = Self {
            kind,
            params,
            shift: Vec::new(),
            scale: Vec::new(),
        };
        let d = ds.dim();
        ds.shift = vec![0.0; d];
        ds.scale = vec![1.0; d];
        let mut rng = ChaCha8Rng::seed_from_u64(REFERENCE_SEED);
        let (raw, _) = ds.raw_sample(REFERENCE_DRAW, &mut rng);
        for j in 0..d {
            let col: Vec<f64> = raw.data().iter().skip(j).step_by(d).copied().collect();
            let m = col.iter().sum::<f64>() / col.len() as f64;
            let v = col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / col.len() as f64;
            ds.shift[j] = m;
            ds.scale[j] = v.sqrt();
        }
        Ok(ds)
    }

    pub fn by_name(name: &str, params: DatasetParams) -> Result<Self> {
        Self::new(name.parse()?, params)
    }

    pub fn kind(&self) -> DatasetKind {
        self.kind
    }

    pub fn params(&self) -> &DatasetParams {
        &self.params
    }

    pub fn dim(&self) -> usize {
        match self.kind {
            DatasetKind::Gauss1d => 1,
            _ => 2,
        }
    }

    pub fn condition_spec(&self) -> ConditionSpec {
        match self.kind {
            DatasetKind::GaussMixture2d => ConditionSpec::Class {
                classes: self.params.components,
            },
            _ => ConditionSpec::None,
        }
    }

    /// Standardized samples with their conditions.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> (Tensor, Conditions) {
        let (raw, labels) = self.raw_sample(n, rng);
        (self.standardize(&raw), labels)
    }

    /// Maps raw generator coordinates to standardized ones.
    pub fn standardize(&self, raw: &Tensor) -> Tensor {
        let d = self.dim();
        let mut out = raw.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let j = i % d;
            *v = (*v - self.shift[j]) / self.scale[j];
        }
        out
    }

    /// Affine map `x -> (x - shift)/scale` applied during standardization.
    pub fn standardization(&self) -> (&[f64], &[f64]) {
        (&self.shift, &self.scale)
    }

    /// Exact standardized distribution for Gaussian data.
    pub fn gaussian(&self) -> Result<GaussianHandle> {
        match self.kind {
            DatasetKind::Gauss1d => Ok(GaussianHandle {
                mean: vec![(self.params.mean - self.shift[0]) / self.scale[0]],
                var: vec![(self.params.std / self.scale[0]).powi(2)],
            }),
            k => Err(Error::invalid(format!("dataset {k} has no Gaussian form"))),
        }
    }

    fn raw_sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> (Tensor, Conditions) {
        let p = &self.params;
        let normal = |rng: &mut R| rng.sample::<f64, _>(StandardNormal);
        match self.kind {
            DatasetKind::Gauss1d => {
                let data = (0..n).map(|_| p.mean + p.std * normal(rng)).collect();
                (Tensor::new(&[n, 1], data).unwrap(), Conditions::Unconditional(n))
            }
            DatasetKind::GaussMixture2d => {
                let mut data = Vec::with_capacity(2 * n);
                let mut labels = Vec::with_capacity(n);
                for _ in 0..n {
                    let c = rng.random_range(0..p.components);
                    let a = 2.0 * PI * c as f64 / p.components as f64;
                    data.push(p.radius * a.cos() + p.noise * normal(rng));
                    data.push(p.radius * a.sin() + p.noise * normal(rng));
                    labels.push(Some(c));
                }
                (Tensor::new(&[n, 2], data).unwrap(), Conditions::Labels(labels))
            }
            DatasetKind::TwoMoons => {
                let mut data = Vec::with_capacity(2 * n);
                for _ in 0..n {
                    let upper = rng.random::<bool>();
                    let theta = PI * rng.random::<f64>();
                    let radial = truncated_normal(rng, 3.0) * p.noise;
                    let (c, s) = (theta.cos(), theta.sin());
                    if upper {
                        data.push((1.0 + radial) * c);
                        data.push((1.0 + radial) * s);
                    } else {
                        data.push(1.0 - (1.0 + radial) * c);
                        data.push(0.5 - (1.0 + radial) * s);
                    }
                }
                (Tensor::new(&[n, 2], data).unwrap(), Conditions::Unconditional(n))
            }
            DatasetKind::Checkerboard => {
                let mut data = Vec::with_capacity(2 * n);
                for _ in 0..n {
                    // 4x4 board on [-2, 2]^2, cells where (row + col) is even
                    let cell = rng.random_range(0..8usize);
                    let row = cell / 2;
                    let col = 2 * (cell % 2) + row % 2;
                    data.push(col as f64 - 2.0 + rng.random::<f64>());
                    data.push(row as f64 - 2.0 + rng.random::<f64>());
                }
                (Tensor::new(&[n, 2], data).unwrap(), Conditions::Unconditional(n))
            }
            DatasetKind::Rings => {
                let mut data = Vec::with_capacity(2 * n);
                for _ in 0..n {
                    let r = rng.random_range(1..=3usize) as f64 + p.noise * normal(rng);
                    let a = 2.0 * PI * rng.random::<f64>();
                    data.push(r * a.cos());
                    data.push(r * a.sin());
                }
                (Tensor::new(&[n, 2], data).unwrap(), Conditions::Unconditional(n))
            }
        }
    }

    /// Standardized distance from a point to the nearest two-moons arc,
    /// measured in standardized coordinates; `None` for other datasets.
    pub fn moons_arc_distance(&self, point: &[f64]) -> Option<f64> {
        if self.kind != DatasetKind::TwoMoons {
            return None;
        }
        let mut best = f64::INFINITY;
        let steps = 2000;
        for i in 0..=steps {
            let theta = PI * i as f64 / steps as f64;
            let (c, s) = (theta.cos(), theta.sin());
            for arc in [[c, s], [1.0 - c, 0.5 - s]] {
                let dx = (arc[0] - self.shift[0]) / self.scale[0] - point[0];
                let dy = (arc[1] - self.shift[1]) / self.scale[1] - point[1];
                best = best.min((dx * dx + dy * dy).sqrt());
            }
        }
        Some(best)
    }
}

fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, bound: f64) -> f64 {
    loop {
        let v: f64 = rng.sample(StandardNormal);
        if v.abs() <= bound {
            return v;
        }
    }
}

/// Writes rows as CSV with header `x0,x1,...` and an optional label column.
pub fn write_csv<W: Write>(out: &mut W, x: &Tensor, conds: Option<&Conditions>) -> Result<()> {
    let d = x.row_len();
    let mut header: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
    let labels = match conds {
        Some(Conditions::Labels(l)) => {
            header.push("label".into());
            Some(l)
        }
        _ => None,
    };
    writeln!(out, "{}", header.join(","))?;
    for i in 0..x.rows() {
        let mut cells: Vec<String> = x.row(i).iter().map(|v| format!("{v:?}")).collect();
        if let Some(l) = labels {
            cells.push(l[i].map_or(String::new(), |c| c.to_string()));
        }
        writeln!(out, "{}", cells.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_name_is_rejected() {
        assert!(Dataset::by_name("spirals", DatasetParams::default())
            .unwrap_err()
            .is_invalid_argument());
    }

    #[test]
    fn sampling_is_reproducible() {
        let ds = Dataset::new(DatasetKind::Checkerboard, DatasetParams::default()).unwrap();
        let a = ds.sample(50, &mut ChaCha8Rng::seed_from_u64(4));
        let b = ds.sample(50, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(a, b);
    }

    #[test]
    fn standardized_moments() {
        for kind in [DatasetKind::TwoMoons, DatasetKind::Rings, DatasetKind::Checkerboard] {
            let ds = Dataset::new(kind, DatasetParams::default()).unwrap();
            let (x, _) = ds.sample(20_000, &mut ChaCha8Rng::seed_from_u64(9));
            for j in 0..2 {
                let col: Vec<f64> = x.data().iter().skip(j).step_by(2).copied().collect();
                let m = col.iter().sum::<f64>() / col.len() as f64;
                let v = col.iter().map(|c| (c - m).powi(2)).sum::<f64>() / col.len() as f64;
                assert!(m.abs() < 0.05, "{kind} mean {m}");
                assert!((v - 1.0).abs() < 0.05, "{kind} var {v}");
            }
        }
    }

    #[test]
    fn gaussian_handle_is_standardized() {
        let p = DatasetParams {
            mean: 3.0,
            std: 2.0,
            ..Default::default()
        };
        let g = Dataset::new(DatasetKind::Gauss1d, p).unwrap().gaussian().unwrap();
        assert!(g.mean[0].abs() < 0.02);
        assert!((g.var[0] - 1.0).abs() < 0.02);
        let moons = Dataset::new(DatasetKind::TwoMoons, DatasetParams::default()).unwrap();
        assert!(moons.gaussian().is_err());
    }

    #[test]
    fn csv_layout() {
        let x = Tensor::new(&[2, 2], vec![1.0, 2.5, -3.0, 0.0]).unwrap();
        let mut buf = Vec::new();
        write_csv(&mut buf, &x, Some(&Conditions::Labels(vec![Some(1), None]))).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "x0,x1,label\n1.0,2.5,1\n-3.0,0.0,\n");
    }
}
