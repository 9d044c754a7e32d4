//! The layer-injection condensing probe.
//!
//! A hidden state `a^k`, the input to layer `k`, is fed separately into every
//! layer `T_i` of the stack. Layers that are close to the identity map give
//! small distances `d = ‖a − T_i a‖` and cosine similarities near one.
//!
//! States are flattened row-major, so `d` is a Frobenius distance and `s` the
//! Frobenius inner product over the product of norms.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blocks::Block;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::report::{ext_f64, fmt_real};
use crate::seed::{uniform_ball, Seed};

pub const DEFAULT_DEPTHS: [f64; 5] = [0.05, 0.2, 0.4, 0.6, 0.8];

/// Distance and similarity of two states of the same shape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeMetrics {
    pub d: f64,
    /// `None` when either state is zero.
    pub s: Option<f64>,
}

pub fn probe_metrics(a: &Matrix, o: &Matrix) -> Result<ProbeMetrics> {
    if a.shape() != o.shape() {
        return Err(Error::shape("probe_metrics", a.shape(), o.shape()));
    }
    let (mut dd, mut ao, mut aa, mut oo) = (0.0, 0.0, 0.0, 0.0);
    for (x, y) in a.as_slice().iter().zip(o.as_slice()) {
        dd += (x - y) * (x - y);
        ao += x * y;
        aa += x * x;
        oo += y * y;
    }
    // sqrt(aa·oo) rather than sqrt(aa)·sqrt(oo): o = a then gives exactly 1.
    let s = if aa > 0.0 && oo > 0.0 {
        Some((ao / (aa * oo).sqrt()).clamp(-1.0, 1.0))
    } else {
        None
    };
    Ok(ProbeMetrics { d: dd.sqrt(), s })
}

/// The input to layer `k` (1-based): layers `1..k` applied to `x`.
pub fn extract_hidden(layers: &[Block], x: &Matrix, k: usize) -> Result<Matrix> {
    if k == 0 || k > layers.len() {
        return Err(Error::InvalidArgument(format!(
            "layer index {k} outside 1..={}",
            layers.len()
        )));
    }
    let mut a = x.clone();
    for (i, t) in layers[..k - 1].iter().enumerate() {
        a = t.apply(&a)?;
        if !a.is_finite() {
            return Err(Error::Divergence {
                origin: format!("layer {}", i + 1),
            });
        }
    }
    Ok(a)
}

/// `T_i a` for every layer, each evaluated on its own.
pub fn inject_all(layers: &[Block], a: &Matrix) -> Result<Vec<Matrix>> {
    layers
        .iter()
        .enumerate()
        .map(|(i, t)| {
            if t.width() != a.cols() {
                return Err(Error::shape(format!("layer {}", i + 1), (a.rows(), t.width()), a.shape()));
            }
            t.apply(a)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProbeInputs {
    /// Seeded samples from the Frobenius ball of the given radius.
    Ball { count: usize, rows: usize, radius: f64 },
    #[serde(skip)]
    Given(Vec<Matrix>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    #[serde(default = "default_depths")]
    pub relative_depths: Vec<f64>,
    pub inputs: ProbeInputs,
}

fn default_depths() -> Vec<f64> {
    DEFAULT_DEPTHS.to_vec()
}

impl ProbeConfig {
    pub fn new(inputs: ProbeInputs) -> Self {
        ProbeConfig {
            relative_depths: default_depths(),
            inputs,
        }
    }

    /// Injection layers `k = round(fraction·K)`, at least 1.
    pub fn layer_indices(&self, depth: usize) -> Result<Vec<usize>> {
        if depth == 0 {
            return Err(Error::InvalidArgument("probe needs at least one layer".into()));
        }
        if self.relative_depths.is_empty() {
            return Err(Error::InvalidArgument("no injection depths".into()));
        }
        self.relative_depths
            .iter()
            .map(|&f| {
                if !(f > 0.0 && f <= 1.0) {
                    return Err(Error::InvalidArgument(format!("relative depth {f} outside (0, 1]")));
                }
                Ok(((f * depth as f64).round() as usize).clamp(1, depth))
            })
            .collect()
    }

    fn samples(&self, width: usize, seed: Seed) -> Result<Vec<Matrix>> {
        let xs = match &self.inputs {
            ProbeInputs::Given(xs) => xs.clone(),
            ProbeInputs::Ball { count, rows, radius } => {
                if *rows == 0 || !(*radius > 0.0) {
                    return Err(Error::InvalidArgument("ball inputs need rows > 0 and radius > 0".into()));
                }
                (0..*count)
                    .map(|j| uniform_ball(*rows, width, *radius, &mut seed.derive(j as u64).rng()))
                    .collect()
            }
        };
        if xs.is_empty() {
            return Err(Error::InvalidArgument("probe needs at least one sample input".into()));
        }
        if let Some(x) = xs.iter().find(|x| x.cols() != width || !x.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "sample input of shape {:?} does not fit width {width} or is not finite",
                x.shape()
            )));
        }
        Ok(xs)
    }
}

/// Statistics of one `(k, i)` cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeCell {
    pub k: usize,
    pub i: usize,
    #[serde(with = "ext_f64")]
    pub mean_d: f64,
    #[serde(with = "ext_f64")]
    pub var_d: f64,
    #[serde(with = "ext_f64")]
    pub mean_s: f64,
    #[serde(with = "ext_f64")]
    pub var_s: f64,
    pub n: usize,
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub depth: usize,
    pub injection_layers: Vec<usize>,
    pub cells: Vec<ProbeCell>,
}

/// Mean and population variance, summed in index order.
fn mean_var(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var)
}

pub fn run_probe(stack: &Block, config: &ProbeConfig, seed: Seed) -> Result<ProbeResult> {
    let layers: Vec<Block> = stack.layers().into_iter().cloned().collect();
    let depth = layers.len();
    let ks = config.layer_indices(depth)?;
    let xs = config.samples(stack.width(), seed)?;

    // One pass through the stack per sample, keeping the states at the
    // injection layers.
    let hidden: Vec<Vec<Result<Matrix>>> = xs
        .par_iter()
        .map(|x| {
            let mut out = Vec::with_capacity(ks.len());
            let mut a = x.clone();
            let mut at = 1;
            let mut failed: Option<Error> = None;
            for &k in &ks {
                // Depth lists need not be sorted.
                if k < at {
                    a = x.clone();
                    at = 1;
                    failed = None;
                }
                while at < k && failed.is_none() {
                    match layers[at - 1].apply(&a) {
                        Ok(next) if next.is_finite() => a = next,
                        Ok(_) => {
                            failed = Some(Error::Divergence {
                                origin: format!("layer {at}"),
                            })
                        }
                        Err(e) => failed = Some(e),
                    }
                    at += 1;
                }
                out.push(match &failed {
                    Some(e) => Err(e.clone()),
                    None => Ok(a.clone()),
                });
            }
            out
        })
        .collect();

    let grid: Vec<(usize, usize)> = (0..ks.len()).flat_map(|c| (0..depth).map(move |i| (c, i))).collect();
    let cells = grid
        .par_iter()
        .map(|&(c, i)| {
            let mut ds = Vec::with_capacity(xs.len());
            let mut ss = Vec::with_capacity(xs.len());
            let mut flags = Vec::new();
            let mut zero = 0;
            for (j, h) in hidden.iter().enumerate() {
                let outcome = h[c].as_ref().map_err(Clone::clone).and_then(|a| {
                    let o = layers[i].apply(a)?;
                    probe_metrics(a, &o)
                });
                match outcome {
                    Ok(m) => {
                        ds.push(m.d);
                        match m.s {
                            Some(s) => ss.push(s),
                            None => zero += 1,
                        }
                    }
                    Err(e) => flags.push(format!("sample {j}: {e}")),
                }
            }
            if zero > 0 {
                flags.push(format!("undefined-similarity: {zero} samples"));
            }
            let (mean_d, var_d) = mean_var(&ds);
            let (mean_s, var_s) = mean_var(&ss);
            ProbeCell {
                k: ks[c],
                i: i + 1,
                mean_d,
                var_d,
                mean_s,
                var_s,
                n: ds.len(),
                flags,
            }
        })
        .collect();
    Ok(ProbeResult {
        depth,
        injection_layers: ks,
        cells,
    })
}

impl ProbeResult {
    pub fn cells_at(&self, k: usize) -> impl Iterator<Item = &ProbeCell> {
        self.cells.iter().filter(move |c| c.k == k)
    }

    /// `mean_d` over layers at the deepest injection layer.
    pub fn deepest_mean_d(&self) -> Vec<f64> {
        let k = self.injection_layers.iter().copied().max().unwrap_or(0);
        self.cells_at(k).map(|c| c.mean_d).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("# states flattened row-major\nk,i,mean_d,var_d,mean_s,var_s,n\n");
        for c in &self.cells {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                c.k,
                c.i,
                fmt_real(c.mean_d),
                fmt_real(c.var_d),
                fmt_real(c.mean_s),
                fmt_real(c.var_s),
                c.n
            ));
        }
        out
    }
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start;
        while end + 1 < idx.len() && xs[idx[end + 1]] == xs[idx[start]] {
            end += 1;
        }
        // Ties share the average rank.
        let avg = (start + end) as f64 / 2.0 + 1.0;
        for &j in &idx[start..=end] {
            r[j] = avg;
        }
        start = end + 1;
    }
    r
}

/// Spearman rank correlation, ties averaged. NaN when either side is constant.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    if xs.len() != ys.len() || xs.len() < 2 {
        return f64::NAN;
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return f64::NAN;
    }
    sxy / (sxx * syy).sqrt()
}

/// Heatmap strip of one CSV column over layers `i` at injection layer `k`,
/// read back from the CSV written by [`ProbeResult::to_csv`]. The colour
/// scale is linear between the column's minimum and maximum and is recorded
/// in the file.
pub fn heatmap_svg(csv: &str, k: usize, column: &str) -> Result<String> {
    let mut lines = csv.lines().filter(|l| !l.starts_with('#'));
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| Error::InvalidArgument("empty csv".into()))?
        .split(',')
        .collect();
    let col = header
        .iter()
        .position(|h| *h == column)
        .ok_or_else(|| Error::InvalidArgument(format!("no column {column}")))?;
    let mut values = Vec::new();
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        let parse = |j: usize| -> Result<f64> {
            fields
                .get(j)
                .and_then(|f| f.parse::<f64>().ok())
                .ok_or_else(|| Error::InvalidArgument(format!("bad csv line: {line}")))
        };
        if parse(0)? as usize == k {
            values.push(parse(col)?);
        }
    }
    if values.is_empty() {
        return Err(Error::InvalidArgument(format!("no rows for k = {k}")));
    }
    let finite = values.iter().copied().filter(|v| v.is_finite());
    let lo = finite.clone().fold(f64::INFINITY, f64::min);
    let hi = finite.fold(f64::NEG_INFINITY, f64::max);
    let (cell, h) = (12usize, 24usize);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{h}\">\n\
         <desc>{column} at k={k}; linear scale {} (white) to {} (blue)</desc>\n",
        cell * values.len(),
        fmt_real(lo),
        fmt_real(hi)
    );
    for (j, v) in values.iter().enumerate() {
        let fill = if !v.is_finite() {
            "#888888".to_string()
        } else {
            let t = if hi > lo { (v - lo) / (hi - lo) } else { 0.0 };
            let c = (255.0 * (1.0 - t)).round() as u8;
            format!("#{c:02x}{c:02x}ff")
        };
        svg.push_str(&format!(
            "<rect x=\"{}\" y=\"0\" width=\"{cell}\" height=\"{h}\" fill=\"{fill}\"/>\n",
            j * cell
        ));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metrics_of_simple_pairs() {
        let a = Matrix::from_rows(&[&[3.0, 4.0]]);
        let m = probe_metrics(&a, &a).unwrap();
        assert_eq!((m.d, m.s), (0.0, Some(1.0)));
        let m = probe_metrics(&a, &a.scale(-1.0)).unwrap();
        assert_eq!((m.d, m.s), (10.0, Some(-1.0)));
        let e1 = Matrix::from_rows(&[&[1.0, 0.0]]);
        let e2 = Matrix::from_rows(&[&[0.0, 1.0]]);
        let m = probe_metrics(&e1, &e2).unwrap();
        assert!((m.d - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(m.s, Some(0.0));
        assert_eq!(probe_metrics(&a, &Matrix::zeros(1, 2)).unwrap().s, None);
    }

    #[test]
    fn extract_scales_through_doublings() {
        let layers = vec![Block::linear(Matrix::identity(2).scale(2.0)).unwrap(); 5];
        let x = Matrix::from_rows(&[&[1.0, -1.0]]);
        assert_eq!(extract_hidden(&layers, &x, 1).unwrap(), x);
        assert_eq!(extract_hidden(&layers, &x, 4).unwrap(), x.scale(8.0));
        assert!(extract_hidden(&layers, &x, 0).is_err());
        assert!(extract_hidden(&layers, &x, 6).is_err());
    }

    #[test]
    fn spearman_of_monotone_series() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(spearman(&x, &[10.0, 20.0, 25.0, 100.0]), 1.0);
        assert_eq!(spearman(&x, &[4.0, 3.0, 2.0, 1.0]), -1.0);
        assert!(spearman(&x, &[1.0, 1.0, 1.0, 1.0]).is_nan());
    }

    #[test]
    fn depth_indices_round_and_clamp() {
        let cfg = ProbeConfig::new(ProbeInputs::Given(vec![]));
        assert_eq!(cfg.layer_indices(10).unwrap(), vec![1, 2, 4, 6, 8]);
        assert_eq!(cfg.layer_indices(2).unwrap(), vec![1, 1, 1, 1, 2]);
        let last = ProbeConfig {
            relative_depths: vec![1.0],
            ..cfg.clone()
        };
        assert_eq!(last.layer_indices(10).unwrap(), vec![10]);
        for f in [0.0, 1.5, f64::NAN] {
            let bad = ProbeConfig {
                relative_depths: vec![f],
                ..cfg.clone()
            };
            assert!(bad.layer_indices(10).is_err());
        }
    }
}
