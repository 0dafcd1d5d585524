//! Attribute-domain evaluation, size accounting and lambda sweeps.

use crate::codec::{decode, encode, inspect, EncodeConfig, SectionSize};
use crate::error::{Error, Result};
use crate::gaussian::{merge_attributes, AttributeMatrix, GaussianModel, NUM_ATTRIBUTES};
use crate::geometry::{voxelize, voxelize_on};
use crate::trainer::csv_err;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::time::Instant;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttrPsnr {
    pub attr_id: u8,
    /// Mean over channels of `mse / range^2`.
    pub nmse: f64,
    /// `None` when the attribute matches exactly.
    pub psnr: Option<f64>,
    pub exact: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub num_voxels: usize,
    pub attributes: Vec<AttrPsnr>,
    pub stream_bytes: Option<usize>,
    pub bpp: Option<f64>,
    pub sections: Option<Vec<SectionSize>>,
}

impl Metrics {
    /// Adds the size figures of the stream the decoded model came from.
    pub fn with_stream(mut self, bytes: &[u8]) -> Result<Self> {
        let info = inspect(bytes)?;
        self.stream_bytes = Some(bytes.len());
        self.bpp = Some(bits_per_point(bytes.len(), self.num_voxels));
        self.sections = Some(info.parts);
        Ok(self)
    }

    pub fn attribute(&self, attr_id: u8) -> Option<&AttrPsnr> {
        self.attributes.iter().find(|a| a.attr_id == attr_id)
    }

    /// Mean normalized MSE over the listed attributes.
    pub fn mean_nmse(&self, attrs: &[u8]) -> f64 {
        let v: Vec<f64> = attrs
            .iter()
            .filter_map(|&a| self.attribute(a))
            .map(|a| a.nmse)
            .collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Io(std::io::Error::other(e)))
    }
}

pub fn bits_per_point(bytes: usize, voxels: usize) -> f64 {
    8.0 * bytes as f64 / voxels as f64
}

/// PSNR with the reference channel range as peak. Channels with zero range
/// use a peak of 1.
pub fn attribute_psnr(reference: &AttributeMatrix, test: &AttributeMatrix) -> Result<AttrPsnr> {
    if reference.channels != test.channels || reference.rows() != test.rows() {
        return Err(Error::shape(format!(
            "attribute {}: {}x{} against {}x{}",
            reference.attr_id,
            reference.rows(),
            reference.channels,
            test.rows(),
            test.channels
        )));
    }
    let ch = reference.channels;
    let n = reference.rows().max(1) as f64;
    let mut nmse = 0.0;
    let mut exact = true;
    for c in 0..ch {
        let (lo, hi) = reference
            .column(c)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
                (a.min(v as f64), b.max(v as f64))
            });
        let range = hi - lo;
        let peak = if range > 0.0 { range } else { 1.0 };
        let mut sse = 0.0;
        for (a, b) in reference.column(c).zip(test.column(c)) {
            let d = a as f64 - b as f64;
            sse += d * d;
            exact &= a == b;
        }
        nmse += sse / n / (peak * peak);
    }
    nmse /= ch as f64;
    Ok(AttrPsnr {
        attr_id: reference.attr_id,
        nmse,
        psnr: (!exact).then(|| -10.0 * nmse.log10()),
        exact,
    })
}

/// Compares a decoded model with a reference voxelized and merged at `depth`.
/// Both must occupy the same voxels.
pub fn eval(reference: &GaussianModel, decoded: &GaussianModel, depth: u32) -> Result<Metrics> {
    reference.validate()?;
    decoded.validate()?;
    let rv = voxelize(&reference.positions, depth)?;
    let dv = voxelize_on(&decoded.positions, rv.grid)?;
    if rv.voxels != dv.voxels {
        let common = count_common(&rv.voxels, &dv.voxels);
        return Err(Error::Geometry(format!(
            "reference occupies {} voxels, decoded {}, {} shared",
            rv.len(),
            dv.len(),
            common
        )));
    }
    let ra = merge_attributes(reference, &rv)?;
    let da = merge_attributes(decoded, &dv)?;
    let attributes = (1..=NUM_ATTRIBUTES as u8)
        .map(|a| attribute_psnr(ra.attribute(a), da.attribute(a)))
        .collect::<Result<_>>()?;
    Ok(Metrics {
        num_voxels: rv.len(),
        attributes,
        stream_bytes: None,
        bpp: None,
        sections: None,
    })
}

fn count_common<T: Ord>(a: &[T], b: &[T]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// Version tag written in the first column of every sweep row.
pub const SWEEP_SCHEMA: &str = "sweep-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    /// `None` on success, the error text otherwise.
    pub error: Option<String>,
    pub bytes: usize,
    pub bpp: f64,
    /// Indexed by attribute id minus one; `None` for uncoded or exact.
    pub psnr: Vec<Option<f64>>,
    /// Mean normalized MSE over the coded attributes.
    pub mean_nmse: f64,
    pub seconds: f64,
}

/// Encodes, decodes and evaluates `model` once per lambda. A failing point
/// becomes a row with `error` set and the sweep continues.
pub fn sweep(model: &GaussianModel, base: &EncodeConfig, lambdas: &[f64]) -> Vec<SweepRow> {
    lambdas
        .iter()
        .map(|&lambda| {
            let t0 = Instant::now();
            let mut cfg = base.clone();
            cfg.train.lambda = lambda;
            let run = || -> Result<(usize, Metrics)> {
                let e = encode(model, &cfg)?;
                let m = eval(model, &decode(&e.bytes)?, cfg.depth)?;
                Ok((e.bytes.len(), m))
            };
            let res = run();
            let seconds = t0.elapsed().as_secs_f64();
            match res {
                Ok((bytes, m)) => SweepRow {
                    lambda,
                    error: None,
                    bytes,
                    bpp: bits_per_point(bytes, m.num_voxels),
                    psnr: (1..=NUM_ATTRIBUTES as u8)
                        .map(|a| {
                            if cfg.attrs.contains(&a) {
                                m.attribute(a).and_then(|p| p.psnr)
                            } else {
                                None
                            }
                        })
                        .collect(),
                    mean_nmse: m.mean_nmse(&cfg.attrs),
                    seconds,
                },
                Err(e) => SweepRow {
                    lambda,
                    error: Some(e.to_string()),
                    bytes: 0,
                    bpp: 0.0,
                    psnr: vec![None; NUM_ATTRIBUTES],
                    mean_nmse: f64::NAN,
                    seconds,
                },
            }
        })
        .collect()
}

pub fn sweep_header() -> Vec<String> {
    let mut h: Vec<String> = ["schema", "lambda", "status", "bytes", "bpp"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    h.extend((1..=NUM_ATTRIBUTES).map(|a| format!("psnr_{a}")));
    h.extend(["mean_nmse", "seconds", "error"].map(String::from));
    h
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(sweep_header()).map_err(csv_err)?;
    for r in rows {
        let mut rec = vec![
            SWEEP_SCHEMA.to_string(),
            r.lambda.to_string(),
            if r.error.is_none() { "ok" } else { "failed" }.to_string(),
            r.bytes.to_string(),
            r.bpp.to_string(),
        ];
        rec.extend(
            r.psnr
                .iter()
                .map(|p| p.map(|v| v.to_string()).unwrap_or_default()),
        );
        rec.push(r.mean_nmse.to_string());
        rec.push(r.seconds.to_string());
        rec.push(r.error.clone().unwrap_or_default());
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
