//! Test-time Monte-Carlo sampling, ensemble averaging and deep ensembles.

use std::fmt;
use std::io::Write as _;
use std::path::Path;

use log::warn;
use rayon::prelude::*;

use crate::data::ImageDataset;
use crate::dropout::DropoutVariant;
use crate::error::{shape_err, Error, Result};
use crate::io::{write_atomic, Reader, Writer};
use crate::nn::classifier::{Classifier, Pass};
use crate::nn::loss::softmax;
use crate::scalar::Scalar;

/// Tolerance on member and averaged probability rows.
pub const SIMPLEX_TOLERANCE: f64 = 1e-6;

/// Default number of test-time samples.
pub const DEFAULT_MC_SAMPLES: usize = 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EnsembleSource {
    /// Stochastic passes of one network with the given dropout variant.
    Mc(DropoutVariant),
    /// Independently trained networks evaluated deterministically.
    DeepEnsemble,
}

impl EnsembleSource {
    fn tag(self) -> u8 {
        match self {
            EnsembleSource::Mc(v) => DropoutVariant::ALL.iter().position(|&x| x == v).expect("listed") as u8,
            EnsembleSource::DeepEnsemble => 255,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        if tag == 255 {
            return Ok(EnsembleSource::DeepEnsemble);
        }
        DropoutVariant::ALL
            .get(tag as usize)
            .map(|&v| EnsembleSource::Mc(v))
            .ok_or_else(|| Error::Format(format!("unknown ensemble source tag {tag}")))
    }
}

impl fmt::Display for EnsembleSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EnsembleSource::Mc(v) => write!(f, "mc_{v}"),
            EnsembleSource::DeepEnsemble => f.write_str("deep_ensemble"),
        }
    }
}

fn check_rows<S: Scalar>(probs: &[S], k: usize, what: &str) -> Result<()> {
    for (i, row) in probs.chunks(k).enumerate() {
        let sum: f64 = row.iter().map(|p| p.as_f64()).sum();
        if !(sum - 1.0).abs().le(&SIMPLEX_TOLERANCE) || row.iter().any(|p| !p.is_finite() || *p < S::zero()) {
            return Err(Error::Numeric(format!("{what} row {i} is not a probability vector (sum {sum})")));
        }
    }
    Ok(())
}

/// Averaged predictive distribution, `(N, K)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet<S> {
    probs: Vec<S>,
    num_classes: usize,
    labels: Vec<usize>,
}

impl<S: Scalar> PredictionSet<S> {
    pub fn new(probs: Vec<S>, num_classes: usize, labels: Vec<usize>) -> Result<Self> {
        if num_classes == 0 || probs.len() != labels.len() * num_classes {
            return shape_err(format!(
                "{} probabilities for {} samples of {num_classes} classes",
                probs.len(),
                labels.len()
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return shape_err(format!("label {bad} outside {num_classes} classes"));
        }
        check_rows(&probs, num_classes, "prediction")?;
        Ok(Self {
            probs,
            num_classes,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn probs(&self) -> &[S] {
        &self.probs
    }

    pub fn row(&self, n: usize) -> &[S] {
        &self.probs[n * self.num_classes..(n + 1) * self.num_classes]
    }

    /// Predicted class (lowest index on ties) and its probability.
    pub fn top(&self, n: usize) -> (usize, S) {
        argmax(self.row(n))
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let k = self.num_classes;
        let mut probs = Vec::with_capacity(indices.len() * k);
        for &i in indices {
            probs.extend_from_slice(self.row(i));
        }
        Self {
            probs,
            num_classes: k,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

pub(crate) fn argmax<S: Scalar>(row: &[S]) -> (usize, S) {
    let mut best = (0, row[0]);
    for (c, &p) in row.iter().enumerate().skip(1) {
        if p > best.1 {
            best = (c, p);
        }
    }
    best
}

/// `T x N x K` member probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsemblePredictions<S> {
    probs: Vec<S>,
    num_members: usize,
    num_classes: usize,
    labels: Vec<usize>,
    member_ids: Vec<u64>,
    source: EnsembleSource,
}

impl<S: Scalar> EnsemblePredictions<S> {
    pub fn new(
        probs: Vec<S>,
        num_classes: usize,
        labels: Vec<usize>,
        member_ids: Vec<u64>,
        source: EnsembleSource,
    ) -> Result<Self> {
        let t = member_ids.len();
        if t == 0 {
            return Err(Error::Shape("an ensemble needs at least one member".into()));
        }
        if num_classes == 0 || probs.len() != t * labels.len() * num_classes {
            return shape_err(format!(
                "{} probabilities for {t} members x {} samples x {num_classes} classes",
                probs.len(),
                labels.len()
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return shape_err(format!("label {bad} outside {num_classes} classes"));
        }
        check_rows(&probs, num_classes, "member")?;
        Ok(Self {
            probs,
            num_members: t,
            num_classes,
            labels,
            member_ids,
            source,
        })
    }

    pub fn num_members(&self) -> usize {
        self.num_members
    }

    pub fn num_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn member_ids(&self) -> &[u64] {
        &self.member_ids
    }

    pub fn source(&self) -> EnsembleSource {
        self.source
    }

    pub fn probs(&self) -> &[S] {
        &self.probs
    }

    /// `(N, K)` probabilities of member `t`.
    pub fn member(&self, t: usize) -> &[S] {
        let span = self.labels.len() * self.num_classes;
        &self.probs[t * span..(t + 1) * span]
    }

    pub fn row(&self, t: usize, n: usize) -> &[S] {
        let k = self.num_classes;
        &self.member(t)[n * k..(n + 1) * k]
    }

    pub fn member_set(&self, t: usize) -> PredictionSet<S> {
        PredictionSet {
            probs: self.member(t).to_vec(),
            num_classes: self.num_classes,
            labels: self.labels.clone(),
        }
    }

    /// The first `m` members.
    pub fn prefix(&self, m: usize) -> Result<Self> {
        if m == 0 || m > self.num_members {
            return Err(Error::Usage(format!("prefix size {m} outside 1..={}", self.num_members)));
        }
        let span = self.labels.len() * self.num_classes;
        Ok(Self {
            probs: self.probs[..m * span].to_vec(),
            num_members: m,
            num_classes: self.num_classes,
            labels: self.labels.clone(),
            member_ids: self.member_ids[..m].to_vec(),
            source: self.source,
        })
    }

    pub fn subset_samples(&self, indices: &[usize]) -> Self {
        let k = self.num_classes;
        let mut probs = Vec::with_capacity(self.num_members * indices.len() * k);
        for t in 0..self.num_members {
            for &i in indices {
                probs.extend_from_slice(self.row(t, i));
            }
        }
        Self {
            probs,
            num_members: self.num_members,
            num_classes: k,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            member_ids: self.member_ids.clone(),
            source: self.source,
        }
    }
}

/// Mean of the first `m` members, accumulated in member order.
pub fn prefix_average<S: Scalar>(ens: &EnsemblePredictions<S>, m: usize) -> Result<PredictionSet<S>> {
    if m == 0 || m > ens.num_members {
        return Err(Error::Usage(format!("prefix size {m} outside 1..={}", ens.num_members)));
    }
    let mut acc = ens.member(0).to_vec();
    for t in 1..m {
        for (a, &p) in acc.iter_mut().zip(ens.member(t)) {
            *a += p;
        }
    }
    let inv = S::one() / S::of(m as f64);
    acc.iter_mut().for_each(|a| *a *= inv);
    PredictionSet::new(acc, ens.num_classes, ens.labels.clone())
}

pub fn ensemble_average<S: Scalar>(ens: &EnsemblePredictions<S>) -> PredictionSet<S> {
    prefix_average(ens, ens.num_members).expect("full prefix is valid")
}

/// Softmax outputs of one pass configuration over a dataset, `(N*K)`.
pub fn predict_probs<S: Scalar, M: Classifier<S>>(
    net: &M,
    data: &ImageDataset<S>,
    pass: Pass,
    batch_size: usize,
) -> Result<Vec<S>> {
    let batch_size = batch_size.max(1);
    let mut out = Vec::with_capacity(data.len() * net.num_classes());
    let mut start = 0;
    while start < data.len() {
        let end = (start + batch_size).min(data.len());
        let x = data.images.slice_items(start, end);
        let logits = net.forward_pass(&x, &pass.at(start as u64))?;
        if !logits.all_finite() {
            return Err(Error::Numeric(format!("non-finite logits for samples {start}..{end}")));
        }
        out.extend_from_slice(softmax(&logits)?.data());
        start = end;
    }
    Ok(out)
}

/// `T` stochastic passes; member `t` uses sample index `t`, so any member can
/// be reproduced on its own.
pub fn mc_predict<S: Scalar, M: Classifier<S>>(
    net: &M,
    data: &ImageDataset<S>,
    num_samples: usize,
    master_seed: u64,
    batch_size: usize,
) -> Result<EnsemblePredictions<S>> {
    if num_samples == 0 {
        return Err(Error::Usage("mc_predict needs at least one sample".into()));
    }
    if !net.is_stochastic() {
        warn!("network has no active dropout; all {num_samples} MC members will be identical");
    }
    let members: Vec<Vec<S>> = (0..num_samples)
        .into_par_iter()
        .map(|t| predict_probs(net, data, Pass::mc(master_seed, t as u64), batch_size))
        .collect::<Result<_>>()?;
    EnsemblePredictions::new(
        members.concat(),
        net.num_classes(),
        data.labels.clone(),
        (0..num_samples as u64).collect(),
        EnsembleSource::Mc(net.dropout_variant()),
    )
}

/// Members are the given networks in deterministic mode; member ids are the
/// networks' seeds.
pub fn deep_ensemble_predict<S: Scalar, M: Classifier<S>>(
    nets: &[M],
    data: &ImageDataset<S>,
    batch_size: usize,
) -> Result<EnsemblePredictions<S>> {
    let Some(first) = nets.first() else {
        return Err(Error::Usage("deep ensemble needs at least one network".into()));
    };
    if nets.len() < 2 {
        warn!("deep ensemble with a single network has no diversity");
    }
    if nets.iter().any(|n| n.num_classes() != first.num_classes()) {
        return Err(Error::Config("deep ensemble members disagree on the class count".into()));
    }
    let members: Vec<Vec<S>> = nets
        .par_iter()
        .map(|net| predict_probs(net, data, Pass::deterministic(), batch_size))
        .collect::<Result<_>>()?;
    EnsemblePredictions::new(
        members.concat(),
        first.num_classes(),
        data.labels.clone(),
        nets.iter().map(|n| n.seed()).collect(),
        EnsembleSource::DeepEnsemble,
    )
}

const ENS_MAGIC: &[u8; 4] = b"CDEP";
const ENS_VERSION: u32 = 1;

/// Interchange layout: magic, version u32, real width u8, source u8,
/// T u64, N u64, K u64, member ids u64*T, probabilities (member-major),
/// labels u32*N.
pub fn encode_ensemble<S: Scalar>(ens: &EnsemblePredictions<S>) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(ENS_MAGIC);
    w.u32(ENS_VERSION);
    w.u8(S::WIDTH);
    w.u8(ens.source.tag());
    w.u64(ens.num_members as u64);
    w.u64(ens.labels.len() as u64);
    w.u64(ens.num_classes as u64);
    for &id in &ens.member_ids {
        w.u64(id);
    }
    w.scalars(&ens.probs);
    for &l in &ens.labels {
        w.u32(l as u32);
    }
    w.into_inner()
}

/// Decodes an interchange file written at either precision into `S`.
pub fn decode_ensemble<S: Scalar>(bytes: &[u8]) -> Result<EnsemblePredictions<S>> {
    let mut r = Reader::new(bytes, "ensemble file");
    r.expect_magic(ENS_MAGIC)?;
    let version = r.u32()?;
    if version != ENS_VERSION {
        return Err(Error::Format(format!("unsupported ensemble file version {version}")));
    }
    let width = r.u8()?;
    let source = EnsembleSource::from_tag(r.u8()?)?;
    let t = r.len(8)?;
    let n = r.len(4)?;
    let k = r.len(0)?;
    let mut ids = Vec::with_capacity(t);
    for _ in 0..t {
        ids.push(r.u64()?);
    }
    let count = t
        .checked_mul(n)
        .and_then(|x| x.checked_mul(k))
        .ok_or_else(|| Error::Format("ensemble dimensions overflow".into()))?;
    let probs: Vec<S> = match width {
        4 => r.scalars::<f32>(count)?.into_iter().map(|v| S::of(v as f64)).collect(),
        8 => r.scalars::<f64>(count)?.into_iter().map(S::of).collect(),
        w => return Err(Error::Format(format!("unsupported real width {w}"))),
    };
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        labels.push(r.u32()? as usize);
    }
    r.finish()?;
    EnsemblePredictions::new(probs, k, labels, ids, source).map_err(|e| Error::Format(format!("ensemble file: {e}")))
}

pub fn write_ensemble<S: Scalar>(ens: &EnsemblePredictions<S>, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path, &encode_ensemble(ens))
}

pub fn read_ensemble<S: Scalar>(path: impl AsRef<Path>) -> Result<EnsemblePredictions<S>> {
    decode_ensemble(&std::fs::read(path)?)
}

/// One row per `(member, sample)`: `member_id,sample,label,p0,...`.
pub fn ensemble_to_csv<S: Scalar>(ens: &EnsemblePredictions<S>) -> String {
    let mut out = Vec::new();
    write!(out, "member_id,sample,label").expect("vec write");
    for c in 0..ens.num_classes {
        write!(out, ",p{c}").expect("vec write");
    }
    out.push(b'\n');
    for t in 0..ens.num_members {
        for n in 0..ens.num_samples() {
            write!(out, "{},{},{}", ens.member_ids[t], n, ens.labels[n]).expect("vec write");
            for p in ens.row(t, n) {
                write!(out, ",{}", p.as_f64()).expect("vec write");
            }
            out.push(b'\n');
        }
    }
    String::from_utf8(out).expect("ascii")
}
