//! The combined evaluation report.

use std::collections::BTreeMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::edit::ErrorRates;
use super::htr::ctc_train;
use super::image::{compute_fid, mean_perceptual, mssim, rmse, FeatureExtractor, PerceptualMetric, PooledPixels};
use super::writer::{train_writer_classifier, writer_fidelity};
use crate::config::RunConfig;
use crate::dataset::{Charset, Split, WordSample};
use crate::error::{Error, Result};
use crate::raster::GrayImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Metric {
    Fid,
    Mssim,
    Rmse,
    Writer,
    Htr,
    Perceptual,
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "fid" => Metric::Fid,
            "mssim" => Metric::Mssim,
            "rmse" => Metric::Rmse,
            "writer" => Metric::Writer,
            "htr" => Metric::Htr,
            "perceptual" => Metric::Perceptual,
            other => return Err(Error::Config(format!("unknown metric {other:?}"))),
        })
    }
}

impl Metric {
    pub fn parse_list(names: &[String]) -> Result<Vec<Metric>> {
        let mut out: Vec<Metric> = names.iter().map(|n| n.parse()).collect::<Result<_>>()?;
        out.sort();
        out.dedup();
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub runs: usize,
}

impl MeanStd {
    /// Population standard deviation over the runs.
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Invalid("no runs to summarize".into()));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Ok(Self {
            mean,
            std: var.sqrt(),
            runs: values.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub format: String,
    pub fid: Option<f64>,
    pub fid_features: Option<String>,
    pub mssim: Option<f64>,
    pub rmse: Option<f64>,
    /// Mean learned perceptual distance, when an adapter is supplied.
    pub perceptual: Option<f64>,
    pub writer_acc: Option<f64>,
    /// Percent, recognizer trained on the generated set.
    pub cer: Option<MeanStd>,
    pub wer: Option<MeanStd>,
    /// Percent, same recognizer recipe trained on the real training split.
    pub cer_real: Option<MeanStd>,
    pub wer_real: Option<MeanStd>,
    pub counts: BTreeMap<String, usize>,
    pub config_hash: String,
    pub config: serde_json::Value,
}

pub const REPORT_FORMAT: &str = "scribe/report/v1";

impl MetricReport {
    fn empty(run: &RunConfig) -> Self {
        Self {
            format: REPORT_FORMAT.into(),
            fid: None,
            fid_features: None,
            mssim: None,
            rmse: None,
            perceptual: None,
            writer_acc: None,
            cer: None,
            wer: None,
            cer_real: None,
            wer_real: None,
            counts: BTreeMap::new(),
            config_hash: run.hash(),
            config: run.to_json(),
        }
    }

    pub fn all_finite(&self) -> bool {
        let scalars = [self.fid, self.mssim, self.rmse, self.perceptual, self.writer_acc];
        let spreads = [self.cer, self.wer, self.cer_real, self.wer_real];
        scalars.iter().flatten().all(|v| v.is_finite())
            && spreads.iter().flatten().all(|m| m.mean.is_finite() && m.std.is_finite())
    }
}

/// Real samples outside the training split, or all of them if there are none.
fn held_out<'a>(real: &[&'a WordSample]) -> Vec<&'a WordSample> {
    let test: Vec<&WordSample> = real.iter().copied().filter(|s| s.split != Split::Train).collect();
    if test.is_empty() {
        real.to_vec()
    } else {
        test
    }
}

fn train_split<'a>(real: &[&'a WordSample]) -> Vec<&'a WordSample> {
    let train: Vec<&WordSample> = real.iter().copied().filter(|s| s.split == Split::Train).collect();
    if train.is_empty() {
        real.to_vec()
    } else {
        train
    }
}

/// Pairs generated samples with unused real samples of the same writer and
/// transcription, in order.
fn pair_up<'a>(real: &[&'a WordSample], generated: &[&'a WordSample]) -> Vec<(&'a GrayImage, &'a GrayImage)> {
    let mut used = vec![false; real.len()];
    let mut out = Vec::new();
    for g in generated {
        let hit = real.iter().enumerate().find(|(i, r)| {
            !used[*i] && r.writer_id == g.writer_id && r.transcription == g.transcription
        });
        if let Some((i, r)) = hit {
            used[i] = true;
            out.push((&r.image, &g.image));
        }
    }
    out
}

/// CER/WER (percent) of recognizers trained on `train` and tested on
/// `test`, one training per seed `0..runs`.
pub fn htr_error_rates(
    train: &[&WordSample],
    test: &[&WordSample],
    charset: &Charset,
    run: &RunConfig,
) -> Result<(MeanStd, MeanStd)> {
    let mut cers = Vec::new();
    let mut wers = Vec::new();
    for r in 0..run.eval.htr_runs.max(1) {
        let (model, _) = ctc_train(train, charset, &run.eval.htr, run.seed.wrapping_add(r as u64))?;
        let ErrorRates { cer, wer } = model.error_rates(test)?;
        cers.push(100.0 * cer);
        wers.push(100.0 * wer);
    }
    Ok((MeanStd::of(&cers)?, MeanStd::of(&wers)?))
}

/// Scores `generated` against `real`. The writer classifier and the
/// real-data recognizer train on the real training split; recognizers are
/// tested on the real held-out splits. The perceptual metric needs an
/// adapter.
pub fn evaluate(
    real: &[&WordSample],
    generated: &[&WordSample],
    charset: &Charset,
    metrics: &[Metric],
    run: &RunConfig,
    perceptual: Option<&dyn PerceptualMetric>,
) -> Result<MetricReport> {
    if real.is_empty() || generated.is_empty() {
        return Err(Error::Data("evaluation needs non-empty real and generated sets".into()));
    }
    let mut rep = MetricReport::empty(run);
    rep.counts.insert("real".into(), real.len());
    rep.counts.insert("generated".into(), generated.len());
    let pairs = pair_up(real, generated);
    for m in metrics {
        match m {
            Metric::Fid => {
                let ext = PooledPixels {
                    factor: run.eval.fid_pool,
                };
                let r: Vec<&GrayImage> = real.iter().map(|s| &s.image).collect();
                let g: Vec<&GrayImage> = generated.iter().map(|s| &s.image).collect();
                rep.fid = Some(compute_fid(&r, &g, &ext)?);
                rep.fid_features = Some(ext.name());
            }
            Metric::Mssim | Metric::Rmse | Metric::Perceptual => {
                if pairs.is_empty() {
                    return Err(Error::Data(
                        "no generated sample shares writer and text with a real one".into(),
                    ));
                }
                let a: Vec<&GrayImage> = pairs.iter().map(|p| p.0).collect();
                let b: Vec<&GrayImage> = pairs.iter().map(|p| p.1).collect();
                rep.counts.insert("pairs".into(), pairs.len());
                match m {
                    Metric::Mssim => rep.mssim = Some(mssim(&a, &b)?),
                    Metric::Rmse => rep.rmse = Some(rmse(&a, &b)?),
                    _ => {
                        let metric = perceptual.ok_or_else(|| {
                            Error::Config("the perceptual metric needs an adapter; none is bundled".into())
                        })?;
                        rep.perceptual = Some(mean_perceptual(metric, &a, &b)?);
                    }
                }
            }
            Metric::Writer => {
                let (clf, _) = train_writer_classifier(&train_split(real), &run.eval.writer, run.seed)?;
                let scored: Vec<(&GrayImage, &str)> = generated
                    .iter()
                    .filter(|s| clf.writers().label(&s.writer_id).is_some())
                    .map(|s| (&s.image, s.writer_id.as_str()))
                    .collect();
                rep.counts.insert("writer_scored".into(), scored.len());
                if !scored.is_empty() {
                    rep.writer_acc = Some(writer_fidelity(&scored, &clf)?);
                }
            }
            Metric::Htr => {
                let test = held_out(real);
                rep.counts.insert("htr_test".into(), test.len());
                let (c, w) = htr_error_rates(generated, &test, charset, run)?;
                rep.cer = Some(c);
                rep.wer = Some(w);
                let (c, w) = htr_error_rates(&train_split(real), &test, charset, run)?;
                rep.cer_real = Some(c);
                rep.wer_real = Some(w);
            }
        }
    }
    if !rep.all_finite() {
        return Err(Error::NonFinite("evaluation produced a non-finite metric".into()));
    }
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::{toy_corpus, ToySpec};

    #[test]
    fn metric_names() {
        let m = Metric::parse_list(&["rmse".into(), "fid".into(), "fid".into()]).unwrap();
        assert_eq!(m, vec![Metric::Fid, Metric::Rmse]);
        assert!(Metric::parse_list(&["lpips".into()]).is_err());
        let c = toy_corpus(&ToySpec::default()).unwrap();
        let all: Vec<&WordSample> = c.samples().iter().collect();
        let e = evaluate(&all, &all, c.charset(), &[Metric::Perceptual], &RunConfig::toy(), None);
        assert!(matches!(e, Err(Error::Config(_))));
    }

    #[test]
    fn mean_std() {
        let m = MeanStd::of(&[1.0, 3.0]).unwrap();
        assert_eq!((m.mean, m.std, m.runs), (2.0, 1.0, 2));
        assert!(MeanStd::of(&[]).is_err());
    }

    #[test]
    fn identical_sets_score_perfectly() {
        let c = toy_corpus(&ToySpec::default()).unwrap();
        let all: Vec<&WordSample> = c.samples().iter().collect();
        let run = RunConfig::toy();
        let rep = evaluate(&all, &all, c.charset(), &[Metric::Fid, Metric::Mssim, Metric::Rmse], &run, None).unwrap();
        assert!(rep.fid.unwrap() < 1e-6);
        assert!((rep.mssim.unwrap() - 1.0).abs() < 1e-9);
        assert_eq!(rep.rmse.unwrap(), 0.0);
        assert_eq!(rep.counts["pairs"], all.len());
        let json = serde_json::to_string(&rep).unwrap();
        let back: MetricReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, rep);
    }
}
