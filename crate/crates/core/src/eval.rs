//! Per-fold testing, confusion matrices and their aggregation.

use std::fmt::Write as _;
use std::io::{Read, Write};

use crate::dataset::{EmotionLabel, N_CLASSES};
use crate::dsp::FrameConfig;
use crate::error::{Error, Result};
use crate::numerics::argmax;
use crate::train::{Checkpoint, Example};

/// Square count matrix; rows are true classes, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n: usize) -> Self {
        Self { n, counts: vec![0; n * n] }
    }

    pub fn emotions() -> Self {
        Self::new(N_CLASSES)
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Shape("confusion matrix must be square".into()));
        }
        Ok(Self { n, counts: rows.concat() })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn add(&mut self, truth: usize, predicted: usize) {
        assert!(truth < self.n && predicted < self.n, "class index out of range");
        self.counts[truth * self.n + predicted] += 1;
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.n + predicted]
    }

    pub fn row(&self, truth: usize) -> &[u64] {
        &self.counts[truth * self.n..(truth + 1) * self.n]
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        self.row(truth).iter().sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n).map(|i| self.get(i, i)).sum()
    }

    /// Fraction of utterances on the diagonal; `None` when empty.
    pub fn accuracy(&self) -> Option<f64> {
        let total = self.total();
        (total > 0).then(|| self.trace() as f64 / total as f64)
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.n != self.n {
            return Err(Error::Shape(format!("cannot add {0}x{0} to {1}x{1} matrix", other.n, self.n)));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// Row-normalized rates; rows without support are all zero and flagged.
    pub fn normalized(&self) -> (Vec<Vec<f64>>, Vec<bool>) {
        let mut rates = Vec::with_capacity(self.n);
        let mut empty = Vec::with_capacity(self.n);
        for i in 0..self.n {
            let sum = self.row_sum(i);
            empty.push(sum == 0);
            rates.push(self.row(i).iter().map(|&c| if sum == 0 { 0.0 } else { c as f64 / sum as f64 }).collect());
        }
        (rates, empty)
    }
}

/// One test utterance's outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub path: String,
    pub truth: EmotionLabel,
    pub predicted: EmotionLabel,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldResult {
    pub held_out_subject: String,
    pub confusion: ConfusionMatrix,
    pub records: Vec<PredictionRecord>,
}

impl FoldResult {
    pub fn from_records(held_out_subject: impl Into<String>, records: Vec<PredictionRecord>) -> Self {
        let mut confusion = ConfusionMatrix::emotions();
        for r in &records {
            confusion.add(r.truth.index(), r.predicted.index());
        }
        Self { held_out_subject: held_out_subject.into(), confusion, records }
    }
}

/// Test a trained checkpoint on one held-out subject. Predictions are the
/// posterior argmax, ties going to the lowest class index.
pub fn evaluate_fold(
    ckpt: &Checkpoint,
    held_out_subject: &str,
    test: &[Example],
    feature_cfg: &FrameConfig,
) -> Result<FoldResult> {
    if test.is_empty() {
        return Err(Error::Config(format!("no test utterances for subject {held_out_subject}")));
    }
    if *feature_cfg != ckpt.frame_cfg {
        return Err(Error::Config("features were extracted with a different frame config than the checkpoint".into()));
    }
    let mut records = Vec::with_capacity(test.len());
    for ex in test {
        if ex.features.dim() != ckpt.model_cfg.input_dim {
            return Err(Error::Config(format!(
                "{}: {} coefficients per frame, checkpoint expects {}",
                ex.id,
                ex.features.dim(),
                ckpt.model_cfg.input_dim
            )));
        }
        let probs = ckpt.predict(&ex.features)?.posterior.probs;
        let predicted = EmotionLabel::from_index(argmax(&probs)).expect("six-way head");
        records.push(PredictionRecord { path: ex.id.clone(), truth: ex.label, predicted, probs });
    }
    Ok(FoldResult::from_records(held_out_subject, records))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AggregateMode {
    /// Sum counts over folds, then normalize each row.
    #[default]
    SumThenNormalize,
    /// Normalize each fold, then average each row over the folds that have
    /// support for it.
    MeanOfNormalized,
}

impl AggregateMode {
    pub fn key(self) -> &'static str {
        match self {
            AggregateMode::SumThenNormalize => "sum_then_normalize",
            AggregateMode::MeanOfNormalized => "mean_of_normalized",
        }
    }

    pub fn from_key(key: &str) -> Option<Self> {
        match key {
            "sum_then_normalize" => Some(AggregateMode::SumThenNormalize),
            "mean_of_normalized" => Some(AggregateMode::MeanOfNormalized),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateReport {
    pub mode: AggregateMode,
    pub normalized: Vec<Vec<f64>>,
    /// Rows that had no support in any fold.
    pub zero_support: Vec<bool>,
    /// Summed counts across folds.
    pub counts: ConfusionMatrix,
    pub true_positive_rates: Vec<f64>,
    /// Micro accuracy over all pooled utterances.
    pub overall_accuracy: f64,
    pub fold_count: usize,
}

/// Aggregate confusion matrices.
pub fn aggregate_matrices(folds: &[&ConfusionMatrix], mode: AggregateMode) -> Result<AggregateReport> {
    let first = folds.first().ok_or(Error::EmptyReport)?;
    let n = first.n();
    let mut counts = ConfusionMatrix::new(n);
    for f in folds {
        counts.merge(f)?;
    }
    if counts.total() == 0 {
        return Err(Error::EmptyReport);
    }
    let (normalized, zero_support) = match mode {
        AggregateMode::SumThenNormalize => counts.normalized(),
        AggregateMode::MeanOfNormalized => {
            let mut sums = vec![vec![0.0; n]; n];
            let mut support = vec![0usize; n];
            for f in folds {
                let (rates, empty) = f.normalized();
                for i in (0..n).filter(|&i| !empty[i]) {
                    support[i] += 1;
                    sums[i].iter_mut().zip(&rates[i]).for_each(|(s, r)| *s += r);
                }
            }
            for (row, &k) in sums.iter_mut().zip(&support) {
                if k > 0 {
                    row.iter_mut().for_each(|v| *v /= k as f64);
                }
            }
            (sums, support.iter().map(|&k| k == 0).collect())
        }
    };
    let true_positive_rates = (0..n).map(|i| normalized[i][i]).collect();
    Ok(AggregateReport {
        mode,
        normalized,
        zero_support,
        overall_accuracy: counts.trace() as f64 / counts.total() as f64,
        counts,
        true_positive_rates,
        fold_count: folds.len(),
    })
}

pub fn aggregate(folds: &[FoldResult], mode: AggregateMode) -> Result<AggregateReport> {
    aggregate_matrices(&folds.iter().map(|f| &f.confusion).collect::<Vec<_>>(), mode)
}

/// Best and worst CREMA-D true-positive rates per emotion as
/// `(model number, percent)`, for side-by-side comparison only.
pub const PAPER_REPORTED: [(EmotionLabel, (usize, f64), (usize, f64)); N_CLASSES] = [
    (EmotionLabel::Anger, (2, 75.6), (1, 63.25)),
    (EmotionLabel::Disgust, (2, 48.46), (3, 36.18)),
    (EmotionLabel::Fear, (2, 48.62), (3, 6.89)),
    (EmotionLabel::Happy, (1, 62.7), (3, 43.71)),
    (EmotionLabel::Neutral, (1, 63.10), (3, 52.48)),
    (EmotionLabel::Sad, (2, 70.57), (4, 63.25)),
];

/// Reference percentage for one emotion and model, when one was reported.
pub fn paper_reported(emotion: EmotionLabel, model_number: usize) -> Option<f64> {
    let (_, best, worst) = PAPER_REPORTED.iter().find(|(e, _, _)| *e == emotion)?;
    [best, worst].into_iter().find(|(m, _)| *m == model_number).map(|(_, v)| *v)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmotionRow {
    pub emotion: EmotionLabel,
    /// `None` when the emotion had no test support.
    pub true_positive_pct: Option<f64>,
    pub reported_best: (usize, f64),
    pub reported_worst: (usize, f64),
}

pub fn per_emotion_report(r: &AggregateReport) -> Vec<EmotionRow> {
    PAPER_REPORTED
        .iter()
        .map(|&(emotion, best, worst)| {
            let i = emotion.index();
            let supported = i < r.normalized.len() && !r.zero_support[i];
            EmotionRow {
                emotion,
                true_positive_pct: supported.then(|| 100.0 * r.true_positive_rates[i]),
                reported_best: best,
                reported_worst: worst,
            }
        })
        .collect()
}

/// Plain-text table of per-emotion true-positive percentages.
pub fn format_summary(title: &str, r: &AggregateReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{title}");
    let _ = writeln!(
        s,
        "aggregation: {}  folds: {}  utterances: {}  overall accuracy: {:.2}%",
        r.mode.key(),
        r.fold_count,
        r.counts.total(),
        100.0 * r.overall_accuracy
    );
    let _ = writeln!(s, "{:<10} {:>8}   {:<28}", "emotion", "TP %", "paper-reported (best / worst)");
    for row in per_emotion_report(r) {
        let tp = row.true_positive_pct.map_or("n/a".to_string(), |v| format!("{v:.2}"));
        let _ = writeln!(
            s,
            "{:<10} {:>8}   Model {} - {} / Model {} - {}",
            row.emotion.name(),
            tp,
            row.reported_best.0,
            row.reported_best.1,
            row.reported_worst.0,
            row.reported_worst.1
        );
    }
    s
}

fn csv_err(e: csv::Error) -> Error {
    Error::Parse { field: "csv".into(), detail: e.to_string() }
}

/// `path,true,pred,p_ANG,...,p_SAD`.
pub fn write_fold_csv<W: Write>(fold: &FoldResult, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["path".to_string(), "true".into(), "pred".into()];
    header.extend(EmotionLabel::ALL.iter().map(|e| format!("p_{}", e.code())));
    w.write_record(&header).map_err(csv_err)?;
    for r in &fold.records {
        let mut row = vec![r.path.clone(), r.truth.code().to_string(), r.predicted.code().to_string()];
        row.extend(r.probs.iter().map(|p| p.to_string()));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io("fold csv", e))
}

pub fn read_fold_csv<R: Read>(held_out_subject: &str, input: R) -> Result<FoldResult> {
    let mut r = csv::Reader::from_reader(input);
    let mut records = Vec::new();
    for row in r.records() {
        let row = row.map_err(csv_err)?;
        if row.len() != 3 + N_CLASSES {
            return Err(Error::Parse { field: "row".into(), detail: format!("{} columns", row.len()) });
        }
        let label = |field: &str, v: &str| {
            EmotionLabel::from_code(v).ok_or_else(|| Error::Parse { field: field.into(), detail: v.into() })
        };
        let probs = (3..row.len())
            .map(|i| {
                row[i].parse::<f64>().map_err(|_| Error::Parse { field: "probability".into(), detail: row[i].into() })
            })
            .collect::<Result<_>>()?;
        records.push(PredictionRecord {
            path: row[0].to_string(),
            truth: label("true", &row[1])?,
            predicted: label("pred", &row[2])?,
            probs,
        });
    }
    Ok(FoldResult::from_records(held_out_subject, records))
}

/// Normalized matrix with emotion-code header row and column.
pub fn write_aggregate_csv<W: Write>(r: &AggregateReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let codes: Vec<&str> = EmotionLabel::ALL.iter().map(|e| e.code()).collect();
    let mut header = vec!["true\\pred"];
    header.extend(&codes);
    w.write_record(&header).map_err(csv_err)?;
    for (code, row) in codes.iter().zip(&r.normalized) {
        let mut line = vec![code.to_string()];
        line.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&line).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io("aggregate csv", e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::FeatureSequence;
    use crate::model::{ModelConfig, ModelParams, Variant};
    use crate::numerics::Matrix;
    use proptest::prelude::*;

    fn record(truth: EmotionLabel, predicted: EmotionLabel) -> PredictionRecord {
        let mut probs = vec![0.0; 6];
        probs[predicted.index()] = 1.0;
        PredictionRecord { path: "x.wav".into(), truth, predicted, probs }
    }

    #[test]
    fn perfect_and_constant_predictors() {
        let recs = (0..10).map(|i| record(EmotionLabel::ALL[i % 6], EmotionLabel::ALL[i % 6])).collect();
        let f = FoldResult::from_records("1001", recs);
        assert_eq!(f.confusion.trace(), 10);
        assert_eq!(f.confusion.total(), 10);

        let truths = [EmotionLabel::Anger, EmotionLabel::Anger, EmotionLabel::Anger, EmotionLabel::Sad, EmotionLabel::Sad];
        let f = FoldResult::from_records("1001", truths.iter().map(|&t| record(t, EmotionLabel::Anger)).collect());
        assert_eq!(f.confusion.get(0, 0), 3);
        assert_eq!(f.confusion.get(EmotionLabel::Sad.index(), 0), 2);
        assert_eq!(f.confusion.total(), 5);
    }

    fn hand_checkpoint() -> Checkpoint {
        // Saturated input and output gates: each LSTM maps x to tanh(tanh(x)).
        // Head bias favours Neutral; a negative decoder state drives Sad.
        let cfg = ModelConfig {
            variant: Variant::UniPlain,
            input_dim: 1,
            enc_hidden: 1,
            dec_hidden: 1,
            dropout_rate: 0.0,
            ..Default::default()
        };
        let mut p = ModelParams::zeros(&cfg);
        p.enc_forward.w_input = Matrix::column(&[0.0, 0.0, 1.0, 0.0]);
        p.enc_forward.bias = Matrix::column(&[20.0, 0.0, 0.0, 20.0]);
        p.decoder.w_input = Matrix::column(&[0.0, 0.0, 1.0, 0.0]);
        p.decoder.bias = Matrix::column(&[20.0, 0.0, 0.0, 20.0]);
        p.head.weight = Matrix::column(&[0.0, 0.0, 0.0, 0.0, 0.0, -10.0]);
        p.head.bias = Matrix::column(&[0.0, 0.0, 0.0, 0.0, 0.5, 0.0]);
        Checkpoint::untrained(cfg, FrameConfig::default(), p)
    }

    fn one_frame(v: f64) -> FeatureSequence {
        FeatureSequence { frames: Matrix::column(&[v]), frame_times: vec![0], pad_mask: vec![false] }
    }

    #[test]
    fn hand_set_checkpoint_predictions() {
        // Sad's logit is -10 * tanh^4(x), Neutral's is 0.5.
        let ck = hand_checkpoint();
        let h = |x: f64| x.tanh().tanh().tanh().tanh();
        assert!(-10.0 * h(-2.0) > 0.5 && -10.0 * h(0.5) < 0.5);
        let test = vec![
            Example { id: "a".into(), features: one_frame(-2.0), label: EmotionLabel::Sad },
            Example { id: "b".into(), features: one_frame(0.5), label: EmotionLabel::Neutral },
        ];
        let f = evaluate_fold(&ck, "s", &test, &FrameConfig::default()).unwrap();
        assert_eq!(f.records[0].predicted, EmotionLabel::Sad);
        assert_eq!(f.records[1].predicted, EmotionLabel::Neutral);
        assert_eq!(f.confusion.trace(), 2);

        let other = FrameConfig { n_mels: 40, ..FrameConfig::default() };
        assert!(matches!(evaluate_fold(&ck, "s", &test, &other), Err(Error::Config(_))));
        assert!(matches!(evaluate_fold(&ck, "s", &[], &FrameConfig::default()), Err(Error::Config(_))));
    }

    #[test]
    fn two_class_hand_aggregation() {
        let a = ConfusionMatrix::from_rows(&[vec![2, 0], vec![0, 2]]).unwrap();
        let b = ConfusionMatrix::from_rows(&[vec![0, 2], vec![2, 0]]).unwrap();
        for mode in [AggregateMode::SumThenNormalize, AggregateMode::MeanOfNormalized] {
            let r = aggregate_matrices(&[&a, &b], mode).unwrap();
            assert_eq!(r.normalized, vec![vec![0.5, 0.5], vec![0.5, 0.5]]);
        }
        // Unequal fold sizes separate the modes.
        let c = ConfusionMatrix::from_rows(&[vec![3, 1], vec![0, 0]]).unwrap();
        let d = ConfusionMatrix::from_rows(&[vec![0, 1], vec![1, 1]]).unwrap();
        let sum = aggregate_matrices(&[&c, &d], AggregateMode::SumThenNormalize).unwrap();
        assert_eq!(sum.normalized, vec![vec![0.6, 0.4], vec![0.5, 0.5]]);
        let mean = aggregate_matrices(&[&c, &d], AggregateMode::MeanOfNormalized).unwrap();
        assert_eq!(mean.normalized, vec![vec![0.375, 0.625], vec![0.5, 0.5]]);
        assert_eq!(mean.zero_support, vec![false, false]);
    }

    #[test]
    fn single_fold_is_its_own_normalization() {
        let a = ConfusionMatrix::from_rows(&[vec![1, 3, 0], vec![0, 0, 0], vec![2, 2, 4]]).unwrap();
        let r = aggregate_matrices(&[&a], AggregateMode::SumThenNormalize).unwrap();
        assert_eq!(r.normalized, a.normalized().0);
        assert_eq!(r.zero_support, vec![false, true, false]);
        assert_eq!(r.normalized[1], vec![0.0; 3]);
        assert_eq!(r.fold_count, 1);
    }

    #[test]
    fn empty_reports_rejected() {
        assert!(matches!(aggregate(&[], AggregateMode::SumThenNormalize), Err(Error::EmptyReport)));
        let z = ConfusionMatrix::new(6);
        assert!(matches!(aggregate_matrices(&[&z], AggregateMode::MeanOfNormalized), Err(Error::EmptyReport)));
    }

    fn report_from_rates(rates: Vec<Vec<f64>>) -> AggregateReport {
        AggregateReport {
            mode: AggregateMode::SumThenNormalize,
            true_positive_rates: (0..6).map(|i| rates[i][i]).collect(),
            normalized: rates,
            zero_support: vec![false; 6],
            counts: ConfusionMatrix::emotions(),
            overall_accuracy: 0.0,
            fold_count: 1,
        }
    }

    #[test]
    fn per_emotion_percentages_and_reference_column() {
        let ident = (0..6).map(|i| (0..6).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
        assert!(per_emotion_report(&report_from_rates(ident)).iter().all(|r| r.true_positive_pct == Some(100.0)));
        let rows = per_emotion_report(&report_from_rates(vec![vec![1.0 / 6.0; 6]; 6]));
        assert!(rows.iter().all(|r| (r.true_positive_pct.unwrap() - 16.67).abs() < 0.005));
        assert_eq!(paper_reported(EmotionLabel::Anger, 2), Some(75.6));
        assert_eq!(paper_reported(EmotionLabel::Fear, 3), Some(6.89));
        assert_eq!(paper_reported(EmotionLabel::Fear, 4), None);
        let text = format_summary("Model 2", &report_from_rates(vec![vec![1.0 / 6.0; 6]; 6]));
        assert!(text.contains("16.67") && text.contains("Model 2 - 75.6") && text.contains("paper-reported"));
    }

    #[test]
    fn fold_csv_round_trip() {
        let mut rec = record(EmotionLabel::Fear, EmotionLabel::Happy);
        rec.probs = vec![0.1, 0.2, 0.3, 0.15, 0.05, 0.2];
        let f = FoldResult::from_records("1002", vec![rec, record(EmotionLabel::Sad, EmotionLabel::Sad)]);
        let mut buf = Vec::new();
        write_fold_csv(&f, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("path,true,pred,p_ANG,p_DIS,p_FEA,p_HAP,p_NEU,p_SAD\n"));
        assert_eq!(read_fold_csv("1002", buf.as_slice()).unwrap(), f);
    }

    #[test]
    fn aggregate_csv_layout() {
        let f = FoldResult::from_records("1", vec![record(EmotionLabel::Anger, EmotionLabel::Anger)]);
        let r = aggregate(&[f], AggregateMode::SumThenNormalize).unwrap();
        let mut buf = Vec::new();
        write_aggregate_csv(&r, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "true\\pred,ANG,DIS,FEA,HAP,NEU,SAD");
        assert_eq!(lines[1], "ANG,1,0,0,0,0,0");
        assert_eq!(lines.len(), 7);
    }

    fn arb_fold() -> impl Strategy<Value = ConfusionMatrix> {
        prop::collection::vec(prop::collection::vec(0u64..6, 6), 6).prop_map(|r| ConfusionMatrix::from_rows(&r).unwrap())
    }

    proptest! {
        #[test]
        fn sum_mode_is_order_invariant(mut folds in prop::collection::vec(arb_fold(), 1..6), seed in any::<u64>()) {
            prop_assume!(folds.iter().map(|f| f.total()).sum::<u64>() > 0);
            let refs: Vec<&ConfusionMatrix> = folds.iter().collect();
            let a = aggregate_matrices(&refs, AggregateMode::SumThenNormalize).unwrap();
            crate::numerics::SeededRng::new(seed).shuffle(&mut folds);
            let refs: Vec<&ConfusionMatrix> = folds.iter().collect();
            let b = aggregate_matrices(&refs, AggregateMode::SumThenNormalize).unwrap();
            prop_assert_eq!(a.normalized, b.normalized);
        }

        #[test]
        fn rows_sum_to_one_and_keep_argmax(folds in prop::collection::vec(arb_fold(), 1..6)) {
            prop_assume!(folds.iter().map(|f| f.total()).sum::<u64>() > 0);
            let refs: Vec<&ConfusionMatrix> = folds.iter().collect();
            for mode in [AggregateMode::SumThenNormalize, AggregateMode::MeanOfNormalized] {
                let r = aggregate_matrices(&refs, mode).unwrap();
                for (i, row) in r.normalized.iter().enumerate() {
                    let s: f64 = row.iter().sum();
                    if r.zero_support[i] { prop_assert_eq!(s, 0.0); } else { prop_assert!((s - 1.0).abs() < 1e-9); }
                }
                if mode == AggregateMode::SumThenNormalize {
                    for i in (0..6).filter(|&i| !r.zero_support[i]) {
                        let counts: Vec<f64> = r.counts.row(i).iter().map(|&c| c as f64).collect();
                        prop_assert_eq!(argmax(&counts), argmax(&r.normalized[i]));
                    }
                }
            }
        }

        #[test]
        fn totals_and_relabeling(pairs in prop::collection::vec((0usize..6, 0usize..6), 0..60), perm_seed in any::<u64>()) {
            let mut perm: Vec<usize> = (0..6).collect();
            crate::numerics::SeededRng::new(perm_seed).shuffle(&mut perm);
            let lab = |i: usize| EmotionLabel::from_index(i).unwrap();
            let f = FoldResult::from_records("s", pairs.iter().map(|&(t, p)| record(lab(t), lab(p))).collect());
            prop_assert_eq!(f.confusion.total() as usize, pairs.len());
            let g = FoldResult::from_records("s", pairs.iter().map(|&(t, p)| record(lab(perm[t]), lab(p))).collect());
            for t in 0..6 {
                prop_assert_eq!(f.confusion.row(t), g.confusion.row(perm[t]));
            }
        }
    }
}
