//! Whole-scene training with masked cross-entropy and Adam, accuracy metrics,
//! multi-seed aggregation and classification-map export.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use log::{debug, info};

use crate::autodiff::Graph;
use crate::data::{LabelMap, Part, SplitMask, SplitOverrides};
use crate::error::{Error, Result};
use crate::network::{argmax_classes, Model, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::ops::log_softmax_row;
use crate::tensor::NdArray;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub runs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_epochs: 500,
            patience: 50,
            seed: 0,
            runs: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be non-negative", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(Error::Config("Adam betas must lie in [0, 1) and eps must be positive".into()));
        }
        if self.runs == 0 {
            return Err(Error::Config("runs must be at least 1".into()));
        }
        Ok(())
    }
}

/// Adam with bias correction, using the gradients stored in `store`.
pub fn adam_step(store: &mut ParamStore, cfg: &TrainConfig) {
    store.step += 1;
    let t = store.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for p in store.iter_mut() {
        let g = p.grad.data();
        let m = p.m.data_mut();
        for (mi, &gi) in m.iter_mut().zip(g) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
        }
        let v = p.v.data_mut();
        for (vi, &gi) in v.iter_mut().zip(g) {
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
        }
        let (m, v) = (p.m.data(), p.v.data());
        for (i, w) in p.value.data_mut().iter_mut().enumerate() {
            *w -= cfg.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.eps);
        }
    }
}

/// Mean of `−log softmax(logits)[label − 1]` over the masked labeled pixels.
pub fn masked_cross_entropy(logits: &NdArray, labels: &LabelMap, mask: &[bool]) -> Result<f64> {
    logits.expect_rank(3, "logits")?;
    let k = logits.dim(0);
    let hw = logits.dim(1) * logits.dim(2);
    let mut total = 0.0;
    let mut n = 0usize;
    let mut row = vec![0.0; k];
    let mut out = vec![0.0; k];
    for (p, (&m, &l)) in mask.iter().zip(&labels.labels).enumerate() {
        if !m || l == 0 {
            continue;
        }
        for (j, r) in row.iter_mut().enumerate() {
            *r = logits.data()[j * hw + p];
        }
        log_softmax_row(&row, &mut out);
        total -= out[l as usize - 1];
        n += 1;
    }
    if n == 0 {
        return Err(Error::Runtime("cross-entropy over an empty mask".into()));
    }
    Ok(total / n as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    /// `confusion[truth][pred]`, zero-based classes.
    pub confusion: Vec<Vec<u64>>,
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
    /// Recall per class; `None` for classes absent from the mask.
    pub per_class: Vec<Option<f64>>,
}

impl Metrics {
    pub fn from_confusion(confusion: Vec<Vec<u64>>) -> Self {
        let k = confusion.len();
        let total: u64 = confusion.iter().flatten().sum();
        let diag: u64 = (0..k).map(|i| confusion[i][i]).sum();
        let n = total as f64;
        let oa = if total > 0 { diag as f64 / n } else { 0.0 };
        let per_class: Vec<Option<f64>> = confusion
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let s: u64 = row.iter().sum();
                (s > 0).then(|| row[i] as f64 / s as f64)
            })
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let aa = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
        // (n·Σdiag − Σ row·col) / (n² − Σ row·col) in exact integers, one rounding
        let marg: u128 = (0..k)
            .map(|i| {
                let row: u64 = confusion[i].iter().sum();
                let col: u64 = confusion.iter().map(|r| r[i]).sum();
                row as u128 * col as u128
            })
            .sum();
        let (t, d) = (total as u128, diag as u128);
        let denom = t * t - marg;
        let kappa = if denom == 0 {
            if total > 0 && diag == total { 1.0 } else { 0.0 }
        } else {
            (t as i128 * d as i128 - marg as i128) as f64 / denom as f64
        };
        Self { confusion, oa, aa, kappa, per_class }
    }
}

/// Expected agreement `Σ_k row_k · col_k / n²`.
pub fn chance_agreement(confusion: &[Vec<u64>]) -> f64 {
    let k = confusion.len();
    let total: u64 = confusion.iter().flatten().sum();
    if total == 0 {
        return 0.0;
    }
    let n = total as f64;
    (0..k)
        .map(|i| {
            let row: u64 = confusion[i].iter().sum();
            let col: u64 = confusion.iter().map(|r| r[i]).sum();
            row as f64 * col as f64
        })
        .sum::<f64>()
        / (n * n)
}

/// Metrics over masked labeled pixels; `pred` holds 1-based classes.
pub fn compute_metrics(pred: &[u16], labels: &LabelMap, mask: &[bool], num_classes: usize) -> Result<Metrics> {
    if pred.len() != labels.labels.len() || mask.len() != labels.labels.len() {
        return Err(Error::Dimension(format!(
            "prediction ({}), labels ({}) and mask ({}) disagree in size",
            pred.len(),
            labels.labels.len(),
            mask.len()
        )));
    }
    let mut confusion = vec![vec![0u64; num_classes]; num_classes];
    let mut any = false;
    for ((&p, &l), &m) in pred.iter().zip(&labels.labels).zip(mask) {
        if !m || l == 0 {
            continue;
        }
        let (t, q) = (l as usize - 1, p as usize);
        if t >= num_classes || q == 0 || q > num_classes {
            return Err(Error::Dimension(format!("label {l} or prediction {p} outside 1..={num_classes}")));
        }
        confusion[t][q - 1] += 1;
        any = true;
    }
    if !any {
        return Err(Error::Runtime("metrics over an empty mask".into()));
    }
    Ok(Metrics::from_confusion(confusion))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_oa: f64,
    pub val_aa: f64,
    pub val_kappa: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    /// Checkpoint bytes of the parameters that scored best on validation.
    pub best_checkpoint: Vec<u8>,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,train_loss,val_oa,val_aa,val_kappa\n");
    for r in history {
        let _ = writeln!(s, "{},{},{},{},{}", r.epoch, r.train_loss, r.val_oa, r.val_aa, r.val_kappa);
    }
    s
}

/// Train on the whole scene. Each epoch runs one forward pass, records the
/// training loss and validation metrics of the current parameters, then
/// takes one Adam step. On return the model holds the best-validation
/// parameters; ties in validation OA go to the lower training loss.
pub fn train(
    model: &mut Model,
    cube: &NdArray,
    labels: &LabelMap,
    split: &SplitMask,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let k = model.cfg.num_classes;
    if labels.num_classes() > k {
        return Err(Error::Config(format!("labels use {} classes, model has {k}", labels.num_classes())));
    }
    let targets = Arc::new(split.targets(labels, Part::Train));
    let has_val = split.count(Part::Val) > 0;
    let mut history = Vec::new();
    let mut best: Option<(f64, f64)> = None;
    let mut best_epoch = 0;
    let mut best_checkpoint = model.store.to_checkpoint_bytes();
    for epoch in 1..=cfg.max_epochs {
        let diverged = |e: Error| match e {
            Error::NonFinite { .. } => Error::Diverged { epoch, loss: f64::NAN },
            other => other,
        };
        let mut g = Graph::new();
        let logits = model.forward(&mut g, cube, None).map_err(diverged)?;
        let loss = g.masked_cross_entropy(logits, targets.clone()).map_err(diverged)?;
        let loss_value = g.value(loss).item();
        if !loss_value.is_finite() {
            return Err(Error::Diverged { epoch, loss: loss_value });
        }
        let pred = argmax_classes(g.value(logits));
        let val = if has_val {
            compute_metrics(&pred, labels, split.part(Part::Val), k)?
        } else {
            compute_metrics(&pred, labels, split.part(Part::Train), k)?
        };
        history.push(EpochRecord {
            epoch,
            train_loss: loss_value,
            val_oa: val.oa,
            val_aa: val.aa,
            val_kappa: val.kappa,
        });
        debug!("epoch {epoch}: loss {loss_value:.6} val OA {:.4}", val.oa);
        let improved = match best {
            None => true,
            Some((oa, l)) => val.oa > oa || (val.oa == oa && loss_value < l),
        };
        if improved {
            best = Some((val.oa, loss_value));
            best_epoch = epoch;
            best_checkpoint = model.store.to_checkpoint_bytes();
        } else if epoch - best_epoch >= cfg.patience {
            info!("early stop at epoch {epoch}, best epoch {best_epoch}");
            break;
        }
        let grads = g.backward(loss).map_err(diverged)?;
        model.store.zero_grads();
        grads.accumulate_into(&mut model.store);
        adam_step(&mut model.store, cfg);
        if let Some(p) = model.store.iter().find(|p| !p.value.all_finite()) {
            debug!("parameter {} left the finite range", p.name);
            return Err(Error::Diverged { epoch, loss: loss_value });
        }
    }
    let records = crate::params::parse_checkpoint(&best_checkpoint)?;
    model.store.load_values(records)?;
    Ok(TrainOutcome { history, best_epoch, best_checkpoint })
}

/// Where a run's split comes from.
#[derive(Debug, Clone)]
pub enum SplitSource {
    /// A fixed split shared by every run.
    Fixed(SplitMask),
    /// A fresh stratified split per run, seeded by the run seed.
    Stratified { train_n: usize, val_n: usize, overrides: SplitOverrides },
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub run: usize,
    pub seed: u64,
    pub test: Metrics,
    pub outcome: TrainOutcome,
    pub split: SplitMask,
    pub prediction: Vec<u16>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// Mean and sample standard deviation; a single value has zero spread.
pub fn mean_std(xs: &[f64]) -> MeanStd {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() < 2 { 0.0 } else { (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() };
    MeanStd { mean, std }
}

#[derive(Debug, Clone)]
pub struct RunTable {
    pub rows: Vec<(usize, u64, f64, f64, f64)>,
    pub oa: MeanStd,
    pub aa: MeanStd,
    pub kappa: MeanStd,
}

impl RunTable {
    pub fn from_runs(runs: &[RunResult]) -> Self {
        let rows: Vec<_> = runs.iter().map(|r| (r.run, r.seed, r.test.oa, r.test.aa, r.test.kappa)).collect();
        Self::from_rows(rows)
    }

    pub fn from_rows(rows: Vec<(usize, u64, f64, f64, f64)>) -> Self {
        let col = |f: fn(&(usize, u64, f64, f64, f64)) -> f64| mean_std(&rows.iter().map(f).collect::<Vec<_>>());
        Self { oa: col(|r| r.2), aa: col(|r| r.3), kappa: col(|r| r.4), rows }
    }

    /// `run,seed,oa,aa,kappa` rows, then `mean` and `std` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("run,seed,oa,aa,kappa\n");
        for (run, seed, oa, aa, kappa) in &self.rows {
            let _ = writeln!(s, "{run},{seed},{oa},{aa},{kappa}");
        }
        let _ = writeln!(s, "mean,,{},{},{}", self.oa.mean, self.aa.mean, self.kappa.mean);
        let _ = writeln!(s, "std,,{},{},{}", self.oa.std, self.aa.std, self.kappa.std);
        s
    }
}

/// Train `train_cfg.runs` models with seeds `seed..seed + runs` and evaluate
/// each on its test mask. `on_run` sees every finished run.
pub fn multi_run(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    cube: &NdArray,
    labels: &LabelMap,
    splits: &SplitSource,
    mut on_run: impl FnMut(&RunResult, &Model) -> Result<()>,
) -> Result<RunTable> {
    train_cfg.validate()?;
    let mut results = Vec::with_capacity(train_cfg.runs);
    for run in 0..train_cfg.runs {
        let seed = train_cfg.seed + run as u64;
        let split = match splits {
            SplitSource::Fixed(s) => s.clone(),
            SplitSource::Stratified { train_n, val_n, overrides } => {
                crate::data::stratified_split(labels, *train_n, *val_n, overrides, seed)?
            }
        };
        let mut model = Model::new(model_cfg.clone(), cube.dim(0), seed)?;
        let outcome = train(&mut model, cube, labels, &split, train_cfg)?;
        let prediction = model.predict(cube)?;
        let test = compute_metrics(&prediction, labels, split.part(Part::Test), model_cfg.num_classes)?;
        info!("run {run} (seed {seed}): OA {:.4} AA {:.4} kappa {:.4}", test.oa, test.aa, test.kappa);
        let result = RunResult { run, seed, test, outcome, split, prediction };
        on_run(&result, &model)?;
        results.push(result);
    }
    Ok(RunTable::from_runs(&results))
}

/// Entry 0 black, then evenly spaced hues.
pub fn default_palette(num_classes: usize) -> Vec<[u8; 3]> {
    let mut p = vec![[0, 0, 0]];
    for k in 0..num_classes {
        let h = k as f64 / num_classes.max(1) as f64 * 6.0;
        let x = 1.0 - ((h % 2.0) - 1.0).abs();
        let (r, g, b) = match h as u32 {
            0 => (1.0, x, 0.0),
            1 => (x, 1.0, 0.0),
            2 => (0.0, 1.0, x),
            3 => (0.0, x, 1.0),
            4 => (x, 0.0, 1.0),
            _ => (1.0, 0.0, x),
        };
        // keep class colours away from pure black
        let to = |c: f64| (55.0 + 200.0 * c).round() as u8;
        p.push([to(r), to(g), to(b)]);
    }
    p
}

/// Binary PPM of a class map; class 0 uses `palette[0]`.
pub fn export_map(pred: &[u16], height: usize, width: usize, palette: &[[u8; 3]]) -> Result<Vec<u8>> {
    if pred.len() != height * width {
        return Err(Error::Dimension(format!("map has {} pixels, expected {height}×{width}", pred.len())));
    }
    let max = pred.iter().copied().max().unwrap_or(0) as usize;
    if palette.len() <= max {
        return Err(Error::Config(format!("palette has {} entries, class {max} needs {}", palette.len(), max + 1)));
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    for &c in pred {
        out.extend_from_slice(&palette[c as usize]);
    }
    Ok(out)
}

pub fn write_map(path: impl AsRef<Path>, pred: &[u16], height: usize, width: usize, palette: &[[u8; 3]]) -> Result<()> {
    Ok(fs::write(path, export_map(pred, height, width, palette)?)?)
}

/// Parse a binary PPM and map each pixel back to its palette index.
pub fn read_map(bytes: &[u8], palette: &[[u8; 3]]) -> Result<(usize, usize, Vec<u16>)> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format { offset: pos as u64, msg: "truncated PPM header".into() });
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    let bad = |msg: &str| Error::Format { offset: 0, msg: msg.into() };
    if fields[0] != "P6" || fields[3] != "255" {
        return Err(bad("expected a P6 pixmap with maxval 255"));
    }
    let width: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let height: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    let body = bytes.get(pos..).unwrap_or_default();
    if body.len() != 3 * width * height {
        return Err(Error::Format {
            offset: pos as u64,
            msg: format!("expected {} pixel bytes, found {}", 3 * width * height, body.len()),
        });
    }
    let classes = body
        .chunks_exact(3)
        .enumerate()
        .map(|(i, px)| {
            palette
                .iter()
                .position(|c| c == px)
                .map(|c| c as u16)
                .ok_or_else(|| Error::Format { offset: (pos + 3 * i) as u64, msg: format!("colour {px:?} not in palette") })
        })
        .collect::<Result<_>>()?;
    Ok((height, width, classes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;

    #[test]
    fn uniform_logits_give_log_k() {
        let logits = NdArray::zeros(&[4, 2, 2]);
        let labels = LabelMap::new(2, 2, vec![1, 2, 3, 0]).unwrap();
        let loss = masked_cross_entropy(&logits, &labels, &[true; 4]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-15);
        assert!(masked_cross_entropy(&logits, &labels, &[false, false, false, true]).is_err());
    }

    #[test]
    fn margin_drives_loss_to_zero() {
        let labels = LabelMap::new(1, 1, vec![2]).unwrap();
        let mut last = f64::INFINITY;
        for m in [1.0, 5.0, 20.0, 40.0] {
            let logits = NdArray::new(&[3, 1, 1], vec![0.0, m, 0.0]).unwrap();
            let l = masked_cross_entropy(&logits, &labels, &[true]).unwrap();
            assert!(l < last);
            last = l;
        }
        assert!(last < 1e-15);
    }

    #[test]
    fn hand_confusion() {
        let m = Metrics::from_confusion(vec![vec![40, 10], vec![20, 30]]);
        assert_eq!((m.oa, m.aa, m.kappa), (0.7, 0.7, 0.4));
        assert_eq!(chance_agreement(&m.confusion), 0.5);
    }

    #[test]
    fn constant_prediction_has_zero_kappa() {
        let m = Metrics::from_confusion(vec![vec![50, 0], vec![50, 0]]);
        assert_eq!(m.kappa, 0.0);
        assert_eq!(m.oa, 0.5);
    }

    #[test]
    fn aa_skips_absent_classes() {
        let labels = LabelMap::new(1, 3, vec![1, 1, 3]).unwrap();
        let m = compute_metrics(&[1, 2, 3], &labels, &[true; 3], 3).unwrap();
        assert_eq!(m.per_class, vec![Some(0.5), None, Some(1.0)]);
        assert_eq!(m.aa, 0.75);
    }

    fn one_param(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("x", NdArray::full(&[1], v)).unwrap();
        s
    }

    #[test]
    fn adam_zero_grad_and_first_step() {
        let cfg = TrainConfig { lr: 0.01, ..Default::default() };
        let mut s = one_param(1.5);
        adam_step(&mut s, &cfg);
        assert_eq!(s.iter().next().unwrap().value.item(), 1.5);
        let mut s = one_param(1.5);
        s.iter_mut().next().unwrap().grad = NdArray::full(&[1], -3.0);
        adam_step(&mut s, &cfg);
        // m̂ = g, v̂ = g², so the step is lr·|g|/(|g| + eps)
        let want = 1.5 + 0.01 * 3.0 / (3.0 + 1e-8);
        assert!((s.iter().next().unwrap().value.item() - want).abs() < 1e-15);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let cfg = TrainConfig { lr: 0.05, ..Default::default() };
        let mut s = one_param(3.0);
        for _ in 0..2000 {
            let x = s.iter().next().unwrap().value.item();
            s.iter_mut().next().unwrap().grad = NdArray::full(&[1], 2.0 * x);
            adam_step(&mut s, &cfg);
        }
        assert!(s.iter().next().unwrap().value.item().abs() < 1e-3);
    }

    #[test]
    fn mean_std_edge_cases() {
        assert_eq!(mean_std(&[0.8]).std, 0.0);
        assert_eq!(mean_std(&[0.5, 0.5, 0.5]).std, 0.0);
        let m = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m.mean, 2.5);
        assert!((m.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn ppm_roundtrip_and_errors() {
        let pal = default_palette(3);
        let pred = vec![0, 1, 2, 3, 3, 0];
        let bytes = export_map(&pred, 2, 3, &pal).unwrap();
        assert_eq!(&bytes[bytes.len() - 18..bytes.len() - 15], &[0, 0, 0]);
        assert_eq!(read_map(&bytes, &pal).unwrap(), (2, 3, pred));
        let one = export_map(&[1], 1, 1, &pal).unwrap();
        assert_eq!(&one[one.len() - 3..], &pal[1]);
        assert!(export_map(&[4], 1, 1, &pal).is_err());
    }

    #[test]
    fn palette_colours_are_distinct() {
        let p = default_palette(16);
        for i in 0..p.len() {
            for j in i + 1..p.len() {
                assert_ne!(p[i], p[j]);
            }
        }
    }
}
