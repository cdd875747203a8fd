use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::bank::{boundary_mask, select_embeddings, InstanceBank, SlotLayout};
use crate::discrimination::instance_predict;
use crate::error::{Error, Result};
use crate::numerics::{argmax, DenseGrid, LabelMap, Rng};
use crate::regen::regenerate;
use crate::synthdata::{Benchmark, LabeledImage};

use super::augment::AugmentationPair;
use super::config::{BankInit, GateOn, RunConfig};
use super::losses::{gate_mask, instance_loss_grad, overall_loss, source_loss_grad, target_loss_grad};
use super::model::{backward, Forward, Grads, PixelModel};

/// Named sub-streams of the run seed.
pub mod streams {
    pub const MODEL: u64 = 1;
    pub const SOURCE: u64 = 2;
    pub const TARGET: u64 = 3;
    pub const AUGMENT: u64 = 4;
    pub const BANK_INIT: u64 = 5;
    pub const BANK_UPDATE: u64 = 6;
}

/// Cycles through `0..n` in a fresh shuffled order every epoch.
#[derive(Debug, Clone)]
pub struct DataSampler {
    order: Vec<usize>,
    pos: usize,
    rng: Rng,
}

impl DataSampler {
    pub fn new(n: usize, rng: Rng) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
            rng,
        }
    }

    pub fn next_index(&mut self) -> Result<usize> {
        if self.order.is_empty() {
            return Err(Error::Invalid("cannot sample from an empty split".into()));
        }
        if self.pos == self.order.len() {
            self.rng.shuffle(&mut self.order);
            self.pos = 0;
        }
        self.pos += 1;
        Ok(self.order[self.pos - 1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub src: f64,
    pub tgt: f64,
    pub ins: f64,
}

/// Target-side inputs of one step: the strong view and the (fixed) pseudo-labels.
pub struct TargetBatch<'a> {
    pub strong: &'a DenseGrid,
    pub z_hat: &'a DenseGrid,
    pub gate: &'a [bool],
    pub q_hat: Option<&'a DenseGrid>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub src: f64,
    pub tgt: f64,
    /// Absent when the instance branch is off.
    pub ins: Option<f64>,
    pub overall: f64,
}

fn scale_grid(g: &mut DenseGrid, s: f64) {
    if s != 1.0 {
        g.data_mut().iter_mut().for_each(|x| *x *= s);
    }
}

/// Losses and parameter gradients of `weights.src * L_src + weights.tgt *
/// L_tgt + weights.ins * L_ins`. `source_raw` is the featurized source
/// image. The instance branch is skipped entirely when `weights.ins == 0`
/// or no instance targets are given. Returns the source forward pass for
/// bank updates.
#[allow(clippy::too_many_arguments)]
pub fn step_gradients(
    model: &PixelModel,
    source_raw: &DenseGrid,
    source_labels: &LabelMap,
    target: &TargetBatch<'_>,
    bank: Option<&InstanceBank>,
    tp: f64,
    soft_target: bool,
    weights: LossWeights,
) -> Result<(StepLosses, Grads, Forward)> {
    if !target.strong.same_extent(target.z_hat) {
        return Err(Error::Shape("weak and strong views are not pixel-aligned".into()));
    }
    let mut grads = Grads::zeros(model);

    let (sf, snorms) = model.head(source_raw);
    let (l_src, mut d_src) = source_loss_grad(&sf.probs, source_labels)?;
    scale_grid(&mut d_src, weights.src);
    backward(model, &sf, source_raw, &snorms, &d_src, None, &mut grads)?;

    let (tf, tcache) = model.forward_cached(target.strong);
    let (l_tgt, mut d_tgt) = target_loss_grad(&tf.probs, target.z_hat, target.gate, soft_target)?;
    scale_grid(&mut d_tgt, weights.tgt);
    let mut l_ins = None;
    let mut de = None;
    if let (Some(bank), Some(q_hat)) = (bank, target.q_hat) {
        if weights.ins != 0.0 {
            let (l, _, mut g) = instance_loss_grad(&tf.features, bank, tp, q_hat)?;
            scale_grid(&mut g, weights.ins);
            l_ins = Some(l);
            de = Some(g);
        }
    }
    backward(model, &tf, &tcache.raw, &tcache.norms, &d_tgt, de.as_ref(), &mut grads)?;

    let overall = overall_loss(l_src, l_tgt, l_ins.unwrap_or(0.0), weights.ins);
    Ok((
        StepLosses {
            src: l_src,
            tgt: l_tgt,
            ins: l_ins,
            overall,
        },
        grads,
        sf,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// `C × C`, truth rows, prediction columns.
    pub confusion: Vec<u64>,
    /// `None` for classes absent from both truth and prediction.
    pub iou: Vec<Option<f64>>,
    /// Mean over the present classes; NaN when none are.
    pub miou: f64,
}

pub fn iou_from_confusion(confusion: &[u64], classes: usize) -> Evaluation {
    let mut iou = vec![None; classes];
    for c in 0..classes {
        let tp = confusion[c * classes + c];
        let truth: u64 = confusion[c * classes..(c + 1) * classes].iter().sum();
        let pred: u64 = (0..classes).map(|r| confusion[r * classes + c]).sum();
        let union = truth + pred - tp;
        if union > 0 {
            iou[c] = Some(tp as f64 / union as f64);
        }
    }
    let present: Vec<f64> = iou.iter().flatten().copied().collect();
    let miou = if present.is_empty() {
        f64::NAN
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    Evaluation {
        confusion: confusion.to_vec(),
        iou,
        miou,
    }
}

pub fn confusion_of(pred: &LabelMap, truth: &LabelMap, classes: usize, confusion: &mut [u64]) {
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        confusion[t as usize * classes + p as usize] += 1;
    }
}

pub fn predict_labels(model: &PixelModel, image: &DenseGrid) -> LabelMap {
    let f = model.forward(image);
    let labels = f.probs.pixels().map(|p| argmax(p) as u8).collect();
    LabelMap::from_vec(image.height(), image.width(), labels).expect("extent matches")
}

/// Dataset-level IoU of the model's argmax predictions.
pub fn evaluate_miou(model: &PixelModel, set: &[LabeledImage]) -> Evaluation {
    let c = model.classes;
    let mut confusion = vec![0u64; c * c];
    for img in set {
        confusion_of(&predict_labels(model, &img.image), &img.labels, c, &mut confusion);
    }
    iou_from_confusion(&confusion, c)
}

/// [`evaluate_miou`] over images featurized in advance.
fn evaluate_featurized(model: &PixelModel, raws: &[DenseGrid], set: &[LabeledImage]) -> Evaluation {
    let c = model.classes;
    let mut confusion = vec![0u64; c * c];
    for (raw, img) in raws.iter().zip(set) {
        let (f, _) = model.head(raw);
        let labels = f.probs.pixels().map(|p| argmax(p) as u8).collect();
        let pred = LabelMap::from_vec(raw.height(), raw.width(), labels).expect("extent matches");
        confusion_of(&pred, &img.labels, c, &mut confusion);
    }
    iou_from_confusion(&confusion, c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iter: usize,
    /// Means over the iterations since the previous row.
    pub l_src: Option<f64>,
    pub l_tgt: Option<f64>,
    pub l_ins: Option<f64>,
    pub l_overall: Option<f64>,
    pub miou_target: f64,
    pub iou: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub classes: usize,
    pub rows: Vec<MetricsRow>,
}

fn cell(v: Option<f64>) -> String {
    match v {
        Some(x) if x.is_finite() => format!("{x}"),
        _ => String::new(),
    }
}

impl Metrics {
    pub fn header(classes: usize) -> String {
        let mut h = String::from("iter,L_src,L_tgt,L_ins,L_overall,miou_target");
        for c in 0..classes {
            write!(h, ",iou_class_{c}").unwrap();
        }
        h
    }

    pub fn to_csv(&self) -> String {
        let mut out = Self::header(self.classes);
        out.push('\n');
        for r in &self.rows {
            write!(
                out,
                "{},{},{},{},{},{}",
                r.iter,
                cell(r.l_src),
                cell(r.l_tgt),
                cell(r.l_ins),
                cell(r.l_overall),
                cell(Some(r.miou_target))
            )
            .unwrap();
            for v in &r.iou {
                write!(out, ",{}", cell(*v)).unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn final_miou(&self) -> Option<f64> {
        self.rows.last().map(|r| r.miou_target)
    }
}

#[derive(Debug, Default, Clone)]
struct LossWindow {
    n: usize,
    src: f64,
    tgt: f64,
    ins: f64,
    ins_n: usize,
    overall: f64,
}

impl LossWindow {
    fn add(&mut self, l: &StepLosses) {
        self.n += 1;
        self.src += l.src;
        self.tgt += l.tgt;
        self.overall += l.overall;
        if let Some(i) = l.ins {
            self.ins += i;
            self.ins_n += 1;
        }
    }

    fn take(&mut self) -> [Option<f64>; 4] {
        let mean = |s: f64, n: usize| (n > 0).then(|| s / n as f64);
        let out = [
            mean(self.src, self.n),
            mean(self.tgt, self.n),
            mean(self.ins, self.ins_n),
            mean(self.overall, self.n),
        ];
        *self = Self::default();
        out
    }
}

/// Bank for a run: layout from the sampling strategy and the source class
/// frequencies, rows per `cfg.bank_init`.
pub fn build_bank(cfg: &RunConfig, model: &PixelModel, data: &Benchmark, rng: &mut Rng) -> Result<InstanceBank> {
    let classes = cfg.classes();
    let freqs = data.source_class_frequencies();
    let layout = SlotLayout::for_sampling(cfg.policy.sampling, cfg.bank_size, classes, Some(&freqs))?;
    let dim = model.embed_dim;
    match cfg.bank_init {
        BankInit::Random => InstanceBank::with_layout(layout, dim, rng, None),
        BankInit::Source => {
            let mut pool: Vec<(Vec<f64>, u8)> = Vec::new();
            let mut have = vec![0usize; classes];
            for img in data.source.iter().take(64) {
                if (0..classes).all(|c| have[c] >= layout.count(c)) {
                    break;
                }
                let f = model.forward(&img.image);
                let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
                for (p, &l) in img.labels.data().iter().enumerate() {
                    by_class[l as usize].push(p);
                }
                for c in 0..classes {
                    // a couple of pixels per image keeps the pool diverse
                    for _ in 0..2 {
                        if have[c] >= layout.count(c) || by_class[c].is_empty() {
                            break;
                        }
                        let p = by_class[c][rng.below(by_class[c].len())];
                        pool.push((f.features.at(p).to_vec(), c as u8));
                        have[c] += 1;
                    }
                }
            }
            InstanceBank::with_layout(layout, dim, rng, Some(&pool))
        }
    }
}

pub struct Trainer<'a> {
    cfg: RunConfig,
    data: &'a Benchmark,
    pub model: PixelModel,
    pub bank: Option<InstanceBank>,
    source_sampler: DataSampler,
    target_sampler: DataSampler,
    augment_rng: Rng,
    bank_rng: Rng,
    // the featurizer is frozen, so raw features of dataset images never change
    source_raw: Vec<DenseGrid>,
    target_raw: Vec<DenseGrid>,
    iter: usize,
    window: LossWindow,
    metrics: Metrics,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: PixelModel,
    pub bank: Option<InstanceBank>,
    pub metrics: Metrics,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &RunConfig, data: &'a Benchmark) -> Result<Self> {
        cfg.validate()?;
        if data.class_count() != cfg.classes() {
            return Err(Error::Invalid(format!(
                "dataset has {} classes, config {}",
                data.class_count(),
                cfg.classes()
            )));
        }
        let root = Rng::new(cfg.seed);
        let model = PixelModel::new(&cfg.model, cfg.classes(), &mut root.derive(streams::MODEL));
        let bank = if cfg.uses_bank() {
            Some(build_bank(cfg, &model, data, &mut root.derive(streams::BANK_INIT))?)
        } else {
            None
        };
        let source_raw: Vec<DenseGrid> = data.source.iter().map(|i| model.featurize(&i.image)).collect();
        let target_raw: Vec<DenseGrid> = data.target.iter().map(|i| model.featurize(&i.image)).collect();
        let eval = evaluate_featurized(&model, &target_raw, &data.target);
        let metrics = Metrics {
            classes: cfg.classes(),
            rows: vec![MetricsRow {
                iter: 0,
                l_src: None,
                l_tgt: None,
                l_ins: None,
                l_overall: None,
                miou_target: eval.miou,
                iou: eval.iou,
            }],
        };
        Ok(Self {
            cfg: cfg.clone(),
            data,
            model,
            bank,
            source_sampler: DataSampler::new(data.source.len(), root.derive(streams::SOURCE)),
            target_sampler: DataSampler::new(data.target.len(), root.derive(streams::TARGET)),
            augment_rng: root.derive(streams::AUGMENT),
            bank_rng: root.derive(streams::BANK_UPDATE),
            source_raw,
            target_raw,
            iter: 0,
            window: LossWindow::default(),
            metrics,
        })
    }

    pub fn iteration(&self) -> usize {
        self.iter
    }

    pub fn metrics(&self) -> &Metrics {
        &self.metrics
    }

    pub fn step(&mut self) -> Result<StepLosses> {
        let cfg = &self.cfg;
        let s_idx = self.source_sampler.next_index()?;
        let source = &self.data.source[s_idx];
        let target = &self.data.target[self.target_sampler.next_index()?];
        let pair = AugmentationPair::sample(&cfg.augment, &mut self.augment_rng);
        let (weak, strong) = pair.apply(&target.image);

        let wf = self.model.forward(&weak);
        let (z_hat, q_hat) = match &self.bank {
            Some(bank) => {
                let q_alpha = instance_predict(&wf.features, bank, cfg.tp)?.grid;
                if cfg.regen {
                    let r = regenerate(&wf.probs, &q_alpha, bank.labels(), &cfg.strategy)?;
                    (r.z_hat, Some(r.q_hat))
                } else {
                    (wf.probs.clone(), Some(q_alpha))
                }
            }
            None => (wf.probs.clone(), None),
        };
        let gate = gate_mask(
            match cfg.gate_on {
                GateOn::Regenerated => &z_hat,
                GateOn::Original => &wf.probs,
            },
            cfg.tau,
        );
        let batch = TargetBatch {
            strong: &strong,
            z_hat: &z_hat,
            gate: &gate,
            q_hat: q_hat.as_ref(),
        };
        let weights = LossWeights {
            src: 1.0,
            tgt: 1.0,
            ins: cfg.lambda_ins,
        };
        let (losses, grads, source_fwd) = step_gradients(
            &self.model,
            &self.source_raw[s_idx],
            &source.labels,
            &batch,
            self.bank.as_ref(),
            cfg.tp,
            cfg.soft_target,
            weights,
        )?;
        self.model.sgd_step(&grads, cfg.learning_rate);
        self.iter += 1;

        if let Some(bank) = &mut self.bank {
            if self.iter % cfg.policy.interval == 0 {
                let mask = boundary_mask(&source.labels, cfg.sigma);
                let selected = select_embeddings(
                    &source_fwd.features,
                    &source.labels,
                    &mask,
                    &mut self.bank_rng,
                    &cfg.policy,
                )?;
                bank.ema_update(&selected, &cfg.policy)?;
            }
        }

        self.window.add(&losses);
        if self.iter % cfg.eval_interval == 0 || self.iter == cfg.iterations {
            self.record();
        }
        Ok(losses)
    }

    fn record(&mut self) {
        let eval = evaluate_featurized(&self.model, &self.target_raw, &self.data.target);
        let [l_src, l_tgt, l_ins, l_overall] = self.window.take();
        self.metrics.rows.push(MetricsRow {
            iter: self.iter,
            l_src,
            l_tgt,
            l_ins,
            l_overall,
            miou_target: eval.miou,
            iou: eval.iou,
        });
    }

    pub fn run(mut self) -> Result<TrainOutcome> {
        while self.iter < self.cfg.iterations {
            self.step()?;
        }
        Ok(TrainOutcome {
            model: self.model,
            bank: self.bank,
            metrics: self.metrics,
        })
    }
}

pub fn train(cfg: &RunConfig, data: &Benchmark) -> Result<TrainOutcome> {
    Trainer::new(cfg, data)?.run()
}
