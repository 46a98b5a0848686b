//! The staged training schedule, evaluation, and checkpointing.

pub mod checkpoint;
pub mod plan;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use plan::{phase_seed, PhaseKind, PhasePlan, TrainPlan};

use crate::autograd::{Graph, Mode, NodeId, ParamGroup, ParamStore};
use crate::data::VideoClip;
use crate::error::{Error, Result};
use crate::metrics::{ConfusionMatrix, EvalReport};
use crate::model::fusion::classifier;
use crate::model::pathways::FrameFeatureExtractor;
use crate::model::{stack, Forward, FusionConfig, FusionFeeds, FuthNet, Head, Linear, ModelConfig, Modules, ParamBuilder};
use crate::optim::{Sgd, SgdConfig};
use crate::tensor::Tensor;

/// Clips per forward pass when only inference is needed.
const EVAL_CHUNK: usize = 16;

/// The rng for one epoch of one phase: the phase seed picks the key, the
/// epoch picks the stream.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub phase: PhaseKind,
    pub epoch: usize,
    /// Mean training loss over the epoch's samples.
    pub loss: f64,
    pub accuracy: f64,
}

pub const LOG_HEADER: &str = "phase,epoch,loss,accuracy";

pub fn log_to_text(records: &[EpochRecord]) -> String {
    let mut out = format!("{LOG_HEADER}\n");
    for r in records {
        out.push_str(&format!("{},{},{},{}\n", r.phase, r.epoch, r.loss, r.accuracy));
    }
    out
}

pub fn parse_log(text: &str) -> Result<Vec<EpochRecord>> {
    let bad = |no: usize| Error::input(format!("loss log line {}: expected phase,epoch,loss,accuracy", no + 1));
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && l.trim() != LOG_HEADER)
        .map(|(no, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(bad(no));
            }
            Ok(EpochRecord {
                phase: f[0].parse()?,
                epoch: f[1].parse().map_err(|_| bad(no))?,
                loss: f[2].parse().map_err(|_| bad(no))?,
                accuracy: f[3].parse().map_err(|_| bad(no))?,
            })
        })
        .collect()
}

/// Pathway outputs of every clip, computed once with frozen pathways.
pub struct FeatureCache {
    pub g: Vec<Tensor>,
    pub l: Vec<Tensor>,
    pub volume: Vec<Tensor>,
    pub maps: Vec<Tensor>,
}

impl FeatureCache {
    fn feeds(&self, fw: &mut Forward, idx: &[usize]) -> Result<FusionFeeds> {
        let pick = |v: &[Tensor]| stack(&idx.iter().map(|&i| &v[i]).collect::<Vec<_>>());
        let g = fw.graph.input(pick(&self.g)?)?;
        let l = fw.graph.input(pick(&self.l)?)?;
        let (volume, maps) = if self.volume.is_empty() {
            (None, None)
        } else {
            (Some(fw.graph.input(pick(&self.volume)?)?), Some(fw.graph.input(pick(&self.maps)?)?))
        };
        Ok(FusionFeeds { g, l, volume, maps })
    }
}

fn split_batch(t: &Tensor, out: &mut Vec<Tensor>) {
    for i in 0..t.shape()[0] {
        out.push(t.index_leading(i));
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Number of rows of `probs` whose argmax equals the label.
fn count_correct(probs: &Tensor, labels: &[usize]) -> usize {
    let k = probs.shape()[1];
    labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| argmax(&probs.data()[i * k..(i + 1) * k]) == y)
        .count()
}

/// Rearranges every clip into the network layout once.
pub fn network_inputs(model: &FuthNet, clips: &[VideoClip]) -> Result<Vec<Tensor>> {
    clips.iter().map(|c| model.clip_input(c)).collect()
}

/// Eval-mode pathway outputs for every input; the feature maps are kept
/// only when the fusion method reads them.
pub fn compute_features(model: &mut FuthNet, inputs: &[Tensor]) -> Result<FeatureCache> {
    let with_maps = model.config.fusion.method.uses_maps();
    let mut cache = FeatureCache {
        g: Vec::new(),
        l: Vec::new(),
        volume: Vec::new(),
        maps: Vec::new(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let FuthNet { store, net, .. } = model;
    for chunk in inputs.chunks(EVAL_CHUNK) {
        let mut graph = Graph::new();
        let mut fw = Forward {
            graph: &mut graph,
            store,
            mode: Mode::Eval,
            rng: &mut rng,
        };
        let x = fw.graph.input(stack(&chunk.iter().collect::<Vec<_>>())?)?;
        let f = net.features(&mut fw, x)?;
        split_batch(graph.value(f.g), &mut cache.g);
        split_batch(graph.value(f.l), &mut cache.l);
        if with_maps {
            split_batch(graph.value(f.volume), &mut cache.volume);
            split_batch(graph.value(f.maps), &mut cache.maps);
        }
    }
    Ok(cache)
}

fn report(predicted: &[usize], labels: &[usize], class_names: &[String], classes: usize) -> Result<EvalReport> {
    let mut cm = ConfusionMatrix::from_predictions(classes, labels, predicted)?;
    if class_names.len() == classes {
        cm.set_names(class_names.to_vec())?;
    }
    EvalReport::from_confusion(&cm)
}

/// Eval-mode predictions of one head.
pub fn predict(model: &mut FuthNet, inputs: &[Tensor], head: Head) -> Result<Vec<usize>> {
    if inputs.is_empty() {
        return Err(Error::input("nothing to evaluate: the clip list is empty"));
    }
    if head == Head::Fusion {
        let cache = compute_features(model, inputs)?;
        return predict_cached(model, &cache);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let FuthNet { store, net, .. } = model;
    let mut predicted = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(EVAL_CHUNK) {
        let mut graph = Graph::new();
        let mut fw = Forward {
            graph: &mut graph,
            store,
            mode: Mode::Eval,
            rng: &mut rng,
        };
        let x = fw.graph.input(stack(&chunk.iter().collect::<Vec<_>>())?)?;
        let logits = net.logits(&mut fw, x, head)?;
        push_predictions(graph.value(logits), &mut predicted);
    }
    Ok(predicted)
}

fn push_predictions(logits: &Tensor, out: &mut Vec<usize>) {
    let k = logits.shape()[1];
    out.extend(logits.data().chunks(k).map(argmax));
}

fn predict_cached(model: &mut FuthNet, cache: &FeatureCache) -> Result<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let FuthNet { store, net, .. } = model;
    let idx: Vec<usize> = (0..cache.g.len()).collect();
    let mut predicted = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(EVAL_CHUNK) {
        let mut graph = Graph::new();
        let mut fw = Forward {
            graph: &mut graph,
            store,
            mode: Mode::Eval,
            rng: &mut rng,
        };
        let feeds = cache.feeds(&mut fw, chunk)?;
        let logits = net.fused_logits(&mut fw, feeds)?;
        push_predictions(graph.value(logits), &mut predicted);
    }
    Ok(predicted)
}

/// Confusion-matrix metrics of one head on a labelled clip set.
pub fn evaluate(model: &mut FuthNet, clips: &[VideoClip], head: Head, class_names: &[String]) -> Result<EvalReport> {
    let inputs = network_inputs(model, clips)?;
    let labels: Vec<usize> = clips.iter().map(|c| c.label).collect();
    let predicted = predict(model, &inputs, head)?;
    report(&predicted, &labels, class_names, model.config.classes)
}

/// Re-draws a single-feature classifier (over `g` or over `l`) from `seed`.
pub fn fresh_head(model: &mut FuthNet, head: Head, seed: u64) -> Result<Linear> {
    let linear = match head {
        Head::Holistic => model.net.holistic_head.clone(),
        Head::Relation => model.net.relation_head.clone(),
        Head::Fusion => model.net.fusion_head.clone(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = model.store.value(linear.weight).shape().to_vec();
    let precision = model.config.precision;
    model
        .store
        .set_value(linear.weight, Tensor::randn(&shape, 0.01, &mut rng).to_precision(precision))?;
    model.store.set_value(linear.bias, Tensor::zeros(&[shape[0]]))?;
    Ok(linear)
}

/// Fresh classifier over `g` alone.
pub fn holistic_only_head(model: &mut FuthNet, seed: u64) -> Result<Linear> {
    fresh_head(model, Head::Holistic, seed)
}

/// Fresh classifier over `l` alone.
pub fn relation_only_head(model: &mut FuthNet, seed: u64) -> Result<Linear> {
    fresh_head(model, Head::Relation, seed)
}

/// Progress through a plan.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunState {
    pub phase_index: usize,
    pub epochs_done: usize,
    /// Optimizer velocity when stopped inside a phase.
    pub velocity: Option<Vec<Tensor>>,
    pub log: Vec<EpochRecord>,
    pub reports: Vec<(PhaseKind, EvalReport)>,
}

impl RunState {
    pub fn finished(&self, plan: &TrainPlan) -> bool {
        self.phase_index >= plan.phases.len()
    }

    fn cursor_text(&self) -> String {
        format!("phase_index={}\nepochs_done={}\n", self.phase_index, self.epochs_done)
    }
}

/// A model being trained under a plan.
pub struct Session {
    pub model: FuthNet,
    pub plan: TrainPlan,
    pub state: RunState,
    pub class_names: Vec<String>,
}

/// Callback after every epoch and after every phase evaluation.
pub type Hook<'a> = dyn FnMut(&mut Session) -> Result<()> + 'a;

impl Session {
    pub fn new(model: FuthNet, plan: TrainPlan, class_names: Vec<String>) -> Result<Self> {
        plan.validate()?;
        Ok(Session {
            model,
            plan,
            state: RunState::default(),
            class_names,
        })
    }

    /// Runs the remaining phases, evaluating on `test` after each one.
    pub fn run(&mut self, train: &[VideoClip], test: &[VideoClip], hook: &mut Hook) -> Result<()> {
        if train.is_empty() {
            return Err(Error::input("the training set is empty"));
        }
        if test.is_empty() {
            return Err(Error::input("the test set is empty"));
        }
        let train_inputs = network_inputs(&self.model, train)?;
        let test_inputs = network_inputs(&self.model, test)?;
        let train_labels: Vec<usize> = train.iter().map(|c| c.label).collect();
        let test_labels: Vec<usize> = test.iter().map(|c| c.label).collect();
        if let Some(&bad) = train_labels.iter().chain(&test_labels).find(|&&y| y >= self.model.config.classes) {
            return Err(Error::input(format!(
                "label {bad} out of range for {} classes",
                self.model.config.classes
            )));
        }
        while !self.state.finished(&self.plan) {
            let phase = self.plan.phases[self.state.phase_index].clone();
            self.run_phase(&phase, &train_inputs, &train_labels, hook)?;
            let predicted = if phase.kind == PhaseKind::Fusion {
                let cache = compute_features(&mut self.model, &test_inputs)?;
                predict_cached(&mut self.model, &cache)?
            } else {
                predict(&mut self.model, &test_inputs, phase.kind.head())?
            };
            let r = report(&predicted, &test_labels, &self.class_names, self.model.config.classes)?;
            self.state.reports.push((phase.kind, r));
            self.state.phase_index += 1;
            self.state.epochs_done = 0;
            self.state.velocity = None;
            hook(self)?;
        }
        Ok(())
    }

    /// Trains one phase from the current cursor to its last epoch.
    pub fn run_phase(&mut self, phase: &PhasePlan, inputs: &[Tensor], labels: &[usize], hook: &mut Hook) -> Result<()> {
        if phase.trainable.is_empty() {
            return Err(Error::config(format!("phase {}: no trainable parameter groups", phase.kind)));
        }
        self.model.store.set_trainable(&phase.trainable);
        if self.model.store.trainable_count() == 0 {
            return Err(Error::config(format!("phase {}: the trainable set is empty", phase.kind)));
        }
        let mut sgd = Sgd::new(SgdConfig::new(phase.lr, phase.momentum, phase.weight_decay), &self.model.store)?;
        if self.state.epochs_done > 0 {
            let v = self
                .state
                .velocity
                .take()
                .ok_or_else(|| Error::State("resuming inside a phase needs the optimizer velocity".into()))?;
            sgd.set_velocity(v)?;
        }
        let cache = if phase.kind == PhaseKind::Fusion && self.state.epochs_done < phase.epochs {
            Some(compute_features(&mut self.model, inputs)?)
        } else {
            None
        };
        while self.state.epochs_done < phase.epochs {
            let epoch = self.state.epochs_done;
            let mut rng = epoch_rng(phase.seed, epoch);
            let mut order: Vec<usize> = (0..inputs.len()).collect();
            order.shuffle(&mut rng);
            let mut loss_sum = 0.0;
            let mut correct = 0;
            for idx in batches(&order, phase.batch_size) {
                let batch_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
                let (loss, hits) = train_step(&mut self.model, &mut sgd, &mut rng, &batch_labels, |net, fw| match &cache {
                    Some(c) => {
                        let feeds = c.feeds(fw, idx)?;
                        net.fused_logits(fw, feeds)
                    }
                    None => {
                        let x = fw.graph.input(stack(&idx.iter().map(|&i| &inputs[i]).collect::<Vec<_>>())?)?;
                        net.logits(fw, x, phase.kind.head())
                    }
                })?;
                loss_sum += loss * idx.len() as f64;
                correct += hits;
            }
            self.state.log.push(EpochRecord {
                phase: phase.kind,
                epoch,
                loss: loss_sum / inputs.len() as f64,
                accuracy: correct as f64 / inputs.len() as f64,
            });
            self.state.epochs_done += 1;
            self.state.velocity = Some(sgd.velocity().to_vec());
            hook(self)?;
        }
        self.model.store.set_trainable(&[]);
        Ok(())
    }

    /// Everything needed to continue this run later.
    pub fn checkpoint(&mut self) -> Checkpoint {
        let mut texts = vec![
            ("cursor".to_string(), self.state.cursor_text()),
            ("log".to_string(), log_to_text(&self.state.log)),
        ];
        for (kind, r) in &self.state.reports {
            texts.push((format!("report.{kind}"), r.to_text()));
        }
        let mut tensors = model_tensors(&mut self.model);
        if let Some(v) = &self.state.velocity {
            for (p, t) in self.model.store.iter().zip(v) {
                tensors.push((format!("velocity/{}", p.name), t.clone()));
            }
        }
        Checkpoint { texts, tensors }
    }

    /// Rebuilds a session from a checkpoint written by [`Session::checkpoint`].
    pub fn resume(config: ModelConfig, plan: TrainPlan, class_names: Vec<String>, ck: &Checkpoint) -> Result<Self> {
        let mut model = FuthNet::new(config)?;
        load_model_tensors(&mut model, ck)?;
        let cursor = ck.text("cursor").ok_or_else(|| Error::input("checkpoint has no cursor"))?;
        let mut state = RunState::default();
        for line in cursor.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::input(format!("bad cursor line {line:?}")))?;
            let v: usize = v.parse().map_err(|_| Error::input(format!("bad cursor value {v:?}")))?;
            match k {
                "phase_index" => state.phase_index = v,
                "epochs_done" => state.epochs_done = v,
                other => return Err(Error::input(format!("unknown cursor key {other:?}"))),
            }
        }
        if state.phase_index > plan.phases.len() {
            return Err(Error::config(format!(
                "checkpoint is at phase {} but the plan has {} phases",
                state.phase_index,
                plan.phases.len()
            )));
        }
        state.log = parse_log(ck.text("log").unwrap_or(""))?;
        for kind in PhaseKind::ALL {
            if let Some(text) = ck.text(&format!("report.{kind}")) {
                state.reports.push((kind, EvalReport::parse(text)?));
            }
        }
        if state.epochs_done > 0 {
            let v = model
                .store
                .iter()
                .map(|p| {
                    ck.tensor(&format!("velocity/{}", p.name))
                        .cloned()
                        .ok_or_else(|| Error::input(format!("checkpoint lacks velocity for {}", p.name)))
                })
                .collect::<Result<Vec<_>>>()?;
            state.velocity = Some(v);
        }
        let mut session = Session::new(model, plan, class_names)?;
        session.state = state;
        Ok(session)
    }
}

/// One forward/backward/update on a batch; returns (mean loss, correct count).
/// Splits `order` into batches of `size`, folding a short remainder into the
/// last full batch so batch-norm never sees a tiny batch.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out[out.len() - 1].len() < size {
        let start = (out.len() - 2) * size;
        out.truncate(out.len() - 2);
        out.push(&order[start..]);
    }
    out
}

fn train_step(
    model: &mut FuthNet,
    sgd: &mut Sgd,
    rng: &mut ChaCha8Rng,
    labels: &[usize],
    build: impl FnOnce(&mut Modules, &mut Forward) -> Result<NodeId>,
) -> Result<(f64, usize)> {
    let FuthNet { store, net, .. } = model;
    store.zero_grads();
    let mut graph = Graph::new();
    let (loss, probs) = {
        let mut fw = Forward {
            graph: &mut graph,
            store,
            mode: Mode::Train,
            rng,
        };
        let logits = build(net, &mut fw)?;
        fw.graph.softmax_cross_entropy(logits, labels)?
    };
    let value = graph.value(loss).data()[0];
    graph.backward(loss, store)?;
    sgd.step(store)?;
    Ok((value, count_correct(&probs, labels)))
}

/// Parameters and batch-norm statistics under stable names.
pub fn model_tensors(model: &mut FuthNet) -> Vec<(String, Tensor)> {
    let mut out: Vec<(String, Tensor)> = model
        .store
        .iter()
        .map(|p| (format!("param/{}", p.name), p.value.clone()))
        .collect();
    for bn in model.net.batchnorms_mut() {
        let n = bn.running_mean.len();
        out.push((
            format!("bn/{}/mean", bn.name),
            Tensor::from_parts(vec![n], bn.running_mean.clone(), crate::tensor::Precision::F64),
        ));
        out.push((
            format!("bn/{}/var", bn.name),
            Tensor::from_parts(vec![n], bn.running_var.clone(), crate::tensor::Precision::F64),
        ));
    }
    out
}

/// Loads parameters and batch-norm statistics; every model tensor must be present with its exact shape.
pub fn load_model_tensors(model: &mut FuthNet, ck: &Checkpoint) -> Result<()> {
    let lookup = |name: &str, expected: &[usize]| -> Result<Tensor> {
        let t = ck
            .tensor(name)
            .ok_or_else(|| Error::config(format!("checkpoint has no tensor {name}")))?;
        if t.shape() != expected {
            return Err(Error::config(format!(
                "checkpoint tensor {name} has shape {:?} but the configured model expects {:?}",
                t.shape(),
                expected
            )));
        }
        Ok(t.clone())
    };
    let ids: Vec<_> = model
        .store
        .iter()
        .map(|p| (p.name.clone(), p.value.shape().to_vec()))
        .collect();
    for (i, (name, shape)) in ids.into_iter().enumerate() {
        let t = lookup(&format!("param/{name}"), &shape)?;
        let p = model.store.iter_mut().nth(i).expect("index in range");
        p.value = t.to_precision(p.value.precision());
    }
    for bn in model.net.batchnorms_mut() {
        let n = [bn.running_mean.len()];
        let mean = lookup(&format!("bn/{}/mean", bn.name), &n)?.into_data();
        let var = lookup(&format!("bn/{}/var", bn.name), &n)?.into_data();
        bn.set_stats(mean, var)?;
    }
    Ok(())
}

/// A copy of `model` with a freshly initialized fusion module and fusion
/// head built from `fusion`. Pathway weights, pathway heads and their
/// batch-norm statistics are carried over unchanged.
pub fn with_fusion(model: &mut FuthNet, fusion: FusionConfig) -> Result<FuthNet> {
    let mut config = model.config.clone();
    config.fusion = fusion;
    let mut out = FuthNet::new(config)?;
    let skip = [ParamGroup::Fusion, ParamGroup::FusionHead];
    for p in out.store.iter_mut().filter(|p| !skip.contains(&p.group)) {
        let src = model
            .store
            .find(&p.name)
            .ok_or_else(|| Error::State(format!("source model has no parameter {}", p.name)))?;
        p.value = model.store.value(src).clone();
    }
    let fusion_bns: Vec<String> = out.net.fusion.batchnorms_mut().map(|b| b.name.clone()).collect();
    let mut stats: Vec<(String, Vec<f64>, Vec<f64>)> = model
        .net
        .batchnorms_mut()
        .into_iter()
        .map(|b| (b.name.clone(), b.running_mean.clone(), b.running_var.clone()))
        .collect();
    for bn in out.net.batchnorms_mut() {
        if fusion_bns.contains(&bn.name) {
            continue;
        }
        let i = stats
            .iter()
            .position(|(n, ..)| *n == bn.name)
            .ok_or_else(|| Error::State(format!("source model has no batch norm {}", bn.name)))?;
        let (_, mean, var) = stats.swap_remove(i);
        bn.set_stats(mean, var)?;
    }
    Ok(out)
}

/// Trains a per-frame classifier on single randomly chosen frames and
/// evaluates it on one random frame per test clip. Motion-defined classes
/// should leave it near chance.
pub fn appearance_baseline(
    config: &ModelConfig,
    train: &[VideoClip],
    test: &[VideoClip],
    phase: &PhasePlan,
    class_names: &[String],
) -> Result<EvalReport> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::input("the appearance baseline needs training and test clips"));
    }
    let mut store = ParamStore::new();
    let mut init = ChaCha8Rng::seed_from_u64(config.init_seed ^ 0xA11CE);
    let mut pb = ParamBuilder {
        store: &mut store,
        rng: &mut init,
        precision: config.precision,
    };
    let [c, _, h, w] = config.clip_shape();
    let mut extractor = FrameFeatureExtractor::new(&mut pb, &config.extractor, c, [h, w])?;
    let head = classifier(&mut pb, "appearance.head", ParamGroup::Other, extractor.d_f(), config.classes);
    let mut sgd = Sgd::new(SgdConfig::new(phase.lr, phase.momentum, phase.weight_decay), &store)?;

    let frame_input = |clip: &VideoClip, rng: &mut ChaCha8Rng| -> Result<Tensor> {
        let t = rng.random_range(0..clip.num_frames());
        let f = clip.frame(t);
        Tensor::with_precision(&[c, 1, h, w], f.into_data(), config.precision)
    };
    let mut forward = |store: &ParamStore, graph: &mut Graph, x: Tensor, mode: Mode, rng: &mut ChaCha8Rng| -> Result<NodeId> {
        let mut fw = Forward { graph, store, mode, rng };
        let x = fw.graph.input(x)?;
        let feats = extractor.forward(&mut fw, x)?.features;
        let b = fw.graph.shape(feats)[0];
        let flat = fw.graph.reshape(feats, &[b, extractor.d_f()])?;
        head.forward(&mut fw, flat)
    };

    for epoch in 0..phase.epochs {
        let mut rng = epoch_rng(phase.seed, epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        for idx in batches(&order, phase.batch_size) {
            let frames = idx.iter().map(|&i| frame_input(&train[i], &mut rng)).collect::<Result<Vec<_>>>()?;
            let labels: Vec<usize> = idx.iter().map(|&i| train[i].label).collect();
            store.zero_grads();
            let mut graph = Graph::new();
            let logits = forward(&store, &mut graph, stack(&frames.iter().collect::<Vec<_>>())?, Mode::Train, &mut rng)?;
            let (loss, _) = graph.softmax_cross_entropy(logits, &labels)?;
            graph.backward(loss, &mut store)?;
            sgd.step(&mut store)?;
        }
    }

    let mut rng = epoch_rng(phase.seed, usize::MAX);
    let mut predicted = Vec::with_capacity(test.len());
    for chunk in test.chunks(EVAL_CHUNK) {
        let frames = chunk.iter().map(|c| frame_input(c, &mut rng)).collect::<Result<Vec<_>>>()?;
        let mut graph = Graph::new();
        let logits = forward(&store, &mut graph, stack(&frames.iter().collect::<Vec<_>>())?, Mode::Eval, &mut rng)?;
        push_predictions(graph.value(logits), &mut predicted);
    }
    let labels: Vec<usize> = test.iter().map(|c| c.label).collect();
    report(&predicted, &labels, class_names, config.classes)
}

#[cfg(test)]
mod tests {
    use super::batches;

    #[test]
    fn short_remainder_joins_the_last_batch() {
        let order: Vec<usize> = (0..200).collect();
        let b = batches(&order, 6);
        assert_eq!(b.len(), 33);
        assert!(b[..32].iter().all(|x| x.len() == 6));
        assert_eq!(b[32], &order[192..]);
        assert_eq!(batches(&order[..12], 6).len(), 2);
        assert_eq!(batches(&order[..4], 6), vec![&order[..4]]);
        assert!(batches(&[], 6).is_empty());
    }
}
