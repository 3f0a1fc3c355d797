//! Warmup then reflow training against an EMA teacher, with early stopping
//! on a fixed-noise single-step validation loss.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::{echo, Settings};
use crate::error::{Error, Result};
use crate::flow::interpolate;
use crate::fvol::write_atomic;
use crate::losses::{reg_loss, reg_loss_and_grad, LossConfig};
use crate::network::{backward, checkpoint, forward, NetworkParameters, Workspace};
use crate::optim::Adam;
use crate::volume::{ensure_same_dims, sample_noise_field, Dims, DisplacementField, LabelMap, Spacing, Volume};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub ema_mu: f64,
    pub patience: usize,
    pub loss: LossConfig,
    /// Random flips and in-plane quarter turns per training step.
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            warmup_epochs: 2,
            lr: 1e-4,
            batch_size: 1,
            ema_mu: 0.99,
            patience: 10,
            loss: LossConfig::default(),
            augment: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs", "must be at least 1"));
        }
        if self.warmup_epochs > self.epochs {
            return Err(Error::invalid(
                "warmup_epochs",
                format!("{} exceeds epochs {}", self.warmup_epochs, self.epochs),
            ));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("lr", format!("{} is not a finite non-negative number", self.lr)));
        }
        if self.batch_size != 1 {
            return Err(Error::invalid("batch_size", "only 1 is supported"));
        }
        if !(self.ema_mu > 0.0 && self.ema_mu < 1.0) {
            return Err(Error::invalid("ema_mu", format!("{} is outside (0, 1)", self.ema_mu)));
        }
        if self.patience == 0 {
            return Err(Error::invalid("patience", "must be at least 1"));
        }
        self.loss.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub fixed: Volume,
    pub moving: Volume,
}

/// `sigmoid(z)`, kept strictly inside (0, 1).
pub fn time_from_logit(z: f64) -> f64 {
    let t = 1.0 / (1.0 + (-z).exp());
    t.clamp(f64::EPSILON, 1.0 - f64::EPSILON)
}

/// `t = sigmoid(z)` with `z ~ N(0, 1)`.
pub fn sample_time_logit_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    time_from_logit(rng.sample(StandardNormal))
}

/// `teacher <- mu * teacher + (1 - mu) * student`.
pub fn ema_update(teacher: &mut NetworkParameters, student: &NetworkParameters, mu: f64) -> Result<()> {
    if !teacher.same_topology(student) {
        return Err(Error::invalid("teacher", "topology differs from the student"));
    }
    if !(0.0..1.0).contains(&mu) {
        return Err(Error::invalid("mu", format!("{mu} is outside [0, 1)")));
    }
    if mu == 0.0 {
        teacher.values_mut().copy_from_slice(student.values());
        return Ok(());
    }
    let w = 1.0 - mu;
    for (t, &s) in teacher.values_mut().iter_mut().zip(student.values()) {
        *t += w * (s - *t);
    }
    Ok(())
}

/// Registration loss of the student's prediction from `(psi_t, t)` and its
/// parameter gradient.
pub fn student_loss_and_grads(
    student: &NetworkParameters,
    pair: &ImagePair,
    psi_t: &DisplacementField,
    t: f64,
    loss: &LossConfig,
    ws: &mut Workspace,
) -> Result<(f64, NetworkParameters)> {
    let pred = forward(student, &pair.fixed, &pair.moving, psi_t, t, ws)?;
    let (value, grad_field) = reg_loss_and_grad(&pair.moving, &pair.fixed, &pred, loss)?;
    let grads = backward(student, &pair.fixed, &pair.moving, ws, &grad_field)?;
    Ok((value, grads))
}

/// Optimiser and EMA state for one training run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub student: NetworkParameters,
    pub teacher: NetworkParameters,
    optimizer: Adam,
    /// 1-based epoch currently being trained.
    pub epoch: usize,
    pub best_val_loss: f64,
    pub epochs_since_improvement: usize,
    rng: ChaCha8Rng,
    teacher_calls: usize,
    steps: usize,
    student_ws: Workspace,
    teacher_ws: Workspace,
}

impl TrainState {
    /// The teacher starts as a copy of the student.
    pub fn new(student: NetworkParameters, cfg: &TrainConfig) -> Self {
        let n = student.count();
        Self {
            teacher: student.clone(),
            student,
            optimizer: Adam::new(n, cfg.lr),
            epoch: 1,
            best_val_loss: f64::INFINITY,
            epochs_since_improvement: 0,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            teacher_calls: 0,
            steps: 0,
            student_ws: Workspace::new(),
            teacher_ws: Workspace::new(),
        }
    }

    pub fn teacher_calls(&self) -> usize {
        self.teacher_calls
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn in_warmup(&self, cfg: &TrainConfig) -> bool {
        self.epoch <= cfg.warmup_epochs
    }
}

/// One optimiser step on `pair`; returns the loss before the update.
pub fn train_step(state: &mut TrainState, pair: &ImagePair, cfg: &TrainConfig) -> Result<f64> {
    ensure_same_dims("training moving image", pair.fixed.dims, pair.moving.dims)?;
    let eps = sample_noise_field(pair.fixed.dims, pair.fixed.spacing, &mut state.rng);
    let (psi_t, t) = if state.in_warmup(cfg) {
        (eps, 0.0)
    } else {
        let target = forward(&state.teacher, &pair.fixed, &pair.moving, &eps, 0.0, &mut state.teacher_ws)?;
        state.teacher_calls += 1;
        let t = sample_time_logit_normal(&mut state.rng);
        (interpolate(&target, &eps, t)?, t)
    };
    let (value, grads) = student_loss_and_grads(&state.student, pair, &psi_t, t, &cfg.loss, &mut state.student_ws)?;
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss {
            loss: value,
            epoch: state.epoch,
            step: state.steps,
        });
    }
    state.optimizer.step(state.student.values_mut(), grads.values());
    ema_update(&mut state.teacher, &state.student, cfg.ema_mu)?;
    state.steps += 1;
    Ok(value)
}

/// Axis flips followed by counter-clockwise in-plane quarter turns.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Augmentation {
    pub flips: [bool; 3],
    pub quarter_turns: u8,
}

impl Augmentation {
    /// Uniform over all flip subsets and turn counts; odd turns are only
    /// drawn when the grid is square in-plane.
    pub fn draw<R: Rng + ?Sized>(rng: &mut R, dims: Dims) -> Self {
        let flips = [rng.gen(), rng.gen(), rng.gen()];
        let quarter_turns = if dims.nx == dims.ny {
            rng.gen_range(0..4)
        } else {
            2 * rng.gen_range(0..2)
        };
        Self { flips, quarter_turns }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::default()
    }

    pub fn output_dims(&self, d: Dims) -> Dims {
        if self.quarter_turns % 2 == 1 {
            Dims::new(d.ny, d.nx, d.nz)
        } else {
            d
        }
    }

    fn output_spacing(&self, s: Spacing) -> Spacing {
        if self.quarter_turns % 2 == 1 {
            Spacing([s.0[1], s.0[0], s.0[2]])
        } else {
            s
        }
    }

    /// Source voxel of output voxel `(x, y, z)`.
    fn source(&self, d: Dims, mut x: usize, mut y: usize, z: usize) -> (usize, usize, usize) {
        // Undo the turns one at a time on the intermediate grids.
        let mut cur = self.output_dims(d);
        for _ in 0..self.quarter_turns % 4 {
            // A CCW turn maps (x, y) on an (nx, ny) grid to (ny - 1 - y, x).
            let prev = Dims::new(cur.ny, cur.nx, cur.nz);
            let (px, py) = (y, prev.ny - 1 - x);
            x = px;
            y = py;
            cur = prev;
        }
        let flip = |v: usize, n: usize, on: bool| if on { n - 1 - v } else { v };
        (
            flip(x, d.nx, self.flips[0]),
            flip(y, d.ny, self.flips[1]),
            flip(z, d.nz, self.flips[2]),
        )
    }

    fn remap<T: Copy>(&self, d: Dims, data: &[T]) -> Vec<T> {
        let od = self.output_dims(d);
        let mut out = Vec::with_capacity(data.len());
        for z in 0..od.nz {
            for y in 0..od.ny {
                for x in 0..od.nx {
                    let (sx, sy, sz) = self.source(d, x, y, z);
                    out.push(data[d.index(sx, sy, sz)]);
                }
            }
        }
        out
    }

    pub fn apply_volume(&self, v: &Volume) -> Volume {
        Volume {
            dims: self.output_dims(v.dims),
            spacing: self.output_spacing(v.spacing),
            data: self.remap(v.dims, &v.data),
        }
    }

    pub fn apply_labels(&self, l: &LabelMap) -> LabelMap {
        LabelMap {
            dims: self.output_dims(l.dims),
            spacing: self.output_spacing(l.spacing),
            data: self.remap(l.dims, &l.data),
        }
    }
}

/// Applies one random transform to both images and every label map.
pub fn augment<R: Rng + ?Sized>(pair: &ImagePair, labels: &[&LabelMap], rng: &mut R) -> (ImagePair, Vec<LabelMap>) {
    let aug = Augmentation::draw(rng, pair.fixed.dims);
    (
        ImagePair {
            fixed: aug.apply_volume(&pair.fixed),
            moving: aug.apply_volume(&pair.moving),
        },
        labels.iter().map(|l| aug.apply_labels(l)).collect(),
    )
}

/// One fixed noise field per validation pair.
pub fn validation_noise(valset: &[ImagePair], seed: u64) -> Vec<DisplacementField> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    valset
        .iter()
        .map(|p| sample_noise_field(p.fixed.dims, p.fixed.spacing, &mut rng))
        .collect()
}

/// Mean single-step (`t = 0`) registration loss over `valset`.
pub fn validation_loss(
    params: &NetworkParameters,
    valset: &[ImagePair],
    noise: &[DisplacementField],
    loss: &LossConfig,
    ws: &mut Workspace,
) -> Result<f64> {
    if valset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if noise.len() != valset.len() {
        return Err(Error::invalid("noise", "needs one field per validation pair"));
    }
    let mut total = 0.0;
    for (pair, eps) in valset.iter().zip(noise) {
        let pred = forward(params, &pair.fixed, &pair.moving, eps, 0.0, ws)?;
        total += reg_loss(&pair.moving, &pair.fixed, &pred, loss)?;
    }
    Ok(total / valset.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    /// Best-validation student, rounded to checkpoint precision.
    pub student: NetworkParameters,
    pub teacher: NetworkParameters,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub history: Vec<EpochRecord>,
    pub stopped_early: bool,
    pub teacher_calls: usize,
}

pub const STUDENT_FILE: &str = "student.frwt";
pub const TEACHER_FILE: &str = "teacher.frwt";
pub const MANIFEST_FILE: &str = "checkpoint.txt";
pub const LOG_FILE: &str = "train_log.csv";

fn rounded(p: &NetworkParameters) -> NetworkParameters {
    let mut q = p.clone();
    q.round_to_f32();
    q
}

fn write_checkpoint(dir: &Path, student: &NetworkParameters, teacher: &NetworkParameters, epoch: usize, val: f64, cfg: &TrainConfig) -> Result<()> {
    checkpoint::save(&dir.join(STUDENT_FILE), student)?;
    checkpoint::save(&dir.join(TEACHER_FILE), teacher)?;
    let mut s = String::new();
    let _ = writeln!(s, "epoch = {epoch}");
    let _ = writeln!(s, "val_loss = {val}");
    let _ = writeln!(s, "seed = {}", cfg.seed);
    let _ = writeln!(s, "student = {STUDENT_FILE}");
    let _ = writeln!(s, "teacher = {TEACHER_FILE}");
    let sections: [&dyn Settings; 3] = [cfg, &cfg.loss, student.config()];
    for section in sections {
        for (k, v) in echo(section) {
            let _ = writeln!(s, "{k} = {v}");
        }
    }
    write_atomic(&dir.join(MANIFEST_FILE), s.as_bytes())
}

fn write_log(dir: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut s = String::from("epoch,train_loss,val_loss,seconds\n");
    for r in history {
        let _ = writeln!(s, "{},{},{},{}", r.epoch, r.train_loss, r.val_loss, r.seconds);
    }
    write_atomic(&dir.join(LOG_FILE), s.as_bytes())
}

/// Options that do not affect the trained weights.
#[derive(Default)]
pub struct FitOptions<'a> {
    /// Receives the best checkpoints, their manifest and the epoch log.
    pub checkpoint_dir: Option<&'a Path>,
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochRecord)>,
}

/// Trains from `initial` and returns the best-validation student. Epochs
/// inside the warmup never count as improvements.
pub fn fit(
    initial: NetworkParameters,
    dataset: &[ImagePair],
    valset: &[ImagePair],
    cfg: &TrainConfig,
    mut opts: FitOptions<'_>,
) -> Result<FitOutcome> {
    cfg.validate()?;
    if dataset.is_empty() || valset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if let Some(dir) = opts.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let noise = validation_noise(valset, cfg.seed);
    let mut val_ws = Workspace::new();
    let mut state = TrainState::new(initial, cfg);
    let mut history = Vec::new();
    let mut best: Option<(NetworkParameters, NetworkParameters, usize)> = None;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut stopped_early = false;

    for epoch in 1..=cfg.epochs {
        state.epoch = epoch;
        let started = Instant::now();
        order.shuffle(&mut state.rng);
        let mut total = 0.0;
        for &i in &order {
            let value = if cfg.augment {
                let (pair, _) = augment(&dataset[i], &[], &mut state.rng);
                train_step(&mut state, &pair, cfg)?
            } else {
                train_step(&mut state, &dataset[i], cfg)?
            };
            total += value;
        }
        let student = rounded(&state.student);
        let val_loss = validation_loss(&student, valset, &noise, &cfg.loss, &mut val_ws)?;
        let record = EpochRecord {
            epoch,
            train_loss: total / dataset.len() as f64,
            val_loss,
            seconds: started.elapsed().as_secs_f64(),
        };

        if !state.in_warmup(cfg) {
            if val_loss < state.best_val_loss {
                state.best_val_loss = val_loss;
                state.epochs_since_improvement = 0;
                let teacher = rounded(&state.teacher);
                if let Some(dir) = opts.checkpoint_dir {
                    write_checkpoint(dir, &student, &teacher, epoch, val_loss, cfg)?;
                }
                best = Some((student, teacher, epoch));
            } else {
                state.epochs_since_improvement += 1;
            }
        }
        if let Some(cb) = opts.on_epoch.as_deref_mut() {
            cb(&record);
        }
        history.push(record);
        if let Some(dir) = opts.checkpoint_dir {
            write_log(dir, &history)?;
        }
        if state.epochs_since_improvement >= cfg.patience {
            stopped_early = epoch < cfg.epochs;
            break;
        }
    }

    let (student, teacher, best_epoch, best_val_loss) = match best {
        Some((s, t, e)) => (s, t, e, state.best_val_loss),
        None => {
            // Every epoch was warmup: keep the final weights.
            let last = history.last().map(|r| (r.epoch, r.val_loss)).unwrap_or((0, f64::NAN));
            let (s, t) = (rounded(&state.student), rounded(&state.teacher));
            if let Some(dir) = opts.checkpoint_dir {
                write_checkpoint(dir, &s, &t, last.0, last.1, cfg)?;
            }
            (s, t, last.0, last.1)
        }
    };
    Ok(FitOutcome {
        student,
        teacher,
        best_epoch,
        best_val_loss,
        history,
        stopped_early,
        teacher_calls: state.teacher_calls,
    })
}
