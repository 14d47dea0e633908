//! Scoring of evolved update rules: a synthetic two-cluster classification
//! task, a logistic model trained by applying the evolved expression to each
//! parameter's gradient, early stopping on validation accuracy, and the
//! repeated-retraining protocol used to judge champions on held-out data.

use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::seeds::{self, TAG_POSTHOC, TAG_SPLIT};
use crate::sge::ExprNode;

pub const DIV_PROTECT_EPS: f64 = 1e-8;
pub const DEFAULT_ALPHA: f64 = 0.01;
pub const DEFAULT_BETA: f64 = 0.9;
pub const POSTHOC_TRAIN_FACTOR: usize = 4;
pub const POSTHOC_MAX_EPOCHS: usize = 500;

#[derive(Debug, Clone, PartialEq)]
pub struct FitnessTaskConfig<S: Scalar> {
    pub feature_dim: usize,
    pub train_size: usize,
    pub validation_size: usize,
    pub fitness_size: usize,
    pub holdout_test_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub data_seed: u64,
    /// Euclidean distance between the two class means; larger is easier.
    pub class_separation: S,
    /// Placeholder fitness for rules that cannot train (no gradient term or
    /// numeric collapse).
    pub nonviable_fitness: S,
}

impl<S: Scalar> Default for FitnessTaskConfig<S> {
    fn default() -> Self {
        FitnessTaskConfig {
            feature_dim: 5,
            train_size: 200,
            validation_size: 100,
            fitness_size: 100,
            holdout_test_size: 200,
            max_epochs: 100,
            early_stop_patience: 10,
            data_seed: 0,
            class_separation: S::of(4.0),
            nonviable_fitness: S::of(0.1),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum TaskConfigError {
    #[error("{0} must be positive")]
    NonPositive(&'static str),
    #[error("early_stop_patience {patience} exceeds max_epochs {max_epochs}")]
    PatienceTooLarge { patience: usize, max_epochs: usize },
}

impl<S: Scalar> FitnessTaskConfig<S> {
    pub fn validate(&self) -> Result<(), TaskConfigError> {
        for (name, v) in [
            ("feature_dim", self.feature_dim),
            ("train_size", self.train_size),
            ("validation_size", self.validation_size),
            ("fitness_size", self.fitness_size),
            ("holdout_test_size", self.holdout_test_size),
            ("max_epochs", self.max_epochs),
            ("early_stop_patience", self.early_stop_patience),
        ] {
            if v == 0 {
                return Err(TaskConfigError::NonPositive(name));
            }
        }
        if self.early_stop_patience > self.max_epochs {
            return Err(TaskConfigError::PatienceTooLarge {
                patience: self.early_stop_patience,
                max_epochs: self.max_epochs,
            });
        }
        Ok(())
    }
}

/// Row-major feature matrix with exactly alternating binary labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<S> {
    pub features: Vec<S>,
    pub labels: Vec<u8>,
    pub dim: usize,
}

impl<S: Scalar> Dataset<S> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[S] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskData<S> {
    pub train: Dataset<S>,
    pub validation: Dataset<S>,
    pub fitness: Dataset<S>,
    pub holdout: Dataset<S>,
}

fn generate_split<S: Scalar>(
    data_seed: u64,
    split_tag: u64,
    n: usize,
    dim: usize,
    separation: f64,
) -> Dataset<S> {
    let mut rng = seeds::stream(&[data_seed, TAG_SPLIT, split_tag]);
    // class means sit at ±(separation/2) along the unit diagonal
    let half = separation / 2.0 / (dim as f64).sqrt();
    let mut features = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = (i % 2) as u8;
        let mean = if label == 1 { half } else { -half };
        for _ in 0..dim {
            let noise: f64 = StandardNormal.sample(&mut rng);
            features.push(S::of(mean + noise));
        }
        labels.push(label);
    }
    Dataset { features, labels, dim }
}

/// Four i.i.d. splits of the same two-Gaussian mixture, deterministic from
/// `data_seed`. Each split has its own derived stream, so resizing one split
/// leaves the others' contents unchanged.
pub fn generate_task<S: Scalar>(cfg: &FitnessTaskConfig<S>) -> TaskData<S> {
    let sep = cfg.class_separation.as_f64();
    let d = cfg.feature_dim;
    TaskData {
        train: generate_split(cfg.data_seed, 1, cfg.train_size, d, sep),
        validation: generate_split(cfg.data_seed, 2, cfg.validation_size, d, sep),
        fitness: generate_split(cfg.data_seed, 3, cfg.fitness_size, d, sep),
        holdout: generate_split(cfg.data_seed, 4, cfg.holdout_test_size, d, sep),
    }
}

/// Values available to expression leaves besides per-parameter `grad`/`w`.
#[derive(Debug, Clone, PartialEq)]
pub struct Bindings<S> {
    pub alpha: S,
    pub beta: S,
}

impl<S: Scalar> Default for Bindings<S> {
    fn default() -> Self {
        Bindings { alpha: S::of(DEFAULT_ALPHA), beta: S::of(DEFAULT_BETA) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Error, PartialEq)]
pub enum CompileError {
    #[error("terminal `{0}` does not bind to a value")]
    UnresolvableTerminal(String),
    #[error("operator `{0}` is not one of + - * /")]
    UnknownOperator(char),
    #[error("node `{0}` has no arithmetic interpretation")]
    Uninterpretable(String),
}

/// Expression tree compiled against the binding table once, at admission
/// time; evaluation afterwards is total and allocation-free.
#[derive(Debug, Clone, PartialEq)]
pub enum CompiledExpr<S> {
    Const(S),
    Grad,
    Weight,
    Bin { op: BinOp, left: Box<CompiledExpr<S>>, right: Box<CompiledExpr<S>> },
}

impl<S: Scalar> CompiledExpr<S> {
    pub fn compile(node: &ExprNode, bindings: &Bindings<S>) -> Result<Self, CompileError> {
        match node {
            ExprNode::Leaf(t) => match t.as_str() {
                "grad" => Ok(CompiledExpr::Grad),
                "w" => Ok(CompiledExpr::Weight),
                "alpha" => Ok(CompiledExpr::Const(bindings.alpha)),
                "beta" => Ok(CompiledExpr::Const(bindings.beta)),
                lit => lit
                    .parse::<f64>()
                    .map(|v| CompiledExpr::Const(S::of(v)))
                    .map_err(|_| CompileError::UnresolvableTerminal(t.clone())),
            },
            ExprNode::Binary { op, left, right } => {
                let op = match op {
                    '+' => BinOp::Add,
                    '-' => BinOp::Sub,
                    '*' => BinOp::Mul,
                    '/' => BinOp::Div,
                    other => return Err(CompileError::UnknownOperator(*other)),
                };
                Ok(CompiledExpr::Bin {
                    op,
                    left: Box::new(Self::compile(left, bindings)?),
                    right: Box::new(Self::compile(right, bindings)?),
                })
            }
            ExprNode::Seq(_) => Err(CompileError::Uninterpretable(node.to_string())),
        }
    }

    /// Division by near-zero returns the numerator; every other operation is
    /// plain IEEE arithmetic, so non-finite values propagate to the caller.
    pub fn eval(&self, grad: S, w: S) -> S {
        match self {
            CompiledExpr::Const(v) => *v,
            CompiledExpr::Grad => grad,
            CompiledExpr::Weight => w,
            CompiledExpr::Bin { op, left, right } => {
                let l = left.eval(grad, w);
                let r = right.eval(grad, w);
                match op {
                    BinOp::Add => l + r,
                    BinOp::Sub => l - r,
                    BinOp::Mul => l * r,
                    BinOp::Div => {
                        if r.abs() > S::of(DIV_PROTECT_EPS) {
                            l / r
                        } else {
                            l
                        }
                    }
                }
            }
        }
    }
}

/// One-shot interpretation; admission errors surface here instead of during
/// training.
pub fn eval_expression<S: Scalar>(
    root: &ExprNode,
    grad: S,
    w: S,
    bindings: &Bindings<S>,
) -> Result<S, CompileError> {
    Ok(CompiledExpr::compile(root, bindings)?.eval(grad, w))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingResult<S> {
    pub fitness_accuracy: S,
    pub best_validation_accuracy: S,
    pub epochs_run: usize,
    pub diverged: bool,
}

struct Model<S> {
    /// feature weights followed by the bias
    params: Vec<S>,
    dim: usize,
}

impl<S: Scalar> Model<S> {
    fn zeros(dim: usize) -> Model<S> {
        Model { params: vec![S::zero(); dim + 1], dim }
    }

    fn logit(&self, row: &[S]) -> S {
        let mut z = self.params[self.dim]; // bias
        for (w, x) in self.params[..self.dim].iter().zip(row) {
            z = z + *w * *x;
        }
        z
    }

    fn accuracy(&self, data: &Dataset<S>) -> S {
        let mut correct = 0usize;
        for i in 0..data.len() {
            let predicted = if self.logit(data.row(i)) > S::zero() { 1 } else { 0 };
            if predicted == data.labels[i] {
                correct += 1;
            }
        }
        S::of(correct as f64) / S::of(data.len() as f64)
    }

    /// Mean cross-entropy and its gradient for all parameters (weights then
    /// bias). The loss is the branchwise -ln p form on purpose: a saturated
    /// sigmoid produces an infinite loss, which is the divergence signal.
    fn loss_and_grad(&self, data: &Dataset<S>) -> (S, Vec<S>) {
        let n = data.len();
        let inv_n = S::one() / S::of(n as f64);
        let mut loss = S::zero();
        let mut grad = vec![S::zero(); self.dim + 1];
        for i in 0..n {
            let row = data.row(i);
            let z = self.logit(row);
            let p = sigmoid(z);
            let y = data.labels[i];
            loss = loss
                + if y == 1 {
                    -(p.max(S::zero())).ln()
                } else {
                    -((S::one() - p).max(S::zero())).ln()
                };
            let err = p - S::of(y as f64);
            for (g, x) in grad[..self.dim].iter_mut().zip(row) {
                *g = *g + err * *x;
            }
            grad[self.dim] = grad[self.dim] + err;
        }
        for g in grad.iter_mut() {
            *g = *g * inv_n;
        }
        (loss * inv_n, grad)
    }
}

fn sigmoid<S: Scalar>(z: S) -> S {
    if z >= S::zero() {
        S::one() / (S::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (S::one() + e)
    }
}

/// Mean cross-entropy and its analytic gradient at an arbitrary parameter
/// vector (feature weights followed by the bias) — the training loop's inner
/// kernel, exposed so callers can verify or diagnose the numerics.
pub fn logistic_loss_and_gradient<S: Scalar>(params: &[S], data: &Dataset<S>) -> (S, Vec<S>) {
    assert_eq!(
        params.len(),
        data.dim + 1,
        "parameter vector must hold dim weights plus the bias"
    );
    let model = Model { params: params.to_vec(), dim: data.dim };
    model.loss_and_grad(data)
}

struct TrainOutcome<S> {
    /// Parameters of the best-validation epoch (zeros if divergence struck
    /// before the first validation pass).
    best_params: Vec<S>,
    best_validation_accuracy: S,
    epochs_run: usize,
    diverged: bool,
}

/// Full-batch training of the logistic model from zero initialization:
/// each epoch computes the analytic cross-entropy gradient, applies
/// `p <- p - expr(grad, p)` per parameter, and early-stops after
/// `early_stop_patience` epochs without a validation improvement. Any
/// non-finite loss or parameter aborts immediately with `diverged` set.
fn train_loop<S: Scalar>(
    expr: &CompiledExpr<S>,
    data: &TaskData<S>,
    cfg: &FitnessTaskConfig<S>,
) -> TrainOutcome<S> {
    let dim = data.train.dim;
    let mut model = Model::zeros(dim);
    let mut best_va = S::of(-1.0);
    let mut best_params = model.params.clone();
    let mut stale = 0usize;
    let mut epochs_run = 0usize;
    let mut diverged = false;

    for _ in 0..cfg.max_epochs {
        let (loss, grads) = model.loss_and_grad(&data.train);
        if !loss.is_finite() {
            diverged = true;
            break;
        }
        for (p, g) in model.params.iter_mut().zip(&grads) {
            *p = *p - expr.eval(*g, *p);
        }
        epochs_run += 1;
        if model.params.iter().any(|p| !p.is_finite()) {
            diverged = true;
            break;
        }
        let va = model.accuracy(&data.validation);
        if va > best_va {
            best_va = va;
            best_params.copy_from_slice(&model.params);
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.early_stop_patience {
                break;
            }
        }
    }

    TrainOutcome {
        best_params,
        best_validation_accuracy: best_va.max(S::zero()),
        epochs_run,
        diverged,
    }
}

/// Train, restore the best-validation parameters, and report accuracy on the
/// fitness split; divergence reports the non-viable floor instead.
pub fn train_and_score<S: Scalar>(
    expr: &CompiledExpr<S>,
    data: &TaskData<S>,
    cfg: &FitnessTaskConfig<S>,
) -> TrainingResult<S> {
    let outcome = train_loop(expr, data, cfg);
    let fitness_accuracy = if outcome.diverged {
        cfg.nonviable_fitness
    } else {
        let model = Model { params: outcome.best_params, dim: data.train.dim };
        model.accuracy(&data.fitness)
    };
    TrainingResult {
        fitness_accuracy,
        best_validation_accuracy: outcome.best_validation_accuracy,
        epochs_run: outcome.epochs_run,
        diverged: outcome.diverged,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PostHocReport<S> {
    pub repetitions: usize,
    pub per_repetition_test_accuracy: Vec<S>,
    pub mean_test_accuracy: S,
    pub std_test_accuracy: S,
    pub mean_validation_accuracy: S,
}

/// Champion re-assessment: `repetitions` full retrainings on fresh data
/// (seed derived per repetition), a training split enlarged by
/// `POSTHOC_TRAIN_FACTOR`, the epoch cap raised to `POSTHOC_MAX_EPOCHS`, no
/// early stopping, best-validation restoration, and scoring on the holdout
/// split that evolution never saw.
pub fn post_hoc<S: Scalar>(
    expr: &CompiledExpr<S>,
    cfg: &FitnessTaskConfig<S>,
    repetitions: usize,
) -> PostHocReport<S> {
    let mut test_accs = Vec::with_capacity(repetitions);
    let mut val_accs = Vec::with_capacity(repetitions);
    for rep in 0..repetitions {
        let mut rep_cfg = cfg.clone();
        rep_cfg.data_seed = seeds::mix(&[cfg.data_seed, TAG_POSTHOC, rep as u64]);
        rep_cfg.train_size = cfg.train_size * POSTHOC_TRAIN_FACTOR;
        rep_cfg.max_epochs = POSTHOC_MAX_EPOCHS;
        // patience equal to the cap can never fire: the first epoch always
        // improves on the initial sentinel, leaving at most cap-1 stale epochs
        rep_cfg.early_stop_patience = POSTHOC_MAX_EPOCHS;
        let data = generate_task(&rep_cfg);
        let outcome = train_loop(expr, &data, &rep_cfg);
        let test_acc = if outcome.diverged {
            rep_cfg.nonviable_fitness
        } else {
            let model = Model { params: outcome.best_params, dim: data.train.dim };
            model.accuracy(&data.holdout)
        };
        test_accs.push(test_acc);
        val_accs.push(outcome.best_validation_accuracy);
    }
    let n = S::of(repetitions as f64);
    let mean: S = test_accs.iter().copied().sum::<S>() / n;
    let var: S = if repetitions > 1 {
        test_accs
            .iter()
            .map(|&a| (a - mean) * (a - mean))
            .sum::<S>()
            / S::of((repetitions - 1) as f64)
    } else {
        S::zero()
    };
    PostHocReport {
        repetitions,
        per_repetition_test_accuracy: test_accs,
        mean_test_accuracy: mean,
        std_test_accuracy: var.sqrt(),
        mean_validation_accuracy: val_accs.iter().copied().sum::<S>() / n,
    }
}
