"""
Teacher training, QAT + knowledge-distillation student training and the
hidden-size sweep.
"""

import logging
import time
from concurrent.futures import Executor, ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from src.datagen import FliDataset, split_dataset
from src.errors import ConfigError, ShapeError, TrainingDivergedError
from src.gru_model import ModelConfig, ModelKind, SeqModel, backward, forward, init_model, predict
from src.quant import CalibrationStats, FakeQuantHook, QuantMode
from src.tensor_ops import Adam, Tensor, clip_grad_norm

logger = logging.getLogger(__name__)

DEFAULT_SWEEP = ("128x128", "128x64", "64x32", "64x16", "45x45", "32x32", "16x16")


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 256
    lr: float = 0.001
    mixed_alpha: float = 0.8
    kd_beta: float = 0.5
    qat_bits: Optional[int] = None
    qat_mode: QuantMode = QuantMode.SIGNED_SYMMETRIC
    seed: int = 42
    shuffle: bool = True
    val_fraction: float = 0.1
    patience: int = 5
    clip_norm: float = 5.0
    deterministic: bool = True
    workers: int = 1

    def validate(self) -> None:
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not 0.0 <= self.mixed_alpha <= 1.0:
            raise ConfigError(f"mixed_alpha must be in [0, 1], got {self.mixed_alpha}")
        if not 0.0 <= self.kd_beta <= 1.0:
            raise ConfigError(f"kd_beta must be in [0, 1], got {self.kd_beta}")
        if self.qat_bits not in (None, 8, 16):
            raise ConfigError(f"qat_bits must be None, 8 or 16, got {self.qat_bits}")
        if self.workers < 1:
            raise ConfigError(f"workers must be >= 1, got {self.workers}")


@dataclass
class TrainHistory:
    train_loss: List[float] = field(default_factory=list)
    val_loss: List[float] = field(default_factory=list)
    val_rmse: List[float] = field(default_factory=list)
    seconds: List[float] = field(default_factory=list)
    best_epoch: Optional[int] = None

    def __len__(self) -> int:
        return len(self.train_loss)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "epoch": np.arange(1, len(self) + 1),
            "train_loss": self.train_loss,
            "val_loss": self.val_loss,
            "val_rmse": self.val_rmse,
            "seconds": self.seconds,
        })

    def to_dict(self) -> Dict[str, object]:
        return {
            "train_loss": list(self.train_loss),
            "val_loss": list(self.val_loss),
            "val_rmse": list(self.val_rmse),
            "seconds": list(self.seconds),
            "best_epoch": self.best_epoch,
        }


def _check_lengths(a: Tensor, b: Tensor) -> None:
    if np.shape(a) != np.shape(b):
        raise ShapeError(f"Prediction shape {np.shape(a)} does not match target shape {np.shape(b)}")


def mixed_loss(pred: Tensor, target: Tensor, alpha: float = 0.8) -> float:
    """alpha * MSE + (1 - alpha) * MAE."""
    _check_lengths(pred, target)
    diff = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    return float(alpha * np.mean(diff * diff) + (1.0 - alpha) * np.mean(np.abs(diff)))


def mixed_loss_grad(pred: Tensor, target: Tensor, alpha: float = 0.8) -> Tensor:
    """Gradient of mixed_loss wrt pred; the MAE subgradient is 0 at exact ties."""
    _check_lengths(pred, target)
    diff = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    n = diff.size
    return alpha * 2.0 * diff / n + (1.0 - alpha) * np.sign(diff) / n


def kd_loss(student_out: Tensor, teacher_out: Tensor, target: Tensor, beta: float = 0.5,
            alpha: float = 0.8) -> float:
    """beta * mixed_loss(student, target) + (1 - beta) * MSE(student, teacher)."""
    _check_lengths(student_out, teacher_out)
    soft = np.asarray(student_out, dtype=np.float64) - np.asarray(teacher_out, dtype=np.float64)
    return beta * mixed_loss(student_out, target, alpha) + (1.0 - beta) * float(np.mean(soft * soft))


def kd_loss_grad(student_out: Tensor, teacher_out: Tensor, target: Tensor, beta: float = 0.5,
                 alpha: float = 0.8) -> Tensor:
    _check_lengths(student_out, teacher_out)
    soft = np.asarray(student_out, dtype=np.float64) - np.asarray(teacher_out, dtype=np.float64)
    return beta * mixed_loss_grad(student_out, target, alpha) + (1.0 - beta) * 2.0 * soft / soft.size


@dataclass
class _Objective:
    """Loss used for one training run; teacher outputs present only for KD."""
    alpha: float
    beta: float = 1.0
    teacher_out: Optional[Tensor] = None

    def value_and_grad(self, pred: Tensor, target: Tensor, rows: np.ndarray) -> Tuple[float, Tensor]:
        if self.teacher_out is None:
            return mixed_loss(pred, target, self.alpha), mixed_loss_grad(pred, target, self.alpha)
        soft = self.teacher_out[rows]
        return (kd_loss(pred, soft, target, self.beta, self.alpha),
                kd_loss_grad(pred, soft, target, self.beta, self.alpha))


def _evaluate_split(model: SeqModel, x: Tensor, y: Tensor, alpha: float,
                    hook: Optional[FakeQuantHook], batch_size: int) -> Tuple[float, float]:
    pred = predict(model, x, batch_size=max(batch_size, 512), hook=hook)
    diff = pred - y
    return mixed_loss(pred, y, alpha), float(np.sqrt(np.mean(diff * diff)))


def _chunk_gradients(model: SeqModel, x: Tensor, y: Tensor, rows: np.ndarray, objective: _Objective,
                     hook: Optional[FakeQuantHook]) -> Tuple[float, Dict[str, Tensor]]:
    pred, cache = forward(model, x[rows], hook)
    loss, d_out = objective.value_and_grad(pred, y[rows], rows)
    return loss, backward(model, cache, d_out)


def _batch_gradients(model: SeqModel, x: Tensor, y: Tensor, rows: np.ndarray, objective: _Objective,
                     hook: Optional[FakeQuantHook], pool: Optional[Executor],
                     workers: int) -> Tuple[float, Dict[str, Tensor]]:
    """
    Loss and gradients of one minibatch.

    With a pool the batch is cut into `workers` contiguous chunks whose
    forward/backward passes run concurrently; the chunk results are combined
    in chunk order, weighted by chunk size, so a run is repeatable for a fixed
    worker count.
    """
    if pool is None or len(rows) < 2:
        return _chunk_gradients(model, x, y, rows, objective, hook)
    chunks = [c for c in np.array_split(rows, min(workers, len(rows))) if len(c)]
    results = list(pool.map(lambda c: _chunk_gradients(model, x, y, c, objective, hook), chunks))
    loss = 0.0
    grads = {name: np.zeros_like(g) for name, g in results[0][1].items()}
    for chunk, (chunk_loss, chunk_grads) in zip(chunks, results):
        weight = len(chunk) / len(rows)
        loss += chunk_loss * weight
        for name, g in chunk_grads.items():
            grads[name] += g * weight
    return loss, grads


def _fit(model: SeqModel, train: FliDataset, val: FliDataset, config: TrainConfig,
         objective: _Objective, train_hook: Optional[FakeQuantHook] = None,
         eval_hook: Optional[FakeQuantHook] = None) -> Tuple[SeqModel, TrainHistory]:
    if config.epochs == 0:
        return model, TrainHistory()

    x_train, y_train = train.tpsf_matrix(), train.sfd_matrix()
    x_val, y_val = val.tpsf_matrix(), val.sfd_matrix()
    pool = None
    if not config.deterministic and config.workers > 1:
        if train_hook is not None and train_hook.update_stats:
            logger.info("QAT calibration updates depend on batch order; training serially")
        else:
            pool = ThreadPoolExecutor(max_workers=config.workers)
            logger.debug(f"Computing minibatch gradients on {config.workers} threads")

    try:
        return _epochs(model, x_train, y_train, x_val, y_val, config, objective, train_hook, eval_hook, pool)
    finally:
        if pool is not None:
            pool.shutdown()


def _epochs(model: SeqModel, x_train: Tensor, y_train: Tensor, x_val: Tensor, y_val: Tensor, config: TrainConfig,
            objective: _Objective, train_hook: Optional[FakeQuantHook], eval_hook: Optional[FakeQuantHook],
            pool: Optional[Executor]) -> Tuple[SeqModel, TrainHistory]:
    history = TrainHistory()
    rng = np.random.default_rng(config.seed)
    optimizer = Adam(lr=config.lr)
    params = model.parameters()
    best_model = model.copy()
    best_val = np.inf
    stale_epochs = 0
    for epoch in range(1, config.epochs + 1):
        started = time.perf_counter()
        order = rng.permutation(len(x_train)) if config.shuffle else np.arange(len(x_train))
        total, seen = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            rows = order[start:start + config.batch_size]
            loss, grads = _batch_gradients(model, x_train, y_train, rows, objective, train_hook, pool, config.workers)
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"Loss became non-finite at epoch {epoch}, batch starting at record {start}")
            clip_grad_norm(grads, config.clip_norm)
            optimizer.step(params, grads)
            model.bump_revision()
            total += loss * len(rows)
            seen += len(rows)

        train_loss = total / max(seen, 1)
        if len(x_val):
            val_loss, val_rmse = _evaluate_split(model, x_val, y_val, objective.alpha, eval_hook, config.batch_size)
        else:
            val_loss, val_rmse = train_loss, float("nan")
        if not np.isfinite(val_loss):
            raise TrainingDivergedError(f"Validation loss became non-finite at epoch {epoch}")
        elapsed = time.perf_counter() - started

        history.train_loss.append(train_loss)
        history.val_loss.append(val_loss)
        history.val_rmse.append(val_rmse)
        history.seconds.append(elapsed)
        logger.info(f"epoch={epoch} train_loss={train_loss:.6f} val_loss={val_loss:.6f} "
                    f"val_rmse={val_rmse:.6f} seconds={elapsed:.2f}")

        if val_loss < best_val:
            best_val = val_loss
            best_model = model.copy()
            history.best_epoch = epoch
            stale_epochs = 0
        else:
            stale_epochs += 1
            if stale_epochs >= config.patience:
                logger.info(f"Early stopping after epoch {epoch}; best epoch {history.best_epoch}")
                break

    return best_model, history


def _prepare(dataset: FliDataset, model_config: ModelConfig, config: TrainConfig) -> Tuple[FliDataset, FliDataset]:
    config.validate()
    model_config.validate()
    if len(dataset) == 0:
        raise ConfigError("Training dataset is empty")
    if dataset.grid.n_gates != model_config.seq_len:
        raise ShapeError(f"Dataset has {dataset.grid.n_gates} gates but the model expects {model_config.seq_len}")
    if len(dataset) < 2:
        return dataset, dataset.subset([])
    return split_dataset(dataset, config.val_fraction, config.seed)


def train_teacher(dataset: FliDataset, model_config: ModelConfig,
                  config: TrainConfig) -> Tuple[SeqModel, TrainHistory]:
    """
    Minibatch BPTT with Adam on the mixed loss.

    Args:
        dataset: Records; split 90/10 into train/validation with config.seed
        model_config: Architecture to train (teacher or lite)
        config: Optimization settings

    Returns:
        The best-validation checkpoint and the per-epoch history
    """
    train, val = _prepare(dataset, model_config, config)
    model = init_model(model_config, config.seed)
    logger.info(f"Training {model_config.kind.value} {model_config.label} "
                f"({model.parameter_count()} parameters) on {len(train)} records, validating on {len(val)}")
    return _fit(model, train, val, config, _Objective(alpha=config.mixed_alpha))


def train_student_qat_kd(dataset: FliDataset, teacher: Optional[SeqModel], student_config: ModelConfig,
                         config: TrainConfig) -> Tuple[SeqModel, TrainHistory]:
    """
    Train a Seq2SeqLite student with fake quantization and distillation.

    The float teacher's outputs are precomputed once; the student minimizes
    kd_loss. With kd_beta == 1 the teacher is ignored.
    """
    train, val = _prepare(dataset, student_config, config)
    use_kd = config.kd_beta < 1.0
    if use_kd and teacher is None:
        raise ConfigError("Knowledge distillation needs a teacher model (or kd_beta = 1)")
    if config.qat_bits is None and not use_kd:
        logger.warning("Student without QAT or KD is plain training of the lite model")

    objective = _Objective(alpha=config.mixed_alpha, beta=config.kd_beta)
    if use_kd:
        if teacher.config.seq_len != student_config.seq_len:
            raise ShapeError("Teacher and student sequence lengths differ")
        objective.teacher_out = predict(teacher, train.tpsf_matrix())

    train_hook = eval_hook = None
    if config.qat_bits is not None:
        stats = CalibrationStats()
        train_hook = FakeQuantHook(config.qat_bits, config.qat_mode, stats, update_stats=True)
        eval_hook = FakeQuantHook(config.qat_bits, config.qat_mode, stats, update_stats=False)

    model = init_model(student_config, config.seed)
    logger.info(f"Training student {student_config.label} ({model.parameter_count()} parameters), "
                f"qat_bits={config.qat_bits}, kd_beta={config.kd_beta}")
    student, history = _fit(model, train, val, config, objective, train_hook, eval_hook)
    if train_hook is not None and train_hook.clamped:
        logger.info(f"QAT clamped {train_hook.clamped} activation values during training")
    return student, history


def sweep_hidden_sizes(dataset: FliDataset, configs: Sequence[str] = DEFAULT_SWEEP,
                       config: Optional[TrainConfig] = None,
                       bits: Sequence[int] = (16, 8)) -> pd.DataFrame:
    """
    Weight-reduction study: one teacher per hidden configuration, evaluated in
    float and after PTQ at each bit width on the validation split.
    """
    from src.metrics import evaluate
    from src.quant import model_footprint, ptq_model

    config = config or TrainConfig()
    _, val = split_dataset(dataset, config.val_fraction, config.seed)
    rows = []
    for label in configs:
        model_config = ModelConfig.from_hidden_spec(label, ModelKind.TEACHER, dataset.grid.n_gates)
        model, history = train_teacher(dataset, model_config, config)
        candidates = [("float", model, 32)]
        for b in bits:
            candidates.append((f"int{b}", ptq_model(model, b, val), b))
        for tag, candidate, width in candidates:
            report = evaluate(candidate, val, "float")
            footprint = model_footprint(model, width)
            row = {"config": label, "engine": tag, "parameters": footprint["parameters"],
                   "bytes": footprint["bytes"], "epochs": len(history)}
            row.update(report.aggregates())
            rows.append(row)
        logger.info(f"Sweep {label}: float RMSE {rows[-len(candidates)]['rmse_mean']:.4f}")
    return pd.DataFrame(rows)
