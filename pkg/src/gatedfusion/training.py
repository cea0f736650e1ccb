"""Loss, Adam, the training loop, metrics, and gradient checking."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as tn
from .data import Video
from .errors import ConfigError, ContractError, TrainingError
from .model import (
    MODALITIES,
    AblationConfig,
    ModelConfig,
    ModelParams,
    forward_video,
)
from .tensor import Tape, Tensor, backward

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.0005
    batch_size: int = 16
    epochs: int = 75
    dropout: float = 0.4
    hidden: int = 100
    seed: int = 0
    ablation: AblationConfig = field(default_factory=AblationConfig)
    max_grad_norm: Optional[float] = None  # clipping disabled by default

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be non-negative, got {self.epochs}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.hidden < 1:
            raise ConfigError(f"hidden must be positive, got {self.hidden}")
        if self.max_grad_norm is not None and self.max_grad_norm <= 0:
            raise ConfigError(f"max_grad_norm must be positive, got {self.max_grad_norm}")


@dataclass
class Metrics:
    accuracy: float
    f1: float
    loss: Optional[float] = None


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_acc: float
    val_f1: float


@dataclass
class TrainResult:
    params: ModelParams
    history: List[EpochRecord]
    best_epoch: int  # 0 when no epoch improved on nothing (epochs=0)
    best_val_acc: float


class Adam:
    """Bias-corrected Adam over a fixed list of (name, tensor) parameters."""

    def __init__(
        self,
        named_params: Sequence[Tuple[str, Tensor]],
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.named_params = list(named_params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(t.data) for _, t in self.named_params]
        self.v = [np.zeros_like(t.data) for _, t in self.named_params]

    def zero_grad(self) -> None:
        for _, t in self.named_params:
            t.zero_grad()

    def clip_gradients(self, max_norm: float) -> float:
        """Scale all gradients so their global L2 norm is at most max_norm."""
        total = sum(float((t.grad ** 2).sum()) for _, t in self.named_params)
        norm = float(np.sqrt(total))
        if norm > max_norm:
            scale = max_norm / norm
            for _, t in self.named_params:
                buf = t.grad
                buf *= scale
        return norm

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for (name, p), m, v in zip(self.named_params, self.m, self.v):
            g = p.grad
            if g.shape != p.data.shape:
                raise ContractError(f"gradient shape mismatch for {name}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def _nll_sum(probs: Tensor, labels: np.ndarray, mask: np.ndarray) -> Tuple[Tensor, int]:
    """Summed −log p(true class) over real utterances, as a scalar tensor."""
    u = probs.shape[0]
    mask = np.asarray(mask, dtype=bool)
    onehot = np.zeros((u, 2))
    real = np.flatnonzero(mask)
    onehot[real, np.asarray(labels)[real]] = 1.0
    picked = tn.hadamard(tn.log_clamped(probs, PROB_FLOOR), Tensor(onehot))
    return tn.affine(tn.sum_all(picked), -1.0), len(real)


def cross_entropy_loss(probs: Tensor, labels: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean −log p(true class) over real utterances (floored at 1e-12)."""
    total, n = _nll_sum(probs, labels, mask)
    if n == 0:
        raise ContractError("cross_entropy_loss needs at least one real utterance")
    return tn.affine(total, 1.0 / n)


def binary_metrics(preds: np.ndarray, labels: np.ndarray) -> Metrics:
    """Accuracy and binary F1 on the positive class (empty 0/0 terms -> 0)."""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    acc = float((preds == labels).mean()) if len(labels) else 0.0
    tp = int(((preds == 1) & (labels == 1)).sum())
    fp = int(((preds == 1) & (labels == 0)).sum())
    fn = int(((preds == 0) & (labels == 1)).sum())
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return Metrics(accuracy=acc, f1=f1)


def _video_feats(video: Video) -> Dict[str, Tensor]:
    return {m: Tensor(video.feature_matrix(m)) for m in MODALITIES}


@dataclass
class Prediction:
    video_id: str
    utt_idx: int
    label: int
    pred: int
    p_pos: float


def predict_videos(
    params: ModelParams,
    model_config: ModelConfig,
    ablation: AblationConfig,
    videos: Sequence[Video],
) -> List[Prediction]:
    """Eval-mode per-utterance predictions, in dataset order."""
    out: List[Prediction] = []
    for v in videos:
        mask = np.ones(len(v), dtype=bool)
        probs, _ = forward_video(
            params, model_config, ablation, _video_feats(v), mask, mode="eval"
        )
        preds = probs.data.argmax(axis=1)
        for i, u in enumerate(v.utterances):
            out.append(
                Prediction(
                    video_id=v.id,
                    utt_idx=i,
                    label=u.label,
                    pred=int(preds[i]),
                    p_pos=float(probs.data[i, 1]),
                )
            )
    return out


def evaluate(
    params: ModelParams,
    model_config: ModelConfig,
    ablation: AblationConfig,
    videos: Sequence[Video],
) -> Metrics:
    """Utterance-level accuracy, binary F1, and mean loss; dropout off."""
    preds: List[int] = []
    labels: List[int] = []
    nll = 0.0
    count = 0
    for v in videos:
        mask = np.ones(len(v), dtype=bool)
        probs, _ = forward_video(
            params, model_config, ablation, _video_feats(v), mask, mode="eval"
        )
        total, n = _nll_sum(probs, v.labels(), mask)
        nll += float(total.data[0])
        count += n
        preds.extend(probs.data.argmax(axis=1).tolist())
        labels.extend(v.labels().tolist())
    metrics = binary_metrics(np.array(preds), np.array(labels))
    metrics.loss = nll / count if count else None
    return metrics


def _snapshot(params: ModelParams) -> Dict[str, np.ndarray]:
    return {name: t.data.copy() for name, t in params.named()}


def _restore(params: ModelParams, snap: Dict[str, np.ndarray]) -> None:
    for name, t in params.named():
        t.data[...] = snap[name]


def train(
    params: ModelParams,
    model_config: ModelConfig,
    train_videos: Sequence[Video],
    val_videos: Optional[Sequence[Video]],
    config: TrainConfig,
) -> TrainResult:
    """Adam training over shuffled video batches.

    Parameters are updated in place; when a validation split is given the
    weights scoring the best validation accuracy are restored before
    returning (ties keep the earliest epoch).  Divergence (non-finite
    loss) raises :class:`TrainingError` naming the epoch and batch.

    Randomness is split into independent seeded streams: [seed, 1]
    shuffles batches, [seed, 2] drives dropout.
    """
    if not train_videos:
        raise ContractError("train needs a non-empty training split")
    shuffle_rng = np.random.default_rng([config.seed, 1])
    dropout_rng = np.random.default_rng([config.seed, 2])
    opt = Adam(list(params.named()), lr=config.lr)
    history: List[EpochRecord] = []
    best_acc = -1.0
    best_epoch = 0
    best_snap: Optional[Dict[str, np.ndarray]] = None

    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(len(train_videos))
        epoch_nll = 0.0
        epoch_count = 0
        for batch_no, start in enumerate(range(0, len(order), config.batch_size)):
            batch = [train_videos[i] for i in order[start : start + config.batch_size]]
            opt.zero_grad()
            with Tape():
                terms: List[Tensor] = []
                n_real = 0
                for v in batch:
                    mask = np.ones(len(v), dtype=bool)
                    probs, _ = forward_video(
                        params,
                        model_config,
                        config.ablation,
                        _video_feats(v),
                        mask,
                        mode="train",
                        dropout_rate=config.dropout,
                        rng=dropout_rng,
                    )
                    total, n = _nll_sum(probs, v.labels(), mask)
                    terms.append(total)
                    n_real += n
                summed = terms[0]
                for t in terms[1:]:
                    summed = tn.add(summed, t)
                loss = tn.affine(summed, 1.0 / n_real)
                loss_value = float(loss.data[0])
                if not np.isfinite(loss_value):
                    raise TrainingError(
                        f"non-finite loss {loss_value} at epoch {epoch}, batch {batch_no}",
                        epoch=epoch,
                        batch=batch_no,
                    )
                backward(loss)
            if config.max_grad_norm is not None:
                opt.clip_gradients(config.max_grad_norm)
            opt.step()
            epoch_nll += loss_value * n_real
            epoch_count += n_real

        train_loss = epoch_nll / epoch_count
        if val_videos:
            val = evaluate(params, model_config, config.ablation, val_videos)
            val_acc, val_f1 = val.accuracy, val.f1
            if val_acc > best_acc:
                best_acc = val_acc
                best_epoch = epoch
                best_snap = _snapshot(params)
        else:
            val_acc = val_f1 = float("nan")
        history.append(
            EpochRecord(epoch=epoch, train_loss=train_loss, val_acc=val_acc, val_f1=val_f1)
        )

    if best_snap is not None:
        _restore(params, best_snap)
    return TrainResult(
        params=params, history=history, best_epoch=best_epoch, best_val_acc=best_acc
    )


def write_metrics_csv(history: Sequence[EpochRecord], path) -> None:
    """Write the per-epoch history as `epoch,train_loss,val_acc,val_f1`."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "val_acc", "val_f1"])
        for rec in history:
            writer.writerow(
                [rec.epoch, repr(rec.train_loss), repr(rec.val_acc), repr(rec.val_f1)]
            )


def write_predictions_csv(predictions: Sequence[Prediction], path) -> None:
    """Write per-utterance predictions as `video_id,utt_idx,label,pred,p_pos`."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["video_id", "utt_idx", "label", "pred", "p_pos"])
        for p in predictions:
            writer.writerow([p.video_id, p.utt_idx, p.label, p.pred, repr(p.p_pos)])


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    n_coords: int
    max_rel_err: float
    mean_rel_err: float
    worst: str  # "param_name[flat_index]"

    @property
    def passed(self) -> bool:
        return self.max_rel_err < 1e-4


def grad_check(
    named_params: Sequence[Tuple[str, Tensor]],
    build_loss: Callable[[], Tensor],
    epsilon: float = 1e-5,
    sample_size: int = 200,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    ``build_loss`` runs a fresh forward pass and returns the scalar loss;
    it must be deterministic (no dropout).  A seeded sample of parameter
    coordinates (all of them when fewer than ``sample_size``) is perturbed
    by ±epsilon; relative error uses denominator max(|a|, |fd|, 1e-6).
    """
    named = list(named_params)
    for _, t in named:
        t.zero_grad()
    with Tape():
        backward(build_loss())

    sizes = [t.data.size for _, t in named]
    total = sum(sizes)
    rng = np.random.default_rng(seed)
    n = min(sample_size, total)
    chosen = np.sort(rng.choice(total, size=n, replace=False))

    offsets = np.cumsum([0] + sizes)
    max_rel = 0.0
    sum_rel = 0.0
    worst = ""
    for flat in chosen:
        pi = int(np.searchsorted(offsets, flat, side="right") - 1)
        name, t = named[pi]
        idx = np.unravel_index(int(flat - offsets[pi]), t.data.shape)
        keep = t.data[idx]
        t.data[idx] = keep + epsilon
        up = float(build_loss().data[0])
        t.data[idx] = keep - epsilon
        down = float(build_loss().data[0])
        t.data[idx] = keep
        fd = (up - down) / (2.0 * epsilon)
        a = float(t.grad[idx])
        rel = abs(a - fd) / max(abs(a), abs(fd), 1e-6)
        sum_rel += rel
        if rel > max_rel:
            max_rel = rel
            worst = f"{name}[{int(flat - offsets[pi])}]"
    return GradCheckReport(
        n_coords=n, max_rel_err=max_rel, mean_rel_err=sum_rel / n if n else 0.0, worst=worst
    )


def model_grad_check(
    params: ModelParams,
    model_config: ModelConfig,
    ablation: AblationConfig,
    videos: Sequence[Video],
    epsilon: float = 1e-5,
    sample_size: int = 200,
    seed: int = 0,
) -> GradCheckReport:
    """Gradient check of the full model through the training loss
    (eval-mode forward, so dropout is off)."""

    def build_loss() -> Tensor:
        terms: List[Tensor] = []
        n_real = 0
        for v in videos:
            mask = np.ones(len(v), dtype=bool)
            probs, _ = forward_video(
                params, model_config, ablation, _video_feats(v), mask, mode="eval"
            )
            total, n = _nll_sum(probs, v.labels(), mask)
            terms.append(total)
            n_real += n
        summed = terms[0]
        for t in terms[1:]:
            summed = tn.add(summed, t)
        return tn.affine(summed, 1.0 / n_real)

    return grad_check(
        list(params.named()), build_loss, epsilon=epsilon, sample_size=sample_size, seed=seed
    )
