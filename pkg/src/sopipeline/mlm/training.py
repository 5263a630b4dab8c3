"""Batch planning, MLM training, gradient checking, and fine-tuning."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from ..errors import ChecksumMismatchError, MetricError, TrainingError, UsageError
from ..metrics import ClassWeights
from .encoder import ClassifierModel, EncoderModel, HeadKind
from .masking import IGNORE_LABEL, MaskedBatch, make_masked_batch


@dataclass(frozen=True)
class BatchPlan:
    micro_batch_seqs: int
    seq_len: int
    accumulation_steps: int

    @property
    def effective_tokens(self) -> int:
        return self.micro_batch_seqs * self.seq_len * self.accumulation_steps


def plan_batches(target_tokens: int, micro_batch_seqs: int, seq_len: int) -> BatchPlan:
    """Fewest accumulation steps whose effective batch covers the target."""
    if min(target_tokens, micro_batch_seqs, seq_len) <= 0:
        raise UsageError("target_tokens, micro_batch_seqs and seq_len must be positive")
    steps = math.ceil(target_tokens / (micro_batch_seqs * seq_len))
    return BatchPlan(micro_batch_seqs=micro_batch_seqs, seq_len=seq_len, accumulation_steps=steps)


# -- losses --------------------------------------------------------------------


def _cross_entropy_rows(flat_logits: np.ndarray, targets: np.ndarray):
    """Per-row CE and softmax probs for [N, V] logits, numerically stable."""
    m = flat_logits.max(axis=-1, keepdims=True)
    shifted = flat_logits - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True)) + m
    rows = np.arange(flat_logits.shape[0])
    ce = lse[:, 0] - flat_logits[rows, targets]
    probs = np.exp(flat_logits - lse)
    return ce, probs


def mlm_loss_sums(model: EncoderModel, batch: MaskedBatch, *, want_grads: bool = True):
    """Summed CE over labeled positions plus the label count.

    Returning sums (not means) keeps gradient accumulation exactly linear:
    micro-batch sums add, and the caller divides once by the total count.
    """
    labeled = batch.labels != IGNORE_LABEL
    count = int(labeled.sum())
    if count == 0:
        raise TrainingError("batch has no labeled (masked) positions")
    y, cache = model.hidden_states(batch.input_ids, batch.attn_mask, want_cache=want_grads)
    logits = model.logits_mlm(y)
    flat = logits[labeled]
    targets = batch.labels[labeled]
    ce, probs = _cross_entropy_rows(flat, targets)
    loss_sum = float(ce.sum())
    if not want_grads:
        return loss_sum, count, logits, None
    dflat = probs
    dflat[np.arange(flat.shape[0]), targets] -= 1.0
    dlogits = np.zeros_like(logits)
    dlogits[labeled] = dflat
    grads = model.zero_grads()
    dy = model.backward_mlm_head(y, dlogits, grads)
    model.backward(cache, dy, grads)
    return loss_sum, count, logits, grads


def forward_mlm(model: EncoderModel, batch: MaskedBatch) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over masked positions only, plus the full logits."""
    loss_sum, count, logits, _ = mlm_loss_sums(model, batch, want_grads=False)
    return loss_sum / count, logits


def classifier_loss_sums(
    clf: ClassifierModel,
    input_ids: np.ndarray,
    attn_mask: np.ndarray,
    labels: np.ndarray,
    weights: Optional[np.ndarray] = None,
    *,
    want_grads: bool = True,
):
    """Weighted-CE sums for a classifier; weights index by class label.

    loss = sum(w_y * CE) with weight mass sum(w_y) returned alongside, so
    uniform weights reduce exactly to plain mean cross-entropy.
    """
    labels = np.asarray(labels)
    if labels.size and labels.max() >= clf.n_classes:
        raise MetricError(f"label id {int(labels.max())} >= n_classes {clf.n_classes}")
    y, cache = clf.encoder.hidden_states(input_ids, attn_mask, want_cache=want_grads)
    logits = clf.logits(y)

    if clf.kind is HeadKind.SEQUENCE:
        flat, targets = logits, labels
        keep = np.ones(len(labels), dtype=bool)
    else:
        keep = labels != IGNORE_LABEL
        flat, targets = logits[keep], labels[keep]
    if targets.size == 0:
        raise TrainingError("batch has no labeled positions")
    w = np.ones(targets.shape[0], dtype=logits.dtype) if weights is None else np.asarray(weights)[targets]
    ce, probs = _cross_entropy_rows(flat, targets)
    loss_sum = float((w * ce).sum())
    weight_sum = float(w.sum())
    if not want_grads:
        return loss_sum, weight_sum, logits, None

    dflat = probs
    dflat[np.arange(flat.shape[0]), targets] -= 1.0
    dflat *= w[:, None]
    if clf.kind is HeadKind.SEQUENCE:
        dlogits = dflat
    else:
        dlogits = np.zeros_like(logits)
        dlogits[keep] = dflat
    grads = clf.encoder.zero_grads()
    grads.update({k: np.zeros_like(v) for k, v in clf.params.items()})
    dy = clf.backward_head(y, dlogits, grads)
    clf.encoder.backward(cache, dy, grads)
    return loss_sum, weight_sum, logits, grads


# -- optimizer -------------------------------------------------------------------


class MomentumSGD:
    """Heavy-ball gradient descent with linear LR warmup."""

    def __init__(self, lr: float, momentum: float = 0.9, warmup_steps: int = 0):
        self.lr = lr
        self.momentum = momentum
        self.warmup_steps = warmup_steps
        self.velocity: dict[str, np.ndarray] = {}

    def rate(self, step_index: int) -> float:
        if self.warmup_steps > 0:
            return self.lr * min(1.0, (step_index + 1) / self.warmup_steps)
        return self.lr

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], step_index: int) -> None:
        lr_t = self.rate(step_index)
        for name, g in grads.items():
            v = self.velocity.get(name)
            if v is None:
                v = np.zeros_like(g)
            v = self.momentum * v + g
            self.velocity[name] = v
            params[name] -= lr_t * v


# -- MLM training ------------------------------------------------------------------


def train_mlm(
    model: EncoderModel,
    reader: Iterable[Sequence[int]],
    plan: BatchPlan,
    steps: int,
    lr: float,
    seed: int = 0,
    *,
    mask_rate: float = 0.15,
    momentum: float = 0.9,
    warmup_steps: int = 0,
    remask_each_step: bool = True,
    loss_csv: Optional[str | Path] = None,
) -> list[float]:
    """Accumulated-micro-batch MLM training; returns per-step mean loss.

    Sequences cycle in reader order, truncated/padded to the plan's length.
    Masks are keyed by (seed, stream position), making runs reproducible
    and invariant to how a step's sequences split into micro-batches. With
    ``remask_each_step`` off, positions wrap at the dataset size so every
    pass reuses the same masks (memorization runs).
    """
    checksum = getattr(reader, "vocab_checksum", None)
    if checksum is not None and model.config.vocab_checksum is not None:
        if checksum != model.config.vocab_checksum:
            raise ChecksumMismatchError(
                f"shard vocabulary {checksum.hex()} does not match model "
                f"vocabulary {model.config.vocab_checksum.hex()}"
            )
    if plan.seq_len > model.config.max_positions:
        raise UsageError(f"plan seq_len {plan.seq_len} exceeds model max_positions")

    seqs = [trimmed for s in reader if (trimmed := list(s)[: plan.seq_len])]
    if not seqs:
        raise UsageError("reader yielded no non-empty sequences")

    optimizer = MomentumSGD(lr, momentum=momentum, warmup_steps=warmup_steps)
    losses: list[float] = []
    batch_cache: dict[tuple[int, ...], MaskedBatch] = {}
    cursor = 0
    for step in range(steps):
        grads_total: Optional[dict[str, np.ndarray]] = None
        loss_sum_total = 0.0
        count_total = 0
        for _ in range(plan.accumulation_steps):
            picks = [(cursor + i) % len(seqs) for i in range(plan.micro_batch_seqs)]
            keys = [cursor + i if remask_each_step else picks[i] for i in range(len(picks))]
            cache_key = tuple(picks)
            batch = None if remask_each_step else batch_cache.get(cache_key)
            if batch is None:
                batch = make_masked_batch(
                    [seqs[p] for p in picks],
                    mask_rate,
                    vocab_size=model.config.vocab_size,
                    seq_len=plan.seq_len,
                    seed=seed,
                    indices=keys,
                )
                if not remask_each_step:
                    # fixed masks per dataset index: identical every epoch
                    batch_cache[cache_key] = batch
            cursor += plan.micro_batch_seqs
            loss_sum, count, _, grads = mlm_loss_sums(model, batch)
            loss_sum_total += loss_sum
            count_total += count
            if grads_total is None:
                grads_total = grads
            else:
                for name in grads_total:
                    grads_total[name] += grads[name]
        loss = loss_sum_total / count_total
        if not np.isfinite(loss):
            raise TrainingError("loss is not finite", step=step)
        assert grads_total is not None
        for name in grads_total:
            grads_total[name] /= count_total
        optimizer.step(model.params, grads_total, step)
        losses.append(loss)

    if loss_csv is not None:
        with open(loss_csv, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "loss"])
            for i, value in enumerate(losses):
                writer.writerow([i, f"{value:.6f}"])
    return losses


# -- gradient check -----------------------------------------------------------------


def grad_check(model: EncoderModel, batch: MaskedBatch, epsilon: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Runs in float64 regardless of the model's dtype. The relative error
    denominator is floored at 1e-4 so components whose true gradient is
    ~zero are judged on (scaled) absolute error instead of noise ratio.
    """
    m64 = model.astype("float64")

    loss_sum, count, _, grads = mlm_loss_sums(m64, batch)
    worst = 0.0
    for name in m64.param_names:
        tensor = m64.params[name]
        analytic = grads[name] / count
        flat = tensor.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up, cnt, _, _ = mlm_loss_sums(m64, batch, want_grads=False)
            flat[i] = orig - epsilon
            down, _, _, _ = mlm_loss_sums(m64, batch, want_grads=False)
            flat[i] = orig
            numeric = (up / cnt - down / cnt) / (2 * epsilon)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-4)
            worst = max(worst, err)
    return worst


# -- fine-tuning -------------------------------------------------------------------


def attach_head(model: EncoderModel, kind: str | HeadKind, n_classes: int) -> ClassifierModel:
    """Wrap the encoder with a sequence- or token-classification head."""
    if n_classes < 2:
        raise UsageError(f"n_classes must be at least 2, got {n_classes}")
    kind = HeadKind(kind) if isinstance(kind, str) else kind
    return ClassifierModel(encoder=model, kind=kind, n_classes=n_classes)


def _pad_batch(items: list, kind: HeadKind) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    from ..bpe import PAD_ID

    T = max(len(ids) for ids, _ in items)
    B = len(items)
    input_ids = np.full((B, T), PAD_ID, dtype=np.int64)
    attn = np.zeros((B, T), dtype=np.int64)
    if kind is HeadKind.SEQUENCE:
        labels = np.zeros(B, dtype=np.int64)
    else:
        labels = np.full((B, T), IGNORE_LABEL, dtype=np.int64)
    for i, (ids, lab) in enumerate(items):
        input_ids[i, : len(ids)] = ids
        attn[i, : len(ids)] = 1
        if kind is HeadKind.SEQUENCE:
            labels[i] = lab
        else:
            if len(lab) != len(ids):
                raise UsageError("token-class labels must align 1:1 with tokens")
            labels[i, : len(ids)] = lab
    return input_ids, attn, labels


def _resolve_weights(
    class_weights: Union[ClassWeights, np.ndarray, Sequence[float], None],
    train_labels: np.ndarray,
    n_classes: int,
) -> np.ndarray:
    from ..metrics import WeightMode, class_weights as compute_weights

    if class_weights is None:
        counts = np.bincount(train_labels, minlength=n_classes)
        return compute_weights(counts, WeightMode.INVERSE_FREQUENCY).weights
    w = class_weights.weights if isinstance(class_weights, ClassWeights) else np.asarray(class_weights, dtype=np.float64)
    if w.shape != (n_classes,):
        raise MetricError(f"need {n_classes} class weights, got shape {w.shape}")
    observed = np.unique(train_labels)
    observed = observed[observed != IGNORE_LABEL]
    if (w[observed] <= 0).any():
        bad = int(observed[(w[observed] <= 0).argmax()])
        raise MetricError(f"class {bad} is observed but has non-positive weight")
    return w


def finetune(
    classifier: ClassifierModel,
    train_data: Sequence[tuple],
    class_weights: Union[ClassWeights, np.ndarray, Sequence[float], None] = None,
    *,
    eval_data: Optional[Sequence[tuple]] = None,
    batch_size: int = 32,
    lr: float = 1e-5,
    epochs: int = 1,
    momentum: float = 0.9,
    warmup_steps: int = 0,
    seed: int = 0,
) -> tuple[ClassifierModel, list]:
    """Weighted-cross-entropy fine-tuning; returns (classifier, predictions).

    Items are (token ids, label) for sequence heads -- inputs must already
    start with the class-marker token -- or (token ids, per-token labels)
    for token heads. With ``class_weights`` omitted, inverse-frequency
    weights are computed from the training labels (erroring if any class in
    range is absent). Predictions are argmax over ``eval_data`` when given,
    else over the training data.
    """
    if not train_data:
        raise UsageError("no training data")
    kind = classifier.kind
    if kind is HeadKind.SEQUENCE:
        all_labels = np.asarray([lab for _, lab in train_data], dtype=np.int64)
    else:
        all_labels = np.concatenate([np.asarray(lab, dtype=np.int64) for _, lab in train_data])
    if all_labels.max() >= classifier.n_classes or all_labels.min() < 0:
        raise MetricError(f"labels must lie in [0, {classifier.n_classes})")
    weights = _resolve_weights(class_weights, all_labels, classifier.n_classes)

    rng = np.random.default_rng(seed)
    optimizer = MomentumSGD(lr, momentum=momentum, warmup_steps=warmup_steps)
    step = 0
    for _ in range(epochs):
        order = rng.permutation(len(train_data))
        for start in range(0, len(order), batch_size):
            items = [train_data[i] for i in order[start : start + batch_size]]
            input_ids, attn, labels = _pad_batch(items, kind)
            loss_sum, weight_sum, _, grads = classifier_loss_sums(
                classifier, input_ids, attn, labels, weights
            )
            if not np.isfinite(loss_sum):
                raise TrainingError("loss is not finite", step=step)
            for name in grads:
                grads[name] /= weight_sum
            merged_params = {**classifier.encoder.params, **classifier.params}
            optimizer.step(merged_params, grads, step)
            step += 1

    predictions = predict(classifier, eval_data if eval_data is not None else train_data)
    return classifier, predictions


def predict(classifier: ClassifierModel, data: Sequence[tuple], batch_size: int = 32) -> list:
    """Argmax predictions; token heads yield one label array per item."""
    out: list = []
    for start in range(0, len(data), batch_size):
        items = list(data[start : start + batch_size])
        input_ids, attn, _ = _pad_batch(items, classifier.kind)
        y, _ = classifier.encoder.hidden_states(input_ids, attn, want_cache=False)
        logits = classifier.logits(y)
        if classifier.kind is HeadKind.SEQUENCE:
            out.extend(int(i) for i in logits.argmax(axis=-1))
        else:
            preds = logits.argmax(axis=-1)
            for i, (ids, _) in enumerate(items):
                out.append(preds[i, : len(ids)].copy())
    return out
