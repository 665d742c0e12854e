"""
Targets, losses, AdamW, bias initialization and the recurrent training cycle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import CLASS_INDEX, NUM_CLASSES, UNCLEAR, warp_feature_map
from .network import HeadOutput
from .numerics import read_checkpoint, write_checkpoint
from .pillars import OUTPUT_STRIDE

PROB_EPS = 1e-7
FREQ_FLOOR = 1e-6
OPTIMIZER_PREFIX = "adamw."
TRANSFER_FROZEN = ("encoder.", "backbone.down")


class CheckpointError(ValueError):
    """Checkpoint tensors do not match the model (names or shapes)."""


@dataclass
class LossConfig:
    alpha: float = 0.5
    gamma: float = 2.0
    delta_loc: float = 1.0
    delta_ang: float = 3.0
    delta_aux: float = 1.0
    class_weights: list | None = None
    lambda_aux: float = 0.5
    w_loc: float = 2.0
    w_ang: float = 1.0
    k_min: int = 1
    k_max: int = 9

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError(f"focal gamma must be >= 0, got {self.gamma}")
        if min(self.delta_loc, self.delta_ang, self.delta_aux) <= 0:
            raise ValueError("Huber deltas must be positive")
        if self.class_weights is not None:
            if len(self.class_weights) != NUM_CLASSES or min(self.class_weights) <= 0:
                raise ValueError(f"class_weights needs {NUM_CLASSES} positive values")
        if self.lambda_aux < 0 or self.w_loc < 0 or self.w_ang < 0:
            raise ValueError("loss weights must be nonnegative")
        if not 0 <= self.k_min <= self.k_max:
            raise ValueError(f"warm-up range must satisfy 0 <= k_min <= k_max, got [{self.k_min}, {self.k_max}]")


@dataclass
class TrainConfig:
    lr: float = 2e-3
    weight_decay: float = 0.01
    betas: list = field(default_factory=lambda: [0.9, 0.999])
    eps: float = 1e-8
    epochs: int = 10
    seed: int = 0
    freeze: list = field(default_factory=list)
    bptt: bool = False
    cosine: bool = True
    transfer_from: str | None = None

    def __post_init__(self):
        if self.lr <= 0 or self.weight_decay < 0 or self.epochs < 0:
            raise ValueError("lr must be positive, weight_decay and epochs nonnegative")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ValueError(f"betas must be two values in [0, 1), got {self.betas}")


# ---------------------------------------------------------------------------
# Targets
# ---------------------------------------------------------------------------

@dataclass
class TargetMaps:
    """
    Per-cell training targets on the output grid.

    ``reg`` holds (dx, dy, z, l, w, h, sin, cos) on foreground cells and NaN
    elsewhere.
    """

    cls: np.ndarray
    reg: np.ndarray
    foreground: np.ndarray
    unclear: np.ndarray
    n_ignored: int = 0

    @property
    def n_valid(self):
        return int((~self.unclear).sum())


def output_cell(grid, x, y):
    """(row, col) of the output cell containing (x, y), or None outside the grid."""
    if not (grid.x_min <= x < grid.x_max and grid.y_min <= y < grid.y_max):
        return None
    cell = grid.cell * OUTPUT_STRIDE
    rows, cols = grid.output_shape
    return (min(int(math.floor((x - grid.x_min) / cell)), rows - 1),
            min(int(math.floor((y - grid.y_min) / cell)), cols - 1))


def build_targets(annotations, grid):
    """
    Assign every box to the output cell holding its BEV center.

    Boxes are visited nearest-to-ego first and a cell keeps the first box that
    reaches it; if that box is "unclear" the cell is excluded from all losses.
    Centers outside the grid are counted in ``n_ignored``.
    """
    rows, cols = grid.output_shape
    cell = grid.cell * OUTPUT_STRIDE
    cls = np.zeros((rows, cols, NUM_CLASSES))
    cls[..., 0] = 1.0
    reg = np.full((rows, cols, 8), np.nan)
    foreground = np.zeros((rows, cols), dtype=bool)
    unclear = np.zeros((rows, cols), dtype=bool)
    taken = np.zeros((rows, cols), dtype=bool)
    ignored = 0

    for box in sorted(annotations, key=lambda b: b.bev_range):
        rc = output_cell(grid, box.cx, box.cy)
        if rc is None:
            ignored += 1
            continue
        if taken[rc]:
            continue
        taken[rc] = True
        if box.label == UNCLEAR:
            unclear[rc] = True
            continue
        i, j = rc
        cx = grid.x_min + (i + 0.5) * cell
        cy = grid.y_min + (j + 0.5) * cell
        cls[i, j] = 0.0
        cls[i, j, CLASS_INDEX[box.label]] = 1.0
        reg[i, j] = (box.cx - cx, box.cy - cy, box.cz, box.l, box.w, box.h, math.sin(box.yaw), math.cos(box.yaw))
        foreground[i, j] = True
    return TargetMaps(cls, reg, foreground, unclear, ignored)


def targets_as_head(targets):
    """HeadOutput that predicts ``targets`` exactly (probability 1 on the target class)."""
    reg = np.nan_to_num(targets.reg, nan=0.0)
    return HeadOutput(targets.cls.copy(), reg[..., :3], reg[..., 3:6], reg[..., 6:])


def class_frequencies(sequences, grid):
    """Share of output cells per class (background first) over the core frames, unclear cells left out."""
    counts = np.zeros(NUM_CLASSES)
    for sequence in sequences:
        targets = build_targets(sequence.annotations, grid)
        valid = ~targets.unclear
        counts += targets.cls[valid].sum(axis=0)
    if counts.sum() == 0:
        raise ValueError("no valid cells to count class frequencies on")
    return counts / counts.sum()


def class_weights_from_frequencies(frequencies):
    """Inverse frequency, normalized to mean 1."""
    freqs = np.maximum(np.asarray(frequencies, dtype=np.float64), FREQ_FLOOR)
    inverse = 1.0 / freqs
    return inverse / inverse.mean()


def bias_init(frequencies):
    """Classifier bias whose softmax (with zero weights) reproduces the class frequencies."""
    freqs = np.asarray(frequencies, dtype=np.float64)
    if freqs.ndim != 1 or np.any(freqs < 0) or not np.all(np.isfinite(freqs)):
        raise ValueError(f"class frequencies must be a nonnegative vector, got {frequencies}")
    freqs = np.maximum(freqs, FREQ_FLOOR)
    return np.log(freqs / freqs.sum())


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def _class_weight_map(targets_cls, class_weights):
    weights = np.ones(NUM_CLASSES) if class_weights is None else np.asarray(class_weights, dtype=np.float64)
    return targets_cls @ weights


def focal_loss(pred_probs, targets, mask, alpha=0.5, gamma=2.0, class_weights=None):
    """
    Mean over unmasked cells of -alpha * w_c * (1 - p_t)^gamma * log(p_t).

    Args:
        pred_probs: (H, W, K) class probabilities
        targets: (H, W, K) one-hot targets
        mask: (H, W) bool, True where the cell counts
        class_weights: per-class weights w_c (None = all ones)
    """
    n = int(mask.sum())
    if n == 0:
        return 0.0
    p_t = np.clip((pred_probs * targets).sum(axis=-1), PROB_EPS, 1.0 - PROB_EPS)
    weight = _class_weight_map(targets, class_weights)
    per_cell = -alpha * weight * (1.0 - p_t) ** gamma * np.log(p_t)
    return float(per_cell[mask].sum() / n)


def focal_loss_grad(pred_probs, targets, mask, alpha=0.5, gamma=2.0, class_weights=None):
    """Gradient of :func:`focal_loss` with respect to ``pred_probs``."""
    grad = np.zeros_like(pred_probs)
    n = int(mask.sum())
    if n == 0:
        return grad
    raw = (pred_probs * targets).sum(axis=-1)
    p_t = np.clip(raw, PROB_EPS, 1.0 - PROB_EPS)
    weight = _class_weight_map(targets, class_weights)
    one_minus = 1.0 - p_t
    dp = -alpha * weight * (one_minus ** gamma / p_t - gamma * one_minus ** (gamma - 1.0) * np.log(p_t))
    dp = np.where(mask & (raw == p_t), dp / n, 0.0)
    return (targets * dp[..., None]).astype(pred_probs.dtype)


def huber_loss(pred, target, mask, delta):
    """
    Masked mean of 0.5 * e^2 for |e| <= delta, else delta * (|e| - 0.5 * delta).

    ``mask`` broadcasts against ``pred``; a (H, W) mask selects whole cells.
    """
    if delta <= 0:
        raise ValueError(f"Huber delta must be positive, got {delta}")
    pred, target, weights = _masked(pred, target, mask)
    n = weights.sum()
    if n == 0:
        return 0.0
    err = np.abs(pred - target)
    per = np.where(err <= delta, 0.5 * err ** 2, delta * (err - 0.5 * delta))
    return float((per * weights).sum() / n)


def huber_loss_grad(pred, target, mask, delta):
    pred_arr, target, weights = _masked(pred, target, mask)
    n = weights.sum()
    if n == 0:
        return np.zeros_like(pred_arr)
    return (np.clip(pred_arr - target, -delta, delta) * weights / n).astype(pred_arr.dtype)


def _masked(pred, target, mask):
    pred = np.asarray(pred)
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == pred.ndim - 1:
        mask = mask[..., None]
    weights = np.broadcast_to(mask, pred.shape).astype(np.float64)
    target = np.where(weights > 0, np.asarray(target), pred)
    return pred, target, weights


def aux_loss(aux_out, h_prev, rel2d, grid_meta, delta=1.0, with_grad=False):
    """
    Huber between the aux head output and the analytic warp of ``h_prev``.

    Returns the loss, or ``(loss, d loss / d aux_out)`` with ``with_grad``.
    """
    target = warp_feature_map(h_prev, rel2d, grid_meta)
    everywhere = np.ones(aux_out.shape, dtype=bool)
    loss = huber_loss(aux_out, target, everywhere, delta)
    if not with_grad:
        return loss
    return loss, huber_loss_grad(aux_out, target, everywhere, delta)


def compute_losses(head, targets, aux_pair, loss_config, class_weights=None):
    """
    Total loss of one final pass and its gradients.

    ``aux_pair`` is an :class:`~timepillars.network.AuxPair` (output, h_prev,
    rel2d, grid_meta) or None when the aux task did not run.

    Returns:
        (losses, head_grads, aux_grad): losses maps total/focal/loc/ang/aux to
        floats; head_grads maps cls/loc/size/heading to gradients
    """
    cfg = loss_config
    weights = cfg.class_weights if cfg.class_weights is not None else class_weights
    valid = ~targets.unclear
    fg = targets.foreground
    box_pred = np.concatenate([head.loc, head.size], axis=-1)
    ang_pred = head.heading

    focal = focal_loss(head.cls, targets.cls, valid, cfg.alpha, cfg.gamma, weights)
    loc = huber_loss(box_pred, targets.reg[..., :6], fg, cfg.delta_loc)
    ang = huber_loss(ang_pred, targets.reg[..., 6:], fg, cfg.delta_ang)

    dbox = cfg.w_loc * huber_loss_grad(box_pred, targets.reg[..., :6], fg, cfg.delta_loc)
    head_grads = {
        "cls": focal_loss_grad(head.cls, targets.cls, valid, cfg.alpha, cfg.gamma, weights),
        "loc": dbox[..., :3],
        "size": dbox[..., 3:],
        "heading": cfg.w_ang * huber_loss_grad(ang_pred, targets.reg[..., 6:], fg, cfg.delta_ang),
    }

    aux, aux_grad = 0.0, None
    if aux_pair is not None:
        aux, aux_grad = aux_loss(*aux_pair, delta=cfg.delta_aux, with_grad=True)
        aux_grad = cfg.lambda_aux * aux_grad

    total = focal + cfg.w_loc * loc + cfg.w_ang * ang + cfg.lambda_aux * aux
    losses = {"total": total, "focal": focal, "loc": loc, "ang": ang, "aux": aux}
    return losses, head_grads, aux_grad


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

def adamw_step(param, grad, m, v, step, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
    """
    One decoupled-weight-decay Adam update, in place.

    ``step`` is the 1-based step count used for bias correction.
    """
    beta1, beta2 = betas
    param *= 1.0 - lr * weight_decay
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** step)
    v_hat = v / (1.0 - beta2 ** step)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return param


class AdamW:
    """AdamW over the trainable parameters of a ParamStore; frozen ones are never touched."""

    def __init__(self, store, lr=2e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.store = store
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.moments = {}

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        self.step_count += 1
        for param in self.store.trainable():
            if param.grad is None:
                continue
            m, v = self.moments.setdefault(param.name, (np.zeros_like(param.value), np.zeros_like(param.value)))
            adamw_step(param.value, param.grad, m, v, self.step_count, lr, self.betas, self.eps, self.weight_decay)

    def state_tensors(self):
        tensors = {}
        for name, (m, v) in self.moments.items():
            tensors[f"{OPTIMIZER_PREFIX}m.{name}"] = m
            tensors[f"{OPTIMIZER_PREFIX}v.{name}"] = v
        return tensors

    def load_state_tensors(self, tensors, step_count):
        self.moments = {}
        for key, value in tensors.items():
            if key.startswith(f"{OPTIMIZER_PREFIX}m."):
                name = key[len(OPTIMIZER_PREFIX) + 2:]
                self.moments[name] = (value.copy(), tensors[f"{OPTIMIZER_PREFIX}v.{name}"].copy())
        self.step_count = int(step_count)


def cosine_lr(base_lr, step, total_steps):
    """lr * 0.5 * (1 + cos(pi * step / total)), held at 0 past the end."""
    if total_steps <= 0:
        return base_lr
    progress = min(step / total_steps, 1.0)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# Training step
# ---------------------------------------------------------------------------

def draw_warmup_count(rng, loss_config, available):
    """k uniform on [k_min, k_max] clipped to the past scans available."""
    low = min(loss_config.k_min, available)
    high = min(loss_config.k_max, available)
    return int(rng.integers(low, high + 1))


def train_step(model, sequence, optimizer, loss_config, rng, lr=None, bptt=False, class_weights=None):
    """
    One recurrent training step on a sequence.

    Draws the warm-up count k, runs k warm-up passes and the final pass on the
    core frame, back-propagates the total loss and updates the parameters.

    Returns:
        losses dict (with ``k``), or None when the batch is degenerate
    """
    targets = build_targets(sequence.annotations, model.grid)
    if targets.n_valid == 0:
        return None

    model.train()
    if model.config.recurrent:
        k = draw_warmup_count(rng, loss_config, len(sequence.past))
    elif model.config.kind == "mf_pointpillars":
        k = model.config.n_scans - 1
    else:
        k = 0
    head = model.forward_sequence(sequence, n_warmup=k, bptt=bptt)
    aux_pair = model.last_aux if model.aux is not None else None
    if aux_pair is not None:
        aux_pair = aux_pair._replace(output=aux_pair.output[0], h_prev=aux_pair.h_prev[0])

    losses, head_grads, aux_grad = compute_losses(head, targets, aux_pair, loss_config, class_weights)
    if not math.isfinite(losses["total"]):
        raise FloatingPointError(f"non-finite training loss {losses}")

    model.store.zero_grad()
    model.backward(head_grads, None if aux_grad is None else aux_grad[None])
    optimizer.step(lr)
    model.clear()
    losses["k"] = k
    return losses


# ---------------------------------------------------------------------------
# Checkpoints and transfer
# ---------------------------------------------------------------------------

def save_checkpoint(path, model, optimizer=None, meta=None):
    tensors = model.store.state_dict()
    meta = dict(meta or {})
    meta["frozen"] = [p.name for p in model.store if not p.buffer and not p.trainable]
    if optimizer is not None:
        tensors.update(optimizer.state_tensors())
        meta["optimizer_step"] = optimizer.step_count
    return write_checkpoint(path, tensors, meta)


def load_checkpoint(path, model, optimizer=None):
    """
    Restore every model tensor (strict) and, if given, the optimizer state.

    Returns:
        checkpoint metadata
    """
    tensors, meta = read_checkpoint(path)
    params = {k: v for k, v in tensors.items() if not k.startswith(OPTIMIZER_PREFIX)}
    try:
        model.store.load_state_dict(params, strict=True)
    except ValueError as e:
        raise CheckpointError(str(e)) from e
    frozen = set(meta.get("frozen", []))
    for param in model.store:
        if not param.buffer:
            param.trainable = param.name not in frozen
    if optimizer is not None:
        optimizer.load_state_tensors(tensors, meta.get("optimizer_step", 0))
    return meta


def transfer_weights(model, checkpoint, freeze=TRANSFER_FROZEN):
    """
    Initialize a model from a single-frame checkpoint and freeze its early layers.

    Shared tensors are copied by name; tensors the checkpoint lacks (GRU,
    compensation, aux head) keep their fresh initialization. The pillar
    encoder and the downsampling stages are frozen.

    Args:
        model: Detector to initialize
        checkpoint: Checkpoint path or {name: array}

    Returns:
        {"copied": [...], "fresh": [...], "frozen": [...]}
    """
    tensors = read_checkpoint(checkpoint)[0] if not isinstance(checkpoint, dict) else checkpoint
    tensors = {k: v for k, v in tensors.items() if not k.startswith(OPTIMIZER_PREFIX)}
    unexpected = sorted(k for k in tensors if k not in model.store)
    mismatched = sorted(
        f"{k}: checkpoint {tuple(v.shape)} vs model {model.store[k].value.shape}"
        for k, v in tensors.items() if k in model.store and tuple(v.shape) != model.store[k].value.shape
    )
    if unexpected or mismatched:
        raise CheckpointError("cannot transfer weights:\n  " + "\n  ".join(
            [f"unexpected {k}" for k in unexpected] + mismatched))
    missing, _ = model.store.load_state_dict(tensors, strict=False)
    frozen = model.store.set_trainable(freeze, False)
    return {"copied": sorted(tensors), "fresh": sorted(missing), "frozen": frozen}


# ---------------------------------------------------------------------------
# Trainer
# ---------------------------------------------------------------------------

class Trainer:
    """Owns a model, its optimizer, the training rng and the step counter."""

    def __init__(self, model, loss_config, train_config):
        if train_config.bptt and model.config.compensation == "interpolation" and model.config.recurrent:
            raise ValueError("train.bptt cannot be combined with interpolation compensation")
        self.model = model
        self.loss_config = loss_config
        self.train_config = train_config
        self.optimizer = AdamW(model.store, train_config.lr, train_config.betas,
                               train_config.eps, train_config.weight_decay)
        self.rng = np.random.default_rng(train_config.seed)
        self.class_weights = None
        self.skipped = 0
        if train_config.freeze:
            model.store.set_trainable(train_config.freeze, False)

    @property
    def step(self):
        return self.optimizer.step_count

    def prepare(self, sequences):
        """Bias init and class weights from the training set's class frequencies."""
        freqs = class_frequencies(sequences, self.model.grid)
        bias = self.model.head.cls_bias
        bias.value[...] = bias_init(freqs).astype(bias.value.dtype)
        self.class_weights = class_weights_from_frequencies(freqs)
        return freqs

    def fit(self, sequences, epochs=None, callback=None, progress=None, on_epoch=None):
        """
        Run ``epochs`` passes over ``sequences`` in a seeded random order.

        The cosine schedule spans the whole call: position ``i`` of
        ``epochs * len(sequences)`` gets ``cosine_lr(lr, i, total)``, skipped
        sequences included. ``callback(step, losses)`` sees every applied
        step, ``on_epoch(epoch, history)`` the steps of each finished epoch,
        and ``progress(iterable, epoch)`` may wrap the per-epoch order
        (e.g. tqdm).
        """
        if not sequences:
            raise ValueError("no training sequences")
        epochs = self.train_config.epochs if epochs is None else epochs
        total = epochs * len(sequences)
        position = 0
        history = []
        for epoch in range(epochs):
            order = self.rng.permutation(len(sequences))
            items = progress(order, epoch) if progress is not None else order
            epoch_history = []
            for index in items:
                lr = self.train_config.lr
                if self.train_config.cosine:
                    lr = cosine_lr(lr, position, total)
                position += 1
                losses = train_step(self.model, sequences[index], self.optimizer, self.loss_config,
                                    self.rng, lr=lr, bptt=self.train_config.bptt,
                                    class_weights=self.class_weights)
                if losses is None:
                    self.skipped += 1
                    continue
                epoch_history.append(losses)
                if callback is not None:
                    callback(self.step, losses)
            history.extend(epoch_history)
            if on_epoch is not None:
                on_epoch(epoch, epoch_history)
        return history

    def save(self, path, meta=None):
        meta = dict(meta or {})
        meta["step"] = self.step
        meta["rng"] = self.rng.bit_generator.state
        if self.class_weights is not None:
            meta["class_weights"] = [float(w) for w in self.class_weights]
        return save_checkpoint(path, self.model, self.optimizer, meta)

    def resume(self, path):
        meta = load_checkpoint(path, self.model, self.optimizer)
        if "rng" in meta:
            self.rng.bit_generator.state = meta["rng"]
        if "class_weights" in meta:
            self.class_weights = np.asarray(meta["class_weights"])
        return meta
