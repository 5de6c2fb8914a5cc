"""DINO self-distillation: crops, sharpening, centering, EMA teacher.

The student sees every crop; the teacher sees only global crops, with no
gradient path (its logits enter the loss as constants). Teacher weights move
exclusively by exponential moving average of the student, and teacher logits
are centered by a momentum-averaged batch mean before low-temperature
sharpening, the standard pair of collapse guards.

SAR constraint: augmentation is horizontal flipping and crop/resize only; no
intensity or color transform exists anywhere in this module.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, NumericError, ParameterError
from .interp import resize_bilinear
from .params import ParamStore, adam_step, ema_blend
from .tiles import Tile
from .vit import VitConfig, dino_head_forward, forward_graph, init_vit_params

__all__ = [
    "DinoConfig",
    "CenterState",
    "BatchLog",
    "PretrainResult",
    "make_crops",
    "teacher_temp_schedule",
    "teacher_probs",
    "dino_loss",
    "update_center",
    "ema_update",
    "pretrain",
    "write_history_csv",
]

HISTORY_HEADER = ["epoch", "batch", "loss", "teacher_entropy", "teacher_temp"]


@dataclass(frozen=True)
class DinoConfig:
    """Pre-training hyperparameters.

    The gssic/s1grd presets carry the published coherence/amplitude settings;
    the class defaults are desk-scale values sized for minute-long runs.
    """

    teacher_temp: float = 0.04
    student_temp: float = 0.1
    warmup_teacher_temp: float = 0.04
    warmup_teacher_temp_epochs: int = 0
    center_momentum: float = 0.9
    ema_momentum: float = 0.996
    learning_rate: float = 3e-4
    n_global_crops: int = 2
    n_local_crops: int = 4
    global_crop_scale: tuple = (0.5, 1.0)
    local_crop_scale: tuple = (0.2, 0.5)
    global_size: int = 32
    local_size: int = 16
    epochs: int = 10
    batch_size: int = 16
    seed: int = 0

    def __post_init__(self):
        for name in ("teacher_temp", "student_temp", "warmup_teacher_temp"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("center_momentum", "ema_momentum"):
            if not (0.0 <= getattr(self, name) < 1.0):
                raise ConfigError(f"{name} must lie in [0, 1)")
        for name in ("global_crop_scale", "local_crop_scale"):
            lo, hi = getattr(self, name)
            if not (0.0 < lo <= hi <= 1.0):
                raise ConfigError(f"{name} must be a range within (0, 1], got {(lo, hi)}")
        if self.global_size < self.local_size:
            raise ConfigError("global crop output must be at least as large as local")

    @property
    def n_crops(self) -> int:
        return self.n_global_crops + self.n_local_crops

    @staticmethod
    def gssic_preset(**overrides) -> "DinoConfig":
        """Published coherence-data settings (constant 0.04 teacher temp)."""
        cfg = DinoConfig(
            learning_rate=1e-5,
            teacher_temp=0.04,
            student_temp=0.1,
            warmup_teacher_temp=0.04,
            warmup_teacher_temp_epochs=10,
            center_momentum=0.90,
        )
        return replace(cfg, **overrides) if overrides else cfg

    @staticmethod
    def s1grd_preset(**overrides) -> "DinoConfig":
        """Published amplitude-data settings (0.01 -> 0.001 over 5 epochs)."""
        cfg = DinoConfig(
            learning_rate=1e-6,
            teacher_temp=0.001,
            student_temp=0.03,
            warmup_teacher_temp=0.01,
            warmup_teacher_temp_epochs=5,
            center_momentum=0.99,
        )
        return replace(cfg, **overrides) if overrides else cfg


@dataclass
class CenterState:
    """Momentum-averaged mean of teacher logits, zero-initialized."""

    center: np.ndarray

    @staticmethod
    def zeros(k: int) -> "CenterState":
        return CenterState(np.zeros(k, dtype=np.float32))


def make_crops(tile: Tile, cfg: DinoConfig, rng: np.random.Generator, flip_prob: float = 0.5):
    """Random square crops of one tile, global crops first.

    Scale ranges are area fractions; the crop side is round(S * sqrt(scale)).
    Each crop is independently horizontally flipped with ``flip_prob`` and
    bilinearly resized to the global/local output size. Pixel values are
    never altered by anything except crop, flip, and resize.
    """
    s = tile.height
    if tile.width != s:
        raise DataError(f"tile {tile.id}: crops need square tiles, got {s}x{tile.width}")
    plan = [(cfg.global_crop_scale, cfg.global_size)] * cfg.n_global_crops
    plan += [(cfg.local_crop_scale, cfg.local_size)] * cfg.n_local_crops
    crops = []
    for (lo, hi), out_size in plan:
        scale = rng.uniform(lo, hi)
        side = max(1, round(s * math.sqrt(scale)))
        if side > s:
            raise ParameterError(f"crop side {side} exceeds tile side {s}")
        top = int(rng.integers(0, s - side + 1))
        left = int(rng.integers(0, s - side + 1))
        patch = tile.data[:, top : top + side, left : left + side]
        if rng.random() < flip_prob:
            patch = patch[:, :, ::-1]
        crops.append(resize_bilinear(np.ascontiguousarray(patch), out_size, out_size))
    return crops


def teacher_temp_schedule(epoch: float, cfg: DinoConfig) -> float:
    """Linear warm-up from warmup_teacher_temp to teacher_temp, then constant."""
    if epoch < 0:
        raise ParameterError(f"epoch must be >= 0, got {epoch}")
    warm = cfg.warmup_teacher_temp_epochs
    if warm <= 0 or epoch >= warm:
        return cfg.teacher_temp
    frac = epoch / warm
    return cfg.warmup_teacher_temp + frac * (cfg.teacher_temp - cfg.warmup_teacher_temp)


def teacher_probs(teacher_logits: np.ndarray, center: np.ndarray, teacher_temp: float):
    """Centered, sharpened teacher distribution (plain array, no gradient)."""
    return T.softmax_np(np.asarray(teacher_logits) - center, teacher_temp, axis=-1)


def _entropy(p: np.ndarray) -> float:
    """Mean Shannon entropy (nats) of the rows of p."""
    q = np.clip(p, 1e-12, None)
    return float(-(q * np.log(q)).sum(axis=-1).mean())


def dino_loss(
    student_logits,
    teacher_logits,
    center: np.ndarray,
    student_temp: float,
    teacher_temp: float,
) -> T.TensorNode:
    """Cross-entropy between sharpened teacher and soft student over crop pairs.

    L = mean over ordered pairs (global crop g, student crop v), v != g, of
    H(P_t(g), P_s(v)) with P_t = softmax((t_g - center)/tau_t) held constant
    and P_s = softmax(s_v / tau_s). ``student_logits`` covers all crops in
    order (globals first); ``teacher_logits`` only the global crops. Entries
    may be (K,) vectors or (B, K) batches.
    """
    if len(student_logits) < 2:
        raise ConfigError("dino_loss needs at least two crops to form a pair")
    student = [s if isinstance(s, T.TensorNode) else T.as_node(np.atleast_2d(s)) for s in student_logits]
    student = [T.reshape(s, (1, -1)) if s.values.ndim == 1 else s for s in student]
    teachers = [np.atleast_2d(np.asarray(t)) for t in teacher_logits]
    if len(teachers) > len(student):
        raise ConfigError("more teacher (global) crops than student crops")

    total = None
    n_pairs = 0
    for g, t_logit in enumerate(teachers):
        p_t = teacher_probs(t_logit, center, teacher_temp)
        for v, s_node in enumerate(student):
            if v == g:
                continue
            log_p_s = T.log_softmax(s_node, tau=student_temp, axis=-1)
            ce = T.mul(T.tensor_mean(T.tensor_sum(T.mul(log_p_s, p_t), axis=-1)), -1.0)
            total = ce if total is None else total + ce
            n_pairs += 1
    return T.mul(total, 1.0 / n_pairs)


def update_center(state: CenterState, teacher_logits_batch: np.ndarray, momentum: float) -> CenterState:
    """center <- m * center + (1 - m) * batch_mean(teacher_logits)."""
    batch = np.atleast_2d(np.asarray(teacher_logits_batch))
    if batch.size == 0:
        raise ParameterError("update_center needs a non-empty batch")
    mean = batch.mean(axis=0)
    return CenterState(momentum * state.center + (1.0 - momentum) * mean.astype(state.center.dtype))


def ema_update(teacher: ParamStore, student: ParamStore, momentum: float) -> ParamStore:
    """Teacher follows student: theta_t <- m * theta_t + (1-m) * theta_s."""
    ema_blend(teacher, student, momentum)
    return teacher


@dataclass
class BatchLog:
    epoch: int
    batch: int
    loss: float
    teacher_entropy: float
    teacher_temp: float


@dataclass
class PretrainResult:
    student: ParamStore
    teacher: ParamStore
    center: CenterState
    history: list = field(default_factory=list)

    def epoch_mean_loss(self, epoch: int) -> float:
        losses = [row.loss for row in self.history if row.epoch == epoch]
        return float(np.mean(losses))


def pretrain(
    tiles: list[Tile],
    vit_cfg: VitConfig,
    cfg: DinoConfig,
    init_student: ParamStore | None = None,
    on_batch=None,
) -> PretrainResult:
    """Self-distillation over unlabeled tiles; labels are never read.

    Per batch: multi-crop, student forward on all crops, teacher forward on
    global crops (constants), cross-entropy, backward, Adam, EMA, center
    update. The teacher starts as an exact copy of the student. Every random
    choice derives from (seed, epoch, tile index), so the loss history is
    bit-reproducible regardless of how crop work would be scheduled.

    ``on_batch(log, student, teacher)`` fires after each optimizer/EMA step;
    verification harnesses use it to audit the teacher update rule.
    """
    if not tiles:
        raise DataError("pretrain needs a non-empty dataset")
    student = init_student.copy() if init_student is not None else init_vit_params(vit_cfg, seed=cfg.seed)
    teacher = student.copy()
    center = CenterState.zeros(vit_cfg.head_output_dim)
    history: list[BatchLog] = []

    n = len(tiles)
    for epoch in range(cfg.epochs):
        tau_t = teacher_temp_schedule(epoch, cfg)
        order = np.random.default_rng([cfg.seed, 1 + epoch]).permutation(n)
        for batch_no, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            crops = [
                make_crops(tiles[i], cfg, np.random.default_rng([cfg.seed, 7, epoch, int(i)]))
                for i in idx
            ]
            # crop-major stacking: crop v of every tile is one contiguous slab
            globals_arr = np.stack(
                [crops[j][v] for v in range(cfg.n_global_crops) for j in range(len(idx))]
            )
            locals_arr = (
                np.stack(
                    [
                        crops[j][cfg.n_global_crops + v]
                        for v in range(cfg.n_local_crops)
                        for j in range(len(idx))
                    ]
                )
                if cfg.n_local_crops
                else None
            )

            b = len(idx)
            s_global = dino_head_forward(forward_graph(globals_arr, student, vit_cfg).class_node, student)
            student_logits = [s_global[v * b : (v + 1) * b, :] for v in range(cfg.n_global_crops)]
            if locals_arr is not None:
                s_local = dino_head_forward(forward_graph(locals_arr, student, vit_cfg).class_node, student)
                student_logits += [s_local[v * b : (v + 1) * b, :] for v in range(cfg.n_local_crops)]

            t_det = teacher.detached()
            t_logits_all = dino_head_forward(
                forward_graph(globals_arr, t_det, vit_cfg).class_node, t_det
            ).values
            teacher_logits = [t_logits_all[v * b : (v + 1) * b] for v in range(cfg.n_global_crops)]

            loss = dino_loss(student_logits, teacher_logits, center.center, cfg.student_temp, tau_t)
            loss_val = float(loss.values)
            if not math.isfinite(loss_val):
                raise NumericError(
                    f"non-finite loss at epoch {epoch} batch {batch_no} "
                    f"(student_temp={cfg.student_temp}, teacher_temp={tau_t})"
                )
            # entropy of the very distributions the loss matched (pre-update center)
            entropy = _entropy(teacher_probs(t_logits_all, center.center, tau_t))

            loss.backward()
            adam_step(student, lr=cfg.learning_rate)
            ema_update(teacher, student, cfg.ema_momentum)
            center = update_center(center, t_logits_all, cfg.center_momentum)
            log = BatchLog(epoch, batch_no, loss_val, entropy, tau_t)
            history.append(log)
            if on_batch is not None:
                on_batch(log, student, teacher)

    return PretrainResult(student, teacher, center, history)


def write_history_csv(history, path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(HISTORY_HEADER)
        for row in history:
            writer.writerow(
                [row.epoch, row.batch, repr(row.loss), repr(row.teacher_entropy), repr(row.teacher_temp)]
            )
