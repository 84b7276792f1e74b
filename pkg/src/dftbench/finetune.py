"""Pretraining and fine-tuning harness: parameter selection, masked loss, AdamW."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np

from . import tensor as tt
from .model import DiT, adapter_parameter_count, wrap_modulation
from .scenes import SceneSample
from .schedule import ProgressiveController, build_schedule, q_sample
from .ssei import init_condition_embeddings
from .tensor import Tensor

log = logging.getLogger(__name__)

MODES = ("pretrain_full", "finetune_full", "finetune_bias_only",
         "finetune_lowrank_additive", "finetune_modulation")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    mode: str = "finetune_modulation"
    steps: int = 500
    batch_size: int = 32
    learning_rate: float = 1e-4
    weight_decay: float = 0.0
    seed: int = 0
    tau: int = 0
    osl_lambda: float = 1.0
    schedule: str = "linear"
    scos_power: float = 2
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.osl_lambda < 0:
            raise ValueError("osl_lambda must be >= 0")
        if self.schedule not in ("linear", "cos", "scos"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.tau < 0:
            raise ValueError("tau must be >= 0")

    @property
    def progressive(self) -> bool:
        return self.schedule == "scos" and self.tau > 0

    @property
    def final_power(self) -> float:
        """Scos power of the last training step; sampling uses this schedule."""
        return 2 if self.progressive else self.scos_power

    def sampling_schedule(self, T: int):
        return build_schedule(self.schedule, T, s=self.final_power)

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


# -- object-sensitive loss --------------------------------------------------

def _box_tuple(b):
    return b.as_tuple() if hasattr(b, "as_tuple") else tuple(int(v) for v in b)


def build_mask(boxes, image_shape: Sequence[int], lam: float = 1.0) -> np.ndarray:
    """(H, W) weights: 1 outside every box, 1 + lam inside any box (no stacking)."""
    H, W = int(image_shape[0]), int(image_shape[1])
    m = np.ones((H, W), dtype=np.float32)
    for b in boxes:
        x, y, w, h = _box_tuple(b)
        if w <= 0 or h <= 0 or x < 0 or y < 0 or x + w > W or y + h > H:
            raise ValueError(f"box {(x, y, w, h)} outside {W}x{H} image")
        m[y:y + h, x:x + w] = 1.0 + lam
    return m


def _expand_mask(mask: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Broadcast a mask without channel axis (or with a singleton batch) to ``shape``."""
    mask = np.asarray(mask)
    if mask.shape == shape:
        return mask
    if mask.shape[-2:] == shape[-3:-1]:
        mask = mask[..., None]
    try:
        return np.broadcast_to(mask, shape)
    except ValueError:
        raise ValueError(f"mask shape {mask.shape} incompatible with {shape}") from None


def osl_loss(eps_true: np.ndarray, eps_pred: np.ndarray, mask: np.ndarray) -> float:
    """mean((mask * (eps_true - eps_pred))**2); mask may omit the channel axis."""
    eps_true, eps_pred = np.asarray(eps_true), np.asarray(eps_pred)
    if eps_true.shape != eps_pred.shape:
        raise ValueError(f"shape mismatch {eps_true.shape} vs {eps_pred.shape}")
    r = _expand_mask(mask, eps_true.shape) * (eps_true - eps_pred)
    return float(np.mean(r * r))


def osl_loss_tensor(eps_true: np.ndarray, eps_pred: Tensor, mask: np.ndarray) -> Tensor:
    if tuple(eps_true.shape) != eps_pred.shape:
        raise ValueError(f"shape mismatch {eps_true.shape} vs {eps_pred.shape}")
    m = Tensor(np.ascontiguousarray(_expand_mask(mask, eps_pred.shape), dtype=eps_pred.dtype))
    r = (Tensor(eps_true.astype(eps_pred.dtype, copy=False)) - eps_pred) * m
    return tt.mean(r * r)


# -- optimizer --------------------------------------------------------------

@dataclass
class AdamWState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray | None], state: AdamWState,
               lr: float, wd: float = 0.0, betas=(0.9, 0.999), eps: float = 1e-8) -> None:
    """Decoupled-weight-decay Adam, in place on ``params``."""
    state.step += 1
    b1, b2 = betas
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        dt = p.data.dtype.type
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = dt(b1) * m + dt(1 - b1) * g
        v = dt(b2) * v + dt(1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        new = p.data
        if wd:
            new = new * dt(1.0 - lr * wd)
        new = new - dt(lr) * (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(eps))
        p.data = new.astype(p.data.dtype, copy=False)


# -- parameter selection ------------------------------------------------------

def _new_embedding_rows(model: DiT) -> dict[str, Tensor]:
    return {f"embed.extra{i}": t for i, t in enumerate(model.embed.extra)}


def select_trainable(model: DiT, mode: str) -> dict[str, Tensor]:
    """Mark the parameter subset for ``mode`` as trainable and freeze the rest."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    named = dict(model.named_parameters())
    if mode in ("pretrain_full", "finetune_full"):
        chosen = {k: v for k, v in named.items()
                  if not k.rsplit(".", 1)[-1] in ("gamma_out", "gamma_in", "b_out", "b_in")}
    elif mode == "finetune_bias_only":
        chosen = {k: v for k, v in named.items() if k.endswith(".bias") or k.endswith(".gain")}
        chosen.update(_new_embedding_rows(model))
    elif mode == "finetune_lowrank_additive":
        if not model.wrapped_layers():
            raise ValueError("finetune_lowrank_additive needs wrapped layers")
        chosen = {k: v for k, v in named.items() if k.endswith(".b_out") or k.endswith(".b_in")}
        chosen.update(_new_embedding_rows(model))
    else:
        if not model.wrapped_layers():
            raise ValueError("finetune_modulation needs wrapped layers")
        chosen = {k: v for k, v in named.items()
                  if k.rsplit(".", 1)[-1] in ("gamma_out", "gamma_in", "b_out", "b_in")}
        chosen.update(_new_embedding_rows(model))
    for k, p in named.items():
        p.requires_grad = k in chosen
    return chosen


def trainable_fraction(model: DiT, trainable: dict[str, Tensor]) -> float:
    total = sum(p.size for p in model.parameters())
    return sum(p.size for p in trainable.values()) / total


def expected_trainable_count(model: DiT, mode: str) -> int:
    """Closed-form count of trainable parameters (adapter modes)."""
    extra = sum(t.size for t in model.embed.extra)
    if mode == "finetune_modulation":
        return adapter_parameter_count(model) + extra
    if mode == "finetune_lowrank_additive":
        return adapter_parameter_count(model) // 2 + extra
    raise ValueError(mode)


def prepare_finetune(model: DiT, mode: str, assignments: Sequence[int] | None = None,
                     rank: int | None = None) -> dict[str, Tensor]:
    """Expand the condition table (once), wrap adapters if needed, select parameters."""
    if assignments is not None and not model.embed.extra:
        init_condition_embeddings(model.embed, list(assignments))
    if mode in ("finetune_lowrank_additive", "finetune_modulation"):
        wrap_modulation(model, rank)
    return select_trainable(model, mode)


# -- training loop -------------------------------------------------------------

@dataclass
class TraceRow:
    step: int
    loss: float
    schedule_power: float


@dataclass
class TrainResult:
    model: DiT
    trace: list[TraceRow]
    trainable: dict[str, Tensor]
    seconds: float

    @property
    def losses(self) -> np.ndarray:
        return np.array([r.loss for r in self.trace])


def to_model_space(images: np.ndarray) -> np.ndarray:
    """[0, 1] pixels -> [-1, 1] diffusion space."""
    return images * 2.0 - 1.0


def from_model_space(x: np.ndarray) -> np.ndarray:
    return np.clip((x + 1.0) / 2.0, 0.0, 1.0)


class _ScheduleCache:
    def __init__(self, cfg: TrainConfig, T: int):
        self.cfg, self.T = cfg, T
        self.ctrl = ProgressiveController(cfg.tau) if cfg.progressive else None
        self._cache: dict[float, object] = {}

    def power(self, step: int) -> float:
        if self.cfg.schedule == "linear":
            return 0
        if self.ctrl is not None:
            return self.ctrl.power(step)
        return self.cfg.scos_power

    def get(self, power: float):
        if power not in self._cache:
            # a power change invalidates every earlier table
            self._cache = {power: build_schedule(self.cfg.schedule, self.T, s=power if power else 2)}
        return self._cache[power]


def train(model: DiT, dataset: Sequence[SceneSample], cfg: TrainConfig,
          label_offset: int = 0, trainable: dict[str, Tensor] | None = None,
          log_every: int = 0) -> TrainResult:
    """Denoising training with the object-sensitive loss.

    Per step: draw a batch, t ~ U{1..T}, eps ~ N(0, I), noise with the
    schedule active at that step, and take one AdamW step on the selected
    parameters. Deterministic given ``cfg.seed``.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    if trainable is None:
        trainable = select_trainable(model, cfg.mode)
    if not trainable:
        raise ValueError("no trainable parameters selected")
    T = model.cfg.T
    X = to_model_space(np.stack([s.image for s in dataset]).astype(np.float64))
    shape = X.shape[1:3]
    masks = np.stack([build_mask(s.boxes, shape, cfg.osl_lambda) for s in dataset])
    labels = np.array([s.condition_id for s in dataset], dtype=np.int64) + label_offset
    rng = np.random.default_rng(cfg.seed)
    scheds = _ScheduleCache(cfg, T)
    state = AdamWState()
    trace: list[TraceRow] = []
    start = time.perf_counter()
    for step in range(cfg.steps):
        idx = rng.integers(0, len(dataset), cfg.batch_size)
        t = rng.integers(1, T + 1, cfg.batch_size)
        eps = rng.standard_normal(X[idx].shape)
        power = scheds.power(step)
        xt = q_sample(X[idx], t, eps, scheds.get(power)).astype(model.dtype)
        try:
            pred = model(xt, t, labels[idx])
            loss = osl_loss_tensor(eps.astype(model.dtype), pred, masks[idx])
            for p in trainable.values():
                p.grad = None
            loss.backward()
        except tt.NonFiniteError as e:
            raise TrainingError(f"non-finite value at step {step} (schedule power {power}): {e}") from e
        lv = float(loss.data)
        if not np.isfinite(lv):
            raise TrainingError(f"non-finite loss at step {step} (schedule power {power})")
        adamw_step(trainable, {k: p.grad for k, p in trainable.items()}, state,
                   cfg.learning_rate, cfg.weight_decay, cfg.adam_betas, cfg.adam_eps)
        trace.append(TraceRow(step, lv, power))
        if log_every and (step + 1) % log_every == 0:
            recent = np.mean([r.loss for r in trace[-log_every:]])
            log.info("step %d/%d loss %.4f power %s", step + 1, cfg.steps, recent, power)
    for p in trainable.values():
        p.grad = None
    return TrainResult(model, trace, trainable, time.perf_counter() - start)


def write_trace(trace: Sequence[TraceRow], path) -> None:
    with open(path, "w") as fh:
        fh.write("step,loss,schedule_power\n")
        for r in trace:
            fh.write(f"{r.step},{r.loss:.8g},{r.schedule_power:g}\n")


def moving_average(x: np.ndarray, window: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if len(x) < window:
        return np.array([x.mean()])
    c = np.cumsum(np.insert(x, 0, 0.0))
    return (c[window:] - c[:-window]) / window
