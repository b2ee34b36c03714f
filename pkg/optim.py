"""AdamW with decoupled weight decay, warmup + cosine schedule, layer-wise decay and EMA."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from config import OptimizerConfig, ScheduleConfig
from errors import OptimizerConfigError
from model import layer_id_for
from numerics import Parameter, Tensor

logger = logging.getLogger(__name__)

NO_DECAY_NAMES = ("pos_embed", "cls_token", "mask_token")

OPT_M_PREFIX = "opt.m."
OPT_V_PREFIX = "opt.v."
EMA_PREFIX = "ema."


def is_no_decay(name: str, param: Tensor) -> bool:
    """Biases, norm gains (every 1-D tensor), position embeddings, cls and mask tokens.

    Matches on the last name segment's suffix, so ``decoder_pos_embed`` counts too.
    """
    return param.ndim <= 1 or name.rsplit(".", 1)[-1].endswith(NO_DECAY_NAMES)


@dataclass
class ParamGroup:
    """Parameters sharing a weight decay and a learning-rate multiplier.

    Attributes:
        params: (name, parameter) pairs.
        weight_decay: Decoupled decay coefficient.
        lr_scale: Multiplier applied to the scheduled learning rate.
        decay: Whether this group belongs to the decay set.
        layer_id: Depth index used for ``lr_scale``.
    """

    params: list[tuple[str, Parameter]]
    weight_decay: float
    lr_scale: float = 1.0
    decay: bool = True
    layer_id: int = 0


def check_groups(groups: Sequence[ParamGroup]) -> None:
    """Reject weight decay on no-decay parameters.

    Raises:
        OptimizerConfigError: If any no-decay parameter sits in a group with wd > 0.
    """
    for group in groups:
        if group.weight_decay <= 0:
            continue
        offenders = [name for name, p in group.params if is_no_decay(name, p)]
        if offenders:
            raise OptimizerConfigError(
                f"weight decay {group.weight_decay} requested for no-decay parameters: {offenders[:5]}"
            )


def layerwise_lr(base_lr: float, layer_index: int, num_layers: int, decay: float) -> float:
    """``base_lr · decay^(N + 1 − layer_index)``; the head (index N+1) keeps ``base_lr``."""
    return base_lr * decay ** (num_layers + 1 - layer_index)


def build_param_groups(
    named_params: Iterable[tuple[str, Parameter]],
    cfg: OptimizerConfig,
    num_layers: int = 0,
) -> list[ParamGroup]:
    """Split parameters by (decay set, depth) for AdamW.

    With ``cfg.layer_decay == 1`` every depth shares one multiplier, so only
    the decay/no-decay split remains.
    """
    buckets: dict[tuple[bool, int], list[tuple[str, Parameter]]] = {}
    for name, p in named_params:
        decay = not is_no_decay(name, p)
        layer = layer_id_for(name, num_layers) if cfg.layer_decay != 1.0 else num_layers + 1
        buckets.setdefault((decay, layer), []).append((name, p))
    groups = [
        ParamGroup(
            params=params,
            weight_decay=cfg.weight_decay if decay else 0.0,
            lr_scale=layerwise_lr(1.0, layer, num_layers, cfg.layer_decay),
            decay=decay,
            layer_id=layer,
        )
        for (decay, layer), params in sorted(buckets.items(), key=lambda kv: (kv[0][1], not kv[0][0]))
    ]
    logger.debug("built %d parameter groups over %d layers", len(groups), num_layers)
    return groups


@dataclass
class AdamWState:
    """First/second moments keyed by parameter name, plus the step count."""

    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(
    groups: Sequence[ParamGroup],
    state: AdamWState,
    cfg: OptimizerConfig,
    lr: float,
) -> AdamWState:
    """One AdamW update, in place, reading gradients from ``param.grad``.

    Decay is decoupled: ``p ← p·(1 − lr·wd)`` before the bias-corrected
    Adam step. Parameters without a gradient are treated as having zero
    gradient.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    for group in groups:
        group_lr = lr * group.lr_scale
        for name, p in group.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if g.shape != p.shape:
                raise OptimizerConfigError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
            if group.weight_decay:
                p.data *= 1.0 - group_lr * group.weight_decay
            m = state.m.setdefault(name, np.zeros_like(p.data))
            v = state.v.setdefault(name, np.zeros_like(p.data))
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            p.data -= (group_lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)).astype(p.data.dtype, copy=False)
    return state


class AdamW:
    """Optimizer bound to one model's parameters."""

    def __init__(
        self,
        named_params: Iterable[tuple[str, Parameter]],
        cfg: OptimizerConfig,
        num_layers: int = 0,
        groups: Optional[list[ParamGroup]] = None,
    ):
        self.cfg = cfg
        self.groups = groups if groups is not None else build_param_groups(named_params, cfg, num_layers)
        check_groups(self.groups)
        self.state = AdamWState()

    @property
    def params(self) -> list[tuple[str, Parameter]]:
        return [item for group in self.groups for item in group.params]

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def step(self, lr: float) -> None:
        adamw_step(self.groups, self.state, self.cfg, lr)

    def state_tensors(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for name, _ in self.params:
            if name in self.state.m:
                out[OPT_M_PREFIX + name] = self.state.m[name]
                out[OPT_V_PREFIX + name] = self.state.v[name]
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray], step: int) -> None:
        self.state = AdamWState(step=step)
        for name, p in self.params:
            if OPT_M_PREFIX + name in tensors:
                self.state.m[name] = np.array(tensors[OPT_M_PREFIX + name], dtype=p.data.dtype)
                self.state.v[name] = np.array(tensors[OPT_V_PREFIX + name], dtype=p.data.dtype)


def lr_at(step: int, sched: ScheduleConfig, peak: float) -> float:
    """Learning rate for a global step.

    Linear from 0 at step 0 to ``peak`` at the last warmup step boundary,
    then a half cosine reaching ``min_lr`` at the final step.
    """
    warmup = sched.warmup_epochs * sched.steps_per_epoch
    total = sched.total_epochs * sched.steps_per_epoch
    if step < warmup:
        return peak * step / warmup
    span = max(1, total - 1 - warmup)
    progress = min(max((step - warmup) / span, 0.0), 1.0)
    floor = min(sched.min_lr, peak)
    return floor + (peak - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class EMAState:
    """Exponential moving average of parameters."""

    decay: float = 0.9999
    shadow: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_params(cls, named_params: Iterable[tuple[str, Tensor]], decay: float = 0.9999) -> "EMAState":
        return cls(decay=decay, shadow={name: np.array(p.data, copy=True) for name, p in named_params})

    def state_tensors(self) -> dict[str, np.ndarray]:
        return {EMA_PREFIX + name: value for name, value in self.shadow.items()}

    @classmethod
    def from_tensors(cls, tensors: dict[str, np.ndarray], decay: float) -> "EMAState":
        shadow = {k[len(EMA_PREFIX) :]: np.array(v) for k, v in tensors.items() if k.startswith(EMA_PREFIX)}
        return cls(decay=decay, shadow=shadow)


def ema_update(
    ema: EMAState, params: Union[dict[str, np.ndarray], Iterable[tuple[str, Union[Tensor, np.ndarray]]]]
) -> EMAState:
    """``shadow ← decay·shadow + (1 − decay)·param``; new names start at the current value."""
    items = params.items() if isinstance(params, dict) else params
    for name, p in items:
        value = p.data if isinstance(p, Tensor) else np.asarray(p)
        if name not in ema.shadow:
            ema.shadow[name] = np.array(value, copy=True)
            continue
        shadow = ema.shadow[name]
        shadow *= ema.decay
        shadow += (1.0 - ema.decay) * value
    return ema
