"""Per-epoch learning-rate schedules.

Closed-form schedules answer ``lr_for_epoch(e)``; the plateau scheduler is
driven by ``observe(val_accuracy)`` once per epoch. Every scheduler exposes
``current_lr`` for the epoch about to run; ``observe`` only advances state,
so finishing the last epoch of a one-cycle horizon is not an error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import ConfigError, NumericError, ScheduleExhaustedError

KINDS = ("constant", "rlrp", "cosine", "cosine-wr", "onecycle", "steplr")


@dataclass
class SchedConfig:
    kind: str = "rlrp"
    lr0: float = 0.01
    # steplr
    step_size: int = 30
    gamma: float = 0.1
    # cosine / cosine-wr; t_max <= 0 means "total epochs"
    t_max: int = 0
    eta_min: float = 0.0
    t0: int = 10
    t_mult: int = 2
    restore_best_on_restart: bool = False
    # onecycle; max_lr <= 0 means lr0
    max_lr: float = 0.01
    pct_start: float = 0.3
    div: float = 25.0
    final_div: float = 1e4
    # rlrp
    factor: float = 0.75
    patience: int = 5
    min_lr: float = 1e-6
    min_delta: float = 0.0

    def __post_init__(self):
        self.kind = normalize_kind(self.kind)
        if not self.lr0 > 0:
            raise ConfigError("lr0 must be positive")


def normalize_kind(kind: str) -> str:
    k = kind.strip().lower().replace("_", "-")
    aliases = {"cosinewr": "cosine-wr", "cosine+wr": "cosine-wr", "one-cycle": "onecycle",
               "onecyclelr": "onecycle", "step": "steplr", "plateau": "rlrp"}
    k = aliases.get(k, k)
    if k not in KINDS:
        raise ConfigError(f"unknown scheduler {kind!r}; choose from {', '.join(KINDS)}")
    return k


class Scheduler:
    kind = ""

    def __init__(self):
        self.epoch = 0

    @property
    def current_lr(self) -> float:
        return self.lr_for_epoch(self.epoch)

    def lr_for_epoch(self, epoch: int) -> float:
        raise NotImplementedError

    def observe(self, val_accuracy: float) -> None:
        """Record an epoch's metric and advance to the next epoch."""
        if not math.isfinite(val_accuracy):
            raise NumericError("non-finite validation metric")
        self.epoch += 1

    def is_restart(self, epoch: int) -> bool:
        return False

    def state_dict(self) -> dict:
        return {"kind": self.kind, "epoch": self.epoch}

    def load_state_dict(self, state: dict):
        self.epoch = int(state["epoch"])


class ConstantLR(Scheduler):
    kind = "constant"

    def __init__(self, lr0: float):
        super().__init__()
        self.lr0 = lr0

    def lr_for_epoch(self, epoch):
        return self.lr0


class StepLR(Scheduler):
    kind = "steplr"

    def __init__(self, lr0: float, step_size: int = 30, gamma: float = 0.1):
        super().__init__()
        self.lr0, self.step_size, self.gamma = lr0, step_size, gamma

    def lr_for_epoch(self, epoch):
        return self.lr0 * self.gamma ** (epoch // self.step_size)


def _cosine(eta_min, eta_max, pos, span):
    return eta_min + 0.5 * (eta_max - eta_min) * (1 + math.cos(math.pi * pos / span))


class CosineLR(Scheduler):
    kind = "cosine"

    def __init__(self, lr0: float, t_max: int, eta_min: float = 0.0):
        super().__init__()
        self.lr0, self.t_max, self.eta_min = lr0, t_max, eta_min

    def lr_for_epoch(self, epoch):
        return _cosine(self.eta_min, self.lr0, epoch, self.t_max)


class CosineWarmRestarts(Scheduler):
    """Cosine annealing whose cycle length starts at ``t0`` and grows by ``t_mult``."""

    kind = "cosine-wr"

    def __init__(self, lr0: float, t0: int = 10, t_mult: int = 2, eta_min: float = 0.0):
        super().__init__()
        if t0 < 1 or t_mult < 1:
            raise ConfigError("t0 and t_mult must be >= 1")
        self.lr0, self.t0, self.t_mult, self.eta_min = lr0, t0, t_mult, eta_min

    def cycle_position(self, epoch: int):
        """``(position within cycle, cycle length)``."""
        length = self.t0
        pos = epoch
        while pos >= length:
            pos -= length
            length *= self.t_mult
        return pos, length

    def lr_for_epoch(self, epoch):
        pos, length = self.cycle_position(epoch)
        return _cosine(self.eta_min, self.lr0, pos, length)

    def is_restart(self, epoch):
        return epoch > 0 and self.cycle_position(epoch)[0] == 0


class OneCycleLR(Scheduler):
    """Linear warm-up from ``max_lr/div`` to ``max_lr`` over ``pct_start`` of
    the horizon, then cosine decay to ``max_lr/final_div`` at the last epoch."""

    kind = "onecycle"

    def __init__(self, max_lr: float, total: int, pct_start: float = 0.3,
                 div: float = 25.0, final_div: float = 1e4):
        super().__init__()
        if total < 2:
            raise ConfigError("onecycle needs a horizon of at least 2 epochs")
        self.max_lr, self.total, self.pct_start = max_lr, total, pct_start
        self.div, self.final_div = div, final_div
        self.peak = pct_start * (total - 1)

    def lr_for_epoch(self, epoch):
        if epoch >= self.total:
            raise ScheduleExhaustedError(f"epoch {epoch} beyond one-cycle horizon {self.total}")
        start = self.max_lr / self.div
        end = self.max_lr / self.final_div
        if epoch <= self.peak:
            if self.peak == 0:
                return self.max_lr
            return start + (self.max_lr - start) * epoch / self.peak
        return _cosine(end, self.max_lr, epoch - self.peak, (self.total - 1) - self.peak)


class ReduceOnPlateau(Scheduler):
    """Multiply the lr by ``factor`` once validation accuracy has failed to
    beat its best by more than ``min_delta`` for ``patience`` epochs."""

    kind = "rlrp"

    def __init__(self, lr0: float, factor: float = 0.75, patience: int = 5,
                 min_lr: float = 1e-6, min_delta: float = 0.0):
        super().__init__()
        if not 0 < factor < 1:
            raise ConfigError("factor must lie in (0, 1)")
        self.lr = lr0
        self.factor, self.patience = factor, patience
        self.min_lr, self.min_delta = min_lr, min_delta
        self.best = -math.inf
        self.stagnant = 0
        self.reductions = 0

    @property
    def current_lr(self):
        return self.lr

    def lr_for_epoch(self, epoch):
        return self.lr

    def observe(self, val_accuracy) -> None:
        if not math.isfinite(val_accuracy):
            raise NumericError("non-finite validation metric")
        self.epoch += 1
        if val_accuracy > self.best + self.min_delta:
            self.best = val_accuracy
            self.stagnant = 0
        else:
            self.stagnant += 1
            if self.stagnant >= self.patience:
                new = max(self.lr * self.factor, self.min_lr)
                if new < self.lr:
                    self.reductions += 1
                self.lr = new
                self.stagnant = 0

    def state_dict(self):
        return {"kind": self.kind, "epoch": self.epoch, "lr": self.lr, "best": self.best,
                "stagnant": self.stagnant, "reductions": self.reductions}

    def load_state_dict(self, state):
        super().load_state_dict(state)
        self.lr = float(state["lr"])
        self.best = float(state["best"])
        self.stagnant = int(state["stagnant"])
        self.reductions = int(state["reductions"])


def make_scheduler(cfg: SchedConfig, total_epochs: int) -> Scheduler:
    kind = cfg.kind
    if kind == "constant":
        return ConstantLR(cfg.lr0)
    if kind == "steplr":
        return StepLR(cfg.lr0, cfg.step_size, cfg.gamma)
    if kind == "cosine":
        return CosineLR(cfg.lr0, cfg.t_max if cfg.t_max > 0 else total_epochs, cfg.eta_min)
    if kind == "cosine-wr":
        return CosineWarmRestarts(cfg.lr0, cfg.t0, cfg.t_mult, cfg.eta_min)
    if kind == "onecycle":
        max_lr = cfg.max_lr if cfg.max_lr > 0 else cfg.lr0
        return OneCycleLR(max_lr, total_epochs, cfg.pct_start, cfg.div, cfg.final_div)
    if kind == "rlrp":
        return ReduceOnPlateau(cfg.lr0, cfg.factor, cfg.patience, cfg.min_lr, cfg.min_delta)
    raise ConfigError(kind)
