"""First-order optimizers updating a parameter registry in place.

All variants use the L2-coupled effective gradient ``g + weight_decay * theta``.
Momentum buffers exist only for the SGD family.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Dict, Optional

import numpy as np

from .errors import NumericError, RegistryError, StateError

KINDS = ("sgd", "sgd-nesterov", "asgd", "adam", "adam-amsgrad", "adadelta", "adagrad")

DEFAULT_EPS = {"adam": 1e-8, "adam-amsgrad": 1e-8, "adagrad": 1e-10, "adadelta": 1e-6}

_BUFFERS = {
    "sgd": ("velocity",),
    "sgd-nesterov": ("velocity",),
    "asgd": ("velocity", "average"),
    "adam": ("m", "v"),
    "adam-amsgrad": ("m", "v", "v_max"),
    "adadelta": ("square_avg", "delta_avg"),
    "adagrad": ("sum_sq",),
}


@dataclass
class HyperParams:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: Optional[float] = None
    rho: float = 0.9
    t0: int = 0

    def __post_init__(self):
        # lr 0 is allowed so a step can be a checked no-op
        if not self.lr >= 0:
            raise ValueError("lr must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")

    def eps_for(self, kind: str) -> float:
        return self.eps if self.eps is not None else DEFAULT_EPS.get(kind, 0.0)


def normalize_kind(kind: str) -> str:
    k = kind.strip().lower().replace("_", "-")
    aliases = {"nesterov": "sgd-nesterov", "amsgrad": "adam-amsgrad", "sgd-nag": "sgd-nesterov"}
    k = aliases.get(k, k)
    if k not in KINDS:
        raise ValueError(f"unknown optimizer {kind!r}; choose from {', '.join(KINDS)}")
    return k


class Optimizer:
    """One of the seven update rules, keyed by ``kind``.

    >>> opt = Optimizer("sgd", HyperParams(lr=0.1, weight_decay=0.0))
    >>> p = {"w": np.array([1.0])}
    >>> opt.step(p, {"w": np.array([1.0])}); float(p["w"][0])
    0.9
    """

    def __init__(self, kind: str, hp: Optional[HyperParams] = None):
        self.kind = normalize_kind(kind)
        self.hp = hp if hp is not None else HyperParams()
        self.step_count = 0
        self.buffers: Dict[str, Dict[str, np.ndarray]] = {b: {} for b in _BUFFERS[self.kind]}
        self._swapped: Optional[Dict[str, np.ndarray]] = None

    @property
    def lr(self) -> float:
        return self.hp.lr

    @lr.setter
    def lr(self, value: float):
        self.hp.lr = float(value)

    def _check(self, params, grads):
        missing = set(params) - set(grads)
        extra = set(grads) - set(params)
        if missing or extra:
            raise RegistryError(f"gradient registry mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, g in grads.items():
            if g.shape != params[name].shape:
                raise RegistryError(f"gradient for {name} has shape {g.shape}, expected {params[name].shape}")
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for {name}")

    def _buf(self, which: str, name: str, like: np.ndarray, init=None) -> np.ndarray:
        store = self.buffers[which]
        if name not in store:
            store[name] = np.zeros_like(like) if init is None else init.copy()
        return store[name]

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> None:
        self._check(params, grads)
        self.step_count += 1
        t = self.step_count
        hp = self.hp
        kind = self.kind
        lr = hp.lr
        eps = hp.eps_for(kind)
        for name, theta in params.items():
            g = grads[name]
            if hp.weight_decay:
                g = g + hp.weight_decay * theta
            if kind in ("sgd", "sgd-nesterov", "asgd"):
                v = self._buf("velocity", name, theta)
                v *= hp.momentum
                v += g
                if kind == "sgd-nesterov":
                    theta -= lr * (g + hp.momentum * v)
                else:
                    theta -= lr * v
                if kind == "asgd":
                    avg = self._buf("average", name, theta, init=theta)
                    n = t - hp.t0
                    if n <= 0:
                        avg[...] = theta
                    else:
                        avg += (theta - avg) / n
            elif kind in ("adam", "adam-amsgrad"):
                m = self._buf("m", name, theta)
                v = self._buf("v", name, theta)
                m *= hp.beta1
                m += (1 - hp.beta1) * g
                v *= hp.beta2
                v += (1 - hp.beta2) * g * g
                if kind == "adam-amsgrad":
                    vmax = self._buf("v_max", name, theta)
                    np.maximum(vmax, v, out=vmax)
                    v = vmax
                m_hat = m / (1 - hp.beta1 ** t)
                v_hat = v / (1 - hp.beta2 ** t)
                theta -= lr * m_hat / (np.sqrt(v_hat) + eps)
            elif kind == "adagrad":
                s = self._buf("sum_sq", name, theta)
                s += g * g
                theta -= lr * g / (np.sqrt(s) + eps)
            elif kind == "adadelta":
                sq = self._buf("square_avg", name, theta)
                acc = self._buf("delta_avg", name, theta)
                sq *= hp.rho
                sq += (1 - hp.rho) * g * g
                delta = np.sqrt(acc + eps) / np.sqrt(sq + eps) * g
                acc *= hp.rho
                acc += (1 - hp.rho) * delta * delta
                theta -= lr * delta

    # -- averaged SGD --------------------------------------------------

    def averaged(self, params: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
        """Copies of the running averages (the current value where none exists yet)."""
        if self.kind != "asgd":
            raise StateError(f"parameter averaging needs asgd, optimizer is {self.kind}")
        if self.step_count == 0:
            raise StateError("no averaging steps taken yet")
        avg = self.buffers["average"]
        out = {}
        for name, theta in params.items():
            if name in avg and self.step_count > self.hp.t0:
                out[name] = avg[name].copy()
            else:
                out[name] = theta.copy()
        return out

    def swap_in_average(self, params: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
        """Overwrite ``params`` with their running averages; the originals are kept for :meth:`swap_out_average`."""
        averaged = self.averaged(params)
        self._swapped = {k: v.copy() for k, v in params.items()}
        for name, theta in params.items():
            theta[...] = averaged[name]
        return params

    def swap_out_average(self, params: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
        if self._swapped is None:
            raise StateError("no averaged parameters swapped in")
        for name, theta in params.items():
            theta[...] = self._swapped[name]
        self._swapped = None
        return params

    # -- serialization -------------------------------------------------

    def state_dict(self) -> dict:
        return {
            "kind": self.kind,
            "hp": asdict(self.hp),
            "step": self.step_count,
            "buffers": {b: dict(v) for b, v in self.buffers.items()},
        }

    @classmethod
    def from_state_dict(cls, state: dict) -> "Optimizer":
        opt = cls(state["kind"], HyperParams(**state["hp"]))
        opt.step_count = int(state["step"])
        for b, values in state["buffers"].items():
            opt.buffers[b] = {k: np.array(v) for k, v in values.items()}
        return opt
