"""Checkpoint merging by spherical interpolation of task vectors around an anchor."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .diffmodel import DenoiserParams, _check_same_arch
from .errors import ArchMismatch, ZeroTaskVectors

# below this sin(angle) the two task vectors are treated as collinear
SIN_EPS = 1e-8


def _theta(p) -> np.ndarray:
    return p.theta if isinstance(p, DenoiserParams) else np.asarray(p, dtype=np.float64)


def _wrap(template, theta: np.ndarray, meta: dict):
    if isinstance(template, DenoiserParams):
        return DenoiserParams(template.arch, theta, "trainable", meta)
    return theta


def task_angle(tau1: np.ndarray, tau2: np.ndarray) -> tuple[float, float]:
    """(Omega, sin Omega) between two flat task vectors."""
    n1 = np.linalg.norm(tau1)
    n2 = np.linalg.norm(tau2)
    if n1 == 0 or n2 == 0:
        return 0.0, 0.0
    c = float(np.clip(np.dot(tau1, tau2) / (n1 * n2), -1.0, 1.0))
    omega = float(np.arccos(c))
    return omega, float(np.sin(omega))


def slerp_coefficients(lam: float, omega: float, sin_omega: float) -> tuple[float, float]:
    if sin_omega < SIN_EPS:
        return 1.0 - lam, lam
    return float(np.sin((1.0 - lam) * omega) / sin_omega), float(np.sin(lam * omega) / sin_omega)


def slerp2(theta0, theta1, theta2, lam: float):
    """theta0 + a (theta1 - theta0) + b (theta2 - theta0) with SLERP weights a, b.

    One angle for the whole flattened vector. Accepts DenoiserParams or raw arrays.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lam must be in [0, 1], got {lam}")
    if all(isinstance(p, DenoiserParams) for p in (theta0, theta1, theta2)):
        _check_same_arch(theta0, theta1)
        _check_same_arch(theta0, theta2)
    t0, t1, t2 = _theta(theta0), _theta(theta1), _theta(theta2)
    if not (t0.shape == t1.shape == t2.shape):
        raise ArchMismatch(f"parameter shapes differ: {t0.shape}, {t1.shape}, {t2.shape}")
    tau1 = t1 - t0
    tau2 = t2 - t0
    if not tau1.any() and not tau2.any():
        raise ZeroTaskVectors("both checkpoints equal the anchor")
    meta = {"stage": "merge", "method": "slerp", "lam": lam}
    # exact endpoints and the common-point case
    if lam == 0.0 or np.array_equal(t1, t2):
        return _wrap(theta1, t1.copy(), meta)
    if lam == 1.0:
        return _wrap(theta1, t2.copy(), meta)
    omega, s = task_angle(tau1, tau2)
    a, b = slerp_coefficients(lam, omega, s)
    return _wrap(theta1, t0 + (a * tau1 + b * tau2), meta)


def lerp2(theta0, theta1, theta2, lam: float):
    """Plain weight averaging; the anchor cancels out."""
    t1, t2 = _theta(theta1), _theta(theta2)
    if lam == 0.0:
        out = t1.copy()
    elif lam == 1.0:
        out = t2.copy()
    else:
        out = (1.0 - lam) * t1 + lam * t2
    return _wrap(theta1, out, {"stage": "merge", "method": "lerp", "lam": lam})


def merge3(theta0, t1, t2, t3, method: str = "slerp"):
    """Two-stage uniform soup: merge the first two at 1/2, then the third at 1/3.

    The recipe is order dependent; permuting the inputs generally changes the result.
    """
    fn = {"slerp": slerp2, "lerp": lerp2}[method]
    t12 = fn(theta0, t1, t2, 0.5)
    return fn(theta0, t12, t3, 1.0 / 3.0)


@dataclass
class MergeSpec:
    anchor: str
    inputs: Sequence[str]
    method: str = "slerp"
    lam: float = 0.5
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in ("slerp", "lerp"):
            raise ValueError(f"unknown merge method {self.method!r}")
        if len(self.inputs) not in (2, 3):
            raise ValueError("merge takes 2 or 3 checkpoints")


def merge(spec: MergeSpec, anchor, inputs: Sequence):
    if len(inputs) == 2:
        fn = slerp2 if spec.method == "slerp" else lerp2
        return fn(anchor, inputs[0], inputs[1], spec.lam)
    return merge3(anchor, *inputs, method=spec.method)
