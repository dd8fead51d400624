"""Adam on raw numpy parameter arrays (updated in place)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-8


@dataclass
class AdamMoments:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def like(cls, param: np.ndarray) -> "AdamMoments":
        return cls(np.zeros_like(param), np.zeros_like(param), 0)


def adam_update(param: np.ndarray, grad: np.ndarray, mom: AdamMoments, lr: float,
                mode: str = "adam") -> None:
    """One step. ``mode="sgd"`` is plain descent, used by the preconditioner checks."""
    if mode == "sgd":
        param -= (lr * grad).astype(param.dtype, copy=False)
        return
    mom.t += 1
    mom.m *= BETA1
    mom.m += (1.0 - BETA1) * grad
    mom.v *= BETA2
    mom.v += (1.0 - BETA2) * (grad * grad)
    bc1 = 1.0 - BETA1 ** mom.t
    bc2 = 1.0 - BETA2 ** mom.t
    step = (lr / bc1) * mom.m / (np.sqrt(mom.v / bc2) + EPS)
    param -= step.astype(param.dtype, copy=False)
