"""Training regime pieces: the rectified-Adam update rule and the
single-cycle (learning rate, first momentum) schedule.

Both hyperparameters warm up linearly from their starting values to a
peak over the first tenth of training, then relax back to the start
along a half cosine. The per-step values are injected into every update,
including the bias corrections.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, ShapeError


@dataclass(frozen=True)
class OneCycleSchedule:
    total_steps: int
    lr_start: float = 1e-5
    lr_peak: float = 5e-4
    beta1_start: float = 0.999
    beta1_peak: float = 0.9 * 0.999
    warm_frac: float = 0.10

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if not 0.0 < self.warm_frac < 1.0:
            raise ValueError("warm_frac must lie in (0, 1)")

    @property
    def warm_end(self) -> int:
        return math.floor(self.warm_frac * self.total_steps)


def schedule_at(schedule: OneCycleSchedule, step: int) -> tuple[float, float]:
    """(lr, beta1) at ``step``: linear start->peak on [0, warm_end], then a
    cosine half-wave peak->start on [warm_end, total_steps]."""
    if not 0 <= step <= schedule.total_steps:
        raise ValueError(
            f"step {step} outside [0, {schedule.total_steps}]"
        )
    warm_end = schedule.warm_end

    def leg(start, peak):
        if step <= warm_end:
            if warm_end == 0:
                return peak
            return start + (peak - start) * (step / warm_end)
        u = (step - warm_end) / (schedule.total_steps - warm_end)
        return start + (peak - start) * 0.5 * (1.0 + math.cos(math.pi * u))

    return (leg(schedule.lr_start, schedule.lr_peak),
            leg(schedule.beta1_start, schedule.beta1_peak))


@dataclass
class RAdam:
    """Rectified Adam over a dict of named parameter arrays.

    Moments use the per-step beta1 handed to :meth:`step`; beta2 and eps
    are fixed at construction. While the rectification term rho_t stays
    at or below 4 (the first few steps at beta2 = 0.999) the update falls
    back to bias-corrected momentum with no division by the second moment.
    """

    params: dict[str, np.ndarray]
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for name, p in self.params.items():
            self.m[name] = np.zeros_like(p)
            self.v[name] = np.zeros_like(p)
        self.rho_inf = 2.0 / (1.0 - self.beta2) - 1.0

    def rho_t(self, t: int) -> float:
        b2t = self.beta2 ** t
        return self.rho_inf - 2.0 * t * b2t / (1.0 - b2t)

    def step(self, grads: dict[str, np.ndarray], lr: float, beta1: float,
             force_branch: str | None = None,
             rectifier_override: float | None = None) -> None:
        """One in-place update of every parameter from its gradient.

        ``force_branch``/``rectifier_override`` exist for tests: forcing
        the rectified branch with the rectifier pinned at 1 reduces the
        rule to plain Adam.
        """
        missing = set(self.params) - set(grads)
        if missing:
            raise ShapeError(f"missing gradients for {sorted(missing)}")
        self.t += 1
        t = self.t
        rho = self.rho_t(t)
        rectified = rho > 4.0 if force_branch is None else \
            force_branch == "rectified"
        if rectified:
            rect = math.sqrt(
                ((rho - 4.0) * (rho - 2.0) * self.rho_inf)
                / ((self.rho_inf - 4.0) * (self.rho_inf - 2.0) * rho)
            ) if rectifier_override is None else rectifier_override
        bias1 = 1.0 - beta1 ** t
        bias2 = 1.0 - self.beta2 ** t

        for name in sorted(self.params):
            g = np.asarray(grads[name])
            if g.shape != self.params[name].shape:
                raise ShapeError(
                    f"gradient for {name!r} has shape {g.shape}, expected "
                    f"{self.params[name].shape}"
                )
            if not np.all(np.isfinite(g)):
                raise DomainError(f"non-finite gradient for {name!r}")
            m = self.m[name]
            v = self.v[name]
            m *= beta1
            m += (1.0 - beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            m_hat = m / bias1
            if rectified:
                v_hat = np.sqrt(v / bias2)
                self.params[name] -= lr * rect * m_hat / (v_hat + self.eps)
            else:
                self.params[name] -= lr * m_hat
