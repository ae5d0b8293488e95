"""Fixed-point solvers over flat float64 vectors.

Both solvers iterate y <- F(y) until the residual ||F(y) - y|| drops to
tol or max_steps is reached, recording the residual at every step and
snapshotting iterates at requested (1-indexed) step counts. Training
drives these with tol=0 so the step count is fixed; tolerance stopping
is for inference and diagnostics.

Anderson mixing keeps the last m iterates and replaces the Picard step
with the least-squares combination of their residuals (normal equations
on residual differences, Tikhonov-regularized at 1e-8, damping beta).
With m=1 or an ill-conditioned solve it degenerates to the plain step,
bit for bit.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = ["SolveTrace", "SolverConfig", "residual", "solve_anderson", "solve_naive"]


@dataclass(frozen=True)
class SolverConfig:
    max_steps: int = 25
    tol: float = 0.0
    m: int = 1  # Anderson history length
    beta: float = 1.0  # Anderson damping
    record_at: tuple[int, ...] = ()

    def validate(self) -> None:
        if self.max_steps < 1:
            raise ValueError(f"max_steps must be >= 1, got {self.max_steps}")
        if self.tol < 0:
            raise ValueError(f"tol must be >= 0, got {self.tol}")
        if self.m < 1:
            raise ValueError(f"anderson history m must be >= 1, got {self.m}")
        if not (0.0 < self.beta <= 1.0):
            raise ValueError(f"beta must be in (0, 1], got {self.beta}")


@dataclass
class SolveTrace:
    y: np.ndarray
    residuals: np.ndarray
    snapshots: dict[int, np.ndarray] = field(default_factory=dict)
    steps: int = 0
    converged: bool = False


def residual(F: Callable[[np.ndarray], np.ndarray], y: np.ndarray) -> float:
    return float(np.linalg.norm(F(y) - y))


def solve_naive(
    F: Callable[[np.ndarray], np.ndarray], y0: np.ndarray, cfg: SolverConfig
) -> SolveTrace:
    """Plain Picard iteration y <- F(y)."""
    cfg.validate()
    y = np.asarray(y0, dtype=np.float64)
    record = set(cfg.record_at)
    res = []
    snaps = {}
    converged = False
    step = 0
    for step in range(1, cfg.max_steps + 1):
        fy = F(y)
        r = float(np.linalg.norm(fy - y))
        res.append(r)
        y = fy
        if step in record:
            snaps[step] = y.copy()
        if r <= cfg.tol:
            converged = True
            break
    return SolveTrace(y, np.array(res), snaps, step, converged)


def solve_anderson(
    F: Callable[[np.ndarray], np.ndarray], y0: np.ndarray, cfg: SolverConfig
) -> SolveTrace:
    cfg.validate()
    y = np.asarray(y0, dtype=np.float64)
    record = set(cfg.record_at)
    res = []
    snaps = {}
    converged = False
    step = 0
    hist: deque[tuple[np.ndarray, np.ndarray]] = deque(maxlen=cfg.m)  # (y_i, F(y_i))
    for step in range(1, cfg.max_steps + 1):
        fy = F(y)
        r = float(np.linalg.norm(fy - y))
        res.append(r)
        hist.append((y, fy))
        if len(hist) == 1:
            y = fy
        else:
            y = _anderson_mix(hist, cfg.beta, fy)
        if step in record:
            snaps[step] = y.copy()
        if r <= cfg.tol:
            converged = True
            break
    return SolveTrace(y, np.array(res), snaps, step, converged)


_TIKHONOV = 1e-8


def _anderson_mix(hist, beta: float, picard: np.ndarray) -> np.ndarray:
    """Least-squares residual combination in difference form.

    Minimizing ||sum_i alpha_i f_i|| over affine weights is, after the
    substitution alpha -> gamma on consecutive differences, the plain
    least-squares problem min ||f_k - dF gamma||, solved here by normal
    equations with Tikhonov damping. The damping is scaled by ||f_k||^2
    so it only perturbs the solution multiplicatively; combinations that
    can cancel the residual exactly still do so to near machine level.
    """
    ys = np.stack([h[0].ravel() for h in hist])
    fs = np.stack([h[1].ravel() for h in hist])
    R = fs - ys  # one residual per history row
    dY = np.diff(ys, axis=0)
    dR = np.diff(R, axis=0)
    fk = R[-1]
    G = dR @ dR.T
    k = G.shape[0]
    lam = _TIKHONOV * float(fk @ fk)  # dimensionless damping, scales with the residual
    try:
        gamma = np.linalg.solve(G + lam * np.eye(k), dR @ fk)
    except np.linalg.LinAlgError:
        return picard
    if not np.all(np.isfinite(gamma)):
        return picard
    dG = dY + dR  # differences of F(y_i)
    mixed = beta * (fs[-1] - gamma @ dG) + (1.0 - beta) * (ys[-1] - gamma @ dY)
    if not np.all(np.isfinite(mixed)):
        return picard
    return mixed.reshape(picard.shape)
