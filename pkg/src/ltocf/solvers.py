"""Segment-wise integration of the co-evolving user/item ODE system.

The user state ``u`` (N x D) and item state ``p`` (M x D) are stepped
jointly as one stacked array ``z`` of shape (N + M, D) so every Runge-Kutta
stage sees a consistent pair. The dynamics are linear and parameter-free,
so a recorded step plan (step sizes and corrector iteration counts) is all
that reverse-mode differentiation needs; see :mod:`ltocf.training`.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .graph import InteractionGraph
from .model import EmbeddingState, ModelParams, joint_derivative, joint_derivative_transpose

__all__ = [
    "SolverKind",
    "SolverConfig",
    "SolverDivergence",
    "StepRecord",
    "SegmentTape",
    "Trajectory",
    "Dynamics",
    "integrate_segment",
    "integrate_grid",
    "error_norm",
    "dopri_step_control",
    "segment_vjp",
    "segment_time_tangent",
]

MIN_STEP = 1e-12


class SolverDivergence(ArithmeticError):
    """Non-finite state or step-size underflow during integration."""


class SolverKind(str, enum.Enum):
    EULER = "euler"
    RK4 = "rk4"
    ADAMS_MOULTON = "adams-moulton"
    DOPRI = "dopri"


_DEFAULT_STEPS = {
    SolverKind.EULER: 0.1,
    SolverKind.RK4: 0.5,
    SolverKind.ADAMS_MOULTON: 0.25,
}


@dataclass
class SolverConfig:
    kind: SolverKind = SolverKind.RK4
    step: float | None = None
    rtol: float = 1e-7
    atol: float = 1e-9
    residual: bool = True
    corrector_iters: int = 10
    corrector_tol: float = 1e-9

    def __post_init__(self):
        self.kind = SolverKind(self.kind)
        if self.step is None:
            self.step = _DEFAULT_STEPS.get(self.kind, 0.5)
        if not self.step > 0:
            raise ValueError(f"step must be positive, got {self.step}")
        if not (self.rtol > 0 and self.atol > 0):
            raise ValueError(f"rtol and atol must be positive, got {self.rtol}, {self.atol}")
        if self.corrector_iters < 1:
            raise ValueError("corrector_iters must be >= 1")
        if self.corrector_tol < 0:
            raise ValueError("corrector_tol must be non-negative")


class Dynamics:
    """The joint linear vector field on stacked states."""

    def __init__(self, graph: InteractionGraph):
        self.graph = graph
        self.split = graph.num_users
        self.evaluations = 0

    def __call__(self, z: np.ndarray) -> np.ndarray:
        self.evaluations += 1
        du, dp = joint_derivative(self.graph, z[: self.split], z[self.split:])
        return np.concatenate([du, dp])

    def transpose(self, c: np.ndarray) -> np.ndarray:
        gu, gp = joint_derivative_transpose(self.graph, c[: self.split], c[self.split:])
        return np.concatenate([gu, gp])


# Butcher tableaux: (a rows, b); c is implied since the field is autonomous.
_EULER = ([[]], [1.0])
_RK4 = ([[], [0.5], [0.0, 0.5], [0.0, 0.0, 1.0]], [1 / 6, 1 / 3, 1 / 3, 1 / 6])
_DOPRI_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_DOPRI_B = [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0]
# fifth-order minus embedded fourth-order weights
_DOPRI_E = [71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40]
# the seventh stage only feeds the error estimate
_DOPRI = (_DOPRI_A[:6], _DOPRI_B[:6])


@dataclass
class StepRecord:
    method: str  # "euler" | "rk4" | "dopri" | "am"
    h: float
    iters: int = 0


@dataclass
class SegmentTape:
    t_from: float
    t_to: float
    steps: list[StepRecord]
    fixed_step: bool


@dataclass
class Trajectory:
    snapshots: list[EmbeddingState]
    step_count: int
    segments: list[SegmentTape] = field(default_factory=list)
    residual: bool = True

    @property
    def times(self) -> list[float]:
        return [s.time for s in self.snapshots]


def _stack(state: EmbeddingState) -> np.ndarray:
    return np.concatenate([np.asarray(state.users, dtype=np.float64), np.asarray(state.items, dtype=np.float64)])


def _unstack(z: np.ndarray, split: int, time: float) -> EmbeddingState:
    return EmbeddingState(z[:split].copy(), z[split:].copy(), time)


# -- single steps ---------------------------------------------------------


def _rk_step(F, z, h, tableau, dz=None, dh=0.0):
    """One explicit RK step, optionally pushing a tangent ``(dz, dh)`` along.

    Returns ``(z_next, dz_next, stages)``.
    """
    a, b = tableau
    ks, dks = [], []
    for row in a:
        y = z.copy()
        for aij, k in zip(row, ks):
            if aij:
                y += h * aij * k
        ks.append(F(y))
        if dz is not None:
            dy = dz.copy()
            for aij, k, dk in zip(row, ks, dks):
                if aij:
                    dy += aij * (dh * k + h * dk)
            dks.append(F(dy))
    z_next = z.copy()
    for bi, k in zip(b, ks):
        if bi:
            z_next += h * bi * k
    dz_next = None
    if dz is not None:
        dz_next = dz.copy()
        for bi, k, dk in zip(b, ks, dks):
            if bi:
                dz_next += bi * (dh * k + h * dk)
    return z_next, dz_next, ks


def _rk_step_vjp(F, c_next, h, tableau):
    """Cotangent of the step input given the cotangent of its output."""
    a, b = tableau
    s = len(b)
    c_stage_in = [None] * s
    for i in range(s - 1, -1, -1):
        ck = h * b[i] * c_next if b[i] else np.zeros_like(c_next)
        for j in range(i + 1, s):
            aji = a[j][i] if i < len(a[j]) else 0.0
            if aji:
                ck += h * aji * c_stage_in[j]
        c_stage_in[i] = F.transpose(ck)
    c = c_next.copy()
    for cy in c_stage_in:
        c += cy
    return c


def _am_step(F, hist, fhist, h, iters, tol, dhist=None, dfhist=None, dh=0.0, fixed_iters=None):
    """Adams-Bashforth(2) predictor plus fixed-point Adams-Moulton corrector.

    ``hist``/``fhist`` hold the last three states and their derivatives,
    newest last. With ``fixed_iters`` the corrector runs exactly that many
    sweeps (replay); otherwise it stops once successive iterates differ by
    at most ``tol`` in max-norm, or after ``iters`` sweeps.
    """
    z, f0, f1, f2 = hist[-1], fhist[-1], fhist[-2], fhist[-3]
    explicit = 19 * f0 - 5 * f1 + f2
    y = z + 0.5 * h * (3 * f0 - f1)
    tangent = dhist is not None
    if tangent:
        dz, df0, df1, df2 = dhist[-1], dfhist[-1], dfhist[-2], dfhist[-3]
        d_explicit = 19 * df0 - 5 * df1 + df2
        dy = dz + 0.5 * dh * (3 * f0 - f1) + 0.5 * h * (3 * df0 - df1)
    sweeps = 0
    limit = fixed_iters if fixed_iters is not None else iters
    while sweeps < limit:
        fy = F(y)
        y_new = z + (h / 24) * (9 * fy + explicit)
        if tangent:
            dfy = F(dy)
            dy = dz + (dh / 24) * (9 * fy + explicit) + (h / 24) * (9 * dfy + d_explicit)
        sweeps += 1
        converged = fixed_iters is None and np.max(np.abs(y_new - y), initial=0.0) <= tol
        y = y_new
        if converged:
            break
    return y, (dy if tangent else None), sweeps


def _am_step_vjp(F, c_next, h, sweeps):
    """Cotangents for (z_k, z_{k-1}, z_{k-2}) of one Adams-Moulton step."""
    # y_{j+1} = z + h/24 (9 F y_j + 19 F z - 5 F z1 + F z2);  y_0 = z + h/2 (3 F z - F z1)
    c_y = c_next
    acc = np.zeros_like(c_next)
    for _ in range(sweeps):
        acc += c_y
        c_y = (9 * h / 24) * F.transpose(c_y)
    ft_acc = F.transpose(acc)
    ft_y0 = F.transpose(c_y)
    c_z = acc + (19 * h / 24) * ft_acc + c_y + 1.5 * h * ft_y0
    c_z1 = (-5 * h / 24) * ft_acc - 0.5 * h * ft_y0
    c_z2 = (h / 24) * ft_acc
    return c_z, c_z1, c_z2


# -- step-size control ------------------------------------------------------


def _rms(x: np.ndarray) -> float:
    if x.size == 0:
        return 0.0
    peak = float(np.max(np.abs(x)))
    if peak == 0.0 or not math.isfinite(peak):
        return peak
    return peak * float(np.sqrt(np.mean((x / peak) ** 2)))


def error_norm(err: np.ndarray, y: np.ndarray, y_new: np.ndarray, rtol: float, atol: float) -> float:
    """RMS of the componentwise error scaled by ``atol + rtol * max(|y|, |y_new|)``."""
    scale = atol + rtol * np.maximum(np.abs(y), np.abs(y_new))
    return _rms(err / scale)


def dopri_step_control(norm: float, h: float) -> tuple[bool, float]:
    """Accept/reject decision and the next step size for the 5(4) pair."""
    if not h > 0:
        raise ValueError(f"step size must be positive, got {h}")
    accept = norm <= 1.0
    factor = 10.0 if norm == 0 else 0.9 * norm ** (-0.2)
    return accept, h * min(10.0, max(0.2, factor))


def _initial_step(F, z, f0, span, rtol, atol):
    scale = atol + rtol * np.abs(z)
    d0, d1 = _rms(z / scale), _rms(f0 / scale)
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    h0 = min(h0, span)
    f1 = F(z + h0 * f0)
    d2 = _rms((f1 - f0) / scale) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** 0.2
    return min(100 * h0, h1, span)


# -- segments -----------------------------------------------------------------


def _substeps(span: float, step: float) -> int:
    # tolerate representation error in span / step landing just above an integer
    return max(1, math.ceil(span / step - 1e-9))


def _check_finite(z, seg_label, k, t):
    if not np.isfinite(z).all():
        raise SolverDivergence(f"non-finite state in {seg_label} at substep {k} (t={t:.6g})")


def _integrate_fixed(F, z0, t_from, t_to, cfg, label):
    n = _substeps(t_to - t_from, cfg.step)
    h = (t_to - t_from) / n
    steps = []
    z = z0
    if cfg.kind is SolverKind.ADAMS_MOULTON:
        hist, fhist = [z], [F(z)]
    for k in range(n):
        if cfg.kind is SolverKind.EULER:
            z, _, _ = _rk_step(F, z, h, _EULER)
            steps.append(StepRecord("euler", h))
        elif cfg.kind is SolverKind.RK4 or (cfg.kind is SolverKind.ADAMS_MOULTON and k < 3):
            z, _, _ = _rk_step(F, z, h, _RK4)
            steps.append(StepRecord("rk4", h))
        else:
            z, _, sweeps = _am_step(F, hist, fhist, h, cfg.corrector_iters, cfg.corrector_tol)
            steps.append(StepRecord("am", h, sweeps))
        _check_finite(z, label, k + 1, t_from + (k + 1) * h)
        if cfg.kind is SolverKind.ADAMS_MOULTON and k + 1 < n:
            hist = (hist + [z])[-3:]
            fhist = (fhist + [F(z)])[-3:]
    return z, steps


def _integrate_dopri(F, z0, t_from, t_to, cfg, label):
    span = t_to - t_from
    z, t = z0, t_from
    f0 = F(z)
    h = _initial_step(F, z, f0, span, cfg.rtol, cfg.atol)
    steps = []
    k = 0
    while True:
        remaining = t_to - t
        last = h >= remaining * (1 - 1e-12)
        if last:
            h = remaining
        if h < MIN_STEP:
            raise SolverDivergence(f"dopri step size underflow ({h:.3g}) in {label} at t={t:.6g}")
        z_new, _, ks = _rk_step(F, z, h, (_DOPRI_A[:6], _DOPRI_B[:6]))
        k7 = F(z_new)
        err = h * sum(e * kk for e, kk in zip(_DOPRI_E, ks + [k7]) if e)
        norm = error_norm(err, z, z_new, cfg.rtol, cfg.atol)
        if not math.isfinite(norm):
            raise SolverDivergence(f"non-finite error estimate in {label} at substep {k + 1} (t={t:.6g})")
        accept, h_next = dopri_step_control(norm, h)
        if accept:
            k += 1
            _check_finite(z_new, label, k, t + h)
            steps.append(StepRecord("dopri", h))
            z = z_new
            if last:
                break
            t = t + h
        h = h_next
    return z, steps


def integrate_segment(graph, start: EmbeddingState, t_from: float, t_to: float, cfg: SolverConfig,
                      *, _dynamics=None, _label="segment"):
    """Advance ``start`` from ``t_from`` to ``t_to``.

    With ``cfg.residual`` false the returned state is the increment
    ``z(t_to) - z(t_from)`` only (linear connection).
    Returns ``(state, steps)`` where ``steps`` is the recorded plan.
    """
    if not t_to > t_from:
        raise ValueError(f"t_to ({t_to}) must exceed t_from ({t_from})")
    F = _dynamics or Dynamics(graph)
    z0 = _stack(start)
    if not np.isfinite(z0).all():
        raise SolverDivergence(f"non-finite start state in {_label}")
    # overflow is reported as SolverDivergence by the finiteness checks
    with np.errstate(over="ignore", invalid="ignore"):
        if cfg.kind is SolverKind.DOPRI:
            z, steps = _integrate_dopri(F, z0, t_from, t_to, cfg, _label)
        else:
            z, steps = _integrate_fixed(F, z0, t_from, t_to, cfg, _label)
    if not cfg.residual:
        z = z - z0
    return _unstack(z, graph.num_users, t_to), steps


def integrate_grid(graph: InteractionGraph, params: ModelParams, cfg: SolverConfig) -> Trajectory:
    """Chain segments 0 -> t_1 -> ... -> t_T -> K and keep every snapshot."""
    params.check_graph(graph)
    times = params.grid.times
    F = Dynamics(graph)
    state = EmbeddingState(np.asarray(params.e_u0, dtype=np.float64), np.asarray(params.e_p0, dtype=np.float64), 0.0)
    snapshots = [state]
    tapes = []
    for i in range(len(times) - 1):
        state, steps = integrate_segment(graph, state, float(times[i]), float(times[i + 1]), cfg,
                                         _dynamics=F, _label=f"segment {i}")
        snapshots.append(state)
        tapes.append(SegmentTape(float(times[i]), float(times[i + 1]), steps, cfg.kind is not SolverKind.DOPRI))
    return Trajectory(snapshots, F.evaluations, tapes, cfg.residual)


# -- replay: reverse and tangent passes ------------------------------------


def segment_vjp(F: Dynamics, tape: SegmentTape, c_end: np.ndarray) -> np.ndarray:
    """Pull a cotangent of the segment end state back to its start state.

    Only the plan is needed because every step is linear in its inputs.
    """
    n = len(tape.steps)
    cots = [np.zeros_like(c_end) for _ in range(n)] + [c_end.copy()]
    for k in range(n - 1, -1, -1):
        rec = tape.steps[k]
        c_next = cots[k + 1]
        if rec.method == "am":
            c0, c1, c2 = _am_step_vjp(F, c_next, rec.h, rec.iters)
            cots[k] += c0
            cots[k - 1] += c1
            cots[k - 2] += c2
        else:
            tableau = {"euler": _EULER, "rk4": _RK4, "dopri": _DOPRI}[rec.method]
            cots[k] += _rk_step_vjp(F, c_next, rec.h, tableau)
    return cots[0]


def segment_time_tangent(F: Dynamics, tape: SegmentTape, z0: np.ndarray) -> np.ndarray:
    """Derivative of the segment's end state with respect to its end time.

    Fixed-step plans spread the end time over ``n`` equal substeps, so each
    step size moves by ``1/n``. Adaptive plans keep every accepted step but
    the last, which is clipped to land on the end time.
    """
    n = len(tape.steps)
    if tape.fixed_step:
        dhs = [1.0 / n] * n
    else:
        dhs = [0.0] * (n - 1) + [1.0]
    z, dz = z0, np.zeros_like(z0)
    uses_history = any(rec.method == "am" for rec in tape.steps)
    hist, fhist, dhist, dfhist = [z], [F(z)], [dz], [np.zeros_like(z0)]
    for k, (rec, dh) in enumerate(zip(tape.steps, dhs)):
        if rec.method == "am":
            z, dz, _ = _am_step(F, hist, fhist, rec.h, 0, 0.0, dhist, dfhist, dh, fixed_iters=rec.iters)
        else:
            tableau = {"euler": _EULER, "rk4": _RK4, "dopri": _DOPRI}[rec.method]
            z, dz, _ = _rk_step(F, z, rec.h, tableau, dz, dh)
        if uses_history and k + 1 < n:
            hist, fhist = (hist + [z])[-3:], (fhist + [F(z)])[-3:]
            dhist, dfhist = (dhist + [dz])[-3:], (dfhist + [F(dz)])[-3:]
    return dz
