"""Second-order flow integration for inversion and denoising.

The generative flow is the ODE dZ/dt = v(Z, t) on t in [0, 1].  Inversion
integrates an image latent from t=0 toward noise at t=1; denoising runs the
reverse traversal.  Each step is one Heun (predictor-corrector) update,
giving O(dt^3) local truncation error on smooth fields.

Attention hooks fire on the predictor velocity evaluation of each step,
once per declared attention layer; the corrector evaluation runs hook-free
so a hook sees every (step, layer) site exactly once per integration.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable, Literal, Protocol, Sequence

import numpy as np

from .attention import TokenLayout

Direction = Literal["inversion", "denoising"]

# hook(step, layer, q, k, v) -> replacement (q, k, v) arrays, or None to keep the originals
AttentionHook = Callable[[int, int, np.ndarray, np.ndarray, np.ndarray], "tuple | None"]


class IntegrationError(RuntimeError):
    """Raised when a backend produces a non-finite velocity."""

    def __init__(self, message: str, t: float, step: int | None = None):
        super().__init__(message)
        self.t = t
        self.step = step


@dataclass(frozen=True)
class StepSchedule:
    """Strictly increasing time grid covering [0, 1] endpoint to endpoint."""

    times: tuple[float, ...]

    def __post_init__(self) -> None:
        times = tuple(float(t) for t in self.times)
        if len(times) < 2:
            raise ValueError("schedule needs at least two times")
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("schedule times must be strictly increasing")
        if times[0] != 0.0 or times[-1] != 1.0:
            raise ValueError("schedule must span exactly [0, 1]")
        object.__setattr__(self, "times", times)

    @classmethod
    def uniform(cls, steps: int) -> "StepSchedule":
        if steps < 1:
            raise ValueError("steps must be >= 1")
        return cls(tuple(i / steps for i in range(steps + 1)))

    @property
    def steps(self) -> int:
        return len(self.times) - 1

    def traversal(self, direction: Direction) -> tuple[float, ...]:
        """Time sequence actually walked: 0->1 for inversion, 1->0 for denoising."""
        if direction == "inversion":
            return self.times
        if direction == "denoising":
            return tuple(reversed(self.times))
        raise ValueError(f"unknown direction {direction!r}")

    def id(self) -> str:
        return f"uniform-{self.steps}" if self == StepSchedule.uniform(self.steps) else f"custom-{self.steps}"


@dataclass(frozen=True)
class TrajectoryState:
    """A latent together with its position on the time axis."""

    latent: np.ndarray
    t: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.t <= 1.0):
            raise ValueError(f"t must lie in [0, 1], got {self.t}")
        if not np.all(np.isfinite(self.latent)):
            raise ValueError("latent contains non-finite entries")


@dataclass(frozen=True)
class Conditioning:
    """Text prompt plus an opaque backend payload."""

    prompt_text: str = ""
    extra: Any = None


class VelocityBackend(Protocol):
    """What the engine needs from a model backend."""

    @property
    def latent_shape(self) -> tuple[int, ...]: ...

    def attention_sites(self) -> Sequence[tuple[int, TokenLayout]]: ...

    def velocity(
        self,
        latent: np.ndarray,
        t: float,
        conditioning: Conditioning,
        hook_sink: "StepHookSink | None",
    ) -> np.ndarray: ...


class StepHookSink:
    """Binds an attention hook to the step currently being integrated.

    Backends call ``sink(layer, q, k, v)`` from inside each attention block
    and must use the returned triple.
    """

    def __init__(self, hook: AttentionHook, step: int):
        self.hook = hook
        self.step = step

    def __call__(
        self, layer: int, q: np.ndarray, k: np.ndarray, v: np.ndarray
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        out = self.hook(self.step, layer, q, k, v)
        if out is None:
            return q, k, v
        return out


def interpolate_state(x0: np.ndarray, x1: np.ndarray, t: float) -> np.ndarray:
    """Straight-line blend (1 - t) * x0 + t * x1."""
    if x0.shape != x1.shape:
        raise ValueError(f"shape mismatch {x0.shape} vs {x1.shape}")
    if not (0.0 <= t <= 1.0):
        raise ValueError(f"t must lie in [0, 1], got {t}")
    tt = x0.dtype.type(t)
    return (x0.dtype.type(1.0) - tt) * x0 + tt * x1


def _checked_velocity(
    backend: VelocityBackend,
    latent: np.ndarray,
    t: float,
    conditioning: Conditioning,
    sink: StepHookSink | None,
    step: int | None,
) -> np.ndarray:
    vel = backend.velocity(latent, t, conditioning, sink)
    if not np.all(np.isfinite(vel)):
        raise IntegrationError(f"backend produced non-finite velocity at t={t}", t=t, step=step)
    return vel


def solver_step(
    state: TrajectoryState,
    dt: float,
    backend: VelocityBackend,
    conditioning: Conditioning,
    hook: AttentionHook | None = None,
    step_index: int = 0,
) -> TrajectoryState:
    """One Heun step: predict with v(z, t), correct with the endpoint average."""
    if dt == 0.0:
        raise ValueError("dt must be nonzero")
    t_next = state.t + dt
    if not (-1e-9 <= t_next <= 1.0 + 1e-9):
        raise ValueError(f"step leaves [0, 1]: t={state.t}, dt={dt}")
    t_next = min(1.0, max(0.0, t_next))

    sink = StepHookSink(hook, step_index) if hook is not None else None
    dt_c = state.latent.dtype.type(dt)
    half = state.latent.dtype.type(0.5)

    v1 = _checked_velocity(backend, state.latent, state.t, conditioning, sink, step_index)
    predicted = state.latent + dt_c * v1
    v2 = _checked_velocity(backend, predicted, t_next, conditioning, None, step_index)
    corrected = state.latent + dt_c * (half * (v1 + v2))
    return TrajectoryState(latent=corrected, t=t_next)


def integrate(
    start: TrajectoryState,
    schedule: StepSchedule,
    direction: Direction,
    backend: VelocityBackend,
    conditioning: Conditioning,
    hook: AttentionHook | None = None,
) -> TrajectoryState:
    """Walk the whole schedule in the given direction from ``start``.

    Hooks observe step indices 0 .. N-1 in order.  A hook exception aborts
    the integration: silently skipping a mixing site would corrupt the
    semantics of the run.
    """
    times = schedule.traversal(direction)
    if abs(start.t - times[0]) > 1e-9:
        raise ValueError(f"start.t={start.t} does not match schedule start {times[0]} for {direction}")
    state = TrajectoryState(latent=start.latent, t=times[0])
    for index in range(len(times) - 1):
        dt = times[index + 1] - times[index]
        state = solver_step(state, dt, backend, conditioning, hook=hook, step_index=index)
        # Snap to the exact grid time so float accumulation never drifts the schedule.
        state = TrajectoryState(latent=state.latent, t=times[index + 1])
    return state
