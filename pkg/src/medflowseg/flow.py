"""Flow-matching core: linear probability path, target velocity, and Euler integration.

The generative trajectory runs from a Gaussian noise sample ``x0`` at t=0 to
the encoded mask target ``x1`` at t=1 along the straight line
``x_t = (1 - t) * x0 + t * x1``, whose time derivative is the constant
``x1 - x0``.  Training regresses that constant with a mean-absolute-error
objective; inference integrates the learned field with fixed-step explicit
Euler, which is exact for constant fields on this path.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import torch
from torch import Tensor

from .errors import DomainError, NumericError, ShapeError


def pad_t_like(t: Tensor, x: Tensor) -> Tensor:
    """Reshape a [B] time vector to broadcast against x of shape [B, ...]."""
    return t.reshape(-1, *([1] * (x.dim() - 1)))


@dataclass(frozen=True)
class Endpoints:
    """The two ends of the transport path: noise ``x0`` and target ``x1``."""

    x0: Tensor
    x1: Tensor

    def __post_init__(self) -> None:
        if self.x0.shape != self.x1.shape:
            raise ShapeError(
                f"endpoint shapes differ: x0 {tuple(self.x0.shape)} vs x1 {tuple(self.x1.shape)}"
            )


@dataclass(frozen=True)
class FlowState:
    """An intermediate sample on the path together with its per-sample time."""

    x_t: Tensor
    t: Tensor

    def __post_init__(self) -> None:
        if self.t.dim() != 1 or self.t.shape[0] != self.x_t.shape[0]:
            raise ShapeError(
                f"t must be a [B] vector matching the batch, got {tuple(self.t.shape)} "
                f"for x_t {tuple(self.x_t.shape)}"
            )
        if bool((self.t < 0).any()) or bool((self.t > 1).any()):
            raise DomainError("every t must lie in [0, 1]")


def interpolate(endpoints: Endpoints, t: Tensor) -> FlowState:
    """Place each batch element at ``(1 - t) * x0 + t * x1``.

    Exact at both endpoints: t=0 returns x0 and t=1 returns x1.
    """
    t = torch.as_tensor(t, dtype=endpoints.x0.dtype, device=endpoints.x0.device)
    if t.dim() == 0:
        t = t.expand(endpoints.x0.shape[0]).clone()
    if bool((t < 0).any()) or bool((t > 1).any()):
        raise DomainError("every t must lie in [0, 1]")
    tb = pad_t_like(t, endpoints.x0)
    x_t = (1.0 - tb) * endpoints.x0 + tb * endpoints.x1
    return FlowState(x_t=x_t, t=t)


def target_velocity(endpoints: Endpoints) -> Tensor:
    """The constant velocity pointing from x0 to x1; independent of t."""
    return endpoints.x1 - endpoints.x0


def sample_time(
    batch_size: int,
    generator: Optional[torch.Generator] = None,
    dtype: torch.dtype = torch.float32,
    device: Optional[torch.device] = None,
) -> Tensor:
    """Draw one i.i.d. Uniform[0, 1] time per batch element."""
    if batch_size < 1:
        raise DomainError(f"batch_size must be >= 1, got {batch_size}")
    return torch.rand(batch_size, generator=generator, dtype=dtype, device=device)


def velocity_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute error between predicted and target velocities."""
    if pred.shape != target.shape:
        raise ShapeError(
            f"velocity shapes differ: pred {tuple(pred.shape)} vs target {tuple(target.shape)}"
        )
    return (pred - target).abs().mean()


def euler_integrate(
    field: Callable[[Tensor, float], Tensor],
    x0: Tensor,
    steps: int,
    record_trajectory: bool = False,
) -> Tensor | tuple[Tensor, list[Tensor]]:
    """Integrate dx/dt = field(x, t) from t=0 to t=1 with `steps` uniform Euler updates.

    ``field`` receives the current state and the scalar time at the start of
    the step.  Raises NumericError naming the offending step if the field
    returns non-finite values.
    """
    if steps < 1:
        raise DomainError(f"steps must be >= 1, got {steps}")
    dt = 1.0 / steps
    x = x0
    trajectory = [x0] if record_trajectory else None
    for k in range(steps):
        v = field(x, k * dt)
        if not torch.isfinite(v).all():
            raise NumericError(f"velocity field returned non-finite values at step {k}")
        x = x + dt * v
        if trajectory is not None:
            trajectory.append(x)
    if trajectory is not None:
        return x, trajectory
    return x
