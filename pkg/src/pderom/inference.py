"""Forecasting: inversion, latent ODE integration, decoding.

A new initial condition enters the latent space by inversion: minimize
the reconstruction error over the code with AdamW from a zero start,
observing the field on whatever grid is available (full, sparse, or
irregular).  Inversion happens once per forecast; time evolution then
runs entirely in latent space with an adaptive embedded Runge-Kutta
3(2) pair (the Bogacki-Shampine coefficients, FSAL), and any query grid
can be decoded at any target time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffmath as dm
from .diffmath import Tensor, backward, constant, no_grad
from .losses import field_rnmse
from .networks import (
    DecoderConfig,
    DynamicsConfig,
    affine_decomposition,
    decode,
    dynamics_eval,
)
from .training import Model, TrainingConfig, adamw_init, adamw_step

__all__ = [
    "InversionConfig",
    "IntegratorConfig",
    "IntegrationError",
    "invert",
    "integrate",
    "forecast",
]


@dataclass(frozen=True)
class InversionConfig:
    steps: int = 1000
    lr: float = 0.1

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("inversion needs at least one step")


@dataclass(frozen=True)
class IntegratorConfig:
    rtol: float = 1e-5
    atol: float = 1e-6
    max_steps: int = 100_000
    dt_init: float | None = None  # default: first target spacing
    safety: float = 0.9
    min_factor: float = 0.2
    max_factor: float = 5.0

    def __post_init__(self):
        if self.rtol <= 0 or self.atol <= 0:
            raise ValueError("tolerances must be positive")


class IntegrationError(Exception):
    def __init__(self, t_reached: float, msg: str):
        super().__init__(f"{msg} (integration reached t = {t_reached:.6g})")
        self.t_reached = t_reached


def invert(config: DecoderConfig, params: dict, u0: np.ndarray, X: np.ndarray,
           inversion: InversionConfig = InversionConfig()):
    """Latent code(s) minimizing reconstruction error of observed fields.

    ``u0`` is (N, m) for one field or (B, N, m) for a batch sharing the
    grid ``X``; batched fields are inverted independently (their losses
    do not interact).  Returns ``(codes, final_loss)`` where codes is
    (k,) or (B, k) and final_loss the per-field reconstruction error at
    the returned codes.
    """
    u0 = np.asarray(u0, dtype=np.float64)
    single = u0.ndim == 2
    batch = u0[None] if single else u0
    b = batch.shape[0]
    k = config.latent_dim

    tparams = {name: constant(v) for name, v in params.items()}
    opt_config = TrainingConfig(
        epochs=1, warmup_epochs=0, lr0=inversion.lr, weight_decay=0.0
    )

    # decoder parameters are frozen during inversion; for the affine
    # (hyper) architecture the whole decoder collapses to one matrix
    if config.architecture == "hyper":
        with no_grad():
            A, c = affine_decomposition(config, tparams, X, fast=True)
        A, c = constant(A.data), constant(c.data)
        nm = A.shape[1]

        def predict(code):
            flat = dm.add(dm.matmul(code, A), c)
            return dm.reshape(flat, (code.shape[0], nm // config.out_channels,
                                     config.out_channels))
    else:
        def predict(code):
            return decode(config, tparams, code, X, fast=True)

    alpha = {"alpha": Tensor(np.zeros((b, k)), requires_grad=True)}
    state = adamw_init(alpha)
    for step in range(inversion.steps):
        loss_rows = field_rnmse(predict(alpha["alpha"]), batch)
        loss = dm.sum_(loss_rows)  # rows are independent; sum decouples
        if not np.isfinite(loss.data):
            raise FloatingPointError(f"non-finite inversion loss at step {step}")
        (g,) = backward(loss, [alpha["alpha"]])
        alpha, state = adamw_step(alpha, {"alpha": g}, state, inversion.lr, opt_config)
    with no_grad():
        final = field_rnmse(predict(alpha["alpha"]), batch).data
    codes = alpha["alpha"].data
    return (codes[0], float(final[0])) if single else (codes, final)


# Bogacki-Shampine 3(2): four stages, FSAL, embedded 2nd-order estimate
_BS_C = (0.0, 0.5, 0.75, 1.0)
_BS_B_HIGH = (2.0 / 9.0, 1.0 / 3.0, 4.0 / 9.0, 0.0)
_BS_B_ERR = (-5.0 / 72.0, 1.0 / 12.0, 1.0 / 9.0, -1.0 / 8.0)  # high minus low


def integrate(config: DynamicsConfig, params: dict, alpha0: np.ndarray,
              t0: float, targets, beta=None,
              integrator: IntegratorConfig = IntegratorConfig()) -> np.ndarray:
    """Adaptive RK3(2) integration of the latent dynamics to each target.

    ``targets`` must be sorted, all >= t0.  Dense output between
    accepted steps is the cubic Hermite interpolant, third-order
    accurate for this pair.  Step sizes follow a PI controller on the
    embedded error estimate with rejection when the estimate exceeds
    tolerance.
    """
    targets = np.asarray(targets, dtype=np.float64)
    if targets.ndim != 1 or len(targets) == 0:
        raise ValueError("targets must be a non-empty 1-D time list")
    if (np.diff(targets) <= 0).any():
        raise ValueError("targets must be strictly increasing")
    if targets[0] < t0:
        raise ValueError("targets must not precede t0")

    tparams = {name: constant(v) for name, v in params.items()}
    beta_t = None if beta is None else constant(np.asarray(beta, dtype=np.float64))

    def f(y: np.ndarray) -> np.ndarray:
        with no_grad():
            return dynamics_eval(config, tparams, constant(y), beta_t).data

    out = np.empty((len(targets), len(alpha0)))
    write = 0
    t, y = float(t0), np.asarray(alpha0, dtype=np.float64).copy()
    k1 = f(y)

    # emit any targets equal to t0 immediately
    while write < len(targets) and targets[write] <= t:
        out[write] = y
        write += 1
    if write == len(targets):
        return out

    span = targets[-1] - t
    dt = integrator.dt_init if integrator.dt_init is not None else (
        targets[0] - t if targets[0] > t else span / max(len(targets), 1)
    )
    dt = min(max(dt, 1e-12), span)
    err_prev = 1.0
    order = 3.0

    for _ in range(integrator.max_steps):
        dt = min(dt, targets[-1] - t)
        k2 = f(y + dt * 0.5 * k1)
        k3 = f(y + dt * 0.75 * k2)
        y_new = y + dt * (
            _BS_B_HIGH[0] * k1 + _BS_B_HIGH[1] * k2 + _BS_B_HIGH[2] * k3
        )
        k4 = f(y_new)  # FSAL: becomes k1 of the next step when accepted
        err_vec = dt * (
            _BS_B_ERR[0] * k1 + _BS_B_ERR[1] * k2
            + _BS_B_ERR[2] * k3 + _BS_B_ERR[3] * k4
        )
        scale = integrator.atol + integrator.rtol * np.maximum(np.abs(y), np.abs(y_new))
        err = float(np.sqrt(np.mean((err_vec / scale) ** 2)))

        if err <= 1.0:
            t_new = t + dt
            # dense output: cubic Hermite on (y, k1) -- (y_new, k4)
            while write < len(targets) and targets[write] <= t_new + 1e-14:
                s = (targets[write] - t) / dt
                h00 = (1 + 2 * s) * (1 - s) ** 2
                h10 = s * (1 - s) ** 2
                h01 = s * s * (3 - 2 * s)
                h11 = s * s * (s - 1)
                out[write] = h00 * y + h10 * dt * k1 + h01 * y_new + h11 * dt * k4
                write += 1
            if write == len(targets):
                return out
            t, y, k1 = t_new, y_new, k4
            factor = integrator.safety * err ** (-0.7 / order) * err_prev ** (0.4 / order)
            err_prev = max(err, 1e-10)
        else:
            factor = integrator.safety * err ** (-1.0 / order)
        dt *= min(max(factor, integrator.min_factor), integrator.max_factor)
        if dt <= 1e-14:
            raise IntegrationError(t, "step size underflow")
    raise IntegrationError(t, f"max_steps = {integrator.max_steps} exhausted")


def forecast(model: Model, u0: np.ndarray, X: np.ndarray, times,
             query_grid: np.ndarray | None = None, beta=None,
             inversion: InversionConfig = InversionConfig(),
             integrator: IntegratorConfig = IntegratorConfig()) -> np.ndarray:
    """Invert an initial condition, evolve it, decode on a query grid.

    ``u0`` lives on grid ``X`` (any subset or superset of the solver
    grid); ``times`` are absolute times with the initial condition at
    ``times[0]``.  Decodes on ``query_grid`` (default: the solver grid)
    at every requested time.  ``beta`` must carry the PDE parameters for
    parameterized dynamics.  Returns (T, N_query, m).
    """
    Xq = model.spec.grid.coords() if query_grid is None else np.asarray(query_grid)
    times = np.asarray(times, dtype=np.float64)
    alpha0, _ = invert(model.decoder_config, model.decoder_params, u0, X, inversion)
    if integrator.dt_init is None:
        integrator = IntegratorConfig(
            rtol=integrator.rtol, atol=integrator.atol,
            max_steps=integrator.max_steps, dt_init=model.snapshot_dt,
            safety=integrator.safety, min_factor=integrator.min_factor,
            max_factor=integrator.max_factor,
        )
    codes = integrate(
        model.dynamics_config, model.dynamics_params, alpha0,
        times[0], times, beta=beta, integrator=integrator,
    )
    dec_params = {k: constant(v) for k, v in model.decoder_params.items()}
    cfg = model.decoder_config
    with no_grad():
        if cfg.architecture == "hyper":
            # exact-mode affine map keeps the per-coordinate row contract
            # while decoding all times with one product
            A, c = affine_decomposition(cfg, dec_params, Xq)
            flat = dm.add(dm.matmul(constant(codes), A, True), c)
            fields = dm.reshape(
                flat, (len(times), len(Xq), cfg.out_channels)
            )
        else:
            fields = decode(cfg, dec_params, constant(codes), Xq)
    return fields.data
