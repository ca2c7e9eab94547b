"""Reconstruction and physics-informed dynamics losses.

The reconstruction loss measures normalized field error between decoded
and observed snapshots.  The dynamics loss projects the solver-given
field rate into latent space: decode the field on the solver grid, step
it through the differentiable solver to get ``du/dt``, restrict rate and
decoder Jacobian to a random subset of grid points (stochastic
hyper-reduction), solve the reduced least-squares system for the target
latent rate, and penalize the dynamics network's deviation from it.
Everything stays on the tape, so the dynamics loss regularizes the
decoder and the latent codes through the solver, not just the dynamics
network.

``batch_terms`` is the vectorized path used by training.  It computes
the same quantities for a whole batch of snapshots at once and, for the
hyper decoder, goes through the affine decomposition: one basis decode
per step instead of one decode per snapshot, with identical math.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffmath as dm
from .diffmath import DualBatch, Tensor, as_tensor, constant, no_grad, qr_lstsq, stop_gradient
from .networks import (
    DecoderConfig,
    DynamicsConfig,
    affine_decomposition,
    decode,
    dynamics_eval,
)
from .solvers import SolverSpec, time_derivative

__all__ = [
    "NORM_GUARD",
    "DegenerateNormError",
    "ReducedSample",
    "draw_subset",
    "field_rnmse",
    "latent_rnmse",
    "reconstruction_loss",
    "compute_alpha_dot_star",
    "dynamics_loss",
    "total_loss",
    "batch_terms",
]

NORM_GUARD = 1e-12  # norms below this raise instead of producing huge losses


class DegenerateNormError(Exception):
    """A normalization denominator fell below the guard threshold."""


@dataclass(frozen=True)
class ReducedSample:
    """Grid-point subset used by stochastic hyper-reduction."""

    indices: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices)
        if idx.ndim != 1 or idx.size < 1:
            raise ValueError("subset must be a non-empty index vector")
        if len(np.unique(idx)) != idx.size:
            raise ValueError("subset indices must be unique")

    @property
    def size(self) -> int:
        return self.indices.size


def draw_subset(rng: np.random.Generator, n_points: int, gamma: float) -> ReducedSample:
    """Uniform without-replacement draw of ``floor(gamma * N)`` grid points."""
    if not 0.0 < gamma <= 1.0:
        raise ValueError("gamma must lie in (0, 1]")
    size = int(gamma * n_points)
    if size < 1:
        raise ValueError(f"gamma = {gamma} selects no points out of {n_points}")
    return ReducedSample(rng.choice(n_points, size=size, replace=False))


def _label_norms(label: np.ndarray) -> np.ndarray:
    norms = np.sqrt((label * label).sum(axis=-2))
    bad = norms < NORM_GUARD
    if bad.any():
        where = np.argwhere(bad)[0]
        raise DegenerateNormError(
            f"label channel {tuple(where)} has near-zero norm ({norms[tuple(where)]:.3e})"
        )
    return norms


def field_rnmse(pred, label) -> Tensor:
    """Channel-averaged normalized field error.

    ``pred`` is a tensor shaped (..., N, m); ``label`` is an array of
    the same shape.  Per channel the Frobenius error over the spatial
    axis is divided by the label norm, then averaged over channels.
    Scalar for a single snapshot, one value per leading element for a
    batch.
    """
    pred = as_tensor(pred)
    label = np.asarray(label, dtype=np.float64)
    if pred.shape != label.shape:
        raise ValueError(f"shape mismatch: prediction {pred.shape} vs label {label.shape}")
    denom = _label_norms(label)
    diff = dm.sub(pred, constant(label))
    num = dm.sqrt(dm.sum_(dm.mul(diff, diff), axis=-2))
    return dm.mean_(dm.div(num, constant(denom)), axis=-1)


def latent_rnmse(pred, target) -> Tensor:
    """Normalized latent-rate error with a gradient-stopped denominator.

    ``||pred - target|| / ||sg(target)||`` along the last axis.  The
    numerator backpropagates into both arguments; the denominator is
    treated as a constant so that a shrinking target cannot inflate its
    own gradient.
    """
    pred, target = as_tensor(pred), as_tensor(target)
    denom_val = np.sqrt((target.data * target.data).sum(axis=-1))
    if (denom_val < NORM_GUARD).any():
        raise DegenerateNormError(
            f"target latent rate has near-zero norm (min {denom_val.min():.3e})"
        )
    num = dm.norm2(dm.sub(pred, target), axis=-1)
    return dm.div(num, stop_gradient(constant(denom_val)))


def reconstruction_loss(config: DecoderConfig, params: dict, alpha, snapshot,
                        X: np.ndarray, fast: bool = False) -> Tensor:
    """Normalized error of the decoded field against an observed snapshot.

    The observation grid ``X`` is arbitrary; it does not have to match
    the solver grid (partial or irregular observations decode just as
    well).
    """
    return field_rnmse(decode(config, params, alpha, X, fast=fast), snapshot)


def _flat_channels(spec: SolverSpec, config: DecoderConfig) -> int:
    if config.out_channels != 1:
        raise ValueError("built-in solvers evolve single-channel fields")
    return spec.grid.num_points


def compute_alpha_dot_star(config: DecoderConfig, params: dict, alpha,
                           spec: SolverSpec, subset: ReducedSample,
                           beta=None, fast: bool = False) -> Tensor:
    """Target latent rate: least-squares projection of the solver rate.

    Decodes the field on the full solver grid, differentiates it in time
    through the solver, restricts rate and forward-mode decoder Jacobian
    to the subset, and solves ``J x = du/dt`` in the least-squares
    sense.  Differentiable with respect to decoder parameters and the
    code through the entire chain, solver included.
    """
    n = _flat_channels(spec, config)
    k = config.latent_dim
    if subset.size < k:
        raise ValueError(f"subset of {subset.size} rows cannot determine {k} latents")
    if subset.indices.max() >= n:
        raise ValueError("subset index out of grid bounds")
    X = spec.grid.coords()
    u_hat = decode(config, params, alpha, X, fast=fast)  # (N, 1)
    rate = time_derivative(spec, dm.reshape(u_hat, spec.grid.shape), beta)
    rate_sub = dm.take_rows(dm.reshape(rate, (n,)), subset.indices)
    jac = dm.jacobian_fwd(
        lambda a: decode(config, params, a, X[subset.indices], fast=fast), alpha
    )
    return qr_lstsq(jac, rate_sub)


def dynamics_loss(dec_config: DecoderConfig, dec_params: dict,
                  dyn_config: DynamicsConfig, dyn_params: dict,
                  alpha, spec: SolverSpec, gamma: float,
                  rng: np.random.Generator, beta=None,
                  fast: bool = False) -> Tensor:
    """Normalized error between predicted and solver-projected latent rates.

    A fresh hyper-reduction subset is drawn from ``rng`` on every call.
    """
    subset = draw_subset(rng, spec.grid.num_points, gamma)
    target = compute_alpha_dot_star(
        dec_config, dec_params, alpha, spec, subset, beta=beta, fast=fast
    )
    pred = dynamics_eval(dyn_config, dyn_params, alpha, beta)
    return latent_rnmse(pred, target)


def total_loss(dec_config: DecoderConfig, dec_params: dict,
               dyn_config: DynamicsConfig, dyn_params: dict,
               alpha, snapshot, X_obs: np.ndarray, spec: SolverSpec,
               lam: float, gamma: float, rng: np.random.Generator,
               beta=None, fast: bool = False) -> Tensor:
    """Weighted objective ``lam * L_rec + (1 - lam) * L_dyn``."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lam must lie in [0, 1]")
    rec = reconstruction_loss(dec_config, dec_params, alpha, snapshot, X_obs, fast=fast)
    dyn = dynamics_loss(
        dec_config, dec_params, dyn_config, dyn_params, alpha, spec, gamma, rng,
        beta=beta, fast=fast,
    )
    return dm.add(dm.mul(rec, lam), dm.mul(dyn, 1.0 - lam))


# ----------------------------------------------------------------------
# vectorized training path


def _batched_jacobian_siren(config, params, alpha_b: Tensor, coords_b: np.ndarray) -> Tensor:
    """Per-snapshot decoder Jacobians on per-snapshot coordinate subsets.

    ``alpha_b`` is (B, k); ``coords_b`` is (B, n, d).  Returns (B, n*m, k).
    One dual decode carries all k tangents for the whole batch.
    """
    b, k = alpha_b.shape
    seeds = np.broadcast_to(np.eye(k)[:, None, :], (k, b, k))
    dual = DualBatch(alpha_b, constant(seeds))
    out = decode(config, params, dual, coords_b, fast=True)
    nm = out.value.shape[-2] * out.value.shape[-1]
    tang = dm.reshape(out.tangent, (k, b, nm))
    return dm.transpose(tang, (1, 2, 0))


def batch_terms(dec_config: DecoderConfig, dec_params: dict,
                dyn_config: DynamicsConfig, dyn_params: dict,
                alpha_b: Tensor, snapshots: np.ndarray,
                spec: SolverSpec, subset_idx: np.ndarray,
                obs_indices: np.ndarray | None = None,
                beta_b: np.ndarray | None = None,
                warmup: bool = False):
    """Both loss terms for a batch of snapshots, sharing decodes.

    ``alpha_b``: (B, k) codes on the tape.  ``snapshots``: (B, N_obs, 1)
    observed values on the training grid, which is either the full
    solver grid (``obs_indices`` None) or the fixed sparse subset
    ``obs_indices`` of it.  ``subset_idx``: (B, n_sub) hyper-reduction
    draws, one row per snapshot.  ``beta_b``: (B, p) PDE parameters for
    parameterized problems.

    In warm-up mode the dynamics target and the codes feeding the
    dynamics network are detached, so that term trains the dynamics
    network alone while reconstruction trains decoder and codes, exactly
    the two-phase split of the training procedure.

    Returns ``(rec_mean, dyn_mean)`` as scalar tensors.
    """
    n = _flat_channels(spec, dec_config)
    b, k = alpha_b.shape
    X_solver = spec.grid.coords()

    beta_t = None if beta_b is None else constant(beta_b)

    # one field decode on the solver grid serves both loss terms; for the
    # hyper decoder the affine map also supplies every Jacobian row
    affine = None
    if dec_config.architecture == "hyper":
        affine = affine_decomposition(dec_config, dec_params, X_solver, fast=True)
        u_flat = dm.add(dm.matmul(alpha_b, affine[0]), affine[1])  # (B, N)
    else:
        u_full = decode(dec_config, dec_params, alpha_b, X_solver, fast=True)
        u_flat = dm.reshape(u_full, (b, n))

    if obs_indices is None:
        u_obs = u_flat
    else:
        u_obs = dm.transpose(dm.take_rows(dm.transpose(u_flat), obs_indices))
    rec = field_rnmse(
        dm.reshape(u_obs, (b, u_obs.shape[-1], 1)), snapshots
    )

    # dynamics term: solver rate restricted to the per-snapshot subsets
    u_dyn = stop_gradient(u_flat) if warmup else u_flat
    rate = time_derivative(spec, dm.reshape(u_dyn, (b, *spec.grid.shape)), beta_t)
    rate_sub = dm.take_along(dm.reshape(rate, (b, n)), subset_idx, axis=1)

    if warmup:
        with no_grad():
            jac = _dynamics_jacobian(
                dec_config, dec_params, alpha_b, spec, subset_idx, affine
            )
            target = qr_lstsq(jac, rate_sub)
        alpha_in = stop_gradient(alpha_b)
    else:
        jac = _dynamics_jacobian(
            dec_config, dec_params, alpha_b, spec, subset_idx, affine
        )
        target = qr_lstsq(jac, rate_sub)
        alpha_in = alpha_b

    pred = dynamics_eval(dyn_config, dyn_params, alpha_in, beta_t)
    dyn = latent_rnmse(pred, target)
    return dm.mean_(rec), dm.mean_(dyn)


def _dynamics_jacobian(dec_config, dec_params, alpha_b, spec, subset_idx, affine):
    if affine is not None:
        return dm.take_rows(dm.transpose(affine[0]), subset_idx)  # (B, n_sub, k)
    coords = spec.grid.coords()[subset_idx]  # (B, n_sub, d)
    return _batched_jacobian_siren(dec_config, dec_params, alpha_b, coords)
