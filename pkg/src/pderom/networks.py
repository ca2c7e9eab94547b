"""Conditional INR decoders and the latent dynamics network.

Two decoder families map a latent code plus a spatial coordinate to
field values, one coordinate at a time (mesh-free):

* ``siren`` - an MLP with ``sin(omega0 * (W z + b))`` hidden layers whose
  input is the coordinate concatenated with the latent code.
* ``hyper`` - trig-modulated layers
  ``(W z + b + W' alpha) * [cos(freq x), sin(freq x)]`` where the latent
  code enters only through the per-layer bias shift ``W' alpha`` and the
  frequencies ``freq`` are trainable.  Because every layer is affine in
  ``alpha``, the whole decoder is an affine map of the code for a fixed
  grid; :func:`affine_decomposition` extracts that map once so training
  and inversion can decode whole batches with a single matmul.

The dynamics network is an MLP with the parameterized Swish activation
``x * sigmoid(x * softplus(omega))``; for parameterized PDEs a trainable
linear transform of the PDE parameters is concatenated with the code.

Parameters live in flat ``{name: Tensor}`` dicts so the optimizer can
treat every network uniformly.  Coordinates are normalized to
``[-1, 1]`` per axis using bounds carried by the decoder config; queries
outside the bounds simply extrapolate the continuous field.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffmath as dm
from .diffmath import DualBatch, Tensor, constant, jacobian_fwd

__all__ = [
    "DecoderConfig",
    "DynamicsConfig",
    "init_decoder",
    "init_dynamics",
    "decode",
    "decode_jacobian",
    "affine_decomposition",
    "hyper_layer",
    "dynamics_eval",
]


@dataclass(frozen=True)
class DecoderConfig:
    architecture: str  # "siren" | "hyper"
    latent_dim: int
    layers: int  # number of hidden layers
    width: int
    coord_dim: int
    out_channels: int = 1
    omega0: float = 30.0  # siren frequency scale (fixed, not trained)
    coord_lo: tuple = ()
    coord_hi: tuple = ()

    def __post_init__(self):
        if self.architecture not in ("siren", "hyper"):
            raise ValueError(f"unknown decoder architecture {self.architecture!r}")
        for name in ("latent_dim", "layers", "width", "coord_dim", "out_channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.architecture == "hyper" and self.width % 2 != 0:
            raise ValueError("hyper decoder width must be even (cos/sin split)")
        if len(self.coord_lo) not in (0, self.coord_dim) or len(self.coord_hi) != len(self.coord_lo):
            raise ValueError("coordinate bounds must match coord_dim or be empty")

    def normalize(self, X: np.ndarray) -> np.ndarray:
        """Map physical coordinates into [-1, 1] per axis."""
        X = np.asarray(X, dtype=np.float64)
        if not self.coord_lo:
            return X
        lo = np.asarray(self.coord_lo)
        hi = np.asarray(self.coord_hi)
        return 2.0 * (X - lo) / (hi - lo) - 1.0


@dataclass(frozen=True)
class DynamicsConfig:
    latent_dim: int
    layers: int
    width: int
    param_dim: int = 0  # 0: autonomous in alpha only; >0: beta-conditioned

    def __post_init__(self):
        for name in ("latent_dim", "layers", "width"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.param_dim < 0:
            raise ValueError("param_dim must be >= 0")


def _uniform(rng, lo, hi, shape):
    return rng.uniform(lo, hi, size=shape)


def init_decoder(config: DecoderConfig, seed: int) -> dict[str, Tensor]:
    """Deterministic parameter initialization for a decoder."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    k, w, d, m = config.latent_dim, config.width, config.coord_dim, config.out_channels
    if config.architecture == "siren":
        fan = d + k
        # first layer uses the 1/fan_in bound, later layers sqrt(6/fan)/omega0
        params["l0.W"] = _uniform(rng, -1.0 / fan, 1.0 / fan, (fan, w))
        params["l0.b"] = _uniform(rng, -1.0 / np.sqrt(fan), 1.0 / np.sqrt(fan), (w,))
        for i in range(1, config.layers):
            bound = np.sqrt(6.0 / w) / config.omega0
            params[f"l{i}.W"] = _uniform(rng, -bound, bound, (w, w))
            params[f"l{i}.b"] = _uniform(rng, -1.0 / np.sqrt(w), 1.0 / np.sqrt(w), (w,))
        # plain linear head: the sine-layer bound would shrink outputs by omega0
        bound = np.sqrt(6.0 / w)
        params["out.W"] = _uniform(rng, -bound, bound, (w, m))
        params["out.b"] = _uniform(rng, -1.0 / np.sqrt(w), 1.0 / np.sqrt(w), (m,))
    else:
        half = w // 2
        fan = d
        for i in range(config.layers):
            b = 1.0 / np.sqrt(fan)
            params[f"l{i}.W"] = _uniform(rng, -b, b, (fan, w))
            params[f"l{i}.b"] = _uniform(rng, -b, b, (w,))
            params[f"l{i}.Wm"] = _uniform(rng, -1.0 / np.sqrt(k), 1.0 / np.sqrt(k), (k, w))
            params[f"l{i}.freq"] = rng.standard_normal((half, d)) * (30.0 / d)
            fan = w
        b = 1.0 / np.sqrt(w)
        params["out.W"] = _uniform(rng, -b, b, (w, m))
        params["out.b"] = _uniform(rng, -b, b, (m,))
        params["out.Wm"] = _uniform(rng, -1.0 / np.sqrt(k), 1.0 / np.sqrt(k), (k, m))
    return {name: Tensor(v) for name, v in params.items()}


def init_dynamics(config: DynamicsConfig, seed: int) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    k = config.latent_dim
    fan = k + (k if config.param_dim else 0)  # beta projects to width k
    if config.param_dim:
        b = 1.0 / np.sqrt(config.param_dim)
        params["beta.W"] = _uniform(rng, -b, b, (config.param_dim, k))
        params["beta.b"] = _uniform(rng, -b, b, (k,))
    for i in range(config.layers):
        b = 1.0 / np.sqrt(fan)
        params[f"l{i}.W"] = _uniform(rng, -b, b, (fan, config.width))
        params[f"l{i}.b"] = _uniform(rng, -b, b, (config.width,))
        params[f"l{i}.omega"] = np.array(1.0)
        fan = config.width
    b = 1.0 / np.sqrt(fan)
    params["out.W"] = _uniform(rng, -b, b, (fan, k))
    params["out.b"] = _uniform(rng, -b, b, (k,))
    return {name: Tensor(v) for name, v in params.items()}


def _alpha_shape(alpha):
    v = alpha.value if isinstance(alpha, DualBatch) else alpha
    return v.shape


def _rows_from_code(alpha, n_rows: int, rs: bool):
    """Tile a code (..., k) into per-coordinate rows (..., n_rows, k)."""
    shape = _alpha_shape(alpha)
    k = shape[-1]
    ones = constant(np.ones((n_rows, 1)))
    flat = dm.reshape(alpha, (*shape[:-1], 1, k))
    return dm.matmul(ones, flat, rs)


def _coord_rows(xn: np.ndarray, alpha) -> np.ndarray:
    """Coordinate block shaped to match the tiled code rows."""
    shape = _alpha_shape(alpha)
    if xn.ndim == 2 and len(shape) == 2:
        return np.broadcast_to(xn, (shape[0], *xn.shape))
    return xn


def hyper_layer(z, x_trig, layer: dict, alpha, final: bool = False,
                rs: bool = True):
    """One trig-modulated layer: ``(W z + b + Wm alpha) * [cos, sin]``.

    ``x_trig`` is the precomputed modulation vector ``[cos(freq x),
    sin(freq x)]`` for this layer (ignored when ``final``, where the
    layer reduces to the affine part).  ``alpha`` may be a Tensor or a
    DualBatch; the bias shift is linear in it either way.
    """
    shape = _alpha_shape(alpha)
    mu = dm.matmul(dm.reshape(alpha, (*shape[:-1], 1, shape[-1])), layer["Wm"], rs)
    pre = dm.add(dm.add(dm.matmul(z, layer["W"], rs), layer["b"]), mu)
    if final:
        return pre
    return dm.mul(pre, x_trig)


def _hyper_trig(params, xn_t: Tensor, i: int, rs: bool) -> Tensor:
    freq = params[f"l{i}.freq"]
    phase = dm.matmul(xn_t, dm.transpose(freq), rs)
    return dm.concat([dm.cos(phase), dm.sin(phase)], axis=-1)


def decode(config: DecoderConfig, params: dict, alpha, X: np.ndarray,
           fast: bool = False):
    """Evaluate the decoder on every coordinate of ``X``.

    ``alpha`` is a Tensor of shape (k,) or (B, k) - or a DualBatch of
    either - and ``X`` is (N, d) physical coordinates shared by the
    batch, or (B, N, d) per-snapshot grids.  Rows of the output are
    computed independently; permuting ``X`` permutes the rows, exactly.

    ``fast=True`` switches the matmuls to blocked BLAS kernels: a few
    ulps of rounding may then depend on row position, which training
    and inversion loops accept in exchange for an order of magnitude
    in throughput.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.shape[-1] != config.coord_dim:
        raise ValueError(
            f"coordinates have dimension {X.shape[-1]}, expected {config.coord_dim}"
        )
    shape = _alpha_shape(alpha)
    if shape[-1] != config.latent_dim:
        raise ValueError(
            f"latent code has dimension {shape[-1]}, expected {config.latent_dim}"
        )
    xn = config.normalize(X)
    n = xn.shape[-2]
    rs = not fast

    if config.architecture == "siren":
        rows = _rows_from_code(alpha, n, rs)
        xin = constant(_coord_rows(xn, alpha))
        z = dm.concat([xin, rows], axis=-1)
        dualmode = isinstance(z, DualBatch)
        for i in range(config.layers):
            if dualmode:
                pre = dm.add(dm.matmul(z, params[f"l{i}.W"], rs), params[f"l{i}.b"])
                z = dm.sin(dm.mul(pre, constant(np.float64(config.omega0))))
            else:
                z = dm.sine_affine(z, params[f"l{i}.W"], params[f"l{i}.b"],
                                   config.omega0, rs)
        return dm.add(dm.matmul(z, params["out.W"], rs), params["out.b"])

    xn_t = constant(xn)
    z = xn_t
    for i in range(config.layers):
        trig = _hyper_trig(params, xn_t, i, rs)
        layer = {key: params[f"l{i}.{key}"] for key in ("W", "b", "Wm")}
        z = hyper_layer(z, trig, layer, alpha, rs=rs)
    out_layer = {key: params[f"out.{key}"] for key in ("W", "b", "Wm")}
    return hyper_layer(z, None, out_layer, alpha, final=True, rs=rs)


def decode_jacobian(config: DecoderConfig, params: dict, alpha, X: np.ndarray) -> Tensor:
    """Jacobian of the flattened decoder output w.r.t. a single code.

    Forward-mode with one tangent per latent dimension; the result stays
    differentiable w.r.t. the decoder parameters and the code.
    """
    return jacobian_fwd(lambda d: decode(config, params, d, X), alpha)


def affine_decomposition(config: DecoderConfig, params: dict, X: np.ndarray,
                         fast: bool = False):
    """Express a hyper decoder on a fixed grid as ``u = alpha @ A + c``.

    Returns ``(A, c)`` with ``A`` of shape (k, N*m) and ``c`` of shape
    (N*m,), both tape tensors.  Exact for the hyper architecture, whose
    layers are affine in the code; rejected for siren.  Decoding a batch
    then costs one (B, k) x (k, N*m) matmul instead of B network passes.
    """
    if config.architecture != "hyper":
        raise ValueError("affine decomposition requires the hyper architecture")
    k = config.latent_dim
    basis = np.vstack([np.zeros((1, k)), np.eye(k)])
    out = decode(config, params, constant(basis), X, fast=fast)  # (k+1, N, m)
    nm = out.shape[1] * out.shape[2]
    flat = dm.reshape(out, (k + 1, nm))
    c = dm.reshape(dm.slice_(flat, (slice(0, 1),)), (nm,))
    A = dm.sub(dm.slice_(flat, (slice(1, k + 1),)), c)
    return A, c


def _swish(x, omega):
    gate = dm.sigmoid(dm.mul(x, dm.softplus(omega)))
    return dm.mul(x, gate)


def dynamics_eval(config: DynamicsConfig, params: dict, alpha, beta=None) -> Tensor:
    """Latent rate prediction d(alpha)/dt; autonomous (no time input).

    ``alpha``: (k,) or (B, k).  ``beta`` must be supplied exactly when
    the config is parameterized, shaped (p,) or (B, p).
    """
    if (beta is None) == bool(config.param_dim):
        raise ValueError(
            "beta required for parameterized dynamics and forbidden otherwise"
        )
    a = dm.as_tensor(alpha)
    single = a.ndim == 1
    if single:
        a = dm.reshape(a, (1, -1))
    z = a
    if config.param_dim:
        b = dm.as_tensor(beta)
        if b.ndim == 1:
            b = dm.reshape(b, (1, -1))
        if b.shape[-1] != config.param_dim:
            raise ValueError(
                f"beta has dimension {b.shape[-1]}, expected {config.param_dim}"
            )
        bstar = dm.add(dm.matmul(b, params["beta.W"]), params["beta.b"])
        if bstar.shape[0] != z.shape[0]:
            bstar = dm.broadcast_to(bstar, (z.shape[0], bstar.shape[1]))
        z = dm.concat([z, bstar], axis=-1)
    for i in range(config.layers):
        lin = dm.add(dm.matmul(z, params[f"l{i}.W"]), params[f"l{i}.b"])
        z = _swish(lin, params[f"l{i}.omega"])
    out = dm.add(dm.matmul(z, params["out.W"]), params["out.b"])
    return dm.reshape(out, (-1,)) if single else out
