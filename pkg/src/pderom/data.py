"""Dataset generation, sparse observation grids, and serialization.

Datasets hold full-solver-grid snapshot arrays; a sparse observation
setting is metadata (a fixed index subset shared by every snapshot and
trajectory), so the full-grid labels always stay available for
evaluation while training sees only the restricted views.

Files use one self-describing little-endian container for datasets and
model checkpoints alike: an 8-byte magic string, a format version, a
length-prefixed canonical-JSON header describing configuration and the
name/shape/dtype/offset of every array, then the raw array bytes.
Saving is canonical, so save -> load -> save reproduces a file byte for
byte.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .networks import DecoderConfig, DynamicsConfig
from .solvers import Grid, SolverSpec, rollout
from .training import Model, TrainingConfig

__all__ = [
    "Trajectory",
    "Dataset",
    "SparseGrid",
    "FormatError",
    "gen_diffusion",
    "gen_burgers",
    "subsample_grid",
    "save_dataset",
    "load_dataset",
    "save_model",
    "load_model",
    "BURGERS_TRAIN_MU",
    "BURGERS_TEST_MU",
]

MAGIC = b"PDROMBIN"
VERSION = 1

BURGERS_TRAIN_MU = (0.015, 0.0171, 0.0193, 0.0214, 0.0236, 0.0257, 0.0279, 0.03)
BURGERS_TEST_MU = (0.0129, 0.0161, 0.0182, 0.0204, 0.0225, 0.0246, 0.0268,
                   0.0289, 0.0321)

DIFFUSION_BLOB_CENTER = (-12.0, 12.0)
DIFFUSION_BLOB_SIGMA = (3.0, 10.0)
DIFFUSION_BLOB_AMP = (0.5, 2.0)


class FormatError(Exception):
    """The file is not a valid container of the expected version."""


@dataclass
class Trajectory:
    snapshots: np.ndarray  # (T+1, N, m), time-ordered
    beta: np.ndarray  # (p,), empty for unparameterized problems

    def __post_init__(self):
        if self.snapshots.ndim != 3:
            raise ValueError("snapshots must be (T+1, N, m)")


@dataclass(frozen=True)
class SparseGrid:
    """Fixed observation subset shared by all snapshots of a dataset."""

    indices: np.ndarray
    fraction: float


@dataclass
class Dataset:
    spec: SolverSpec
    snapshot_dt: float
    t_train: int
    t_test: int
    seed: int
    train: list
    test: list
    val: list = field(default_factory=list)
    obs_indices: np.ndarray | None = None
    sparse_fraction: float | None = None

    @property
    def obs_coords(self) -> np.ndarray:
        coords = self.spec.grid.coords()
        return coords if self.obs_indices is None else coords[self.obs_indices]

    def observed(self, trajectory: Trajectory) -> np.ndarray:
        """Snapshot values restricted to the observation grid."""
        snaps = trajectory.snapshots
        return snaps if self.obs_indices is None else snaps[:, self.obs_indices]


def diffusion_spec() -> SolverSpec:
    grid = Grid(lo=(-20.0, -20.0), hi=(20.0, 20.0), shape=(42, 42))
    return SolverSpec("diffusion2d", grid, dt=0.1, params={"kappa": 2.0})


def burgers_spec() -> SolverSpec:
    grid = Grid(lo=(0.0,), hi=(100.0,), shape=(256,))
    return SolverSpec("burgers1d", grid, dt=0.025, params={})


def _gaussian_blob(grid: Grid, rng: np.random.Generator) -> np.ndarray:
    xy = grid.coords()
    mx = rng.uniform(*DIFFUSION_BLOB_CENTER)
    my = rng.uniform(*DIFFUSION_BLOB_CENTER)
    sigma = rng.uniform(*DIFFUSION_BLOB_SIGMA)
    amp = rng.uniform(*DIFFUSION_BLOB_AMP)
    u = amp * np.exp(
        -((xy[:, 0] - mx) ** 2 + (xy[:, 1] - my) ** 2) / (2.0 * sigma**2)
    ).reshape(grid.shape)
    u[0, :] = u[-1, :] = 0.0  # zero Dirichlet ring, exactly
    u[:, 0] = u[:, -1] = 0.0
    return u


def gen_diffusion(n_traj: int, seed: int, n_test: int = 32, n_val: int = 16) -> Dataset:
    """Random Gaussian-blob trajectories under 2-D diffusion.

    ``n_traj`` training trajectories plus test/validation splits, all
    rolled out to the test horizon (200 saved steps at dt = 0.1); the
    training window marker t_train = 25 lives in the metadata.
    """
    if n_traj < 1:
        raise ValueError("need at least one training trajectory")
    spec = diffusion_spec()
    rng = np.random.default_rng(seed)
    t_test = 200

    def make() -> Trajectory:
        u0 = _gaussian_blob(spec.grid, rng)
        traj = rollout(spec, u0, n_steps=t_test, save_every=1)
        return Trajectory(traj.reshape(t_test + 1, -1, 1), np.empty(0))

    train = [make() for _ in range(n_traj)]
    test = [make() for _ in range(n_test)]
    val = [make() for _ in range(n_val)]
    return Dataset(spec, spec.dt, t_train=25, t_test=t_test, seed=seed,
                   train=train, test=test, val=val)


def gen_burgers(seed: int = 0) -> Dataset:
    """The forced Burgers' benchmark: one initial profile, varying source.

    Eight training and nine test source exponents (two of them outside
    the training range), 256-point grid, 200 saved steps of 0.2 time
    units each (solver substeps every 0.025), training window 100.
    """
    spec = burgers_spec()
    save_every = 8
    t_test = 200
    w0 = np.ones(spec.grid.shape[0])

    def make(mu: float) -> Trajectory:
        traj = rollout(spec, w0, n_steps=t_test * save_every,
                       save_every=save_every, beta=mu)
        return Trajectory(traj.reshape(t_test + 1, -1, 1), np.array([mu]))

    train = [make(mu) for mu in BURGERS_TRAIN_MU]
    test = [make(mu) for mu in BURGERS_TEST_MU]
    return Dataset(spec, spec.dt * save_every, t_train=100, t_test=t_test,
                   seed=seed, train=train, test=test)


def subsample_grid(dataset: Dataset, fraction: float, seed: int):
    """Restrict observations to a fixed random subset of the solver grid.

    One uniform without-replacement draw applies to every snapshot of
    every trajectory; full-grid labels stay in the dataset for
    evaluation.  Returns the restricted dataset and the subset.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    n = dataset.spec.grid.num_points
    size = int(fraction * n)
    if size < 1:
        raise ValueError(f"fraction {fraction} keeps no grid points")
    indices = np.random.default_rng(seed).choice(n, size=size, replace=False)
    sparse = SparseGrid(indices=indices, fraction=fraction)
    restricted = Dataset(
        spec=dataset.spec, snapshot_dt=dataset.snapshot_dt,
        t_train=dataset.t_train, t_test=dataset.t_test, seed=dataset.seed,
        train=dataset.train, test=dataset.test, val=dataset.val,
        obs_indices=indices, sparse_fraction=fraction,
    )
    return restricted, sparse


# ----------------------------------------------------------------------
# binary container


def _canonical(header: dict) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _write_container(path, header: dict, arrays: dict) -> None:
    manifest = []
    offset = 0
    blobs = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        code = {"float64": "<f8", "int64": "<i8"}.get(arr.dtype.name)
        if code is None:
            raise ValueError(f"unsupported dtype {arr.dtype} for array {name!r}")
        raw = arr.astype(code).tobytes()
        manifest.append(
            {"name": name, "shape": list(arr.shape), "dtype": code, "offset": offset}
        )
        blobs.append(raw)
        offset += len(raw)
    header = dict(header, arrays=manifest)
    payload = _canonical(header)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(np.uint32(VERSION).tobytes())
        fh.write(np.uint64(len(payload)).tobytes())
        fh.write(payload)
        for raw in blobs:
            fh.write(raw)


def _read_container(path) -> tuple[dict, dict]:
    blob = Path(path).read_bytes()
    if blob[:8] != MAGIC:
        raise FormatError(
            f"bad magic {blob[:8]!r}; expected {MAGIC!r} (not a pderom container)"
        )
    version = int(np.frombuffer(blob[8:12], dtype="<u4")[0])
    if version != VERSION:
        raise FormatError(f"unsupported format version {version}; expected {VERSION}")
    hlen = int(np.frombuffer(blob[12:20], dtype="<u8")[0])
    header = json.loads(blob[20:20 + hlen].decode("utf-8"))
    data_start = 20 + hlen
    arrays = {}
    expected_end = data_start
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        start = data_start + entry["offset"]
        end = start + nbytes
        expected_end = max(expected_end, end)
        if end > len(blob):
            raise FormatError(
                f"truncated file: array {entry['name']!r} needs bytes up to "
                f"{end}, file has {len(blob)}"
            )
        arrays[entry["name"]] = np.frombuffer(
            blob[start:end], dtype=entry["dtype"]
        ).reshape(shape).copy()
    return header, arrays


def _spec_to_dict(spec: SolverSpec) -> dict:
    return {
        "pde": spec.pde,
        "grid": {"lo": list(spec.grid.lo), "hi": list(spec.grid.hi),
                 "shape": list(spec.grid.shape)},
        "dt": spec.dt,
        "params": dict(spec.params),
        "derivative_steps": spec.derivative_steps,
    }


def _spec_from_dict(d: dict) -> SolverSpec:
    grid = Grid(lo=tuple(d["grid"]["lo"]), hi=tuple(d["grid"]["hi"]),
                shape=tuple(d["grid"]["shape"]))
    return SolverSpec(d["pde"], grid, d["dt"], dict(d["params"]),
                      d["derivative_steps"])


def save_dataset(dataset: Dataset, path) -> None:
    header = {
        "kind": "dataset",
        "spec": _spec_to_dict(dataset.spec),
        "snapshot_dt": dataset.snapshot_dt,
        "t_train": dataset.t_train,
        "t_test": dataset.t_test,
        "seed": dataset.seed,
        "splits": {name: len(getattr(dataset, name)) for name in ("train", "test", "val")},
        "sparse_fraction": dataset.sparse_fraction,
    }
    arrays = {}
    for split in ("train", "test", "val"):
        for i, traj in enumerate(getattr(dataset, split)):
            arrays[f"{split}.{i:04d}.snapshots"] = traj.snapshots
            arrays[f"{split}.{i:04d}.beta"] = traj.beta
    if dataset.obs_indices is not None:
        arrays["obs_indices"] = dataset.obs_indices.astype(np.int64)
    _write_container(path, header, arrays)


def load_dataset(path) -> Dataset:
    header, arrays = _read_container(path)
    if header.get("kind") != "dataset":
        raise FormatError(f"container holds {header.get('kind')!r}, not a dataset")
    splits = {}
    for split in ("train", "test", "val"):
        items = []
        for i in range(header["splits"][split]):
            items.append(Trajectory(
                snapshots=arrays[f"{split}.{i:04d}.snapshots"],
                beta=arrays[f"{split}.{i:04d}.beta"],
            ))
        splits[split] = items
    obs = arrays.get("obs_indices")
    return Dataset(
        spec=_spec_from_dict(header["spec"]),
        snapshot_dt=header["snapshot_dt"],
        t_train=header["t_train"],
        t_test=header["t_test"],
        seed=header["seed"],
        train=splits["train"], test=splits["test"], val=splits["val"],
        obs_indices=obs, sparse_fraction=header.get("sparse_fraction"),
    )


def save_model(model: Model, path) -> None:
    dc, yc, tc = model.decoder_config, model.dynamics_config, model.training_config
    header = {
        "kind": "model",
        "decoder_config": {
            "architecture": dc.architecture, "latent_dim": dc.latent_dim,
            "layers": dc.layers, "width": dc.width, "coord_dim": dc.coord_dim,
            "out_channels": dc.out_channels, "omega0": dc.omega0,
            "coord_lo": list(dc.coord_lo), "coord_hi": list(dc.coord_hi),
        },
        "dynamics_config": {
            "latent_dim": yc.latent_dim, "layers": yc.layers,
            "width": yc.width, "param_dim": yc.param_dim,
        },
        "training_config": {f: getattr(tc, f) for f in (
            "epochs", "warmup_epochs", "lr0", "decay_rate", "decay_every",
            "batch_size", "lam", "gamma", "seed", "beta1", "beta2", "eps",
            "weight_decay", "checkpoint_every", "log_every",
        )},
        "spec": _spec_to_dict(model.spec),
        "snapshot_dt": model.snapshot_dt,
    }
    arrays = {"latents": model.latents}
    for name, arr in model.decoder_params.items():
        arrays[f"dec.{name}"] = arr
    for name, arr in model.dynamics_params.items():
        arrays[f"dyn.{name}"] = arr
    for name, arr in model.history.items():
        arrays[f"history.{name}"] = np.asarray(arr, dtype=np.float64)
    _write_container(path, header, arrays)


def load_model(path) -> Model:
    header, arrays = _read_container(path)
    if header.get("kind") != "model":
        raise FormatError(f"container holds {header.get('kind')!r}, not a model")
    d = header["decoder_config"]
    dec_config = DecoderConfig(
        architecture=d["architecture"], latent_dim=d["latent_dim"],
        layers=d["layers"], width=d["width"], coord_dim=d["coord_dim"],
        out_channels=d["out_channels"], omega0=d["omega0"],
        coord_lo=tuple(d["coord_lo"]), coord_hi=tuple(d["coord_hi"]),
    )
    dyn_config = DynamicsConfig(**header["dynamics_config"])
    return Model(
        decoder_config=dec_config,
        decoder_params={k[4:]: v for k, v in arrays.items() if k.startswith("dec.")},
        dynamics_config=dyn_config,
        dynamics_params={k[4:]: v for k, v in arrays.items() if k.startswith("dyn.")},
        latents=arrays["latents"],
        spec=_spec_from_dict(header["spec"]),
        snapshot_dt=header["snapshot_dt"],
        training_config=TrainingConfig(**header["training_config"]),
        history={k[8:]: v for k, v in arrays.items() if k.startswith("history.")},
    )
