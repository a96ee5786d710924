"""Synthetic multi-environment data generators and dataset containers.

Two generators cover the benchmark settings:

* :func:`generate_tradeoff` — Gaussian regression where a latent environment
  effect e_j enters the response directly (well-specified: y = c + αe + ε)
  or through an interaction (misspecified: y = c + αe + (1-α)ec + ε), with
  features x = (c, s), c | e ~ N(e, σ_c²) and s = αe + u.

* :func:`generate_colored` — binary labels driven by digit parity and a
  color bit whose effect r on the label differs across environments; the
  color-parity coupling p(c=1 | d) = 5/8 or 3/8 is shared by all
  environments. The default tabular mode emits a noisy parity proxy plus
  the color bit; an image mode recolors real digit images loaded from IDX
  files.

Generators are pure functions of (config, seed): identical inputs produce
byte-identical datasets.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from envmix.rng import stream

__all__ = [
    "EnvDataset",
    "TradeoffConfig",
    "ColoredConfig",
    "generate_tradeoff",
    "generate_colored",
    "colored_cell_probs",
    "load_idx",
    "save_idx",
    "load_digit_pool",
]


@dataclass
class EnvDataset:
    """Labeled observations grouped by environment."""

    env_ids: list
    blocks: list  # (X, y) per environment, same order as env_ids
    feature_names: list

    def __post_init__(self):
        if len(self.env_ids) != len(self.blocks):
            raise ValueError("one block per environment id is required")
        if len(set(map(str, self.env_ids))) != len(self.env_ids):
            raise ValueError("environment ids must be unique")
        width = len(self.feature_names)
        for env_id, (X, y) in zip(self.env_ids, self.blocks):
            if X.ndim != 2 or X.shape[1] != width:
                raise ValueError(f"environment {env_id!r} has inconsistent feature width")
            if X.shape[0] != y.shape[0] or X.shape[0] < 1:
                raise ValueError(f"environment {env_id!r} has mismatched or empty rows")

    @property
    def n_environments(self):
        return len(self.env_ids)

    def stacked(self):
        """Flat (X, y, envs) arrays for the estimator API."""
        X = np.concatenate([b[0] for b in self.blocks])
        y = np.concatenate([b[1] for b in self.blocks])
        envs = np.concatenate(
            [np.repeat(str(e), b[0].shape[0]) for e, b in zip(self.env_ids, self.blocks)]
        )
        return X, y, envs

    @classmethod
    def concat(cls, datasets):
        first = datasets[0]
        env_ids, blocks = [], []
        for ds in datasets:
            if ds.feature_names != first.feature_names:
                raise ValueError("datasets have different schemas")
            env_ids += list(ds.env_ids)
            blocks += list(ds.blocks)
        return cls(env_ids, blocks, list(first.feature_names))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["env_id", *self.feature_names, "y"])
            for env_id, (X, y) in zip(self.env_ids, self.blocks):
                for row, label in zip(X, y):
                    writer.writerow([env_id, *(repr(float(v)) for v in row), repr(float(label))])

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header[0] != "env_id" or header[-1] != "y":
                raise ValueError("expected columns env_id, <features...>, y")
            feature_names = header[1:-1]
            rows = {}
            order = []
            for record in reader:
                env = record[0]
                if env not in rows:
                    rows[env] = []
                    order.append(env)
                rows[env].append([float(v) for v in record[1:]])
        env_ids, blocks = [], []
        for env in order:
            data = np.asarray(rows[env], dtype=np.float64)
            env_ids.append(env)
            blocks.append((data[:, :-1], data[:, -1]))
        return cls(env_ids, blocks, feature_names)


# ---------------------------------------------------------------------------
# Tradeoff simulation


@dataclass(frozen=True)
class TradeoffConfig:
    """Scales and shape of the Gaussian tradeoff generator."""

    alpha: float = 0.5
    regime: str = "well-specified"  # or "misspecified"
    sigma_e: float = 1.0
    sigma_c: float = 1.0
    sigma_u: float = 1.0
    sigma_eps: float = 1.0
    n_envs: int = 20
    n_per_env: int = 500
    seed: int = 0

    def __post_init__(self):
        for name in ("sigma_e", "sigma_c", "sigma_u", "sigma_eps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.regime not in ("well-specified", "misspecified"):
            raise ValueError(f"unknown regime {self.regime!r}")
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")
        if self.regime == "misspecified" and self.alpha > 1:
            raise ValueError("the misspecified regime requires alpha in [0, 1]")
        if self.n_envs < 1 or self.n_per_env < 1:
            raise ValueError("environment counts must be positive")

    def with_seed(self, seed):
        return replace(self, seed=seed)


def generate_tradeoff(config: TradeoffConfig):
    """Sample the tradeoff benchmark; returns (dataset, per-env latent effects).

    The latent record maps each environment id to its effect e_j so that
    ground-truth conditionals can be evaluated on the generated data.
    """
    env_ids, blocks, latents = [], [], {}
    for j in range(config.n_envs):
        rng = stream(config.seed, "tradeoff", j)
        e = config.sigma_e * rng.standard_normal()
        n = config.n_per_env
        c = e + config.sigma_c * rng.standard_normal(n)
        u = config.sigma_u * rng.standard_normal(n)
        eps = config.sigma_eps * rng.standard_normal(n)
        s = config.alpha * e + u
        if config.regime == "well-specified":
            y = c + config.alpha * e + eps
        else:
            y = c + config.alpha * e + (1.0 - config.alpha) * e * c + eps
        env_id = f"env{j:03d}"
        env_ids.append(env_id)
        blocks.append((np.column_stack([c, s]), y))
        latents[env_id] = float(e)
    return EnvDataset(env_ids, blocks, ["c", "s"]), latents


# ---------------------------------------------------------------------------
# Colored-parity mechanism


@dataclass(frozen=True)
class ColoredConfig:
    """One environment of the colored-digit label mechanism.

    Cell probabilities p(y=1 | parity d, color c) are (a+r, a-r) for even
    digits and (b+r, b-r) for odd digits, color listed first. The color-
    parity coupling p(c=1|d=0)=5/8, p(c=1|d=1)=3/8 is fixed.
    """

    r: float = 0.15
    a: float = 0.75
    b: float = 0.25
    n_per_env: int = 2000
    mode: str = "tabular"  # or "images"
    signal_scale: float = 2.0
    noise_scale: float = 1.0
    image_pool: object = None  # (images, digit_labels) for mode="images"
    seed: int = 0

    def __post_init__(self):
        for p in colored_cell_probs(self.a, self.b, self.r).values():
            if not 0.0 <= p <= 1.0:
                raise ValueError(
                    f"label probabilities must lie in [0, 1]; got {p} "
                    f"for a={self.a}, b={self.b}, r={self.r}"
                )
        if self.mode not in ("tabular", "images"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.n_per_env < 1:
            raise ValueError("n_per_env must be positive")


P_COLOR_GIVEN_EVEN = 5.0 / 8.0
P_COLOR_GIVEN_ODD = 3.0 / 8.0


def colored_cell_probs(a, b, r):
    """p(y=1 | d, c) for the four (parity, color) cells."""
    return {
        (0, 1): a + r,
        (0, 0): a - r,
        (1, 1): b + r,
        (1, 0): b - r,
    }


def generate_colored(config: ColoredConfig, env_id=None) -> EnvDataset:
    """Sample one environment of the colored mechanism."""
    rng = stream(config.seed, "colored", repr(config.r))
    n = config.n_per_env
    d = (rng.random(n) < 0.5).astype(np.float64)  # parity: 1 = odd
    p_color = np.where(d == 0, P_COLOR_GIVEN_EVEN, P_COLOR_GIVEN_ODD)
    c = (rng.random(n) < p_color).astype(np.float64)
    cells = colored_cell_probs(config.a, config.b, config.r)
    p_label = np.empty(n)
    for (dd, cc), p in cells.items():
        p_label[(d == dd) & (c == cc)] = p
    y = (rng.random(n) < p_label).astype(np.float64)
    if env_id is None:
        env_id = f"r={config.r:+.2f}"
    if config.mode == "tabular":
        proxy = config.signal_scale * (2.0 * d - 1.0) + config.noise_scale * rng.standard_normal(n)
        X = np.column_stack([proxy, c])
        return EnvDataset([env_id], [(X, y)], ["parity_proxy", "color"])
    images, digits = config.image_pool
    even_pool = np.flatnonzero(digits % 2 == 0)
    odd_pool = np.flatnonzero(digits % 2 == 1)
    rows = np.where(
        d == 1, odd_pool[rng.integers(0, len(odd_pool), n)],
        even_pool[rng.integers(0, len(even_pool), n)],
    )
    flat = images[rows]  # (n, 784) in [0, 1]
    X = np.zeros((n, 2 * flat.shape[1]))
    width = flat.shape[1]
    for i in range(n):
        channel = int(c[i])
        X[i, channel * width : (channel + 1) * width] = flat[i]
    names = [f"ch{ch}_{k}" for ch in (0, 1) for k in range(width)]
    return EnvDataset([env_id], [(X, y)], names)


# ---------------------------------------------------------------------------
# IDX file format

_IDX_UBYTE = 0x08


def load_idx(path) -> np.ndarray:
    """Read an IDX ubyte file; returns the raw uint8 array with header shape."""
    with open(path, "rb") as fh:
        head = fh.read(4)
        if len(head) != 4 or head[0] != 0 or head[1] != 0:
            raise ValueError(f"{path}: not an IDX file (bad magic {head!r})")
        dtype_code, ndim = head[2], head[3]
        if dtype_code != _IDX_UBYTE:
            raise ValueError(f"{path}: unsupported IDX dtype 0x{dtype_code:02x}")
        dims_raw = fh.read(4 * ndim)
        if len(dims_raw) != 4 * ndim:
            raise ValueError(f"{path}: truncated dimension header")
        shape = struct.unpack(f">{ndim}I", dims_raw)
        expected = int(np.prod(shape, dtype=np.int64))
        payload = fh.read()
        if len(payload) != expected:
            raise ValueError(
                f"{path}: truncated payload, expected {expected} bytes, got {len(payload)}"
            )
        return np.frombuffer(payload, dtype=np.uint8).reshape(shape)


def save_idx(path, array) -> None:
    """Write a uint8 array in IDX format (round-trips with :func:`load_idx`)."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(bytes([0, 0, _IDX_UBYTE, array.ndim]))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


def load_digit_pool(images_path, labels_path):
    """Load an (images, labels) IDX pair; images come back as (n, 784) in [0, 1]."""
    images = load_idx(images_path)
    labels = load_idx(labels_path)
    if images.ndim != 3:
        raise ValueError(f"{images_path}: expected a 3-d image file")
    if labels.ndim != 1 or labels.shape[0] != images.shape[0]:
        raise ValueError("image and label counts do not match")
    flat = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return flat, labels.astype(np.int64)
