"""Synthetic heterogeneous client datasets and covariance statistics.

Each of n clients owns a shard skewed toward two dominant classes:
client k's frequent samples are built around +/- e_k with tau-scaled
random interference on the other support coordinates and isotropic
Gaussian noise, while a much smaller number of samples from the other
clients' odd classes leak in. The scales are tied to the ambient
dimension, tau = d^(1/5) and mu = d^(-1/5), so interference grows and
noise shrinks with d.

Shard generation is deterministic per (params, client, seed): each
client draws from its own RNG stream derived from the base seed, so
shards can be generated in parallel in any order.
"""

import json
import math
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .errors import DimensionMismatch, EmptyInput, InvalidParams

_MAGIC = b"FQDS"
_VERSION = 1
_HEADER = struct.Struct("<4sIIQQ")


@dataclass(frozen=True)
class DataGenParams:
    """Knobs of the synthetic-data construction.

    ``infrequent_count``, ``tau`` and ``mu`` are derived from ``d`` and
    ``infrequent_exponent``; note tau * mu == 1 by construction.
    """

    n: int = 4
    d: int = 32
    frequent_count: int = 2000
    infrequent_exponent: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise InvalidParams("n must be >= 1")
        if self.n > self.d:
            raise InvalidParams(f"need n <= d, got n={self.n}, d={self.d}")
        if self.frequent_count < 1:
            raise InvalidParams("frequent_count must be positive")
        if not 0.0 < self.infrequent_exponent < 1.0:
            raise InvalidParams("infrequent_exponent must be in (0, 1)")
        if self.n * self.infrequent_count > self.frequent_count:
            raise InvalidParams(
                "total infrequent samples must stay below frequent_count "
                f"(n * ceil(d^beta) = {self.n * self.infrequent_count} > {self.frequent_count})"
            )

    @property
    def infrequent_count(self) -> int:
        return math.ceil(self.d**self.infrequent_exponent)

    @property
    def tau(self) -> float:
        return self.d ** (1.0 / 5.0)

    @property
    def mu(self) -> float:
        return self.d ** (-1.0 / 5.0)


@dataclass
class DataShard:
    """One client's sample matrix with class labels.

    Labels are class ids in [1, 2n]; SSL training ignores them but they
    support class-count audits and downstream tasks. The empirical
    covariance is cached on first use.
    """

    client_id: int
    samples: np.ndarray
    labels: np.ndarray
    covariance_cache: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.samples.ndim != 2:
            raise InvalidParams("samples must be a 2-D matrix")
        if self.samples.shape[0] != self.labels.shape[0]:
            raise InvalidParams("labels length must equal sample count")

    @property
    def size(self) -> int:
        return self.samples.shape[0]

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    def covariance(self) -> np.ndarray:
        if self.covariance_cache is None:
            self.covariance_cache = empirical_covariance(self)
        return self.covariance_cache


def client_rng(seed: int, client_id: int) -> np.random.Generator:
    """Per-client stream; independent of generation order across clients."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(client_id,)))


def _frequent_block(params: DataGenParams, k: int, sign: float, count: int,
                    rng: np.random.Generator, noise_scale: float) -> np.ndarray:
    """Samples of class 2k-1 (sign +1) or 2k (sign -1)."""
    n, d = params.n, params.d
    x = np.zeros((count, d))
    x[:, k - 1] = sign
    if n > 1:
        q = rng.integers(0, 2, size=(count, n)).astype(np.float64)
        q[:, k - 1] = 0.0
        x[:, :n] -= params.tau * q
    x += noise_scale * rng.standard_normal((count, d))
    return x


def generate_shard(
    params: DataGenParams,
    k: int,
    rng: np.random.Generator | None = None,
    noise: bool = True,
) -> DataShard:
    """Build client k's dataset (k is 1-based).

    frequent_count samples each of classes 2k-1 and 2k, plus
    infrequent_count samples of class 2i-1 for every other client i
    (none of class 2i). ``noise=False`` disables the mu-scaled Gaussian
    term, exposing the bare class construction for tests.
    """
    if not 1 <= k <= params.n:
        raise InvalidParams(f"client index {k} outside [1, {params.n}]")
    if rng is None:
        rng = client_rng(params.seed, k)
    mu = params.mu if noise else 0.0
    blocks = [
        _frequent_block(params, k, +1.0, params.frequent_count, rng, mu),
        _frequent_block(params, k, -1.0, params.frequent_count, rng, mu),
    ]
    labels = [
        np.full(params.frequent_count, 2 * k - 1, dtype=np.uint32),
        np.full(params.frequent_count, 2 * k, dtype=np.uint32),
    ]
    for i in range(1, params.n + 1):
        if i == k:
            continue
        x = np.zeros((params.infrequent_count, params.d))
        x[:, i - 1] = 1.0
        x += mu * rng.standard_normal((params.infrequent_count, params.d))
        blocks.append(x)
        labels.append(np.full(params.infrequent_count, 2 * i - 1, dtype=np.uint32))
    return DataShard(k, np.vstack(blocks), np.concatenate(labels))


def generate_all_shards(params: DataGenParams) -> list[DataShard]:
    return [generate_shard(params, k) for k in range(1, params.n + 1)]


def empirical_covariance(shard: DataShard) -> np.ndarray:
    """Second-moment matrix (1/|D_k|) * sum_i x_i x_i^T (uncentered)."""
    if shard.size == 0:
        raise EmptyInput("shard has no samples")
    x = shard.samples
    cov = x.T @ x / x.shape[0]
    return 0.5 * (cov + cov.T)


def global_covariance(shards: list[DataShard]) -> np.ndarray:
    """Sample-count-weighted mean of per-shard covariances.

    Equals the pooled covariance of the concatenated samples.
    """
    if not shards:
        raise EmptyInput("no shards")
    d = shards[0].dim
    total = sum(s.size for s in shards)
    out = np.zeros((d, d))
    for s in shards:
        if s.dim != d:
            raise DimensionMismatch(f"shard {s.client_id} has d={s.dim}, expected {d}")
        out += (s.size / total) * s.covariance()
    return out


def write_shard(path: Path | str, shard: DataShard) -> None:
    """Binary shard file: FQDS header, row-major float64 samples, u32 labels."""
    path = Path(path)
    with open(path, "wb") as f:
        rows, d = shard.samples.shape
        f.write(_HEADER.pack(_MAGIC, _VERSION, shard.client_id, rows, d))
        f.write(np.ascontiguousarray(shard.samples, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(shard.labels, dtype="<u4").tobytes())


def read_shard(path: Path | str) -> DataShard:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise InvalidParams(f"{path}: truncated header")
    magic, version, k, rows, d = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise InvalidParams(f"{path}: bad magic {magic!r}")
    if version != _VERSION:
        raise InvalidParams(f"{path}: unsupported version {version}")
    need = _HEADER.size + rows * d * 8 + rows * 4
    if len(raw) != need:
        raise InvalidParams(f"{path}: expected {need} bytes, found {len(raw)}")
    samples = np.frombuffer(raw, dtype="<f8", count=rows * d, offset=_HEADER.size)
    labels = np.frombuffer(raw, dtype="<u4", count=rows, offset=_HEADER.size + rows * d * 8)
    return DataShard(int(k), samples.reshape(rows, d).copy(), labels.astype(np.uint32))


def write_dataset(out_dir: Path | str, params: DataGenParams,
                  shards: list[DataShard] | None = None) -> list[Path]:
    """Write one file per client plus a params sidecar; returns the paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if shards is None:
        shards = generate_all_shards(params)
    paths = []
    for shard in shards:
        p = out_dir / f"client_{shard.client_id:03d}.fqds"
        write_shard(p, shard)
        paths.append(p)
    meta = asdict(params)
    meta["infrequent_count"] = params.infrequent_count
    meta["tau"] = params.tau
    meta["mu"] = params.mu
    (out_dir / "datagen.json").write_text(json.dumps(meta, indent=2) + "\n")
    return paths


def read_dataset(in_dir: Path | str) -> tuple[DataGenParams, list[DataShard]]:
    in_dir = Path(in_dir)
    meta = json.loads((in_dir / "datagen.json").read_text())
    params = DataGenParams(
        n=meta["n"],
        d=meta["d"],
        frequent_count=meta["frequent_count"],
        infrequent_exponent=meta["infrequent_exponent"],
        seed=meta["seed"],
    )
    shards = [read_shard(p) for p in sorted(in_dir.glob("client_*.fqds"))]
    if len(shards) != params.n:
        raise InvalidParams(f"expected {params.n} shard files, found {len(shards)}")
    return params, shards
