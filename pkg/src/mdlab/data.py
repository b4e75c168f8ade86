"""Synthetic multi-domain datasets and the balanced per-domain batch sampler.

Dataset bias is produced by per-domain affine transforms (two moons), shifted
class means (Gaussian domains) or per-domain user/item interaction matrices
(CTR).  Domination comes from the per-domain sample counts.

Every generator is a pure function of its spec: the same spec (seed
included) produces bit-identical arrays.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

from .errors import ConfigError, DataError
from .seeding import derive_rng

GENERATORS = ("two_moons", "gaussian_domains", "ctr")
MOON_CENTER = np.array([0.5, 0.25])


@dataclass
class DomainDataset:
    """Per-domain arrays over one shared label space.

    ``labels`` take values in ``range(num_classes)``; ``is_test`` marks the
    held-out split of each domain.
    """

    features: list[np.ndarray]
    labels: list[np.ndarray]
    is_test: list[np.ndarray]
    num_classes: int
    names: list[str] = field(default_factory=list)
    spec: dict | None = None

    def __post_init__(self):
        if not self.names:
            self.names = [f"d{t}" for t in range(len(self.features))]
        self.validate()

    def validate(self) -> None:
        T = len(self.features)
        if T < 1 or not (len(self.labels) == len(self.is_test) == len(self.names) == T):
            raise DataError("features, labels, is_test and names must have one entry per domain")
        dims = {x.shape[1] if x.ndim == 2 else -1 for x in self.features}
        if len(dims) != 1 or -1 in dims:
            raise DataError("all domains must share the same 2-d feature width")
        for t, (x, y, m) in enumerate(zip(self.features, self.labels, self.is_test)):
            if len(x) < 1:
                raise DataError(f"domain {self.names[t]!r} is empty")
            if len(y) != len(x) or len(m) != len(x):
                raise DataError(f"domain {self.names[t]!r}: features/labels/split lengths differ")
            if y.min() < 0 or y.max() >= self.num_classes:
                raise DataError(f"domain {self.names[t]!r}: labels outside [0, {self.num_classes})")

    @property
    def num_domains(self) -> int:
        return len(self.features)

    @property
    def dim(self) -> int:
        return self.features[0].shape[1]

    @property
    def counts(self) -> list[int]:
        return [len(x) for x in self.features]

    def split(self, t: int, which: str = "train") -> tuple[np.ndarray, np.ndarray]:
        if which == "all":
            return self.features[t], self.labels[t]
        mask = self.is_test[t] if which == "test" else ~self.is_test[t]
        return self.features[t][mask], self.labels[t][mask]

    def split_sets(self, which: str = "train") -> list[tuple[np.ndarray, np.ndarray]]:
        return [self.split(t, which) for t in range(self.num_domains)]

    def map_features(self, fn) -> "DomainDataset":
        return dataclasses.replace(self, features=[np.asarray(fn(x), dtype=np.float64) for x in self.features])

    def replace_domain(self, t: int, features: np.ndarray, labels: np.ndarray) -> "DomainDataset":
        feats, labs = list(self.features), list(self.labels)
        feats[t], labs[t] = np.asarray(features, dtype=np.float64), np.asarray(labels, dtype=np.int64)
        return dataclasses.replace(self, features=feats, labels=labs)


@dataclass
class SyntheticSpec:
    kind: str
    counts: list[int]
    seed: int = 0
    noise: float = 0.1
    test_fraction: float = 0.2
    names: list[str] | None = None
    # two_moons / gaussian_domains transforms
    rotations: list[float] | None = None  # degrees
    scales: list[float] | None = None
    translations: list[list[float]] | None = None
    # gaussian_domains
    num_classes: int = 2
    dim: int = 2
    class_means: list[list[list[float]]] | None = None  # [T][C][dim]
    class_separation: float = 3.0
    domain_shift: float = 1.0
    # ctr
    n_users: int = 100
    n_items: int = 100
    latent_dim: int = 8
    ranks: list[int] | None = None
    interaction_scale: float = 3.0
    domain_similarity: float = 0.5

    def __post_init__(self):
        self.validate()

    @property
    def num_domains(self) -> int:
        return len(self.counts)

    def validate(self) -> None:
        if self.kind not in GENERATORS:
            raise ConfigError(f"unknown generator {self.kind!r}; expected one of {GENERATORS}")
        if not self.counts or min(self.counts) < 1:
            raise ConfigError("counts must be a nonempty list of positive integers")
        if self.noise < 0:
            raise ConfigError("noise std must be nonnegative")
        if not 0 <= self.test_fraction < 1:
            raise ConfigError("test_fraction must lie in [0, 1)")
        T = self.num_domains
        for name in ("rotations", "scales", "translations", "names", "ranks", "class_means"):
            v = getattr(self, name)
            if v is not None and len(v) != T:
                raise ConfigError(f"{name} needs one entry per domain ({T})")
        if self.scales is not None and min(self.scales) <= 0:
            raise ConfigError("scales must be positive")
        if self.kind == "two_moons" and self.num_classes != 2:
            raise ConfigError("two_moons is a 2-class generator")
        if self.kind == "ctr":
            if self.n_users < 1 or self.n_items < 1 or self.latent_dim < 1:
                raise ConfigError("n_users, n_items and latent_dim must be positive")
            if not 0 <= self.domain_similarity <= 1:
                raise ConfigError("domain_similarity must lie in [0, 1]")
            if self.ranks is not None and min(self.ranks) < 0:
                raise ConfigError("ranks must be nonnegative")
        if self.kind == "gaussian_domains" and (self.num_classes < 2 or self.dim < 1):
            raise ConfigError("gaussian_domains needs num_classes >= 2 and dim >= 1")

    def to_dict(self) -> dict:
        return {k: v for k, v in dataclasses.asdict(self).items() if v is not None}

    @classmethod
    def from_dict(cls, d: Mapping) -> "SyntheticSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown data spec fields: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# splitting

def stratified_split(labels: np.ndarray, test_fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Boolean test mask taking ``round(test_fraction * n_c)`` of every class."""
    is_test = np.zeros(len(labels), dtype=bool)
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        k = min(int(round(test_fraction * len(idx))), len(idx) - 1)
        if k > 0:
            is_test[rng.permutation(idx)[:k]] = True
    return is_test


def _class_sizes(n: int, num_classes: int) -> list[int]:
    return [n // num_classes + (1 if c < n % num_classes else 0) for c in range(num_classes)]


def _finish(spec: SyntheticSpec, xs, ys, num_classes: int) -> DomainDataset:
    masks = [
        stratified_split(y, spec.test_fraction, derive_rng(spec.seed, "split", t)) for t, y in enumerate(ys)
    ]
    return DomainDataset(
        features=[np.asarray(x, dtype=np.float64) for x in xs],
        labels=[np.asarray(y, dtype=np.int64) for y in ys],
        is_test=masks,
        num_classes=num_classes,
        names=list(spec.names) if spec.names else [],
        spec=spec.to_dict(),
    )


# ---------------------------------------------------------------------------
# generators

def moons(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Noise-free interleaved half circles: ``n // 2`` outer (label 0), the rest inner (label 1)."""
    n_out = n // 2
    n_in = n - n_out
    a = np.linspace(0.0, np.pi, n_out)
    b = np.linspace(0.0, np.pi, n_in)
    outer = np.stack([np.cos(a), np.sin(a)], axis=1)
    inner = np.stack([1.0 - np.cos(b), 0.5 - np.sin(b)], axis=1)
    x = np.concatenate([outer, inner])
    y = np.concatenate([np.zeros(n_out, dtype=np.int64), np.ones(n_in, dtype=np.int64)])
    return x, y


def _rotation(deg: float) -> np.ndarray:
    r = math.radians(deg)
    return np.array([[math.cos(r), -math.sin(r)], [math.sin(r), math.cos(r)]])


def gen_two_moons(spec: SyntheticSpec) -> DomainDataset:
    """Per domain: moons + noise, rotated about the moons' center, scaled, then translated."""
    xs, ys = [], []
    for t, n in enumerate(spec.counts):
        x, y = moons(n)
        rng = derive_rng(spec.seed, "two_moons", t)
        x = x + spec.noise * rng.standard_normal(x.shape)
        rot = spec.rotations[t] if spec.rotations else 0.0
        if rot:
            x = (x - MOON_CENTER) @ _rotation(rot).T + MOON_CENTER
        s = spec.scales[t] if spec.scales else 1.0
        if s != 1.0:
            x = x * s
        if spec.translations:
            x = x + np.asarray(spec.translations[t], dtype=np.float64)
        order = rng.permutation(n)
        xs.append(x[order])
        ys.append(y[order])
    return _finish(spec, xs, ys, 2)


def gen_gaussian_domains(spec: SyntheticSpec) -> DomainDataset:
    """Each class of each domain is an isotropic Gaussian with std ``noise``.

    Without explicit ``class_means``, base class means are drawn on a sphere of
    radius ``class_separation / 2`` and each domain shifts all of them by a
    random vector of length ``domain_shift``.
    """
    C, d = spec.num_classes, spec.dim
    if spec.class_means is not None:
        means = np.asarray(spec.class_means, dtype=np.float64)
        if means.shape != (spec.num_domains, C, d):
            raise ConfigError(f"class_means must have shape {(spec.num_domains, C, d)}, got {means.shape}")
    else:
        rng = derive_rng(spec.seed, "gaussian", "means")
        base = rng.standard_normal((C, d))
        base *= (spec.class_separation / 2) / np.linalg.norm(base, axis=1, keepdims=True)
        means = []
        for t in range(spec.num_domains):
            shift = derive_rng(spec.seed, "gaussian", "shift", t).standard_normal(d)
            shift *= spec.domain_shift / max(np.linalg.norm(shift), 1e-12)
            means.append(base + shift)
        means = np.asarray(means)
    xs, ys = [], []
    for t, n in enumerate(spec.counts):
        rng = derive_rng(spec.seed, "gaussian", "samples", t)
        parts, labs = [], []
        for c, k in enumerate(_class_sizes(n, C)):
            parts.append(means[t, c] + spec.noise * rng.standard_normal((k, d)))
            labs.append(np.full(k, c, dtype=np.int64))
        x, y = np.concatenate(parts), np.concatenate(labs)
        order = rng.permutation(n)
        xs.append(x[order])
        ys.append(y[order])
    return _finish(spec, xs, ys, C)


def ctr_interactions(spec: SyntheticSpec) -> tuple[np.ndarray, np.ndarray, list[np.ndarray]]:
    """Latent user vectors, item vectors and one interaction matrix per domain.

    ``Q_t = s * (rho * C + sqrt(1 - rho^2) * P_t)`` with a full-rank common
    part ``C`` and a rank-``r_t`` private part ``P_t``, both normalized so a
    logit ``u Q_t v`` has standard deviation about ``s``.
    """
    k = spec.latent_dim
    rng = derive_rng(spec.seed, "ctr", "latent")
    users = rng.standard_normal((spec.n_users, k))
    items = rng.standard_normal((spec.n_items, k))
    common = derive_rng(spec.seed, "ctr", "common").standard_normal((k, k)) / k
    rho = spec.domain_similarity
    qs = []
    for t in range(spec.num_domains):
        r = spec.ranks[t] if spec.ranks is not None else k
        if r > 0:
            prng = derive_rng(spec.seed, "ctr", "private", t)
            a, b = prng.standard_normal((k, r)), prng.standard_normal((k, r))
            private = a @ b.T / (math.sqrt(r) * k)
        else:
            private = np.zeros((k, k))
        qs.append(spec.interaction_scale * (rho * common + math.sqrt(1 - rho * rho) * private))
    return users, items, qs


def gen_ctr(spec: SyntheticSpec) -> DomainDataset:
    """Click logs: features ``[user_id, item_id]``, label ~ Bernoulli(sigmoid(u Q_t v))."""
    users, items, qs = ctr_interactions(spec)
    xs, ys = [], []
    for t, n in enumerate(spec.counts):
        rng = derive_rng(spec.seed, "ctr", "samples", t)
        u = rng.integers(0, spec.n_users, size=n)
        v = rng.integers(0, spec.n_items, size=n)
        logit = np.einsum("nk,kl,nl->n", users[u], qs[t], items[v])
        p = 1.0 / (1.0 + np.exp(-logit))
        y = (rng.random(n) < p).astype(np.int64)
        xs.append(np.stack([u, v], axis=1).astype(np.float64))
        ys.append(y)
    return _finish(spec, xs, ys, 2)


def one_hot_ids(x: np.ndarray, n_users: int, n_items: int) -> np.ndarray:
    """Encode ``[user_id, item_id]`` rows as a two-hot vector of width ``n_users + n_items``."""
    out = np.zeros((len(x), n_users + n_items))
    rows = np.arange(len(x))
    out[rows, x[:, 0].astype(np.int64)] = 1.0
    out[rows, n_users + x[:, 1].astype(np.int64)] = 1.0
    return out


def generate(spec: SyntheticSpec) -> DomainDataset:
    return {"two_moons": gen_two_moons, "gaussian_domains": gen_gaussian_domains, "ctr": gen_ctr}[spec.kind](spec)


def model_view(data: DomainDataset) -> DomainDataset:
    """Features as a model consumes them (CTR ids become two-hot vectors)."""
    spec = data.spec or {}
    if spec.get("kind") == "ctr":
        nu, ni = int(spec.get("n_users", 100)), int(spec.get("n_items", 100))
        return data.map_features(lambda x: one_hot_ids(x, nu, ni))
    return data


# ---------------------------------------------------------------------------
# balanced batching

class _DomainStream:
    """Endless stream of indices: a fresh permutation every pass over the domain."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n = n
        self.rng = rng
        self.order = rng.permutation(n)
        self.pos = 0

    def take(self, b: int) -> np.ndarray:
        out = []
        while b > 0:
            if self.pos == self.n:
                self.order = self.rng.permutation(self.n)
                self.pos = 0
            k = min(b, self.n - self.pos)
            out.append(self.order[self.pos : self.pos + k])
            self.pos += k
            b -= k
        return out[0] if len(out) == 1 else np.concatenate(out)


class BalancedSampler:
    """Draws ``b_t`` indices from every domain per step.

    Each domain has its own random stream keyed by ``(seed, key, t)``, so a
    domain's batches never depend on the other domains' contents.  One epoch
    is ``max_t ceil(n_t / b_t)`` steps; smaller domains recycle with a fresh
    shuffle each pass.
    """

    def __init__(self, sizes: Sequence[int], batch_sizes: int | Sequence[int], seed: int, key: str = "batches"):
        if isinstance(batch_sizes, (int, np.integer)):
            batch_sizes = [int(batch_sizes)] * len(sizes)
        if len(batch_sizes) != len(sizes):
            raise ConfigError("need one batch size per domain")
        for t, (n, b) in enumerate(zip(sizes, batch_sizes)):
            if n < 1:
                raise DataError(f"domain {t} has no samples")
            if not 1 <= b <= n:
                raise DataError(f"domain {t}: batch size {b} must lie in [1, {n}]")
        self.sizes = list(sizes)
        self.batch_sizes = list(batch_sizes)
        self.streams = [_DomainStream(n, derive_rng(seed, key, t)) for t, n in enumerate(sizes)]

    @property
    def steps_per_epoch(self) -> int:
        return max(math.ceil(n / b) for n, b in zip(self.sizes, self.batch_sizes))

    def next_indices(self) -> list[np.ndarray]:
        return [s.take(b) for s, b in zip(self.streams, self.batch_sizes)]

    def epoch(self) -> Iterator[list[np.ndarray]]:
        for _ in range(self.steps_per_epoch):
            yield self.next_indices()


def balanced_batches(
    sets: Sequence[tuple[np.ndarray, np.ndarray]],
    batch_size: int | Sequence[int],
    seed: int,
    epochs: int = 1,
) -> Iterator[list[tuple[np.ndarray, np.ndarray]]]:
    """Yield composite batches: one ``(x_t, y_t)`` mini-batch per domain."""
    sampler = BalancedSampler([len(x) for x, _ in sets], batch_size, seed)
    for _ in range(epochs):
        for idx in sampler.epoch():
            yield [(x[i], y[i]) for (x, y), i in zip(sets, idx)]


# ---------------------------------------------------------------------------
# serialization

def _fmt(v: float) -> str:
    return repr(float(v))


def dataset_csv(data: DomainDataset) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["domain", "split", "label", *(f"f_{j}" for j in range(data.dim))])
    for t in range(data.num_domains):
        for x, y, m in zip(data.features[t], data.labels[t], data.is_test[t]):
            w.writerow([t, "test" if m else "train", int(y), *(_fmt(v) for v in x)])
    return buf.getvalue()


def dataset_sidecar(data: DomainDataset) -> dict:
    return {
        "format": "mdlab.dataset/1",
        "names": data.names,
        "num_classes": data.num_classes,
        "counts": data.counts,
        "dim": data.dim,
        "spec": data.spec,
    }


def write_dataset(data: DomainDataset, csv_path: str | Path) -> tuple[Path, Path]:
    from .checkpoint import atomic_write_bytes

    csv_path = Path(csv_path)
    side = csv_path.with_suffix(".json")
    atomic_write_bytes(csv_path, dataset_csv(data).encode("utf-8"))
    atomic_write_bytes(side, (json.dumps(dataset_sidecar(data), indent=2, sort_keys=True) + "\n").encode("utf-8"))
    return csv_path, side


def read_dataset(csv_path: str | Path) -> DomainDataset:
    csv_path = Path(csv_path)
    side_path = csv_path.with_suffix(".json")
    if not csv_path.exists() or not side_path.exists():
        raise DataError(f"dataset {csv_path} or its sidecar {side_path.name} is missing")
    side = json.loads(side_path.read_text())
    T = len(side["names"])
    rows: list[list] = [[] for _ in range(T)]
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:3] != ["domain", "split", "label"]:
            raise DataError(f"{csv_path}: unexpected header {header[:3]}")
        for r in reader:
            t = int(r[0])
            if not 0 <= t < T:
                raise DataError(f"{csv_path}: domain index {t} out of range")
            rows[t].append(r)
    feats, labs, masks = [], [], []
    for t in range(T):
        if not rows[t]:
            raise DataError(f"{csv_path}: domain {t} has no rows")
        feats.append(np.array([[float(v) for v in r[3:]] for r in rows[t]], dtype=np.float64))
        labs.append(np.array([int(r[2]) for r in rows[t]], dtype=np.int64))
        masks.append(np.array([r[1] == "test" for r in rows[t]]))
    return DomainDataset(feats, labs, masks, int(side["num_classes"]), list(side["names"]), side.get("spec"))
