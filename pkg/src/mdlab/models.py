"""Multi-domain architectures built from named parameter groups.

Every architecture is a set of small MLP blocks:

* backbone / expert: ``input_dim -> backbone_layers``, relu after every layer;
* head: ``feature_dim -> head_layers -> outputs``, relu between layers only;
* gate: one linear layer ``input_dim -> n_experts`` followed by softmax,
  reading the raw input;
* discriminator: ``feature_dim -> discriminator_layers -> T`` domain logits,
  fed through a gradient-reversal node.

Domains are indexed ``0..T-1``.  ``num_classes == 1`` selects a single-logit
binary (CTR) head trained with binary cross-entropy.

Group names per kind::

    joint          backbone, head
    separate       backbone_t, head_t
    shared_bottom  backbone, head_t
    moe            expert_e, gate, head_t
    mmoe           expert_e, gate_t, head_t
    ple            shared_expert_j, expert_t_j, gate_t, head_t
    dann_mdl       backbone, head_t, discriminator
    mulann         backbone, head, discriminator

The MoE gate sees only ``x``; conditioning it on the domain id is a possible
alternative that is not implemented.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, DataError, DimensionError, FrozenGroupError
from .seeding import derive_rng

KINDS = ("joint", "separate", "shared_bottom", "moe", "mmoe", "ple", "dann_mdl", "mulann")
ADVERSARIAL = ("dann_mdl", "mulann")
SINGLE_HEAD = ("joint", "mulann")


@dataclass
class ArchSpec:
    kind: str
    input_dim: int
    backbone_layers: list[int]
    head_layers: list[int] = field(default_factory=list)
    num_classes: int = 2
    num_domains: int = 1
    expert_count: int | None = None
    shared_experts: int | None = None
    specific_experts: int | list[int] | None = None
    discriminator_layers: list[int] | None = None
    lam: float | None = None

    def __post_init__(self):
        self.backbone_layers = [int(w) for w in self.backbone_layers]
        self.head_layers = [int(w) for w in self.head_layers]
        if self.discriminator_layers is not None:
            self.discriminator_layers = [int(w) for w in self.discriminator_layers]
        if isinstance(self.specific_experts, (list, tuple)):
            self.specific_experts = [int(m) for m in self.specific_experts]
        self.validate()

    def validate(self) -> None:
        k = self.kind
        if k not in KINDS:
            raise ConfigError(f"unknown architecture kind {k!r}; expected one of {KINDS}")
        if self.input_dim < 1 or self.num_classes < 1 or self.num_domains < 1:
            raise ConfigError("input_dim, num_classes and num_domains must be positive")
        if not self.backbone_layers or min(self.backbone_layers) < 1:
            raise ConfigError("backbone_layers must be a nonempty list of positive widths")
        if self.head_layers and min(self.head_layers) < 1:
            raise ConfigError("head_layers widths must be positive")

        def need(name, present):
            value = getattr(self, name)
            if present and value is None:
                raise ConfigError(f"{k} requires field {name!r}")
            if not present and value is not None:
                raise ConfigError(f"{k} does not take field {name!r}")

        need("expert_count", k in ("moe", "mmoe"))
        need("shared_experts", k == "ple")
        need("specific_experts", k == "ple")
        need("discriminator_layers", k in ADVERSARIAL)
        need("lam", k in ADVERSARIAL)
        if self.expert_count is not None and self.expert_count < 1:
            raise ConfigError("expert_count must be >= 1")
        if k == "ple":
            if self.shared_experts < 1 or min(self.specific_counts) < 1:
                raise ConfigError("ple needs at least one shared and one specific expert per domain")
            if isinstance(self.specific_experts, list) and len(self.specific_experts) != self.num_domains:
                raise ConfigError("specific_experts list must have one entry per domain")
        if self.discriminator_layers is not None and self.discriminator_layers and min(self.discriminator_layers) < 1:
            raise ConfigError("discriminator_layers widths must be positive")
        if self.lam is not None and self.lam < 0:
            raise ConfigError("lam must be nonnegative")

    @property
    def feature_dim(self) -> int:
        return self.backbone_layers[-1]

    @property
    def out_dim(self) -> int:
        return 1 if self.num_classes == 1 else self.num_classes

    @property
    def specific_counts(self) -> list[int]:
        m = self.specific_experts
        if m is None:
            return []
        return list(m) if isinstance(m, list) else [int(m)] * self.num_domains

    def replace(self, **changes) -> "ArchSpec":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return {k: v for k, v in dataclasses.asdict(self).items() if v is not None}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ArchSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown ArchSpec fields: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# parameter layout

def mlp_dims(spec: ArchSpec, block: str, n_experts: int = 0) -> list[int]:
    if block == "backbone":
        return [spec.input_dim, *spec.backbone_layers]
    if block == "head":
        return [spec.feature_dim, *spec.head_layers, spec.out_dim]
    if block == "gate":
        return [spec.input_dim, n_experts]
    if block == "discriminator":
        return [spec.feature_dim, *spec.discriminator_layers, spec.num_domains]
    raise ValueError(block)


def mlp_param_count(dims: Sequence[int]) -> int:
    return sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))


def _group_layout(spec: ArchSpec) -> dict[str, list[int]]:
    """Ordered map of group name to MLP widths."""
    T = spec.num_domains
    bb, hd = mlp_dims(spec, "backbone"), mlp_dims(spec, "head")
    k = spec.kind
    layout: dict[str, list[int]] = {}
    if k == "separate":
        for t in range(T):
            layout[f"backbone_{t}"] = bb
            layout[f"head_{t}"] = hd
        return layout
    if k in ("joint", "shared_bottom", "dann_mdl", "mulann"):
        layout["backbone"] = bb
    elif k in ("moe", "mmoe"):
        for e in range(spec.expert_count):
            layout[f"expert_{e}"] = bb
        if k == "moe":
            layout["gate"] = mlp_dims(spec, "gate", spec.expert_count)
        else:
            for t in range(T):
                layout[f"gate_{t}"] = mlp_dims(spec, "gate", spec.expert_count)
    elif k == "ple":
        for j in range(spec.shared_experts):
            layout[f"shared_expert_{j}"] = bb
        for t, m in enumerate(spec.specific_counts):
            for j in range(m):
                layout[f"expert_{t}_{j}"] = bb
        for t, m in enumerate(spec.specific_counts):
            layout[f"gate_{t}"] = mlp_dims(spec, "gate", spec.shared_experts + m)
    if k in SINGLE_HEAD:
        layout["head"] = hd
    else:
        for t in range(T):
            layout[f"head_{t}"] = hd
    if k in ADVERSARIAL:
        layout["discriminator"] = mlp_dims(spec, "discriminator")
    return layout


def _init_mlp(dims: Sequence[int], rng: np.random.Generator, prefix: str) -> dict[str, Tensor]:
    params = {}
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        params[f"W{i}"] = Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), True, f"{prefix}.W{i}")
        params[f"b{i}"] = Tensor(np.zeros(fan_out), True, f"{prefix}.b{i}")
    return params


class Model:
    """Named parameter groups plus the architecture that wires them.

    Parameters are leaf tensors named ``"<group>.<W|b><layer>"``.  Freezing a
    group flips ``requires_grad`` on its tensors, so frozen parameters become
    constants on the tape and optimizers skip them.
    """

    def __init__(self, spec: ArchSpec, groups: dict[str, dict[str, Tensor]]):
        self.spec = spec
        self.groups = groups
        self.trainable = {g: True for g in groups}

    # -- introspection -----------------------------------------------------
    @property
    def group_names(self) -> list[str]:
        return list(self.groups)

    def head_name(self, domain: int) -> str:
        return "head" if self.spec.kind in SINGLE_HEAD else f"head_{domain}"

    def head_names(self) -> list[str]:
        return [g for g in self.groups if g == "head" or g.startswith("head_")]

    def parameters(self, trainable_only: bool = False) -> dict[str, Tensor]:
        return {
            p.name: p
            for g, params in self.groups.items()
            if not trainable_only or self.trainable[g]
            for p in params.values()
        }

    def group_arrays(self, group: str) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self._group(group).items()}

    def snapshot(self, groups: Iterable[str] | None = None) -> dict[str, np.ndarray]:
        names = self.group_names if groups is None else list(groups)
        return {p.name: p.data.copy() for g in names for p in self._group(g).values()}

    def _group(self, group: str) -> dict[str, Tensor]:
        try:
            return self.groups[group]
        except KeyError:
            raise ContractError(f"unknown parameter group {group!r}; have {self.group_names}") from None

    # -- mutation ----------------------------------------------------------
    def set_group(self, group: str, arrays: Mapping[str, np.ndarray]) -> None:
        """Overwrite a group's arrays; refuses frozen groups."""
        if not self.trainable.get(group, True):
            raise FrozenGroupError(f"group {group!r} is frozen")
        params = self._group(group)
        if set(arrays) != set(params):
            raise DimensionError(f"group {group!r} expects arrays {sorted(params)}, got {sorted(arrays)}")
        for k, p in params.items():
            a = np.array(arrays[k], dtype=np.float64)
            if a.shape != p.data.shape:
                raise DimensionError(f"{group}.{k}: shape {a.shape} != {p.data.shape}")
            p.data = a

    def copy(self) -> "Model":
        groups = {
            g: {k: Tensor(p.data, p.requires_grad, p.name) for k, p in params.items()}
            for g, params in self.groups.items()
        }
        m = Model(self.spec.replace(), groups)
        m.trainable = dict(self.trainable)
        return m

    def __repr__(self) -> str:
        return f"Model(kind={self.spec.kind!r}, groups={self.group_names})"


def build_model(spec: ArchSpec, seed: int) -> Model:
    """Initialize every group from its own seed sub-stream ``(seed, group)``."""
    spec.validate()
    groups = {
        name: _init_mlp(dims, derive_rng(seed, "init", name), name)
        for name, dims in _group_layout(spec).items()
    }
    return Model(spec, groups)


def set_trainable(model: Model, groups: Iterable[str], trainable: bool) -> Model:
    for g in groups:
        for p in model._group(g).values():
            p.requires_grad = trainable
        model.trainable[g] = trainable
    return model


def clone_head(model: Model, source: str | Mapping[str, np.ndarray], targets: Iterable[str]) -> Model:
    """Deep-copy one head's arrays into each target head slot."""
    src = model.group_arrays(source) if isinstance(source, str) else dict(source)
    for t in targets:
        tgt = model._group(t)
        if set(tgt) != set(src) or any(tgt[k].data.shape != np.shape(src[k]) for k in tgt):
            raise DimensionError(f"head {t!r} does not match the source head layout")
        for k, p in tgt.items():
            p.data = np.array(src[k], dtype=np.float64)
    return model


def count_params(model: Model) -> dict[str, int]:
    counts = {g: int(sum(p.size for p in params.values())) for g, params in model.groups.items()}
    counts["total"] = sum(counts.values())
    return counts


def closed_form_count(spec: ArchSpec) -> int:
    """Parameter total from the per-kind closed forms in terms of block sizes.

    ``n_psi`` backbone/expert, ``n_h`` head, ``n_D`` discriminator, ``n_G(E)``
    gate over E experts.  PLE adds its T gates explicitly.
    """
    T = spec.num_domains
    n_psi = mlp_param_count(mlp_dims(spec, "backbone"))
    n_h = mlp_param_count(mlp_dims(spec, "head"))

    def n_G(e):
        return mlp_param_count(mlp_dims(spec, "gate", e))

    k = spec.kind
    if k == "separate":
        return T * n_psi + T * n_h
    if k == "joint":
        return n_psi + n_h
    if k == "shared_bottom":
        return n_psi + T * n_h
    if k == "moe":
        return spec.expert_count * n_psi + n_G(spec.expert_count) + T * n_h
    if k == "mmoe":
        return spec.expert_count * n_psi + T * (n_h + n_G(spec.expert_count))
    if k == "ple":
        m = spec.specific_counts
        gates = sum(n_G(spec.shared_experts + mi) for mi in m)
        return (spec.shared_experts + sum(m)) * n_psi + T * n_h + gates
    n_D = mlp_param_count(mlp_dims(spec, "discriminator"))
    if k == "dann_mdl":
        return n_psi + T * n_h + n_D
    return n_psi + n_h + n_D  # mulann


# ---------------------------------------------------------------------------
# forward pass

@dataclass
class ForwardOutput:
    logits: Tensor
    features: Tensor
    gate_weights: Tensor | None = None
    domain_logits: Tensor | None = None


def _mlp(params: Mapping[str, Tensor], x: Tensor, final_relu: bool) -> Tensor:
    n = len(params) // 2
    h = x
    for i in range(n):
        h = ad.bias_add(ad.matmul(h, params[f"W{i}"]), params[f"b{i}"])
        if i < n - 1 or final_relu:
            h = ad.relu(h)
    return h


def _rows(x: Tensor, start: int, stop: int) -> Tensor:
    if start == 0 and stop == x.shape[0]:
        return x
    return ad.slice_(x, start, stop, axis=0)


def _mix(weights: Tensor, outputs: Sequence[Tensor]) -> Tensor:
    acc = None
    for e, out in enumerate(outputs):
        term = ad.mul(ad.slice_(weights, e, e + 1, axis=1), out)
        acc = term if acc is None else ad.add(acc, term)
    return acc


def _as_input(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def forward_segments(model: Model, x, segments: Sequence[tuple[int, int, int]]) -> list[ForwardOutput]:
    """Forward a row-stacked batch whose row ranges belong to different domains.

    ``segments`` holds ``(domain, start, stop)`` triples.  Blocks shared by all
    domains run once over the whole batch; domain-specific blocks only see
    their own rows.
    """
    spec = model.spec
    x = _as_input(x)
    if x.data.ndim != 2 or x.shape[1] != spec.input_dim:
        raise DimensionError(f"expected input [B, {spec.input_dim}], got {x.shape}")
    for d, start, stop in segments:
        if not 0 <= d < spec.num_domains:
            raise ContractError(f"domain {d} out of range [0, {spec.num_domains})")
        if not 0 <= start < stop <= x.shape[0]:
            raise DimensionError(f"segment rows [{start}:{stop}] out of range for batch of {x.shape[0]}")
    G = model.groups
    k = spec.kind
    outs: list[ForwardOutput] = []

    if k in ("joint", "shared_bottom", "dann_mdl", "mulann"):
        feats = _mlp(G["backbone"], x, True)
        for d, s, e in segments:
            f = _rows(feats, s, e)
            dom = None
            if k in ADVERSARIAL:
                dom = _mlp(G["discriminator"], ad.grad_reverse(f, 1.0), False)
            outs.append(ForwardOutput(_mlp(G[model.head_name(d)], f, False), f, None, dom))
    elif k == "separate":
        for d, s, e in segments:
            f = _mlp(G[f"backbone_{d}"], _rows(x, s, e), True)
            outs.append(ForwardOutput(_mlp(G[f"head_{d}"], f, False), f))
    elif k == "moe":
        experts = [_mlp(G[f"expert_{i}"], x, True) for i in range(spec.expert_count)]
        w = ad.softmax(_mlp(G["gate"], x, False))
        mixed = _mix(w, experts)
        for d, s, e in segments:
            f = _rows(mixed, s, e)
            outs.append(ForwardOutput(_mlp(G[f"head_{d}"], f, False), f, _rows(w, s, e)))
    elif k == "mmoe":
        experts = [_mlp(G[f"expert_{i}"], x, True) for i in range(spec.expert_count)]
        for d, s, e in segments:
            xs = _rows(x, s, e)
            w = ad.softmax(_mlp(G[f"gate_{d}"], xs, False))
            f = _mix(w, [_rows(o, s, e) for o in experts])
            outs.append(ForwardOutput(_mlp(G[f"head_{d}"], f, False), f, w))
    elif k == "ple":
        shared = [_mlp(G[f"shared_expert_{j}"], x, True) for j in range(spec.shared_experts)]
        for d, s, e in segments:
            xs = _rows(x, s, e)
            own = [_mlp(G[f"expert_{d}_{j}"], xs, True) for j in range(spec.specific_counts[d])]
            w = ad.softmax(_mlp(G[f"gate_{d}"], xs, False))
            f = _mix(w, [_rows(o, s, e) for o in shared] + own)
            outs.append(ForwardOutput(_mlp(G[f"head_{d}"], f, False), f, w))
    return outs


def forward_full(model: Model, x, domain: int) -> ForwardOutput:
    x = _as_input(x)
    return forward_segments(model, x, [(domain, 0, x.shape[0])])[0]


def forward(model: Model, x, domain: int) -> Tensor:
    """Logits ``[batch, outputs]`` of ``x`` routed through ``domain``'s path."""
    return forward_full(model, x, domain).logits


# ---------------------------------------------------------------------------
# losses

def _check_labels(spec: ArchSpec, y: np.ndarray) -> None:
    if spec.num_classes == 1:
        if not np.isin(y, (0, 1)).all():
            raise DataError("binary labels must be 0 or 1")
    elif y.size and (y.min() < 0 or y.max() >= spec.num_classes or not np.all(y == np.round(y))):
        raise DataError(f"labels must be integers in [0, {spec.num_classes})")


def _segment_loss(spec: ArchSpec, out: ForwardOutput, y: np.ndarray, domain: int) -> Tensor:
    if spec.num_classes == 1:
        task = ad.binary_cross_entropy(out.logits, y)
    else:
        task = ad.softmax_cross_entropy(out.logits, y.astype(np.int64))
    if out.domain_logits is None:
        return task
    dom = ad.softmax_cross_entropy(out.domain_logits, np.full(len(y), domain, dtype=np.int64))
    return ad.add(task, ad.scale(dom, spec.lam))


def composite_loss(model: Model, xs: Sequence[np.ndarray], ys: Sequence[np.ndarray], domains: Sequence[int]) -> Tensor:
    """Mean over domains of each domain's mean loss on its own mini-batch."""
    ys = [np.asarray(y) for y in ys]
    for y in ys:
        _check_labels(model.spec, y)
    bounds = np.cumsum([0, *(len(x) for x in xs)])
    segments = [(d, int(bounds[i]), int(bounds[i + 1])) for i, d in enumerate(domains)]
    stacked = xs[0] if len(xs) == 1 else np.concatenate(xs, axis=0)
    outs = forward_segments(model, Tensor(stacked), segments)
    total = None
    for out, y, d in zip(outs, ys, domains):
        seg = _segment_loss(model.spec, out, y, d)
        total = seg if total is None else ad.add(total, seg)
    if len(outs) > 1:
        total = ad.scale(total, 1.0 / len(outs))
    return total


def loss(model: Model, batch: tuple[np.ndarray, np.ndarray], domain: int) -> Tensor:
    """Mean loss of one domain's batch; adversarial kinds add ``lam`` x domain loss."""
    x, y = batch
    return composite_loss(model, [np.asarray(x, dtype=np.float64)], [y], [domain])


# ---------------------------------------------------------------------------
# inference helpers

def scores(model: Model, x, domain: int) -> np.ndarray:
    """Raw logits as a numpy array (no tape)."""
    return forward(inference_model(model), _detached(x), domain).data


def predict(model: Model, x, domain: int) -> np.ndarray:
    """Predicted class; exact ties go to the lowest index (binary: logit > 0)."""
    z = scores(model, x, domain)
    if model.spec.num_classes == 1:
        return (z[:, 0] > 0).astype(np.int64)
    return np.argmax(z, axis=1)


def _detached(x) -> Tensor:
    return Tensor(x.data if isinstance(x, Tensor) else x)


def inference_model(model: Model) -> Model:
    """Copy with every group frozen, so forward passes record no tape."""
    m = model.copy()
    return set_trainable(m, m.group_names, False)
