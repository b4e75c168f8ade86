"""General-to-specific decoupled training and the baseline training loops.

Phases
------
``pretrain``
    A joint model (one backbone, one shared head) is trained on balanced
    batches to minimize the mean over domains of each domain's mean loss.
``posttrain``
    The joint model is split into a shared-bottom model whose heads all start
    as copies of the pretrained head; backbone and heads train together on the
    same domain-averaged objective.
``finetune``
    Everything except the heads is frozen and each head trains on its own
    domain only, with its own optimizer and batch stream.
``plugin``
    The same head-only phase appended to an already trained MMoE/PLE (or
    shared-bottom) model.

Each phase runs a fixed epoch budget.  Random streams are keyed by
``(seed, phase, domain)``, so dropping a later phase never perturbs an earlier
one, and one domain's data never influences another domain's head during
fine-tuning.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, backward
from .data import BalancedSampler, DomainDataset
from .errors import ConfigError, ContractError, DataError, DimensionError
from .metrics import MetricRecord, auc
from .models import (
    ArchSpec,
    Model,
    build_model,
    clone_head,
    composite_loss,
    scores,
    set_trainable,
)
from .optim import OptimizerConfig, OptimizerState, optimizer_step

PHASES = ("pretrain", "posttrain", "finetune", "plugin", "train")
VARIANTS = ("full", "no_pretrain", "no_posttrain", "no_finetune")
PLUGIN_KINDS = ("mmoe", "ple", "shared_bottom")


@dataclass
class PhaseConfig:
    phase: str
    epochs: int = 1
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    batch_size: int | list[int] = 20
    eval_every: int = 10
    # fixed number of steps per epoch; by default derived from domain sizes
    steps_per_epoch: int | None = None
    eval_train: bool = True

    def __post_init__(self):
        if isinstance(self.optimizer, Mapping):
            self.optimizer = OptimizerConfig(**self.optimizer)
        if self.phase not in PHASES:
            raise ConfigError(f"unknown phase {self.phase!r}; expected one of {PHASES}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        sizes = self.batch_size if isinstance(self.batch_size, list) else [self.batch_size]
        if min(sizes) < 1:
            raise ConfigError("batch sizes must be >= 1")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ConfigError("steps_per_epoch must be >= 1")

    def batch_for(self, t: int) -> int:
        return self.batch_size[t] if isinstance(self.batch_size, list) else self.batch_size

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["optimizer"] = self.optimizer.to_dict()
        return {k: v for k, v in d.items() if v is not None}

    def with_phase(self, phase: str) -> "PhaseConfig":
        return PhaseConfig(**{**self.__dict__, "phase": phase})


@dataclass
class CurvePoint:
    step: int
    test_metric: list[float]
    test_loss: list[float]
    train_metric: list[float] | None = None
    train_loss: list[float] | None = None

    @property
    def average(self) -> float:
        return float(np.mean(self.test_metric))


@dataclass
class PhaseReport:
    phase: str
    metric: str
    points: list[CurvePoint] = field(default_factory=list)

    @property
    def steps(self) -> list[int]:
        return [p.step for p in self.points]

    @property
    def best_steps(self) -> list[int]:
        """Step of each domain's best test score (earliest on ties)."""
        m = np.array([p.test_metric for p in self.points])
        return [self.points[i].step for i in np.argmax(m, axis=0)]

    @property
    def first(self) -> CurvePoint:
        return self.points[0]

    @property
    def last(self) -> CurvePoint:
        return self.points[-1]

    def to_dict(self) -> dict:
        return {
            "phase": self.phase,
            "metric": self.metric,
            "best_steps": self.best_steps,
            "points": [
                {
                    "step": p.step,
                    "average": p.average,
                    "test_metric": p.test_metric,
                    "test_loss": p.test_loss,
                    "train_metric": p.train_metric,
                    "train_loss": p.train_loss,
                }
                for p in self.points
            ],
        }


@dataclass
class PipelineReport:
    method: str
    seed: int
    domains: list[str]
    phases: list[PhaseReport] = field(default_factory=list)
    phase_metrics: dict[str, MetricRecord] = field(default_factory=dict)
    head_update_norms: dict[str, list[float]] = field(default_factory=dict)
    checkpoints: dict[str, Model] = field(default_factory=dict)
    variant: str | None = None

    @property
    def phase_names(self) -> list[str]:
        return [p.phase for p in self.phases]

    @property
    def model(self) -> Model:
        return self.checkpoints[self.phases[-1].phase]

    @property
    def final(self) -> MetricRecord:
        return self.phase_metrics[self.phases[-1].phase]

    def phase(self, name: str) -> PhaseReport:
        for p in self.phases:
            if p.phase == name:
                return p
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "format": "mdlab.report/1",
            "method": self.method,
            "variant": self.variant,
            "seed": self.seed,
            "domains": self.domains,
            "phases": [p.to_dict() for p in self.phases],
            "phase_metrics": {k: v.to_dict() for k, v in self.phase_metrics.items()},
            "final": self.final.to_dict(),
            "head_update_norms": self.head_update_norms,
        }

    def curve_rows(self) -> list[tuple]:
        """Rows ``(phase, step, domain, split, accuracy_or_auc, loss)``."""
        rows = []
        for ph in self.phases:
            for p in ph.points:
                for split, metric, losses in (
                    ("test", p.test_metric, p.test_loss),
                    ("train", p.train_metric, p.train_loss),
                ):
                    if metric is None:
                        continue
                    for t, name in enumerate(self.domains):
                        rows.append((ph.phase, p.step, name, split, metric[t], losses[t]))
        return rows

    def truncated(self, n_phases: int) -> "PipelineReport":
        kept = self.phases[:n_phases]
        names = {p.phase for p in kept}
        return PipelineReport(
            self.method,
            self.seed,
            self.domains,
            kept,
            {k: v for k, v in self.phase_metrics.items() if k in names},
            {k: v for k, v in self.head_update_norms.items() if k in names},
            {k: v for k, v in self.checkpoints.items() if k in names},
            self.variant,
        )


# ---------------------------------------------------------------------------
# evaluation

def metric_kind(model: Model) -> str:
    return "auc" if model.spec.num_classes == 1 else "accuracy"


def _score_split(model: Model, x: np.ndarray, y: np.ndarray, t: int) -> tuple[float, float]:
    z = scores(model, x, t)
    if model.spec.num_classes == 1:
        loss = ad.binary_cross_entropy(Tensor(z), y).item()
        return auc(z[:, 0], y), loss
    loss = ad.softmax_cross_entropy(Tensor(z), y).item()
    return float(np.mean(np.argmax(z, axis=1) == y)), loss


def evaluate(model: Model, data: DomainDataset, which: str = "test") -> tuple[list[float], list[float]]:
    """Per-domain metric (accuracy, or AUC for binary heads) and mean loss on a split."""
    metric, losses = [], []
    for t in range(data.num_domains):
        x, y = data.split(t, which)
        if len(y) == 0:
            raise DataError(f"domain {data.names[t]!r} has an empty {which} split")
        m, l = _score_split(model, x, y, t)
        metric.append(m)
        losses.append(l)
    return metric, losses


def metric_record(model: Model, data: DomainDataset, which: str = "test") -> MetricRecord:
    if model.spec.num_classes == 1:
        from .metrics import auc_metrics

        zs, ys = [], []
        for t in range(data.num_domains):
            x, y = data.split(t, which)
            zs.append(scores(model, x, t)[:, 0])
            ys.append(y)
        return auc_metrics(zs, ys)
    from .metrics import accuracy_metrics
    from .models import predict

    preds, ys = [], []
    for t in range(data.num_domains):
        x, y = data.split(t, which)
        preds.append(predict(model, x, t))
        ys.append(y)
    return accuracy_metrics(preds, ys)


def _curve_point(model: Model, data: DomainDataset, step: int, eval_train: bool) -> CurvePoint:
    tm, tl = evaluate(model, data, "test")
    if eval_train:
        rm, rl = evaluate(model, data, "train")
        return CurvePoint(step, tm, tl, rm, rl)
    return CurvePoint(step, tm, tl)


def head_update_norm(h_ref: Mapping[str, np.ndarray], h_t: Mapping[str, np.ndarray]) -> float:
    """Euclidean norm of the difference of two heads' flattened parameters."""
    if set(h_ref) != set(h_t):
        raise DimensionError("heads have different parameter names")
    diffs = []
    for k in sorted(h_ref):
        a, b = np.asarray(h_ref[k]), np.asarray(h_t[k])
        if a.shape != b.shape:
            raise DimensionError(f"head parameter {k!r}: shapes {a.shape} and {b.shape} differ")
        diffs.append((b - a).ravel())
    return float(np.linalg.norm(np.concatenate(diffs)))


# ---------------------------------------------------------------------------
# training loops

def _check_data(model: Model, data: DomainDataset) -> None:
    if data.num_domains != model.spec.num_domains:
        raise DataError(f"model has {model.spec.num_domains} domains, data has {data.num_domains}")
    if data.dim != model.spec.input_dim:
        raise DataError(f"model expects {model.spec.input_dim} features, data has {data.dim}")


def train_shared(model: Model, data: DomainDataset, cfg: PhaseConfig, seed: int, key: str | None = None) -> PhaseReport:
    """Minimize the domain-averaged loss on balanced batches, updating every trainable group.

    Mutates ``model`` in place.
    """
    _check_data(model, data)
    key = key or cfg.phase
    sets = data.split_sets("train")
    T = data.num_domains
    sampler = BalancedSampler([len(x) for x, _ in sets], [cfg.batch_for(t) for t in range(T)], seed, key)
    total = cfg.epochs * (cfg.steps_per_epoch or sampler.steps_per_epoch)
    opt = OptimizerState(cfg.optimizer)
    params = model.parameters(trainable_only=True)
    report = PhaseReport(cfg.phase, metric_kind(model), [_curve_point(model, data, 0, cfg.eval_train)])
    domains = list(range(T))
    for step in range(1, total + 1):
        idx = sampler.next_indices()
        xs = [sets[t][0][i] for t, i in enumerate(idx)]
        ys = [sets[t][1][i] for t, i in enumerate(idx)]
        L = composite_loss(model, xs, ys, domains)
        optimizer_step(opt, params, backward(L, params))
        if step % cfg.eval_every == 0 or step == total:
            report.points.append(_curve_point(model, data, step, cfg.eval_train))
    return report


def train_independent(
    model: Model,
    data: DomainDataset,
    cfg: PhaseConfig,
    seed: int,
    groups_for: Callable[[int], Sequence[str]],
    key: str | None = None,
    order: Sequence[int] | None = None,
) -> PhaseReport:
    """Train each domain's own groups on that domain alone.

    Domain ``t`` gets a fresh optimizer, its own batch stream keyed by
    ``(seed, key, t)`` and ``epochs * ceil(n_t / b_t)`` steps (or
    ``epochs * steps_per_epoch``).  With ``order=None`` the domains advance in
    lock-step and the curve is sampled every ``eval_every`` steps; with an
    explicit ``order`` they run one after another and only the start and end
    are evaluated.  Both schedules give identical parameters.
    """
    _check_data(model, data)
    key = key or cfg.phase
    T = data.num_domains
    sets = data.split_sets("train")
    samplers, opts, params, budgets = [], [], [], []
    for t in range(T):
        n, b = len(sets[t][0]), cfg.batch_for(t)
        samplers.append(BalancedSampler([n], [b], seed, f"{key}/domain{t}"))
        opts.append(OptimizerState(cfg.optimizer))
        params.append({p.name: p for g in groups_for(t) for p in model.groups[g].values() if p.requires_grad})
        budgets.append(cfg.epochs * (cfg.steps_per_epoch or math.ceil(n / b)))

    def step_domain(t: int) -> None:
        (i,) = samplers[t].next_indices()
        x, y = sets[t][0][i], sets[t][1][i]
        L = composite_loss(model, [x], [y], [t])
        optimizer_step(opts[t], params[t], backward(L, params[t]))

    report = PhaseReport(cfg.phase, metric_kind(model), [_curve_point(model, data, 0, cfg.eval_train)])
    total = max(budgets)
    if order is None:
        for step in range(1, total + 1):
            for t in range(T):
                if step <= budgets[t]:
                    step_domain(t)
            if step % cfg.eval_every == 0 or step == total:
                report.points.append(_curve_point(model, data, step, cfg.eval_train))
    else:
        if sorted(order) != list(range(T)):
            raise ConfigError(f"order must be a permutation of 0..{T - 1}")
        for t in order:
            for _ in range(budgets[t]):
                step_domain(t)
        report.points.append(_curve_point(model, data, total, cfg.eval_train))
    return report


# ---------------------------------------------------------------------------
# phases

def _shared_bottom_spec(spec: ArchSpec) -> ArchSpec:
    if spec.kind != "shared_bottom":
        raise ConfigError(f"decoupled training runs on a shared_bottom architecture, got {spec.kind!r}")
    return spec


def pretrain(spec: ArchSpec, data: DomainDataset, cfg: PhaseConfig, seed: int) -> tuple[Model, PhaseReport]:
    """Warm up a joint (single-head) model; returns it with ``backbone`` = psi_0, ``head`` = h_0."""
    joint = build_model(spec.replace(kind="joint"), seed)
    report = train_shared(joint, data, cfg, seed, "pretrain")
    return joint, report


def split_into_heads(joint: Model, spec: ArchSpec) -> Model:
    """Shared-bottom model with the joint backbone and every head a copy of the joint head."""
    spec = _shared_bottom_spec(spec)
    if joint.spec.kind != "joint":
        raise ConfigError("split_into_heads needs a joint model")
    model = build_model(spec, 0)
    model.set_group("backbone", joint.group_arrays("backbone"))
    return clone_head(model, joint.group_arrays("head"), model.head_names())


def posttrain(model: Model, data: DomainDataset, cfg: PhaseConfig, seed: int) -> tuple[Model, PhaseReport]:
    """Train backbone and all heads on the domain-averaged objective (returns a new model)."""
    model = model.copy()
    if not all(model.trainable.values()):
        raise ContractError("posttrain expects every group to be trainable")
    report = train_shared(model, data, cfg.with_phase("posttrain"), seed, "posttrain")
    return model, report


def plugin_finetune(
    model: Model, data: DomainDataset, cfg: PhaseConfig, seed: int, order: Sequence[int] | None = None, phase: str = "plugin"
) -> tuple[Model, PhaseReport]:
    """Freeze everything but the heads, then train each head on its own domain (returns a new model)."""
    if model.spec.kind not in PLUGIN_KINDS:
        raise ConfigError(f"head-only fine-tuning supports {PLUGIN_KINDS}, got {model.spec.kind!r}")
    model = model.copy()
    heads = model.head_names()
    frozen = [g for g in model.group_names if g not in heads]
    set_trainable(model, frozen, False)
    set_trainable(model, heads, True)
    before = model.snapshot(frozen)
    report = train_independent(
        model, data, cfg.with_phase(phase), seed, lambda t: [model.head_name(t)], key="finetune", order=order
    )
    after = model.snapshot(frozen)
    if any(not np.array_equal(before[k], after[k]) for k in before):
        raise ContractError("a frozen group changed during head fine-tuning")
    return model, report


def finetune_heads(
    model: Model, data: DomainDataset, cfg: PhaseConfig, seed: int, order: Sequence[int] | None = None
) -> tuple[Model, PhaseReport]:
    """Frozen-backbone, per-domain head training of a post-trained shared-bottom model."""
    _shared_bottom_spec(model.spec)
    return plugin_finetune(model, data, cfg, seed, order=order, phase="finetune")


def _heads(model: Model) -> list[dict[str, np.ndarray]]:
    return [model.group_arrays(model.head_name(t)) for t in range(model.spec.num_domains)]


def run_pipeline(
    spec: ArchSpec,
    data: DomainDataset,
    phases: Mapping[str, PhaseConfig],
    seed: int,
    variant: str = "full",
) -> PipelineReport:
    """Run decoupled training or one of its ablations.

    ``full``: pretrain -> split -> posttrain -> finetune.  ``no_pretrain``
    starts post-training from a random shared-bottom model whose heads are
    initialized independently; ``no_posttrain`` fine-tunes right after the
    split; ``no_finetune`` stops after post-training.
    """
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    spec = _shared_bottom_spec(spec)
    method = "dtrain" if variant == "full" else f"dtrain_ablation:{variant}"
    report = PipelineReport(method, seed, list(data.names), variant=variant)

    def record(name: str, model: Model, ph: PhaseReport) -> None:
        report.phases.append(ph)
        report.checkpoints[name] = model.copy()
        report.phase_metrics[name] = metric_record(model, data)

    if variant == "no_pretrain":
        model = build_model(spec, seed)
    else:
        joint, ph = pretrain(spec, data, phases["pretrain"], seed)
        record("pretrain", joint, ph)
        model = split_into_heads(joint, spec)
    h_ref = _heads(model)

    if variant != "no_posttrain":
        model, ph = posttrain(model, data, phases["posttrain"], seed)
        record("posttrain", model, ph)
        report.head_update_norms["posttrain"] = [head_update_norm(a, b) for a, b in zip(h_ref, _heads(model))]

    if variant != "no_finetune":
        h_mid = _heads(model)
        model, ph = finetune_heads(model, data, phases["finetune"], seed)
        record("finetune", model, ph)
        h_end = _heads(model)
        report.head_update_norms["finetune"] = [head_update_norm(a, b) for a, b in zip(h_ref, h_end)]
        report.head_update_norms["finetune_step"] = [head_update_norm(a, b) for a, b in zip(h_mid, h_end)]
    return report


BASELINES = ("joint", "separate", "shared_bottom", "moe", "mmoe", "ple", "dann_mdl", "mulann")


def train_baseline(spec: ArchSpec, data: DomainDataset, cfg: PhaseConfig, seed: int) -> PipelineReport:
    """Single-phase training of any architecture on balanced batches.

    ``separate`` trains every (backbone, head) pair on its own domain only,
    so each pair is unaffected by the other domains' data.
    """
    model = build_model(spec, seed)
    cfg = cfg.with_phase("train")
    if spec.kind == "separate":
        ph = train_independent(model, data, cfg, seed, lambda t: [f"backbone_{t}", f"head_{t}"], key="train")
    else:
        ph = train_shared(model, data, cfg, seed, "train")
    report = PipelineReport(spec.kind, seed, list(data.names))
    report.phases.append(ph)
    report.checkpoints["train"] = model.copy()
    report.phase_metrics["train"] = metric_record(model, data)
    return report


def run_plugin(spec: ArchSpec, data: DomainDataset, phases: Mapping[str, PhaseConfig], seed: int) -> PipelineReport:
    """Train a baseline, then append the head-only phase."""
    report = train_baseline(spec, data, phases["train"], seed)
    base = report.checkpoints["train"]
    h_ref = _heads(base)
    model, ph = plugin_finetune(base, data, phases["plugin"], seed)
    report.method = f"plugin:{spec.kind}"
    report.phases.append(ph)
    report.checkpoints["plugin"] = model.copy()
    report.phase_metrics["plugin"] = metric_record(model, data)
    report.head_update_norms["plugin"] = [head_update_norm(a, b) for a, b in zip(h_ref, _heads(model))]
    return report


def run_method(method: str, spec: ArchSpec, data: DomainDataset, phases: Mapping[str, PhaseConfig], seed: int) -> PipelineReport:
    """Dispatch a method name (``joint``, ``dtrain``, ``dtrain_ablation:<v>``, ``plugin:<base>`` ...)."""
    if method == "dtrain":
        return run_pipeline(spec, data, phases, seed, "full")
    if method.startswith("dtrain_ablation:"):
        return run_pipeline(spec, data, phases, seed, method.split(":", 1)[1])
    if method.startswith("plugin:"):
        base = method.split(":", 1)[1]
        if base != spec.kind:
            raise ConfigError(f"method {method} needs arch kind {base!r}, got {spec.kind!r}")
        return run_plugin(spec, data, phases, seed)
    if method in BASELINES:
        if method != spec.kind:
            raise ConfigError(f"method {method} needs arch kind {method!r}, got {spec.kind!r}")
        return train_baseline(spec, data, phases["train"], seed)
    raise ConfigError(f"unknown method {method!r}")
