import numpy as np
import pytest

from mdlab.autodiff import backward
from mdlab.data import BalancedSampler, DomainDataset, SyntheticSpec, generate, model_view
from mdlab.dtrain import (
    PhaseConfig,
    evaluate,
    finetune_heads,
    head_update_norm,
    plugin_finetune,
    posttrain,
    pretrain,
    run_method,
    run_pipeline,
    split_into_heads,
    train_baseline,
)
from mdlab.errors import ConfigError, DataError
from mdlab.models import ArchSpec, build_model, composite_loss
from mdlab.optim import OptimizerConfig, OptimizerState, optimizer_step

OPT = OptimizerConfig("sgd-momentum", 0.05, 0.9, decay=0.01)


def _data(seed=0, counts=(120, 60, 40)):
    return generate(SyntheticSpec("two_moons", list(counts), seed=seed, noise=0.2, rotations=[0, 45, 90][: len(counts)]))


def _spec(T=3, kind="shared_bottom", **kw):
    return ArchSpec(kind, 2, [8], [], 2, T, **kw)


def _phases(E=(2, 2, 2), ev=3):
    ph = {k: PhaseConfig(k, e, OPT, 10, ev) for k, e in zip(("pretrain", "posttrain", "finetune"), E)}
    ph["train"] = PhaseConfig("train", sum(E), OPT, 10, ev)
    ph["plugin"] = PhaseConfig("plugin", 2, OPT, 10, ev)
    return ph


def _same(a, b):
    return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


# ---------------------------------------------------------------------------
# configs and small helpers

def test_phase_config_validation():
    with pytest.raises(ConfigError):
        PhaseConfig("warmup")
    with pytest.raises(ConfigError):
        PhaseConfig("pretrain", epochs=0)
    with pytest.raises(ConfigError):
        PhaseConfig("pretrain", batch_size=0)
    with pytest.raises(ConfigError):
        PhaseConfig("pretrain", eval_every=0)


def test_head_update_norm_examples():
    h = {"W0": np.array([[1.0, 2.0]]), "b0": np.array([0.5])}
    assert head_update_norm(h, h) == 0.0
    assert head_update_norm({"w": np.zeros(2)}, {"w": np.array([3.0, 4.0])}) == 5.0


# ---------------------------------------------------------------------------
# pretrain

def test_single_domain_pretrain_is_plain_training():
    data = _data(counts=(80,))
    cfg = PhaseConfig("pretrain", 2, OPT, 10, 100)
    joint, _ = pretrain(_spec(1), data, cfg, seed=4)

    ref = build_model(_spec(1, "joint"), 4)
    x, y = data.split(0, "train")
    sampler = BalancedSampler([len(x)], [10], 4, "pretrain")
    opt = OptimizerState(OPT)
    params = ref.parameters()
    for _ in range(2 * sampler.steps_per_epoch):
        (i,) = sampler.next_indices()
        optimizer_step(opt, params, backward(composite_loss(ref, [x[i]], [y[i]], [0]), params))
    assert _same(ref.snapshot(), joint.snapshot())


def test_two_identical_domains_match_union_training():
    one = _data(counts=(60,))
    two = DomainDataset(one.features * 2, one.labels * 2, one.is_test * 2, 2)
    cfg = PhaseConfig("pretrain", 3, OPT, 10, 100)
    joint, rep = pretrain(_spec(2), two, cfg, seed=2)

    ref = build_model(_spec(2, "joint"), 2)
    sets = two.split_sets("train")
    sampler = BalancedSampler([len(x) for x, _ in sets], [10, 10], 2, "pretrain")
    opt = OptimizerState(OPT)
    params = ref.parameters()
    for _ in range(3 * sampler.steps_per_epoch):
        idx = sampler.next_indices()
        xu = np.concatenate([sets[t][0][i] for t, i in enumerate(idx)])
        yu = np.concatenate([sets[t][1][i] for t, i in enumerate(idx)])
        optimizer_step(opt, params, backward(composite_loss(ref, [xu], [yu], [0]), params))
    x, y = two.split(0, "all")
    a = composite_loss(joint, [x], [y], [0]).item()
    b = composite_loss(ref, [x], [y], [0]).item()
    assert abs(a - b) <= 1e-10


def test_empty_domain_is_data_error():
    data = _data()
    data.is_test[2][:] = True
    with pytest.raises(DataError):
        pretrain(_spec(), data, PhaseConfig("pretrain", 1, OPT, 5), 0)


# ---------------------------------------------------------------------------
# split and posttrain

def test_split_copies_backbone_and_head():
    data = _data()
    joint, _ = pretrain(_spec(), data, _phases()["pretrain"], 0)
    model = split_into_heads(joint, _spec())
    assert _same(model.group_arrays("backbone"), joint.group_arrays("backbone"))
    h0 = joint.group_arrays("head")
    for t in range(3):
        assert _same(model.group_arrays(f"head_{t}"), h0)
        assert head_update_norm(h0, model.group_arrays(f"head_{t}")) == 0.0
    assert evaluate(model, data) == evaluate(joint, data)


def test_posttrain_isolation_and_report():
    data = _data()
    joint, _ = pretrain(_spec(), data, _phases()["pretrain"], 0)
    start = split_into_heads(joint, _spec())
    model, rep = posttrain(start, data, _phases()["posttrain"], 0)
    assert _same(start.snapshot(), split_into_heads(joint, _spec()).snapshot())  # input untouched
    assert rep.steps == sorted(set(rep.steps))
    assert len(rep.best_steps) == 3


def test_phase_boundary_continuity():
    report = run_pipeline(_spec(), _data(), _phases(), 1)
    for prev, nxt in zip(report.phases, report.phases[1:]):
        assert prev.last.test_metric == nxt.first.test_metric
        assert prev.last.test_loss == nxt.first.test_loss


# ---------------------------------------------------------------------------
# finetune

@pytest.fixture(scope="module")
def posttrained():
    data = _data(3)
    report = run_pipeline(_spec(), data, _phases(), 3, "no_finetune")
    return data, report.model


def test_finetune_freezes_backbone(posttrained):
    data, model = posttrained
    tuned, _ = finetune_heads(model, data, _phases()["finetune"], 3)
    assert _same(model.group_arrays("backbone"), tuned.group_arrays("backbone"))


def test_finetune_order_and_schedule_do_not_matter(posttrained):
    data, model = posttrained
    cfg = _phases()["finetune"]
    lock, _ = finetune_heads(model, data, cfg, 3)
    fwd, _ = finetune_heads(model, data, cfg, 3, order=[0, 1, 2])
    rev, _ = finetune_heads(model, data, cfg, 3, order=[2, 0, 1])
    assert _same(lock.snapshot(), fwd.snapshot()) and _same(fwd.snapshot(), rev.snapshot())


def test_corrupting_one_domain_leaves_other_heads(posttrained):
    data, model = posttrained
    rng = np.random.default_rng(0)
    x, y = data.features[1], data.labels[1]
    bad = data.replace_domain(1, rng.standard_normal(x.shape) * 5, 1 - y)
    a, _ = finetune_heads(model, data, _phases()["finetune"], 3)
    b, _ = finetune_heads(model, bad, _phases()["finetune"], 3)
    for t in (0, 2):
        assert _same(a.group_arrays(f"head_{t}"), b.group_arrays(f"head_{t}"))
    assert not _same(a.group_arrays("head_1"), b.group_arrays("head_1"))


def test_plugin_equals_finetune_on_shared_bottom(posttrained):
    data, model = posttrained
    a, _ = finetune_heads(model, data, _phases()["finetune"], 3)
    b, _ = plugin_finetune(model, data, _phases()["finetune"], 3)
    assert _same(a.snapshot(), b.snapshot())


def test_finetune_rejects_other_kinds():
    data = _data()
    model = build_model(_spec(kind="mmoe", expert_count=2), 0)
    with pytest.raises(ConfigError):
        finetune_heads(model, data, _phases()["finetune"], 0)
    with pytest.raises(ConfigError):
        plugin_finetune(build_model(_spec(kind="joint"), 0), data, _phases()["plugin"], 0)


def test_finetune_does_not_hurt_training_fit():
    gains = []
    for seed in range(5):
        data = _data(seed)
        report = run_pipeline(_spec(), data, _phases((2, 2, 3)), seed)
        ft = report.phase("finetune")
        gains.append(np.mean(ft.last.train_metric) - np.mean(ft.first.train_metric))
    assert np.mean(gains) >= -0.01


# ---------------------------------------------------------------------------
# pipeline variants

def test_variants_record_exactly_their_phases():
    data = _data()
    expect = {
        "full": ["pretrain", "posttrain", "finetune"],
        "no_pretrain": ["posttrain", "finetune"],
        "no_posttrain": ["pretrain", "finetune"],
        "no_finetune": ["pretrain", "posttrain"],
    }
    for variant, phases in expect.items():
        assert run_pipeline(_spec(), data, _phases(), 0, variant).phase_names == phases


def test_no_finetune_equals_posttrain_output():
    data = _data()
    full = run_pipeline(_spec(), data, _phases(), 5)
    nf = run_pipeline(_spec(), data, _phases(), 5, "no_finetune")
    assert _same(full.checkpoints["posttrain"].snapshot(), nf.model.snapshot())
    assert full.phase_metrics["posttrain"] == nf.final


def test_no_pretrain_heads_start_independent():
    data = _data()
    report = run_pipeline(_spec(), data, {**_phases(), "posttrain": PhaseConfig("posttrain", 1, OPT, 10, 1)}, 0, "no_pretrain")
    init = build_model(_spec(), 0)
    assert not _same(init.group_arrays("head_0"), init.group_arrays("head_1"))
    assert report.phase_names[0] == "posttrain"


def test_pipeline_is_deterministic():
    data = _data()
    a = run_pipeline(_spec(), data, _phases(), 7)
    b = run_pipeline(_spec(), data, _phases(), 7)
    assert a.to_dict() == b.to_dict()
    assert _same(a.model.snapshot(), b.model.snapshot())


def test_head_norms_reported_per_domain():
    report = run_pipeline(_spec(), _data(), _phases(), 0)
    for key in ("posttrain", "finetune", "finetune_step"):
        assert len(report.head_update_norms[key]) == 3
        assert all(v >= 0 for v in report.head_update_norms[key])


# ---------------------------------------------------------------------------
# baselines and plugin

def test_separate_ignores_other_domains():
    data = _data()
    bad = data.replace_domain(2, data.features[2] * -3.0, data.labels[2])
    spec = _spec(kind="separate")
    a = train_baseline(spec, data, _phases()["train"], 0).model
    b = train_baseline(spec, bad, _phases()["train"], 0).model
    for g in ("backbone_0", "head_0", "backbone_1", "head_1"):
        assert _same(a.group_arrays(g), b.group_arrays(g))


def test_plugin_keeps_experts_and_gates():
    data = _data()
    spec = _spec(kind="mmoe", expert_count=2)
    report = run_method("plugin:mmoe", spec, data, _phases(), 0)
    base, tuned = report.checkpoints["train"], report.checkpoints["plugin"]
    frozen = [g for g in base.group_names if not g.startswith("head_")]
    assert _same(base.snapshot(frozen), tuned.snapshot(frozen))
    assert report.phase_names == ["train", "plugin"]


@pytest.mark.parametrize("kind", ["joint", "moe", "ple", "dann_mdl", "mulann"])
def test_every_baseline_trains(kind):
    extra = {
        "moe": {"expert_count": 2},
        "ple": {"shared_experts": 1, "specific_experts": 1},
        "dann_mdl": {"discriminator_layers": [4], "lam": 0.1},
        "mulann": {"discriminator_layers": [4], "lam": 0.1},
    }.get(kind, {})
    report = run_method(kind, _spec(kind=kind, **extra), _data(), _phases(), 0)
    assert 0.0 <= report.final.average <= 1.0


def test_method_must_match_architecture():
    with pytest.raises(ConfigError):
        run_method("mmoe", _spec(), _data(), _phases(), 0)
    with pytest.raises(ConfigError):
        run_method("dtrain", _spec(kind="mmoe", expert_count=2), _data(), _phases(), 0)
    with pytest.raises(ConfigError):
        run_method("dtrain_ablation:no_everything", _spec(), _data(), _phases(), 0)


# ---------------------------------------------------------------------------
# generator equivalence experiments

def test_identical_gaussian_domains_joint_matches_shared_bottom():
    means = [[[0.0, 0.0], [1.5, 1.0]]] * 3
    cfg = PhaseConfig("train", 5, OptimizerConfig("sgd-momentum", 0.05, 0.9), 20, 1000, eval_train=False)
    joint, sb = [], []
    for seed in range(5):
        data = generate(SyntheticSpec("gaussian_domains", [400, 200, 100], seed=seed, noise=1.0, class_means=means))
        joint.append(train_baseline(ArchSpec("joint", 2, [8], [], 2, 3), data, cfg, seed).final.average)
        sb.append(train_baseline(ArchSpec("shared_bottom", 2, [8], [], 2, 3), data, cfg, seed).final.average)
    assert abs(np.mean(joint) - np.mean(sb)) <= 0.01


def test_identical_ctr_domains_give_matching_aucs():
    cfg = PhaseConfig("train", 2, OptimizerConfig("adam", 0.01), 50, 1000, eval_train=False)
    per = []
    for seed in range(5):
        spec = SyntheticSpec("ctr", [8000] * 3, seed=seed, n_users=30, n_items=30, domain_similarity=1.0)
        data = model_view(generate(spec))
        per.append(train_baseline(ArchSpec("joint", 60, [16], [], 1, 3), data, cfg, seed).final.per_domain)
    mean_auc = np.mean(per, axis=0)
    assert mean_auc.max() - mean_auc.min() <= 0.02


def test_well_separated_gaussians_are_learned():
    # class means 8 noise-std apart; test sets of 400 and 200 resolve 99%
    means = [[[0.0, 0.0], [8.0, 0.0]], [[0.0, 3.0], [8.0, 3.0]]]
    data = generate(SyntheticSpec("gaussian_domains", [2000, 1000], seed=2, noise=1.0, class_means=means))
    cfg = PhaseConfig("train", 5, OptimizerConfig("sgd-momentum", 0.05, 0.9), 20, 1000, eval_train=False)
    for kind in ("joint", "shared_bottom", "mmoe"):
        spec = ArchSpec(kind, 2, [8], [], 2, 2, expert_count=2 if kind == "mmoe" else None)
        assert min(train_baseline(spec, data, cfg, 0).final.per_domain) >= 0.99, kind
