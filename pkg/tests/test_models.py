import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mdlab import checkpoint
from mdlab.autodiff import backward
from mdlab.errors import ConfigError, ContractError, DataError, DimensionError, FrozenGroupError
from mdlab.models import (
    KINDS,
    ArchSpec,
    build_model,
    clone_head,
    closed_form_count,
    composite_loss,
    count_params,
    forward,
    forward_full,
    loss,
    predict,
    set_trainable,
)
from mdlab.optim import make_optimizer, optimizer_step

from oracles import random_arch, random_batch, table_count


def _sb(T=3, **kw):
    return ArchSpec("shared_bottom", 2, [4], [], 2, T, **kw)


def _zero(model):
    for g in model.group_names:
        model.set_group(g, {k: np.zeros_like(v) for k, v in model.group_arrays(g).items()})
    return model


# ---------------------------------------------------------------------------
# spec validation

def test_kind_specific_fields_required_exactly_when_needed():
    with pytest.raises(ConfigError):
        ArchSpec("mmoe", 2, [4], num_domains=2)
    with pytest.raises(ConfigError):
        ArchSpec("shared_bottom", 2, [4], num_domains=2, expert_count=3)
    with pytest.raises(ConfigError):
        ArchSpec("ple", 2, [4], num_domains=2, shared_experts=0, specific_experts=1)
    with pytest.raises(ConfigError):
        ArchSpec("dann_mdl", 2, [4], num_domains=2, discriminator_layers=[], lam=-1.0)
    with pytest.raises(ConfigError):
        ArchSpec("resnet", 2, [4])
    with pytest.raises(ConfigError):
        ArchSpec("joint", 0, [4])


def test_spec_dict_round_trip_and_unknown_keys():
    spec = random_arch(np.random.default_rng(1), "ple")
    assert ArchSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(ConfigError):
        ArchSpec.from_dict({**spec.to_dict(), "dropout": 0.5})


# ---------------------------------------------------------------------------
# parameter counts

def test_shared_bottom_count_example():
    assert count_params(build_model(_sb(), 0))["total"] == 42


def test_joint_count_example():
    assert count_params(build_model(ArchSpec("joint", 2, [4], [], 2, 3), 0))["total"] == 22


def test_count_groups_sum_to_total():
    counts = count_params(build_model(_sb(), 0))
    assert counts == {"backbone": 12, "head_0": 10, "head_1": 10, "head_2": 10, "total": 42}


@pytest.mark.parametrize("kind", KINDS)
def test_closed_forms_by_kind(kind):
    rng = np.random.default_rng(KINDS.index(kind))
    for _ in range(5):
        spec = random_arch(rng, kind)
        n = count_params(build_model(spec, 0))["total"]
        assert n == closed_form_count(spec) == table_count(spec)


def test_ple_structure_example():
    spec = ArchSpec("ple", 2, [3], [], 2, 2, shared_experts=1, specific_experts=1)
    model = build_model(spec, 0)
    experts = [g for g in model.group_names if "expert" in g]
    assert len(experts) == 3
    out = forward_full(model, np.ones((5, 2)), 0)
    assert out.gate_weights.shape == (5, 2)


# ---------------------------------------------------------------------------
# forward / loss

def test_zero_parameters_give_zero_logits():
    model = _zero(build_model(_sb(), 0))
    assert np.all(forward(model, np.random.default_rng(0).standard_normal((6, 2)), 1).data == 0.0)


def test_zero_model_loss_is_log_c():
    spec = ArchSpec("shared_bottom", 3, [4], [], 5, 2)
    model = _zero(build_model(spec, 0))
    L = loss(model, (np.ones((7, 3)), np.arange(7) % 5), 0)
    assert L.item() == pytest.approx(math.log(5), abs=1e-15)


def test_saturated_logits_give_tiny_loss():
    spec = ArchSpec("joint", 2, [2], [], 2, 1)
    model = build_model(spec, 0)
    model.set_group("backbone", {"W0": np.eye(2), "b0": np.zeros(2)})
    model.set_group("head", {"W0": np.eye(2) * 100, "b0": np.zeros(2)})
    x = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert loss(model, (x, np.array([0, 1])), 0).item() < 1e-8


def test_dann_with_zero_lambda_equals_shared_bottom():
    rng = np.random.default_rng(5)
    sb = ArchSpec("shared_bottom", 3, [5], [], 3, 3)
    dann = ArchSpec("dann_mdl", 3, [5], [], 3, 3, discriminator_layers=[4], lam=0.0)
    m_sb, m_dann = build_model(sb, 1), build_model(dann, 1)
    for g in m_sb.group_names:
        m_dann.set_group(g, m_sb.group_arrays(g))
    x, y = random_batch(rng, sb, 8)
    for t in range(3):
        assert loss(m_sb, (x, y), t).item() == loss(m_dann, (x, y), t).item()


def test_domain_out_of_range():
    with pytest.raises(ContractError):
        forward(build_model(_sb(), 0), np.ones((2, 2)), 3)


def test_label_out_of_range():
    with pytest.raises(DataError):
        loss(build_model(_sb(), 0), (np.ones((2, 2)), np.array([0, 2])), 0)


def test_input_width_checked():
    with pytest.raises(DimensionError):
        forward(build_model(_sb(), 0), np.ones((2, 3)), 0)


@pytest.mark.parametrize("kind", ["moe", "mmoe", "ple"])
def test_gate_weights_are_normalized(kind):
    rng = np.random.default_rng(2)
    for _ in range(5):
        spec = random_arch(rng, kind)
        x = rng.standard_normal((6, spec.input_dim)) * 3
        for t in range(spec.num_domains):
            w = forward_full(build_model(spec, int(rng.integers(100))), x, t).gate_weights.data
            assert np.all(w >= 0)
            np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12, rtol=0)


def test_ple_specific_expert_perturbation_is_local():
    spec = ArchSpec("ple", 2, [4], [], 2, 2, shared_experts=1, specific_experts=1)
    model = build_model(spec, 3)
    x = np.random.default_rng(0).standard_normal((5, 2))
    before0, before1 = forward(model, x, 0).data, forward(model, x, 1).data
    model.set_group("expert_1_0", {k: v + 1.0 for k, v in model.group_arrays("expert_1_0").items()})
    assert np.array_equal(before0, forward(model, x, 0).data)
    assert not np.array_equal(before1, forward(model, x, 1).data)


def test_adversarial_kinds_expose_domain_logits():
    spec = ArchSpec("mulann", 2, [4], [], 2, 3, discriminator_layers=[3], lam=0.5)
    out = forward_full(build_model(spec, 0), np.ones((4, 2)), 2)
    assert out.domain_logits.shape == (4, 3)


def test_predict_ties_go_to_lowest_index():
    model = _zero(build_model(ArchSpec("joint", 2, [2], [], 4, 1), 0))
    assert predict(model, np.ones((3, 2)), 0).tolist() == [0, 0, 0]


def test_binary_predict_uses_sign():
    spec = ArchSpec("shared_bottom", 1, [1], [], 1, 1)
    model = build_model(spec, 0)
    model.set_group("backbone", {"W0": np.array([[1.0]]), "b0": np.zeros(1)})
    model.set_group("head_0", {"W0": np.array([[1.0]]), "b0": np.array([-0.5])})
    assert predict(model, np.array([[0.0], [1.0], [0.5]]), 0).tolist() == [0, 1, 0]


# ---------------------------------------------------------------------------
# isolation

@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), kind=st.sampled_from(["shared_bottom", "mmoe", "ple"]))
def test_head_and_expert_gradient_isolation(seed, kind):
    rng = np.random.default_rng(seed)
    spec = random_arch(rng, kind, num_domains=int(rng.integers(2, 5)))
    model = build_model(spec, seed)
    params = model.parameters()
    for t in range(spec.num_domains):
        g = backward(loss(model, random_batch(rng, spec, 5), t), params)
        for u in range(spec.num_domains):
            if u == t:
                continue
            own = [f"head_{u}."] + ([f"expert_{u}_"] if kind == "ple" else [])
            for name, grad in g.items():
                if any(name.startswith(p) for p in own):
                    assert np.all(grad == 0.0), name


def test_composite_loss_is_mean_of_domain_losses():
    rng = np.random.default_rng(4)
    spec = random_arch(rng, "mmoe", num_domains=3)
    model = build_model(spec, 0)
    batches = [random_batch(rng, spec, 4) for _ in range(3)]
    total = composite_loss(model, [b[0] for b in batches], [b[1] for b in batches], [0, 1, 2]).item()
    each = [loss(model, b, t).item() for t, b in enumerate(batches)]
    assert total == pytest.approx(np.mean(each), abs=1e-12)


# ---------------------------------------------------------------------------
# freezing and cloning

def test_freeze_backbone_keeps_it_bit_identical():
    rng = np.random.default_rng(0)
    spec = _sb()
    model = set_trainable(build_model(spec, 0), ["backbone"], False)
    snap = model.snapshot(["backbone"])
    params = model.parameters()
    opt = make_optimizer(learning_rate=0.1)
    for step in range(100):
        t = step % 3
        optimizer_step(opt, params, backward(loss(model, random_batch(rng, spec, 4), t), params))
    after = model.snapshot(["backbone"])
    assert all(np.array_equal(snap[k], after[k]) for k in snap)


def test_freeze_all_makes_steps_no_ops():
    model = build_model(_sb(), 0)
    set_trainable(model, model.group_names, False)
    snap = model.snapshot()
    params = model.parameters()
    optimizer_step(make_optimizer(), params, {k: np.ones_like(p.data) for k, p in params.items()})
    after = model.snapshot()
    assert all(np.array_equal(snap[k], after[k]) for k in snap)


def test_train_one_head_changes_only_that_head():
    rng = np.random.default_rng(1)
    spec = _sb()
    model = build_model(spec, 0)
    set_trainable(model, ["backbone", "head_1", "head_2"], False)
    snap = model.snapshot()
    params = model.parameters(trainable_only=True)
    opt = make_optimizer(learning_rate=0.1)
    for _ in range(10):
        optimizer_step(opt, params, backward(loss(model, random_batch(rng, spec, 4), 0), params))
    after = model.snapshot()
    changed = {k.split(".")[0] for k in snap if not np.array_equal(snap[k], after[k])}
    assert changed == {"head_0"}


def test_set_group_refuses_frozen_and_unknown_groups():
    model = set_trainable(build_model(_sb(), 0), ["backbone"], False)
    with pytest.raises(FrozenGroupError):
        model.set_group("backbone", model.group_arrays("backbone"))
    with pytest.raises(ContractError):
        set_trainable(model, ["tower"], False)


def test_clone_head_copies_without_aliasing():
    rng = np.random.default_rng(2)
    spec = _sb()
    joint = build_model(spec.replace(kind="joint"), 9)
    h0 = joint.group_arrays("head")
    model = clone_head(build_model(spec, 0), h0, ["head_0", "head_1", "head_2"])
    for t in range(3):
        arrays = model.group_arrays(f"head_{t}")
        assert all(np.array_equal(arrays[k], h0[k]) for k in h0)
    set_trainable(model, ["backbone", "head_1", "head_2"], False)
    params = model.parameters(trainable_only=True)
    optimizer_step(make_optimizer(learning_rate=0.1), params, backward(loss(model, random_batch(rng, spec, 4), 0), params))
    for t in (1, 2):
        arrays = model.group_arrays(f"head_{t}")
        assert all(np.array_equal(arrays[k], h0[k]) for k in h0)


def test_clone_head_shape_mismatch():
    model = build_model(_sb(), 0)
    with pytest.raises(DimensionError):
        clone_head(model, {"W0": np.ones((3, 2)), "b0": np.zeros(2)}, ["head_0"])


# ---------------------------------------------------------------------------
# initialization and checkpoints

def test_build_is_deterministic_and_seed_sensitive():
    spec = random_arch(np.random.default_rng(0), "ple")
    a, b, c = build_model(spec, 4).snapshot(), build_model(spec, 4).snapshot(), build_model(spec, 5).snapshot()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert any(not np.array_equal(a[k], c[k]) for k in a)


def test_init_bounds_and_zero_biases():
    model = build_model(ArchSpec("joint", 30, [50], [], 20, 1), 0)
    W = model.group_arrays("backbone")["W0"]
    assert np.abs(W).max() <= math.sqrt(6 / 80)
    assert np.all(model.group_arrays("backbone")["b0"] == 0.0)


@pytest.mark.parametrize("kind", KINDS)
def test_checkpoint_round_trip_is_bit_exact(kind, tmp_path):
    spec = random_arch(np.random.default_rng(len(kind)), kind)
    model = build_model(spec, 3)
    set_trainable(model, model.group_names[:1], False)
    path = tmp_path / "m.bin"
    checkpoint.save(model, path, {"phase": "x"})
    loaded, meta = checkpoint.load(path)
    assert meta == {"phase": "x"} and loaded.spec == spec and loaded.trainable == model.trainable
    a, b = model.snapshot(), loaded.snapshot()
    assert a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)
    assert checkpoint.dumps(loaded, meta) == path.read_bytes()


def test_checkpoint_rejects_garbage():
    with pytest.raises(ContractError):
        checkpoint.loads(b"not a checkpoint")
