"""Committed experiment suites.

``conflict``: four rotated two-moon domains with a long-tailed sample count,
used for the shared-bottom comparison, the ablations, the domination
diagnostic and the post-train dip.  ``ctr``: a synthetic click log with a
50:1 largest-to-smallest domain ratio, used for the head-only plug-in phase.

Every config is a plain dict accepted by :class:`mdlab.config.ExperimentConfig`;
the JSON files under ``configs/`` are generated from these.
"""

from __future__ import annotations

import copy

SEEDS = [0, 1, 2, 3, 4]

_SGD = {"kind": "sgd-momentum", "learning_rate": 0.05, "momentum": 0.9, "decay": 0.005}
_SGD_FINETUNE = {**_SGD, "learning_rate": 0.02}


def _phase(epochs: int, optimizer: dict, batch_size: int = 20, eval_every: int = 10) -> dict:
    return {"epochs": epochs, "batch_size": batch_size, "eval_every": eval_every, "eval_train": False, "optimizer": dict(optimizer)}


CONFLICT_DATA = {
    "kind": "two_moons",
    "counts": [2000, 500, 200, 100],
    "rotations": [0, 30, 60, 90],
    "noise": 0.3,
    "names": ["rot0", "rot30", "rot60", "rot90"],
}
CONFLICT_ARCH = {"kind": "shared_bottom", "backbone_layers": [16], "head_layers": []}
CONFLICT_EPOCHS = {"pretrain": 2, "posttrain": 4, "finetune": 6}
CONFLICT_PHASES = {
    "pretrain": _phase(CONFLICT_EPOCHS["pretrain"], _SGD),
    "posttrain": _phase(CONFLICT_EPOCHS["posttrain"], _SGD),
    "finetune": _phase(CONFLICT_EPOCHS["finetune"], _SGD_FINETUNE),
    # single-phase baselines get the same total number of epochs
    "train": _phase(sum(CONFLICT_EPOCHS.values()), _SGD),
}
CONFLICT_METHODS = (
    "dtrain",
    "shared_bottom",
    "dtrain_ablation:no_pretrain",
    "dtrain_ablation:no_posttrain",
    "dtrain_ablation:no_finetune",
)

_ADAM = {"kind": "adam", "learning_rate": 0.01}
CTR_DATA = {
    "kind": "ctr",
    "counts": [5000, 1000, 100],
    "n_users": 50,
    "n_items": 50,
    "domain_similarity": 0.5,
    "names": ["large", "medium", "small"],
}
CTR_ARCH = {"kind": "mmoe", "backbone_layers": [16], "head_layers": [], "num_classes": 1, "expert_count": 4}
CTR_PHASES = {
    "train": _phase(3, _ADAM, batch_size=50, eval_every=50),
    "plugin": _phase(2, {**_ADAM, "learning_rate": 0.005}, batch_size=50, eval_every=50),
}
CTR_METHODS = ("mmoe", "plugin:mmoe")


def _config(suite: str, method: str, data: dict, arch: dict, phases: dict, keep: tuple[str, ...]) -> dict:
    arch = dict(arch)
    if method in ("shared_bottom", "mmoe", "ple", "moe", "joint", "separate", "dann_mdl", "mulann"):
        arch["kind"] = method
    return copy.deepcopy(
        {
            "name": f"{suite}/{method}",
            "data": data,
            "arch": arch,
            "method": method,
            "phases": {k: phases[k] for k in keep},
            "seeds": SEEDS,
        }
    )


def conflict_config(method: str) -> dict:
    from .config import required_phases

    return _config("conflict", method, CONFLICT_DATA, CONFLICT_ARCH, CONFLICT_PHASES, required_phases(method))


def ctr_config(method: str) -> dict:
    from .config import required_phases

    return _config("ctr", method, CTR_DATA, CTR_ARCH, CTR_PHASES, required_phases(method))


def config_files() -> dict[str, dict]:
    """File name under ``configs/`` -> config dict."""
    from .config import method_slug

    out = {f"conflict_{method_slug(m)}.json": conflict_config(m) for m in CONFLICT_METHODS}
    out.update({f"ctr_{method_slug(m)}.json": ctr_config(m) for m in CTR_METHODS})
    return out
