"""Multi-domain learning on a minimal reverse-mode autodiff.

Modules: ``autodiff`` (tensors and the tape), ``optim``, ``models``
(shared-bottom, experts, adversarial and single-head architectures),
``dtrain`` (pretrain, post-train and frozen-backbone fine-tune), ``data``
(synthetic generators and balanced batching), ``metrics``, ``config`` and
``cli``.
"""

__version__ = "0.1.0"
