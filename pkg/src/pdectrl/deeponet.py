"""DeepONet imitating the backstepping feedback, reusable as a feature extractor.

The branch net reads the concatenated (coefficient, state) samples, each
divided by a fixed per-benchmark scale; the trunk reads the query point.
The scalar output is ``branch . trunk + bias``; the feature vector is the
elementwise product ``branch * trunk`` evaluated at the actuated boundary
``x = 1``, so ``sum(features) + bias`` reproduces the control.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError, NumericalFailureError
from .nn import Adam, DenseNet, checkpoint_load, checkpoint_save
from .numerics import Rng
from .pde_env import AMPLITUDE

log = logging.getLogger(__name__)

BOUNDARY_QUERY = 1.0
STATE_SCALE = 10.0


@dataclass(frozen=True)
class DeepONetShape:
    n_points: int = 101
    latent: int = 64
    branch_hidden: tuple = (128, 128)
    trunk_hidden: tuple = (64, 64)


class DeepONetModel:
    def __init__(self, branch: DenseNet, trunk: DenseNet, output_bias: float = 0.0,
                 coeff_scale: float = 1.0, state_scale: float = 1.0):
        if branch.out_dim != trunk.out_dim:
            raise InvalidArgumentError(
                f"branch width {branch.out_dim} != trunk width {trunk.out_dim}")
        if branch.in_dim % 2 or trunk.in_dim != 1:
            raise InvalidArgumentError("branch must read 2n inputs and trunk a single coordinate")
        self.branch = branch
        self.trunk = trunk
        self.bias = np.array([float(output_bias)])
        self.coeff_scale = float(coeff_scale)
        self.state_scale = float(state_scale)

    @classmethod
    def initialized(cls, kind: str, rng: Rng, shape: DeepONetShape = DeepONetShape()):
        n = shape.n_points
        branch = DenseNet.initialized(
            [2 * n, *shape.branch_hidden, shape.latent],
            ["relu"] * len(shape.branch_hidden) + ["identity"], rng)
        trunk = DenseNet.initialized(
            [1, *shape.trunk_hidden, shape.latent],
            ["tanh"] * len(shape.trunk_hidden) + ["identity"], rng)
        return cls(branch, trunk, 0.0, AMPLITUDE[kind], STATE_SCALE)

    @property
    def n_points(self) -> int:
        return self.branch.in_dim // 2

    @property
    def latent(self) -> int:
        return self.branch.out_dim

    @property
    def output_bias(self) -> float:
        return float(self.bias[0])

    @property
    def params(self) -> list:
        return self.branch.params + self.trunk.params + [self.bias]

    @property
    def feature_params(self) -> list:
        return self.branch.params + self.trunk.params

    def copy(self) -> "DeepONetModel":
        return DeepONetModel(self.branch.copy(), self.trunk.copy(), self.output_bias,
                             self.coeff_scale, self.state_scale)

    def branch_input(self, coeff, state) -> np.ndarray:
        coeff = np.asarray(coeff, dtype=float)
        state = np.asarray(state, dtype=float)
        n = self.n_points
        if coeff.shape[-1] != n or state.shape[-1] != n:
            raise InvalidArgumentError(
                f"expected {n} coefficient and state samples, got {coeff.shape[-1]} and {state.shape[-1]}")
        coeff, state = np.broadcast_arrays(coeff, state)
        return np.concatenate([coeff / self.coeff_scale, state / self.state_scale], axis=-1)

    # -- forward -------------------------------------------------------------

    def _parts(self, coeff, state, query):
        b, b_cache = self.branch.forward(self.branch_input(coeff, state))
        q = np.asarray(query, dtype=float)
        t, t_cache = self.trunk.forward(q[..., None])
        return b, b_cache, t, t_cache

    def forward_scalar(self, coeff, state, query=BOUNDARY_QUERY):
        b, _, t, _ = self._parts(coeff, state, query)
        return (b * t).sum(axis=-1) + self.bias[0]

    def forward_features(self, coeff, state):
        return self.features_with_cache(coeff, state)[0]

    def features_with_cache(self, coeff, state):
        b, b_cache, t, t_cache = self._parts(coeff, state, BOUNDARY_QUERY)
        return b * t, (b, b_cache, t, t_cache)

    # -- backward ------------------------------------------------------------

    def features_backward(self, cache, grad_features):
        """Parameter gradients (branch then trunk order) for ``dL/dfeatures``."""
        b, b_cache, t, t_cache = cache
        g = np.asarray(grad_features, dtype=float)
        grad_b = g * t
        grad_t = g * b
        if grad_t.ndim == 2:
            # the trunk saw one query shared by the whole batch
            grad_t = grad_t.sum(axis=0)
        b_grads, _ = self.branch.backward(b_cache, grad_b)
        t_grads, _ = self.trunk.backward(t_cache, grad_t)
        return b_grads + t_grads

    def scalar_loss_grads(self, coeff, state, target):
        """Mean squared error at the boundary query and its gradient."""
        feats, cache = self.features_with_cache(coeff, state)
        pred = feats.sum(axis=-1) + self.bias[0]
        err = pred - target
        m = err.shape[0]
        loss = float(np.mean(err * err))
        g = (2.0 / m) * err
        grads = self.features_backward(cache, np.broadcast_to(g[:, None], feats.shape))
        grads.append(np.array([g.sum()]))
        return loss, grads

    # -- persistence ---------------------------------------------------------

    def nets(self, prefix: str = "") -> dict:
        return {prefix + "branch": self.branch, prefix + "trunk": self.trunk}

    def scalars(self, prefix: str = "") -> dict:
        return {prefix + "output_bias": self.output_bias,
                prefix + "coeff_scale": self.coeff_scale,
                prefix + "state_scale": self.state_scale}

    def save(self, path) -> None:
        checkpoint_save(self.nets(), path, self.scalars())

    @classmethod
    def from_checkpoint(cls, nets: dict, scalars: dict, prefix: str = "") -> "DeepONetModel":
        try:
            return cls(nets[prefix + "branch"].copy(), nets[prefix + "trunk"].copy(),
                       scalars[prefix + "output_bias"], scalars[prefix + "coeff_scale"],
                       scalars[prefix + "state_scale"])
        except KeyError as exc:
            from .errors import CheckpointFormatError
            raise CheckpointFormatError(f"checkpoint lacks DeepONet record {exc}") from None

    @classmethod
    def load(cls, path) -> "DeepONetModel":
        return cls.from_checkpoint(*checkpoint_load(path))


def forward_scalar(model: DeepONetModel, coeff, state, query=BOUNDARY_QUERY):
    return model.forward_scalar(coeff, state, query)


def forward_features(model: DeepONetModel, coeff, state):
    return model.forward_features(coeff, state)


def relative_l2_error(pred, target) -> float:
    """``sqrt(sum (pred - target)^2 / sum target^2)``."""
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    denom = float(np.sum(target * target))
    num = float(np.sum((pred - target) ** 2))
    if denom == 0.0:
        return math.sqrt(num)
    return math.sqrt(num / denom)


def predict(model: DeepONetModel, dataset, batch: int = 8192) -> np.ndarray:
    out = np.empty(dataset.count)
    for start in range(0, dataset.count, batch):
        stop = start + batch
        out[start:stop] = model.forward_scalar(dataset.coeff[start:stop], dataset.state[start:stop])
    return out


@dataclass
class PretrainReport:
    train_mse: list = field(default_factory=list)
    test_mse: list = field(default_factory=list)
    test_relative_l2: float = math.nan
    initial_relative_l2: float = math.nan


def _mse(model, dataset) -> float:
    if dataset.count == 0:
        return math.nan
    err = predict(model, dataset) - dataset.target
    return float(np.mean(err * err))


def pretrain(model: DeepONetModel, train_set, test_set, epochs: int = 50,
             batch_size: int = 256, lr: float = 1e-3, rng: Rng | None = None,
             lr_decay: float = 1.0, callback=None) -> PretrainReport:
    """Fit ``forward_scalar(query=1)`` to the stored backstepping controls.

    Adam on shuffled mini-batches. ``lr_decay`` multiplies the learning rate
    after every epoch (1.0 keeps it constant).
    """
    if train_set.count == 0 or test_set.count == 0:
        raise InvalidArgumentError("pretraining needs non-empty train and test sets")
    if train_set.kind != test_set.kind:
        raise InvalidArgumentError("train and test sets come from different benchmarks")
    rng = rng or Rng(0)
    opt = Adam(model.params, lr)
    report = PretrainReport()
    report.initial_relative_l2 = relative_l2_error(predict(model, test_set), test_set.target)
    m = train_set.count
    for epoch in range(epochs):
        perm = rng.permutation(m)
        total = 0.0
        for k, start in enumerate(range(0, m, batch_size)):
            idx = perm[start:start + batch_size]
            loss, grads = model.scalar_loss_grads(
                train_set.coeff[idx], train_set.state[idx], train_set.target[idx])
            if not math.isfinite(loss):
                raise NumericalFailureError(
                    f"non-finite loss at epoch {epoch}, batch {k} (lr={opt.state.lr:g})")
            opt.step(grads)
            total += loss * idx.shape[0]
        report.train_mse.append(total / m)
        report.test_mse.append(_mse(model, test_set))
        opt.state.lr *= lr_decay
        log.info("epoch %d train_mse %.3e test_mse %.3e", epoch, report.train_mse[-1],
                 report.test_mse[-1])
        if callback is not None:
            callback(epoch, report)
    report.test_relative_l2 = relative_l2_error(predict(model, test_set), test_set.target)
    return report


class DeepONetController:
    """State feedback ``values -> U`` driven by a trained model."""

    def __init__(self, model: DeepONetModel, coeff_samples):
        self.model = model
        self.coeff = np.asarray(coeff_samples, dtype=float)

    def __call__(self, values):
        return self.model.forward_scalar(self.coeff, values)
