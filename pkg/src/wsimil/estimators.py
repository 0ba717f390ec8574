"""sklearn-style classifiers wrapping the two MIL heads.

Both estimators fit on a list of bags (EmbeddingBag, RegionBag or plain
(N, D) arrays) with one binary label per bag, train per-slide (batch size
1) with binary cross entropy and Adam, and expose per-instance attention
through ``attention_output``. Two fits with the same seed produce
bit-identical parameters.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from . import autodiff as ad
from . import heads
from .autodiff import Adam, AdamConfig, DropoutState, backward, bce_with_logits
from .embeddings import EmbeddingBag, group_regions
from .validation import check_bags, check_binary_labels


class TrainingError(RuntimeError):
    """Training aborted (non-finite loss), naming the epoch and slide."""


def _seed_int(seed: int, stream: int) -> int:
    return int(np.random.SeedSequence([int(seed), stream]).generate_state(1)[0])


class _MilClassifierBase(BaseEstimator, ClassifierMixin):
    head_name = "mil"

    # subclasses define _init_params / _bag_logit / _output

    def fit(self, bags, y):
        mats = self._prepare(bags)
        labels = check_binary_labels(y, len(mats))
        self.classes_ = np.array([0, 1])
        self.n_features_in_ = mats[0].shape[1]
        init_rng = np.random.default_rng(_seed_int(self.seed, 0))
        self.params_ = self._init_params(init_rng, self.n_features_in_)
        named = self.params_.tensors()
        optimizer = Adam(
            named,
            AdamConfig(lr=self.learning_rate, weight_decay=self.weight_decay),
        )
        shuffle_rng = np.random.default_rng(_seed_int(self.seed, 1))
        self._dropout_state = DropoutState(_seed_int(self.seed, 2))
        self.loss_history_ = []
        self.epoch_losses_ = []
        order = np.arange(len(mats))
        for epoch in range(self.epochs):
            shuffle_rng.shuffle(order)
            epoch_losses = []
            for i in order:
                try:
                    logit = self._bag_logit(mats[i], training=True)
                    loss = bce_with_logits(logit, float(labels[i]))
                    backward(loss)
                    optimizer.step()
                except FloatingPointError as exc:
                    raise TrainingError(
                        f"non-finite loss at epoch {epoch}, bag index {i}: {exc}"
                    ) from exc
                value = loss.item()
                epoch_losses.append(value)
                self.loss_history_.append(value)
            self.epoch_losses_.append(float(np.mean(epoch_losses)))
        return self

    def decision_function(self, bags) -> np.ndarray:
        self._check_fitted()
        mats = self._prepare(bags)
        return np.array(
            [self._bag_logit(m, training=False).item() for m in mats]
        )

    def predict_proba(self, bags) -> np.ndarray:
        logits = self.decision_function(bags)
        p = 1.0 / (1.0 + np.exp(-logits))
        return np.stack([1.0 - p, p], axis=1)

    def predict(self, bags) -> np.ndarray:
        return (self.decision_function(bags) > 0.0).astype(np.int64)

    def attention_output(self, bag) -> heads.MilOutput:
        self._check_fitted()
        return self._output(self._prepare([bag])[0])

    def save_weights(self, path) -> None:
        self._check_fitted()
        ad.save_checkpoint(path, self.params_.tensors())

    def load_weights(self, path) -> "_MilClassifierBase":
        arrays = ad.load_checkpoint(path)
        self.params_ = self._params_from_arrays(arrays)
        self.classes_ = np.array([0, 1])
        self.n_features_in_ = self._input_dim_of(self.params_)
        return self

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise RuntimeError(f"{type(self).__name__} is not fitted")

    def _prepare(self, bags):
        return check_bags(bags)


class DsmilClassifier(_MilClassifierBase):
    """Dual-stream MIL aggregator over patch bags."""

    head_name = "dsmil"

    def __init__(self, epochs: int = 200, learning_rate: float = 2e-4,
                 weight_decay: float = 5e-3, query_dim: int | None = None,
                 value_dim: int | None = None, seed: int = 0):
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.query_dim = query_dim
        self.value_dim = value_dim
        self.seed = seed

    def _init_params(self, rng, dim):
        return heads.init_dsmil(rng, dim, self.query_dim, self.value_dim)

    def _params_from_arrays(self, arrays):
        return heads.DsmilParams.from_arrays(arrays)

    @staticmethod
    def _input_dim_of(params):
        return params.dim

    def _bag_logit(self, mat, training):
        return heads.dsmil_forward(ad.Tensor(mat), self.params_).bag_logit

    def _output(self, mat):
        return heads.dsmil_output(mat, self.params_)


class RegionTransformerClassifier(_MilClassifierBase):
    """Single-layer transformer with a class token over region bags.

    ``region_factor`` > 1 mean-pools each patch bag into
    (factor x factor)-tile regions before the head sees it; plain arrays
    are taken as pre-grouped regions.
    """

    head_name = "transformer"

    def __init__(self, epochs: int = 20, learning_rate: float = 3e-4,
                 weight_decay: float = 0.0, n_heads: int = 3,
                 dropout: float = 0.25, ff_dim: int | None = None,
                 model_dim: int | None = None, region_factor: int = 1,
                 seed: int = 0):
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.n_heads = n_heads
        self.dropout = dropout
        self.ff_dim = ff_dim
        self.model_dim = model_dim
        self.region_factor = region_factor
        self.seed = seed

    def region_bag(self, bag):
        """The grouped RegionBag this estimator trains and explains on."""
        if isinstance(bag, EmbeddingBag):
            return group_regions(bag, bag.tile_size * self.region_factor)
        return bag

    def _prepare(self, bags):
        grouped = [
            self.region_bag(b) if isinstance(b, EmbeddingBag) else b
            for b in bags
        ]
        return check_bags(grouped)

    def _init_params(self, rng, dim):
        return heads.init_transformer(
            rng, dim, n_heads=self.n_heads, ff_dim=self.ff_dim,
            dropout=self.dropout, model_dim=self.model_dim,
        )

    def _params_from_arrays(self, arrays):
        return heads.TransformerParams.from_arrays(arrays, dropout=self.dropout)

    @staticmethod
    def _input_dim_of(params):
        return params.input_dim

    def _bag_logit(self, mat, training):
        fwd = heads.transformer_forward(
            ad.Tensor(mat), self.params_, training=training,
            dropout_state=self._dropout_state if training else None,
        )
        return fwd.bag_logit

    def _output(self, mat):
        return heads.transformer_output(mat, self.params_)


HEAD_REGISTRY = {
    "dsmil": DsmilClassifier,
    "transformer": RegionTransformerClassifier,
}


def make_estimator(head: str, **overrides):
    """Estimator factory for the CLI: defaults per head, flags override."""
    try:
        cls = HEAD_REGISTRY[head]
    except KeyError:
        raise ValueError(
            f"unknown head {head!r}; expected one of {sorted(HEAD_REGISTRY)}"
        ) from None
    valid = cls().get_params()
    unknown = set(overrides) - set(valid)
    if unknown:
        raise ValueError(f"unknown {head} parameter(s): {sorted(unknown)}")
    return cls(**overrides)
