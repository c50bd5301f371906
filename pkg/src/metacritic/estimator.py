"""scikit-learn style wrapper around meta-training and few-shot prediction."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .metalearn import MetaConfig, init_meta_state, meta_step, predict_proba
from .networks import MLPSpec
from .rng import derive_rng
from .tasks import FileCorpus


class MetaCriticClassifier(ClassifierMixin, BaseEstimator):
    """Few-shot classifier over flat feature vectors.

    ``fit(X, y)`` meta-learns an initialisation from a pool of base classes.
    ``adapt(X_support, y_support)`` registers a labelled support set for
    ``way`` novel classes. ``predict``/``predict_proba`` then adapt to the
    support set and, for critic variants, also adapt transductively on the
    rows being predicted, in blocks of ``way * query`` rows (the critic's
    fixed input size; a short last block is filled by repeating its rows).

    Parameters
    ----------
    variant : {"maml_pp", "sca_pred", "sca_pred_params"}
    way, shot, query : int
        Episode shape used during meta-training.
    hidden : tuple of int
        Hidden widths of the base MLP.
    inner_steps, critic_steps : int
    lslr_init : float
        Initial inner-loop step size (support and critic steps).
    meta_steps : int
        Number of outer updates performed by ``fit``.
    random_state : int
    """

    def __init__(self, variant="sca_pred", way=5, shot=1, query=3, hidden=(32, 32), inner_steps=5,
                 critic_steps=1, lslr_init=0.1, meta_steps=100, random_state=0):
        self.variant = variant
        self.way = way
        self.shot = shot
        self.query = query
        self.hidden = hidden
        self.inner_steps = inner_steps
        self.critic_steps = critic_steps
        self.lslr_init = lslr_init
        self.meta_steps = meta_steps
        self.random_state = random_state

    def _meta_config(self) -> MetaConfig:
        return MetaConfig.for_shot(self.shot, variant=self.variant, inner_steps=self.inner_steps,
                                   critic_steps=self.critic_steps, lslr_init=self.lslr_init,
                                   critic_lslr_init=self.lslr_init)

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        labels, counts = np.unique(y, return_counts=True)
        if len(labels) < self.way:
            raise ValueError(f"need at least way={self.way} classes to meta-train, got {len(labels)}")
        if counts.min() < self.shot + self.query:
            raise ValueError(f"every class needs shot+query={self.shot + self.query} samples, "
                             f"smallest has {counts.min()}")
        ids = [f"c{i:04d}" for i in range(len(labels))]
        corpus = FileCorpus({cid: X[y == lab] for cid, lab in zip(ids, labels)}, {"train": ids},
                            seed=self.random_state)
        cfg = self._meta_config()
        model = MLPSpec(in_features=X.shape[1], hidden=tuple(self.hidden), num_classes=self.way)
        state = init_meta_state(model, cfg, self.random_state, self.way, self.query)
        rng = derive_rng(self.random_state, "estimator-episodes")
        self.loss_curve_ = []
        for step in range(self.meta_steps):
            batch = [corpus.sample_episode("train", int(i), self.way, self.shot, self.query)
                     for i in rng.integers(0, 2 ** 62, size=cfg.meta_batch_size)]
            state, metrics = meta_step(state, batch, cfg, epoch=step * cfg.anneal_epochs // max(self.meta_steps, 1))
            self.loss_curve_.append(metrics.outer_loss)
        self.state_ = state
        self.config_ = cfg
        self.train_classes_ = labels
        self.n_features_in_ = X.shape[1]
        return self

    def adapt(self, X_support, y_support):
        check_is_fitted(self, "state_")
        X_support, y_support = check_X_y(X_support, y_support, dtype=np.float64)
        self._check_features(X_support)
        classes = np.unique(y_support)
        if len(classes) != self.way:
            raise ValueError(f"support set must contain exactly way={self.way} classes, got {len(classes)}")
        self.classes_ = classes
        self.support_ = (X_support, np.searchsorted(classes, y_support))
        return self

    def _check_features(self, X):
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, estimator was fitted with {self.n_features_in_}")

    def predict_proba(self, X):
        check_is_fitted(self, ("state_", "support_"))
        X = check_array(X, dtype=np.float64)
        self._check_features(X)
        xs, ys = self.support_
        if not self.config_.uses_critic:
            return predict_proba(self.state_, xs, ys, X, self.config_)
        block = self.way * self.query
        out = []
        for start in range(0, len(X), block):
            chunk = X[start:start + block]
            padded = np.resize(chunk, (block, X.shape[1]))  # cycles rows of a short block
            out.append(predict_proba(self.state_, xs, ys, padded, self.config_)[: len(chunk)])
        return np.concatenate(out)

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[np.argmax(proba, axis=1)]
