"""scikit-learn style front door: a classifier that trains one source model
per domain (with batch enrichment and sign-alignment regularization) and
merges them into a single set of parameters for prediction.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from .data import Dataset, split_train_val
from .errors import ConfigError
from .merge import STRATEGIES, MergeInput, merge_models
from .model import CosineClassifier, EncoderConfig, init_prototypes
from .train import HarmonyConfig, train_all
from .validation import check_domains, check_features, check_labels


class HarmonizedMergeClassifier(BaseEstimator, ClassifierMixin):
    """Multi-source cosine-prototype classifier with harmonized training and
    redundancy-aware parameter merging.

    Parameters mirror the pipeline knobs: ``lam`` weights the sign-alignment
    loss, ``sae`` toggles confident foreign-sample enrichment, ``strategy``
    selects the merge (``rhm``, ``avg``, ``layer_trim``, ``best_model``), and
    ``trim_ratio`` is the trimmed magnitude fraction.
    """

    def __init__(
        self,
        hidden_dims=(32, 32),
        embed_dim=16,
        logit_scale=10.0,
        lam=0.5,
        sign_mode="layer_dot",
        beta=0.5,
        steps=200,
        batch_size=24,
        lr=2e-3,
        weight_decay=0.1,
        trim_ratio=0.2,
        strategy="rhm",
        sae=True,
        val_fraction=0.2,
        random_state=0,
    ):
        self.hidden_dims = hidden_dims
        self.embed_dim = embed_dim
        self.logit_scale = logit_scale
        self.lam = lam
        self.sign_mode = sign_mode
        self.beta = beta
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.trim_ratio = trim_ratio
        self.strategy = strategy
        self.sae = sae
        self.val_fraction = val_fraction
        self.random_state = random_state

    # -- sklearn API --------------------------------------------------------

    def fit(self, X, y, domains=None):
        """Train per-domain source models and merge them.

        ``domains`` assigns each row to a source; when omitted, all rows form
        a single source (plain fine-tuning with historical averaging).
        """
        X = check_features(X)
        y = check_labels(y, len(X))
        if domains is None:
            domains = np.zeros(len(X), dtype=np.int64)
        domains = check_domains(domains, len(X))
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}")

        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least 2 classes")
        self.n_features_in_ = X.shape[1]
        domain_values, domain_idx = np.unique(domains, return_inverse=True)

        ds = Dataset(
            X,
            y_idx,
            domain_idx,
            np.zeros(len(X), dtype=bool),
            n_classes=len(self.classes_),
        )

        config = EncoderConfig(
            input_dim=self.n_features_in_,
            embed_dim=self.embed_dim,
            hidden_dims=tuple(self.hidden_dims),
            logit_scale=self.logit_scale,
        )
        prototypes = init_prototypes(
            len(self.classes_), self.embed_dim, self.random_state
        )
        clf = CosineClassifier(config, prototypes)
        theta0 = clf.init_params(self.random_state + 1)

        needs_val = self.strategy == "best_model" or self.val_fraction > 0
        min_count = np.bincount(domain_idx).min()
        if needs_val and min_count >= 5:
            split = split_train_val(ds, self.random_state, ratio=self.val_fraction)
            train_ds, val_ds = split.train, split.val
        else:
            if self.strategy == "best_model":
                raise ConfigError(
                    "best_model strategy needs >= 5 samples per domain "
                    "for a validation split"
                )
            train_ds, val_ds = ds, None
        per_source = [train_ds.restrict([d]) for d in range(len(domain_values))]

        train_cfg = HarmonyConfig(
            lam=self.lam,
            sign_mode=self.sign_mode,
            beta=self.beta,
            steps=self.steps,
            batch_size=self.batch_size,
            lr=self.lr,
            weight_decay=self.weight_decay,
            trim_ratio=self.trim_ratio,
            sae=self.sae,
            seed=self.random_state,
        )
        result = train_all(per_source, clf, theta0, train_cfg, val_view=val_ds)

        if self.strategy == "best_model":
            merge_input = MergeInput(
                theta0,
                list(result.best_params),
                trim_ratio=self.trim_ratio,
                strategy="best_model",
                val_accuracies=list(result.best_val_acc),
            )
        else:
            merge_input = MergeInput(
                theta0,
                list(result.ma_params),
                trim_ratio=self.trim_ratio,
                strategy=self.strategy,
            )
        merged, report = merge_models(merge_input)

        self.classifier_ = clf
        self.theta0_ = theta0
        self.final_params_ = merged
        self.source_params_ = result.ma_params
        self.merge_report_ = report
        self.train_log_ = result.log
        return self

    def _check_fitted(self):
        if not hasattr(self, "final_params_"):
            raise RuntimeError("estimator is not fitted yet; call fit first")

    def predict(self, X):
        self._check_fitted()
        X = check_features(X, n_features=self.n_features_in_)
        idx = self.classifier_.predict(self.final_params_, X)
        return self.classes_[idx]

    def predict_proba(self, X):
        self._check_fitted()
        X = check_features(X, n_features=self.n_features_in_)
        return self.classifier_.forward(self.final_params_, X).probs

    def decision_function(self, X):
        self._check_fitted()
        X = check_features(X, n_features=self.n_features_in_)
        return self.classifier_.forward(self.final_params_, X).logits
