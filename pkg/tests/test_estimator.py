import numpy as np
import pytest
from sklearn.base import clone

from harmerge.data import DomainSpec, generate
from harmerge.estimator import HarmonizedMergeClassifier


def toy_problem(seed=0, n=80):
    specs = [
        DomainSpec(domain_id=0, feature_noise_std=0.3),
        DomainSpec(domain_id=1, rotation_angle=0.6, offset=0.4, feature_noise_std=0.3),
    ]
    ds = generate(3, 4, n, specs, seed=seed)
    return ds.x, ds.y, ds.domain_id


class TestSklearnProtocol:
    def test_get_set_params_round_trip(self):
        est = HarmonizedMergeClassifier(steps=7, lam=0.3)
        params = est.get_params()
        assert params["steps"] == 7
        assert params["lam"] == 0.3
        est.set_params(steps=9)
        assert est.steps == 9

    def test_clone(self):
        est = HarmonizedMergeClassifier(steps=5, strategy="avg")
        cloned = clone(est)
        assert cloned.get_params() == est.get_params()

    def test_not_fitted_raises(self):
        est = HarmonizedMergeClassifier()
        with pytest.raises(RuntimeError, match="not fitted"):
            est.predict(np.ones((1, 4)))


class TestFitPredict:
    def test_fit_learns_toy_problem(self):
        x, y, domains = toy_problem()
        est = HarmonizedMergeClassifier(
            steps=120, batch_size=16, hidden_dims=(8,), embed_dim=8, random_state=0
        )
        est.fit(x, y, domains=domains)
        assert est.score(x, y) > 0.8

    def test_predict_returns_original_labels(self):
        x, y, domains = toy_problem()
        y_str = np.array(["cat", "dog", "fox"])[y]
        est = HarmonizedMergeClassifier(steps=20, batch_size=16, hidden_dims=(6,),
                                        embed_dim=8)
        est.fit(x, y_str, domains=domains)
        preds = est.predict(x[:5])
        assert set(preds) <= {"cat", "dog", "fox"}
        assert list(est.classes_) == ["cat", "dog", "fox"]

    def test_predict_proba_rows_normalized(self):
        x, y, domains = toy_problem()
        est = HarmonizedMergeClassifier(steps=10, batch_size=16, hidden_dims=(6,),
                                        embed_dim=8)
        est.fit(x, y, domains=domains)
        probs = est.predict_proba(x[:7])
        assert probs.shape == (7, 3)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)

    def test_single_source_when_domains_omitted(self):
        x, y, _ = toy_problem()
        est = HarmonizedMergeClassifier(steps=10, batch_size=16, hidden_dims=(6,),
                                        embed_dim=8, strategy="avg")
        est.fit(x, y)
        assert len(est.source_params_) == 1

    def test_strategies_all_run(self):
        x, y, domains = toy_problem()
        for strategy in ("rhm", "avg", "layer_trim", "best_model"):
            est = HarmonizedMergeClassifier(
                steps=10, batch_size=16, hidden_dims=(6,), embed_dim=8,
                strategy=strategy,
            )
            est.fit(x, y, domains=domains)
            assert est.predict(x[:3]).shape == (3,)

    def test_deterministic_given_random_state(self):
        x, y, domains = toy_problem()
        kw = dict(steps=15, batch_size=16, hidden_dims=(6,), embed_dim=8,
                  random_state=3)
        a = HarmonizedMergeClassifier(**kw).fit(x, y, domains=domains)
        b = HarmonizedMergeClassifier(**kw).fit(x, y, domains=domains)
        assert a.final_params_.equals(b.final_params_)


class TestValidation:
    def test_rejects_nan_features(self):
        x, y, domains = toy_problem()
        x = x.copy()
        x[0, 0] = np.nan
        est = HarmonizedMergeClassifier(steps=5)
        with pytest.raises(ValueError, match="NaN"):
            est.fit(x, y, domains=domains)

    def test_rejects_mismatched_lengths(self):
        x, y, domains = toy_problem()
        est = HarmonizedMergeClassifier(steps=5)
        with pytest.raises(ValueError):
            est.fit(x, y[:-1], domains=domains)

    def test_rejects_wrong_feature_count_at_predict(self):
        x, y, domains = toy_problem()
        est = HarmonizedMergeClassifier(steps=5, batch_size=16, hidden_dims=(6,),
                                        embed_dim=8)
        est.fit(x, y, domains=domains)
        with pytest.raises(ValueError, match="features"):
            est.predict(np.ones((2, 3)))

    def test_rejects_single_class(self):
        x, _, domains = toy_problem()
        est = HarmonizedMergeClassifier(steps=5)
        with pytest.raises(ValueError, match="classes"):
            est.fit(x, np.zeros(len(x)), domains=domains)


class TestBestModelStrategy:
    def test_small_domains_raise(self):
        from harmerge.errors import ConfigError

        x, y, domains = toy_problem(n=4)  # 4 per domain: too few to split
        est = HarmonizedMergeClassifier(steps=5, strategy="best_model",
                                        hidden_dims=(6,), embed_dim=8)
        with pytest.raises(ConfigError, match="best_model"):
            est.fit(x, y, domains=domains)


class TestEcosystemComposition:
    def test_works_inside_sklearn_pipeline(self):
        from sklearn.pipeline import Pipeline
        from sklearn.preprocessing import StandardScaler

        x, y, domains = toy_problem()
        pipe = Pipeline(
            [
                ("scale", StandardScaler()),
                ("clf", HarmonizedMergeClassifier(steps=150, batch_size=16,
                                                  hidden_dims=(8,), embed_dim=8)),
            ]
        )
        pipe.fit(x, y, clf__domains=domains)
        assert pipe.predict(x[:4]).shape == (4,)
        assert pipe.score(x, y) > 0.7

    def test_cross_val_score_runs(self):
        from sklearn.model_selection import cross_val_score

        x, y, _ = toy_problem(n=60)
        est = HarmonizedMergeClassifier(steps=25, batch_size=16, hidden_dims=(6,),
                                        embed_dim=8, strategy="avg")
        scores = cross_val_score(est, x, y, cv=2)
        assert scores.shape == (2,)
        assert np.all((0.0 <= scores) & (scores <= 1.0))
