import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from fewshot_biattn.data import generate_synthetic, proportional_split, sample_episode
from fewshot_biattn.estimator import EpisodeClassifier, FewShotMetricLearner
from fewshot_biattn.rng import PortableRng
from fewshot_biattn.validation import check_image_array, check_seed, check_support_set


@pytest.fixture(scope="module")
def store():
    return generate_synthetic(num_classes=12, samples_per_class=12, size=16, seed=31)


@pytest.fixture(scope="module")
def manifest():
    return proportional_split(12)


@pytest.fixture(scope="module")
def fitted(store, manifest):
    learner = FewShotMetricLearner(n_way=2, k_shot=2, queries_per_class=3, epochs=3,
                                   tasks_per_epoch=8, val_tasks=0, comparator="proto",
                                   optimizer="sgd_momentum", lr_initial=0.003,
                                   stage_channels=(2, 3, 4, 8), hidden_size=4,
                                   heads=2, seed=3)
    return learner.fit(store, manifest)


class TestFewShotMetricLearner:
    def test_get_params_round_trip(self):
        learner = FewShotMetricLearner(n_way=3, hidden_size=64)
        params = learner.get_params()
        assert params["n_way"] == 3 and params["hidden_size"] == 64
        other = FewShotMetricLearner().set_params(**params)
        assert other.get_params() == params

    def test_sklearn_clone(self):
        learner = FewShotMetricLearner(comparator="relation", seed=9)
        cloned = clone(learner)
        assert cloned.get_params() == learner.get_params()

    def test_fit_sets_artifacts(self, fitted):
        assert hasattr(fitted, "model_")
        assert len(fitted.log_.records) == 3
        assert isinstance(fitted.episodes_hash_, int)

    def test_evaluate_returns_report(self, fitted, store, manifest):
        rep = fitted.evaluate(store, manifest, split="test", num_tasks=4, seed=2)
        assert rep.num_tasks == 4
        assert 0.0 <= rep.mean <= 1.0

    def test_evaluate_before_fit_raises(self, store, manifest):
        with pytest.raises(NotFittedError):
            FewShotMetricLearner().evaluate(store, manifest)

    def test_training_learns_on_easy_data(self, fitted, store, manifest):
        rep = fitted.evaluate(store, manifest, split="test", num_tasks=20, seed=5)
        assert rep.mean > 0.6  # proto on separable synthetic data


class TestEpisodeClassifier:
    def test_fit_predict_roundtrip(self, fitted, store, manifest):
        episode = sample_episode(store, manifest, "test", 2, 2, 3, PortableRng(8))
        clf = fitted.episode_classifier()
        n, k = 2, 2
        support = episode.support_images.reshape((n * k, 1, 16, 16))
        labels = np.repeat(episode.class_ids, k)  # original alphabet
        clf.fit(support, labels)
        pred = clf.predict(episode.query_images)
        assert pred.shape == (episode.m_query,)
        assert set(pred).issubset(set(episode.class_ids.tolist()))
        truth = episode.class_ids[episode.query_labels]
        assert (pred == truth).mean() > 0.5

    def test_decision_function_shape(self, fitted, store, manifest):
        episode = sample_episode(store, manifest, "test", 2, 1, 2, PortableRng(9))
        clf = fitted.episode_classifier()
        clf.fit(episode.support_images.reshape((2, 1, 16, 16)), episode.class_ids)
        scores = clf.decision_function(episode.query_images)
        assert scores.shape == (4, 2)

    def test_unfitted_raises(self, fitted):
        clf = fitted.episode_classifier()
        with pytest.raises(NotFittedError):
            clf.predict(np.zeros((1, 1, 16, 16)))

    def test_unbalanced_support_rejected(self, fitted):
        clf = fitted.episode_classifier()
        x = np.zeros((3, 1, 16, 16))
        with pytest.raises(ValueError, match="unbalanced"):
            clf.fit(x, np.array([0, 0, 1]))

    def test_missing_model_rejected(self):
        with pytest.raises(ValueError, match="FewShotModel"):
            EpisodeClassifier().fit(np.zeros((2, 1, 16, 16)), np.array([0, 1]))


class TestValidationHelpers:
    def test_check_image_array_shape(self):
        with pytest.raises(ValueError, match="4-d"):
            check_image_array(np.zeros((3, 16, 16)))

    def test_check_image_array_finite(self):
        x = np.zeros((1, 1, 2, 2))
        x[0, 0, 0, 0] = np.inf
        with pytest.raises(ValueError, match="finite"):
            check_image_array(x)

    def test_check_support_set_groups(self):
        x = np.zeros((4, 1, 2, 2))
        x[2:] += 1.0
        classes, grouped, shots = check_support_set(x, np.array([5, 5, 9, 9]))
        assert classes.tolist() == [5, 9]
        assert grouped.shape == (2, 2, 1, 2, 2)
        assert shots.tolist() == [2, 2]

    def test_check_seed(self):
        assert check_seed(7) == 7
        with pytest.raises(ValueError):
            check_seed(-1)
