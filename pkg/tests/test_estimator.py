import numpy as np
import pytest
from sklearn.base import clone

from mixnorm.bench import build_stream, generate_source_dataset
from mixnorm.estimator import SourceClassifier, TestTimeAdapter, check_images
from mixnorm.exceptions import UsageError
from mixnorm.harness import Method, run_adaptation


@pytest.fixture(scope="module")
def tiny_fit():
    ds = generate_source_dataset(1, 6, n_classes=3)
    names = np.array(["bars", "cross", "dots"])[ds.labels]
    clf = SourceClassifier(widths=(4, 8), epochs=3, batch_size=9, seed=2).fit(ds.images, names)
    return clf, ds, names


def test_source_classifier_fit_predict(tiny_fit):
    clf, ds, names = tiny_fit
    assert list(clf.classes_) == ["bars", "cross", "dots"]
    proba = clf.predict_proba(ds.images)
    assert proba.shape == (len(ds), 3)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0, rtol=1e-12)
    assert set(clf.predict(ds.images)) <= set(clf.classes_)
    assert 0.0 <= clf.score(ds.images, names) <= 1.0


def test_params_and_clone(tiny_fit):
    clf, _, _ = tiny_fit
    c = clone(clf)
    assert c.get_params() == clf.get_params() and not hasattr(c, "network_")
    tta = TestTimeAdapter(method="mixnormbn", tau_max=0.5, batch_size=4)
    assert clone(tta).get_params()["tau_max"] == 0.5


def test_adapter_on_fitted_classifier(tiny_fit):
    clf, ds, _ = tiny_fit
    tta = TestTimeAdapter(network=clf, method="tent", batch_size=4).fit()
    a = tta.predict(ds.images)
    assert a.dtype == clf.classes_.dtype and len(a) == len(ds)
    np.testing.assert_array_equal(a, tta.predict(ds.images))  # restarts every call


def test_adapter_matches_harness(reference, small_test):
    stream = build_stream(small_test, "mixed:5", 1)
    X = np.stack([s.image for s in stream])
    for name, b in [("tent", 10), ("mixnorm", 3), ("mixnormbn", 16)]:
        r = run_adaptation(reference.net, Method(name), stream, b, 1)
        tta = TestTimeAdapter(reference.net, method=name, batch_size=b, protocol="mixed", seed=1)
        np.testing.assert_array_equal(tta.fit().predict(X), r.predictions)


def test_adapter_errors(reference, tiny_fit):
    with pytest.raises(UsageError):
        TestTimeAdapter(network=None).fit()
    with pytest.raises(UsageError):
        TestTimeAdapter(network=reference.net, method="bogus").fit()
    with pytest.raises(UsageError):
        TestTimeAdapter(network=reference.net, batch_size=0).fit()
    with pytest.raises(UsageError):
        TestTimeAdapter(network=reference.net, protocol="weird").fit()
    tta = TestTimeAdapter(network=reference.net).fit()
    with pytest.raises(UsageError):
        tta.predict(np.zeros((2, 1, 16, 16)))


def test_check_images():
    assert check_images(np.zeros((1, 3, 4, 4))).shape == (1, 3, 4, 4)
    for bad in [np.zeros((3, 4, 4)), np.zeros((0, 3, 4, 4)), np.zeros((1, 3, 4, 5)),
                np.full((1, 3, 4, 4), np.inf)]:
        with pytest.raises(UsageError):
            check_images(bad)
    with pytest.raises(UsageError):
        check_images(np.zeros((1, 3, 4, 4)), n_channels=1)
    with pytest.raises(UsageError):
        check_images(np.zeros((1, 3, 4, 4)), size=8)
