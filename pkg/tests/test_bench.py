import hashlib
from collections import Counter

import numpy as np
import pytest

from mixnorm.bench import (CORRUPTIONS, IMAGE_SIZE, N_CLASSES, SEVERITY_SCHEDULE, CorruptionSpec,
                           LabeledDataset, StreamMode, apply_corruption, brightness, build_stream,
                           generate_source_dataset, load_dataset, save_dataset)
from mixnorm.exceptions import UsageError
from mixnorm.model import predict
from mixnorm.rng import keyed_rng

# sha256 of generate_source_dataset(0, 2, split="test").images
GOLDEN_DATASET = "f44af2855927af4d611ae10c916965bf8cfe2581eaf2442daa362391a898105e"
# sha256 of the stacked images of build_stream(that dataset, "mixed:5", 3)
GOLDEN_STREAM = "fe5c46bebe677e62911331bd69b0236baae0e2fe6619f094ec5d4200a33f6a6f"


@pytest.fixture(scope="module")
def thousand():
    return generate_source_dataset(123, 100, split="mc")


def _sha(a):
    return hashlib.sha256(np.ascontiguousarray(a).tobytes()).hexdigest()


def test_dataset_deterministic_balanced_and_in_range():
    a = generate_source_dataset(5, 3)
    b = generate_source_dataset(5, 3)
    assert a.images.tobytes() == b.images.tobytes() and a.labels.tobytes() == b.labels.tobytes()
    assert Counter(a.labels.tolist()) == {k: 3 for k in range(N_CLASSES)}
    assert a.images.shape == (30, 3, IMAGE_SIZE, IMAGE_SIZE)
    assert a.images.min() >= 0.0 and a.images.max() <= 1.0
    assert not np.array_equal(generate_source_dataset(6, 3).images, a.images)


def test_splits_are_disjoint():
    tr = generate_source_dataset(0, 5, split="train")
    te = generate_source_dataset(0, 5, split="test")
    flat = {im.tobytes() for im in tr.images}
    assert not any(im.tobytes() in flat for im in te.images)


def test_golden_checksums():
    ds = generate_source_dataset(0, 2, split="test")
    assert _sha(ds.images) == GOLDEN_DATASET
    stream = build_stream(ds, "mixed:5", 3)
    assert _sha(np.stack([s.image for s in stream])) == GOLDEN_STREAM


def test_dataset_errors_and_roundtrip(tmp_path):
    with pytest.raises(UsageError):
        generate_source_dataset(0, 0)
    with pytest.raises(UsageError):
        generate_source_dataset(0, 1, n_classes=11)
    ds = generate_source_dataset(1, 2)
    save_dataset(ds, tmp_path / "d.json")
    back = load_dataset(tmp_path / "d.json")
    assert back.images.tobytes() == ds.images.tobytes()
    assert back.labels.tolist() == ds.labels.tolist()
    (tmp_path / "x.json").write_text('{"format": "other"}')
    with pytest.raises(UsageError):
        load_dataset(tmp_path / "x.json")


def test_schedules_are_monotone():
    for kind, sched in SEVERITY_SCHEDULE.items():
        assert len(sched) == 5
        diffs = np.diff(sched)
        assert np.all(diffs > 0) or np.all(diffs < 0), kind


def test_mse_distortion_strictly_increases_with_severity(thousand):
    for kind in CORRUPTIONS:
        mse = []
        for sev in range(1, 6):
            spec = CorruptionSpec(kind, sev)
            err = [np.mean((apply_corruption(im, spec, keyed_rng(7, "mc", i)) - im) ** 2)
                   for i, im in enumerate(thousand.images)]
            mse.append(float(np.mean(err)))
        assert all(a < b for a, b in zip(mse, mse[1:])), (kind, mse)


def test_brightness_identity_and_clamp():
    img = generate_source_dataset(2, 1).images[0]
    np.testing.assert_array_equal(brightness(img, 0.0), img)
    out = apply_corruption(np.ones((3, 4, 4)), CorruptionSpec("brightness", 5), keyed_rng(0, "x"))
    np.testing.assert_array_equal(out, 1.0)


def test_corruption_preserves_shape_range_and_is_deterministic():
    img = generate_source_dataset(3, 1).images[4]
    for kind in CORRUPTIONS:
        spec = CorruptionSpec(kind, 5)
        a = apply_corruption(img, spec, keyed_rng(1, "c"))
        b = apply_corruption(img, spec, keyed_rng(1, "c"))
        assert a.shape == img.shape and a.tobytes() == b.tobytes()
        assert a.min() >= 0.0 and a.max() <= 1.0


def test_corruption_spec_validation():
    with pytest.raises(UsageError):
        CorruptionSpec("fog", 3)
    for sev in (0, 6):
        with pytest.raises(UsageError):
            CorruptionSpec("blur", sev)


def test_stream_mode_parsing():
    assert str(StreamMode.parse("single:blur:3")) == "single:blur:3"
    assert str(StreamMode.parse("mixed:5")) == "mixed:5"
    assert str(StreamMode.parse("clean")) == "clean"
    for bad in ["", "mixed", "mixed:x", "mixed:9", "single:fog:1", "single:blur", "noisy:1"]:
        with pytest.raises(UsageError):
            StreamMode.parse(bad)


def test_single_stream_preserves_order_and_labels():
    ds = generate_source_dataset(4, 2)
    stream = build_stream(ds, "single:contrast:4", 0)
    assert len(stream) == len(ds)
    assert [s.source_index for s in stream] == list(range(len(ds)))
    assert [s.reveal_label(0) for s in stream] == ds.labels.tolist()
    assert stream.kinds == ("contrast",)


def test_mixed_stream_multiset_and_replay():
    ds = generate_source_dataset(4, 2)
    a = build_stream(ds, "mixed:3", 9)
    pairs = [(s.source_index, s.kind) for s in a]
    assert sorted(pairs) == sorted((i, k) for i in range(len(ds)) for k in CORRUPTIONS)
    assert [s.index for s in a] == list(range(len(a)))
    b = build_stream(ds, "mixed:3", 9)
    assert pairs == [(s.source_index, s.kind) for s in b]
    assert all(x.image.tobytes() == y.image.tobytes() for x, y in zip(a, b))
    c = build_stream(ds, "mixed:3", 10)
    assert pairs != [(s.source_index, s.kind) for s in c]
    for s in a:
        assert s.reveal_label(0) == ds.labels[s.source_index]


def test_stream_images_are_read_only():
    stream = build_stream(generate_source_dataset(0, 1), "clean", 0)
    s = next(iter(stream))
    with pytest.raises(ValueError):
        s.image[0, 0, 0] = 1.0
    with pytest.raises(UsageError):
        s.reveal_label(None)


def test_reference_model_clean_accuracy(reference):
    acc = float(np.mean(predict(reference.net, reference.test.images) == reference.test.labels))
    assert acc >= 0.95
    assert reference.net.meta["clean_error"] == pytest.approx(1 - acc, abs=1e-15)


def test_source_error_monotone_in_severity(reference):
    net, test = reference.net, reference.test
    for kind in CORRUPTIONS:
        errors = []
        for sev in range(1, 6):
            stream = build_stream(test, f"single:{kind}:{sev}", 0)
            preds = predict(net, np.stack([s.image for s in stream]))
            errors.append(float(np.mean(preds != test.labels)))
        assert all(a <= b for a, b in zip(errors, errors[1:])), (kind, errors)
