import struct

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from sklearn.linear_model import LogisticRegression

from splitpriv.data import (DatasetManifest, TaskSpec, generate_synthetic, load_idx, load_manifest, save_manifest,
                            split_train_val, write_idx)
from splitpriv.errors import DataFormatError


def _write(path, magic, dims, payload):
    path.write_bytes(struct.pack(f">I{len(dims)}I", magic, *dims) + payload)


def test_idx_parse(tmp_path):
    r = np.random.default_rng(0)
    imgs = r.integers(0, 256, (7, 4, 5), dtype=np.uint8)
    labels = np.array([0, 1, 2, 1, 0, 2, 2], np.uint8)
    _write(tmp_path / "i", 0x803, imgs.shape, imgs.tobytes())
    _write(tmp_path / "l", 0x801, labels.shape, labels.tobytes())
    m = load_idx(tmp_path / "i", tmp_path / "l")
    assert m.n == 7
    assert m.images.shape == (7, 1, 4, 5)
    np.testing.assert_array_equal(m.images[:, 0], imgs)
    np.testing.assert_array_equal(m.labels, labels)
    assert m.task.num_classes == 3
    assert len(m.source["images_sha256"]) == 64


def test_idx_bad_magic(tmp_path):
    _write(tmp_path / "i", 0x0, (1, 2, 2), bytes(4))
    _write(tmp_path / "l", 0x801, (1,), bytes(1))
    with pytest.raises(DataFormatError, match="magic"):
        load_idx(tmp_path / "i", tmp_path / "l")


def test_idx_count_mismatch(tmp_path):
    _write(tmp_path / "i", 0x803, (100, 2, 2), bytes(400))
    _write(tmp_path / "l", 0x801, (99,), bytes(99))
    with pytest.raises(DataFormatError, match="count"):
        load_idx(tmp_path / "i", tmp_path / "l")


def test_idx_payload_mismatch(tmp_path):
    _write(tmp_path / "i", 0x803, (3, 2, 2), bytes(11))
    _write(tmp_path / "l", 0x801, (3,), bytes(3))
    with pytest.raises(DataFormatError):
        load_idx(tmp_path / "i", tmp_path / "l")


def test_idx_round_trip(tmp_path):
    user, _ = generate_synthetic(1, 200)
    write_idx(user, tmp_path / "i", tmp_path / "l")
    back = load_idx(tmp_path / "i", tmp_path / "l")
    assert back.images.tobytes() == user.images.tobytes()
    np.testing.assert_array_equal(back.labels, user.labels)


def test_manifest_container_round_trip(tmp_path):
    user, _ = generate_synthetic(2, 200, user_classes=4)
    save_manifest(user, tmp_path / "m.splk")
    back = load_manifest(tmp_path / "m.splk")
    assert back.images.tobytes() == user.images.tobytes()
    assert back.task == user.task and back.source == user.source


def _manifest(labels, c):
    labels = np.asarray(labels, np.int64)
    return DatasetManifest("t", np.zeros((len(labels), 1, 2, 2), np.uint8), labels, TaskSpec("user", c))


def test_stratified_exact():
    m = _manifest(np.arange(1000) % 10, 10)
    _, val = split_train_val(m, 0.1, 0)
    assert list(val.class_counts()) == [10] * 10


def test_stratified_imbalanced():
    m = _manifest([0] * 990 + [1] * 10, 2)
    train, val = split_train_val(m, 0.1, 0)
    assert list(val.class_counts()) == [99, 1]
    assert list(train.class_counts()) == [891, 9]


def test_split_deterministic_and_disjoint():
    m = _manifest(np.arange(300) % 3, 3)
    a = split_train_val(m, 0.2, 4)
    b = split_train_val(m, 0.2, 4)
    assert a[1].labels.tobytes() == b[1].labels.tobytes()
    assert a[0].n + a[1].n == 300


def test_split_errors():
    with pytest.raises(DataFormatError):
        split_train_val(_manifest([0] * 50 + [1], 2), 0.2, 0)
    with pytest.raises(ValueError):
        split_train_val(_manifest(np.arange(10) % 2, 2), 0.5, 0)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(2, 60), min_size=2, max_size=6), st.floats(0.05, 0.45), st.integers(0, 100))
def test_stratification_property(counts, frac, seed):
    labels = np.concatenate([np.full(k, c) for c, k in enumerate(counts)])
    assume(sum(int(np.floor(frac * k + 0.5)) for k in counts) > 0)
    _, val = split_train_val(_manifest(labels, len(counts)), frac, seed)
    for k, got in zip(counts, val.class_counts()):
        assert abs(got - frac * k) <= 1


def test_synthetic_deterministic():
    a = generate_synthetic(5, 300)
    b = generate_synthetic(5, 300)
    assert a[0].images.tobytes() == b[0].images.tobytes()
    assert a[1].labels.tobytes() == b[1].labels.tobytes()
    assert a[0].images.tobytes() != generate_synthetic(6, 300)[0].images.tobytes()


def test_synthetic_shapes_and_tasks():
    user, att = generate_synthetic(0, 400, user_classes=6, attacker_attribute="corner_glyph")
    assert user.images.shape == (400, 1, 28, 28) and user.images.dtype == np.uint8
    assert user.task.num_classes == 6 and att.task.num_classes == 2
    assert att.task.kind == "attacker"
    assert list(user.class_counts()) == [400 // 6 + (1 if c < 400 % 6 else 0) for c in range(6)]


def test_label_independence():
    user, att = generate_synthetic(0, 5000)
    assert abs(np.corrcoef(user.labels, att.labels)[0, 1]) <= 0.05


def _probe(att, seed=0):
    x = att.features().reshape(att.n, -1)
    n = att.n // 2
    clf = LogisticRegression(max_iter=2000, C=0.1).fit(x[:n], att.labels[:n])
    return clf.score(x[n:], att.labels[n:])


@pytest.mark.parametrize("attribute", ["stripe", "corner_glyph"])
def test_decodability_full(attribute):
    _, att = generate_synthetic(0, 2000, attacker_attribute=attribute)
    assert _probe(att) >= 0.95


def test_decodability_knob():
    _, att = generate_synthetic(0, 4000, decodability=0.75)
    assert abs(_probe(att) - 0.75) <= 0.05


def test_overlap_knob_moves_attribute():
    user, att = generate_synthetic(0, 400, overlap=True)
    mean_on = user.images[att.labels == 1, 0].mean(axis=0)
    mean_off = user.images[att.labels == 0, 0].mean(axis=0)
    rows = np.flatnonzero((mean_on - mean_off).mean(axis=1) > 50)
    assert rows.min() < 16


def test_generator_errors():
    with pytest.raises(ValueError):
        generate_synthetic(0, 100)
    with pytest.raises(ValueError):
        generate_synthetic(0, 300, user_classes=17)
    with pytest.raises(ValueError, match="decodability"):
        generate_synthetic(0, 300, decodability=0.3)
