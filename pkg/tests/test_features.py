from __future__ import annotations

import numpy as np
import pytest

from ernn.errors import ModelFormatError, ValidationError
from ernn.features import (
    Utterance,
    import_text,
    load_dataset,
    read_features,
    synthetic_utterance,
    write_features,
)


def test_binary_file(tmp_path, rng):
    u = synthetic_utterance(rng, 7, 5, frame_duration=0.03)
    write_features(tmp_path / "a.feat", u)
    back = read_features(tmp_path / "a.feat")
    assert np.array_equal(back.features, u.features)
    assert back.frame_duration == 0.03
    assert back.id == "a"
    assert back.duration == pytest.approx(0.21)


def test_size_mismatch(tmp_path, rng):
    write_features(tmp_path / "a.feat", synthetic_utterance(rng, 4, 3))
    raw = (tmp_path / "a.feat").read_bytes()
    (tmp_path / "a.feat").write_bytes(raw[:-4])
    with pytest.raises(ModelFormatError):
        read_features(tmp_path / "a.feat")


def test_text_import(tmp_path):
    (tmp_path / "b.txt").write_text("1 2 3\n4 5 6\n")
    u = import_text(tmp_path / "b.txt", frame_duration=0.02)
    assert u.features.tolist() == [[1, 2, 3], [4, 5, 6]]
    assert u.frames == 2 and u.width == 3


def test_text_must_be_numeric(tmp_path):
    (tmp_path / "c.txt").write_text("1 two 3\n")
    with pytest.raises(ValidationError):
        import_text(tmp_path / "c.txt")


def test_load_dataset_directory(tmp_path, rng):
    write_features(tmp_path / "b.feat", synthetic_utterance(rng, 3, 4))
    (tmp_path / "a.txt").write_text("0 0 0 0\n")
    (tmp_path / "notes.md").write_text("ignored")
    assert [u.id for u in load_dataset(tmp_path)] == ["a", "b"]


def test_load_dataset_errors(tmp_path):
    with pytest.raises(ValidationError):
        load_dataset(tmp_path / "absent")
    with pytest.raises(ValidationError):
        load_dataset(tmp_path)


def test_zero_frames(tmp_path):
    u = Utterance(np.zeros((0, 6), np.float32))
    write_features(tmp_path / "z.feat", u)
    assert read_features(tmp_path / "z.feat").features.shape == (0, 6)


@pytest.mark.parametrize("bad", [np.zeros(3), np.array([[1.0, np.nan]])])
def test_rejects_bad_features(bad):
    with pytest.raises(ValidationError):
        Utterance(bad)
