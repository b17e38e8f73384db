"""Range observation, finalized scales and coverage of the integer conversion."""

from __future__ import annotations

import numpy as np
import pytest

from ernn.calibrate import RangeObserver, calibrate_model, layer_tensor_ids, required_tensor_ids
from ernn.errors import CalibrationError, ShapeError, ValidationError
from ernn.features import Utterance
from ernn.fixedpoint import QuantParams
from ernn.rnnt import convert_to_integer


class TestObserve:
    def test_zeros(self):
        obs = RangeObserver().observe("a", np.zeros(4))
        assert obs.ranges["a"].max_abs == 0.0
        assert obs.ranges["a"].count == 1

    def test_running_max(self):
        obs = RangeObserver().observe("a", np.array([-3.0, 2.0])).observe("a", np.array([1.0]))
        r = obs.ranges["a"]
        assert (r.max_abs, r.min, r.max, r.count) == (3.0, -3.0, 2.0, 2)

    def test_matches_brute_force_max(self, rng):
        obs = RangeObserver()
        vectors = [rng.standard_normal(16) * rng.uniform(0.1, 5) for _ in range(1000)]
        for v in vectors:
            obs.observe("a", v)
        assert obs.ranges["a"].max_abs == np.max(np.abs(vectors))

    def test_idempotent(self, rng):
        v = rng.standard_normal(8)
        once = RangeObserver().observe("a", v).finalize()
        twice = RangeObserver().observe("a", v).observe("a", v).finalize()
        assert once == twice

    def test_non_finite_names_tensor(self):
        with pytest.raises(ValidationError, match="encoder.0.m"):
            RangeObserver().observe("encoder.0.m", np.array([1.0, np.inf]))


class TestFinalize:
    def test_eight_bit(self):
        assert RangeObserver().observe("encoder.0.m", np.array([12.7])).finalize()["encoder.0.m"].scale == (
            pytest.approx(0.1)
        )

    def test_zero_range_gets_unit_scale(self):
        assert RangeObserver().observe("x.output", np.zeros(3)).finalize()["x.output"] == QuantParams(1.0, 8)

    def test_sixteen_bit_pre_activation(self):
        params = RangeObserver().observe("encoder.0.gate.f.pre", np.array([-5.0])).finalize()["encoder.0.gate.f.pre"]
        assert params.bit_width == 16
        assert params.scale == pytest.approx(5 / 32767)

    def test_unobserved_ids_listed(self):
        obs = RangeObserver().observe("a.output", np.ones(2))
        with pytest.raises(CalibrationError) as exc:
            obs.finalize(["a.output", "b.m", "a.m"])
        assert exc.value.missing == ["a.m", "b.m"]


class TestMerge:
    def test_commutative_and_associative(self, rng):
        observers = []
        for _ in range(3):
            obs = RangeObserver()
            for tid in ("a.m", "b.output", "c.gate.i.pre"):
                if rng.random() < 0.8:
                    obs.observe(tid, rng.standard_normal(4) * rng.uniform(0.5, 3))
            observers.append(obs)
        a, b, c = observers
        left = a.merge(b).merge(c).finalize()
        assert b.merge(a).merge(c).finalize() == left
        assert a.merge(b.merge(c)).finalize() == left
        assert c.merge(a).merge(b).finalize() == left

    def test_merge_leaves_inputs_alone(self):
        a = RangeObserver().observe("a.m", np.array([1.0]))
        b = RangeObserver().observe("a.m", np.array([4.0]))
        a.merge(b)
        assert a.ranges["a.m"].max_abs == 1.0


class TestCalibrateModel:
    def test_covers_every_required_id(self, observer, tiny_topology):
        assert set(observer.ranges) == required_tensor_ids(tiny_topology)

    def test_conversion_accepts_stats(self, tiny_model, observer):
        convert_to_integer(tiny_model, observer.finalize())

    def test_disjoint_datasets_merge_to_whole(self, tiny_model, utterances):
        whole = calibrate_model(tiny_model, utterances).finalize()
        parts = calibrate_model(tiny_model, utterances[:2]).merge(calibrate_model(tiny_model, utterances[2:]))
        assert parts.finalize() == whole

    def test_zero_utterance(self, tiny_model, tiny_topology):
        zero = Utterance(np.zeros((3, tiny_topology.feature_width)))
        stats = calibrate_model(tiny_model, [zero]).finalize()
        assert stats["encoder.input"].scale == 1.0
        # biases still drive the gates, so later tensors have real ranges
        assert stats["encoder.0.output"].scale != 1.0

    def test_empty_dataset(self, tiny_model):
        with pytest.raises(ValidationError):
            calibrate_model(tiny_model, [])

    def test_width_mismatch(self, tiny_model):
        with pytest.raises(ShapeError):
            calibrate_model(tiny_model, [Utterance(np.zeros((3, 5)))])

    def test_float_model_only(self, hybrid_model, utterances):
        with pytest.raises(ValidationError):
            calibrate_model(hybrid_model, utterances)

    def test_incomplete_stats_rejected(self, tiny_model, observer):
        stats = observer.finalize()
        del stats["prediction.0.m"]
        with pytest.raises(CalibrationError) as exc:
            convert_to_integer(tiny_model, stats)
        assert exc.value.missing == ["prediction.0.m"]


def test_layer_ids():
    assert layer_tensor_ids("encoder.1", "cifg") == [
        "encoder.1.gate.f.pre",
        "encoder.1.gate.z.pre",
        "encoder.1.gate.o.pre",
        "encoder.1.cell",
        "encoder.1.m",
        "encoder.1.output",
    ]
