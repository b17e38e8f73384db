"""Topology loading, presets and parameter counts against the reference model sizes."""

from __future__ import annotations

import pytest
import yaml

from ernn.cells import CellKind
from ernn.errors import TopologyError
from ernn.topology import (
    PRESETS,
    count_params,
    load_topology,
    parse_topology_text,
    preset,
    tensor_specs,
    topology_from_dict,
    validate_topology,
    with_sparsity,
)


@pytest.mark.parametrize(
    "name, sparsity, expected",
    [
        ("baseline", None, 122.1e6),
        ("baseline", 0.5, 69.7e6),
        ("baseline", 0.7, 48.7e6),
        ("baseline", 0.8, 38.2e6),
        ("cifg", None, 95.8e6),
        ("cifg", 0.5, 56.3e6),
        ("cifg-sru", None, 89.6e6),
        ("sru-dec", None, 111.6e6),
        ("sru-dec-deep", None, 124.7e6),
        ("sru-enc0", None, 111.6e6),
    ],
)
def test_param_counts_match_reference_sizes(name, sparsity, expected):
    t = preset(name)
    if sparsity is not None:
        t = with_sparsity(t, sparsity, sparsity)
    assert count_params(t).total == pytest.approx(expected, rel=0.03)


class TestCountParams:
    def test_lstm_layer_formula(self):
        t = topology_from_dict(
            {
                "feature_width": 16,
                "vocab_size": 10,
                "embedding_width": 8,
                "encoder": [{"kind": "lstm", "hidden": 32, "projection": 16}],
                "prediction": [{"kind": "lstm", "hidden": 32, "projection": 16, "layer_norm": False}],
                "joint": {"hidden": 12},
            }
        )
        sections = count_params(t).sections
        # W and R, biases, layer-norm gains, projection
        assert sections["encoder"] == 4 * 32 * (16 + 16) + 4 * 32 + 4 * 32 + 16 * 32
        assert sections["prediction"] == 4 * 32 * (8 + 16) + 4 * 32 + 16 * 32
        assert sections["embedding"] == 10 * 8
        assert sections["joint"] == 12 * 16 + 12 * 16 + 12
        assert sections["softmax"] == 10 * 12 + 10

    def test_sru_has_no_recurrent_terms(self):
        t = topology_from_dict(
            {
                "feature_width": 16,
                "encoder": [{"kind": "sru", "hidden": 32, "projection": 16, "layer_norm": False}],
                "prediction": [{"kind": "lstm", "hidden": 32, "projection": 16}],
            }
        )
        assert count_params(t).sections["encoder"] == 4 * 32 * 16 + 4 * 32 + 16 * 32

    def test_cifg_drops_a_quarter_of_the_matrices(self):
        lstm = count_params(preset("baseline")).prunable
        cifg = count_params(preset("cifg")).prunable
        assert cifg == 0.75 * lstm

    def test_sparsity_only_touches_prunable_matrices(self):
        dense = count_params(preset("baseline"))
        sparse = count_params(with_sparsity(preset("baseline"), 0.5, 0.5))
        assert sparse.prunable == dense.prunable // 2
        assert dense.total - sparse.total == dense.prunable - sparse.prunable
        assert sparse.sections["joint"] == dense.sections["joint"]


class TestLoading:
    def test_count_expands(self):
        t = preset("baseline")
        assert len(t.encoder) == 8 and len(t.prediction) == 2
        assert t.encoder[0].input == 240 and t.encoder[1].input == 640
        assert t.prediction[0].input == 512

    def test_mixed_stack(self):
        t = preset("sru-enc0")
        assert [s.kind for s in t.encoder] == [CellKind.SRU] * 2 + [CellKind.LSTM] * 6

    def test_canonical_text_round_trips(self):
        for name in PRESETS:
            t = preset(name)
            assert parse_topology_text(t.canonical_text()) == t

    def test_canonical_text_is_stable(self):
        assert preset("tiny").canonical_text() == preset("tiny").canonical_text()
        assert "count" not in preset("baseline").canonical_text()

    def test_load_file_and_preset(self, tmp_path):
        path = tmp_path / "model.yaml"
        path.write_text(yaml.safe_dump(PRESETS["tiny"]))
        assert load_topology(path) == preset("tiny")
        assert load_topology("cifg") == preset("cifg")

    def test_unknown_source_lists_presets(self):
        with pytest.raises(TopologyError) as exc:
            load_topology("no-such-model")
        assert "baseline" in exc.value.hint

    def test_invalid_yaml(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("encoder: [unclosed\n")
        with pytest.raises(TopologyError):
            load_topology(path)


class TestValidation:
    def base(self, **changes):
        doc = {
            "feature_width": 16,
            "encoder": [{"kind": "lstm", "hidden": 32, "projection": 16}],
            "prediction": [{"kind": "lstm", "hidden": 32, "projection": 16}],
        }
        doc.update(changes)
        return doc

    def test_valid(self):
        assert validate_topology(self.base()) == []

    def test_every_problem_listed(self):
        doc = self.base(
            encoder=[{"kind": "gru", "hidden": 32, "projection": 16}],
            prediction=[{"kind": "lstm", "hidden": -1, "projection": 16}],
        )
        assert len(validate_topology(doc)) >= 2

    def test_input_chain_checked(self):
        doc = self.base(
            encoder=[
                {"kind": "lstm", "hidden": 32, "projection": 16},
                {"kind": "lstm", "hidden": 32, "projection": 16, "input": 24},
            ]
        )
        with pytest.raises(TopologyError) as exc:
            topology_from_dict(doc)
        assert any("encoder[1]" in e for e in exc.value.errors)

    def test_block_must_tile(self):
        doc = self.base(encoder=[{"kind": "lstm", "hidden": 30, "projection": 16, "sparsity": 0.5}])
        assert any("block rows" in e for e in validate_topology(doc))

    def test_with_sparsity_checks_block(self):
        with pytest.raises(TopologyError):
            with_sparsity(preset("tiny"), 0.5, None, (5, 1))

    def test_unknown_key_rejected(self):
        layer = {"kind": "lstm", "hidden": 32, "projection": 16, "peephole": True}
        assert validate_topology(self.base(encoder=[layer]))


class TestTensorSpecs:
    def test_names_and_roles(self):
        specs = {s.name: s for s in tensor_specs(preset("tiny"))}
        assert specs["encoder.0.W_i"].shape == (32, 8)
        assert specs["encoder.0.R_o"].shape == (32, 16)
        assert specs["encoder.1.W_z"].shape == (32, 16)
        assert specs["encoder.0.W_proj"].role == "matrix"
        assert specs["prediction.embedding"].shape == (12, 8)
        assert specs["joint.W_out"].shape == (12, 16)
        assert "encoder.0.ln_i.gain" in specs

    def test_sru_tensors(self):
        specs = {s.name for s in tensor_specs(preset("sru"))}
        assert "encoder.0.W_x1" in specs and "encoder.0.ln_c.bias" in specs
        assert not any(".R_" in name for name in specs)

    def test_sparse_specs_carry_target(self):
        t = with_sparsity(preset("tiny"), 0.5, 0.25)
        specs = {s.name: s for s in tensor_specs(t)}
        assert specs["encoder.0.W_f"].sparsity == 0.5
        assert specs["prediction.0.R_z"].sparsity == 0.25
        assert specs["encoder.0.W_proj"].sparsity is None
