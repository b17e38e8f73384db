"""RNN-T layer-stack description: config loading, presets and parameter counting.

A topology is written as YAML:

    feature_width: 240
    vocab_size: 4096
    embedding_width: 512
    encoder:
      - {kind: lstm, hidden: 2048, projection: 640, count: 8, sparsity: 0.5}
    prediction:
      - {kind: lstm, hidden: 2048, projection: 640, count: 2}
    joint: {hidden: 640, activation: tanh}

Layer input widths chain automatically (features -> encoder, embedding ->
prediction); an explicit `input` is checked against the chain. `count: N`
expands to N identical layers.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Literal

import jsonschema
import yaml

from .blocksparse import DEFAULT_BLOCK
from .cells import CellKind, calibrated_gates
from .errors import TopologyError, ValidationError
from .pruning import PruningSchedule, pruned_block_count

logger = logging.getLogger(__name__)

TensorRole = Literal["prunable", "matrix", "embedding", "gain", "bias", "ln_bias", "branch_bias", "joint_bias"]

_LAYER_SCHEMA = {
    "type": "object",
    "required": ["kind", "hidden", "projection"],
    "additionalProperties": False,
    "properties": {
        "kind": {"enum": [k.value for k in CellKind]},
        "input": {"type": "integer", "minimum": 1},
        "hidden": {"type": "integer", "minimum": 1},
        "projection": {"type": "integer", "minimum": 1},
        "layer_norm": {"type": "boolean"},
        "sparsity": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
        "block": {
            "type": "array",
            "items": {"type": "integer", "minimum": 1},
            "minItems": 2,
            "maxItems": 2,
        },
        "cell_clip": {"type": ["number", "null"], "exclusiveMinimum": 0},
        "count": {"type": "integer", "minimum": 1},
    },
}

TOPOLOGY_SCHEMA = {
    "type": "object",
    "required": ["encoder", "prediction"],
    "additionalProperties": False,
    "properties": {
        "feature_width": {"type": "integer", "minimum": 1},
        "vocab_size": {"type": "integer", "minimum": 2},
        "embedding_width": {"type": "integer", "minimum": 1},
        "encoder": {"type": "array", "minItems": 1, "items": _LAYER_SCHEMA},
        "prediction": {"type": "array", "minItems": 1, "items": _LAYER_SCHEMA},
        "joint": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "hidden": {"type": "integer", "minimum": 1},
                "activation": {"enum": ["tanh", "relu"]},
            },
        },
        "pruning": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "initial_sparsity": {"type": "number"},
                "final_sparsity": {"type": "number"},
                "start_step": {"type": "integer"},
                "end_step": {"type": "integer"},
                "mask_update_interval": {"type": "integer"},
                "exponent": {"type": "integer"},
                "prunable": {
                    "type": "array",
                    "items": {"enum": ["W", "R"]},
                    "uniqueItems": True,
                },
            },
        },
    },
}


@dataclass(frozen=True)
class LayerSpec:
    kind: CellKind
    input: int
    hidden: int
    projection: int
    layer_norm: bool = True
    sparsity: float | None = None
    block: tuple[int, int] = DEFAULT_BLOCK
    cell_clip: float | None = None

    @property
    def gates(self) -> tuple[str, ...]:
        """Every gate with its own W matrix."""
        if self.kind is CellKind.SRU:
            return ("f", "r", "x1", "x2")
        return calibrated_gates(self.kind)

    @property
    def recurrent(self) -> bool:
        return self.kind is not CellKind.SRU

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["kind"] = self.kind.value
        d["block"] = list(self.block)
        return d


@dataclass(frozen=True)
class JointSpec:
    hidden: int = 640
    activation: str = "tanh"


@dataclass(frozen=True)
class PruningConfig:
    schedule: PruningSchedule = field(default_factory=PruningSchedule)
    prunable: tuple[str, ...] = ("W", "R")


@dataclass(frozen=True)
class TensorSpec:
    name: str
    shape: tuple[int, ...]
    role: TensorRole
    sparsity: float | None = None
    block: tuple[int, int] = DEFAULT_BLOCK

    @property
    def size(self) -> int:
        n = 1
        for d in self.shape:
            n *= d
        return n

    @property
    def stored_blocks(self) -> int | None:
        """Blocks kept after pruning this matrix to its target sparsity."""
        if self.sparsity is None:
            return None
        rows, cols = self.shape
        n_blocks = (rows // self.block[0]) * (cols // self.block[1])
        return n_blocks - pruned_block_count(self.sparsity, n_blocks)

    @property
    def stored_values(self) -> int:
        blocks = self.stored_blocks
        if blocks is None:
            return self.size
        return blocks * self.block[0] * self.block[1]


@dataclass(frozen=True)
class TopologyConfig:
    encoder: tuple[LayerSpec, ...]
    prediction: tuple[LayerSpec, ...]
    joint: JointSpec = field(default_factory=JointSpec)
    vocab_size: int = 4096
    embedding_width: int = 512
    feature_width: int = 240
    pruning: PruningConfig | None = None

    def layers(self) -> list[tuple[str, LayerSpec]]:
        """(name prefix, spec) for every recurrent layer in execution order."""
        return [(f"encoder.{k}", s) for k, s in enumerate(self.encoder)] + [
            (f"prediction.{k}", s) for k, s in enumerate(self.prediction)
        ]

    @property
    def encoder_output(self) -> int:
        return self.encoder[-1].projection

    @property
    def prediction_output(self) -> int:
        return self.prediction[-1].projection

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {
            "feature_width": self.feature_width,
            "vocab_size": self.vocab_size,
            "embedding_width": self.embedding_width,
            "encoder": [s.to_dict() for s in self.encoder],
            "prediction": [s.to_dict() for s in self.prediction],
            "joint": asdict(self.joint),
        }
        if self.pruning is not None:
            d["pruning"] = {**asdict(self.pruning.schedule), "prunable": list(self.pruning.prunable)}
        return d

    def canonical_text(self) -> str:
        """Fully expanded YAML with sorted keys; embedded in model files."""
        return yaml.safe_dump(self.to_dict(), sort_keys=True, default_flow_style=None)


def _expand_layers(entries: list[dict[str, Any]], first_input: int, section: str, errors: list[str]) -> list[LayerSpec]:
    layers: list[LayerSpec] = []
    width = first_input
    for pos, entry in enumerate(entries):
        entry = dict(entry)
        count = entry.pop("count", 1)
        declared = entry.pop("input", None)
        if declared is not None and declared != width:
            errors.append(f"{section}[{pos}]: input width {declared} does not match the previous output {width}")
        for _ in range(count):
            spec = LayerSpec(
                kind=CellKind(entry["kind"]),
                input=width,
                hidden=entry["hidden"],
                projection=entry["projection"],
                layer_norm=entry.get("layer_norm", True),
                sparsity=entry.get("sparsity"),
                block=tuple(entry.get("block", DEFAULT_BLOCK)),  # type: ignore[arg-type]
                cell_clip=entry.get("cell_clip"),
            )
            layers.append(spec)
            width = spec.projection
    return layers


def _check_semantics(t: TopologyConfig) -> list[str]:
    errors = []
    for name, spec in t.layers():
        if spec.sparsity is None:
            continue
        br, bc = spec.block
        if spec.hidden % br:
            errors.append(f"{name}: hidden width {spec.hidden} is not divisible by block rows {br}")
        widths = [spec.input] + ([spec.projection] if spec.recurrent else [])
        for w in widths:
            if w % bc:
                errors.append(f"{name}: width {w} is not divisible by block columns {bc}")
    return errors


def validate_topology(data: Any) -> list[str]:
    """Every problem with a raw topology document; empty when valid."""
    validator = jsonschema.Draft202012Validator(TOPOLOGY_SCHEMA)
    errors = [
        f"{'/'.join(str(p) for p in e.absolute_path) or '<root>'}: {e.message}"
        for e in sorted(validator.iter_errors(data), key=lambda e: list(e.absolute_path))
    ]
    if errors:
        return errors
    try:
        topology_from_dict(data)
    except TopologyError as e:
        return e.errors or [e.message]
    return []


def topology_from_dict(data: dict[str, Any]) -> TopologyConfig:
    validator = jsonschema.Draft202012Validator(TOPOLOGY_SCHEMA)
    schema_errors = [e.message for e in validator.iter_errors(data)]
    if schema_errors:
        raise TopologyError("invalid topology", schema_errors)
    errors: list[str] = []
    feature_width = data.get("feature_width", 240)
    embedding_width = data.get("embedding_width", 512)
    encoder = _expand_layers(data["encoder"], feature_width, "encoder", errors)
    prediction = _expand_layers(data["prediction"], embedding_width, "prediction", errors)
    pruning = None
    if "pruning" in data:
        block = dict(data["pruning"])
        prunable = tuple(block.pop("prunable", ("W", "R")))
        try:
            pruning = PruningConfig(PruningSchedule(**block), prunable)
        except ValidationError as e:
            errors.extend(e.errors)
    t = TopologyConfig(
        encoder=tuple(encoder),
        prediction=tuple(prediction),
        joint=JointSpec(**data.get("joint", {})),
        vocab_size=data.get("vocab_size", 4096),
        embedding_width=embedding_width,
        feature_width=feature_width,
        pruning=pruning,
    )
    errors.extend(_check_semantics(t))
    if errors:
        raise TopologyError("invalid topology", errors)
    return t


def load_topology(source: str | Path) -> TopologyConfig:
    """Load a YAML file, or a preset name when no such file exists."""
    path = Path(source)
    if not path.exists():
        if str(source) in PRESETS:
            return preset(str(source))
        raise TopologyError(
            f"no topology file or preset named {source!r}",
            hint=f"presets: {', '.join(sorted(PRESETS))}",
        )
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as e:
        raise TopologyError(f"{path}: invalid YAML", [str(e)]) from e
    if not isinstance(data, dict):
        raise TopologyError(f"{path}: expected a mapping at the top level")
    logger.debug("loaded topology from %s", path)
    return topology_from_dict(data)


def parse_topology_text(text: str) -> TopologyConfig:
    return topology_from_dict(yaml.safe_load(text))


def _stack(kind: str, count: int, hidden: int = 2048, projection: int = 640, **extra: Any) -> dict[str, Any]:
    return {"kind": kind, "hidden": hidden, "projection": projection, "count": count, **extra}


PRESETS: dict[str, dict[str, Any]] = {
    "baseline": {"encoder": [_stack("lstm", 8)], "prediction": [_stack("lstm", 2)]},
    "cifg": {"encoder": [_stack("cifg", 8)], "prediction": [_stack("cifg", 2)]},
    "cifg-sru": {"encoder": [_stack("cifg", 8)], "prediction": [_stack("sru", 2)]},
    "sru-dec": {"encoder": [_stack("lstm", 8)], "prediction": [_stack("sru", 2)]},
    "sru-dec-deep": {"encoder": [_stack("lstm", 8)], "prediction": [_stack("sru", 4)]},
    "sru-enc0": {
        "encoder": [_stack("sru", 2), _stack("lstm", 6)],
        "prediction": [_stack("lstm", 2)],
    },
    "sru-enc1": {
        "encoder": [_stack("lstm", 2), _stack("sru", 6)],
        "prediction": [_stack("lstm", 2)],
    },
    "sru": {"encoder": [_stack("sru", 8)], "prediction": [_stack("sru", 2)]},
    "tiny": {
        "feature_width": 8,
        "vocab_size": 12,
        "embedding_width": 8,
        "encoder": [_stack("lstm", 2, hidden=32, projection=16)],
        "prediction": [_stack("lstm", 1, hidden=32, projection=16)],
        "joint": {"hidden": 16},
    },
}


def preset(name: str) -> TopologyConfig:
    if name not in PRESETS:
        raise TopologyError(f"unknown preset {name!r}", hint=f"presets: {', '.join(sorted(PRESETS))}")
    return topology_from_dict(PRESETS[name])


def with_sparsity(
    t: TopologyConfig,
    encoder: float | None = None,
    prediction: float | None = None,
    block: tuple[int, int] | None = None,
) -> TopologyConfig:
    """Copy with every encoder and/or prediction layer given a W/R sparsity target."""

    def apply(layers: tuple[LayerSpec, ...], s: float | None) -> tuple[LayerSpec, ...]:
        if s is None:
            return layers
        return tuple(replace(l, sparsity=s, block=block or l.block) for l in layers)

    out = replace(t, encoder=apply(t.encoder, encoder), prediction=apply(t.prediction, prediction))
    errors = _check_semantics(out)
    if errors:
        raise TopologyError("sparsity does not fit the block grid", errors)
    return out


def layer_tensor_specs(prefix: str, spec: LayerSpec, prunable: tuple[str, ...] = ("W", "R")) -> list[TensorSpec]:
    h, p = spec.hidden, spec.projection
    out = []

    def matrix(name: str, shape: tuple[int, int], family: str) -> TensorSpec:
        if spec.sparsity is not None and family in prunable:
            return TensorSpec(f"{prefix}.{name}", shape, "prunable", spec.sparsity, spec.block)
        return TensorSpec(f"{prefix}.{name}", shape, "prunable" if family in prunable else "matrix")

    for g in spec.gates:
        out.append(matrix(f"W_{g}", (h, spec.input), "W"))
        if spec.recurrent:
            out.append(matrix(f"R_{g}", (h, p), "R"))
        out.append(TensorSpec(f"{prefix}.b_{g}", (h,), "branch_bias" if g in ("x1", "x2") else "bias"))
    if spec.layer_norm:
        for g in calibrated_gates(spec.kind):
            out.append(TensorSpec(f"{prefix}.ln_{g}.gain", (h,), "gain"))
        if spec.kind is CellKind.SRU:
            out.append(TensorSpec(f"{prefix}.ln_c.gain", (h,), "gain"))
            out.append(TensorSpec(f"{prefix}.ln_c.bias", (h,), "ln_bias"))
    out.append(TensorSpec(f"{prefix}.W_proj", (p, h), "matrix"))
    return out


def tensor_specs(t: TopologyConfig) -> list[TensorSpec]:
    """Every stored tensor of a model with this topology, in file order."""
    prunable = t.pruning.prunable if t.pruning else ("W", "R")
    specs: list[TensorSpec] = []
    for k, spec in enumerate(t.encoder):
        specs.extend(layer_tensor_specs(f"encoder.{k}", spec, prunable))
    specs.append(TensorSpec("prediction.embedding", (t.vocab_size, t.embedding_width), "embedding"))
    for k, spec in enumerate(t.prediction):
        specs.extend(layer_tensor_specs(f"prediction.{k}", spec, prunable))
    j = t.joint.hidden
    specs += [
        TensorSpec("joint.P_enc", (j, t.encoder_output), "matrix"),
        TensorSpec("joint.P_pred", (j, t.prediction_output), "matrix"),
        TensorSpec("joint.b", (j,), "joint_bias"),
        TensorSpec("joint.W_out", (t.vocab_size, j), "matrix"),
        TensorSpec("joint.b_out", (t.vocab_size,), "joint_bias"),
    ]
    return specs


@dataclass(frozen=True)
class ParamCount:
    total: int
    sections: dict[str, int]
    prunable: int

    def as_dict(self) -> dict[str, Any]:
        return {"total": self.total, "sections": dict(self.sections), "prunable": self.prunable}


def _section(name: str) -> str:
    if name == "prediction.embedding":
        return "embedding"
    if name.startswith("joint."):
        return "softmax" if name.endswith(("W_out", "b_out")) else "joint"
    return name.split(".", 1)[0]


def count_params(t: TopologyConfig) -> ParamCount:
    """Stored parameters; sparse layers count only their retained W/R blocks."""
    sections: dict[str, int] = {}
    prunable = 0
    for spec in tensor_specs(t):
        n = spec.stored_values
        sections[_section(spec.name)] = sections.get(_section(spec.name), 0) + n
        if spec.role == "prunable":
            prunable += n
    return ParamCount(sum(sections.values()), sections, prunable)
