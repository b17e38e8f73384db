"""RNN-T model: encoder and prediction stacks, joint network, greedy decoding.

A model is a topology, a quantization mode and a flat tensor map keyed by the
ids of `topology.tensor_specs`. Executable cells are assembled from the map on
first use, so a freshly loaded file and a freshly converted model run the
same code.
"""

from __future__ import annotations

import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from enum import StrEnum
from functools import cached_property

import numpy as np

from .blocksparse import BlockSparseMatrix, to_dense
from .calibrate import ENCODER_INPUT, RangeObserver, required_tensor_ids, stored_activation_ids
from .cells import (
    CellKind,
    CifgWeights,
    FloatCellWeights,
    LayerNormParams,
    LstmWeights,
    Observer,
    SruWeights,
    calibrated_gates,
    cell_step,
    dense_matvec,
    init_cell,
    run_sequence,
)
from .errors import CalibrationError, MissingTensorError, ModelFormatError, NumericError, ShapeError, ValidationError
from .features import Utterance
from .fixedpoint import QuantizedTensor, QuantParams, dequantize, quantize_symmetric, quantize_with
from .pruning import prune_matrix
from .quant import (
    HybridCellWeights,
    IntegerCellWeights,
    hybrid_matvec,
    integer_cell,
    prepare_kernel,
    quantize_matrix,
)
from .topology import LayerSpec, TensorSpec, TopologyConfig, tensor_specs, with_sparsity

logger = logging.getLogger(__name__)

BLANK = 0
DEFAULT_MAX_SYMBOLS = 10

Tensor = np.ndarray | QuantizedTensor | BlockSparseMatrix
CellWeights = FloatCellWeights | HybridCellWeights | IntegerCellWeights
Trace = dict[str, list[np.ndarray]]


class QuantMode(StrEnum):
    FLOAT = "float32"
    HYBRID = "hybrid8"
    INTEGER = "integer8_16"


def _real(x: np.ndarray | QuantizedTensor) -> np.ndarray:
    return dequantize(x) if isinstance(x, QuantizedTensor) else x


def _prefixed(observe: Observer | None, prefix: str) -> Observer | None:
    if observe is None:
        return None
    return lambda name, values: observe(f"{prefix}.{name}", values)


def _shape(t: Tensor) -> tuple[int, ...]:
    return tuple(t.shape)


def stored_values(t: Tensor) -> int:
    if isinstance(t, BlockSparseMatrix):
        return t.n_stored * t.block_rows * t.block_cols
    return int(np.prod(_shape(t)))


def _kernel_ready(t: Tensor) -> Tensor:
    """Dense float matrices in double precision; quantized ones with their payload cached."""
    if isinstance(t, np.ndarray):
        return t.astype(np.float64)
    prepare_kernel(t)  # type: ignore[arg-type]
    return t


@dataclass
class PredictionState:
    states: list[object]
    output: np.ndarray


@dataclass(frozen=True, eq=False)
class RnntModel:
    topology: TopologyConfig
    mode: QuantMode
    tensors: dict[str, Tensor]
    activations: dict[str, QuantParams] = field(default_factory=dict)

    def __post_init__(self) -> None:
        specs = {s.name: s for s in tensor_specs(self.topology)}
        missing = sorted(set(specs) - set(self.tensors))
        if missing:
            raise MissingTensorError(f"{len(missing)} tensors missing: {', '.join(missing)}")
        extra = sorted(set(self.tensors) - set(specs))
        if extra:
            raise ModelFormatError(f"tensors not in the topology: {', '.join(extra)}")
        errors = [
            f"{name}: shape {_shape(self.tensors[name])}, expected {s.shape}"
            for name, s in specs.items()
            if _shape(self.tensors[name]) != s.shape
        ]
        if errors:
            raise ShapeError("tensor shapes do not match the topology", errors)
        if self.mode is QuantMode.INTEGER:
            absent = sorted(stored_activation_ids(self.topology) - set(self.activations))
            if absent:
                raise CalibrationError("integer model is missing activation scales", absent)

    @property
    def matvec(self) -> Callable[[Tensor, np.ndarray], np.ndarray]:
        return dense_matvec if self.mode is QuantMode.FLOAT else hybrid_matvec  # type: ignore[return-value]

    def param_count(self) -> int:
        return sum(stored_values(t) for t in self.tensors.values())

    # assembly

    def _input_params(self, prefix: str) -> QuantParams:
        section, k = prefix.split(".")
        if int(k) > 0:
            return self.activations[f"{section}.{int(k) - 1}.output"]
        if section == "encoder":
            return self.activations[ENCODER_INPUT]
        return self.tensors["prediction.embedding"].params  # type: ignore[union-attr]

    def _float_cell(self, prefix: str, spec: LayerSpec) -> FloatCellWeights:
        t = self.tensors

        def ln(g: str, with_bias: bool = False) -> LayerNormParams:
            if not spec.layer_norm:
                return LayerNormParams.identity(spec.hidden, enabled=False)
            bias = t[f"{prefix}.ln_{g}.bias"] if with_bias else np.zeros(spec.hidden, dtype=np.float32)
            return LayerNormParams(t[f"{prefix}.ln_{g}.gain"], bias)  # type: ignore[arg-type]

        W = {g: _kernel_ready(t[f"{prefix}.W_{g}"]) for g in spec.gates}
        b = {g: t[f"{prefix}.b_{g}"] for g in spec.gates}
        if spec.kind is CellKind.SRU:
            lns = {g: ln(g) for g in calibrated_gates(spec.kind)} | {"c": ln("c", with_bias=True)}
            return SruWeights(W, b, lns, _kernel_ready(t[f"{prefix}.W_proj"]), spec.cell_clip)  # type: ignore[arg-type]
        cls = LstmWeights if spec.kind is CellKind.LSTM else CifgWeights
        R = {g: _kernel_ready(t[f"{prefix}.R_{g}"]) for g in spec.gates}
        lns = {g: ln(g) for g in spec.gates}
        return cls(W, R, b, lns, _kernel_ready(t[f"{prefix}.W_proj"]), spec.cell_clip)  # type: ignore[arg-type]

    def _integer_cell(self, prefix: str, spec: LayerSpec) -> IntegerCellWeights:
        t = self.tensors
        gains = {}
        if spec.layer_norm:
            names = list(calibrated_gates(spec.kind)) + (["c"] if spec.kind is CellKind.SRU else [])
            gains = {g: t[f"{prefix}.ln_{g}.gain"] for g in names}
        ln_c_bias = t.get(f"{prefix}.ln_c.bias") if spec.kind is CellKind.SRU else None
        return IntegerCellWeights(
            kind=spec.kind,
            W={g: t[f"{prefix}.W_{g}"] for g in spec.gates},  # type: ignore[misc]
            R={g: t[f"{prefix}.R_{g}"] for g in spec.gates} if spec.recurrent else {},  # type: ignore[misc]
            b={g: t[f"{prefix}.b_{g}"] for g in spec.gates},  # type: ignore[misc]
            ln_gain=gains,  # type: ignore[arg-type]
            W_proj=t[f"{prefix}.W_proj"],  # type: ignore[arg-type]
            input=self._input_params(prefix),
            output=self.activations[f"{prefix}.output"],
            pre={g: self.activations[f"{prefix}.gate.{g}.pre"] for g in calibrated_gates(spec.kind)},
            m=self.activations[f"{prefix}.m"],
            ln_c_bias=ln_c_bias,  # type: ignore[arg-type]
            cell_clip=spec.cell_clip,
        )

    @cached_property
    def cells(self) -> dict[str, CellWeights]:
        cells: dict[str, CellWeights] = {}
        for prefix, spec in self.topology.layers():
            if self.mode is QuantMode.INTEGER:
                cells[prefix] = self._integer_cell(prefix, spec)
            elif self.mode is QuantMode.HYBRID:
                cells[prefix] = HybridCellWeights(self._float_cell(prefix, spec))
            else:
                cells[prefix] = self._float_cell(prefix, spec)
        return cells

    @cached_property
    def _joint_weights(self) -> dict[str, Tensor]:
        return {name: _kernel_ready(self.tensors[f"joint.{name}"]) for name in ("P_enc", "P_pred", "W_out")}

    def prepare(self) -> None:
        """Assemble the cells and kernel payloads ahead of timing or worker threads."""
        self.cells
        self._joint_weights

    def _section_cells(self, section: str) -> list[tuple[str, CellWeights]]:
        return [(p, c) for p, c in self.cells.items() if p.startswith(section + ".")]

    # execution

    def encode(
        self, features: np.ndarray, *, observe: Observer | None = None, trace: Trace | None = None
    ) -> list[np.ndarray]:
        features = np.asarray(features)
        if features.ndim != 2 or features.shape[1] != self.topology.feature_width:
            raise ShapeError(
                f"features of shape {features.shape} do not match the feature width {self.topology.feature_width}"
            )
        frames = [np.asarray(f, dtype=np.float64) for f in features]
        if observe is not None:
            for f in frames:
                observe(ENCODER_INPUT, f)
        xs: list[object] = frames
        if self.mode is QuantMode.INTEGER:
            xs = [quantize_with(f, self.activations[ENCODER_INPUT]) for f in frames]
        for prefix, cell in self._section_cells("encoder"):
            xs = run_sequence(cell, xs, observe=_prefixed(observe, prefix), layer=prefix)  # type: ignore[arg-type]
            if trace is not None:
                trace[prefix] = [_real(x) for x in xs]  # type: ignore[arg-type]
        return [_real(x) for x in xs]  # type: ignore[arg-type]

    def _embed(self, token: int) -> np.ndarray | QuantizedTensor:
        table = self.tensors["prediction.embedding"]
        if not 0 <= token < self.topology.vocab_size:
            raise ValidationError(f"token {token} is outside the vocabulary of {self.topology.vocab_size}")
        if isinstance(table, QuantizedTensor):
            row = QuantizedTensor(table.data[token], table.params)
            return row if self.mode is QuantMode.INTEGER else dequantize(row)
        return np.asarray(table[token], dtype=np.float64)

    def predict_step(
        self,
        state: PredictionState | None,
        token: int,
        *,
        observe: Observer | None = None,
        trace: Trace | None = None,
    ) -> PredictionState:
        cells = self._section_cells("prediction")
        states = state.states if state is not None else [c.initial_state() for _, c in cells]
        x = self._embed(token)
        new_states = []
        for (prefix, cell), s in zip(cells, states):
            try:
                x, s = cell_step(cell, x, s, observe=_prefixed(observe, prefix))
            except NumericError as e:
                raise NumericError(e.message, layer=prefix) from e
            new_states.append(s)
            if trace is not None:
                trace.setdefault(prefix, []).append(_real(x))  # type: ignore[arg-type]
        return PredictionState(new_states, _real(x))  # type: ignore[arg-type]

    def predict_sequence(self, tokens: Sequence[int], *, trace: Trace | None = None) -> list[np.ndarray]:
        """Prediction outputs for blank and then each given token, one step per token."""
        outputs = []
        state = None
        for token in [BLANK, *tokens]:
            state = self.predict_step(state, token, trace=trace)
            outputs.append(state.output)
        return outputs

    def joint_encoder(self, enc: np.ndarray) -> np.ndarray:
        return self.matvec(self._joint_weights["P_enc"], enc)

    def joint_prediction(self, pred: np.ndarray) -> np.ndarray:
        return self.matvec(self._joint_weights["P_pred"], pred) + self.tensors["joint.b"]

    def joint_logits(self, enc_part: np.ndarray, pred_part: np.ndarray) -> np.ndarray:
        s = enc_part + pred_part
        hidden = np.tanh(s) if self.topology.joint.activation == "tanh" else np.maximum(s, 0.0)
        return self.matvec(self._joint_weights["W_out"], hidden) + self.tensors["joint.b_out"]

    def joint(self, enc: np.ndarray, pred: np.ndarray) -> np.ndarray:
        """Logits over the vocabulary; index 0 is blank."""
        return self.joint_logits(self.joint_encoder(enc), self.joint_prediction(pred))

    def decode(
        self,
        u: Utterance,
        max_symbols: int = DEFAULT_MAX_SYMBOLS,
        *,
        observe: Observer | None = None,
        trace: Trace | None = None,
    ) -> list[int]:
        if max_symbols < 1:
            raise ValidationError(f"max symbols per frame must be positive, got {max_symbols}")
        enc = self.encode(u.features, observe=observe, trace=trace)
        pred = self.predict_step(None, BLANK, observe=observe)
        pred_part = self.joint_prediction(pred.output)
        tokens: list[int] = []
        for t, e in enumerate(enc):
            enc_part = self.joint_encoder(e)
            for _ in range(max_symbols):
                logits = self.joint_logits(enc_part, pred_part)
                if not np.all(np.isfinite(logits)):
                    raise NumericError("non-finite joint logits", layer="joint", step=t)
                k = int(np.argmax(logits))
                if k == BLANK:
                    break
                tokens.append(k)
                pred = self.predict_step(pred, k, observe=observe)
                pred_part = self.joint_prediction(pred.output)
        return tokens


def rnnt_greedy_decode(
    model: RnntModel, u: Utterance, max_symbols_per_frame: int = DEFAULT_MAX_SYMBOLS, *, observe: Observer | None = None
) -> list[int]:
    return model.decode(u, max_symbols_per_frame, observe=observe)


def cell_tensors(prefix: str, cell: FloatCellWeights | IntegerCellWeights) -> dict[str, Tensor]:
    """Flatten one cell into its stored tensors."""
    out: dict[str, Tensor] = {}
    if isinstance(cell, IntegerCellWeights):
        for g, m in cell.W.items():
            out[f"{prefix}.W_{g}"] = m
        for g, m in cell.R.items():
            out[f"{prefix}.R_{g}"] = m
        for g, v in cell.b.items():
            out[f"{prefix}.b_{g}"] = v
        for g, v in cell.ln_gain.items():
            out[f"{prefix}.ln_{g}.gain"] = v
        if cell.ln_c_bias is not None:
            out[f"{prefix}.ln_c.bias"] = cell.ln_c_bias
        out[f"{prefix}.W_proj"] = cell.W_proj
        return out
    for g, m in cell.W.items():
        out[f"{prefix}.W_{g}"] = m
    for g, m in getattr(cell, "R", {}).items():
        out[f"{prefix}.R_{g}"] = m
    for g, v in cell.b.items():
        ln = cell.ln.get(g)
        fused = ln is not None and ln.enabled
        out[f"{prefix}.b_{g}"] = (v + ln.bias).astype(np.float32) if fused else v  # type: ignore[union-attr]
    for g, ln in cell.ln.items():
        if ln.enabled:
            out[f"{prefix}.ln_{g}.gain"] = ln.gain
            if g == "c":
                out[f"{prefix}.ln_c.bias"] = ln.bias
    out[f"{prefix}.W_proj"] = cell.W_proj
    return out


def init_random_model(topology: TopologyConfig, seed: int = 0) -> RnntModel:
    """Seeded float model; sparse layers are magnitude-pruned to their targets."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, Tensor] = {}
    for prefix, spec in topology.layers():
        cell = init_cell(spec.kind, rng, spec.input, spec.hidden, spec.projection, layer_norm_enabled=spec.layer_norm)
        tensors.update(cell_tensors(prefix, cell))
    for s in tensor_specs(topology):
        if s.sparsity is not None:
            tensors[s.name] = prune_matrix(tensors[s.name], s.sparsity, s.block)  # type: ignore[arg-type]
    j, v = topology.joint.hidden, topology.vocab_size

    def uniform(shape: tuple[int, ...], limit: float) -> np.ndarray:
        return rng.uniform(-limit, limit, size=shape).astype(np.float32)

    tensors["prediction.embedding"] = uniform((v, topology.embedding_width), 1.0)
    tensors["joint.P_enc"] = uniform((j, topology.encoder_output), 1.0 / np.sqrt(topology.encoder_output))
    tensors["joint.P_pred"] = uniform((j, topology.prediction_output), 1.0 / np.sqrt(topology.prediction_output))
    tensors["joint.b"] = uniform((j,), 0.1)
    tensors["joint.W_out"] = uniform((v, j), 1.0 / np.sqrt(j))
    tensors["joint.b_out"] = uniform((v,), 0.1)
    n_params = sum(map(stored_values, tensors.values()))
    logger.info("initialized a random %s-parameter model (seed %d)", f"{n_params:,}", seed)
    return RnntModel(topology, QuantMode.FLOAT, tensors)


def _require_float(model: RnntModel, what: str) -> None:
    if model.mode is not QuantMode.FLOAT:
        raise ValidationError(f"{what} needs a float model, got {model.mode}")


def _quantize_shared(spec: TensorSpec, t: Tensor) -> Tensor:
    if spec.role in ("prunable", "matrix"):
        return quantize_matrix(t)  # type: ignore[arg-type]
    if spec.role == "embedding":
        return quantize_symmetric(t, 8)  # type: ignore[arg-type]
    return t


def convert_to_hybrid(model: RnntModel) -> RnntModel:
    """8-bit weight matrices and embedding; no calibration needed."""
    _require_float(model, "hybrid conversion")
    tensors = {s.name: _quantize_shared(s, model.tensors[s.name]) for s in tensor_specs(model.topology)}
    logger.info("converted %d tensors to hybrid8", len(tensors))
    return RnntModel(model.topology, QuantMode.HYBRID, tensors)


def convert_to_integer(model: RnntModel, stats: dict[str, QuantParams] | RangeObserver) -> RnntModel:
    """Integer-only model from a float model and its calibrated activation ranges."""
    _require_float(model, "integer conversion")
    if isinstance(stats, RangeObserver):
        stats = stats.finalize(required_tensor_ids(model.topology))
    missing = sorted(required_tensor_ids(model.topology) - set(stats))
    if missing:
        raise CalibrationError("calibration stats do not cover", missing)
    specs = tensor_specs(model.topology)
    tensors = {
        s.name: _quantize_shared(s, model.tensors[s.name])
        for s in specs
        if s.name.startswith(("joint.", "prediction.embedding"))
    }
    acts = {tid: stats[tid] for tid in sorted(stored_activation_ids(model.topology))}
    embedding: QuantizedTensor = tensors["prediction.embedding"]  # type: ignore[assignment]
    for prefix, spec in model.topology.layers():
        section, k = prefix.split(".")
        if int(k) > 0:
            input_params = acts[f"{section}.{int(k) - 1}.output"]
        else:
            input_params = acts[ENCODER_INPUT] if section == "encoder" else embedding.params
        cell = integer_cell(
            model.cells[prefix],  # type: ignore[arg-type]
            input=input_params,
            output=acts[f"{prefix}.output"],
            pre={g: acts[f"{prefix}.gate.{g}.pre"] for g in calibrated_gates(spec.kind)},
            m=acts[f"{prefix}.m"],
        )
        tensors.update(cell_tensors(prefix, cell))
    logger.info("converted %d tensors to integer8_16 with %d activation scales", len(tensors), len(acts))
    return RnntModel(model.topology, QuantMode.INTEGER, tensors, acts)


def prune_model(
    model: RnntModel,
    encoder: float | None = None,
    prediction: float | None = None,
    block: tuple[int, int] | None = None,
) -> RnntModel:
    """One-shot block magnitude pruning of the prunable W/R matrices."""
    _require_float(model, "pruning")
    topology = with_sparsity(model.topology, encoder, prediction, block)
    tensors = dict(model.tensors)
    for s in tensor_specs(topology):
        if s.sparsity is None:
            continue
        current = tensors[s.name]
        dense = to_dense(current) if isinstance(current, BlockSparseMatrix) else current
        tensors[s.name] = prune_matrix(dense, s.sparsity, s.block)  # type: ignore[arg-type]
    pruned = RnntModel(topology, QuantMode.FLOAT, tensors)
    logger.info("pruned model: %s parameters stored", f"{pruned.param_count():,}")
    return pruned
