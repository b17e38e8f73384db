"""Float reference implementations of the LSTM, CIFG and SRU cells.

Every quantized path is checked against these. Layer norm is applied to the
pre-activation sum (W x + R h), then the gain, then the bias vector, then the
nonlinearity; when layer norm is on, the cell bias and the layer-norm bias act
as one fused vector.
"""

from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import dataclass
from enum import StrEnum
from functools import singledispatch
from typing import ClassVar

import numpy as np

from . import blocksparse
from .blocksparse import BlockSparseMatrix
from .errors import NumericError, ShapeError

Matrix = np.ndarray | BlockSparseMatrix
MatVec = Callable[[Matrix, np.ndarray], np.ndarray]
Observer = Callable[[str, np.ndarray], None]

LN_EPSILON = 1e-6


class CellKind(StrEnum):
    LSTM = "lstm"
    CIFG = "cifg"
    SRU = "sru"


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def dense_matvec(w: Matrix, x: np.ndarray) -> np.ndarray:
    if isinstance(w, BlockSparseMatrix):
        return blocksparse.matvec(w, x)
    return w @ x


def calibrated_gates(kind: CellKind) -> tuple[str, ...]:
    """Gates whose pre-activation goes through layer norm (or straight to a nonlinearity)."""
    return {
        CellKind.LSTM: ("i", "f", "z", "o"),
        CellKind.CIFG: ("f", "z", "o"),
        CellKind.SRU: ("f", "r"),
    }[kind]


@dataclass(frozen=True, eq=False)
class LayerNormParams:
    gain: np.ndarray
    bias: np.ndarray
    epsilon: float = LN_EPSILON
    enabled: bool = True

    @classmethod
    def identity(cls, width: int, enabled: bool = True) -> LayerNormParams:
        return cls(np.ones(width, dtype=np.float32), np.zeros(width, dtype=np.float32), enabled=enabled)

    @property
    def width(self) -> int:
        return len(self.gain)


def layer_norm(x: np.ndarray, p: LayerNormParams) -> np.ndarray:
    """gain * (x - mean) / sqrt(var + eps) + bias with population variance."""
    if not p.enabled:
        return x
    centered = x - x.mean()
    var = np.mean(centered * centered)
    return p.gain * centered / np.sqrt(var + p.epsilon) + p.bias


@dataclass
class CellState:
    c: np.ndarray
    h: np.ndarray


def _shape(m: Matrix) -> tuple[int, int]:
    return tuple(m.shape)  # type: ignore[return-value]


@dataclass(frozen=True, eq=False)
class _GatedWeights:
    """Shared layout of LSTM and CIFG: per-gate W, R, b and layer norm plus a projection."""

    W: dict[str, Matrix]
    R: dict[str, Matrix]
    b: dict[str, np.ndarray]
    ln: dict[str, LayerNormParams]
    W_proj: Matrix
    cell_clip: float | None = None

    kind: ClassVar[CellKind]
    gates: ClassVar[tuple[str, ...]]

    def __post_init__(self) -> None:
        errors = []
        if set(self.W) != set(self.gates) or set(self.R) != set(self.gates):
            errors.append(f"{self.kind} cells need W and R for gates {', '.join(self.gates)}")
        else:
            hidden, inp = _shape(self.W[self.gates[0]])
            out = _shape(self.W_proj)[0]
            for g in self.gates:
                if _shape(self.W[g]) != (hidden, inp):
                    errors.append(f"W_{g} is {_shape(self.W[g])}, expected {(hidden, inp)}")
                if _shape(self.R[g]) != (hidden, out):
                    errors.append(f"R_{g} is {_shape(self.R[g])}, expected {(hidden, out)}")
                if len(self.b[g]) != hidden:
                    errors.append(f"b_{g} has {len(self.b[g])} entries, expected {hidden}")
                if self.ln[g].width != hidden:
                    errors.append(f"ln_{g} has width {self.ln[g].width}, expected {hidden}")
            if _shape(self.W_proj)[1] != hidden:
                errors.append(f"W_proj is {_shape(self.W_proj)}, expected (*, {hidden})")
        if errors:
            raise ShapeError(f"inconsistent {self.kind} weights", errors)

    @property
    def input_width(self) -> int:
        return _shape(self.W[self.gates[0]])[1]

    @property
    def hidden_width(self) -> int:
        return _shape(self.W[self.gates[0]])[0]

    @property
    def output_width(self) -> int:
        return _shape(self.W_proj)[0]

    def matrix_params(self) -> int:
        """Dense parameter count of the W and R matrices."""
        return sum(int(np.prod(_shape(m))) for m in [*self.W.values(), *self.R.values()])

    def initial_state(self) -> CellState:
        return CellState(np.zeros(self.hidden_width), np.zeros(self.output_width))


class LstmWeights(_GatedWeights):
    kind = CellKind.LSTM
    gates = ("i", "f", "z", "o")


class CifgWeights(_GatedWeights):
    kind = CellKind.CIFG
    gates = ("f", "z", "o")


@dataclass(frozen=True, eq=False)
class SruWeights:
    W: dict[str, Matrix]
    b: dict[str, np.ndarray]
    ln: dict[str, LayerNormParams]
    W_proj: Matrix
    cell_clip: float | None = None

    kind: ClassVar[CellKind] = CellKind.SRU
    gates: ClassVar[tuple[str, ...]] = ("f", "r", "x1", "x2")
    normalized: ClassVar[tuple[str, ...]] = ("f", "r", "c")

    def __post_init__(self) -> None:
        errors = []
        if set(self.W) != set(self.gates):
            errors.append("SRU cells need W for f, r, x1 and x2 (and no recurrent matrices)")
        else:
            hidden, inp = _shape(self.W["f"])
            for g in self.gates:
                if _shape(self.W[g]) != (hidden, inp):
                    errors.append(f"W_{g} is {_shape(self.W[g])}, expected {(hidden, inp)}")
                if len(self.b[g]) != hidden:
                    errors.append(f"b_{g} has {len(self.b[g])} entries, expected {hidden}")
            for g in self.normalized:
                if self.ln[g].width != hidden:
                    errors.append(f"ln_{g} has width {self.ln[g].width}, expected {hidden}")
            if _shape(self.W_proj)[1] != hidden:
                errors.append(f"W_proj is {_shape(self.W_proj)}, expected (*, {hidden})")
        if errors:
            raise ShapeError("inconsistent sru weights", errors)

    @property
    def input_width(self) -> int:
        return _shape(self.W["f"])[1]

    @property
    def hidden_width(self) -> int:
        return _shape(self.W["f"])[0]

    @property
    def output_width(self) -> int:
        return _shape(self.W_proj)[0]

    def matrix_params(self) -> int:
        return sum(int(np.prod(_shape(m))) for m in self.W.values())

    def initial_state(self) -> CellState:
        return CellState(np.zeros(self.hidden_width), np.zeros(self.output_width))


FloatCellWeights = LstmWeights | CifgWeights | SruWeights


def _emit(observe: Observer | None, name: str, value: np.ndarray) -> None:
    if observe is not None:
        observe(name, value)


def _gate_preactivation(
    w: _GatedWeights | SruWeights,
    g: str,
    x: np.ndarray,
    h: np.ndarray | None,
    matvec: MatVec,
    observe: Observer | None,
) -> np.ndarray:
    pre = matvec(w.W[g], x)
    if h is not None:
        pre = pre + matvec(w.R[g], h)  # type: ignore[union-attr]
    ln = w.ln[g]
    if ln.enabled:
        _emit(observe, f"gate.{g}.pre", pre)
        return layer_norm(pre, ln) + w.b[g]
    pre = pre + w.b[g]
    _emit(observe, f"gate.{g}.pre", pre)
    return pre


def _finish(
    w: FloatCellWeights, c: np.ndarray, m: np.ndarray, matvec: MatVec, observe: Observer | None
) -> tuple[np.ndarray, CellState]:
    h = matvec(w.W_proj, m)
    if not (np.all(np.isfinite(c)) and np.all(np.isfinite(h))):
        raise NumericError(f"non-finite {w.kind} activation")
    _emit(observe, "cell", c)
    _emit(observe, "m", m)
    _emit(observe, "output", h)
    return h, CellState(c, h)


def _clip(c: np.ndarray, clip: float | None) -> np.ndarray:
    return c if clip is None else np.clip(c, -clip, clip)


def lstm_step(
    w: LstmWeights,
    x: np.ndarray,
    s: CellState,
    *,
    matvec: MatVec = dense_matvec,
    observe: Observer | None = None,
) -> tuple[np.ndarray, CellState]:
    i = sigmoid(_gate_preactivation(w, "i", x, s.h, matvec, observe))
    f = sigmoid(_gate_preactivation(w, "f", x, s.h, matvec, observe))
    z = np.tanh(_gate_preactivation(w, "z", x, s.h, matvec, observe))
    o = sigmoid(_gate_preactivation(w, "o", x, s.h, matvec, observe))
    c = _clip(i * z + f * s.c, w.cell_clip)
    m = o * np.tanh(c)
    return _finish(w, c, m, matvec, observe)


def cifg_step(
    w: CifgWeights,
    x: np.ndarray,
    s: CellState,
    *,
    matvec: MatVec = dense_matvec,
    observe: Observer | None = None,
) -> tuple[np.ndarray, CellState]:
    f = sigmoid(_gate_preactivation(w, "f", x, s.h, matvec, observe))
    i = 1.0 - f
    z = np.tanh(_gate_preactivation(w, "z", x, s.h, matvec, observe))
    o = sigmoid(_gate_preactivation(w, "o", x, s.h, matvec, observe))
    c = _clip(i * z + f * s.c, w.cell_clip)
    m = o * np.tanh(c)
    return _finish(w, c, m, matvec, observe)


def sru_step(
    w: SruWeights,
    x: np.ndarray,
    s: CellState,
    *,
    matvec: MatVec = dense_matvec,
    observe: Observer | None = None,
) -> tuple[np.ndarray, CellState]:
    f = sigmoid(_gate_preactivation(w, "f", x, None, matvec, observe))
    r = sigmoid(_gate_preactivation(w, "r", x, None, matvec, observe))
    x1 = matvec(w.W["x1"], x) + w.b["x1"]
    x2 = matvec(w.W["x2"], x) + w.b["x2"]
    c = _clip(f * s.c + (1.0 - f) * x1, w.cell_clip)
    m = r * np.tanh(layer_norm(c, w.ln["c"])) + (1.0 - r) * x2
    return _finish(w, c, m, matvec, observe)


@singledispatch
def cell_step(w, x, s, **kwargs):  # noqa: ANN001, ANN003, ANN201
    raise TypeError(f"no step function for {type(w).__name__}")


cell_step.register(LstmWeights, lstm_step)
cell_step.register(CifgWeights, cifg_step)
cell_step.register(SruWeights, sru_step)


def run_sequence(
    w: object,
    inputs: Sequence[np.ndarray],
    init: object | None = None,
    *,
    observe: Observer | None = None,
    layer: str | None = None,
) -> list[np.ndarray]:
    """Left-to-right fold of the cell's step function; one output per input."""
    if inputs:
        widths = {x.shape[-1] for x in inputs}
        if len(widths) != 1:
            raise ShapeError(f"inputs must share one width, got {sorted(widths)}")
    state = init if init is not None else w.initial_state()  # type: ignore[attr-defined]
    outputs = []
    for t, x in enumerate(inputs):
        try:
            h, state = cell_step(w, x, state, observe=observe)
        except NumericError as e:
            raise NumericError(e.message, layer=layer, step=t) from e
        outputs.append(h)
    return outputs


def _uniform(rng: np.random.Generator, shape: tuple[int, ...], limit: float, dtype: type) -> np.ndarray:
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def _init_gated(
    kind: CellKind,
    rng: np.random.Generator,
    input_width: int,
    hidden: int,
    output: int,
    *,
    layer_norm_enabled: bool = True,
    bias_scale: float = 0.1,
    dtype: type = np.float32,
) -> LstmWeights | CifgWeights:
    cls = LstmWeights if kind is CellKind.LSTM else CifgWeights
    limit = 1.0 / np.sqrt(input_width + output)
    return cls(
        W={g: _uniform(rng, (hidden, input_width), limit, dtype) for g in cls.gates},
        R={g: _uniform(rng, (hidden, output), limit, dtype) for g in cls.gates},
        b={g: _uniform(rng, (hidden,), bias_scale, dtype) for g in cls.gates},
        ln={g: LayerNormParams.identity(hidden, layer_norm_enabled) for g in cls.gates},
        W_proj=_uniform(rng, (output, hidden), 1.0 / np.sqrt(hidden), dtype),
    )


def init_sru(
    rng: np.random.Generator,
    input_width: int,
    hidden: int,
    output: int,
    *,
    layer_norm_enabled: bool = True,
    bias_scale: float = 0.1,
    dtype: type = np.float32,
) -> SruWeights:
    limit = 1.0 / np.sqrt(input_width)
    return SruWeights(
        W={g: _uniform(rng, (hidden, input_width), limit, dtype) for g in SruWeights.gates},
        b={g: _uniform(rng, (hidden,), bias_scale, dtype) for g in SruWeights.gates},
        ln={g: LayerNormParams.identity(hidden, layer_norm_enabled) for g in SruWeights.normalized},
        W_proj=_uniform(rng, (output, hidden), 1.0 / np.sqrt(hidden), dtype),
    )


def init_cell(
    kind: CellKind,
    rng: np.random.Generator,
    input_width: int,
    hidden: int,
    output: int,
    **kwargs: object,
) -> FloatCellWeights:
    kind = CellKind(kind)
    if kind is CellKind.SRU:
        return init_sru(rng, input_width, hidden, output, **kwargs)  # type: ignore[arg-type]
    return _init_gated(kind, rng, input_width, hidden, output, **kwargs)  # type: ignore[arg-type]
