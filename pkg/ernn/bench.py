"""Real-time-factor benchmarking and model-vs-model comparison."""

from __future__ import annotations

import logging
import math
import time
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np

from .calibrate import RangeObserver
from .cells import CellKind, calibrated_gates, init_cell, run_sequence
from .errors import TopologyError, ValidationError
from .features import Utterance
from .fixedpoint import quantize_with
from .quant import hybrid_cell, integer_cell
from .rnnt import DEFAULT_MAX_SYMBOLS, RnntModel, Trace

logger = logging.getLogger(__name__)

Clock = Callable[[], float]


def percentile_nearest_rank(values: Sequence[float], p: float) -> float:
    """Smallest value with at least a fraction p of the sample at or below it."""
    if not values:
        raise ValidationError("percentile of an empty sample")
    if not 0.0 < p <= 1.0:
        raise ValidationError(f"percentile must be in (0, 1], got {p}")
    ordered = sorted(values)
    rank = max(1, math.ceil(round(p * len(ordered), 9)))
    return ordered[rank - 1]


@dataclass(frozen=True)
class UtteranceTiming:
    id: str
    frames: int
    duration: float
    wall: float
    rt: float
    tokens: int


@dataclass(frozen=True)
class BenchReport:
    mode: str
    params: int
    percentile: float
    rt_percentile: float
    mean_rt: float
    repetitions: int
    warmup: int
    utterances: list[UtteranceTiming] = field(default_factory=list)

    def as_dict(self) -> dict[str, Any]:
        return asdict(self)


def decode_all(
    model: RnntModel, utterances: Sequence[Utterance], max_symbols: int = DEFAULT_MAX_SYMBOLS, workers: int = 1
) -> list[list[int]]:
    """Greedy-decode every utterance; workers > 1 shares the model across threads."""
    if workers < 1:
        raise ValidationError(f"workers must be positive, got {workers}")
    model.prepare()
    if workers == 1:
        return [model.decode(u, max_symbols) for u in utterances]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda u: model.decode(u, max_symbols), utterances))


def bench(
    model: RnntModel,
    utterances: Sequence[Utterance],
    repetitions: int = 1,
    *,
    warmup: int = 1,
    percentile: float = 0.9,
    max_symbols: int = DEFAULT_MAX_SYMBOLS,
    clock: Clock = time.perf_counter,
) -> BenchReport:
    """RT = decode wall time / audio duration per utterance, averaged over repetitions."""
    if not utterances:
        raise ValidationError("bench needs at least one utterance")
    if repetitions < 1:
        raise ValidationError(f"repetitions must be positive, got {repetitions}")
    empty = [u.id or str(n) for n, u in enumerate(utterances) if u.frames == 0]
    if empty:
        raise ValidationError("bench needs utterances with at least one frame", empty)
    model.prepare()
    for _ in range(warmup):
        model.decode(utterances[0], max_symbols)
    timings = []
    for n, u in enumerate(utterances):
        total = 0.0
        tokens: list[int] = []
        for _ in range(repetitions):
            start = clock()
            tokens = model.decode(u, max_symbols)
            total += clock() - start
        wall = total / repetitions
        timings.append(
            UtteranceTiming(u.id or f"utt{n}", u.frames, u.duration, wall, wall / u.duration, len(tokens))
        )
        logger.debug("%s: %.4fs for %.2fs of audio", timings[-1].id, wall, u.duration)
    rts = [t.rt for t in timings]
    return BenchReport(
        mode=str(model.mode),
        params=model.param_count(),
        percentile=percentile,
        rt_percentile=percentile_nearest_rank(rts, percentile),
        mean_rt=float(np.mean(rts)),
        repetitions=repetitions,
        warmup=warmup,
        utterances=timings,
    )


def levenshtein(a: Sequence[int], b: Sequence[int]) -> int:
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def token_agreement(a: Sequence[int], b: Sequence[int]) -> float:
    longest = max(len(a), len(b))
    if longest == 0:
        return 1.0
    return 1.0 - levenshtein(a, b) / longest


@dataclass
class LayerDelta:
    max_abs: float = 0.0
    total: float = 0.0
    count: int = 0

    @property
    def mean_abs(self) -> float:
        return self.total / self.count if self.count else 0.0

    def add(self, a: np.ndarray, b: np.ndarray) -> None:
        d = np.abs(np.asarray(a, np.float64) - np.asarray(b, np.float64))
        if d.size:
            self.max_abs = max(self.max_abs, float(d.max()))
            self.total += float(d.sum())
            self.count += d.size


@dataclass(frozen=True)
class CompareReport:
    layers: dict[str, LayerDelta]
    agreement: float
    utterances: int

    def as_dict(self) -> dict[str, Any]:
        return {
            "agreement": self.agreement,
            "utterances": self.utterances,
            "layers": {k: {"max_abs": d.max_abs, "mean_abs": d.mean_abs} for k, d in self.layers.items()},
        }


def _same_shape(a: RnntModel, b: RnntModel) -> list[str]:
    ta, tb = a.topology, b.topology
    errors = []
    for field_name in ("feature_width", "vocab_size", "embedding_width"):
        if getattr(ta, field_name) != getattr(tb, field_name):
            errors.append(f"{field_name}: {getattr(ta, field_name)} vs {getattr(tb, field_name)}")
    la, lb = ta.layers(), tb.layers()
    if [p for p, _ in la] != [p for p, _ in lb]:
        errors.append("layer stacks differ in depth")
    for (p, sa), (_, sb) in zip(la, lb):
        if (sa.kind, sa.input, sa.hidden, sa.projection) != (sb.kind, sb.input, sb.hidden, sb.projection):
            errors.append(f"{p}: {sa.kind} {sa.hidden}/{sa.projection} vs {sb.kind} {sb.hidden}/{sb.projection}")
    return errors


def compare(
    a: RnntModel, b: RnntModel, utterances: Sequence[Utterance], max_symbols: int = DEFAULT_MAX_SYMBOLS
) -> CompareReport:
    """Per-layer output deltas and greedy-decode agreement of two models.

    Prediction layers of both models are driven with model a's tokens so their
    outputs line up step by step.
    """
    errors = _same_shape(a, b)
    if errors:
        raise TopologyError("models do not share a topology shape", errors)
    if not utterances:
        raise ValidationError("compare needs at least one utterance")
    layers: dict[str, LayerDelta] = {p: LayerDelta() for p, _ in a.topology.layers()}
    agreements = []
    for u in utterances:
        trace_a: Trace = {}
        trace_b: Trace = {}
        tokens_a = a.decode(u, max_symbols, trace=trace_a)
        tokens_b = b.decode(u, max_symbols, trace=trace_b)
        a.predict_sequence(tokens_a, trace=trace_a)
        b.predict_sequence(tokens_a, trace=trace_b)
        for name, outs in trace_a.items():
            for x, y in zip(outs, trace_b[name]):
                layers[name].add(x, y)
        agreements.append(token_agreement(tokens_a, tokens_b))
    return CompareReport(layers, float(np.mean(agreements)), len(utterances))


def time_layer_modes(
    kind: CellKind,
    input_width: int,
    hidden: int,
    projection: int,
    steps: int = 20,
    seed: int = 0,
    clock: Clock = time.perf_counter,
) -> dict[str, float]:
    """Seconds per step of one float, hybrid and integer layer of the given shape."""
    rng = np.random.default_rng(seed)
    cell = init_cell(kind, rng, input_width, hidden, projection, dtype=np.float64)
    xs = [rng.standard_normal(input_width) for _ in range(steps)]
    obs = RangeObserver()
    for x in xs:
        obs.observe("input", x)
    run_sequence(cell, xs, observe=obs.observe)
    stats = obs.finalize()
    integer = integer_cell(
        cell,
        input=stats["input"],
        output=stats["output"],
        pre={g: stats[f"gate.{g}.pre"] for g in calibrated_gates(kind)},
        m=stats["m"],
    )
    runs: dict[str, tuple[object, list[object]]] = {
        "float": (cell, xs),
        "hybrid": (hybrid_cell(cell), xs),
        "integer": (integer, [quantize_with(x, stats["input"]) for x in xs]),
    }
    timings = {}
    for mode, (weights, inputs) in runs.items():
        start = clock()
        run_sequence(weights, inputs)
        timings[mode] = (clock() - start) / max(steps, 1)
        logger.info("%s %s layer: %.3f ms/step", mode, kind, 1e3 * timings[mode])
    return timings
