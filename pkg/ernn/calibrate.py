"""Dynamic-range calibration for integer conversion.

The float model is run over a dataset with an observer attached; every
inter-op tensor reports its values under a stable id, and finalize() turns
the running max-abs into a QuantParams per id.

Tensor ids, with `p` a layer prefix such as `encoder.3`:

    encoder.input        8-bit   features entering the first encoder layer
    p.gate.<g>.pre       16-bit  gate pre-activation before layer norm
    p.cell               16-bit  cell state (informational; Q3.12 is fixed)
    p.m                  8-bit   cell output entering the projection
    p.output             8-bit   projected layer output
"""

from __future__ import annotations

import logging
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, replace
from typing import TYPE_CHECKING

import numpy as np

from .cells import calibrated_gates
from .errors import CalibrationError, ValidationError
from .fixedpoint import Q3_12, QuantParams

if TYPE_CHECKING:
    from .features import Utterance
    from .rnnt import RnntModel
    from .topology import TopologyConfig

logger = logging.getLogger(__name__)

ENCODER_INPUT = "encoder.input"


def bit_width_for(tensor_id: str) -> int:
    return 16 if tensor_id.endswith((".pre", ".cell")) else 8


def layer_tensor_ids(prefix: str, kind: object) -> list[str]:
    ids = [f"{prefix}.gate.{g}.pre" for g in calibrated_gates(kind)]  # type: ignore[arg-type]
    return ids + [f"{prefix}.cell", f"{prefix}.m", f"{prefix}.output"]


def required_tensor_ids(t: TopologyConfig) -> set[str]:
    """Every id convert_to_integer needs a scale for."""
    ids = {ENCODER_INPUT}
    for prefix, spec in t.layers():
        ids.update(layer_tensor_ids(prefix, spec.kind))
    return ids


def stored_activation_ids(t: TopologyConfig) -> set[str]:
    """Scales an integer model keeps; the cell range is only a diagnostic."""
    return {tid for tid in required_tensor_ids(t) if not tid.endswith(".cell")}


@dataclass
class TensorRange:
    max_abs: float = 0.0
    min: float = math.inf
    max: float = -math.inf
    count: int = 0

    def merged(self, other: TensorRange) -> TensorRange:
        return TensorRange(
            max(self.max_abs, other.max_abs),
            min(self.min, other.min),
            max(self.max, other.max),
            self.count + other.count,
        )


class RangeObserver:
    """Running max-abs (plus min/max for diagnostics) per tensor id."""

    def __init__(self, ranges: dict[str, TensorRange] | None = None) -> None:
        self.ranges: dict[str, TensorRange] = dict(ranges or {})

    def __contains__(self, tensor_id: str) -> bool:
        return tensor_id in self.ranges

    def observe(self, tensor_id: str, values: np.ndarray) -> RangeObserver:
        v = np.asarray(values, dtype=np.float64)
        if not np.all(np.isfinite(v)):
            raise ValidationError(f"non-finite values observed for {tensor_id}")
        r = self.ranges.setdefault(tensor_id, TensorRange())
        r.count += 1
        if v.size:
            r.max_abs = max(r.max_abs, float(np.max(np.abs(v))))
            r.min = min(r.min, float(v.min()))
            r.max = max(r.max, float(v.max()))
        return self

    __call__ = observe

    def merge(self, other: RangeObserver) -> RangeObserver:
        ranges = {tid: replace(r) for tid, r in self.ranges.items()}
        for tid, r in other.ranges.items():
            ranges[tid] = ranges[tid].merged(r) if tid in ranges else replace(r)
        return RangeObserver(ranges)

    def finalize(self, required: Iterable[str] | None = None) -> dict[str, QuantParams]:
        missing = [tid for tid in (required or ()) if self.ranges.get(tid, TensorRange()).count == 0]
        if missing:
            raise CalibrationError("no observations for", missing)
        stats = {}
        for tid, r in sorted(self.ranges.items()):
            stats[tid] = QuantParams.from_max_abs(r.max_abs, bit_width_for(tid))
            if tid.endswith(".cell") and r.max_abs > Q3_12.qmax * Q3_12.scale:
                logger.warning(
                    "%s reaches %.3f; the Q3.12 cell state saturates at ±8", tid, r.max_abs
                )
        return stats


def calibrate_model(model: RnntModel, dataset: Sequence[Utterance]) -> RangeObserver:
    """Run greedy decoding of the float model over the dataset, observing every tensor."""
    if not dataset:
        raise ValidationError("calibration needs at least one utterance")
    from .rnnt import QuantMode

    if model.mode is not QuantMode.FLOAT:
        raise ValidationError(f"calibration runs on the float model, got a {model.mode} model")
    obs = RangeObserver()
    for n, u in enumerate(dataset, 1):
        model.decode(u, observe=obs.observe)
        logger.debug("calibrated on %s (%d/%d)", u.id or f"utterance {n}", n, len(dataset))
    required = required_tensor_ids(model.topology)
    missing = sorted(required - set(obs.ranges))
    if missing:
        raise CalibrationError("calibration did not reach", missing)
    logger.info("calibrated %d tensors on %d utterances", len(obs.ranges), len(dataset))
    return obs
