"""Domain types shared by every pipeline stage, plus clocks and process commands.

All times are integer milliseconds. Pipeline stages are written as generator
processes that yield :class:`Sleep`, :class:`Get` and :class:`Put` commands;
a runtime (virtual or realtime) interprets them, so the same code path drives
both deterministic simulation and wall-clock execution.
"""

from __future__ import annotations

import enum
import time
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Callable, Generator, Optional, Sequence

Millis = int


class ContractError(ValueError):
    """Raised when an operation is invoked outside its precondition."""


# --------------------------------------------------------------------------
# process commands


@dataclass(frozen=True)
class Sleep:
    """Consume ``ms`` of (virtual or wall) time."""

    ms: Millis

    def __post_init__(self) -> None:
        if self.ms < 0:
            raise ContractError(f"negative sleep: {self.ms}")


@dataclass(frozen=True)
class Get:
    """Blocking dequeue; resumes with the head item or ``END``."""

    queue: Any


@dataclass(frozen=True)
class Put:
    """Blocking enqueue; raises ``QueueClosed`` into the process if closed."""

    queue: Any
    item: Any


Process = Generator[Any, Any, Any]


# --------------------------------------------------------------------------
# clocks


class Clock:
    mode = "abstract"

    def now(self) -> Millis:
        raise NotImplementedError


class VirtualClock(Clock):
    """Time that moves only when the event engine advances it."""

    mode = "virtual"

    def __init__(self) -> None:
        self._now: Millis = 0

    def now(self) -> Millis:
        return self._now

    def advance_to(self, t: Millis) -> None:
        if t < self._now:
            raise ContractError(f"clock cannot move backwards ({t} < {self._now})")
        self._now = t


class RealtimeClock(Clock):
    """Monotonic wall clock in whole model milliseconds since construction.

    ``scale`` is wall seconds per model second; 0.1 runs ten times faster
    than the modelled durations.
    """

    mode = "realtime"

    def __init__(self, scale: float = 1.0) -> None:
        if not scale > 0:
            raise ContractError(f"time scale must be positive, got {scale}")
        self.scale = scale
        self._origin = time.perf_counter_ns()

    def now(self) -> Millis:
        return int((time.perf_counter_ns() - self._origin) / (1_000_000 * self.scale))


# --------------------------------------------------------------------------
# transforms


CostModel = Callable[["Sample", Any], Millis]


@dataclass(frozen=True)
class FixedCost:
    """Cost model returning the same duration for every sample."""

    ms: Millis

    def __post_init__(self) -> None:
        if self.ms < 0:
            raise ContractError(f"negative cost: {self.ms}")

    def __call__(self, sample: "Sample", rng: Any) -> Millis:
        return self.ms


@dataclass(frozen=True)
class Transform:
    """One preprocessing step.

    ``size_factor`` scales the recorded payload size (below 1 shrinks the
    data, above 1 inflates it). ``cost_model`` gives the synthetic duration;
    ``apply`` is an optional real function over the payload. A ``barrier``
    transform pins its position when chains are reordered.
    """

    name: str
    size_factor: Fraction = Fraction(1)
    cost_model: Optional[CostModel] = None
    apply: Optional[Callable[[Any], Any]] = None
    barrier: bool = False

    def __post_init__(self) -> None:
        raw = self.size_factor
        factor = Fraction(str(raw)) if isinstance(raw, float) else Fraction(raw)
        if factor <= 0:
            raise ContractError(f"{self.name}: size_factor must be > 0, got {factor}")
        object.__setattr__(self, "size_factor", factor)

    @property
    def kind(self) -> str:
        if self.size_factor < 1:
            return "deflationary"
        if self.size_factor > 1:
            return "inflationary"
        return "neutral"

    def duration(self, sample: "Sample", rng: Any = None) -> Millis:
        if self.cost_model is None:
            return 0
        ms = self.cost_model(sample, rng)
        if ms < 0:
            raise ContractError(f"{self.name}: cost model returned {ms}")
        return int(ms)


@dataclass(frozen=True)
class TransformChain:
    transforms: tuple[Transform, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "transforms", tuple(self.transforms))
        if not self.transforms:
            raise ContractError("a transform chain must be nonempty")

    def __len__(self) -> int:
        return len(self.transforms)

    def __getitem__(self, i: int) -> Transform:
        return self.transforms[i]

    def __iter__(self):
        return iter(self.transforms)

    @property
    def size_factor(self) -> Fraction:
        out = Fraction(1)
        for t in self.transforms:
            out *= t.size_factor
        return out

    def sections(self) -> list[tuple[int, int]]:
        """Half-open index ranges of the reorderable runs between barriers.

        Barrier transforms are not part of any section; together with the
        returned ranges they partition ``range(len(self))``.
        """
        out = []
        start = 0
        for i, t in enumerate(self.transforms):
            if t.barrier:
                if i > start:
                    out.append((start, i))
                start = i + 1
        if start < len(self.transforms):
            out.append((start, len(self.transforms)))
        return out

    def total_cost(self, sample: "Sample" = None, rng: Any = None) -> Millis:
        return sum(t.duration(sample, rng) for t in self.transforms)


# --------------------------------------------------------------------------
# samples and batches


class Classification(enum.Enum):
    UNCLASSIFIED = "unclassified"
    FAST = "fast"
    SLOW = "slow"


@dataclass(eq=False)
class Sample:
    id: int
    size_bytes: int
    chain: TransformChain
    payload: Any = None
    next_index: int = 0
    classification: Classification = Classification.UNCLASSIFIED
    size: Fraction = None
    size_trace: list = field(default_factory=list)
    step_ms: list = field(default_factory=list)
    t_enqueue: Optional[Millis] = None
    t_ready: Optional[Millis] = None

    def __post_init__(self) -> None:
        if self.size_bytes < 0:
            raise ContractError(f"sample {self.id}: negative size")
        if self.size is None:
            self.size = Fraction(self.size_bytes)

    @property
    def n_transforms(self) -> int:
        return len(self.chain)

    @property
    def done(self) -> bool:
        return self.next_index == len(self.chain)

    @property
    def output_bytes(self) -> float:
        return float(self.size)

    def classify(self, label: Classification) -> None:
        if label is Classification.UNCLASSIFIED:
            raise ContractError("cannot reset a classification")
        if self.classification is not Classification.UNCLASSIFIED:
            raise ContractError(
                f"sample {self.id} already classified {self.classification.value}"
            )
        self.classification = label

    def complete_step(self, index: int, ms: Millis = 0) -> None:
        """Record that transform ``index`` finished: scale size, run apply."""
        if index != self.next_index or index >= len(self.chain):
            raise ContractError(
                f"sample {self.id}: transform index {index} out of range "
                f"(next_index={self.next_index}, n={len(self.chain)})"
            )
        t = self.chain[index]
        if t.apply is not None:
            self.payload = t.apply(self.payload)
        self.size = self.size * t.size_factor
        self.size_trace.append(self.size)
        self.step_ms.append(ms)
        self.next_index = index + 1


def apply_transform(sample: Sample, index: int, rng: Any = None) -> Process:
    """Apply one transform as a process step; returns the time consumed."""
    if index != sample.next_index or index >= len(sample.chain):
        raise ContractError(
            f"sample {sample.id}: cannot apply transform {index} "
            f"(next_index={sample.next_index}, n={len(sample.chain)})"
        )
    ms = sample.chain[index].duration(sample, rng)
    if ms:
        yield Sleep(ms)
    sample.complete_step(index, ms)
    return ms


def apply_chain(sample: Sample, rng: Any = None) -> Sample:
    """Apply every remaining transform immediately, ignoring time."""
    while not sample.done:
        sample.complete_step(sample.next_index)
    return sample


@dataclass
class Batch:
    samples: list
    sealed_at: Millis
    seq: int = 0

    def __post_init__(self) -> None:
        ids = [s.id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise ContractError(f"duplicate sample ids in batch {self.seq}: {ids}")
        for s in self.samples:
            if not s.done:
                raise ContractError(f"sample {s.id} batched before preprocessing finished")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def ids(self) -> list[int]:
        return [s.id for s in self.samples]

    @property
    def nbytes(self) -> float:
        return sum(s.output_bytes for s in self.samples)


def make_chain(specs: Sequence[tuple]) -> TransformChain:
    """Build a chain from ``(name, size_factor, cost_ms[, barrier])`` tuples."""
    out = []
    for spec in specs:
        name, factor, cost = spec[:3]
        barrier = bool(spec[3]) if len(spec) > 3 else False
        out.append(Transform(name, factor, FixedCost(int(cost)), barrier=barrier))
    return TransformChain(tuple(out))
