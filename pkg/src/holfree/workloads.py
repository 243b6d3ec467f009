"""Synthetic sample streams with calibrated preprocessing costs.

``speech_3s``/``speech_10s`` are deterministic: every sample runs five cheap
audio steps plus a 500 ms LightStep, and every fifth sample also runs a
HeavyStep. ``img_seg``/``obj_det`` draw each sample's total cost from a
log-normal fitted to the measured median and 90th percentile, clamped to the
measured range, and split it over the chain with fixed shares.
"""

from __future__ import annotations

import csv
import math
import random
from dataclasses import dataclass, field, replace
from fractions import Fraction
from statistics import NormalDist
from typing import Optional

from .core import FixedCost, Sample, Transform, TransformChain

MB = 1_000_000
_Z90 = NormalDist().inv_cdf(0.90)


@dataclass(frozen=True)
class TargetStats:
    avg: float
    median: float
    p75: float
    p90: float
    min: int
    max: int

    def validate(self) -> None:
        if not self.min <= self.median <= self.p75 <= self.p90 <= self.max:
            raise ValueError(
                f"inconsistent target stats: need min <= median <= p75 <= p90 <= max, got {self}"
            )
        if not self.min <= self.avg <= self.max:
            raise ValueError(f"average {self.avg} outside [{self.min}, {self.max}]")


@dataclass(frozen=True)
class WorkloadSpec:
    name: str
    kind: str
    targets: TargetStats
    transforms: tuple
    shares: tuple = ()
    n_samples: int = 1000
    seed: int = 0
    heavy_ms: int = 0
    heavy_every: int = 5
    size_in_mb: tuple = (0.1, 1.0)
    size_out_mb: tuple = (4.0, 12.0)
    size_cost_rho: Optional[float] = None
    meta: dict = field(default_factory=dict, compare=False)

    def validate(self) -> None:
        self.targets.validate()
        if self.kind not in ("speech", "empirical"):
            raise ValueError(f"unknown workload kind {self.kind!r}")
        if self.kind == "empirical":
            if len(self.shares) != len(self.transforms):
                raise ValueError(f"{self.name}: one cost share per transform required")
            if abs(sum(self.shares) - 1) > 1e-9:
                raise ValueError(f"{self.name}: cost shares must sum to 1")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")


SPEECH_BASE = (("Pad", 2), ("SpecAugment", 2), ("FilterBank", 2), ("FrameSplicing", 1), ("PermuteAudio", 1))
LIGHT_MS = 500

SPECS = {
    "img_seg": WorkloadSpec(
        "img_seg", "empirical", TargetStats(500, 470, 630, 750, 10, 2230),
        ("RandomCrop", "RandomFlip", "RandomBrightness", "GaussianNoise", "Cast"),
        shares=(0.68, 0.04, 0.12, 0.12, 0.04),
        size_in_mb=(30.0, 375.0), size_out_mb=(10.0, 10.0), size_cost_rho=0.9,
    ),
    "obj_det": WorkloadSpec(
        "obj_det", "empirical", TargetStats(31, 28, 30, 35, 11, 176),
        ("Resize", "RandomHorizontalFlip", "ToTensor", "Normalize"),
        shares=(0.45, 0.05, 0.35, 0.15),
        size_in_mb=(0.1, 1.0), size_out_mb=(4.0, 12.0), size_cost_rho=None,
    ),
    "speech_3s": WorkloadSpec(
        "speech_3s", "speech", TargetStats(998, 508, 509, 3008, 502, 3017),
        tuple(n for n, _ in SPEECH_BASE) + ("LightStep", "HeavyStep"),
        heavy_ms=2500, size_in_mb=(0.06, 0.34), size_out_mb=(0.4, 9.0),
    ),
    "speech_10s": WorkloadSpec(
        "speech_10s", "speech", TargetStats(2351, 508, 509, 10008, 502, 10014),
        tuple(n for n, _ in SPEECH_BASE) + ("LightStep", "HeavyStep"),
        heavy_ms=9500, size_in_mb=(0.06, 0.34), size_out_mb=(0.4, 9.0),
    ),
}


def get_spec(name: str, **overrides) -> WorkloadSpec:
    try:
        spec = SPECS[name]
    except KeyError:
        raise ValueError(f"unknown workload {name!r}; choose from {sorted(SPECS)}") from None
    if overrides:
        tgt = {k: overrides.pop(k) for k in list(overrides) if k in TargetStats.__dataclass_fields__}
        if tgt:
            overrides["targets"] = replace(spec.targets, **tgt)
        spec = replace(spec, **overrides)
    spec.validate()
    return spec


def _bytes(rng: random.Random, lo_mb: float, hi_mb: float) -> int:
    return int(round(rng.uniform(lo_mb, hi_mb) * MB))


def gen_speech(variant: str, n: int, seed: int = 0) -> list[Sample]:
    """Speech microbenchmark stream; ``variant`` is ``"3s"`` or ``"10s"``."""
    spec = get_spec(f"speech_{variant}")
    return _gen_speech(spec, n, seed)


def _gen_speech(spec: WorkloadSpec, n: int, seed: int) -> list[Sample]:
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = random.Random(seed)
    light = tuple(Transform(name, 1, FixedCost(ms)) for name, ms in SPEECH_BASE[1:]) + (
        Transform("LightStep", 1, FixedCost(LIGHT_MS)),
    )
    heavy = Transform("HeavyStep", 1, FixedCost(spec.heavy_ms))
    pad_ms = SPEECH_BASE[0][1]
    out = []
    for i in range(n):
        size_in = _bytes(rng, *spec.size_in_mb)
        size_out = _bytes(rng, *spec.size_out_mb)
        # Pad carries all of the inflation
        pad = Transform("Pad", Fraction(size_out, size_in), FixedCost(pad_ms))
        steps = (pad,) + light
        if i % spec.heavy_every == spec.heavy_every - 1:
            steps += (heavy,)
        out.append(Sample(i, size_in, TransformChain(steps)))
    return out


def lognormal_params(median: float, p90: float) -> tuple[float, float]:
    """(mu, sigma) of the log-normal with the given median and 90th percentile."""
    if not 0 < median < p90:
        raise ValueError("need 0 < median < p90 to fit a log-normal")
    return math.log(median), (math.log(p90) - math.log(median)) / _Z90


def _split(total: int, shares: tuple) -> list[int]:
    parts = [int(total * s) for s in shares]
    main = max(range(len(shares)), key=lambda k: shares[k])
    parts[main] += total - sum(parts)
    return parts


def gen_empirical(spec: WorkloadSpec, n: int, seed: int = 0) -> list[Sample]:
    """Long-tailed stream drawn from a log-normal fitted to ``spec.targets``."""
    spec.validate()
    if n < 1:
        raise ValueError("n must be >= 1")
    tg = spec.targets
    mu, sigma = lognormal_params(tg.median, tg.p90)
    rng = random.Random(seed)
    phi = NormalDist().cdf
    out = []
    for i in range(n):
        z = rng.gauss(0.0, 1.0)
        total = min(tg.max, max(tg.min, int(round(math.exp(mu + sigma * z)))))
        costs = _split(total, spec.shares)
        lo, hi = spec.size_in_mb
        if spec.size_cost_rho is not None:
            rho = spec.size_cost_rho
            zs = rho * z + math.sqrt(1 - rho * rho) * rng.gauss(0.0, 1.0)
            # squaring skews sizes toward the small end (mean ~ lo + (hi-lo)/3)
            size_in = int(round((lo + (hi - lo) * phi(zs) ** 2) * MB))
        else:
            size_in = _bytes(rng, lo, hi)
        size_out = _bytes(rng, *spec.size_out_mb)
        factors = _size_factors(spec, size_in, size_out)
        steps = tuple(Transform(name, f, FixedCost(c)) for name, f, c in zip(spec.transforms, factors, costs))
        out.append(Sample(i, size_in, TransformChain(steps)))
    return out


def _size_factors(spec: WorkloadSpec, size_in: int, size_out: int) -> list:
    factors = [Fraction(1)] * len(spec.transforms)
    ratio = Fraction(size_out, size_in)
    if spec.name == "obj_det":
        # ToTensor widens uint8 to float32; Resize takes the rest
        factors[spec.transforms.index("ToTensor")] = Fraction(4)
        factors[spec.transforms.index("Resize")] = ratio / 4
    else:
        factors[0] = ratio
    return factors


def generate(spec: WorkloadSpec, n: Optional[int] = None, seed: Optional[int] = None) -> list[Sample]:
    n = spec.n_samples if n is None else n
    seed = spec.seed if seed is None else seed
    if spec.kind == "speech":
        return _gen_speech(spec, n, seed)
    return gen_empirical(spec, n, seed)


def total_cost(sample: Sample) -> int:
    return sample.chain.total_cost(sample)


def output_size(sample: Sample) -> Fraction:
    return sample.size_bytes * sample.chain.size_factor


def export_csv(samples, path) -> None:
    """One row per sample: id, input/output bytes, then each step's cost."""
    width = max(len(s.chain) for s in samples)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "size_in", "size_out", "total_ms"] + [f"step{k}_ms" for k in range(width)] + ["steps"])
        for s in samples:
            costs = [t.duration(s) for t in s.chain]
            w.writerow([s.id, s.size_bytes, round(float(output_size(s)), 3), sum(costs)]
                       + costs + [""] * (width - len(costs)) + ["|".join(t.name for t in s.chain)])
