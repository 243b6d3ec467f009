"""Reference loaders the balanced pipeline is compared against.

* :class:`SyncLoader` builds batches in a fixed order and publishes batch k
  only once every member is preprocessed, so one slow sample holds back the
  whole batch.
* :func:`autoorder` moves deflationary transforms earlier and inflationary
  ones later within barrier-delimited sections.
* :func:`size_heuristic_classify` guesses slowness from input size.
"""

from __future__ import annotations

import logging
import random
import threading
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .core import Batch, ContractError, Get, Process, Put, Sample, TransformChain, apply_transform
from .queues import END, BoundedQueue, QueueClosed

log = logging.getLogger(__name__)

FAST = "fast"
SLOW = "slow"


# ---------------------------------------------------------------- autoorder

_CLASS_RANK = {"deflationary": 0, "neutral": 1, "inflationary": 2}


def autoorder(chain: TransformChain) -> TransformChain:
    """Stable reorder inside each section: shrinking steps first, growing last."""
    out = list(chain.transforms)
    for lo, hi in chain.sections():
        out[lo:hi] = sorted(out[lo:hi], key=lambda t: _CLASS_RANK[t.kind])
    return TransformChain(tuple(out))


def size_heuristic_classify(sample: Sample, size_cutoff: float) -> str:
    if not size_cutoff > 0:
        raise ContractError(f"size cutoff must be positive, got {size_cutoff}")
    return SLOW if sample.size_bytes > size_cutoff else FAST


# ---------------------------------------------------------------- sync loader


@dataclass
class SyncRecord:
    completions: dict = field(default_factory=dict)  # batch -> [member completion times]
    sealed: dict = field(default_factory=dict)  # batch -> time its last member finished
    published: dict = field(default_factory=dict)  # batch -> time it entered the batch queue


class SyncLoader:
    """Synchronous, order-preserving batch loader.

    Samples ``[k*B, (k+1)*B)`` form batch k. Workers take samples strictly in
    order, keeping at most ``prefetch_factor * n_workers`` batches' worth of
    samples in flight. Batch k is sealed when its last member finishes and
    is published only after batches ``0..k-1``.
    """

    def __init__(self, runtime, samples: Sequence[Sample], batch_size: int, n_workers: int,
                 prefetch_factor: int, batch_queue: BoundedQueue, rng: Optional[random.Random] = None,
                 name: str = "sync") -> None:
        if batch_size < 1 or n_workers < 1 or prefetch_factor < 1:
            raise ContractError("batch_size, n_workers and prefetch_factor must all be >= 1")
        self.runtime = runtime
        self.samples = list(samples)
        self._pos = {s.id: i for i, s in enumerate(self.samples)}
        if len(self._pos) != len(self.samples):
            raise ContractError("sample ids must be unique")
        self.batch_size = batch_size
        self.n_workers = n_workers
        self.prefetch_factor = prefetch_factor
        self.batch_queue = batch_queue
        self.rng = rng
        self.name = name
        self.n_batches = -(-len(self.samples) // batch_size)
        window = prefetch_factor * n_workers * batch_size
        n = max(1, len(self.samples))
        self._permits = BoundedQueue(max(1, window), role="internal", name=f"{name}.permits")
        self._done = BoundedQueue(n, role="internal", name=f"{name}.done")
        self._sealed = BoundedQueue(n, role="internal", name=f"{name}.sealed")
        self._issued = 0
        self._cursor = 0
        self._lock = threading.Lock()
        self.record = SyncRecord()
        self.batches: list = []
        self.busy_ms = 0

    def _grant(self, k: int) -> None:
        k = min(k, len(self.samples) - self._issued)
        for _ in range(k):
            ok = self._permits.try_put(1)
            assert ok
        self._issued += k

    def start(self) -> "SyncLoader":
        self._grant(self._permits.capacity)
        for w in range(self.n_workers):
            self.runtime.spawn(self._worker(w), f"{self.name}.w{w}")
        self.runtime.spawn(self._sealer(), f"{self.name}.sealer")
        self.runtime.spawn(self._publisher(), f"{self.name}.publisher")
        return self

    def _worker(self, w: int) -> Process:
        clock = self.runtime.clock
        while True:
            permit = yield Get(self._permits)
            if permit is END:
                return
            with self._lock:
                if self._cursor >= len(self.samples):
                    return
                sample = self.samples[self._cursor]
                self._cursor += 1
            t0 = clock.now()
            sample.t_enqueue = t0
            while not sample.done:
                yield from apply_transform(sample, sample.next_index, self.rng)
            sample.t_ready = clock.now()
            with self._lock:
                self.busy_ms += sample.t_ready - t0
            try:
                yield Put(self._done, sample)
            except QueueClosed:
                return

    def _sealer(self) -> Process:
        """Seal each batch the moment its last member arrives; never blocks on output."""
        clock = self.runtime.clock
        B = self.batch_size
        pending: dict = {}
        sealed = 0
        while sealed < self.n_batches:
            sample = yield Get(self._done)
            if sample is END:
                break
            k = self._pos[sample.id] // B
            pending.setdefault(k, []).append(sample)
            self.record.completions.setdefault(k, []).append(sample.t_ready)
            if len(pending[k]) == self._batch_len(k):
                members = sorted(pending.pop(k), key=lambda s: self._pos[s.id])
                self.record.sealed[k] = clock.now()
                yield Put(self._sealed, Batch(members, clock.now(), k))
                sealed += 1
        self._sealed.close()

    def _publisher(self) -> Process:
        clock = self.runtime.clock
        held: dict = {}
        nxt = 0
        while nxt < self.n_batches:
            batch = yield Get(self._sealed)
            if batch is END:
                break
            held[batch.seq] = batch
            while nxt in held:
                batch = held.pop(nxt)
                self.batches.append(batch)
                try:
                    yield Put(self.batch_queue, batch)
                except QueueClosed:
                    self._permits.close()
                    return
                self.record.published[nxt] = clock.now()
                self._grant(len(batch))
                nxt += 1
        self.batch_queue.close()
        self._permits.close()

    def _batch_len(self, k: int) -> int:
        return min(self.batch_size, len(self.samples) - k * self.batch_size)


def shard(samples: Sequence[Sample], rank: int, world: int) -> list[Sample]:
    """Round-robin partition of a stream across ``world`` consumers."""
    return list(samples[rank::world])
