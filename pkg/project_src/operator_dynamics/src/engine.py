"""
Gate loop of the partitioned Heisenberg-picture evolution.

Every gate runs in three phases separated by barriers:

1. generation: each worker scales the strings of its shard that anticommute
   with the generator and emits one record per such string, grouped into
   batches by destination worker;
2. exchange: batches travel through a `Transport` to their destinations;
3. apply: each worker merges its inbox, sorted by sender, into its shard.

Truncation follows at the configured cadence with the maximum reduced over all
shards. Workers are logical; with n_jobs > 1 the generation and apply phases of
different workers run on a joblib thread pool.
"""
import logging
import math
import queue
import time
from abc import ABC, abstractmethod
from contextlib import ExitStack
from dataclasses import asdict, dataclass, field
from typing import List, NamedTuple, Tuple

import numpy as np
import pandas as pd
import psutil
from joblib import Parallel, delayed
from tqdm import tqdm

from .errors import ContractViolation, DeliveryError, NumericalAbort, ResourceExhausted
from .partition import HASH_ID, owner, owners, shifted_owners, uniformity_ratio
from .pauli_algebra import MultiIndex, format_pauli_label, phase_exponents
from .sparse_operator import (
    Cadence,
    SparseOperator,
    TruncationPolicy,
    expectation_zero_state,
    truncate,
)

logger = logging.getLogger(__name__)

LEDGER_SCHEMA_VERSION = 1
CLIFFORD_TOLERANCE = 1e-12
_QUARTER_TURN = (
    (1.0, 0.0),
    (0.0, 1.0),
    (-1.0, 0.0),
    (0.0, -1.0),
)


@dataclass(frozen=True)
class Gate:
    """Rotation exp(-i angle/2 sigma_generator)."""
    generator: MultiIndex
    angle: float

    def __post_init__(self):
        if not math.isfinite(self.angle):
            raise ContractViolation(f"gate angle must be finite, got {self.angle}")

    def label(self):
        return f"{self.generator} {self.angle!r}"


@dataclass(frozen=True)
class Circuit:
    """Ordered layers of ordered gates in circuit time."""
    n_qubits: int
    layers: Tuple[Tuple[Gate, ...], ...]
    labels: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        layers = tuple(tuple(layer) for layer in self.layers)
        object.__setattr__(self, "layers", layers)
        for number, layer in enumerate(layers):
            for gate in layer:
                if gate.generator.n_qubits != self.n_qubits:
                    raise ContractViolation(
                        f"layer {number}: generator width {gate.generator.n_qubits} != {self.n_qubits}"
                    )

    @property
    def depth(self):
        return len(self.layers)

    def gate_count(self):
        return sum(len(layer) for layer in self.layers)

    def gates(self):
        """All gates in circuit order."""
        for layer in self.layers:
            yield from layer


@dataclass
class UpdateBatch:
    """Records (index, increment) produced by `sender` for `destination` during one gate."""
    sender: int
    destination: int
    keys: np.ndarray
    deltas: np.ndarray

    def __len__(self):
        return len(self.deltas)

    def records(self, n_qubits):
        for row in range(len(self.deltas)):
            yield MultiIndex.from_words(self.keys[row], n_qubits), float(self.deltas[row])


class LocalGateResult(NamedTuple):
    shard: SparseOperator
    batches: List[UpdateBatch]
    # slots scaled by the gate; received targets can only match these
    anticommuting: np.ndarray


def rotation_factors(angle):
    """(cos, sin) of the angle, exact at multiples of pi/2."""
    quarters = angle / (math.pi / 2)
    nearest = round(quarters)
    if abs(quarters - nearest) * (math.pi / 2) <= CLIFFORD_TOLERANCE:
        return _QUARTER_TURN[nearest % 4]
    return math.cos(angle), math.sin(angle)


def apply_gate_local(shard, gate, spec, worker=0):
    """
    Generation phase for one worker.

    Strings with odd B(I, J) are scaled by cos(angle) in place and each yields
    a record (I xor J, +-sin(angle) * O_I) with O_I taken before scaling; the
    sign is + for B = 1 and - for B = 3. Even strings are untouched.
    """
    empty = np.zeros(0, dtype=np.int64)
    if not shard.term_count():
        return LocalGateResult(shard, [], empty)

    generator = gate.generator
    phases = phase_exponents(shard.keys, generator)
    odd = np.flatnonzero(phases & 1)
    if not odd.size:
        return LocalGateResult(shard, [], empty)

    cos_t, sin_t = rotation_factors(gate.angle)
    before = shard.coeffs[odd].copy()
    shard.coeffs[odd] *= cos_t
    if sin_t == 0.0:
        return LocalGateResult(shard, [], odd)

    sources = shard.keys[odd]
    targets = sources ^ generator.words()
    deltas = np.where(phases[odd] == 1, sin_t, -sin_t) * before
    destinations = shifted_owners(spec, worker, sources, generator)

    order = np.argsort(destinations, kind="stable")
    destinations = destinations[order]
    cuts = np.flatnonzero(np.diff(destinations)) + 1
    batches = []
    for chunk in np.split(np.arange(order.size), cuts):
        rows = order[chunk]
        batches.append(UpdateBatch(worker, int(destinations[chunk[0]]), targets[rows], deltas[rows]))
    return LocalGateResult(shard, batches, odd)


class Transport(ABC):
    """All-to-all delivery of update batches between logical workers."""

    def __init__(self, worker_count):
        self.worker_count = worker_count

    @abstractmethod
    def send(self, batch):
        ...

    @abstractmethod
    def receive(self, worker):
        """Every batch delivered to `worker` since the last call."""


class QueueTransport(Transport):
    """In-process transport: one thread-safe queue per destination."""

    def __init__(self, worker_count):
        super().__init__(worker_count)
        self._inboxes = [queue.SimpleQueue() for _ in range(worker_count)]

    def send(self, batch):
        if not 0 <= batch.destination < self.worker_count:
            raise DeliveryError(f"no worker {batch.destination} (sender {batch.sender})")
        self._inboxes[batch.destination].put(batch)

    def receive(self, worker):
        inbox = []
        source = self._inboxes[worker]
        while True:
            try:
                inbox.append(source.get_nowait())
            except queue.Empty:
                return inbox


def exchange(batches, transport):
    """
    Deliver every nonempty batch exactly once.

    :param batches: per-worker lists of batches from the generation phase.
    :return: per-worker inboxes sorted by sender id.
    """
    for outgoing in batches:
        for batch in outgoing:
            if len(batch):
                transport.send(batch)
    inboxes = []
    for worker in range(transport.worker_count):
        inbox = transport.receive(worker)
        inbox.sort(key=lambda batch: batch.sender)
        inboxes.append(inbox)
    return inboxes


def apply_updates(shard, inbox, spec=None, worker=None, candidates=None):
    """
    Merge received batches into the shard in sender order.

    When `spec` and `worker` are given every record's owner is checked first.
    `candidates` narrows the search for existing entries (see LocalGateResult).
    """
    inbox = [batch for batch in inbox if len(batch)]
    if not inbox:
        return shard
    keys = np.concatenate([batch.keys for batch in inbox])
    deltas = np.concatenate([batch.deltas for batch in inbox])
    if spec is not None and worker is not None and spec.worker_count > 1:
        misplaced = owners(spec, keys, shard.n_qubits) != worker
        if misplaced.any():
            row = int(np.flatnonzero(misplaced)[0])
            stray = MultiIndex.from_words(keys[row], shard.n_qubits)
            raise ContractViolation(
                f"worker {worker} received {stray} owned by {owner(spec, stray)}"
            )
    shard.merge(keys, deltas, candidates=candidates)
    return shard


@dataclass
class GateStats:
    records_sent: int = 0
    batches_sent: int = 0
    max_destinations: int = 0
    removed: int = 0
    global_max: float = float("nan")
    compute_s: float = 0.0
    exchange_s: float = 0.0


@dataclass
class LedgerRecord:
    t: int
    observable: float
    term_count: int
    global_max: float
    removed: int
    wall_ms_per_gate: float
    batches_sent: int
    records_sent: int
    compute_ms_per_gate: float
    exchange_ms_per_gate: float
    max_destinations: int
    uniformity_ratio: float
    tracked: dict = field(default_factory=dict)

    def as_row(self):
        row = asdict(self)
        row.update({f"coeff[{label}]": value for label, value in row.pop("tracked").items()})
        return row


class RunLedger:
    """Per-layer records of a run, one per consumed layer."""

    def __init__(self, tracked_labels=()):
        self.tracked_labels = list(tracked_labels)
        self.records = []

    def append(self, record):
        if record.t != len(self.records) + 1:
            raise ContractViolation(f"ledger expects layer {len(self.records) + 1}, got {record.t}")
        self.records.append(record)

    def __len__(self):
        return len(self.records)

    def __getitem__(self, item):
        return self.records[item]

    def column(self, name):
        return [getattr(record, name) for record in self.records]

    def to_frame(self):
        return pd.DataFrame([record.as_row() for record in self.records])


class Engine:
    """
    Logical workers holding the shards of one evolving operator.

    :param spec: PartitionSpec deciding shard ownership.
    :param policy: TruncationPolicy applied at its cadence.
    :param n_jobs: thread count for the per-worker phases; 1 runs round-robin.
    :param verify_ownership: check the owner of every received record.
    :param min_free_memory_mb: abort before a layer when less memory is available.
    """

    def __init__(self, n_qubits, spec, policy=None, n_jobs=1, transport=None,
                 verify_ownership=True, min_free_memory_mb=0):
        self.n_qubits = n_qubits
        self.spec = spec
        self.policy = policy or TruncationPolicy()
        self.n_jobs = n_jobs
        self.transport = transport or QueueTransport(spec.worker_count)
        self.verify_ownership = verify_ownership
        self.min_free_memory_mb = min_free_memory_mb
        self.shards = [SparseOperator(n_qubits) for _ in range(spec.worker_count)]
        self._pool = None
        self.layer = None
        self.gate_index = None

    # Setup and readout.

    def distribute(self, initial):
        """Scatter an operator (SparseOperator or (index, coeff) pairs) to the owners."""
        if not isinstance(initial, SparseOperator):
            initial = SparseOperator.from_terms(self.n_qubits, initial)
        if initial.n_qubits != self.n_qubits:
            raise ContractViolation(f"operator width {initial.n_qubits} != engine width {self.n_qubits}")
        target = owners(self.spec, initial.keys, self.n_qubits)
        self.shards = [
            SparseOperator.from_arrays(self.n_qubits, initial.keys[target == m], initial.coeffs[target == m])
            for m in range(self.spec.worker_count)
        ]
        return self.shards

    def term_count(self):
        return sum(shard.term_count() for shard in self.shards)

    def shard_sizes(self):
        return [shard.term_count() for shard in self.shards]

    def coefficient(self, index):
        """Coefficient of one Pauli string, read from its owner."""
        return self.shards[owner(self.spec, index)].get(index)

    def zero_state_expectation(self):
        return expectation_zero_state(self.shards)

    def global_max(self):
        return max(self._map(lambda shard: shard.local_max_abs(), self.shards), default=0.0)

    def norm_squared(self):
        return sum(shard.norm_squared() for shard in self.shards)

    def operator(self):
        """Merged copy of all shards as {bits: coefficient}."""
        merged = {}
        for shard in self.shards:
            merged.update(shard.to_dict())
        return merged

    # Phases.

    def _map(self, fn, items):
        items = list(items)
        if self._pool is None:
            return [fn(item) for item in items]
        return self._pool(delayed(fn)(item) for item in items)

    def _check_finite(self):
        bad = [m for m, shard in enumerate(self.shards) if shard.has_nonfinite()]
        if bad:
            raise NumericalAbort(
                f"non-finite coefficient on workers {bad}",
                layer=self.layer, gate=self.gate_index, term_count=self.term_count(),
            )

    def truncate(self):
        """Reduce the global max, drop small terms on every shard; returns (removed, global_max)."""
        self._check_finite()
        global_max = self.global_max()
        removed = self._map(lambda shard: truncate(shard, global_max, self.policy)[1], self.shards)
        total = int(sum(removed))
        logger.debug("truncation: removed_count=%d global_max=%.6e", total, global_max)
        return total, global_max

    def apply_gate(self, gate):
        """Generation, exchange and apply for one gate across all workers."""
        stats = GateStats()
        started = time.perf_counter()
        results = self._map(
            lambda m: apply_gate_local(self.shards[m], gate, self.spec, worker=m),
            range(self.spec.worker_count),
        )
        generated = time.perf_counter()

        outgoing = [result.batches for result in results]
        for batches in outgoing:
            stats.batches_sent += len(batches)
            stats.records_sent += sum(len(batch) for batch in batches)
            stats.max_destinations = max(stats.max_destinations, len(batches))
        inboxes = exchange(outgoing, self.transport)
        delivered = sum(len(batch) for inbox in inboxes for batch in inbox)
        if delivered != stats.records_sent:
            raise DeliveryError(f"sent {stats.records_sent} records, delivered {delivered}")
        exchanged = time.perf_counter()

        def apply(m):
            return apply_updates(
                self.shards[m], inboxes[m],
                spec=self.spec if self.verify_ownership else None, worker=m,
                candidates=results[m].anticommuting,
            )

        self._map(apply, range(self.spec.worker_count))
        applied = time.perf_counter()

        if self.policy.cadence is Cadence.GATE:
            stats.removed, stats.global_max = self.truncate()
        stats.compute_s = (generated - started) + (time.perf_counter() - exchanged)
        stats.exchange_s = exchanged - generated
        logger.debug("gate %s: records=%d batches=%d apply_ms=%.3f",
                     gate.generator, stats.records_sent, stats.batches_sent, 1e3 * (applied - exchanged))
        return stats

    def _check_memory(self):
        if self.min_free_memory_mb <= 0:
            return
        available_mb = psutil.virtual_memory().available / 2**20
        if available_mb < self.min_free_memory_mb:
            raise ResourceExhausted(
                f"only {available_mb:.0f} MiB free, need {self.min_free_memory_mb} MiB",
                layer=self.layer, gate=self.gate_index, term_count=self.term_count(),
            )

    def run(self, circuit, readout="zero-state", observable=None, track=(),
            per_gate_readout=False, on_layer=None, progress=False):
        """
        Consume the circuit backwards (last layer first, last gate first).

        Row t of the ledger describes the operator after t consumed layers.

        :param readout: "zero-state" for <0|O|0>, "coefficient" for the
            coefficient of `observable`.
        :param track: indices whose coefficients get their own ledger column.
        :param on_layer: callback(engine, record) after every ledger append.
        """
        if circuit.n_qubits != self.n_qubits:
            raise ContractViolation(f"circuit width {circuit.n_qubits} != engine width {self.n_qubits}")
        if not circuit.depth:
            raise ContractViolation("circuit has no layers")
        if readout not in ("zero-state", "coefficient"):
            raise ContractViolation(f"unknown readout {readout!r}")
        if readout == "coefficient" and observable is None:
            raise ContractViolation("coefficient readout needs an observable string")
        track = list(track)
        ledger = RunLedger(format_pauli_label(index, sparse=True) for index in track)

        def read():
            if readout == "coefficient":
                return self.coefficient(observable)
            return self.zero_state_expectation()

        layers = list(reversed(circuit.layers))
        with ExitStack() as stack:
            if self.n_jobs != 1:
                self._pool = stack.enter_context(Parallel(n_jobs=self.n_jobs, backend="threading"))
                stack.callback(setattr, self, "_pool", None)
            for t, layer in enumerate(tqdm(layers, desc="layers", unit="layer", disable=not progress), start=1):
                self.layer, self.gate_index = t, None
                self._check_memory()
                totals = GateStats(global_max=0.0)
                started = time.perf_counter()
                for g, gate in enumerate(reversed(layer)):
                    self.gate_index = g
                    stats = self._apply_guarded(gate)
                    totals.records_sent += stats.records_sent
                    totals.batches_sent += stats.batches_sent
                    totals.max_destinations = max(totals.max_destinations, stats.max_destinations)
                    totals.removed += stats.removed
                    totals.compute_s += stats.compute_s
                    totals.exchange_s += stats.exchange_s
                    if per_gate_readout:
                        logger.info("t=%d gate=%d readout=%.14f terms=%d", t, g, read(), self.term_count())
                self.gate_index = None
                if self.policy.cadence is Cadence.LAYER:
                    totals.removed, _ = self.truncate()
                else:
                    self._check_finite()
                elapsed = time.perf_counter() - started
                gates = max(len(layer), 1)

                record = LedgerRecord(
                    t=t,
                    observable=read(),
                    term_count=self.term_count(),
                    global_max=self.global_max(),
                    removed=totals.removed,
                    wall_ms_per_gate=1e3 * elapsed / gates,
                    batches_sent=totals.batches_sent,
                    records_sent=totals.records_sent,
                    compute_ms_per_gate=1e3 * totals.compute_s / gates,
                    exchange_ms_per_gate=1e3 * totals.exchange_s / gates,
                    max_destinations=totals.max_destinations,
                    uniformity_ratio=uniformity_ratio(self.shard_sizes()),
                    tracked={label: self.coefficient(index) for label, index in zip(ledger.tracked_labels, track)},
                )
                ledger.append(record)
                logger.info("t=%d observable=%.14f |O|=%d removed=%d ms/gate=%.3f",
                            t, record.observable, record.term_count, record.removed, record.wall_ms_per_gate)
                if on_layer is not None:
                    on_layer(self, record)
        return ledger

    def _apply_guarded(self, gate):
        try:
            return self.apply_gate(gate)
        except MemoryError as exc:
            raise ResourceExhausted(
                "out of memory while applying gate",
                layer=self.layer, gate=self.gate_index, term_count=self.term_count(),
            ) from exc


def run_circuit(initial, circuit, spec, policy=None, readout="zero-state", observable=None,
                track=(), n_jobs=1, **engine_options):
    """
    Distribute `initial`, evolve it through `circuit` and return (ledger, engine).

    `initial` is a SparseOperator or an iterable of (MultiIndex, coefficient).
    """
    engine = Engine(circuit.n_qubits, spec, policy, n_jobs=n_jobs,
                    verify_ownership=engine_options.pop("verify_ownership", True),
                    min_free_memory_mb=engine_options.pop("min_free_memory_mb", 0),
                    transport=engine_options.pop("transport", None))
    engine.distribute(initial)
    logger.info("run: n=%d layers=%d gates=%d workers=%d k=%d s=%d hash=%s epsilon0=%g cadence=%s",
                circuit.n_qubits, circuit.depth, circuit.gate_count(), spec.worker_count,
                spec.block_size, spec.perturbation, HASH_ID, engine.policy.epsilon0,
                engine.policy.cadence.value)
    ledger = engine.run(circuit, readout=readout, observable=observable, track=track, **engine_options)
    return ledger, engine
