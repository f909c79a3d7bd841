"""
Partial operator store O^(m): Pauli strings with real coefficients.

Entries live in two contiguous arrays, an (capacity, W) uint64 key matrix and a
float64 coefficient vector, filled up to `term_count()`. A full pass over the
store is a linear scan over both arrays, which is what the gate loop does twice
per gate. Point operations (get, upsert, scale) go through a dict from the raw
bytes of a key row to its slot. The dict is built on first point access, kept
current by single inserts and dropped by bulk appends and compaction. Bulk
updates go through `merge`, a sort-based upsert that is also told which slots
can possibly match.
"""
import logging
from dataclasses import dataclass
from enum import Enum

import numpy as np
import pandas as pd

from .errors import ContractViolation
from .pauli_algebra import MultiIndex, off_diagonal_mask, pack_indices, words_for

logger = logging.getLogger(__name__)

_MIN_CAPACITY = 16


class Cadence(str, Enum):
    GATE = "gate"
    LAYER = "layer"


@dataclass(frozen=True)
class TruncationPolicy:
    """
    Relative amplitude cut: drop |O_I| <= epsilon0 * max_I |O_I|.

    epsilon0 = 0 keeps everything except exact zeros.
    """
    epsilon0: float = 0.0
    cadence: Cadence = Cadence.GATE

    def __post_init__(self):
        if not np.isfinite(self.epsilon0) or not 0.0 <= self.epsilon0 < 1.0:
            raise ContractViolation(f"epsilon0 must lie in [0, 1), got {self.epsilon0}")
        object.__setattr__(self, "cadence", Cadence(self.cadence))

    def threshold(self, global_max):
        return self.epsilon0 * global_max


class SparseOperator:
    """Associative store MultiIndex -> coefficient for one worker."""

    def __init__(self, n_qubits, capacity=_MIN_CAPACITY):
        self.n_qubits = n_qubits
        self.n_words = words_for(n_qubits)
        capacity = max(capacity, _MIN_CAPACITY)
        self._keys = np.zeros((capacity, self.n_words), dtype=np.uint64)
        self._coeffs = np.zeros(capacity, dtype=np.float64)
        self._size = 0
        self._slots = None

    @classmethod
    def from_terms(cls, n_qubits, terms):
        """Build from (MultiIndex, coefficient) pairs; repeated indices are summed."""
        terms = list(terms)
        op = cls(n_qubits, capacity=len(terms))
        if terms:
            for index, _ in terms:
                if index.n_qubits != n_qubits:
                    raise ContractViolation(f"term width {index.n_qubits} != operator width {n_qubits}")
            keys = pack_indices([index for index, _ in terms], n_qubits)
            op.merge(keys, np.array([c for _, c in terms], dtype=np.float64))
        return op

    @classmethod
    def from_arrays(cls, n_qubits, keys, coeffs):
        op = cls(n_qubits, capacity=len(coeffs))
        op.merge(np.asarray(keys, dtype=np.uint64).reshape(-1, op.n_words),
                 np.asarray(coeffs, dtype=np.float64))
        return op

    # Views.

    @property
    def keys(self):
        return self._keys[: self._size]

    @property
    def coeffs(self):
        return self._coeffs[: self._size]

    def term_count(self):
        return self._size

    def __len__(self):
        return self._size

    def __iter__(self):
        return self.items()

    def items(self):
        for row in range(self._size):
            yield MultiIndex.from_words(self._keys[row], self.n_qubits), float(self._coeffs[row])

    def to_dict(self):
        return {index.bits: coeff for index, coeff in self.items()}

    def copy(self):
        clone = SparseOperator(self.n_qubits, capacity=self._size)
        clone._append(self.keys, self.coeffs)
        return clone

    # Point access.

    def _check_width(self, index):
        if index.n_qubits != self.n_qubits:
            raise ContractViolation(f"index width {index.n_qubits} != operator width {self.n_qubits}")

    def _slot_map(self):
        if self._slots is None:
            width = 8 * self.n_words
            raw = np.ascontiguousarray(self.keys).tobytes()
            self._slots = {raw[row * width : (row + 1) * width]: row for row in range(self._size)}
        return self._slots

    def find(self, index):
        """Slot of `index`, or -1."""
        self._check_width(index)
        if not self._size:
            return -1
        return self._slot_map().get(index.words().tobytes(), -1)

    def __contains__(self, index):
        return self.find(index) >= 0

    def get(self, index, default=0.0):
        slot = self.find(index)
        return float(self._coeffs[slot]) if slot >= 0 else default

    def upsert(self, index, delta):
        slot = self.find(index)
        if slot >= 0:
            self._coeffs[slot] += delta
        else:
            self._append(index.words()[None, :], np.array([delta], dtype=np.float64))
        return self

    def scale_in_place(self, index, factor):
        slot = self.find(index)
        if slot < 0:
            raise ContractViolation(f"cannot scale absent string {index}")
        self._coeffs[slot] *= factor
        return self

    # Bulk updates.

    def _reserve(self, extra):
        needed = self._size + extra
        capacity = self._coeffs.shape[0]
        if needed <= capacity:
            return
        capacity = max(needed, 2 * capacity)
        keys = np.zeros((capacity, self.n_words), dtype=np.uint64)
        coeffs = np.zeros(capacity, dtype=np.float64)
        keys[: self._size] = self.keys
        coeffs[: self._size] = self.coeffs
        self._keys, self._coeffs = keys, coeffs

    def _append(self, keys, coeffs):
        count = len(coeffs)
        if not count:
            return
        self._reserve(count)
        self._keys[self._size : self._size + count] = keys
        self._coeffs[self._size : self._size + count] = coeffs
        if self._slots is not None and count == 1:
            self._slots[self._keys[self._size].tobytes()] = self._size
        else:
            self._slots = None
        self._size += count

    def merge(self, keys, deltas, candidates=None):
        """
        Upsert many (index, delta) records at once.

        Records are accumulated in their given order, starting from the stored
        coefficient. `candidates` restricts the search for existing entries to
        the listed slots; the caller guarantees no other slot can match.

        :return: number of newly inserted strings.
        """
        if not len(deltas):
            return 0
        if candidates is None:
            candidates = np.arange(self._size)
        candidates = np.asarray(candidates, dtype=np.int64)

        all_keys = np.concatenate([self._keys[candidates], keys])
        values = np.concatenate([self._coeffs[candidates], deltas])
        slots = np.concatenate([candidates, np.full(len(deltas), -1, dtype=np.int64)])

        order = np.lexsort(all_keys.T[::-1])
        sorted_keys = all_keys[order]
        boundary = np.ones(len(order), dtype=bool)
        boundary[1:] = np.any(sorted_keys[1:] != sorted_keys[:-1], axis=1)
        starts = np.flatnonzero(boundary)

        sums = np.add.reduceat(values[order], starts)
        owners = np.maximum.reduceat(slots[order], starts)
        present = owners >= 0
        self._coeffs[owners[present]] = sums[present]
        self._append(sorted_keys[starts[~present]], sums[~present])
        return int(np.count_nonzero(~present))

    def compact(self, keep):
        """Retain only rows where `keep` is true, preserving order."""
        kept = int(np.count_nonzero(keep))
        if kept == self._size:
            return 0
        removed = self._size - kept
        self._keys[:kept] = self.keys[keep]
        self._coeffs[:kept] = self.coeffs[keep]
        self._size = kept
        self._slots = None
        return removed

    # Reductions.

    def local_max_abs(self):
        return float(np.max(np.abs(self.coeffs))) if self._size else 0.0

    def norm_squared(self):
        return float(np.dot(self.coeffs, self.coeffs))

    def has_nonfinite(self):
        return not bool(np.all(np.isfinite(self.coeffs)))

    def zero_state_expectation(self):
        if not self._size:
            return 0.0
        diagonal = ~off_diagonal_mask(self.keys)
        return float(np.sum(self.coeffs[diagonal]))

    def __repr__(self):
        return f"SparseOperator(n_qubits={self.n_qubits}, terms={self._size})"


def upsert(op, index, delta):
    return op.upsert(index, delta)


def scale_in_place(op, index, factor):
    return op.scale_in_place(index, factor)


def local_max_abs(op):
    return op.local_max_abs()


def truncate(op, global_max, policy):
    """
    Drop every coefficient with |O_I| <= epsilon0 * global_max.

    Exact zeros go regardless of epsilon0. Returns (op, removed_count).
    """
    if global_max < 0:
        raise ContractViolation(f"global max must be non-negative, got {global_max}")
    if not op.term_count():
        return op, 0
    threshold = policy.threshold(global_max)
    removed = op.compact(np.abs(op.coeffs) > threshold)
    logger.debug("truncate: removed=%d threshold=%.3e global_max=%.6e", removed, threshold, global_max)
    return op, removed


def expectation_zero_state(shards):
    """<0...0| O |0...0>: sum of coefficients over strings built from I and Z only."""
    if isinstance(shards, SparseOperator):
        shards = [shards]
    return float(sum(shard.zero_state_expectation() for shard in shards))


@dataclass
class DensityHistogram:
    """
    Log-binned density of x = O_I / global_max over |x| in [floor, 1].

    Counts below the lowest edge are kept in `underflow` so that the total
    always equals the term count at snapshot time.
    """
    edges: np.ndarray
    positive: np.ndarray
    negative: np.ndarray
    underflow_positive: int = 0
    underflow_negative: int = 0

    @property
    def total(self):
        return int(self.positive.sum() + self.negative.sum()
                   + self.underflow_positive + self.underflow_negative)

    def to_frame(self):
        """Rows bin_low, bin_high, sign, normalized_count (sums to 1)."""
        total = max(self.total, 1)
        rows = []
        for sign, counts, under in (("+", self.positive, self.underflow_positive),
                                    ("-", self.negative, self.underflow_negative)):
            if under:
                rows.append((0.0, float(self.edges[0]), sign, under / total))
            for low, high, count in zip(self.edges[:-1], self.edges[1:], counts):
                rows.append((float(low), float(high), sign, count / total))
        return pd.DataFrame(rows, columns=["bin_low", "bin_high", "sign", "normalized_count"])


def density_histogram(shards, global_max, bins=60, floor=None):
    """
    Histogram of rescaled coefficients across all shards.

    :param floor: lowest bin edge; callers pass epsilon0 when truncation is on.
    """
    if isinstance(shards, SparseOperator):
        shards = [shards]
    coeffs = np.concatenate([shard.coeffs for shard in shards]) if shards else np.zeros(0)
    if global_max <= 0:
        if coeffs.size:
            raise ContractViolation("density histogram needs a positive global max")
        global_max = 1.0
    if bins < 1:
        raise ContractViolation(f"histogram needs at least one bin, got {bins}")
    floor = floor if floor and floor > 0 else 1e-16
    edges = np.logspace(np.log10(floor), 0.0, bins + 1)
    x = coeffs / global_max
    magnitude = np.minimum(np.abs(x), 1.0)
    positive = x > 0
    below = magnitude < floor
    pos_counts, _ = np.histogram(magnitude[positive & ~below], bins=edges)
    neg_counts, _ = np.histogram(magnitude[~positive & ~below], bins=edges)
    return DensityHistogram(
        edges=edges,
        positive=pos_counts,
        negative=neg_counts,
        underflow_positive=int(np.count_nonzero(positive & below)),
        underflow_negative=int(np.count_nonzero(~positive & below)),
    )


def dump_operator(op, stream):
    """One line per term: lowercase hex index, space, coefficient (repr precision)."""
    for index, coeff in op.items():
        stream.write(f"{index.bits:x} {coeff!r}\n")


def load_operator(stream, n_qubits):
    terms = []
    for number, line in enumerate(stream, start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            hex_index, value = line.split()
            terms.append((MultiIndex(int(hex_index, 16), n_qubits), float(value)))
        except ValueError as exc:
            raise ContractViolation(f"bad operator dump line {number}: {line!r}") from exc
    return SparseOperator.from_terms(n_qubits, terms)
