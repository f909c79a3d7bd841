"""
Distribution map from multi-indices to logical workers.

The owner of an index is the sum of its k-bit blocks (counted from the least
significant bit, zero padded past the index width) modulo the worker count N,
optionally perturbed by a hash: owner = (blocks + (h(I) mod s)) mod N.

Flipping the bits of J changes only the blocks J touches, so the strings one
worker sends during a gate land on a handful of destinations. That is the
property the update exchange relies on, and `shifted_owners` computes targets
the same way, from the touched blocks alone.
"""
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation
from .pauli_algebra import WORD_BITS

logger = logging.getLogger(__name__)

HASH_ID = "splitmix64-chain/v1"
_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
MAX_BLOCK_BITS = 32


def default_block_size(worker_count):
    """ceil(log2 N), so that 2**k is close to N; at least one bit."""
    return max(1, math.ceil(math.log2(worker_count))) if worker_count > 1 else 1


@dataclass(frozen=True)
class PartitionSpec:
    """
    Immutable description of the distribution map.

    :param worker_count: number of logical workers N.
    :param block_size: block width k in bits; defaults to ceil(log2 N).
    :param perturbation: s; 1 is the plain block-sum map.
    """
    worker_count: int
    block_size: int = None
    perturbation: int = 1
    hash_id: str = field(default=HASH_ID)

    def __post_init__(self):
        if self.worker_count < 1:
            raise ContractViolation(f"worker count must be >= 1, got {self.worker_count}")
        if self.block_size is None:
            object.__setattr__(self, "block_size", default_block_size(self.worker_count))
        if not 1 <= self.block_size <= MAX_BLOCK_BITS:
            raise ContractViolation(f"block size must lie in 1..{MAX_BLOCK_BITS}, got {self.block_size}")
        if self.perturbation < 1:
            raise ContractViolation(f"perturbation s must be >= 1, got {self.perturbation}")
        if self.hash_id != HASH_ID:
            raise ContractViolation(f"unknown perturbation hash {self.hash_id!r}")

    def n_blocks(self, n_qubits):
        return -(-2 * n_qubits // self.block_size)


# Hash h: splitmix64 finaliser chained over the index words.

def _splitmix64(x):
    x = (x + _GOLDEN) & _MASK64
    x = ((x ^ (x >> 30)) * _MIX1) & _MASK64
    x = ((x ^ (x >> 27)) * _MIX2) & _MASK64
    return x ^ (x >> 31)


def index_hash(index):
    h = 0
    for word in index.words().tolist():
        h = _splitmix64(h ^ int(word))
    return h


def index_hashes(words):
    """Vectorised `index_hash` over (m, W) rows."""
    h = np.zeros(words.shape[0], dtype=np.uint64)
    with np.errstate(over="ignore"):
        for w in range(words.shape[1]):
            x = (h ^ words[:, w]) + np.uint64(_GOLDEN)
            x = (x ^ (x >> np.uint64(30))) * np.uint64(_MIX1)
            x = (x ^ (x >> np.uint64(27))) * np.uint64(_MIX2)
            h = x ^ (x >> np.uint64(31))
    return h


def block_sum(index, block_size):
    total, bits, mask = 0, index.bits, (1 << block_size) - 1
    while bits:
        total += bits & mask
        bits >>= block_size
    return total


def owner(spec, index):
    """Worker that holds `index`."""
    value = block_sum(index, spec.block_size)
    if spec.perturbation > 1:
        value += index_hash(index) % spec.perturbation
    return value % spec.worker_count


def _block_values(words, start, width):
    """Integer value of bits [start, start + width) for every row."""
    word, offset = divmod(start, WORD_BITS)
    value = words[:, word] >> np.uint64(offset)
    if offset + width > WORD_BITS and word + 1 < words.shape[1]:
        value = value | (words[:, word + 1] << np.uint64(WORD_BITS - offset))
    return value & np.uint64((1 << width) - 1)


def _perturbations(spec, words):
    return (index_hashes(words) % np.uint64(spec.perturbation)).astype(np.int64)


def owners(spec, words, n_qubits):
    """Vectorised `owner` for (m, W) rows."""
    k = spec.block_size
    total = np.zeros(words.shape[0], dtype=np.uint64)
    for block in range(spec.n_blocks(n_qubits)):
        total += _block_values(words, block * k, k)
    result = (total % np.uint64(spec.worker_count)).astype(np.int64)
    if spec.perturbation > 1:
        result = (result + _perturbations(spec, words)) % spec.worker_count
    return result


def _touched_blocks(spec, generator):
    k = spec.block_size
    positions = [p for p in range(2 * generator.n_qubits) if (generator.bits >> p) & 1]
    return sorted({p // k for p in positions})


def shifted_owners(spec, worker, words, generator):
    """
    Owners of rows XOR `generator`, for rows all owned by `worker`.

    Only the blocks the generator touches are re-read; the rest of the block
    sum is pinned by the fact that the source rows are owned by `worker`.
    """
    k = spec.block_size
    n_words = words.shape[1]
    flipped = words ^ generator.words()[:n_words]
    delta = np.zeros(words.shape[0], dtype=np.int64)
    for block in _touched_blocks(spec, generator):
        delta += _block_values(flipped, block * k, k).astype(np.int64)
        delta -= _block_values(words, block * k, k).astype(np.int64)
    base = np.full(words.shape[0], worker, dtype=np.int64)
    if spec.perturbation > 1:
        base += _perturbations(spec, flipped) - _perturbations(spec, words)
    return np.mod(base + delta, spec.worker_count)


def destination_set(spec, worker, generator):
    """
    Workers that strings owned by `worker` can reach under XOR with `generator`.

    Each set bit p of the generator moves the block sum by +2**(p mod k) or
    -2**(p mod k) depending on the source bit, so the reachable offsets are the
    signed sums over all patterns. Only defined as a sparse set for s = 1; the
    perturbed map may reach any worker.
    """
    if spec.perturbation > 1:
        return set(range(spec.worker_count))
    k, n = spec.block_size, spec.worker_count
    reachable = {worker % n}
    for p in range(2 * generator.n_qubits):
        if (generator.bits >> p) & 1:
            step = 1 << (p % k)
            reachable = {(r + sign * step) % n for r in reachable for sign in (1, -1)}
    return reachable


def uniformity_ratio(shard_sizes):
    """max/min of the per-worker term counts; inf when a worker is empty."""
    sizes = list(shard_sizes)
    if not sizes:
        raise ContractViolation("uniformity ratio needs at least one shard")
    smallest = min(sizes)
    if smallest <= 0:
        logger.warning("uniformity ratio undefined: %d of %d shards are empty",
                       sum(1 for s in sizes if s <= 0), len(sizes))
        return math.inf
    return max(sizes) / smallest
