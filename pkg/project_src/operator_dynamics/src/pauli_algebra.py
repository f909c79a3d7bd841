"""
Bit-level Pauli strings.

A Pauli string on n qubits is a 2n-bit multi-index. Site i occupies the bit
pair (2i, 2i+1) counted from the least significant end, with the local codes
00 = identity, 01 = X, 10 = Y, 11 = Z. The product of two strings is the XOR of
their indices times i**B, where B is a sum of su(2) structure constants over
the sites, so no matrix is ever formed.

The scalar functions below work on Python integers and are the reference
implementation. The array functions at the bottom operate on many indices
packed as rows of little-endian uint64 words and are checked against the
scalar path in the tests.
"""
import re
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation

WORD_BITS = 64
PAULI_CHARS = "IXYZ"
_CHAR_TO_CODE = {c: i for i, c in enumerate(PAULI_CHARS)}
_SPARSE_TOKEN = re.compile(r"^([IXYZ])(\d+)$")

# b(a, c) = sum_k eps_{a c k} for non-identity a != c, else 0.
_PHASE_TABLE = np.array(
    [
        [0, 0, 0, 0],
        [0, 0, 1, -1],
        [0, -1, 0, 1],
        [0, 1, -1, 0],
    ],
    dtype=np.int64,
)


def words_for(n_qubits):
    """Number of uint64 words needed to hold a 2n-bit index."""
    return max(1, -(-2 * n_qubits // WORD_BITS))


@dataclass(frozen=True, order=True)
class MultiIndex:
    """
    Immutable 2n-bit encoding of an n-qubit Pauli string.

    :param bits: the multi-index as a non-negative integer.
    :param n_qubits: the string width n; two indices combine only at equal n.
    """
    bits: int
    n_qubits: int

    def __post_init__(self):
        if self.n_qubits < 1:
            raise ContractViolation(f"qubit count must be positive, got {self.n_qubits}")
        if not 0 <= self.bits < (1 << (2 * self.n_qubits)):
            raise ContractViolation(f"index {self.bits:#x} does not fit in {self.n_qubits} qubits")

    @classmethod
    def identity(cls, n_qubits):
        return cls(0, n_qubits)

    @classmethod
    def from_sites(cls, n_qubits, sites):
        """Build an index from a mapping site -> Pauli letter."""
        bits = 0
        for site, char in sites.items():
            if not 0 <= site < n_qubits:
                raise ContractViolation(f"site {site} out of range for {n_qubits} qubits")
            bits |= _CHAR_TO_CODE[char.upper()] << (2 * site)
        return cls(bits, n_qubits)

    @classmethod
    def from_words(cls, words, n_qubits):
        bits = 0
        for position, word in enumerate(np.asarray(words, dtype=np.uint64).tolist()):
            bits |= int(word) << (WORD_BITS * position)
        return cls(bits, n_qubits)

    def code(self, site):
        return (self.bits >> (2 * site)) & 3

    def support(self):
        """Sites carrying a non-identity Pauli operator, ascending."""
        return tuple(site for site in range(self.n_qubits) if self.code(site))

    def words(self):
        n_words = words_for(self.n_qubits)
        mask = (1 << WORD_BITS) - 1
        return np.array(
            [(self.bits >> (WORD_BITS * w)) & mask for w in range(n_words)], dtype=np.uint64
        )

    def __str__(self):
        return format_pauli_label(self, sparse=True)


@dataclass(frozen=True)
class PhaseExponent:
    """Exponent of i in a Pauli product, kept modulo 4."""
    value: int

    def __post_init__(self):
        if self.value not in (0, 1, 2, 3):
            raise ContractViolation(f"phase exponent must lie in 0..3, got {self.value}")

    @property
    def commutes(self):
        return self.value % 2 == 0

    @property
    def factor(self):
        return 1j ** self.value


def _check_widths(I, J):
    if I.n_qubits != J.n_qubits:
        raise ContractViolation(f"width mismatch: {I.n_qubits} vs {J.n_qubits} qubits")


def local_phase(a, b):
    """Levi-Civita contribution of one site, in {-1, 0, 1}."""
    return int(_PHASE_TABLE[a & 3, b & 3])


def phase_exponent(I, J):
    """B(I, J) modulo 4; even exactly when the two strings commute."""
    _check_widths(I, J)
    total = sum(local_phase(I.code(site), J.code(site)) for site in range(I.n_qubits))
    return PhaseExponent(total % 4)


def commutes(I, J):
    return phase_exponent(I, J).commutes


def string_product(I, J):
    """sigma_I sigma_J = i**B sigma_(I xor J); returns (I xor J, B)."""
    _check_widths(I, J)
    return MultiIndex(I.bits ^ J.bits, I.n_qubits), phase_exponent(I, J)


def _site_mask(n_qubits):
    return int("01" * n_qubits, 2)


def pauli_weight(J):
    """Number of non-identity sites."""
    occupied = (J.bits | (J.bits >> 1)) & _site_mask(J.n_qubits)
    return bin(occupied).count("1")


def parse_pauli_label(text, n_qubits):
    """
    Parse a Pauli label into a MultiIndex.

    Two forms are accepted. A dense label is exactly n characters over IXYZ,
    leftmost character = highest site. A sparse label lists non-identity sites
    as letter+site tokens separated by whitespace or commas, e.g. "Z62" or
    "Z13 Z14". A lone "I" is the identity at any width.
    """
    label = text.strip().upper()
    if label == "I" or label == "":
        return MultiIndex.identity(n_qubits)

    if any(ch.isdigit() for ch in label):
        sites = {}
        for token in re.split(r"[\s,]+", label):
            match = _SPARSE_TOKEN.match(token)
            if not match:
                raise ContractViolation(f"invalid Pauli token {token!r} in {text!r}")
            char, site = match.group(1), int(match.group(2))
            if site >= n_qubits:
                raise ContractViolation(f"site {site} out of range for {n_qubits} qubits")
            if site in sites:
                raise ContractViolation(f"duplicate site {site} in {text!r}")
            sites[site] = char
        return MultiIndex.from_sites(n_qubits, sites)

    if len(label) != n_qubits:
        raise ContractViolation(f"dense label {text!r} must have {n_qubits} characters")
    bits = 0
    for position, char in enumerate(label):
        if char not in _CHAR_TO_CODE:
            raise ContractViolation(f"invalid Pauli character {char!r} in {text!r}")
        site = n_qubits - 1 - position
        bits |= _CHAR_TO_CODE[char] << (2 * site)
    return MultiIndex(bits, n_qubits)


def format_pauli_label(I, sparse=False):
    if sparse:
        tokens = [f"{PAULI_CHARS[I.code(site)]}{site}" for site in I.support()]
        return " ".join(tokens) if tokens else "I"
    return "".join(PAULI_CHARS[I.code(site)] for site in reversed(range(I.n_qubits)))


# Array path: indices packed as (m, W) uint64 rows.

def pack_indices(indices, n_qubits):
    """Stack MultiIndexes (or raw integers) into an (m, W) uint64 array."""
    n_words = words_for(n_qubits)
    out = np.zeros((len(indices), n_words), dtype=np.uint64)
    mask = (1 << WORD_BITS) - 1
    for row, index in enumerate(indices):
        bits = index.bits if isinstance(index, MultiIndex) else int(index)
        for w in range(n_words):
            out[row, w] = (bits >> (WORD_BITS * w)) & mask
    return out


def site_codes(words, site):
    """2-bit code at `site` for every row."""
    position = 2 * site
    column = words[:, position // WORD_BITS]
    return (column >> np.uint64(position % WORD_BITS)) & np.uint64(3)


def phase_exponents(words, J):
    """B(I, J) mod 4 for every row I; only the sites in J's support contribute."""
    acc = np.zeros(words.shape[0], dtype=np.int64)
    for site in J.support():
        column = _PHASE_TABLE[:, J.code(site)]
        acc += column[site_codes(words, site).astype(np.intp)]
    return np.mod(acc, 4).astype(np.int8)


def off_diagonal_mask(words):
    """True for rows with at least one X or Y site (zero expectation in |0...0>)."""
    low_bits = np.uint64(0x5555555555555555)
    mixed = (words ^ (words >> np.uint64(1))) & low_bits
    return np.any(mixed != 0, axis=1)
