"""
Dense references for small systems: state vectors and explicit conjugation.

Nothing here uses the bitwise phase rule of `pauli_algebra`; signs come from
literal 2x2 matrices (dense path) or from the action of X, Y and Z on basis
states (state-vector path). Basis state b holds qubit q in bit q of b.
"""
import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm

from .errors import ContractViolation
from .pauli_algebra import MultiIndex

logger = logging.getLogger(__name__)

MAX_DENSE_PAULI_QUBITS = 12
MAX_STATE_QUBITS = 26
MAX_CONJUGATION_QUBITS = 8

_LOCAL = (
    np.eye(2, dtype=complex),
    np.array([[0, 1], [1, 0]], dtype=complex),
    np.array([[0, -1j], [1j, 0]], dtype=complex),
    np.array([[1, 0], [0, -1]], dtype=complex),
)


def popcount_u64(arr):
    """Vectorized popcount for uint64 arrays."""
    x = arr.astype(np.uint64, copy=False)
    x = x - ((x >> np.uint64(1)) & np.uint64(0x5555555555555555))
    x = (x & np.uint64(0x3333333333333333)) + ((x >> np.uint64(2)) & np.uint64(0x3333333333333333))
    x = (x + (x >> np.uint64(4))) & np.uint64(0x0F0F0F0F0F0F0F0F)
    x = (x * np.uint64(0x0101010101010101)) >> np.uint64(56)
    return x


def _guard(n_qubits, limit, what):
    if n_qubits > limit:
        raise ContractViolation(f"{what} is limited to {limit} qubits, got {n_qubits}")


def _masks(index):
    """(flip mask, sign mask, number of Y sites) of a Pauli string in basis-state bits."""
    flip = sign = n_y = 0
    for site in range(index.n_qubits):
        code = index.code(site)
        if code in (1, 2):
            flip |= 1 << site
        if code in (2, 3):
            sign |= 1 << site
        n_y += code == 2
    return flip, sign, n_y


@dataclass
class DenseState:
    amplitudes: np.ndarray
    n_qubits: int

    @classmethod
    def zero(cls, n_qubits):
        """|0...0>."""
        _guard(n_qubits, MAX_STATE_QUBITS, "state vector")
        amplitudes = np.zeros(2**n_qubits, dtype=np.complex128)
        amplitudes[0] = 1.0
        return cls(amplitudes, n_qubits)

    def norm(self):
        return float(np.linalg.norm(self.amplitudes))

    def copy(self):
        return DenseState(self.amplitudes.copy(), self.n_qubits)


def dense_pauli(index):
    """2^n x 2^n matrix of a Pauli string; the leftmost Kronecker factor is the highest site."""
    _guard(index.n_qubits, MAX_DENSE_PAULI_QUBITS, "dense Pauli matrix")
    matrix = np.ones((1, 1), dtype=complex)
    for site in reversed(range(index.n_qubits)):
        matrix = np.kron(matrix, _LOCAL[index.code(site)])
    return matrix


def dense_operator(terms, n_qubits):
    """Sum of coefficient * dense_pauli over (MultiIndex, coefficient) pairs."""
    _guard(n_qubits, MAX_DENSE_PAULI_QUBITS, "dense operator")
    matrix = np.zeros((2**n_qubits, 2**n_qubits), dtype=complex)
    for index, coeff in terms:
        matrix += coeff * dense_pauli(index)
    return matrix


def apply_pauli(state, index):
    """sigma_I |psi> via P|b> = i^{n_y} (-1)^{|b & (y|z)|} |b xor x>."""
    flip, sign, n_y = _masks(index)
    basis = np.arange(state.amplitudes.size, dtype=np.uint64)
    parity = popcount_u64(basis & np.uint64(sign)) & np.uint64(1)
    phase = (1j**n_y) * (1.0 - 2.0 * parity.astype(np.float64))
    out = np.empty_like(state.amplitudes)
    out[(basis ^ np.uint64(flip)).astype(np.intp)] = phase * state.amplitudes
    return out


def evolve_state(state, circuit):
    """Apply exp(-i angle/2 sigma_J) for every gate in circuit order."""
    _guard(state.n_qubits, MAX_STATE_QUBITS, "state vector")
    if circuit.n_qubits != state.n_qubits:
        raise ContractViolation(f"circuit width {circuit.n_qubits} != state width {state.n_qubits}")
    psi = state.copy()
    for gate in circuit.gates():
        rotated = apply_pauli(psi, gate.generator)
        psi.amplitudes = np.cos(gate.angle / 2) * psi.amplitudes - 1j * np.sin(gate.angle / 2) * rotated
    return psi


def expectation(state, index):
    """<psi| sigma_I |psi>."""
    if index.n_qubits != state.n_qubits:
        raise ContractViolation(f"observable width {index.n_qubits} != state width {state.n_qubits}")
    value = np.vdot(state.amplitudes, apply_pauli(state, index))
    if abs(value.imag) > 1e-10:
        logger.warning("expectation of %s has imaginary part %.3e", index, value.imag)
    return float(value.real)


def brute_conjugate(operator, gate):
    """U^dagger O U with U = expm(-i angle/2 sigma_J), all dense."""
    n = gate.generator.n_qubits
    _guard(n, MAX_CONJUGATION_QUBITS, "dense conjugation")
    if operator.shape != (2**n, 2**n):
        raise ContractViolation(f"operator shape {operator.shape} does not match {n} qubits")
    unitary = expm(-0.5j * gate.angle * dense_pauli(gate.generator))
    return unitary.conj().T @ operator @ unitary


def heisenberg_dense(operator, circuit):
    """Conjugate through the whole circuit, last gate first."""
    for layer in reversed(circuit.layers):
        for gate in reversed(layer):
            operator = brute_conjugate(operator, gate)
    return operator


def pauli_coefficients(operator, n_qubits, tol=1e-14):
    """
    Expansion {bits: Tr(sigma_I O) / 2^n} of a dense Hermitian operator.

    Tr(sigma_I O) = sum_b phase_I(b) O[b, b xor x_I]; entries below `tol` are dropped.
    """
    _guard(n_qubits, MAX_CONJUGATION_QUBITS, "coefficient extraction")
    dim = 2**n_qubits
    basis = np.arange(dim, dtype=np.uint64)
    rows = basis.astype(np.intp)
    coefficients = {}
    for bits in range(4**n_qubits):
        index = MultiIndex(bits, n_qubits)
        flip, sign, n_y = _masks(index)
        parity = popcount_u64(basis & np.uint64(sign)) & np.uint64(1)
        phase = (1j**n_y) * (1.0 - 2.0 * parity.astype(np.float64))
        trace = np.sum(phase * operator[rows, (basis ^ np.uint64(flip)).astype(np.intp)])
        value = trace / dim
        if abs(value.imag) > 1e-9:
            raise ContractViolation(f"operator is not Hermitian: coefficient of {index} is {value}")
        if abs(value.real) > tol:
            coefficients[bits] = float(value.real)
    return coefficients
