import math

import numpy as np
import pytest

from project_src.operator_dynamics.src.engine import (
    Circuit,
    Engine,
    Gate,
    QueueTransport,
    UpdateBatch,
    apply_gate_local,
    apply_updates,
    exchange,
    rotation_factors,
    run_circuit,
)
from project_src.operator_dynamics.src.errors import (
    ContractViolation,
    DeliveryError,
    NumericalAbort,
    ResourceExhausted,
)
from project_src.operator_dynamics.src.models import build_kicked_ising, heavy_hex_eagle127
from project_src.operator_dynamics.src.partition import PartitionSpec, destination_set, owners
from project_src.operator_dynamics.src.pauli_algebra import MultiIndex, pack_indices, parse_pauli_label, pauli_weight
from project_src.operator_dynamics.src.sparse_operator import SparseOperator, TruncationPolicy

ONE_WORKER = PartitionSpec(1)


def label(text, n=1):
    return parse_pauli_label(text, n)


def random_circuit(rng, n, depth, max_gates=4, max_weight=3):
    layers = []
    for _ in range(depth):
        gates = []
        for _ in range(int(rng.integers(1, max_gates + 1))):
            sites = rng.choice(n, size=int(rng.integers(1, min(max_weight, n) + 1)), replace=False)
            generator = MultiIndex.from_sites(n, {int(s): "XYZ"[int(rng.integers(0, 3))] for s in sites})
            gates.append(Gate(generator, float(rng.uniform(-math.pi, math.pi))))
        layers.append(tuple(gates))
    return Circuit(n_qubits=n, layers=tuple(layers))


def test_rotation_factors_snap_at_quarter_turns():
    assert rotation_factors(math.pi / 2) == (0.0, 1.0)
    assert rotation_factors(-math.pi / 2) == (0.0, -1.0)
    assert rotation_factors(math.pi) == (-1.0, 0.0)
    assert rotation_factors(0.0) == (1.0, 0.0)
    assert rotation_factors(0.3) == (math.cos(0.3), math.sin(0.3))


def test_gate_on_x_by_z_rotation():
    theta = 0.3
    shard = SparseOperator.from_terms(1, [(label("X0"), 1.0)])
    shard, batches, _ = apply_gate_local(shard, Gate(label("Z0"), theta), ONE_WORKER)
    assert shard.get(label("X0")) == pytest.approx(math.cos(theta))
    assert len(batches) == 1
    (target, delta), = list(batches[0].records(1))
    assert target == label("Y0")
    assert delta == pytest.approx(-math.sin(theta))


def test_gate_on_y_by_z_rotation_has_positive_sign():
    theta = 0.7
    shard = SparseOperator.from_terms(1, [(label("Y0"), 1.0)])
    _, batches, _ = apply_gate_local(shard, Gate(label("Z0"), theta), ONE_WORKER)
    (target, delta), = list(batches[0].records(1))
    assert target == label("X0") and delta == pytest.approx(math.sin(theta))


def test_commuting_generator_leaves_shard_alone():
    n = 3
    terms = [(label("Z0 Z2", n), 0.4), (label("Z1", n), -0.1)]
    shard = SparseOperator.from_terms(n, terms)
    shard, batches, scaled = apply_gate_local(shard, Gate(label("Z1", n), 0.9), ONE_WORKER)
    assert batches == [] and scaled.size == 0
    assert shard.to_dict() == {index.bits: coeff for index, coeff in terms}


def test_clifford_rotation_maps_one_string_to_one():
    shard = SparseOperator.from_terms(1, [(label("X0"), 1.0)])
    shard, batches, _ = apply_gate_local(shard, Gate(label("Z0"), math.pi / 2), ONE_WORKER)
    assert shard.get(label("X0")) == 0.0
    (target, delta), = list(batches[0].records(1))
    assert target == label("Y0") and delta == -1.0


def _batch(sender, destination, bits, deltas, n=2):
    return UpdateBatch(sender, destination, pack_indices(bits, n), np.asarray(deltas, dtype=float))


def test_exchange_single_worker_self_batch():
    batch = _batch(0, 0, [5], [0.25])
    inboxes = exchange([[batch]], QueueTransport(1))
    assert inboxes == [[batch]]


def test_exchange_empty_batches_are_not_sent():
    empty = _batch(0, 1, [], [])
    inboxes = exchange([[empty], []], QueueTransport(2))
    assert inboxes == [[], []]


def test_exchange_swaps_and_sorts_by_sender():
    transport = QueueTransport(3)
    inboxes = exchange(
        [[_batch(0, 1, [1], [1.0])], [_batch(1, 0, [2], [2.0])], [_batch(2, 1, [3], [3.0])]],
        transport,
    )
    assert [len(inbox) for inbox in inboxes] == [1, 2, 0]
    assert [batch.sender for batch in inboxes[1]] == [0, 2]


def test_transport_rejects_unknown_destination():
    with pytest.raises(DeliveryError):
        QueueTransport(2).send(_batch(0, 5, [1], [1.0]))


def test_apply_updates_examples():
    n = 2
    index = MultiIndex(6, n)
    shard = SparseOperator.from_terms(n, [(index, 0.5)])
    apply_updates(shard, [_batch(0, 0, [6], [0.125]), _batch(1, 0, [6], [-0.125])])
    assert shard.get(index) == 0.5
    apply_updates(shard, [_batch(0, 0, [9], [0.75])])
    assert shard.get(MultiIndex(9, n)) == 0.75
    before = shard.to_dict()
    apply_updates(shard, [])
    assert shard.to_dict() == before


def test_apply_updates_checks_ownership():
    n = 4
    spec = PartitionSpec(4, block_size=2)
    stray = MultiIndex(0b11001100, n)  # owned by worker 2
    with pytest.raises(ContractViolation):
        apply_updates(SparseOperator(n), [_batch(0, 1, [stray.bits], [1.0], n=n)], spec=spec, worker=1)


def _merged(engine):
    return engine.operator()


def assert_same_operator(actual, expected, atol=1e-12):
    # summation order differs between partitions, so cancellations may leave rounding residue
    for bits in set(actual) | set(expected):
        assert actual.get(bits, 0.0) == pytest.approx(expected.get(bits, 0.0), abs=atol)


def test_worker_count_independence():
    rng = np.random.default_rng(12)
    n = 6
    circuit = random_circuit(rng, n, depth=5)
    initial = [(label("Z0 X3", n), 1.0), (label("Y5", n), -0.5)]
    results = []
    for spec in (PartitionSpec(1), PartitionSpec(2), PartitionSpec(8), PartitionSpec(8, perturbation=3)):
        ledger, engine = run_circuit(initial, circuit, spec, TruncationPolicy(0.0))
        results.append((ledger.column("observable"), _merged(engine)))
    reference_readout, reference = results[0]
    for readout, merged in results[1:]:
        np.testing.assert_allclose(readout, reference_readout, atol=1e-12)
        assert_same_operator(merged, reference)


def test_threaded_workers_match_round_robin():
    rng = np.random.default_rng(4)
    n = 7
    circuit = random_circuit(rng, n, depth=4)
    initial = [(label("Z3", n), 1.0)]
    _, serial = run_circuit(initial, circuit, PartitionSpec(4), TruncationPolicy(1e-6))
    _, threaded = run_circuit(initial, circuit, PartitionSpec(4), TruncationPolicy(1e-6), n_jobs=4)
    assert _merged(serial) == _merged(threaded)


def test_norm_is_conserved_without_truncation():
    rng = np.random.default_rng(21)
    n = 6
    circuit = random_circuit(rng, n, depth=6)
    norms = []
    run_circuit([(label("X0 Z1", n), 0.6), (label("Y4", n), 0.8)], circuit, PartitionSpec(3),
                TruncationPolicy(0.0), on_layer=lambda engine, record: norms.append(engine.norm_squared()))
    assert len(norms) == circuit.depth
    np.testing.assert_allclose(norms, 1.0, rtol=1e-10)


def test_inverse_sequence_restores_operator():
    rng = np.random.default_rng(8)
    n = 5
    gates = list(random_circuit(rng, n, depth=3).gates())
    engine = Engine(n, PartitionSpec(2), TruncationPolicy(0.0))
    initial = SparseOperator.from_terms(n, [(label("Z2", n), 1.0), (label("X0 X1", n), 0.3)])
    engine.distribute(initial.copy())
    for gate in gates:
        engine.apply_gate(gate)
    for gate in reversed(gates):
        engine.apply_gate(Gate(gate.generator, -gate.angle))
    assert_same_operator(engine.operator(), initial.to_dict())


def test_record_conservation_and_destination_sparsity():
    rng = np.random.default_rng(30)
    n = 10
    spec = PartitionSpec(16, block_size=4)
    engine = Engine(n, spec, TruncationPolicy(0.0))
    engine.distribute([(label("Z4", n), 1.0)])
    for gate in random_circuit(rng, n, depth=6, max_gates=5).gates():
        outgoing = []
        for worker, shard in enumerate(engine.shards):
            result = apply_gate_local(shard.copy(), gate, spec, worker=worker)
            destinations = {batch.destination for batch in result.batches}
            assert destinations <= destination_set(spec, worker, gate.generator)
            assert len(destinations) <= 2 ** (2 * pauli_weight(gate.generator)) + 1
            for batch in result.batches:
                assert set(owners(spec, batch.keys, n).tolist()) == {batch.destination}
            outgoing.append(sum(len(batch) for batch in result.batches))
        stats = engine.apply_gate(gate)
        assert stats.records_sent == sum(outgoing)


def test_truncation_cadences_agree_without_truncation():
    rng = np.random.default_rng(10)
    n = 6
    circuit = random_circuit(rng, n, depth=4)
    _, per_gate = run_circuit([(label("Z0", n), 1.0)], circuit, PartitionSpec(2), TruncationPolicy(0.0, "gate"))
    _, per_layer = run_circuit([(label("Z0", n), 1.0)], circuit, PartitionSpec(2), TruncationPolicy(0.0, "layer"))
    assert_same_operator(per_gate.operator(), per_layer.operator(), atol=0.0)


def test_ledger_rows_and_columns():
    rng = np.random.default_rng(1)
    n = 4
    circuit = random_circuit(rng, n, depth=3)
    track = [label("Z0", n)]
    ledger, engine = run_circuit([(label("Z0", n), 1.0)], circuit, PartitionSpec(2), track=track)
    frame = ledger.to_frame()
    assert list(frame["t"]) == [1, 2, 3]
    assert list(frame.columns[:8]) == ["t", "observable", "term_count", "global_max", "removed",
                                       "wall_ms_per_gate", "batches_sent", "records_sent"]
    assert frame["coeff[Z0]"].iloc[-1] == engine.coefficient(track[0])
    assert frame["term_count"].iloc[-1] == engine.term_count()


def test_coefficient_readout():
    n = 2
    circuit = Circuit(n_qubits=n, layers=((Gate(label("X0", n), 0.4),),))
    observable = label("Z0", n)
    ledger, _ = run_circuit([(observable, 1.0)], circuit, ONE_WORKER, readout="coefficient", observable=observable)
    assert ledger[0].observable == pytest.approx(math.cos(0.4))
    with pytest.raises(ContractViolation):
        run_circuit([(observable, 1.0)], circuit, ONE_WORKER, readout="coefficient")


def test_non_finite_coefficient_aborts():
    n = 2
    engine = Engine(n, PartitionSpec(2))
    engine.distribute([(label("Z0", n), float("nan"))])
    circuit = Circuit(n_qubits=n, layers=((Gate(label("X1", n), 0.2),),))
    with pytest.raises(NumericalAbort) as info:
        engine.run(circuit)
    assert info.value.layer == 1


def test_memory_guard():
    n = 2
    engine = Engine(n, ONE_WORKER, min_free_memory_mb=10**12)
    engine.distribute([(label("Z0", n), 1.0)])
    with pytest.raises(ResourceExhausted) as info:
        engine.run(Circuit(n_qubits=n, layers=((Gate(label("X0", n), 0.1),),)))
    assert info.value.term_count == 1


def test_circuit_rejects_mismatched_width():
    with pytest.raises(ContractViolation):
        Circuit(n_qubits=3, layers=((Gate(label("X0", 2), 0.1),),))
    with pytest.raises(ContractViolation):
        Gate(label("X0"), float("inf"))


def test_thread_pool_is_released_after_abort():
    n = 3
    engine = Engine(n, PartitionSpec(3), n_jobs=3)
    engine.distribute([(label("Z0", n), 1.0), (label("X2", n), float("nan"))])
    circuit = Circuit(n_qubits=n, layers=((Gate(label("X0", n), 0.2),),))
    with pytest.raises(NumericalAbort):
        engine.run(circuit)
    assert engine._pool is None
    engine.distribute([(label("Z0", n), 1.0)])
    ledger = engine.run(circuit)
    assert ledger[0].observable == pytest.approx(math.cos(0.2))
    assert engine._pool is None


def test_heavy_hex_destinations_stay_within_block_bound():
    geom = heavy_hex_eagle127()
    circuit = build_kicked_ising(geom, 0.3, layers=3)
    spec = PartitionSpec(256, block_size=8, perturbation=1)
    engine = Engine(geom.n_qubits, spec, TruncationPolicy(0.0))
    engine.distribute([(label("Z62", geom.n_qubits), 1.0)])
    checked = 0
    for layer in reversed(circuit.layers):
        for gate in reversed(layer):
            bound = 2 ** (2 * pauli_weight(gate.generator)) + 1
            assert bound == (5 if pauli_weight(gate.generator) == 1 else 17)
            for worker, shard in enumerate(engine.shards):
                result = apply_gate_local(shard.copy(), gate, spec, worker=worker)
                assert len(result.batches) <= bound
            stats = engine.apply_gate(gate)
            assert stats.max_destinations <= bound
            checked += 1
    assert checked == circuit.gate_count()
    assert engine.term_count() > 1
