import logging
import os
import time

import numpy as np
import pandas as pd
from scipy.stats import linregress

from .simulation import build_circuit, observable_index, partition_spec
from .src.engine import Engine, Gate, run_circuit
from .src.partition import PartitionSpec
from .src.pauli_algebra import MultiIndex, words_for
from .src.sparse_operator import SparseOperator, TruncationPolicy

logger = logging.getLogger(__name__)

BENCH_COLUMNS = ["workers", "t", "term_count", "wall_ms_per_gate", "compute_ms_per_gate", "exchange_ms_per_gate"]


def bench_pipeline(config, sweep=None):
    """
    Run the configured circuit once per worker count and write bench.csv.

    :param sweep: worker counts; defaults to config.bench_workers.
    """
    sweep = sweep or config.bench_workers
    circuit = build_circuit(config)
    observable = observable_index(config, circuit.n_qubits)
    rows = []
    for workers in sweep:
        ledger, _ = run_circuit(
            [(observable, 1.0)], circuit, partition_spec(config, workers),
            TruncationPolicy(config.epsilon0, config.cadence),
            n_jobs=config.n_jobs, verify_ownership=config.verify_ownership,
        )
        for record in ledger:
            rows.append((workers, record.t, record.term_count, record.wall_ms_per_gate,
                         record.compute_ms_per_gate, record.exchange_ms_per_gate))
        logger.info("bench N=%d: final |O|=%d, %.3f ms/gate", workers, ledger[-1].term_count,
                    ledger[-1].wall_ms_per_gate)
    frame = pd.DataFrame(rows, columns=BENCH_COLUMNS)
    os.makedirs(config.out, exist_ok=True)
    frame.to_csv(os.path.join(config.out, "bench.csv"), index=False)
    return frame


def random_operator(n_qubits, size, rng):
    """`size` uniformly random Pauli strings with unit-scale random coefficients."""
    n_words = words_for(n_qubits)
    keys = rng.integers(0, np.iinfo(np.uint64).max, size=(size, n_words), dtype=np.uint64, endpoint=True)
    top_bits = 2 * n_qubits - 64 * (n_words - 1)
    if top_bits < 64:
        keys[:, -1] &= np.uint64((1 << top_bits) - 1)
    return SparseOperator.from_arrays(n_qubits, keys, rng.uniform(-1.0, 1.0, size))


def synthetic_gate_benchmark(sizes, n_qubits=127, workers=1, gates=5, seed=0):
    """
    Time single gates on random operators of the given sizes.

    Each gate is a ZZ rotation at a generic angle on neighbouring sites, so
    about half of the strings branch.
    :return: (DataFrame of size/term_count/ms_per_gate/exchange_ms_per_gate, log-log slope)
    """
    rng = np.random.default_rng(seed)
    rows = []
    for size in sizes:
        engine = Engine(n_qubits, PartitionSpec(workers), TruncationPolicy(0.0), verify_ownership=False)
        baseline = [shard.copy() for shard in engine.distribute(random_operator(n_qubits, size, rng))]
        timings, exchange = [], []
        for _ in range(gates):
            engine.shards = [shard.copy() for shard in baseline]
            site = int(rng.integers(0, n_qubits - 1))
            gate = Gate(MultiIndex.from_sites(n_qubits, {site: "Z", site + 1: "Z"}), 0.3)
            started = time.perf_counter()
            stats = engine.apply_gate(gate)
            timings.append(1e3 * (time.perf_counter() - started))
            exchange.append(1e3 * stats.exchange_s)
        rows.append((size, sum(len(shard) for shard in baseline),
                     float(np.median(timings)), float(np.median(exchange))))
        logger.info("synthetic |O|=%d: %.3f ms/gate", size, rows[-1][2])
    frame = pd.DataFrame(rows, columns=["size", "term_count", "ms_per_gate", "exchange_ms_per_gate"])
    slope = float("nan")
    if len(frame) >= 2:
        slope = linregress(np.log(frame["size"]), np.log(frame["ms_per_gate"])).slope
    return frame, slope
