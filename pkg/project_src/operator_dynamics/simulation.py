import logging
import math
import os

import numpy as np
import pandas as pd
from tqdm import tqdm

from project_src.utils.session import RunSession
from .data_utils import config_data
from .src.engine import Circuit, run_circuit
from .src.errors import ConfigError, ContractViolation
from .src.models import build_kicked_ising, chain_geometry, heavy_hex_eagle127, load_geometry
from .src.oracle import (
    MAX_CONJUGATION_QUBITS,
    MAX_STATE_QUBITS,
    DenseState,
    dense_pauli,
    evolve_state,
    expectation,
    heisenberg_dense,
    pauli_coefficients,
)
from .src.partition import PartitionSpec
from .src.pauli_algebra import parse_pauli_label
from .src.sparse_operator import TruncationPolicy
from .src.util import parse_angle, read_circuit

logger = logging.getLogger(__name__)

REFERENCE = config_data["reference_magnetization"]


def build_circuit(config):
    """Circuit named by the config: a circuit file or one of the presets."""
    try:
        if config.circuit_file:
            return read_circuit(config.circuit_file, config.n_qubits)
        if config.preset == "kicked-ising-eagle127":
            geom = load_geometry(config.geometry, n_qubits=127) if config.geometry else heavy_hex_eagle127()
        elif config.preset == "kicked-ising-chain":
            geom = load_geometry(config.geometry) if config.geometry else chain_geometry(config.chain_length)
        else:
            raise ConfigError(f"unknown preset {config.preset!r}")
        return build_kicked_ising(geom, config.theta_x, config.theta_zz, config.layers)
    except (ContractViolation, OSError) as exc:
        raise ConfigError(f"cannot build circuit: {exc}") from exc


def observable_index(config, n_qubits):
    try:
        return parse_pauli_label(config.observable, n_qubits)
    except ContractViolation as exc:
        raise ConfigError(f"invalid observable {config.observable!r}: {exc}") from exc


def partition_spec(config, workers=None):
    return PartitionSpec(
        worker_count=workers or config.workers,
        block_size=config.block_size_bits,
        perturbation=config.perturbation_s,
    )


def simulation_pipeline(config, progress=True):
    """
    Evolve the configured observable through the configured circuit.

    Writes ledger.csv (flushed per layer), optional histogram_t<k>.tsv and
    checkpoints, and run.yaml into config.out.
    :return: (RunLedger, Engine)
    """
    circuit = build_circuit(config)
    observable = observable_index(config, circuit.n_qubits)
    tracked = [parse_pauli_label(label, circuit.n_qubits) for label in config.track_coefficients]
    session = RunSession.from_config(config)
    session.add_to_history("start", f"{circuit.labels.get('model', 'circuit')} t={circuit.depth}")
    try:
        ledger, engine = run_circuit(
            [(observable, 1.0)],
            circuit,
            partition_spec(config),
            TruncationPolicy(config.epsilon0, config.cadence),
            readout=config.readout,
            observable=observable,
            track=tracked,
            n_jobs=config.n_jobs,
            verify_ownership=config.verify_ownership,
            min_free_memory_mb=config.min_free_memory_mb,
            per_gate_readout=config.per_gate_readout,
            on_layer=session.on_layer,
            progress=progress and not config.quiet,
        )
    except Exception as exc:
        session.add_to_history("failed", str(exc))
        session.write_manifest(status="failed")
        raise
    session.add_to_history("done", f"|O|={engine.term_count()}")
    session.write_manifest(status="ok", layers_completed=len(ledger))
    return ledger, engine


def _reference_values(config, circuit):
    """Published magnetization for the 127-qubit preset, keyed by t; empty if not applicable."""
    if config.circuit_file or config.preset != "kicked-ising-eagle127" or config.observable != REFERENCE["observable"]:
        return {}, None
    if not math.isclose(config.theta_x, parse_angle(REFERENCE["theta_x"]), abs_tol=1e-12):
        return {}, None
    if config.epsilon0 == 0:
        return REFERENCE["exact"], "reference-exact"
    if math.isclose(config.epsilon0, 1e-5):
        return REFERENCE["epsilon0_1e-5"], "reference-epsilon0-1e-5"
    return {}, None


def oracle_check_pipeline(config):
    """
    Compare the engine against independent references.

    Up to MAX_STATE_QUBITS the per-layer readout is checked against a state
    vector; up to MAX_CONJUGATION_QUBITS also the final coefficient table
    against dense conjugation. The 127-qubit preset is checked against the
    stored reference magnetization instead.
    :return: (report DataFrame, max deviation)
    """
    circuit = build_circuit(config)
    n = circuit.n_qubits
    observable = observable_index(config, n)
    ledger, engine = run_circuit(
        [(observable, 1.0)], circuit, partition_spec(config),
        TruncationPolicy(config.epsilon0, config.cadence),
        n_jobs=config.n_jobs, progress=not config.quiet,
    )
    rows = []
    if n <= MAX_STATE_QUBITS:
        for record in ledger:
            tail = Circuit(n_qubits=n, layers=circuit.layers[circuit.depth - record.t:])
            state = evolve_state(DenseState.zero(n), tail)
            rows.append((record.t, "state-vector", record.observable, expectation(state, observable)))
    else:
        references, source = _reference_values(config, circuit)
        for record in ledger:
            if record.t in references:
                rows.append((record.t, source, record.observable, float(references[record.t])))
        if not references:
            logger.warning("no reference available for n=%d; only the engine ran", n)

    if n <= MAX_CONJUGATION_QUBITS:
        dense = pauli_coefficients(heisenberg_dense(dense_pauli(observable), circuit), n)
        evolved = engine.operator()
        worst = max((abs(evolved.get(bits, 0.0) - dense.get(bits, 0.0)) for bits in set(dense) | set(evolved)),
                    default=0.0)
        rows.append((circuit.depth, "dense-coefficients", float(len(evolved)), float(len(dense))))
        rows.append((circuit.depth, "dense-max-deviation", worst, 0.0))

    report = pd.DataFrame(rows, columns=["t", "reference", "engine", "expected"])
    report["deviation"] = np.abs(report["engine"] - report["expected"])
    os.makedirs(config.out, exist_ok=True)
    report.to_csv(os.path.join(config.out, "oracle_check.csv"), index=False, float_format="%.17g")
    checked = report[report["reference"] != "dense-coefficients"]
    max_deviation = float(checked["deviation"].max()) if len(checked) else 0.0
    logger.info("oracle check: %d comparisons, max deviation %.3e", len(checked), max_deviation)
    return report, max_deviation


SWEEP_COLUMNS = ["theta_x", "epsilon0", "t", "observable", "term_count"]


def sweep_pipeline(config, theta_xs=None, epsilons=None, progress=True):
    """
    Run the configured kicked Ising preset for every (theta_x, epsilon0) pair.

    Writes sweep.csv with one row per pair and consumed layer, so the traces
    over t and the values at the last layer come from the same file.
    :param theta_xs: kick angles in radians; defaults to config.theta_x.
    :param epsilons: truncation thresholds; defaults to config.epsilon0.
    :return: DataFrame with SWEEP_COLUMNS
    """
    if config.circuit_file:
        raise ConfigError("a theta_x sweep needs a kicked Ising preset, not a circuit file")
    theta_xs = list(theta_xs) if theta_xs else [config.theta_x]
    try:
        policies = [TruncationPolicy(epsilon0, config.cadence) for epsilon0 in (epsilons or [config.epsilon0])]
    except ContractViolation as exc:
        raise ConfigError(f"invalid sweep threshold: {exc}") from exc

    rows = []
    with tqdm(total=len(theta_xs) * len(policies), desc="sweep", unit="run",
              disable=not progress or config.quiet) as bar:
        for theta_x in theta_xs:
            point = config.model_copy(update={"theta_x": theta_x})
            circuit = build_circuit(point)
            observable = observable_index(point, circuit.n_qubits)
            for policy in policies:
                ledger, _ = run_circuit(
                    [(observable, 1.0)], circuit, partition_spec(point), policy,
                    readout=point.readout, observable=observable,
                    n_jobs=point.n_jobs, verify_ownership=point.verify_ownership,
                    min_free_memory_mb=point.min_free_memory_mb,
                )
                rows.extend((theta_x, policy.epsilon0, record.t, record.observable, record.term_count)
                            for record in ledger)
                logger.info("sweep theta_x=%.6f epsilon0=%g: observable=%.14f |O|=%d",
                            theta_x, policy.epsilon0, ledger[-1].observable, ledger[-1].term_count)
                bar.update(1)

    frame = pd.DataFrame(rows, columns=SWEEP_COLUMNS)
    os.makedirs(config.out, exist_ok=True)
    frame.to_csv(os.path.join(config.out, "sweep.csv"), index=False, float_format="%.17g")
    return frame
