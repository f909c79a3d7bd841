import math
import os
import re

import yaml

from .engine import Circuit, Gate
from .errors import ConfigError, ContractViolation
from .pauli_algebra import parse_pauli_label
from .sparse_operator import dump_operator, load_operator

MAX_INPUT_BYTES = 200 * 1024 * 1024
_PI_ANGLE = re.compile(r"^([+-]?)((?:\d+(?:\.\d*)?|\.\d+)(?:[eE][+-]?\d+)?)?\*?pi$")


def parse_angle(value):
    """
    Parse an angle in radians.

    Accepts numbers and strings; a trailing "pi" multiplies by pi, so "0.25pi",
    "-0.5pi", "-pi" and "pi" are exact multiples.
    """
    if isinstance(value, (int, float)):
        angle = float(value)
    else:
        text = str(value).strip().lower().replace(" ", "")
        match = _PI_ANGLE.match(text)
        try:
            if match:
                sign = -1.0 if match.group(1) == "-" else 1.0
                angle = sign * float(match.group(2) or 1.0) * math.pi
            else:
                angle = float(text)
        except ValueError as exc:
            raise ContractViolation(f"invalid angle {value!r}") from exc
    if not math.isfinite(angle):
        raise ContractViolation(f"angle must be finite, got {value!r}")
    return angle


def _check_size(file_path):
    if not os.path.exists(file_path):
        raise ConfigError(f"file not found: {file_path}")
    if os.path.getsize(file_path) > MAX_INPUT_BYTES:
        raise ConfigError(f"file too large: {file_path}")


def parse_circuit(text, n_qubits):
    """
    Parse a circuit description.

    One gate per line, "pauli-label angle"; the label may be sparse with spaces
    ("Z13 Z14 -0.5pi"), so the angle is the last field. A blank line ends a
    layer and "#" starts a comment.
    """
    layers, current = [], []
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            if current:
                layers.append(tuple(current))
                current = []
            continue
        parts = line.rsplit(None, 1)
        if len(parts) != 2:
            raise ContractViolation(f"line {number}: expected 'pauli-label angle', got {raw!r}")
        try:
            generator = parse_pauli_label(parts[0], n_qubits)
            angle = parse_angle(parts[1])
        except ContractViolation as exc:
            raise ContractViolation(f"line {number}: {exc}") from exc
        current.append(Gate(generator, angle))
    if current:
        layers.append(tuple(current))
    if not layers:
        raise ContractViolation("circuit has no gates")
    return Circuit(n_qubits=n_qubits, layers=tuple(layers))


def read_circuit(file_path, n_qubits):
    """
    Read a circuit file from a given path.
    """
    _check_size(file_path)
    with open(file_path, "r") as file:
        circuit = parse_circuit(file.read(), n_qubits)
    circuit.labels.update({"model": "circuit-file", "source": os.path.basename(file_path)})
    return circuit


def write_checkpoint(directory, shards, layer, spec):
    """
    Dump every shard to its own file plus a YAML manifest.

    :return: path of the manifest.
    """
    os.makedirs(directory, exist_ok=True)
    files = []
    for worker, shard in enumerate(shards):
        name = f"shard_t{layer}_w{worker}.txt"
        with open(os.path.join(directory, name), "w") as file:
            dump_operator(shard, file)
        files.append(name)
    manifest = {
        "layer": layer,
        "n_qubits": shards[0].n_qubits,
        "worker_count": spec.worker_count,
        "block_size_bits": spec.block_size,
        "perturbation_s": spec.perturbation,
        "hash_id": spec.hash_id,
        "term_count": sum(shard.term_count() for shard in shards),
        "files": files,
    }
    path = os.path.join(directory, f"checkpoint_t{layer}.yaml")
    with open(path, "w") as file:
        yaml.safe_dump(manifest, file, sort_keys=False)
    return path


def load_checkpoint(manifest_path):
    """
    Restore shards written by `write_checkpoint`.

    :return: (manifest dict, list of SparseOperator).
    """
    _check_size(manifest_path)
    with open(manifest_path, "r") as file:
        manifest = yaml.safe_load(file)
    directory = os.path.dirname(manifest_path)
    shards = []
    for name in manifest["files"]:
        with open(os.path.join(directory, name), "r") as file:
            shards.append(load_operator(file, manifest["n_qubits"]))
    if len(shards) != manifest["worker_count"]:
        raise ContractViolation(f"checkpoint lists {len(shards)} shards for {manifest['worker_count']} workers")
    return manifest, shards
