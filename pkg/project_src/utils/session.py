import logging
import os
from datetime import datetime
from typing import Optional

import pandas as pd
import yaml

from project_src.operator_dynamics.src.engine import LEDGER_SCHEMA_VERSION
from project_src.operator_dynamics.src.partition import HASH_ID
from project_src.operator_dynamics.src.sparse_operator import density_histogram
from project_src.operator_dynamics.src.util import write_checkpoint

logger = logging.getLogger(__name__)

LEDGER_FILE = "ledger.csv"
MANIFEST_FILE = "run.yaml"


class RunSession:
    """
    Output directory of one run.

    Ledger rows are appended and flushed layer by layer, so a killed run keeps
    every completed layer. Histograms and checkpoints are written from the
    same per-layer callback.
    """

    def __init__(self, out_dir, config=None, histogram_bins=0, histogram_floor=1e-16,
                 checkpoint_every=0, epsilon0=0.0):
        self.out_dir = out_dir
        self.config = config
        self.histogram_bins = histogram_bins
        self.histogram_floor = histogram_floor
        self.checkpoint_every = checkpoint_every
        self.epsilon0 = epsilon0
        self.history = []
        self.checkpoints = []
        self._ledger_started = False
        os.makedirs(out_dir, exist_ok=True)
        ledger_path = self.path(LEDGER_FILE)
        if os.path.exists(ledger_path):
            os.remove(ledger_path)

    @classmethod
    def from_config(cls, config):
        return cls(
            config.out,
            config=config,
            histogram_bins=config.histogram_bins,
            histogram_floor=config.histogram_floor,
            checkpoint_every=config.checkpoint_every,
            epsilon0=config.epsilon0,
        )

    def path(self, name):
        return os.path.join(self.out_dir, name)

    def add_to_history(self, entry_type: str, detail: Optional[str] = None):
        """Add an entry to the run history kept in the manifest."""
        self.history.append({
            'timestamp': datetime.now().strftime("%Y-%m-%d %H:%M:%S"),
            'type': entry_type,
            'detail': detail,
        })

    def append_ledger(self, record):
        frame = pd.DataFrame([record.as_row()])
        with open(self.path(LEDGER_FILE), "a", newline="") as file:
            frame.to_csv(file, header=not self._ledger_started, index=False, float_format="%.17g")
            file.flush()
            os.fsync(file.fileno())
        self._ledger_started = True

    def write_histogram(self, t, shards, global_max):
        floor = self.epsilon0 if self.epsilon0 > 0 else self.histogram_floor
        histogram = density_histogram(shards, global_max, bins=self.histogram_bins, floor=floor)
        path = self.path(f"histogram_t{t}.tsv")
        histogram.to_frame().to_csv(path, sep="\t", index=False, float_format="%.6e")
        return path

    def on_layer(self, engine, record):
        """Per-layer callback for Engine.run."""
        self.append_ledger(record)
        if self.histogram_bins and record.term_count:
            self.write_histogram(record.t, engine.shards, record.global_max)
        if self.checkpoint_every and record.t % self.checkpoint_every == 0:
            manifest = write_checkpoint(self.path("checkpoints"), engine.shards, record.t, engine.spec)
            self.checkpoints.append(os.path.relpath(manifest, self.out_dir))
            self.add_to_history("checkpoint", self.checkpoints[-1])

    def write_manifest(self, status="ok", **extra):
        """run.yaml: configuration, partition hash, ledger schema and history."""
        manifest = {
            "status": status,
            "ledger_schema_version": LEDGER_SCHEMA_VERSION,
            "partition_hash": HASH_ID,
            "config": self.config.model_dump(mode="json") if self.config is not None else None,
            "checkpoints": self.checkpoints,
            "history": self.history,
        }
        manifest.update(extra)
        with open(self.path(MANIFEST_FILE), "w") as file:
            yaml.safe_dump(manifest, file, sort_keys=False)
        return self.path(MANIFEST_FILE)
