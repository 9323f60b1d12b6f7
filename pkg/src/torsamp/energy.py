"""Energy oracles and the log-domain Boltzmann reward.

Three interchangeable backends map a conformation to a scalar energy: an
analytic torsional cosine series (desk-scale stand-in for a force field), a
tabulated periodic grid, and a client for an external force-field process
speaking newline-delimited JSON over its standard streams. Rewards are
handled exclusively in log space; exp(-E/kT) is never formed.
"""

from __future__ import annotations

import json
import logging
import math
import os
import selectors
import shlex
import subprocess
import threading
from dataclasses import dataclass, field
from itertools import count
from pathlib import Path

import numpy as np

from .geometry import Conformation, LocalStructure, TorusPoint, measure_torsions, metric_tensor, set_torsions
from .molio import MoleculeGraph
from .torus import TWO_PI

logger = logging.getLogger("torsamp.energy")

BOLTZMANN_KCAL_PER_MOL_K = 0.0019872
ROOM_TEMPERATURE_K = 298.15
DEFAULT_KT_EXTERNAL = BOLTZMANN_KCAL_PER_MOL_K * ROOM_TEMPERATURE_K
DEFAULT_KT_ANALYTIC = 1.0
LOG_REWARD_FLOOR = -1e6


class OracleError(RuntimeError):
    pass


class ProtocolError(OracleError):
    """The external energy server violated the wire protocol."""


@dataclass(frozen=True)
class AnalyticTorsionPotential:
    """Cosine-series torsional potential with optional pairwise couplings.

    terms[i] is a tuple of (amplitude, multiplicity, phase) triples for
    torsion i: sum V (1 + cos(n phi - gamma)). couplings holds
    (p, q, amplitude, delta) entries contributing A cos(phi_p - phi_q - delta).
    """

    terms: tuple
    couplings: tuple = ()

    def __post_init__(self):
        for i, series in enumerate(self.terms):
            for v, n, gamma in series:
                if int(n) != n or n < 1:
                    raise ValueError(f"torsion {i}: multiplicity must be a positive integer")

    @property
    def m(self) -> int:
        return len(self.terms)

    def energy_at(self, phi: np.ndarray) -> float:
        return float(self.energy_at_batch(np.asarray(phi, dtype=float)[None, :])[0])

    def energy_at_batch(self, phis: np.ndarray) -> np.ndarray:
        phis = np.asarray(phis, dtype=float)
        e = np.zeros(phis.shape[0])
        for i, series in enumerate(self.terms):
            for v, n, gamma in series:
                e += v * (1.0 + np.cos(n * phis[:, i] - gamma))
        for p, q, a, delta in self.couplings:
            e += a * np.cos(phis[:, p] - phis[:, q] - delta)
        return e

    def to_dict(self) -> dict:
        return {
            "terms": [[[float(v), int(n), float(g)] for v, n, g in series] for series in self.terms],
            "couplings": [[int(p), int(q), float(a), float(d)] for p, q, a, d in self.couplings],
        }

    @staticmethod
    def from_dict(doc: dict) -> "AnalyticTorsionPotential":
        return AnalyticTorsionPotential(
            terms=tuple(tuple((v, int(n), g) for v, n, g in series) for series in doc["terms"]),
            couplings=tuple(tuple(c) for c in doc.get("couplings", ())),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @staticmethod
    def load(path) -> "AnalyticTorsionPotential":
        return AnalyticTorsionPotential.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


class AnalyticOracle:
    """Pure torsional energy: measures dihedrals, evaluates the series."""

    def __init__(self, potential: AnalyticTorsionPotential, graph: MoleculeGraph):
        if potential.m != graph.n_torsions:
            raise OracleError(
                f"potential covers {potential.m} torsions, molecule has {graph.n_torsions}"
            )
        self.potential = potential
        self.graph = graph

    def energy(self, conf: Conformation) -> float:
        return self.potential.energy_at(measure_torsions(conf, self.graph).phi)

    def energy_batch(self, confs) -> list:
        return list(self.energy_from_coords(np.stack([c.coords for c in confs])))

    def energy_from_coords(self, coords: np.ndarray) -> np.ndarray:
        from .geometry import batch_measure_torsions

        return self.potential.energy_at_batch(batch_measure_torsions(coords, self.graph))


class TableOracle:
    """Periodic multilinear interpolation of tabulated energies (m = 1 or 2)."""

    def __init__(self, values: np.ndarray, graph: MoleculeGraph):
        values = np.asarray(values, dtype=float)
        if values.ndim != graph.n_torsions or values.ndim not in (1, 2):
            raise OracleError("missing or mis-shaped energy grid for this molecule")
        self.values = values
        self.graph = graph

    def interpolate(self, phi: np.ndarray) -> float:
        v = self.values
        if v.ndim == 1:
            side = v.shape[0]
            x = np.mod(phi[0], TWO_PI) / TWO_PI * side
            i0 = int(math.floor(x)) % side
            f = x - math.floor(x)
            return float(v[i0] * (1 - f) + v[(i0 + 1) % side] * f)
        side0, side1 = v.shape
        x = np.mod(phi[0], TWO_PI) / TWO_PI * side0
        y = np.mod(phi[1], TWO_PI) / TWO_PI * side1
        i0, j0 = int(math.floor(x)) % side0, int(math.floor(y)) % side1
        fx, fy = x - math.floor(x), y - math.floor(y)
        i1, j1 = (i0 + 1) % side0, (j0 + 1) % side1
        return float(
            v[i0, j0] * (1 - fx) * (1 - fy)
            + v[i1, j0] * fx * (1 - fy)
            + v[i0, j1] * (1 - fx) * fy
            + v[i1, j1] * fx * fy
        )

    def energy(self, conf: Conformation) -> float:
        return self.interpolate(measure_torsions(conf, self.graph).phi)

    def energy_batch(self, confs) -> list:
        return [self.energy(c) for c in confs]

    def energy_from_coords(self, coords: np.ndarray) -> np.ndarray:
        from .geometry import batch_measure_torsions

        phis = batch_measure_torsions(coords, self.graph)
        return np.array([self.interpolate(p) for p in phis])


def tabulate_oracle(oracle, local: LocalStructure, graph: MoleculeGraph, side: int) -> TableOracle:
    """Build a table oracle by sampling another oracle on a regular grid."""
    m = graph.n_torsions
    if m == 1:
        nodes = np.arange(side) * TWO_PI / side
        vals = np.array(
            [oracle.energy(set_torsions(local, TorusPoint(np.array([p])), graph)) for p in nodes]
        )
        return TableOracle(vals, graph)
    if m == 2:
        nodes = np.arange(side) * TWO_PI / side
        vals = np.empty((side, side))
        for i, p in enumerate(nodes):
            for j, q in enumerate(nodes):
                vals[i, j] = oracle.energy(set_torsions(local, TorusPoint(np.array([p, q])), graph))
        return TableOracle(vals, graph)
    raise OracleError("table oracle supports 1 or 2 torsions")


class ExternalOracle:
    """Client for an external energy server over stdin/stdout.

    Wire protocol, newline-delimited UTF-8 JSON:
      handshake (server -> client): {"ready": true, "units": "kcal/mol"}
      request:  {"id": <uint64>, "elements": [...], "coords": [[x,y,z], ...]}
      response: {"id": <uint64>, "energy": <float>} or {"id": ..., "error": "..."}
    Replies may arrive out of order; every request is answered exactly once.
    Requests are pipelined up to max_inflight and matched by id.
    """

    def __init__(self, command, graph: MoleculeGraph, timeout: float = 30.0,
                 max_inflight: int = 64):
        self.graph = graph
        self.timeout = float(timeout)
        self.max_inflight = int(max_inflight)
        self._ids = count(1)
        self._lock = threading.Lock()
        self._buffer = b""
        argv = shlex.split(command) if isinstance(command, str) else list(command)
        try:
            self._proc = subprocess.Popen(
                argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE, stderr=None
            )
        except OSError as e:
            raise OracleError(f"failed to start energy server {argv!r}: {e}") from e
        self._sel = selectors.DefaultSelector()
        self._sel.register(self._proc.stdout, selectors.EVENT_READ)
        hello = self._read_record()
        if hello.get("ready") is not True:
            raise ProtocolError(f"bad handshake from energy server: {hello!r}")
        self.units = hello.get("units", "")

    def _read_record(self) -> dict:
        import time

        deadline = time.monotonic() + self.timeout
        while True:
            nl = self._buffer.find(b"\n")
            if nl >= 0:
                line, self._buffer = self._buffer[:nl], self._buffer[nl + 1 :]
                if not line.strip():
                    continue
                try:
                    return json.loads(line.decode("utf-8"))
                except (json.JSONDecodeError, UnicodeDecodeError) as e:
                    raise ProtocolError(f"malformed reply from energy server: {line[:200]!r}") from e
            if self._proc.poll() is not None:
                raise OracleError("energy server process exited")
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise OracleError(f"energy server reply timed out after {self.timeout:g} s")
            if self._sel.select(timeout=remaining):
                chunk = os.read(self._proc.stdout.fileno(), 65536)
                if not chunk:
                    raise OracleError("energy server closed its output stream")
                self._buffer += chunk

    def energy(self, conf: Conformation) -> float:
        return self.energy_batch([conf])[0]

    def energy_batch(self, confs) -> list:
        elements = list(self.graph.elements)
        out = [None] * len(confs)
        with self._lock:
            for start in range(0, len(confs), self.max_inflight):
                chunk = confs[start : start + self.max_inflight]
                pending = {}
                for offset, conf in enumerate(chunk):
                    rid = next(self._ids)
                    pending[rid] = start + offset
                    req = {"id": rid, "elements": elements,
                           "coords": [[float(x) for x in row] for row in conf.coords]}
                    try:
                        self._proc.stdin.write((json.dumps(req, separators=(",", ":")) + "\n").encode("utf-8"))
                        self._proc.stdin.flush()
                    except (BrokenPipeError, OSError) as e:
                        raise OracleError("energy server process died mid-request") from e
                while pending:
                    rec = self._read_record()
                    rid = rec.get("id")
                    if rid not in pending:
                        raise ProtocolError(f"reply for unknown or duplicate id {rid!r}")
                    if "error" in rec:
                        raise OracleError(f"energy server error for id {rid}: {rec['error']}")
                    if "energy" not in rec:
                        raise ProtocolError(f"reply missing energy field: {rec!r}")
                    out[pending.pop(rid)] = float(rec["energy"])
        return out

    def close(self) -> None:
        try:
            self._proc.stdin.close()
        except OSError:
            pass
        try:
            self._proc.wait(timeout=5)
        except subprocess.TimeoutExpired:
            self._proc.kill()
        self._sel.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


@dataclass
class Reward:
    """Log-domain Boltzmann reward log R = -E(c(L, phi))/kT for one condition."""

    oracle: object
    graph: MoleculeGraph
    local: LocalStructure
    kT: float = DEFAULT_KT_ANALYTIC
    use_metric_volume: bool = False

    def __post_init__(self):
        if self.kT <= 0:
            raise ValueError("kT must be positive")

    def log_reward(self, phi: TorusPoint) -> float:
        return self.log_reward_batch([phi])[0]

    def log_reward_batch(self, phis) -> np.ndarray:
        from .geometry import batch_set_torsions

        arr = np.stack([p.phi if isinstance(p, TorusPoint) else np.asarray(p, dtype=float)
                        for p in phis])
        coords = batch_set_torsions(self.local.reference.coords, arr, self.graph)
        if hasattr(self.oracle, "energy_from_coords") and not self.use_metric_volume:
            energies = np.asarray(self.oracle.energy_from_coords(coords), dtype=float)
            lr = -energies / self.kT
        else:
            confs = [Conformation(coords=c, graph_ref=self.graph.name) for c in coords]
            energies = np.asarray(self.oracle.energy_batch(confs), dtype=float)
            lr = -energies / self.kT
            if self.use_metric_volume:
                for k, conf in enumerate(confs):
                    _, det = metric_tensor(conf, self.graph)
                    lr[k] -= 0.5 * math.log(det)
        low = lr < LOG_REWARD_FLOOR
        if np.any(low):
            logger.warning("clamped %d log-rewards at %g", int(low.sum()), LOG_REWARD_FLOOR)
            lr = np.maximum(lr, LOG_REWARD_FLOOR)
        return lr
