"""
Run artifacts: binary field dumps with a CSV index, profile/history/report CSVs,
operator dumps and the optimizer checkpoint.
"""

import logging
import struct
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
from tenacity import retry, retry_if_exception_type, stop_after_attempt, wait_exponential

from .config import Config
from .exceptions import ShapeMismatch, ValidationError

logger = logging.getLogger(__name__)

MAGIC = b"AOPT"
VERSION = 1
HEADER = struct.Struct("<4sIIII12s")
FLOAT_FORMAT = "%.17g"
INDEX_FILE = "fields.csv"
INDEX_COLUMNS = ["field", "file", "nt1", "nx", "nz", "dtype", "dt", "T"]

_io_retry = retry(
    stop=stop_after_attempt(Config.RETRY_ATTEMPTS),
    wait=wait_exponential(multiplier=0.5, min=0.5, max=4),
    retry=retry_if_exception_type(OSError),
    reraise=True,
)


def encode_field(values: np.ndarray) -> bytes:
    """32-byte header followed by little-endian float64 data in t-x-z order"""
    values = np.asarray(values, dtype=float)
    if values.ndim == 2:
        values = values[:, :, None]
    if values.ndim != 3:
        raise ShapeMismatch(f"Field dumps need (Nt+1, Nx[, Nz]) arrays, got shape {values.shape}")
    nt1, nx, nz = values.shape
    header = HEADER.pack(MAGIC, VERSION, nt1, nx, nz, bytes(12))
    return header + np.ascontiguousarray(values, dtype="<f8").tobytes()


def decode_field(data: bytes) -> np.ndarray:
    if len(data) < HEADER.size:
        raise ValidationError(f"Field dump too short ({len(data)} bytes)")
    magic, version, nt1, nx, nz, _ = HEADER.unpack(data[:HEADER.size])
    if magic != MAGIC or version != VERSION:
        raise ValidationError(f"Not an AOPT v{VERSION} field dump (magic={magic!r}, version={version})")
    expected = HEADER.size + 8 * nt1 * nx * nz
    if len(data) != expected:
        raise ValidationError(f"Field dump holds {len(data)} bytes, header announces {expected}")
    values = np.frombuffer(data, dtype="<f8", offset=HEADER.size).astype(float).reshape(nt1, nx, nz)
    return values[:, :, 0] if nz == 1 else values


def read_field(path) -> np.ndarray:
    return decode_field(Path(path).read_bytes())


def read_profile(path) -> np.ndarray:
    """Profile CSV with header x,ell in ascending x; returns the ell column"""
    frame = pd.read_csv(path)
    if list(frame.columns) != ["x", "ell"]:
        raise ValidationError(f"Profile {path} needs the header 'x,ell', got {','.join(frame.columns)}")
    x = frame["x"].to_numpy(dtype=float)
    if np.any(np.diff(x) <= 0):
        raise ValidationError(f"Profile {path} is not in ascending x order")
    return frame["ell"].to_numpy(dtype=float)


def read_edge_control(path, Nt: int, Nx: int) -> np.ndarray:
    """An edge control from a field dump (.bin) or a header-less CSV with Nt+1 rows of Nx values"""
    path = Path(path)
    if path.suffix == ".bin":
        values = read_field(path)
    else:
        values = pd.read_csv(path, header=None).to_numpy(dtype=float)
    if values.shape != (Nt + 1, Nx):
        raise ShapeMismatch(f"Control file {path} has shape {values.shape}, expected {(Nt + 1, Nx)}")
    return values


def read_checkpoint(directory) -> Optional[Dict]:
    """Iteration number and controls of the last checkpoint, None if there is none"""
    directory = Path(directory)
    marker = directory / "iteration.csv"
    if not marker.exists():
        return None
    iteration = int(pd.read_csv(marker)["iteration"].iloc[0])
    return {
        "iteration": iteration,
        "g": read_field(directory / "g.bin"),
        "h": read_field(directory / "h.bin"),
        "ell": read_profile(directory / "profile.csv"),
    }


class ArtifactWriter:
    """Writes every artifact of one run below a single output directory"""

    def __init__(self, out_dir, dt: float = None, T: float = None):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.dt = dt
        self.T = T
        self.index: List[dict] = []
        logger.info(f"Writing artifacts to {self.out_dir}")

    @_io_retry
    def _write_bytes(self, path: Path, data: bytes):
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)

    @_io_retry
    def _write_text(self, path: Path, text: str):
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")

    @_io_retry
    def write_table(self, frame: pd.DataFrame, name: str) -> Path:
        path = self.out_dir / name
        path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
        logger.debug(f"Wrote {path} ({len(frame)} rows)")
        return path

    def write_field(self, name: str, values: np.ndarray, subdir: str = "") -> Path:
        data = encode_field(values)
        nt1, nx, nz = HEADER.unpack(data[:HEADER.size])[2:5]
        relative = Path(subdir) / f"{name}.bin" if subdir else Path(f"{name}.bin")
        self._write_bytes(self.out_dir / relative, data)
        self.index.append({
            "field": name, "file": relative.as_posix(), "nt1": nt1, "nx": nx, "nz": nz,
            "dtype": "<f8", "dt": self.dt, "T": self.T,
        })
        return self.out_dir / relative

    def write_index(self) -> Path:
        return self.write_table(pd.DataFrame(self.index, columns=INDEX_COLUMNS), INDEX_FILE)

    def write_states(self, states):
        for name in ("pbar", "pbar_t", "pbar_tt", "ptil", "ptil_t", "ptil_tt", "wtil", "wtil_t", "wtil_tt"):
            self.write_field(name, getattr(states, name))
        self.write_field("p", states.pressure)
        self.write_index()

    def write_adjoint(self, adj):
        for name in ("qbar", "qtil", "vtil", "mu_N", "mu_pl"):
            self.write_field(name, getattr(adj, name))
        self.write_index()

    def write_profile(self, x: np.ndarray, ell: np.ndarray, name: str = "profile.csv") -> Path:
        return self.write_table(pd.DataFrame({"x": np.asarray(x, dtype=float), "ell": np.asarray(ell, dtype=float)}),
                                name)

    def write_multipliers(self, mu_N: np.ndarray, mu_pl: np.ndarray, dt: float, name: str = "multipliers.csv"):
        """Long format: one row per (multiplier, t, node)"""
        frames = []
        for label, values in (("mu_N", mu_N), ("mu_pl", mu_pl)):
            nt1, nx = values.shape
            t = np.repeat(np.arange(nt1) * dt, nx)
            node = np.tile(np.arange(nx), nt1)
            frames.append(pd.DataFrame({"multiplier": label, "t": t, "node": node, "value": values.ravel()}))
        return self.write_table(pd.concat(frames, ignore_index=True), name)

    def write_monitors(self, states, monitors, dom, name: str = "monitors.csv") -> Path:
        """Time series of p = pbar + ptil at the grid nodes nearest to reference points (x, z)"""
        pairs = np.asarray(monitors, dtype=float).reshape(-1, 2)
        data = {"t": np.arange(states.Nt + 1) * states.dt}
        for k, (px, pz) in enumerate(pairs):
            i = int(np.argmin(np.abs(dom.x - px)))
            j = int(np.argmin(np.abs(dom.z - pz)))
            data[f"monitor_{k}"] = states.pressure[:, i, j]
        return self.write_table(pd.DataFrame(data), name)

    def write_operator(self, matrix, name: str) -> Path:
        """Coordinate-list dump (row, col, value) for debugging"""
        coo = matrix.tocoo()
        order = np.lexsort((coo.col, coo.row))
        frame = pd.DataFrame({"row": coo.row[order], "col": coo.col[order], "value": coo.data[order]})
        return self.write_table(frame, name)

    def write_config(self, config, name: str = "effective_config.ini") -> Path:
        path = self.out_dir / name
        self._write_text(path, config.to_ini())
        return path

    def write_checkpoint(self, iteration: int, controls, x: np.ndarray):
        directory = self.out_dir / "checkpoint"
        self._write_bytes(directory / "g.bin", encode_field(controls.g))
        self._write_bytes(directory / "h.bin", encode_field(controls.h))
        self.write_profile(x, controls.ell.ell, "checkpoint/profile.csv")
        # written last so that a partial checkpoint is never picked up
        self.write_table(pd.DataFrame({"iteration": [iteration]}), "checkpoint/iteration.csv")
        logger.debug(f"Checkpoint at iteration {iteration}")
