import logging
from pathlib import Path
from datetime import datetime

import numpy as np


def setup_logging(log_dir: Path, level: int = logging.INFO):
    """Setup logging configuration"""
    handlers = [logging.StreamHandler()]
    try:
        log_dir.mkdir(parents=True, exist_ok=True)
        log_file = log_dir / f"aopt_{datetime.now().strftime('%Y%m%d_%H%M%S')}.log"
        handlers.insert(0, logging.FileHandler(log_file))
    except OSError:
        pass

    logging.basicConfig(
        level=level,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=handlers
    )

    return logging.getLogger(__name__)


def trapezoid_weights(n: int, h: float) -> np.ndarray:
    """Composite trapezoidal weights on n uniform nodes"""
    w = np.full(n, h, dtype=float)
    if n > 1:
        w[0] = w[-1] = 0.5 * h
    return w


def time_derivative(values: np.ndarray, dt: float) -> np.ndarray:
    """Centered first derivative in time, second-order one-sided at both ends"""
    return np.gradient(np.asarray(values, dtype=float), dt, axis=0, edge_order=2)


def loglog_slope(taus, remainders) -> float:
    """Least-squares slope of log(remainder) against log(tau)"""
    taus = np.asarray(taus, dtype=float)
    remainders = np.asarray(remainders, dtype=float)
    mask = remainders > 0
    if mask.sum() < 2:
        return float("nan")
    slope, _ = np.polyfit(np.log(taus[mask]), np.log(remainders[mask]), 1)
    return float(slope)
