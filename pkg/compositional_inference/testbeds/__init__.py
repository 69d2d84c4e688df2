"""
Experiment-ready system builders: mass-spring-damper chains, Kuramoto power
grids from MATPOWER cases, and generator-seeded partitioning.
"""

import os
from pathlib import Path

DATA_DIR_ENV = "COMPINF_DATA_DIR"


def data_dir() -> Path:
    """Directory holding the MATPOWER case files, overridable via ``COMPINF_DATA_DIR``."""
    override = os.environ.get(DATA_DIR_ENV)
    if override:
        return Path(override)
    return Path(__file__).resolve().parent.parent / "data"
