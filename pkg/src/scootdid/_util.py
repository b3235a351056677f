"""Small shared helpers: keyed RNG substreams, ordered thread maps, file digests."""

from __future__ import annotations

import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, Sequence

import numpy as np

LOG = logging.getLogger("scootdid")


def configure_logging() -> None:
    """Set the package log level from SCOOTDID_LOG (default WARNING)."""
    level = os.environ.get("SCOOTDID_LOG", "WARNING").upper()
    logging.basicConfig(format="%(levelname)s %(name)s: %(message)s")
    try:
        LOG.setLevel(level)
    except ValueError:
        LOG.setLevel(logging.WARNING)


def substream(seed: int, *key: int) -> np.random.Generator:
    """Counter-based generator for the (seed, *key) slot.

    Every random draw in the package goes through one of these streams, so a
    result depends only on the seed and the logical task key, never on
    execution order or thread scheduling.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def parallel_map(fn: Callable, items: Sequence, threads: int = 1) -> list:
    """Map fn over items, preserving input order in the result list."""
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def fmt_float(x: float) -> str:
    """Round-trip float formatting used in machine-facing CSV output."""
    if x != x:  # NaN sentinel
        return "nan"
    return repr(float(x))


def write_csv(path: str, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    """Write rows with \\n line endings so output bytes are platform-stable."""
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(str(c) for c in row) + "\n")


def write_json(path: str, obj) -> None:
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")


def sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
