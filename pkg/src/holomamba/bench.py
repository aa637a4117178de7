"""Single-sequence inference latency and peak-allocation measurements."""
from __future__ import annotations

import statistics
import time
import tracemalloc

import numpy as np

from .errors import ConfigError
from .hrr import num_windows
from .model import HoloMambaRec
from .tensor import Rng

MODES = ("scan", "recurrent", "bundled")


def _runner(model: HoloMambaRec, mode: str, items: np.ndarray, attrs: np.ndarray):
    if mode == "scan":
        return lambda: model.final_logits(items[None], attrs[None], compressed=False)
    if mode == "bundled":
        return lambda: model.final_logits(items[None], attrs[None], compressed=True)
    if mode == "recurrent":
        return lambda: model.forward_recurrent(items, attrs, compressed=False)
    raise ConfigError(f"unknown bench mode {mode!r}; expected one of {MODES}")


def peak_bytes(fn) -> int:
    """Peak bytes allocated (numpy buffers included) while ``fn`` runs."""
    was_tracing = tracemalloc.is_tracing()
    if not was_tracing:
        tracemalloc.start()
    tracemalloc.reset_peak()
    base = tracemalloc.get_traced_memory()[0]
    fn()
    peak = tracemalloc.get_traced_memory()[1]
    if not was_tracing:
        tracemalloc.stop()
    return max(0, peak - base)


def bench(model: HoloMambaRec, L: int, mode: str, repeats: int = 20, warmup: int = 2, seed: int = 0) -> dict:
    """Median latency (ms) and peak transient allocation of final-logit
    inference for one random length-``L`` sequence."""
    if L < 1:
        raise ConfigError(f"L must be >= 1, got {L}")
    rng = Rng(seed, L)
    items = rng.integers(1, model.config.vocab_items, L)
    attrs = rng.integers(1, model.config.vocab_attrs, L)
    fn = _runner(model, mode, items, attrs)
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    positions = num_windows(L, model.config.bundle_k) if mode == "bundled" else L
    return {"mode": mode, "L": L, "latency_ms": statistics.median(times),
            "peak_bytes": int(peak_bytes(fn)), "positions": positions}


def state_bytes(model: HoloMambaRec) -> int:
    """Size of the recurrent state carried between steps; independent of L."""
    return sum(s.nbytes for s in model.init_state())
