"""Named, counter-based random streams.

Each logical process (state transitions, initialization, reward noise,
characteristic-function probes, rollouts, ...) draws from its own Philox
stream derived from ``(seed, stream id)``. Two runs that share a seed
therefore share their state trajectory exactly, whatever else they do.
"""
import numpy as np

STREAMS = {
    "transitions": 0,
    "init": 1,
    "rewards": 2,
    "probe": 3,
    "rollouts": 4,
    "behavior": 5,
    "conformance": 6,
    "weights": 7,
    "pool": 8,
    "mc": 9,
    "search": 10,
}


def stream(seed, name):
    """Generator for stream ``name`` under ``seed``."""
    try:
        sid = STREAMS[name]
    except KeyError:
        raise KeyError(f"unknown stream {name!r}; known: {sorted(STREAMS)}") from None
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), sid])))
