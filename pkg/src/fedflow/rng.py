"""Named random substreams derived from a single experiment seed.

Every random draw in the package flows through one of these helpers, so a
run is reproducible bit-for-bit from its seed alone, independent of call
order, worker count, or which subcommand triggered the draw.  Streams are
identified by a tuple of tags (strings or integers); distinct tag tuples
yield statistically independent streams.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _tag_word(tag: int | str) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag) & _MASK64
    digest = hashlib.sha256(str(tag).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def _sequence(seed: int, tags: tuple) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed) & _MASK64] + [_tag_word(t) for t in tags])


def substream(seed: int, *tags: int | str) -> np.random.Generator:
    """Return an independent generator for the (seed, *tags) stream."""
    return np.random.default_rng(_sequence(seed, tags))


def derive_seed(seed: int, *tags: int | str) -> int:
    """Return a stable 64-bit seed identifying the (seed, *tags) stream.

    Useful where an integer seed must be handed across a process boundary
    instead of a generator object.
    """
    return int(_sequence(seed, tags).generate_state(1, np.uint64)[0])
