"""Named random substreams derived from one master seed."""
import hashlib

import numpy as np


def _key_int(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    digest = hashlib.blake2b(str(part).encode("utf-8"), digest_size=4).digest()
    return int.from_bytes(digest, "little")


def seed_sequence(master_seed, *names) -> np.random.SeedSequence:
    """SeedSequence for the substream ``names`` under ``master_seed``.

    Names may be strings or integers; the mapping depends only on the values,
    never on call order, so parallel consumers get scheduling-independent
    streams.
    """
    return np.random.SeedSequence(int(master_seed), spawn_key=tuple(_key_int(n) for n in names))


def substream(master_seed, *names) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed_sequence(master_seed, *names)))


def derive_seed(master_seed, *names) -> int:
    """A 63-bit integer seed for the named substream."""
    return int(seed_sequence(master_seed, *names).generate_state(2, np.uint32).view(np.uint64)[0] >> 1)
