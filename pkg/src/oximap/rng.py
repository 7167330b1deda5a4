"""Deterministic random streams.

Photon transport uses a counter-based generator: every photon owns a key
derived from (seed, wavelength index, photon index) and draws its k-th
variate by hashing (key, k) with the splitmix64 finalizer.  Trajectories
therefore do not depend on scheduling, batch size, or thread count.

Everything else (splits, noise augmentation, weight init, dropout) uses
numpy Generators fanned out from one global seed through named substreams.
"""

import hashlib

import numpy as np

MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)
GOLDEN = np.uint64(0x9E3779B97F4A7C15)
MIX_A = np.uint64(0xBF58476D1CE4E5B9)
MIX_B = np.uint64(0x94D049BB133111EB)
_KEY_PAD = np.uint64(0xD1B54A32D192ED03)

_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_INV53 = float(2.0 ** -53)


def mix64(z):
    """splitmix64 finalizer; accepts uint64 scalars or arrays."""
    z = np.uint64(z) if np.isscalar(z) or isinstance(z, int) else np.asarray(z, np.uint64)
    with np.errstate(over="ignore"):  # modular 2**64 arithmetic is the point
        z = (z ^ (z >> _S30)) * MIX_A
        z = (z ^ (z >> _S27)) * MIX_B
        return z ^ (z >> _S31)


def derive_key(seed, *indices):
    """Stream key for a (seed, index...) tuple, e.g. (seed, band, photon)."""
    with np.errstate(over="ignore"):
        k = mix64(np.uint64(int(seed) & 0xFFFFFFFFFFFFFFFF) + _KEY_PAD)
        for ix in indices:
            k = mix64((k ^ np.uint64(int(ix) & 0xFFFFFFFFFFFFFFFF)) + GOLDEN)
    return np.uint64(k)


def uniform_from(key, counters):
    """Uniform [0, 1) floats for draw counters under one stream key.

    counters may be a scalar or an integer array; output matches its shape.
    Bit-compatible with the scalar generator inside the compiled kernels.
    """
    ctr = np.asarray(counters, np.uint64)
    with np.errstate(over="ignore"):
        h = mix64(np.uint64(key) + GOLDEN * (ctr + np.uint64(1)))
    return np.asarray((h >> _S11), np.float64) * _INV53


def _name_tag(name: str) -> int:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def substream(seed, name: str, *extra) -> np.random.Generator:
    """Named numpy Generator derived from the global seed.

    extra integers (epoch number, sample index, ...) further split the
    stream without any coordination between call sites.
    """
    entropy = [int(seed), _name_tag(name)] + [int(e) for e in extra]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
