"""Counter-based random streams.

Every draw is a pure function of ``(seed, stream_id, counter)``: the stream
key is derived by hashing the seed and the stream id, and the ``j``-th
output of a stream is the SplitMix64 output ``mix(key + (j + 1) * GOLDEN)``.
Nothing is carried between draws, so any number of workers can generate
any subset of streams in any order and obtain identical values.
"""

import numba as nb
import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
_STREAM_SALT = 0xD1B54A32D192ED03

# Stream domains keep the dynamical and i.i.d. ensembles disjoint.
DOMAIN_TRAJECTORY = 0
DOMAIN_PLAN = 1
DOMAIN_IID = 2
DOMAIN_AUX = 3

_U_GOLDEN = np.uint64(GOLDEN)
_U_SALT = np.uint64(_STREAM_SALT)
_U_M1 = np.uint64(0xBF58476D1CE4E5B9)
_U_M2 = np.uint64(0x94D049BB133111EB)
_U_30 = np.uint64(30)
_U_27 = np.uint64(27)
_U_31 = np.uint64(31)
_U_11 = np.uint64(11)
_U_ONE = np.uint64(1)
_INV_2_53 = 1.0 / 9007199254740992.0


def mix64(z):
    """SplitMix64 finalizer on a Python int (reference implementation)."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def stream_key(seed, stream_id):
    return mix64(mix64(seed ^ GOLDEN) ^ mix64((stream_id + _STREAM_SALT) & MASK64))


def stream_id_for(domain, n_index, sample_index):
    """Pack ``(domain, n-index, sample-index)`` into one 64-bit stream id."""
    if not 0 <= sample_index < (1 << 40):
        raise ValueError("sample index out of range")
    if not 0 <= n_index < (1 << 16):
        raise ValueError("n index out of range")
    return (domain << 56) | (n_index << 40) | sample_index


def raw64(seed, stream_id, counter):
    return mix64((stream_key(seed, stream_id) + (counter + 1) * GOLDEN) & MASK64)


def uniform(seed, stream_id, counter):
    """Reference uniform in [0, 1) with 53 random bits."""
    return (raw64(seed, stream_id, counter) >> 11) * _INV_2_53


@nb.njit(cache=True, inline="always")
def nb_mix64(z):
    z = np.uint64(z)
    z = (z ^ (z >> _U_30)) * _U_M1
    z = (z ^ (z >> _U_27)) * _U_M2
    return z ^ (z >> _U_31)


@nb.njit(cache=True)
def nb_stream_key(seed, stream_id):
    seed = np.uint64(seed)
    stream_id = np.uint64(stream_id)
    return nb_mix64(nb_mix64(seed ^ _U_GOLDEN) ^ nb_mix64(stream_id + _U_SALT))


@nb.njit(cache=True, inline="always")
def nb_uniform(key, counter):
    # int64 + uint64 promotes to float64 in numba; keep everything unsigned
    z = nb_mix64(np.uint64(key) + (np.uint64(counter) + _U_ONE) * _U_GOLDEN)
    return np.float64(z >> _U_11) * _INV_2_53


def uniforms(seed, stream_id, count, start=0):
    """Vector of ``count`` uniforms from one stream, counters ``start..``."""
    key = np.uint64(nb_stream_key(np.uint64(seed), np.uint64(stream_id)))
    return _fill_uniforms(key, np.uint64(start), count)


@nb.njit(cache=True)
def _fill_uniforms(key, start, count):
    out = np.empty(count)
    for j in range(count):
        out[j] = nb_uniform(key, start + np.uint64(j))
    return out
