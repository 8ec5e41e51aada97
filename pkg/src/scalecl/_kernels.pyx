# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled retrieval and reservoir kernels (see _kernels_py for semantics)."""

import numpy as np
from libc.stdint cimport uint64_t, int64_t

cdef uint64_t _GOLDEN = 0x9E3779B97F4A7C15ULL
cdef uint64_t _C1 = 0xBF58476D1CE4E5B9ULL
cdef uint64_t _C2 = 0x94D049BB133111EBULL
cdef double _INV53 = 1.0 / 9007199254740992.0
cdef int MAX_TRIES = 16
NEVER = -(1 << 62)


cdef inline uint64_t _next(uint64_t* state) nogil:
    state[0] += _GOLDEN
    cdef uint64_t z = state[0]
    z = (z ^ (z >> 30)) * _C1
    z = (z ^ (z >> 27)) * _C2
    return z ^ (z >> 31)


cdef inline double _double(uint64_t* state) nogil:
    return <double>(_next(state) >> 11) * _INV53


cdef inline int64_t _below(uint64_t* state, int64_t n) nogil:
    cdef int64_t r = <int64_t>(_double(state) * <double>n)
    if r >= n:
        r = n - 1
    return r


def random_doubles(uint64_t[::1] rng, Py_ssize_t n):
    cdef uint64_t state = rng[0]
    out = np.empty(n)
    cdef double[::1] o = out
    cdef Py_ssize_t i
    for i in range(n):
        o[i] = _double(&state)
    rng[0] = state
    return out


def reservoir_slots(int64_t seen, int64_t capacity, Py_ssize_t n, uint64_t[::1] rng):
    cdef uint64_t state = rng[0]
    out = np.empty(n, dtype=np.int64)
    cdef int64_t[::1] o = out
    cdef Py_ssize_t i
    cdef int64_t count, j
    for i in range(n):
        count = seen + i + 1
        if count <= capacity:
            o[i] = count - 1
        else:
            j = _below(&state, count)
            o[i] = j if j < capacity else -1
    rng[0] = state
    return out


def draw_entries(double[::1] group_cumw, int64_t[::1] group_offsets,
                 int64_t[::1] group_classes, int64_t[::1] class_offsets,
                 int64_t[::1] class_slots, int64_t[::1] slot_uid,
                 int64_t[::1] last_seen, uint64_t[::1] rng,
                 int64_t pos, int64_t window, Py_ssize_t n, int64_t[::1] out):
    cdef uint64_t state = rng[0]
    cdef Py_ssize_t ngroups = group_cumw.shape[0]
    cdef double total = group_cumw[ngroups - 1]
    cdef int64_t relaxed = 0
    cdef Py_ssize_t i, g, j
    cdef int64_t glo, nc, ci, lo, m, threshold, chosen, s, k, avail, t, best
    cdef int tries
    cdef double u
    with nogil:
        for i in range(n):
            g = 0
            if ngroups > 1:
                u = _double(&state) * total
                while g < ngroups - 1 and not (group_cumw[g] > u):
                    g += 1
            glo = group_offsets[g]
            nc = group_offsets[g + 1] - glo
            ci = group_classes[glo + _below(&state, nc)]
            lo = class_offsets[ci]
            m = class_offsets[ci + 1] - lo
            threshold = pos - window
            chosen = -1
            for tries in range(MAX_TRIES):
                s = class_slots[lo + _below(&state, m)]
                if last_seen[slot_uid[s]] < threshold:
                    chosen = s
                    break
            if chosen < 0:
                avail = 0
                for j in range(lo, lo + m):
                    if last_seen[slot_uid[class_slots[j]]] < threshold:
                        avail += 1
                if avail > 0:
                    k = _below(&state, avail)
                    for j in range(lo, lo + m):
                        s = class_slots[j]
                        if last_seen[slot_uid[s]] < threshold:
                            if k == 0:
                                chosen = s
                                break
                            k -= 1
                else:
                    best = 0
                    for j in range(lo, lo + m):
                        s = class_slots[j]
                        t = last_seen[slot_uid[s]]
                        if chosen < 0 or t < best:
                            best = t
                            chosen = s
                    relaxed += 1
            last_seen[slot_uid[chosen]] = pos
            out[i] = chosen
            pos += 1
    rng[0] = state
    return pos, relaxed
