"""Pure-Python retrieval and reservoir kernels.

Bit-for-bit twins of ``_kernels.pyx``; used when the compiled extension is
missing or ``SCALECL_PURE_PYTHON`` is set.
"""

import numpy as np

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_C1 = 0xBF58476D1CE4E5B9
_C2 = 0x94D049BB133111EB
_INV53 = 1.0 / 9007199254740992.0
NEVER = -(1 << 62)
MAX_TRIES = 16


def _next(state):
    state = (state + _GOLDEN) & _MASK
    z = state
    z = ((z ^ (z >> 30)) * _C1) & _MASK
    z = ((z ^ (z >> 27)) * _C2) & _MASK
    return state, z ^ (z >> 31)


def _below(state, n):
    state, z = _next(state)
    r = int((z >> 11) * _INV53 * n)
    return state, (n - 1 if r >= n else r)


def random_doubles(rng, n):
    """Draw ``n`` uniforms in [0, 1) and advance ``rng[0]``."""
    state = int(rng[0])
    out = np.empty(n)
    for i in range(n):
        state, z = _next(state)
        out[i] = (z >> 11) * _INV53
    rng[0] = state
    return out


def reservoir_slots(seen, capacity, n, rng):
    """Slot decision for ``n`` new samples of one class (``-1`` = rejected)."""
    state = int(rng[0])
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        count = seen + i + 1
        if count <= capacity:
            out[i] = count - 1
        else:
            state, j = _below(state, count)
            out[i] = j if j < capacity else -1
    rng[0] = state
    return out


def draw_entries(group_cumw, group_offsets, group_classes, class_offsets,
                 class_slots, slot_uid, last_seen, rng, pos, window, n, out):
    """Two-level (group, class) draw with a sliding dedup window.

    A slot is blocked while its uid was retrieved at one of the previous
    ``window`` positions. Returns ``(pos, n_relaxed)``.
    """
    state = int(rng[0])
    ngroups = len(group_cumw)
    total = float(group_cumw[ngroups - 1])
    relaxed = 0
    for i in range(n):
        g = 0
        if ngroups > 1:
            state, z = _next(state)
            u = (z >> 11) * _INV53 * total
            while g < ngroups - 1 and not (group_cumw[g] > u):
                g += 1
        glo = int(group_offsets[g])
        nc = int(group_offsets[g + 1]) - glo
        state, k = _below(state, nc)
        ci = int(group_classes[glo + k])
        lo = int(class_offsets[ci])
        m = int(class_offsets[ci + 1]) - lo
        threshold = pos - window
        chosen = -1
        for _ in range(MAX_TRIES):
            state, k = _below(state, m)
            s = int(class_slots[lo + k])
            if last_seen[slot_uid[s]] < threshold:
                chosen = s
                break
        if chosen < 0:
            avail = 0
            for j in range(lo, lo + m):
                if last_seen[slot_uid[class_slots[j]]] < threshold:
                    avail += 1
            if avail > 0:
                state, k = _below(state, avail)
                for j in range(lo, lo + m):
                    s = int(class_slots[j])
                    if last_seen[slot_uid[s]] < threshold:
                        if k == 0:
                            chosen = s
                            break
                        k -= 1
            else:
                best = None
                for j in range(lo, lo + m):
                    s = int(class_slots[j])
                    t = last_seen[slot_uid[s]]
                    if best is None or t < best:
                        best, chosen = t, s
                relaxed += 1
        last_seen[slot_uid[chosen]] = pos
        out[i] = chosen
        pos += 1
    rng[0] = state
    return pos, relaxed
