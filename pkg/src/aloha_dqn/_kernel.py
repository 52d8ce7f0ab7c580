"""Compiled slot loop for policies whose transmit probability is a lookup.

Two lookup kinds cover every frozen policy in the package:

* ``TABLE``: probability indexed by the decision observation (8 entries).
* ``BACKOFF``: probability indexed by a per-user collision counter.

The loop consumes exactly the same pre-drawn randomness as the pure Python
path in :mod:`aloha_dqn.env`, so both produce identical logs.
"""

import numba
import numpy as np

TABLE = 0
BACKOFF = 1


@numba.njit(cache=True)
def run_chunk(
    arrivals,
    uniforms,
    n_slots,
    saturated,
    kind,
    table,
    symmetric,
    cmax,
    buffer,
    prev_action,
    prev_feedback,
    aop,
    counters,
    out_succ,
    out_aop,
    out_arr,
    out_disc,
    out_fb,
    offset,
):
    n_users = buffer.shape[0]
    actions = np.zeros(n_users, dtype=np.int64)
    full = np.zeros(n_users, dtype=np.int64)
    for t in range(n_slots):
        k = offset + t
        n_tx = 0
        for n in range(n_users):
            u = arrivals[t, n]
            total = buffer[n] + u
            disc = total - 1 if total > 1 else 0
            b_mid = 1 if total > 0 else 0
            if saturated:
                b_mid = 1
            full[n] = b_mid
            out_arr[k, n] = u
            out_disc[k, n] = disc
            a = 0
            if b_mid == 1:
                if kind == TABLE:
                    p = table[4 * prev_action[n] + 2 * prev_feedback[0]]
                else:
                    p = table[counters[n]]
                if uniforms[t, n] < p:
                    a = 1
            actions[n] = a
            n_tx += a
        fb = 0 if n_tx >= 2 else 1
        out_fb[k] = fb
        for n in range(n_users):
            a = actions[n]
            g = 1 if (a == 1 and fb == 1) else 0
            b_next = full[n] - g
            buffer[n] = b_next
            prev_action[n] = a
            aop[n] = aop[n] + 1 if b_next == 1 else 0
            out_succ[k, n] = g
            out_aop[k, n] = aop[n]
            if kind == BACKOFF:
                if fb == 0:
                    if symmetric or a == 1:
                        if counters[n] < cmax:
                            counters[n] += 1
                elif symmetric or a == 1:
                    counters[n] = 0
        prev_feedback[0] = fb
