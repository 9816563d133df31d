"""Numba kernel for the event-loop dynamics.

One jitted function drives both generation mode (returns = coupling + news)
and replay mode (observed returns drive the tensor, residuals recovered
outside). Python-level wrappers live in :mod:`pricequake.engine`; the pure
Python twin used for cross-checking is there as well.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def run_dynamics(
    n,
    ev_ex,
    group_start,
    weights,
    r_c,
    drive,
    present,
    replay_mode,
    ret_out,
    coup_out,
    nstar_out,
    act_off,
    act_src,
    act_val,
    col_off,
    col_src,
):
    """Walk the calendar once, mutating the stress tensor event by event.

    Events inside one group are read against the same pre-group tensor;
    writes are applied in two phases (priced-in row resets, then column
    pushes with discard of still-supercritical entries) so the merged result
    is independent of within-group order.

    Packed outputs: event ``idx`` owns ``act_src/act_val[act_off[idx]:
    act_off[idx+1]]`` (gate-open counterparts and their pre-event stresses)
    and ``col_src[col_off[idx]:col_off[idx+1]]`` (rows whose entry toward
    this exchange was discarded by the push). Returns (apos, cpos) fill
    levels.
    """
    tensor = np.zeros((n, n))
    apos = 0
    cpos = 0
    for g in range(len(group_start) - 1):
        start = group_start[g]
        end = group_start[g + 1]

        # Phase 1: evaluate every event in the group on the pre-group tensor.
        for idx in range(start, end):
            if present[idx]:
                i = ev_ex[idx]
                nstar = 0
                coup = 0.0
                for j in range(n):
                    if j == i:
                        continue
                    v = tensor[i, j]
                    if v > r_c or v < -r_c:
                        nstar += 1
                        coup += weights[i, j] * v
                        act_src[apos] = j
                        act_val[apos] = v
                        apos += 1
                if nstar > 0:
                    coup = coup / nstar
                else:
                    coup = 0.0
                coup_out[idx] = coup
                nstar_out[idx] = nstar
                if replay_mode:
                    ret_out[idx] = drive[idx]
                else:
                    ret_out[idx] = coup + drive[idx]
            act_off[idx + 1] = apos

        # Phase 2: reset the entries each event just priced in (its row).
        for idx in range(start, end):
            if present[idx]:
                i = ev_ex[idx]
                for p in range(act_off[idx], act_off[idx + 1]):
                    tensor[i, act_src[p]] = 0.0

        # Phase 3: push each event's return onto every other exchange's
        # stress toward it, discarding entries still above threshold first.
        for idx in range(start, end):
            if present[idx]:
                i = ev_ex[idx]
                r = ret_out[idx]
                for k in range(n):
                    if k == i:
                        continue
                    v = tensor[k, i]
                    if v > r_c or v < -r_c:
                        tensor[k, i] = 0.0
                        col_src[cpos] = k
                        cpos += 1
                    tensor[k, i] += r
            col_off[idx + 1] = cpos

    return apos, cpos


@njit(cache=True, nogil=True)
def replay_residuals(n, ev_ex, group_start, weights, r_c, drive, present, resid_out):
    """Lean replay pass: only the residual series, no bookkeeping.

    This is the calibration hot path; it must stay numerically identical to
    :func:`run_dynamics` in replay mode.
    """
    tensor = np.zeros((n, n))
    for g in range(len(group_start) - 1):
        start = group_start[g]
        end = group_start[g + 1]
        for idx in range(start, end):
            if present[idx]:
                i = ev_ex[idx]
                nstar = 0
                coup = 0.0
                for j in range(n):
                    if j == i:
                        continue
                    v = tensor[i, j]
                    if v > r_c or v < -r_c:
                        nstar += 1
                        coup += weights[i, j] * v
                if nstar > 0:
                    coup = coup / nstar
                else:
                    coup = 0.0
                resid_out[idx] = drive[idx] - coup
        for idx in range(start, end):
            if present[idx]:
                i = ev_ex[idx]
                for j in range(n):
                    if j == i:
                        continue
                    v = tensor[i, j]
                    if v > r_c or v < -r_c:
                        tensor[i, j] = 0.0
        for idx in range(start, end):
            if present[idx]:
                i = ev_ex[idx]
                r = drive[idx]
                for k in range(n):
                    if k == i:
                        continue
                    v = tensor[k, i]
                    if v > r_c or v < -r_c:
                        tensor[k, i] = 0.0
                    tensor[k, i] += r
