"""Numba kernels shared by the index backends.

Every backend reports distances through ``_sqdist`` so that exact searches
agree bit-for-bit across backends, including tie order.
"""

import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def _sqdist(X, i, q):
    acc = 0.0
    for d in range(X.shape[1]):
        t = np.float64(X[i, d]) - np.float64(q[d])
        acc += t * t
    return acc


@njit(cache=True, nogil=True)
def _insert(best_d, best_i, count, k, d, i):
    """Insert (d, i) into the sorted top-k buffers; returns the new count."""
    if count == k:
        last = k - 1
        if d > best_d[last] or (d == best_d[last] and i >= best_i[last]):
            return count
        pos = last
    else:
        pos = count
        count += 1
    while pos > 0 and (best_d[pos - 1] > d or (best_d[pos - 1] == d and best_i[pos - 1] > i)):
        best_d[pos] = best_d[pos - 1]
        best_i[pos] = best_i[pos - 1]
        pos -= 1
    best_d[pos] = d
    best_i[pos] = i
    return count


@njit(cache=True, nogil=True)
def _heap_push(keys, slots, size, key, slot):
    pos = size
    keys[pos] = key
    slots[pos] = slot
    while pos > 0:
        parent = (pos - 1) >> 1
        if keys[parent] <= keys[pos]:
            break
        keys[parent], keys[pos] = keys[pos], keys[parent]
        slots[parent], slots[pos] = slots[pos], slots[parent]
        pos = parent
    return size + 1


@njit(cache=True, nogil=True)
def _heap_pop(keys, slots, size):
    """Remove the minimum; returns (key, slot, new_size)."""
    key = keys[0]
    slot = slots[0]
    size -= 1
    keys[0] = keys[size]
    slots[0] = slots[size]
    pos = 0
    while True:
        left = 2 * pos + 1
        if left >= size:
            break
        child = left
        if left + 1 < size and keys[left + 1] < keys[left]:
            child = left + 1
        if keys[pos] <= keys[child]:
            break
        keys[pos], keys[child] = keys[child], keys[pos]
        slots[pos], slots[child] = slots[child], slots[pos]
        pos = child
    return key, slot, size


@njit(cache=True, nogil=True)
def rerank(X, q, cand, k, out_i, out_d):
    """Exact top-k among candidate rows; returns how many were filled."""
    count = 0
    for j in range(cand.shape[0]):
        i = cand[j]
        count = _insert(out_d, out_i, count, k, _sqdist(X, i, q), i)
    return count


@njit(cache=True, nogil=True)
def kd_search(X, Q, k, roots, split_dim, split_val, left, right, leaf_start, leaf_end,
              perm, max_checks, eps_scale, out_i, out_d):
    """Best-bin-first search over one or more KD-trees sharing one queue.

    Queue keys are exact squared distances from the query to each cell,
    maintained incrementally from per-dimension offsets, so pruning with
    ``key * eps_scale > worst`` is sound; ``eps_scale = (1 + eps)**2``.
    ``max_checks <= 0`` means unlimited leaf visits.
    """
    n, dim = X.shape
    cap = split_dim.shape[0] + roots.shape[0] + 1
    keys = np.empty(cap, np.float64)
    slots = np.empty(cap, np.int64)
    e_node = np.empty(cap, np.int64)
    e_off = np.empty((cap, dim), np.float64)
    stamp = np.zeros(n, np.int64)
    off = np.empty(dim, np.float64)
    for qi in range(Q.shape[0]):
        q = Q[qi]
        bd = out_d[qi]
        bi = out_i[qi]
        count = 0
        size = 0
        nslot = 0
        checks = 0
        for t in range(roots.shape[0]):
            e_node[nslot] = roots[t]
            e_off[nslot, :] = 0.0
            size = _heap_push(keys, slots, size, 0.0, nslot)
            nslot += 1
        while size > 0:
            bound, slot, size = _heap_pop(keys, slots, size)
            if count == k and bound * eps_scale > bd[k - 1]:
                break
            node = e_node[slot]
            off[:] = e_off[slot]
            while left[node] >= 0:
                d = split_dim[node]
                diff = np.float64(q[d]) - np.float64(split_val[node])
                if diff < 0.0:
                    near = left[node]
                    far = right[node]
                else:
                    near = right[node]
                    far = left[node]
                fb = bound - off[d] * off[d] + diff * diff
                if not (count == k and fb * eps_scale > bd[k - 1]):
                    e_node[nslot] = far
                    e_off[nslot, :] = off
                    e_off[nslot, d] = abs(diff)
                    size = _heap_push(keys, slots, size, fb, nslot)
                    nslot += 1
                node = near
            for p in range(leaf_start[node], leaf_end[node]):
                gid = perm[p]
                if stamp[gid] == qi + 1:
                    continue
                stamp[gid] = qi + 1
                count = _insert(bd, bi, count, k, _sqdist(X, gid, q), gid)
            checks += 1
            if max_checks > 0 and checks >= max_checks:
                break


@njit(cache=True, nogil=True)
def hk_search(X, Q, k, centers, radius, child_start, child_count, leaf_start, leaf_end,
              perm, max_checks, eps_scale, out_i, out_d):
    """Best-bin-first search of a hierarchical k-means tree.

    Branches are visited in order of squared distance to their centre; a
    branch is skipped when ``(|q - c| - radius)^2`` already exceeds the
    current k-th distance, which keeps exhaustive searches exact.
    """
    n_nodes = centers.shape[0]
    keys = np.empty(n_nodes + 1, np.float64)
    slots = np.empty(n_nodes + 1, np.int64)
    lb = np.empty(n_nodes, np.float64)
    for qi in range(Q.shape[0]):
        q = Q[qi]
        bd = out_d[qi]
        bi = out_i[qi]
        count = 0
        checks = 0
        lb[0] = 0.0
        size = _heap_push(keys, slots, 0, 0.0, 0)
        while size > 0:
            _, node, size = _heap_pop(keys, slots, size)
            if count == k and lb[node] * eps_scale > bd[k - 1]:
                continue
            while child_count[node] > 0:
                c0 = child_start[node]
                best = -1
                best_d = np.inf
                for c in range(c0, c0 + child_count[node]):
                    dc = _sqdist(centers, c, q)
                    gap = np.sqrt(dc) - radius[c]
                    lb[c] = gap * gap if gap > 0.0 else 0.0
                    if dc < best_d:
                        if best >= 0:
                            size = _maybe_push(keys, slots, size, lb, best, best_d, count, k, bd, eps_scale)
                        best = c
                        best_d = dc
                    else:
                        size = _maybe_push(keys, slots, size, lb, c, dc, count, k, bd, eps_scale)
                node = best
                if count == k and lb[node] * eps_scale > bd[k - 1]:
                    node = -1
                    break
            if node < 0:
                continue
            for p in range(leaf_start[node], leaf_end[node]):
                gid = perm[p]
                count = _insert(bd, bi, count, k, _sqdist(X, gid, q), gid)
            checks += 1
            if max_checks > 0 and checks >= max_checks:
                break


@njit(cache=True, nogil=True)
def _maybe_push(keys, slots, size, lb, c, dc, count, k, bd, eps_scale):
    if count == k and lb[c] * eps_scale > bd[k - 1]:
        return size
    return _heap_push(keys, slots, size, dc, c)


@njit(cache=True, nogil=True)
def adc_table_sum(tables, codes, out):
    """out[i] = sum_j tables[j, codes[i, j]]."""
    n, m = codes.shape
    for i in range(n):
        acc = 0.0
        for j in range(m):
            acc += tables[j, codes[i, j]]
        out[i] = acc


@njit(cache=True, nogil=True)
def nearest_center(X, C, labels, dists):
    n, dim = X.shape
    for i in range(n):
        best = np.inf
        arg = 0
        for c in range(C.shape[0]):
            acc = 0.0
            for d in range(dim):
                t = X[i, d] - C[c, d]
                acc += t * t
            if acc < best:
                best = acc
                arg = c
        labels[i] = arg
        dists[i] = best
