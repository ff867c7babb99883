"""Hot loops: cluster labelling, heat-bath sweeps, Edwards-Sokal steps, enumeration.

Every kernel consumes pre-drawn uniforms, so the numba and pure-numpy paths
produce identical outputs for identical inputs.  Graph arrays follow the
layout built by :class:`rclab.rcmodel.FKGraph`: ``bu``/``bv`` bond endpoints,
CSR adjacency ``adj_ptr``/``adj_nbr``/``adj_bond`` and a per-node
``anchor`` flag (1 for region vertices and wired ghosts, 0 for free
exterior endpoints, whose isolated clusters are not counted).
"""

from __future__ import annotations

import numpy as np

from ._accel import USE_NUMBA, njit

# ---------------------------------------------------------------------------
# union-find labelling


@njit
def _find(parent, x):
    while parent[x] != x:
        parent[x] = parent[parent[x]]
        x = parent[x]
    return x


@njit
def _labels_uf(n, bu, bv, state):
    # union toward the smaller root, so every root is its component's minimum
    parent = np.arange(n)
    for b in range(bu.shape[0]):
        if state[b]:
            a = _find(parent, bu[b])
            c = _find(parent, bv[b])
            if a < c:
                parent[c] = a
            elif c < a:
                parent[a] = c
    lab = np.empty(n, np.int64)
    for i in range(n):
        lab[i] = _find(parent, i)
    return lab


def _labels_csgraph(n, bu, bv, state):
    from scipy.sparse import coo_matrix
    from scipy.sparse.csgraph import connected_components

    sel = np.asarray(state, dtype=bool)
    g = coo_matrix((np.ones(int(sel.sum()), dtype=np.int8), (bu[sel], bv[sel])), shape=(n, n))
    k, comp = connected_components(g, directed=False)
    root = np.full(k, n, dtype=np.int64)
    np.minimum.at(root, comp, np.arange(n, dtype=np.int64))
    return root[comp]


def labels(n: int, bu: np.ndarray, bv: np.ndarray, state: np.ndarray) -> np.ndarray:
    """Component label of every node; the label is the component's smallest node."""
    if USE_NUMBA:
        return _labels_uf(n, bu, bv, state)
    return _labels_csgraph(n, bu, bv, state)


def count_anchored(lab: np.ndarray, anchor: np.ndarray) -> int:
    return int(np.unique(lab[anchor.astype(bool)]).size)


# ---------------------------------------------------------------------------
# dynamic cluster labels for the heat-bath chain


@njit
def _bfs2(x, y, skip, state, mask, adj_ptr, adj_nbr, adj_bond, visit, ep, qa, qb):
    """Interleaved BFS from both ends of ``skip`` over open, unmasked bonds.

    Returns ``(connected, side, count)``.  When not connected, ``side`` names
    the exhausted search (0 for ``x``, 1 for ``y``) and its queue holds the
    whole component, ``count`` nodes long.
    """
    ep[0] += 1
    ea = 2 * ep[0]
    eb = ea + 1
    visit[x] = ea
    visit[y] = eb
    qa[0] = x
    qb[0] = y
    ha = 0
    ta = 1
    hb = 0
    tb = 1
    while True:
        if ha == ta:
            return False, 0, ta
        v = qa[ha]
        ha += 1
        for k in range(adj_ptr[v], adj_ptr[v + 1]):
            e = adj_bond[k]
            if e == skip or state[e] == 0 or mask[e] == 0:
                continue
            w = adj_nbr[k]
            if visit[w] == eb:
                return True, -1, 0
            if visit[w] != ea:
                visit[w] = ea
                qa[ta] = w
                ta += 1
        if hb == tb:
            return False, 1, tb
        v = qb[hb]
        hb += 1
        for k in range(adj_ptr[v], adj_ptr[v + 1]):
            e = adj_bond[k]
            if e == skip or state[e] == 0 or mask[e] == 0:
                continue
            w = adj_nbr[k]
            if visit[w] == ea:
                return True, -1, 0
            if visit[w] != eb:
                visit[w] = eb
                qb[tb] = w
                tb += 1


@njit
def _split(nodes, count, lab, sz, s0, s1, w0, w1, free, ftop):
    old = lab[nodes[0]]
    ftop[0] -= 1
    new = free[ftop[0]]
    a0 = 0
    a1 = 0
    for i in range(count):
        v = nodes[i]
        lab[v] = new
        a0 += w0[v]
        a1 += w1[v]
    sz[new] = count
    s0[new] = a0
    s1[new] = a1
    sz[old] -= count
    s0[old] -= a0
    s1[old] -= a1


@njit
def _merge(x, y, state, mask, adj_ptr, adj_nbr, adj_bond, lab, sz, s0, s1, free, ftop, qa):
    lx = lab[x]
    ly = lab[y]
    if sz[lx] < sz[ly]:
        small = lx
        big = ly
        start = x
    else:
        small = ly
        big = lx
        start = y
    lab[start] = big
    qa[0] = start
    h = 0
    t = 1
    while h < t:
        v = qa[h]
        h += 1
        for k in range(adj_ptr[v], adj_ptr[v + 1]):
            e = adj_bond[k]
            if state[e] == 0 or mask[e] == 0:
                continue
            w = adj_nbr[k]
            if lab[w] == small:
                lab[w] = big
                qa[t] = w
                t += 1
    sz[big] += sz[small]
    s0[big] += s0[small]
    s1[big] += s1[small]
    sz[small] = 0
    s0[small] = 0
    s1[small] = 0
    free[ftop[0]] = small
    ftop[0] += 1


def init_label_state(n, bu, bv, state, mask, w0, w1):
    """Label arrays ``(lab, sz, s0, s1, free, ftop)`` for the masked open graph."""
    lab = labels(n, bu, bv, (state & mask).astype(np.uint8))
    sz = np.bincount(lab, minlength=n).astype(np.int64)
    s0 = np.bincount(lab, weights=w0, minlength=n).astype(np.int64)
    s1 = np.bincount(lab, weights=w1, minlength=n).astype(np.int64)
    unused = np.flatnonzero(sz == 0)[::-1].astype(np.int64)
    free = np.zeros(n, dtype=np.int64)
    free[: unused.size] = unused
    ftop = np.array([unused.size], dtype=np.int64)
    return lab, sz, s0, s1, free, ftop


@njit
def hb_sweep(order, u, state, bu, bv, pb, q, track_full,
             adj_ptr, adj_nbr, adj_bond, allmask, anchor, zeros,
             lab, sz, s0, s1, free, ftop,
             has_c, cmask, isbot, istop,
             clab, csz, cs0, cs1, cfree, cftop,
             visit, ep, qa, qb):
    """Heat-bath update of the bonds in ``order`` using uniforms ``u``.

    With ``has_c`` the chain is conditioned on the decreasing event "no
    open path through ``cmask`` bonds joins an ``isbot`` node to an
    ``istop`` node"; openings that would violate it are refused.
    Returns the number of refused openings.
    """
    refused = 0
    for k in range(order.shape[0]):
        b = order[k]
        x = bu[b]
        y = bv[b]
        p = pb[b]
        cur = state[b]
        conn = True
        side = -1
        cnt = 0
        prob = p
        if track_full:
            if cur == 1 and u[k] < p / (p + (1.0 - p) * q):
                # stays open under either conditional law
                continue
            if cur == 1:
                conn, side, cnt = _bfs2(x, y, b, state, allmask, adj_ptr, adj_nbr, adj_bond,
                                        visit, ep, qa, qb)
                if not conn:
                    a_side = 0
                    if side == 0:
                        for i in range(cnt):
                            a_side += anchor[qa[i]]
                    else:
                        for i in range(cnt):
                            a_side += anchor[qb[i]]
                    a_other = s0[lab[x]] - a_side
                    if a_side > 0 and a_other > 0:
                        prob = p / (p + (1.0 - p) * q)
            else:
                lx = lab[x]
                ly = lab[y]
                if lx != ly:
                    conn = False
                    if s0[lx] > 0 and s0[ly] > 0:
                        prob = p / (p + (1.0 - p) * q)
        new = 1 if u[k] < prob else 0
        if has_c and cmask[b] == 1 and new == 1 and cur == 0:
            cx = clab[x]
            cy = clab[y]
            if cx != cy and ((cs0[cx] > 0 and cs1[cy] > 0) or (cs1[cx] > 0 and cs0[cy] > 0)):
                new = 0
                refused += 1
        if new == cur:
            continue
        if new == 0:
            if track_full and not conn:
                if side == 0:
                    _split(qa, cnt, lab, sz, s0, s1, anchor, zeros, free, ftop)
                else:
                    _split(qb, cnt, lab, sz, s0, s1, anchor, zeros, free, ftop)
            if has_c and cmask[b] == 1:
                cc, cside, ccnt = _bfs2(x, y, b, state, cmask, adj_ptr, adj_nbr, adj_bond,
                                        visit, ep, qa, qb)
                if not cc:
                    if cside == 0:
                        _split(qa, ccnt, clab, csz, cs0, cs1, isbot, istop, cfree, cftop)
                    else:
                        _split(qb, ccnt, clab, csz, cs0, cs1, isbot, istop, cfree, cftop)
            state[b] = 0
        else:
            if track_full and lab[x] != lab[y]:
                _merge(x, y, state, allmask, adj_ptr, adj_nbr, adj_bond,
                       lab, sz, s0, s1, free, ftop, qa)
            if has_c and cmask[b] == 1 and clab[x] != clab[y]:
                _merge(x, y, state, cmask, adj_ptr, adj_nbr, adj_bond,
                       clab, csz, cs0, cs1, cfree, cftop, qa)
            state[b] = 1
    return refused


# ---------------------------------------------------------------------------
# Edwards-Sokal step


@njit
def _component_anchor(start, skip, target, state, adj_ptr, adj_nbr, adj_bond, anchor, visit, ep, qa):
    """BFS from ``start`` avoiding ``skip``: (reaches target, anchor count)."""
    ep[0] += 1
    mark = 2 * ep[0]
    visit[start] = mark
    qa[0] = start
    h = 0
    t = 1
    found = start == target
    acc = 0
    while h < t:
        v = qa[h]
        h += 1
        acc += anchor[v]
        for k in range(adj_ptr[v], adj_ptr[v + 1]):
            e = adj_bond[k]
            if e == skip or state[e] == 0:
                continue
            w = adj_nbr[k]
            if visit[w] != mark:
                visit[w] = mark
                if w == target:
                    found = True
                qa[t] = w
                t += 1
    return found, acc


@njit
def free_ext_pass(fbonds, fnode, ubond, state, bu, bv, pb, q,
                  adj_ptr, adj_nbr, adj_bond, anchor, visit, ep, qa):
    """Heat-bath update of bonds ending at a free exterior node."""
    for i in range(fbonds.shape[0]):
        b = fbonds[i]
        f = fnode[i]
        other = bu[b] if bv[b] == f else bv[b]
        p = pb[b]
        busy = False
        for k in range(adj_ptr[f], adj_ptr[f + 1]):
            if adj_bond[k] != b and state[adj_bond[k]] == 1:
                busy = True
                break
        prob = p
        if busy:
            conn, a1 = _component_anchor(other, b, f, state, adj_ptr, adj_nbr, adj_bond,
                                         anchor, visit, ep, qa)
            if not conn:
                _, a2 = _component_anchor(f, b, other, state, adj_ptr, adj_nbr, adj_bond,
                                          anchor, visit, ep, qa)
                if a1 > 0 and a2 > 0:
                    prob = p / (p + (1.0 - p) * q)
        state[b] = 1 if ubond[b] < prob else 0


@njit
def _es_bonds_nb(lab, ucol, qint, ubond, pb, bu, bv, is_free_bond, state):
    n = lab.shape[0]
    color = np.empty(n, np.int64)
    for i in range(n):
        color[i] = np.int64(ucol[lab[i]] * qint)
    for b in range(bu.shape[0]):
        if is_free_bond[b]:
            continue
        if color[bu[b]] == color[bv[b]] and ubond[b] < pb[b]:
            state[b] = 1
        else:
            state[b] = 0


def es_step(n, bu, bv, pb, state, qint, is_free_bond, fbonds, fnode, ucol, ubond,
            adj_ptr, adj_nbr, adj_bond, anchor, visit, ep, qa):
    """One Edwards-Sokal sweep in place: colour clusters, then reopen monochromatic bonds."""
    lab = labels(n, bu, bv, state)
    if USE_NUMBA:
        _es_bonds_nb(lab, ucol, qint, ubond, pb, bu, bv, is_free_bond, state)
    else:
        color = (ucol[lab] * qint).astype(np.int64)
        keep = ~is_free_bond.astype(bool)
        new = ((color[bu] == color[bv]) & (ubond < pb)).astype(np.uint8)
        state[keep] = new[keep]
    if fbonds.size:
        free_ext_pass(fbonds, fnode, ubond, state, bu, bv, pb, float(qint),
                      adj_ptr, adj_nbr, adj_bond, anchor, visit, ep, qa)


# ---------------------------------------------------------------------------
# exhaustive enumeration


@njit
def _enum_nb(n, bu, bv, logp, log1mp, anchor, logq):
    m = bu.shape[0]
    total = 1 << m
    out = np.empty(total, np.float64)
    parent = np.empty(n, np.int64)
    seen = np.zeros(n, np.int64)
    for c in range(total):
        lw = 0.0
        for i in range(n):
            parent[i] = i
        for b in range(m):
            if (c >> b) & 1:
                lw += logp[b]
                a = _find(parent, bu[b])
                d = _find(parent, bv[b])
                if a != d:
                    parent[d] = a
            else:
                lw += log1mp[b]
        cnt = 0
        for i in range(n):
            if anchor[i]:
                r = _find(parent, i)
                if seen[r] != c + 1:
                    seen[r] = c + 1
                    cnt += 1
        out[c] = lw + cnt * logq
    return out


def _enum_numpy(n, bu, bv, logp, log1mp, anchor, logq, chunk=1 << 14):
    m = bu.size
    total = 1 << m
    out = np.empty(total)
    anchored = np.flatnonzero(anchor)
    for start in range(0, total, chunk):
        idx = np.arange(start, min(total, start + chunk), dtype=np.int64)
        bits = ((idx[:, None] >> np.arange(m)) & 1).astype(bool)
        with np.errstate(invalid="ignore"):
            lw = np.where(bits, logp, log1mp).sum(axis=1)
        lab = np.broadcast_to(np.arange(n), (idx.size, n)).copy()
        while True:
            before = lab.copy()
            for b in range(m):
                mn = np.minimum(lab[:, bu[b]], lab[:, bv[b]])
                sel = bits[:, b]
                lab[sel, bu[b]] = mn[sel]
                lab[sel, bv[b]] = mn[sel]
            if np.array_equal(before, lab):
                break
        la = np.sort(lab[:, anchored], axis=1)
        cnt = (np.diff(la, axis=1) != 0).sum(axis=1) + (la.shape[1] > 0)
        out[idx] = lw + cnt * logq
    return out


def enumerate_logweights(n, bu, bv, logp, log1mp, anchor, logq) -> np.ndarray:
    """Unnormalised log-weight of every configuration; bit b of the index is bond b."""
    anchor = np.asarray(anchor, dtype=np.int64)
    if USE_NUMBA:
        return _enum_nb(n, bu, bv, logp, log1mp, anchor, logq)
    return _enum_numpy(n, bu, bv, logp, log1mp, anchor, logq)


@njit
def _enum_connect_nb(n, bu, bv, amask, bmask):
    m = bu.shape[0]
    total = 1 << m
    out = np.zeros(total, np.uint8)
    parent = np.empty(n, np.int64)
    hit = np.zeros(n, np.int64)
    for c in range(total):
        for i in range(n):
            parent[i] = i
        for b in range(m):
            if (c >> b) & 1:
                a = _find(parent, bu[b])
                d = _find(parent, bv[b])
                if a != d:
                    parent[d] = a
        for i in range(n):
            if amask[i]:
                hit[_find(parent, i)] = c + 1
        for i in range(n):
            if bmask[i] and hit[_find(parent, i)] == c + 1:
                out[c] = 1
                break
    return out


def _enum_connect_numpy(n, bu, bv, amask, bmask, chunk=1 << 14):
    m = bu.size
    total = 1 << m
    out = np.zeros(total, np.uint8)
    ia = np.flatnonzero(amask)
    ib = np.flatnonzero(bmask)
    for start in range(0, total, chunk):
        idx = np.arange(start, min(total, start + chunk), dtype=np.int64)
        bits = ((idx[:, None] >> np.arange(m)) & 1).astype(bool)
        lab = np.broadcast_to(np.arange(n), (idx.size, n)).copy()
        while True:
            before = lab.copy()
            for b in range(m):
                mn = np.minimum(lab[:, bu[b]], lab[:, bv[b]])
                sel = bits[:, b]
                lab[sel, bu[b]] = mn[sel]
                lab[sel, bv[b]] = mn[sel]
            if np.array_equal(before, lab):
                break
        la = lab[:, ia]
        lb = lab[:, ib]
        out[idx] = (la[:, :, None] == lb[:, None, :]).any(axis=(1, 2))
    return out


def enumerate_connections(n, bu, bv, amask, bmask) -> np.ndarray:
    """Per configuration, whether some node of ``amask`` reaches some node of ``bmask``."""
    amask = np.asarray(amask, dtype=np.uint8)
    bmask = np.asarray(bmask, dtype=np.uint8)
    if USE_NUMBA:
        return _enum_connect_nb(n, bu, bv, amask, bmask)
    return _enum_connect_numpy(n, bu, bv, amask, bmask)


@njit
def hb_histogram(n_sweeps, thin, u, order, state, bu, bv, pb, q, track_full,
                 adj_ptr, adj_nbr, adj_bond, allmask, anchor, zeros,
                 lab, sz, s0, s1, free, ftop, visit, ep, qa, qb, hist):
    """Run heat-bath sweeps and histogram the configuration index every ``thin`` sweeps."""
    m = order.shape[0]
    dummy8 = np.zeros(1, np.uint8)
    dummy = np.zeros(1, np.int64)
    cftop = np.zeros(1, np.int64)
    for s in range(n_sweeps):
        hb_sweep(order, u[s * m:(s + 1) * m], state, bu, bv, pb, q, track_full,
                 adj_ptr, adj_nbr, adj_bond, allmask, anchor, zeros,
                 lab, sz, s0, s1, free, ftop,
                 False, dummy8, dummy, dummy, dummy, dummy, dummy, dummy, dummy, cftop,
                 visit, ep, qa, qb)
        if (s + 1) % thin == 0:
            idx = 0
            for b in range(bu.shape[0]):
                if state[b]:
                    idx |= 1 << b
            hist[idx] += 1
