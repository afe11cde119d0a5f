"""Bayesian sum-of-trees regression fit by MCMC backfitting.

The sampler keeps each tree in fixed-width slot arrays so the whole
per-iteration update compiles to one numba kernel. Slot 0 is always the
root; `var` holds the split column, -1 for a leaf, -3 for a freed slot.
Children always occupy slots below the tree's high-water mark, so a
packed snapshot `arrays[:hw]` keeps child indices valid.

Split rules are drawn uniformly over the cuts AVAILABLE at a node (grid
cuts that put at least one row on each side), matching the generative
tree prior: under a flat likelihood the chain reproduces the depth
prior alpha*(1+d)^-beta exactly. Proposals that would leave a leaf
with fewer than min_leaf rows are rejected outright.
"""

from __future__ import annotations

import numpy as np
from dataclasses import dataclass, field
from numba import njit
from scipy.stats import chi2

from .dataset import FeatureTable
from .errors import ConfigurationError, InputDataError

P_GROW = 0.25
P_PRUNE = 0.25
P_CHANGE = 0.40
P_SWAP = 0.10

LEAF = -1
FREE = -3

DEFAULT_HYPER = {"alpha": 0.95, "beta": 2.0, "k": 2.0, "nu": 3.0, "q": 0.90}


@njit(cache=True)
def _seed_rng(seed):
    np.random.seed(seed)


@njit(cache=True)
def _leaf_score(n_l, t_l, sig2, sm2):
    # leaf evidence with the mean integrated out; terms that depend only
    # on the row set cancel in every acceptance ratio and are dropped
    denom = sig2 + n_l * sm2
    return 0.5 * np.log(sig2 / denom) + sm2 * t_l * t_l / (2.0 * sig2 * denom)


@njit(cache=True)
def _n_avail(cuts, v, mn, mx):
    # cuts c with mn <= c < mx leave both children of an `x <= c` split
    # nonempty; the grid rows are sorted, so two bisections count them
    return np.searchsorted(cuts[v], mx) - np.searchsorted(cuts[v], mn)


@njit(cache=True)
def _splittable(cuts, mn_node, mx_node):
    p = mn_node.shape[0]
    for v in range(p):
        if _n_avail(cuts, v, mn_node[v], mx_node[v]) > 0:
            return True
    return False


@njit(cache=True)
def _score_subtree(t, top, n, n_ov, ov_slot, ov_var, ov_cut, include_top_rule,
                   var, cut, left, right, depth, leaf_of_row, resid, Xt, cuts,
                   nodes, in_sub, cnt_o, sum_o, cnt_n, sum_n, new_leaf,
                   mn_old, mx_old, mn_new, mx_new,
                   alpha, beta, sig2, sm2, min_leaf, flat_lik, stack):
    """Score re-routing the rows under `top` after a rule change.

    The rule arrays already hold the PROPOSED rules; ov_* carries the
    previous rule of the mutated slots so the old routing can be
    replayed. Fills new_leaf for affected rows and in_sub over the
    subtree's leaf slots (the caller commits or restores, then clears
    in_sub via the returned node list). Returns
    (feasible, log_likelihood_delta + log_prior_delta, n_nodes)."""
    p = Xt.shape[0]
    nn = 0
    top_ptr = 0
    stack[top_ptr] = top
    top_ptr = 1
    while top_ptr > 0:
        top_ptr -= 1
        u = stack[top_ptr]
        nodes[nn] = u
        nn += 1
        cnt_o[u] = 0.0
        cnt_n[u] = 0.0
        sum_o[u] = 0.0
        sum_n[u] = 0.0
        if var[t, u] == LEAF:
            in_sub[u] = 1
        else:
            stack[top_ptr] = left[t, u]
            top_ptr += 1
            stack[top_ptr] = right[t, u]
            top_ptr += 1

    for i in range(n):
        if in_sub[leaf_of_row[t, i]] == 0:
            continue
        # replay the previous routing, accumulating per-node column ranges
        cur = top
        while True:
            if cnt_o[cur] == 0.0:
                for v in range(p):
                    mn_old[cur, v] = Xt[v, i]
                    mx_old[cur, v] = Xt[v, i]
            else:
                for v in range(p):
                    x = Xt[v, i]
                    if x < mn_old[cur, v]:
                        mn_old[cur, v] = x
                    if x > mx_old[cur, v]:
                        mx_old[cur, v] = x
            cnt_o[cur] += 1.0
            if var[t, cur] == LEAF:
                sum_o[cur] += resid[i]
                break
            vv = var[t, cur]
            cc = cut[t, cur]
            for j in range(n_ov):
                if ov_slot[j] == cur:
                    vv = ov_var[j]
                    cc = ov_cut[j]
            cur = left[t, cur] if Xt[vv, i] <= cc else right[t, cur]
        # route under the proposed rules
        cur = top
        while True:
            if cnt_n[cur] == 0.0:
                for v in range(p):
                    mn_new[cur, v] = Xt[v, i]
                    mx_new[cur, v] = Xt[v, i]
            else:
                for v in range(p):
                    x = Xt[v, i]
                    if x < mn_new[cur, v]:
                        mn_new[cur, v] = x
                    if x > mx_new[cur, v]:
                        mx_new[cur, v] = x
            cnt_n[cur] += 1.0
            if var[t, cur] == LEAF:
                sum_n[cur] += resid[i]
                new_leaf[i] = cur
                break
            cur = left[t, cur] if Xt[var[t, cur], i] <= cut[t, cur] else right[t, cur]

    feasible = True
    for j in range(nn):
        u = nodes[j]
        if var[t, u] == LEAF and cnt_n[u] < min_leaf:
            feasible = False
    if not feasible:
        return False, 0.0, nn

    delta = 0.0
    for j in range(nn):
        u = nodes[j]
        if var[t, u] == LEAF:
            if flat_lik == 0:
                delta += _leaf_score(cnt_n[u], sum_n[u], sig2, sm2)
                delta -= _leaf_score(cnt_o[u], sum_o[u], sig2, sm2)
            # a leaf that can still be split carries prior mass 1-psd
            # for staying a leaf; an unsplittable one is a leaf for sure
            psd = alpha / (1.0 + float(depth[t, u])) ** beta
            if _splittable(cuts, mn_new[u], mx_new[u]):
                delta += np.log(1.0 - psd)
            if _splittable(cuts, mn_old[u], mx_old[u]):
                delta -= np.log(1.0 - psd)
        else:
            if u == top and not include_top_rule:
                continue
            v_new = var[t, u]
            v_old = v_new
            for j2 in range(n_ov):
                if ov_slot[j2] == u:
                    v_old = ov_var[j2]
            p_av_old = 0
            p_av_new = 0
            for v in range(p):
                if _n_avail(cuts, v, mn_old[u, v], mx_old[u, v]) > 0:
                    p_av_old += 1
                if _n_avail(cuts, v, mn_new[u, v], mx_new[u, v]) > 0:
                    p_av_new += 1
            na_old = _n_avail(cuts, v_old, mn_old[u, v_old], mx_old[u, v_old])
            na_new = _n_avail(cuts, v_new, mn_new[u, v_new], mx_new[u, v_new])
            delta += np.log(p_av_old * na_old) - np.log(p_av_new * na_new)
    return True, delta, nn


@njit(cache=True)
def _run_iteration(var, cut, left, right, parent, depth, mu, hw,
                   leaf_of_row, fits, resid, Xt, cuts,
                   eval_leaf, eval_fits, eval_total, Xt_eval,
                   sig2_box, mn_old, mx_old, mn_new, mx_new,
                   alpha, beta, sm2, nu, lam, min_leaf, flat_lik):
    m, cap = var.shape
    n = resid.shape[0]
    p = Xt.shape[0]
    n_eval = eval_total.shape[0]

    slots = np.empty(cap, np.int64)
    nodes = np.empty(cap, np.int64)
    stack = np.empty(cap, np.int64)
    in_sub = np.zeros(cap, np.uint8)
    cnt_o = np.empty(cap, np.float64)
    sum_o = np.empty(cap, np.float64)
    cnt_n = np.empty(cap, np.float64)
    sum_n = np.empty(cap, np.float64)
    new_leaf = np.empty(n, np.int64)
    ov_slot = np.empty(2, np.int64)
    ov_var = np.empty(2, np.int32)
    ov_cut = np.empty(2, np.float64)
    smn = np.empty(p, np.float64)
    smx = np.empty(p, np.float64)
    lmn = np.empty(p, np.float64)
    lmx = np.empty(p, np.float64)
    rmn = np.empty(p, np.float64)
    rmx = np.empty(p, np.float64)

    for t in range(m):
        sig2 = sig2_box[0]
        for i in range(n):
            resid[i] += fits[t, i]

        u = np.random.random()
        if u < P_GROW:
            n_leaves = 0
            for s2 in range(hw[t]):
                if var[t, s2] == LEAF:
                    slots[n_leaves] = s2
                    n_leaves += 1
            s = slots[int(np.random.random() * n_leaves)]
            n_s = 0
            for i in range(n):
                if leaf_of_row[t, i] == s:
                    if n_s == 0:
                        for v in range(p):
                            smn[v] = Xt[v, i]
                            smx[v] = Xt[v, i]
                    else:
                        for v in range(p):
                            x = Xt[v, i]
                            if x < smn[v]:
                                smn[v] = x
                            if x > smx[v]:
                                smx[v] = x
                    n_s += 1
            p_av = 0
            for v in range(p):
                if _n_avail(cuts, v, smn[v], smx[v]) > 0:
                    p_av += 1
            free_cnt = 0
            for s2 in range(hw[t]):
                if var[t, s2] == FREE:
                    free_cnt += 1
            if p_av > 0 and free_cnt + (cap - hw[t]) >= 2:
                pick = int(np.random.random() * p_av)
                v = -1
                for v2 in range(p):
                    if _n_avail(cuts, v2, smn[v2], smx[v2]) > 0:
                        if pick == 0:
                            v = v2
                            break
                        pick -= 1
                base = np.searchsorted(cuts[v], smn[v])
                count_v = np.searchsorted(cuts[v], smx[v]) - base
                c = cuts[v, base + int(np.random.random() * count_v)]
                n_lo = 0.0
                n_hi = 0.0
                t_lo = 0.0
                t_hi = 0.0
                first_lo = True
                first_hi = True
                for i in range(n):
                    if leaf_of_row[t, i] == s:
                        if Xt[v, i] <= c:
                            n_lo += 1.0
                            t_lo += resid[i]
                            if first_lo:
                                for v2 in range(p):
                                    lmn[v2] = Xt[v2, i]
                                    lmx[v2] = Xt[v2, i]
                                first_lo = False
                            else:
                                for v2 in range(p):
                                    x = Xt[v2, i]
                                    if x < lmn[v2]:
                                        lmn[v2] = x
                                    if x > lmx[v2]:
                                        lmx[v2] = x
                        else:
                            n_hi += 1.0
                            t_hi += resid[i]
                            if first_hi:
                                for v2 in range(p):
                                    rmn[v2] = Xt[v2, i]
                                    rmx[v2] = Xt[v2, i]
                                first_hi = False
                            else:
                                for v2 in range(p):
                                    x = Xt[v2, i]
                                    if x < rmn[v2]:
                                        rmn[v2] = x
                                    if x > rmx[v2]:
                                        rmx[v2] = x
                if n_lo >= min_leaf and n_hi >= min_leaf:
                    d = float(depth[t, s])
                    psd = alpha / (1.0 + d) ** beta
                    psd1 = alpha / (2.0 + d) ** beta
                    if flat_lik == 1:
                        dg = 0.0
                    else:
                        dg = (_leaf_score(n_lo, t_lo, sig2, sm2)
                              + _leaf_score(n_hi, t_hi, sig2, sm2)
                              - _leaf_score(n_lo + n_hi, t_lo + t_hi, sig2, sm2))
                    s_lo = np.log(1.0 - psd1) if _splittable(cuts, lmn, lmx) else 0.0
                    s_hi = np.log(1.0 - psd1) if _splittable(cuts, rmn, rmx) else 0.0
                    prunable = 0
                    for s2 in range(hw[t]):
                        if var[t, s2] >= 0 and var[t, left[t, s2]] == LEAF \
                                and var[t, right[t, s2]] == LEAF:
                            prunable += 1
                    par = parent[t, s]
                    # growing s consumes its parent's prunable status when
                    # the sibling is also a leaf
                    after = prunable + 1
                    if par >= 0 and var[t, left[t, par]] == LEAF \
                            and var[t, right[t, par]] == LEAF:
                        after -= 1
                    logr = (dg + np.log(psd) + s_lo + s_hi - np.log(1.0 - psd)
                            + np.log(P_PRUNE * n_leaves) - np.log(P_GROW * after))
                    if np.log(np.random.random()) < logr:
                        sl = -1
                        sr = -1
                        for s2 in range(hw[t]):
                            if var[t, s2] == FREE:
                                if sl < 0:
                                    sl = s2
                                elif sr < 0:
                                    sr = s2
                                    break
                        if sl < 0:
                            sl = hw[t]
                            hw[t] += 1
                        if sr < 0:
                            sr = hw[t]
                            hw[t] += 1
                        var[t, s] = v
                        cut[t, s] = c
                        left[t, s] = sl
                        right[t, s] = sr
                        for s2 in (sl, sr):
                            var[t, s2] = LEAF
                            mu[t, s2] = 0.0
                            left[t, s2] = -1
                            right[t, s2] = -1
                            parent[t, s2] = s
                            depth[t, s2] = depth[t, s] + 1
                        for i in range(n):
                            if leaf_of_row[t, i] == s:
                                leaf_of_row[t, i] = sl if Xt[v, i] <= c else sr
                        for e in range(n_eval):
                            if eval_leaf[t, e] == s:
                                eval_leaf[t, e] = sl if Xt_eval[v, e] <= c else sr
        elif u < P_GROW + P_PRUNE:
            prunable = 0
            n_leaves = 0
            for s2 in range(hw[t]):
                if var[t, s2] == LEAF:
                    n_leaves += 1
                elif var[t, s2] >= 0 and var[t, left[t, s2]] == LEAF \
                        and var[t, right[t, s2]] == LEAF:
                    slots[prunable] = s2
                    prunable += 1
            if prunable > 0:
                s = slots[int(np.random.random() * prunable)]
                sl = left[t, s]
                sr = right[t, s]
                n_lo = 0.0
                n_hi = 0.0
                t_lo = 0.0
                t_hi = 0.0
                first_lo = True
                first_hi = True
                for i in range(n):
                    lr = leaf_of_row[t, i]
                    if lr == sl:
                        n_lo += 1.0
                        t_lo += resid[i]
                        if first_lo:
                            for v2 in range(p):
                                lmn[v2] = Xt[v2, i]
                                lmx[v2] = Xt[v2, i]
                            first_lo = False
                        else:
                            for v2 in range(p):
                                x = Xt[v2, i]
                                if x < lmn[v2]:
                                    lmn[v2] = x
                                if x > lmx[v2]:
                                    lmx[v2] = x
                    elif lr == sr:
                        n_hi += 1.0
                        t_hi += resid[i]
                        if first_hi:
                            for v2 in range(p):
                                rmn[v2] = Xt[v2, i]
                                rmx[v2] = Xt[v2, i]
                            first_hi = False
                        else:
                            for v2 in range(p):
                                x = Xt[v2, i]
                                if x < rmn[v2]:
                                    rmn[v2] = x
                                if x > rmx[v2]:
                                    rmx[v2] = x
                d = float(depth[t, s])
                psd = alpha / (1.0 + d) ** beta
                psd1 = alpha / (2.0 + d) ** beta
                if flat_lik == 1:
                    dg = 0.0
                else:
                    dg = (_leaf_score(n_lo + n_hi, t_lo + t_hi, sig2, sm2)
                          - _leaf_score(n_lo, t_lo, sig2, sm2)
                          - _leaf_score(n_hi, t_hi, sig2, sm2))
                s_lo = np.log(1.0 - psd1) if _splittable(cuts, lmn, lmx) else 0.0
                s_hi = np.log(1.0 - psd1) if _splittable(cuts, rmn, rmx) else 0.0
                logr = (dg + np.log(1.0 - psd) - np.log(psd) - s_lo - s_hi
                        + np.log(P_GROW * prunable)
                        - np.log(P_PRUNE * (n_leaves - 1)))
                if np.log(np.random.random()) < logr:
                    var[t, s] = LEAF
                    var[t, sl] = FREE
                    var[t, sr] = FREE
                    left[t, s] = -1
                    right[t, s] = -1
                    for i in range(n):
                        lr = leaf_of_row[t, i]
                        if lr == sl or lr == sr:
                            leaf_of_row[t, i] = s
                    for e in range(n_eval):
                        le = eval_leaf[t, e]
                        if le == sl or le == sr:
                            eval_leaf[t, e] = s
        elif u < P_GROW + P_PRUNE + P_CHANGE:
            n_internal = 0
            for s2 in range(hw[t]):
                if var[t, s2] >= 0:
                    slots[n_internal] = s2
                    n_internal += 1
            if n_internal > 0:
                s = slots[int(np.random.random() * n_internal)]
                # ranges over every row reaching s, for the rule proposal
                top_ptr = 0
                stack[top_ptr] = s
                top_ptr = 1
                while top_ptr > 0:
                    top_ptr -= 1
                    u2 = stack[top_ptr]
                    if var[t, u2] == LEAF:
                        in_sub[u2] = 1
                    else:
                        stack[top_ptr] = left[t, u2]
                        top_ptr += 1
                        stack[top_ptr] = right[t, u2]
                        top_ptr += 1
                n_s = 0
                for i in range(n):
                    if in_sub[leaf_of_row[t, i]] == 1:
                        if n_s == 0:
                            for v2 in range(p):
                                smn[v2] = Xt[v2, i]
                                smx[v2] = Xt[v2, i]
                        else:
                            for v2 in range(p):
                                x = Xt[v2, i]
                                if x < smn[v2]:
                                    smn[v2] = x
                                if x > smx[v2]:
                                    smx[v2] = x
                        n_s += 1
                for s2 in range(hw[t]):
                    in_sub[s2] = 0
                p_av = 0
                for v2 in range(p):
                    if _n_avail(cuts, v2, smn[v2], smx[v2]) > 0:
                        p_av += 1
                pick = int(np.random.random() * p_av)
                v = -1
                for v2 in range(p):
                    if _n_avail(cuts, v2, smn[v2], smx[v2]) > 0:
                        if pick == 0:
                            v = v2
                            break
                        pick -= 1
                base = np.searchsorted(cuts[v], smn[v])
                count_v = np.searchsorted(cuts[v], smx[v]) - base
                c = cuts[v, base + int(np.random.random() * count_v)]
                ov_slot[0] = s
                ov_var[0] = var[t, s]
                ov_cut[0] = cut[t, s]
                var[t, s] = v
                cut[t, s] = c
                feasible, delta, nn = _score_subtree(
                    t, s, n, 1, ov_slot, ov_var, ov_cut, False,
                    var, cut, left, right, depth, leaf_of_row, resid, Xt, cuts,
                    nodes, in_sub, cnt_o, sum_o, cnt_n, sum_n, new_leaf,
                    mn_old, mx_old, mn_new, mx_new,
                    alpha, beta, sig2, sm2, min_leaf, flat_lik, stack)
                if feasible and np.log(np.random.random()) < delta:
                    for i in range(n):
                        if in_sub[leaf_of_row[t, i]] == 1:
                            leaf_of_row[t, i] = new_leaf[i]
                    for e in range(n_eval):
                        if in_sub[eval_leaf[t, e]] == 1:
                            cur = s
                            while var[t, cur] >= 0:
                                if Xt_eval[var[t, cur], e] <= cut[t, cur]:
                                    cur = left[t, cur]
                                else:
                                    cur = right[t, cur]
                            eval_leaf[t, e] = cur
                else:
                    var[t, s] = ov_var[0]
                    cut[t, s] = ov_cut[0]
                for j in range(nn):
                    in_sub[nodes[j]] = 0
        else:
            n_pairs = 0
            for s2 in range(hw[t]):
                if var[t, s2] >= 0:
                    if var[t, left[t, s2]] >= 0:
                        slots[n_pairs] = 2 * s2
                        n_pairs += 1
                    if var[t, right[t, s2]] >= 0:
                        slots[n_pairs] = 2 * s2 + 1
                        n_pairs += 1
            if n_pairs > 0:
                code = slots[int(np.random.random() * n_pairs)]
                a = code // 2
                b = right[t, a] if code % 2 == 1 else left[t, a]
                ov_slot[0] = a
                ov_var[0] = var[t, a]
                ov_cut[0] = cut[t, a]
                ov_slot[1] = b
                ov_var[1] = var[t, b]
                ov_cut[1] = cut[t, b]
                var[t, a] = ov_var[1]
                cut[t, a] = ov_cut[1]
                var[t, b] = ov_var[0]
                cut[t, b] = ov_cut[0]
                feasible, delta, nn = _score_subtree(
                    t, a, n, 2, ov_slot, ov_var, ov_cut, True,
                    var, cut, left, right, depth, leaf_of_row, resid, Xt, cuts,
                    nodes, in_sub, cnt_o, sum_o, cnt_n, sum_n, new_leaf,
                    mn_old, mx_old, mn_new, mx_new,
                    alpha, beta, sig2, sm2, min_leaf, flat_lik, stack)
                if feasible and np.log(np.random.random()) < delta:
                    for i in range(n):
                        if in_sub[leaf_of_row[t, i]] == 1:
                            leaf_of_row[t, i] = new_leaf[i]
                    for e in range(n_eval):
                        if in_sub[eval_leaf[t, e]] == 1:
                            cur = a
                            while var[t, cur] >= 0:
                                if Xt_eval[var[t, cur], e] <= cut[t, cur]:
                                    cur = left[t, cur]
                                else:
                                    cur = right[t, cur]
                            eval_leaf[t, e] = cur
                else:
                    var[t, a] = ov_var[0]
                    cut[t, a] = ov_cut[0]
                    var[t, b] = ov_var[1]
                    cut[t, b] = ov_cut[1]
                for j in range(nn):
                    in_sub[nodes[j]] = 0

        # conjugate redraw of every leaf mean against the partial residual
        for s2 in range(hw[t]):
            cnt_o[s2] = 0.0
            sum_o[s2] = 0.0
        for i in range(n):
            lr = leaf_of_row[t, i]
            cnt_o[lr] += 1.0
            sum_o[lr] += resid[i]
        for s2 in range(hw[t]):
            if var[t, s2] == LEAF:
                v_post = 1.0 / (cnt_o[s2] / sig2 + 1.0 / sm2)
                mu[t, s2] = (v_post * sum_o[s2] / sig2
                             + np.sqrt(v_post) * np.random.normal())
        for i in range(n):
            f = mu[t, leaf_of_row[t, i]]
            fits[t, i] = f
            resid[i] -= f
        for e in range(n_eval):
            f = mu[t, eval_leaf[t, e]]
            eval_total[e] += f - eval_fits[t, e]
            eval_fits[t, e] = f

    sse = 0.0
    for i in range(n):
        sse += resid[i] * resid[i]
    sig2_box[0] = (nu * lam + sse) / np.random.chisquare(nu + n)


@njit(cache=True)
def _pack_state(var, cut, left, right, mu, hw):
    m = hw.shape[0]
    off = np.zeros(m + 1, np.int64)
    for t in range(m):
        off[t + 1] = off[t] + hw[t]
    total = off[m]
    pv = np.empty(total, np.int32)
    pc = np.empty(total, np.float64)
    pl = np.empty(total, np.int32)
    pr = np.empty(total, np.int32)
    pm = np.empty(total, np.float64)
    for t in range(m):
        base = off[t]
        for s in range(hw[t]):
            pv[base + s] = var[t, s]
            pc[base + s] = cut[t, s]
            pl[base + s] = left[t, s]
            pr[base + s] = right[t, s]
            pm[base + s] = mu[t, s]
    return off, pv, pc, pl, pr, pm


@njit(cache=True)
def _eval_snapshot(off, pv, pc, pl, pr, pm, Xt):
    n_rows = Xt.shape[1]
    out = np.zeros(n_rows)
    m = off.shape[0] - 1
    for t in range(m):
        base = off[t]
        for e in range(n_rows):
            cur = 0
            while pv[base + cur] >= 0:
                if Xt[pv[base + cur], e] <= pc[base + cur]:
                    cur = pl[base + cur]
                else:
                    cur = pr[base + cur]
            out[e] += pm[base + cur]
    return out


@dataclass
class BartFit:
    """Retained posterior draws plus everything needed to replay them."""

    columns: tuple[str, ...]
    m: int
    iters: int
    burn: int
    thin: int
    chains: int
    seed: int
    hyper: dict
    min_leaf: int
    n_cuts: int
    y_mid: float
    y_range: float
    sigma_draws: np.ndarray            # (D,) outcome units
    train_draws: np.ndarray            # (D, n_train) outcome units
    eval_draws: np.ndarray | None      # (D, n_eval) outcome units
    trees: list | None                 # per draw: packed slot arrays
    train_ids: np.ndarray = field(repr=False, default=None)

    @property
    def n_draws(self) -> int:
        return self.sigma_draws.shape[0]


@dataclass
class PosteriorPredictive:
    """Draw matrix over query rows with pointwise summaries."""

    draws: np.ndarray      # (D, q) outcome units
    sigma: np.ndarray      # (D,)
    mean: np.ndarray       # (q,)
    lower: np.ndarray      # (q,) 2.5% quantile
    upper: np.ndarray      # (q,) 97.5% quantile


class PosteriorMeanPredictor:
    """Point-prediction adapter: predict() returns the posterior mean."""

    def __init__(self, fit: BartFit):
        self.fit = fit

    def predict(self, table: FeatureTable) -> np.ndarray:
        return predict_posterior(self.fit, table).mean


def _query_matrix(columns: tuple[str, ...], table: FeatureTable) -> np.ndarray:
    out = np.empty((len(columns), table.n))
    for j, name in enumerate(columns):
        out[j] = table.column(name)
    return out


def _initial_sigma(X: np.ndarray, y_s: np.ndarray) -> float:
    """Residual scale of a least-squares fit on the scaled outcome; falls
    back to the outcome spread when the design cannot support one."""
    n = y_s.shape[0]
    design = np.column_stack([np.ones(n), X])
    guess = float(np.std(y_s))
    if n > design.shape[1]:
        coef, _, rank, _ = np.linalg.lstsq(design, y_s, rcond=None)
        dof = n - rank
        if dof > 0:
            r = y_s - design @ coef
            guess = float(np.sqrt(r @ r / dof))
    return max(guess, 1e-6)


def fit_bart(train: FeatureTable, m: int = 200, iters: int = 2000,
             burn: int = 1000, thin: int = 1, *, alpha: float = 0.95,
             beta: float = 2.0, k: float = 2.0, nu: float = 3.0,
             q: float = 0.90, min_leaf: int = 5, n_cuts: int = 100,
             chains: int = 1, seed: int = 0,
             eval_table: FeatureTable | None = None, keep_trees: bool = True,
             _flat_likelihood: bool = False) -> BartFit:
    """Sample a sum of m trees by backfitting MCMC.

    Per iteration each tree takes one Metropolis-Hastings structure move
    (grow 0.25 / prune 0.25 / change 0.4 / swap 0.1) against the residual
    of the other trees, then a conjugate redraw of its leaf means; the
    noise variance is redrawn from its scaled inverse-chi-square
    conditional once per iteration. The outcome is internally mapped to
    [-0.5, 0.5]; draws are returned in outcome units.

    Multiple chains run sequentially on independent seed streams and their
    retained draws are concatenated. eval_table rows are tracked inside
    the sampler, giving a draw matrix for held-out rows without retaining
    trees.
    """
    y = train.require_outcome()
    n = train.n
    if n < 10:
        raise ConfigurationError(f"bart needs at least 10 rows, got {n}")
    p = len(train.feature_names)
    if p < 1:
        raise InputDataError("bart needs at least one feature column")
    if m < 1:
        raise ConfigurationError(f"m must be >= 1, got {m}")
    if iters < 1 or not 0 <= burn < iters:
        raise ConfigurationError(f"need 0 <= burn < iters, got burn={burn} iters={iters}")
    if thin < 1:
        raise ConfigurationError(f"thin must be >= 1, got {thin}")
    if chains < 1:
        raise ConfigurationError(f"chains must be >= 1, got {chains}")
    if not 0.0 < alpha < 1.0:
        raise ConfigurationError(f"alpha must be in (0, 1), got {alpha}")
    if beta < 0.0:
        raise ConfigurationError(f"beta must be >= 0, got {beta}")
    if k <= 0.0 or nu <= 0.0 or not 0.0 < q < 1.0:
        raise ConfigurationError(f"invalid hyperparameters k={k} nu={nu} q={q}")
    if min_leaf < 1 or n_cuts < 1:
        raise ConfigurationError(f"invalid min_leaf={min_leaf} or n_cuts={n_cuts}")
    if seed < 0:
        raise ConfigurationError(f"seed must be >= 0, got {seed}")

    y_min = float(y.min())
    y_max = float(y.max())
    y_mid = 0.5 * (y_min + y_max)
    y_range = y_max - y_min if y_max > y_min else 1.0
    y_s = (y - y_mid) / y_range

    X = train.matrix()
    Xt = np.ascontiguousarray(X.T)
    cuts = np.empty((p, n_cuts))
    frac = np.arange(1, n_cuts + 1) / (n_cuts + 1)
    for j in range(p):
        lo = Xt[j].min()
        hi = Xt[j].max()
        cuts[j] = lo + (hi - lo) * frac

    sm2 = (0.5 / (k * np.sqrt(m))) ** 2
    sig_hat = _initial_sigma(X, y_s)
    lam = sig_hat ** 2 * chi2.ppf(1.0 - q, nu) / nu

    if eval_table is not None:
        Xt_eval = _query_matrix(tuple(train.feature_names), eval_table)
        n_eval = eval_table.n
    else:
        Xt_eval = np.empty((p, 0))
        n_eval = 0

    retained = range(burn, iters, thin)
    d_per_chain = len(retained)
    d_total = d_per_chain * chains
    sigma_draws = np.empty(d_total)
    train_draws = np.empty((d_total, n))
    eval_draws = np.empty((d_total, n_eval)) if eval_table is not None else None
    trees: list | None = [] if keep_trees else None

    # slot budget: min_leaf bounds the leaf count, freed slots are reused
    cap = 2 * (n // min_leaf) + 3
    chain_seeds = [
        ss.generate_state(1, np.uint32)[0]
        for ss in np.random.SeedSequence(seed).spawn(chains)
    ]
    flat_flag = 1 if _flat_likelihood else 0

    for c, chain_seed in enumerate(chain_seeds):
        var = np.full((m, cap), FREE, np.int32)
        var[:, 0] = LEAF
        cut = np.zeros((m, cap))
        left = np.full((m, cap), -1, np.int32)
        right = np.full((m, cap), -1, np.int32)
        parent = np.full((m, cap), -1, np.int32)
        depth = np.zeros((m, cap), np.int32)
        mu = np.zeros((m, cap))
        hw = np.ones(m, np.int64)
        leaf_of_row = np.zeros((m, n), np.int64)
        fits = np.zeros((m, n))
        resid = y_s.copy()
        eval_leaf = np.zeros((m, n_eval), np.int64)
        eval_fits = np.zeros((m, n_eval))
        eval_total = np.zeros(n_eval)
        sig2_box = np.array([sig_hat ** 2])
        mn_old = np.empty((cap, p))
        mx_old = np.empty((cap, p))
        mn_new = np.empty((cap, p))
        mx_new = np.empty((cap, p))

        _seed_rng(chain_seed)
        d = c * d_per_chain
        for it in range(iters):
            _run_iteration(var, cut, left, right, parent, depth, mu, hw,
                           leaf_of_row, fits, resid, Xt, cuts,
                           eval_leaf, eval_fits, eval_total, Xt_eval,
                           sig2_box, mn_old, mx_old, mn_new, mx_new,
                           alpha, beta, sm2, nu, lam,
                           float(min_leaf), flat_flag)
            if it >= burn and (it - burn) % thin == 0:
                sigma_draws[d] = np.sqrt(sig2_box[0]) * y_range
                train_draws[d] = y_mid + y_range * (y_s - resid)
                if eval_draws is not None:
                    eval_draws[d] = y_mid + y_range * eval_total
                if trees is not None:
                    trees.append(_pack_state(var, cut, left, right, mu, hw))
                d += 1

    return BartFit(
        columns=tuple(train.feature_names), m=m, iters=iters, burn=burn,
        thin=thin, chains=chains, seed=seed,
        hyper={"alpha": alpha, "beta": beta, "k": k, "nu": nu, "q": q},
        min_leaf=min_leaf, n_cuts=n_cuts, y_mid=y_mid, y_range=y_range,
        sigma_draws=sigma_draws, train_draws=train_draws,
        eval_draws=eval_draws, trees=trees, train_ids=train.ids.copy(),
    )


def predict_posterior(fit: BartFit, table: FeatureTable) -> PosteriorPredictive:
    """Per-draw predictions for new rows, with mean and central 95% band."""
    if fit.trees is None:
        raise ConfigurationError(
            "model was fit with keep_trees=False; cannot predict on new rows")
    Xt = _query_matrix(fit.columns, table)
    draws = np.empty((fit.n_draws, table.n))
    for d, snap in enumerate(fit.trees):
        draws[d] = fit.y_mid + fit.y_range * _eval_snapshot(*snap, Xt)
    lower, upper = np.quantile(draws, [0.025, 0.975], axis=0)
    return PosteriorPredictive(draws=draws, sigma=fit.sigma_draws.copy(),
                               mean=draws.mean(axis=0), lower=lower, upper=upper)


def pack_fit(fit: BartFit) -> tuple[dict, dict[str, np.ndarray]]:
    """Split a fit into JSON-safe metadata and flat arrays for storage.

    The draw matrices are draw-major, row-minor; tree snapshots are
    concatenated across draws with draw_offsets marking boundaries."""
    meta = {
        "model": "bart",
        "columns": list(fit.columns),
        "m": fit.m, "iters": fit.iters, "burn": fit.burn, "thin": fit.thin,
        "chains": fit.chains, "seed": fit.seed, "hyper": fit.hyper,
        "min_leaf": fit.min_leaf, "n_cuts": fit.n_cuts,
        "y_mid": fit.y_mid, "y_range": fit.y_range,
        "n_draws": fit.n_draws, "layout": "draw-major, row-minor",
        "has_trees": fit.trees is not None,
        "has_eval": fit.eval_draws is not None,
    }
    arrays = {
        "sigma_draws": fit.sigma_draws,
        "train_draws": fit.train_draws,
        "train_ids": fit.train_ids,
    }
    if fit.eval_draws is not None:
        arrays["eval_draws"] = fit.eval_draws
    if fit.trees is not None:
        draw_off = np.zeros(len(fit.trees) + 1, np.int64)
        for d, snap in enumerate(fit.trees):
            draw_off[d + 1] = draw_off[d] + snap[1].shape[0]
        arrays["tree_draw_offsets"] = draw_off
        arrays["tree_slot_offsets"] = np.concatenate([s[0] for s in fit.trees])
        arrays["tree_var"] = np.concatenate([s[1] for s in fit.trees])
        arrays["tree_cut"] = np.concatenate([s[2] for s in fit.trees])
        arrays["tree_left"] = np.concatenate([s[3] for s in fit.trees])
        arrays["tree_right"] = np.concatenate([s[4] for s in fit.trees])
        arrays["tree_mu"] = np.concatenate([s[5] for s in fit.trees])
    return meta, arrays


def unpack_fit(meta: dict, arrays: dict) -> BartFit:
    """Inverse of pack_fit."""
    trees = None
    if meta["has_trees"]:
        trees = []
        draw_off = arrays["tree_draw_offsets"]
        n_draws = meta["n_draws"]
        m = meta["m"]
        slot_off = arrays["tree_slot_offsets"]
        for d in range(n_draws):
            lo, hi = draw_off[d], draw_off[d + 1]
            trees.append((
                np.ascontiguousarray(slot_off[d * (m + 1):(d + 1) * (m + 1)]),
                np.ascontiguousarray(arrays["tree_var"][lo:hi]),
                np.ascontiguousarray(arrays["tree_cut"][lo:hi]),
                np.ascontiguousarray(arrays["tree_left"][lo:hi]),
                np.ascontiguousarray(arrays["tree_right"][lo:hi]),
                np.ascontiguousarray(arrays["tree_mu"][lo:hi]),
            ))
    return BartFit(
        columns=tuple(meta["columns"]), m=meta["m"], iters=meta["iters"],
        burn=meta["burn"], thin=meta["thin"], chains=meta["chains"],
        seed=meta["seed"], hyper=dict(meta["hyper"]),
        min_leaf=meta["min_leaf"], n_cuts=meta["n_cuts"],
        y_mid=meta["y_mid"], y_range=meta["y_range"],
        sigma_draws=arrays["sigma_draws"],
        train_draws=arrays["train_draws"],
        eval_draws=arrays["eval_draws"] if meta["has_eval"] else None,
        trees=trees, train_ids=arrays["train_ids"],
    )
