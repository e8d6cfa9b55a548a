"""Independent reference computations used by the tests.

None of these share code with the package implementations they check.
"""
import math
from functools import lru_cache
from math import comb

import numpy as np


# -- gradients -------------------------------------------------------------------

def fd_gradient(net, example, h=1e-4):
    """Central finite differences of the single-example loss over all parameters."""
    theta = net.flatten()
    grad = np.zeros_like(theta)
    for i in range(theta.size):
        t = theta.copy()
        t[i] += h
        net.load_flat(t)
        up = net.forward_backward(example)[0][0]
        t[i] -= 2 * h
        net.load_flat(t)
        down = net.forward_backward(example)[0][0]
        grad[i] = (up - down) / (2 * h)
    net.load_flat(theta)
    return grad


def relative_error(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


# -- paths ---------------------------------------------------------------------------

def all_simple_path_weights(edges, src, dst):
    """Minimum total -ln p over every simple src->dst path, by exhaustive DFS."""
    best = math.inf
    best_paths = []

    def dfs(node, seen, weight, path):
        nonlocal best, best_paths
        if node == dst:
            if weight < best - 1e-12:
                best, best_paths = weight, [list(path)]
            elif abs(weight - best) <= 1e-12:
                best_paths.append(list(path))
            return
        for nxt, p in edges.get(node, ()):
            if nxt not in seen:
                seen.add(nxt)
                path.append(nxt)
                dfs(nxt, seen, weight - math.log(max(p, 1e-12)), path)
                path.pop()
                seen.discard(nxt)

    dfs(src, {src}, 0.0, [src])
    return best, best_paths


# -- transport ---------------------------------------------------------------------

def brute_force_transport(supply, demand, cost):
    """Exact optimum of a small balanced transportation problem with integer masses.

    Every vertex of the transport polytope has a basic variable that
    exhausts a row or a column, so all vertices are reached by repeatedly
    choosing a cell, shipping min(residual supply, residual demand) and
    deleting the exhausted row/column. Masses are scaled to exact integers
    (supply by the demand total and vice versa).
    """
    ta, tb = int(sum(supply)), int(sum(demand))
    a = tuple(int(x) * tb for x in supply)
    b = tuple(int(x) * ta for x in demand)
    cost = np.asarray(cost, dtype=float)
    m, n = len(a), len(b)

    @lru_cache(maxsize=None)
    def solve(ra, rb):
        # exhausted rows/columns have residual 0
        best = math.inf
        for i in range(m):
            if ra[i] == 0:
                continue
            for j in range(n):
                if rb[j] == 0:
                    continue
                x = min(ra[i], rb[j])
                na, nb = list(ra), list(rb)
                na[i] -= x
                nb[j] -= x
                best = min(best, x * cost[i, j] + solve(tuple(na), tuple(nb)))
        return 0.0 if best == math.inf else best

    return solve(a, b) / (ta * tb)


# -- accountant ----------------------------------------------------------------------

def moment_mixture_side(q, sigma, lam):
    """log E_{z~mu}[(mu/mu0)^lam] in closed form via the binomial expansion (integer lam)."""
    n = lam + 1
    terms = [math.log(comb(n, k)) + (n - k) * math.log1p(-q) + k * math.log(q) + k * (k - 1) / (2 * sigma ** 2)
             for k in range(n + 1)]
    m = max(terms)
    return m + math.log(sum(math.exp(t - m) for t in terms))


def moment_null_side(q, sigma, lam, step=1e-4, span=60.0):
    """log E_{z~mu0}[(mu0/mu)^lam] by a fine trapezoid rule in log space."""
    z = np.arange(-span, span + step / 2, step)
    log_mu0 = -0.5 * (z / sigma) ** 2
    log_mu1 = -0.5 * ((z - 1) / sigma) ** 2
    log_mu = np.logaddexp(np.log1p(-q) + log_mu0, np.log(q) + log_mu1)
    f = log_mu0 + lam * (log_mu0 - log_mu) - math.log(sigma * math.sqrt(2 * math.pi))
    m = f.max()
    w = np.exp(f - m)
    return float(m + np.log(step * (w.sum() - 0.5 * (w[0] + w[-1]))))


def reference_log_moment(q, sigma, lam):
    return max(moment_mixture_side(q, sigma, lam), moment_null_side(q, sigma, lam), 0.0)
