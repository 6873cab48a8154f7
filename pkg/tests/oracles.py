"""Brute-force reference implementations used only by the tests.

Everything here is written with explicit loops over plain indices so that it
shares no code path with the vectorized package.
"""

import numpy as np


def naive_theta_transform(X, M):
    T, n1, n2 = X.shape
    Y = np.zeros_like(X)
    for t in range(T):
        for i in range(n1):
            for j in range(n2):
                acc = 0.0
                for r in range(T):
                    acc += M[t][r] * X[r, i, j]
                Y[t, i, j] = acc
    return Y


def naive_facewise(X, Y):
    T, n1, m = X.shape
    n2 = Y.shape[2]
    Z = np.zeros((T, n1, n2))
    for t in range(T):
        for i in range(n1):
            for j in range(n2):
                acc = 0.0
                for k in range(m):
                    acc += X[t, i, k] * Y[t, k, j]
                Z[t, i, j] = acc
    return Z


def naive_theta_product(X, Y, M):
    return naive_facewise(naive_theta_transform(X, M), naive_theta_transform(Y, M))


def naive_mixing_matrix(T, K):
    """Row t (1-based) averages the in-range slices of the window t-K..t+K."""
    M = np.zeros((T, T))
    for t in range(T):
        window = [i for i in range(t - K, t + K + 1) if 0 <= i < T]
        for i in window:
            M[t, i] = 1.0 / len(window)
    return M


def dense_normalized_adjacency(users, services, slices, dims, weights=None):
    """Dense (T, U, S) normalized bipartite adjacency built entry by entry."""
    U, S, T = dims
    A = np.zeros((T, U, S))
    w = np.ones(len(users)) if weights is None else weights
    for u, s, t, x in zip(users, services, slices, w):
        A[t, u, s] = x
    out = np.zeros_like(A)
    for t in range(T):
        du = A[t].sum(axis=1)
        ds = A[t].sum(axis=0)
        for u in range(U):
            for s in range(S):
                if A[t, u, s] != 0:
                    out[t, u, s] = A[t, u, s] / np.sqrt(du[u] * ds[s])
    return out


def dense_propagate(A_hat, M, U0, S0, L):
    """Layer rule applied literally with dense theta products."""
    A_T = A_hat.transpose(0, 2, 1)
    users, services = [U0], [S0]
    for _ in range(L):
        U_next = naive_theta_product(A_hat, services[-1], M)
        S_next = naive_theta_product(A_T, users[-1], M)
        users.append(U_next)
        services.append(S_next)
    return users, services


def dense_objective(A_hat, M, U0, S0, L, pooling, entries, values, tau):
    users, services = dense_propagate(A_hat, M, U0, S0, L)
    if pooling == "mean":
        U, S = sum(users) / len(users), sum(services) / len(services)
    elif pooling == "sum":
        U, S = sum(users), sum(services)
    else:
        U, S = np.concatenate(users, axis=2), np.concatenate(services, axis=2)
    err = 0.0
    for (u, s, t), q in zip(entries, values):
        err += (q - float(U[t, u] @ S[t, s])) ** 2
    return err + tau * (np.sum(U0**2) + np.sum(S0**2))


def central_difference(f, x, idx, h=1e-5):
    xp = x.copy()
    xm = x.copy()
    xp[idx] += h
    xm[idx] -= h
    return (f(xp) - f(xm)) / (2 * h)


def relative_error(a, b, floor=1e-8):
    return abs(a - b) / max(abs(a), abs(b), floor)
