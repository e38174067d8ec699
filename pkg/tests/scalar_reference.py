"""Naive per-element reference evaluators (independent of numpy matmul).

Used to derive golden fixtures and to cross-check the library's forward
and backward passes entry by entry.
"""


def matmul(a, b):
    rows, inner, cols = len(a), len(b), len(b[0])
    out = [[0.0] * cols for _ in range(rows)]
    for i in range(rows):
        for j in range(cols):
            acc = 0.0
            for t in range(inner):
                acc += a[i][t] * b[t][j]
            out[i][j] = acc
    return out


def merged(w0, a, b, s):
    k, d, r = len(w0), len(w0[0]), len(a)
    out = [[0.0] * d for _ in range(k)]
    for i in range(k):
        for j in range(d):
            acc = 0.0
            for t in range(r):
                acc += b[i][t] * a[t][j]
            out[i][j] = w0[i][j] + s * acc
    return out


def relu(m):
    return [[x if x > 0.0 else 0.0 for x in row] for row in m]


def linreg_forward(w0, a, b, s, x):
    return matmul(merged(w0, a, b, s), x)


def relu_forward(w0, a, b, s, w2, x):
    return matmul(w2, relu(matmul(merged(w0, a, b, s), x)))


def mse(y, target):
    m = len(y[0])
    acc = 0.0
    for i in range(len(y)):
        for j in range(m):
            diff = y[i][j] - target[i][j]
            acc += diff * diff
    return acc / m


def linreg_merged_gradient(w0, a, b, s, x, target):
    """d(MSE)/dW for y = W x, elementwise: (2/m) (y - t) x^T."""
    y = linreg_forward(w0, a, b, s, x)
    k, m, d = len(y), len(y[0]), len(x)
    grad = [[0.0] * d for _ in range(k)]
    for i in range(k):
        for j in range(d):
            acc = 0.0
            for c in range(m):
                acc += (y[i][c] - target[i][c]) * x[j][c]
            grad[i][j] = 2.0 * acc / m
    return grad
