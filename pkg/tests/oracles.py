"""Independent reference implementations used as test oracles.

Everything here is deliberately written in plain linear-space python/numpy,
separate from the library's vectorized log-space paths: textbook HMM
forward/backward, brute-force circuit evaluation and differentiation, and
closed-form tree maximum likelihood.
"""

import itertools

import numpy as np

from monarchpc.circuit import LeafBlock, ProductBlock, SumBlock
from monarchpc.monarch import materialize


def hmm_forward_logprob(pi, T, E, x) -> float:
    """Classic forward algorithm: log p(x) under (initial, transition,
    emission)."""
    alpha = pi * E[:, x[0]]
    for s in x[1:]:
        alpha = (alpha @ T) * E[:, s]
    return float(np.log(alpha.sum()))


def hmm_forward_backward_counts(pi, T, E, x):
    """(transition posterior counts (h, h), state posteriors (n, h),
    initial-state posterior (h,)) for one sequence."""
    n, h = len(x), len(pi)
    a = np.zeros((n, h))
    b = np.zeros((n, h))
    a[0] = pi * E[:, x[0]]
    for t in range(1, n):
        a[t] = (a[t - 1] @ T) * E[:, x[t]]
    b[-1] = 1.0
    for t in range(n - 2, -1, -1):
        b[t] = T @ (E[:, x[t + 1]] * b[t + 1])
    px = a[-1].sum()
    xi = np.zeros((h, h))
    for t in range(n - 1):
        xi += np.outer(a[t], E[:, x[t + 1]] * b[t + 1]) * T / px
    gamma = a * b / px
    return xi, gamma, gamma[0]


def all_assignments(num_vars: int, vocab: int) -> np.ndarray:
    return np.array(list(itertools.product(range(vocab), repeat=num_vars)),
                    dtype=np.int64)


def circuit_node_values(graph, x):
    """Linear-space per-node value arrays via the materialized weights."""
    values = []
    for b in graph.blocks:
        if isinstance(b, LeafBlock):
            values.append(graph.leaf_tables[b.table_id][:, x[b.var]].copy())
        elif isinstance(b, ProductBlock):
            if b.kind == "hadamard":
                v = values[b.children[0]].copy()
                for c in b.children[1:]:
                    v = v * values[c]
            else:
                v = values[b.children[0]]
                for c in b.children[1:]:
                    v = np.outer(v, values[c]).reshape(-1)
            values.append(v)
        else:
            vin = np.concatenate([values[c] for c in b.children])
            values.append(materialize(graph.params[b.param_id]) @ vin)
    return values


def circuit_value(graph, x) -> float:
    return float(circuit_node_values(graph, x)[graph.root][0])


def circuit_node_flows(graph, x):
    """Per-node flows p_n(x) * dp_root/dp_n / p_root by reverse sweep."""
    values = circuit_node_values(graph, x)
    root_val = values[graph.root][0]
    deriv = [np.zeros_like(v) for v in values]
    deriv[graph.root][0] = 1.0
    for idx in range(len(graph.blocks) - 1, -1, -1):
        b = graph.blocks[idx]
        if isinstance(b, LeafBlock):
            continue
        if isinstance(b, ProductBlock):
            if b.kind == "hadamard":
                for c in b.children:
                    others = np.ones_like(values[c])
                    for c2 in b.children:
                        if c2 != c:
                            others = others * values[c2]
                    deriv[c] += deriv[idx] * others
            else:
                sizes = [graph.blocks[c].size for c in b.children]
                d = deriv[idx].reshape(sizes)
                for axis, c in enumerate(b.children):
                    grad = d.copy()
                    for a2, c2 in enumerate(b.children):
                        if a2 != axis:
                            shape = [1] * len(sizes)
                            shape[a2] = sizes[a2]
                            grad = grad * values[c2].reshape(shape)
                    deriv[c] += grad.sum(
                        axis=tuple(a for a in range(len(sizes)) if a != axis))
        else:
            W = materialize(graph.params[b.param_id])
            up = deriv[idx] @ W
            off = 0
            for c in b.children:
                size = graph.blocks[c].size
                deriv[c] += up[off:off + size]
                off += size
    return [d * v / root_val for d, v in zip(deriv, values)], root_val


def tree_ml_loglik(parent, data, x, vocab: int) -> float:
    """Closed-form ML directed-tree Bayes net log-likelihood of assignment x
    fitted on `data` (unsmoothed empirical CPTs)."""
    data = np.asarray(data)
    total = 0.0
    for v, p in enumerate(parent):
        if p < 0:
            counts = np.bincount(data[:, v], minlength=vocab)
            total += np.log(counts[x[v]] / counts.sum())
        else:
            sel = data[data[:, p] == x[p]]
            counts = np.bincount(sel[:, v], minlength=vocab)
            total += np.log(counts[x[v]] / counts.sum())
    return float(total)
