"""How much do several clustering heads know about the input, together?

With heads that are conditionally independent given x, the joint mutual
information I(X; Z_1..Z_C) sits between

    max_c H(Z_c) - sum_c H(Z_c|X)    and    sum_c I(X; Z_c).

The upper end is reached by hard heads that split the data independently,
the lower end by copies of one head. Enumerating the joint outcome space
gives the exact value for small cases.

    python demos/lemma_bounds.py
"""

import itertools

import numpy as np

from clust3.losses import joint_mi_bruteforce, lemma_bounds


def show(title, heads):
    lo, hi = lemma_bounds(heads)
    mi = joint_mi_bruteforce(heads)
    print(f"{title:28s} lower {lo:7.4f}   joint MI {mi:7.4f}   upper {hi:7.4f}")


rng = np.random.default_rng(0)
for trial in range(3):
    heads = []
    for _ in range(3):
        a = np.exp(rng.normal(0, 2, size=(8, 4)))
        heads.append(a / a.sum(axis=1, keepdims=True))
    show(f"random soft heads #{trial}", heads)

z = np.eye(4)[[0, 1, 2, 3, 0, 1, 2, 3]]
show("one hard head, duplicated", [z, z, z])

grid = list(itertools.product(range(2), range(3)))
show("independent hard heads", [np.eye(2)[[a for a, _ in grid]], np.eye(3)[[b for _, b in grid]]])
