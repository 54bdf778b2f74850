"""Equal-mass clustering of a 1-D distribution, and what a shift does to it.

Cutting a distribution at its own K-quantiles gives every interval the same
probability, so the hard cluster assignment has the largest possible marginal
entropy, log2(K) bits. Keep those boundaries and shift the data: the mass
piles up in a few intervals and the entropy (here equal to the mutual
information, since assignments are hard) falls.

    python demos/fig1_equal_mass.py
"""

import math

from clust3.data import OneDDistribution, clustering_entropy_bits, fig1_rows, quantile_clusters, sample_1d

dist = OneDDistribution()
print(f"source mixture: mean {dist.mean():.3f}, std {dist.std():.3f}")

x = sample_1d(dist, 100_000, seed=1)
b = quantile_clusters(x, 10)
print("K=10 boundaries:", " ".join(f"{v:+.2f}" for v in b))
print(f"H(Z) on the source: {clustering_entropy_bits(b, x):.4f} bits (log2 10 = {math.log2(10):.4f})")

print("\n  K   source   target   drop")
for row in fig1_rows():
    print(f"{row['K']:3d}   {row['source_bits']:.4f}   {row['target_bits']:.4f}   {row['delta_mi_bits']:.4f}")

# the drop grows with the shift
print("\nshift (std)   H(Z) target, K=10")
for s in (0.0, 0.5, 1.0, 1.5, 2.0):
    t = sample_1d(dist.shifted(s * dist.std()), 100_000, seed=2)
    print(f"{s:11.1f}   {clustering_entropy_bits(b, t):.4f}")
