"""
Parameters under rotation weight sharing
========================================

A group convolution with K fields of N orientations stores one base
filter per field pair and derives the N rotated copies.  An ordinary
convolution with the same number of channels (C = K*N) stores all of them.
"""

from regconv import verify as V
from regconv.group import CyclicGroup
from regconv.layers import GConv

for n in (1, 4, 8, 16):
    r = V.param_ratio(GConv(8, 8, CyclicGroup(n), 3), GConv(8 * n, 8 * n, CyclicGroup(1), 3))
    print(f"N={n:<2} 3x3 layer, 8 fields vs {8 * n} channels: {r.equivariant:>6} / {r.plain:<6} = {r.ratio:.4f}")

print()
for row in V.param_suite((8,))[8]:
    print(f"{row['layer']:<28} {row['equivariant']:>7} {row['plain']:>8}  {row['ratio']:.4f}")
