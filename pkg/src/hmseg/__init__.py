"""hmseg: multi-scale semantic segmentation with chained scale-pair attention.

A self-contained CPU implementation: a small tape-based autodiff engine, a
shared-trunk segmentation network with semantic/attention/auxiliary heads,
pairwise attention fusion across an arbitrary set of inference scales,
hard-threshold pseudo-labelling, and a synthetic-scene benchmark.
"""

__version__ = "0.1.0"
