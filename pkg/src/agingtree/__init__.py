"""Training-free conditional face-aging edits on rectified flows.

The package splits into pure math kernels (:mod:`agingtree.attention`),
flow integration (:mod:`agingtree.engine`), the feature recording/mixing
pipeline (:mod:`agingtree.pipeline`), backends, prompt refinement, age
reference directions, an evaluation harness, and the aging-tree service.
"""

__version__ = "0.1.0"
