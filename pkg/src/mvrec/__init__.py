"""Few-shot defect classification over multi-view region-context embeddings.

Pipeline: dataset manifests (instance masks via connected components) ->
multi-view crop specs -> per-view embeddings (external backbone or the
synthetic test backend) -> averaged features -> cache-based classifiers ->
episodic N-way K-shot evaluation reports.
"""

__version__ = "0.1.0"
