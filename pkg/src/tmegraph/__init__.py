"""Interpretable graph-pooling pipeline for multiplexed tissue images.

Subpackages cover the full desk-scale workflow: synthetic cohort generation
(synthcohort), contrastive patch embedding (pcl), patch-graph assembly
(graphs), the three-level assignment classifier (model), successive-halving
architecture search (search), post-hoc analytics (insights), and CLI
orchestration (pipeline, cli).
"""

__version__ = "0.1.0"
