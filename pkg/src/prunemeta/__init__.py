"""Channel pruning with episodic meta-learning for few-shot classifiers.

The package covers the full loop: disease-aware channel importance scoring,
taxonomy-protected structured pruning, first-order episodic meta-training with
meta-gradient guided score refinement, a composite compression-aware
objective, Monte-Carlo-dropout uncertainty, deployment metrics with a
significance-testing protocol, and a controllable synthetic dataset to
exercise all of it on a desk-scale CPU budget.
"""

__version__ = "0.1.0"
