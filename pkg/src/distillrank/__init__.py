"""Two-stage retrieve-then-rerank pipeline with explanation-producing LLM rerankers.

Covers first-stage retrieval (BM25, dense), hybrid reranking, synthetic
distillation data generation, reward-filtered refinement datasets and
nDCG evaluation.
"""

__version__ = "0.1.0"
