"""Desk-scale generative engine optimization pipeline: curation, contrastive
encoders, HNSW retrieval, two-tower annotation ranking, collection pages,
link-equity graphs, and a deterministic trend-mining agent."""

__version__ = "0.1.0"
