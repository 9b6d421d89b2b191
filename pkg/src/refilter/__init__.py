"""Token-level filtering and latent fusion of retrieved evidence, desk scale.

The package wires a BM25 retriever, a bidirectional chunk encoder, a
gated token filter, and a toy decoder-only backbone into a trainable
retrieval-fusion pipeline with a full experiment harness (noise, shuffle,
top-k decoupling, latency).
"""

__version__ = "0.1.0"
