"""Federated LLM-routing simulator: MLP and K-means routers trained across clients."""

__version__ = "0.1.0"
