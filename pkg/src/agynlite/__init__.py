"""agynlite: a desk-scale control plane for stateful serverless AI-agent workloads."""

__version__ = "0.1.0"
