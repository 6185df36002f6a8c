"""Graph-context language modelling: a mini transformer and a GNN fused four ways."""

__version__ = "0.1.0"
