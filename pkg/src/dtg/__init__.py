"""Digital twin graphs: entity graphs from sensor series, graph-to-graph
transformation models between entities, ensemble distillation, and
system-wide propagation."""

__version__ = "0.1.0"
