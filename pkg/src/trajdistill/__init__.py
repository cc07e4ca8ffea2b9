"""Dataset distillation by trajectory matching with an angle term and staged unit selection."""

__version__ = "0.1.0"
