"""User-centric cell-free massive MIMO simulator, max-min power oracle and the
ELU-CosFormer clustering/power model."""

__version__ = "0.1.0"
