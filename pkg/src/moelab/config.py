"""Default hyperparameters, collected in one place so demos and harness
commands share them; every value can be overridden from the CLI."""

from dataclasses import dataclass


@dataclass(frozen=True)
class Defaults:
    n_experts: int = 16
    top_k: int = 4
    disjoint_top_k: int = 2
    ffn_hidden: int = 512
    moe_layers: int = 3
    time_embed_dim: int = 64  # d_h of each time-embedding head
    attention_dim: int = 128  # width of the Q/K projections
    attention_heads: int = 8
    t_max_hours: float = 48.0


DEFAULTS = Defaults()
