"""Admissible values for every pattern hyper-parameter.

Slot order is the order in which the controller emits tokens.
"""

CONV_SLOTS: tuple[tuple[str, tuple], ...] = (
    ("size", (0, 1, 2, 3, 4)),  # multiplier k; rectangle side is k * (d // 5)
    ("stride", (1, 2, 4, 8, 16)),
    ("repeat", tuple(range(1, 33))),
    ("share_c", (False, True)),
    ("residual", (False, True)),
    ("rotate", (0, 15, 30, 45, 60, 75)),
    ("shear_x", tuple(round(0.05 * i, 2) for i in range(12))),
    ("shear_y", tuple(round(0.05 * i, 2) for i in range(12))),
)

TRANSFORMER_SLOTS: tuple[tuple[str, tuple], ...] = (
    ("size", (0, 10, 20, 30, 40, 50, 60, 70)),
    ("stride", (0, 5, 10, 15, 20)),
    ("share_t", (False, True)),
    ("share_c", (False, True)),
)

TRANSFORMER_SITES: tuple[str, ...] = (
    "query", "key", "value", "attn_probs",
    "out_proj", "attn_residual", "ffn_inner", "ffn_output",
)

CONV_VALUES = dict(CONV_SLOTS)
TRANSFORMER_VALUES = dict(TRANSFORMER_SLOTS)
