"""Online point tracker with streaming/collision memory, plus a point-based
object association engine, a synthetic-clip harness, and a small training loop.
Everything runs on a hand-rolled numpy autodiff core."""

__version__ = "0.1.0"
