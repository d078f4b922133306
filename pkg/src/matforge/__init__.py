"""Joint RGB/PBR material generation at desk scale.

Submodules: ``tensor`` (ops, gradients, optimizer, checkpoints), ``render``
(SVBRDF shading), ``procgen`` (procedural corpus), ``vae`` (joint causal VAE),
``dit`` (rectified-flow transformer and adapters), ``pipeline`` (training and
task inference), ``metrics`` and ``cli``.
"""

__version__ = "0.1.0"
