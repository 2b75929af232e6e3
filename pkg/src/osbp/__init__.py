"""Open-set domain adaptation by backpropagation, in NumPy.

Submodules: ``nn`` (layers, losses, optimizers, gradient checking),
``model`` (the K+1-way adversarial trainer), ``baselines``, ``data``,
``evaluation``, ``config`` and ``cli``.
"""

__version__ = "0.1.0"
