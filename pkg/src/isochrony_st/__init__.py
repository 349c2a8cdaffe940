"""Isochrony-controlled sequence-to-sequence speech translation on numpy.

Modules: ``autodiff`` (arrays + reverse-mode AD), ``optim`` (AdamW),
``data`` (synthetic corpus, target preparation), ``model``, ``training``,
``inference`` (timing-tracking decoding), ``metrics`` and ``cli``.
"""

__version__ = "0.1.0"
