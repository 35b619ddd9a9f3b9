"""Motion adaptation and tracking-policy toolkit.

Submodules: ``motion`` (skeletons, sequences, text format), ``synth``
(synthetic gait corpora), ``nn`` (reverse-mode autodiff and Adam),
``adapter`` (shared-codebook periodic autoencoders), ``reward``,
``control`` (toy humanoid, teacher training, distillation),
``evaluation`` and ``cli``.
"""

__version__ = "0.1.0"
