"""Multi-step meta-learned model editing on a toy language model.

Submodules, bottom up:

``numcore``     tape-based reverse-mode autodiff on float64 numpy arrays
``toylm``       the editable toy language model
``factsynth``   synthetic fact-editing corpora
``hypernet``    gradient-transforming hypernetworks and their optimizer
``editengine``  turning transformed gradients into weight updates
``metatrain``   meta-losses and the hypernetwork trainers
``evalprof``    editing metrics, training-time profiler, report files
``harness``     configuration, checkpoints, experiments and the CLI
"""

__version__ = "0.1.0"
