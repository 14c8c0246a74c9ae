"""Configuration, checkpoints, canned experiments and the ``stepedit`` CLI."""
