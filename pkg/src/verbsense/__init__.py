"""Cross-lingual visual verb sense disambiguation and constrained decoding.

Submodules are imported explicitly (``from verbsense import corpus``, ...)
rather than re-exported here, so the CLI can cap numeric-library threading
before anything heavy loads.
"""

__version__ = "0.1.0"
