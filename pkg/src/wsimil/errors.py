"""Exception types shared across the toolkit.

``DataError`` and its subclasses mark problems with user-supplied inputs
(malformed manifests, truncated bag files, missing upstream outputs); the
CLI maps them to exit code 2. Contract violations inside the library raise
plain ``ValueError``/``TypeError`` as usual.
"""


class DataError(Exception):
    """A problem with user-supplied data or on-disk pipeline artifacts."""


class ManifestError(DataError):
    """Manifest CSV failed to parse or violates an invariant."""


class BagFormatError(DataError):
    """Embedding-bag file is malformed, truncated or not a bag at all."""


class CheckpointError(DataError):
    """Parameter checkpoint file is malformed or incompatible."""


class StageError(DataError):
    """A pipeline stage is missing its upstream inputs."""


class NonFiniteError(FloatingPointError):
    """A tensor operation produced NaN or Inf."""
