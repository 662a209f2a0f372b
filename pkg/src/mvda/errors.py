"""Exception types shared across the package.

The CLI maps these onto exit codes: usage errors exit 1, DataError exits 2,
NumericError exits 3.
"""


class DataError(Exception):
    """Malformed or inconsistent input data (manifests, configs, checkpoints)."""


class ManifestError(DataError):
    """Manifest-specific violation: parse failure, duplicate keys, missing labels."""


class NumericError(Exception):
    """Non-finite loss or gradient encountered during training."""
