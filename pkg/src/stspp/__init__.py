"""Single-shot instance segmentation toolkit: shape codecs, grid targets, loss,
evaluation, architecture cost accounting and a small numpy training stack."""

__version__ = "0.1.0"
