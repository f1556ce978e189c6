"""densemtl: desk-scale multi-task dense prediction with cross-task attention exchange."""

__version__ = "0.1.0"
