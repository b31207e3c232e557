"""semidet: a desk-scale teacher-student semi-supervised detection lab."""

__version__ = "0.1.0"
