#!/usr/bin/env python3
"""
Exception types raised across the package.
"""


class LegoError(Exception):
    """Base class for all package errors."""


class ConfigurationError(LegoError, ValueError):
    """A setting, file geometry or hyperparameter is unusable."""


class ValidationError(LegoError, ValueError):
    """An input value or tensor shape violates an operation's contract."""


class DivergenceError(LegoError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, task: str, step: int, value: float):
        self.task = task
        self.step = step
        self.value = value
        super().__init__(
            f"Non-finite {task} loss ({value}) at step {step}; aborting"
        )


class IntegrityError(LegoError):
    """A stored content hash does not match the file contents."""
