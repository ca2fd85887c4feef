"""Exception hierarchy shared by every module."""

from __future__ import annotations


class MhysError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(MhysError, ValueError):
    """Array dimensions do not line up."""


class ContractError(MhysError, ValueError):
    """An input violates a documented precondition."""


class CorpusParseError(MhysError):
    """A corpus or query file line could not be parsed."""

    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}" if where else message)


class CorpusIntegrityError(MhysError):
    """Corpus content is structurally valid but inconsistent."""


class TrainingError(MhysError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int, step: int, loss: float):
        self.epoch = epoch
        self.step = step
        self.loss = loss
        super().__init__(f"loss diverged to {loss!r} at epoch {epoch}, step {step}")
