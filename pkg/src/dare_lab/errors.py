from __future__ import annotations


class DareLabError(Exception):
    """Base class for every error raised by the lab."""


class ConfigError(DareLabError):
    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


class DataError(DareLabError):
    pass


class HintFormatError(DataError):
    pass


class DegenerateWeightsError(DareLabError):
    pass


class IntegrityError(DareLabError):
    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (byte offset {offset})")


class BoundInapplicableError(DareLabError):
    def __init__(self, eps_delta: float, b_min: float):
        self.eps_delta = eps_delta
        self.b_min = b_min
        super().__init__(
            f"concentration radius {eps_delta:.6g} >= b_min {b_min:.6g}; bound does not apply"
        )


class SelectionError(DareLabError):
    pass


class NumericalError(DareLabError):
    def __init__(self, message: str, group_id: int | None = None):
        self.group_id = group_id
        super().__init__(message if group_id is None else f"{message} (group prompt_id={group_id})")
