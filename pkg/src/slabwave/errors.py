"""Exception types shared across the solver."""


class SlabwaveError(Exception):
    """Base class for all solver errors."""


class GridMismatch(SlabwaveError):
    """Fields on incompatible grids (mode counts or torus periods differ)."""


class ConfigError(SlabwaveError):
    """Invalid run configuration; carries one message per offending key."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class DiffeomorphismLost(SlabwaveError):
    """The flattening map degenerated: min J dropped to or below the floor."""

    def __init__(self, min_j, floor):
        self.min_j = float(min_j)
        self.floor = floor
        super().__init__(
            f"flattening map lost invertibility: min J = {self.min_j:.6g} "
            f"<= floor {floor:.6g}"
        )


class NonContraction(SlabwaveError):
    """Picard iteration failed to contract (surface too large/steep).

    Carries the successive-difference history so callers can inspect the
    divergence rate.
    """

    def __init__(self, message, residual_history):
        self.residual_history = list(residual_history)
        super().__init__(message)
