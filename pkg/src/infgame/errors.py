"""Exception types shared across the package."""


class InfGameError(Exception):
    """Base class for errors raised by infgame."""


class InvalidSpecError(InfGameError, ValueError):
    """A domain, oracle or config description is degenerate or malformed."""


class CoarseGridError(InfGameError, ValueError):
    def __init__(self, spacing, max_spacing):
        self.spacing = spacing
        self.max_spacing = max_spacing
        super().__init__(
            f"spacing {spacing:g} too coarse for domain; need spacing <= {max_spacing:g}"
        )


class DomainError(InfGameError, ValueError):
    """An argument lies outside the set where an operation is defined."""


class OutsideDomainError(DomainError):
    """(p, S) is in neither the nondegenerate-gradient set nor the isotropic set."""


class DegenerateGradientError(DomainError):
    pass


class NearBoundaryError(DomainError):
    """A finite-difference stencil or interpolation cell leaves the closed domain."""


class NonConvergenceError(InfGameError, RuntimeError):
    def __init__(self, sweeps, residual, tol):
        self.sweeps = sweeps
        self.residual = residual
        self.tol = tol
        super().__init__(
            f"no convergence after {sweeps} sweeps: last change {residual:.3e} > tol {tol:.3e}"
        )
