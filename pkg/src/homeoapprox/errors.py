"""Exception types shared across the package."""

from __future__ import annotations


class InvalidArgumentError(ValueError):
    pass


class MeshParseError(ValueError):
    """Malformed mesh or map JSON. The message carries line or field context."""


class DegenerateTriangleError(ArithmeticError):
    def __init__(self, triangle: int, area: float):
        super().__init__(f"triangle {triangle} is degenerate (signed area {area!r})")
        self.triangle = triangle
        self.area = area


class OrientationError(ValueError):
    def __init__(self, triangles):
        triangles = [int(t) for t in triangles]
        shown = ", ".join(str(t) for t in triangles[:20])
        more = "" if len(triangles) <= 20 else f" (+{len(triangles) - 20} more)"
        super().__init__(f"nonpositive Jacobian on triangles [{shown}]{more}")
        self.triangles = triangles


class DomainError(ValueError):
    pass


class NonConvergenceError(RuntimeError):
    """Solver gave up. ``report`` holds the iteration history."""

    def __init__(self, message: str, report):
        super().__init__(message)
        self.report = report


class ResourceError(RuntimeError):
    pass


class ConsistencyError(RuntimeError):
    pass


class PreconditionError(ValueError):
    def __init__(self, message: str, failing=None):
        super().__init__(message)
        self.failing = list(failing or [])
