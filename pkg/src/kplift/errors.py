"""Exception hierarchy shared by all kplift modules."""

from __future__ import annotations


class KpliftError(Exception):
    """Base class for every error raised by this package."""


# geometry
class NonPositiveDepth(KpliftError, ValueError):
    pass


class BehindCamera(KpliftError, ValueError):
    pass


# templates
class IllegalPair(KpliftError, ValueError):
    pass


class ParseError(KpliftError, ValueError):
    pass


class InvariantViolation(KpliftError, ValueError):
    """A template set failed validation.

    ``invariant`` names the broken rule and ``class_id`` the offending
    template (``None`` for set-level rules such as the template count).
    """

    def __init__(self, invariant: str, class_id: int | None = None, detail: str = ""):
        self.invariant = invariant
        self.class_id = class_id
        where = "" if class_id is None else f" (template {class_id})"
        msg = f"{invariant}{where}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


# lifting
class NoVisiblePair(KpliftError):
    pass


class DegeneratePair(KpliftError):
    pass


class DegenerateDistribution(KpliftError, ValueError):
    pass


# losses
class InvalidProbability(KpliftError, ValueError):
    pass


# kitti io
class MalformedLine(ParseError):
    def __init__(self, line_no: int, reason: str):
        self.line_no = line_no
        self.reason = reason
        super().__init__(f"line {line_no}: {reason}")


class MissingMatrix(ParseError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"calibration has no {name!r} matrix")


class MalformedMatrix(ParseError):
    pass


# synth
class FrustumExhausted(KpliftError):
    pass


# evaluation
class EmptyGroundTruth(KpliftError):
    pass


class NoMatches(KpliftError):
    pass


class MissingFrame(KpliftError):
    def __init__(self, frame_id: str, path: str = ""):
        self.frame_id = frame_id
        self.path = path
        super().__init__(f"missing frame {frame_id}" + (f" ({path})" if path else ""))
